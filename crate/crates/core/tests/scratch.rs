use enid_core::dataset::{stratified_split, synth_flows, synth_oracle_accuracy};
use enid_core::gradcheck::{max_gradient_error, random_check_case, CheckKind, ALL_KINDS};
use enid_core::model::build_ff;
use enid_core::trainer::{evaluate, train, TrainConfig};

#[test]
#[ignore]
fn probe_training() {
    let m = synth_flows(2000, 0.5, 17).unwrap();
    println!("oracle accuracy: {}", synth_oracle_accuracy(&m));
    let (tr, va, _) = stratified_split(&m, (0.8, 0.1, 0.1), 17).unwrap();
    for batch in [32usize, 64, 128] {
        for lr in [0.01, 0.02, 0.05] {
            let net = build_ff(2, 17).unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                batch_size: batch,
                learning_rate: lr,
                early_stop_patience: 10,
                ..TrainConfig::default()
            };
            let (trained, history) = train(&net, &tr, &va, &cfg).unwrap();
            let f1s: Vec<String> = history
                .epochs
                .iter()
                .map(|e| format!("{:.3}", e.val_macro_f1))
                .collect();
            let report = evaluate(&trained, &va).unwrap();
            println!(
                "batch={batch} lr={lr}: best {:.4}, history {}",
                report.macro_f1,
                f1s.join(" ")
            );
        }
    }
}

#[test]
#[ignore]
fn probe_gradcheck() {
    for kind in ALL_KINDS {
        for case in 0..5 {
            let seed = 100 + case;
            let (net, batch, labels) = random_check_case(kind, seed);
            let err = max_gradient_error(&net, &batch, &labels, (1.0, 1.0), 1e-4).unwrap();
            println!("{kind:?} case {case} (seed {seed}): err {err:.3e}");
        }
    }
    let (net, batch, labels) = random_check_case(CheckKind::PoolStack, 5);
    let err = max_gradient_error(&net, &batch, &labels, (3.0, 0.25), 1e-4).unwrap();
    println!("PoolStack weighted: {err:.3e}");
}
