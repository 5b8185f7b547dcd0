//! Flow-record ingestion, encoding and splitting.
//!
//! CSV tables come in with a header row, a binary label column and (before
//! [`drop_identifiers`]) the five flow-identifier columns. Encoding is fitted
//! on the training split only: numeric columns are min-max scaled, categorical
//! columns are integer-encoded (sorted category order) and then min-max
//! scaled, with one reserved index for categories first seen at test time.
//! Every encoded value lands in [0, 1].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{GRID_SIDE, INPUT_FEATURES};
use crate::par;

/// Flow identifier columns removed before encoding.
pub const IDENTIFIER_COLUMNS: [&str; 5] = ["ts", "src_ip", "dst_ip", "src_port", "dst_port"];

pub const DEFAULT_LABEL_COLUMN: &str = "label";
pub const DEFAULT_ATTACK_TYPE_COLUMN: &str = "type";

pub const SCHEMA_VERSION: u32 = 1;

/// Raw parsed CSV: all cells kept as text until encoding decides their kind.
#[derive(Debug, Clone)]
pub struct RawFlowTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub label_column: String,
    /// Attack-type column; validated if present, never encoded.
    pub attack_type_column: Option<String>,
    pub labels: Vec<u8>,
}

impl RawFlowTable {
    /// (benign, malicious) row counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let malicious = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - malicious, malicious)
    }

    fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Indices of feature columns (everything except label and attack type).
    fn feature_indices(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.as_str() != self.label_column
                    && Some(c.as_str()) != self.attack_type_column.as_deref()
            })
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    /// Min-max scaled with train-split statistics.
    Numeric { min: f64, max: f64 },
    /// Sorted category -> index map; index `categories.len()` is reserved
    /// for values unseen at fit time.
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub version: u32,
    pub columns: Vec<FeatureColumn>,
}

impl FeatureSchema {
    /// Identity schema for already-encoded numeric data in [0, 1].
    pub fn unit_numeric(names: &[String]) -> FeatureSchema {
        FeatureSchema {
            version: SCHEMA_VERSION,
            columns: names
                .iter()
                .map(|n| FeatureColumn {
                    name: n.clone(),
                    kind: ColumnKind::Numeric { min: 0.0, max: 1.0 },
                })
                .collect(),
        }
    }
}

/// Encoded samples: rows of 39 features in [0, 1] plus binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Matrix,
    pub labels: Vec<u8>,
    pub schema: Arc<FeatureSchema>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let malicious = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - malicious, malicious)
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            schema: Arc::clone(&self.schema),
        }
    }
}

fn map_label(value: &str) -> Option<u8> {
    match value.trim() {
        "0" | "normal" | "Normal" | "benign" | "Benign" => Some(0),
        "1" | "attack" | "Attack" | "malicious" | "Malicious" => Some(1),
        _ => None,
    }
}

/// Parse a flow CSV with a header row. The label column must hold exactly two
/// distinct symbols mappable to benign/malicious. `schema_hint`, when given,
/// requires every schema feature column to be present.
pub fn load_flow_csv(path: &Path, schema_hint: Option<&FeatureSchema>) -> Result<RawFlowTable> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let columns: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let label_column = DEFAULT_LABEL_COLUMN.to_string();
    let label_idx = columns
        .iter()
        .position(|c| c == &label_column)
        .ok_or_else(|| Error::HeaderMismatch(format!("label column `{label_column}` absent")))?;
    if let Some(schema) = schema_hint {
        for col in &schema.columns {
            if !columns.iter().any(|c| c == &col.name) {
                return Err(Error::HeaderMismatch(format!(
                    "schema column `{}` absent from header",
                    col.name
                )));
            }
        }
    }
    let attack_type_column = columns
        .iter()
        .find(|c| c.as_str() == DEFAULT_ATTACK_TYPE_COLUMN)
        .cloned();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != columns.len() {
            return Err(Error::RowArity {
                row: i,
                expected: columns.len(),
                found: record.len(),
            });
        }
        let cells: Vec<String> = record.iter().map(|c| c.to_string()).collect();
        let label = map_label(&cells[label_idx]).ok_or_else(|| Error::LabelColumn {
            column: label_column.clone(),
            reason: format!("unmappable value `{}` in row {i}", cells[label_idx]),
        })?;
        labels.push(label);
        rows.push(cells);
    }

    Ok(RawFlowTable {
        columns,
        rows,
        label_column,
        attack_type_column,
        labels,
    })
}

/// Remove the five flow-identifier columns, preserving the order of the rest.
pub fn drop_identifiers(table: &RawFlowTable) -> Result<RawFlowTable> {
    for id in IDENTIFIER_COLUMNS {
        if table.column_index(id).is_none() {
            return Err(Error::IdentifierMissing(id.to_string()));
        }
    }
    let keep: Vec<usize> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| !IDENTIFIER_COLUMNS.contains(&c.as_str()))
        .map(|(i, _)| i)
        .collect();
    Ok(RawFlowTable {
        columns: keep.iter().map(|&i| table.columns[i].clone()).collect(),
        rows: table
            .rows
            .iter()
            .map(|r| keep.iter().map(|&i| r[i].clone()).collect())
            .collect(),
        label_column: table.label_column.clone(),
        attack_type_column: table.attack_type_column.clone(),
        labels: table.labels.clone(),
    })
}

fn parse_numeric(cell: &str) -> Option<f64> {
    let t = cell.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok()
}

/// Fit encodings on a training table (identifiers already dropped) and encode
/// it. Categorical columns are integer-encoded then min-max scaled; numeric
/// columns min-max scaled; constant columns map to 0.
pub fn fit_encode_normalize(train: &RawFlowTable) -> Result<(FeatureSchema, FeatureMatrix)> {
    let feature_idx = train.feature_indices();
    let mut columns = Vec::with_capacity(feature_idx.len());
    for &ci in &feature_idx {
        let name = train.columns[ci].clone();
        // numeric iff every cell parses; any parsed NaN/inf is an input error
        let mut numeric = true;
        for row in &train.rows {
            match parse_numeric(&row[ci]) {
                Some(v) if v.is_finite() => {}
                Some(_) => {
                    return Err(Error::NonFiniteInput {
                        column: name,
                        row: train.rows.iter().position(|r| {
                            parse_numeric(&r[ci]).is_some_and(|v| !v.is_finite())
                        }).unwrap_or(0),
                    })
                }
                None => {
                    numeric = false;
                    break;
                }
            }
        }
        let kind = if numeric {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for row in &train.rows {
                let v = parse_numeric(&row[ci]).unwrap_or(0.0);
                min = min.min(v);
                max = max.max(v);
            }
            if train.rows.is_empty() {
                min = 0.0;
                max = 0.0;
            }
            ColumnKind::Numeric { min, max }
        } else {
            let mut set: BTreeMap<&str, ()> = BTreeMap::new();
            for row in &train.rows {
                set.insert(row[ci].as_str(), ());
            }
            ColumnKind::Categorical {
                categories: set.keys().map(|s| s.to_string()).collect(),
            }
        };
        columns.push(FeatureColumn { name, kind });
    }
    let schema = FeatureSchema {
        version: SCHEMA_VERSION,
        columns,
    };
    let matrix = apply_schema(train, &schema)?;
    Ok((schema, matrix))
}

fn scale_minmax(v: f64, min: f64, max: f64) -> f64 {
    if max > min {
        ((v - min) / (max - min)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Encode a table with a frozen schema. Unseen categories take the reserved
/// index; numeric values outside the fitted range clamp to [0, 1].
pub fn apply_schema(table: &RawFlowTable, schema: &FeatureSchema) -> Result<FeatureMatrix> {
    let mut col_at = Vec::with_capacity(schema.columns.len());
    for col in &schema.columns {
        col_at.push(
            table
                .column_index(&col.name)
                .ok_or_else(|| Error::SchemaColumnMissing(col.name.clone()))?,
        );
    }
    let n = table.rows.len();
    let width = schema.columns.len();

    let encode_row = |ri: usize| -> Result<Vec<f64>> {
        let row = &table.rows[ri];
        let mut out = Vec::with_capacity(width);
        for (k, col) in schema.columns.iter().enumerate() {
            let cell = &row[col_at[k]];
            let v = match &col.kind {
                ColumnKind::Numeric { min, max } => {
                    let v = parse_numeric(cell).ok_or_else(|| Error::NonFiniteInput {
                        column: col.name.clone(),
                        row: ri,
                    })?;
                    if !v.is_finite() {
                        return Err(Error::NonFiniteInput {
                            column: col.name.clone(),
                            row: ri,
                        });
                    }
                    scale_minmax(v, *min, *max)
                }
                ColumnKind::Categorical { categories } => {
                    let idx = categories
                        .binary_search_by(|c| c.as_str().cmp(cell.as_str()))
                        .unwrap_or(categories.len());
                    // train indices span 0..len-1; the reserved index clamps to 1
                    scale_minmax(idx as f64, 0.0, (categories.len() - 1).max(1) as f64)
                }
            };
            out.push(v);
        }
        Ok(out)
    };

    let chunks: Vec<Result<Vec<Vec<f64>>>> = par::map_chunks(
        &(0..n).collect::<Vec<_>>(),
        par::GRAD_CHUNKS,
        |idxs| idxs.iter().map(|&i| encode_row(i)).collect(),
    );
    let mut data = Vec::with_capacity(n * width);
    for chunk in chunks {
        for row in chunk? {
            data.extend_from_slice(&row);
        }
    }
    Ok(FeatureMatrix {
        data: Matrix::from_vec(n, width, data)?,
        labels: table.labels.clone(),
        schema: Arc::new(schema.clone()),
    })
}

/// Stratified train/validation/test split. Per-class counts follow the
/// fractions with largest-remainder rounding, so each split's class balance
/// matches the global balance within one sample. Same seed, same split.
pub fn stratified_split(
    matrix: &FeatureMatrix,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(FeatureMatrix, FeatureMatrix, FeatureMatrix)> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split_indices: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..matrix.len())
            .filter(|&i| matrix.labels[i] == class)
            .collect();
        if idx.len() < 3 {
            return Err(Error::EmptyClass {
                label: class,
                count: idx.len(),
                splits: 3,
            });
        }
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), &[ft, fv, fs]);
        let mut start = 0;
        for (s, &c) in counts.iter().enumerate() {
            split_indices[s].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    for s in &mut split_indices {
        s.sort_unstable();
    }
    let [train, val, test] = split_indices;
    Ok((matrix.select(&train), matrix.select(&val), matrix.select(&test)))
}

/// Integer allocation of `n` over `fractions`, exact total, remainders to the
/// largest fractional parts (ties to the earlier split).
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut k = 0;
    while assigned < n {
        counts[order[k % order.len()]] += 1;
        assigned += 1;
        k += 1;
    }
    counts
}

// Synthetic fixture geometry. Labels shift the feature means along a fixed
// direction; the projection margin over the noise scale puts the generating
// linear rule at roughly 0.98 accuracy.
const SYNTH_MARGIN: f64 = 0.17;
const SYNTH_NOISE: f64 = 0.08;

fn synth_direction() -> [f64; INPUT_FEATURES] {
    let mut u = [0.0; INPUT_FEATURES];
    for (j, v) in u.iter_mut().enumerate() {
        // a few flat entries keep some features uninformative
        *v = if j % 5 == 4 {
            0.0
        } else {
            ((j % 7) + 1) as f64
        };
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut u {
        *v /= norm;
    }
    u
}

/// Accuracy of the generating linear rule on a matrix; the fixture is built so
/// this exceeds 0.95.
pub fn synth_oracle_accuracy(matrix: &FeatureMatrix) -> f64 {
    let u = synth_direction();
    let mut hits = 0usize;
    for (i, row) in matrix.data.iter_rows().enumerate() {
        let s: f64 = row.iter().zip(u.iter()).map(|(x, w)| (x - 0.5) * w).sum();
        let pred = u8::from(s > 0.0);
        hits += usize::from(pred == matrix.labels[i]);
    }
    hits as f64 / matrix.len() as f64
}

/// Generate `n` synthetic flow rows with the given malicious fraction.
/// Deterministic in `seed` and independent of chunking (each row derives its
/// own stream from (seed, row)).
pub fn synth_flows(n: usize, class_ratio: f64, seed: u64) -> Result<FeatureMatrix> {
    if n < 2 {
        return Err(Error::InvalidParam(format!("need n >= 2, got {n}")));
    }
    if !(class_ratio > 0.0 && class_ratio < 1.0) {
        return Err(Error::InvalidParam(format!(
            "class_ratio must be in (0, 1), got {class_ratio}"
        )));
    }
    let malicious = ((n as f64) * class_ratio).round() as usize;
    let malicious = malicious.clamp(1, n - 1);
    let u = synth_direction();

    let rows: Vec<(Vec<f64>, u8)> = par::map_indexed(n, |i| {
        let label = u8::from(i < malicious);
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut row = Vec::with_capacity(INPUT_FEATURES);
        for &uj in u.iter() {
            let noise = gaussian(&mut rng) * SYNTH_NOISE;
            row.push((0.5 + sign * SYNTH_MARGIN * uj + noise).clamp(0.0, 1.0));
        }
        (row, label)
    });

    let mut data = Vec::with_capacity(n * INPUT_FEATURES);
    let mut labels = Vec::with_capacity(n);
    for (row, label) in rows {
        data.extend_from_slice(&row);
        labels.push(label);
    }
    let names: Vec<String> = (0..INPUT_FEATURES).map(|j| format!("f{j:02}")).collect();
    Ok(FeatureMatrix {
        data: Matrix::from_vec(n, INPUT_FEATURES, data)?,
        labels,
        schema: Arc::new(FeatureSchema::unit_numeric(&names)),
    })
}

/// Box-Muller; two uniforms, one normal deviate.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Lay a 39-vector into an 8x8 single-channel grid, row-major, zero padded.
pub fn reshape_grid(vector: &[f64]) -> Result<Vec<f64>> {
    if vector.len() != INPUT_FEATURES {
        return Err(Error::WrongLength {
            expected: INPUT_FEATURES,
            found: vector.len(),
        });
    }
    let mut grid = vec![0.0; GRID_SIDE * GRID_SIDE];
    grid[..INPUT_FEATURES].copy_from_slice(vector);
    Ok(grid)
}

// --- schema file (key-value text, versioned) ---

fn encode_component(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            ',' => out.push_str("%2c"),
            '\n' => out.push_str("%0a"),
            '\r' => out.push_str("%0d"),
            _ => out.push(c),
        }
    }
    out
}

fn decode_component(s: &str) -> String {
    s.replace("%2c", ",")
        .replace("%0a", "\n")
        .replace("%0d", "\r")
        .replace("%25", "%")
}

pub fn save_schema(schema: &FeatureSchema, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("schema_version = {}\n", schema.version));
    for (i, col) in schema.columns.iter().enumerate() {
        out.push_str(&format!("column.{i}.name = {}\n", encode_component(&col.name)));
        match &col.kind {
            ColumnKind::Numeric { min, max } => {
                out.push_str(&format!("column.{i}.kind = numeric\n"));
                out.push_str(&format!("column.{i}.min = {min}\n"));
                out.push_str(&format!("column.{i}.max = {max}\n"));
            }
            ColumnKind::Categorical { categories } => {
                out.push_str(&format!("column.{i}.kind = categorical\n"));
                let joined: Vec<String> =
                    categories.iter().map(|c| encode_component(c)).collect();
                out.push_str(&format!("column.{i}.categories = {}\n", joined.join(",")));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_schema(path: &Path) -> Result<FeatureSchema> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let version: u32 = pairs
        .get("schema_version")
        .ok_or_else(|| Error::Format("schema_version missing".into()))?
        .parse()
        .map_err(|_| Error::Format("bad schema_version".into()))?;
    if version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema version {version}"
        )));
    }
    let mut columns = Vec::new();
    for i in 0.. {
        let Some(name) = pairs.get(&format!("column.{i}.name")) else {
            break;
        };
        let kind = pairs
            .get(&format!("column.{i}.kind"))
            .ok_or_else(|| Error::Format(format!("column.{i}.kind missing")))?;
        let kind = match kind.as_str() {
            "numeric" => ColumnKind::Numeric {
                min: pairs
                    .get(&format!("column.{i}.min"))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("column.{i}.min missing")))?,
                max: pairs
                    .get(&format!("column.{i}.max"))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("column.{i}.max missing")))?,
            },
            "categorical" => ColumnKind::Categorical {
                categories: pairs
                    .get(&format!("column.{i}.categories"))
                    .map(|v| {
                        if v.is_empty() {
                            Vec::new()
                        } else {
                            v.split(',').map(decode_component).collect()
                        }
                    })
                    .ok_or_else(|| Error::Format(format!("column.{i}.categories missing")))?,
            },
            other => return Err(Error::Format(format!("unknown column kind {other}"))),
        };
        columns.push(FeatureColumn {
            name: decode_component(name),
            kind,
        });
    }
    Ok(FeatureSchema { version, columns })
}
