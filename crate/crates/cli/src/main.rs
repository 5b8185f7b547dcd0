fn main() {
    println!("enid");
}
