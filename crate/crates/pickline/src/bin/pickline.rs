fn main() {
    println!("pickline");
}
