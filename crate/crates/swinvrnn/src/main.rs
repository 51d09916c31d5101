fn main() {
    println!("swinvrnn");
}
