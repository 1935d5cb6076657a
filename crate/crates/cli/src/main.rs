fn main() {
    println!("tricheck");
}
