fn main() {
    println!("brc: placeholder");
}
