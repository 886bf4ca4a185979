fn main() {
    println!("sizemorph");
}
