fn main() {
    // cblas symbols for ndarray matrix products come from the system OpenBLAS
    println!("cargo:rustc-link-lib=openblas");
}
