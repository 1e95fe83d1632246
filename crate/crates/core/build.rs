fn main() {
    // System OpenBLAS bundles the LAPACK drivers bound in src/linalg/lapack.rs.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
