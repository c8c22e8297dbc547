fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    if std::env::var_os("CARGO_FEATURE_GENERATE_HEADER").is_some() {
        generate();
    }
}

#[cfg(feature = "generate-header")]
fn generate() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("cargo sets CARGO_MANIFEST_DIR");
    let config = cbindgen::Config::from_file(format!("{crate_dir}/cbindgen.toml"))
        .expect("cbindgen.toml parses");
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation from src/lib.rs")
        .write_to_file(format!("{crate_dir}/include/cmap.h"));
}

#[cfg(not(feature = "generate-header"))]
fn generate() {
    // The env var and the cfg come from the same feature resolution, so
    // this arm is unreachable; a panic here would mean they diverged.
    unreachable!("generate-header env flag set but the feature cfg is off");
}
