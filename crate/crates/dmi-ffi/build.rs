//! Regenerates include/dmi.h from the extern "C" surface on every build.
//! The header is committed so C consumers never need the Rust toolchain;
//! cbindgen only rewrites the file when the interface actually changed.

use std::path::PathBuf;

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml"))
        .expect("cbindgen.toml must parse");
    let bindings = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("the C header must generate from the extern surface");
    bindings.write_to_file(crate_dir.join("include").join("dmi.h"));
}
