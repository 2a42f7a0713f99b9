use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(PathBuf::from(&crate_dir).join("cbindgen.toml"))
        .expect("cbindgen.toml should parse");
    let out = PathBuf::from(&crate_dir).join("include").join("seqwatch.h");
    match cbindgen::Builder::new().with_crate(&crate_dir).with_config(config).generate() {
        Ok(bindings) => {
            bindings.write_to_file(out);
        }
        // keep building when the header cannot be regenerated (e.g. a
        // half-edited source); the checked-in header stays as it was
        Err(e) => println!("cargo:warning=header not regenerated: {e}"),
    }
}
