//! Regenerates include/encbridge.h from the extern "C" surface in src/lib.rs.
//! The header is committed so C consumers don't need cbindgen; a failed
//! generation (e.g. no cbindgen available) keeps the committed copy.

use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = match cbindgen::Config::from_file(crate_dir.join("cbindgen.toml")) {
        Ok(c) => c,
        Err(err) => {
            println!("cargo:warning=failed to read cbindgen.toml ({err}); keeping committed header");
            return;
        }
    };
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            // write_to_file leaves the file untouched when unchanged, so this
            // doesn't trigger rebuild loops.
            bindings.write_to_file(crate_dir.join("include/encbridge.h"));
        }
        Err(err) => {
            println!("cargo:warning=cbindgen failed ({err}); keeping committed header");
        }
    }
}
