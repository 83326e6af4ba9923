fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let header = std::path::Path::new(&crate_dir).join("include/mdnet.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("MDNET_H".into()),
        cpp_compat: true,
        documentation: true,
        header: Some("/* C interface for the mdnet multi-domain network toolkit. */".into()),
        usize_is_size_t: true,
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: true,
            rename_variants: cbindgen::RenameRule::ScreamingSnakeCase,
            ..Default::default()
        },
        ..Default::default()
    };

    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        // Header generation is best-effort: a parse hiccup must not break
        // `cargo build`, and the committed header stays usable.
        Err(err) => println!("cargo:warning=cbindgen skipped: {err}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
