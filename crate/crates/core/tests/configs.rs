use std::path::Path;

use pacmeta::commands::load_run_config;

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "conf") {
            let cfg = load_run_config(&path, &[], None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(cfg.run_name, path.file_stem().unwrap().to_string_lossy());
            seen += 1;
        }
    }
    assert_eq!(seen, 4);
}
