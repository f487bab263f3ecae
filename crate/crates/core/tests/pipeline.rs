use std::path::Path;

use mstdyn::ingest::write_prices;
use mstdyn::pipeline::{run_pipeline, validate_config, Manifest};
use mstdyn::synthgen::{generate_panel, FactorModelSpec, FIRST_PRICE_DATE};

fn write_panel(path: &Path, n: usize, days: usize, seed: u64) {
    let spec = FactorModelSpec::uniform(n, days, 0.8, 0.02, seed);
    let prices = generate_panel(&spec).unwrap().to_prices(FIRST_PRICE_DATE, 100.0).unwrap();
    write_prices(&prices, std::fs::File::create(path).unwrap()).unwrap();
}

fn run(dir: &Path, extra: &str) -> Manifest {
    let text = format!(
        "input = {}\noutput_dir = {}\nwidth_td = 50\nkinetics = true\nmin_samples = 5\nk_cap = 8\nfits = true\nlambda_half_width = 20\nsnapshots_from = 0\nsnapshots_to = 3\n{extra}",
        dir.join("prices.csv").display(),
        dir.join("out").display()
    );
    run_pipeline(&validate_config(&text).unwrap()).unwrap()
}

#[test]
fn full_run_writes_every_output_with_checksums() {
    let dir = tempfile::tempdir().unwrap();
    write_panel(&dir.path().join("prices.csv"), 20, 300, 7);
    let m = run(dir.path(), "");
    assert_eq!(m.n_assets, 20);
    assert_eq!(m.frames_total, 300 - 50 + 1);
    assert!(m.skipped_frames.is_empty());
    let files: Vec<&str> = m.outputs.iter().map(|o| o.file.as_str()).collect();
    for f in [
        "structure.csv",
        "powerlaw.csv",
        "ranks.csv",
        "thsd.csv",
        "variogram.csv",
        "partial_variances.csv",
        "kernel_empirical.json",
        "detailed_balance.csv",
        "kinetics_summary.json",
        "fits.json",
        "frames/frame_0.dot",
        "frames/frame_3.dot",
    ] {
        assert!(files.contains(&f), "{f} missing from {files:?}");
    }
    for o in &m.outputs {
        let bytes = std::fs::read(dir.path().join("out").join(&o.file)).unwrap();
        assert_eq!(o.sha256.len(), 64);
        assert!(!bytes.is_empty(), "{}", o.file);
    }
    let on_disk: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, m);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_panel(&dir.path().join("prices.csv"), 15, 200, 3);
    let a = run(dir.path(), "threads = 1");
    let b = run(dir.path(), "threads = 4");
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.outputs, b.outputs);
}

#[test]
fn failed_stage_leaves_incomplete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("prices.csv"), "date,ticker,close\n2000-01-03,AAA,abc\n").unwrap();
    let text = format!(
        "input = {}\noutput_dir = {}\n",
        dir.path().join("prices.csv").display(),
        dir.path().join("out").display()
    );
    let err = run_pipeline(&validate_config(&text).unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("ingest"), "{err}");
    let m: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert!(!m.complete);
    assert!(m.error.is_some());
}
