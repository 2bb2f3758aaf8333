use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use stigmagraph_core::pipeline::{build_gateway, run_pipeline, Assets, PipelineConfig, ARTIFACTS, MANIFEST, TRIPLES, GRAPH, METRICS};

fn demo_config(out: &std::path::Path) -> PipelineConfig {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../cli/fixtures/demo");
    let mut cfg = PipelineConfig::load(&dir.join("demo.toml")).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.force_mock();
    cfg
}

fn run(cfg: &PipelineConfig) -> stigmagraph_core::pipeline::PipelineReport {
    let assets = Assets::load(&cfg.assets).unwrap();
    let gw = build_gateway(cfg, &assets).unwrap();
    run_pipeline(cfg, &gw, &assets).unwrap()
}

#[test]
fn demo_pipeline_is_deterministic_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let ra = run(&demo_config(a.path()));
    assert!(start.elapsed().as_secs() < 60);
    let rb = run(&demo_config(b.path()));
    assert_eq!(ra.manifest, rb.manifest);
    assert_eq!(ra.manifest.artifacts.len(), ARTIFACTS.len());
    assert_eq!(
        fs::read(a.path().join(MANIFEST)).unwrap(),
        fs::read(b.path().join(MANIFEST)).unwrap()
    );
    assert_eq!(ra.regenerated.len(), 9);

    // Untouched outputs are reused wholesale.
    let again = run(&demo_config(a.path()));
    assert!(again.regenerated.is_empty());
    assert_eq!(again.manifest, ra.manifest);

    // Deleting an intermediate regenerates it and nothing upstream.
    fs::remove_file(a.path().join(TRIPLES)).unwrap();
    fs::remove_file(a.path().join(METRICS)).unwrap();
    let resumed = run(&demo_config(a.path()));
    assert_eq!(resumed.regenerated, vec![TRIPLES.to_string(), METRICS.to_string()]);
    assert_eq!(resumed.manifest, ra.manifest);

    // Corrupting an artifact is detected through its hash.
    fs::write(a.path().join(GRAPH), b"{}").unwrap();
    let fixed = run(&demo_config(a.path()));
    assert!(fixed.regenerated.contains(&GRAPH.to_string()));
    assert_eq!(fixed.manifest, ra.manifest);
}
