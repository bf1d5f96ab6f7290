use std::path::Path;

use depstream::config::PipelineConfig;
use depstream::corpus::{build_manifest, extract_and_align};
use depstream::fixture::{self, FixtureSpec};
use depstream::geom::AlignmentMode;

/// Writes the eight-video corpus under `dir`, builds the manifest and the
/// crops of both streams, and returns a matching configuration.
pub fn prepared(dir: &Path, extra: &str) -> PipelineConfig {
    let raw = dir.join("raw");
    let spec = FixtureSpec::eight_videos(11);
    fixture::write_corpus(&raw, &spec).unwrap();
    let text = format!(
        r#"
        corpus_root = "raw/videos"
        labels = "raw/labels.csv"
        work_dir = "work"
        detector_backend = "synthetic_oracle"
        backbone = "tiny_test_backbone"
        pretrained_source = "random"
        crop_size = 32
        head_widths = [32, 16]
        batch_size = 8
        lr = 0.01
        seed = 5
        {extra}
        "#
    );
    let cfg_path = dir.join("exp.toml");
    std::fs::write(&cfg_path, text).unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    let manifest = build_manifest(&cfg.corpus_root, cfg.layout, &cfg.labels, cfg.stride, &cfg.corpus_name).unwrap();
    std::fs::create_dir_all(&cfg.work_dir).unwrap();
    manifest.save(&cfg.manifest_path()).unwrap();
    for mode in [AlignmentMode::PoseIndependent, AlignmentMode::PoseDependent] {
        let report = extract_and_align(&manifest, &cfg.detector(), mode, cfg.crop_size, &cfg.crop_root()).unwrap();
        assert!(report.failures().is_empty());
    }
    cfg
}
