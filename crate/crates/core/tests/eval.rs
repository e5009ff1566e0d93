mod common;

use std::sync::Arc;

use s2p_core::data::{write_synthetic_corpus, DatasetManifest, ManifestEntry, Split};
use s2p_core::eval::{
    evaluate_model, evaluate_reconstruction, style_sweep, EvalOptions, PerceptualBackend, DEFAULT_STYLE_PREFIXES,
};
use s2p_core::image::ImageBuffer;
use s2p_core::sampler::SamplerConfig;

fn manifest(dir: &std::path::Path, n: usize) -> DatasetManifest {
    let paths = write_synthetic_corpus(dir, n, 32).unwrap();
    DatasetManifest {
        entries: paths
            .into_iter()
            .map(|path| ManifestEntry {
                path,
                caption: "a mountain".into(),
                split: Split::Val,
                checksum: String::new(),
            })
            .collect(),
        resolution: 16,
    }
}

fn backend() -> PerceptualBackend {
    PerceptualBackend::Fallback(Arc::new(common::tiny_vae()))
}

#[test]
fn fallback_distance_properties() {
    let b = backend();
    let a = ImageBuffer::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x + c) % 11) as f32 / 10.0).unwrap();
    let c = ImageBuffer::filled(16, 16, 3, 0.5).unwrap();
    assert_eq!(b.distance(&a, &a).unwrap(), 0.0);
    let ab = b.distance(&a, &c).unwrap();
    assert!(ab > 0.0);
    assert!((ab - b.distance(&c, &a).unwrap()).abs() < 1e-9);
    assert!(b.distance(&a, &ImageBuffer::filled(8, 8, 3, 0.5).unwrap()).is_err());
}

#[test]
fn identity_generator_scores_zero_and_empty_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3);
    let opts = EvalOptions {
        resolution: 16,
        report_resolution: 32,
        ..Default::default()
    };
    let r = evaluate_reconstruction(&m, &opts, &backend(), |ex| Ok(ex.photo.clone())).unwrap();
    assert_eq!((r.n, r.mean_distance), (3, 0.0));
    let empty = DatasetManifest {
        entries: vec![],
        resolution: 16,
    };
    assert!(evaluate_reconstruction(&empty, &opts, &backend(), |ex| Ok(ex.photo.clone())).is_err());
}

#[test]
fn model_evaluation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 2);
    let vae = common::tiny_vae();
    let model = common::tiny_model(&vae, common::tiny_config(16));
    let cfg = SamplerConfig {
        steps: 3,
        ..Default::default()
    };
    let opts = EvalOptions {
        report_resolution: 32,
        ..Default::default()
    };
    let a = evaluate_model(&model, &vae, &m, &cfg, &backend(), &opts).unwrap();
    let b = evaluate_model(&model, &vae, &m, &cfg, &backend(), &opts).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.mean_distance > 0.0);
    assert_eq!(a.config["backend"], "fallback");
}

#[cfg(unix)]
#[test]
fn external_scorer_protocol() {
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("scorer.sh");
    std::fs::write(
        &script,
        "#!/bin/sh\n# args: <extra> pairs.tsv scores.csv\necho index,distance > \"$3\"\n\
         awk '{print NR-1 \",\" NR/4}' \"$2\" >> \"$3\"\n",
    )
    .unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let b = PerceptualBackend::external(&format!("{} extra", script.display())).unwrap();
    let img = ImageBuffer::filled(8, 8, 3, 0.2).unwrap();
    let pairs = vec![(img.clone(), img.clone()), (img.clone(), img)];
    assert_eq!(b.distances(&pairs).unwrap(), [0.25, 0.5]);
    assert!(PerceptualBackend::external("").is_err());
}

#[test]
fn sweep_counts_and_text_sensitivity() {
    let vae = common::tiny_vae();
    let model = common::tiny_model(&vae, common::tiny_config(16));
    let sketch = common::examples(1, 16).remove(0).edge;
    let cfg = SamplerConfig {
        steps: 2,
        ..Default::default()
    };
    let out = style_sweep(&model, &vae, &sketch, &DEFAULT_STYLE_PREFIXES, "a mountain", &cfg).unwrap();
    assert_eq!(out.len(), 9);
    assert_ne!(out[0].1, out[1].1);
    assert!(style_sweep::<&str>(&model, &vae, &sketch, &[], "a mountain", &cfg).is_err());
}
