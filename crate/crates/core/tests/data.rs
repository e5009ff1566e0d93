use s2p_core::data::{
    ingest_corpus, prepare_example, split_manifest, write_synthetic_corpus, CaptionSources, DatasetManifest,
    ManifestEntry, Split,
};
use s2p_core::edge::EdgeParams;
use s2p_core::image::ImageBuffer;
use s2p_core::Error;

fn png(path: &std::path::Path, h: usize, w: usize) {
    ImageBuffer::from_fn(h, w, 3, |y, x, c| ((y + 2 * x + c) % 17) as f32 / 16.0)
        .unwrap()
        .save_png(path)
        .unwrap();
}

#[test]
fn sidecars_then_tsv_then_template() {
    let dir = tempfile::tempdir().unwrap();
    let photos = dir.path().join("lakes");
    std::fs::create_dir_all(&photos).unwrap();
    for name in ["a", "b", "c"] {
        png(&photos.join(format!("{name}.png")), 8, 8);
    }
    std::fs::write(photos.join("a.txt"), "from sidecar\n").unwrap();
    let tsv = dir.path().join("captions.tsv");
    std::fs::write(&tsv, "a.png\tfrom table\nb.png\tfrom table\n").unwrap();

    let mut sources = CaptionSources::load_tsv(&tsv).unwrap();
    sources.template = Some("a color photograph of a {dirname}".into());
    let m = ingest_corpus(&photos, &sources, 8).unwrap();
    let captions: Vec<&str> = m.entries.iter().map(|e| e.caption.as_str()).collect();
    assert_eq!(captions, ["from sidecar", "from table", "a color photograph of a lakes"]);
    assert!(m.entries.iter().all(|e| e.split == Split::Train && e.checksum.len() == 64));
}

#[test]
fn template_fallback_and_skipped_files() {
    let dir = tempfile::tempdir().unwrap();
    png(&dir.path().join("x.png"), 8, 8);
    std::fs::write(dir.path().join("broken.png"), b"\x89PNG nope").unwrap();
    std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
    let m = ingest_corpus(dir.path(), &CaptionSources::with_template("a photo"), 8).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m.entries[0].caption, "a photo");

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        ingest_corpus(empty.path(), &CaptionSources::sidecar_only(), 8),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn three_sidecars_give_three_entries() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_synthetic_corpus(dir.path(), 3, 16).unwrap();
    let m = ingest_corpus(dir.path(), &CaptionSources::sidecar_only(), 16).unwrap();
    assert_eq!(m.len(), 3);
    for (entry, path) in m.entries.iter().zip(&paths) {
        let sidecar = std::fs::read_to_string(path.with_extension("txt")).unwrap();
        assert_eq!(entry.caption, sidecar.trim());
    }
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_corpus(dir.path(), 5, 16).unwrap();
    let m = split_manifest(&ingest_corpus(dir.path(), &CaptionSources::sidecar_only(), 16).unwrap(), 0.4, 3).unwrap();
    let path = dir.path().join("m.jsonl");
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    assert_eq!(DatasetManifest::from_jsonl(&m.to_jsonl()).unwrap(), m);
    assert!(DatasetManifest::from_jsonl("{not json}").is_err());
}

#[test]
fn split_rules() {
    let entries = (0..10)
        .map(|i| ManifestEntry {
            path: format!("{i}.png").into(),
            caption: String::new(),
            split: Split::Train,
            checksum: String::new(),
        })
        .collect();
    let m = DatasetManifest {
        entries,
        resolution: 64,
    };
    let none = split_manifest(&m, 0.0, 1).unwrap();
    assert_eq!(none.split(Split::Val).count(), 0);
    let a = split_manifest(&m, 0.3, 7).unwrap();
    assert_eq!(a.split(Split::Val).count(), 3);
    assert_eq!(a, split_manifest(&m, 0.3, 7).unwrap());
    assert!(split_manifest(&m, 1.0, 7).is_err());
}

#[test]
fn prepare_example_contract() {
    let dir = tempfile::tempdir().unwrap();
    let big = dir.path().join("big.png");
    png(&big, 600, 800);
    let flat = dir.path().join("flat.png");
    ImageBuffer::filled(40, 50, 3, 0.6).unwrap().save_png(&flat).unwrap();
    let entry = |p: &std::path::Path| ManifestEntry {
        path: p.to_path_buf(),
        caption: "c".into(),
        split: Split::Train,
        checksum: String::new(),
    };
    let p = EdgeParams::default();
    let ex = prepare_example(&entry(&big), 64, &p).unwrap();
    assert_eq!((ex.photo.height(), ex.photo.width(), ex.photo.channels()), (64, 64, 3));
    assert_eq!((ex.edge.height(), ex.edge.width()), (64, 64));
    let again = prepare_example(&entry(&big), 64, &p).unwrap();
    assert_eq!(ex.photo, again.photo);
    assert_eq!(ex.edge, again.edge);
    assert_eq!(prepare_example(&entry(&flat), 64, &p).unwrap().edge.count_nonzero(), 0);

    let missing = dir.path().join("gone.png");
    let e = prepare_example(&entry(&missing), 64, &p).unwrap_err();
    assert!(e.to_string().contains("gone.png"), "{e}");
}
