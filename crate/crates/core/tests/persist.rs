mod common;

use std::fs;
use std::sync::OnceLock;

use sitedge::gating::Selection;
use sitedge::persist::{ContainerReader, ModelContainer, ModelMeta, Stage, FORMAT_VERSION, HEADER_LEN};
use sitedge::pipeline::{train_model, Corpus, PartitionSpec, Trained};
use sitedge::fusion::GateMode;
use sitedge::raster::Split;
use sitedge::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    trained: Trained,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = common::tiny_corpus(dir.path(), 6, 3);
        let trained = train_model(&corpus, &common::tiny_config(PartitionSpec::Class, 11)).unwrap();
        Fixture {
            _dir: dir,
            corpus,
            trained,
        }
    })
}

#[test]
fn bytes_round_trip_exactly() {
    let c = fixture().trained.container();
    let bytes = c.to_bytes().unwrap();
    let back = ModelContainer::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.stage(), Stage::Complete);
    assert_eq!(back.partition, c.partition);
    assert_eq!(back.forests, c.forests);
    assert_eq!(back.encoder, c.encoder);
}

#[test]
fn loaded_model_predicts_identically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    f.trained.container().save(&path).unwrap();
    let loaded = ModelContainer::load(&path).unwrap().into_model().unwrap();
    let i = f.corpus.indices(Split::Test)[0];
    let img = &f.corpus.images[i];
    let a = f.trained.model.predict(img, Selection::Fixed(4), GateMode::Learned).unwrap();
    let b = loaded.predict(img, Selection::Fixed(4), GateMode::Learned).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.map.values()), bits(b.map.values()));
    assert_eq!(bits(&a.probabilities), bits(&b.probabilities));
    // No temporary file is left behind.
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("model.bin")]);
}

#[test]
fn truncation_names_the_section() {
    let bytes = fixture().trained.container().to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.bin");
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    match ContainerReader::open(&path) {
        Err(Error::Checksum { section, .. }) => assert_eq!(section, "FRST"),
        other => panic!("expected a checksum error, got {other:?}"),
    }
    // Cut inside the encoder's PCA payload.
    let r = {
        fs::write(&path, &bytes).unwrap();
        ContainerReader::open(&path).unwrap()
    };
    let pca = r.sections().iter().find(|s| s.name() == "PCA").unwrap();
    fs::write(&path, &bytes[..(pca.offset + pca.len / 2) as usize]).unwrap();
    match ModelContainer::load(&path) {
        Err(Error::Checksum { section, .. }) => assert_eq!(section, "PCA"),
        other => panic!("expected a checksum error, got {other:?}"),
    }
}

#[test]
fn corrupted_payload_fails_its_checksum() {
    let mut bytes = fixture().trained.container().to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    fs::write(&path, &bytes).unwrap();
    let gate = ContainerReader::open(&path)
        .unwrap()
        .sections()
        .iter()
        .find(|s| s.name() == "GATE")
        .unwrap()
        .clone();
    bytes[(gate.offset + 20) as usize] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    let r = ContainerReader::open(&path).unwrap();
    // Other sections still load on their own.
    assert!(r.partition().is_ok());
    assert!(r.forest(2).is_ok());
    match r.gate() {
        Err(Error::Checksum { section, .. }) => assert_eq!(section, "GATE"),
        other => panic!("expected a checksum error, got {other:?}"),
    }
    assert!(matches!(ModelContainer::from_bytes(&bytes), Err(Error::Checksum { .. })));
}

#[test]
fn newer_version_is_rejected() {
    let mut bytes = fixture().trained.container().to_bytes().unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match ModelContainer::from_bytes(&bytes) {
        Err(e @ Error::Version { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains(&(FORMAT_VERSION + 1).to_string()), "{msg}");
        }
        other => panic!("expected a version error, got {other:?}"),
    }
    bytes[0] = b'X';
    assert!(matches!(ModelContainer::from_bytes(&bytes), Err(Error::Container(_))));
    assert!(matches!(
        ModelContainer::from_bytes(&bytes[..(HEADER_LEN - 1) as usize]),
        Err(Error::Container(_))
    ));
}

#[test]
fn partial_loads_match_full_load() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    f.trained.container().save(&path).unwrap();
    let r = ContainerReader::open(&path).unwrap();
    assert_eq!(r.forest_count(), 4);
    for j in 0..4 {
        assert_eq!(r.forest(j).unwrap(), f.trained.model.forests[j]);
    }
    assert!(r.forest(4).is_err());
    let g = r.gate().unwrap();
    assert_eq!(g.models, f.trained.model.gate.models);
    assert_eq!(g.temperature.to_bits(), f.trained.model.gate.temperature.to_bits());
    let meta = r.meta().unwrap();
    assert_eq!(meta.k, 4);
    assert_eq!(meta.stage, Stage::Complete);
    assert_eq!(meta.seeds, f.trained.meta.seeds);
}

#[test]
fn incomplete_containers_are_refused() {
    let f = fixture();
    let mut c = f.trained.container();
    c.forests.pop();
    assert!(c.to_bytes().is_err());

    let mut c = f.trained.container();
    c.encoder = None;
    assert!(c.to_bytes().is_err());

    let mut c = ModelContainer::new(ModelMeta::default());
    assert!(c.to_bytes().is_err());
    c.encoder = f.trained.model.encoder.clone();
    let back = ModelContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(back.stage(), Stage::Encoder);
    assert!(back.into_model().is_err());
}

#[test]
fn stage_follows_sections() {
    let f = fixture();
    let mut c = f.trained.container();
    let forests = std::mem::take(&mut c.forests);
    assert_eq!(c.stage(), Stage::Gate);
    c.gate = None;
    assert_eq!(c.stage(), Stage::Situations);
    c.forests = forests;
    assert_eq!(c.stage(), Stage::Forests);
    let back = ModelContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(back.meta.stage, Stage::Forests);
}
