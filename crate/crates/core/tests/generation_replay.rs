use std::path::PathBuf;

use tap_core::generation::{FixtureBackend, GenerationConfig, GenerationJob, Generator};
use tap_core::AttributeTree;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/generation/flowers102")
}

fn flowers_job() -> GenerationJob {
    let dir = fixture_dir();
    let classes = std::fs::read_to_string(dir.join("classes.txt")).unwrap().lines().map(String::from).collect();
    let desc = std::fs::read_to_string(dir.join("description.txt")).unwrap();
    GenerationJob::new("Flowers102", &desc, classes, "gpt-3.5-turbo", 0, GenerationConfig::default()).unwrap()
}

#[test]
fn flowers_transcript_reproduces_attribute_set() {
    let backend = FixtureBackend::load("gpt-3.5-turbo", &fixture_dir().join("transcript.json")).unwrap();
    let job = flowers_job();
    let mut g = Generator::new(&backend);
    let tree = g.run(&job).unwrap();
    assert_eq!(tree.attribute_names, ["Color", "Petal", "Center structure", "Stem characteristics"]);
    assert!(tree.validate().is_valid());
    assert_eq!(tree.num_classes(), 5);

    let expected = std::fs::read(fixture_dir().join("expected.toa.json")).unwrap();
    assert_eq!(tree.serialize(), expected);
    assert_eq!(AttributeTree::parse(&expected).unwrap(), tree);

    let recorded = std::fs::read_to_string(fixture_dir().join("transcript.json")).unwrap();
    assert_eq!(g.transcript.to_json(), recorded);
}

#[test]
fn replay_is_deterministic() {
    let backend = FixtureBackend::load("gpt-3.5-turbo", &fixture_dir()).unwrap();
    let job = flowers_job();
    let a = Generator::new(&backend).run(&job).unwrap();
    let b = Generator::new(&backend).run(&job).unwrap();
    assert_eq!(a.serialize(), b.serialize());
}
