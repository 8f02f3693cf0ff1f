//! Interface checks every encoder backend must pass, plus checkpoint round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tap_core::encoder::checkpoint::{load_backbone, load_pretrained_adapter, save_backbone, Checkpoint, CheckpointManifest};
use tap_core::encoder::{
    build_embedding_bank, encode_descriptions, encode_image, encode_images, ClipModel, EncoderError, Image, PromptState,
    ToyConfig, PRETRAINED_ADAPTER_BACKEND, TOY_BACKEND,
};
use tap_core::{AttributeTree, ClipModelF64};

fn dumplings() -> AttributeTree {
    AttributeTree::parse(include_bytes!("../fixtures/dumplings.toa.json")).unwrap()
}

fn toy(tree: &AttributeTree) -> ClipModelF64 {
    let mut texts = Vec::new();
    for c in tree.class_names() {
        for a in 0..tree.num_attributes() {
            texts.extend(tree.descriptions(c, a).unwrap());
        }
    }
    let cfg = ToyConfig { width: 32, embed_dim: 32, vision_layers: 2, heads: 2, ..ToyConfig::default() };
    ClipModel::toy(cfg, &texts, 3).unwrap()
}

fn image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::zeros(3, size, size);
    img.pixels.iter_mut().for_each(|p| *p = rng.gen());
    img
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn conformance(model: &ClipModelF64, tree: &AttributeTree) {
    let d = model.embed_dim();
    let prompts = PromptState::init(model, &tree.attribute_names, &mut ChaCha8Rng::seed_from_u64(5));
    let size = model.config.image_size;
    let imgs = [image(1, size), image(2, size)];

    let out = encode_image(model, &imgs[0], &prompts).unwrap();
    assert!(out.expert_features.keys().eq(tree.attribute_names.iter()));
    for f in out.expert_features.values().chain([&out.cls_feature]) {
        assert_eq!(f.len(), d);
        assert!((norm(f) - 1.0).abs() < 1e-6);
    }
    assert_eq!(out, encode_image(model, &imgs[0], &prompts).unwrap());
    let batch = encode_images(model, &imgs, &prompts).unwrap();
    assert_eq!(batch[0], out);
    assert_ne!(batch[0], batch[1]);

    let shape = tree.attribute_names.iter().position(|a| a == "Shape").unwrap() + 1;
    let m = encode_descriptions(model, tree, &prompts, shape, "dumplings").unwrap();
    assert_eq!(m.shape(), (4, d));
    let bank = build_embedding_bank(model, tree, &prompts).unwrap();
    assert_eq!(bank.num_matrices(), tree.num_classes() * tree.num_attributes());
    for a in &bank.attributes {
        for r in 0..a.embeddings.rows() {
            assert!((norm(a.embeddings.row(r)) - 1.0).abs() < 1e-6);
        }
    }

    let wrong = image(3, size + model.config.patch);
    assert!(matches!(encode_image(model, &wrong, &prompts), Err(EncoderError::Dimension(_))));
}

#[test]
fn toy_backend_conforms() {
    let tree = dumplings();
    let model = toy(&tree);
    assert_eq!(model.backend_id, TOY_BACKEND);
    conformance(&model, &tree);
}

#[test]
fn pretrained_adapter_conforms() {
    let tree = dumplings();
    let dir = tempfile::tempdir().unwrap();
    save_backbone(&toy(&tree), dir.path()).unwrap();
    let model: ClipModelF64 = load_pretrained_adapter(dir.path()).unwrap();
    assert_eq!(model.backend_id, PRETRAINED_ADAPTER_BACKEND);
    conformance(&model, &tree);
}

#[test]
fn unknown_backend_is_rejected() {
    let tree = dumplings();
    let dir = tempfile::tempdir().unwrap();
    save_backbone(&toy(&tree), dir.path()).unwrap();
    let res: Result<ClipModelF64, _> = load_backbone(dir.path(), Some("vit-huge"));
    assert!(matches!(res, Err(EncoderError::UnknownBackend(_))));
}

#[test]
fn backbone_round_trip_is_exact() {
    let tree = dumplings();
    let model = toy(&tree);
    let dir = tempfile::tempdir().unwrap();
    save_backbone(&model, dir.path()).unwrap();
    let back: ClipModelF64 = load_backbone(dir.path(), None).unwrap();
    assert_eq!(back, model);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let tree = dumplings();
    let model = toy(&tree);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut last = PromptState::init(&model, &tree.attribute_names, &mut rng);
    for t in last.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let gpa = PromptState::init(&model, &tree.attribute_names, &mut rng);
    let manifest = CheckpointManifest {
        backend_id: model.backend_id.clone(),
        embed_dim: model.embed_dim(),
        attributes: tree.attribute_names.clone(),
        tree_hash: tree.content_hash(),
        epoch: 60,
        config: serde_json::json!({ "note": "round trip" }),
    };
    let ckpt = Checkpoint { manifest: manifest.clone(), backbone: model.clone(), last: last.clone(), gpa: gpa.clone() };
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::<f64>::load(dir.path()).unwrap();
    assert_eq!(back.manifest, manifest);
    assert_eq!(back.backbone, model);
    assert_eq!(back.last, last);
    assert_eq!(back.gpa, gpa);
}
