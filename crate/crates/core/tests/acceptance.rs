//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 7 is reported but never fails the run. Numeric arguments
//! select a subset, e.g. `cargo test --test acceptance -- 2 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tap_core::autodiff::{check_gradient, Graph, Var, DEFAULT_STEP};
use tap_core::datasets::protocol::evaluate_trained;
use tap_core::datasets::synthetic::{pretrained_backbone, WorldPretraining};
use tap_core::datasets::{generate_synthetic, run_protocol, ProtocolConfig, ProtocolData, SyntheticConfig};
use tap_core::encoder::{build_embedding_bank, encode_image, ClipModel, Image, PromptState, ToyConfig};
use tap_core::generation::{FixtureBackend, GenerationConfig, GenerationJob, Generator};
use tap_core::inference::{fusion_weights, harmonic_mean, AlignmentMode, InferenceConfig, Predictor};
use tap_core::objectives::{
    batch_cosine_logits_graph, contrastive_loss, cosine_logits_graph, cross_entropy_graph, kl_attr_reg, kl_graph,
    l1_graph, l1_vision_reg, text_contrastive_graph, text_contrastive_reg, total_loss, Components, RegCoefficients,
};
use tap_core::tensor::{argmax, dot, normalized, softmax};
use tap_core::training::{gpa_aggregate, gpa_weights};
use tap_core::vcp::{keys_graph, pool, pool_batch_graph, pool_classes_graph, PoolingMode, VcpVars, VcpWeights};
use tap_core::{AttributeTree, ClipModelF64, Matrix};

type Outcome = Result<String, String>;
type Criterion<'a> = (usize, bool, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::randn(rows, cols, 1.0, rng)
}

fn unit_rows(m: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_rows(&(0..m.rows()).map(|r| normalized(m.row(r))).collect::<Vec<_>>())
}

fn hm_rows() -> Outcome {
    let rows = [
        ("CLIP", 69.34, 74.22, 71.70),
        ("CoOp", 82.69, 63.22, 71.66),
        ("Co-CoOp", 80.47, 71.69, 75.83),
        ("ProGrad", 82.48, 70.75, 76.16),
        ("LoGoPrompt", 84.47, 74.24, 79.03),
        ("PromptSRC", 84.26, 76.10, 79.97),
        ("TAP", 84.75, 77.63, 81.04),
        ("ImageNet CLIP", 72.43, 68.14, 70.22),
        ("ImageNet TAP", 77.97, 70.40, 73.99),
    ];
    for (name, b, n, hm) in rows {
        let got = harmonic_mean(b, n);
        ensure((got - hm).abs() <= 0.01, || format!("{name}: HM({b}, {n}) = {got:.4}, table {hm}"))?;
    }
    Ok(format!("{} table rows within 0.01", rows.len()))
}

/// Direct softmax-weighted sum, written without any library helpers.
#[allow(clippy::needless_range_loop)]
fn brute_force_pool(expert: &[f64], desc: &Matrix<f64>, w: &VcpWeights<f64>) -> (Vec<f64>, Vec<f64>) {
    let d = expert.len();
    let n = desc.rows();
    let mut q = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            q[i] += w.query[(i, j)] * expert[j];
        }
    }
    let mut logits = vec![0.0; n];
    for (r, l) in logits.iter_mut().enumerate() {
        for i in 0..d {
            let mut k = 0.0;
            for j in 0..d {
                k += w.key[(i, j)] * desc[(r, j)];
            }
            *l += q[i] * k;
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let weights: Vec<f64> = e.iter().map(|x| x / z).collect();
    let mut out = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            out[j] += weights[r] * desc[(r, j)];
        }
    }
    (weights, out)
}

fn vcp_instances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=16);
        let expert = normalized(randn(1, d, &mut rng).row(0));
        let desc = unit_rows(&randn(n, d, &mut rng));
        let w = VcpWeights { query: randn(d, d, &mut rng).scale(0.5), key: randn(d, d, &mut rng).scale(0.5) };
        let got = pool(&expert, &desc, &w).map_err(|e| e.to_string())?;
        let (ow, ov) = brute_force_pool(&expert, &desc, &w);
        let err = got.vector.iter().zip(&ov).chain(got.attention_weights.iter().zip(&ow)).map(|(a, b)| (a - b).abs());
        let err = err.fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("case {case}: deviation {err:e} from the oracle"))?;
        let total: f64 = got.attention_weights.iter().sum();
        ensure((total - 1.0).abs() <= 1e-6 && got.attention_weights.iter().all(|&x| x >= 0.0), || {
            format!("case {case}: weights {:?} off the simplex", got.attention_weights)
        })?;

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled = Matrix::from_rows(&perm.iter().map(|&p| desc.row(p).to_vec()).collect::<Vec<_>>());
        let again = pool(&expert, &shuffled, &w).map_err(|e| e.to_string())?;
        ensure(again.vector == got.vector, || format!("case {case}: pooled vector changed under {perm:?}"))?;
        let expected: Vec<f64> = perm.iter().map(|&p| got.attention_weights[p]).collect();
        ensure(again.attention_weights == expected, || format!("case {case}: weights not permuted by {perm:?}"))?;
    }
    Ok(format!("1000 instances, worst deviation {worst:.1e}, permutations exact"))
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, b, c, per_class) = (5, 3, 3, 2);
    let desc = unit_rows(&randn(c * per_class, d, &mut rng));
    let segments: Vec<(usize, usize)> = (0..c).map(|k| (k * per_class, per_class)).collect();
    let wq = randn(d, d, &mut rng).scale(0.5);
    let wk = randn(d, d, &mut rng).scale(0.5);
    let feats = unit_rows(&randn(b, d, &mut rng));
    let expert = randn(1, d, &mut rng);
    let labels = [0, 2, 1];
    let weights = randn(c, d, &mut rng);
    let frozen = randn(4, d, &mut rng);
    let trained = randn(4, d, &mut rng);
    let frozen_cls = randn(1, d, &mut rng);
    let teacher = softmax(randn(1, c, &mut rng).row(0));
    let tau = 0.5;

    let mut report = Vec::new();
    let mut run = |name: &str, x: &Matrix<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var| -> Result<(), String> {
        let r = check_gradient(x, DEFAULT_STEP, build);
        let gap = r.analytic.data().iter().zip(r.numeric.data()).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        report.push(format!("{name} rel {:.0e} abs {gap:.0e}", r.max_relative_error));
        ensure(r.analytic.max_abs() > 1e-3, || format!("{name}: gradient vanishes"))?;
        ensure(r.max_relative_error < 1e-4, || format!("{name}: relative error {:e}", r.max_relative_error))
    };

    run("vcp/expert", &expert, &|g, x| {
        let (dv, q, k, w) = (g.constant(desc.clone()), g.constant(wq.clone()), g.constant(wk.clone()), g.constant(weights.clone()));
        let pooled = pool_classes_graph(g, x, dv, &segments, VcpVars { query: q, key: k }, PoolingMode::Vcp);
        let prod = g.mul(pooled, w);
        g.sum(prod)
    })?;
    run("vcp/key", &wk, &|g, x| {
        let (e, dv, q, w) = (g.constant(expert.clone()), g.constant(desc.clone()), g.constant(wq.clone()), g.constant(weights.clone()));
        let pooled = pool_classes_graph(g, e, dv, &segments, VcpVars { query: q, key: x }, PoolingMode::Vcp);
        let prod = g.mul(pooled, w);
        g.sum(prod)
    })?;
    run("contrastive/query", &wq, &|g, x| {
        let (f, dv, k) = (g.constant(feats.clone()), g.constant(desc.clone()), g.constant(wk.clone()));
        let keys = keys_graph(g, dv, k);
        let pooled = pool_batch_graph(g, f, dv, keys, &segments, x, PoolingMode::Vcp);
        let logits = batch_cosine_logits_graph(g, f, &pooled, tau);
        cross_entropy_graph(g, logits, &labels)
    })?;
    run("contrastive/features", &feats, &|g, x| {
        let unit = g.normalize_rows(x);
        let pooled: Vec<Var> = (0..c).map(|k| g.constant(randn_fixed(b, d, 10 + k as u64))).collect();
        let logits = batch_cosine_logits_graph(g, unit, &pooled, tau);
        cross_entropy_graph(g, logits, &labels)
    })?;
    run("l1_vision_reg", &expert, &|g, x| {
        let f = g.constant(frozen_cls.clone());
        l1_graph(g, x, f)
    })?;
    run("text_contrastive_reg", &trained, &|g, x| {
        let f = g.constant(frozen.clone());
        text_contrastive_graph(g, f, x)
    })?;
    run("kl_attr_reg", &expert, &|g, x| {
        let rows = g.constant(desc.slice_rows(0, c));
        let unit = g.normalize_rows(x);
        let logits = cosine_logits_graph(g, unit, rows, tau);
        kl_graph(g, &teacher, logits)
    })?;
    let reg = RegCoefficients::default();
    run("total_loss", &trained, &|g, x| {
        let feature = g.constant(Matrix::row_vector(&normalized(feats.row(0))));
        let logits = cosine_logits_graph(g, feature, x, tau);
        let class = cross_entropy_graph(g, logits, &[1]);
        let first = g.row(x, 0);
        let fc = g.constant(frozen_cls.clone());
        let l1 = l1_graph(g, first, fc);
        let kl = kl_graph(g, &softmax(&[0.1, 0.5, -0.2, 0.3]), logits);
        let fr = g.constant(frozen.clone());
        let con = text_contrastive_graph(g, fr, x);
        let parts = [(l1, reg.mu1), (kl, reg.mu2), (con, reg.mu3)];
        parts.iter().fold(class, |acc, &(v, k)| {
            let s = g.scale(v, k);
            g.add(acc, s)
        })
    })?;

    // Graph forwards agree with the direct implementations.
    let mut g = Graph::new();
    let (fv, tv) = (g.constant(frozen.clone()), g.constant(trained.clone()));
    let con = text_contrastive_graph(&mut g, fv, tv);
    let direct = text_contrastive_reg(&frozen, &trained).map_err(|e| e.to_string())?;
    ensure((g.scalar(con) - direct).abs() < 1e-12, || "text contrastive graph disagrees".into())?;
    let (ev, cv) = (g.constant(expert.clone()), g.constant(frozen_cls.clone()));
    let l1 = l1_graph(&mut g, ev, cv);
    let direct = l1_vision_reg(expert.row(0), frozen_cls.row(0)).map_err(|e| e.to_string())?;
    ensure((g.scalar(l1) - direct).abs() < 1e-12, || "l1 graph disagrees".into())?;
    let student = randn(1, c, &mut rng);
    let sv = g.constant(student.clone());
    let kl = kl_graph(&mut g, &teacher, sv);
    let teacher_logits: Vec<f64> = teacher.iter().map(|p| p.ln()).collect();
    let direct = kl_attr_reg(&teacher_logits, &[student.row(0).to_vec()]).map_err(|e| e.to_string())?;
    ensure((g.scalar(kl) - direct).abs() < 1e-12, || "kl graph disagrees".into())?;
    let pooled: Vec<Matrix<f64>> = (0..b).map(|i| Matrix::from_rows(&(0..c).map(|k| randn_fixed(b, d, 10 + k as u64).row(i).to_vec()).collect::<Vec<_>>())).collect();
    let direct = contrastive_loss(&feats, &pooled, &labels, tau).map_err(|e| e.to_string())?;
    let fv = g.constant(feats.clone());
    let pv: Vec<Var> = (0..c).map(|k| g.constant(randn_fixed(b, d, 10 + k as u64))).collect();
    let logits = batch_cosine_logits_graph(&mut g, fv, &pv, tau);
    let ce = cross_entropy_graph(&mut g, logits, &labels);
    ensure((g.scalar(ce) - direct).abs() < 1e-12, || "contrastive graph disagrees".into())?;

    Ok(report.join(", "))
}

fn randn_fixed(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    Matrix::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for classes in [2, 5, 37, 100] {
        let b = 4;
        let feats = unit_rows(&randn(b, 8, &mut rng));
        let pooled: Vec<Matrix<f64>> = (0..b)
            .map(|_| {
                let row = randn(1, 8, &mut rng);
                Matrix::from_rows(&vec![row.row(0).to_vec(); classes])
            })
            .collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        let loss = contrastive_loss(&feats, &pooled, &labels, 0.01).map_err(|e| e.to_string())?;
        let expected = (classes as f64).ln();
        ensure((loss - expected).abs() <= 1e-9, || format!("C = {classes}: loss {loss} vs ln C {expected}"))?;
    }
    for _ in 0..100 {
        let t = randn(1, 7, &mut rng);
        let kl = kl_attr_reg(t.row(0), &[t.row(0).to_vec(), t.row(0).to_vec()]).map_err(|e| e.to_string())?;
        ensure(kl == 0.0, || format!("KL at teacher = student is {kl:e}"))?;
        let l1 = l1_vision_reg(t.row(0), t.row(0)).map_err(|e| e.to_string())?;
        ensure(l1 == 0.0, || format!("L1 at equality is {l1:e}"))?;
        let parts = Components { l_class: rng.gen(), l_l1_v: rng.gen(), l_kl_attr: rng.gen(), l_con_t: rng.gen() };
        let out = total_loss(parts, vec![], &RegCoefficients::disabled()).map_err(|e| e.to_string())?;
        ensure(out.l_total.to_bits() == out.l_class.to_bits(), || "disabled regularization changed l_total".into())?;
    }
    Ok("ln C within 1e-9 for C in {2, 5, 37, 100}; KL = L1 = 0; l_total == l_class bitwise".into())
}

fn dumplings() -> AttributeTree {
    AttributeTree::parse(include_bytes!("../fixtures/dumplings.toa.json")).expect("fixture parses")
}

fn toy_model(tree: &AttributeTree, seed: u64) -> ClipModelF64 {
    let mut texts = Vec::new();
    for c in tree.class_names() {
        for a in 0..tree.num_attributes() {
            texts.extend(tree.descriptions(c, a).expect("attribute in range"));
        }
    }
    let cfg = ToyConfig { vision_layers: 2, ..ToyConfig::default() };
    ClipModel::toy(cfg, &texts, seed).expect("toy model")
}

fn fusion_contract() -> Outcome {
    let w = fusion_weights(0.4, 3).map_err(|e| e.to_string())?;
    ensure(w == [0.4, 0.3, 0.3], || format!("fusion weights {w:?}"))?;

    let tree = dumplings();
    let model = toy_model(&tree, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut prompts = PromptState::init(&model, &tree.attribute_names, &mut rng);
    for v in &mut prompts.vcp {
        *v = VcpWeights::near_identity(model.embed_dim(), 0.3, &mut rng);
    }
    let bank = build_embedding_bank(&model, &tree, &prompts).map_err(|e| e.to_string())?;
    let fused = Predictor::new(&prompts, &bank, InferenceConfig { alpha: 1.0, ..InferenceConfig::default() })
        .map_err(|e| e.to_string())?;
    let global = &bank.attributes[0];
    let size = model.config.image_size;
    for i in 0..500 {
        let mut img = Image::zeros(3, size, size);
        img.pixels.iter_mut().for_each(|p| *p = rng.gen());
        let features = encode_image(&model, &img, &prompts).map_err(|e| e.to_string())?;
        let cls = &features.cls_feature;
        let scores: Vec<f64> = (0..global.segments.len())
            .map(|c| {
                let pooled = pool(cls, &global.class_rows(c), &prompts.vcp[0]).expect("dims").vector;
                dot(cls, &normalized(&pooled))
            })
            .collect();
        let got = fused.logits(&features).map_err(|e| e.to_string())?.prediction;
        ensure(got == argmax(&scores), || format!("image {i}: fused {got}, CLS-only {}", argmax(&scores)))?;
    }
    Ok("weights (0.4, 0.3, 0.3); α = 1 matches CLS-only on 500 images".into())
}

struct World {
    data: tap_core::datasets::SyntheticAttributeDataset,
    model: ClipModelF64,
}

fn build_world() -> World {
    let data = generate_synthetic(&SyntheticConfig::default()).expect("default world");
    let (model, _) = pretrained_backbone(&[&data], &WorldPretraining::default()).expect("pretraining");
    World { data, model }
}

fn protocol_data(w: &World) -> ProtocolData<'_> {
    ProtocolData { source: &w.data.dataset, tree: &w.data.tree, targets: vec![], split_root: None }
}

struct Arm {
    name: &'static str,
    mean: f64,
    std: f64,
}

fn arm(w: &World, name: &'static str, cfg: &ProtocolConfig) -> Result<(Arm, tap_core::datasets::ProtocolRun<f64>), String> {
    let run = run_protocol(&w.model, &protocol_data(w), cfg).map_err(|e| e.to_string())?;
    let a = Arm { name, mean: run.metrics.mean["accuracy"], std: run.metrics.std["accuracy"] };
    Ok((a, run))
}

fn fmt(a: &Arm) -> String {
    format!("{} {:.1}±{:.1}", a.name, a.mean, a.std)
}

fn ordering(w: &World) -> Outcome {
    let cfg = ProtocolConfig::synthetic();
    let (tap, run) = arm(w, "TAP", &cfg)?;
    let alpha1 = evaluate_trained(&w.model, &protocol_data(w), &cfg, &run.trained, InferenceConfig { alpha: 1.0, ..cfg.inference })
        .map_err(|e| e.to_string())?;
    let alpha1 = Arm { name: "α=1", mean: alpha1.mean["accuracy"], std: alpha1.std["accuracy"] };
    let mut cls_cfg = cfg.clone();
    cls_cfg.inference.alignment = AlignmentMode::ClsOnly;
    let (cls_only, _) = arm(w, "cls_only", &cls_cfg)?;
    let (unstructured, _) = arm(w, "unstructured", &cfg.clone().unstructured_baseline())?;
    let line = [&tap, &cls_only, &unstructured, &alpha1].map(fmt).join(", ");
    for other in [&cls_only, &unstructured, &alpha1] {
        let margin = tap.mean - other.mean;
        ensure(margin > tap.std.max(other.std), || format!("{line}; margin over {} is {margin:.2}", other.name))?;
    }
    Ok(line)
}

fn pooling_ablation(w: &World) -> Outcome {
    let mut arms = Vec::new();
    for (name, mode) in [("vcp", PoolingMode::Vcp), ("average", PoolingMode::Average), ("attn_max", PoolingMode::AttnMax)] {
        let mut cfg = ProtocolConfig::synthetic();
        cfg.inference.pooling = mode;
        arms.push(arm(w, name, &cfg)?.0);
    }
    let line = arms.iter().map(fmt).collect::<Vec<_>>().join(", ");
    if arms[0].mean >= arms[1].mean && arms[1].mean >= arms[2].mean {
        Ok(line)
    } else {
        Err(format!("{line}; order differs from vcp ≥ average ≥ attn_max"))
    }
}

fn generation_golden() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/generation/flowers102");
    let classes = std::fs::read_to_string(dir.join("classes.txt")).map_err(|e| e.to_string())?;
    let desc = std::fs::read_to_string(dir.join("description.txt")).map_err(|e| e.to_string())?;
    let job = GenerationJob::new(
        "Flowers102",
        &desc,
        classes.lines().map(String::from).collect(),
        "gpt-3.5-turbo",
        0,
        GenerationConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let backend = FixtureBackend::load("gpt-3.5-turbo", &dir.join("transcript.json")).map_err(|e| e.to_string())?;
    let tree = Generator::new(&backend).run(&job).map_err(|e| e.to_string())?;
    let expected = ["Color", "Petal", "Center structure", "Stem characteristics"];
    ensure(tree.attribute_names == expected, || format!("attributes {:?}", tree.attribute_names))?;
    let report = tree.validate();
    ensure(report.is_valid(), || format!("validator: {report:?}"))?;
    Ok(format!("attributes {expected:?}, {} classes, validator clean", tree.num_classes()))
}

fn gpa() -> Outcome {
    let w = gpa_weights(60);
    let peak = argmax(&w) + 1;
    ensure(peak == 54, || format!("argmax at epoch {peak}"))?;
    let total: f64 = w.iter().sum();
    ensure((total - 1.0).abs() < 1e-12, || format!("weights sum to {total}"))?;
    for (t, &wt) in w.iter().enumerate() {
        let z = (t as f64 + 1.0 - 54.0) / 6.0;
        let ratio = wt / w[53];
        ensure((ratio - (-0.5 * z * z).exp()).abs() < 1e-12, || format!("epoch {} is not Gaussian", t + 1))?;
    }

    let tree = dumplings();
    let model = toy_model(&tree, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut snap = PromptState::init(&model, &tree.attribute_names, &mut rng);
    for t in snap.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let agg = gpa_aggregate(&vec![snap.clone(); 60], 60).map_err(|e| e.to_string())?;
    ensure(agg == snap, || "aggregate of identical snapshots differs".into())?;
    Ok("peak at epoch 54, normalized Gaussian, identical snapshots exact".into())
}

fn determinism(w: &World) -> Outcome {
    let cfg = ProtocolConfig { seeds: vec![1], ..ProtocolConfig::synthetic() };
    let a = run_protocol(&w.model, &protocol_data(w), &cfg).map_err(|e| e.to_string())?.metrics.to_json();
    let b = run_protocol(&w.model, &protocol_data(w), &cfg).map_err(|e| e.to_string())?.metrics.to_json();
    ensure(a == b, || "metrics documents differ".into())?;
    Ok(format!("{} identical bytes", a.len()))
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let cell = std::cell::OnceCell::new();
    let world = || cell.get_or_init(build_world);
    let criteria: Vec<Criterion<'_>> = vec![
        (1, true, Box::new(hm_rows)),
        (2, true, Box::new(vcp_instances)),
        (3, true, Box::new(gradients)),
        (4, true, Box::new(loss_identities)),
        (5, true, Box::new(fusion_contract)),
        (6, true, Box::new(|| ordering(world()))),
        (7, false, Box::new(|| pooling_ablation(world()))),
        (8, true, Box::new(generation_golden)),
        (9, true, Box::new(gpa)),
        (10, true, Box::new(|| determinism(world()))),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, hard, check) in criteria.iter().filter(|(n, _, _)| only.is_empty() || only.contains(n)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({secs:.1}s) {detail}"),
            Err(detail) if !hard => println!("criterion {n}: FAIL, reported only ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
