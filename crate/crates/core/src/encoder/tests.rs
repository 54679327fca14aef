use super::*;
use crate::autodiff::finite_difference_check;
use crate::scenes::{generate_scene, patchify, teacher_attention_from_mask};

fn small_config(routing: RoutingMode) -> ModelConfig {
    ModelConfig {
        scene: SceneConfig { image_size: 8, patch: 2, classes: 4, objects: 1 },
        dim: 8,
        heads: 2,
        layers: 2,
        queries: 2,
        embed_dim: 4,
        mlp_ratio: 2,
        routing,
        ..ModelConfig::default()
    }
}

fn batch_of<T: Real>(config: &ModelConfig, n: usize, seed: u64) -> (Tensor<T>, Tensor<T>, Vec<usize>) {
    let samples: Vec<_> = (0..n).map(|i| generate_scene(seed + i as u64, &config.scene).unwrap()).collect();
    let grids: Vec<_> = samples.iter().map(|s| patchify(s, &config.scene)).collect();
    let patches = stack_patches(&grids.iter().collect::<Vec<_>>()).unwrap();
    let np = config.scene.num_patches();
    let mut teacher = Vec::new();
    for g in &grids {
        teacher.extend(teacher_attention_from_mask(&g.patch_mask, 0.1).unwrap().target);
    }
    let teacher = Tensor::from_f64(vec![n, np, np], &teacher).unwrap();
    (patches, teacher, samples.iter().map(|s| s.label as usize).collect())
}

#[derive(Clone, Copy, PartialEq)]
enum Loss {
    Topo,
    Anchor,
    Rec,
    Tokens,
}

/// Builds one scalar loss and returns all parameter gradients.
fn grads_for(params: &EncoderParams<f64>, patches: &Tensor<f64>, teacher: &Tensor<f64>, loss: Loss) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = encoder_forward(&mut g, params, &bound, patches).unwrap();
    let l = build_loss(&mut g, params, &bound, &out, patches, teacher, loss);
    g.backward(l).unwrap();
    bound.grads(&g)
}

fn build_loss(
    g: &mut Graph<f64>,
    params: &EncoderParams<f64>,
    bound: &BoundParams,
    out: &ForwardOut,
    patches: &Tensor<f64>,
    teacher: &Tensor<f64>,
    loss: Loss,
) -> Var {
    let cfg = &params.config;
    match loss {
        Loss::Topo => {
            let maps = extract_student_topology(g, &out.attention, cfg.scene.num_patches()).unwrap();
            let parts: Vec<Var> = maps.iter().map(|&m| g.kl_rows(m, teacher.clone(), cfg.heads).unwrap()).collect();
            let mut total = parts[0];
            for &p in &parts[1..] {
                total = g.add(total, p).unwrap();
            }
            total
        }
        Loss::Anchor => {
            let cls = g.normalize_rows(bound.var(params.layout.class_emb)).unwrap();
            let logits = g.matmul_nt(out.embedding, cls).unwrap();
            let n = out.batch;
            let c = cfg.scene.classes;
            let targets = (0..n).map(|i| i % c).collect();
            g.masked_cross_entropy(logits, targets, vec![true; n * c]).unwrap()
        }
        Loss::Rec => g.mse(out.recon, patches.clone()).unwrap(),
        Loss::Tokens => g.sum(out.tokens),
    }
}

fn norm_where(params: &EncoderParams<f64>, grads: &[Vec<f64>], pick: impl Fn(&ParamMeta) -> bool) -> f64 {
    params
        .metas
        .iter()
        .zip(grads)
        .filter(|(m, _)| pick(m))
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn is_qk(m: &ParamMeta) -> bool {
    m.matrix == "w_q" || m.matrix == "w_k"
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = ModelConfig::default();
    let a = EncoderParams::<f64>::init(0, &cfg).unwrap();
    let b = EncoderParams::<f64>::init(0, &cfg).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.tau(), 0.07);
    for (m, v) in a.metas.iter().zip(&a.values) {
        assert!(v.all_finite());
        if m.shape.len() == 2 && m.matrix != "pos_embed" && m.matrix != "query_tokens" {
            assert!(v.data().iter().all(|x| x.abs() < 1.0), "{}", m.name);
        }
    }
    let c = EncoderParams::<f64>::init(1, &cfg).unwrap();
    assert_ne!(a.values, c.values);
}

#[test]
fn subspace_sizes_match_layout() {
    let cfg = ModelConfig::default();
    let p = EncoderParams::<f32>::init(3, &cfg).unwrap();
    let count = |s: Subspace| p.metas.iter().filter(|m| m.subspace == s).map(|m| m.shape.iter().product::<usize>()).sum::<usize>();
    assert_eq!(count(Subspace::Topology), 6 * 2 * 64 * 64);
    assert_eq!(count(Subspace::Backbone), 48 * 64 + 64 + 64 * 64);
    assert_eq!(count(Subspace::Decoder), 64 * 48 + 48);
    let total: usize = Subspace::ALL.iter().map(|&s| count(s)).sum();
    assert_eq!(total, p.num_scalars());
    let mut names: Vec<_> = p.metas.iter().map(|m| m.name.clone()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), p.len());
    assert_eq!(cfg.seq_len(), 80);
}

#[test]
fn two_stream_duplicates_streams() {
    let one = EncoderParams::<f32>::init(0, &small_config(RoutingMode::Strict)).unwrap();
    let two = EncoderParams::<f32>::init(0, &small_config(RoutingMode::TwoStream)).unwrap();
    let per_stream = one.metas.iter().filter(|m| m.layer.is_some() || m.subspace == Subspace::Backbone).count() + 1;
    assert_eq!(two.len(), one.len() + per_stream);
    assert_eq!(two.layout.streams.len(), 2);
    assert!(two.metas.iter().any(|m| m.name == "s1.block0.w_q"));
}

#[test]
fn zero_topology_weights_give_uniform_maps() {
    let cfg = small_config(RoutingMode::Strict);
    let mut p = EncoderParams::<f64>::init(5, &cfg).unwrap();
    for b in p.layout.streams[0].blocks.clone() {
        p.values[b.w_q] = Tensor::zeros(p.values[b.w_q].shape().to_vec());
        p.values[b.w_k] = Tensor::zeros(p.values[b.w_k].shape().to_vec());
    }
    let (patches, _, _) = batch_of::<f64>(&cfg, 2, 1);
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let out = encoder_forward(&mut g, &p, &bound, &patches).unwrap();
    let n = cfg.seq_len();
    for &a in &out.attention {
        assert!(g.value(a).data().iter().all(|&v| v == 1.0 / n as f64));
    }
    let maps = extract_student_topology(&mut g, &out.attention, cfg.scene.num_patches()).unwrap();
    let np = cfg.scene.num_patches() as f64;
    for &m in &maps {
        assert!(g.value(m).data().iter().all(|&v| (v - 1.0 / np).abs() < 1e-15));
    }
}

#[test]
fn forward_shapes_and_normalisation() {
    let cfg = small_config(RoutingMode::Strict);
    let p = EncoderParams::<f64>::init(2, &cfg).unwrap();
    let (patches, _, _) = batch_of::<f64>(&cfg, 3, 9);
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let out = encoder_forward(&mut g, &p, &bound, &patches).unwrap();
    let (n, np) = (cfg.seq_len(), cfg.scene.num_patches());
    assert_eq!(g.shape(out.tokens), [3 * n, cfg.dim]);
    assert_eq!(g.shape(out.pooled), [3, cfg.dim]);
    assert_eq!(g.shape(out.recon), [3 * np, cfg.scene.patch_dim()]);
    assert_eq!(out.attention.len(), cfg.layers);
    for row in g.value(out.embedding).data().chunks(cfg.embed_dim) {
        let nrm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nrm - 1.0).abs() < 1e-6);
    }
    for &a in &out.attention {
        assert_eq!(g.shape(a), [3, cfg.heads, n, n]);
        for row in g.value(a).data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let maps = extract_student_topology(&mut g, &out.attention, np).unwrap();
    for &m in &maps {
        for row in g.value(m).data().chunks(np) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_rejects_wrong_patch_width() {
    let cfg = small_config(RoutingMode::Strict);
    let p = EncoderParams::<f64>::init(2, &cfg).unwrap();
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let bad = Tensor::zeros(vec![cfg.scene.num_patches(), 5]);
    assert!(matches!(encoder_forward(&mut g, &p, &bound, &bad), Err(MuseError::Dimension { .. })));
}

#[test]
fn restriction_examples() {
    let mut g = Graph::<f64>::new();
    // three tokens, the last one a query
    let a = g.constant(Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8], vec![0.3, 0.3, 0.4]]).unwrap());
    let s = extract_student_topology(&mut g, &[a], 2).unwrap()[0];
    let v = g.value(s).data().to_vec();
    let expect = [0.4, 0.6, 0.5, 0.5];
    for (x, e) in v.iter().zip(expect) {
        assert!((x - e).abs() < 1e-15);
    }
    let same = extract_student_topology(&mut g, &[a], 3).unwrap()[0];
    assert_eq!(g.value(same), g.value(a));
    let z = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.5, 0.5, 0.0], vec![0.3, 0.3, 0.4]]).unwrap());
    assert!(matches!(extract_student_topology(&mut g, &[z], 2), Err(MuseError::DegenerateRow { row: 0, .. })));
}

#[test]
fn strict_routing_is_exact() {
    let cfg = small_config(RoutingMode::Strict);
    let (patches, teacher, _) = batch_of::<f64>(&cfg, 3, 21);
    for seed in 0..3 {
        let p = EncoderParams::<f64>::init(seed, &cfg).unwrap();
        for loss in [Loss::Anchor, Loss::Rec, Loss::Tokens] {
            let gr = grads_for(&p, &patches, &teacher, loss);
            assert_eq!(norm_where(&p, &gr, is_qk), 0.0);
        }
        let topo = grads_for(&p, &patches, &teacher, Loss::Topo);
        assert!(norm_where(&p, &topo, is_qk) > 0.0);
        assert_eq!(norm_where(&p, &topo, |m| m.subspace != Subspace::Topology), 0.0);
        // reconstruction trains only the decoder
        let rec = grads_for(&p, &patches, &teacher, Loss::Rec);
        assert_eq!(norm_where(&p, &rec, |m| m.subspace != Subspace::Decoder), 0.0);
        let anchor = grads_for(&p, &patches, &teacher, Loss::Anchor);
        assert!(norm_where(&p, &anchor, |m| m.subspace == Subspace::Semantic) > 0.0);
        assert_eq!(norm_where(&p, &anchor, |m| m.subspace == Subspace::Decoder), 0.0);
    }
}

#[test]
fn relaxed_and_naive_leak() {
    let (patches, teacher, _) = batch_of::<f64>(&small_config(RoutingMode::Naive), 3, 4);
    let relaxed = EncoderParams::<f64>::init(1, &small_config(RoutingMode::Relaxed)).unwrap();
    let topo = grads_for(&relaxed, &patches, &teacher, Loss::Topo);
    // queries and keys of the second block see the first block's values
    assert!(norm_where(&relaxed, &topo, |m| m.matrix == "w_v" && m.layer == Some(0)) > 0.0);
    let anchor = grads_for(&relaxed, &patches, &teacher, Loss::Anchor);
    assert_eq!(norm_where(&relaxed, &anchor, is_qk), 0.0);

    let naive = EncoderParams::<f64>::init(1, &small_config(RoutingMode::Naive)).unwrap();
    let anchor = grads_for(&naive, &patches, &teacher, Loss::Anchor);
    assert!(norm_where(&naive, &anchor, |m| m.matrix == "w_q" && m.layer == Some(1)) > 0.0);
    let rec = grads_for(&naive, &patches, &teacher, Loss::Rec);
    assert!(norm_where(&naive, &rec, |m| m.subspace == Subspace::Semantic) > 0.0);
}

#[test]
fn two_stream_gradients_are_disjoint() {
    let cfg = small_config(RoutingMode::TwoStream);
    let p = EncoderParams::<f64>::init(8, &cfg).unwrap();
    let (patches, teacher, _) = batch_of::<f64>(&cfg, 2, 30);
    let anchor = grads_for(&p, &patches, &teacher, Loss::Anchor);
    let topo = grads_for(&p, &patches, &teacher, Loss::Topo);
    let rec = grads_for(&p, &patches, &teacher, Loss::Rec);
    assert_eq!(norm_where(&p, &anchor, |m| m.stream == 0), 0.0);
    assert_eq!(norm_where(&p, &topo, |m| m.stream == 1), 0.0);
    assert_eq!(norm_where(&p, &rec, |m| m.stream == 1), 0.0);
    assert!(norm_where(&p, &anchor, |m| m.stream == 1) > 0.0);
    assert!(norm_where(&p, &rec, |m| m.stream == 0 && m.subspace == Subspace::Topology) > 0.0);
}

#[test]
fn full_composition_matches_finite_differences() {
    for (seed, routing) in [(0, RoutingMode::Naive), (1, RoutingMode::TwoStream), (2, RoutingMode::Naive)] {
        let cfg = ModelConfig { layers: 2, queries: 1, dim: 4, heads: 2, mlp_ratio: 1, embed_dim: 2, ..small_config(routing) };
        let params = EncoderParams::<f64>::init(seed, &cfg).unwrap();
        let (patches, teacher, _) = batch_of::<f64>(&cfg, 2, 100 + seed);
        let report = finite_difference_check(
            |g, vars| {
                let bound = BoundParams { vars: vars.to_vec() };
                let out = encoder_forward(g, &params, &bound, &patches)?;
                let mut total = build_loss(g, &params, &bound, &out, &patches, &teacher, Loss::Topo);
                for l in [Loss::Anchor, Loss::Rec] {
                    let part = build_loss(g, &params, &bound, &out, &patches, &teacher, l);
                    total = g.add(total, part)?;
                }
                Ok(total)
            },
            &params.values,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{routing}: {report:?}");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config(RoutingMode::Strict);
    let p = EncoderParams::<f32>::init(4, &cfg).unwrap();
    let (patches, _, _) = batch_of::<f32>(&cfg, 2, 3);
    let run = || {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let out = encoder_forward(&mut g, &p, &bound, &patches).unwrap();
        (g.value(out.embedding).clone(), g.value(out.recon).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn routing_mode_parsing() {
    for m in [RoutingMode::Strict, RoutingMode::Relaxed, RoutingMode::Naive, RoutingMode::TwoStream] {
        assert_eq!(m.as_str().parse::<RoutingMode>().unwrap(), m);
    }
    assert!(matches!("soft".parse::<RoutingMode>(), Err(MuseError::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { heads: 3, ..ModelConfig::default() },
        ModelConfig { queries: 0, ..ModelConfig::default() },
        ModelConfig { layers: 0, ..ModelConfig::default() },
        ModelConfig { embed_dim: 1, ..ModelConfig::default() },
        ModelConfig { tau_init: 2.0, ..ModelConfig::default() },
    ];
    for c in bad {
        assert!(matches!(EncoderParams::<f32>::init(0, &c), Err(MuseError::Config(_))));
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = small_config(RoutingMode::TwoStream);
    let p = EncoderParams::<f32>::init(12, &cfg).unwrap();
    let bytes = encode_checkpoint(&p, 42, 2);
    let (h, q) = decode_checkpoint::<f32>(&bytes).unwrap();
    assert_eq!((h.step, h.stage, &h.config), (42, 2, &cfg));
    assert_eq!(p.values, q.values);
    assert_eq!(encode_checkpoint(&q, 42, 2), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    write_checkpoint(&path, &p, 1, 3).unwrap();
    let (_, r) = read_checkpoint::<f64>(&path).unwrap();
    assert_eq!(r.cast::<f32>().values, p.values);
}

#[test]
fn checkpoint_errors() {
    let p = EncoderParams::<f32>::init(0, &small_config(RoutingMode::Strict)).unwrap();
    let bytes = encode_checkpoint(&p, 0, 1);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(MuseError::Parse { offset: 0, .. })));
    assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]), Err(MuseError::Truncated { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint::<f32>(&extra), Err(MuseError::Parse { .. })));
    let text = String::from_utf8_lossy(&bytes[8..60]).replace("\"version\":1", "\"version\":7");
    let mut ver = bytes[..8].to_vec();
    ver.extend_from_slice(text.as_bytes());
    ver.extend_from_slice(&bytes[60..]);
    assert!(matches!(decode_checkpoint::<f32>(&ver), Err(MuseError::Version { expected: 1, found: 7 })));
    let missing = read_checkpoint::<f32>(Path::new("/nonexistent/ck.bin"));
    assert!(matches!(missing, Err(MuseError::Io { .. })));
}

use std::path::Path;
