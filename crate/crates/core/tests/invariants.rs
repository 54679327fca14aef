use muse_core::autodiff::{Graph, Tensor};
use muse_core::diagnostics::{gradient_cosine, LossKind, SubspaceTag};
use muse_core::encoder::{
    decode_checkpoint, encode_checkpoint, encoder_forward, extract_student_topology, EncoderParams, ModelConfig, RoutingMode,
    Subspace,
};
use muse_core::objectives::{psi_resample, topo_loss};
use muse_core::scenes::{
    decode_dataset, encode_dataset, generate_dataset, patchify, teacher_attention_from_mask, unpatchify, DatasetHeader,
    SceneConfig, SceneSample,
};
use muse_core::trainer::{conflict_probe, soft_reg_adjust, warmup_lr, PreparedData};
use proptest::prelude::*;

fn tiny(routing: RoutingMode) -> ModelConfig {
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

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-50.0f64..50.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(t in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t.clone());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(t.cols()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn detached_ancestors_get_exactly_zero(a in matrix(3, 4), b in matrix(3, 4), w in matrix(3, 4)) {
        let mut g = Graph::<f64>::new();
        let (va, vb, vw) = (g.param(a), g.param(b), g.param(w));
        let c = g.mul(va, vb).unwrap();
        let c = g.scale(c, 0.01);
        let c = g.exp(c);
        let d = g.stop_gradient(c);
        let e = g.mul(d, vw).unwrap();
        let e = g.mul(e, vw).unwrap();
        let loss = g.sum(e);
        g.backward(loss).unwrap();
        prop_assert!(g.grad(va).unwrap_or(&[]).iter().all(|&v| v == 0.0));
        prop_assert!(g.grad(vb).unwrap_or(&[]).iter().all(|&v| v == 0.0));
        prop_assert!(g.grad(vw).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let ab = gradient_cosine(&a, &b).unwrap();
        prop_assert_eq!(ab, gradient_cosine(&b, &a).unwrap());
        if let Some(c) = ab {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn soft_reg_shrinks_conflict_by_lambda(
        a in proptest::collection::vec(-3.0f64..3.0, 5),
        b in proptest::collection::vec(-3.0f64..3.0, 5),
        lambda in 0.0f64..=1.0,
    ) {
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        prop_assume!(dot(&b, &b) > 1e-6 && dot(&a, &a) > 1e-6);
        let out = soft_reg_adjust(&a, &b, lambda).unwrap();
        let d = dot(&a, &b);
        if d < 0.0 {
            prop_assert!((dot(&out.a, &b) - (1.0 - lambda) * d).abs() <= 1e-9);
            prop_assert!((dot(&out.b, &a) - (1.0 - lambda) * d).abs() <= 1e-9);
        } else {
            prop_assert_eq!(&out.a, &a);
            prop_assert_eq!(&out.b, &b);
        }
    }

    #[test]
    fn warmup_never_exceeds_base_and_grows(base in 1e-6f64..1.0, warmup in 0usize..50, k in 0usize..100) {
        let lr = warmup_lr(base, k, warmup);
        prop_assert!(lr > 0.0 && lr <= base);
        prop_assert!(warmup_lr(base, k + 1, warmup) >= lr);
    }

    #[test]
    fn teacher_rows_are_stochastic_and_support_is_an_equivalence(
        mask in proptest::collection::vec(0u8..4, 1..20),
        eps in prop_oneof![Just(0.0f64), 0.0f64..0.9],
    ) {
        let n = mask.len();
        let t = teacher_attention_from_mask(&mask, eps).unwrap();
        for row in t.target.chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let bare = teacher_attention_from_mask(&mask, 0.0).unwrap();
        let linked = |i: usize, j: usize| bare.target[i * n + j] > 0.0;
        for i in 0..n {
            prop_assert!(linked(i, i));
            for j in 0..n {
                prop_assert_eq!(linked(i, j), linked(j, i));
                prop_assert_eq!(linked(i, j), mask[i] == mask[j]);
            }
        }
    }

    #[test]
    fn psi_is_identity_on_matching_grids(mask in proptest::collection::vec(0u8..3, 16)) {
        let t = teacher_attention_from_mask(&mask, 0.0).unwrap();
        prop_assert_eq!(psi_resample(&t.target, 4, 4).unwrap(), t.target);
    }

    #[test]
    fn topology_loss_is_nonnegative_and_zero_at_the_teacher(
        mask in proptest::collection::vec(0u8..3, 9),
        logits in proptest::collection::vec(-4.0f64..4.0, 2 * 81),
    ) {
        let heads = 2;
        let teacher = teacher_attention_from_mask(&mask, 0.1).unwrap().target;
        let teacher_t = Tensor::new(vec![1, 9, 9], teacher.clone()).unwrap();
        let mut g = Graph::<f64>::new();
        let exact = g.constant(Tensor::new(vec![1, heads, 9, 9], [teacher.clone(), teacher].concat()).unwrap());
        let zero = topo_loss(&mut g, &[exact], &teacher_t, heads).unwrap();
        prop_assert!(g.value(zero).item().abs() <= 1e-9);
        let s = g.constant(Tensor::new(vec![18, 9], logits).unwrap());
        let s = g.softmax_rows(s).unwrap();
        let s = g.reshape(s, vec![1, heads, 9, 9]).unwrap();
        let kl = topo_loss(&mut g, &[s], &teacher_t, heads).unwrap();
        prop_assert!(g.value(kl).item() >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn patches_round_trip_to_the_image(pixels in proptest::collection::vec(0.0f32..1.0, 8 * 8 * 3), patch in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)]) {
        let config = SceneConfig { image_size: 8, patch, classes: 4, objects: 1 };
        let sample = SceneSample { image: pixels.clone(), mask: vec![0; 64], label: 0, seed: 0 };
        let back = unpatchify(&patchify(&sample, &config).tokens, &config);
        prop_assert!(back.iter().zip(&pixels).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dataset_bytes_round_trip(count in 0usize..6, seed in any::<u64>()) {
        let config = SceneConfig { image_size: 16, patch: 4, classes: 4, objects: 1 };
        let samples = generate_dataset(count, seed, &config).unwrap();
        let bytes = encode_dataset(&DatasetHeader::new(count, seed, &config), &samples).unwrap();
        let (header, back) = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &samples);
        prop_assert_eq!(encode_dataset(&header, &back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), step in any::<u64>(), stage in 1u8..=3) {
        let params = EncoderParams::<f32>::init(seed, &tiny(RoutingMode::Strict)).unwrap();
        let bytes = encode_checkpoint(&params, step, stage);
        let (header, back) = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!((header.step, header.stage), (step, stage));
        prop_assert_eq!(encode_checkpoint(&back, step, stage), bytes);
    }

    #[test]
    fn attention_and_restricted_maps_are_stochastic(seed in 0u64..1000, routing in prop_oneof![Just(RoutingMode::Strict), Just(RoutingMode::Naive), Just(RoutingMode::TwoStream)]) {
        let config = tiny(routing);
        let params = EncoderParams::<f64>::init(seed, &config).unwrap();
        let samples = generate_dataset(2, seed, &config.scene).unwrap();
        let data = PreparedData::new(&samples, &config.scene, None, 0.0).unwrap();
        let batch = data.batch::<f64>(&[0, 1]).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = encoder_forward(&mut g, &params, &bound, &batch.patches).unwrap();
        let restricted = extract_student_topology(&mut g, &out.attention, config.scene.num_patches()).unwrap();
        for (&full, &sub) in out.attention.iter().zip(&restricted) {
            for (map, width) in [(full, config.seq_len()), (sub, config.scene.num_patches())] {
                for row in g.value(map).data().chunks(width) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn strict_routing_separates_subspaces_exactly(seed in 0u64..1000, data_seed in 0u64..1000) {
        let config = tiny(RoutingMode::Strict);
        let params = EncoderParams::<f64>::init(seed, &config).unwrap();
        let samples = generate_dataset(6, data_seed, &config.scene).unwrap();
        let data = PreparedData::new(&samples, &config.scene, None, 0.0).unwrap();
        let batch = data.batch::<f64>(&[0, 1, 2, 3]).unwrap();
        let (report, _) = conflict_probe(&params, &batch, &LossKind::ALL, &[SubspaceTag::ALL], 0, true).unwrap();
        prop_assert!(report.norms.iter().any(|n| n.loss == LossKind::Topo && n.norm > 0.0));
        prop_assert!(!report.cosines.is_empty());
        for n in &report.norms {
            let qk = n.matrix == "w_q" || n.matrix == "w_k";
            match n.loss {
                LossKind::Anchor | LossKind::Rec if qk => prop_assert_eq!(n.norm, 0.0),
                LossKind::Topo if n.subspace != Subspace::Topology => prop_assert_eq!(n.norm, 0.0),
                _ => {}
            }
        }
        // Disjoint supports make every cross-loss cosine over all parameters exactly zero.
        for c in &report.cosines {
            prop_assert!(c.cosine.is_none_or(|v| v == 0.0), "{:?}", c);
        }
    }

    #[test]
    fn backward_is_bitwise_repeatable(seed in 0u64..1000) {
        let config = tiny(RoutingMode::Naive);
        let params = EncoderParams::<f64>::init(seed, &config).unwrap();
        let samples = generate_dataset(4, seed, &config.scene).unwrap();
        let data = PreparedData::new(&samples, &config.scene, None, 0.0).unwrap();
        let batch = data.batch::<f64>(&[0, 1, 2, 3]).unwrap();
        let run = || conflict_probe(&params, &batch, &LossKind::ALL, &[SubspaceTag::ALL], 0, true).unwrap().0;
        let (x, y) = (run(), run());
        prop_assert!(x.norms.iter().zip(&y.norms).all(|(p, q)| p.norm.to_bits() == q.norm.to_bits()));
    }
}
