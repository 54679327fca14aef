use super::*;
use crate::encoder::ModelConfig;
use crate::scenes::{generate_dataset, teacher_attention_from_mask, SceneConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn object_mask() -> Vec<u8> {
    // 4x4 grid with a 2x2 object in the top-left corner
    (0..16).map(|i| u8::from(i % 4 < 2 && i / 4 < 2)).collect()
}

fn random_stochastic(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>().powi(3)).collect();
    for row in a.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

#[test]
fn exact_teacher_segments_perfectly() {
    let mask = object_mask();
    let teacher = teacher_attention_from_mask(&mask, 0.0).unwrap().target;
    let s = attention_segmentation(&teacher, &mask).unwrap();
    assert_eq!(s.pair_acc, 1.0);
    assert_eq!(s.iou, Some(1.0));
}

#[test]
fn uniform_attention_predicts_no_same_pairs() {
    let mask = object_mask();
    let s = attention_segmentation(&vec![1.0 / 16.0; 256], &mask).unwrap();
    // 4 object and 12 background patches: 4*12 of 120 pairs differ
    assert_eq!(s.pair_acc, 48.0 / 120.0);
    // the seed row is uniform, so nothing clears the row threshold
    assert_eq!(s.iou, Some(0.0));
    let background = vec![0u8; 16];
    assert_eq!(attention_segmentation(&vec![1.0 / 16.0; 256], &background).unwrap().iou, None);
}

#[test]
fn segmentation_matches_brute_force_enumeration() {
    let mask = object_mask();
    let n = mask.len();
    for seed in 0..20 {
        let a = random_stochastic(n, seed);
        // ordered pairs, each unordered pair counted twice
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j && ((a[i * n + j] + a[j * n + i]) * n as f64 > 2.0) == (mask[i] == mask[j]) {
                    hits += 1;
                }
            }
        }
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for i in (0..n).filter(|&i| mask[i] == 1) {
            let mass: f64 = (0..n).filter(|&j| j != i && mask[j] == 1).map(|j| a[i * n + j]).sum();
            if mass > best.1 {
                best = (i, mass);
            }
        }
        let predicted: Vec<usize> = (0..n).filter(|&j| a[best.0 * n + j] * n as f64 > 1.0).collect();
        let truth: Vec<usize> = (0..n).filter(|&j| mask[j] == 1).collect();
        let inter = predicted.iter().filter(|j| truth.contains(j)).count();
        let union = predicted.len() + truth.len() - inter;
        let s = attention_segmentation(&a, &mask).unwrap();
        assert_eq!(s.pair_acc, hits as f64 / (n * (n - 1)) as f64, "seed {seed}");
        assert_eq!(s.iou, Some(inter as f64 / union as f64), "seed {seed}");
    }
}

#[test]
fn segmentation_rejects_bad_shapes() {
    assert!(attention_segmentation(&[1.0; 9], &object_mask()).is_err());
}

fn one_hot(labels: &[usize], c: usize) -> Vec<f64> {
    labels.iter().flat_map(|&l| (0..c).map(move |k| f64::from(u8::from(k == l)))).collect()
}

fn labels(m: usize, c: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| rng.random_range(0..c)).collect()
}

#[test]
fn probe_separates_one_hot_features() {
    let y = labels(200, 8, 1);
    assert_eq!(linear_probe(&one_hot(&y, 8), 8, &y, 8, 1e-3, 0).unwrap(), 1.0);
}

#[test]
fn probe_on_constant_features_is_near_chance() {
    let c = 8;
    let mean: f64 = (0..20)
        .map(|seed| {
            let y = labels(400, c, 100 + seed);
            linear_probe(&vec![1.0; 400 * 3], 3, &y, c, 1e-3, seed).unwrap()
        })
        .sum::<f64>()
        / 20.0;
    assert!(mean >= 0.5 / c as f64 && mean <= 2.0 / c as f64, "{mean}");
}

#[test]
fn huge_ridge_ties_to_class_zero() {
    let y = labels(100, 4, 2);
    let acc = linear_probe(&one_hot(&y, 4), 4, &y, 4, 1e30, 3).unwrap();
    let (_, test) = probe_split(100, 3);
    let zeros = test.iter().filter(|&&i| y[i] == 0).count() as f64 / test.len() as f64;
    assert_eq!(acc, zeros);
}

#[test]
fn probe_is_rotation_invariant() {
    let (m, d, c) = (160, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = labels(m, c, 4);
    let features: Vec<f64> = (0..m * d)
        .map(|k| Distribution::<f64>::sample(&StandardNormal, &mut rng) + 2.0 * f64::from(u8::from(k % d == y[k / d])))
        .collect::<Vec<f64>>();
    let random = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let q = random.qr().q();
    let x = DMatrix::from_row_slice(m, d, &features);
    let rotated = x * q;
    let rotated: Vec<f64> = (0..m).flat_map(|r| rotated.row(r).iter().copied().collect::<Vec<_>>()).collect();
    let a = linear_probe(&features, d, &y, c, 1e-3, 5).unwrap();
    let b = linear_probe(&rotated, d, &y, c, 1e-3, 5).unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    assert!(a > 0.4);
}

#[test]
fn probe_guards() {
    let y = labels(10, 8, 0);
    assert!(linear_probe(&[0.0; 10], 1, &y, 8, 1e-3, 0).is_err());
    let y = labels(40, 2, 0);
    let mut f = vec![0.0; 40];
    f[3] = f64::NAN;
    assert!(matches!(linear_probe(&f, 1, &y, 2, 1e-3, 0), Err(MuseError::NumericDomain { .. })));
}

#[test]
fn retrieval_examples() {
    let classes = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(retrieval_top1(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0], &[0, 1, 1], &classes, 2).unwrap(), 1.0);
    // orthogonal to both prototypes in 3-d: always class 0
    let classes3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let e = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    assert_eq!(retrieval_top1(&e, &[0, 1, 1], &classes3, 3).unwrap(), 1.0 / 3.0);
}

fn random_units(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..m * d).map(|_| StandardNormal.sample(&mut *rng)).collect();
    for row in v.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[test]
fn retrieval_null_is_near_chance() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_units(&mut rng, 1000, 16);
        let t = random_units(&mut rng, 8, 16);
        let y = labels(1000, 8, seed + 50);
        let acc = retrieval_top1(&e, &y, &t, 16).unwrap();
        assert!((0.09..=0.16).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn psnr_examples() {
    let target = vec![0.5; 4];
    assert!((psnr(&[0.6; 4], &target).unwrap() - 20.0).abs() < 1e-9);
    assert!((psnr(&[1.0; 4], &target).unwrap() - 6.020599913279624).abs() < 1e-12);
    assert_eq!(psnr(&target, &target).unwrap(), f64::INFINITY);
    assert_eq!(psnr_json(f64::INFINITY), serde_json::json!("inf"));
    assert_eq!(psnr_json(20.0), serde_json::json!(20.0));
    assert!(psnr(&[], &[]).is_err());
}

#[test]
fn evaluation_of_an_untrained_model_is_in_range() {
    let model = ModelConfig {
        scene: SceneConfig { image_size: 8, patch: 2, classes: 4, objects: 1 },
        dim: 8,
        heads: 2,
        layers: 2,
        queries: 2,
        embed_dim: 4,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let samples = generate_dataset(30, 4, &model.scene).unwrap();
    let data = PreparedData::new(&samples, &model.scene, None, 0.0).unwrap();
    let params = EncoderParams::<f64>::init(1, &model).unwrap();
    let config = EvalConfig { batch_size: 7, ..EvalConfig::default() };
    let a = evaluate(&params, &data, &config).unwrap();
    let b = evaluate(&params, &data, &EvalConfig { batch_size: 30, ..config }).unwrap();
    for v in [a.seg_pair_acc, a.seg_iou, a.probe_acc, a.retrieval_top1] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(a.psnr_db.is_finite() && a.topo_kl > 0.0);
    assert_eq!(a.n, 30);
    assert!((a.topo_kl - b.topo_kl).abs() < 1e-12);
    assert_eq!((a.seg_pair_acc, a.probe_acc), (b.seg_pair_acc, b.probe_acc));
}
