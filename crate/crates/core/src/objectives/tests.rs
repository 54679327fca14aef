use super::*;
use crate::autodiff::finite_difference_check;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn two_segment(grid: usize) -> Vec<f64> {
    // left half segment 0, right half segment 1
    let mask: Vec<u8> = (0..grid * grid).map(|i| u8::from(i % grid >= grid / 2)).collect();
    teacher_attention_from_mask(&mask, 0.0).unwrap().target
}

#[test]
fn psi_identity_and_constants() {
    let t = two_segment(4);
    assert_eq!(psi_resample(&t, 4, 4).unwrap(), t);
    let uniform = vec![1.0 / 16.0; 256];
    for g_s in [1, 2, 3, 5, 8] {
        let out = psi_resample(&uniform, 4, g_s).unwrap();
        let n = g_s * g_s;
        assert!(out.iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-12), "g_s = {g_s}");
    }
}

#[test]
fn psi_upsamples_two_segments() {
    let t = two_segment(2);
    let out = psi_resample(&t, 2, 4).unwrap();
    for i in 0..16 {
        let row = &out[i * 16..(i + 1) * 16];
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let left = (i % 4) < 2;
        let same: f64 = (0..16).filter(|j| (j % 4 < 2) == left).map(|j| row[j]).sum();
        assert!(same >= 1.0 - same, "row {i}: same-segment mass {same}");
    }
}

#[test]
fn psi_rejects_bad_input() {
    assert!(matches!(psi_resample(&[0.5, 0.4, 0.0, 1.0], 1, 2), Err(MuseError::Dimension { .. })));
    let mut t = two_segment(2);
    t[0] += 0.01;
    assert!(matches!(psi_resample(&t, 2, 3), Err(MuseError::Argument(_))));
    assert!(psi_resample(&two_segment(2), 2, 0).is_err());
}

proptest! {
    #[test]
    fn psi_output_is_stochastic(mask in proptest::collection::vec(0u8..3, 9), g_s in 1usize..6, eps in 0.0f64..0.5) {
        let t = teacher_attention_from_mask(&mask, eps).unwrap().target;
        let out = psi_resample(&t, 3, g_s).unwrap();
        let n = g_s * g_s;
        for row in out.chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

fn topo_value(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> f64 {
    let n = teacher.len();
    let mut g = Graph::<f64>::new();
    let t = Tensor::from_rows(&teacher).unwrap().reshaped(vec![1, n, n]).unwrap();
    let s = g.constant(Tensor::from_rows(&student).unwrap().reshaped(vec![1, 1, n, n]).unwrap());
    let l = topo_loss(&mut g, &[s], &t, 1).unwrap();
    g.value(l).item()
}

#[test]
fn topo_closed_forms() {
    let t = vec![vec![0.2, 0.8], vec![0.5, 0.5]];
    assert_eq!(topo_value(t.clone(), t), 0.0);
    let one_hot: Vec<Vec<f64>> = (0..64).map(|i| (0..64).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let uniform = vec![vec![1.0 / 64.0; 64]; 64];
    assert_abs_diff_eq!(topo_value(one_hot, uniform), 64f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(64f64.ln(), 4.1589, epsilon = 1e-4);
}

#[test]
fn topo_matches_extended_precision() {
    let t = vec![
        vec![0.5, 0.25, 0.25, 0.0],
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.25, 0.25, 0.25, 0.25],
    ];
    let s = vec![
        vec![0.4, 0.3, 0.2, 0.1],
        vec![0.25, 0.25, 0.25, 0.25],
        vec![0.05, 0.15, 0.7, 0.1],
        vec![0.1, 0.2, 0.3, 0.4],
    ];
    // 40-digit reference
    assert_abs_diff_eq!(topo_value(t, s), 0.176_667_406_949_823_22, epsilon = 1e-10);
}

#[test]
fn topo_averages_layers_and_heads() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().reshaped(vec![1, 2, 2]).unwrap();
    // head 0 matches, head 1 is uniform: per-row KL ln 2
    let l0 = g.constant(Tensor::new(vec![1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap());
    let l1 = g.constant(Tensor::new(vec![1, 2, 2, 2], vec![0.5; 8]).unwrap());
    let loss = topo_loss(&mut g, &[l0, l1], &t, 2).unwrap();
    assert_abs_diff_eq!(g.value(loss).item(), 0.75 * 2f64.ln(), epsilon = 1e-15);
}

#[test]
fn topo_gradient_check() {
    let teacher = Tensor::from_f64(vec![2, 3, 3], &[0.6, 0.3, 0.1, 0.2, 0.2, 0.6, 0.0, 0.5, 0.5, 1.0, 0.0, 0.0, 0.3, 0.3, 0.4, 0.1, 0.1, 0.8]).unwrap();
    for seed in 0..5u64 {
        let logits: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| ((i as f64 + 1.0) * (seed as f64 + 1.3)).sin()).collect();
        let leaf = Tensor::from_f64(vec![2, 2, 4, 4], &logits).unwrap();
        let report = finite_difference_check(
            |g, v| {
                let a = g.softmax_rows(v[0])?;
                let s = g.restrict_renorm(a, 3)?;
                topo_loss(g, &[s, s], &teacher, 2)
            },
            &[leaf],
            // the dropped column has an exactly zero gradient; keep rounding noise small
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn topo_rejects_zero_student_mass() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::from_f64(vec![1, 2, 2], &[0.5, 0.5, 0.5, 0.5]).unwrap();
    let s = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap());
    assert!(matches!(topo_loss(&mut g, &[s], &t, 1), Err(MuseError::NumericDomain { op: "topo_loss", .. })));
}

fn anchor_value(e: &[Vec<f64>], table: &[Vec<f64>], labels: &[usize], tau: f64, symmetric: bool) -> (f64, Option<f64>) {
    let mut g = Graph::<f64>::new();
    let e = g.param(Tensor::from_rows(e).unwrap());
    let table = g.param(Tensor::from_rows(table).unwrap());
    let tau = g.param(Tensor::scalar(tau));
    let out = anchor_loss(&mut g, e, labels, table, tau, symmetric).unwrap();
    (g.value(out.loss).item(), out.clamped_tau)
}

#[test]
fn anchor_closed_forms() {
    // two aligned pairs with orthogonal negatives
    let (l, _) = anchor_value(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 0.07, true);
    let expect = (1.0 + (-1.0f64 / 0.07).exp()).ln();
    assert_abs_diff_eq!(l, expect, epsilon = 1e-15);
    // about 6.2e-7
    assert!((l - 6.1e-7).abs() < 0.2e-7);

    // identical class rows make every row of logits constant
    let e: Vec<Vec<f64>> = (0..6).map(|i| { let a = i as f64; vec![a.cos(), a.sin()] }).collect();
    let table = vec![vec![0.0, 3.0]; 6];
    let labels: Vec<usize> = (0..6).collect();
    let (l, _) = anchor_value(&e, &table, &labels, 0.5, false);
    assert_abs_diff_eq!(l, 6f64.ln(), epsilon = 1e-12);
    // and identical embeddings make the columns constant too
    let same = vec![vec![0.6, 0.8]; 6];
    let (l, _) = anchor_value(&same, &table, &labels, 0.5, true);
    assert_abs_diff_eq!(l, 6f64.ln(), epsilon = 1e-12);
}

#[test]
fn anchor_masks_duplicate_labels() {
    let e = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
    let table = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    // all labels equal: each row keeps only its own pair
    let (l, _) = anchor_value(&e, &table, &[1, 1, 1], 0.1, true);
    assert_eq!(l, 0.0);
    // rows 0 and 1 share a label and do not compete with each other
    let (l, _) = anchor_value(&e, &table, &[0, 0, 1], 1.0, false);
    let row = |own: f64, others: &[f64]| (own.exp() + others.iter().map(|o| o.exp()).sum::<f64>()).ln() - own;
    let expect = (row(1.0, &[0.0]) + row(0.6, &[0.8]) + row(1.0, &[0.0, 0.0])) / 3.0;
    assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
}

#[test]
fn anchor_guards() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let table = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (_, clamp) = anchor_value(&e, &table, &[0, 1], 1e-5, true);
    assert_eq!(clamp, Some(1e-3));
    let (_, clamp) = anchor_value(&e, &table, &[0, 1], 50.0, true);
    assert_eq!(clamp, Some(10.0));
    let mut g = Graph::<f64>::new();
    let one = g.param(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let tb = g.param(Tensor::from_rows(&table).unwrap());
    let tau = g.param(Tensor::scalar(0.07));
    assert!(matches!(anchor_loss(&mut g, one, &[0], tb, tau, true), Err(MuseError::Argument(_))));
    let two = g.param(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap());
    assert!(matches!(anchor_loss(&mut g, two, &[0, 1], tb, tau, true), Err(MuseError::Argument(_))));
}

#[test]
fn anchor_gradient_check() {
    for seed in 0..5u64 {
        let raw: Vec<f64> = (0..4 * 8).map(|i| ((i as f64 + 0.7) * (seed as f64 + 2.1)).cos()).collect();
        let table: Vec<f64> = (0..8 * 8).map(|i| ((i as f64 + 0.3) * (seed as f64 + 1.7)).sin()).collect();
        let leaves = [
            Tensor::from_f64(vec![4, 8], &raw).unwrap(),
            Tensor::from_f64(vec![8, 8], &table).unwrap(),
            Tensor::scalar(0.3),
        ];
        let labels = [seed as usize % 8, 3, 5, 3];
        let report = finite_difference_check(
            |g, v| {
                let e = g.normalize_rows(v[0])?;
                Ok(anchor_loss(g, e, &labels, v[1], v[2], true)?.loss)
            },
            &leaves,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn recon_examples() {
    let mut g = Graph::<f64>::new();
    let target = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
    let same = g.param(target.clone());
    let l = recon_loss(&mut g, same, &target).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let shifted = g.param(Tensor::from_rows(&[vec![0.6, 0.7], vec![0.8, 0.9]]).unwrap());
    let l = recon_loss(&mut g, shifted, &target).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), 0.25, epsilon = 1e-15);
    g.backward(l).unwrap();
    for &d in g.grad(shifted).unwrap() {
        assert_abs_diff_eq!(d, 2.0 * 0.5 / 4.0, epsilon = 1e-15);
    }
}

#[test]
fn flow_matching_examples() {
    assert_eq!(interpolate(&[0.3, -1.0], &[5.0, 2.0], 0.0), vec![0.3, -1.0]);
    assert_eq!(interpolate(&[0.0, 0.0], &[2.0, 2.0], 0.5), vec![1.0, 1.0]);
    let x0 = Tensor::from_rows(&[vec![0.1, -0.4, 2.0], vec![1.5, 0.0, -3.0]]).unwrap();
    let x1 = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]]).unwrap();
    let mut g = Graph::<f64>::new();
    let diff: Vec<f64> = x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect();
    let oracle = g.param(Tensor::new(vec![2, 3], diff).unwrap());
    let l = flow_matching_loss(&mut g, oracle, &x0, &x1, &[0.2, 0.9]).unwrap();
    assert!(g.value(l).item().abs() <= 1e-12);
    assert!(matches!(flow_matching_loss(&mut g, oracle, &x0, &x1, &[0.2, 1.5]), Err(MuseError::Argument(_))));
    let inputs = flow_inputs(&x0, &x1, &[0.0, 1.0], None).unwrap();
    assert_eq!(inputs.row(0), &[0.1, -0.4, 2.0, 0.0]);
    assert_eq!(inputs.row(1), &[-1.0, 0.5, 0.25, 1.0]);
}

#[test]
fn toy_flow_learns() {
    let report = train_toy_flow(&FlowToyConfig::default()).unwrap();
    assert!(report.final_loss <= 0.5 * report.initial_loss, "{report:?}");
}

#[test]
fn total_loss_examples() {
    let weights = StageWeights::default();
    let mut g = Graph::<f64>::new();
    let one = g.constant(Tensor::scalar(1.0));
    let two = g.constant(Tensor::scalar(2.0));
    let zero = g.constant(Tensor::scalar(0.0));
    let (t, rec) = total_loss(&mut g, &LossParts { topo: Some(two), ..Default::default() }, weights.stage(1).unwrap()).unwrap();
    assert_eq!(g.value(t).item(), 2.0);
    assert_eq!(rec.topo, Some(2.0));
    let all = LossParts { topo: Some(one), anchor: Some(one), rec: Some(one) };
    let (t, rec) = total_loss(&mut g, &all, weights.stage(3).unwrap()).unwrap();
    assert_abs_diff_eq!(g.value(t).item(), 1.6, epsilon = 1e-15);
    assert_eq!(rec.total, g.value(t).item());
    assert_eq!(weights.stage(3).unwrap().combine(Some(1.0), Some(1.0), Some(1.0)), rec.total);
    let zeros = LossParts { topo: Some(zero), anchor: Some(zero), rec: Some(zero) };
    let (t, _) = total_loss(&mut g, &zeros, weights.stage(3).unwrap()).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
    let missing = LossParts { topo: Some(one), ..Default::default() };
    assert!(matches!(total_loss(&mut g, &missing, weights.stage(2).unwrap()), Err(MuseError::Config(_))));
    assert!(weights.stage(4).is_err());
}

#[test]
fn table_weights() {
    let w = StageWeights::default();
    assert_eq!((w.0[0].topo, w.0[1].anchor, w.0[2].anchor, w.0[2].rec, w.0[2].spec), (1.0, 0.2, 0.1, 1.0, 0.5));
    w.validate().unwrap();
    let bad = LossWeights { topo: -1.0, ..w.0[0] };
    assert!(bad.validate().is_err());
}
