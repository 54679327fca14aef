//! Held-out metrics: attention segmentation, linear probe, class retrieval,
//! reconstruction PSNR and mean topology divergence.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real};
use crate::encoder::{encoder_forward, extract_student_topology, EncoderParams};
use crate::error::{MuseError, Result};
use crate::objectives::topo_loss;
use crate::trainer::PreparedData;

/// Segmentation scores of one or more scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScore {
    pub pair_acc: f64,
    /// `None` when the scene has no foreground patch.
    pub iou: Option<f64>,
}

/// Scores a patch map `a` (`n x n`, row-major) against `patch_mask`.
/// Pairs are predicted same-segment when `a[i,j] + a[j,i] > 2/n`. The IoU
/// seed is the foreground patch with the most mass on other foreground
/// patches; its predicted region is `{j : a[seed,j] > 1/n}`.
pub fn attention_segmentation(a: &[f64], patch_mask: &[u8]) -> Result<SegScore> {
    let n = patch_mask.len();
    if n < 2 || a.len() != n * n {
        return Err(MuseError::dim("attention_segmentation", &[a.len()], &[n, n]));
    }
    let pair_threshold = 2.0 / n as f64;
    let mut correct = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let predicted = a[i * n + j] + a[j * n + i] > pair_threshold;
            if predicted == (patch_mask[i] == patch_mask[j]) {
                correct += 1;
            }
        }
    }
    let pair_acc = correct as f64 / (n * (n - 1) / 2) as f64;

    let foreground: Vec<usize> = (0..n).filter(|&i| patch_mask[i] != 0).collect();
    let mut seed: Option<(usize, f64)> = None;
    for &i in &foreground {
        let mass: f64 = foreground.iter().filter(|&&j| j != i).map(|&j| a[i * n + j]).sum();
        if seed.is_none_or(|(_, best)| mass > best) {
            seed = Some((i, mass));
        }
    }
    let iou = seed.map(|(s, _)| {
        let row_threshold = 1.0 / n as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        for j in 0..n {
            let predicted = a[s * n + j] > row_threshold;
            let truth = patch_mask[j] == patch_mask[s];
            inter += usize::from(predicted && truth);
            union += usize::from(predicted || truth);
        }
        inter as f64 / union as f64
    });
    Ok(SegScore { pair_acc, iou })
}

/// Scores closer than this, relative to their magnitude, count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let scale = scores.iter().fold(0f64, |m, s| m.max(s.abs()));
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s - scores[best] > TIE_TOLERANCE * scale.max(1.0) {
            best = i;
        }
    }
    best
}

/// Deterministic 80/20 split of `0..m`.
pub fn probe_split(m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = (m * 4).div_ceil(5).min(m.saturating_sub(1));
    let test = idx.split_off(train);
    (idx, test)
}

/// One-vs-rest ridge regression on `[features, 1]` with one-hot targets,
/// scored by held-out accuracy. `features` is `m x d`, row-major.
pub fn linear_probe(features: &[f64], dim: usize, labels: &[usize], classes: usize, ridge: f64, seed: u64) -> Result<f64> {
    let m = labels.len();
    if dim == 0 || features.len() != m * dim {
        return Err(MuseError::dim("linear_probe", &[features.len()], &[m, dim]));
    }
    if m < 2 * classes || classes < 2 {
        return Err(MuseError::Argument(format!("linear probe needs at least {} samples, got {m}", 2 * classes)));
    }
    if !(ridge > 0.0) {
        return Err(MuseError::Argument(format!("ridge strength must be positive, got {ridge}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(MuseError::NumericDomain { op: "linear_probe", detail: "non-finite feature".into() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MuseError::Argument(format!("label {bad} outside {classes} classes")));
    }
    let (train, test) = probe_split(m, seed);
    let design = |rows: &[usize]| {
        DMatrix::from_fn(rows.len(), dim + 1, |r, c| if c == dim { 1.0 } else { features[rows[r] * dim + c] })
    };
    let x = design(&train);
    let y = DMatrix::from_fn(train.len(), classes, |r, c| if labels[train[r]] == c { 1.0 } else { 0.0 });
    let gram = x.transpose() * &x + DMatrix::identity(dim + 1, dim + 1) * ridge;
    let rhs = x.transpose() * y;
    let chol = gram.cholesky().ok_or_else(|| MuseError::NumericDomain {
        op: "linear_probe",
        detail: "ridge system is not positive definite".into(),
    })?;
    let weights = chol.solve(&rhs);
    let scores = design(&test) * weights;
    let correct = (0..test.len())
        .filter(|&r| {
            let row: Vec<f64> = scores.row(r).iter().copied().collect();
            argmax_lowest(&row) == labels[test[r]]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Fraction of unit embeddings whose most similar class row is their label.
/// `embeddings` is `m x d`, `class_rows` is `c x d`.
pub fn retrieval_top1(embeddings: &[f64], labels: &[usize], class_rows: &[f64], dim: usize) -> Result<f64> {
    let m = labels.len();
    if m == 0 || dim == 0 || embeddings.len() != m * dim || !class_rows.len().is_multiple_of(dim) {
        return Err(MuseError::dim("retrieval_top1", &[embeddings.len()], &[m, dim]));
    }
    let classes = DMatrix::from_row_slice(class_rows.len() / dim, dim, class_rows);
    let correct = (0..m)
        .filter(|&i| {
            let e = DVector::from_column_slice(&embeddings[i * dim..(i + 1) * dim]);
            let scores: Vec<f64> = (&classes * e).iter().copied().collect();
            argmax_lowest(&scores) == labels[i]
        })
        .count();
    Ok(correct as f64 / m as f64)
}

/// `10 log10(1 / MSE)`; infinite when the inputs are identical.
pub fn psnr(recon: &[f64], target: &[f64]) -> Result<f64> {
    if recon.len() != target.len() || recon.is_empty() {
        return Err(MuseError::dim("psnr", &[recon.len()], &[target.len()]));
    }
    let mse = recon.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / recon.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// JSON form of a PSNR value: a number, or `"inf"` for a perfect match.
pub fn psnr_json(db: f64) -> serde_json::Value {
    if db.is_infinite() {
        serde_json::Value::String("inf".into())
    } else {
        serde_json::json!(db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub ridge: f64,
    pub batch_size: usize,
    pub teacher_smoothing: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 0, ridge: 1e-3, batch_size: 50, teacher_smoothing: 0.0 }
    }
}

/// Metrics of a model on a held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seg_pair_acc: f64,
    pub seg_iou: f64,
    pub probe_acc: f64,
    pub retrieval_top1: f64,
    pub psnr_db: f64,
    pub recon_mse: f64,
    /// Mean per-row divergence from the teacher over layers and heads.
    pub topo_kl: f64,
    pub n: usize,
    /// Scenes without foreground, left out of the IoU mean.
    pub iou_skipped: usize,
}

/// Forward-only pass over `data` in batches.
pub fn evaluate<T: Real>(params: &EncoderParams<T>, data: &PreparedData, config: &EvalConfig) -> Result<EvalReport> {
    let m = data.len();
    if m == 0 || config.batch_size == 0 {
        return Err(MuseError::Argument("evaluation needs data and a positive batch size".into()));
    }
    let cfg = &params.config;
    let (np, heads, layers) = (cfg.scene.num_patches(), cfg.heads, cfg.layers);
    let mut pair_sum = 0.0;
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    let (mut sq_err, mut count) = (0.0, 0usize);
    let mut kl_sum = 0.0;
    let mut pooled = Vec::with_capacity(m * cfg.dim);
    let mut embeddings = Vec::with_capacity(m * cfg.embed_dim);
    let indices: Vec<usize> = (0..m).collect();
    for chunk in indices.chunks(config.batch_size) {
        let batch = data.batch::<T>(chunk)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = encoder_forward(&mut g, params, &bound, &batch.patches)?;
        let maps = extract_student_topology(&mut g, &out.attention, np)?;
        let kl = topo_loss(&mut g, &maps, &batch.teacher, heads)?;
        kl_sum += g.value(kl).item().f64() * chunk.len() as f64;

        let mut mean_map = vec![0f64; chunk.len() * np * np];
        let w = 1.0 / (layers * heads) as f64;
        for &layer in &maps {
            for (b, dst) in mean_map.chunks_mut(np * np).enumerate() {
                let src = &g.value(layer).data()[b * heads * np * np..(b + 1) * heads * np * np];
                for head in src.chunks(np * np) {
                    for (d, &s) in dst.iter_mut().zip(head) {
                        *d += w * s.f64();
                    }
                }
            }
        }
        for (b, &i) in chunk.iter().enumerate() {
            let score = attention_segmentation(&mean_map[b * np * np..(b + 1) * np * np], &data.grids[i].patch_mask)?;
            pair_sum += score.pair_acc;
            if let Some(v) = score.iou {
                iou_sum += v;
                iou_n += 1;
            }
        }
        for (r, t) in g.value(out.recon).data().iter().zip(batch.patches.data()) {
            let d = r.f64() - t.f64();
            sq_err += d * d;
        }
        count += batch.patches.numel();
        pooled.extend(g.value(out.pooled).to_f64());
        embeddings.extend(g.value(out.embedding).to_f64());
    }
    let table = params.values[params.layout.class_emb].to_f64();
    let classes = params.values[params.layout.class_emb].rows();
    let class_rows: Vec<f64> = table
        .chunks(cfg.embed_dim)
        .flat_map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(move |v| v / n)
        })
        .collect();
    let recon_mse = sq_err / count as f64;
    Ok(EvalReport {
        seg_pair_acc: pair_sum / m as f64,
        seg_iou: if iou_n > 0 { iou_sum / iou_n as f64 } else { 0.0 },
        probe_acc: linear_probe(&pooled, cfg.dim, &data.labels, classes, config.ridge, config.seed)?,
        retrieval_top1: retrieval_top1(&embeddings, &data.labels, &class_rows, cfg.embed_dim)?,
        psnr_db: psnr_from_mse(recon_mse),
        recon_mse,
        topo_kl: kl_sum / m as f64,
        n: m,
        iou_skipped: m - iou_n,
    })
}

#[cfg(test)]
mod tests;
