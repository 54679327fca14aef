//! Training losses: attention-topology distillation, contrastive anchoring
//! to class embeddings, patch reconstruction, and a toy flow-matching loss.

mod flow;

use serde::{Deserialize, Serialize};

pub use flow::{flow_inputs, flow_matching_loss, interpolate, train_toy_flow, FlowToyConfig, FlowToyReport, ToyVelocity};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{MuseError, Result};
use crate::scenes::teacher_attention_from_mask;

/// Loss weights of one stage. `spec` scales the reconstruction term on top
/// of `rec`; `reg` is the projection strength of the soft-regularised ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub topo: f64,
    pub anchor: f64,
    pub rec: f64,
    pub spec: f64,
    pub reg: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { topo: 0.0, anchor: 0.0, rec: 0.0, spec: 1.0, reg: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.topo, self.anchor, self.rec, self.spec, self.reg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MuseError::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        if self.reg > 1.0 {
            return Err(MuseError::Config(format!("projection strength {} outside [0, 1]", self.reg)));
        }
        Ok(())
    }

    /// Effective multiplier on the reconstruction loss.
    pub fn rec_scale(&self) -> f64 {
        self.rec * self.spec
    }

    /// Weighted sum of plain loss values; absent parts count as zero.
    pub fn combine(&self, topo: Option<f64>, anchor: Option<f64>, rec: Option<f64>) -> f64 {
        self.topo * topo.unwrap_or(0.0) + self.anchor * anchor.unwrap_or(0.0) + self.rec_scale() * rec.unwrap_or(0.0)
    }
}

/// Weights for stages 1 to 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWeights(pub [LossWeights; 3]);

impl Default for StageWeights {
    fn default() -> Self {
        StageWeights([
            LossWeights { topo: 1.0, anchor: 0.0, rec: 0.0, spec: 1.0, reg: 0.5 },
            LossWeights { topo: 1.0, anchor: 0.2, rec: 0.0, spec: 1.0, reg: 0.5 },
            LossWeights { topo: 1.0, anchor: 0.1, rec: 1.0, spec: 0.5, reg: 0.5 },
        ])
    }
}

impl StageWeights {
    pub fn stage(&self, stage: u8) -> Result<&LossWeights> {
        match stage {
            1..=3 => Ok(&self.0[stage as usize - 1]),
            _ => Err(MuseError::Argument(format!("stage must be 1, 2 or 3, got {stage}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.0.iter().try_for_each(LossWeights::validate)
    }
}

/// Bilinear resampling of a `g_t^2 x g_t^2` patch-to-patch map to
/// `g_s^2 x g_s^2`, interpolating each of the four grid axes with the
/// half-pixel convention, then renormalising rows.
pub fn psi_resample(teacher: &[f64], g_t: usize, g_s: usize) -> Result<Vec<f64>> {
    if g_t == 0 || g_s == 0 {
        return Err(MuseError::Argument("grid sides must be at least 1".into()));
    }
    let (nt, ns) = (g_t * g_t, g_s * g_s);
    if teacher.len() != nt * nt {
        return Err(MuseError::dim("psi_resample", &[teacher.len()], &[nt, nt]));
    }
    for (i, row) in teacher.chunks(nt).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < 0.0) {
            return Err(MuseError::Argument(format!("teacher row {i} is not stochastic (sum {s})")));
        }
    }
    if g_t == g_s {
        return Ok(teacher.to_vec());
    }
    let axis = interp_matrix(g_t, g_s);
    // flattened-grid weights: K[(a,b), (a',b')] = M[a,a'] M[b,b']
    let mut k = vec![0f64; ns * nt];
    for a in 0..g_s {
        for b in 0..g_s {
            for a2 in 0..g_t {
                for b2 in 0..g_t {
                    k[(a * g_s + b) * nt + a2 * g_t + b2] = axis[a * g_t + a2] * axis[b * g_t + b2];
                }
            }
        }
    }
    // K T K^T
    let mut kt = vec![0f64; ns * nt];
    for i in 0..ns {
        for p in 0..nt {
            let w = k[i * nt + p];
            if w != 0.0 {
                let src = &teacher[p * nt..(p + 1) * nt];
                kt[i * nt..(i + 1) * nt].iter_mut().zip(src).for_each(|(o, &s)| *o += w * s);
            }
        }
    }
    let mut out = vec![0f64; ns * ns];
    for i in 0..ns {
        for j in 0..ns {
            out[i * ns + j] = (0..nt).map(|q| kt[i * nt + q] * k[j * nt + q]).sum();
        }
        let row = &mut out[i * ns..(i + 1) * ns];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// `g_s x g_t` linear interpolation weights along one axis.
fn interp_matrix(g_t: usize, g_s: usize) -> Vec<f64> {
    let mut m = vec![0f64; g_s * g_t];
    for i in 0..g_s {
        let src = ((i as f64 + 0.5) * g_t as f64 / g_s as f64 - 0.5).clamp(0.0, (g_t - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(g_t - 1);
        let frac = src - lo as f64;
        m[i * g_t + lo] += 1.0 - frac;
        m[i * g_t + hi] += frac;
    }
    m
}

/// Teacher maps for a batch on a `grid x grid` patch layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoTarget {
    pub grid: usize,
    pub batch: usize,
    /// `batch x grid^2 x grid^2`, row-major.
    pub maps: Vec<f64>,
}

impl TopoTarget {
    pub fn from_patch_masks(masks: &[&[u8]], grid: usize, smoothing: f64) -> Result<Self> {
        let n = grid * grid;
        let mut maps = Vec::with_capacity(masks.len() * n * n);
        for m in masks {
            if m.len() != n {
                return Err(MuseError::dim("teacher", &[m.len()], &[n]));
            }
            maps.extend(teacher_attention_from_mask(m, smoothing)?.target);
        }
        Ok(TopoTarget { grid, batch: masks.len(), maps })
    }

    /// Teacher on the student grid as a `[B, n, n]` tensor.
    pub fn on_grid<T: Real>(&self, g_s: usize) -> Result<Tensor<T>> {
        let nt = self.grid * self.grid;
        let mut data = Vec::with_capacity(self.batch * g_s.pow(4));
        for b in 0..self.batch {
            data.extend(psi_resample(&self.maps[b * nt * nt..(b + 1) * nt * nt], self.grid, g_s)?);
        }
        Tensor::from_f64(vec![self.batch, g_s * g_s, g_s * g_s], &data)
    }
}

/// Mean over layers, heads and rows of `KL(teacher || student)`.
/// `student` holds one `[B, H, n, n]` map per layer, `teacher` is `[B, n, n]`.
pub fn topo_loss<T: Real>(g: &mut Graph<T>, student: &[Var], teacher: &Tensor<T>, heads: usize) -> Result<Var> {
    if student.is_empty() {
        return Err(MuseError::Argument("topology loss needs at least one layer".into()));
    }
    let mut total: Option<Var> = None;
    for &s in student {
        let part = g.kl_rows(s, teacher.clone(), heads)?;
        total = Some(match total {
            Some(t) => g.add(t, part)?,
            None => part,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / student.len() as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct AnchorLoss {
    pub loss: Var,
    /// Set when the temperature was outside `[1e-3, 10]` and a clamped
    /// constant was used instead.
    pub clamped_tau: Option<f64>,
}

pub const TAU_GUARD: (f64, f64) = (1e-3, 10.0);

/// In-batch InfoNCE between unit image embeddings `[B, D_e]` and the
/// normalised class rows of their labels. Same-label off-diagonal pairs
/// are excluded from the negatives. `symmetric` averages both directions.
pub fn anchor_loss<T: Real>(
    g: &mut Graph<T>,
    embedding: Var,
    labels: &[usize],
    class_table: Var,
    tau: Var,
    symmetric: bool,
) -> Result<AnchorLoss> {
    let b = labels.len();
    if b < 2 {
        return Err(MuseError::Argument(format!("anchor loss needs a batch of at least 2, got {b}")));
    }
    if g.shape(embedding) != [b, g.value(class_table).cols()] {
        return Err(MuseError::dim("anchor_loss", g.shape(embedding), g.shape(class_table)));
    }
    let classes = g.value(class_table).rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MuseError::Argument(format!("label {bad} outside {classes} classes")));
    }
    for (i, row) in g.value(embedding).data().chunks(g.value(class_table).cols()).enumerate() {
        let n = row.iter().map(|&v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(MuseError::Argument(format!("embedding row {i} has norm {n}, expected 1")));
        }
    }
    let tau_value = g.value(tau).item().f64();
    let (tau, clamped_tau) = if (TAU_GUARD.0..=TAU_GUARD.1).contains(&tau_value) {
        (tau, None)
    } else {
        let c = tau_value.clamp(TAU_GUARD.0, TAU_GUARD.1);
        log::warn!("temperature {tau_value} outside [{}, {}], using {c}", TAU_GUARD.0, TAU_GUARD.1);
        (g.constant(Tensor::scalar(T::of(c))), Some(c))
    };
    let table = g.normalize_rows(class_table)?;
    let text = g.gather_rows(&[table], labels.iter().map(|&l| (0u32, l as u32)).collect())?;
    let sim = g.matmul_nt(embedding, text)?;
    let logits = g.div_by_scalar(sim, tau)?;
    let allowed: Vec<bool> = (0..b * b).map(|k| k / b == k % b || labels[k / b] != labels[k % b]).collect();
    let targets: Vec<usize> = (0..b).collect();
    let rows = g.masked_cross_entropy(logits, targets.clone(), allowed.clone())?;
    let loss = if symmetric {
        let lt = g.transpose(logits)?;
        let cols = g.masked_cross_entropy(lt, targets, allowed)?;
        let both = g.add(rows, cols)?;
        g.scale(both, 0.5)
    } else {
        rows
    };
    Ok(AnchorLoss { loss, clamped_tau })
}

/// Mean squared error over all patch entries.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, recon: Var, target: &Tensor<T>) -> Result<Var> {
    g.mse(recon, target.clone())
}

/// Loss nodes available at one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub topo: Option<Var>,
    pub anchor: Option<Var>,
    pub rec: Option<Var>,
}

/// Unweighted values of the parts, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossRecord {
    pub topo: Option<f64>,
    pub anchor: Option<f64>,
    pub rec: Option<f64>,
    pub total: f64,
}

/// Weighted sum of the parts. Every part with a positive weight in `weights`
/// must be present.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossRecord)> {
    let entries = [("topology", parts.topo, weights.topo), ("anchor", parts.anchor, weights.anchor), ("reconstruction", parts.rec, weights.rec_scale())];
    let mut total: Option<Var> = None;
    for (name, part, w) in entries {
        if w == 0.0 {
            continue;
        }
        let part = part.ok_or_else(|| MuseError::Config(format!("{name} loss is required with weight {w}")))?;
        let term = g.scale(part, w);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    let value = |v: Option<Var>| v.map(|v| g.value(v).item().f64());
    let record = LossRecord {
        topo: value(parts.topo),
        anchor: value(parts.anchor),
        rec: value(parts.rec),
        total: g.value(total).item().f64(),
    };
    Ok((total, record))
}

#[cfg(test)]
mod tests;
