//! Per-loss gradient cosines and norms by parameter subspace.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{ParamMeta, Subspace};
use crate::error::{MuseError, Result};

/// A parameter subspace, or all of them, optionally narrowed to one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubspaceTag {
    pub subspace: Option<Subspace>,
    pub layer: Option<usize>,
}

impl SubspaceTag {
    pub const ALL: SubspaceTag = SubspaceTag { subspace: None, layer: None };

    pub fn of(subspace: Subspace) -> Self {
        SubspaceTag { subspace: Some(subspace), layer: None }
    }

    pub fn in_layer(self, layer: usize) -> Self {
        SubspaceTag { layer: Some(layer), ..self }
    }

    pub fn matches(&self, meta: &ParamMeta) -> bool {
        self.subspace.is_none_or(|s| s == meta.subspace) && self.layer.is_none_or(|l| meta.layer == Some(l))
    }

    pub fn label(&self) -> String {
        let base = self.subspace.map_or("ALL", Subspace::as_str);
        match self.layer {
            Some(l) => format!("{base}@{l}"),
            None => base.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Topo,
    Anchor,
    Rec,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Topo, LossKind::Anchor, LossKind::Rec];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Topo => "topo",
            LossKind::Anchor => "anchor",
            LossKind::Rec => "rec",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topo" => Ok(LossKind::Topo),
            "anchor" => Ok(LossKind::Anchor),
            "rec" => Ok(LossKind::Rec),
            other => Err(MuseError::Argument(format!("unknown loss '{other}' (expected topo, anchor or rec)"))),
        }
    }
}

/// Concatenated gradients of every parameter matching `tag`, in declaration order.
pub fn subspace_gradient(metas: &[ParamMeta], grads: &[Vec<f64>], tag: SubspaceTag) -> Result<Vec<f64>> {
    if metas.len() != grads.len() {
        return Err(MuseError::Argument(format!("{} parameters but {} gradients", metas.len(), grads.len())));
    }
    let mut out = Vec::new();
    let mut any = false;
    for (m, g) in metas.iter().zip(grads) {
        if tag.matches(m) {
            out.extend_from_slice(g);
            any = true;
        }
    }
    if !any {
        return Err(MuseError::Argument(format!("no parameters tagged {}", tag.label())));
    }
    Ok(out)
}

pub const NORM_FLOOR: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, or `None` when either norm is at most `1e-12`.
pub fn gradient_cosine(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(MuseError::Argument(format!("gradient lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Ok(None);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairCosine {
    pub a: LossKind,
    pub b: LossKind,
    pub tag: SubspaceTag,
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormSample {
    pub loss: LossKind,
    pub subspace: Subspace,
    pub layer: Option<usize>,
    pub matrix: String,
    pub norm: f64,
}

/// Cosines and per-matrix norms at one probed step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub step: u64,
    pub cosines: Vec<PairCosine>,
    pub norms: Vec<NormSample>,
    /// Norm of each loss's gradient restricted to a whole subspace.
    pub subspace_norms: Vec<(LossKind, Subspace, f64)>,
}

impl GradReport {
    pub fn cosine(&self, a: LossKind, b: LossKind, tag: SubspaceTag) -> Option<Option<f64>> {
        self.cosines
            .iter()
            .find(|c| c.tag == tag && ((c.a, c.b) == (a, b) || (c.a, c.b) == (b, a)))
            .map(|c| c.cosine)
    }

    pub fn subspace_norm(&self, loss: LossKind, subspace: Subspace) -> Option<f64> {
        self.subspace_norms.iter().find(|(l, s, _)| *l == loss && *s == subspace).map(|t| t.2)
    }
}

/// Builds a report from per-loss gradients taken at the same parameter
/// state on the same batch. Cosines cover every pair of `losses` for every tag.
pub fn grad_report(
    step: u64,
    metas: &[ParamMeta],
    losses: &[(LossKind, Vec<Vec<f64>>)],
    tags: &[SubspaceTag],
) -> Result<GradReport> {
    let mut report = GradReport { step, ..GradReport::default() };
    for &tag in tags {
        let flat: Vec<Vec<f64>> = losses
            .iter()
            .map(|(_, g)| subspace_gradient(metas, g, tag))
            .collect::<Result<_>>()?;
        for i in 0..losses.len() {
            for j in i + 1..losses.len() {
                let cosine = gradient_cosine(&flat[i], &flat[j])?;
                report.cosines.push(PairCosine { a: losses[i].0, b: losses[j].0, tag, cosine });
            }
        }
    }
    for (loss, grads) in losses {
        for s in Subspace::ALL {
            if let Ok(v) = subspace_gradient(metas, grads, SubspaceTag::of(s)) {
                report.subspace_norms.push((*loss, s, norm(&v)));
            }
        }
        for (m, g) in metas.iter().zip(grads) {
            report.norms.push(NormSample {
                loss: *loss,
                subspace: m.subspace,
                layer: m.layer,
                matrix: m.matrix.to_string(),
                norm: norm(g),
            });
        }
    }
    Ok(report)
}

/// Order statistics of per-matrix gradient norms.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
    pub samples: Vec<f64>,
}

/// Quantile of sorted data: at position `q (n - 1)`, the midpoint of the
/// two neighbours when the position is fractional.
pub fn midpoint_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    if lo == hi {
        sorted[lo]
    } else {
        0.5 * (sorted[lo] + sorted[hi])
    }
}

pub fn norm_distribution(reports: &[GradReport], loss: LossKind, tag: SubspaceTag) -> Result<NormSummary> {
    let samples: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.norms.iter())
        .filter(|n| n.loss == loss && tag.subspace.is_none_or(|s| s == n.subspace) && tag.layer.is_none_or(|l| n.layer == Some(l)))
        .map(|n| n.norm)
        .collect();
    if samples.is_empty() {
        return Err(MuseError::Argument(format!("no {loss} norm samples for {}", tag.label())));
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(NormSummary {
        min: sorted[0],
        q25: midpoint_quantile(&sorted, 0.25),
        median: midpoint_quantile(&sorted, 0.5),
        q75: midpoint_quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
        samples,
    })
}

pub const VIOLIN_HEADER: &str = "step,loss,subspace,layer,matrix,norm";

/// Long-format rows of every per-matrix norm, header first.
pub fn violin_csv(reports: &[GradReport]) -> String {
    let mut out = String::with_capacity(64 * reports.iter().map(|r| r.norms.len()).sum::<usize>() + 64);
    out.push_str(VIOLIN_HEADER);
    out.push('\n');
    for r in reports {
        append_violin_rows(&mut out, r);
    }
    out
}

pub fn append_violin_rows(out: &mut String, report: &GradReport) {
    for n in &report.norms {
        let layer = n.layer.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", report.step, n.loss, n.subspace.as_str(), layer, n.matrix, n.norm);
    }
}
