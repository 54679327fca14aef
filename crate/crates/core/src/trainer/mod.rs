//! Three-stage curriculum with per-stage freezing, ablation presets and
//! metrics logging.

mod optim;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Precision, Real, Tensor, Var};
use crate::diagnostics::{append_violin_rows, grad_report, GradReport, LossKind, SubspaceTag, NORM_FLOOR, VIOLIN_HEADER};
use crate::encoder::{
    encoder_forward, extract_student_topology, stack_patches, write_checkpoint, BoundParams, EncoderParams,
    ModelConfig, RoutingMode, Subspace,
};
use crate::error::{MuseError, Result};
use crate::objectives::{anchor_loss, recon_loss, topo_loss, total_loss, LossParts, LossWeights, StageWeights, TopoTarget};
use crate::scenes::{patch_majority, patchify, sample_seed, PatchGrid, SceneConfig, SceneSample};

pub use optim::{optimizer_step, warmup_lr, AdamW, OptimizerState, ParamPolicy};

/// Training configurations compared in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Muse,
    NaiveShared,
    SoftReg,
    TwoStream,
    SemanticOnly,
    TopologyOnly,
    BaselineRecOnly,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Muse,
        Preset::NaiveShared,
        Preset::SoftReg,
        Preset::TwoStream,
        Preset::SemanticOnly,
        Preset::TopologyOnly,
        Preset::BaselineRecOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Muse => "muse",
            Preset::NaiveShared => "naive_shared",
            Preset::SoftReg => "soft_reg",
            Preset::TwoStream => "two_stream",
            Preset::SemanticOnly => "semantic_only",
            Preset::TopologyOnly => "topology_only",
            Preset::BaselineRecOnly => "baseline_rec_only",
        }
    }

    /// Routing modes the preset can run with; the first is its default.
    /// The reconstruction baseline defaults to naive routing because strict
    /// routing would leave it training nothing but the decoder.
    pub fn allowed_routings(self) -> &'static [RoutingMode] {
        use RoutingMode::*;
        match self {
            Preset::Muse => &[Strict, Relaxed],
            Preset::NaiveShared | Preset::SoftReg => &[Naive],
            Preset::TwoStream => &[TwoStream],
            Preset::SemanticOnly | Preset::TopologyOnly => &[Strict, Relaxed, Naive],
            Preset::BaselineRecOnly => &[Naive, Strict, Relaxed],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.as_str()).collect();
            MuseError::Config(format!("unknown preset '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    /// Overrides `model.routing` when set.
    pub routing: Option<RoutingMode>,
    pub model: ModelConfig,
    pub stage_steps: [usize; 3],
    pub learning_rates: [f64; 3],
    pub weights: StageWeights,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Probe gradients every this many steps; 0 disables probing.
    pub probe_interval: usize,
    pub optimizer: AdamW,
    pub warmup_fraction: f64,
    pub teacher_smoothing: f64,
    /// Grid the teacher is built on before resampling to the patch grid.
    pub teacher_grid: Option<usize>,
    pub symmetric_anchor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::Muse,
            routing: None,
            model: ModelConfig::default(),
            stage_steps: [1000, 1000, 1000],
            learning_rates: [4e-4, 2e-4, 1e-5],
            weights: StageWeights::default(),
            batch_size: 32,
            seed: 0,
            precision: Precision::F32,
            probe_interval: 10,
            optimizer: AdamW::default(),
            warmup_fraction: 0.05,
            teacher_smoothing: 0.0,
            teacher_grid: None,
            symmetric_anchor: true,
        }
    }
}

impl TrainConfig {
    /// Routing after applying the preset and the override.
    pub fn effective_routing(&self) -> Result<RoutingMode> {
        let allowed = self.preset.allowed_routings();
        let routing = match self.routing {
            Some(r) => r,
            None if allowed.contains(&self.model.routing) => self.model.routing,
            None => allowed[0],
        };
        if !allowed.contains(&routing) {
            return Err(MuseError::Config(format!(
                "preset {} cannot run with routing {routing}",
                self.preset
            )));
        }
        Ok(routing)
    }

    /// Model configuration with the effective routing filled in.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        model.routing = self.effective_routing()?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model()?;
        self.weights.validate()?;
        if let Some(&lr) = self.learning_rates.iter().find(|&&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(MuseError::Config(format!("learning rates must be positive, got {lr}")));
        }
        if self.batch_size < 2 {
            return Err(MuseError::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(MuseError::Config(format!("warmup fraction must be in [0, 1), got {}", self.warmup_fraction)));
        }
        if !(0.0..1.0).contains(&self.teacher_smoothing) {
            return Err(MuseError::Config(format!("teacher smoothing must be in [0, 1), got {}", self.teacher_smoothing)));
        }
        if let Some(gt) = self.teacher_grid {
            let size = self.model.scene.image_size;
            if gt == 0 || !size.is_multiple_of(gt) {
                return Err(MuseError::Config(format!("teacher grid {gt} does not divide image size {size}")));
            }
        }
        self.optimizer_valid()
    }

    fn optimizer_valid(&self) -> Result<()> {
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(MuseError::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage_steps.iter().sum()
    }
}

/// What one curriculum stage trains.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePolicy {
    pub stage: u8,
    pub losses: Vec<LossKind>,
    pub frozen: Vec<Subspace>,
    pub lr: f64,
    /// Table weights with inactive losses zeroed.
    pub weights: LossWeights,
}

impl StagePolicy {
    pub fn is_active(&self, loss: LossKind) -> bool {
        self.losses.contains(&loss)
    }

    pub fn weight(&self, loss: LossKind) -> f64 {
        match loss {
            LossKind::Topo => self.weights.topo,
            LossKind::Anchor => self.weights.anchor,
            LossKind::Rec => self.weights.rec_scale(),
        }
    }
}

/// Active losses, frozen subspaces, learning rate and weights of `stage`.
pub fn stage_policy(stage: u8, config: &TrainConfig) -> Result<StagePolicy> {
    let table = *config.weights.stage(stage)?;
    let base: &[LossKind] = match stage {
        1 => &[LossKind::Topo],
        2 => &[LossKind::Topo, LossKind::Anchor],
        _ => &LossKind::ALL,
    };
    let losses: Vec<LossKind> = match config.preset {
        Preset::SemanticOnly => base.iter().copied().filter(|&l| l != LossKind::Topo).collect(),
        Preset::TopologyOnly => base.iter().copied().filter(|&l| l != LossKind::Anchor).collect(),
        Preset::BaselineRecOnly => vec![LossKind::Rec],
        _ => base.to_vec(),
    };
    let mut weights = LossWeights { topo: 0.0, anchor: 0.0, rec: 0.0, ..table };
    for &l in &losses {
        match l {
            LossKind::Topo => weights.topo = table.topo,
            LossKind::Anchor => weights.anchor = table.anchor,
            LossKind::Rec if table.rec == 0.0 => {
                // the table has no reconstruction weight before stage 3
                weights.rec = 1.0;
                weights.spec = 1.0;
            }
            LossKind::Rec => weights.rec = table.rec,
        }
    }
    let frozen = if stage < 3 { vec![Subspace::Backbone] } else { Vec::new() };
    Ok(StagePolicy { stage, losses, frozen, lr: config.learning_rates[stage as usize - 1], weights })
}

/// Result of [`soft_reg_adjust`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRegOutcome {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// A partner had zero norm, so nothing was projected.
    pub flagged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// When the two gradients conflict, removes `lambda` times each one's
/// projection onto the other. Both projections use the original vectors.
pub fn soft_reg_adjust(a: &[f64], b: &[f64], lambda: f64) -> Result<SoftRegOutcome> {
    if a.len() != b.len() {
        return Err(MuseError::dim("soft_reg_adjust", &[a.len()], &[b.len()]));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MuseError::Argument(format!("regularisation strength must be in [0, 1], got {lambda}")));
    }
    let mut grads = [a.to_vec(), b.to_vec()];
    let flagged = project_conflicts(&mut grads, lambda);
    let [a, b] = grads;
    Ok(SoftRegOutcome { a, b, flagged })
}

/// Pairwise version over any number of gradients. Returns whether some
/// partner had zero norm.
fn project_conflicts(grads: &mut [Vec<f64>], lambda: f64) -> bool {
    let orig = grads.to_vec();
    let norms: Vec<f64> = orig.iter().map(|g| dot(g, g)).collect();
    let floor = NORM_FLOOR * NORM_FLOOR;
    let mut flagged = false;
    for i in 0..orig.len() {
        for j in 0..orig.len() {
            if i == j {
                continue;
            }
            if norms[j] <= floor {
                flagged = true;
                continue;
            }
            let d = dot(&orig[i], &orig[j]);
            if d < 0.0 {
                let c = lambda * d / norms[j];
                for (x, y) in grads[i].iter_mut().zip(&orig[j]) {
                    *x -= c * y;
                }
            }
        }
    }
    flagged
}

fn flatten(grads: &[Vec<f64>]) -> Vec<f64> {
    grads.concat()
}

fn unflatten(flat: &[f64], like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut at = 0;
    like.iter()
        .map(|g| {
            let part = flat[at..at + g.len()].to_vec();
            at += g.len();
            part
        })
        .collect()
}

/// Inputs of one step.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    /// `[B*N_p, D_patch]`.
    pub patches: Tensor<T>,
    pub labels: Vec<usize>,
    /// Teacher on the student grid, `[B, N_p, N_p]`.
    pub teacher: Tensor<T>,
}

/// Patch grids and teacher masks of a dataset, computed once.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub grids: Vec<PatchGrid>,
    pub labels: Vec<usize>,
    teacher_masks: Vec<Vec<u8>>,
    teacher_grid: usize,
    student_grid: usize,
    smoothing: f64,
}

impl PreparedData {
    pub fn new(samples: &[SceneSample], scene: &SceneConfig, teacher_grid: Option<usize>, smoothing: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(MuseError::Argument("dataset is empty".into()));
        }
        let expected = scene.image_size * scene.image_size;
        if let Some(s) = samples.iter().find(|s| s.mask.len() != expected || s.image.len() != 3 * expected) {
            return Err(MuseError::dim("dataset", &[s.mask.len()], &[expected]));
        }
        let grids: Vec<PatchGrid> = samples.iter().map(|s| patchify(s, scene)).collect();
        let student_grid = scene.grid();
        let gt = teacher_grid.unwrap_or(student_grid);
        let teacher_masks = if gt == student_grid {
            grids.iter().map(|g| g.patch_mask.clone()).collect()
        } else {
            let coarse = SceneConfig { patch: scene.image_size / gt, ..*scene };
            samples.iter().map(|s| patch_majority(&s.mask, &coarse)).collect()
        };
        let labels = samples.iter().map(|s| usize::from(s.label)).collect();
        Ok(PreparedData { grids, labels, teacher_masks, teacher_grid: gt, student_grid, smoothing })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let grids: Vec<&PatchGrid> = indices.iter().map(|&i| &self.grids[i]).collect();
        let masks: Vec<&[u8]> = indices.iter().map(|&i| self.teacher_masks[i].as_slice()).collect();
        let teacher = TopoTarget::from_patch_masks(&masks, self.teacher_grid, self.smoothing)?.on_grid(self.student_grid)?;
        Ok(Batch { patches: stack_patches(&grids)?, labels: indices.iter().map(|&i| self.labels[i]).collect(), teacher })
    }

    /// Indices drawn with replacement, determined by `(seed, step)`.
    pub fn sample_indices(&self, seed: u64, step: u64, batch_size: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, step));
        (0..batch_size).map(|_| rng.random_range(0..self.len())).collect()
    }
}

/// Loss nodes of one forward pass, indexed like [`LossKind::ALL`].
fn build_losses<T: Real>(
    g: &mut Graph<T>,
    params: &EncoderParams<T>,
    bound: &BoundParams,
    batch: &Batch<T>,
    want: &[LossKind],
    symmetric: bool,
) -> Result<[Option<Var>; 3]> {
    let out = encoder_forward(g, params, bound, &batch.patches)?;
    let mut losses = [None; 3];
    for &kind in want {
        let node = match kind {
            LossKind::Topo => {
                let maps = extract_student_topology(g, &out.attention, params.config.scene.num_patches())?;
                topo_loss(g, &maps, &batch.teacher, params.config.heads)?
            }
            LossKind::Anchor => {
                let layout = &params.layout;
                let (table, tau) = (bound.var(layout.class_emb), bound.var(layout.tau));
                anchor_loss(g, out.embedding, &batch.labels, table, tau, symmetric)?.loss
            }
            LossKind::Rec => recon_loss(g, out.recon, &batch.patches)?,
        };
        losses[loss_slot(kind)] = Some(node);
    }
    Ok(losses)
}

fn loss_slot(kind: LossKind) -> usize {
    match kind {
        LossKind::Topo => 0,
        LossKind::Anchor => 1,
        LossKind::Rec => 2,
    }
}

fn grads_f64<T: Real>(bound: &BoundParams, g: &Graph<T>) -> Vec<Vec<f64>> {
    bound.grads(g).into_iter().map(|v| v.into_iter().map(Real::f64).collect()).collect()
}

/// Separate backward pass per loss, leaf gradients reset in between.
fn per_loss_grads<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    losses: &[(LossKind, Var)],
) -> Result<Vec<(LossKind, Vec<Vec<f64>>)>> {
    let mut out = Vec::with_capacity(losses.len());
    for &(kind, node) in losses {
        g.zero_grads();
        g.backward(node)?;
        out.push((kind, grads_f64(bound, g)));
    }
    g.zero_grads();
    Ok(out)
}

/// Tags every probe reports cosines for.
pub fn probe_tags() -> Vec<SubspaceTag> {
    std::iter::once(SubspaceTag::ALL).chain(Subspace::ALL.into_iter().map(SubspaceTag::of)).collect()
}

/// Per-loss gradients of `params` on `batch` and their report. Parameters
/// are not modified.
pub fn conflict_probe<T: Real>(
    params: &EncoderParams<T>,
    batch: &Batch<T>,
    losses: &[LossKind],
    tags: &[SubspaceTag],
    step: u64,
    symmetric: bool,
) -> Result<(GradReport, Vec<(LossKind, f64)>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let nodes = build_losses(&mut g, params, &bound, batch, losses, symmetric)?;
    let picked: Vec<(LossKind, Var)> = losses.iter().map(|&k| (k, nodes[loss_slot(k)].expect("built"))).collect();
    let values = picked.iter().map(|&(k, v)| (k, g.value(v).item().f64())).collect();
    let grads = per_loss_grads(&mut g, &bound, &picked)?;
    Ok((grad_report(step, &params.metas, &grads, tags)?, values))
}

pub const METRICS_HEADER: &str = "step,stage,loss_topo,loss_anchor,loss_rec,loss_total,cos_anchor_topo,cos_anchor_rec,cos_topo_rec,undef_flags,gnorm_topology_topo,gnorm_topology_anchor,gnorm_topology_rec,gnorm_semantic_topo,gnorm_semantic_anchor,gnorm_semantic_rec";

/// Cosine pairs in metrics column order, with their undefined-flag bit.
pub const COSINE_PAIRS: [(LossKind, LossKind, u8); 3] = [
    (LossKind::Anchor, LossKind::Topo, 1),
    (LossKind::Anchor, LossKind::Rec, 2),
    (LossKind::Topo, LossKind::Rec, 4),
];

/// Gradient columns of a probed step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeColumns {
    /// Over all parameters, in [`COSINE_PAIRS`] order.
    pub cosines: [Option<f64>; 3],
    pub undef_flags: u8,
    /// TOPOLOGY norms for topo, anchor, rec, then SEMANTIC norms.
    pub gnorms: [f64; 6],
}

impl ProbeColumns {
    fn from_report(report: &GradReport) -> Self {
        let mut cosines = [None; 3];
        let mut undef_flags = 0;
        for (i, &(a, b, bit)) in COSINE_PAIRS.iter().enumerate() {
            cosines[i] = report.cosine(a, b, SubspaceTag::ALL).flatten();
            if cosines[i].is_none() {
                undef_flags |= bit;
            }
        }
        let mut gnorms = [0.0; 6];
        for (si, s) in [Subspace::Topology, Subspace::Semantic].into_iter().enumerate() {
            for (li, l) in LossKind::ALL.into_iter().enumerate() {
                gnorms[si * 3 + li] = report.subspace_norm(l, s).unwrap_or(0.0);
            }
        }
        ProbeColumns { cosines, undef_flags, gnorms }
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: u8,
    /// Unweighted losses in [`LossKind::ALL`] order, before the update.
    pub losses: [Option<f64>; 3],
    /// Weighted sum of the active losses.
    pub total: f64,
    pub probe: Option<ProbeColumns>,
}

impl MetricsRow {
    pub fn loss(&self, kind: LossKind) -> Option<f64> {
        self.losses[loss_slot(kind)]
    }

    pub fn cosine(&self, a: LossKind, b: LossKind) -> Option<f64> {
        let i = COSINE_PAIRS.iter().position(|&(x, y, _)| (x, y) == (a, b) || (y, x) == (a, b))?;
        self.probe.as_ref().and_then(|p| p.cosines[i])
    }

    fn write(&self, out: &mut String) {
        use fmt::Write;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = write!(out, "{},{}", self.step, self.stage);
        for l in self.losses {
            let _ = write!(out, ",{}", opt(l));
        }
        let _ = write!(out, ",{}", self.total);
        match &self.probe {
            Some(p) => {
                for c in p.cosines {
                    let _ = write!(out, ",{}", opt(c));
                }
                let _ = write!(out, ",{}", p.undef_flags);
                for n in p.gnorms {
                    let _ = write!(out, ",{n}");
                }
            }
            None => out.push_str(",,,,,,,,,,"),
        }
        out.push('\n');
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        r.write(&mut out);
    }
    out
}

pub fn violin_rows(reports: &[GradReport]) -> String {
    let mut out = String::from(VIOLIN_HEADER);
    out.push('\n');
    for r in reports {
        append_violin_rows(&mut out, r);
    }
    out
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct TrainResult<T: Real> {
    pub params: EncoderParams<T>,
    /// Parameters at the end of each stage.
    pub stage_params: Vec<EncoderParams<T>>,
    pub rows: Vec<MetricsRow>,
    pub reports: Vec<GradReport>,
    /// Steps at which the anchor temperature hit the numeric guard.
    pub clamped_tau_steps: Vec<u64>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| MuseError::io(path, e))
}

/// Writes the outputs of a finished run into `dir`.
pub fn write_run_outputs<T: Real>(dir: &Path, result: &TrainResult<T>, config: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&result.rows).as_bytes())?;
    write_file(&dir.join("violin.csv"), violin_rows(&result.reports).as_bytes())?;
    let mut step = 0u64;
    for (k, p) in result.stage_params.iter().enumerate() {
        step += config.stage_steps[k] as u64;
        write_checkpoint(&dir.join(format!("ckpt_stage{}.bin", k + 1)), p, step, k as u8 + 1)?;
    }
    write_checkpoint(&dir.join("final.bin"), &result.params, config.total_steps() as u64, 3)
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: u64,
    stage: u8,
    losses: Vec<(&'static str, f64)>,
    param_norms: Vec<(&'a str, f64)>,
    tau: f64,
}

/// Runs the curriculum. With `out` set, writes metrics, violin rows and
/// checkpoints there, or a dump of the failing state if a loss goes
/// non-finite.
pub fn train_run<T: Real>(config: &TrainConfig, data: &[SceneSample], out: Option<&Path>) -> Result<TrainResult<T>> {
    config.validate()?;
    let model = config.resolved_model()?;
    let prepared = PreparedData::new(data, &model.scene, config.teacher_grid, config.teacher_smoothing)?;
    let mut params = EncoderParams::<T>::init(config.seed, &model)?;
    let mut state = OptimizerState::new(&params.values);
    let tags = probe_tags();
    let soft_reg = config.preset == Preset::SoftReg;
    let mut result = TrainResult {
        params: params.clone(),
        stage_params: Vec::with_capacity(3),
        rows: Vec::with_capacity(config.total_steps()),
        reports: Vec::new(),
        clamped_tau_steps: Vec::new(),
    };

    let mut step = 0u64;
    for stage in 1..=3u8 {
        let policy = stage_policy(stage, config)?;
        let rules: Vec<ParamPolicy> = params
            .metas
            .iter()
            .map(|m| ParamPolicy { name: m.name.clone(), weight_decay: m.weight_decay, frozen: policy.frozen.contains(&m.subspace) })
            .collect();
        let steps = config.stage_steps[stage as usize - 1];
        let warmup = (steps as f64 * config.warmup_fraction).ceil() as usize;
        for k in 0..steps {
            let indices = prepared.sample_indices(config.seed, step, config.batch_size);
            let batch = prepared.batch::<T>(&indices)?;
            let probe = config.probe_interval > 0 && step.is_multiple_of(config.probe_interval as u64);
            let outcome = train_step(&params, &batch, &policy, probe, soft_reg, config, &tags, step);
            let outcome = outcome.map_err(|e| match e {
                MuseError::NumericDomain { op, detail } => MuseError::NonFinite { step, name: format!("{op} ({detail})") },
                other => other,
            });
            let (row, report, grads) = match outcome {
                Ok(v) => v,
                Err(e @ (MuseError::NonFinite { .. } | MuseError::DegenerateRow { .. })) => {
                    if let Some(dir) = out {
                        dump_failure(dir, &params, &result.rows, step, stage)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if params.tau() < crate::objectives::TAU_GUARD.0 || params.tau() > crate::objectives::TAU_GUARD.1 {
                result.clamped_tau_steps.push(step);
            }
            result.rows.push(row);
            result.reports.extend(report);
            if let Some(grads) = grads {
                let lr = warmup_lr(policy.lr, k, warmup);
                optimizer_step(&mut params.values, &grads, &mut state, &config.optimizer, lr, &rules, step)?;
                params.clamp_tau();
            }
            step += 1;
        }
        result.stage_params.push(params.clone());
    }
    result.params = params;
    if let Some(dir) = out {
        write_run_outputs(dir, &result, config)?;
    }
    Ok(result)
}

type StepOutput<T> = (MetricsRow, Option<GradReport>, Option<Vec<Vec<T>>>);

/// Forward, losses, gradients for one step. Returns no gradients when the
/// stage has nothing to train.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Real>(
    params: &EncoderParams<T>,
    batch: &Batch<T>,
    policy: &StagePolicy,
    probe: bool,
    soft_reg: bool,
    config: &TrainConfig,
    tags: &[SubspaceTag],
    step: u64,
) -> Result<StepOutput<T>> {
    let want: Vec<LossKind> = if probe { LossKind::ALL.to_vec() } else { policy.losses.clone() };
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let nodes = build_losses(&mut g, params, &bound, batch, &want, config.symmetric_anchor)?;
    let mut values = [None; 3];
    for kind in LossKind::ALL {
        if let Some(v) = nodes[loss_slot(kind)] {
            let x = g.value(v).item().f64();
            if !x.is_finite() {
                return Err(MuseError::NonFinite { step, name: format!("{kind} loss") });
            }
            values[loss_slot(kind)] = Some(x);
        }
    }
    let total: f64 = policy.losses.iter().map(|&l| policy.weight(l) * values[loss_slot(l)].unwrap_or(0.0)).sum();
    let mut row = MetricsRow { step, stage: policy.stage, losses: values, total, probe: None };
    if !probe {
        for kind in LossKind::ALL {
            if !policy.is_active(kind) {
                row.losses[loss_slot(kind)] = None;
            }
        }
    }
    if policy.losses.is_empty() && !probe {
        return Ok((row, None, None));
    }

    let separate = probe || (soft_reg && policy.losses.len() >= 2);
    if !separate {
        let parts = LossParts { topo: nodes[0], anchor: nodes[1], rec: nodes[2] };
        let (loss, _) = total_loss(&mut g, &parts, &policy.weights)?;
        g.backward(loss)?;
        return Ok((row, None, Some(bound.grads(&g))));
    }

    let picked: Vec<(LossKind, Var)> = want.iter().map(|&k| (k, nodes[loss_slot(k)].expect("built"))).collect();
    let per = per_loss_grads(&mut g, &bound, &picked)?;
    let mut report = None;
    if probe {
        let shown = if soft_reg {
            let mut flat: Vec<Vec<f64>> = per.iter().map(|(_, gr)| flatten(gr)).collect();
            project_conflicts(&mut flat, policy.weights.reg);
            per.iter().zip(&flat).map(|((k, gr), f)| (*k, unflatten(f, gr))).collect()
        } else {
            per.clone()
        };
        let r = grad_report(step, &params.metas, &shown, tags)?;
        row.probe = Some(ProbeColumns::from_report(&r));
        report = Some(r);
    }
    if policy.losses.is_empty() {
        return Ok((row, report, None));
    }

    let active: Vec<&(LossKind, Vec<Vec<f64>>)> = per.iter().filter(|(k, _)| policy.is_active(*k)).collect();
    let mut flat: Vec<Vec<f64>> = active.iter().map(|(_, gr)| flatten(gr)).collect();
    if soft_reg {
        project_conflicts(&mut flat, policy.weights.reg);
    }
    let mut combined = vec![0f64; flat[0].len()];
    for (entry, f) in active.iter().zip(&flat) {
        let w = policy.weight(entry.0);
        for (c, x) in combined.iter_mut().zip(f) {
            *c += w * x;
        }
    }
    let shaped = unflatten(&combined, &active[0].1);
    let grads = shaped.into_iter().map(|v| v.into_iter().map(T::of).collect()).collect();
    Ok((row, report, Some(grads)))
}

fn dump_failure<T: Real>(dir: &Path, params: &EncoderParams<T>, rows: &[MetricsRow], step: u64, stage: u8) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))?;
    write_file(&dir.join("metrics.csv"), metrics_csv(rows).as_bytes())?;
    let last = rows.last();
    let dump = NonFiniteDump {
        step,
        stage,
        losses: LossKind::ALL
            .iter()
            .filter_map(|&k| last.and_then(|r| r.loss(k)).map(|v| (k.as_str(), v)))
            .collect(),
        param_norms: params.metas.iter().zip(&params.values).map(|(m, v)| (m.name.as_str(), v.l2_norm())).collect(),
        tau: params.tau(),
    };
    let json = serde_json::to_string_pretty(&dump).expect("dump serialises");
    write_file(&dir.join("nonfinite_dump.json"), json.as_bytes())
}
