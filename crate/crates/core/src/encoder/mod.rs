//! Stack of attention blocks with separated topology and value paths,
//! learnable query tokens, a semantic projector and a linear patch decoder.

mod checkpoint;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{BlockParams, BoundParams, EncoderParams, Layout, ParamMeta, StreamParams, Subspace};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{MuseError, Result};
use crate::scenes::SceneConfig;

/// How gradients are routed inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Queries and keys read a detached input; the map is detached on the
    /// value path; the decoder reads detached patch tokens.
    #[default]
    Strict,
    /// Only the map is detached on the value path.
    Relaxed,
    Naive,
    /// Two independent parameter sets, one per objective group.
    TwoStream,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Strict => "strict",
            RoutingMode::Relaxed => "relaxed",
            RoutingMode::Naive => "naive",
            RoutingMode::TwoStream => "two_stream",
        }
    }

    fn detach_qk(self) -> bool {
        self == RoutingMode::Strict
    }

    fn detach_map(self) -> bool {
        matches!(self, RoutingMode::Strict | RoutingMode::Relaxed)
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingMode {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(RoutingMode::Strict),
            "relaxed" => Ok(RoutingMode::Relaxed),
            "naive" => Ok(RoutingMode::Naive),
            "two_stream" => Ok(RoutingMode::TwoStream),
            other => Err(MuseError::Config(format!(
                "unknown routing mode '{other}' (expected strict, relaxed, naive or two_stream)"
            ))),
        }
    }
}

/// Architecture of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scene: SceneConfig,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub routing: RoutingMode,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scene: SceneConfig::default(),
            dim: 64,
            heads: 4,
            layers: 6,
            queries: 16,
            embed_dim: 32,
            mlp_ratio: 4,
            routing: RoutingMode::Strict,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 1.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: String| Err(MuseError::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.layers == 0 || self.queries == 0 || self.mlp_ratio == 0 {
            return bad("layers, queries and mlp_ratio must be at least 1".into());
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim {} must be at least 2", self.embed_dim));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return bad(format!(
                "temperature bounds must satisfy 0 < {} <= {} <= {}",
                self.tau_min, self.tau_init, self.tau_max
            ));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Tokens per sample: patches followed by queries.
    pub fn seq_len(&self) -> usize {
        self.scene.num_patches() + self.queries
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Graph nodes produced by one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub batch: usize,
    /// Final tokens `[B*N, D]` of the semantic stream.
    pub tokens: Var,
    /// Per-layer maps `[B, H, N, N]` of the topology stream.
    pub attention: Vec<Var>,
    /// Pooled query tokens `[B, D]`.
    pub pooled: Var,
    /// Unit-length embeddings `[B, D_e]`.
    pub embedding: Var,
    /// Decoded patches `[B*N_p, D_patch]`.
    pub recon: Var,
}

/// One block over `batch` sequences stacked as `[batch*n, D]` rows.
/// Returns the output tokens and the per-head map `[batch, H, n, n]`.
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockParams,
    bound: &BoundParams,
    config: &ModelConfig,
    routing: RoutingMode,
    batch: usize,
) -> Result<(Var, Var)> {
    let v = |i: usize| bound.var(i);
    let h = g.layer_norm(x, v(p.ln1_g), v(p.ln1_b), config.ln_eps)?;
    let hq = if routing.detach_qk() { g.stop_gradient(h) } else { h };
    let q = g.linear(hq, v(p.w_q), None)?;
    let k = g.linear(hq, v(p.w_k), None)?;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let scores = g.head_scores(q, k, batch, config.heads, scale)?;
    let attn = g.softmax_rows(scores)?;
    let mix_map = if routing.detach_map() { g.stop_gradient(attn) } else { attn };
    let values = g.linear(h, v(p.w_v), None)?;
    let mixed = g.head_mix(mix_map, values, batch, config.heads)?;
    let projected = g.linear(mixed, v(p.w_o), None)?;
    let x1 = g.add(x, projected)?;
    let h2 = g.layer_norm(x1, v(p.ln2_g), v(p.ln2_b), config.ln_eps)?;
    let hidden = g.linear(h2, v(p.mlp_w1), Some(v(p.mlp_b1)))?;
    let hidden = g.gelu(hidden);
    let out = g.linear(hidden, v(p.mlp_w2), Some(v(p.mlp_b2)))?;
    Ok((g.add(x1, out)?, attn))
}

struct StreamOut {
    tokens: Var,
    attention: Vec<Var>,
}

fn stream_forward<T: Real>(
    g: &mut Graph<T>,
    s: &StreamParams,
    bound: &BoundParams,
    config: &ModelConfig,
    routing: RoutingMode,
    patches: Var,
    batch: usize,
) -> Result<StreamOut> {
    let (np, kq) = (config.scene.num_patches(), config.queries);
    let embedded = g.linear(patches, bound.var(s.patch_w), Some(bound.var(s.patch_b)))?;
    let pos_index = (0..batch).flat_map(|_| (0..np as u32).map(|r| (0u32, r))).collect();
    let pos = g.gather_rows(&[bound.var(s.pos)], pos_index)?;
    let embedded = g.add(embedded, pos)?;
    let mut seq_index = Vec::with_capacity(batch * (np + kq));
    for b in 0..batch {
        seq_index.extend((0..np).map(|r| (0u32, (b * np + r) as u32)));
        seq_index.extend((0..kq).map(|r| (1u32, r as u32)));
    }
    let mut x = g.gather_rows(&[embedded, bound.var(s.queries)], seq_index)?;
    let mut attention = Vec::with_capacity(s.blocks.len());
    for p in &s.blocks {
        let (out, attn) = block_forward(g, x, p, bound, config, routing, batch)?;
        x = out;
        attention.push(attn);
    }
    Ok(StreamOut { tokens: x, attention })
}

/// Full forward pass. `patches` is `[B*N_p, D_patch]`, sample-major.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    params: &EncoderParams<T>,
    bound: &BoundParams,
    patches: &Tensor<T>,
) -> Result<ForwardOut> {
    let config = &params.config;
    let (np, dp, n) = (config.scene.num_patches(), config.scene.patch_dim(), config.seq_len());
    if patches.shape().len() != 2 || patches.cols() != dp || !patches.rows().is_multiple_of(np) {
        return Err(MuseError::dim("encoder_forward", patches.shape(), &[np, dp]));
    }
    let batch = patches.rows() / np;
    let input = g.constant(patches.clone());
    let layout = &params.layout;
    let (topo, semantic) = if config.routing == RoutingMode::TwoStream {
        let a = stream_forward(g, &layout.streams[0], bound, config, RoutingMode::Naive, input, batch)?;
        let b = stream_forward(g, &layout.streams[1], bound, config, RoutingMode::Naive, input, batch)?;
        (a, Some(b))
    } else {
        (stream_forward(g, &layout.streams[0], bound, config, config.routing, input, batch)?, None)
    };

    let patch_rows: Vec<usize> = (0..batch).flat_map(|b| b * n..b * n + np).collect();
    let patch_tokens = g.select_rows(topo.tokens, &patch_rows)?;
    let dec_in = if config.routing.detach_qk() { g.stop_gradient(patch_tokens) } else { patch_tokens };
    let recon = g.linear(dec_in, bound.var(layout.dec_w), Some(bound.var(layout.dec_b)))?;

    let sem_tokens = semantic.as_ref().map_or(topo.tokens, |s| s.tokens);
    let groups = (0..batch).map(|b| (b * n + np..(b + 1) * n).collect()).collect();
    let pooled = g.pool_rows(sem_tokens, groups)?;
    let projected = g.linear(pooled, bound.var(layout.proj_w), Some(bound.var(layout.proj_b)))?;
    let embedding = g.normalize_rows(projected)?;
    Ok(ForwardOut { batch, tokens: sem_tokens, attention: topo.attention, pooled, embedding, recon })
}

/// Patch-to-patch block of every map, rows renormalised: `[B, H, N_p, N_p]` per layer.
pub fn extract_student_topology<T: Real>(g: &mut Graph<T>, attention: &[Var], num_patches: usize) -> Result<Vec<Var>> {
    if num_patches == 0 {
        return Err(MuseError::Argument("student topology needs at least one patch".into()));
    }
    attention.iter().map(|&a| g.restrict_renorm(a, num_patches)).collect()
}

/// Stacks patch tokens of several samples into one `[B*N_p, D_patch]` tensor.
pub fn stack_patches<T: Real>(grids: &[&crate::scenes::PatchGrid]) -> Result<Tensor<T>> {
    let first = grids.first().ok_or_else(|| MuseError::Argument("empty batch".into()))?;
    let (np, dp) = (first.num_patches, first.patch_dim);
    let mut data = Vec::with_capacity(grids.len() * np * dp);
    for grid in grids {
        if grid.num_patches != np || grid.patch_dim != dp {
            return Err(MuseError::dim("stack_patches", &[grid.num_patches, grid.patch_dim], &[np, dp]));
        }
        data.extend(grid.tokens.iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::new(vec![grids.len() * np, dp], data)
}

#[cfg(test)]
mod tests;
