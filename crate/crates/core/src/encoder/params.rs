use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, RoutingMode};
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{MuseError, Result};

/// Parameter subspace a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Subspace {
    /// `W_Q`, `W_K`: attention topology.
    Topology,
    /// Values, output projection, MLP, norms, queries, projector, class table, temperature.
    Semantic,
    /// Patch embedding and positions.
    Backbone,
    Decoder,
}

impl Subspace {
    pub const ALL: [Subspace; 4] = [Subspace::Topology, Subspace::Semantic, Subspace::Backbone, Subspace::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Subspace::Topology => "TOPOLOGY",
            Subspace::Semantic => "SEMANTIC",
            Subspace::Backbone => "BACKBONE",
            Subspace::Decoder => "DECODER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub subspace: Subspace,
    pub layer: Option<usize>,
    /// Matrix kind within a block or head, e.g. `w_q`, `mlp_w1`, `projector_w`.
    pub matrix: &'static str,
    /// Parameter stream; only the two-stream ablation has stream 1.
    pub stream: usize,
    pub weight_decay: bool,
}

/// Indices of one block's tensors in the store.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

#[derive(Debug, Clone)]
pub struct StreamParams {
    pub patch_w: usize,
    pub patch_b: usize,
    pub pos: usize,
    pub queries: usize,
    pub blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub streams: Vec<StreamParams>,
    pub proj_w: usize,
    pub proj_b: usize,
    pub dec_w: usize,
    pub dec_b: usize,
    pub class_emb: usize,
    pub tau: usize,
}

/// All encoder parameters in declaration order plus their metadata.
#[derive(Debug, Clone)]
pub struct EncoderParams<T: Real> {
    pub config: ModelConfig,
    pub metas: Vec<ParamMeta>,
    pub values: Vec<Tensor<T>>,
    pub layout: Layout,
}

struct Builder<'a, T: Real> {
    rng: &'a mut ChaCha8Rng,
    metas: Vec<ParamMeta>,
    values: Vec<Tensor<T>>,
    prefix: String,
    stream: usize,
}

impl<T: Real> Builder<'_, T> {
    fn push(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        subspace: Subspace,
        layer: Option<usize>,
        matrix: &'static str,
        data: Vec<f64>,
    ) -> usize {
        let weight_decay = shape.len() == 2;
        self.metas.push(ParamMeta {
            name: format!("{}{}", self.prefix, name),
            shape: shape.clone(),
            subspace,
            layer,
            matrix,
            stream: self.stream,
            weight_decay,
        });
        self.values.push(Tensor::from_f64(shape, &data).expect("init shape"));
        self.values.len() - 1
    }

    /// Fan-in scaled uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, sub: Subspace, layer: Option<usize>, m: &'static str) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.push(name, vec![fan_in, fan_out], sub, layer, m, data)
    }

    fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64, sub: Subspace, m: &'static str) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.push(name, shape, sub, None, m, data)
    }

    fn constant(&mut self, name: &str, len: usize, value: f64, sub: Subspace, layer: Option<usize>, m: &'static str) -> usize {
        self.push(name, vec![len], sub, layer, m, vec![value; len])
    }
}

impl<T: Real> EncoderParams<T> {
    /// Fan-in scaled uniform linear maps, `N(0, 0.02)` positions and queries,
    /// unit norms, zero biases, temperature 0.07. Deterministic in `seed`.
    pub fn init(seed: u64, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, np, dp) = (config.dim, config.scene.num_patches(), config.scene.patch_dim());
        let hidden = config.dim * config.mlp_ratio;
        let mut b = Builder::<T> { rng: &mut rng, metas: Vec::new(), values: Vec::new(), prefix: String::new(), stream: 0 };
        let n_streams = if config.routing == RoutingMode::TwoStream { 2 } else { 1 };
        let mut streams = Vec::with_capacity(n_streams);
        for s in 0..n_streams {
            b.stream = s;
            b.prefix = if n_streams > 1 { format!("s{s}.") } else { String::new() };
            let patch_w = b.linear("patch_embed.w", dp, d, Subspace::Backbone, None, "patch_w");
            let patch_b = b.constant("patch_embed.b", d, 0.0, Subspace::Backbone, None, "patch_b");
            let pos = b.normal("pos_embed", vec![np, d], 0.02, Subspace::Backbone, "pos_embed");
            let queries = b.normal("query_tokens", vec![config.queries, d], 0.02, Subspace::Semantic, "query_tokens");
            let mut blocks = Vec::with_capacity(config.layers);
            for l in 0..config.layers {
                let name = |m: &str| format!("block{l}.{m}");
                let ly = Some(l);
                blocks.push(BlockParams {
                    ln1_g: b.constant(&name("ln1_g"), d, 1.0, Subspace::Semantic, ly, "ln1_g"),
                    ln1_b: b.constant(&name("ln1_b"), d, 0.0, Subspace::Semantic, ly, "ln1_b"),
                    w_q: b.linear(&name("w_q"), d, d, Subspace::Topology, ly, "w_q"),
                    w_k: b.linear(&name("w_k"), d, d, Subspace::Topology, ly, "w_k"),
                    w_v: b.linear(&name("w_v"), d, d, Subspace::Semantic, ly, "w_v"),
                    w_o: b.linear(&name("w_o"), d, d, Subspace::Semantic, ly, "w_o"),
                    ln2_g: b.constant(&name("ln2_g"), d, 1.0, Subspace::Semantic, ly, "ln2_g"),
                    ln2_b: b.constant(&name("ln2_b"), d, 0.0, Subspace::Semantic, ly, "ln2_b"),
                    mlp_w1: b.linear(&name("mlp_w1"), d, hidden, Subspace::Semantic, ly, "mlp_w1"),
                    mlp_b1: b.constant(&name("mlp_b1"), hidden, 0.0, Subspace::Semantic, ly, "mlp_b1"),
                    mlp_w2: b.linear(&name("mlp_w2"), hidden, d, Subspace::Semantic, ly, "mlp_w2"),
                    mlp_b2: b.constant(&name("mlp_b2"), d, 0.0, Subspace::Semantic, ly, "mlp_b2"),
                });
            }
            streams.push(StreamParams { patch_w, patch_b, pos, queries, blocks });
        }
        // heads: the semantic head reads the last stream, the decoder the first
        b.stream = n_streams - 1;
        b.prefix = if n_streams > 1 { format!("s{}.", n_streams - 1) } else { String::new() };
        let proj_w = b.linear("projector.w", d, config.embed_dim, Subspace::Semantic, None, "projector_w");
        let proj_b = b.constant("projector.b", config.embed_dim, 0.0, Subspace::Semantic, None, "projector_b");
        let class_emb = b.linear("class_embed", config.scene.classes, config.embed_dim, Subspace::Semantic, None, "class_embed");
        let tau = b.push("tau", vec![1], Subspace::Semantic, None, "tau", vec![config.tau_init]);
        b.stream = 0;
        b.prefix = if n_streams > 1 { "s0.".into() } else { String::new() };
        let dec_w = b.linear("decoder.w", d, dp, Subspace::Decoder, None, "decoder_w");
        let dec_b = b.constant("decoder.b", dp, 0.0, Subspace::Decoder, None, "decoder_b");
        // class table and temperature carry no decay
        let Builder { mut metas, values, .. } = b;
        metas[class_emb].weight_decay = false;
        metas[tau].weight_decay = false;
        Ok(EncoderParams {
            config: config.clone(),
            metas,
            values,
            layout: Layout { streams, proj_w, proj_b, dec_w, dec_b, class_emb, tau },
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.metas.iter().position(|m| m.name == name)
    }

    pub fn tau(&self) -> f64 {
        self.values[self.layout.tau].item().f64()
    }

    pub fn clamp_tau(&mut self) {
        let (lo, hi) = (self.config.tau_min, self.config.tau_max);
        let t = &mut self.values[self.layout.tau].data_mut()[0];
        *t = T::of(t.f64().clamp(lo, hi));
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams { vars: self.values.iter().map(|v| g.param(v.clone())).collect() }
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            metas: self.metas.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces values from `(name, tensor)` pairs, checking names and shapes.
    pub fn load_values(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(MuseError::Argument(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            let meta = &self.metas[i];
            if meta.name != name || meta.shape != t.shape() {
                return Err(MuseError::Argument(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    meta.name,
                    meta.shape,
                    t.shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Graph handles for every parameter, in store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    /// Gradients of every parameter after a backward pass.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); g.value(v).numel()]))
            .collect()
    }
}
