use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{MuseError, Result};
use crate::trainer::{optimizer_step, AdamW, OptimizerState, ParamPolicy};

/// `x_t = t x1 + (1 - t) x0`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(&a, &b)| t * b + (1.0 - t) * a).collect()
}

fn check_t(t: &[f64]) -> Result<()> {
    match t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(bad) => Err(MuseError::Argument(format!("interpolation time {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Mean squared error between predicted velocities `[B, D]` and `x1 - x0`.
pub fn flow_matching_loss<T: Real>(g: &mut Graph<T>, v_pred: Var, x0: &Tensor<T>, x1: &Tensor<T>, t: &[f64]) -> Result<Var> {
    check_t(t)?;
    if x0.shape() != x1.shape() || t.len() != x0.rows() {
        return Err(MuseError::dim("flow_matching_loss", x0.shape(), x1.shape()));
    }
    let target: Vec<T> = x1.data().iter().zip(x0.data()).map(|(&b, &a)| b - a).collect();
    g.mse(v_pred, Tensor::new(x0.shape().to_vec(), target)?)
}

/// Rows `[x_t, t, condition]` for the toy predictor.
pub fn flow_inputs<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: &[f64], condition: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_t(t)?;
    let (b, d) = (x0.rows(), x0.cols());
    let c = condition.map_or(0, Tensor::cols);
    if x1.shape() != x0.shape() || t.len() != b || condition.is_some_and(|c| c.rows() != b) {
        return Err(MuseError::dim("flow_inputs", x0.shape(), x1.shape()));
    }
    let mut data = Vec::with_capacity(b * (d + 1 + c));
    for i in 0..b {
        let ti = T::of(t[i]);
        data.extend(x0.row(i).iter().zip(x1.row(i)).map(|(&a, &z)| ti * z + (T::one() - ti) * a));
        data.push(ti);
        if let Some(cond) = condition {
            data.extend_from_slice(cond.row(i));
        }
    }
    Tensor::new(vec![b, d + 1 + c], data)
}

/// Two-layer GELU velocity field over `[x_t, t, condition]`.
#[derive(Debug, Clone)]
pub struct ToyVelocity<T: Real> {
    /// `w1 [in, hidden]`, `b1 [hidden]`, `w2 [hidden, out]`, `b2 [out]`.
    pub params: Vec<Tensor<T>>,
}

impl<T: Real> ToyVelocity<T> {
    pub fn new(seed: u64, input: usize, hidden: usize, output: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |fan_in: usize, n: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = Tensor::from_f64(vec![input, hidden], &uniform(input, input * hidden)).expect("shape");
        let w2 = Tensor::from_f64(vec![hidden, output], &uniform(hidden, hidden * output)).expect("shape");
        ToyVelocity { params: vec![w1, Tensor::zeros(vec![hidden]), w2, Tensor::zeros(vec![output])] }
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], inputs: &Tensor<T>) -> Result<Var> {
        let x = g.constant(inputs.clone());
        let h = g.linear(x, vars[0], Some(vars[1]))?;
        let h = g.gelu(h);
        g.linear(h, vars[2], Some(vars[3]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowToyConfig {
    pub seed: u64,
    pub pairs: usize,
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for FlowToyConfig {
    fn default() -> Self {
        FlowToyConfig { seed: 0, pairs: 64, dim: 4, cond_dim: 2, hidden: 32, steps: 500, lr: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowToyReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains [`ToyVelocity`] on a fixed set of Gaussian pairs. Targets are
/// `x1 = mu + A c + 0.1 n`, sources `x0 ~ N(0, I)`. Times are redrawn every
/// step; the reported losses use a fixed evaluation draw of times.
pub fn train_toy_flow(config: &FlowToyConfig) -> Result<FlowToyReport> {
    let FlowToyConfig { seed, pairs, dim, cond_dim, hidden, steps, lr } = *config;
    if pairs == 0 || dim == 0 || hidden == 0 {
        return Err(MuseError::Config("toy flow needs pairs, dim and hidden >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mixing = normal(cond_dim * dim);
    let cond = normal(pairs * cond_dim);
    let noise = normal(pairs * dim);
    let x0 = Tensor::from_f64(vec![pairs, dim], &normal(pairs * dim))?;
    let mut x1 = vec![0f64; pairs * dim];
    for i in 0..pairs {
        for j in 0..dim {
            let mixed: f64 = (0..cond_dim).map(|k| cond[i * cond_dim + k] * mixing[k * dim + j]).sum();
            x1[i * dim + j] = 2.0 + mixed + 0.1 * noise[i * dim + j];
        }
    }
    let x1 = Tensor::from_f64(vec![pairs, dim], &x1)?;
    let cond = (cond_dim > 0).then(|| Tensor::from_f64(vec![pairs, cond_dim], &cond)).transpose()?;
    let eval_t: Vec<f64> = (0..pairs).map(|i| (i as f64 + 0.5) / pairs as f64).collect();

    let mut model = ToyVelocity::<f64>::new(seed ^ 0x5eed, dim + 1 + cond_dim, hidden, dim);
    let loss_at = |model: &ToyVelocity<f64>, t: &[f64], backward: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = model.params.iter().map(|p| g.param(p.clone())).collect();
        let inputs = flow_inputs(&x0, &x1, t, cond.as_ref())?;
        let v = model.forward(&mut g, &vars, &inputs)?;
        let loss = flow_matching_loss(&mut g, v, &x0, &x1, t)?;
        let value = g.value(loss).item();
        if !backward {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad(v).expect("param grad").to_vec()).collect()))
    };

    let initial_loss = loss_at(&model, &eval_t, false)?.0;
    let hyper = AdamW { weight_decay: 0.0, ..AdamW::default() };
    let mut state = OptimizerState::new(&model.params);
    let policy: Vec<ParamPolicy> = ["w1", "b1", "w2", "b2"].iter().map(|n| ParamPolicy::trainable(n, false)).collect();
    for step in 0..steps {
        let t: Vec<f64> = (0..pairs).map(|_| rng.random::<f64>()).collect();
        let (_, grads) = loss_at(&model, &t, true)?;
        optimizer_step(&mut model.params, &grads, &mut state, &hyper, lr, &policy, step as u64)?;
    }
    let final_loss = loss_at(&model, &eval_t, false)?.0;
    Ok(FlowToyReport { initial_loss, final_loss })
}
