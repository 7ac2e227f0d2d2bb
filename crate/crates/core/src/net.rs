//! MLP embeddings.
//!
//! The network has two outputs: the target embedding `g(x)` produced by the
//! g-path, and the client embedding `h` produced by a separate branch that
//! forks off the g-path at a point chosen by [`Sharing`]:
//!
//! | sharing   | h-branch input                           |
//! |-----------|------------------------------------------|
//! | `none`    | the raw input `x` (disjoint parameters)  |
//! | `shallow` | output of g-layer 1                      |
//! | `mid`     | output of g-layer `ceil(depth / 2)`      |
//! | `deep`    | the final g output                       |
//!
//! Hidden layers apply the activation; the last layer of each path is affine.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    None,
    Shallow,
    Mid,
    #[default]
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Widths of the g-path; the last entry is `d_g`.
    pub g_layers: Vec<usize>,
    /// Widths of the h-branch; the last entry is `d_h`.
    pub h_layers: Vec<usize>,
    #[serde(default)]
    pub sharing: Sharing,
    #[serde(default)]
    pub activation: Activation,
    /// Freezes both paths: backward returns zero and weight decay skips them.
    #[serde(default)]
    pub fixed_embedding: bool,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be >= 1"));
        }
        if self.g_layers.is_empty() || self.h_layers.is_empty() {
            return Err(Error::config("g_layers and h_layers must be non-empty"));
        }
        if self.g_layers.iter().chain(&self.h_layers).any(|&w| w == 0) {
            return Err(Error::config("all layer widths must be >= 1"));
        }
        Ok(())
    }

    pub fn d_g(&self) -> usize {
        *self.g_layers.last().unwrap_or(&0)
    }

    pub fn d_h(&self) -> usize {
        *self.h_layers.last().unwrap_or(&0)
    }

    /// Number of g-layers whose output feeds the h-branch; 0 means the raw input.
    pub fn fork_layer(&self) -> usize {
        let depth = self.g_layers.len();
        match self.sharing {
            Sharing::None => 0,
            Sharing::Shallow => 1,
            Sharing::Mid => depth.div_ceil(2),
            Sharing::Deep => depth,
        }
    }

    fn fork_width(&self) -> usize {
        match self.fork_layer() {
            0 => self.input_dim,
            k => self.g_layers[k - 1],
        }
    }

    /// Linear embeddings `g = A x`, `h = B g` (no hidden layers), deep sharing.
    pub fn linear(input_dim: usize, d_g: usize, d_h: usize, fixed: bool) -> Self {
        Self {
            input_dim,
            g_layers: vec![d_g],
            h_layers: vec![d_h],
            sharing: Sharing::Deep,
            activation: Activation::Relu,
            fixed_embedding: fixed,
        }
    }
}

/// Affine layer with row-major weights of shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }
}

/// Parameters of the g-path (`theta`) and h-branch (`tau`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub g: Vec<Dense>,
    pub h: Vec<Dense>,
}

fn layer_dims(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut prev = input;
    widths
        .iter()
        .map(|&w| {
            let d = (prev, w);
            prev = w;
            d
        })
        .collect()
}

impl EmbeddingParams {
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            g: layer_dims(cfg.input_dim, &cfg.g_layers)
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
            h: layer_dims(cfg.fork_width(), &cfg.h_layers)
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.g.iter().chain(&self.h)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.g.iter_mut().chain(self.h.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Layer order: g-layers then h-layers; within a layer weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`flatten`](Self::flatten); returns the number of values consumed.
    pub fn read_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let need = self.num_params();
        if flat.len() < need {
            return Err(Error::contract(format!(
                "embedding needs {need} values, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(off)
    }

    pub fn unflatten(cfg: &NetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let used = p.read_flat(flat)?;
        if used != flat.len() {
            return Err(Error::contract("trailing values after embedding parameters"));
        }
        Ok(p)
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum()
    }

    fn check_shapes(&self, cfg: &NetConfig) -> Result<()> {
        let zeros = Self::zeros(cfg);
        let same = |a: &[Dense], b: &[Dense]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.in_dim == y.in_dim && x.out_dim == y.out_dim)
        };
        if same(&self.g, &zeros.g) && same(&self.h, &zeros.h) {
            Ok(())
        } else {
            Err(Error::contract("embedding parameter shapes do not match config"))
        }
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<EmbeddingParams> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    let g = layer_dims(cfg.input_dim, &cfg.g_layers)
        .into_iter()
        .map(|(i, o)| Dense::glorot(i, o, &mut rng))
        .collect();
    let h = layer_dims(cfg.fork_width(), &cfg.h_layers)
        .into_iter()
        .map(|(i, o)| Dense::glorot(i, o, &mut rng))
        .collect();
    Ok(EmbeddingParams { g, h })
}

/// Activations recorded by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    g_inputs: Vec<Vec<f64>>,
    g_pre: Vec<Vec<f64>>,
    h_inputs: Vec<Vec<f64>>,
    h_pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub cache: ForwardCache,
}

fn run_path(
    layers: &[Dense],
    x: Vec<f64>,
    act: Activation,
    fork_after: Option<usize>,
) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Option<Vec<f64>>) {
    let n = layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pres = Vec::with_capacity(n);
    let mut fork = if fork_after == Some(0) { Some(x.clone()) } else { None };
    let mut cur = x;
    for (k, layer) in layers.iter().enumerate() {
        let pre = layer.apply(&cur);
        let out = if k + 1 < n {
            pre.iter().map(|&z| act.apply(z)).collect()
        } else {
            pre.clone()
        };
        inputs.push(cur);
        pres.push(pre);
        cur = out;
        if fork_after == Some(k + 1) {
            fork = Some(cur.clone());
        }
    }
    (cur, inputs, pres, fork)
}

pub fn forward(x: &[f64], p: &EmbeddingParams, cfg: &NetConfig) -> Result<Forward> {
    if x.len() != cfg.input_dim {
        return Err(Error::contract(format!(
            "input has {} features, expected {}",
            x.len(),
            cfg.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("forward input contains NaN or inf".into()));
    }
    let (g, g_inputs, g_pre, fork) = run_path(&p.g, x.to_vec(), cfg.activation, Some(cfg.fork_layer()));
    let fork = fork.expect("fork layer within depth");
    let (h, h_inputs, h_pre, _) = run_path(&p.h, fork, cfg.activation, None);
    Ok(Forward {
        g,
        h,
        cache: ForwardCache {
            g_inputs,
            g_pre,
            h_inputs,
            h_pre,
        },
    })
}

/// Backpropagates `d_out` through `layers`, accumulating into `grads`.
/// `extra(k, d)` may inject additional gradient into the output of layer `k`
/// (1-based) before its activation derivative is applied. Returns the
/// gradient with respect to the path input.
fn backprop_path(
    layers: &[Dense],
    grads: &mut [Dense],
    inputs: &[Vec<f64>],
    pres: &[Vec<f64>],
    act: Activation,
    mut d_out: Vec<f64>,
    mut extra: impl FnMut(usize, &mut Vec<f64>),
) -> Vec<f64> {
    let n = layers.len();
    for k in (0..n).rev() {
        extra(k + 1, &mut d_out);
        let layer = &layers[k];
        let d_pre: Vec<f64> = if k + 1 < n {
            d_out
                .iter()
                .zip(&pres[k])
                .map(|(d, &z)| d * act.derivative(z))
                .collect()
        } else {
            d_out
        };
        let grad = &mut grads[k];
        let input = &inputs[k];
        for (o, &dp) in d_pre.iter().enumerate() {
            grad.bias[o] += dp;
            let row = &mut grad.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (w, &xi) in row.iter_mut().zip(input) {
                *w += dp * xi;
            }
        }
        let mut d_in = vec![0.0; layer.in_dim];
        for (o, &dp) in d_pre.iter().enumerate() {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (di, &w) in d_in.iter_mut().zip(row) {
                *di += w * dp;
            }
        }
        d_out = d_in;
    }
    d_out
}

/// Reverse-mode gradient of `<grad_g, g> + <grad_h, h>`, accumulated into `acc`.
pub fn backward_into(
    cache: &ForwardCache,
    p: &EmbeddingParams,
    cfg: &NetConfig,
    grad_g: &[f64],
    grad_h: &[f64],
    acc: &mut EmbeddingParams,
) -> Result<()> {
    if grad_g.len() != cfg.d_g() || grad_h.len() != cfg.d_h() {
        return Err(Error::contract("upstream gradient shape mismatch"));
    }
    if cache.g_inputs.len() != p.g.len() || cache.h_inputs.len() != p.h.len() {
        return Err(Error::contract("forward cache does not match parameters"));
    }
    if cfg.fixed_embedding {
        return Ok(());
    }
    let d_fork = backprop_path(
        &p.h,
        &mut acc.h,
        &cache.h_inputs,
        &cache.h_pre,
        cfg.activation,
        grad_h.to_vec(),
        |_, _| {},
    );
    let fork = cfg.fork_layer();
    backprop_path(
        &p.g,
        &mut acc.g,
        &cache.g_inputs,
        &cache.g_pre,
        cfg.activation,
        grad_g.to_vec(),
        |k, d| {
            if k == fork {
                for (a, b) in d.iter_mut().zip(&d_fork) {
                    *a += b;
                }
            }
        },
    );
    Ok(())
}

/// Gradient over the embedding parameters; all zeros when the embedding is fixed.
pub fn backward(
    cache: &ForwardCache,
    p: &EmbeddingParams,
    cfg: &NetConfig,
    grad_g: &[f64],
    grad_h: &[f64],
) -> Result<EmbeddingParams> {
    p.check_shapes(cfg)?;
    let mut acc = EmbeddingParams::zeros(cfg);
    backward_into(cache, p, cfg, grad_g, grad_h, &mut acc)?;
    Ok(acc)
}
