//! Synthetic data with known ground truth.
//!
//! Tilting `N(0, I)` by `exp(gamma + xi^T x)` with `gamma = -|xi|^2 / 2`
//! gives exactly `N(xi, I)`, so client `i` samples its features from
//! `N(xi_i, I)` and labels from its true softmax head.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{ClientData, Dataset};
use crate::linalg::{argmax, dot, sq_norm, Matrix};
use crate::loss::LinearHead;
use crate::rng::{self, tag, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clients: usize,
    pub classes: usize,
    pub dim: usize,
    /// Client tilts `xi_i`, one row per client.
    pub tilts: Vec<Vec<f64>>,
    /// True target heads: one shared head or one per client.
    pub heads: Vec<LinearHead>,
    pub train_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.clients;
        if m == 0 || self.classes == 0 || self.dim == 0 {
            return Err(Error::config("synthetic spec needs m, K, p >= 1"));
        }
        if self.tilts.len() != m || self.tilts.iter().any(|t| t.len() != self.dim) {
            return Err(Error::config("need one tilt of length p per client"));
        }
        if self.heads.len() != 1 && self.heads.len() != m {
            return Err(Error::config("need one shared head or one head per client"));
        }
        if self
            .heads
            .iter()
            .any(|h| h.classes != self.classes || h.dim != self.dim)
        {
            return Err(Error::config("true head shape differs from (K, p)"));
        }
        if self.train_sizes.len() != m || self.test_sizes.len() != m || self.train_sizes.contains(&0) {
            return Err(Error::config("need a positive train size and a test size per client"));
        }
        Ok(())
    }

    /// Tilt intercepts `-|xi_i|^2 / 2` that normalize each client density.
    pub fn normalizers(&self) -> Vec<f64> {
        self.tilts.iter().map(|t| -sq_norm(t) / 2.0).collect()
    }

    fn head(&self, client: usize) -> &LinearHead {
        if self.heads.len() == 1 {
            &self.heads[0]
        } else {
            &self.heads[client]
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DrmTruth {
    pub gamma: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    pub heads: Vec<LinearHead>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub clients: Vec<ClientData>,
    pub truth: DrmTruth,
}

fn sample_categorical(p: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

fn gaussian_block(n: usize, mean: &[f64], head: &LinearHead, classes: usize, rng: &mut StreamRng) -> Dataset {
    let p = mean.len();
    let mut x = Matrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row_mut(r);
        for (v, mu) in row.iter_mut().zip(mean) {
            let z: f64 = StandardNormal.sample(rng);
            *v = mu + z;
        }
        y.push(sample_categorical(&head.probs(x.row(r)), rng));
    }
    Dataset { x, y, classes }
}

/// Draws every client's train and test sets from its tilted Gaussian.
pub fn synth_drm_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let clients = (0..spec.clients)
        .map(|i| {
            let head = spec.head(i);
            let mut rng = rng::stream(spec.seed, &[tag::SYNTH, i as u64]);
            let train = gaussian_block(spec.train_sizes[i], &spec.tilts[i], head, spec.classes, &mut rng);
            let mut rng = rng::stream(spec.seed, &[tag::TEST_SET, i as u64]);
            let test = gaussian_block(spec.test_sizes[i], &spec.tilts[i], head, spec.classes, &mut rng);
            ClientData {
                client_id: i,
                train,
                test,
            }
        })
        .collect();
    Ok(SynthData {
        clients,
        truth: DrmTruth {
            gamma: spec.normalizers(),
            xi: spec.tilts.clone(),
            heads: spec.heads.clone(),
        },
    })
}

/// Bayes-optimal client for `x` given the true tilts and client sizes:
/// `argmax_i log n_i + xi_i^T x - |xi_i|^2 / 2`.
pub fn bayes_route(x: &[f64], tilts: &[Vec<f64>], sizes: &[usize]) -> usize {
    let scores: Vec<f64> = tilts
        .iter()
        .zip(sizes)
        .map(|(t, &n)| (n as f64).ln() + dot(t, x) - sq_norm(t) / 2.0)
        .collect();
    argmax(&scores)
}

/// Three well-separated Gaussian clients in `R^4` with distinct true heads.
/// The tilts sit on an equilateral triangle with side `3.5 * sqrt(3) > 6`.
pub fn routing_benchmark(train_per_client: usize, test_per_client: usize, seed: u64) -> SynthSpec {
    let (m, k, p) = (3, 4, 4);
    let tilts = (0..m)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            let mut t = vec![0.0; p];
            t[0] = 3.5 * a.cos();
            t[1] = 3.5 * a.sin();
            t
        })
        .collect();
    let mut rng = rng::stream(seed, &[tag::HEADS]);
    let unif = Uniform::new_inclusive(-1.5, 1.5).expect("valid range");
    let heads = (0..m)
        .map(|_| LinearHead {
            classes: k,
            dim: p,
            params: (0..k * (p + 1)).map(|_| unif.sample(&mut rng)).collect(),
        })
        .collect();
    SynthSpec {
        clients: m,
        classes: k,
        dim: p,
        tilts,
        heads,
        train_sizes: vec![train_per_client; m],
        test_sizes: vec![test_per_client; m],
        seed,
    }
}

/// Random covariate-shift instance: tilts `tilt_scale * N(0, I)` per client and
/// one shared head with entries `head_scale * N(0, 1)`.
#[allow(clippy::too_many_arguments)]
pub fn random_tilt_spec(
    clients: usize,
    classes: usize,
    dim: usize,
    tilt_scale: f64,
    head_scale: f64,
    train_per_client: usize,
    test_per_client: usize,
    seed: u64,
) -> SynthSpec {
    let mut rng = rng::stream(seed, &[tag::HEADS, 1]);
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    };
    let tilts = (0..clients)
        .map(|_| (0..dim).map(|_| normal(tilt_scale)).collect())
        .collect();
    let params = (0..classes * (dim + 1)).map(|_| normal(head_scale)).collect();
    SynthSpec {
        clients,
        classes,
        dim,
        tilts,
        heads: vec![LinearHead { classes, dim, params }],
        train_sizes: vec![train_per_client; clients],
        test_sizes: vec![test_per_client; clients],
        seed,
    }
}

/// Fixed-embedding logistic benchmark: `x ~ N(0, I_p)`, `g = A x`,
/// `h = B g`, client label from `softmax(gamma + xi h)` and class label from
/// `softmax(alpha + beta g)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheorySpec {
    pub clients: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub d_g: usize,
    pub d_h: usize,
    pub samples: usize,
    pub seed: u64,
    /// Seed for the ground truth and embedding; sample draws use `seed`.
    pub truth_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryTruth {
    /// `d_g x p` embedding matrix.
    pub a: Matrix,
    /// `d_h x d_g` branch matrix.
    pub b: Matrix,
    pub client_head: LinearHead,
    pub target_head: LinearHead,
}

#[derive(Debug, Clone)]
pub struct TheoryData {
    pub x: Matrix,
    pub g: Matrix,
    pub h: Matrix,
    pub client: Vec<usize>,
    pub class: Vec<usize>,
    pub truth: TheoryTruth,
}

impl TheoryData {
    /// Rows owned by each client, in sample order.
    pub fn client_rows(&self, m: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); m];
        for (r, &c) in self.client.iter().enumerate() {
            out[c].push(r);
        }
        out
    }
}

/// Head with entries Uniform(-1, 1), centred over classes so it is the
/// minimum-norm representative of its softmax equivalence class.
fn centred_head(classes: usize, dim: usize, rng: &mut StreamRng) -> LinearHead {
    let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut params: Vec<f64> = (0..classes * (dim + 1)).map(|_| unif.sample(rng)).collect();
    for j in 0..=dim {
        let mean = (0..classes).map(|k| params[k * (dim + 1) + j]).sum::<f64>() / classes as f64;
        for k in 0..classes {
            params[k * (dim + 1) + j] -= mean;
        }
    }
    LinearHead { classes, dim, params }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> Matrix {
    let scale = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

pub fn theory_truth(spec: &TheorySpec) -> TheoryTruth {
    let mut rng = rng::stream(spec.truth_seed, &[tag::THEORY, 0]);
    let a = random_matrix(spec.d_g, spec.input_dim, &mut rng);
    let b = random_matrix(spec.d_h, spec.d_g, &mut rng);
    let client_head = centred_head(spec.clients, spec.d_h, &mut rng);
    let target_head = centred_head(spec.classes, spec.d_g, &mut rng);
    TheoryTruth {
        a,
        b,
        client_head,
        target_head,
    }
}

pub fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|row| dot(row, v)).collect()
}

pub fn synth_theory_generate(spec: &TheorySpec) -> Result<TheoryData> {
    synth_theory_with_truth(spec, theory_truth(spec))
}

/// Samples from the logistic model of `truth` with sample seed `spec.seed`.
pub fn synth_theory_with_truth(spec: &TheorySpec, truth: TheoryTruth) -> Result<TheoryData> {
    if spec.clients == 0 || spec.classes == 0 || spec.samples == 0 {
        return Err(Error::config("theory spec needs m, K, N >= 1"));
    }
    let mut rng = rng::stream(spec.seed, &[tag::THEORY, 1, spec.truth_seed]);
    let n = spec.samples;
    let mut x = Matrix::zeros(n, spec.input_dim);
    let mut g = Matrix::zeros(n, spec.d_g);
    let mut h = Matrix::zeros(n, spec.d_h);
    let mut client = Vec::with_capacity(n);
    let mut class = Vec::with_capacity(n);
    for r in 0..n {
        for v in x.row_mut(r) {
            *v = StandardNormal.sample(&mut rng);
        }
        let gr = mat_vec(&truth.a, x.row(r));
        let hr = mat_vec(&truth.b, &gr);
        client.push(sample_categorical(&truth.client_head.probs(&hr), &mut rng));
        class.push(sample_categorical(&truth.target_head.probs(&gr), &mut rng));
        g.row_mut(r).copy_from_slice(&gr);
        h.row_mut(r).copy_from_slice(&hr);
    }
    Ok(TheoryData {
        x,
        g,
        h,
        client,
        class,
        truth,
    })
}
