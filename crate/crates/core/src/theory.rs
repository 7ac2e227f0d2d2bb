//! Fixed-embedding experiments: convergence of federated training to a
//! heterogeneity-sized neighbourhood of the pooled estimator, the statistical
//! error of that estimator in `N`, and the `lambda` trade-off.
//!
//! The parameter `zeta` is the flat vector `[client head, target head]` with a
//! single shared target head. With `g` and `h` fixed the pooled objective
//!
//! `(1 - lambda) CE_client + lambda CE_class + (rho / 2) ||zeta||^2`
//!
//! is strongly convex for `rho > 0`.

use rayon::prelude::*;
use serde::Serialize;

use crate::federation::{self, ClientView, FederationConfig, FederationState, LrSchedule, Mode};
use crate::linalg::{dot, solve_spd, sq_dist, sq_norm, Matrix};
use crate::loss::{Inputs, LinearHead};
use crate::metrics::{embed_all, fisher_info, head_cross_entropy};
use crate::net::NetConfig;
use crate::partition::{synth_theory_with_truth, theory_truth, TheoryData, TheorySpec};
use crate::rng::{self, tag};
use crate::{Error, Result};

pub const MLE_GRAD_TOL: f64 = 1e-9;
pub const MLE_MAX_ITER: usize = 1_000_000;
/// Share of final rounds averaged into the plateau.
pub const PLATEAU_FRACTION: f64 = 0.2;

/// Pooled fixed-embedding data.
#[derive(Debug, Clone)]
pub struct TheoryProblem {
    pub clients: usize,
    pub classes: usize,
    pub g: Matrix,
    pub h: Matrix,
    pub client: Vec<usize>,
    pub class: Vec<usize>,
    /// `[client head, target head]` of the generator.
    pub truth: Vec<f64>,
}

impl TheoryProblem {
    pub fn from_data(data: &TheoryData, clients: usize, classes: usize) -> Self {
        let truth = [
            data.truth.client_head.params.clone(),
            data.truth.target_head.params.clone(),
        ]
        .concat();
        Self {
            clients,
            classes,
            g: data.g.clone(),
            h: data.h.clone(),
            client: data.client.clone(),
            class: data.class.clone(),
            truth,
        }
    }

    /// Every client holds a copy of all samples, so local objectives agree
    /// once the client loss is switched off (`lambda = 1`).
    pub fn identical_clients(data: &TheoryData, clients: usize, classes: usize) -> Self {
        let n = data.g.rows();
        let all: Vec<usize> = (0..clients).flat_map(|_| 0..n).collect();
        Self {
            clients,
            classes,
            g: data.g.select_rows(&all),
            h: data.h.select_rows(&all),
            client: (0..clients).flat_map(|i| std::iter::repeat_n(i, n)).collect(),
            class: (0..clients).flat_map(|_| data.class.iter().copied()).collect(),
            truth: [
                data.truth.client_head.params.clone(),
                data.truth.target_head.params.clone(),
            ]
            .concat(),
        }
    }

    pub fn samples(&self) -> usize {
        self.g.rows()
    }

    pub fn client_len(&self) -> usize {
        self.clients * (self.h.cols() + 1)
    }

    pub fn dim(&self) -> usize {
        self.client_len() + self.classes * (self.g.cols() + 1)
    }

    pub fn heads(&self, zeta: &[f64]) -> (LinearHead, LinearHead) {
        let split = self.client_len();
        (
            LinearHead {
                classes: self.clients,
                dim: self.h.cols(),
                params: zeta[..split].to_vec(),
            },
            LinearHead {
                classes: self.classes,
                dim: self.g.cols(),
                params: zeta[split..].to_vec(),
            },
        )
    }

    /// Per-client `(g, h, class)` blocks in client order.
    pub fn client_blocks(&self) -> Vec<(Matrix, Matrix, Vec<usize>)> {
        let mut rows = vec![Vec::new(); self.clients];
        for (r, &c) in self.client.iter().enumerate() {
            rows[c].push(r);
        }
        rows.iter()
            .map(|idx| {
                (
                    self.g.select_rows(idx),
                    self.h.select_rows(idx),
                    idx.iter().map(|&r| self.class[r]).collect(),
                )
            })
            .collect()
    }
}

/// Pooled objective and gradient.
pub fn objective(p: &TheoryProblem, zeta: &[f64], lambda: f64, rho: f64) -> (f64, Vec<f64>) {
    let (ch, th) = p.heads(zeta);
    let (vc, gc) = head_cross_entropy(&ch, &p.h, |r| p.client[r]);
    let (vt, gt) = head_cross_entropy(&th, &p.g, |r| p.class[r]);
    let value = (1.0 - lambda) * vc + lambda * vt + 0.5 * rho * sq_norm(zeta);
    let grad = gc
        .iter()
        .map(|v| (1.0 - lambda) * v)
        .chain(gt.iter().map(|v| lambda * v))
        .zip(zeta)
        .map(|(v, z)| v + rho * z)
        .collect();
    (value, grad)
}

pub fn hessian(p: &TheoryProblem, zeta: &[f64], lambda: f64, rho: f64) -> Matrix {
    let (ch, th) = p.heads(zeta);
    fisher_info(&p.h, &p.g, &ch, &th, rho).hessian(lambda)
}

#[derive(Debug, Clone, Serialize)]
pub struct MleFit {
    pub zeta: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Upper bound on the curvature: softmax Hessians have norm at most 1/2.
fn smoothness_bound(p: &TheoryProblem, lambda: f64, rho: f64) -> f64 {
    let max_row = |m: &Matrix| m.iter_rows().map(|r| 1.0 + sq_norm(r)).fold(0.0, f64::max);
    0.5 * ((1.0 - lambda) * max_row(&p.h) + lambda * max_row(&p.g)) + rho
}

/// Minimizer of the pooled objective by Barzilai-Borwein gradient descent,
/// stopped at `||grad|| < 1e-9`.
pub fn centralized_mle(p: &TheoryProblem, rho: f64, lambda: f64) -> Result<MleFit> {
    let base = 1.0 / smoothness_bound(p, lambda, rho);
    let mut x = vec![0.0; p.dim()];
    let (mut f, mut g) = objective(p, &x, lambda, rho);
    let mut step = base;
    for it in 0..MLE_MAX_ITER {
        let gn = sq_norm(&g).sqrt();
        if gn < MLE_GRAD_TOL {
            return Ok(MleFit {
                zeta: x,
                value: f,
                grad_norm: gn,
                iterations: it,
            });
        }
        let mut x_new: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let (mut f_new, mut g_new) = objective(p, &x_new, lambda, rho);
        if !f_new.is_finite() || f_new > f + 1.0 {
            step = base;
            x_new = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            (f_new, g_new) = objective(p, &x_new, lambda, rho);
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy > 0.0 { sq_norm(&s) / sy } else { base };
        (x, f, g) = (x_new, f_new, g_new);
    }
    Err(Error::Convergence(format!(
        "gradient descent did not reach ||grad|| < {MLE_GRAD_TOL:e} in {MLE_MAX_ITER} iterations"
    )))
}

/// Damped Newton solve of the same objective; an independent check on
/// [`centralized_mle`].
pub fn newton_mle(p: &TheoryProblem, rho: f64, lambda: f64) -> Result<MleFit> {
    let mut x = vec![0.0; p.dim()];
    let (mut f, mut g) = objective(p, &x, lambda, rho);
    for it in 0..100 {
        let gn = sq_norm(&g).sqrt();
        if gn < 1e-12 {
            return Ok(MleFit {
                zeta: x,
                value: f,
                grad_norm: gn,
                iterations: it,
            });
        }
        let dir =
            solve_spd(&hessian(p, &x, lambda, rho), &g).ok_or_else(|| Error::Convergence("singular Hessian".into()))?;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - t * d).collect();
            let (fc, gc) = objective(p, &cand, lambda, rho);
            if fc <= f - 1e-4 * t * dot(&g, &dir) || t < 1e-10 {
                (x, f, g) = (cand, fc, gc);
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::Convergence("Newton iteration cap reached".into()))
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn power_iteration(m: &Matrix, seed: u64) -> f64 {
    use rand::Rng;
    let n = m.rows();
    let mut r = rng::stream(seed, &[tag::THEORY, 9]);
    let mut v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let norm = sq_norm(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut est = 0.0;
    for _ in 0..100_000 {
        let w: Vec<f64> = m.iter_rows().map(|row| dot(row, &v)).collect();
        let next = dot(&v, &w);
        let wn = sq_norm(&w).sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / wn).collect();
        if (next - est).abs() <= 1e-13 * next.abs().max(1e-300) {
            return next;
        }
        est = next;
    }
    est
}

/// Extreme Hessian eigenvalues at `zeta`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Curvature {
    pub mu_hat: f64,
    pub l_hat: f64,
    pub client_min_eig: f64,
    pub class_min_eig: f64,
}

pub fn curvature(p: &TheoryProblem, zeta: &[f64], lambda: f64, rho: f64) -> Curvature {
    let (ch, th) = p.heads(zeta);
    let info = fisher_info(&p.h, &p.g, &ch, &th, rho);
    let hess = info.hessian(lambda);
    let l_hat = power_iteration(&hess, 1);
    let mut shifted = Matrix::zeros(hess.rows(), hess.cols());
    for i in 0..hess.rows() {
        for j in 0..hess.cols() {
            let id = if i == j { l_hat } else { 0.0 };
            shifted.set(i, j, id - hess.get(i, j));
        }
    }
    let mu_hat = (l_hat - power_iteration(&shifted, 2)).clamp(0.0, l_hat);
    Curvature {
        mu_hat,
        l_hat,
        client_min_eig: info.client_min_eig,
        class_min_eig: info.class_min_eig,
    }
}

/// One federated run on a fixed-embedding problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub lr: f64,
    pub local_steps: usize,
    pub lambda: f64,
    pub rho: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRun {
    pub point: ConvergencePoint,
    /// `||zeta^t - zeta_hat||^2` for `t = 0..=rounds`.
    pub distances: Vec<f64>,
    /// `||zeta^t - zeta_true||^2`.
    pub true_distances: Vec<f64>,
    /// `||zeta_hat - zeta_true||^2`.
    pub statistical_error: f64,
    pub plateau: f64,
    /// Per-round contraction of `||zeta^t - zeta_hat||` fitted before the plateau.
    pub contraction: Option<f64>,
    /// `(1 - lr mu_hat)^E`.
    pub contraction_bound: f64,
    pub curvature: Curvature,
}

pub fn plateau(distances: &[f64]) -> f64 {
    let tail = ((distances.len() as f64 * PLATEAU_FRACTION).ceil() as usize).max(1);
    let tail = &distances[distances.len() - tail..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Least-squares `(slope, intercept)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Log-linear fit over the rounds before the distance falls to within a
/// factor 100 of the plateau.
fn fit_contraction(distances: &[f64], plateau: f64) -> Option<f64> {
    let floor = (100.0 * plateau).max(1e-24);
    let window: Vec<(f64, f64)> = distances
        .iter()
        .enumerate()
        .skip(1)
        .take_while(|(_, &d)| d > floor)
        .map(|(t, &d)| (t as f64, d.ln()))
        .collect();
    if window.len() < 3 {
        return None;
    }
    let (t, l): (Vec<f64>, Vec<f64>) = window.into_iter().unzip();
    Some((fit_line(&t, &l).0 / 2.0).exp())
}

fn zeta_of(state: &FederationState) -> Vec<f64> {
    let mut z = state.heads.client_head.as_ref().expect("client head").params.clone();
    z.extend_from_slice(&state.heads.target_heads[0].params);
    z
}

/// Runs federated training from zero heads and tracks the distance to the
/// pooled minimizer.
pub fn convergence_run(p: &TheoryProblem, point: ConvergencePoint, seed: u64) -> Result<ConvergenceRun> {
    let mle = centralized_mle(p, point.rho, point.lambda)?;
    let curv = curvature(p, &mle.zeta, point.lambda, point.rho);
    let (distances, true_distances) =
        federated_trajectory(p, point, seed, |z| (sq_dist(z, &mle.zeta), sq_dist(z, &p.truth)))?
            .into_iter()
            .unzip::<_, _, Vec<f64>, Vec<f64>>();
    let plat = plateau(&distances);
    Ok(ConvergenceRun {
        point,
        contraction: fit_contraction(&distances, plat),
        contraction_bound: (1.0 - point.lr * curv.mu_hat).powi(point.local_steps as i32),
        statistical_error: sq_dist(&mle.zeta, &p.truth),
        distances,
        true_distances,
        plateau: plat,
        curvature: curv,
    })
}

fn theory_net(p: &TheoryProblem) -> NetConfig {
    NetConfig::linear(p.g.cols(), p.g.cols(), p.h.cols(), true)
}

fn theory_config(point: &ConvergencePoint, seed: u64) -> FederationConfig {
    FederationConfig {
        rounds: point.rounds,
        local_steps: point.local_steps,
        lr: point.lr,
        lambda: point.lambda,
        weight_decay: point.rho,
        momentum: 0.0,
        schedule: LrSchedule::Constant,
        batch_size: None,
        shared_target: true,
        mode: Mode::Feddrm,
        seed,
    }
}

/// Full-batch federated training; `observe` maps `zeta^t` for every round
/// including round 0.
pub fn federated_trajectory<T, F>(
    p: &TheoryProblem,
    point: ConvergencePoint,
    seed: u64,
    mut observe: F,
) -> Result<Vec<T>>
where
    F: FnMut(&[f64]) -> T,
{
    let (out, _) = federated_train(p, point, seed, |z| observe(z))?;
    Ok(out)
}

fn federated_train<T, F>(
    p: &TheoryProblem,
    point: ConvergencePoint,
    seed: u64,
    mut observe: F,
) -> Result<(Vec<T>, FederationState)>
where
    F: FnMut(&[f64]) -> T,
{
    let net = theory_net(p);
    let cfg = theory_config(&point, seed);
    let blocks = p.client_blocks();
    let views: Vec<ClientView> = blocks
        .iter()
        .map(|(g, h, y)| ClientView {
            inputs: Inputs::Embedded { g, h },
            labels: y,
        })
        .collect();
    let mut state = FederationState::init(&net, p.clients, p.classes, &cfg)?;
    let mut out = Vec::with_capacity(point.rounds + 1);
    federation::run(&mut state, &views, &net, &cfg, |s| {
        out.push(observe(&zeta_of(s)));
        Ok(())
    })?;
    Ok((out, state))
}

pub fn convergence_experiment(p: &TheoryProblem, grid: &[ConvergencePoint], seed: u64) -> Result<Vec<ConvergenceRun>> {
    grid.par_iter().map(|&pt| convergence_run(p, pt, seed)).collect()
}

/// Rounds for the transient `(1 - lr mu)^(2 E t)` to fall by `e^-80`.
pub fn auto_rounds(lr: f64, local_steps: usize, mu: f64, cap: usize) -> usize {
    ((40.0 / (lr * mu * local_steps as f64)).ceil() as usize).clamp(1, cap)
}

#[derive(Debug, Clone, Serialize)]
pub struct StatisticalPoint {
    pub samples: usize,
    pub lambda: f64,
    pub rho: f64,
    /// Seed means of the squared errors.
    pub error: f64,
    pub client_error: f64,
    pub class_error: f64,
    pub error_sd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatisticalResult {
    pub points: Vec<StatisticalPoint>,
    /// Fitted slope of `ln error` against `ln N`.
    pub slope: f64,
    pub intercept: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Squared estimation errors of the pooled minimizer for each `(N, lambda)`,
/// averaged over `seeds` independent samples from one ground truth.
pub fn statistical_errors(
    template: &TheorySpec,
    sizes: &[usize],
    lambdas: &[f64],
    rho: f64,
    seeds: usize,
) -> Result<Vec<StatisticalPoint>> {
    let truth = theory_truth(template);
    let jobs: Vec<(usize, f64, u64)> = sizes
        .iter()
        .flat_map(|&n| {
            lambdas
                .iter()
                .flat_map(move |&l| (0..seeds as u64).map(move |s| (n, l, s)))
        })
        .collect();
    let errs: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(n, lambda, s)| {
            let spec = TheorySpec {
                samples: n,
                seed: rng::derive_seed(template.seed, &[n as u64, s]),
                ..template.clone()
            };
            let data = synth_theory_with_truth(&spec, truth.clone())?;
            let p = TheoryProblem::from_data(&data, spec.clients, spec.classes);
            let fit = centralized_mle(&p, rho, lambda)?;
            let split = p.client_len();
            Ok((
                sq_dist(&fit.zeta[..split], &p.truth[..split]),
                sq_dist(&fit.zeta[split..], &p.truth[split..]),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(jobs
        .chunks(seeds)
        .zip(errs.chunks(seeds))
        .map(|(job, e)| {
            let total: Vec<f64> = e.iter().map(|(c, t)| c + t).collect();
            let (error, error_sd) = mean_sd(&total);
            StatisticalPoint {
                samples: job[0].0,
                lambda: job[0].1,
                rho,
                error,
                client_error: e.iter().map(|x| x.0).sum::<f64>() / seeds as f64,
                class_error: e.iter().map(|x| x.1).sum::<f64>() / seeds as f64,
                error_sd,
            }
        })
        .collect())
}

pub fn statistical_experiment(
    template: &TheorySpec,
    sizes: &[usize],
    lambda: f64,
    rho: f64,
    seeds: usize,
) -> Result<StatisticalResult> {
    if sizes.len() < 2 || seeds == 0 {
        return Err(Error::config("need at least two sample sizes and one seed"));
    }
    let points = statistical_errors(template, sizes, &[lambda], rho, seeds)?;
    let x: Vec<f64> = points.iter().map(|p| (p.samples as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.error.ln()).collect();
    let (slope, intercept) = fit_line(&x, &y);
    Ok(StatisticalResult {
        points,
        slope,
        intercept,
    })
}

/// The trade-off is run on the raw inputs with a trainable linear embedding
/// narrower than the generator's, so both heads compete for it.
#[derive(Debug, Clone, Serialize)]
pub struct TradeoffConfig {
    pub spec: TheorySpec,
    pub test_samples: usize,
    pub lambdas: Vec<f64>,
    pub seeds: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub rho: f64,
    pub d_g: usize,
    pub d_h: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeoffRow {
    pub lambda: f64,
    /// Test accuracy of routing samples to their clients.
    pub client_acc: f64,
    pub client_acc_sd: f64,
    /// Test accuracy of the target head.
    pub class_acc: f64,
    pub class_acc_sd: f64,
    /// Mean training objective over the final rounds.
    pub plateau: f64,
}

fn accuracy(head: &LinearHead, z: &Matrix, y: &[usize]) -> f64 {
    let hits = (0..z.rows()).filter(|&r| head.predict(z.row(r)) == y[r]).count();
    hits as f64 / z.rows() as f64
}

fn tradeoff_point(
    cfg: &TradeoffConfig,
    truth: &crate::partition::TheoryTruth,
    lambda: f64,
    s: u64,
) -> Result<(f64, f64, f64)> {
    let spec = TheorySpec {
        seed: rng::derive_seed(cfg.spec.seed, &[s]),
        ..cfg.spec.clone()
    };
    let test_spec = TheorySpec {
        samples: cfg.test_samples,
        seed: rng::derive_seed(cfg.spec.seed, &[tag::TEST_SET, s]),
        ..cfg.spec.clone()
    };
    let train = synth_theory_with_truth(&spec, truth.clone())?;
    let test = synth_theory_with_truth(&test_spec, truth.clone())?;
    let blocks: Vec<(Matrix, Vec<usize>)> = train
        .client_rows(spec.clients)
        .iter()
        .map(|idx| (train.x.select_rows(idx), idx.iter().map(|&r| train.class[r]).collect()))
        .collect();
    if blocks.iter().any(|b| b.1.is_empty()) {
        return Err(Error::data("a client drew no samples"));
    }
    let views: Vec<ClientView> = blocks
        .iter()
        .map(|(x, y)| ClientView {
            inputs: Inputs::Raw(x),
            labels: y,
        })
        .collect();
    let net = NetConfig::linear(spec.input_dim, cfg.d_g, cfg.d_h, false);
    let fcfg = FederationConfig {
        rounds: cfg.rounds,
        local_steps: cfg.local_steps,
        lr: cfg.lr,
        lambda,
        weight_decay: cfg.rho,
        momentum: 0.0,
        schedule: LrSchedule::Constant,
        batch_size: None,
        shared_target: true,
        mode: Mode::Feddrm,
        seed: spec.seed,
    };
    let mut state = FederationState::init(&net, spec.clients, spec.classes, &fcfg)?;
    let mut losses = Vec::with_capacity(cfg.rounds + 1);
    federation::run(&mut state, &views, &net, &fcfg, |s| {
        losses.push(federation::global_loss(s, &views, &net, lambda, cfg.rho)?.total);
        Ok(())
    })?;
    let emb = embed_all(&test.x, &state.embed, &net)?;
    let client_head = state.heads.client_head.as_ref().expect("client head");
    Ok((
        accuracy(client_head, &emb.h, &test.client),
        accuracy(&state.heads.target_heads[0], &emb.g, &test.class),
        plateau(&losses),
    ))
}

/// Federated training at each `lambda` for `seeds` datasets drawn from one
/// ground truth, scored on a held-out sample.
pub fn lambda_tradeoff(cfg: &TradeoffConfig) -> Result<Vec<TradeoffRow>> {
    if cfg.seeds == 0 || cfg.lambdas.is_empty() {
        return Err(Error::config("trade-off needs at least one seed and one lambda"));
    }
    let truth = theory_truth(&cfg.spec);
    let jobs: Vec<(f64, u64)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| (0..cfg.seeds as u64).map(move |s| (l, s)))
        .collect();
    let results: Vec<(f64, f64, f64)> = jobs
        .par_iter()
        .map(|&(lambda, s)| tradeoff_point(cfg, &truth, lambda, s))
        .collect::<Result<_>>()?;
    Ok(cfg
        .lambdas
        .iter()
        .zip(results.chunks(cfg.seeds))
        .map(|(&lambda, r)| {
            let (client_acc, client_acc_sd) = mean_sd(&r.iter().map(|x| x.0).collect::<Vec<_>>());
            let (class_acc, class_acc_sd) = mean_sd(&r.iter().map(|x| x.1).collect::<Vec<_>>());
            TradeoffRow {
                lambda,
                client_acc,
                client_acc_sd,
                class_acc,
                class_acc_sd,
                plateau: r.iter().map(|x| x.2).sum::<f64>() / r.len() as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub curvature: Curvature,
    pub convergence: Vec<ConvergenceRun>,
    pub zero_heterogeneity: Option<ConvergenceRun>,
    pub statistical: Option<StatisticalResult>,
    pub lambda_errors: Vec<StatisticalPoint>,
    pub lambda_sweep: Vec<TradeoffRow>,
}

/// Default fixed-embedding benchmark.
pub fn benchmark_spec(samples: usize, seed: u64) -> TheorySpec {
    TheorySpec {
        clients: 3,
        classes: 3,
        input_dim: 5,
        d_g: 4,
        d_h: 3,
        samples,
        seed,
        truth_seed: seed,
    }
}

/// Trade-off benchmark: a wider generator than the trained embedding.
pub fn tradeoff_spec(samples: usize, seed: u64) -> TheorySpec {
    TheorySpec {
        clients: 3,
        classes: 3,
        input_dim: 6,
        d_g: 4,
        d_h: 2,
        samples,
        seed,
        truth_seed: seed,
    }
}
