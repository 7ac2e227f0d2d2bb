//! Primal empirical likelihood for the density ratio model.
//!
//! The baseline measure is an atomic distribution with weight `p_r` on every
//! pooled sample `r`. Client `l` is tied to it through the tilt
//! `t_l(x) = exp(gamma_l + xi_l^T h(x))`, and the atoms must satisfy
//!
//! ```text
//! sum_r p_r = 1,    sum_r p_r t_l(x_r) = 1   for every client l.
//! ```
//!
//! Maximizing `sum_r log p_r` under these constraints gives
//! `p_r = 1 / (N (1 + sum_l rho_l (t_l(x_r) - 1)))`, where the multipliers
//! `rho` maximize the concave function `sum_r log(1 + rho^T (t_r - 1))`.
//! This module solves that system, evaluates the profile log-likelihood in its
//! primal (multiplier) form and its two-cross-entropy dual form, and checks
//! numerically that the two agree at the maximizer with `rho = n / N`.
//!
//! With the dual intercepts `gamma_dual_l = gamma_l + log(n_l) + c`, the two
//! forms satisfy `primal = dual - sum_l n_l log(n_l)` at any point where
//! `rho = n / N`; see [`duality_constant`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::linalg::{dot, max_abs, solve_spd, sq_norm, Matrix};
use crate::loss::{log_sum_exp, LinearHead};
use crate::optim::{bfgs, central_gradient, BfgsOptions};
use crate::rng;
use crate::{Error, Result};

/// Iteration cap of the multiplier solver.
pub const MAX_SOLVER_ITERATIONS: usize = 500;
/// Target infinity norm of the multiplier equations.
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Smallest admissible `1 + rho^T (t - 1)`.
pub const MIN_DENOMINATOR: f64 = 1e-12;

/// Tilt values `t[r, l]` for every pooled sample `r` and client `l`.
#[derive(Debug, Clone)]
pub struct TiltMatrix {
    values: Matrix,
    client_of: Vec<usize>,
    counts: Vec<usize>,
}

impl TiltMatrix {
    pub fn new(values: Matrix, client_of: Vec<usize>) -> Result<Self> {
        if values.rows() != client_of.len() || values.rows() == 0 {
            return Err(Error::contract("tilt rows must match a non-empty sample map"));
        }
        let m = values.cols();
        if values.as_slice().iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::Domain("tilts must be positive and finite".into()));
        }
        let mut counts = vec![0; m];
        for &c in &client_of {
            if c >= m {
                return Err(Error::contract(format!("client id {c} outside [0, {m})")));
            }
            counts[c] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::contract("every client needs at least one sample"));
        }
        Ok(Self {
            values,
            client_of,
            counts,
        })
    }

    /// `t[r, l] = exp(gamma_l + xi_l^T h_r)` from a client head.
    pub fn from_head(h: &Matrix, client_of: Vec<usize>, head: &LinearHead) -> Result<Self> {
        let mut values = Matrix::zeros(h.rows(), head.classes);
        for r in 0..h.rows() {
            for (l, z) in head.logits(h.row(r)).into_iter().enumerate() {
                values.set(r, l, z.exp());
            }
        }
        Self::new(values, client_of)
    }

    pub fn samples(&self) -> usize {
        self.values.rows()
    }

    pub fn clients(&self) -> usize {
        self.values.cols()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn client_of(&self) -> &[usize] {
        &self.client_of
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Columns that are identically one carry no constraint information.
    fn flat_columns(&self) -> Vec<bool> {
        (0..self.clients())
            .map(|l| (0..self.samples()).all(|r| self.values.get(r, l) == 1.0))
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.flat_columns().iter().all(|&f| f)
    }

    fn proportions(&self) -> Vec<f64> {
        let n = self.samples() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    fn denominators(&self, rho: &[f64]) -> Vec<f64> {
        (0..self.samples())
            .map(|r| {
                1.0 + self
                    .values
                    .row(r)
                    .iter()
                    .zip(rho)
                    .map(|(t, p)| p * (t - 1.0))
                    .sum::<f64>()
            })
            .collect()
    }

    /// Left-hand sides of the multiplier equations, one per client.
    pub fn equations(&self, rho: &[f64]) -> Vec<f64> {
        let den = self.denominators(rho);
        (0..self.clients())
            .map(|l| {
                (0..self.samples())
                    .map(|r| (self.values.get(r, l) - 1.0) / den[r])
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplierSolution {
    pub rho: Vec<f64>,
    /// Set when every tilt is identically one; `rho` is then the convention `n / N`.
    pub degenerate: bool,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves the multiplier system by damped Newton on the concave objective
/// `sum_r log(1 + rho^T (t_r - 1))`, falling back to coordinate-wise bisection
/// when the Newton system is singular. Flat columns keep `rho_l = n_l / N`.
pub fn solve_multipliers(t: &TiltMatrix) -> Result<MultiplierSolution> {
    let mut rho = t.proportions();
    let flat = t.flat_columns();
    if flat.iter().all(|&f| f) {
        return Ok(MultiplierSolution {
            rho,
            degenerate: true,
            residual: 0.0,
            iterations: 0,
        });
    }
    let active: Vec<usize> = (0..t.clients()).filter(|&l| !flat[l]).collect();
    // The equations also vanish as rho runs off to infinity on infeasible
    // systems, so the implied normalization sum_r 1/D_r = N is checked too.
    let n = t.samples() as f64;
    let residual_of = |rho: &[f64]| {
        let eq = t.equations(rho);
        let norm: f64 = t.denominators(rho).iter().map(|d| 1.0 / d).sum::<f64>() - n;
        active.iter().map(|&l| eq[l].abs()).fold(norm.abs(), f64::max)
    };
    let objective = |rho: &[f64]| -> Option<f64> {
        let den = t.denominators(rho);
        if den.iter().any(|&d| d <= MIN_DENOMINATOR) {
            return None;
        }
        Some(den.iter().map(|d| d.ln()).sum())
    };

    let mut residual = residual_of(&rho);
    let mut iterations = 0;
    while residual >= RESIDUAL_TOL {
        if iterations >= MAX_SOLVER_ITERATIONS {
            return Err(Error::Solver {
                message: "multiplier system did not converge".into(),
                iterations,
                residual,
            });
        }
        iterations += 1;
        let current = objective(&rho).ok_or_else(|| Error::Domain("infeasible multipliers".into()))?;
        let moved = newton_step(t, &active, &mut rho, current, &objective) || bisection_sweep(t, &active, &mut rho);
        let next = residual_of(&rho);
        if rho.iter().any(|r| !r.is_finite() || r.abs() > 1e12) {
            return Err(Error::Solver {
                message: "multipliers diverged; the tilt constraints are infeasible".into(),
                iterations,
                residual: next,
            });
        }
        if !moved && next >= residual {
            return Err(Error::Solver {
                message: "no progress on the multiplier system".into(),
                iterations,
                residual: next,
            });
        }
        residual = next;
    }
    Ok(MultiplierSolution {
        rho,
        degenerate: false,
        residual,
        iterations,
    })
}

fn newton_step(
    t: &TiltMatrix,
    active: &[usize],
    rho: &mut [f64],
    current: f64,
    objective: &dyn Fn(&[f64]) -> Option<f64>,
) -> bool {
    let a = active.len();
    let den = t.denominators(rho);
    let mut grad = vec![0.0; a];
    let mut neg_hess = Matrix::zeros(a, a);
    for (r, d) in den.iter().enumerate() {
        let u: Vec<f64> = active.iter().map(|&l| t.values.get(r, l) - 1.0).collect();
        for i in 0..a {
            grad[i] += u[i] / d;
            for j in 0..a {
                let v = neg_hess.get(i, j) + u[i] * u[j] / (d * d);
                neg_hess.set(i, j, v);
            }
        }
    }
    let Some(delta) = solve_spd(&neg_hess, &grad) else {
        return false;
    };
    if delta.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let mut step = 1.0;
    for _ in 0..60 {
        let mut trial = rho.to_vec();
        for (k, &l) in active.iter().enumerate() {
            trial[l] += step * delta[k];
        }
        if let Some(v) = objective(&trial) {
            if v >= current - 1e-12 * current.abs().max(1.0) {
                rho.copy_from_slice(&trial);
                return true;
            }
        }
        step *= 0.5;
    }
    false
}

/// One Gauss-Seidel sweep solving each active equation for its own multiplier.
fn bisection_sweep(t: &TiltMatrix, active: &[usize], rho: &mut [f64]) -> bool {
    let mut moved = false;
    for &l in active {
        let den = t.denominators(rho);
        let u: Vec<f64> = (0..t.samples()).map(|r| t.values.get(r, l) - 1.0).collect();
        // Feasible interval for the shift s = rho_l' - rho_l keeps every denominator positive.
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (d, ur) in den.iter().zip(&u) {
            if *ur > 0.0 {
                lo = lo.max((MIN_DENOMINATOR - d) / ur);
            } else if *ur < 0.0 {
                hi = hi.min((MIN_DENOMINATOR - d) / ur);
            }
        }
        // The equation is decreasing in s; widen infinite ends geometrically.
        let phi = |s: f64| -> f64 { den.iter().zip(&u).map(|(d, ur)| ur / (d + s * ur)).sum() };
        if !lo.is_finite() {
            lo = -1.0;
            while phi(lo) < 0.0 && lo > -1e12 {
                lo *= 2.0;
            }
        }
        if !hi.is_finite() {
            hi = 1.0;
            while phi(hi) > 0.0 && hi < 1e12 {
                hi *= 2.0;
            }
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if phi(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        let s = 0.5 * (a + b);
        if s.is_finite() && s != 0.0 {
            rho[l] += s;
            moved = true;
        }
    }
    moved
}

/// Atom weights `p_r = 1 / (N (1 + sum_l rho_l (t_rl - 1)))`.
pub fn atom_weights(t: &TiltMatrix, rho: &[f64]) -> Result<Vec<f64>> {
    if rho.len() != t.clients() {
        return Err(Error::contract("multiplier count mismatch"));
    }
    let n = t.samples() as f64;
    t.denominators(rho)
        .into_iter()
        .enumerate()
        .map(|(r, d)| {
            if d > 0.0 {
                Ok(1.0 / (n * d))
            } else {
                Err(Error::Domain(format!("non-positive denominator {d} at sample {r}")))
            }
        })
        .collect()
}

/// Deviations from the probability constraints: `|sum p - 1|` and
/// `max_l |sum_r p_r t_rl - 1|`.
pub fn constraint_residuals(t: &TiltMatrix, p: &[f64]) -> (f64, f64) {
    let total: f64 = p.iter().sum();
    let tilt = (0..t.clients())
        .map(|l| {
            let s: f64 = p.iter().enumerate().map(|(r, pr)| pr * t.values.get(r, l)).sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f64::max);
    ((total - 1.0).abs(), tilt)
}

#[derive(Debug, Clone, Serialize)]
pub struct ElSolution {
    pub multipliers: Vec<f64>,
    pub weights: Vec<f64>,
    /// Client part of the primal profile log-likelihood.
    pub primal_value: f64,
    pub degenerate: bool,
    pub residual: f64,
}

/// Pooled samples with their client of origin, client embeddings `h` and
/// target embeddings `g` with labels.
#[derive(Debug, Clone)]
pub struct ElData {
    pub clients: usize,
    pub client_of: Vec<usize>,
    pub h: Matrix,
    pub g: Matrix,
    pub labels: Vec<usize>,
}

impl ElData {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.clients];
        for &i in &self.client_of {
            c[i] += 1;
        }
        c
    }

    pub fn samples(&self) -> usize {
        self.client_of.len()
    }
}

/// `sum_r log P(y_r | g_r)` under the target head.
pub fn target_loglik(data: &ElData, head: &LinearHead) -> f64 {
    (0..data.samples())
        .map(|r| {
            let z = head.logits(data.g.row(r));
            z[data.labels[r]] - log_sum_exp(&z)
        })
        .sum()
}

/// Primal profile log-EL: target log-likelihood plus
/// `sum_r {gamma_c(r) + xi_c(r)^T h_r + log p_r}` with solved multipliers.
pub fn profile_logel_primal(
    data: &ElData,
    client_head: &LinearHead,
    target_head: &LinearHead,
) -> Result<(f64, ElSolution)> {
    let sol = solve_el(data, client_head)?;
    Ok((target_loglik(data, target_head) + sol.primal_value, sol))
}

/// Solves the EL problem for the client part only.
pub fn solve_el(data: &ElData, client_head: &LinearHead) -> Result<ElSolution> {
    let t = TiltMatrix::from_head(&data.h, data.client_of.clone(), client_head)?;
    let ms = solve_multipliers(&t)?;
    let weights = atom_weights(&t, &ms.rho)?;
    let value = (0..data.samples())
        .map(|r| {
            let own = data.client_of[r];
            client_head.logits(data.h.row(r))[own] + weights[r].ln()
        })
        .sum();
    Ok(ElSolution {
        multipliers: ms.rho,
        weights,
        primal_value: value,
        degenerate: ms.degenerate,
        residual: ms.residual,
    })
}

/// Dual profile log-EL: the sum over samples of the two log-softmax terms,
/// i.e. minus the sum-reduced two-term loss at `lambda = 1/2` scaled by 2.
pub fn profile_logel_dual(data: &ElData, client_head: &LinearHead, target_head: &LinearHead) -> f64 {
    target_loglik(data, target_head) + dual_client_part(data, client_head)
}

fn dual_client_part(data: &ElData, client_head: &LinearHead) -> f64 {
    (0..data.samples())
        .map(|r| {
            let z = client_head.logits(data.h.row(r));
            z[data.client_of[r]] - log_sum_exp(&z)
        })
        .sum()
}

/// `primal - dual` at any point where `rho = n / N`: `-sum_l n_l log(n_l)`.
pub fn duality_constant(counts: &[usize]) -> f64 {
    -counts
        .iter()
        .map(|&n| {
            let n = n as f64;
            n * n.ln()
        })
        .sum::<f64>()
}

/// Primal intercepts matching a dual head whose intercepts are stationary
/// for its slopes: `gamma_l = gamma_dual_l - log(n_l) + c`, with `c` fixed by
/// `sum_r p_r = 1` when `rho = n / N`.
pub fn primal_intercepts(dual: &LinearHead, h: &Matrix, counts: &[usize]) -> Vec<f64> {
    let c = (0..h.rows())
        .map(|r| (-log_sum_exp(&dual.logits(h.row(r)))).exp())
        .sum::<f64>()
        .ln();
    counts
        .iter()
        .enumerate()
        .map(|(l, &n)| dual.intercept(l) - (n as f64).ln() + c)
        .collect()
}

/// Random pooled instance: client `l` draws `h ~ N(mu_l, I)` with its own
/// random centre, sizes uniform in `[2, max_n]`.
pub fn random_instance(clients: usize, max_n: usize, d_h: usize, seed: u64) -> ElData {
    let mut rng = rng::stream(seed, &[rng::tag::EL_INSTANCE]);
    let mut client_of = Vec::new();
    let mut rows = Vec::new();
    for l in 0..clients {
        let centre: Vec<f64> = (0..d_h)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.8 * z
            })
            .collect();
        let n = rng.random_range(2..=max_n.max(2));
        for _ in 0..n {
            client_of.push(l);
            rows.push(
                centre
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + z
                    })
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let h = Matrix::from_rows(&rows).expect("rectangular rows");
    let labels = (0..client_of.len()).map(|_| rng.random_range(0..2)).collect();
    ElData {
        clients,
        client_of,
        g: h.clone(),
        h,
        labels,
    }
}

/// Outcome of maximizing the primal and dual forms independently.
#[derive(Debug, Clone, Serialize)]
pub struct DualityCheck {
    pub counts: Vec<usize>,
    pub primal_max: f64,
    pub dual_max: f64,
    pub constant: f64,
    /// `primal_max - dual_max - constant`.
    pub gap: f64,
    pub rho_at_max: Vec<f64>,
    /// `max_l |rho_l - n_l / N|` at the primal maximizer.
    pub rho_deviation: f64,
    /// `max |xi_primal - xi_dual|` over all slope entries.
    pub xi_deviation: f64,
    pub sum_residual: f64,
    pub tilt_residual: f64,
    pub primal_grad_norm: f64,
    pub dual_grad_norm: f64,
    /// Client head at the primal maximizer.
    pub primal_head: LinearHead,
}

/// Ridge on the client slopes so both maximizers exist even for separable
/// client labels. It enters both objectives identically.
pub const XI_RIDGE: f64 = 0.1;

fn head_from_vec(m: usize, d: usize, v: &[f64]) -> LinearHead {
    LinearHead {
        classes: m,
        dim: d,
        params: v.to_vec(),
    }
}

fn slope_penalty(head: &LinearHead) -> f64 {
    (0..head.classes).map(|k| sq_norm(head.slope(k))).sum::<f64>() * XI_RIDGE / 2.0
}

/// Maximizes the primal over `(gamma, xi)` with finite-difference BFGS (each
/// evaluation re-solves the multipliers) and the dual over `(gamma_dual, xi)`
/// with analytic-gradient BFGS, then compares values and maximizers.
pub fn duality_check(data: &ElData, target_head: &LinearHead) -> Result<DualityCheck> {
    let m = data.clients;
    let d = data.h.cols();
    let dim = m * (d + 1);
    let counts = data.counts();
    let target = target_loglik(data, target_head);

    let neg_dual = |v: &[f64]| -> Option<(f64, Vec<f64>)> {
        let head = head_from_vec(m, d, v);
        let mut grad = vec![0.0; dim];
        let mut value = 0.0;
        for r in 0..data.samples() {
            let h = data.h.row(r);
            let z = head.logits(h);
            let lse = log_sum_exp(&z);
            let own = data.client_of[r];
            value -= z[own] - lse;
            for l in 0..m {
                let coef = (z[l] - lse).exp() - if l == own { 1.0 } else { 0.0 };
                let row = &mut grad[l * (d + 1)..(l + 1) * (d + 1)];
                row[0] += coef;
                for (gk, hk) in row[1..].iter_mut().zip(h) {
                    *gk += coef * hk;
                }
            }
        }
        for l in 0..m {
            for k in 0..d {
                grad[l * (d + 1) + 1 + k] += XI_RIDGE * v[l * (d + 1) + 1 + k];
            }
        }
        value += slope_penalty(&head);
        Some((value, grad))
    };
    // The primal is only defined where the tilt constraints are feasible, and
    // the all-zero head sits on that set's boundary. Start from the profiled
    // intercepts of a fixed small slope instead.
    let mut start: Vec<f64> = (0..dim)
        .map(|i| {
            if i % (d + 1) == 0 {
                0.0
            } else {
                0.1 * ((i as f64) * 1.7).sin()
            }
        })
        .collect();
    let fixed = start.clone();
    let profiled = bfgs(
        &vec![0.0; m],
        |g: &[f64]| {
            let mut v = fixed.clone();
            for l in 0..m {
                v[l * (d + 1)] = g[l];
            }
            let (f, grad) = neg_dual(&v)?;
            Some((f, (0..m).map(|l| grad[l * (d + 1)]).collect()))
        },
        BfgsOptions {
            max_iter: 1000,
            grad_tol: 1e-12,
        },
    )
    .expect("finite dual at the start");
    for l in 0..m {
        start[l * (d + 1)] = profiled.x[l];
    }
    let gammas = primal_intercepts(&head_from_vec(m, d, &start), &data.h, &counts);
    for l in 0..m {
        start[l * (d + 1)] = gammas[l];
    }

    let mut neg_primal = |v: &[f64]| -> Option<f64> {
        let head = head_from_vec(m, d, v);
        let sol = solve_el(data, &head).ok()?;
        Some(-(sol.primal_value) + slope_penalty(&head))
    };
    let opts = BfgsOptions {
        max_iter: 5000,
        grad_tol: 1e-9,
    };
    let primal_min = bfgs(
        &start,
        |v| {
            let f = neg_primal(v)?;
            let g = central_gradient(&mut neg_primal, v, 1e-6)?;
            Some((f, g))
        },
        opts,
    )
    .ok_or_else(|| Error::Solver {
        message: "primal maximization failed at the start point".into(),
        iterations: 0,
        residual: f64::NAN,
    })?;

    let dual_min = bfgs(&vec![0.0; dim], &neg_dual, opts).ok_or_else(|| Error::Solver {
        message: "dual maximization failed at the start point".into(),
        iterations: 0,
        residual: f64::NAN,
    })?;

    let primal_head = head_from_vec(m, d, &primal_min.x);
    let dual_head = head_from_vec(m, d, &dual_min.x);
    let sol = solve_el(data, &primal_head)?;
    let t = TiltMatrix::from_head(&data.h, data.client_of.clone(), &primal_head)?;
    let (sum_residual, tilt_residual) = constraint_residuals(&t, &sol.weights);
    let n = data.samples() as f64;
    let rho_deviation = sol
        .multipliers
        .iter()
        .zip(&counts)
        .map(|(r, &c)| (r - c as f64 / n).abs())
        .fold(0.0, f64::max);
    let xi_deviation = (0..m)
        .flat_map(|l| {
            primal_head
                .slope(l)
                .iter()
                .zip(dual_head.slope(l))
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);

    // Report the unpenalized log-EL values at the respective maximizers.
    let primal_max = target + sol.primal_value;
    let dual_max = target + dual_client_part(data, &dual_head);
    let constant = duality_constant(&counts);
    Ok(DualityCheck {
        counts,
        primal_max,
        dual_max,
        constant,
        gap: primal_max - dual_max - constant,
        rho_at_max: sol.multipliers,
        rho_deviation,
        xi_deviation,
        sum_residual,
        tilt_residual,
        primal_grad_norm: primal_min.grad_inf_norm,
        dual_grad_norm: dual_min.grad_inf_norm,
        primal_head,
    })
}

/// Two-sample log density ratio families with a closed-form linear tilt.
#[derive(Debug, Clone, Copy)]
pub enum TiltFamily {
    /// `log N(x; mu1, s1^2) / N(x; mu2, s2^2)` with basis `(1, x, x^2)`.
    Normal {
        mu1: f64,
        sigma1: f64,
        mu2: f64,
        sigma2: f64,
    },
    /// Shape/rate gamma densities with basis `(1, x, log x)`.
    Gamma {
        shape1: f64,
        rate1: f64,
        shape2: f64,
        rate2: f64,
    },
}

/// Coefficients `(theta_0, theta_1, theta_2)` of the log density ratio.
pub fn tilt_basis_check(family: TiltFamily) -> Result<[f64; 3]> {
    match family {
        TiltFamily::Normal {
            mu1,
            sigma1,
            mu2,
            sigma2,
        } => {
            if !(sigma1 > 0.0 && sigma2 > 0.0) || !mu1.is_finite() || !mu2.is_finite() {
                return Err(Error::Domain("normal tilt needs sigma > 0 and finite means".into()));
            }
            let (v1, v2) = (sigma1 * sigma1, sigma2 * sigma2);
            Ok([
                (sigma2 / sigma1).ln() - (mu1 * mu1 / v1 - mu2 * mu2 / v2) / 2.0,
                mu1 / v1 - mu2 / v2,
                (1.0 / v2 - 1.0 / v1) / 2.0,
            ])
        }
        TiltFamily::Gamma {
            shape1,
            rate1,
            shape2,
            rate2,
        } => {
            if !(shape1 > 0.0 && rate1 > 0.0 && shape2 > 0.0 && rate2 > 0.0) {
                return Err(Error::Domain("gamma tilt needs positive shape and rate".into()));
            }
            use statrs::function::gamma::ln_gamma;
            Ok([
                ln_gamma(shape2) - ln_gamma(shape1) + shape1 * rate1.ln() - shape2 * rate2.ln(),
                rate2 - rate1,
                shape1 - shape2,
            ])
        }
    }
}

/// Evaluates the tilt `theta_0 + theta_1 x + theta_2 b(x)` for the family's basis.
pub fn tilt_value(family: TiltFamily, theta: &[f64; 3], x: f64) -> f64 {
    let third = match family {
        TiltFamily::Normal { .. } => x * x,
        TiltFamily::Gamma { .. } => x.ln(),
    };
    theta[0] + theta[1] * x + theta[2] * third
}

/// Infinity norm of `rho - n / N`.
pub fn multiplier_identity_gap(rho: &[f64], counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let target: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    max_abs(&rho.iter().zip(&target).map(|(a, b)| a - b).collect::<Vec<_>>())
}

/// Dot helper re-exported for oracle code.
pub fn tilt_exponent(head: &LinearHead, l: usize, h: &[f64]) -> f64 {
    head.intercept(l) + dot(head.slope(l), h)
}
