//! Softmax heads and the reweighted two-term loss.
//!
//! For a batch held by client `i` the per-client objective is
//!
//! ```text
//! (1 - lambda) * CE(client_probs(h(x)), i) + lambda * CE(target_probs(g(x)), y)
//!     + (rho / 2) * ||zeta||^2
//! ```
//!
//! with both cross-entropies averaged over the batch. `zeta` covers the
//! embedding (unless it is frozen), the client head and the client's target head.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::net::{self, EmbeddingParams, NetConfig};
use crate::{Error, Result};

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `log(sum(exp(logits)))`, stable.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Multinomial-logistic head. Row `k` of `params` is `[intercept_k, slope_k...]`,
/// so the flat layout is class-major with the intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub classes: usize,
    pub dim: usize,
    pub params: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            params: vec![0.0; classes * (dim + 1)],
        }
    }

    /// Builds a head from separate intercepts and a `classes x dim` slope matrix.
    pub fn from_parts(intercepts: &[f64], slopes: &Matrix) -> Result<Self> {
        if intercepts.len() != slopes.rows() {
            return Err(Error::contract("intercept/slope row mismatch"));
        }
        let dim = slopes.cols();
        let mut params = Vec::with_capacity(intercepts.len() * (dim + 1));
        for (k, &a) in intercepts.iter().enumerate() {
            params.push(a);
            params.extend_from_slice(slopes.row(k));
        }
        Ok(Self {
            classes: intercepts.len(),
            dim,
            params,
        })
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        &self.params[k * (self.dim + 1)..(k + 1) * (self.dim + 1)]
    }

    pub fn intercept(&self, k: usize) -> f64 {
        self.row(k)[0]
    }

    pub fn slope(&self, k: usize) -> &[f64] {
        &self.row(k)[1..]
    }

    pub fn intercept_mut(&mut self, k: usize) -> &mut f64 {
        let d = self.dim + 1;
        &mut self.params[k * d]
    }

    pub fn slope_mut(&mut self, k: usize) -> &mut [f64] {
        let d = self.dim + 1;
        &mut self.params[k * d + 1..(k + 1) * d]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let r = self.row(k);
                r[0] + dot(&r[1..], x)
            })
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::linalg::argmax(&self.logits(x))
    }

    /// Adds `coef * outer(d_logits, [1, x])` to this head, treated as a gradient buffer.
    fn accumulate(&mut self, d_logits: &[f64], x: &[f64]) {
        let d = self.dim + 1;
        for (k, &dl) in d_logits.iter().enumerate() {
            let row = &mut self.params[k * d..(k + 1) * d];
            row[0] += dl;
            for (w, xi) in row[1..].iter_mut().zip(x) {
                *w += dl * xi;
            }
        }
    }

    /// `W^T d_logits`, the gradient with respect to the head input.
    fn input_grad(&self, d_logits: &[f64], out: &mut [f64]) {
        for (k, &dl) in d_logits.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.slope(k)) {
                *o += w * dl;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        crate::linalg::sq_norm(&self.params)
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericInput(format!("{what} contains NaN or inf")))
    }
}

/// Class probabilities `softmax(alpha_k + beta_k^T g)`.
pub fn target_probs(g: &[f64], head: &LinearHead) -> Result<Vec<f64>> {
    check_finite(g, "embedding")?;
    check_finite(&head.params, "target head")?;
    Ok(head.probs(g))
}

/// Client probabilities `softmax(gamma_l + xi_l^T h)`.
pub fn client_probs(h: &[f64], head: &LinearHead) -> Result<Vec<f64>> {
    check_finite(h, "client embedding")?;
    check_finite(&head.params, "client head")?;
    Ok(head.probs(h))
}

/// Global head storage: per-client (or one shared) target head plus the
/// shared client head. `client_head` is `None` in the plain-FedAvg reference mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBank {
    pub target_heads: Vec<LinearHead>,
    pub client_head: Option<LinearHead>,
    pub shared_target: bool,
}

impl HeadBank {
    pub fn zeros(
        clients: usize,
        classes: usize,
        d_g: usize,
        d_h: usize,
        shared_target: bool,
        with_client_head: bool,
    ) -> Self {
        let n = if shared_target { 1 } else { clients };
        Self {
            target_heads: vec![LinearHead::zeros(classes, d_g); n],
            client_head: with_client_head.then(|| LinearHead::zeros(clients, d_h)),
            shared_target,
        }
    }

    pub fn target_for(&self, client: usize) -> &LinearHead {
        if self.shared_target {
            &self.target_heads[0]
        } else {
            &self.target_heads[client]
        }
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        let expected = if self.shared_target { 1 } else { clients };
        if self.target_heads.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} target heads, found {}",
                self.target_heads.len()
            )));
        }
        let finite = self
            .target_heads
            .iter()
            .chain(&self.client_head)
            .all(|h| h.params.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NumericInput("head parameters not finite".into()));
        }
        Ok(())
    }
}

/// Everything one client trains locally: `(theta, tau, gamma, xi, alpha_i, beta_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientParams {
    pub embed: EmbeddingParams,
    pub client_head: Option<LinearHead>,
    pub target_head: LinearHead,
}

impl ClientParams {
    /// Flat layout: embedding, client head (if any), target head.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.embed.flatten();
        if let Some(c) = &self.client_head {
            out.extend_from_slice(&c.params);
        }
        out.extend_from_slice(&self.target_head.params);
        out
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params()
            + self.client_head.as_ref().map_or(0, |c| c.params.len())
            + self.target_head.params.len()
    }

    pub fn read_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract("flat parameter length mismatch"));
        }
        let mut off = self.embed.read_flat(flat)?;
        if let Some(c) = &mut self.client_head {
            let n = c.params.len();
            c.params.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.target_head.params.copy_from_slice(&flat[off..]);
        Ok(())
    }

    pub fn zeros_like(&self, net: &NetConfig) -> Self {
        Self {
            embed: EmbeddingParams::zeros(net),
            client_head: self.client_head.as_ref().map(|c| LinearHead::zeros(c.classes, c.dim)),
            target_head: LinearHead::zeros(self.target_head.classes, self.target_head.dim),
        }
    }

    /// Squared norm of the parameters subject to weight decay.
    pub fn decayed_sq_norm(&self, net: &NetConfig) -> f64 {
        let emb = if net.fixed_embedding { 0.0 } else { self.embed.sq_norm() };
        emb + self.client_head.as_ref().map_or(0.0, LinearHead::sq_norm) + self.target_head.sq_norm()
    }
}

/// Where a batch's embeddings come from.
#[derive(Debug, Clone, Copy)]
pub enum Inputs<'a> {
    /// Raw features, pushed through the network.
    Raw(&'a Matrix),
    /// Precomputed `g` and `h` rows; only valid with a fixed embedding.
    Embedded { g: &'a Matrix, h: &'a Matrix },
}

impl Inputs<'_> {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Raw(x) => x.rows(),
            Inputs::Embedded { g, .. } => g.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held by one client. `rows` selects a minibatch; `None` is the full set.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: Inputs<'a>,
    pub labels: &'a [usize],
    pub rows: Option<&'a [usize]>,
    pub client: usize,
}

impl<'a> Batch<'a> {
    pub fn full(inputs: Inputs<'a>, labels: &'a [usize], client: usize) -> Self {
        Self {
            inputs,
            labels,
            rows: None,
            client,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.map_or(self.labels.len(), <[usize]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn indices(&self) -> Box<dyn Iterator<Item = usize> + '_> {
        match self.rows {
            Some(r) => Box::new(r.iter().copied()),
            None => Box::new(0..self.labels.len()),
        }
    }
}

/// Loss parts. `l2` is the squared norm `||zeta||^2` of the decayed parameters and
/// `total = (1 - lambda) * client_ce + lambda * target_ce + (rho / 2) * l2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub client_ce: f64,
    pub target_ce: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(client_ce: f64, target_ce: f64, l2: f64, lambda: f64, rho: f64) -> Self {
        Self {
            client_ce,
            target_ce,
            l2,
            total: (1.0 - lambda) * client_ce + lambda * target_ce + (rho / 2.0) * l2,
        }
    }
}

/// Cross-entropy `lse(logits) - logits[label]` and its logit gradient `p - e_label`.
fn ce_with_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    let ce = lse - logits[label];
    p[label] -= 1.0;
    (ce, p)
}

fn validate_batch(batch: &Batch, params: &ClientParams, net: &NetConfig, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::config(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    if batch.labels.len() != batch.inputs.len() {
        return Err(Error::contract("labels and inputs differ in length"));
    }
    let k = params.target_head.classes;
    if let Some(bad) = batch.indices().find(|&r| batch.labels[r] >= k) {
        return Err(Error::data(format!(
            "label {} at row {bad} outside [0, {k})",
            batch.labels[bad]
        )));
    }
    if let Some(c) = &params.client_head {
        if batch.client >= c.classes {
            return Err(Error::data(format!(
                "client id {} outside [0, {})",
                batch.client, c.classes
            )));
        }
    }
    if let Inputs::Embedded { g, h } = batch.inputs {
        if !net.fixed_embedding {
            return Err(Error::contract("precomputed embeddings require a fixed embedding"));
        }
        if g.cols() != net.d_g() || h.cols() != net.d_h() || g.rows() != h.rows() {
            return Err(Error::contract("precomputed embedding shape mismatch"));
        }
    }
    Ok(())
}

/// Loss and exact gradient of the reweighted objective for one client batch.
pub fn reweighted_loss(
    batch: &Batch,
    params: &ClientParams,
    net: &NetConfig,
    lambda: f64,
    rho: f64,
) -> Result<(LossBreakdown, ClientParams)> {
    validate_batch(batch, params, net, lambda)?;
    let n = batch.len() as f64;
    let target_coef = lambda / n;
    let client_coef = (1.0 - lambda) / n;
    let mut grad = params.zeros_like(net);
    let mut client_ce = 0.0;
    let mut target_ce = 0.0;

    let d_g = net.d_g();
    let d_h = net.d_h();
    for r in batch.indices() {
        let (g, h, cache) = match batch.inputs {
            Inputs::Raw(x) => {
                let f = net::forward(x.row(r), &params.embed, net)?;
                (f.g, f.h, Some(f.cache))
            }
            Inputs::Embedded { g, h } => (g.row(r).to_vec(), h.row(r).to_vec(), None),
        };

        let (ce_t, mut d_t) = ce_with_grad(&params.target_head.logits(&g), batch.labels[r]);
        target_ce += ce_t;
        d_t.iter_mut().for_each(|v| *v *= target_coef);
        grad.target_head.accumulate(&d_t, &g);
        let mut grad_g = vec![0.0; d_g];
        params.target_head.input_grad(&d_t, &mut grad_g);

        let mut grad_h = vec![0.0; d_h];
        if let (Some(head), Some(ghead)) = (&params.client_head, &mut grad.client_head) {
            let (ce_c, mut d_c) = ce_with_grad(&head.logits(&h), batch.client);
            client_ce += ce_c;
            d_c.iter_mut().for_each(|v| *v *= client_coef);
            ghead.accumulate(&d_c, &h);
            head.input_grad(&d_c, &mut grad_h);
        }

        if let Some(cache) = cache {
            net::backward_into(&cache, &params.embed, net, &grad_g, &grad_h, &mut grad.embed)?;
        }
    }

    let client_ce = client_ce / n;
    let target_ce = target_ce / n;
    let l2 = params.decayed_sq_norm(net);
    let breakdown = LossBreakdown::assemble(client_ce, target_ce, l2, lambda, rho);

    if rho != 0.0 {
        let mut flat_g = grad.flatten();
        let flat_p = params.flatten();
        let emb_len = if net.fixed_embedding {
            params.embed.num_params()
        } else {
            0
        };
        for (gv, pv) in flat_g.iter_mut().zip(&flat_p).skip(emb_len) {
            *gv += rho * pv;
        }
        grad.read_flat(&flat_g)?;
    }
    Ok((breakdown, grad))
}

/// Loss value only.
pub fn reweighted_loss_value(
    batch: &Batch,
    params: &ClientParams,
    net: &NetConfig,
    lambda: f64,
    rho: f64,
) -> Result<LossBreakdown> {
    reweighted_loss(batch, params, net, lambda, rho).map(|(b, _)| b)
}

/// Cross-entropy gradient of the client loss with respect to the client
/// intercepts: the batch mean of `p_k(h(x)) - 1(k == client)`.
///
/// This is the negative of the log-likelihood ascent direction; the slope
/// gradient carries the additional `h(x)` factor and lives in
/// [`reweighted_loss`].
pub fn client_head_grad_gamma(batch: &Batch, params: &ClientParams, net: &NetConfig) -> Result<Vec<f64>> {
    let head = params
        .client_head
        .as_ref()
        .ok_or_else(|| Error::contract("no client head"))?;
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let mut out = vec![0.0; head.classes];
    for r in batch.indices() {
        let h = match batch.inputs {
            Inputs::Raw(x) => net::forward(x.row(r), &params.embed, net)?.h,
            Inputs::Embedded { h, .. } => h.row(r).to_vec(),
        };
        let p = head.probs(&h);
        for (k, (o, pk)) in out.iter_mut().zip(&p).enumerate() {
            *o += pk - if k == batch.client { 1.0 } else { 0.0 };
        }
    }
    let n = batch.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Activation, Sharing};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Softmax via `1 / sum_j exp(z_j - z_k)` with compensated summation.
    fn oracle_softmax(z: &[f64]) -> Vec<f64> {
        z.iter()
            .map(|&zk| {
                let (mut s, mut c) = (0.0_f64, 0.0_f64);
                for &zj in z {
                    let y = (zj - zk).exp() - c;
                    let t = s + y;
                    c = (t - s) - y;
                    s = t;
                }
                1.0 / s
            })
            .collect()
    }

    fn net_cfg() -> NetConfig {
        NetConfig {
            input_dim: 3,
            g_layers: vec![4, 3],
            h_layers: vec![2],
            sharing: Sharing::Deep,
            activation: Activation::Tanh,
            fixed_embedding: false,
        }
    }

    fn random_head(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> LinearHead {
        LinearHead {
            classes,
            dim,
            params: (0..classes * (dim + 1)).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn instance(seed: u64, m: usize, k: usize) -> (NetConfig, ClientParams, Matrix, Vec<usize>) {
        let net = net_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ClientParams {
            embed: init_params(&net, seed).unwrap(),
            client_head: Some(random_head(m, net.d_h(), &mut rng)),
            target_head: random_head(k, net.d_g(), &mut rng),
        };
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let labels = (0..6).map(|_| rng.random_range(0..k)).collect();
        (net, params, Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn zero_heads_are_uniform() {
        let p = target_probs(&[1.0, -2.0], &LinearHead::zeros(4, 2)).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let c = client_probs(&[0.3], &LinearHead::zeros(3, 1)).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_class_softmax() {
        let p = softmax(&[0.0, 3.0_f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_client_softmax_is_one() {
        let p = client_probs(&[0.4, -1.0], &LinearHead::zeros(1, 2)).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let k = rng.random_range(2..12);
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
            let p = softmax(&z);
            let q = oracle_softmax(&z);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn client_probs_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let head = random_head(4, 3, &mut rng);
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = client_probs(&h, &head).unwrap();
            let q = oracle_softmax(&head.logits(&h));
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        assert!(target_probs(&[f64::NAN], &LinearHead::zeros(2, 1)).is_err());
    }

    #[test]
    fn extreme_logits_do_not_produce_nan() {
        let p = softmax(&[700.0, -700.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[30.0, -30.0, 10.0]);
        assert!(q.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn lambda_one_leaves_only_weight_decay_on_client_head() {
        let (net, params, x, y) = instance(1, 3, 4);
        let batch = Batch::full(Inputs::Raw(&x), &y, 1);
        let rho = 0.05;
        let (_, grad) = reweighted_loss(&batch, &params, &net, 1.0, rho).unwrap();
        let gc = grad.client_head.unwrap();
        let pc = params.client_head.unwrap();
        for (g, p) in gc.params.iter().zip(&pc.params) {
            assert_eq!(*g, rho * p);
        }
    }

    #[test]
    fn single_client_term_vanishes() {
        let (net, params, x, y) = instance(2, 1, 3);
        let batch = Batch::full(Inputs::Raw(&x), &y, 0);
        let (b, grad) = reweighted_loss(&batch, &params, &net, 0.5, 0.0).unwrap();
        assert_eq!(b.client_ce, 0.0);
        assert!(grad.client_head.unwrap().params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let (net, params, x, mut y) = instance(3, 2, 3);
        y[2] = 7;
        let batch = Batch::full(Inputs::Raw(&x), &y, 0);
        assert!(matches!(
            reweighted_loss(&batch, &params, &net, 0.5, 0.0),
            Err(Error::Data(_))
        ));
        let y_ok = vec![0; 6];
        let bad_client = Batch::full(Inputs::Raw(&x), &y_ok, 5);
        assert!(matches!(
            reweighted_loss(&bad_client, &params, &net, 0.5, 0.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn total_is_assembled_from_parts() {
        let (net, params, x, y) = instance(4, 3, 3);
        let batch = Batch::full(Inputs::Raw(&x), &y, 2);
        let (lambda, rho) = (0.7, 0.01);
        let (b, _) = reweighted_loss(&batch, &params, &net, lambda, rho).unwrap();
        assert_eq!(
            b.total,
            (1.0 - lambda) * b.client_ce + lambda * b.target_ce + (rho / 2.0) * b.l2
        );
        assert!(b.client_ce >= 0.0 && b.target_ce >= 0.0 && b.l2 >= 0.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..5 {
            let (net, params, x, y) = instance(seed, 3, 4);
            let rows = [0usize, 2, 3, 5];
            let batch = Batch {
                inputs: Inputs::Raw(&x),
                labels: &y,
                rows: Some(&rows),
                client: (seed % 3) as usize,
            };
            let (lambda, rho) = (0.65, 0.03);
            let (_, grad) = reweighted_loss(&batch, &params, &net, lambda, rho).unwrap();
            let analytic = grad.flatten();
            let flat = params.flatten();
            let f = |v: &[f64]| {
                let mut p = params.clone();
                p.read_flat(v).unwrap();
                reweighted_loss_value(&batch, &p, &net, lambda, rho).unwrap().total
            };
            let h = 1e-6;
            for i in 0..flat.len() {
                let mut up = flat.clone();
                up[i] += h;
                let mut dn = flat.clone();
                dn[i] -= h;
                let numeric = (f(&up) - f(&dn)) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
                assert!(rel < 1e-5, "seed {seed} param {i}: {} vs {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn gamma_gradient_uniform_case() {
        let net = NetConfig::linear(2, 2, 2, true);
        let params = ClientParams {
            embed: EmbeddingParams::zeros(&net),
            client_head: Some(LinearHead::zeros(2, 2)),
            target_head: LinearHead::zeros(2, 2),
        };
        let g = Matrix::from_rows(&[vec![0.5, 1.0]]).unwrap();
        let h = Matrix::from_rows(&[vec![0.2, -0.3]]).unwrap();
        let y = [0];
        let batch = Batch::full(Inputs::Embedded { g: &g, h: &h }, &y, 0);
        let grad = client_head_grad_gamma(&batch, &params, &net).unwrap();
        // Log-likelihood direction would be (0.5, -0.5); the CE gradient is its negative.
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn gamma_gradient_matches_finite_differences_and_sums_to_zero() {
        let (net, params, x, y) = instance(8, 4, 3);
        let batch = Batch::full(Inputs::Raw(&x), &y, 2);
        let grad = client_head_grad_gamma(&batch, &params, &net).unwrap();
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
        let client_ce = |p: &ClientParams| reweighted_loss_value(&batch, p, &net, 0.5, 0.0).unwrap().client_ce;
        for k in 0..4 {
            let mut up = params.clone();
            *up.client_head.as_mut().unwrap().intercept_mut(k) += 1e-6;
            let mut dn = params.clone();
            *dn.client_head.as_mut().unwrap().intercept_mut(k) -= 1e-6;
            let numeric = (client_ce(&up) - client_ce(&dn)) / 2e-6;
            assert!((grad[k] - numeric).abs() / numeric.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn loss_is_additive_over_clients() {
        // Pooled sample-mean CE equals the n_i/N-weighted per-client means.
        let (net, params, x, y) = instance(5, 2, 3);
        let a = [0usize, 1];
        let b = [2usize, 3, 4, 5];
        let mean_ce = |rows: &[usize]| {
            let batch = Batch {
                inputs: Inputs::Raw(&x),
                labels: &y,
                rows: Some(rows),
                client: 0,
            };
            reweighted_loss_value(&batch, &params, &net, 0.5, 0.0).unwrap()
        };
        let la = mean_ce(&a);
        let lb = mean_ce(&b);
        let all = mean_ce(&[0, 1, 2, 3, 4, 5]);
        let weighted = (2.0 / 6.0) * la.total + (4.0 / 6.0) * lb.total;
        assert!((weighted - all.total).abs() <= 1e-10 * all.total.abs());
    }

    proptest! {
        #[test]
        fn label_permutation_equivariance(seed in 0u64..100, shift in 1usize..4) {
            let (net, params, x, y) = instance(seed, 2, 4);
            let perm: Vec<usize> = (0..4).map(|k| (k + shift) % 4).collect();
            let mut permuted = params.clone();
            for k in 0..4 {
                let src = params.target_head.params[k * 4..(k + 1) * 4].to_vec();
                permuted.target_head.params[perm[k] * 4..(perm[k] + 1) * 4].copy_from_slice(&src);
            }
            let y2: Vec<usize> = y.iter().map(|&l| perm[l]).collect();
            let b1 = Batch::full(Inputs::Raw(&x), &y, 1);
            let b2 = Batch::full(Inputs::Raw(&x), &y2, 1);
            let l1 = reweighted_loss_value(&b1, &params, &net, 0.8, 0.0).unwrap();
            let l2 = reweighted_loss_value(&b2, &permuted, &net, 0.8, 0.0).unwrap();
            prop_assert!((l1.target_ce - l2.target_ce).abs() <= 1e-14 * l1.target_ce.max(1.0));
            prop_assert_eq!(l1.client_ce, l2.client_ce);
        }

        #[test]
        fn probabilities_in_simplex(z in proptest::collection::vec(-700.0f64..700.0, 1..10)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
