//! Routing, accuracies, gradient drift and Fisher information.

use rayon::prelude::*;
use serde::Serialize;

use crate::federation::{client_weights, ClientView, FederationState};
use crate::linalg::{argmax, sym_eig_extremes, Matrix};
use crate::loss::{reweighted_loss, Batch, HeadBank, Inputs, LinearHead};
use crate::net::{self, EmbeddingParams, NetConfig};
use crate::{Error, Result};

/// `g` and `h` rows for a set of samples.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub g: Matrix,
    pub h: Matrix,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.g.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.g.rows() == 0
    }

    pub fn inputs(&self) -> Inputs<'_> {
        Inputs::Embedded { g: &self.g, h: &self.h }
    }
}

pub fn embed_all(x: &Matrix, p: &EmbeddingParams, cfg: &NetConfig) -> Result<Embedded> {
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..x.rows())
        .into_par_iter()
        .map(|r| net::forward(x.row(r), p, cfg).map(|f| (f.g, f.h)))
        .collect::<Result<_>>()?;
    let mut g = Matrix::zeros(x.rows(), cfg.d_g());
    let mut h = Matrix::zeros(x.rows(), cfg.d_h());
    for (r, (gr, hr)) in rows.into_iter().enumerate() {
        g.row_mut(r).copy_from_slice(&gr);
        h.row_mut(r).copy_from_slice(&hr);
    }
    Ok(Embedded { g, h })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingDecision {
    pub query: usize,
    pub client: usize,
    pub probs: Vec<f64>,
}

/// Argmax of the client head, ties to the lowest index. Without a client head
/// every query goes to client 0.
pub fn route(query: usize, h: &[f64], client_head: Option<&LinearHead>) -> RoutingDecision {
    match client_head {
        Some(head) => {
            let logits = head.logits(h);
            RoutingDecision {
                query,
                client: argmax(&logits),
                probs: crate::loss::softmax(&logits),
            }
        }
        None => RoutingDecision {
            query,
            client: 0,
            probs: vec![1.0],
        },
    }
}

pub fn route_all(emb: &Embedded, heads: &HeadBank) -> Vec<usize> {
    (0..emb.len())
        .map(|r| route(r, emb.h.row(r), heads.client_head.as_ref()).client)
        .collect()
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Pooled accuracy when each sample is predicted by the target head of the
/// client it is routed to.
pub fn system_accuracy(emb: &Embedded, labels: &[usize], heads: &HeadBank) -> f64 {
    let routes = route_all(emb, heads);
    routed_accuracy(emb, labels, heads, &routes)
}

/// System accuracy with a given routing, e.g. the true client of each sample.
pub fn routed_accuracy(emb: &Embedded, labels: &[usize], heads: &HeadBank, routes: &[usize]) -> f64 {
    let hits = (0..emb.len())
        .filter(|&r| heads.target_for(routes[r]).predict(emb.g.row(r)) == labels[r])
        .count();
    fraction(hits, emb.len())
}

/// Share of samples routed to the client that owns them.
pub fn route_accuracy(emb: &Embedded, owners: &[usize], heads: &HeadBank) -> f64 {
    let routes = route_all(emb, heads);
    fraction(routes.iter().zip(owners).filter(|(a, b)| a == b).count(), owners.len())
}

/// Every client's head votes on every sample; ties go to the lowest label.
pub fn majority_vote_accuracy(emb: &Embedded, labels: &[usize], heads: &HeadBank, clients: usize) -> f64 {
    let classes = heads.target_heads[0].classes;
    let hits = (0..emb.len())
        .filter(|&r| {
            let mut votes = vec![0usize; classes];
            for i in 0..clients {
                votes[heads.target_for(i).predict(emb.g.row(r))] += 1;
            }
            let best = votes
                .iter()
                .enumerate()
                .fold((0, 0), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            best.0 == labels[r]
        })
        .count();
    fraction(hits, emb.len())
}

/// Own-test accuracy of each client, weighted by training-set size.
pub fn average_accuracy(tests: &[(Embedded, &[usize])], train_sizes: &[usize], heads: &HeadBank) -> f64 {
    per_client_accuracy(tests, heads)
        .iter()
        .zip(client_weights(train_sizes))
        .map(|(a, w)| a * w)
        .sum()
}

pub fn per_client_accuracy(tests: &[(Embedded, &[usize])], heads: &HeadBank) -> Vec<f64> {
    tests
        .iter()
        .enumerate()
        .map(|(i, (emb, y))| {
            let head = heads.target_for(i);
            let hits = (0..emb.len()).filter(|&r| head.predict(emb.g.row(r)) == y[r]).count();
            fraction(hits, emb.len())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftReport {
    pub g_client2: f64,
    pub g_class2: f64,
    /// `(1 - lambda)^2 G_client^2 + lambda^2 G_class^2`.
    pub g2: f64,
    /// `G^2` computed directly from the concatenated reweighted-loss head gradients.
    pub g2_direct: f64,
    pub lambda: f64,
}

/// Mean cross-entropy of a head and its gradient
/// `mean_r (p_r - e_{label_r}) [1, z_r]^T`, class-major like the head.
pub fn head_cross_entropy(head: &LinearHead, z: &Matrix, labels: impl Fn(usize) -> usize) -> (f64, Vec<f64>) {
    let d = head.dim;
    let mut value = 0.0;
    let mut out = vec![0.0; head.params.len()];
    for r in 0..z.rows() {
        let x = z.row(r);
        let logits = head.logits(x);
        let lse = crate::loss::log_sum_exp(&logits);
        let y = labels(r);
        value += lse - logits[y];
        let mut p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        p[y] -= 1.0;
        for (k, pk) in p.iter().enumerate() {
            let row = &mut out[k * (d + 1)..(k + 1) * (d + 1)];
            row[0] += pk;
            for (o, xj) in row[1..].iter_mut().zip(x) {
                *o += pk * xj;
            }
        }
    }
    let n = z.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    (value / n, out)
}

fn ce_head_grad(head: &LinearHead, z: &Matrix, labels: impl Fn(usize) -> usize) -> Vec<f64> {
    head_cross_entropy(head, z, labels).1
}

/// Target-head gradient placed in client `i`'s block of the stacked heads.
fn stacked(heads: &HeadBank, i: usize, grad: &[f64]) -> Vec<f64> {
    if heads.shared_target {
        return grad.to_vec();
    }
    let len = grad.len();
    let mut out = vec![0.0; len * heads.target_heads.len()];
    out[i * len..(i + 1) * len].copy_from_slice(grad);
    out
}

fn weighted_spread(grads: &[Vec<f64>], w: &[f64]) -> f64 {
    let dim = grads[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| grads.iter().zip(w).map(|(g, wi)| wi * g[j]).sum())
        .collect();
    grads
        .iter()
        .zip(w)
        .map(|(g, wi)| wi * g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// Gradient drift of the head parameters at the current global iterate, from
/// full-batch gradients without weight decay. Per-client target heads are
/// treated as one stacked parameter vector.
pub fn drift_report(
    clients: &[ClientView],
    embedded: &[Embedded],
    state: &FederationState,
    net: &NetConfig,
    lambda: f64,
) -> Result<DriftReport> {
    let heads = &state.heads;
    let client_head = heads
        .client_head
        .as_ref()
        .ok_or_else(|| Error::contract("drift needs a client head"))?;
    if clients.len() != embedded.len() {
        return Err(Error::contract("one embedding per client required"));
    }
    let w = client_weights(&clients.iter().map(ClientView::len).collect::<Vec<_>>());
    let per_client: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..clients.len())
        .into_par_iter()
        .map(|i| {
            let emb = &embedded[i];
            let c = ce_head_grad(client_head, &emb.h, |_| i);
            let t = stacked(
                heads,
                i,
                &ce_head_grad(heads.target_for(i), &emb.g, |r| clients[i].labels[r]),
            );
            let batch = Batch::full(clients[i].inputs, clients[i].labels, i);
            let (_, g) = reweighted_loss(&batch, &state.client_params(i), net, lambda, 0.0)?;
            let mut direct = g.client_head.expect("client head present").params;
            direct.extend(stacked(heads, i, &g.target_head.params));
            Ok((c, t, direct))
        })
        .collect::<Result<_>>()?;
    let (cs, rest): (Vec<_>, Vec<_>) = per_client.into_iter().map(|(c, t, d)| (c, (t, d))).unzip();
    let (ts, ds): (Vec<_>, Vec<_>) = rest.into_iter().unzip();
    let g_client2 = weighted_spread(&cs, &w);
    let g_class2 = weighted_spread(&ts, &w);
    Ok(DriftReport {
        g_client2,
        g_class2,
        g2: (1.0 - lambda).powi(2) * g_client2 + lambda.powi(2) * g_class2,
        g2_direct: weighted_spread(&ds, &w),
        lambda,
    })
}

/// Empirical Fisher information of the two heads on fixed embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct FisherInfo {
    /// Over the client-head coordinates, class-major `[gamma_k, xi_k]`.
    pub client: Matrix,
    /// Over the target-head coordinates, class-major `[alpha_k, beta_k]`.
    pub class: Matrix,
    pub rho: f64,
    pub client_min_eig: f64,
    pub class_min_eig: f64,
    pub client_max_eig: f64,
    pub class_max_eig: f64,
}

/// `mean_r (diag(p_r) - p_r p_r^T) kron (z_r z_r^T)` with `z_r = [1, x_r]`.
pub fn kronecker_information(head: &LinearHead, x: &Matrix) -> Matrix {
    let (k, d1) = (head.classes, head.dim + 1);
    let dim = k * d1;
    let mut out = Matrix::zeros(dim, dim);
    let mut z = vec![1.0; d1];
    for r in 0..x.rows() {
        z[1..].copy_from_slice(x.row(r));
        let p = head.probs(x.row(r));
        for a in 0..k {
            for b in 0..k {
                let c = if a == b { p[a] - p[a] * p[b] } else { -p[a] * p[b] };
                for i in 0..d1 {
                    let row = out.row_mut(a * d1 + i);
                    let ci = c * z[i];
                    for j in 0..d1 {
                        row[b * d1 + j] += ci * z[j];
                    }
                }
            }
        }
    }
    let n = x.rows() as f64;
    out.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    out
}

pub fn fisher_info(h: &Matrix, g: &Matrix, client_head: &LinearHead, target_head: &LinearHead, rho: f64) -> FisherInfo {
    let client = kronecker_information(client_head, h);
    let class = kronecker_information(target_head, g);
    let (client_min_eig, client_max_eig) = sym_eig_extremes(&client);
    let (class_min_eig, class_max_eig) = sym_eig_extremes(&class);
    FisherInfo {
        client,
        class,
        rho,
        client_min_eig,
        class_min_eig,
        client_max_eig,
        class_max_eig,
    }
}

impl FisherInfo {
    /// Hessian of the penalized objective:
    /// `(1 - lambda) I_client (+) lambda I_class + rho I`.
    pub fn hessian(&self, lambda: f64) -> Matrix {
        let (a, b) = (self.client.rows(), self.class.rows());
        let mut out = Matrix::zeros(a + b, a + b);
        for i in 0..a {
            for j in 0..a {
                out.set(i, j, (1.0 - lambda) * self.client.get(i, j));
            }
        }
        for i in 0..b {
            for j in 0..b {
                out.set(a + i, a + j, lambda * self.class.get(i, j));
            }
        }
        for i in 0..a + b {
            out.set(i, i, out.get(i, i) + self.rho);
        }
        out
    }
}
