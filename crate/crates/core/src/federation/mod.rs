//! The training engine: broadcast, `E` local SGD steps per client on the
//! reweighted loss, then an `n_i / N`-weighted average of the shared
//! parameters. Target heads stay with their client unless they are shared.

mod checkpoint;

pub use checkpoint::{read_checkpoint, restore_checkpoint, write_checkpoint, Checkpoint};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::loss::{reweighted_loss, Batch, ClientParams, HeadBank, Inputs, LinearHead, LossBreakdown};
use crate::net::{init_params, EmbeddingParams, NetConfig};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Local losses above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `eta_t = eta (1 + cos(pi t / T)) / 2` for round `t`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Feddrm,
    /// No client head and one shared target head trained with `lambda = 1`.
    FedavgRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub lambda: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Minibatch size; absent means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub shared_target: bool,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 {
            return Err(Error::config("rounds and local_steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.lambda <= 0.5 && self.mode == Mode::Feddrm {
            log::warn!(
                "lambda = {} <= 0.5 weights the client loss at least as much as the target loss",
                self.lambda
            );
        }
        Ok(())
    }

    /// The lambda actually used by the local loss.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::Feddrm => self.lambda,
            Mode::FedavgRef => 1.0,
        }
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = round as f64 / self.rounds as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Training samples of one client. With a fixed embedding the inputs may be
/// precomputed `(g, h)` rows.
#[derive(Debug, Clone, Copy)]
pub struct ClientView<'a> {
    pub inputs: Inputs<'a>,
    pub labels: &'a [usize],
}

impl ClientView<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    /// Completed rounds.
    pub round: usize,
    pub embed: EmbeddingParams,
    pub heads: HeadBank,
    /// Per-client momentum buffers over the flattened client parameters.
    pub momentum: Vec<Option<Vec<f64>>>,
}

impl FederationState {
    /// Glorot-initialized embedding and all-zero heads.
    pub fn init(net: &NetConfig, clients: usize, classes: usize, cfg: &FederationConfig) -> Result<Self> {
        net.validate()?;
        let (shared, with_client) = match cfg.mode {
            Mode::Feddrm => (cfg.shared_target, true),
            Mode::FedavgRef => (true, false),
        };
        Ok(Self {
            round: 0,
            embed: init_params(net, cfg.seed)?,
            heads: HeadBank::zeros(clients, classes, net.d_g(), net.d_h(), shared, with_client),
            momentum: vec![None; clients],
        })
    }

    pub fn clients(&self) -> usize {
        self.momentum.len()
    }

    /// What client `i` receives at the start of a round.
    pub fn client_params(&self, i: usize) -> ClientParams {
        ClientParams {
            embed: self.embed.clone(),
            client_head: self.heads.client_head.clone(),
            target_head: self.heads.target_for(i).clone(),
        }
    }
}

fn check_loss(loss: &LossBreakdown, round: usize, step: usize) -> Result<()> {
    if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            round,
            step,
            loss: loss.total,
        });
    }
    Ok(())
}

/// `E` local steps of (momentum) SGD from the broadcast parameters.
pub fn local_update(
    params: &mut ClientParams,
    momentum: &mut Option<Vec<f64>>,
    data: &ClientView,
    client: usize,
    round: usize,
    net: &NetConfig,
    cfg: &FederationConfig,
) -> Result<()> {
    let lambda = cfg.effective_lambda();
    let lr = cfg.lr_at(round);
    let mut rng = rng::stream(cfg.seed, &[tag::MINIBATCH, client as u64, round as u64]);
    let mut rows: Vec<usize>;
    for step in 0..cfg.local_steps {
        let batch_rows = match cfg.batch_size {
            Some(b) if b < data.len() => {
                rows = rand::seq::index::sample(&mut rng, data.len(), b).into_vec();
                rows.sort_unstable();
                Some(rows.as_slice())
            }
            _ => None,
        };
        let batch = Batch {
            inputs: data.inputs,
            labels: data.labels,
            rows: batch_rows,
            client,
        };
        let (loss, grad) = reweighted_loss(&batch, params, net, lambda, cfg.weight_decay)?;
        check_loss(&loss, round, step)?;
        let mut flat = params.flatten();
        let mut g = grad.flatten();
        if cfg.momentum > 0.0 {
            let buf = momentum.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, gi) in buf.iter_mut().zip(g.iter_mut()) {
                *b = cfg.momentum * *b + *gi;
                *gi = *b;
            }
        }
        for (p, gi) in flat.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        params.read_flat(&flat)?;
    }
    Ok(())
}

/// `sum_i w_i v_i` in ascending client order, except that coordinates on which
/// every client agrees keep that exact value.
pub fn weighted_average(vectors: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| Error::contract("nothing to aggregate"))?;
    if vectors.len() != weights.len() || vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::contract("aggregation shape mismatch"));
    }
    Ok((0..first.len())
        .map(|j| {
            let v0 = first[j];
            if vectors.iter().all(|v| v[j].to_bits() == v0.to_bits()) {
                return v0;
            }
            vectors.iter().zip(weights).fold(0.0, |acc, (v, w)| acc + w * v[j])
        })
        .collect())
}

/// `n_i / N` for every client.
pub fn client_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Server step: averages the embedding, the client head and a shared target
/// head; per-client target heads are kept as returned by their clients.
pub fn aggregate(state: &mut FederationState, updated: Vec<ClientParams>, sizes: &[usize]) -> Result<()> {
    if updated.len() != state.clients() || sizes.len() != updated.len() {
        return Err(Error::contract("one update and size per client required"));
    }
    let w = client_weights(sizes);
    let embeds: Vec<Vec<f64>> = updated.iter().map(|p| p.embed.flatten()).collect();
    state.embed.read_flat(&weighted_average(&embeds, &w)?)?;
    if let Some(head) = &mut state.heads.client_head {
        let all: Vec<Vec<f64>> = updated
            .iter()
            .map(|p| p.client_head.as_ref().map(|h| h.params.clone()))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::contract("client update lacks a client head"))?;
        head.params = weighted_average(&all, &w)?;
    }
    if state.heads.shared_target {
        let all: Vec<Vec<f64>> = updated.iter().map(|p| p.target_head.params.clone()).collect();
        state.heads.target_heads[0].params = weighted_average(&all, &w)?;
    } else {
        for (slot, p) in state.heads.target_heads.iter_mut().zip(updated) {
            if slot.params.len() != p.target_head.params.len() {
                return Err(Error::contract("target head shape mismatch"));
            }
            *slot = p.target_head;
        }
    }
    Ok(())
}

/// One communication round on every client, in parallel.
pub fn run_round(
    state: &mut FederationState,
    clients: &[ClientView],
    net: &NetConfig,
    cfg: &FederationConfig,
) -> Result<()> {
    let round = state.round;
    let jobs: Vec<(ClientParams, Option<Vec<f64>>)> = (0..clients.len())
        .map(|i| (state.client_params(i), state.momentum[i].take()))
        .collect();
    let results: Vec<Result<(ClientParams, Option<Vec<f64>>)>> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(i, (mut params, mut mom))| {
            local_update(&mut params, &mut mom, &clients[i], i, round, net, cfg)?;
            Ok((params, mom))
        })
        .collect();
    let mut updated = Vec::with_capacity(clients.len());
    for (i, r) in results.into_iter().enumerate() {
        let (p, mom) = r?;
        state.momentum[i] = mom;
        updated.push(p);
    }
    let sizes: Vec<usize> = clients.iter().map(ClientView::len).collect();
    aggregate(state, updated, &sizes)?;
    state.round += 1;
    Ok(())
}

/// Runs rounds until `cfg.rounds` are complete. `on_round` sees the state
/// before the first round and after every round.
pub fn run<F>(
    state: &mut FederationState,
    clients: &[ClientView],
    net: &NetConfig,
    cfg: &FederationConfig,
    mut on_round: F,
) -> Result<()>
where
    F: FnMut(&FederationState) -> Result<()>,
{
    cfg.validate()?;
    if clients.len() != state.clients() {
        return Err(Error::contract(format!(
            "state has {} clients but {} datasets were given",
            state.clients(),
            clients.len()
        )));
    }
    if clients.iter().any(ClientView::is_empty) {
        return Err(Error::data("every client needs training samples"));
    }
    state.heads.validate(clients.len())?;
    on_round(state)?;
    while state.round < cfg.rounds {
        run_round(state, clients, net, cfg)?;
        on_round(state)?;
    }
    Ok(())
}

/// Full-batch global objective `sum_i (n_i / N) l_i` and its parts.
pub fn global_loss(
    state: &FederationState,
    clients: &[ClientView],
    net: &NetConfig,
    lambda: f64,
    rho: f64,
) -> Result<LossBreakdown> {
    let w = client_weights(&clients.iter().map(ClientView::len).collect::<Vec<_>>());
    let parts: Vec<LossBreakdown> = clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let batch = Batch::full(c.inputs, c.labels, i);
            crate::loss::reweighted_loss_value(&batch, &state.client_params(i), net, lambda, rho)
        })
        .collect::<Result<_>>()?;
    let mut out = LossBreakdown {
        client_ce: 0.0,
        target_ce: 0.0,
        l2: 0.0,
        total: 0.0,
    };
    for (p, wi) in parts.iter().zip(&w) {
        out.client_ce += wi * p.client_ce;
        out.target_ce += wi * p.target_ce;
        out.l2 += wi * p.l2;
        out.total += wi * p.total;
    }
    Ok(out)
}

/// Heads trained by client `i`, for callers that need them by value.
pub fn target_heads(state: &FederationState) -> Vec<LinearHead> {
    (0..state.clients())
        .map(|i| state.heads.target_for(i).clone())
        .collect()
}
