//! Config-driven batch commands: `run`, `partition`, `eval`, `elcheck`,
//! `drift` and `theory`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data or I/O error,
//! 3 divergence, 4 a verification check outside tolerance.

pub mod config;
pub mod data;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::el::{self, TiltMatrix};
use crate::federation::{self, ClientView, FederationConfig, FederationState, Mode};
use crate::federation::{read_checkpoint, restore_checkpoint, write_checkpoint};
use crate::linalg::Matrix;
use crate::loss::{Inputs, LinearHead};
use crate::metrics::{self, embed_all, Embedded};
use crate::net::NetConfig;
use crate::partition::{write_images, write_partition_csv, PartitionRow};
use crate::rng;
use crate::theory::{self, ConvergencePoint, TheoryProblem, TradeoffConfig};
use crate::{Error, Result, VERSION};
use config::{DataConfig, RunConfig, TheorySection};
use data::LoadedData;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;

/// Environment variable overriding the worker-thread count.
pub const THREADS_ENV: &str = "FEDDRM_THREADS";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Solver { .. } | Error::Convergence(_) => EXIT_TOLERANCE,
        _ => EXIT_DATA,
    }
}

pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or the global pool.
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn header(cfg: &RunConfig) -> String {
    format!("config_hash={}, seed={}, version={VERSION}", cfg.hash_hex(), cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn verdict_code(checks: &[Check]) -> i32 {
    if checks.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_TOLERANCE
    }
}

fn verdict_text(header: &str, checks: &[Check]) -> String {
    let mut out = format!("# {header}\n");
    for c in checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {}: {}", c.name, c.detail).unwrap();
    }
    out
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn write_csv(path: &Path, header: &str, columns: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut text = format!("# {header}\n{}\n", columns.join(","));
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// One line of the per-round CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub train_loss: f64,
    pub client_ce: f64,
    pub target_ce: f64,
    pub avg_acc: f64,
    pub sys_acc: f64,
    pub route_acc: f64,
    #[serde(rename = "G_client2")]
    pub g_client2: f64,
    #[serde(rename = "G_class2")]
    pub g_class2: f64,
}

pub const ROUND_COLUMNS: [&str; 9] = [
    "round",
    "train_loss",
    "client_ce",
    "target_ce",
    "avg_acc",
    "sys_acc",
    "route_acc",
    "G_client2",
    "G_class2",
];

impl RoundRow {
    fn values(&self) -> [f64; 8] {
        [
            self.train_loss,
            self.client_ce,
            self.target_ce,
            self.avg_acc,
            self.sys_acc,
            self.route_acc,
            self.g_client2,
            self.g_class2,
        ]
    }

    fn fields(&self) -> Vec<String> {
        std::iter::once(self.round.to_string())
            .chain(self.values().iter().map(|v| v.to_string()))
            .collect()
    }
}

/// Data and model for a configured federation.
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: LoadedData,
    pub net: NetConfig,
    pub fed: FederationConfig,
}

impl Experiment {
    pub fn load(cfg: RunConfig) -> Result<Self> {
        let model = RunConfig::require(&cfg.model, "model")?;
        let fed = RunConfig::require(&cfg.federation, "federation")?.to_config(cfg.seed);
        let data = data::load_clients(&cfg)?;
        let net = model.net(data.input_dim);
        net.validate()?;
        Ok(Self { cfg, data, net, fed })
    }

    pub fn views(&self) -> Vec<ClientView<'_>> {
        self.data
            .clients
            .iter()
            .map(|c| ClientView {
                inputs: Inputs::Raw(&c.train.x),
                labels: &c.train.y,
            })
            .collect()
    }

    pub fn init_state(&self) -> Result<FederationState> {
        FederationState::init(&self.net, self.data.clients.len(), self.data.classes, &self.fed)
    }

    fn train_sizes(&self) -> Vec<usize> {
        self.data.clients.iter().map(|c| c.train.len()).collect()
    }

    /// Drift of the current iterate; `None` without a client head.
    pub fn drift(&self, state: &FederationState) -> Result<Option<metrics::DriftReport>> {
        if state.heads.client_head.is_none() {
            return Ok(None);
        }
        let emb: Vec<Embedded> = self
            .data
            .clients
            .iter()
            .map(|c| embed_all(&c.train.x, &state.embed, &self.net))
            .collect::<Result<_>>()?;
        let views: Vec<ClientView> = self
            .data
            .clients
            .iter()
            .zip(&emb)
            .map(|(c, e)| ClientView {
                inputs: if self.net.fixed_embedding {
                    e.inputs()
                } else {
                    Inputs::Raw(&c.train.x)
                },
                labels: &c.train.y,
            })
            .collect();
        metrics::drift_report(&views, &emb, state, &self.net, self.fed.effective_lambda()).map(Some)
    }

    pub fn row(&self, state: &FederationState) -> Result<RoundRow> {
        let views = self.views();
        let loss = federation::global_loss(
            state,
            &views,
            &self.net,
            self.fed.effective_lambda(),
            self.fed.weight_decay,
        )?;
        let tests: Vec<Embedded> = self
            .data
            .clients
            .iter()
            .map(|c| embed_all(&c.test.x, &state.embed, &self.net))
            .collect::<Result<_>>()?;
        let labelled: Vec<(Embedded, &[usize])> = tests
            .iter()
            .zip(&self.data.clients)
            .map(|(e, c)| (e.clone(), c.test.y.as_slice()))
            .collect();
        let avg_acc = metrics::average_accuracy(&labelled, &self.train_sizes(), &state.heads);
        let pooled = Embedded {
            g: Matrix::vstack(&tests.iter().map(|e| &e.g).collect::<Vec<_>>())?,
            h: Matrix::vstack(&tests.iter().map(|e| &e.h).collect::<Vec<_>>())?,
        };
        let labels: Vec<usize> = self
            .data
            .clients
            .iter()
            .flat_map(|c| c.test.y.iter().copied())
            .collect();
        let owners: Vec<usize> = self
            .data
            .clients
            .iter()
            .enumerate()
            .flat_map(|(i, c)| std::iter::repeat_n(i, c.test.len()))
            .collect();
        let sys_acc = metrics::system_accuracy(&pooled, &labels, &state.heads);
        let route_acc = if state.heads.client_head.is_some() {
            metrics::route_accuracy(&pooled, &owners, &state.heads)
        } else {
            f64::NAN
        };
        let drift = self.drift(state)?;
        Ok(RoundRow {
            round: state.round,
            train_loss: loss.total,
            client_ce: loss.client_ce,
            target_ce: loss.target_ce,
            avg_acc,
            sys_acc,
            route_acc,
            g_client2: drift.map_or(f64::NAN, |d| d.g_client2),
            g_class2: drift.map_or(f64::NAN, |d| d.g_class2),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub window: usize,
    pub first_round: usize,
    pub last_round: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// Mean and sample standard deviation of each metric over the last `window` rows.
pub fn summarize(cfg: &RunConfig, rows: &[RoundRow]) -> RunSummary {
    let tail = &rows[rows.len().saturating_sub(cfg.window)..];
    let n = tail.len() as f64;
    let metrics = ROUND_COLUMNS[1..]
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let vals: Vec<f64> = tail.iter().map(|r| r.values()[j]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let std = if tail.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (name.to_string(), MetricSummary { mean, std })
        })
        .collect();
    RunSummary {
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        version: VERSION.to_string(),
        window: cfg.window,
        first_round: tail.first().map_or(0, |r| r.round),
        last_round: tail.last().map_or(0, |r| r.round),
        metrics,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub rows: Vec<RoundRow>,
    pub csv: PathBuf,
    pub summary: PathBuf,
}

pub fn cmd_run(config_path: &Path) -> Result<RunOutputs> {
    run_experiment(RunConfig::load(config_path)?)
}

/// Trains, logging one row per round, then writes the CSV, summary and
/// final checkpoint. A divergent run still writes the rows it completed.
pub fn run_experiment(cfg: RunConfig) -> Result<RunOutputs> {
    let dir = out_dir(&cfg)?;
    let exp = Experiment::load(cfg)?;
    let head = header(&exp.cfg);
    let views = exp.views();
    let mut state = exp.init_state()?;
    let mut rows = Vec::with_capacity(exp.fed.rounds + 1);
    let every = exp.cfg.checkpoint_every;
    let hash = exp.cfg.hash();
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let outcome = federation::run(&mut state, &views, &exp.net, &exp.fed, |s| {
        let row = exp.row(s)?;
        log::info!(
            "round {} loss {:.6} sys_acc {:.4}",
            row.round,
            row.train_loss,
            row.sys_acc
        );
        rows.push(row);
        if every > 0 && s.round > 0 && s.round % every == 0 {
            write_checkpoint(&ck_dir.join(format!("round_{:06}.ckpt", s.round)), hash, s)?;
        }
        Ok(())
    });
    let csv = dir.join("rounds.csv");
    write_csv(&csv, &head, &ROUND_COLUMNS, rows.iter().map(RoundRow::fields))?;
    outcome?;
    write_checkpoint(&ck_dir.join("final.ckpt"), hash, &state)?;
    let summary = dir.join("summary.json");
    fs::write(
        &summary,
        serde_json::to_string_pretty(&summarize(&exp.cfg, &rows)).expect("summary serializes") + "\n",
    )?;
    Ok(RunOutputs { rows, csv, summary })
}

/// Metrics of a saved checkpoint on the configured data.
pub fn cmd_eval(config_path: &Path, checkpoint: &Path) -> Result<RoundRow> {
    let cfg = RunConfig::load(config_path)?;
    let dir = out_dir(&cfg)?;
    let exp = Experiment::load(cfg)?;
    let ck = read_checkpoint(checkpoint)?;
    if ck.config_hash != exp.cfg.hash() {
        log::warn!("checkpoint was written under config hash {:016x}", ck.config_hash);
    }
    let mut state = exp.init_state()?;
    restore_checkpoint(&ck, &mut state)?;
    let row = exp.row(&state)?;
    #[derive(Serialize)]
    struct Eval<'a> {
        config_hash: String,
        seed: u64,
        version: &'a str,
        checkpoint: String,
        metrics: RoundRow,
    }
    let report = Eval {
        config_hash: exp.cfg.hash_hex(),
        seed: exp.cfg.seed,
        version: VERSION,
        checkpoint: checkpoint.display().to_string(),
        metrics: row,
    };
    fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&report).expect("eval serializes") + "\n",
    )?;
    Ok(row)
}

/// Writes `partition.csv` and, for image data, one shifted image file per client.
pub fn cmd_partition(config_path: &Path) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let dir = out_dir(&cfg)?;
    let data_cfg = RunConfig::require(&cfg.data, "data")?;
    let part = RunConfig::require(&cfg.partition, "partition")
        .map_err(|_| Error::config("`partition` needs pooled tabular or image data with a `partition` section"))?;
    let labels = match data_cfg {
        DataConfig::Tabular { path } => crate::partition::read_tabular_csv(path)?.y,
        DataConfig::Images { path, labels } => data::read_image_pool(path, labels)?.labels,
        _ => unreachable!("validated: partition implies pooled data"),
    };
    let assignment = data::partition_assignment(&labels, part, cfg.seed)?;
    let m = part.clients();
    let rows = partition_rows(&assignment, m, cfg.seed);
    let path = dir.join("partition.csv");
    write_partition_csv(fs::File::create(&path)?, &header(&cfg), &rows)?;
    if let DataConfig::Images { path: img, labels } = data_cfg {
        let pool = data::read_image_pool(img, labels)?;
        let owned = data::owned_indices(&assignment, m);
        for (c, imgs) in data::client_images(&cfg, &pool, &owned)?.iter().enumerate() {
            write_images(&dir.join(format!("client_{c}.bin")), imgs)?;
        }
    }
    Ok(path)
}

fn partition_rows(assignment: &[Option<usize>], m: usize, seed: u64) -> Vec<PartitionRow> {
    crate::partition::partition_rows(assignment, m, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElcheckArgs {
    pub clients: usize,
    pub max_n: usize,
    pub d_h: usize,
    pub instances: usize,
    pub seed: u64,
    /// Adds the all-ones tilt case.
    pub degenerate: bool,
    /// Negative control: perturbs solved multipliers before the constraint check.
    pub corrupt: bool,
}

impl Default for ElcheckArgs {
    fn default() -> Self {
        Self {
            clients: 3,
            max_n: 8,
            d_h: 2,
            instances: 5,
            seed: 0,
            degenerate: false,
            corrupt: false,
        }
    }
}

pub const DUALITY_TOL: f64 = 1e-6;
pub const SUM_TOL: f64 = 1e-10;
pub const TILT_TOL: f64 = 1e-8;

/// Duality and constraint checks on random tiny instances; residuals go to `out`.
pub fn cmd_elcheck(args: &ElcheckArgs, out: &mut impl Write) -> Result<Vec<Check>> {
    if args.clients == 0 || args.max_n < 2 || args.d_h == 0 || args.instances == 0 {
        return Err(Error::config(
            "elcheck needs clients >= 1, max_n >= 2, d_h >= 1, instances >= 1",
        ));
    }
    let mut checks = Vec::new();
    writeln!(out, "instance,N,gap,rho_dev,sum_residual,tilt_residual")?;
    for i in 0..args.instances {
        let data = el::random_instance(
            args.clients,
            args.max_n,
            args.d_h,
            rng::derive_seed(args.seed, &[i as u64]),
        );
        let c = el::duality_check(&data, &LinearHead::zeros(2, args.d_h))?;
        writeln!(
            out,
            "{i},{},{:e},{:e},{:e},{:e}",
            data.samples(),
            c.gap,
            c.rho_deviation,
            c.sum_residual,
            c.tilt_residual
        )?;
        checks.push(Check::new(
            format!("duality[{i}]"),
            c.gap.abs() < DUALITY_TOL && c.rho_deviation < DUALITY_TOL,
            format!("gap {:e}, rho deviation {:e}", c.gap, c.rho_deviation),
        ));
        checks.push(Check::new(
            format!("constraints[{i}]"),
            c.sum_residual < SUM_TOL && c.tilt_residual < TILT_TOL,
            format!("sum {:e}, tilt {:e}", c.sum_residual, c.tilt_residual),
        ));
    }
    if args.degenerate {
        let data = el::random_instance(args.clients, args.max_n, args.d_h, args.seed);
        let n = data.samples();
        let ones = Matrix::from_vec(n, args.clients, vec![1.0; n * args.clients])?;
        let t = TiltMatrix::new(ones, data.client_of.clone())?;
        let sol = el::solve_multipliers(&t)?;
        let gap = el::multiplier_identity_gap(&sol.rho, t.counts());
        let (s, tl) = el::constraint_residuals(&t, &el::atom_weights(&t, &sol.rho)?);
        writeln!(out, "degenerate: {}, rho - n/N {:e}", sol.degenerate, gap)?;
        checks.push(Check::new(
            "degenerate",
            sol.degenerate && gap < DUALITY_TOL && s < SUM_TOL && tl < TILT_TOL,
            format!("flagged {}, rho deviation {gap:e}", sol.degenerate),
        ));
    }
    if args.corrupt {
        let data = el::random_instance(args.clients, args.max_n, args.d_h, args.seed);
        let solved = el::duality_check(&data, &LinearHead::zeros(2, args.d_h))?;
        let t = TiltMatrix::from_head(&data.h, data.client_of.clone(), &solved.primal_head)?;
        let mut rho = solved.rho_at_max;
        rho[0] += 0.25;
        let detail = match el::atom_weights(&t, &rho) {
            Ok(p) => {
                let (s, tl) = el::constraint_residuals(&t, &p);
                writeln!(out, "corrupted: sum {s:e}, tilt {tl:e}")?;
                (s < SUM_TOL && tl < TILT_TOL, format!("sum {s:e}, tilt {tl:e}"))
            }
            Err(e) => (false, e.to_string()),
        };
        checks.push(Check::new("corrupted_multipliers", detail.0, detail.1));
    }
    for c in &checks {
        writeln!(
            out,
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        )?;
    }
    Ok(checks)
}

pub const DRIFT_COLUMNS: [&str; 6] = ["round", "G_client2", "G_class2", "G2", "G2_direct", "rel_err"];

/// Trains the configured federation, logging the drift decomposition every round.
pub fn cmd_drift(config_path: &Path) -> Result<Vec<Check>> {
    let cfg = RunConfig::load(config_path)?;
    let dir = out_dir(&cfg)?;
    let exp = Experiment::load(cfg)?;
    if exp.fed.mode != Mode::Feddrm {
        return Err(Error::config("drift needs mode = \"feddrm\" (a client head)"));
    }
    let views = exp.views();
    let mut state = exp.init_state()?;
    let mut reports = Vec::new();
    federation::run(&mut state, &views, &exp.net, &exp.fed, |s| {
        reports.push((s.round, exp.drift(s)?.expect("client head present")));
        Ok(())
    })?;
    let rel = |d: &metrics::DriftReport| (d.g2 - d.g2_direct).abs() / d.g2_direct.abs().max(f64::MIN_POSITIVE);
    let head = header(&exp.cfg);
    write_csv(
        &dir.join("drift.csv"),
        &head,
        &DRIFT_COLUMNS,
        reports.iter().map(|(r, d)| {
            vec![
                r.to_string(),
                d.g_client2.to_string(),
                d.g_class2.to_string(),
                d.g2.to_string(),
                d.g2_direct.to_string(),
                rel(d).to_string(),
            ]
        }),
    )?;
    let worst = reports.iter().map(|(_, d)| rel(d)).fold(0.0, f64::max);
    let first = &reports[0].1;
    let violations = reports.iter().filter(|(_, d)| d.g_client2 <= d.g_class2).count();
    let checks = vec![
        Check::new("decomposition", worst <= 1e-12, format!("max relative error {worst:e}")),
        Check::new(
            "client_drift_dominates_at_start",
            first.g_client2 > first.g_class2,
            format!("G_client2 {} vs G_class2 {}", first.g_client2, first.g_class2),
        ),
        Check::new(
            "client_drift_dominates_every_round",
            violations == 0,
            format!("{violations} of {} rounds violate", reports.len()),
        ),
    ];
    fs::write(dir.join("drift_verdict.txt"), verdict_text(&head, &checks))?;
    Ok(checks)
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Runs every fixed-embedding experiment of `t` and scores it.
pub fn theory_report(t: &TheorySection, seed: u64) -> Result<(theory::TheoryReport, Vec<Check>)> {
    let spec = theory::benchmark_spec(t.samples, seed);
    let data = crate::partition::synth_theory_generate(&spec)?;
    let p = TheoryProblem::from_data(&data, spec.clients, spec.classes);
    let mle = theory::centralized_mle(&p, t.rho, t.lambda)?;
    let curv = theory::curvature(&p, &mle.zeta, t.lambda, t.rho);
    let lr = t.lr_scale / curv.l_hat;
    let mut steps = t.local_steps.clone();
    steps.sort_unstable();
    let grid: Vec<ConvergencePoint> = steps
        .iter()
        .map(|&e| ConvergencePoint {
            lr,
            local_steps: e,
            lambda: t.lambda,
            rho: t.rho,
            rounds: theory::auto_rounds(lr, e, curv.mu_hat, t.max_rounds),
        })
        .collect();
    let convergence = theory::convergence_experiment(&p, &grid, seed)?;

    let zp = TheoryProblem::identical_clients(&data, spec.clients, spec.classes);
    let zmle = theory::centralized_mle(&zp, t.rho, 1.0)?;
    let zc = theory::curvature(&zp, &zmle.zeta, 1.0, t.rho);
    let zlr = 1.0 / zc.l_hat;
    let zero = theory::convergence_run(
        &zp,
        ConvergencePoint {
            lr: zlr,
            local_steps: 2,
            lambda: 1.0,
            rho: t.rho,
            rounds: theory::auto_rounds(zlr, 2, zc.mu_hat, t.max_rounds),
        },
        seed,
    )?;

    let statistical = if t.stat_sizes.len() >= 2 && t.stat_seeds > 0 {
        Some(theory::statistical_experiment(
            &theory::benchmark_spec(t.stat_sizes[0], seed),
            &t.stat_sizes,
            t.stat_lambda,
            t.stat_rho,
            t.stat_seeds,
        )?)
    } else {
        None
    };
    let lambda_errors = if t.error_lambdas.is_empty() || t.stat_seeds == 0 {
        Vec::new()
    } else {
        theory::statistical_errors(
            &theory::benchmark_spec(t.error_samples, seed),
            &[t.error_samples],
            &t.error_lambdas,
            t.error_rho,
            t.stat_seeds,
        )?
    };
    let lambda_sweep = if t.tradeoff_lambdas.is_empty() || t.tradeoff_seeds == 0 {
        Vec::new()
    } else {
        theory::lambda_tradeoff(&tradeoff_config(t, seed))?
    };

    let mut checks = vec![Check::new(
        "mu_le_l",
        curv.mu_hat <= curv.l_hat,
        format!("mu_hat {} L_hat {}", curv.mu_hat, curv.l_hat),
    )];
    checks.push(Check::new(
        "zero_heterogeneity_plateau",
        zero.plateau < 1e-10,
        format!("plateau {:e}", zero.plateau),
    ));
    let plateaus: Vec<f64> = convergence.iter().map(|r| r.plateau).collect();
    checks.push(Check::new(
        "plateau_non_decreasing_in_E",
        plateaus.windows(2).all(|w| w[1] >= w[0]),
        format!("E {steps:?} plateaus {plateaus:?}"),
    ));
    for r in &convergence {
        let (ok, detail) = match r.contraction {
            Some(c) => (
                c <= r.contraction_bound + 0.05,
                format!("measured {c} bound {}", r.contraction_bound),
            ),
            None => (false, "no pre-plateau rounds to fit".to_string()),
        };
        checks.push(Check::new(format!("contraction_E{}", r.point.local_steps), ok, detail));
    }
    if let Some(s) = &statistical {
        checks.push(Check::new(
            "statistical_slope",
            (-1.3..=-0.7).contains(&s.slope),
            format!("slope {}", s.slope),
        ));
    }
    if lambda_errors.len() >= 2 {
        let (a, b) = (&lambda_errors[0], &lambda_errors[lambda_errors.len() - 1]);
        checks.push(Check::new(
            "client_error_grows_with_lambda",
            b.client_error > a.client_error,
            format!(
                "lambda {} -> {}: {} -> {}",
                a.lambda, b.lambda, a.client_error, b.client_error
            ),
        ));
    }
    let at = |l: f64| lambda_sweep.iter().find(|r| (r.lambda - l).abs() < 1e-12);
    if let (Some(lo), Some(hi)) = (at(0.6), at(0.99)) {
        checks.push(Check::new(
            "client_acc_drops_near_one",
            hi.client_acc < lo.client_acc,
            format!("lambda 0.6: {} lambda 0.99: {}", lo.client_acc, hi.client_acc),
        ));
    }
    if let (Some(lo), Some(hi)) = (at(0.5), at(0.9)) {
        let slack = lo.class_acc_sd.max(hi.class_acc_sd);
        checks.push(Check::new(
            "class_acc_rises_with_lambda",
            hi.class_acc >= lo.class_acc - slack,
            format!(
                "lambda 0.5: {} lambda 0.9: {} slack {slack}",
                lo.class_acc, hi.class_acc
            ),
        ));
    }
    Ok((
        theory::TheoryReport {
            curvature: curv,
            convergence,
            zero_heterogeneity: Some(zero),
            statistical,
            lambda_errors,
            lambda_sweep,
        },
        checks,
    ))
}

pub fn tradeoff_config(t: &TheorySection, seed: u64) -> TradeoffConfig {
    TradeoffConfig {
        spec: theory::tradeoff_spec(t.tradeoff_samples, seed),
        test_samples: 2000,
        lambdas: t.tradeoff_lambdas.clone(),
        seeds: t.tradeoff_seeds,
        rounds: t.tradeoff_rounds,
        local_steps: 2,
        lr: t.tradeoff_lr,
        rho: 1e-3,
        d_g: 1,
        d_h: 1,
    }
}

pub fn cmd_theory(config_path: &Path) -> Result<Vec<Check>> {
    let cfg = RunConfig::load(config_path)?;
    let dir = out_dir(&cfg)?;
    let t = cfg.theory.clone().unwrap_or_default();
    let (report, checks) = theory_report(&t, cfg.seed)?;
    let head = header(&cfg);
    let conv = &report.convergence;
    write_csv(
        &dir.join("convergence.csv"),
        &head,
        &[
            "local_steps",
            "lr",
            "rounds",
            "plateau",
            "contraction",
            "contraction_bound",
            "mu_hat",
            "L_hat",
            "statistical_error",
        ],
        conv.iter().map(|r| {
            vec![
                r.point.local_steps.to_string(),
                f(r.point.lr),
                r.point.rounds.to_string(),
                f(r.plateau),
                r.contraction.map_or("NaN".into(), f),
                f(r.contraction_bound),
                f(r.curvature.mu_hat),
                f(r.curvature.l_hat),
                f(r.statistical_error),
            ]
        }),
    )?;
    write_csv(
        &dir.join("trajectories.csv"),
        &head,
        &["local_steps", "round", "distance", "true_distance"],
        conv.iter()
            .chain(report.zero_heterogeneity.iter())
            .enumerate()
            .flat_map(|(k, r)| {
                let label = if k < conv.len() {
                    r.point.local_steps.to_string()
                } else {
                    "zero_het".to_string()
                };
                r.distances
                    .iter()
                    .zip(&r.true_distances)
                    .enumerate()
                    .map(move |(t, (d, dt))| vec![label.clone(), t.to_string(), f(*d), f(*dt)])
            }),
    )?;
    let stat_rows = report
        .statistical
        .iter()
        .flat_map(|s| s.points.iter())
        .chain(&report.lambda_errors)
        .map(|p| {
            vec![
                p.samples.to_string(),
                f(p.lambda),
                f(p.rho),
                f(p.error),
                f(p.client_error),
                f(p.class_error),
                f(p.error_sd),
            ]
        });
    write_csv(
        &dir.join("statistical.csv"),
        &head,
        &[
            "samples",
            "lambda",
            "rho",
            "error",
            "client_error",
            "class_error",
            "error_sd",
        ],
        stat_rows,
    )?;
    write_csv(
        &dir.join("lambda_tradeoff.csv"),
        &head,
        &[
            "lambda",
            "client_acc",
            "client_acc_sd",
            "class_acc",
            "class_acc_sd",
            "plateau",
        ],
        report.lambda_sweep.iter().map(|r| {
            vec![
                f(r.lambda),
                f(r.client_acc),
                f(r.client_acc_sd),
                f(r.class_acc),
                f(r.class_acc_sd),
                f(r.plateau),
            ]
        }),
    )?;
    fs::write(dir.join("theory_verdict.txt"), verdict_text(&head, &checks))?;
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::data("x")), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::Divergence {
                round: 1,
                step: 0,
                loss: f64::NAN
            }),
            EXIT_DIVERGENCE
        );
    }

    #[test]
    fn elcheck_defaults_pass_and_corruption_fails() {
        let mut sink = Vec::new();
        let ok = cmd_elcheck(
            &ElcheckArgs {
                degenerate: true,
                ..Default::default()
            },
            &mut sink,
        )
        .unwrap();
        assert_eq!(verdict_code(&ok), EXIT_OK, "{}", String::from_utf8_lossy(&sink));
        let bad = cmd_elcheck(
            &ElcheckArgs {
                corrupt: true,
                instances: 1,
                ..Default::default()
            },
            &mut Vec::new(),
        )
        .unwrap();
        assert_eq!(verdict_code(&bad), EXIT_TOLERANCE);
    }

    #[test]
    fn summary_uses_sample_std_over_window() {
        let cfg = RunConfig::from_toml("seed = 1\noutput_dir = \"o\"\nwindow = 2\n").unwrap();
        let row = |round, v| RoundRow {
            round,
            train_loss: v,
            client_ce: v,
            target_ce: v,
            avg_acc: v,
            sys_acc: v,
            route_acc: v,
            g_client2: v,
            g_class2: v,
        };
        let s = summarize(&cfg, &[row(0, 100.0), row(1, 1.0), row(2, 3.0)]);
        let m = &s.metrics["sys_acc"];
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!((s.first_round, s.last_round), (1, 2));
    }
}
