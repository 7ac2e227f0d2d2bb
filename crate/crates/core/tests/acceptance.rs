//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line; the
//! process fails if any criterion does.
//!
//! Run with `cargo test --release --test acceptance`.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use feddrm::cli::config::{RunConfig, TheorySection};
use feddrm::cli::{self, Experiment};
use feddrm::el::{self, TiltMatrix};
use feddrm::federation::{self, client_weights, ClientView, FederationConfig, FederationState, LrSchedule, Mode};
use feddrm::loss::{reweighted_loss, reweighted_loss_value, Batch, ClientParams, Inputs, LinearHead};
use feddrm::metrics::{self, embed_all, Embedded};
use feddrm::net::{init_params, Activation, NetConfig, Sharing};
use feddrm::partition::{
    bayes_route, dirichlet_partition, partition_rows, shard_partition, train_test_split, write_partition_csv,
};
use feddrm::rng::{self, tag};
use feddrm::theory::lambda_tradeoff;
use feddrm::{Matrix, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn within(budget: Duration, elapsed: Duration) -> bool {
    elapsed <= budget
}

// 1 and 2 share the solved instances.
struct ElRun {
    gap: f64,
    rho_dev: f64,
    sum: f64,
    tilt: f64,
    extra_solves: usize,
}

fn el_instances() -> Result<ElRun> {
    let mut out = ElRun {
        gap: 0.0,
        rho_dev: 0.0,
        sum: 0.0,
        tilt: 0.0,
        extra_solves: 0,
    };
    for i in 0..25u64 {
        let m = 2 + (i % 3) as usize;
        let data = el::random_instance(m, 10, 2, rng::derive_seed(2024, &[i]));
        let c = el::duality_check(&data, &LinearHead::zeros(2, 2))?;
        out.gap = out.gap.max(c.gap.abs());
        out.rho_dev = out.rho_dev.max(c.rho_deviation);
        out.sum = out.sum.max(c.sum_residual);
        out.tilt = out.tilt.max(c.tilt_residual);
        // The all-ones tilt is feasible for every instance and exercises the
        // degenerate branch of the solver.
        let n = data.samples();
        let t = TiltMatrix::new(Matrix::from_vec(n, m, vec![1.0; n * m])?, data.client_of.clone())?;
        let sol = el::solve_multipliers(&t)?;
        let (a, b) = el::constraint_residuals(&t, &el::atom_weights(&t, &sol.rho)?);
        out.sum = out.sum.max(a);
        out.tilt = out.tilt.max(b);
        out.extra_solves += 1;
    }
    Ok(out)
}

fn criterion_el(run: &Result<ElRun>, elapsed: Duration) -> (Outcome, Outcome) {
    match run {
        Ok(r) => (
            Outcome::new(
                r.gap < 1e-6 && r.rho_dev < 1e-6 && within(Duration::from_secs(60), elapsed),
                format!(
                    "25 instances, max gap {:.2e}, max rho deviation {:.2e}, {elapsed:.1?}",
                    r.gap, r.rho_dev
                ),
            ),
            Outcome::new(
                r.sum < 1e-10 && r.tilt < 1e-8,
                format!(
                    "{} solves, max |sum p - 1| {:.2e}, max tilt residual {:.2e}",
                    25 + r.extra_solves,
                    r.sum,
                    r.tilt
                ),
            ),
        ),
        Err(e) => (Outcome::new(false, e.to_string()), Outcome::new(false, e.to_string())),
    }
}

fn random_head(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> LinearHead {
    LinearHead {
        classes,
        dim,
        params: (0..classes * (dim + 1)).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn criterion_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let sharings = [Sharing::None, Sharing::Shallow, Sharing::Mid, Sharing::Deep];
    let mut worst = [0.0f64; 3];
    let mut checked = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (m, k) = (rng.random_range(2..5), rng.random_range(2..5));
        let net = NetConfig {
            input_dim: 3,
            g_layers: vec![5, 4],
            h_layers: vec![3],
            sharing: sharings[seed as usize % 4],
            activation: Activation::Tanh,
            fixed_embedding: false,
        };
        let params = ClientParams {
            embed: init_params(&net, seed)?,
            client_head: Some(random_head(m, net.d_h(), &mut rng)),
            target_head: random_head(k, net.d_g(), &mut rng),
        };
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let x = Matrix::from_rows(&rows)?;
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..k)).collect();
        let batch = Batch::full(Inputs::Raw(&x), &y, rng.random_range(0..m));
        let lambda = rng.random_range(0.05..0.95);
        let rho = rng.random_range(0.0..0.1);
        let (_, grad) = reweighted_loss(&batch, &params, &net, lambda, rho)?;

        // Group sizes in flatten order: embedding, client head, target head.
        let groups = [
            params.embed.flatten().len(),
            params.client_head.as_ref().map_or(0, |h| h.params.len()),
            params.target_head.params.len(),
        ];
        let analytic = grad.flatten();
        let flat = params.flatten();
        let f = |v: &[f64]| -> Result<f64> {
            let mut p = params.clone();
            p.read_flat(v)?;
            Ok(reweighted_loss_value(&batch, &p, &net, lambda, rho)?.total)
        };
        let step = 1e-6;
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += step;
            let mut dn = flat.clone();
            dn[i] -= step;
            let numeric = (f(&up)? - f(&dn)?) / (2.0 * step);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
            let group = if i < groups[0] {
                0
            } else if i < groups[0] + groups[1] {
                1
            } else {
                2
            };
            worst[group] = worst[group].max(rel);
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        worst.iter().all(|&w| w < 1e-5) && within(Duration::from_secs(60), elapsed),
        format!(
            "10 instances, {checked} coordinates, max relative error embedding {:.1e} client head {:.1e} target head {:.1e}, {elapsed:.1?}",
            worst[0], worst[1], worst[2]
        ),
    ))
}

const DRIFT_TOML: &str = r#"
seed = 3
output_dir = "unused"

[data]
kind = "synthetic"
clients = 3
classes = 10
dim = 8
tilt_scale = 1.0
head_scale = 1.0
train_per_client = 400
test_per_client = 100

[model]
g_layers = [16]
h_layers = [8]
activation = "tanh"
fixed_embedding = true

[federation]
rounds = 50
local_steps = 5
lr = 0.1
lambda = 0.5
"#;

fn criterion_drift() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut first = None;
    let mut violations = 0;
    let mut rounds = 0;
    // The decomposition is also checked away from the configured lambda.
    for lambda in [0.5, 0.2, 0.9] {
        let exp = Experiment::load(RunConfig::from_toml(
            &DRIFT_TOML.replace("lambda = 0.5", &format!("lambda = {lambda}")),
        )?)?;
        let views = exp.views();
        let mut state = exp.init_state()?;
        federation::run(&mut state, &views, &exp.net, &exp.fed, |s| {
            let d = exp.drift(s)?.expect("client head");
            worst = worst.max((d.g2 - d.g2_direct).abs() / d.g2_direct.abs());
            if lambda == 0.5 {
                first.get_or_insert((d.g_client2, d.g_class2));
                violations += usize::from(d.g_client2 <= d.g_class2);
                rounds += 1;
            }
            Ok(())
        })?;
    }
    let (c0, k0) = first.expect("round 0 observed");
    Ok(Outcome::new(
        worst <= 1e-12 && c0 > k0 && violations == 0,
        format!(
            "max relative error {worst:.1e}; round 0 G_client2 {c0:.3} > G_class2 {k0:.3}; {violations} of {rounds} rounds violate"
        ),
    ))
}

fn reduction_data(m: usize, seed: u64) -> Vec<(Matrix, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|i| {
            let n = 20 + 7 * i;
            let x = Matrix::from_vec(
                n,
                4,
                (0..n * 4)
                    .map(|_| rng.random_range(-1.0..1.0) + 0.4 * i as f64)
                    .collect(),
            )
            .unwrap();
            let y = (0..n).map(|_| rng.random_range(0..3)).collect();
            (x, y)
        })
        .collect()
}

fn reduction_views(d: &[(Matrix, Vec<usize>)]) -> Vec<ClientView<'_>> {
    d.iter()
        .map(|(x, y)| ClientView {
            inputs: Inputs::Raw(x),
            labels: y,
        })
        .collect()
}

fn criterion_reduction() -> Result<Outcome> {
    let net = NetConfig {
        input_dim: 4,
        g_layers: vec![6, 5],
        h_layers: vec![3],
        sharing: Sharing::Mid,
        activation: Activation::Tanh,
        fixed_embedding: false,
    };
    let base = FederationConfig {
        rounds: 1,
        local_steps: 1,
        lr: 0.2,
        lambda: 0.7,
        weight_decay: 1e-3,
        momentum: 0.0,
        schedule: LrSchedule::Constant,
        batch_size: None,
        shared_target: true,
        mode: Mode::Feddrm,
        seed: 11,
    };

    // One round against one explicit step on the n_i / N weighted gradient.
    let d = reduction_data(4, 1);
    let v = reduction_views(&d);
    let mut state = FederationState::init(&net, v.len(), 3, &base)?;
    let start = state.client_params(0);
    let w = client_weights(&v.iter().map(ClientView::len).collect::<Vec<_>>());
    let mut global = vec![0.0; start.num_params()];
    for (i, ci) in v.iter().enumerate() {
        let (_, g) = reweighted_loss(
            &Batch::full(ci.inputs, ci.labels, i),
            &start,
            &net,
            base.lambda,
            base.weight_decay,
        )?;
        for (a, b) in global.iter_mut().zip(g.flatten()) {
            *a += w[i] * b;
        }
    }
    let expect: Vec<f64> = start
        .flatten()
        .iter()
        .zip(&global)
        .map(|(p, g)| p - base.lr * g)
        .collect();
    federation::run_round(&mut state, &v, &net, &base)?;
    let gd_err = state
        .client_params(0)
        .flatten()
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // m = 1 with minibatches, momentum, weight decay and a cosine schedule.
    let d1 = reduction_data(1, 2);
    let v1 = reduction_views(&d1);
    let sgd = FederationConfig {
        rounds: 6,
        local_steps: 3,
        momentum: 0.9,
        batch_size: Some(8),
        schedule: LrSchedule::Cosine,
        shared_target: false,
        ..base.clone()
    };
    let mut fed = FederationState::init(&net, 1, 3, &sgd)?;
    let mut central = fed.client_params(0);
    federation::run(&mut fed, &v1, &net, &sgd, |_| Ok(()))?;
    let n = v1[0].len();
    let mut buf = vec![0.0; central.num_params()];
    for round in 0..sgd.rounds {
        let lr = sgd.lr_at(round);
        let mut rng = rng::stream(sgd.seed, &[tag::MINIBATCH, 0, round as u64]);
        for _ in 0..sgd.local_steps {
            let mut rows = rand::seq::index::sample(&mut rng, n, 8).into_vec();
            rows.sort_unstable();
            let batch = Batch {
                inputs: v1[0].inputs,
                labels: v1[0].labels,
                rows: Some(&rows),
                client: 0,
            };
            let (_, g) = reweighted_loss(&batch, &central, &net, sgd.lambda, sgd.weight_decay)?;
            let mut flat = central.flatten();
            for ((p, b), gi) in flat.iter_mut().zip(buf.iter_mut()).zip(g.flatten()) {
                *b = sgd.momentum * *b + gi;
                *p -= lr * *b;
            }
            central.read_flat(&flat)?;
        }
    }
    let bitwise = fed
        .client_params(0)
        .flatten()
        .iter()
        .zip(central.flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(Outcome::new(
        gd_err < 1e-12 && bitwise,
        format!("one round vs one GD step max deviation {gd_err:.1e}; m = 1 bitwise equal to SGD: {bitwise}"),
    ))
}

fn theory_outcomes() -> Result<(Outcome, Outcome)> {
    let start = Instant::now();
    let t = TheorySection::default();
    let (report, checks) = cli::theory_report(&t, 1)?;
    let elapsed = start.elapsed();
    let verdict = |names: &[&str]| -> (bool, String) {
        let picked: Vec<_> = checks
            .iter()
            .filter(|c| names.iter().any(|n| c.name.starts_with(n)))
            .collect();
        let ok = !picked.is_empty() && picked.iter().all(|c| c.passed);
        let failed: Vec<&str> = picked.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        (
            ok,
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed {failed:?}")
            },
        )
    };
    let (ok6, fail6) = verdict(&[
        "statistical_slope",
        "zero_heterogeneity_plateau",
        "plateau_non_decreasing_in_E",
        "client_error_grows_with_lambda",
    ]);
    let slope = report.statistical.as_ref().map_or(f64::NAN, |s| s.slope);
    let zero = report.zero_heterogeneity.as_ref().map_or(f64::NAN, |z| z.plateau);
    let plateaus: Vec<String> = report
        .convergence
        .iter()
        .map(|r| format!("{:.1e}", r.plateau))
        .collect();
    let errs: Vec<String> = report
        .lambda_errors
        .iter()
        .map(|p| format!("{}:{:.3}", p.lambda, p.client_error))
        .collect();
    let six = Outcome::new(
        ok6 && within(Duration::from_secs(600), elapsed),
        format!(
            "slope {slope:.3} ({} seeds); zero-heterogeneity plateau {zero:.1e}; plateaus over E [{}]; client error by lambda [{}]; {elapsed:.1?} for all fixed-embedding runs{fail6}",
            t.stat_seeds,
            plateaus.join(", "),
            errs.join(", ")
        ),
    );
    let (ok8, fail8) = verdict(&["client_acc_drops_near_one", "class_acc_rises_with_lambda"]);
    let rows: Vec<String> = report
        .lambda_sweep
        .iter()
        .map(|r| {
            format!(
                "{}: client {:.3}±{:.3} class {:.3}±{:.3}",
                r.lambda, r.client_acc, r.client_acc_sd, r.class_acc, r.class_acc_sd
            )
        })
        .collect();
    // Same experiment on other ground truths; reported, not required.
    let holds: Vec<bool> = (2..6u64)
        .map(|seed| {
            let r = lambda_tradeoff(&cli::tradeoff_config(&t, seed))?;
            let at = |l: f64| r.iter().find(|x| x.lambda == l).expect("grid point");
            let (lo, mid, hi, top) = (at(0.5), at(0.6), at(0.9), at(0.99));
            Ok(top.client_acc < mid.client_acc && hi.class_acc >= lo.class_acc - lo.class_acc_sd.max(hi.class_acc_sd))
        })
        .collect::<Result<_>>()?;
    let eight = Outcome::new(
        ok8,
        format!(
            "{} seeds; {}; direction holds on {} of {} other ground truths{fail8}",
            t.tradeoff_seeds,
            rows.join("; "),
            holds.iter().filter(|&&h| h).count(),
            holds.len()
        ),
    );
    Ok((six, eight))
}

const ROUTING_TOML: &str = r#"
seed = 1
output_dir = "unused"

[data]
kind = "routing"
train_per_client = 2000
test_per_client = 1000

[model]
g_layers = [16]
h_layers = [8]
activation = "tanh"

[federation]
rounds = 60
local_steps = 5
lr = 0.1
lambda = 0.7
momentum = 0.5
batch_size = 128
"#;

fn criterion_routing() -> Result<Outcome> {
    let start = Instant::now();
    let exp = Experiment::load(RunConfig::from_toml(ROUTING_TOML)?)?;
    let spec = exp.data.synth.clone().expect("synthetic benchmark");
    let min_gap = (0..3)
        .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
        .map(|(i, j)| {
            spec.tilts[i]
                .iter()
                .zip(&spec.tilts[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    let views = exp.views();
    let mut state = exp.init_state()?;
    federation::run(&mut state, &views, &exp.net, &exp.fed, |_| Ok(()))?;

    let x = Matrix::vstack(&exp.data.clients.iter().map(|c| &c.test.x).collect::<Vec<_>>())?;
    let labels: Vec<usize> = exp.data.clients.iter().flat_map(|c| c.test.y.iter().copied()).collect();
    let emb: Embedded = embed_all(&x, &state.embed, &exp.net)?;
    let sizes: Vec<usize> = exp.data.clients.iter().map(|c| c.train.len()).collect();
    let learned = metrics::route_all(&emb, &state.heads);
    let agree = (0..x.rows())
        .filter(|&r| learned[r] == bayes_route(x.row(r), &spec.tilts, &sizes))
        .count() as f64
        / x.rows() as f64;
    let sys = metrics::system_accuracy(&emb, &labels, &state.heads);
    let vote = metrics::majority_vote_accuracy(&emb, &labels, &state.heads, sizes.len());
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        min_gap >= 6.0 && agree >= 0.95 && sys >= vote && within(Duration::from_secs(300), elapsed),
        format!(
            "min tilt distance {min_gap:.2}; Bayes agreement {agree:.4}; system accuracy {sys:.4} vs majority vote {vote:.4}; {elapsed:.1?}"
        ),
    ))
}

fn criterion_partition() -> Result<Outcome> {
    let labels: Vec<usize> = (0..3000).map(|i| (i * 7 + i / 13) % 10).collect();
    let mut max_support_excess = 0i64;
    for (m, s) in [(10, 2), (20, 1), (7, 3)] {
        for seed in 0..5 {
            let part = shard_partition(&labels, m, s, seed)?;
            for c in 0..m {
                let mut seen = [false; 10];
                for (i, a) in part.assignment.iter().enumerate() {
                    if *a == Some(c) {
                        seen[labels[i]] = true;
                    }
                }
                let support = seen.iter().filter(|&&b| b).count() as i64;
                max_support_excess = max_support_excess.max(support - s as i64);
            }
        }
    }
    let mut max_prop_err = 0.0f64;
    for alpha in [0.05, 0.3, 1.0, 10.0] {
        for seed in 0..5 {
            let part = dirichlet_partition(&labels, 8, alpha, seed)?;
            for p in &part.proportions {
                max_prop_err = max_prop_err.max((p.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let mut max_split_dev = 0.0f64;
    for n in 1..400 {
        let (train, test) = train_test_split(n, 3, n % 5);
        max_split_dev = max_split_dev.max((train.len() as f64 - 0.7 * n as f64).abs());
        max_split_dev = max_split_dev.max((test.len() as f64 - 0.3 * n as f64).abs());
    }
    let csv = |seed: u64| -> Result<Vec<u8>> {
        let part = dirichlet_partition(&labels, 8, 0.3, seed)?;
        let assignment: Vec<Option<usize>> = part.assignment.into_iter().map(Some).collect();
        let mut out = Vec::new();
        write_partition_csv(&mut out, "partition", &partition_rows(&assignment, 8, seed))?;
        Ok(out)
    };
    let identical = csv(9)? == csv(9)?;
    let differs = csv(9)? != csv(10)?;
    Ok(Outcome::new(
        max_support_excess <= 0 && max_prop_err < 1e-12 && max_split_dev <= 1.0 && identical && differs,
        format!(
            "shard support excess {max_support_excess}; Dirichlet |sum - 1| {max_prop_err:.1e}; split deviation {max_split_dev:.2}; reruns identical {identical}, other seed differs {differs}"
        ),
    ))
}

const DETERMINISM_TOML: &str = r#"
seed = 21
output_dir = "OUT"
window = 5
checkpoint_every = 4

[data]
kind = "routing"
train_per_client = 300
test_per_client = 100

[model]
g_layers = [12, 8]
h_layers = [6]
sharing = "mid"

[federation]
rounds = 10
local_steps = 3
lr = 0.05
lambda = 0.8
weight_decay = 1e-4
momentum = 0.9
schedule = "cosine"
batch_size = 32
"#;

fn criterion_determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("run");
    let text = DETERMINISM_TOML.replace("OUT", &out.display().to_string());
    let mut outputs = Vec::new();
    for threads in [1, 4, 4, 1] {
        let cfg = RunConfig::from_toml(&text)?;
        let res = cli::in_pool(Some(threads), || cli::run_experiment(cfg))??;
        outputs.push((
            fs::read(&res.csv)?,
            fs::read(&res.summary)?,
            fs::read(out.join("checkpoints/final.ckpt"))?,
        ));
        fs::remove_dir_all(&out)?;
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    Ok(Outcome::new(
        same,
        format!("4 runs at 1 and 4 threads; CSV, summary and checkpoint byte-identical: {same}"),
    ))
}

fn report(id: usize, name: &str, outcome: Result<Outcome>) -> bool {
    let o = outcome.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    println!(
        "[{}] {id:>2} {name}: {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
    o.passed
}

fn main() {
    let mut results = Vec::new();
    let start = Instant::now();
    let run = el_instances();
    let (one, two) = criterion_el(&run, start.elapsed());
    results.push(report(1, "empirical-likelihood duality", Ok(one)));
    results.push(report(2, "constraint satisfaction", Ok(two)));
    results.push(report(3, "gradient correctness", criterion_gradients()));
    results.push(report(4, "drift decomposition", criterion_drift()));
    results.push(report(5, "FedAvg reduction", criterion_reduction()));
    let (six, eight) = match theory_outcomes() {
        Ok((a, b)) => (Ok(a), Ok(b)),
        Err(e) => (Ok(Outcome::new(false, format!("error: {e}"))), Err(e)),
    };
    results.push(report(6, "fixed-embedding trends", six));
    results.push(report(7, "routing", criterion_routing()));
    results.push(report(8, "lambda trade-off", eight));
    results.push(report(9, "partitioner contracts", criterion_partition()));
    results.push(report(10, "determinism", criterion_determinism()));
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
