//! Non-IID federated datasets: label-shift partitioners, covariate shifts and
//! synthetic generators with known ground truth.

mod io;
mod shift;
mod synth;

pub use io::{
    read_images, read_partition_csv, read_tabular_csv, write_images, write_partition_csv, write_tabular_csv, ImageSet,
    PartitionRow, Split,
};
pub use shift::{apply_covariate_shift, hsv_to_rgb, preset_specs, rgb_to_hsv, ShiftPreset, ShiftSpec};
pub use synth::{
    bayes_route, mat_vec, random_tilt_spec, routing_benchmark, synth_drm_generate, synth_theory_generate,
    synth_theory_with_truth, theory_truth, DrmTruth, SynthData, SynthSpec, TheoryData, TheorySpec, TheoryTruth,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Retry cap for Dirichlet draws that leave a client empty.
pub const DIRICHLET_RETRIES: usize = 100;
/// Fraction of every client's samples kept for training.
pub const TRAIN_FRACTION: f64 = 0.7;

/// Features with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::data(format!("{} feature rows but {} labels", x.rows(), y.len())));
        }
        if let Some(bad) = y.iter().find(|&&v| v >= classes) {
            return Err(Error::data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }
}

/// One client's train and test data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Which client owns each sample, plus the per-class proportion vectors drawn.
#[derive(Debug, Clone)]
pub struct DirichletPartition {
    pub assignment: Vec<usize>,
    /// `proportions[k]` is the client distribution drawn for class `k`.
    pub proportions: Vec<Vec<f64>>,
    pub attempts: usize,
}

fn dirichlet_draw<R: Rng>(alpha: f64, m: usize, rng: &mut R) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    loop {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Dirichlet label-shift partition. Each class draws client proportions from
/// `Dirichlet(alpha * 1_m)` and every sample of that class picks its client
/// categorically; draws that leave a client empty are repeated.
pub fn dirichlet_partition(labels: &[usize], m: usize, alpha: f64, seed: u64) -> Result<DirichletPartition> {
    if m == 0 || labels.len() < m {
        return Err(Error::Partition(format!(
            "need at least m = {m} >= 1 samples, got {}",
            labels.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!(
            "Dirichlet concentration must be positive, got {alpha}"
        )));
    }
    let classes = labels.iter().max().map_or(0, |&k| k + 1);
    let mut rng = rng::stream(seed, &[tag::PARTITION]);
    for attempt in 1..=DIRICHLET_RETRIES {
        let proportions: Vec<Vec<f64>> = (0..classes).map(|_| dirichlet_draw(alpha, m, &mut rng)).collect();
        let mut assignment = vec![0; labels.len()];
        let mut sizes = vec![0usize; m];
        for (slot, &k) in assignment.iter_mut().zip(labels) {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut client = m - 1;
            for (i, p) in proportions[k].iter().enumerate() {
                acc += p;
                if u < acc {
                    client = i;
                    break;
                }
            }
            *slot = client;
            sizes[client] += 1;
        }
        if !sizes.contains(&0) {
            return Ok(DirichletPartition {
                assignment,
                proportions,
                attempts: attempt,
            });
        }
    }
    Err(Error::Partition(format!(
        "every Dirichlet draw left a client empty after {DIRICHLET_RETRIES} attempts"
    )))
}

#[derive(Debug, Clone)]
pub struct ShardPartition {
    /// `None` marks a sample dropped as leftover.
    pub assignment: Vec<Option<usize>>,
    pub shard_size: usize,
    pub dropped: usize,
}

/// `S` shards per client. Shards are cut within each class so they stay
/// label-homogeneous; the size starts at `floor(N / (m S))` and shrinks until
/// the classes yield `m S` of them. Surplus shards and per-class remainders
/// are dropped.
pub fn shard_partition(labels: &[usize], m: usize, shards_per_client: usize, seed: u64) -> Result<ShardPartition> {
    let total = m * shards_per_client;
    if m == 0 || shards_per_client == 0 || total > labels.len() {
        return Err(Error::Partition(format!(
            "cannot cut {total} shards from {} samples",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&k| k + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &k) in labels.iter().enumerate() {
        by_class[k].push(i);
    }
    let mut size = labels.len() / total;
    while by_class.iter().map(|c| c.len() / size).sum::<usize>() < total {
        size -= 1;
    }
    let shards: Vec<&[usize]> = by_class.iter().flat_map(|c| c.chunks_exact(size)).collect();
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::PARTITION]));

    let mut assignment = vec![None; labels.len()];
    for (slot, &s) in order.iter().take(total).enumerate() {
        let client = slot / shards_per_client;
        for &i in shards[s] {
            assignment[i] = Some(client);
        }
    }
    let dropped = assignment.iter().filter(|a| a.is_none()).count();
    if dropped > 0 {
        log::info!("shard partition dropped {dropped} leftover samples (shard size {size})");
    }
    Ok(ShardPartition {
        assignment,
        shard_size: size,
        dropped,
    })
}

/// Seeded 70/30 split of `n` local indices: `round(0.7 n)` go to training.
pub fn train_test_split(n: usize, seed: u64, client: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[tag::SPLIT, client as u64]));
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Groups a pooled dataset by client assignment and splits each client.
/// Samples assigned `None` are skipped.
pub fn build_clients(data: &Dataset, assignment: &[Option<usize>], m: usize, seed: u64) -> Result<Vec<ClientData>> {
    if assignment.len() != data.len() {
        return Err(Error::contract("assignment length differs from dataset"));
    }
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, a) in assignment.iter().enumerate() {
        if let Some(c) = *a {
            if c >= m {
                return Err(Error::contract(format!("client {c} outside [0, {m})")));
            }
            owned[c].push(i);
        }
    }
    owned
        .into_iter()
        .enumerate()
        .map(|(c, idx)| {
            let (train, test) = train_test_split(idx.len(), seed, c);
            if train.is_empty() {
                return Err(Error::Partition(format!("client {c} has no training samples")));
            }
            let pick = |local: &[usize]| local.iter().map(|&j| idx[j]).collect::<Vec<_>>();
            Ok(ClientData {
                client_id: c,
                train: data.select(&pick(&train)),
                test: data.select(&pick(&test)),
            })
        })
        .collect()
}

/// Per-sample `(client, split)` rows for a partition, in sample order.
pub fn partition_rows(assignment: &[Option<usize>], m: usize, seed: u64) -> Vec<PartitionRow> {
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, a) in assignment.iter().enumerate() {
        if let Some(c) = *a {
            owned[c].push(i);
        }
    }
    let mut rows = Vec::new();
    for (c, idx) in owned.iter().enumerate() {
        let (train, test) = train_test_split(idx.len(), seed, c);
        rows.extend(train.iter().map(|&j| PartitionRow {
            sample_index: idx[j],
            client_id: c,
            split: Split::Train,
        }));
        rows.extend(test.iter().map(|&j| PartitionRow {
            sample_index: idx[j],
            client_id: c,
            split: Split::Test,
        }));
    }
    rows.sort_by_key(|r| r.sample_index);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect()
    }

    #[test]
    fn single_client_takes_everything() {
        let y = labels(3, 5);
        let p = dirichlet_partition(&y, 1, 0.3, 0).unwrap();
        assert!(p.assignment.iter().all(|&c| c == 0));
        let s = shard_partition(&y, 1, 3, 0).unwrap();
        assert!(s.assignment.iter().all(|&c| c == Some(0)));
    }

    #[test]
    fn dirichlet_proportions_sum_to_one() {
        let y = labels(10, 50);
        let p = dirichlet_partition(&y, 8, 0.3, 0).unwrap();
        for row in &p.proportions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    /// Re-runs the stream with an independent categorical lookup.
    fn dirichlet_oracle(labels: &[usize], m: usize, alpha: f64, seed: u64) -> Vec<usize> {
        let classes = labels.iter().max().unwrap() + 1;
        let mut rng = rng::stream(seed, &[tag::PARTITION]);
        loop {
            let gamma = Gamma::new(alpha, 1.0).unwrap();
            let props: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    let d: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
                    let s: f64 = d.iter().sum();
                    d.iter().map(|v| v / s).collect()
                })
                .collect();
            let cdfs: Vec<Vec<f64>> = props
                .iter()
                .map(|p| {
                    p.iter()
                        .scan(0.0, |acc, v| {
                            *acc += v;
                            Some(*acc)
                        })
                        .collect()
                })
                .collect();
            let out: Vec<usize> = labels
                .iter()
                .map(|&k| {
                    let u: f64 = rng.random();
                    cdfs[k].partition_point(|&c| c <= u).min(m - 1)
                })
                .collect();
            if (0..m).all(|c| out.contains(&c)) {
                return out;
            }
        }
    }

    #[test]
    fn dirichlet_matches_reexecution_oracle() {
        let y: Vec<usize> = (0..2000).map(|i| (i * 7) % 10).collect();
        let p = dirichlet_partition(&y, 8, 0.3, 0).unwrap();
        let oracle = dirichlet_oracle(&y, 8, 0.3, 0);
        assert_eq!(p.assignment, oracle);
        let sizes = |a: &[usize]| {
            (0..8)
                .map(|c| a.iter().filter(|&&v| v == c).count())
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(&p.assignment), sizes(&oracle));
    }

    #[test]
    fn dirichlet_rejects_bad_inputs() {
        assert!(matches!(
            dirichlet_partition(&[0, 1], 3, 0.3, 0),
            Err(Error::Partition(_))
        ));
        assert!(dirichlet_partition(&[0, 1, 1], 2, 0.0, 0).is_err());
    }

    #[test]
    fn equal_shards_give_equal_clients() {
        let y = labels(10, 10);
        let s = shard_partition(&y, 2, 5, 0).unwrap();
        assert_eq!(s.dropped, 0);
        for c in 0..2 {
            assert_eq!(s.assignment.iter().filter(|&&a| a == Some(c)).count(), 50);
        }
    }

    #[test]
    fn shard_label_support_is_bounded() {
        let y = labels(10, 10);
        let s = shard_partition(&y, 2, 5, 0).unwrap();
        for c in 0..2 {
            let support: BTreeSet<usize> = (0..y.len())
                .filter(|&i| s.assignment[i] == Some(c))
                .map(|i| y[i])
                .collect();
            assert!(support.len() <= 5);
        }
    }

    #[test]
    fn shard_matches_permutation_oracle() {
        let y = labels(4, 6);
        let s = shard_partition(&y, 2, 2, 0).unwrap();
        // Shard size 6 gives one shard per class, shard k = class k.
        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut rng::stream(0, &[tag::PARTITION]));
        for (slot, &shard) in order.iter().enumerate() {
            for i in shard * 6..(shard + 1) * 6 {
                assert_eq!(s.assignment[i], Some(slot / 2));
            }
        }
    }

    #[test]
    fn shard_leftovers_are_dropped() {
        let y: Vec<usize> = (0..23).map(|i| i % 3).collect();
        let s = shard_partition(&y, 2, 2, 1).unwrap();
        let kept = s.assignment.iter().filter(|a| a.is_some()).count();
        assert_eq!(kept, 4 * s.shard_size);
        assert_eq!(kept + s.dropped, 23);
        assert!(shard_partition(&y, 6, 4, 1).is_err());
    }

    #[test]
    fn split_sizes_are_within_one_sample() {
        for n in 1..60 {
            let (tr, te) = train_test_split(n, 3, 1);
            assert!((tr.len() as f64 - 0.7 * n as f64).abs() <= 0.5);
            assert!((te.len() as f64 - 0.3 * n as f64).abs() <= 0.5);
            let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    proptest! {
        #[test]
        fn partitions_are_complete(seed in 0u64..500, m in 1usize..5) {
            let y: Vec<usize> = (0..60).map(|i| (i * 5 + seed as usize) % 6).collect();
            let p = dirichlet_partition(&y, m, 0.5, seed).unwrap();
            let rows = partition_rows(&p.assignment.iter().map(|&c| Some(c)).collect::<Vec<_>>(), m, seed);
            prop_assert_eq!(rows.len(), y.len());
            for (i, r) in rows.iter().enumerate() {
                prop_assert_eq!(r.sample_index, i);
                prop_assert_eq!(r.client_id, p.assignment[i]);
            }
        }

        #[test]
        fn partitions_are_deterministic(seed in 0u64..1000) {
            let y = labels(5, 12);
            prop_assert_eq!(
                dirichlet_partition(&y, 3, 0.3, seed).unwrap().assignment,
                dirichlet_partition(&y, 3, 0.3, seed).unwrap().assignment
            );
            prop_assert_eq!(
                shard_partition(&y, 3, 2, seed).unwrap().assignment,
                shard_partition(&y, 3, 2, seed).unwrap().assignment
            );
        }
    }

    #[test]
    fn build_clients_covers_the_pool() {
        let y = labels(3, 10);
        let x = Matrix::from_vec(30, 1, (0..30).map(|v| v as f64).collect()).unwrap();
        let data = Dataset::new(x, y, 3).unwrap();
        let s = shard_partition(&data.y, 3, 1, 2).unwrap();
        let clients = build_clients(&data, &s.assignment, 3, 2).unwrap();
        let mut seen: Vec<f64> = clients
            .iter()
            .flat_map(|c| {
                c.train
                    .x
                    .as_slice()
                    .iter()
                    .chain(c.test.x.as_slice())
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..30).map(|v| v as f64).collect::<Vec<_>>());
        assert!(clients.iter().all(|c| c.train.len() == 7 && c.test.len() == 3));
    }
}
