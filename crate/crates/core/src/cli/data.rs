//! Turns a run configuration into per-client train/test sets.

use std::fs;
use std::path::Path;

use super::config::{DataConfig, PartitionConfig, RunConfig};
use crate::partition::{
    apply_covariate_shift, dirichlet_partition, preset_specs, random_tilt_spec, read_images, read_tabular_csv,
    routing_benchmark, shard_partition, synth_drm_generate, train_test_split, ClientData, Dataset, ImageSet, ShiftSpec,
    SynthSpec,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub clients: Vec<ClientData>,
    pub classes: usize,
    pub input_dim: usize,
    /// Generator behind synthetic data.
    pub synth: Option<SynthSpec>,
}

/// One integer per non-empty, non-`#` line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::data(format!("{}:{}: bad label {l:?}", path.display(), i + 1)))
        })
        .collect()
}

pub fn partition_assignment(labels: &[usize], cfg: &PartitionConfig, seed: u64) -> Result<Vec<Option<usize>>> {
    match *cfg {
        PartitionConfig::Dirichlet { clients, alpha } => Ok(dirichlet_partition(labels, clients, alpha, seed)?
            .assignment
            .into_iter()
            .map(Some)
            .collect()),
        PartitionConfig::Shards {
            clients,
            shards_per_client,
        } => Ok(shard_partition(labels, clients, shards_per_client, seed)?.assignment),
    }
}

/// Samples owned by each client, in pooled order.
pub fn owned_indices(assignment: &[Option<usize>], m: usize) -> Vec<Vec<usize>> {
    let mut owned = vec![Vec::new(); m];
    for (i, a) in assignment.iter().enumerate() {
        if let Some(c) = *a {
            owned[c].push(i);
        }
    }
    owned
}

pub struct ImagePool {
    pub images: ImageSet,
    pub labels: Vec<usize>,
}

pub fn read_image_pool(path: &Path, labels: &Path) -> Result<ImagePool> {
    let images = read_images(path)?;
    let labels = read_labels(labels)?;
    if labels.len() != images.count {
        return Err(Error::data(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    Ok(ImagePool { images, labels })
}

/// Shift applied to client `c`, if any.
pub fn client_shift(cfg: &RunConfig, c: usize) -> ShiftSpec {
    match &cfg.shift {
        Some(s) => {
            let specs = preset_specs(s.preset);
            specs[c % specs.len()]
        }
        None => ShiftSpec::IDENTITY,
    }
}

/// Per-client shifted images, before the train/test split.
pub fn client_images(cfg: &RunConfig, pool: &ImagePool, owned: &[Vec<usize>]) -> Result<Vec<ImageSet>> {
    owned
        .iter()
        .enumerate()
        .map(|(c, idx)| apply_covariate_shift(&pool.images.select(idx), &client_shift(cfg, c)))
        .collect()
}

fn split_client(c: usize, data: Dataset, seed: u64) -> Result<ClientData> {
    let (train, test) = train_test_split(data.len(), seed, c);
    if train.is_empty() {
        return Err(Error::Partition(format!("client {c} has no training samples")));
    }
    Ok(ClientData {
        client_id: c,
        train: data.select(&train),
        test: data.select(&test),
    })
}

pub fn load_clients(cfg: &RunConfig) -> Result<LoadedData> {
    let data = RunConfig::require(&cfg.data, "data")?;
    let seed = cfg.seed;
    match data {
        DataConfig::Tabular { path } => {
            let pooled = read_tabular_csv(path)?;
            let part = RunConfig::require(&cfg.partition, "partition")?;
            let assignment = partition_assignment(&pooled.y, part, seed)?;
            let clients = owned_indices(&assignment, part.clients())
                .into_iter()
                .enumerate()
                .map(|(c, idx)| split_client(c, pooled.select(&idx), seed))
                .collect::<Result<_>>()?;
            Ok(LoadedData {
                clients,
                classes: pooled.classes,
                input_dim: pooled.x.cols(),
                synth: None,
            })
        }
        DataConfig::Images { path, labels } => {
            let pool = read_image_pool(path, labels)?;
            let part = RunConfig::require(&cfg.partition, "partition")?;
            let assignment = partition_assignment(&pool.labels, part, seed)?;
            let owned = owned_indices(&assignment, part.clients());
            let classes = pool.labels.iter().max().map_or(0, |k| k + 1);
            let clients = client_images(cfg, &pool, &owned)?
                .into_iter()
                .zip(&owned)
                .enumerate()
                .map(|(c, (imgs, idx))| {
                    let y = idx.iter().map(|&i| pool.labels[i]).collect();
                    split_client(c, Dataset::new(imgs.to_features(), y, classes)?, seed)
                })
                .collect::<Result<_>>()?;
            Ok(LoadedData {
                clients,
                classes,
                input_dim: pool.images.sample_len(),
                synth: None,
            })
        }
        DataConfig::Routing {
            train_per_client,
            test_per_client,
        } => synthetic(routing_benchmark(*train_per_client, *test_per_client, seed)),
        DataConfig::Synthetic {
            clients,
            classes,
            dim,
            tilt_scale,
            head_scale,
            train_per_client,
            test_per_client,
        } => synthetic(random_tilt_spec(
            *clients,
            *classes,
            *dim,
            *tilt_scale,
            *head_scale,
            *train_per_client,
            *test_per_client,
            seed,
        )),
    }
}

fn synthetic(spec: SynthSpec) -> Result<LoadedData> {
    let data = synth_drm_generate(&spec)?;
    Ok(LoadedData {
        clients: data.clients,
        classes: spec.classes,
        input_dim: spec.dim,
        synth: Some(spec),
    })
}
