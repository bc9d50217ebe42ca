use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{unseen_attribute_proportion, Schema, Table};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub sizes: Vec<usize>,
    pub replicates: usize,
    /// Accepted subsets have a mean unseen proportion strictly above this floor.
    /// A floor of zero or below disables the constraint.
    pub min_unseen: f64,
    pub max_tries: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            sizes: vec![50, 100, 200, 500],
            replicates: 10,
            min_unseen: 0.8,
            max_tries: 1000,
            seed: 13,
        }
    }
}

/// One sampled training subset (indices into the full training pool).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub size: usize,
    pub replicate: usize,
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub unseen_dev: f64,
    pub unseen_test: f64,
    /// Mean per-table proportion over dev and test together.
    pub unseen: f64,
    pub tries: usize,
}

impl Subset {
    pub fn tables<'a>(&self, pool: &'a [Table]) -> Vec<&'a Table> {
        self.indices.iter().map(|&i| &pool[i]).collect()
    }

    pub fn cloned_tables(&self, pool: &[Table]) -> Vec<Table> {
        self.indices.iter().map(|&i| pool[i].clone()).collect()
    }
}

/// Benchmark manifest; dev and test stay fixed across subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub dev_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub subsets: Vec<Subset>,
}

impl Benchmark {
    pub fn subset(&self, size: usize, replicate: usize) -> Option<&Subset> {
        self.subsets.iter().find(|s| s.size == size && s.replicate == replicate)
    }
}

fn mean_unseen(tables: &[Table], seen: &Schema) -> f64 {
    if tables.is_empty() {
        return 0.0;
    }
    tables.iter().map(|t| unseen_attribute_proportion(t, seen)).sum::<f64>() / tables.len() as f64
}

/// Rejection-samples `replicates` training subsets per size so that the
/// dev and test tables keep a high share of attribute types never seen in
/// the subset. Each (size, replicate) draws from its own RNG stream.
pub fn subsample_benchmark(full_train: &[Table], dev: &[Table], test: &[Table], config: &BenchmarkConfig) -> Result<Benchmark> {
    if config.replicates == 0 || config.sizes.is_empty() {
        return Err(Error::Config("benchmark needs at least one size and one replicate".into()));
    }
    if config.max_tries == 0 {
        return Err(Error::Config("max_tries must be positive".into()));
    }
    let held_out: Vec<Table> = dev.iter().chain(test).cloned().collect();
    let mut subsets = Vec::new();
    for &size in &config.sizes {
        if size == 0 || size > full_train.len() {
            return Err(Error::Config(format!(
                "cannot draw {size} tables from a pool of {}",
                full_train.len()
            )));
        }
        let mut accepted: BTreeSet<Vec<usize>> = BTreeSet::new();
        for replicate in 1..=config.replicates {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(((size as u64) << 32) | replicate as u64);
            let mut best = f64::NEG_INFINITY;
            let mut found = None;
            for tries in 1..=config.max_tries {
                let mut indices = rand::seq::index::sample(&mut rng, full_train.len(), size).into_vec();
                indices.sort_unstable();
                if accepted.contains(&indices) {
                    continue;
                }
                let seen = Schema::union_of(indices.iter().map(|&i| &full_train[i]));
                let unseen = mean_unseen(&held_out, &seen);
                best = best.max(unseen);
                if config.min_unseen <= 0.0 || unseen > config.min_unseen {
                    found = Some(Subset {
                        size,
                        replicate,
                        ids: indices.iter().map(|&i| full_train[i].id.clone()).collect(),
                        unseen_dev: mean_unseen(dev, &seen),
                        unseen_test: mean_unseen(test, &seen),
                        unseen,
                        indices,
                        tries,
                    });
                    break;
                }
            }
            let Some(subset) = found else {
                return Err(Error::SubsampleExhausted {
                    size,
                    replicate,
                    floor: config.min_unseen,
                    tries: config.max_tries,
                    best: best.max(0.0),
                });
            };
            accepted.insert(subset.indices.clone());
            subsets.push(subset);
        }
    }
    Ok(Benchmark {
        config: config.clone(),
        dev_ids: dev.iter().map(|t| t.id.clone()).collect(),
        test_ids: test.iter().map(|t| t.id.clone()).collect(),
        subsets,
    })
}
