//! Synthetic unseen-schema corpus.
//!
//! Attribute types come in clusters of synonyms that share one text
//! fragment. The training pool only ever uses the first synonym of each
//! cluster; dev and test only use the others, so every evaluation attribute
//! is unseen but has a seen cluster-mate. Tables follow a fixed set of
//! cluster combinations (schema types) and their text is rendered from
//! per-combination fragment orders.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, Pair, Table};
use crate::error::{Error, Result};

pub const VALUE_SLOT: &str = "<v>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub clusters: usize,
    pub synonyms_per_cluster: usize,
    pub values_per_cluster: usize,
    pub min_attributes: usize,
    pub max_attributes: usize,
    /// Number of distinct cluster combinations tables are drawn from.
    pub combinations: usize,
    pub templates_per_combination: usize,
    /// Trailing clusters that never occur in any generated table.
    pub held_out_clusters: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub embedding_dim: usize,
    /// Ratio of synonym-specific noise to the shared cluster direction.
    pub synonym_noise: f64,
    /// Norm of value-token embeddings relative to unit-norm attribute vectors.
    pub value_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 12,
            synonyms_per_cluster: 4,
            values_per_cluster: 60,
            min_attributes: 2,
            max_attributes: 5,
            combinations: 24,
            templates_per_combination: 1,
            held_out_clusters: 0,
            train: 600,
            dev: 100,
            test: 100,
            embedding_dim: 50,
            synonym_noise: 1.0,
            value_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    /// `synonyms[0]` is the only form used in the training pool.
    pub synonyms: Vec<String>,
    /// Fragment tokens; [`VALUE_SLOT`] marks the value position.
    pub fragment: Vec<String>,
    pub values: Vec<String>,
}

impl ClusterInfo {
    pub fn seen_synonym(&self) -> &str {
        &self.synonyms[0]
    }

    pub fn render(&self, value: &str) -> impl Iterator<Item = String> + '_ {
        let value = value.to_string();
        self.fragment
            .iter()
            .map(move |t| if t == VALUE_SLOT { value.clone() } else { t.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    pub clusters: Vec<usize>,
    /// Fragment orders, as permutations of `clusters` positions.
    pub templates: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub train: Vec<Table>,
    pub dev: Vec<Table>,
    pub test: Vec<Table>,
    pub clusters: Vec<ClusterInfo>,
    pub combinations: Vec<Combination>,
    pub embeddings: EmbeddingTable,
}

impl SyntheticCorpus {
    /// Cluster owning `attribute` (any synonym), if any.
    pub fn cluster_of(&self, attribute: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.synonyms.iter().any(|s| s == attribute))
    }
}

const NAMED: [(&[&str], &str); 12] = [
    (&["season", "year", "date", "period"], "in <v>"),
    (&["rider", "winner", "champion", "athlete"], "<v> won"),
    (&["team", "club", "squad", "outfit"], "for team <v>"),
    (&["venue", "location", "stadium", "ground"], "at <v>"),
    (&["goals", "points", "score", "tally"], "scoring <v> points"),
    (&["car", "vehicle", "machine", "chassis"], "driving a <v>"),
    (&["nation", "country", "nationality", "homeland"], "representing <v>"),
    (&["position", "rank", "placing", "finish"], "finishing <v>"),
    (&["opponent", "rival", "versus", "challenger"], "against <v>"),
    (&["event", "competition", "contest", "tournament"], "in the <v> event"),
    (&["coach", "manager", "trainer", "mentor"], "coached by <v>"),
    (&["prize", "earnings", "purse", "winnings"], "earning <v> dollars"),
];

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ra", "ten", "vo", "shi", "dar", "el", "gu", "no", "pe", "sa", "tor", "bi", "zen", "qua", "fe", "ly", "mar",
];

fn validate(config: &SynthConfig) -> Result<()> {
    let fail = |msg: String| Err(Error::Config(msg));
    if config.clusters == 0 {
        return fail("at least one cluster is required".into());
    }
    if config.synonyms_per_cluster < 2 {
        return fail("unseen dev/test attributes need at least 2 synonyms per cluster".into());
    }
    if config.held_out_clusters >= config.clusters {
        return fail("every cluster is held out".into());
    }
    if config.values_per_cluster == 0 || config.combinations == 0 || config.templates_per_combination == 0 {
        return fail("values, combinations and templates must be positive".into());
    }
    if config.min_attributes == 0 || config.min_attributes > config.max_attributes {
        return fail(format!(
            "attribute range {}..={} is empty",
            config.min_attributes, config.max_attributes
        ));
    }
    if config.train == 0 {
        return fail("the training pool must not be empty".into());
    }
    if config.embedding_dim == 0 {
        return fail("embedding_dim must be positive".into());
    }
    Ok(())
}

fn make_clusters(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<ClusterInfo> {
    let mut clusters: Vec<ClusterInfo> = (0..config.clusters)
        .map(|c| {
            let (names, fragment): (Vec<String>, String) = match NAMED.get(c) {
                Some((names, frag)) => (names.iter().map(|s| s.to_string()).collect(), frag.to_string()),
                None => (vec![format!("field{c}")], format!("with f{c}word <v>")),
            };
            let base = names[0].clone();
            let synonyms = (0..config.synonyms_per_cluster)
                .map(|s| names.get(s).cloned().unwrap_or_else(|| format!("{base}{s}")))
                .collect();
            ClusterInfo {
                synonyms,
                fragment: fragment.split_whitespace().map(str::to_string).collect(),
                values: Vec::new(),
            }
        })
        .collect();

    let mut used: HashSet<String> = clusters
        .iter()
        .flat_map(|c| c.synonyms.iter().chain(&c.fragment).cloned())
        .collect();
    for (c, cluster) in clusters.iter_mut().enumerate() {
        while cluster.values.len() < config.values_per_cluster {
            let k = cluster.values.len();
            let candidate = match c {
                0 => format!("{}", 1900 + rng.random_range(0..125)),
                4 => format!("{}", rng.random_range(1..400)),
                _ => {
                    let syllables = rng.random_range(2..=3);
                    (0..syllables).map(|_| *SYLLABLES.choose(rng).unwrap()).collect::<String>()
                }
            };
            // numeric pools are small; fall back to suffixed tokens
            let candidate = if used.contains(&candidate) && (c == 0 || c == 4) && k > 100 {
                format!("{candidate}x{k}")
            } else {
                candidate
            };
            if used.insert(candidate.clone()) {
                cluster.values.push(candidate);
            }
        }
    }
    clusters
}

fn make_combinations(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Combination> {
    let active = config.clusters - config.held_out_clusters;
    let lo = config.min_attributes.min(active);
    let hi = config.max_attributes.min(active);
    (0..config.combinations)
        .map(|_| {
            let size = rng.random_range(lo..=hi);
            let mut clusters = rand::seq::index::sample(rng, active, size).into_vec();
            clusters.shuffle(rng);
            let templates = (0..config.templates_per_combination)
                .map(|t| {
                    let mut order: Vec<usize> = (0..size).collect();
                    if t > 0 {
                        order.shuffle(rng);
                    }
                    order
                })
                .collect();
            Combination { clusters, templates }
        })
        .collect()
}

fn make_table(
    id: String,
    clusters: &[ClusterInfo],
    combinations: &[Combination],
    seen_split: bool,
    rng: &mut ChaCha8Rng,
) -> Table {
    let combo = combinations.choose(rng).unwrap();
    let template = combo.templates.choose(rng).unwrap();
    let values: Vec<&String> = combo.clusters.iter().map(|&c| clusters[c].values.choose(rng).unwrap()).collect();
    let pairs = combo
        .clusters
        .iter()
        .zip(&values)
        .map(|(&c, v)| {
            let synonyms = &clusters[c].synonyms;
            let attribute = if seen_split {
                synonyms[0].clone()
            } else {
                synonyms[1..].choose(rng).unwrap().clone()
            };
            Pair {
                attribute: vec![attribute],
                value: vec![(*v).clone()],
            }
        })
        .collect();
    let mut reference: Vec<String> = template
        .iter()
        .flat_map(|&pos| clusters[combo.clusters[pos]].render(values[pos]))
        .collect();
    reference.push(".".into());
    Table { id, pairs, reference }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn make_embeddings(config: &SynthConfig, clusters: &[ClusterInfo], rng: &mut ChaCha8Rng) -> Result<EmbeddingTable> {
    let dim = config.embedding_dim;
    let mut table = EmbeddingTable::new(dim);
    for cluster in clusters {
        let centroid = unit_gaussian(rng, dim);
        for syn in &cluster.synonyms {
            let noise = unit_gaussian(rng, dim);
            let mut v: Vec<f64> = centroid
                .iter()
                .zip(&noise)
                .map(|(c, n)| c + config.synonym_noise * n)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            table.insert(syn, v)?;
        }
    }
    for cluster in clusters {
        for value in &cluster.values {
            let v = unit_gaussian(rng, dim).into_iter().map(|x| x * config.value_scale).collect();
            table.insert(value, v)?;
        }
    }
    for cluster in clusters {
        for word in cluster.fragment.iter().filter(|w| *w != VALUE_SLOT) {
            if !table.contains(word) {
                table.insert(word, unit_gaussian(rng, dim))?;
            }
        }
    }
    Ok(table)
}

/// Builds the training pool, dev and test splits plus matching embeddings.
/// Identical `(config, seed)` pairs give identical corpora.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = make_clusters(config, &mut rng);
    let combinations = make_combinations(config, &mut rng);
    let split = |name: &str, count: usize, seen: bool, rng: &mut ChaCha8Rng| -> Vec<Table> {
        (0..count)
            .map(|i| make_table(format!("{name}-{i:05}"), &clusters, &combinations, seen, rng))
            .collect()
    };
    let train = split("train", config.train, true, &mut rng);
    let dev = split("dev", config.dev, false, &mut rng);
    let test = split("test", config.test, false, &mut rng);
    let mut emb_rng = ChaCha8Rng::seed_from_u64(seed);
    emb_rng.set_stream(1);
    let embeddings = make_embeddings(config, &clusters, &mut emb_rng)?;
    Ok(SyntheticCorpus {
        train,
        dev,
        test,
        clusters,
        combinations,
        embeddings,
    })
}
