//! Teacher-forced training with the alignment-weighted objective.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{default_support_size, sample_support, score_graph};
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{build_vocabulary, EmbeddingTable, Table, Vocabulary, END};
use crate::decoder::{initial_state, step, teacher_forced, CopySpace, TableContext};
use crate::encoder::ffn_graph;
use crate::error::{Error, Result};
use crate::evaluator::bleu4;
use crate::model::{Bound, ModelConfig, ModelParams};
use crate::pipeline::{prepare, HungarianAligner, Inference, Prepared, SchemaAligner, SupportPool};

/// Probabilities below this are floored before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

static HUNGARIAN: HungarianAligner = HungarianAligner;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Support tables per instance; `None` picks 25 for subsets of up to 50 tables, else 50.
    pub support_size: Option<usize>,
    pub epochs: usize,
    pub init_seed: u64,
    pub data_seed: u64,
    pub support_seed: u64,
    pub aligner: bool,
    /// Divide `r` by the number of input pairs before it enters the loss.
    pub normalize_score: bool,
    pub rho: f64,
    pub epsilon: f64,
    pub lr_scale: f64,
    /// Global gradient-norm clip; zero or below disables clipping.
    pub clip_norm: f64,
    pub min_count: usize,
    pub max_len: usize,
    /// Beam width used for the per-epoch dev score (1 = greedy).
    pub dev_beam: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            support_size: None,
            epochs: 50,
            init_seed: 13,
            data_seed: 13,
            support_seed: 13,
            aligner: true,
            normalize_score: false,
            rho: 0.95,
            epsilon: 1e-6,
            lr_scale: 1.0,
            clip_norm: 5.0,
            min_count: 10,
            max_len: 20,
            dev_beam: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.aligner && self.support_size == Some(0) {
            return Err(Error::Config("support_size must be at least 1 with the aligner enabled".into()));
        }
        if !(0.0..1.0).contains(&self.rho) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("AdaDelta needs 0 <= rho < 1 and epsilon > 0".into()));
        }
        if self.dev_beam == 0 {
            return Err(Error::Config("dev_beam must be at least 1".into()));
        }
        self.model.validate()
    }

    pub fn resolved_support_size(&self, train_size: usize) -> usize {
        self.support_size.unwrap_or_else(|| default_support_size(train_size))
    }
}

/// `-sum log max(p, floor)` over gold-token probabilities.
pub fn nll_loss(target_probs: &[f64]) -> f64 {
    -target_probs.iter().map(|p| p.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// Graph form of [`nll_loss`].
pub fn nll_graph(g: &mut Graph, target_probs: &[Var]) -> Result<Var> {
    let mut logs = Vec::with_capacity(target_probs.len());
    for &p in target_probs {
        let c = g.clamp_min(p, PROB_FLOOR)?;
        logs.push(g.log(c)?);
    }
    let all = g.concat(&logs)?;
    let s = g.sum(all)?;
    g.scale(s, -1.0)
}

/// `L_NLL * (1 + lambda * r)`.
pub fn total_loss(nll: f64, r: f64, lambda: f64) -> Result<f64> {
    if r < 0.0 {
        return Err(Error::NegativeScore(r));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(nll * (1.0 + lambda * r))
}

/// Graph form of [`total_loss`]; the matching behind `r` is a constant.
pub fn total_loss_graph(g: &mut Graph, nll: Var, r: Var, lambda: f64) -> Result<Var> {
    let rv = g.scalar(r);
    if rv < 0.0 {
        return Err(Error::NegativeScore(rv));
    }
    let weighted = g.scale(r, lambda)?;
    let one = g.constant(Tensor::scalar(1.0));
    let factor = g.add(weighted, one)?;
    g.mul(nll, factor)
}

/// Per-parameter AdaDelta accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaDelta {
    pub rho: f64,
    pub epsilon: f64,
    pub scale: f64,
    sq_grad: Vec<Vec<f64>>,
    sq_update: Vec<Vec<f64>>,
}

impl AdaDelta {
    pub fn new(params: &ModelParams, rho: f64, epsilon: f64, scale: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        AdaDelta {
            rho,
            epsilon,
            scale,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    /// Applies one update; `grads[k]` belongs to the `k`-th parameter.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Index(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let (rho, eps, scale) = (self.rho, self.epsilon, self.scale);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = &grads[k];
            let values = params.get_mut(id).data_mut();
            let (eg, ex) = (&mut self.sq_grad[k], &mut self.sq_update[k]);
            for i in 0..values.len() {
                let g = grad[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
                let delta = -scale * (ex[i] + eps).sqrt() / (eg[i] + eps).sqrt() * g;
                ex[i] = rho * ex[i] + (1.0 - rho) * delta * delta;
                values[i] += delta;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` to global norm `max_norm` if larger; returns the original norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let f = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= f);
    }
    norm
}

/// Loss nodes of one training instance.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub nll: Var,
    pub score: Option<Var>,
    pub total: Var,
    /// Gold steps whose probability fell below [`PROB_FLOOR`].
    pub floored: usize,
}

/// Builds the teacher-forced loss of `table` given its prepared (aligned) pairs.
#[allow(clippy::too_many_arguments)]
pub fn instance_loss(
    g: &mut Graph,
    bound: &Bound,
    params: &ModelParams,
    vocab: &Vocabulary,
    table: &Table,
    prepared: &Prepared,
    pool: &SupportPool,
    config: &TrainConfig,
) -> Result<LossVars> {
    let (ctx, score) = match &prepared.alignment {
        Some((k, alignment)) => {
            let vin = ffn_graph(g, bound, params, &prepared.original)?;
            let vsup = ffn_graph(g, bound, params, &pool.pairs[*k])?;
            let mut r = score_graph(g, vin, vsup, alignment)?;
            if config.normalize_score {
                r = g.scale(r, 1.0 / prepared.original.len() as f64)?;
            }
            (TableContext::build(g, bound, params, &prepared.pairs)?, Some(r))
        }
        None => (TableContext::build(g, bound, params, &prepared.pairs)?, None),
    };
    let space = CopySpace::new(table, vocab);
    let probs = teacher_forced(g, bound, params, &ctx, &space, vocab, &table.reference)?;
    let floored = probs.iter().filter(|&&p| g.scalar(p) < PROB_FLOOR).count();
    let nll = nll_graph(g, &probs)?;
    let total = match score {
        Some(r) => total_loss_graph(g, nll, r, config.lambda)?,
        None => nll,
    };
    Ok(LossVars {
        nll,
        score,
        total,
        floored,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-instance total loss.
    pub train_loss: f64,
    pub train_nll: f64,
    pub mean_score: f64,
    pub floored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_bleu4: f64,
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(w, "epoch,train_loss,dev_bleu4")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.epoch, p.train_loss, p.dev_bleu4)?;
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trainable weights and everything needed to resume or evaluate them.
/// Input embeddings are not stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub dev_bleu4: f64,
    pub config: TrainConfig,
    pub train_ids: Vec<String>,
    pub vocab: Vocabulary,
    pub params: BTreeMap<String, Tensor>,
    pub data_rng: ChaCha8Rng,
    pub support_rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::from_named(&self.config.model, self.vocab.len(), &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Support pool and inference settings for this checkpoint over `train`.
    pub fn inference<'a>(
        &'a self,
        params: &'a ModelParams,
        embeddings: &'a EmbeddingTable,
        pool: &'a SupportPool,
        beam: usize,
    ) -> Inference<'a> {
        Inference {
            params,
            vocab: &self.vocab,
            embeddings,
            pool,
            aligner: self.config.aligner.then_some(&HUNGARIAN as &dyn SchemaAligner),
            support_size: self.config.resolved_support_size(pool.len()),
            support_seed: self.config.support_seed,
            beam,
            max_len: self.config.max_len,
        }
    }
}

/// Stateful epoch-by-epoch trainer.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a [Table],
    dev: &'a [Table],
    embeddings: &'a EmbeddingTable,
    aligner: Option<&'a dyn SchemaAligner>,
    vocab: Vocabulary,
    params: ModelParams,
    optimizer: AdaDelta,
    pool: SupportPool,
    data_rng: ChaCha8Rng,
    support_rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Uses the built-in aligner when `config.aligner` is set.
    pub fn new(config: TrainConfig, train: &'a [Table], dev: &'a [Table], embeddings: &'a EmbeddingTable) -> Result<Self> {
        let aligner = config.aligner.then_some(&HUNGARIAN as &dyn SchemaAligner);
        Self::with_aligner(config, train, dev, embeddings, aligner)
    }

    pub fn with_aligner(
        config: TrainConfig,
        train: &'a [Table],
        dev: &'a [Table],
        embeddings: &'a EmbeddingTable,
        aligner: Option<&'a dyn SchemaAligner>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if embeddings.dim() != config.model.embedding_dim {
            return Err(Error::Config(format!(
                "embeddings have dimension {}, model expects {}",
                embeddings.dim(),
                config.model.embedding_dim
            )));
        }
        for t in train.iter().chain(dev) {
            t.validate()?;
        }
        let vocab = build_vocabulary(train, config.min_count);
        let params = ModelParams::init(&config.model, vocab.len(), config.init_seed)?;
        let optimizer = AdaDelta::new(&params, config.rho, config.epsilon, config.lr_scale);
        Ok(Trainer {
            pool: SupportPool::new(train, embeddings)?,
            data_rng: ChaCha8Rng::seed_from_u64(config.data_seed),
            support_rng: ChaCha8Rng::seed_from_u64(config.support_seed),
            config,
            train,
            dev,
            embeddings,
            aligner,
            vocab,
            params,
            optimizer,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn pool(&self) -> &SupportPool {
        &self.pool
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn support_size(&self) -> usize {
        self.config.resolved_support_size(self.train.len())
    }

    /// Prepares training instance `idx` (support excludes the instance itself).
    /// Support is drawn even without an aligner so the support stream does not depend on it.
    pub fn prepare_instance(&mut self, idx: usize) -> Result<Prepared> {
        let support = sample_support(self.pool.len(), Some(idx), self.support_size(), &mut self.support_rng);
        prepare(&self.params, self.aligner, &self.pool, self.pool.pairs[idx].clone(), &support)
    }

    fn train_instance(&mut self, idx: usize) -> Result<(f64, f64, f64, usize)> {
        let prepared = self.prepare_instance(idx)?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, true);
        let vars = instance_loss(&mut g, &bound, &self.params, &self.vocab, &self.train[idx], &prepared, &self.pool, &self.config)?;
        let out = (
            g.scalar(vars.total),
            g.scalar(vars.nll),
            vars.score.map_or(0.0, |r| g.scalar(r)),
            vars.floored,
        );
        g.backward(vars.total)?;
        let mut grads = bound.gradients(&g, &self.params);
        drop(g);
        clip_gradients(&mut grads, self.config.clip_norm);
        self.optimizer.step(&mut self.params, &grads)?;
        Ok(out)
    }

    /// One shuffled pass over the training set.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.data_rng);
        let (mut loss, mut nll, mut score, mut floored) = (0.0, 0.0, 0.0, 0);
        for idx in order {
            let (l, n, r, f) = self.train_instance(idx).map_err(|e| Error::Training {
                epoch: self.epoch,
                id: self.train[idx].id.clone(),
                source: Box::new(e),
            })?;
            loss += l;
            nll += n;
            score += r;
            floored += f;
        }
        let count = self.train.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            train_loss: loss / count,
            train_nll: nll / count,
            mean_score: score / count,
            floored,
        })
    }

    pub fn inference(&self, beam: usize) -> Inference<'_> {
        Inference {
            params: &self.params,
            vocab: &self.vocab,
            embeddings: self.embeddings,
            pool: &self.pool,
            aligner: self.aligner,
            support_size: self.support_size(),
            support_seed: self.config.support_seed,
            beam,
            max_len: self.config.max_len,
        }
    }

    /// Corpus BLEU-4 on the dev set with the configured dev beam.
    pub fn dev_bleu(&self) -> Result<f64> {
        if self.dev.is_empty() {
            return Ok(0.0);
        }
        let out = self.inference(self.config.dev_beam).generate_all(self.dev)?;
        let refs: Vec<Vec<String>> = self.dev.iter().map(|t| t.reference.clone()).collect();
        bleu4(&out, &refs)
    }

    /// Fraction of teacher-forced steps (including `<e>`) whose argmax is the gold token.
    pub fn token_accuracy(&self, tables: &[Table]) -> Result<f64> {
        let inf = self.inference(1);
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, t) in tables.iter().enumerate() {
            let prepared = inf.prepare(t, i)?;
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &self.params, false);
            let ctx = TableContext::build(&mut g, &bound, &self.params, &prepared.pairs)?;
            let space = CopySpace::new(t, &self.vocab);
            let mut state = initial_state(&mut g, &self.params, &ctx);
            let mut prev = crate::corpus::START;
            for tok in t.reference.iter().map(String::as_str).chain([self.vocab.token(END)]) {
                let (next, probs) = step(&mut g, &bound, &self.params, &ctx, state, prev)?;
                let merged = space.merge(g.value(probs).data());
                let gold = space.index(tok).unwrap_or(crate::corpus::UNK);
                let best = (0..merged.len())
                    .max_by(|&a, &b| merged[a].total_cmp(&merged[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                hit += usize::from(best == gold);
                total += 1;
                state = next;
                prev = self.vocab.id_or_unk(tok);
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    pub fn checkpoint(&self, dev_bleu4: f64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            dev_bleu4,
            config: self.config.clone(),
            train_ids: self.train.iter().map(|t| t.id.clone()).collect(),
            vocab: self.vocab.clone(),
            params: self.params.to_named(),
            data_rng: self.data_rng.clone(),
            support_rng: self.support_rng.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub curve: Vec<CurvePoint>,
    pub epochs: Vec<EpochStats>,
}

/// Trains for `config.epochs` epochs and keeps the checkpoint with the best dev BLEU-4
/// (the earliest on ties; the last epoch when there is no dev set).
pub fn train(train: &[Table], dev: &[Table], embeddings: &EmbeddingTable, config: &TrainConfig) -> Result<TrainOutcome> {
    let aligner = config.aligner.then_some(&HUNGARIAN as &dyn SchemaAligner);
    train_with_aligner(train, dev, embeddings, config, aligner)
}

pub fn train_with_aligner(
    train: &[Table],
    dev: &[Table],
    embeddings: &EmbeddingTable,
    config: &TrainConfig,
    aligner: Option<&dyn SchemaAligner>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::with_aligner(config.clone(), train, dev, embeddings, aligner)?;
    let mut best: Option<Checkpoint> = None;
    let mut curve = Vec::new();
    let mut epochs = Vec::new();
    for _ in 0..config.epochs {
        let stats = trainer.run_epoch()?;
        let dev_bleu4 = trainer.dev_bleu()?;
        curve.push(CurvePoint {
            epoch: stats.epoch,
            train_loss: stats.train_loss,
            dev_bleu4,
        });
        epochs.push(stats);
        if dev.is_empty() || best.as_ref().is_none_or(|b| dev_bleu4 > b.dev_bleu4) {
            best = Some(trainer.checkpoint(dev_bleu4));
        }
    }
    let best = best.unwrap_or_else(|| trainer.checkpoint(0.0));
    Ok(TrainOutcome { best, curve, epochs })
}
