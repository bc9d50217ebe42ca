//! BLEU-4 scoring and unseen-proportion breakdowns.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{unseen_attribute_proportion, EmbeddingTable, Schema, Table};
use crate::error::{Error, Result};
use crate::pipeline::SupportPool;
use crate::trainer::Checkpoint;

/// Floor used in place of a zero n-gram match count.
pub const SMOOTHING_EPSILON: f64 = 1e-9;
pub const SMOOTHING: &str = "add-epsilon (1e-9) on zero n-gram numerators";
pub const BUCKETS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Counts {
    matches: [usize; 4],
    candidate_ngrams: [usize; 4],
    reference_ngrams: [usize; 4],
    candidate_len: usize,
    reference_len: usize,
}

impl Counts {
    fn of(candidate: &[String], reference: &[String]) -> Self {
        let mut c = Counts {
            candidate_len: candidate.len(),
            reference_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            let mut refs: std::collections::HashMap<&[String], usize> = std::collections::HashMap::new();
            for g in reference.windows(n) {
                *refs.entry(g).or_default() += 1;
            }
            for g in candidate.windows(n) {
                if let Some(left) = refs.get_mut(g) {
                    if *left > 0 {
                        *left -= 1;
                        c.matches[n - 1] += 1;
                    }
                }
            }
            c.candidate_ngrams[n - 1] = candidate.len().saturating_sub(n - 1);
            c.reference_ngrams[n - 1] = reference.len().saturating_sub(n - 1);
        }
        c
    }

    fn add(&mut self, o: &Counts) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.candidate_ngrams[n] += o.candidate_ngrams[n];
            self.reference_ngrams[n] += o.reference_ngrams[n];
        }
        self.candidate_len += o.candidate_len;
        self.reference_len += o.reference_len;
    }

    fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            let p = match (self.candidate_ngrams[n], self.reference_ngrams[n]) {
                // neither side is long enough for this order
                (0, 0) => 1.0,
                (0, _) => SMOOTHING_EPSILON,
                (total, _) if self.matches[n] == 0 => SMOOTHING_EPSILON / total as f64,
                (total, _) => self.matches[n] as f64 / total as f64,
            };
            log_sum += 0.25 * p.ln();
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * log_sum.exp()
    }
}

/// Corpus BLEU-4 with one reference per candidate.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Index("bleu4: empty candidate list".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Index(format!(
            "bleu4: {} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut total = Counts::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&Counts::of(c, r));
    }
    Ok(total.score())
}

pub fn sentence_bleu(candidate: &[String], reference: &[String]) -> f64 {
    Counts::of(candidate, reference).score()
}

/// Bucket of an unseen proportion: `[0, 0.1) -> 0`, ..., `[0.9, 1.0] -> 9`.
pub fn bucket_of(proportion: f64) -> usize {
    ((proportion * BUCKETS as f64 + 1e-9).floor().max(0.0) as usize).min(BUCKETS - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub proportion: f64,
    pub candidate: String,
    pub reference: String,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub bucket: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean sentence BLEU; absent for empty buckets.
    pub mean_bleu: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub smoothing: String,
    pub beam: usize,
    pub max_len: usize,
    pub corpus_bleu: f64,
    pub buckets: Vec<BucketStat>,
    pub instances: Vec<InstanceRecord>,
}

/// Mean sentence BLEU per bucket, summed in instance order.
pub fn bucket_stats(instances: &[InstanceRecord]) -> Vec<BucketStat> {
    (0..BUCKETS)
        .map(|b| {
            let scores: Vec<f64> = instances
                .iter()
                .filter(|r| bucket_of(r.proportion) == b)
                .map(|r| r.bleu)
                .collect();
            BucketStat {
                bucket: b,
                lower: b as f64 / BUCKETS as f64,
                upper: (b + 1) as f64 / BUCKETS as f64,
                count: scores.len(),
                mean_bleu: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
            }
        })
        .collect()
}

/// Scores generated token lists against the references of `split`.
pub fn score_outputs(split: &[Table], outputs: &[Vec<String>], seen: &Schema, beam: usize, max_len: usize) -> Result<EvalReport> {
    let references: Vec<Vec<String>> = split.iter().map(|t| t.reference.clone()).collect();
    let corpus_bleu = bleu4(outputs, &references)?;
    let instances: Vec<InstanceRecord> = split
        .iter()
        .zip(outputs)
        .map(|(t, out)| InstanceRecord {
            id: t.id.clone(),
            proportion: unseen_attribute_proportion(t, seen),
            candidate: out.join(" "),
            reference: t.reference.join(" "),
            bleu: sentence_bleu(out, &t.reference),
        })
        .collect();
    Ok(EvalReport {
        smoothing: SMOOTHING.into(),
        beam,
        max_len,
        corpus_bleu,
        buckets: bucket_stats(&instances),
        instances,
    })
}

/// Generates `split` with a checkpoint and scores it; `train` must be the checkpoint's training subset.
pub fn evaluate(checkpoint: &Checkpoint, train: &[Table], split: &[Table], embeddings: &EmbeddingTable, beam: usize) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let ids: Vec<&str> = train.iter().map(|t| t.id.as_str()).collect();
    if ids != checkpoint.train_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Config("training tables do not match the checkpoint's training subset".into()));
    }
    let params = checkpoint.model()?;
    let pool = SupportPool::new(train, embeddings)?;
    let outputs = checkpoint.inference(&params, embeddings, &pool, beam).generate_all(split)?;
    score_outputs(split, &outputs, &Schema::union_of(train), beam, checkpoint.config.max_len)
}

/// `bucket,lower,upper,mean_bleu,count` rows; empty buckets leave the mean blank.
pub fn write_bucket_csv<W: Write>(mut w: W, report: &EvalReport) -> Result<()> {
    writeln!(w, "bucket,lower,upper,mean_bleu,count")?;
    for b in &report.buckets {
        let mean = b.mean_bleu.map(|m| m.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", b.bucket, b.lower, b.upper, mean, b.count)?;
    }
    Ok(())
}
