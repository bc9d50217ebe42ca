//! Encode, optionally align, and decode whole tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{replace_embeddings, sample_support, select_support, Alignment};
use crate::corpus::{EmbeddingTable, Table, Vocabulary};
use crate::decoder::generate;
use crate::encoder::{embed_table, pair_vectors, PairEmbedding};
use crate::error::Result;
use crate::model::ModelParams;

/// Chooses a support table and alignment for an input table.
pub trait SchemaAligner {
    /// `candidates` holds the pair embeddings of each support table.
    /// Returns the chosen candidate index and its alignment, or `None` to leave the input unchanged.
    fn align(&self, params: &ModelParams, input: &[PairEmbedding], candidates: &[&[PairEmbedding]]) -> Result<Option<(usize, Alignment)>>;
}

/// Maximum-assignment alignment over current pair vectors.
#[derive(Clone, Copy, Debug, Default)]
pub struct HungarianAligner;

impl SchemaAligner for HungarianAligner {
    fn align(&self, params: &ModelParams, input: &[PairEmbedding], candidates: &[&[PairEmbedding]]) -> Result<Option<(usize, Alignment)>> {
        if candidates.is_empty() {
            return Ok(None);
        }
        // one batched pass over every pair
        let mut all = input.to_vec();
        for c in candidates {
            all.extend_from_slice(c);
        }
        let mut vs = pair_vectors(params, &all)?.into_iter();
        let input_v: Vec<Vec<f64>> = vs.by_ref().take(input.len()).collect();
        let support_v: Vec<Vec<Vec<f64>>> = candidates.iter().map(|c| vs.by_ref().take(c.len()).collect()).collect();
        select_support(&input_v, &support_v).map(Some)
    }
}

/// Training tables usable as alignment candidates, with their frozen embeddings.
#[derive(Clone, Debug)]
pub struct SupportPool {
    pub tables: Vec<Table>,
    pub pairs: Vec<Vec<PairEmbedding>>,
}

impl SupportPool {
    pub fn new(tables: &[Table], embeddings: &EmbeddingTable) -> Result<Self> {
        Ok(SupportPool {
            pairs: tables.iter().map(|t| embed_table(t, embeddings)).collect::<Result<_>>()?,
            tables: tables.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

/// Pair embeddings ready for decoding, plus the alignment that produced them.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub original: Vec<PairEmbedding>,
    pub pairs: Vec<PairEmbedding>,
    /// Pool index of the chosen support table and its alignment.
    pub alignment: Option<(usize, Alignment)>,
}

/// Aligns `input` against the pool tables listed in `support`.
pub fn prepare(
    params: &ModelParams,
    aligner: Option<&dyn SchemaAligner>,
    pool: &SupportPool,
    input: Vec<PairEmbedding>,
    support: &[usize],
) -> Result<Prepared> {
    let chosen = match aligner {
        Some(a) if !support.is_empty() => {
            let candidates: Vec<&[PairEmbedding]> = support.iter().map(|&i| pool.pairs[i].as_slice()).collect();
            a.align(params, &input, &candidates)?.map(|(k, al)| (support[k], al))
        }
        _ => None,
    };
    let pairs = match &chosen {
        Some((k, al)) => replace_embeddings(&input, al, &pool.pairs[*k])?,
        None => input.clone(),
    };
    Ok(Prepared {
        original: input,
        pairs,
        alignment: chosen,
    })
}

/// Support RNG of the `index`-th evaluated instance.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Inference settings shared by dev evaluation, generation and test evaluation.
#[derive(Clone, Copy)]
pub struct Inference<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocabulary,
    pub embeddings: &'a EmbeddingTable,
    pub pool: &'a SupportPool,
    pub aligner: Option<&'a dyn SchemaAligner>,
    pub support_size: usize,
    pub support_seed: u64,
    pub beam: usize,
    pub max_len: usize,
}

impl Inference<'_> {
    /// Prepares the `index`-th table of a split; support sets are drawn from the whole pool.
    pub fn prepare(&self, table: &Table, index: usize) -> Result<Prepared> {
        let input = embed_table(table, self.embeddings)?;
        let support = match self.aligner {
            Some(_) => sample_support(self.pool.len(), None, self.support_size, &mut eval_rng(self.support_seed, index)),
            None => Vec::new(),
        };
        prepare(self.params, self.aligner, self.pool, input, &support)
    }

    pub fn generate_one(&self, table: &Table, index: usize) -> Result<Vec<String>> {
        let prepared = self.prepare(table, index)?;
        generate(self.params, self.vocab, table, &prepared.pairs, self.beam, self.max_len)
    }

    pub fn generate_all(&self, tables: &[Table]) -> Result<Vec<Vec<String>>> {
        tables.iter().enumerate().map(|(i, t)| self.generate_one(t, i)).collect()
    }
}
