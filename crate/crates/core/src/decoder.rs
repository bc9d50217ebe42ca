//! Attention decoder with attribute and cell copy scores, plus greedy and beam search.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{Table, Vocabulary, END, START, UNK};
use crate::encoder::{bilstm_graph, ffn_graph, PairEmbedding};
use crate::error::{Error, Result};
use crate::model::{lstm_step, Bound, CopyIds, ModelParams};

/// Where an output slot's probability comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Generated(usize),
    CopiedAttribute(usize),
    CopiedCell(usize),
}

/// Output slots of one table (`|V|` generation slots, then one attribute and
/// one cell slot per pair) and the surface tokens they map onto.
///
/// Merged tokens are the vocabulary followed by table tokens missing from it,
/// in order of first appearance.
#[derive(Clone, Debug)]
pub struct CopySpace {
    tokens: Vec<String>,
    vocab_len: usize,
    /// Merged-token weights of every copy slot; each list sums to 1.
    copy_targets: Vec<Vec<(usize, f64)>>,
    pairs: usize,
}

impl CopySpace {
    pub fn new(table: &Table, vocab: &Vocabulary) -> Self {
        let mut tokens = vocab.tokens().to_vec();
        let mut index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut field = |words: &[String]| -> Vec<(usize, f64)> {
            let share = 1.0 / words.len() as f64;
            words
                .iter()
                .map(|w| {
                    let k = *index.entry(w.clone()).or_insert_with(|| {
                        tokens.push(w.clone());
                        tokens.len() - 1
                    });
                    (k, share)
                })
                .collect()
        };
        let mut copy_targets: Vec<Vec<(usize, f64)>> = table.pairs.iter().map(|p| field(&p.attribute)).collect();
        copy_targets.extend(table.pairs.iter().map(|p| field(&p.value)).collect::<Vec<_>>());
        CopySpace {
            tokens,
            vocab_len: vocab.len(),
            copy_targets,
            pairs: table.pairs.len(),
        }
    }

    pub fn slots(&self) -> usize {
        self.vocab_len + 2 * self.pairs
    }

    pub fn merged_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, merged: usize) -> &str {
        &self.tokens[merged]
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Vocabulary id fed back to the decoder after emitting `merged`.
    pub fn feedback_id(&self, merged: usize) -> usize {
        if merged < self.vocab_len {
            merged
        } else {
            UNK
        }
    }

    pub fn provenance(&self, slot: usize) -> Provenance {
        if slot < self.vocab_len {
            Provenance::Generated(slot)
        } else if slot < self.vocab_len + self.pairs {
            Provenance::CopiedAttribute(slot - self.vocab_len)
        } else {
            Provenance::CopiedCell(slot - self.vocab_len - self.pairs)
        }
    }

    /// Sums slot probabilities per merged token.
    pub fn merge(&self, slots: &[f64]) -> Vec<f64> {
        let mut merged = vec![0.0; self.tokens.len()];
        merged[..self.vocab_len].copy_from_slice(&slots[..self.vocab_len]);
        for (p, targets) in slots[self.vocab_len..].iter().zip(&self.copy_targets) {
            for &(k, share) in targets {
                merged[k] += p * share;
            }
        }
        merged
    }

    /// Per-slot weights whose dot product with slot probabilities is the
    /// merged probability of `token`; unknown tokens fall back to `<unk>`.
    pub fn target_weights(&self, token: &str) -> Vec<f64> {
        let mut w = vec![0.0; self.slots()];
        match self.index(token) {
            Some(k) => {
                if k < self.vocab_len {
                    w[k] = 1.0;
                }
                for (slot, targets) in self.copy_targets.iter().enumerate() {
                    for &(t, share) in targets {
                        if t == k {
                            w[self.vocab_len + slot] += share;
                        }
                    }
                }
            }
            None => w[UNK] = 1.0,
        }
        w
    }
}

/// One step's output: slot probabilities with provenance, and their per-token merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedDistribution {
    pub slots: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub tokens: Vec<String>,
    pub merged: Vec<f64>,
}

impl ExtendedDistribution {
    pub fn from_slots(slots: Vec<f64>, space: &CopySpace) -> Self {
        ExtendedDistribution {
            provenance: (0..slots.len()).map(|s| space.provenance(s)).collect(),
            tokens: space.tokens.clone(),
            merged: space.merge(&slots),
            slots,
        }
    }

    pub fn total(&self) -> f64 {
        self.merged.iter().sum()
    }
}

/// Per-table decoder inputs built once in a graph.
#[derive(Clone, Copy, Debug)]
pub struct TableContext {
    /// `[n, pair_dim]` pair vectors.
    pub v: Var,
    pub h0: Var,
    /// Pair-dependent first-layer activations of the two copy networks, `[n, copy_hidden]`.
    pub copy_attr_pairs: Var,
    pub copy_cell_pairs: Var,
    pub pairs: usize,
}

impl TableContext {
    pub fn build(g: &mut Graph, bound: &Bound, params: &ModelParams, pairs: &[PairEmbedding]) -> Result<Self> {
        let v = ffn_graph(g, bound, params, pairs)?;
        Self::from_vectors(g, bound, params, pairs, v)
    }

    /// Context from already computed pair vectors `v` (row `i` belongs to `pairs[i]`).
    pub fn from_vectors(g: &mut Graph, bound: &Bound, params: &ModelParams, pairs: &[PairEmbedding], v: Var) -> Result<Self> {
        let h0 = bilstm_graph(g, bound, params, v)?;
        let l = params.layout;
        let mut pair_part = |ids: CopyIds, attribute: bool| -> Result<Var> {
            let e = g.constant(Tensor::matrix(pairs.len(), params.config.embedding_dim, {
                pairs
                    .iter()
                    .flat_map(|p| if attribute { p.e_a.clone() } else { p.e_c.clone() })
                    .collect()
            })?);
            let x = g.concat(&[v, e])?;
            g.matmul(x, bound.var(ids.w_pair))
        };
        let copy_attr_pairs = pair_part(l.copy_attr, true)?;
        let copy_cell_pairs = pair_part(l.copy_cell, false)?;
        Ok(TableContext {
            v,
            h0,
            copy_attr_pairs,
            copy_cell_pairs,
            pairs: pairs.len(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub m: Var,
}

/// `h = h_0`, zero cell and zero attentive vector.
pub fn initial_state(g: &mut Graph, params: &ModelParams, ctx: &TableContext) -> DecoderState {
    DecoderState {
        h: ctx.h0,
        c: g.constant(Tensor::zeros(&[params.config.decoder_hidden])),
        m: g.constant(Tensor::zeros(&[params.config.pair_dim])),
    }
}

/// Bilinear attention `softmax_i(m_prev^T W v_i)`; returns `(m_t, alpha)`.
pub fn attention_step(g: &mut Graph, bound: &Bound, params: &ModelParams, m_prev: Var, v: Var) -> Result<(Var, Var)> {
    let q = g.matmul(m_prev, bound.var(params.layout.att_w))?;
    let scores = g.matmul(v, q)?;
    let alpha = g.softmax(scores)?;
    let m = g.matmul(alpha, v)?;
    Ok((m, alpha))
}

/// One decoder recurrence over `[y_prev; m_t]`.
pub fn decode_step(
    g: &mut Graph,
    bound: &Bound,
    params: &ModelParams,
    y_prev: Var,
    h_prev: Var,
    c_prev: Var,
    m_t: Var,
) -> Result<(Var, Var)> {
    let x = g.concat(&[y_prev, m_t])?;
    lstm_step(g, bound, params.layout.dec, x, h_prev, c_prev)
}

fn copy_scores(g: &mut Graph, bound: &Bound, ids: CopyIds, state: Var, pair_part: Var) -> Result<Var> {
    let s = g.matmul(state, bound.var(ids.w_state))?;
    let s = g.add(s, bound.var(ids.b1))?;
    let pre = g.add(pair_part, s)?;
    let hidden = g.tanh(pre)?;
    let out = g.matmul(hidden, bound.var(ids.w2))?;
    g.add(out, bound.var(ids.b2))
}

/// Joint softmax over generation and copy scores: `[|V| + 2n]` slot probabilities.
pub fn output_slots(g: &mut Graph, bound: &Bound, params: &ModelParams, ctx: &TableContext, y_prev: Var, h: Var, m: Var) -> Result<Var> {
    let l = params.layout;
    let gen = g.matmul(h, bound.var(l.gen_w))?;
    let gen = g.add(gen, bound.var(l.gen_b))?;
    let state = g.concat(&[y_prev, h, m])?;
    let ga = copy_scores(g, bound, l.copy_attr, state, ctx.copy_attr_pairs)?;
    let gc = copy_scores(g, bound, l.copy_cell, state, ctx.copy_cell_pairs)?;
    let logits = g.concat(&[gen, ga, gc])?;
    g.softmax(logits)
}

/// Feeds vocabulary id `prev` and returns the next state and slot probabilities.
pub fn step(
    g: &mut Graph,
    bound: &Bound,
    params: &ModelParams,
    ctx: &TableContext,
    state: DecoderState,
    prev: usize,
) -> Result<(DecoderState, Var)> {
    if prev >= params.vocab_size {
        return Err(Error::Index(format!("token id {prev} outside vocabulary of {}", params.vocab_size)));
    }
    let (m, _) = attention_step(g, bound, params, state.m, ctx.v)?;
    let y = g.row(bound.var(params.layout.out_emb), prev)?;
    let (h, c) = decode_step(g, bound, params, y, state.h, state.c, m)?;
    let probs = output_slots(g, bound, params, ctx, y, h, m)?;
    Ok((DecoderState { h, c, m }, probs))
}

/// Teacher-forced probabilities of each gold token followed by `<e>`.
pub fn teacher_forced(
    g: &mut Graph,
    bound: &Bound,
    params: &ModelParams,
    ctx: &TableContext,
    space: &CopySpace,
    vocab: &Vocabulary,
    reference: &[String],
) -> Result<Vec<Var>> {
    let mut state = initial_state(g, params, ctx);
    let mut prev = START;
    let mut out = Vec::with_capacity(reference.len() + 1);
    for tok in reference.iter().map(String::as_str).chain([vocab.token(END)]) {
        let (next, probs) = step(g, bound, params, ctx, state, prev)?;
        let w = g.constant(Tensor::vector(space.target_weights(tok)));
        let picked = g.mul(probs, w)?;
        out.push(g.sum(picked)?);
        state = next;
        prev = vocab.id_or_unk(tok);
    }
    Ok(out)
}

/// A next-token model over merged token indices.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Result<Self::State>;

    /// Consumes `prev` and returns the next state with a distribution over merged tokens.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Self::State, Vec<f64>)>;

    fn start_token(&self) -> usize {
        START
    }

    fn end_token(&self) -> usize {
        END
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Merged token indices, without `<e>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Candidate tokens by descending probability, ties to the lower index.
fn ranked(probs: &[f64], take: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    let cmp = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if take < idx.len() {
        idx.select_nth_unstable_by(take, cmp);
        idx.truncate(take);
    }
    idx.sort_by(cmp);
    idx
}

pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Decoded> {
    let mut state = model.start()?;
    let mut prev = model.start_token();
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    for _ in 0..max_len {
        let (next, probs) = model.step(&state, prev)?;
        let best = ranked(&probs, 1)[0];
        out.log_prob += probs[best].ln();
        if best == model.end_token() {
            break;
        }
        out.tokens.push(best);
        state = next;
        prev = best;
    }
    Ok(out)
}

#[derive(Clone)]
struct Hypothesis<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    greedy: bool,
}

/// Beam search over summed log-probabilities without length normalisation.
///
/// The greedy continuation is always retained in the beam, so the result
/// never scores below [`greedy_decode`], and `beam = 1` reproduces it.
pub fn beam_search<M: StepModel>(model: &M, beam: usize, max_len: usize) -> Result<Decoded> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: model.start()?,
        greedy: true,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    for t in 0..max_len {
        struct Candidate<S> {
            parent: usize,
            rank: usize,
            token: usize,
            score: f64,
            state: S,
            greedy: bool,
        }
        let mut candidates = Vec::new();
        for (parent, hyp) in active.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(model.start_token());
            let (next, probs) = model.step(&hyp.state, prev)?;
            for (rank, token) in ranked(&probs, beam).into_iter().enumerate() {
                candidates.push(Candidate {
                    parent,
                    rank,
                    token,
                    score: hyp.score + probs[token].ln(),
                    state: next.clone(),
                    greedy: hyp.greedy && rank == 0,
                });
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.parent.cmp(&b.parent)).then(a.rank.cmp(&b.rank)));
        if let Some(pos) = candidates.iter().position(|c| c.greedy) {
            if pos >= beam {
                let g = candidates.remove(pos);
                candidates.insert(beam - 1, g);
            }
        }
        candidates.truncate(beam);
        let mut next_active = Vec::new();
        for c in candidates {
            let mut tokens = active[c.parent].tokens.clone();
            if c.token == model.end_token() {
                finished.push(Decoded { tokens, log_prob: c.score });
                continue;
            }
            tokens.push(c.token);
            if t + 1 == max_len {
                finished.push(Decoded { tokens, log_prob: c.score });
                continue;
            }
            next_active.push(Hypothesis {
                tokens,
                score: c.score,
                state: c.state,
                greedy: c.greedy,
            });
        }
        active = next_active;
        let best_done = finished.iter().map(|d| d.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if active.iter().all(|h| h.score <= best_done) {
            break;
        }
    }
    if max_len == 0 {
        return Ok(Decoded {
            tokens: Vec::new(),
            log_prob: 0.0,
        });
    }
    let mut best: Option<Decoded> = None;
    for d in finished {
        if best.as_ref().is_none_or(|b| d.log_prob > b.log_prob) {
            best = Some(d);
        }
    }
    best.ok_or_else(|| Error::Index("beam search produced no hypothesis".into()))
}

/// The neural decoder of one table as a [`StepModel`].
pub struct TableDecoder<'a> {
    graph: RefCell<Graph>,
    bound: Bound,
    params: &'a ModelParams,
    ctx: TableContext,
    space: CopySpace,
}

impl<'a> TableDecoder<'a> {
    /// `pairs` are the (possibly aligned) pair embeddings of `table`.
    pub fn new(params: &'a ModelParams, vocab: &Vocabulary, table: &Table, pairs: &[PairEmbedding]) -> Result<Self> {
        if pairs.len() != table.pairs.len() {
            return Err(Error::Index(format!(
                "{} pair embeddings for a table of {} pairs",
                pairs.len(),
                table.pairs.len()
            )));
        }
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, params, false);
        let ctx = TableContext::build(&mut g, &bound, params, pairs)?;
        Ok(TableDecoder {
            graph: RefCell::new(g),
            bound,
            params,
            ctx,
            space: CopySpace::new(table, vocab),
        })
    }

    pub fn space(&self) -> &CopySpace {
        &self.space
    }

    /// Slot distribution after feeding merged token `prev` in `state`.
    pub fn distribution(&self, state: &DecoderState, prev: usize) -> Result<(DecoderState, ExtendedDistribution)> {
        let mut g = self.graph.borrow_mut();
        let feed = self.space.feedback_id(prev);
        let (next, probs) = step(&mut g, &self.bound, self.params, &self.ctx, *state, feed)?;
        let slots = g.value(probs).data().to_vec();
        Ok((next, ExtendedDistribution::from_slots(slots, &self.space)))
    }

    pub fn words(&self, decoded: &Decoded) -> Vec<String> {
        decoded.tokens.iter().map(|&k| self.space.token(k).to_string()).collect()
    }
}

impl StepModel for TableDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<DecoderState> {
        let mut g = self.graph.borrow_mut();
        Ok(initial_state(&mut g, self.params, &self.ctx))
    }

    fn step(&self, state: &DecoderState, prev: usize) -> Result<(DecoderState, Vec<f64>)> {
        let mut g = self.graph.borrow_mut();
        let feed = self.space.feedback_id(prev);
        let (next, probs) = step(&mut g, &self.bound, self.params, &self.ctx, *state, feed)?;
        Ok((next, self.space.merge(g.value(probs).data())))
    }
}

/// Generated tokens for `table`; `beam = 1` decodes greedily.
pub fn generate(
    params: &ModelParams,
    vocab: &Vocabulary,
    table: &Table,
    pairs: &[PairEmbedding],
    beam: usize,
    max_len: usize,
) -> Result<Vec<String>> {
    let dec = TableDecoder::new(params, vocab, table, pairs)?;
    let decoded = if beam == 1 {
        greedy_decode(&dec, max_len)?
    } else {
        beam_search(&dec, beam, max_len)?
    };
    Ok(dec.words(&decoded))
}
