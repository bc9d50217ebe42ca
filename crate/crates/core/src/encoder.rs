//! Pair representations and the bidirectional table encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{EmbeddingTable, Table};
use crate::error::{Error, Result};
use crate::model::{lstm_step, Bound, ModelParams};

/// Frozen attribute and value embeddings of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEmbedding {
    pub e_a: Vec<f64>,
    pub e_c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRepresentation {
    pub e_a: Vec<f64>,
    pub e_c: Vec<f64>,
    pub v: Vec<f64>,
}

/// Mean embeddings of the attribute tokens and of the value tokens.
pub fn embed_pair(attribute: &[String], value: &[String], embeddings: &EmbeddingTable) -> Result<PairEmbedding> {
    if attribute.is_empty() || value.is_empty() {
        return Err(Error::Index("embed_pair: empty attribute or value".into()));
    }
    Ok(PairEmbedding {
        e_a: embeddings.mean(attribute)?,
        e_c: embeddings.mean(value)?,
    })
}

pub fn embed_table(table: &Table, embeddings: &EmbeddingTable) -> Result<Vec<PairEmbedding>> {
    table
        .pairs
        .iter()
        .map(|p| embed_pair(&p.attribute, &p.value, embeddings))
        .collect()
}

fn input_matrix(pairs: &[PairEmbedding]) -> Result<Tensor> {
    let width = pairs.first().map_or(0, |p| p.e_a.len() + p.e_c.len());
    let mut data = Vec::with_capacity(pairs.len() * width);
    for p in pairs {
        if p.e_a.len() + p.e_c.len() != width {
            return Err(Error::shape("encode_pairs", &[&[width], &[p.e_a.len() + p.e_c.len()]]));
        }
        data.extend_from_slice(&p.e_a);
        data.extend_from_slice(&p.e_c);
    }
    Tensor::matrix(pairs.len(), width, data)
}

/// `tanh([e_a; e_c] W + b)` for every pair, as an `[n, pair_dim]` node.
pub fn ffn_graph(g: &mut Graph, bound: &Bound, params: &ModelParams, pairs: &[PairEmbedding]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Index("encode_pairs: table has no pairs".into()));
    }
    let x = g.constant(input_matrix(pairs)?);
    let l = params.layout;
    let pre = g.matmul(x, bound.var(l.ffn_w))?;
    let pre = g.add(pre, bound.var(l.ffn_b))?;
    g.tanh(pre)
}

/// Concatenated final forward and backward states over the rows of `v`.
pub fn bilstm_graph(g: &mut Graph, bound: &Bound, params: &ModelParams, v: Var) -> Result<Var> {
    let n = g.value(v).rows();
    let hidden = params.config.encoder_hidden;
    let rows = (0..n).map(|i| g.row(v, i)).collect::<Result<Vec<_>>>()?;
    let mut run = |ids, order: &mut dyn Iterator<Item = usize>| -> Result<Var> {
        let mut h = g.constant(Tensor::zeros(&[hidden]));
        let mut c = g.constant(Tensor::zeros(&[hidden]));
        for i in order {
            (h, c) = lstm_step(g, bound, ids, rows[i], h, c)?;
        }
        Ok(h)
    };
    let fwd = run(params.layout.enc_fwd, &mut (0..n))?;
    let bwd = run(params.layout.enc_bwd, &mut (0..n).rev())?;
    g.concat(&[fwd, bwd])
}

/// Pair vectors `v` computed without gradient tracking.
pub fn pair_vectors(params: &ModelParams, pairs: &[PairEmbedding]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, false);
    let v = ffn_graph(&mut g, &bound, params, pairs)?;
    let t = g.value(v);
    Ok(t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect())
}

pub fn represent(params: &ModelParams, pairs: &[PairEmbedding]) -> Result<Vec<PairRepresentation>> {
    let vs = pair_vectors(params, pairs)?;
    Ok(pairs
        .iter()
        .zip(vs)
        .map(|(p, v)| PairRepresentation {
            e_a: p.e_a.clone(),
            e_c: p.e_c.clone(),
            v,
        })
        .collect())
}

/// Pair representations of `table`, in table order.
pub fn encode_pairs(table: &Table, embeddings: &EmbeddingTable, params: &ModelParams) -> Result<Vec<PairRepresentation>> {
    represent(params, &embed_table(table, embeddings)?)
}

/// Initial decoder state `h_0` from pair representations.
pub fn encode_table(reps: &[PairRepresentation], params: &ModelParams) -> Result<Vec<f64>> {
    if reps.is_empty() {
        return Err(Error::Index("encode_table: no pairs".into()));
    }
    let width = reps[0].v.len();
    let data = reps.iter().flat_map(|r| r.v.iter().copied()).collect();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, false);
    let v = g.constant(Tensor::matrix(reps.len(), width, data)?);
    let h0 = bilstm_graph(&mut g, &bound, params, v)?;
    Ok(g.value(h0).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::corpus::Pair;
    use crate::model::ModelConfig;

    fn small_config() -> ModelConfig {
        ModelConfig {
            embedding_dim: 3,
            pair_dim: 4,
            encoder_hidden: 3,
            decoder_hidden: 6,
            output_embedding_dim: 2,
            copy_hidden: 3,
            init_scale: 0.5,
            forget_bias: 1.0,
        }
    }

    fn emb() -> EmbeddingTable {
        let mut e = EmbeddingTable::new(3);
        e.insert("year", vec![1.0, 0.0, 0.5]).unwrap();
        e.insert("team", vec![0.0, 1.0, -0.5]).unwrap();
        e.insert("2008", vec![0.2, 0.3, 0.4]).unwrap();
        e.insert("ferrari", vec![-0.3, 0.1, 0.9]).unwrap();
        e
    }

    fn pair(a: &str, v: &str) -> Pair {
        Pair {
            attribute: crate::corpus::tokenize(a),
            value: crate::corpus::tokenize(v),
        }
    }

    fn table(pairs: Vec<Pair>) -> Table {
        Table {
            id: "t".into(),
            pairs,
            reference: vec!["x".into()],
        }
    }

    #[test]
    fn embed_pair_means_and_oov() {
        let e = emb();
        let p = embed_pair(&["year".into()], &["2008".into(), "ferrari".into()], &e).unwrap();
        assert_eq!(p.e_a, vec![1.0, 0.0, 0.5]);
        assert_eq!(p.e_c, vec![(0.2 - 0.3) / 2.0, (0.3 + 0.1) / 2.0, (0.4 + 0.9) / 2.0]);
        let oov = embed_pair(&["nothing".into()], &["2008".into()], &e).unwrap();
        assert_eq!(oov.e_a, vec![0.0; 3]);
        // OOV tokens count towards the mean
        let half = embed_pair(&["year".into(), "zzz".into()], &["2008".into()], &e).unwrap();
        assert_eq!(half.e_a, vec![0.5, 0.0, 0.25]);
        assert!(embed_pair(&[], &["2008".into()], &e).is_err());
    }

    #[test]
    fn zero_ffn_gives_zero_vectors() {
        let mut p = ModelParams::init(&small_config(), 5, 3).unwrap();
        let w = p.layout.ffn_w;
        p.get_mut(w).data_mut().fill(0.0);
        let reps = encode_pairs(&table(vec![pair("year", "2008"), pair("team", "ferrari")]), &emb(), &p).unwrap();
        assert!(reps.iter().all(|r| r.v == vec![0.0; 4]));
    }

    #[test]
    fn default_dims() {
        let p = ModelParams::init(&ModelConfig::default(), 5, 3).unwrap();
        let e = EmbeddingTable::new(50);
        let reps = encode_pairs(&table(vec![pair("year", "2008")]), &e, &p).unwrap();
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].v.len(), 100);
        assert_eq!(encode_table(&reps, &p).unwrap().len(), 200);
    }

    #[test]
    fn ffn_matches_hand_matrix() {
        let p = ModelParams::init(&small_config(), 5, 11).unwrap();
        let e = emb();
        let t = table(vec![pair("year", "2008"), pair("team", "ferrari")]);
        let reps = encode_pairs(&t, &e, &p).unwrap();
        let w = p.get(p.layout.ffn_w);
        let b = p.get(p.layout.ffn_b).data();
        for (rep, (a, c)) in reps.iter().zip([("year", "2008"), ("team", "ferrari")]) {
            let x: Vec<f64> = e.lookup(a).iter().chain(e.lookup(c)).copied().collect();
            for j in 0..4 {
                let mut s = b[j];
                for (k, xk) in x.iter().enumerate() {
                    s += xk * w.data()[k * 4 + j];
                }
                assert!((rep.v[j] - s.tanh()).abs() < 1e-14);
            }
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_input_bilstm_oracle() {
        // zero recurrent weights: each step c' = sigmoid(1) c + 0.5 tanh(0) = sigmoid(1) c, so c stays 0
        let mut p = ModelParams::init(&small_config(), 5, 1).unwrap();
        for ids in [p.layout.enc_fwd, p.layout.enc_bwd] {
            p.get_mut(ids.w).data_mut().fill(0.0);
            // candidate bias 0.3 so the cell moves
            p.get_mut(ids.b).data_mut()[9..12].fill(0.3);
        }
        let reps: Vec<PairRepresentation> = (0..3)
            .map(|_| PairRepresentation {
                e_a: vec![],
                e_c: vec![],
                v: vec![0.0; 4],
            })
            .collect();
        let h0 = encode_table(&reps, &p).unwrap();
        let (f, i, o) = (sigmoid(1.0), 0.5, 0.5);
        let mut c = 0.0;
        let mut h = 0.0;
        for _ in 0..3 {
            c = f * c + i * 0.3f64.tanh();
            h = o * f64::tanh(c);
        }
        for x in h0 {
            assert!((x - h).abs() < 1e-15);
        }
    }

    #[test]
    fn reversal_swaps_directions() {
        let cfg = small_config();
        let mut p = ModelParams::init(&cfg, 5, 4).unwrap();
        // give both directions the same weights
        let fwd_w = p.get(p.layout.enc_fwd.w).clone();
        let bwd = p.layout.enc_bwd.w;
        *p.get_mut(bwd) = fwd_w;
        let e = emb();
        let a = encode_pairs(&table(vec![pair("year", "2008"), pair("team", "ferrari"), pair("zz", "2008")]), &e, &p).unwrap();
        let mut b = a.clone();
        b.reverse();
        let ha = encode_table(&a, &p).unwrap();
        let hb = encode_table(&b, &p).unwrap();
        assert_eq!(ha[..3], hb[3..]);
        assert_eq!(ha[3..], hb[..3]);
    }

    #[test]
    fn permutation_equivariance() {
        let p = ModelParams::init(&small_config(), 5, 8).unwrap();
        let e = emb();
        let pairs = vec![pair("year", "2008"), pair("team", "ferrari"), pair("team year", "2008")];
        let a = encode_pairs(&table(pairs.clone()), &e, &p).unwrap();
        let perm = [2, 0, 1];
        let b = encode_pairs(&table(perm.iter().map(|&i| pairs[i].clone()).collect()), &e, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a[i], b[k]);
        }
    }

    #[test]
    fn gradients_through_encoder() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 5, 21).unwrap();
        let pairs = embed_table(&table(vec![pair("year", "2008"), pair("team", "ferrari")]), &emb()).unwrap();
        let l = params.layout;
        let ids = [l.ffn_w, l.ffn_b, l.enc_fwd.w, l.enc_bwd.w, l.enc_bwd.b];
        let inputs: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
        let err = grad_check(
            |g, vars| {
                let mut p = params.clone();
                for (&id, &var) in ids.iter().zip(vars) {
                    *p.get_mut(id) = g.value(var).clone();
                }
                // rebind the trainable inputs in place of the copied parameters
                let bound = Bound::new(g, &p, false);
                let bound = bound.with_overrides(&ids.iter().copied().zip(vars.iter().copied()).collect::<Vec<_>>());
                let v = ffn_graph(g, &bound, &p, &pairs)?;
                let h = bilstm_graph(g, &bound, &p, v)?;
                g.sum(h)
            },
            &inputs,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn frozen_embeddings_get_no_gradient() {
        let params = ModelParams::init(&small_config(), 5, 2).unwrap();
        let e = emb();
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &params, true);
        let frozen = g.shared_leaf(e.lookup_shared("year").clone(), false);
        let pairs = embed_table(&table(vec![pair("year", "2008")]), &e).unwrap();
        let v = ffn_graph(&mut g, &bound, &params, &pairs).unwrap();
        let h = bilstm_graph(&mut g, &bound, &params, v).unwrap();
        let s = g.sum(h).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(frozen).is_none());
        assert!(g.grad(bound.var(params.layout.ffn_w)).is_some());
    }
}
