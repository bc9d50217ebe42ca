//! Model dimensions, trainable parameters and their per-graph binding.
//!
//! Dense weights are stored input-major (`[in, out]`) so that a row vector or
//! a stack of row vectors multiplies them directly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub pair_dim: usize,
    /// Per direction; the decoder state is twice this size.
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub output_embedding_dim: usize,
    pub copy_hidden: usize,
    pub init_scale: f64,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 50,
            pair_dim: 100,
            encoder_hidden: 100,
            decoder_hidden: 200,
            output_embedding_dim: 25,
            copy_hidden: 100,
            init_scale: 0.08,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embedding_dim,
            self.pair_dim,
            self.encoder_hidden,
            self.decoder_hidden,
            self.output_embedding_dim,
            self.copy_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.decoder_hidden != 2 * self.encoder_hidden {
            return Err(Error::Config(format!(
                "decoder_hidden ({}) must equal twice encoder_hidden ({}) because h0 initialises the decoder",
                self.decoder_hidden, self.encoder_hidden
            )));
        }
        Ok(())
    }

    /// Width of the decoder-state part of a copy-network input `[y; h; m]`.
    pub fn copy_state_dim(&self) -> usize {
        self.output_embedding_dim + self.decoder_hidden + self.pair_dim
    }

    /// Width of the per-pair part of a copy-network input `[v; e]`.
    pub fn copy_pair_dim(&self) -> usize {
        self.pair_dim + self.embedding_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    /// `[input + hidden, 4 * hidden]`, gate blocks ordered input, forget, output, candidate.
    pub w: ParamId,
    pub b: ParamId,
}

/// Copy-score network: `w2 . tanh(W1 [y; h; m; v; e] + b1) + b2`, with the
/// first layer stored as its decoder-state and pair column blocks.
#[derive(Clone, Copy, Debug)]
pub struct CopyIds {
    pub w_state: ParamId,
    pub w_pair: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ParamLayout {
    pub ffn_w: ParamId,
    pub ffn_b: ParamId,
    pub enc_fwd: LstmIds,
    pub enc_bwd: LstmIds,
    pub dec: LstmIds,
    pub att_w: ParamId,
    pub gen_w: ParamId,
    pub gen_b: ParamId,
    pub copy_attr: CopyIds,
    pub copy_cell: CopyIds,
    pub out_emb: ParamId,
}

/// All trainable weights, addressable by name for checkpoints.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub layout: ParamLayout,
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

struct Builder<'a> {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    rng: &'a mut ChaCha8Rng,
    scale: f64,
}

impl Builder<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-self.scale..self.scale)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("positive dims"))
    }

    fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.push(name, Tensor::new(shape.to_vec(), vec![value; n]).expect("positive dims"))
    }

    fn push(&mut self, name: &str, t: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(Arc::new(t));
        ParamId(self.values.len() - 1)
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize, forget_bias: f64) -> LstmIds {
        let w = self.uniform(&format!("{prefix}.w"), &[input + hidden, 4 * hidden]);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(forget_bias);
        let b = self.push(&format!("{prefix}.b"), Tensor::vector(bias));
        LstmIds { w, b }
    }

    fn copy(&mut self, prefix: &str, config: &ModelConfig) -> CopyIds {
        CopyIds {
            w_state: self.uniform(&format!("{prefix}.w_state"), &[config.copy_state_dim(), config.copy_hidden]),
            w_pair: self.uniform(&format!("{prefix}.w_pair"), &[config.copy_pair_dim(), config.copy_hidden]),
            b1: self.filled(&format!("{prefix}.b1"), &[config.copy_hidden], 0.0),
            w2: self.uniform(&format!("{prefix}.w2"), &[config.copy_hidden]),
            b2: self.filled(&format!("{prefix}.b2"), &[1], 0.0),
        }
    }
}

impl ModelParams {
    /// Uniform(-init_scale, init_scale) weights, zero biases, forget-gate bias `forget_bias`.
    pub fn init(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            values: Vec::new(),
            rng: &mut rng,
            scale: config.init_scale,
        };
        let c = config;
        let layout = ParamLayout {
            ffn_w: b.uniform("ffn_e.w", &[2 * c.embedding_dim, c.pair_dim]),
            ffn_b: b.filled("ffn_e.b", &[c.pair_dim], 0.0),
            enc_fwd: b.lstm("enc_fwd", c.pair_dim, c.encoder_hidden, c.forget_bias),
            enc_bwd: b.lstm("enc_bwd", c.pair_dim, c.encoder_hidden, c.forget_bias),
            dec: b.lstm("dec", c.output_embedding_dim + c.pair_dim, c.decoder_hidden, c.forget_bias),
            att_w: b.uniform("att.w", &[c.pair_dim, c.pair_dim]),
            gen_w: b.uniform("gen.w", &[c.decoder_hidden, vocab_size]),
            gen_b: b.filled("gen.b", &[vocab_size], 0.0),
            copy_attr: b.copy("copy_attr", c),
            copy_cell: b.copy("copy_cell", c),
            out_emb: b.uniform("out_emb", &[vocab_size, c.output_embedding_dim]),
        };
        let Builder { names, values, .. } = b;
        Ok(ModelParams {
            config: config.clone(),
            vocab_size,
            layout,
            names,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> &Arc<Tensor> {
        &self.values[id.0]
    }

    /// Mutable access; copies the tensor first if a graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| (**v).clone()))
            .collect()
    }

    /// Rebuilds parameters from named tensors; every name and shape must match.
    pub fn from_named(config: &ModelConfig, vocab_size: usize, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = ModelParams::init(config, vocab_size, 0)?;
        if named.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                params.len()
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let t = named
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != params.get(id).shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            params.values[id.0] = Arc::new(t.clone());
        }
        Ok(params)
    }
}

/// Parameters inserted into one graph as leaves.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let vars = params.values.iter().map(|v| g.shared_leaf(Arc::clone(v), trainable)).collect();
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Points the given parameters at other nodes (used by gradient checks).
    pub fn with_overrides(mut self, overrides: &[(ParamId, Var)]) -> Self {
        for &(id, var) in overrides {
            self.vars[id.0] = var;
        }
        self
    }

    /// Gradients of every parameter after `backward`, zeros where absent.
    pub fn gradients(&self, g: &Graph, params: &ModelParams) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&params.values)
            .map(|(v, p)| g.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect()
    }
}

/// One LSTM step over input `x` from state `(h, c)`.
pub fn lstm_step(g: &mut Graph, bound: &Bound, ids: LstmIds, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hidden = g.value(h).len();
    let xh = g.concat(&[x, h])?;
    let pre = g.matmul(xh, bound.var(ids.w))?;
    let gates = g.add(pre, bound.var(ids.b))?;
    let slice = |g: &mut Graph, k: usize| g.slice(gates, k * hidden, hidden);
    let i = slice(g, 0)?;
    let f = slice(g, 1)?;
    let o = slice(g, 2)?;
    let cand = slice(g, 3)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let o = g.sigmoid(o)?;
    let cand = g.tanh(cand)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
