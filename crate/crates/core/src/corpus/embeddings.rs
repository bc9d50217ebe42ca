use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Frozen pretrained input vectors. Absent tokens map to the zero vector.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
    zero: Arc<Tensor>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            tokens: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            zero: Arc::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Inserts `token` unless already present (first occurrence wins).
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::shape("embedding", &[&[self.dim], &[vector.len()]]));
        }
        if self.index.contains_key(token) {
            return Ok(false);
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.vectors.push(Arc::new(Tensor::vector(vector)));
        Ok(true)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        self.lookup_shared(token).data()
    }

    pub fn lookup_shared(&self, token: &str) -> &Arc<Tensor> {
        self.index.get(token).map_or(&self.zero, |&i| &self.vectors[i])
    }

    /// Mean of the token vectors; OOV tokens contribute zeros.
    pub fn mean(&self, tokens: &[String]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Index("mean embedding of an empty token list".into()));
        }
        let mut out = vec![0.0; self.dim];
        for t in tokens {
            for (o, x) in out.iter_mut().zip(self.lookup(t)) {
                *o += x;
            }
        }
        let n = tokens.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tokens.iter().map(String::as_str).zip(self.vectors.iter().map(|v| v.data()))
    }

    /// Order-sensitive digest of every stored value, for immutability checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (tok, v) in self.iter() {
            feed(tok.as_bytes());
            for x in v {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Reads `token v1 ... vD` lines. Blank lines are skipped.
pub fn load_embeddings<R: BufRead>(reader: R, dim: usize) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(dim);
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        table.insert(token, values)?;
    }
    Ok(table)
}

pub fn write_embeddings<W: Write>(mut writer: W, table: &EmbeddingTable) -> Result<()> {
    for (tok, v) in table.iter() {
        write!(writer, "{tok}")?;
        for x in v {
            write!(writer, " {x}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}
