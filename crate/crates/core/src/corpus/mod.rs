//! Tables, corpus I/O, vocabulary and embeddings, benchmark construction and
//! the synthetic unseen-schema corpus.

mod benchmark;
mod embeddings;
mod synthetic;
mod vocab;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use benchmark::{subsample_benchmark, Benchmark, BenchmarkConfig, Subset};
pub use embeddings::{load_embeddings, write_embeddings, EmbeddingTable};
pub use synthetic::{generate_synthetic, ClusterInfo, SynthConfig, SyntheticCorpus};
pub use vocab::{build_vocabulary, Vocabulary, END, PAD, START, UNK};

use crate::error::{Error, Result};

/// One attribute-value pair; both sides are token lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub attribute: Vec<String>,
    pub value: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub pairs: Vec<Pair>,
    pub reference: Vec<String>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn schema(&self) -> Schema {
        Schema(self.pairs.iter().map(|p| canonical_attribute(&p.attribute)).collect())
    }

    /// Canonical attribute strings in table order (duplicates kept).
    pub fn attributes(&self) -> Vec<String> {
        self.pairs.iter().map(|p| canonical_attribute(&p.attribute)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Error::InvalidTable {
            id: self.id.clone(),
            msg: msg.to_string(),
        };
        if self.pairs.is_empty() {
            return Err(invalid("empty table"));
        }
        if self.pairs.iter().any(|p| p.attribute.is_empty()) {
            return Err(invalid("empty attribute"));
        }
        if self.pairs.iter().any(|p| p.value.is_empty()) {
            return Err(invalid("empty value"));
        }
        if self.reference.is_empty() {
            return Err(invalid("empty text"));
        }
        Ok(())
    }
}

/// Lowercased attribute tokens joined by single spaces.
pub fn canonical_attribute(tokens: &[String]) -> String {
    tokens.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>().join(" ")
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

/// Set of canonical attribute types.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema(pub BTreeSet<String>);

impl Schema {
    pub fn union_of<'a>(tables: impl IntoIterator<Item = &'a Table>) -> Self {
        let mut set = BTreeSet::new();
        for t in tables {
            set.extend(t.attributes());
        }
        Schema(set)
    }

    pub fn contains(&self, attribute: &str) -> bool {
        self.0.contains(attribute)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fraction of the table's pairs whose attribute type is absent from `seen`.
pub fn unseen_attribute_proportion(table: &Table, seen: &Schema) -> f64 {
    if table.pairs.is_empty() {
        return 0.0;
    }
    let unseen = table.attributes().iter().filter(|a| !seen.contains(a)).count();
    unseen as f64 / table.pairs.len() as f64
}

#[derive(Serialize, Deserialize)]
struct RawPair {
    attr: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    id: String,
    table: Vec<RawPair>,
    text: String,
}

/// Reads the JSON-lines corpus format. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Table>> {
    let mut tables = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTable = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let table = Table {
            pairs: raw
                .table
                .iter()
                .map(|p| Pair {
                    attribute: tokenize(&p.attr),
                    value: tokenize(&p.value),
                })
                .collect(),
            reference: tokenize(&raw.text),
            id: raw.id,
        };
        table.validate().map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        tables.push(table);
    }
    Ok(tables)
}

pub fn write_corpus<W: Write>(mut writer: W, tables: &[Table]) -> Result<()> {
    for t in tables {
        let raw = RawTable {
            id: t.id.clone(),
            table: t
                .pairs
                .iter()
                .map(|p| RawPair {
                    attr: p.attribute.join(" "),
                    value: p.value.join(" "),
                })
                .collect(),
            text: t.reference.join(" "),
        };
        serde_json::to_writer(&mut writer, &raw)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus_file(path: &std::path::Path) -> Result<Vec<Table>> {
    let file = std::fs::File::open(path)?;
    parse_corpus(std::io::BufReader::new(file))
}

pub fn write_corpus_file(path: &std::path::Path, tables: &[Table]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut w, tables)?;
    w.flush()?;
    Ok(())
}
