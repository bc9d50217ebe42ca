use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Table;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "<e>", "<unk>"];

/// Generation vocabulary. Ids 0-3 are the specials `<pad> <s> <e> <unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Reference-text tokens occurring strictly more than `min_count` times,
/// ordered by descending count then lexicographically.
pub fn build_vocabulary(tables: &[Table], min_count: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tables {
        for tok in &t.reference {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(tok, c)| *c > min_count && !SPECIALS.contains(tok))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Pair;

    fn table(text: &str) -> Table {
        Table {
            id: "t".into(),
            pairs: vec![Pair {
                attribute: vec!["a".into()],
                value: vec!["b".into()],
            }],
            reference: super::super::tokenize(text),
        }
    }

    #[test]
    fn threshold_is_strict() {
        let eleven = ["x"; 11].join(" ");
        let ten = ["y"; 10].join(" ");
        let v = build_vocabulary(&[table(&format!("{eleven} {ten}"))], 10);
        assert!(v.id("x").is_some());
        assert!(v.id("y").is_none());
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let v = build_vocabulary(&[table("p q r"), table("q s")], 0);
        for t in ["p", "q", "r", "s"] {
            assert!(v.id(t).is_some());
        }
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn single_table() {
        let v = build_vocabulary(&[table("a a a")], 2);
        assert_eq!(v.tokens(), &["<pad>", "<s>", "<e>", "<unk>", "a"]);
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = build_vocabulary(&[table("z")], 0);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(START));
        assert_eq!(v.id("<e>"), Some(END));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id_or_unk("nope"), UNK);
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocabulary(&[table("b a b")], 0);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }
}
