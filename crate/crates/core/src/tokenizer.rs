//! Word-level tokenizer over the closed synthetic-question grammar.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const NUMBERS: [&str; 7] = ["0", "1", "2", "3", "4", "5", "6"];
const WORDS: [&str; 9] = ["there", "are", "is", "a", "how", "many", "?", "yes", "no"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a tokenizer from tokens listed in id order. The first three
    /// must be the pad, bos and eos specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != BOS || tokens[2] != EOS {
            return Err(Error::Config(format!(
                "vocabulary must start with {PAD}, {BOS}, {EOS}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Tokenizer { tokens, ids })
    }

    /// The vocabulary of the synthetic shapes grammar.
    pub fn synthetic() -> Self {
        let tokens = [PAD, BOS, EOS]
            .into_iter()
            .chain(WORDS)
            .chain(NUMBERS)
            .chain(COLORS)
            .chain(SHAPES)
            .map(String::from)
            .collect();
        Tokenizer::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Input(format!("token {token:?} is not in the vocabulary")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.len())))
    }

    /// Whitespace-split word ids, without specials.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// One `token<TAB>id` line per entry, sorted by id.
    pub fn manifest(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("vocabulary line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("vocabulary line {}: bad id {id:?}", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::Config(format!(
                    "vocabulary line {}: id {id} out of order (expected {})",
                    n + 1,
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        Tokenizer::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tokenizer::from_manifest(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_size() {
        let t = Tokenizer::synthetic();
        assert_eq!(t.len(), 28);
        assert_eq!((t.pad(), t.bos(), t.eos()), (0, 1, 2));
        assert_eq!(t.token(t.bos()).unwrap(), BOS);
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = Tokenizer::synthetic();
        let ids = t.encode("is there a blue triangle ?").unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(t.decode(&ids).unwrap(), "is there a blue triangle ?");
        assert!(t.encode("a purple circle").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let t = Tokenizer::synthetic();
        let m = t.manifest();
        assert!(m.starts_with("<pad>\t0\n<bos>\t1\n<eos>\t2\n"));
        assert_eq!(Tokenizer::from_manifest(&m).unwrap(), t);
        assert!(Tokenizer::from_manifest("<pad>\t0\n<bos>\t2\n").is_err());
        assert!(Tokenizer::from_manifest("a\t0\nb\t1\nc\t2\n").is_err());
    }
}
