use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const N_RESERVED: u32 = 3;

const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Token string ↔ id map. Ids 0, 1, 2 are PAD, BOS and EOS; the rest are
/// assigned contiguously in lexicographic token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = tokens.into_iter().map(|t| t.as_ref().to_string()).collect();
        for t in &set {
            if RESERVED.contains(&t.as_str()) {
                return Err(Error::Config(format!("token {t:?} collides with a reserved symbol")));
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?}")));
            }
        }
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocabulary { tokens, ids })
    }

    /// Every whitespace-separated token of a corpus file.
    pub fn build(corpus_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
        let set: BTreeSet<&str> = text.split_whitespace().collect();
        if set.is_empty() {
            return Err(Error::EmptyCorpus(corpus_path.display().to_string()));
        }
        Self::from_tokens(set)
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == N_RESERVED as usize
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .filter(|&i| i >= N_RESERVED)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownId(id))
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[N_RESERVED as usize..].iter().map(String::as_str)
    }

    /// Tokenizes a whitespace-separated line and appends EOS. Lines that would
    /// exceed `max_len` ids (EOS included) are rejected.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let mut ids = text
            .split_whitespace()
            .map(|t| self.id(t))
            .collect::<Result<Vec<u32>>>()?;
        ids.push(EOS);
        if ids.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_len,
            });
        }
        Ok(TokenSequence { ids })
    }

    /// Space-joined content tokens; a terminal EOS is dropped.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let words = seq
            .content()
            .iter()
            .map(|&id| {
                if id < N_RESERVED {
                    Err(Error::UnknownId(id))
                } else {
                    self.token(id)
                }
            })
            .collect::<Result<Vec<&str>>>()?;
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("vocabulary json: {e}")))?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, &id) in &map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("vocabulary ids not contiguous at {id}")))?;
            *slot = t.clone();
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("reserved id {i} must be {r}")));
            }
        }
        let v = Self::from_tokens(&tokens[N_RESERVED as usize..])?;
        if v.tokens != tokens {
            return Err(Error::Config("vocabulary ids are not in lexicographic order".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Token ids of one sequence. No PAD or BOS anywhere; at most one EOS, and only
/// in final position. A sequence without EOS is a truncated draw.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        for (i, &id) in ids.iter().enumerate() {
            if id == PAD || id == BOS {
                return Err(Error::InvalidSequence(format!("reserved id {id} at position {i}")));
            }
            if id == EOS && i + 1 != ids.len() {
                return Err(Error::InvalidSequence(format!("EOS at interior position {i}")));
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Ids with a terminal EOS removed.
    pub fn content(&self) -> &[u32] {
        if self.is_terminated() {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = Error;
    fn try_from(ids: Vec<u32>) -> Result<Self> {
        TokenSequence::new(ids)
    }
}

impl From<TokenSequence> for Vec<u32> {
    fn from(s: TokenSequence) -> Vec<u32> {
        s.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn corpus_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn lexicographic_ids_after_reserved() {
        let f = corpus_file("B C\nA B\n");
        let v = Vocabulary::build(f.path()).unwrap();
        assert_eq!(v.id("A").unwrap(), 3);
        assert_eq!(v.id("B").unwrap(), 4);
        assert_eq!(v.id("C").unwrap(), 5);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let f = corpus_file("\n  \n");
        assert!(matches!(Vocabulary::build(f.path()), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn rebuild_is_identical() {
        let f = corpus_file("N C O\nC C\n");
        assert_eq!(
            Vocabulary::build(f.path()).unwrap(),
            Vocabulary::build(f.path()).unwrap()
        );
    }

    #[test]
    fn encode_appends_eos_and_rejects_unknown() {
        let v = Vocabulary::from_tokens(["C", "N"]).unwrap();
        let s = v.encode("C C N", 10).unwrap();
        assert_eq!(s.ids(), &[3, 3, 4, EOS]);
        assert_eq!(v.decode(&s).unwrap(), "C C N");
        match v.encode("C ?", 10) {
            Err(Error::UnknownToken(t)) => assert_eq!(t, "?"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn over_long_lines_are_rejected_not_truncated() {
        let v = Vocabulary::from_tokens(["C"]).unwrap();
        assert!(v.encode("C C", 3).is_ok());
        assert!(matches!(
            v.encode("C C C", 3),
            Err(Error::SequenceTooLong { len: 4, max_len: 3 })
        ));
    }

    #[test]
    fn sequence_invariants() {
        assert!(TokenSequence::new(vec![3, EOS]).is_ok());
        assert!(TokenSequence::new(vec![3, 4]).is_ok());
        assert!(TokenSequence::new(vec![EOS, 3]).is_err());
        assert!(TokenSequence::new(vec![3, PAD, 4]).is_err());
        assert!(TokenSequence::new(vec![BOS, 3]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::from_tokens(["[C]", "[N]", "[=O]"]).unwrap();
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }
}
