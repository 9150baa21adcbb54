//! Corpus ingestion: vocabulary construction, id encoding and the
//! contiguous batching scheme used for training and evaluation.
//!
//! Corpus files are UTF-8 plain text, one sentence per line, tokens
//! separated by whitespace. An end-of-sentence marker is appended to every
//! line during encoding; out-of-vocabulary tokens map to the unknown id.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

/// Bidirectional token<->id map with dense ids `0..len`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    pub unk_id: u32,
    pub eos_id: u32,
}

impl Vocabulary {
    /// Build from tokenized lines. Tokens occurring at least `min_count`
    /// times get ids in first-occurrence order; rarer tokens fall back to
    /// the unknown id at encode time. The special tokens are always present.
    pub fn build(lines: &[Vec<String>], min_count: usize) -> Result<Self> {
        if lines.iter().all(|l| l.is_empty()) {
            return Err(Error::Invalid("empty corpus".into()));
        }
        let min_count = min_count.max(1);

        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for line in lines {
            for tok in line {
                let c = counts.entry(tok.as_str()).or_insert(0);
                if *c == 0 {
                    order.push(tok.as_str());
                }
                *c += 1;
            }
        }

        let mut id_to_token = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        for tok in order {
            if tok == UNK_TOKEN || tok == EOS_TOKEN {
                continue;
            }
            if counts[tok] >= min_count {
                id_to_token.push(tok.to_string());
            }
        }

        Ok(Self::from_tokens(id_to_token))
    }

    /// Rebuild from an id-ordered token list (vocabulary file layout:
    /// one token per line, line number = id). The special tokens must be
    /// present in the list.
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let unk_id = token_to_id[UNK_TOKEN];
        let eos_id = token_to_id[EOS_TOKEN];
        Vocabulary {
            token_to_id,
            id_to_token,
            unk_id,
            eos_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(self.unk_id)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Encode tokenized lines into one id stream, appending the
    /// end-of-sentence id after every line.
    pub fn encode(&self, lines: &[Vec<String>]) -> Vec<u32> {
        let mut ids = Vec::new();
        for line in lines {
            for tok in line {
                ids.push(self.id(tok));
            }
            ids.push(self.eos_id);
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Vocabulary file layout: one token per line, line number = id.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.id_to_token.len() * 8);
        for token in &self.id_to_token {
            out.push_str(token);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if !tokens.iter().any(|t| t == UNK_TOKEN) || !tokens.iter().any(|t| t == EOS_TOKEN) {
            return Err(Error::Invalid(
                "vocabulary file must contain the special tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// One contiguous slice of the batched stream: inputs and one-step-shifted
/// targets, both `batch_size x seq_len` row-major.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

impl Chunk {
    #[inline]
    pub fn input_at(&self, row: usize, t: usize, seq_len: usize) -> u32 {
        self.input[row * seq_len + t]
    }

    #[inline]
    pub fn target_at(&self, row: usize, t: usize, seq_len: usize) -> u32 {
        self.target[row * seq_len + t]
    }
}

/// Token stream folded into `batch_size` contiguous rows and cut into
/// chunks of `seq_len` steps. Row `b` of chunk `i+1` continues exactly
/// where row `b` of chunk `i` stopped, so hidden state can be carried
/// across chunk boundaries. Tokens beyond `B*floor((len-1)/B)+1` are
/// dropped, as is any per-row remainder shorter than `seq_len`.
#[derive(Debug, Clone)]
pub struct BatchedCorpus {
    pub batch_size: usize,
    pub seq_len: usize,
    pub chunks: Vec<Chunk>,
}

impl BatchedCorpus {
    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Total number of scored (input, target) positions.
    pub fn token_count(&self) -> usize {
        self.chunks.len() * self.batch_size * self.seq_len
    }
}

pub fn batchify(ids: &[u32], batch_size: usize, seq_len: usize) -> Result<BatchedCorpus> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Invalid("batch_size and seq_len must be >= 1".into()));
    }
    if ids.len() < batch_size * seq_len + 1 {
        return Err(Error::Invalid("insufficient tokens".into()));
    }
    let row_len = (ids.len() - 1) / batch_size;
    let num_chunks = row_len / seq_len;
    if num_chunks == 0 {
        return Err(Error::Invalid("insufficient tokens".into()));
    }

    let mut chunks = Vec::with_capacity(num_chunks);
    for i in 0..num_chunks {
        let mut input = Vec::with_capacity(batch_size * seq_len);
        let mut target = Vec::with_capacity(batch_size * seq_len);
        for b in 0..batch_size {
            let start = b * row_len + i * seq_len;
            input.extend_from_slice(&ids[start..start + seq_len]);
            target.extend_from_slice(&ids[start + 1..start + seq_len + 1]);
        }
        chunks.push(Chunk { input, target });
    }
    Ok(BatchedCorpus {
        batch_size,
        seq_len,
        chunks,
    })
}

/// Whitespace tokenization of a text file, one sentence per line.
/// Blank lines are skipped.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(tokenize(&text))
}

pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|l: &Vec<String>| !l.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(raw: &[&str]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn build_vocab_counts_specials() {
        let v = Vocabulary::build(&lines(&["a b a"]), 1).unwrap();
        assert_eq!(v.len(), 4); // a, b, <unk>, <eos>
        assert!(v.contains("a") && v.contains("b"));
        assert_ne!(v.unk_id, v.eos_id);
    }

    #[test]
    fn min_count_threshold_drops_rare_tokens() {
        let v = Vocabulary::build(&lines(&["a b a"]), 2).unwrap();
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), v.unk_id);
    }

    #[test]
    fn two_line_corpus_distinct_tokens() {
        // 5 distinct tokens over 2 lines -> 7 ids including specials
        let v = Vocabulary::build(&lines(&["a b c", "d e a"]), 1).unwrap();
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = Vocabulary::build(&[], 1).unwrap_err();
        assert!(err.to_string().contains("empty corpus"));
    }

    #[test]
    fn encode_appends_eos_and_maps_unknowns() {
        let v = Vocabulary::build(&lines(&["a b"]), 1).unwrap();
        assert_eq!(
            v.encode(&lines(&["a b"])),
            vec![v.id("a"), v.id("b"), v.eos_id]
        );
        assert_eq!(v.encode(&lines(&["x"])), vec![v.unk_id, v.eos_id]);
        // 3 lines of 2 tokens each -> stream length 9
        let s = v.encode(&lines(&["a b", "a b", "b a"]));
        assert_eq!(s.len(), 9);
    }

    #[test]
    fn ids_are_dense_and_invertible() {
        let v = Vocabulary::build(&lines(&["c b a", "a b"]), 1).unwrap();
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id)), id);
        }
    }

    #[test]
    fn roundtrip_without_unknowns() {
        let src = lines(&["a b c", "c a"]);
        let v = Vocabulary::build(&src, 1).unwrap();
        let ids = v.encode(&src);
        let toks = v.decode(&ids);
        assert_eq!(toks, vec!["a", "b", "c", EOS_TOKEN, "c", "a", EOS_TOKEN]);
    }

    #[test]
    fn batchify_enumerated_slices() {
        // 21 ids, B=2, T=5 -> 2 chunks; row 0 covers ids 0..9, row 1 ids 10..19
        let ids: Vec<u32> = (0..21).collect();
        let bc = batchify(&ids, 2, 5).unwrap();
        assert_eq!(bc.num_chunks(), 2);
        for i in 0..2 {
            for t in 0..5 {
                assert_eq!(bc.chunks[i].input_at(0, t, 5), (i * 5 + t) as u32);
                assert_eq!(bc.chunks[i].input_at(1, t, 5), (10 + i * 5 + t) as u32);
                assert_eq!(bc.chunks[i].target_at(0, t, 5), (i * 5 + t + 1) as u32);
                assert_eq!(bc.chunks[i].target_at(1, t, 5), (10 + i * 5 + t + 1) as u32);
            }
        }
    }

    #[test]
    fn batchify_shifts_targets_by_one() {
        // 7 ids, B=1, T=3 -> 2 chunks; targets of chunk 0 are ids 1..3
        let ids: Vec<u32> = (0..7).collect();
        let bc = batchify(&ids, 1, 3).unwrap();
        assert_eq!(bc.num_chunks(), 2);
        assert_eq!(bc.chunks[0].target, vec![1, 2, 3]);
        assert_eq!(bc.chunks[1].input, vec![3, 4, 5]);
    }

    #[test]
    fn batchify_rejects_short_streams() {
        let ids: Vec<u32> = (0..5).collect();
        let err = batchify(&ids, 2, 5).unwrap_err();
        assert!(err.to_string().contains("insufficient tokens"));
    }

    #[test]
    fn vocabulary_file_round_trips() {
        let v = Vocabulary::build(&lines(&["c b a", "a b"]), 1).unwrap();
        let dir = std::env::temp_dir().join(format!("rclm-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.write_file(&path).unwrap();
        let loaded = Vocabulary::read_file(&path).unwrap();
        assert_eq!(loaded.tokens(), v.tokens());
        assert_eq!(loaded.unk_id, v.unk_id);
        assert_eq!(loaded.eos_id, v.eos_id);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn continuity_across_chunks() {
        let ids: Vec<u32> = (0..41).collect();
        let bc = batchify(&ids, 2, 4).unwrap();
        for b in 0..2 {
            let mut stream = Vec::new();
            for ch in &bc.chunks {
                for t in 0..4 {
                    stream.push(ch.input_at(b, t, 4));
                }
            }
            for w in stream.windows(2) {
                assert_eq!(w[1], w[0] + 1);
            }
        }
    }
}
