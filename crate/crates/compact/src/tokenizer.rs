//! Byte-level BPE: loading, rare-token identification, merge-table pruning,
//! encode/decode, and retokenization-churn measurement.
//!
//! The file format is JSON:
//!
//! ```json
//! {
//!   "vocab": { "<token string>": <id>, ... },
//!   "merges": [ "<left> <right>", ... ],
//!   "special_tokens": [ <id>, ... ]
//! }
//! ```
//!
//! Token strings use the GPT-2 byte-to-unicode convention so arbitrary bytes
//! are representable in JSON; merges are listed in priority order. A nested
//! `{"model": {"vocab": ..., "merges": ...}}` layout is also accepted so the
//! tokenizer.json shipped with common checkpoints can be read directly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TokenizerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tokenizer file does not parse: {0}")]
    Parse(String),
    #[error("non-dense ids: {0}")]
    NonDenseIds(String),
    #[error("merge {index} ({left:?} + {right:?}) references unknown token")]
    MergeUnknownToken {
        index: usize,
        left: String,
        right: String,
    },
    #[error("merge {index} output {output:?} missing from vocab")]
    MergeOutputMissing { index: usize, output: String },
    #[error("token string {0:?} is not valid byte-level text")]
    BadTokenString(String),
    #[error("special token id {0} out of range")]
    SpecialOutOfRange(u32),
    #[error("retained vocabulary {v_prime} below alphabet floor {floor}")]
    BelowAlphabetFloor { v_prime: usize, floor: usize },
    #[error("retained vocabulary {v_prime} exceeds vocabulary size {v}")]
    VPrimeTooLarge { v_prime: usize, v: usize },
    #[error("byte 0x{0:02x} has no token; text is not encodable with this vocabulary")]
    ByteNotInAlphabet(u8),
    #[error("token id {0} out of range")]
    IdOutOfRange(u32),
    #[error("pruned tokenizer is not derived from the original")]
    NotDerived,
    #[error("empty corpus")]
    EmptyCorpus,
}

/// GPT-2 style byte <-> printable-unicode mapping. Printable ASCII and two
/// Latin-1 ranges map to themselves; the remaining 68 byte values map to
/// U+0100.. in order.
mod byte_unicode {
    pub fn tables() -> ([char; 256], std::collections::HashMap<char, u8>) {
        let mut byte_to_char = ['\0'; 256];
        let mut taken = [false; 256];
        let direct = (b'!'..=b'~').chain(0xa1..=0xac).chain(0xae..=0xff);
        for b in direct {
            byte_to_char[b as usize] = char::from_u32(b as u32).unwrap();
            taken[b as usize] = true;
        }
        let mut next = 256u32;
        for b in 0..256usize {
            if !taken[b] {
                byte_to_char[b] = char::from_u32(next).unwrap();
                next += 1;
            }
        }
        let mut char_to_byte = std::collections::HashMap::new();
        for (b, &c) in byte_to_char.iter().enumerate() {
            char_to_byte.insert(c, b as u8);
        }
        (byte_to_char, char_to_byte)
    }
}

fn encode_token_string(bytes: &[u8], byte_to_char: &[char; 256]) -> String {
    bytes.iter().map(|&b| byte_to_char[b as usize]).collect()
}

fn decode_token_string(
    s: &str,
    char_to_byte: &HashMap<char, u8>,
) -> Result<Vec<u8>, TokenizerError> {
    s.chars()
        .map(|c| {
            char_to_byte
                .get(&c)
                .copied()
                .ok_or_else(|| TokenizerError::BadTokenString(s.to_string()))
        })
        .collect()
}

/// Split text into pre-tokenization units: each word is an optional run of
/// whitespace followed by a run of non-whitespace, so whitespace attaches to
/// the word after it. Trailing whitespace forms a final unit of its own.
pub fn split_words(text: &[u8]) -> Vec<&[u8]> {
    let mut words = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        // whitespace run, then non-whitespace run
        while i < text.len() && text[i].is_ascii_whitespace() {
            i += 1;
        }
        while i < text.len() && !text[i].is_ascii_whitespace() {
            i += 1;
        }
        words.push(&text[start..i]);
        start = i;
    }
    words
}

/// The suffix of token ids marked rare: ids in [v_prime, v).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RareTokenSet {
    v: usize,
    v_prime: usize,
}

impl RareTokenSet {
    /// An empty set over a vocabulary of size v (nothing marked rare).
    pub fn empty(v: usize) -> Self {
        RareTokenSet { v, v_prime: v }
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) >= self.v_prime
    }

    pub fn len(&self) -> usize {
        self.v - self.v_prime
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn v_prime(&self) -> usize {
        self.v_prime
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Merge {
    left: u32,
    right: u32,
    output: u32,
}

/// A byte-level BPE tokenizer: dense id -> byte-string vocabulary plus an
/// ordered merge table. Immutable after construction.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    vocab: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    special_tokens: Vec<u32>,
    // derived lookups
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
    byte_ids: [Option<u32>; 256],
}

impl BpeTokenizer {
    /// Build from raw parts, enforcing every load-time invariant.
    pub fn from_parts(
        vocab: Vec<Vec<u8>>,
        merges: Vec<(Vec<u8>, Vec<u8>)>,
        special_tokens: Vec<u32>,
    ) -> Result<Self, TokenizerError> {
        let mut token_ids: HashMap<&[u8], u32> = HashMap::with_capacity(vocab.len());
        for (id, tok) in vocab.iter().enumerate() {
            token_ids.insert(tok.as_slice(), id as u32);
        }

        let mut resolved = Vec::with_capacity(merges.len());
        for (index, (left, right)) in merges.iter().enumerate() {
            let lookup = |side: &Vec<u8>| token_ids.get(side.as_slice()).copied();
            let (l, r) = match (lookup(left), lookup(right)) {
                (Some(l), Some(r)) => (l, r),
                _ => {
                    return Err(TokenizerError::MergeUnknownToken {
                        index,
                        left: String::from_utf8_lossy(left).into_owned(),
                        right: String::from_utf8_lossy(right).into_owned(),
                    })
                }
            };
            let mut joined = left.clone();
            joined.extend_from_slice(right);
            let output = token_ids.get(joined.as_slice()).copied().ok_or_else(|| {
                TokenizerError::MergeOutputMissing {
                    index,
                    output: String::from_utf8_lossy(&joined).into_owned(),
                }
            })?;
            resolved.push(Merge {
                left: l,
                right: r,
                output,
            });
        }

        for &id in &special_tokens {
            if id as usize >= vocab.len() {
                return Err(TokenizerError::SpecialOutOfRange(id));
            }
        }

        let mut merge_rank = HashMap::with_capacity(resolved.len());
        for (rank, m) in resolved.iter().enumerate() {
            // first occurrence wins; duplicates later in the table are shadowed
            merge_rank
                .entry((m.left, m.right))
                .or_insert((rank, m.output));
        }

        let mut byte_ids = [None; 256];
        for (id, tok) in vocab.iter().enumerate() {
            if tok.len() == 1 {
                byte_ids[tok[0] as usize] = Some(id as u32);
            }
        }

        Ok(BpeTokenizer {
            vocab,
            merges: resolved,
            special_tokens,
            merge_rank,
            byte_ids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    pub fn special_tokens(&self) -> &[u32] {
        &self.special_tokens
    }

    /// Merge operands as byte strings, in priority order.
    pub fn merge_pairs(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.merges
            .iter()
            .map(|m| {
                (
                    self.vocab[m.left as usize].clone(),
                    self.vocab[m.right as usize].clone(),
                )
            })
            .collect()
    }

    /// Smallest retained-vocabulary size that keeps every single-byte token
    /// and every special token. Deleting below this would break encoding.
    pub fn alphabet_floor(&self) -> usize {
        let mut floor = 1;
        for (id, tok) in self.vocab.iter().enumerate() {
            if tok.len() == 1 {
                floor = floor.max(id + 1);
            }
        }
        for &id in &self.special_tokens {
            floor = floor.max(id as usize + 1);
        }
        floor
    }

    /// Mark the `V - v_prime` highest ids rare.
    pub fn rare_set(&self, v_prime: usize) -> Result<RareTokenSet, TokenizerError> {
        if v_prime > self.vocab.len() {
            return Err(TokenizerError::VPrimeTooLarge {
                v_prime,
                v: self.vocab.len(),
            });
        }
        let floor = self.alphabet_floor();
        if v_prime < floor {
            return Err(TokenizerError::BelowAlphabetFloor { v_prime, floor });
        }
        Ok(RareTokenSet {
            v: self.vocab.len(),
            v_prime,
        })
    }

    /// Drop the rare suffix of the vocabulary. A merge survives only if its
    /// output token is retained and both operands are retained; order is
    /// preserved. The result satisfies every construction invariant.
    pub fn prune(&self, s: &RareTokenSet) -> Result<BpeTokenizer, TokenizerError> {
        assert_eq!(
            s.v,
            self.vocab.len(),
            "rare set built for another tokenizer"
        );
        let v_prime = s.v_prime;
        let vocab: Vec<Vec<u8>> = self.vocab[..v_prime].to_vec();
        let merges: Vec<(Vec<u8>, Vec<u8>)> = self
            .merges
            .iter()
            .filter(|m| !s.contains(m.output) && !s.contains(m.left) && !s.contains(m.right))
            .map(|m| {
                (
                    self.vocab[m.left as usize].clone(),
                    self.vocab[m.right as usize].clone(),
                )
            })
            .collect();
        BpeTokenizer::from_parts(vocab, merges, self.special_tokens.clone())
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) -> Result<(), TokenizerError> {
        let mut parts: Vec<u32> = Vec::with_capacity(word.len());
        for &b in word {
            parts.push(self.byte_ids[b as usize].ok_or(TokenizerError::ByteNotInAlphabet(b))?);
        }
        // greedy loop: apply the best-ranked adjacent merge, leftmost first
        while parts.len() > 1 {
            let mut best: Option<(usize, usize, u32)> = None; // (rank, position, output)
            for i in 0..parts.len() - 1 {
                if let Some(&(rank, output)) = self.merge_rank.get(&(parts[i], parts[i + 1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, i, output));
                    }
                }
            }
            match best {
                Some((_, i, output)) => {
                    parts[i] = output;
                    parts.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend_from_slice(&parts);
        Ok(())
    }

    /// Standard greedy BPE over pre-tokenized words.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<u32>, TokenizerError> {
        let mut ids = Vec::new();
        for word in split_words(text) {
            self.encode_word(word, &mut ids)?;
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self
                .token_bytes(id)
                .ok_or(TokenizerError::IdOutOfRange(id))?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    /// True when `other`'s vocabulary is a prefix of this one's.
    pub fn is_prefix_of_vocab(&self, other: &BpeTokenizer) -> bool {
        other.vocab.len() <= self.vocab.len() && self.vocab[..other.vocab.len()] == other.vocab[..]
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let (byte_to_char, _) = byte_unicode::tables();
        let vocab: BTreeMap<String, u32> = self
            .vocab
            .iter()
            .enumerate()
            .map(|(id, tok)| (encode_token_string(tok, &byte_to_char), id as u32))
            .collect();
        let merges: Vec<String> = self
            .merges
            .iter()
            .map(|m| {
                format!(
                    "{} {}",
                    encode_token_string(&self.vocab[m.left as usize], &byte_to_char),
                    encode_token_string(&self.vocab[m.right as usize], &byte_to_char)
                )
            })
            .collect();
        let mut special = self.special_tokens.clone();
        special.sort_unstable();
        let doc = TokenizerFile {
            vocab,
            merges,
            special_tokens: special,
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("tokenizer serialization");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct TokenizerFile {
    vocab: BTreeMap<String, u32>,
    merges: Vec<String>,
    special_tokens: Vec<u32>,
}

fn json_obj(v: &serde_json::Value) -> Option<&serde_json::Map<String, serde_json::Value>> {
    v.as_object()
}

pub fn load_tokenizer(path: &Path) -> Result<BpeTokenizer, TokenizerError> {
    let text = fs::read_to_string(path)?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| TokenizerError::Parse(e.to_string()))?;
    let root = json_obj(&doc).ok_or_else(|| TokenizerError::Parse("not a JSON object".into()))?;

    // plain layout, or the common nested "model" layout
    let (vocab_v, merges_v, specials_v) = if let Some(model) = root.get("model") {
        let model = json_obj(model).ok_or_else(|| TokenizerError::Parse("bad model".into()))?;
        (
            model.get("vocab"),
            model.get("merges"),
            root.get("added_tokens"),
        )
    } else {
        (
            root.get("vocab"),
            root.get("merges"),
            root.get("special_tokens"),
        )
    };

    let vocab_map = vocab_v
        .and_then(json_obj)
        .ok_or_else(|| TokenizerError::Parse("missing vocab".into()))?;
    let (_, char_to_byte) = byte_unicode::tables();

    let mut by_id: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
    for (tok, id) in vocab_map {
        let id = id
            .as_u64()
            .ok_or_else(|| TokenizerError::Parse(format!("vocab id for {tok:?} not an integer")))?
            as u32;
        let bytes = decode_token_string(tok, &char_to_byte)?;
        if by_id.insert(id, bytes).is_some() {
            return Err(TokenizerError::NonDenseIds(format!(
                "id {id} appears twice"
            )));
        }
    }

    // nested-layout added tokens may extend the base vocabulary; their
    // content is literal text, not byte-level-encoded
    if root.contains_key("model") {
        if let Some(arr) = specials_v.and_then(|v| v.as_array()) {
            for entry in arr {
                let (Some(id), Some(content)) = (
                    entry.get("id").and_then(|v| v.as_u64()),
                    entry.get("content").and_then(|v| v.as_str()),
                ) else {
                    continue;
                };
                by_id.entry(id as u32).or_insert_with(|| content.as_bytes().to_vec());
            }
        }
    }

    let n = by_id.len();
    if by_id
        .keys()
        .last()
        .is_some_and(|&max| max as usize != n - 1)
    {
        return Err(TokenizerError::NonDenseIds(format!(
            "{} tokens but max id is {}",
            n,
            by_id.keys().last().unwrap()
        )));
    }
    let vocab: Vec<Vec<u8>> = by_id.into_values().collect();

    let merges_list = merges_v
        .and_then(|v| v.as_array())
        .ok_or_else(|| TokenizerError::Parse("missing merges".into()))?;
    let mut merges = Vec::with_capacity(merges_list.len());
    for (i, m) in merges_list.iter().enumerate() {
        let (left, right) = if let Some(s) = m.as_str() {
            let mut it = s.splitn(2, ' ');
            match (it.next(), it.next()) {
                (Some(l), Some(r)) => (l.to_string(), r.to_string()),
                _ => {
                    return Err(TokenizerError::Parse(format!(
                        "merge {i} is not 'left right'"
                    )))
                }
            }
        } else if let Some(pair) = m.as_array() {
            match (
                pair.first().and_then(|v| v.as_str()),
                pair.get(1).and_then(|v| v.as_str()),
            ) {
                (Some(l), Some(r)) => (l.to_string(), r.to_string()),
                _ => return Err(TokenizerError::Parse(format!("merge {i} is not a pair"))),
            }
        } else {
            return Err(TokenizerError::Parse(format!(
                "merge {i} has unexpected type"
            )));
        };
        merges.push((
            decode_token_string(&left, &char_to_byte)?,
            decode_token_string(&right, &char_to_byte)?,
        ));
    }

    let special_tokens = match specials_v {
        None => Vec::new(),
        Some(v) => {
            let arr = v
                .as_array()
                .ok_or_else(|| TokenizerError::Parse("special_tokens is not an array".into()))?;
            arr.iter()
                .map(|e| {
                    // plain id, or the nested added_tokens entry {"id": n, ...}
                    e.as_u64()
                        .or_else(|| e.get("id").and_then(|id| id.as_u64()))
                        .map(|id| id as u32)
                        .ok_or_else(|| TokenizerError::Parse("special token without id".into()))
                })
                .collect::<Result<Vec<u32>, _>>()?
        }
    };

    BpeTokenizer::from_parts(vocab, merges, special_tokens)
}

/// Per-source retokenization statistics between an original tokenizer and a
/// pruned derivative.
#[derive(Debug, Clone, Serialize)]
pub struct SourceChurn {
    pub name: String,
    pub words: u64,
    pub changed_words: u64,
    pub changed_fraction: f64,
    pub token_inflation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChurnReport {
    pub sources: Vec<SourceChurn>,
}

impl ChurnReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("churn serialization")
    }
}

/// Compare encodings word by word. A word counts as changed when the two
/// tokenizers produce different id sequences for it.
pub fn retok_stats(
    orig: &BpeTokenizer,
    pruned: &BpeTokenizer,
    sources: &[(String, Vec<Vec<u8>>)],
) -> Result<ChurnReport, TokenizerError> {
    if !orig.is_prefix_of_vocab(pruned) {
        return Err(TokenizerError::NotDerived);
    }
    let mut report = ChurnReport {
        sources: Vec::new(),
    };
    let mut total_words = 0u64;
    for (name, docs) in sources {
        let mut words = 0u64;
        let mut changed = 0u64;
        let mut orig_tokens = 0u64;
        let mut pruned_tokens = 0u64;
        for doc in docs {
            for word in split_words(doc) {
                let mut a = Vec::new();
                let mut b = Vec::new();
                orig.encode_word(word, &mut a)?;
                pruned.encode_word(word, &mut b)?;
                words += 1;
                if a != b {
                    changed += 1;
                }
                orig_tokens += a.len() as u64;
                pruned_tokens += b.len() as u64;
            }
        }
        total_words += words;
        report.sources.push(SourceChurn {
            name: name.clone(),
            words,
            changed_words: changed,
            changed_fraction: if words == 0 {
                0.0
            } else {
                changed as f64 / words as f64
            },
            token_inflation: if orig_tokens == 0 {
                1.0
            } else {
                pruned_tokens as f64 / orig_tokens as f64
            },
        });
    }
    if total_words == 0 {
        return Err(TokenizerError::EmptyCorpus);
    }
    Ok(report)
}
