//! WordPiece vocabulary training and greedy longest-match encoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

pub const CONTINUATION: &str = "##";
pub const DEFAULT_MAX_WORD_LENGTH: usize = 64;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

fn is_split_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Split on whitespace, then split every punctuation or symbol character
/// into a word of its own.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if is_split_char(c) {
                if start < i {
                    words.push(&chunk[start..i]);
                }
                let end = i + c.len_utf8();
                words.push(&chunk[i..end]);
                start = end;
            }
        }
        if start < chunk.len() {
            words.push(&chunk[start..]);
        }
    }
    words
}

/// Word-frequency table; `BTreeMap` keeps iteration order deterministic.
pub type WordCounts = BTreeMap<String, u64>;

pub fn count_words<S: AsRef<str> + Sync>(texts: &[S]) -> WordCounts {
    texts
        .par_iter()
        .fold(HashMap::<String, u64>::new, |mut acc, t| {
            for w in pretokenize(t.as_ref()) {
                *acc.entry(w.to_string()).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        })
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Target vocabulary size including the special tokens.
    pub vocab_size: usize,
    pub min_pair_frequency: u64,
    pub max_word_length: usize,
}

impl TrainerConfig {
    pub const PRODUCTION_VOCAB_SIZE: usize = 70_000;
    pub const DESK_VOCAB_SIZE: usize = 1_000;

    pub fn production() -> Self {
        Self {
            vocab_size: Self::PRODUCTION_VOCAB_SIZE,
            ..Self::default()
        }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            vocab_size: Self::DESK_VOCAB_SIZE,
            min_pair_frequency: 1,
            max_word_length: DEFAULT_MAX_WORD_LENGTH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubwordVocabulary {
    pieces: Vec<String>,
    id_of: HashMap<String, u32>,
    /// Words longer than this (in chars) encode to `[UNK]`.
    pub max_word_length: usize,
}

impl PartialEq for SubwordVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces
    }
}

impl SubwordVocabulary {
    /// Build from an ordered piece list; checks the specials layout and uniqueness.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::VocabFormat {
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        let mut id_of = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.contains('\n') || p.contains('\r') {
                return Err(Error::VocabFormat {
                    line: i + 1,
                    message: "empty or multi-line piece".into(),
                });
            }
            if i >= SPECIALS.len() && (p == CONTINUATION || SPECIALS.contains(&p.as_str())) {
                return Err(Error::VocabFormat {
                    line: i + 1,
                    message: format!("invalid piece {p:?}"),
                });
            }
            if id_of.insert(p.clone(), i as u32).is_some() {
                return Err(Error::VocabFormat {
                    line: i + 1,
                    message: format!("duplicate piece {p:?}"),
                });
            }
        }
        Ok(Self {
            pieces,
            id_of,
            max_word_length: DEFAULT_MAX_WORD_LENGTH,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.id_of.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.id_of.contains_key(piece)
    }

    /// Canonical file contents: one piece per line, LF terminated.
    pub fn to_file_string(&self) -> String {
        let mut s = String::with_capacity(self.pieces.iter().map(|p| p.len() + 1).sum());
        for p in &self.pieces {
            s.push_str(p);
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the canonical file contents.
    pub fn fingerprint(&self) -> String {
        hex_digest(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&content)
    }

    pub fn parse(content: &str) -> Result<Self> {
        let body = content.strip_suffix('\n').unwrap_or(content);
        if body.is_empty() {
            return Err(Error::VocabFormat {
                line: 1,
                message: "empty vocabulary file".into(),
            });
        }
        Self::from_pieces(body.split('\n').map(str::to_string).collect())
    }

    /// Greedy longest-match-first segmentation of one word.
    /// Returns `None` when some remainder cannot be matched.
    pub fn segment_word(&self, word: &str) -> Option<Vec<u32>> {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let mut out = Vec::new();
        let mut start = 0usize;
        let mut candidate = String::with_capacity(word.len() + 2);
        while start + 1 < bounds.len() {
            let mut matched = None;
            for end in (start + 1..bounds.len()).rev() {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.push_str(&word[bounds[start]..bounds[end]]);
                if let Some(id) = self.id(&candidate) {
                    matched = Some((id, end));
                    break;
                }
            }
            let (id, end) = matched?;
            out.push(id);
            start = end;
        }
        Some(out)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pretokenize(text) {
            if word.chars().count() > self.max_word_length {
                ids.push(UNK_ID);
                continue;
            }
            match self.segment_word(word) {
                Some(seg) => ids.extend(seg),
                None => ids.push(UNK_ID),
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or_else(|| {
                Error::Tokenizer(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.len()
                ))
            })?;
            if is_special(id) && id != UNK_ID {
                continue;
            }
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if id != UNK_ID => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Prefix tree over vocabulary pieces; output-equivalent to
/// [`SubwordVocabulary::segment_word`] but scans each start position once.
#[derive(Debug, Clone)]
pub struct TrieMatcher {
    nodes: Vec<TrieNode>,
    initial_root: usize,
    continuation_root: usize,
    max_word_length: usize,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<char, usize>,
    id: Option<u32>,
}

impl TrieMatcher {
    pub fn new(vocab: &SubwordVocabulary) -> Self {
        let mut m = Self {
            nodes: vec![TrieNode::default(), TrieNode::default()],
            initial_root: 0,
            continuation_root: 1,
            max_word_length: vocab.max_word_length,
        };
        for (id, piece) in vocab.pieces().iter().enumerate() {
            if is_special(id as u32) {
                continue;
            }
            let (root, rest) = match piece.strip_prefix(CONTINUATION) {
                Some(rest) => (m.continuation_root, rest),
                None => (m.initial_root, piece.as_str()),
            };
            let mut node = root;
            for c in rest.chars() {
                let next = m.nodes.len();
                node = *m.nodes[node].children.entry(c).or_insert(next);
                if node == next {
                    m.nodes.push(TrieNode::default());
                }
            }
            m.nodes[node].id = Some(id as u32);
        }
        m
    }

    pub fn segment_word(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut node = if start == 0 {
                self.initial_root
            } else {
                self.continuation_root
            };
            let mut best = None;
            for (offset, c) in chars[start..].iter().enumerate() {
                match self.nodes[node].children.get(c) {
                    Some(&n) => node = n,
                    None => break,
                }
                if let Some(id) = self.nodes[node].id {
                    best = Some((id, start + offset + 1));
                }
            }
            let (id, end) = best?;
            out.push(id);
            start = end;
        }
        Some(out)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pretokenize(text) {
            if word.chars().count() > self.max_word_length {
                ids.push(UNK_ID);
                continue;
            }
            match self.segment_word(word) {
                Some(seg) => ids.extend(seg),
                None => ids.push(UNK_ID),
            }
        }
        ids
    }
}

/// One accepted merge, in training order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Merge {
    pub left: String,
    pub right: String,
    pub merged: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub vocab: SubwordVocabulary,
    pub merges: Vec<Merge>,
}

fn merged_piece(left: &str, right: &str) -> String {
    let mut s = left.to_string();
    s.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
    s
}

/// `a` scores strictly higher than `b`; scores are `pair / (left * right)`
/// compared exactly by cross-multiplication.
fn better(a: (u64, u64, u64), b: (u64, u64, u64)) -> std::cmp::Ordering {
    let lhs = a.0 as u128 * (b.1 as u128 * b.2 as u128);
    let rhs = b.0 as u128 * (a.1 as u128 * a.2 as u128);
    lhs.cmp(&rhs)
}

pub fn train_wordpiece(counts: &WordCounts, cfg: &TrainerConfig) -> Result<SubwordVocabulary> {
    train_wordpiece_traced(counts, cfg).map(|t| t.vocab)
}

/// Train a WordPiece vocabulary, also returning the merge sequence.
pub fn train_wordpiece_traced(counts: &WordCounts, cfg: &TrainerConfig) -> Result<TrainOutput> {
    if cfg.min_pair_frequency < 1 {
        return Err(Error::Tokenizer(
            "min_pair_frequency must be at least 1".into(),
        ));
    }
    let words: Vec<(&str, u64)> = counts
        .iter()
        .filter(|(w, &f)| f > 0 && !w.is_empty() && w.chars().count() <= cfg.max_word_length)
        .map(|(w, &f)| (w.as_str(), f))
        .collect();
    if words.is_empty() {
        return Err(Error::Tokenizer("cannot train on an empty corpus".into()));
    }

    let alphabet: Vec<char> = words
        .iter()
        .flat_map(|(w, _)| w.chars())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));
    pieces.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));
    let seed_size = pieces.len();
    if cfg.vocab_size < seed_size {
        return Err(Error::Tokenizer(format!(
            "vocab_size {} is smaller than the seed vocabulary ({} specials + {} characters x 2)",
            cfg.vocab_size,
            SPECIALS.len(),
            alphabet.len()
        )));
    }
    let mut id_of: HashMap<String, u32> = pieces
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i as u32))
        .collect();

    let mut segs: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| {
            w.chars()
                .enumerate()
                .map(|(i, c)| {
                    let key = if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    };
                    id_of[&key]
                })
                .collect()
        })
        .collect();
    let freqs: Vec<u64> = words.iter().map(|(_, f)| *f).collect();

    let mut piece_freq: HashMap<u32, u64> = HashMap::new();
    let mut pair_freq: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();

    fn account(
        seg: &[u32],
        wi: usize,
        f: u64,
        add: bool,
        piece_freq: &mut HashMap<u32, u64>,
        pair_freq: &mut HashMap<(u32, u32), u64>,
        pair_words: &mut HashMap<(u32, u32), HashSet<usize>>,
    ) {
        for &p in seg {
            let e = piece_freq.entry(p).or_default();
            if add {
                *e += f;
            } else {
                *e -= f;
            }
        }
        for w in seg.windows(2) {
            let key = (w[0], w[1]);
            if add {
                *pair_freq.entry(key).or_default() += f;
                pair_words.entry(key).or_default().insert(wi);
            } else {
                let e = pair_freq.get_mut(&key).expect("pair accounted");
                *e -= f;
                if *e == 0 {
                    pair_freq.remove(&key);
                    pair_words.remove(&key);
                } else if let Some(s) = pair_words.get_mut(&key) {
                    s.remove(&wi);
                }
            }
        }
    }

    for (wi, seg) in segs.iter().enumerate() {
        account(
            seg,
            wi,
            freqs[wi],
            true,
            &mut piece_freq,
            &mut pair_freq,
            &mut pair_words,
        );
    }

    let mut merges = Vec::new();
    while pieces.len() < cfg.vocab_size {
        // highest score, then smallest merged string, then smallest left piece
        let mut best: Option<((u32, u32), (u64, u64, u64), String)> = None;
        for (&(l, r), &f) in &pair_freq {
            if f < cfg.min_pair_frequency {
                continue;
            }
            let score = (f, piece_freq[&l], piece_freq[&r]);
            let replace = match &best {
                None => true,
                Some(((bl, _), bs, bm)) => match better(score, *bs) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => {
                        let m = merged_piece(&pieces[l as usize], &pieces[r as usize]);
                        (&m, &pieces[l as usize]) < (bm, &pieces[*bl as usize])
                    }
                },
            };
            if replace {
                let m = merged_piece(&pieces[l as usize], &pieces[r as usize]);
                best = Some(((l, r), score, m));
            }
        }
        let Some(((l, r), _, merged)) = best else {
            break;
        };
        let new_id = match id_of.get(&merged) {
            Some(&id) => id,
            None => {
                let id = pieces.len() as u32;
                pieces.push(merged.clone());
                id_of.insert(merged.clone(), id);
                id
            }
        };
        merges.push(Merge {
            left: pieces[l as usize].clone(),
            right: pieces[r as usize].clone(),
            merged,
        });

        let mut affected: Vec<usize> = pair_words
            .get(&(l, r))
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let old = std::mem::take(&mut segs[wi]);
            account(
                &old,
                wi,
                freqs[wi],
                false,
                &mut piece_freq,
                &mut pair_freq,
                &mut pair_words,
            );
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == l && old[i + 1] == r {
                    new.push(new_id);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            account(
                &new,
                wi,
                freqs[wi],
                true,
                &mut piece_freq,
                &mut pair_freq,
                &mut pair_words,
            );
            segs[wi] = new;
        }
    }

    let mut vocab = SubwordVocabulary::from_pieces(pieces)?;
    vocab.max_word_length = cfg.max_word_length;
    Ok(TrainOutput { vocab, merges })
}
