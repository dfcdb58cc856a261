//! Word-level Byte Pair Encoding.
//!
//! Text is lowercased and split on whitespace; the final symbol of every word carries the
//! `</w>` marker, so merges never cross word boundaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>"];
pub const END_OF_WORD: &str = "</w>";
pub const DEFAULT_VOCAB_SIZE: usize = 1000;

const HEADER_PREFIX: &str = "bpe-vocab v1";
const MERGES_SENTINEL: &str = "#merges";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    lowercase: bool,
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair_in(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair, ties broken by the
/// lexicographically smallest pair, until `target_size` tokens exist or no pair occurs twice.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    let lowercase = true;
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        let line = normalize(line.as_ref(), lowercase);
        for w in line.split_whitespace() {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Vocab("cannot train BPE on an empty corpus".into()));
    }

    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(w, &c)| (word_symbols(w), c))
        .collect();

    let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut alphabet: Vec<String> = words
        .iter()
        .flat_map(|(s, _)| s.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    alphabet.retain(|s| !SPECIAL_TOKENS.contains(&s.as_str()));
    id_to_token.extend(alphabet);

    let mut merges = Vec::new();
    while id_to_token.len() < target_size {
        let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&((l, r), c)| {
                c >= 2 && !SPECIAL_TOKENS.contains(&format!("{l}{r}").as_str())
            })
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (syms, _) in words.iter_mut() {
            merge_pair_in(syms, &l, &r);
        }
        if !id_to_token.contains(&merged) {
            id_to_token.push(merged);
        }
        merges.push((l, r));
    }
    Vocab::from_parts(id_to_token, merges, lowercase)
}

fn normalize(text: &str, lowercase: bool) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if lowercase {
        joined.to_lowercase()
    } else {
        joined
    }
}

impl Vocab {
    pub fn from_parts(id_to_token: Vec<String>, merges: Vec<(String, String)>, lowercase: bool) -> Result<Self> {
        if id_to_token.len() < NUM_SPECIALS
            || id_to_token[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Vocab("special tokens must occupy ids 0-4".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (i, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            if SPECIAL_TOKENS.contains(&merged.as_str()) {
                return Err(Error::Vocab(format!("merge produces special token {merged}")));
            }
            merge_rank.entry((l.clone(), r.clone())).or_insert(i);
        }
        Ok(Vocab {
            id_to_token,
            token_to_id,
            merges,
            merge_rank,
            lowercase,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_rank
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_pair_in(&mut syms, l, r);
        }
        out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let text = normalize(text, self.lowercase);
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut ids);
        }
        ids
    }

    /// Joins tokens back into whitespace-separated words. Structural specials are dropped;
    /// `<unk>` and out-of-range ids render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut text = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS | SEP) {
                continue;
            }
            let tok = match self.token(id) {
                Some(t) if id != UNK => t,
                // unknown pieces stay attached to their word
                _ => SPECIAL_TOKENS[UNK as usize],
            };
            match tok.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    text.push_str(stem);
                    text.push(' ');
                }
                None => text.push_str(tok),
            }
        }
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER_PREFIX} lowercase={}", self.lowercase);
        for t in &self.id_to_token {
            let _ = writeln!(s, "{t}");
        }
        let _ = writeln!(s, "{MERGES_SENTINEL}");
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Vocab("empty vocab file".into()))?;
        let flag = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|rest| rest.trim().strip_prefix("lowercase="))
            .ok_or_else(|| Error::Vocab(format!("bad vocab header {header:?}")))?;
        let lowercase = match flag {
            "true" => true,
            "false" => false,
            other => return Err(Error::Vocab(format!("bad lowercase flag {other:?}"))),
        };
        let mut tokens = Vec::new();
        let mut saw_sentinel = false;
        for line in lines.by_ref() {
            if line == MERGES_SENTINEL {
                saw_sentinel = true;
                break;
            }
            tokens.push(line.to_string());
        }
        if !saw_sentinel {
            return Err(Error::Vocab("missing #merges sentinel".into()));
        }
        let mut merges = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Vocab(format!("bad merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        Vocab::from_parts(tokens, merges, lowercase)
    }

    /// SHA-256 of the serialized vocab, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_bpe(&["aaab", "aaab"], 100).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn no_repeated_pair_means_no_merges() {
        let v = train_bpe(&["ab", "cd"], 100).unwrap();
        assert!(v.merges().is_empty());
        // a, b</w>, c, d</w>
        assert_eq!(v.len(), NUM_SPECIALS + 4);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["how do i make friends", "how can i find friends", "do i need friends"];
        let a = train_bpe(&corpus, 60).unwrap();
        let b = train_bpe(&corpus, 60).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(train_bpe::<&str>(&[], 100).is_err());
        assert!(train_bpe(&["   "], 100).is_err());
    }

    #[test]
    fn roundtrip_in_vocab_text() {
        let corpus = ["how do i make friends", "what makes a good friend"];
        let v = train_bpe(&corpus, 200).unwrap();
        assert_eq!(v.decode(&v.encode("how do i make friends")), "how do i make friends");
        assert_eq!(v.decode(&v.encode("  How   DO i\tmake friends ")), "how do i make friends");
    }

    #[test]
    fn specials_are_stripped() {
        let v = train_bpe(&["a b"], 100).unwrap();
        assert_eq!(v.decode(&[PAD, PAD]), "");
        let mut ids = vec![BOS];
        ids.extend(v.encode("a b"));
        ids.extend([EOS, PAD, SEP]);
        assert_eq!(v.decode(&ids), "a b");
    }

    #[test]
    fn unknown_characters_fall_back_to_unk() {
        let v = train_bpe(&["hello world"], 100).unwrap();
        let ids = v.encode("héllo");
        assert!(ids.contains(&UNK));
        assert_eq!(v.decode(&[9999]), "<unk>");
    }

    #[test]
    fn specials_never_merge_outputs() {
        let v = train_bpe(&["<pad> <pad> <pad>"], 100).unwrap();
        for (l, r) in v.merges() {
            assert!(!SPECIAL_TOKENS.contains(&format!("{l}{r}").as_str()));
        }
        for (i, t) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
    }

    #[test]
    fn file_format_roundtrip() {
        let v = train_bpe(&["the cat sat on the mat", "the dog sat"], 80).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("bpe-vocab v1 lowercase=true\n"));
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocab::from_text("garbage\n").is_err());
    }
}
