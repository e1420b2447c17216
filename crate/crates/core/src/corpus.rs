//! Text ingestion: tokenization, vocabulary, document batching and a
//! deterministic synthetic corpus generator for desk-scale experiments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
/// Document boundary; appended to every line and used as the first context token.
pub const BOUNDARY: &str = "</s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenMode {
    #[default]
    Word,
    Char,
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            _ => Err(Error::config(format!("unknown tokenizer mode {s:?} (word|char)"))),
        }
    }
}

/// Splits one line into tokens, appending the boundary marker.
pub fn split_line(line: &str, mode: TokenMode) -> Vec<String> {
    let mut out: Vec<String> = match mode {
        TokenMode::Word => line.split_whitespace().map(|w| w.to_lowercase()).collect(),
        TokenMode::Char => line.chars().map(|c| c.to_string()).collect(),
    };
    out.push(BOUNDARY.to_string());
    out
}

fn lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.trim().is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk_id: usize,
}

impl Vocab {
    /// Builds a frequency-ranked vocabulary (ties broken lexicographically)
    /// of at most `max_size` regular tokens seen at least `min_count` times,
    /// plus `<unk>` at id 0.
    pub fn build(text: &str, mode: TokenMode, max_size: Option<usize>, min_count: usize) -> Result<Vocab> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines(text) {
            for tok in split_line(line, mode) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::config("cannot build a vocabulary from empty text"));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && t != UNK)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(m) = max_size {
            ranked.truncate(m);
        }
        let tokens = std::iter::once(UNK.to_string()).chain(ranked.into_iter().map(|(t, _)| t)).collect();
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let unk_id = *index
            .get(UNK)
            .ok_or_else(|| Error::config("vocabulary has no <unk> token"))?;
        Ok(Vocab { tokens, index, unk_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn boundary_id(&self) -> usize {
        self.id(BOUNDARY)
    }

    /// FNV-1a over the newline-joined token list; stored in model headers.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                h = (h ^ b'\n' as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for b in t.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Token ids of one line, without boundary markers.
    pub fn encode_line(&self, line: &str, mode: TokenMode) -> Vec<usize> {
        let mut toks = split_line(line, mode);
        toks.pop();
        toks.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize], mode: TokenMode) -> String {
        let sep = match mode {
            TokenMode::Word => " ",
            TokenMode::Char => "",
        };
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect::<Vec<_>>().join(sep)
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.split('\n').map(str::to_string).collect();
        let tokens = match tokens.last() {
            Some(l) if l.is_empty() => tokens[..tokens.len() - 1].to_vec(),
            _ => tokens,
        };
        Vocab::from_tokens(tokens)
    }
}

/// A minibatch of token sequences. Each sequence starts with the boundary
/// token; position `t` is the context for predicting position `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Vec<usize>>) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2) {
            return Err(Error::config("batch needs at least one sequence of length >= 2"));
        }
        Ok(TokenBatch { sequences })
    }

    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }

    /// Number of prediction steps of the longest sequence.
    pub fn steps(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).max().unwrap_or(0)
    }

    pub fn num_targets(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }

    pub fn max_id(&self) -> usize {
        self.sequences.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Tokenized documents (one per non-empty line), each wrapped in boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_text(text: &str, vocab: &Vocab, mode: TokenMode) -> Corpus {
        let b = vocab.boundary_id();
        let documents = lines(text)
            .map(|l| {
                let mut d = vec![b];
                d.extend(vocab.encode_line(l, mode));
                d.push(b);
                d
            })
            .collect();
        Corpus { documents }
    }

    pub fn num_targets(&self) -> usize {
        self.documents.iter().map(|d| d.len() - 1).sum()
    }

    /// Splits documents into windows of at most `max_len` prediction steps.
    /// Consecutive windows overlap by one token so every target is predicted
    /// exactly once; the context is reset at each window.
    pub fn windows(&self, max_len: usize) -> Vec<Vec<usize>> {
        let max_len = max_len.max(1);
        let mut out = Vec::new();
        for d in &self.documents {
            let mut start = 0;
            while start + 1 < d.len() {
                let end = (start + max_len + 1).min(d.len());
                out.push(d[start..end].to_vec());
                start = end - 1;
            }
        }
        out
    }

    /// Batches in document order.
    pub fn batches(&self, batch_size: usize, max_len: usize) -> Vec<TokenBatch> {
        self.windows(max_len)
            .chunks(batch_size.max(1))
            .map(|c| TokenBatch { sequences: c.to_vec() })
            .collect()
    }

    /// Batches after a seeded shuffle of the windows.
    pub fn shuffled_batches(&self, batch_size: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<TokenBatch> {
        let mut w = self.windows(max_len);
        w.shuffle(rng);
        w.chunks(batch_size.max(1))
            .map(|c| TokenBatch { sequences: c.to_vec() })
            .collect()
    }

    /// One randomly drawn minibatch.
    pub fn sample_batch(&self, batch_size: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Result<TokenBatch> {
        let w = self.windows(max_len);
        if w.is_empty() {
            return Err(Error::config("corpus has no documents"));
        }
        let seqs = w.choose_multiple(rng, batch_size.min(w.len())).cloned().collect();
        TokenBatch::new(seqs)
    }
}

/// Deterministic English-like text from a small agreement grammar with
/// per-line topics. Produces `lines` lines.
pub fn synthetic_text(seed: u64, lines: usize) -> String {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..lines {
        let topic = &TOPICS[rng.gen_range(0..TOPICS.len())];
        let n = if rng.gen_bool(0.35) { 2 } else { 1 };
        let mut words: Vec<&str> = Vec::new();
        for s in 0..n {
            if s > 0 {
                words.push(["and", "but", "because", "so"][rng.gen_range(0..4)]);
            }
            clause(&mut rng, topic, &mut words);
        }
        words.push(".");
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}

struct Topic {
    nouns: &'static [(&'static str, &'static str)],
    verbs_t: &'static [(&'static str, &'static str)],
    verbs_i: &'static [(&'static str, &'static str)],
    adjs: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: [Topic; 4] = [
    Topic {
        nouns: &[("cat", "cats"), ("dog", "dogs"), ("bird", "birds"), ("horse", "horses"), ("fox", "foxes"), ("mouse", "mice")],
        verbs_t: &[("chases", "chase"), ("sees", "see"), ("follows", "follow"), ("likes", "like")],
        verbs_i: &[("sleeps", "sleep"), ("runs", "run"), ("barks", "bark"), ("hides", "hide")],
        adjs: &["small", "brown", "quick", "lazy", "wild"],
        places: &["the forest", "the field", "the barn", "the river"],
    },
    Topic {
        nouns: &[("driver", "drivers"), ("bus", "buses"), ("shop", "shops"), ("street", "streets"), ("tower", "towers"), ("worker", "workers")],
        verbs_t: &[("passes", "pass"), ("builds", "build"), ("visits", "visit"), ("needs", "need")],
        verbs_i: &[("waits", "wait"), ("stops", "stop"), ("opens", "open"), ("works", "work")],
        adjs: &["busy", "old", "tall", "noisy", "empty"],
        places: &["the city", "the station", "the market", "the bridge"],
    },
    Topic {
        nouns: &[("cook", "cooks"), ("apple", "apples"), ("bread", "breads"), ("soup", "soups"), ("cake", "cakes"), ("guest", "guests")],
        verbs_t: &[("eats", "eat"), ("bakes", "bake"), ("serves", "serve"), ("wants", "want")],
        verbs_i: &[("smiles", "smile"), ("waits", "wait"), ("cooks", "cook"), ("sits", "sit")],
        adjs: &["fresh", "sweet", "hot", "warm", "green"],
        places: &["the kitchen", "the table", "the garden", "the market"],
    },
    Topic {
        nouns: &[("student", "students"), ("teacher", "teachers"), ("idea", "ideas"), ("model", "models"), ("paper", "papers"), ("lab", "labs")],
        verbs_t: &[("writes", "write"), ("tests", "test"), ("reads", "read"), ("explains", "explain")],
        verbs_i: &[("thinks", "think"), ("learns", "learn"), ("works", "work"), ("talks", "talk")],
        adjs: &["new", "clever", "simple", "large", "strange"],
        places: &["the school", "the library", "the lab", "the office"],
    },
];

fn noun_phrase(rng: &mut ChaCha8Rng, t: &Topic, plural: bool, out: &mut Vec<&'static str>) {
    let det: &[&str] = if plural { &["the", "some", "many", "two"] } else { &["the", "a", "every", "one"] };
    out.push(det[rng.gen_range(0..det.len())]);
    if rng.gen_bool(0.4) {
        out.push(t.adjs[rng.gen_range(0..t.adjs.len())]);
    }
    let (sg, pl) = t.nouns[rng.gen_range(0..t.nouns.len())];
    out.push(if plural { pl } else { sg });
}

fn clause(rng: &mut ChaCha8Rng, t: &'static Topic, out: &mut Vec<&'static str>) {
    let plural = rng.gen_bool(0.4);
    noun_phrase(rng, t, plural, out);
    if rng.gen_bool(0.2) {
        out.push(if plural { "that" } else { "who" });
        let (sg, pl) = t.verbs_i[rng.gen_range(0..t.verbs_i.len())];
        out.push(if plural { pl } else { sg });
    }
    if rng.gen_bool(0.6) {
        let (sg, pl) = t.verbs_t[rng.gen_range(0..t.verbs_t.len())];
        out.push(if plural { pl } else { sg });
        let obj_pl = rng.gen_bool(0.4);
        noun_phrase(rng, t, obj_pl, out);
    } else {
        let (sg, pl) = t.verbs_i[rng.gen_range(0..t.verbs_i.len())];
        out.push(if plural { pl } else { sg });
    }
    if rng.gen_bool(0.4) {
        out.push(["in", "near", "behind"][rng.gen_range(0..3)]);
        let place = t.places[rng.gen_range(0..t.places.len())];
        out.extend(place.split(' '));
    }
}
