//! Sentence normalization, corpus filtering and the vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const NUM_RESERVED: usize = 3;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases, strips everything that is not a letter, digit or whitespace,
/// and splits on whitespace.
pub fn normalize(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// `|A ∩ B| / min(|A|, |B|)` over unigram sets. Zero when either side is empty.
pub fn unigram_overlap(a: &[String], b: &[String]) -> f64 {
    let sa: HashSet<&str> = a.iter().map(String::as_str).collect();
    let sb: HashSet<&str> = b.iter().map(String::as_str).collect();
    let denom = sa.len().min(sb.len());
    if denom == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / denom as f64
}

/// Filters the sentences attached to a single image: short sentences are
/// dropped, then any sentence whose overlap with an earlier kept sentence
/// reaches `overlap_threshold`.
pub fn filter_sentences(
    sentences: impl IntoIterator<Item = Vec<String>>,
    min_len: usize,
    overlap_threshold: f64,
) -> Vec<Vec<String>> {
    let mut kept: Vec<Vec<String>> = Vec::new();
    for s in sentences {
        if s.len() < min_len {
            continue;
        }
        if kept
            .iter()
            .any(|k| unigram_overlap(k, &s) >= overlap_threshold)
        {
            continue;
        }
        kept.push(s);
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_reserved(sentences: u64, unknown: u64) -> Self {
        let mut v = Vocabulary {
            words: vec![BOS_TOKEN.into(), EOS_TOKEN.into(), UNK_TOKEN.into()],
            counts: vec![sentences, sentences, unknown],
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    /// Rebuilds from explicit `(word, count)` rows in id order. The first three
    /// rows must be the reserved tokens.
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let reserved = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        if entries.len() < NUM_RESERVED
            || entries
                .iter()
                .zip(reserved)
                .any(|((w, _), r)| w.as_str() != r)
        {
            return Err(Error::Data(
                "vocabulary must start with <bos>, <eos>, <unk>".into(),
            ));
        }
        let (words, counts): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let mut v = Vocabulary {
            words,
            counts,
            index: HashMap::new(),
        };
        v.reindex();
        if v.index.len() != v.words.len() {
            return Err(Error::Data("vocabulary contains duplicate words".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == NUM_RESERVED
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    /// Stable 64-bit digest of the word list, used to pair checkpoints with
    /// the vocabulary they were trained on.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (w, c) in self.words.iter().zip(&self.counts) {
            writeln!(out, "{w}\t{c}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let (w, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&name, i + 1, "expected word<TAB>count"))?;
            let c: u64 = c
                .trim()
                .parse()
                .map_err(|_| Error::parse(&name, i + 1, format!("bad count {c:?}")))?;
            entries.push((w.to_owned(), c));
        }
        Self::from_entries(entries)
    }
}

/// Counts tokens and keeps every word seen at least `min_count` times. Ids
/// follow the reserved tokens in descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<'a, I>(corpus: I, min_count: u64) -> Vocabulary
where
    I: IntoIterator<Item = &'a [String]>,
{
    let min_count = min_count.max(1);
    let mut freq: HashMap<&str, u64> = HashMap::new();
    let mut sentences = 0u64;
    for s in corpus {
        sentences += 1;
        for w in s {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = Vec::new();
    let mut dropped = 0u64;
    for (w, c) in freq {
        if c >= min_count {
            kept.push((w, c));
        } else {
            dropped += c;
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut v = Vocabulary::with_reserved(sentences, dropped);
    for (w, c) in kept {
        v.words.push(w.to_owned());
        v.counts.push(c);
    }
    v.reindex();
    v
}

/// Token ids of one sentence, bounded by `BOS` and `EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || *ids.last().unwrap() != EOS {
            return Err(Error::Contract(
                "token sequence must start with BOS and end with EOS".into(),
            ));
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens that are neither boundaries nor `UNK`.
    pub fn content(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied().filter(|&id| id >= NUM_RESERVED)
    }
}

pub fn encode(sentence: &[String], vocab: &Vocabulary) -> TokenSequence {
    let mut ids = Vec::with_capacity(sentence.len() + 2);
    ids.push(BOS);
    ids.extend(sentence.iter().map(|w| vocab.id(w).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSequence(ids)
}

/// Inverse of [`encode`] for in-vocabulary sentences; boundaries are dropped.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    seq.0[1..seq.0.len() - 1]
        .iter()
        .map(|&id| vocab.word(id).to_owned())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub image_id: String,
    pub sentence: String,
}

/// Reads `image_id<TAB>sentence` lines.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), &path.display().to_string())
}

pub fn parse_corpus(reader: impl BufRead, name: &str) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.is_empty() {
            continue;
        }
        let (image_id, sentence) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(name, i + 1, "expected image_id<TAB>sentence"))?;
        out.push(CorpusRecord {
            image_id: image_id.to_owned(),
            sentence: sentence.to_owned(),
        });
    }
    Ok(out)
}

/// Normalized sentences grouped by image, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageSentences {
    pub image_id: String,
    pub sentences: Vec<Vec<String>>,
}

pub fn group_by_image(records: &[CorpusRecord]) -> Vec<ImageSentences> {
    let mut order: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<ImageSentences> = Vec::new();
    for r in records {
        let slot = *order.entry(r.image_id.as_str()).or_insert_with(|| {
            groups.push(ImageSentences {
                image_id: r.image_id.clone(),
                sentences: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].sentences.push(normalize(&r.sentence));
    }
    groups
}

/// Normalizes, groups and filters a raw corpus.
pub fn prepare_corpus(
    records: &[CorpusRecord],
    min_len: usize,
    overlap_threshold: f64,
) -> Vec<ImageSentences> {
    group_by_image(records)
        .into_iter()
        .map(|g| ImageSentences {
            sentences: filter_sentences(g.sentences, min_len, overlap_threshold),
            image_id: g.image_id,
        })
        .filter(|g| !g.sentences.is_empty())
        .collect()
}
