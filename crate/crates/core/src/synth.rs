//! Synthetic multimodal datasets with known concept structure.
//!
//! Each of `K` concepts owns a disjoint cluster of words and a block of
//! feature bits. An image of concept `c` has its block set plus random noise
//! bits. Each of its sentences holds `concept_words_per_sentence` words from
//! cluster `c` and `noise_words_per_sentence` words from a pool shared by all
//! concepts, in random order. With one concept word per sentence the text
//! alone carries no information about which concept words belong together;
//! only the image does.
//!
//! Triplets pair two words of one concept against a word of another, with
//! base concepts cycling through `0..K` so classes stay balanced.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{write_triplets, Triplet};
use crate::features::{write_features, FeatureTable, VisualFeature, DEFAULT_FEATURE_DIM};
use crate::text::CorpusRecord;

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const TRIPLETS_FILE: &str = "triplets.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_concepts: usize,
    pub images_per_concept: usize,
    pub sentences_per_image: usize,
    pub words_per_concept: usize,
    pub noise_words: usize,
    pub concept_words_per_sentence: usize,
    pub noise_words_per_sentence: usize,
    pub feature_dim: usize,
    /// Probability that any bit is switched on by noise.
    pub feature_noise: f64,
    pub num_triplets: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_concepts: 10,
            images_per_concept: 200,
            sentences_per_image: 10,
            words_per_concept: 20,
            noise_words: 100,
            concept_words_per_sentence: 1,
            noise_words_per_sentence: 3,
            feature_dim: DEFAULT_FEATURE_DIM,
            feature_noise: 0.01,
            num_triplets: 10_000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_concepts < 2 {
            return fail(format!("need at least 2 concepts, got {}", self.num_concepts));
        }
        if self.words_per_concept < 2 {
            return fail(format!(
                "need at least 2 words per concept, got {}",
                self.words_per_concept
            ));
        }
        if self.feature_dim / self.num_concepts == 0 {
            return fail(format!(
                "{} concepts do not fit in {} feature bits",
                self.num_concepts, self.feature_dim
            ));
        }
        if self.concept_words_per_sentence + self.noise_words_per_sentence == 0 {
            return fail("sentences would be empty".into());
        }
        if self.noise_words_per_sentence > 0 && self.noise_words == 0 {
            return fail("noise words requested but the noise pool is empty".into());
        }
        if !(0.0..=1.0).contains(&self.feature_noise) {
            return fail(format!("feature noise {} outside [0, 1]", self.feature_noise));
        }
        if self.images_per_concept == 0 || self.sentences_per_image == 0 {
            return fail("dataset would be empty".into());
        }
        Ok(())
    }

    fn block_bits(&self) -> usize {
        self.feature_dim / self.num_concepts
    }
}

pub fn concept_word(concept: usize, i: usize) -> String {
    format!("c{concept}w{i}")
}

pub fn noise_word(i: usize) -> String {
    format!("n{i}")
}

pub fn image_id(i: usize) -> String {
    format!("img{i:06}")
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub corpus: Vec<CorpusRecord>,
    pub features: FeatureTable,
    pub triplets: Vec<Triplet>,
    /// Concept of each image, in image order.
    pub image_concepts: Vec<usize>,
}

impl SynthDataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let corpus_path = dir.join(CORPUS_FILE);
        let mut text = String::new();
        for r in &self.corpus {
            text.push_str(&r.image_id);
            text.push('\t');
            text.push_str(&r.sentence);
            text.push('\n');
        }
        std::fs::write(&corpus_path, text).map_err(|e| Error::io(&corpus_path, e))?;
        write_features(&dir.join(FEATURES_FILE), &self.features)?;
        write_triplets(&dir.join(TRIPLETS_FILE), &self.triplets)
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_concepts;
    let n_images = k * cfg.images_per_concept;
    let block = cfg.block_bits();

    let mut features = FeatureTable::new(cfg.feature_dim);
    let mut corpus = Vec::with_capacity(n_images * cfg.sentences_per_image);
    let mut image_concepts = Vec::with_capacity(n_images);
    for i in 0..n_images {
        // Interleaved so any contiguous slice of images covers every concept.
        let c = i % k;
        let id = image_id(i);
        let mut f = VisualFeature::zeros(cfg.feature_dim);
        for b in c * block..(c + 1) * block {
            f.set(b);
        }
        for b in 0..cfg.feature_dim {
            if rng.random_bool(cfg.feature_noise) {
                f.set(b);
            }
        }
        features.insert(id.clone(), f)?;
        for _ in 0..cfg.sentences_per_image {
            let mut words: Vec<String> = Vec::new();
            for _ in 0..cfg.concept_words_per_sentence {
                words.push(concept_word(c, rng.random_range(0..cfg.words_per_concept)));
            }
            for _ in 0..cfg.noise_words_per_sentence {
                words.push(noise_word(rng.random_range(0..cfg.noise_words)));
            }
            words.shuffle(&mut rng);
            corpus.push(CorpusRecord {
                image_id: id.clone(),
                sentence: words.join(" "),
            });
        }
        image_concepts.push(c);
    }

    let all_words: Vec<usize> = (0..cfg.words_per_concept).collect();
    let mut triplets = Vec::with_capacity(cfg.num_triplets);
    for t in 0..cfg.num_triplets {
        let c = t % k;
        let pair: Vec<&usize> = all_words.choose_multiple(&mut rng, 2).collect();
        let other = (c + rng.random_range(1..k)) % k;
        triplets.push(Triplet::new(
            concept_word(c, *pair[0]),
            concept_word(c, *pair[1]),
            concept_word(other, rng.random_range(0..cfg.words_per_concept)),
        ));
    }

    Ok(SynthDataset {
        corpus,
        features,
        triplets,
        image_concepts,
    })
}

/// Concept index of a generated concept word, `None` for anything else.
pub fn concept_of(word: &str) -> Option<usize> {
    let rest = word.strip_prefix('c')?;
    let (c, i) = rest.split_once('w')?;
    i.parse::<usize>().ok()?;
    c.parse().ok()
}
