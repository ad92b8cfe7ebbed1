//! Triplet evaluation: a triplet counts as correct when the base phrase is
//! strictly closer (cosine distance) to the positive than to the negative.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::compute::{dot, norm};
use crate::embeddings::Embeddings;
use crate::error::{Error, Result};
use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub base: String,
    pub positive: String,
    pub negative: String,
}

impl Triplet {
    pub fn new(base: impl Into<String>, positive: impl Into<String>, negative: impl Into<String>) -> Self {
        Triplet {
            base: base.into(),
            positive: positive.into(),
            negative: negative.into(),
        }
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.base, self.positive, self.negative)
    }
}

pub fn parse_triplets(reader: impl BufRead, name: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                name,
                i + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::parse(name, i + 1, "empty phrase in triplet"));
        }
        out.push(Triplet::new(fields[0], fields[1], fields[2]));
    }
    Ok(out)
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(BufReader::new(file), &path.display().to_string())
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in triplets {
        writeln!(out, "{t}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Mean of the vectors of the phrase's in-vocabulary words; `None` when no
/// word is known.
pub fn phrase_embedding(phrase: &str, emb: &Embeddings) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; emb.dim()];
    let mut n = 0usize;
    for w in normalize(phrase) {
        if let Some(v) = emb.get(&w) {
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Some(acc)
}

/// `1 − cos(a, b)`, clamped to `[0, 2]`. A zero vector is at distance 1 from
/// everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with {} and {} dims",
            a.len(),
            b.len()
        )));
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - dot(a, b) / denom).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub scored: usize,
    pub skipped: usize,
    pub correct: usize,
    pub precision: f64,
    pub skip_reasons: BTreeMap<String, usize>,
}

impl EvalReport {
    /// `key=value` lines for scripts.
    pub fn key_values(&self) -> String {
        let mut s = format!(
            "total={}\nscored={}\nskipped={}\ncorrect={}\nprecision={:.6}\n",
            self.total, self.scored, self.skipped, self.correct, self.precision
        );
        for (k, v) in &self.skip_reasons {
            s.push_str(&format!("skip.{k}={v}\n"));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "precision {:.3} ({} of {} scored triplets correct)",
            self.precision, self.correct, self.scored
        )?;
        writeln!(f, "{} triplets read, {} skipped", self.total, self.skipped)?;
        for (k, v) in &self.skip_reasons {
            writeln!(f, "  skipped ({k}): {v}")?;
        }
        Ok(())
    }
}

enum Outcome {
    Correct,
    Wrong,
    Skipped(&'static str),
}

fn judge(t: &Triplet, emb: &Embeddings) -> Result<Outcome> {
    let Some(base) = phrase_embedding(&t.base, emb) else {
        return Ok(Outcome::Skipped("base_oov"));
    };
    let Some(pos) = phrase_embedding(&t.positive, emb) else {
        return Ok(Outcome::Skipped("positive_oov"));
    };
    let Some(neg) = phrase_embedding(&t.negative, emb) else {
        return Ok(Outcome::Skipped("negative_oov"));
    };
    // Ties are wrong.
    Ok(if cosine_distance(&base, &pos)? < cosine_distance(&base, &neg)? {
        Outcome::Correct
    } else {
        Outcome::Wrong
    })
}

/// Scores every triplet. Work is spread over the current rayon pool; the
/// report does not depend on the number of threads.
pub fn evaluate(triplets: &[Triplet], emb: &Embeddings) -> Result<EvalReport> {
    let outcomes: Vec<Outcome> = triplets
        .par_iter()
        .map(|t| judge(t, emb))
        .collect::<Result<_>>()?;
    let mut r = EvalReport {
        total: triplets.len(),
        ..Default::default()
    };
    for o in outcomes {
        match o {
            Outcome::Correct => {
                r.scored += 1;
                r.correct += 1;
            }
            Outcome::Wrong => r.scored += 1,
            Outcome::Skipped(why) => {
                r.skipped += 1;
                *r.skip_reasons.entry(why.to_owned()).or_default() += 1;
            }
        }
    }
    if r.scored > 0 {
        r.precision = r.correct as f64 / r.scored as f64;
    }
    Ok(r)
}
