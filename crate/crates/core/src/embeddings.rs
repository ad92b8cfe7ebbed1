//! Word → vector tables, and the plain-text export format:
//! a `V d` header, then `word v1 … vd` per line in vocabulary order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::compute::{dot, Matrix};
use crate::error::{Error, Result};
use crate::text::{Vocabulary, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN};

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    words: Vec<String>,
    index: HashMap<String, usize>,
    table: Matrix,
}

impl Embeddings {
    pub fn new(words: Vec<String>, table: Matrix) -> Result<Self> {
        if words.len() != table.rows() {
            return Err(Error::Shape(format!(
                "{} words but {} embedding rows",
                words.len(),
                table.rows()
            )));
        }
        let index: HashMap<String, usize> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        if index.len() != words.len() {
            return Err(Error::Data("duplicate word in embedding table".into()));
        }
        Ok(Embeddings {
            words,
            index,
            table,
        })
    }

    pub fn from_vocab(vocab: &Vocabulary, table: Matrix) -> Result<Self> {
        Self::new(vocab.words().to_vec(), table)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.table.row(i))
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut e = self.clone();
        e.table.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        e
    }

    /// The `k` words closest to `word` by cosine similarity, excluding the
    /// word itself and the boundary/unknown tokens.
    pub fn nearest(&self, word: &str, k: usize) -> Option<Vec<(String, f64)>> {
        let q = self.get(word)?;
        let qn = dot(q, q).sqrt();
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| {
                let w = self.words[i].as_str();
                w != word && w != BOS_TOKEN && w != EOS_TOKEN && w != UNK_TOKEN
            })
            .map(|i| {
                let r = self.table.row(i);
                let denom = qn * dot(r, r).sqrt();
                let sim = if denom > 0.0 { dot(q, r) / denom } else { 0.0 };
                (i, sim)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Some(
            scored
                .into_iter()
                .take(k)
                .map(|(i, s)| (self.words[i].clone(), s))
                .collect(),
        )
    }

    pub fn write_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for (i, w) in self.words.iter().enumerate() {
            out.write_all(w.as_bytes())?;
            for &x in self.table.row(i) {
                write!(out, " {}", format_sig6(x))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_text(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_text(reader: impl BufRead, name: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(name, 1, "missing header"))?
            .map_err(|e| Error::io(name, e))?;
        let mut hdr = header.split_whitespace().map(str::parse::<usize>);
        let (rows, dim) = match (hdr.next(), hdr.next(), hdr.next()) {
            (Some(Ok(r)), Some(Ok(d)), None) => (r, d),
            _ => return Err(Error::parse(name, 1, "header must be `V d`")),
        };
        let mut words = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * dim);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(name, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let word = parts.next().unwrap_or_default();
            let before = data.len();
            for p in parts {
                let v: f64 = p
                    .parse()
                    .map_err(|_| Error::parse(name, lineno, format!("bad number {p:?}")))?;
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(Error::parse(
                    name,
                    lineno,
                    format!("expected {dim} values, found {}", data.len() - before),
                ));
            }
            words.push(word.to_owned());
        }
        if words.len() != rows {
            return Err(Error::parse(
                name,
                1,
                format!("header declares {rows} rows, file has {}", words.len()),
            ));
        }
        Self::new(words, Matrix::from_vec(rows, dim, data)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_text(BufReader::new(file), &path.display().to_string())
    }
}

/// Six significant digits, `%g` style.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_owned()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
