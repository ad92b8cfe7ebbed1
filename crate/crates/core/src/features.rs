//! Per-image binary visual feature vectors.
//!
//! On disk each line is `image_id<TAB>bits`, where `bits` is either hex-packed
//! (four bits per character, most significant bit first) or a plain string of
//! `0`/`1` characters. Output is always hex.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VisualFeature {
    dim: usize,
    words: Vec<u64>,
}

impl VisualFeature {
    pub fn zeros(dim: usize) -> Self {
        VisualFeature {
            dim,
            words: vec![0; dim.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut f = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                f.set(i);
            }
        }
        f
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        assert!(i < self.dim, "bit {i} out of range for dim {}", self.dim);
        self.words[i / 64] |= 1 << (i % 64);
    }

    /// Indices of the set bits, ascending.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let b = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(wi * 64 + b)
            })
        })
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn to_hex(&self) -> String {
        let nibbles = self.dim.div_ceil(4);
        let mut s = String::with_capacity(nibbles);
        for n in 0..nibbles {
            let mut v = 0u32;
            for k in 0..4 {
                let i = n * 4 + k;
                v <<= 1;
                if i < self.dim && self.get(i) {
                    v |= 1;
                }
            }
            s.push(char::from_digit(v, 16).expect("nibble < 16"));
        }
        s
    }

    /// Parses either representation for a vector of `dim` bits.
    pub fn parse(text: &str, dim: usize) -> std::result::Result<Self, String> {
        let text = text.trim();
        if text.len() == dim && text.bytes().all(|b| b == b'0' || b == b'1') {
            let mut f = Self::zeros(dim);
            for (i, b) in text.bytes().enumerate() {
                if b == b'1' {
                    f.set(i);
                }
            }
            return Ok(f);
        }
        if text.len() != dim.div_ceil(4) {
            return Err(format!(
                "expected {} hex digits or {dim} binary digits, got {} characters",
                dim.div_ceil(4),
                text.len()
            ));
        }
        let mut f = Self::zeros(dim);
        for (n, ch) in text.chars().enumerate() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| format!("invalid hex digit {ch:?}"))?;
            for k in 0..4 {
                if v >> (3 - k) & 1 == 1 {
                    let i = n * 4 + k;
                    if i >= dim {
                        return Err("padding bits beyond the declared dimension are set".into());
                    }
                    f.set(i);
                }
            }
        }
        Ok(f)
    }
}

/// Immutable image_id → feature map, insertion-ordered.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    dim: usize,
    ids: Vec<String>,
    features: Vec<VisualFeature>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, f: VisualFeature) -> Result<()> {
        let image_id = image_id.into();
        if f.dim() != self.dim {
            return Err(Error::Data(format!(
                "feature for {image_id} has {} bits, table expects {}",
                f.dim(),
                self.dim
            )));
        }
        if self.index.contains_key(&image_id) {
            return Err(Error::Data(format!("duplicate image id {image_id}")));
        }
        self.index.insert(image_id.clone(), self.ids.len());
        self.ids.push(image_id);
        self.features.push(f);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&VisualFeature> {
        self.index.get(image_id).map(|&i| &self.features[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &VisualFeature)> {
        self.ids.iter().map(String::as_str).zip(&self.features)
    }

    pub fn read(reader: impl BufRead, name: &str, dim: usize) -> Result<Self> {
        let mut table = FeatureTable::new(dim);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(name, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, bits) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(name, i + 1, "expected image_id<TAB>bits"))?;
            let f = VisualFeature::parse(bits, dim).map_err(|m| Error::parse(name, i + 1, m))?;
            if table.index.contains_key(id) {
                return Err(Error::parse(name, i + 1, format!("duplicate image id {id}")));
            }
            table.insert(id, f)?;
        }
        Ok(table)
    }

    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        for (id, f) in self.iter() {
            writeln!(out, "{id}\t{}", f.to_hex())?;
        }
        Ok(())
    }
}

pub fn load_features(path: &Path, dim: usize) -> Result<FeatureTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureTable::read(BufReader::new(file), &path.display().to_string(), dim)
}

pub fn write_features(path: &Path, table: &FeatureTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    table
        .write(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_hex_line() {
        let line = format!("img1\t{}\n", "0".repeat(1024));
        let t = FeatureTable::read(line.as_bytes(), "f", DEFAULT_FEATURE_DIM).unwrap();
        let f = t.get("img1").unwrap();
        assert_eq!(f.dim(), 4096);
        assert_eq!(f.count_ones(), 0);
    }

    #[test]
    fn short_binary_line_rejected() {
        let line = format!("img1\t{}\n", "1".repeat(4095));
        let err = FeatureTable::read(line.as_bytes(), "f", DEFAULT_FEATURE_DIM).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn malformed_and_duplicate_rejected() {
        let bad = "a\t0g\n";
        assert!(matches!(
            FeatureTable::read(bad.as_bytes(), "f", 8),
            Err(Error::Parse { line: 1, .. })
        ));
        let dup = "a\t0f\nb\t00\na\t01\n";
        assert!(matches!(
            FeatureTable::read(dup.as_bytes(), "f", 8),
            Err(Error::Parse { line: 3, .. })
        ));
        let notab = "a 0f\n";
        assert!(FeatureTable::read(notab.as_bytes(), "f", 8).is_err());
    }

    #[test]
    fn binary_variant_accepted() {
        let t = FeatureTable::read("x\t10000001\n".as_bytes(), "f", 8).unwrap();
        let f = t.get("x").unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![0, 7]);
        assert_eq!(f.to_hex(), "81");
    }

    #[test]
    fn hex_bit_order_is_msb_first() {
        let f = VisualFeature::parse("8001", 16).unwrap();
        assert_eq!(f.ones().collect::<Vec<_>>(), vec![0, 15]);
        // dim 6: two hex digits, the last two bits are padding.
        assert!(VisualFeature::parse("fc", 6).is_ok());
        assert!(VisualFeature::parse("fd", 6).is_err());
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(
            rows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 37), 1..8)
        ) {
            let mut t = FeatureTable::new(37);
            for (i, bits) in rows.iter().enumerate() {
                t.insert(format!("img{i}"), VisualFeature::from_bits(bits)).unwrap();
            }
            let mut buf = Vec::new();
            t.write(&mut buf).unwrap();
            let back = FeatureTable::read(buf.as_slice(), "mem", 37).unwrap();
            prop_assert_eq!(&back, &t);
            for (i, bits) in rows.iter().enumerate() {
                let f = back.get(&format!("img{i}")).unwrap();
                let got: Vec<bool> = (0..37).map(|j| f.get(j)).collect();
                prop_assert_eq!(&got, bits);
            }
        }
    }
}
