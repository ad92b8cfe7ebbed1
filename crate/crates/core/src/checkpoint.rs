//! Binary checkpoint files.
//!
//! Layout (little endian):
//! magic `MMEMBCK1`, format version (u32), config JSON (u32 length + bytes),
//! vocabulary fingerprint (u64), vocabulary (u32 count, then per word a u32
//! length, the UTF-8 bytes and a u64 count), tensors (u32 count, then per
//! tensor a u16 name length, the name, a u64 length and the f64 values).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::Embeddings;
use crate::error::{Error, Result};
use crate::model::{Dims, ModelParams};
use crate::text::Vocabulary;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MMEMBCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    dims: Dims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| bad("file is truncated"))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| bad("file is truncated"))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.bytes(len)?).map_err(|_| bad("invalid UTF-8 in string"))
    }
}

impl Checkpoint {
    pub fn new(config: TrainConfig, vocab: Vocabulary, params: ModelParams) -> Result<Self> {
        if params.dims().vocab != vocab.len() {
            return Err(Error::Shape(format!(
                "model has {} vocabulary rows, vocabulary has {} words",
                params.dims().vocab,
                vocab.len()
            )));
        }
        if params.variant() != config.variant {
            return Err(Error::Config(format!(
                "model variant {} differs from configured {}",
                params.variant(),
                config.variant
            )));
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
        })
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            dims: self.params.dims(),
        })
        .map_err(std::io::Error::other)?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&self.vocab.fingerprint().to_le_bytes())?;
        out.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        for (w, &c) in self.vocab.words().iter().zip(self.vocab.counts()) {
            out.write_all(&(w.len() as u32).to_le_bytes())?;
            out.write_all(w.as_bytes())?;
            out.write_all(&c.to_le_bytes())?;
        }
        let tensors = self.params.tensors();
        out.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, values) in tensors {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut r = Reader { inner: input };
        if &r.array::<8>()? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(&r.bytes(len)?)
            .map_err(|e| bad(format!("config block: {e}")))?;
        let fingerprint = r.u64()?;
        let n_words = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            let len = r.u32()? as usize;
            let w = r.string(len)?;
            entries.push((w, r.u64()?));
        }
        let vocab = Vocabulary::from_entries(entries)?;
        if vocab.fingerprint() != fingerprint {
            return Err(bad("vocabulary does not match its fingerprint"));
        }
        if header.dims.vocab != vocab.len() {
            return Err(bad("vocabulary size disagrees with model dimensions"));
        }
        let mut params = ModelParams::zeros(header.config.variant, header.dims);
        let n_tensors = r.u32()? as usize;
        let mut slots = params.tensors_mut();
        if n_tensors != slots.len() {
            return Err(bad(format!(
                "{n_tensors} tensors stored, variant {} has {}",
                header.config.variant,
                slots.len()
            )));
        }
        for (want, slot) in slots.iter_mut() {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            if name != *want {
                return Err(bad(format!("expected tensor {want}, found {name}")));
            }
            let n = r.u64()? as usize;
            if n != slot.len() {
                return Err(bad(format!("tensor {name} has {n} values, expected {}", slot.len())));
            }
            for x in slot.iter_mut() {
                *x = f64::from_le_bytes(r.array()?);
            }
        }
        drop(slots);
        if r.inner.read(&mut [0u8]).map_err(|e| bad(format!("read failed: {e}")))? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }
        Checkpoint::new(header.config, vocab, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The input embedding table, keyed by vocabulary word.
    pub fn embeddings(&self) -> Result<Embeddings> {
        Embeddings::from_vocab(&self.vocab, self.params.embedding.clone())
    }
}
