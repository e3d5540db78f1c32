//! Binary checkpoints of a 32-bit model, its optimizer and run state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DRNCKPT1"  u32 entry count
//! per entry:   u32 name length, name bytes, u32 rank, rank × u32 extents,
//!              product(extents) × 4-byte words
//! u64 FNV-1a checksum of every preceding byte
//! ```
//!
//! Parameters and batch-norm statistics keep their store names, momentum
//! buffers are stored as `optim/momentum/<name>`, and run state lives under
//! `meta/epoch`, `meta/rng` (14 words) and `meta/config` (one byte per word).

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::data::io_context;
use crate::error::{Error, Result};
use crate::nn::Drn;
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

use super::Sgd;

const MAGIC: &[u8; 8] = b"DRNCKPT1";
const MAGIC_STEM: &[u8; 7] = b"DRNCKPT";
const MOMENTUM: &str = "optim/momentum/";
const EPOCH: &str = "meta/epoch";
const RNG: &str = "meta/rng";
const CONFIG: &str = "meta/config";

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    words: Vec<u32>,
}

/// Ordered named entries, decoded or ready to encode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

fn tensor_entry(name: String, t: &Tensor<f32>) -> Entry {
    Entry {
        name,
        shape: t.shape().to_vec(),
        words: t.data().iter().map(|v| v.to_bits()).collect(),
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at offset {} (needed {n} bytes)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    /// Snapshot of the model, optimizer and run state after `epoch` epochs.
    pub fn capture(model: &Drn<f32>, sgd: &Sgd<f32>, epoch: usize, rng: &Rng, config_text: &str) -> Self {
        let store = model.params();
        let mut entries: Vec<Entry> = store
            .params()
            .iter()
            .map(|p| tensor_entry(p.name.clone(), &p.value))
            .collect();
        entries.extend(store.buffers().iter().map(|b| tensor_entry(b.name.clone(), &b.value)));
        entries.extend(
            store
                .params()
                .iter()
                .zip(sgd.velocity())
                .map(|(p, v)| tensor_entry(format!("{MOMENTUM}{}", p.name), v)),
        );
        let epoch = epoch as u64;
        entries.push(Entry {
            name: EPOCH.into(),
            shape: vec![2],
            words: vec![epoch as u32, (epoch >> 32) as u32],
        });
        let words = rng.state().to_words();
        entries.push(Entry {
            name: RNG.into(),
            shape: vec![words.len()],
            words,
        });
        let words: Vec<u32> = config_text.bytes().map(u32::from).collect();
        entries.push(Entry {
            name: CONFIG.into(),
            shape: vec![words.len()],
            words,
        });
        Checkpoint { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend((e.name.len() as u32).to_le_bytes());
            out.extend(e.name.as_bytes());
            out.extend((e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend((d as u32).to_le_bytes());
            }
            for w in &e.words {
                out.extend(w.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend(sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC_STEM.len()] != MAGIC_STEM {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CheckpointVersion(
                String::from_utf8_lossy(&bytes[..MAGIC.len()]).into_owned(),
            ));
        }
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("entry name at offset {} is not UTF-8", r.pos - len)))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let words = r
                .take(
                    n.checked_mul(4)
                        .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is too large")))?,
                )?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry { name, shape, words });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes before the checksum",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| io_context(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| io_context(e, path))?)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let e = self.entry(name)?;
        if e.shape != shape {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` has shape {:?}, expected {shape:?}",
                e.shape
            )));
        }
        Tensor::new(shape.to_vec(), e.words.iter().map(|&w| f32::from_bits(w)).collect())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> Result<usize> {
        let w = &self.entry(EPOCH)?.words;
        match w[..] {
            [lo, hi] => Ok((lo as u64 | (hi as u64) << 32) as usize),
            _ => Err(Error::Checkpoint("malformed epoch entry".into())),
        }
    }

    pub fn rng(&self) -> Result<Rng> {
        RngState::from_words(&self.entry(RNG)?.words)
            .map(Rng::from_state)
            .ok_or_else(|| Error::Checkpoint("malformed rng entry".into()))
    }

    /// Run configuration text stored alongside the weights.
    pub fn config_text(&self) -> Result<String> {
        let bytes = self
            .entry(CONFIG)?
            .words
            .iter()
            .map(|&w| u8::try_from(w))
            .collect::<std::result::Result<Vec<u8>, _>>()
            .map_err(|_| Error::Checkpoint("malformed config entry".into()))?;
        String::from_utf8(bytes).map_err(|_| Error::Checkpoint("config entry is not UTF-8".into()))
    }

    /// Overwrites parameters, batch-norm statistics and, if given, momentum
    /// buffers. Every name the model expects must be present.
    pub fn restore(&self, model: &mut Drn<f32>, sgd: Option<&mut Sgd<f32>>) -> Result<()> {
        let store = model.params_mut();
        for p in store.params_mut() {
            p.value = self.tensor(&p.name, p.value.shape())?;
        }
        for b in store.buffers_mut() {
            b.value = self.tensor(&b.name, b.value.shape())?;
        }
        if let Some(sgd) = sgd {
            let names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
            for (name, v) in names.iter().zip(sgd.velocity_mut()) {
                *v = self.tensor(&format!("{MOMENTUM}{name}"), v.shape())?;
            }
        }
        store.zero_grad();
        Ok(())
    }
}
