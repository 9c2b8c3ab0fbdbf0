//! Checkpoint files: a text manifest followed by a little-endian `f64` payload.
//!
//! ```text
//! LACOVL-CHECKPOINT 1
//! seed 42
//! config 123
//! <123 bytes of config text>
//! entry param lgae.s1.q.w f64 16,17 0
//! entry adam_m lgae.s1.q.w f64 16,17 2176 step=3
//! ...
//! end
//! <payload>
//! ```
//! Offsets are byte offsets into the payload.

use std::fs;
use std::path::Path;

use super::adam::{AdamState, Moments};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "LACOVL-CHECKPOINT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Frozen,
    Buffer,
    AdamM,
    AdamV,
}

impl EntryKind {
    fn tag(self) -> &'static str {
        match self {
            EntryKind::Param => "param",
            EntryKind::Frozen => "frozen",
            EntryKind::Buffer => "buffer",
            EntryKind::AdamM => "adam_m",
            EntryKind::AdamV => "adam_v",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "param" => EntryKind::Param,
            "frozen" => EntryKind::Frozen,
            "buffer" => EntryKind::Buffer,
            "adam_m" => EntryKind::AdamM,
            "adam_v" => EntryKind::AdamV,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub kind: EntryKind,
    pub name: String,
    pub tensor: Tensor,
    pub step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn capture(seed: u64, config: String, store: &ParamStore, adam: Option<&AdamState>) -> Self {
        let mut entries = Vec::new();
        for p in store.params() {
            entries.push(Entry {
                kind: if p.frozen { EntryKind::Frozen } else { EntryKind::Param },
                name: p.name.clone(),
                tensor: p.value.clone(),
                step: None,
            });
        }
        for b in store.buffers() {
            entries.push(Entry {
                kind: EntryKind::Buffer,
                name: b.name.clone(),
                tensor: b.value.clone(),
                step: None,
            });
        }
        if let Some(state) = adam {
            for (p, mo) in store.params().iter().zip(&state.moments) {
                if p.frozen {
                    continue;
                }
                for (kind, data) in [(EntryKind::AdamM, &mo.m), (EntryKind::AdamV, &mo.v)] {
                    entries.push(Entry {
                        kind,
                        name: p.name.clone(),
                        tensor: Tensor::new(p.value.shape(), data.clone()).expect("moment shape"),
                        step: Some(mo.step),
                    });
                }
            }
        }
        Checkpoint { seed, config, entries }
    }

    /// Copies parameter and buffer values into `store`, which must have the
    /// same layout the checkpoint was captured from.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut seen = 0;
        for e in &self.entries {
            let target = match e.kind {
                EntryKind::Param | EntryKind::Frozen => {
                    let p = store
                        .by_name_mut(&e.name)
                        .map_err(|_| Error::CheckpointMismatch(format!("unexpected parameter {}", e.name)))?;
                    if p.frozen != (e.kind == EntryKind::Frozen) {
                        return Err(Error::CheckpointMismatch(format!("frozen flag differs for {}", e.name)));
                    }
                    &mut p.value
                }
                EntryKind::Buffer => {
                    let id = store
                        .buffer_id(&e.name)
                        .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected buffer {}", e.name)))?;
                    store.buffer_mut(id)
                }
                EntryKind::AdamM | EntryKind::AdamV => continue,
            };
            if target.shape() != e.tensor.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    e.name,
                    e.tensor.shape(),
                    target.shape()
                )));
            }
            *target = e.tensor.clone();
            seen += 1;
        }
        let expected = store.len() + store.buffers().len();
        if seen != expected {
            return Err(Error::CheckpointMismatch(format!("{seen} tensors in checkpoint, model has {expected}")));
        }
        Ok(())
    }

    /// Optimiser state aligned with `store`, if the checkpoint carries one.
    pub fn adam_state(&self, store: &ParamStore) -> Option<AdamState> {
        let mut state = AdamState::new(store);
        let mut any = false;
        for e in &self.entries {
            let slot = match e.kind {
                EntryKind::AdamM | EntryKind::AdamV => store.id(&e.name)?,
                _ => continue,
            };
            let mo: &mut Moments = &mut state.moments[slot.0];
            mo.step = e.step.unwrap_or(0);
            let data = e.tensor.data().to_vec();
            if e.kind == EntryKind::AdamM {
                mo.m = data;
            } else {
                mo.v = data;
            }
            any = true;
        }
        any.then_some(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{MAGIC}\nseed {}\nconfig {}\n", self.seed, self.config.len());
        manifest.push_str(&self.config);
        manifest.push('\n');
        let mut offset = 0usize;
        for e in &self.entries {
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            let shape = if shape.is_empty() { "-".to_string() } else { shape.join(",") };
            manifest.push_str(&format!("entry {} {} f64 {} {}", e.kind.tag(), e.name, shape, offset));
            if let Some(step) = e.step {
                manifest.push_str(&format!(" step={step}"));
            }
            manifest.push('\n');
            offset += e.tensor.numel() * 8;
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::CheckpointFormat(m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.line()? != MAGIC {
            return Err(bad("missing magic line"));
        }
        let seed = cur
            .line()?
            .strip_prefix("seed ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("seed line"))?;
        let config_len: usize = cur
            .line()?
            .strip_prefix("config ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("config line"))?;
        let config = cur.take(config_len)?;
        let config = String::from_utf8(config.to_vec()).map_err(|_| bad("config is not utf-8"))?;
        if cur.take(1)? != b"\n" {
            return Err(bad("config terminator"));
        }
        let mut headers = Vec::new();
        loop {
            let line = cur.line()?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() < 6 || parts[0] != "entry" || parts[3] != "f64" {
                return Err(bad(&format!("entry line {line:?}")));
            }
            let kind = EntryKind::parse(parts[1]).ok_or_else(|| bad("entry kind"))?;
            let shape: Vec<usize> = if parts[4] == "-" {
                Vec::new()
            } else {
                parts[4]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad("shape")))
                    .collect::<Result<_>>()?
            };
            let offset: usize = parts[5].parse().map_err(|_| bad("offset"))?;
            let step = match parts.get(6) {
                Some(s) => Some(
                    s.strip_prefix("step=")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad("step"))?,
                ),
                None => None,
            };
            headers.push((kind, parts[2].to_string(), shape, offset, step));
        }
        let payload = &bytes[cur.pos..];
        let mut entries = Vec::with_capacity(headers.len());
        for (kind, name, shape, offset, step) in headers {
            let n: usize = shape.iter().product();
            let raw = payload
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad(&format!("payload too short for {name}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry {
                kind,
                name,
                tensor: Tensor::new(&shape, data)?,
                step,
            });
        }
        Ok(Checkpoint { seed, config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointFormat("unterminated manifest".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::CheckpointFormat("manifest is not utf-8".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::CheckpointFormat("truncated".into()))?;
        self.pos += n;
        Ok(out)
    }
}
