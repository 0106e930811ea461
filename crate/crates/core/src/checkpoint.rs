//! Model checkpoint container.
//!
//! ```text
//! "PFSN" | u16 version | [u8; 4] section tag ("LIFN" spiking, "X3DL" CNN)
//! u32 config length | config JSON
//! u32 tensor count
//! per tensor: u16 name length | name | u8 rank | u32 dims | f32 data
//!             | u8 has LIF | (f32 beta, f32 v_th, f32 slope)
//! ```
//! Integers and floats are little-endian. The config JSON holds the model
//! configuration and any training artefacts (normalisation statistics,
//! target scaling) under `"extra"`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;
use crate::optim::Parameterized;
use crate::snn::{LifParams, SnnConfig, SpikingNet};
use crate::stcnn::{build_net, ExpansionConfig, FusionConfig, HeadKind, StcnnNet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFSN";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const TAG_SNN: &[u8; 4] = b"LIFN";
pub const TAG_CNN: &[u8; 4] = b"X3DL";

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Snn(SpikingNet),
    Cnn(StcnnNet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CnnHeader {
    expansion: ExpansionConfig,
    fusion: FusionConfig,
    head: HeadKind,
    in_channels: usize,
}

#[derive(Serialize, Deserialize)]
struct Header<C> {
    model: C,
    extra: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| PulmoError::Format(format!("{what} {v} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn lif_of(model: &Model, name: &str) -> Option<LifParams> {
    let Model::Snn(net) = model else { return None };
    let layer = name.split('.').next()?;
    net.layers()
        .into_iter()
        .find(|(n, ..)| *n == layer)
        .map(|(.., lif)| *lif)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let extra = ckpt.extra.clone();
    let (tag, config, params) = match &ckpt.model {
        Model::Snn(net) => (
            TAG_SNN,
            serde_json::to_string(&Header {
                model: net.config(),
                extra,
            }),
            net.params(),
        ),
        Model::Cnn(net) => {
            let model = CnnHeader {
                expansion: *net.expansion(),
                fusion: *net.fusion(),
                head: net.head_kind(),
                in_channels: net.in_channels(),
            };
            (
                TAG_CNN,
                serde_json::to_string(&Header { model, extra }),
                net.params(),
            )
        }
    };
    let config = config.map_err(|e| PulmoError::Format(format!("config serialisation: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(tag);
    put_u32(&mut out, config.len(), "config length")?;
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, params.len(), "tensor count")?;
    for (name, t) in &params {
        let n = u16::try_from(name.len())
            .map_err(|_| PulmoError::Format(format!("tensor name `{name}` too long")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d, "dimension")?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match lif_of(&ckpt.model, name) {
            Some(p) => {
                out.push(1);
                for v in [p.beta, p.v_th, p.surrogate_slope] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(PulmoError::Format(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

struct Entry {
    name: String,
    tensor: Tensor,
    lif: Option<LifParams>,
}

fn fill<M: Parameterized>(model: &mut M, entries: &[Entry]) -> Result<()> {
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != entries.len() {
        return Err(PulmoError::Format(format!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            names.len()
        )));
    }
    for ((slot, name), e) in model.params_mut().into_iter().zip(&names).zip(entries) {
        if *name != e.name {
            return Err(PulmoError::Format(format!(
                "checkpoint tensor `{}` where `{name}` was expected",
                e.name
            )));
        }
        if slot.shape() != e.tensor.shape() {
            return Err(PulmoError::dim(
                name.clone(),
                format!("{:?}", slot.shape()),
                format!("{:?}", e.tensor.shape()),
            ));
        }
        *slot = e.tensor.clone();
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(PulmoError::Format(
            "bad checkpoint magic, expected \"PFSN\"".into(),
        ));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(PulmoError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
    let len = r.u32("config length")?;
    let config = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| PulmoError::Format(format!("config is not UTF-8: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|e| PulmoError::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| PulmoError::Format("tensor too large".into()))?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| PulmoError::Format(format!("tensor `{name}`: {e}")))?;
        let lif = match r.u8("LIF flag")? {
            0 => None,
            1 => Some(LifParams {
                beta: r.f32("beta")?,
                v_th: r.f32("threshold")?,
                surrogate_slope: r.f32("surrogate slope")?,
            }),
            f => return Err(PulmoError::Format(format!("bad LIF flag {f}"))),
        };
        entries.push(Entry { name, tensor, lif });
    }
    if r.at != bytes.len() {
        return Err(PulmoError::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.at
        )));
    }
    let bad_json = |e: serde_json::Error| PulmoError::Format(format!("checkpoint config: {e}"));
    match &tag {
        TAG_SNN => {
            let h: Header<SnnConfig> = serde_json::from_str(config).map_err(bad_json)?;
            let mut net = SpikingNet::new(h.model, 0)?;
            fill(&mut net, &entries)?;
            for e in &entries {
                let Some(p) = e.lif else { continue };
                p.validate()?;
                match e.name.split('.').next() {
                    Some("conv") => net.conv.lif = p,
                    Some("hidden") => net.hidden.lif = p,
                    Some("out") => net.out.lif = p,
                    Some("meta") => {
                        if let Some(m) = &mut net.meta {
                            m.lif = p;
                        }
                    }
                    _ => {
                        return Err(PulmoError::Format(format!(
                            "unexpected LIF on `{}`",
                            e.name
                        )))
                    }
                }
            }
            Ok(Checkpoint {
                model: Model::Snn(net),
                extra: h.extra,
            })
        }
        TAG_CNN => {
            let h: Header<CnnHeader> = serde_json::from_str(config).map_err(bad_json)?;
            let m = h.model;
            let mut net = build_net(m.expansion, m.fusion, m.head, m.in_channels, 0)?;
            fill(&mut net, &entries)?;
            Ok(Checkpoint {
                model: Model::Cnn(net),
                extra: h.extra,
            })
        }
        other => Err(PulmoError::Format(format!(
            "unknown section tag {:?}",
            String::from_utf8_lossy(other)
        ))),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| PulmoError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| PulmoError::io(path, e))?;
    decode_checkpoint(&bytes)
}
