//! Binary artifacts: trained-parameter checkpoints, memory banks and
//! anomaly maps. All integers and floats are little-endian; floats are
//! stored as 32-bit.

use std::path::Path;

use mvfa_autograd::{DType, Tensor};

use crate::adaptation::{FeedMode, MvfaParams, LEVELS};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::inference::MemoryBank;

pub const CHECKPOINT_MAGIC: &[u8] = b"MVFA-CKPT\0";
pub const BANK_MAGIC: &[u8] = b"MVFA-BANK\0";
pub const MAP_MAGIC: &[u8] = b"MVFA-MAP\0";
pub const VERSION: u32 = 1;

const GAMMA_TENSOR: &str = "meta.gamma";
const FEED_TENSOR: &str = "meta.feed";

struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        Reader { what, bytes, pos: 0 }
    }

    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what.into(),
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, format!("truncated while reading {field}"))),
        }
    }

    fn magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len(), "magic")?;
        if got != magic {
            return Err(self.err(0, "bad magic"));
        }
        Ok(())
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.err(self.pos, format!("{field} size overflows")))?;
        let raw = self.take(len, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(self.pos, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Trained parameters together with the backbone that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    /// Named tensors in file order.
    pub tensors: Vec<Tensor>,
}

fn feed_code(feed: FeedMode) -> f64 {
    match feed {
        FeedMode::Mean => 0.0,
        FeedMode::Cls => 1.0,
        FeedMode::Seg => 2.0,
    }
}

impl Checkpoint {
    pub fn from_params(backbone: &BackboneConfig, params: &MvfaParams) -> Result<Self> {
        let mut tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        tensors.push(Tensor::parameter(GAMMA_TENSOR, &[1], vec![params.gamma], DType::F32)?);
        tensors.push(Tensor::parameter(FEED_TENSOR, &[1], vec![feed_code(params.feed)], DType::F32)?);
        Ok(Checkpoint {
            backbone: backbone.clone(),
            tensors,
        })
    }

    pub fn params(&self) -> Result<MvfaParams> {
        let mut gamma = None;
        let mut feed = None;
        let mut rest = Vec::new();
        for t in &self.tensors {
            match t.name() {
                Some(GAMMA_TENSOR) => gamma = Some(t.data()[0]),
                Some(FEED_TENSOR) => {
                    feed = Some(match t.data()[0] as u32 {
                        0 => FeedMode::Mean,
                        1 => FeedMode::Cls,
                        2 => FeedMode::Seg,
                        other => return Err(Error::Contract(format!("unknown feed mode code {other}"))),
                    })
                }
                _ => rest.push(t.clone()),
            }
        }
        let gamma = gamma.ok_or_else(|| Error::Contract(format!("checkpoint lacks `{GAMMA_TENSOR}`")))?;
        let feed = feed.ok_or_else(|| Error::Contract(format!("checkpoint lacks `{FEED_TENSOR}`")))?;
        let params = MvfaParams::from_named(rest, gamma, feed)?;
        if params.dim() != self.backbone.dim {
            return Err(Error::Contract(format!(
                "parameters have width {}, backbone has {}",
                params.dim(),
                self.backbone.dim
            )));
        }
        Ok(params)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let b = &ckpt.backbone;
    for v in [b.image_size, b.patch_size, b.channels, b.dim, b.stages, b.blocks_per_stage, b.heads] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&b.seed.to_le_bytes());
    put_u32(&mut out, ckpt.tensors.len());
    for t in &ckpt.tensors {
        let name = t
            .name()
            .ok_or_else(|| Error::Contract("checkpoint tensors must be named".into()))?;
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract("tensor rank exceeds 255".into()))?;
        out.push(rank);
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new("checkpoint", bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(at, format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 7];
    for f in fields.iter_mut() {
        *f = r.u32("backbone config")? as usize;
    }
    let backbone = BackboneConfig {
        image_size: fields[0],
        patch_size: fields[1],
        channels: fields[2],
        dim: fields[3],
        stages: fields[4],
        blocks_per_stage: fields[5],
        heads: fields[6],
        seed: r.u64("backbone seed")?,
    };
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err(r.pos, "tensor size overflows"))?;
        let values = r.f32s(n, "tensor values")?;
        tensors.push(Tensor::parameter(name, &dims, values, DType::F32)?);
    }
    r.finish()?;
    Ok(Checkpoint { backbone, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fsutil::atomic_write(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fsutil::read(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { what, offset, reason } => Error::Format {
            what: format!("{what} {}", path.display()),
            offset,
            reason,
        },
        other => other,
    }
}

/// Each level is written as a cls block (role 0) followed by a seg block
/// (role 1).
pub fn encode_bank(bank: &MemoryBank) -> Vec<u8> {
    let mut out = BANK_MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(LEVELS as u8);
    for l in 0..LEVELS {
        for (role, t) in [(0u8, &bank.cls[l]), (1u8, &bank.seg[l])] {
            out.push(role);
            put_u32(&mut out, t.shape()[0]);
            put_u32(&mut out, t.shape()[1]);
            put_f32s(&mut out, t.data());
        }
    }
    out
}

pub fn decode_bank(bytes: &[u8]) -> Result<MemoryBank> {
    let mut r = Reader::new("memory bank", bytes);
    r.magic(BANK_MAGIC)?;
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(at, format!("unsupported version {version}")));
    }
    let at = r.pos;
    let levels = r.u8("levels")? as usize;
    if levels != LEVELS {
        return Err(r.err(at, format!("expected {LEVELS} levels, found {levels}")));
    }
    let mut cls = Vec::with_capacity(LEVELS);
    let mut seg = Vec::with_capacity(LEVELS);
    for _ in 0..LEVELS {
        for expected in [0u8, 1u8] {
            let at = r.pos;
            let role = r.u8("role")?;
            if role != expected {
                return Err(r.err(at, format!("expected role {expected}, found {role}")));
            }
            let rows = r.u32("row count")? as usize;
            let d = r.u32("width")? as usize;
            let n = rows.checked_mul(d).ok_or_else(|| r.err(at, "store size overflows"))?;
            let values = r.f32s(n, "rows")?;
            let t = Tensor::new_in(&[rows, d], values, DType::F32)?;
            if expected == 0 {
                cls.push(t);
            } else {
                seg.push(t);
            }
        }
    }
    r.finish()?;
    MemoryBank::new(cls, seg)
}

pub fn save_bank(path: &Path, bank: &MemoryBank) -> Result<()> {
    fsutil::atomic_write(path, &encode_bank(bank))
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    decode_bank(&fsutil::read(path)?).map_err(|e| with_path(e, path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

pub fn encode_map(map: &AnomalyMap) -> Vec<u8> {
    let mut out = MAP_MAGIC.to_vec();
    put_u32(&mut out, map.height);
    put_u32(&mut out, map.width);
    put_f32s(&mut out, &map.scores);
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<AnomalyMap> {
    let mut r = Reader::new("anomaly map", bytes);
    r.magic(MAP_MAGIC)?;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let n = height
        .checked_mul(width)
        .ok_or_else(|| r.err(r.pos, "map size overflows"))?;
    let scores = r.f32s(n, "scores")?;
    r.finish()?;
    Ok(AnomalyMap { height, width, scores })
}

pub fn save_map(path: &Path, map: &AnomalyMap) -> Result<()> {
    fsutil::atomic_write(path, &encode_map(map))
}

pub fn load_map(path: &Path) -> Result<AnomalyMap> {
    decode_map(&fsutil::read(path)?).map_err(|e| with_path(e, path))
}
