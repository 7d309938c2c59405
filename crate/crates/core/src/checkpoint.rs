//! Binary checkpoints.
//!
//! Layout: the magic `NESD`, a `u32` format version, then a sequence of named
//! tensors, each `u32` name length, UTF-8 name, `u32` rank, `u32` dims and
//! `f64` values, all little-endian. The final tensor, `checkpoint/tensor_count`,
//! holds the number of tensors before it so a file cut at a tensor boundary is
//! still recognized as truncated.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ConditioningMode, Denoiser, NoiseEstimator};
use crate::nn::{Activation, DenseLayer, NetworkParams};
use crate::schedule::NoiseSchedule;
use crate::tensor::RealBuffer;

pub const MAGIC: &[u8; 4] = b"NESD";
pub const FORMAT_VERSION: u32 = 1;
const COUNT_TENSOR: &str = "checkpoint/tensor_count";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub denoiser: Option<Denoiser>,
    pub estimator: Option<NoiseEstimator>,
    pub schedule: Option<NoiseSchedule>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

/// Serialize named tensors in order.
pub fn encode_tensors(tensors: &[(String, RealBuffer)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let count = RealBuffer::vector(vec![tensors.len() as f64])?;
    for (name, t) in tensors.iter().map(|(n, t)| (n.as_str(), t)).chain([(COUNT_TENSOR, &count)]) {
        put_u32(&mut out, u32_of(name.len(), "tensor name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, u32_of(t.shape().len(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut out, u32_of(d, "dimension")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse a checkpoint image into its named tensors.
pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, RealBuffer)>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| "file too short for magic bytes".to_string())? != MAGIC {
        return Err("bad magic bytes (not a checkpoint)".into());
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!(
            "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
        ));
    }
    let mut tensors = Vec::new();
    while c.pos < bytes.len() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes_needed = len.and_then(|l| l.checked_mul(8)).ok_or("tensor size overflows")?;
        let raw = c.take(bytes_needed)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = RealBuffer::new(shape, data).map_err(|e| format!("tensor '{name}': {e}"))?;
        tensors.push((name, t));
    }
    match tensors.pop() {
        Some((name, count)) if name == COUNT_TENSOR && count.data() == [tensors.len() as f64] => Ok(tensors),
        _ => Err("truncated: tensor count trailer missing or inconsistent".into()),
    }
}

fn network_tensors(prefix: &str, params: &NetworkParams, out: &mut Vec<(String, RealBuffer)>) -> Result<()> {
    let tags = params.layers().iter().map(|l| l.activation.tag() as f64).collect();
    out.push((format!("{prefix}/activations"), RealBuffer::vector(tags)?));
    for (k, layer) in params.layers().iter().enumerate() {
        out.push((format!("{prefix}/layer{k}/weight"), layer.weight.clone()));
        out.push((format!("{prefix}/layer{k}/bias"), layer.bias.clone()));
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Result<Vec<(String, RealBuffer)>> {
        let mut out = Vec::new();
        if let Some(d) = &self.denoiser {
            network_tensors("denoiser", d.net.params(), &mut out)?;
            out.push((
                "denoiser/conditioning_mode".into(),
                RealBuffer::vector(vec![d.mode().tag() as f64])?,
            ));
            out.push((
                "denoiser/training_betas".into(),
                RealBuffer::vector(d.training_schedule().betas().to_vec())?,
            ));
        }
        if let Some(e) = &self.estimator {
            network_tensors("estimator", e.net.params(), &mut out)?;
        }
        if let Some(s) = &self.schedule {
            out.push(("schedule/betas".into(), RealBuffer::vector(s.betas().to_vec())?));
        }
        Ok(out)
    }

    pub fn from_tensors(tensors: Vec<(String, RealBuffer)>) -> std::result::Result<Self, String> {
        let mut map: BTreeMap<String, RealBuffer> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(format!("duplicate tensor '{name}'"));
            }
        }
        let denoiser = match read_network("denoiser", &mut map)? {
            None => None,
            Some(params) => {
                let tag = take(&mut map, "denoiser/conditioning_mode")?;
                let mode = tag
                    .data()
                    .first()
                    .and_then(|&t| ConditioningMode::from_tag(t as u32))
                    .ok_or("invalid conditioning mode tag")?;
                let betas = take(&mut map, "denoiser/training_betas")?.into_data();
                let schedule = NoiseSchedule::new(betas).map_err(|e| format!("denoiser training schedule: {e}"))?;
                Some(Denoiser::from_params(params, mode, schedule).map_err(|e| e.to_string())?)
            }
        };
        let estimator = read_network("estimator", &mut map)?
            .map(NoiseEstimator::from_params)
            .transpose()
            .map_err(|e| e.to_string())?;
        let schedule = map
            .remove("schedule/betas")
            .map(|t| NoiseSchedule::new(t.into_data()))
            .transpose()
            .map_err(|e| format!("schedule: {e}"))?;
        if let Some(extra) = map.keys().next() {
            return Err(format!("unexpected tensor '{extra}'"));
        }
        Ok(Self {
            denoiser,
            estimator,
            schedule,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_tensors(&self.to_tensors()?)
    }

    /// Write atomically: the file appears complete or not at all.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!(
            "{}.tmp",
            path.extension().and_then(|e| e.to_str()).unwrap_or("")
        ));
        let write = || -> std::io::Result<()> {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let reject = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        Self::from_tensors(decode_tensors(&bytes).map_err(reject)?).map_err(reject)
    }
}

fn take(map: &mut BTreeMap<String, RealBuffer>, name: &str) -> std::result::Result<RealBuffer, String> {
    map.remove(name).ok_or_else(|| format!("missing tensor '{name}'"))
}

fn read_network(prefix: &str, map: &mut BTreeMap<String, RealBuffer>) -> std::result::Result<Option<NetworkParams>, String> {
    let Some(tags) = map.remove(&format!("{prefix}/activations")) else {
        return Ok(None);
    };
    let mut layers = Vec::new();
    for (k, &tag) in tags.data().iter().enumerate() {
        let activation = Activation::from_tag(tag as u32)
            .filter(|a| a.tag() as f64 == tag)
            .ok_or_else(|| format!("{prefix}: invalid activation tag {tag}"))?;
        layers.push(DenseLayer {
            weight: take(map, &format!("{prefix}/layer{k}/weight"))?,
            bias: take(map, &format!("{prefix}/layer{k}/bias"))?,
            activation,
        });
    }
    NetworkParams::new(layers).map(Some).map_err(|e| format!("{prefix}: {e}"))
}
