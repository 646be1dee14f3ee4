//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MONDEQ01"
//! u64                 metadata length in bytes
//! [u8]                metadata, UTF-8 `key=value` lines
//! u64                 tensor count
//! per tensor:
//!   u32               name length
//!   [u8]              name (UTF-8)
//!   u32               number of dimensions
//!   u64 × ndims       dimensions
//!   f64 × Π dims      row-major data
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MonDeqError, Result};
use crate::model::{InputShape, ModelSpec, MonDEQModel, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MONDEQ01";

/// Guards against absurd allocations from corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn format_err(msg: impl Into<String>) -> MonDeqError {
    MonDeqError::Format(msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format!("truncated {what}")),
        _ => MonDeqError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(format_err(format!("metadata entry {k:?} is not representable")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        w.write_all(MAGIC)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "header")?;
        if &magic != MAGIC {
            return Err(format_err("bad magic"));
        }
        let meta_len = read_u64(r, "metadata length")?;
        if meta_len > MAX_ELEMENTS {
            return Err(format_err("metadata length out of range"));
        }
        let mut meta = vec![0u8; meta_len as usize];
        read_exact(r, &mut meta, "metadata")?;
        let meta = String::from_utf8(meta).map_err(|_| format_err("metadata is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(format!("metadata line without '=': {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = read_u64(r, "tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r, "tensor name length")?;
            let mut name = vec![0u8; name_len as usize];
            read_exact(r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
            let ndims = read_u32(r, "dimension count")?;
            if ndims > 8 {
                return Err(format_err(format!("tensor {name} has {ndims} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndims as usize);
            let mut len: u64 = 1;
            for _ in 0..ndims {
                let d = read_u64(r, "dimension")?;
                len = len.saturating_mul(d);
                shape.push(d as usize);
            }
            if len > MAX_ELEMENTS {
                return Err(format_err(format!("tensor {name} is implausibly large")));
            }
            let mut bytes = vec![0u8; len as usize * 8];
            read_exact(r, &mut bytes, "tensor data")?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn spec_metadata(spec: &ModelSpec) -> Vec<(String, String)> {
    let (variant, dims) = match &spec.variant {
        Variant::Dense { hidden } => ("dense", hidden.to_string()),
        Variant::Conv { channels } => ("conv", channels.to_string()),
        Variant::MultiTier { channels } => (
            "multitier",
            channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        ),
    };
    vec![
        ("variant".into(), variant.into()),
        ("width".into(), dims),
        ("input_channels".into(), spec.input.channels.to_string()),
        ("input_side".into(), spec.input.side.to_string()),
        ("classes".into(), spec.classes.to_string()),
        ("m".into(), spec.m.to_string()),
        ("weight_norm".into(), spec.weight_norm.to_string()),
        ("kernel".into(), spec.kernel.to_string()),
        ("pool".into(), spec.pool.to_string()),
        ("pad".into(), spec.pad.to_string()),
        ("zero_border".into(), spec.zero_border.to_string()),
    ]
}

fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| format_err(format!("metadata key {key:?} missing")))?;
    raw.parse()
        .map_err(|_| format_err(format!("metadata key {key:?} has invalid value {raw:?}")))
}

/// Reconstructs the model shape from checkpoint metadata.
pub fn spec_from_metadata(meta: &BTreeMap<String, String>) -> Result<ModelSpec> {
    let width: String = field(meta, "width")?;
    let parse_usize = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format_err(format!("bad width entry {s:?}")))
    };
    let variant = match field::<String>(meta, "variant")?.as_str() {
        "dense" => Variant::Dense {
            hidden: parse_usize(&width)?,
        },
        "conv" => Variant::Conv {
            channels: parse_usize(&width)?,
        },
        "multitier" => Variant::MultiTier {
            channels: width.split(',').map(parse_usize).collect::<Result<_>>()?,
        },
        other => return Err(format_err(format!("unknown variant {other:?}"))),
    };
    Ok(ModelSpec {
        variant,
        input: InputShape {
            channels: field(meta, "input_channels")?,
            side: field(meta, "input_side")?,
        },
        classes: field(meta, "classes")?,
        m: field(meta, "m")?,
        weight_norm: field(meta, "weight_norm")?,
        kernel: field(meta, "kernel")?,
        pool: field(meta, "pool")?,
        pad: field(meta, "pad")?,
        zero_border: field(meta, "zero_border")?,
    })
}

/// Archives a model's parameters and shape, plus caller metadata (for
/// example the solver's `alpha`).
pub fn model_to_checkpoint(model: &MonDEQModel, extra: &[(&str, String)]) -> Checkpoint {
    let mut metadata: BTreeMap<String, String> = spec_metadata(model.spec()).into_iter().collect();
    metadata.insert("prox".into(), format!("{:?}", model.prox_kind()));
    for (k, v) in extra {
        metadata.insert(k.to_string(), v.clone());
    }
    Checkpoint {
        metadata,
        tensors: model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    }
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<MonDEQModel> {
    let spec = spec_from_metadata(&ckpt.metadata)?;
    let mut model = MonDEQModel::new(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = model.named_params().len();
    if ckpt.tensors.len() != expected {
        return Err(format_err(format!(
            "checkpoint has {} tensors, model expects {expected}",
            ckpt.tensors.len()
        )));
    }
    for (name, t) in &ckpt.tensors {
        let slot = model
            .param_mut(name)
            .ok_or_else(|| format_err(format!("unexpected tensor {name:?}")))?;
        if slot.shape() != t.shape() {
            return Err(format_err(format!(
                "tensor {name:?} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &MonDEQModel, extra: &[(&str, String)]) -> Result<()> {
    model_to_checkpoint(model, extra).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MonDEQModel, BTreeMap<String, String>)> {
    let ckpt = Checkpoint::load(path)?;
    let model = model_from_checkpoint(&ckpt)?;
    Ok((model, ckpt.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut ckpt = Checkpoint::default();
        ckpt.metadata.insert("alpha".into(), "0.5".into());
        ckpt.tensors.push((
            "w".into(),
            Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        ));
        ckpt.tensors.push(("s".into(), Tensor::scalar(std::f64::consts::PI)));
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.metadata, ckpt.metadata);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        assert!(matches!(Checkpoint::read_from(&mut &b"NOTMAGIC"[..]), Err(MonDeqError::Format(_))));
        let mut buf = Vec::new();
        Checkpoint::default().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(MonDeqError::Format(_))));
    }
}
