//! Binary checkpoints: a `key=value` text header, a blank line, then each
//! tensor as `name_len:u32 name rank:u32 dims:u32* values:f32*`, all
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelDims, ModelParams, ParamId, Partition};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "alignsup-checkpoint-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn malformed<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(CheckpointError::Malformed {
        offset,
        msg: msg.into(),
    })
}

/// Parameters plus free-form metadata (`meta.<key>` header lines).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            meta: BTreeMap::new(),
        }
    }
}

pub fn encode_checkpoint(params: &ModelParams, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let d = &params.dims;
    let mut header = format!(
        "format={FORMAT_TAG}\nsrc_vocab={}\ntgt_vocab={}\nembed={}\nhidden={}\nattn_hidden={}\nout_hidden={}\nseed={}\ntensors={}\n",
        d.src_vocab,
        d.tgt_vocab,
        d.embed,
        d.hidden,
        d.attn_hidden,
        d.out_hidden,
        params.seed,
        ParamId::ALL.len()
    );
    for id in ParamId::ALL {
        header.push_str(&format!(
            "partition.{}={}\n",
            id.name(),
            params.partition(id).as_str()
        ));
    }
    for (k, v) in meta {
        header.push_str(&format!("meta.{k}={v}\n"));
    }
    header.push('\n');
    let mut out = header.into_bytes();
    for id in ParamId::ALL {
        let t = params.get(id);
        let name = id.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    params: &ModelParams,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    fs::write(path, encode_checkpoint(params, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return malformed(
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed)"),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

struct Header {
    fields: BTreeMap<String, (usize, String)>,
    meta: BTreeMap<String, String>,
}

impl Header {
    fn usize(&self, key: &str, end: usize) -> Result<usize> {
        match self.fields.get(key) {
            None => malformed(end, format!("header lacks {key}")),
            Some((off, v)) => v
                .parse()
                .or_else(|_| malformed(*off, format!("{key}={v} is not an integer"))),
        }
    }
}

fn parse_header(text: &str) -> Result<Header> {
    let mut fields = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        let Some((k, v)) = body.split_once('=') else {
            return malformed(offset, format!("header line {body:?} is not key=value"));
        };
        if let Some(m) = k.strip_prefix("meta.") {
            meta.insert(m.to_string(), v.to_string());
        } else if fields
            .insert(k.to_string(), (offset, v.to_string()))
            .is_some()
        {
            return malformed(offset, format!("duplicate header key {k}"));
        }
        offset += line.len();
    }
    Ok(Header { fields, meta })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let Some(split) = bytes.windows(2).position(|w| w == b"\n\n") else {
        return malformed(bytes.len(), "no blank line terminating the header");
    };
    let header_end = split + 2;
    let Ok(text) = std::str::from_utf8(&bytes[..split + 1]) else {
        return malformed(0, "header is not UTF-8");
    };
    let header = parse_header(text)?;
    match header.fields.get("format") {
        Some((_, v)) if v == FORMAT_TAG => {}
        Some((off, v)) => return malformed(*off, format!("unknown format {v}")),
        None => return malformed(0, "header lacks format"),
    }
    let dims = ModelDims {
        src_vocab: header.usize("src_vocab", split)?,
        tgt_vocab: header.usize("tgt_vocab", split)?,
        embed: header.usize("embed", split)?,
        hidden: header.usize("hidden", split)?,
        attn_hidden: header.usize("attn_hidden", split)?,
        out_hidden: header.usize("out_hidden", split)?,
    };
    if dims.validate().is_err() {
        return malformed(0, "header dimensions must be positive");
    }
    let seed = match header.fields.get("seed") {
        None => return malformed(split, "header lacks seed"),
        Some((off, v)) => v
            .parse::<u64>()
            .or_else(|_| malformed(*off, format!("seed={v} is not an integer")))?,
    };
    let count = header.usize("tensors", split)?;
    if count != ParamId::ALL.len() {
        let off = header.fields["tensors"].0;
        return malformed(
            off,
            format!(
                "expected {} tensors, header says {count}",
                ParamId::ALL.len()
            ),
        );
    }
    let mut partitions = Vec::with_capacity(count);
    for id in ParamId::ALL {
        let key = format!("partition.{}", id.name());
        let p = match header.fields.get(&key) {
            None => return malformed(split, format!("header lacks {key}")),
            Some((_, v)) if v == "A" => Partition::A,
            Some((_, v)) if v == "T" => Partition::T,
            Some((off, v)) => return malformed(*off, format!("{key}={v} is not A or T")),
        };
        let movable = matches!(id, ParamId::TgtEmbed | ParamId::BosEmbed);
        if !movable && p != id.partition(Partition::A) {
            let off = header.fields[&key].0;
            return malformed(
                off,
                format!("{key} must be {}", id.partition(Partition::A).as_str()),
            );
        }
        partitions.push(p);
    }

    let mut cur = Cursor {
        bytes,
        pos: header_end,
    };
    let mut tensors = Vec::with_capacity(count);
    for id in ParamId::ALL {
        let start = cur.pos;
        let n = cur.u32("name length")?;
        let name = cur.take(n, "tensor name")?;
        if name != id.name().as_bytes() {
            return malformed(
                start,
                format!(
                    "expected tensor {}, found {:?}",
                    id.name(),
                    String::from_utf8_lossy(name)
                ),
            );
        }
        let dims_at = cur.pos;
        let rank = cur.u32("rank")?;
        let want = id.shape(&dims);
        if rank != want.len() {
            return malformed(
                dims_at,
                format!(
                    "{} has rank {rank}, header implies {}",
                    id.name(),
                    want.len()
                ),
            );
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")?);
        }
        if shape != want {
            return malformed(
                dims_at,
                format!("{} has shape {shape:?}, header implies {want:?}", id.name()),
            );
        }
        let len: usize = shape.iter().product();
        let values_at = cur.pos;
        let raw = cur.take(4 * len, "tensor values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return malformed(
                values_at + 4 * k,
                format!("{} holds a non-finite value", id.name()),
            );
        }
        tensors.push(Tensor::new(shape, data).expect("shape checked"));
    }
    if cur.pos != bytes.len() {
        return malformed(cur.pos, "trailing bytes after the last tensor");
    }
    let params = ModelParams::from_parts(dims, seed, tensors, partitions)
        .or_else(|e| malformed(header_end, e.to_string()))?;
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            src_vocab: 7,
            tgt_vocab: 6,
            embed: 3,
            hidden: 4,
            attn_hidden: 2,
            out_hidden: 5,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let p = ModelParams::init(dims(), 9).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("phase".to_string(), "2".to_string());
        let a = encode_checkpoint(&p, &meta);
        let ck = decode_checkpoint(&a).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.params.dims, p.dims);
        for (x, y) in ck.params.tensors().iter().zip(p.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(*u, *v as f32 as f64);
            }
        }
        let b = encode_checkpoint(&ck.params, &ck.meta);
        assert_eq!(a, b);
    }

    #[test]
    fn moved_target_embedding_survives() {
        let opts = crate::model::InitOptions {
            target_embedding: Partition::T,
            ..Default::default()
        };
        let p = ModelParams::init_with(dims(), 1, &opts).unwrap();
        let ck = decode_checkpoint(&encode_checkpoint(&p, &BTreeMap::new())).unwrap();
        assert_eq!(ck.params.partitions(), p.partitions());
    }

    #[test]
    fn truncation_rejected() {
        let p = ModelParams::init(dims(), 2).unwrap();
        let bytes = encode_checkpoint(&p, &BTreeMap::new());
        for cut in [bytes.len() - 1, bytes.len() - 100, 40] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Malformed { .. }), "{err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn header_payload_mismatch_rejected() {
        let p = ModelParams::init(dims(), 2).unwrap();
        let bytes = encode_checkpoint(&p, &BTreeMap::new());
        let text = String::from_utf8_lossy(&bytes).replacen("hidden=4", "hidden=5", 1);
        let header_len = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        let mut edited = text.as_bytes()[..header_len].to_vec();
        edited.extend_from_slice(&bytes[header_len..]);
        match decode_checkpoint(&edited).unwrap_err() {
            CheckpointError::Malformed { offset, msg } => {
                assert!(offset >= header_len, "{offset}");
                assert!(msg.contains("shape"), "{msg}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_partition_rejected() {
        let p = ModelParams::init(dims(), 2).unwrap();
        let bytes = encode_checkpoint(&p, &BTreeMap::new());
        let header_len = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        let head = String::from_utf8(bytes[..header_len].to_vec())
            .unwrap()
            .replace("partition.out.w_vocab=T", "partition.out.w_vocab=A");
        let mut edited = head.into_bytes();
        edited.extend_from_slice(&bytes[header_len..]);
        assert!(decode_checkpoint(&edited).is_err());
    }
}
