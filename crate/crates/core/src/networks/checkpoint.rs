//! Checkpoint container: a text header describing the architecture plus a
//! flat list of named tensors with little-endian float32 payloads.
//!
//! Layout: magic `DMRC`, u32 format version, u32 header length, UTF-8
//! header of `key = value` lines, u32 entry count, then per entry a u16
//! name length, the name bytes, a flags byte (bit 0 = trainable), a u8
//! rank, u32 extents, and the f32 payload. All integers little-endian.
//! Identical input produces identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;

use super::{ArchSpec, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMRC";
pub const FORMAT_VERSION: u32 = 1;

/// Header fields beyond the architecture itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub val_dice: Option<f64>,
    pub config_hash: Option<u64>,
    /// learned task log-scales, present when trained with learned weighting
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    /// preprocessing contract the model was trained with
    pub target_size: Option<usize>,
    pub out_spacing: Option<f64>,
}

fn header_text(spec: &ArchSpec, meta: &CheckpointMeta) -> String {
    let mut lines = vec![
        format!("arch.variant = {}", spec.variant.as_str()),
        format!("arch.in_channels = {}", spec.in_channels),
        format!("arch.num_classes = {}", spec.num_classes),
        format!(
            "arch.stage_channels = {}",
            spec.stage_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ),
        format!("arch.bottleneck_channels = {}", spec.bottleneck_channels),
        format!("arch.batchnorm = {}", spec.use_batchnorm),
        format!("arch.dmr = {}", spec.dmr_attached),
        format!("arch.dm_threshold = {}", spec.dm_threshold),
    ];
    if let Some(e) = meta.epoch {
        lines.push(format!("meta.epoch = {e}"));
    }
    if let Some(d) = meta.val_dice {
        lines.push(format!("meta.val_dice = {d}"));
    }
    if let Some(h) = meta.config_hash {
        lines.push(format!("meta.config_hash = {h:016x}"));
    }
    if let Some(s1) = meta.s1 {
        lines.push(format!("meta.s1 = {s1}"));
    }
    if let Some(s2) = meta.s2 {
        lines.push(format!("meta.s2 = {s2}"));
    }
    if let Some(t) = meta.target_size {
        lines.push(format!("meta.target_size = {t}"));
    }
    if let Some(s) = meta.out_spacing {
        lines.push(format!("meta.out_spacing = {s}"));
    }
    lines.join("\n") + "\n"
}

fn parse_header(text: &str) -> Result<(ArchSpec, CheckpointMeta)> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Corrupt(format!(
            "checkpoint header line without `=`: {line}"
        )))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint header missing `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad integer for `{k}`")))
    };
    let spec = ArchSpec {
        variant: Variant::parse(get("arch.variant")?)?,
        in_channels: parse_usize("arch.in_channels")?,
        num_classes: parse_usize("arch.num_classes")?,
        stage_channels: get("arch.stage_channels")?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Corrupt("bad stage channel".into())))
            .collect::<Result<Vec<usize>>>()?,
        bottleneck_channels: parse_usize("arch.bottleneck_channels")?,
        use_batchnorm: get("arch.batchnorm")? == "true",
        dmr_attached: get("arch.dmr")? == "true",
        dm_threshold: get("arch.dm_threshold")?
            .parse()
            .map_err(|_| Error::Corrupt("bad dm_threshold".into()))?,
    };
    let opt_f64 = |k: &str| map.get(k).and_then(|v| v.parse::<f64>().ok());
    let meta = CheckpointMeta {
        epoch: map.get("meta.epoch").and_then(|v| v.parse().ok()),
        val_dice: opt_f64("meta.val_dice"),
        config_hash: map
            .get("meta.config_hash")
            .and_then(|v| u64::from_str_radix(v, 16).ok()),
        s1: opt_f64("meta.s1"),
        s2: opt_f64("meta.s2"),
        target_size: map.get("meta.target_size").and_then(|v| v.parse().ok()),
        out_spacing: opt_f64("meta.out_spacing"),
    };
    Ok((spec, meta))
}

pub fn save(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let header = header_text(params.spec(), meta);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let entries: Vec<(&String, &Tensor)> = params.iter().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(t.requires_grad()));
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data().iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                field: what,
                offset: self.pos,
                detail: format!("checkpoint truncated: need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            field: "magic",
            offset: 0,
            detail: "not a checkpoint file".into(),
        });
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            field: "version",
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let header_len = c.u32("header_len")? as usize;
    let header = std::str::from_utf8(c.take(header_len, "header")?)
        .map_err(|_| Error::Corrupt("checkpoint header is not UTF-8".into()))?;
    let (spec, meta) = parse_header(header)?;
    let count = c.u32("entry_count")? as usize;
    let mut entries = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16("name_len")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Corrupt("entry name is not UTF-8".into()))?
            .to_string();
        let flags = c.take(1, "flags")?[0];
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, "payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let tensor = if flags & 1 == 1 {
            Tensor::param(shape, data)?
        } else {
            Tensor::from_vec(shape, data)?
        };
        entries.insert(name, tensor);
    }
    let has_dmr = entries.keys().any(|n| n.starts_with("dmr_decoder."));
    if has_dmr != spec.dmr_attached {
        return Err(Error::Corrupt(format!(
            "header says dmr = {}, but dmr_decoder entries {} present",
            spec.dmr_attached,
            if has_dmr { "are" } else { "are not" }
        )));
    }
    Ok((ModelParams::from_entries(spec, entries), meta))
}
