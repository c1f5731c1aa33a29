//! `HAA1` checkpoint files.
//!
//! Layout (all integers u32 little-endian):
//! `"HAA1"`, tensor count, then per tensor: name length, UTF-8 name, rank,
//! dims, and the values as f32 little-endian in row-major order.
//! Model configuration and seed travel as `meta.*` tensors of small integers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HaaModel, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HAA1";
const MAX_RANK: usize = 8;
const MAX_ELEMS: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub variant: Variant,
    pub seed: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<HaaModel> {
        HaaModel::new(self.config.clone(), self.variant)
    }

    fn meta_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let c = &self.config;
        let mut cfg = vec![
            c.input_h,
            c.input_w,
            c.embed_dim,
            c.reduction,
            c.stripes,
            c.share_backbone as usize,
            self.variant.code() as usize,
            c.widths.len(),
        ];
        cfg.extend(&c.widths);
        cfg.extend(&c.strides);
        cfg.push(c.hll_widths.len());
        cfg.extend(&c.hll_widths);
        let cfg: Vec<f32> = cfg.into_iter().map(|v| v as f32).collect();
        let seed: Vec<f32> = (0..4).map(|i| ((self.seed >> (16 * i)) & 0xffff) as f32).collect();
        vec![
            ("meta.config".into(), Tensor::from_parts(vec![cfg.len()], cfg)),
            ("meta.seed".into(), Tensor::from_parts(vec![4], seed)),
        ]
    }
}

fn decode_meta(cfg: &[f32], seed: &[f32]) -> Result<(ModelConfig, Variant, u64)> {
    let bad = || Error::format("checkpoint", "inconsistent meta.config");
    let v: Vec<usize> = cfg.iter().map(|&x| x as usize).collect();
    let at = |i: usize| v.get(i).copied().ok_or_else(bad);
    let layers = at(7)?;
    let widths = v.get(8..8 + layers).ok_or_else(bad)?.to_vec();
    let strides = v.get(8 + layers..8 + 2 * layers).ok_or_else(bad)?.to_vec();
    let n_hll = at(8 + 2 * layers)?;
    let hll_start = 9 + 2 * layers;
    let hll_widths = v.get(hll_start..hll_start + n_hll).ok_or_else(bad)?.to_vec();
    let config = ModelConfig {
        input_h: at(0)?,
        input_w: at(1)?,
        embed_dim: at(2)?,
        reduction: at(3)?,
        stripes: at(4)?,
        share_backbone: at(5)? != 0,
        widths,
        strides,
        hll_widths,
    };
    let variant = Variant::from_code(at(6)? as u32).ok_or_else(bad)?;
    if seed.len() != 4 {
        return Err(bad());
    }
    let seed = seed.iter().enumerate().fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i)));
    Ok((config, variant, seed))
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut entries = ckpt.meta_tensors();
    entries.extend(ckpt.params.iter().map(|(k, v)| (k.clone(), v.clone())));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    let (mut cfg, mut seed) = (None, None);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::format("checkpoint", format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::format("checkpoint", format!("rank {rank} of `{name}`")));
        }
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= MAX_ELEMS);
        let n = n.ok_or_else(|| Error::format("checkpoint", format!("oversized tensor `{name}`")))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::format("checkpoint", format!("truncated data of `{name}`: {e}")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        match name.as_str() {
            "meta.config" => cfg = Some(t),
            "meta.seed" => seed = Some(t),
            _ => params.insert(name, t),
        }
    }
    let (cfg, seed) = match (cfg, seed) {
        (Some(c), Some(s)) => (c, s),
        _ => return Err(Error::format("checkpoint", "missing meta tensors")),
    };
    let (config, variant, seed) = decode_meta(cfg.data(), seed.data())?;
    Ok(Checkpoint {
        config,
        variant,
        seed,
        params,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
