//! Binary checkpoints.
//!
//! ```text
//! "XPLN" | version: u32 | count: u32
//! count x (name_len: u32 | name: utf-8 | rank: u32 | dims: rank x u32 | values: f32 ...)
//! fnv1a: u64 over every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::explainer::{ExplainerConfig, ExplainerNet, NormLayerState, HEAD};
use crate::filter_loss::FilterLossState;
use crate::performer::{PerformerConfig, PerformerNet};
use crate::templates::TemplateBank;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XPLN";
pub const VERSION: u32 = 1;

const KIND_PERFORMER: f64 = 1.0;
const KIND_EXPLAINER: f64 = 2.0;

/// Ordered table of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn u64_to_tensor(v: u64) -> Tensor {
    Tensor::from_vec((0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect())
}

fn tensor_to_u64(t: &Tensor) -> Result<u64> {
    if t.len() != 4 {
        return Err(Error::Checkpoint("bad u64 field".into()));
    }
    Ok(t.data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))))
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u32::try_from(name.len()).map_err(|_| Error::Checkpoint("name too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != fnv1a(body) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn kind(&self) -> Result<f64> {
        Ok(self.get("meta.kind")?.item())
    }

    pub fn seed(&self) -> Result<u64> {
        tensor_to_u64(self.get("meta.seed")?)
    }

    pub fn config_hash(&self) -> Result<u64> {
        tensor_to_u64(self.get("meta.config_hash")?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// FNV-1a hash of a configuration description.
pub fn config_hash(description: &str) -> u64 {
    fnv1a(description.as_bytes())
}

fn push_meta(ck: &mut Checkpoint, kind: f64, seed: u64, hash: u64) {
    ck.push("meta.kind", Tensor::scalar(kind));
    ck.push("meta.seed", u64_to_tensor(seed));
    ck.push("meta.config_hash", u64_to_tensor(hash));
}

fn push_params(ck: &mut Checkpoint, params: &ParamStore) {
    for (_, p) in params.iter() {
        ck.push(format!("param.{}", p.name), p.value.clone());
    }
}

fn load_params(ck: &Checkpoint, params: &mut ParamStore) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = format!("param.{}", params.get(id).name);
        let t = ck.get(&name)?;
        if t.shape() != params.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                params.value(id).shape()
            )));
        }
        *params.value_mut(id) = t.clone();
    }
    Ok(())
}

fn as_usize(v: f64) -> usize {
    v.max(0.0) as usize
}

pub fn performer_to_checkpoint(net: &PerformerNet, seed: u64, hash: u64) -> Checkpoint {
    let mut ck = Checkpoint::default();
    push_meta(&mut ck, KIND_PERFORMER, seed, hash);
    let c = &net.config;
    let mut cfg = vec![c.image_size as f64];
    cfg.extend(c.channels.iter().map(|&v| v as f64));
    cfg.extend([c.fc_width as f64, c.num_classes as f64]);
    ck.push("performer.config", Tensor::from_vec(cfg));
    push_params(&mut ck, &net.params);
    ck
}

pub fn performer_from_checkpoint(ck: &Checkpoint) -> Result<PerformerNet> {
    if ck.kind()? != KIND_PERFORMER {
        return Err(Error::Checkpoint("not a performer checkpoint".into()));
    }
    let cfg = ck.get("performer.config")?.data();
    if cfg.len() != 7 {
        return Err(Error::Checkpoint("bad performer config".into()));
    }
    let config = PerformerConfig {
        image_size: as_usize(cfg[0]),
        channels: [as_usize(cfg[1]), as_usize(cfg[2]), as_usize(cfg[3]), as_usize(cfg[4])],
        fc_width: as_usize(cfg[5]),
        num_classes: as_usize(cfg[6]),
    };
    let mut net = PerformerNet::new(config, 0);
    load_params(ck, &mut net.params)?;
    Ok(net)
}

fn norm_tensor(s: &NormLayerState) -> Tensor {
    Tensor::from_vec(vec![
        s.momentum,
        s.positive_only as u8 as f64,
        s.in_warmup() as u8 as f64,
    ])
}

fn norm_from(ck: &Checkpoint, name: &str) -> Result<NormLayerState> {
    let alpha = ck.get(&format!("alpha.{name}"))?.data().to_vec();
    let f = ck.get(&format!("norm.{name}"))?.data();
    if f.len() != 3 {
        return Err(Error::Checkpoint(format!("bad norm.{name}")));
    }
    Ok(NormLayerState::from_parts(alpha, f[0], f[1] != 0.0, f[2] != 0.0))
}

fn filters_tensors(states: &[FilterLossState]) -> (Tensor, Tensor) {
    (
        Tensor::from_vec(states.iter().map(|s| s.lambda).collect()),
        Tensor::from_vec(states.iter().map(|s| s.category.map_or(-1.0, |c| c as f64)).collect()),
    )
}

fn filters_from(ck: &Checkpoint, name: &str, d: usize) -> Result<Vec<FilterLossState>> {
    let lambda = ck.get(&format!("lambda.{name}"))?.data();
    let cat = ck.get(&format!("category.{name}"))?.data();
    if lambda.len() != d || cat.len() != d {
        return Err(Error::Checkpoint(format!("filter table {name} has wrong length")));
    }
    Ok((0..d)
        .map(|f| FilterLossState {
            filter: f,
            category: (cat[f] >= 0.0).then(|| cat[f] as usize),
            lambda: lambda[f],
        })
        .collect())
}

pub fn explainer_to_checkpoint(net: &ExplainerNet, seed: u64, hash: u64) -> Checkpoint {
    let mut ck = Checkpoint::default();
    push_meta(&mut ck, KIND_EXPLAINER, seed, hash);
    let c = &net.config;
    ck.push(
        "explainer.config",
        Tensor::from_vec(vec![
            c.side as f64,
            c.channels as f64,
            c.pool.0 as f64,
            c.pool.1 as f64,
            c.fc_widths.0 as f64,
            c.fc_widths.1 as f64,
            c.num_classes as f64,
            c.tau,
            c.beta,
        ]),
    );
    push_params(&mut ck, &net.params);
    ck.push("alpha.interp", Tensor::from_vec(net.norm_interp.alpha.clone()));
    ck.push("norm.interp", norm_tensor(&net.norm_interp));
    ck.push("alpha.ordin", Tensor::from_vec(net.norm_ordin.alpha.clone()));
    ck.push("norm.ordin", norm_tensor(&net.norm_ordin));
    for (name, states) in [("interp1", &net.filters_interp1), ("interp2", &net.filters_interp2)] {
        let (l, c) = filters_tensors(states);
        ck.push(format!("lambda.{name}"), l);
        ck.push(format!("category.{name}"), c);
    }
    ck
}

pub fn explainer_from_checkpoint(ck: &Checkpoint) -> Result<ExplainerNet> {
    if ck.kind()? != KIND_EXPLAINER {
        return Err(Error::Checkpoint("not an explainer checkpoint".into()));
    }
    let c = ck.get("explainer.config")?.data();
    if c.len() != 9 {
        return Err(Error::Checkpoint("bad explainer config".into()));
    }
    let config = ExplainerConfig {
        side: as_usize(c[0]),
        channels: as_usize(c[1]),
        pool: (as_usize(c[2]), as_usize(c[3])),
        fc_widths: (as_usize(c[4]), as_usize(c[5])),
        num_classes: as_usize(c[6]),
        tau: c[7],
        beta: c[8],
    };
    let mut net = ExplainerNet::random(config, 0)?;
    load_params(ck, &mut net.params)?;
    for suffix in ["w", "b"] {
        let id = net.params.id(&format!("{HEAD}.{suffix}"))?;
        net.params.set_frozen(id, true);
    }
    net.bank = TemplateBank::new(net.config.side, net.config.tau, net.config.beta)?;
    net.norm_interp = norm_from(ck, "interp")?;
    net.norm_ordin = norm_from(ck, "ordin")?;
    let d = net.config.channels;
    if net.norm_interp.alpha.len() != d || net.norm_ordin.alpha.len() != d {
        return Err(Error::Checkpoint("alpha has wrong length".into()));
    }
    net.filters_interp1 = filters_from(ck, "interp1", d)?;
    net.filters_interp2 = filters_from(ck, "interp2", d)?;
    Ok(net)
}
