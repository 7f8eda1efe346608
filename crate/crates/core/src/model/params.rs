//! Named parameter tensors, initialization and checkpoint files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::{HeadTarget, IMAGE_OUTPUTS};
use crate::error::{Error, Result};
use crate::geometry::BandRegistry;
use crate::io::{read_container, write_container, Array, Record};
use crate::kv::{self, KvFile};
use crate::numerics::{Graph, Tensor, Var};
use crate::sampler::{seeded, Rng64};

const CKPT_MAGIC: &[u8; 4] = b"FXCK";
const CKPT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

/// All trainable tensors of a model, in a stable (sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
}

fn trunc_normal(rng: &mut Rng64, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

struct Init<'a> {
    rng: &'a mut Rng64,
    out: BTreeMap<String, Tensor>,
}

impl Init<'_> {
    fn weight(&mut self, name: String, r: usize, c: usize) {
        let t = trunc_normal(self.rng, &[r, c]);
        self.out.insert(name, t);
    }

    fn fill(&mut self, name: String, r: usize, c: usize, v: f64) {
        self.out.insert(name, Tensor::full(&[r, c], v));
    }

    fn block(&mut self, prefix: &str, dim: usize, mlp_ratio: usize) {
        let hidden = dim * mlp_ratio;
        self.fill(format!("{prefix}.ln1.g"), 1, dim, 1.0);
        self.fill(format!("{prefix}.ln1.b"), 1, dim, 0.0);
        self.weight(format!("{prefix}.attn.qkv.w"), dim, 3 * dim);
        self.fill(format!("{prefix}.attn.qkv.b"), 1, 3 * dim, 0.0);
        self.weight(format!("{prefix}.attn.out.w"), dim, dim);
        self.fill(format!("{prefix}.attn.out.b"), 1, dim, 0.0);
        self.fill(format!("{prefix}.ln2.g"), 1, dim, 1.0);
        self.fill(format!("{prefix}.ln2.b"), 1, dim, 0.0);
        self.weight(format!("{prefix}.mlp.fc1.w"), dim, hidden);
        self.fill(format!("{prefix}.mlp.fc1.b"), 1, hidden, 0.0);
        self.weight(format!("{prefix}.mlp.fc2.w"), hidden, dim);
        self.fill(format!("{prefix}.mlp.fc2.b"), 1, dim, 0.0);
    }
}

pub fn embed_weight_name(group: u32, band: usize) -> String {
    format!("embed.g{group}.b{band}.w")
}

/// Added once per group after the bands are pooled.
pub fn embed_bias_name(group: u32) -> String {
    format!("embed.g{group}.bias")
}

impl ParamStore {
    pub fn init(cfg: &ModelConfig, registry: &BandRegistry, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut init = Init { rng: &mut rng, out: BTreeMap::new() };
        let (e, dd, pc2) = (cfg.embed_dim, cfg.decoder_dim, cfg.canonical_patch * cfg.canonical_patch);
        for g in registry.groups() {
            for b in 0..g.n_bands() {
                init.weight(embed_weight_name(g.id, b), e, pc2);
            }
            init.fill(embed_bias_name(g.id), 1, e, 0.0);
            init.weight(format!("recon.g{}.v", g.id), g.n_bands() * dd, pc2);
            init.fill(format!("recon.g{}.b", g.id), g.n_bands(), pc2, 0.0);
        }
        for l in 0..cfg.layers {
            init.block(&format!("enc.{l}"), e, cfg.mlp_ratio);
        }
        init.fill("enc.norm.g".into(), 1, e, 1.0);
        init.fill("enc.norm.b".into(), 1, e, 0.0);
        init.weight("dec.embed.w".into(), e, dd);
        init.fill("dec.embed.b".into(), 1, dd, 0.0);
        init.weight("dec.mask_token".into(), 1, dd);
        for l in 0..cfg.decoder_layers {
            init.block(&format!("dec.{l}"), dd, cfg.mlp_ratio);
        }
        init.fill("dec.norm.g".into(), 1, dd, 1.0);
        init.fill("dec.norm.b".into(), 1, dd, 0.0);
        for t in HeadTarget::ALL {
            init.weight(format!("{}.v", t.param_prefix()), t.channels() * dd, pc2);
            init.fill(format!("{}.b", t.param_prefix()), t.channels(), pc2, 0.0);
        }
        init.weight("img.w".into(), e, IMAGE_OUTPUTS);
        init.fill("img.b".into(), 1, IMAGE_OUTPUTS, 0.0);
        Ok(Self { tensors: init.out })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeights(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeights(name.to_string()))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), graph.param(t.clone())))
                .collect(),
        }
    }

    /// Writes the tensor table to `path` and the config to `path.cfg`.
    pub fn save(&self, cfg: &ModelConfig, path: &Path) -> Result<()> {
        let records: Vec<Record> = self
            .tensors
            .iter()
            .map(|(k, t)| Record { name: k.clone(), array: Array::F64(t.clone()) })
            .collect();
        let header = kv::render(&[("model", cfg.to_kv())]);
        let mut w = BufWriter::new(File::create(path)?);
        write_container(&mut w, CKPT_MAGIC, CKPT_VERSION, header.as_bytes(), &records)?;
        fs::write(sidecar_path(path), header)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, Self)> {
        let mut r = BufReader::new(File::open(path)?);
        let (header, records) = read_container(&mut r, CKPT_MAGIC, CKPT_VERSION)?;
        let text = String::from_utf8(header)
            .map_err(|_| Error::CorruptHeader("config header is not UTF-8".into()))?;
        let mut kv = KvFile::parse(&text)?;
        let cfg = ModelConfig::from_kv(&mut kv, &ModelConfig::desk())?;
        kv.finish()?;
        let mut tensors = BTreeMap::new();
        for rec in records {
            match rec.array {
                Array::F64(t) => {
                    tensors.insert(rec.name, t);
                }
                Array::U16 { .. } => {
                    return Err(Error::CorruptHeader(format!("tensor `{}` is not f64", rec.name)))
                }
            }
        }
        Ok((cfg, Self { tensors }))
    }

    /// A copy with every entry perturbed by `scale · N(0, 1)`.
    pub fn jittered(&self, scale: f64, rng: &mut impl Rng) -> Self {
        let mut out = self.clone();
        for t in out.tensors.values_mut() {
            for v in t.data_mut() {
                *v += scale * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
        out
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingWeights(name.to_string()))
    }
}
