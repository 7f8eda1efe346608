//! Toy pre-training: forward pass over a batch, AdamW, and the run loop.

pub mod batch;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{default_band_registry, BandRegistry};
use crate::losses::{
    assemble_mosaic, channels_last, class_map_loss, fft_loss, flex_mae_graph, image_level_losses, mean_present, mse,
    patch_contrastive_loss, total_loss, weighted_total, LossReport, LossWeights, Term, LABEL_SMOOTHING, N_TERMS,
};
use crate::model::{decode, embed_bands, encode, image_heads, project_patches, Bound, HeadTarget, ModelConfig, ParamStore};
use crate::numerics::{Graph, ResizePlan, Tensor, Var};
use crate::sampler::{seeded, Rng64};

pub use batch::{assemble_batch, prepare_sample, prepare_with_plan, reference_stats, sample_batch, Batch, DataConfig, PreparedSample};

pub type TermVars = [Option<Var>; N_TERMS];

/// Per-term losses of a batch: per-sample terms averaged over the samples
/// where they are defined, contrastive computed across the batch.
pub fn forward(g: &Graph, p: &Bound, cfg: &ModelConfig, batch: &Batch, tau: f64) -> Result<TermVars> {
    let mut per_sample: Vec<TermVars> = Vec::with_capacity(batch.samples.len());
    let mut encoded = Vec::with_capacity(batch.samples.len());
    for s in &batch.samples {
        let (terms, enc) = forward_sample(g, p, cfg, s)?;
        per_sample.push(terms);
        encoded.push(enc);
    }
    let mut out: TermVars = [None; N_TERMS];
    for t in Term::ALL {
        let vals: Vec<Option<Var>> = per_sample.iter().map(|s| s[t as usize]).collect();
        out[t as usize] = mean_present(g, &vals)?;
    }
    out[Term::Contrastive as usize] = patch_contrastive_loss(g, &encoded, &batch.contrastive, &batch.labels, tau)?;
    Ok(out)
}

fn forward_sample(g: &Graph, p: &Bound, cfg: &ModelConfig, s: &PreparedSample) -> Result<(TermVars, Var)> {
    let seq = embed_bands(g, p, cfg, &s.footprint, &s.plan)?.with_mask(&s.mask)?;
    let enc = encode(g, p, cfg, &seq, &s.alibi)?;
    let z = decode(g, p, cfg, &enc, &seq.masked, &s.positions)?;

    let mut mae = Vec::new();
    let mut fft = Vec::new();
    let mut maps: std::collections::BTreeMap<Term, Vec<Option<Var>>> = Default::default();
    let mut offset = 0;
    for (gp, gt) in s.plan.groups.iter().zip(&s.groups) {
        let n = gp.token_count;
        let rows: Vec<usize> = (offset..offset + n).collect();
        offset += n;
        let zg = if rows.len() == g.shape(z)[0] { z } else { g.gather_rows(z, &rows)? };
        let c = gt.channels;
        let plan = ResizePlan::cached(cfg.canonical_patch, gp.patch_px)?;
        let v = p.get(&format!("recon.g{}.v", gp.group_id))?;
        let b = p.get(&format!("recon.g{}.b", gp.group_id))?;
        let pred = project_patches(g, zg, v, b, c, &plan)?;
        if !gt.masked.is_empty() {
            let m = g.gather_rows(pred, &gt.masked)?;
            let m = g.reshape(m, &[gt.masked.len() * c, gp.patch_px * gp.patch_px])?;
            mae.push(flex_mae_graph(g, m, &gt.recon, &plan)?);
        }
        let mosaic = assemble_mosaic(g, pred, gp.grid_rows(), gp.grid_cols(), gp.patch_px, c)?;
        fft.push(Some(fft_loss(g, mosaic, &gt.mosaic)?));

        for mt in &gt.maps {
            let prefix = mt.target.param_prefix();
            let k = mt.target.channels();
            let plan = ResizePlan::cached(cfg.canonical_patch, mt.side)?;
            let pred = project_patches(g, zg, p.get(&format!("{prefix}.v"))?, p.get(&format!("{prefix}.b"))?, k, &plan)?;
            let loss = match (mt.target, &mt.values) {
                (HeadTarget::Dem, Some(values)) => mse(g, pred, values)?,
                (HeadTarget::Class(_), _) => class_map_loss(g, channels_last(g, pred, k)?, &mt.labels, LABEL_SMOOTHING)?,
                (HeadTarget::Dem, None) => return Err(Error::InvalidArgument("DEM target without values".into())),
            };
            maps.entry(Term::map_term(mt.target)).or_default().push(Some(loss));
        }
    }

    let img = image_level_losses(g, &image_heads(g, p, &enc)?, &s.image)?;
    let mut terms: TermVars = [None; N_TERMS];
    terms[Term::Mae as usize] = mean_present(g, &mae)?;
    terms[Term::Fft as usize] = mean_present(g, &fft)?;
    for (t, v) in maps {
        terms[t as usize] = mean_present(g, &v)?;
    }
    terms[Term::Era5 as usize] = Some(img.era5);
    terms[Term::Month as usize] = Some(img.month);
    terms[Term::Coords as usize] = Some(img.coords);
    terms[Term::Incidence as usize] = img.incidence;
    terms[Term::Orbit as usize] = img.orbit;
    Ok((terms, enc.tokens))
}

pub fn term_values(g: &Graph, terms: &TermVars) -> [Option<f64>; N_TERMS] {
    terms.map(|t| t.map(|v| g.item(v)))
}

/// Loss report and gradients (in `params.tensors` order) for one batch.
pub fn loss_and_grads(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    weights: &LossWeights,
    tau: f64,
) -> Result<(LossReport, Vec<Tensor>)> {
    let g = Graph::new();
    let bound = params.bind(&g);
    let terms = forward(&g, &bound, cfg, batch, tau)?;
    let report = total_loss(&term_values(&g, &terms), weights);
    if !report.total.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite loss {}", report.total)));
    }
    let total = weighted_total(&g, &terms, weights)?.ok_or_else(|| Error::InvalidArgument("every loss term is absent".into()))?;
    let vars: Vec<Var> = bound.vars.values().copied().collect();
    Ok((report, g.grad(total, &vars)?))
}

/// Adam with decoupled weight decay on projection matrices.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".v")
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// `grads` are in `params.tensors` order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (name, w)) in params.tensors.iter_mut().enumerate() {
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, x) in w.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *x -= lr * (update + wd * *x);
            }
        }
    }
}

pub fn load_registry(cfg: &RunConfig) -> Result<BandRegistry> {
    let reg = match &cfg.registry {
        Some(path) => BandRegistry::load(path)?,
        None => default_band_registry(),
    };
    if reg.is_empty() {
        return Err(Error::Config("band registry is empty".into()));
    }
    Ok(reg)
}

pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub params: ParamStore,
    pub csv_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains per `cfg`, writing `losses.csv`, `model.ckpt` (+ `.cfg` sidecar)
/// and the resolved `run.ini` into `out_dir`.
pub fn train_toy(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let registry = load_registry(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("run.ini"), cfg.render())?;

    let t = &cfg.train;
    let mut params = ParamStore::init(&cfg.model, &registry, cfg.seed)?;
    let mut rng: Rng64 = seeded(cfg.seed ^ 0x5eed_da7a);
    let stats = reference_stats(t.stats_tiles, &cfg.budget, &mut rng)?;
    let data = DataConfig { budget: cfg.budget.clone(), mask_ratio: t.mask_ratio, sets: t.sets };
    let mut opt = AdamW::new(t.beta1, t.beta2, t.eps, t.weight_decay);

    let csv_path = out_dir.join("losses.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "{}", LossReport::csv_header())?;

    let fixed = if t.overfit {
        Some(sample_batch(t.batch_size, t.devices, &registry, &data, &cfg.model, &stats, &mut rng)?)
    } else {
        None
    };
    let mut reports = Vec::with_capacity(t.steps);
    for step in 1..=t.steps {
        let fresh;
        let batch = match &fixed {
            Some(b) => b,
            None => {
                fresh = sample_batch(t.batch_size, t.devices, &registry, &data, &cfg.model, &stats, &mut rng)?;
                &fresh
            }
        };
        let (mut report, grads) = loss_and_grads(&params, &cfg.model, batch, &cfg.weights, t.tau)?;
        report.step = step;
        writeln!(csv, "{}", report.csv_row())?;
        let lr = t.lr_at(step);
        opt.step(&mut params, &grads, lr);
        if step == 1 || step % 10 == 0 || step == t.steps {
            info!("step {step}: total {:.6} lr {lr:.3e}", report.total);
        }
        reports.push(report);
    }
    csv.flush()?;

    let checkpoint_path = out_dir.join("model.ckpt");
    params.save(&cfg.model, &checkpoint_path)?;
    Ok(TrainOutcome { reports, params, csv_path, checkpoint_path })
}

/// Settings for the single-batch overfitting check.
pub fn overfit_config(seed: u64, steps: usize) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.train.overfit = true;
    cfg.train.steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.devices = 2;
    cfg.train.warmup_steps = 10;
    cfg.train.lr = 2e-3;
    cfg.train.weight_decay = 0.0;
    cfg.budget.max_tokens = 64;
    cfg.budget.ground_cover_max_m = 1280.0;
    cfg
}

#[cfg(test)]
mod tests;
