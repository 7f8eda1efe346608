//! Finite-difference verification of every loss term on a micro model.

use std::fmt;

use rand::seq::IndexedRandom;

use crate::datagen::{generate_tile, standardization_stats};
use crate::error::{Error, Result};
use crate::geometry::{default_band_registry, multilook, pixels_for, GroupImage};
use crate::losses::{total_loss, weighted_total, LossWeights, Term, DEFAULT_TAU, N_TERMS};
use crate::model::{ModelConfig, ParamStore};
use crate::numerics::{Graph, Tensor, Var};
use crate::sampler::{sample_mask, seeded, GroupPatch, PatchPlan, Rng64};
use crate::train::{assemble_batch, forward, prepare_with_plan, Batch};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error.
pub const ABS_FLOOR: f64 = 1e-6;
const TOP_PROBES: usize = 4;
const RANDOM_PROBES: usize = 4;
const EMBED_PROBES: usize = 4;
/// Probed gradients must reach this fraction of `max(|f|, 1)`. Below it, f64
/// rounding in the pixel-averaged losses dominates a 1e-5 central difference.
const RESOLVABLE: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of every check.
    pub corrupt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(ABS_FLOOR)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    /// Loss term name, or `total`.
    pub name: String,
    pub value: f64,
    pub probes: Vec<Probe>,
}

impl TermCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(Probe::rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.max_rel_error() <= REL_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(TermCheck::passed)
    }

    pub fn get(&self, name: &str) -> Option<&TermCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>14} {:>7} {:>12}  status", "term", "value", "probes", "max_rel")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<12} {:>14.6e} {:>7} {:>12.3e}  {}",
                c.name,
                c.value,
                c.probes.len(),
                c.max_rel_error(),
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.passed() { "all gradients agree" } else { "gradient mismatch" })
    }
}

fn group_patch(group_id: u32, gsd_m: f64, cover: f64, patch_px: usize) -> GroupPatch {
    let side = pixels_for(cover, gsd_m);
    let n = side.div_ceil(patch_px);
    GroupPatch { group_id, gsd_m, h: side, w: side, patch_px, token_count: n * n }
}

/// Four hand-built samples (two per device) that together define every term.
///
/// Sample A covers 12 km with OLCI, SLSTR and 240 m multi-looked SAR at 25 px
/// patches (global land-cover, MODIS, SAR scalars). Sample B covers 640 m with
/// S2 and S1 at 10 m and 32 px patches (WorldCover, SCL, DEM).
pub fn gradcheck_batch(model: &ModelConfig, seed: u64) -> Result<Batch> {
    let registry = default_band_registry();
    let mut rng: Rng64 = seeded(seed);
    let tile_a = generate_tile(seed.wrapping_mul(2).wrapping_add(1), 12_000.0)?;
    let tile_b = generate_tile(seed.wrapping_mul(2).wrapping_add(2), 640.0)?;
    let stats = standardization_stats([&tile_a, &tile_b]);

    let native = |tile: &crate::datagen::SyntheticTile, id: u32| {
        tile.group(id).cloned().ok_or_else(|| Error::InvalidArgument(format!("tile lacks group {id}")))
    };
    let sar = native(&tile_a, 4)?;
    let sar_a = GroupImage { group_id: 4, gsd_m: 240.0, image: multilook(&sar.image, sar.gsd_m, 240.0)? };
    let images_a = vec![native(&tile_a, 6)?, native(&tile_a, 9)?, sar_a];
    let images_b = vec![native(&tile_b, 1)?, native(&tile_b, 4)?];

    let plan = |cover: f64, images: &[GroupImage], patch: usize| {
        let groups: Vec<GroupPatch> = images.iter().map(|g| group_patch(g.group_id, g.gsd_m, cover, patch)).collect();
        let total_tokens = groups.iter().map(|g| g.token_count).sum();
        PatchPlan { ground_cover_m: cover, groups, total_tokens }
    };
    let plan_a = plan(12_000.0, &images_a, 25);
    let plan_b = plan(640.0, &images_b, 32);

    let mut samples = Vec::with_capacity(4);
    for _ in 0..2 {
        for (tile, images, plan) in [(&tile_a, &images_a, &plan_a), (&tile_b, &images_b, &plan_b)] {
            let mask = sample_mask(plan, 0.5, &mut rng)?;
            samples.push(prepare_with_plan(tile, &registry, images.clone(), plan.clone(), mask, model, &stats)?);
        }
    }
    assemble_batch(samples, 2, 2, &mut rng)
}

/// Evaluates one scalar of the forward pass (a term, or the weighted total).
fn evaluate(params: &ParamStore, cfg: &ModelConfig, batch: &Batch, weights: &LossWeights, which: Option<Term>) -> Result<f64> {
    let g = Graph::new();
    let bound = params.bind(&g);
    let terms = forward(&g, &bound, cfg, batch, DEFAULT_TAU)?;
    let v = select(&g, &terms, weights, which)?;
    Ok(g.item(v))
}

fn select(g: &Graph, terms: &[Option<Var>; N_TERMS], weights: &LossWeights, which: Option<Term>) -> Result<Var> {
    let missing = |n: &str| Error::InvalidArgument(format!("term {n} is undefined on the check batch"));
    match which {
        Some(t) => terms[t as usize].ok_or_else(|| missing(t.name())),
        None => weighted_total(g, terms, weights)?.ok_or_else(|| missing("total")),
    }
}

/// Parameter entries to probe: the largest gradients, a few random ones
/// above the resolvable floor, and for the total a few embedding weights.
fn pick_probes(names: &[String], grads: &[Tensor], value: f64, embed: bool, rng: &mut Rng64) -> Vec<(usize, usize)> {
    let floor = RESOLVABLE * value.abs().max(1.0);
    let mut all: Vec<(usize, usize, f64)> = grads
        .iter()
        .enumerate()
        .flat_map(|(p, t)| t.data().iter().enumerate().map(move |(i, &v)| (p, i, v.abs())))
        .filter(|e| e.2 >= floor)
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut picked: Vec<(usize, usize)> = all.iter().take(TOP_PROBES).map(|e| (e.0, e.1)).collect();
    let rest: Vec<(usize, usize)> = all.iter().skip(TOP_PROBES).map(|e| (e.0, e.1)).collect();
    picked.extend(rest.choose_multiple(rng, RANDOM_PROBES).copied());
    if embed {
        let embeds: Vec<(usize, usize)> = all
            .iter()
            .filter(|e| names[e.0].starts_with("embed.") && names[e.0].ends_with(".w"))
            .map(|e| (e.0, e.1))
            .filter(|e| !picked.contains(e))
            .collect();
        picked.extend(embeds.into_iter().take(EMBED_PROBES));
    }
    picked
}

/// Central differences against reverse-mode gradients for all 13 terms and
/// the weighted total.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = ModelConfig::micro();
    let registry = default_band_registry();
    let mut params = ParamStore::init(&cfg, &registry, opts.seed)?;
    let batch = gradcheck_batch(&cfg, opts.seed)?;
    let weights = LossWeights::default();
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let mut rng: Rng64 = seeded(opts.seed ^ 0x9c);

    let targets: Vec<Option<Term>> = Term::ALL.iter().copied().map(Some).chain([None]).collect();
    let mut checks = Vec::with_capacity(targets.len());
    for which in targets {
        let g = Graph::new();
        let bound = params.bind(&g);
        let terms = forward(&g, &bound, &cfg, &batch, DEFAULT_TAU)?;
        let out = select(&g, &terms, &weights, which)?;
        let value = g.item(out);
        let vars: Vec<Var> = bound.vars.values().copied().collect();
        let grads = g.grad(out, &vars)?;
        drop(g);

        let mut probes = Vec::new();
        for (p, i) in pick_probes(&names, &grads, value, which.is_none(), &mut rng) {
            let name = &names[p];
            let orig = params.get(name)?.data()[i];
            params.get_mut(name)?.data_mut()[i] = orig + STEP;
            let up = evaluate(&params, &cfg, &batch, &weights, which)?;
            params.get_mut(name)?.data_mut()[i] = orig - STEP;
            let down = evaluate(&params, &cfg, &batch, &weights, which)?;
            params.get_mut(name)?.data_mut()[i] = orig;
            let mut analytic = grads[p].data()[i];
            if opts.corrupt {
                analytic *= 1.01;
            }
            probes.push(Probe { param: name.clone(), index: i, analytic, numeric: (up - down) / (2.0 * STEP) });
        }
        let name = which.map_or("total", Term::name).to_string();
        checks.push(TermCheck { name, value, probes });
    }

    // The total must also match the scalar weighted sum of the terms.
    let g = Graph::new();
    let bound = params.bind(&g);
    let terms = forward(&g, &bound, &cfg, &batch, DEFAULT_TAU)?;
    let report = total_loss(&crate::train::term_values(&g, &terms), &weights);
    if let Some(total) = checks.iter().find(|c| c.name == "total") {
        if (total.value - report.total).abs() > 1e-12 * report.total.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "graph total {} differs from weighted sum {}",
                total.value, report.total
            )));
        }
    }
    Ok(GradcheckReport { checks })
}
