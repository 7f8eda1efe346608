//! Pretext losses and their weighted total.
//!
//! Graph-building functions return `Option<Var>` where a term can be
//! undefined for a batch (no masked tokens, no viable task); callers treat
//! `None` as an absent term.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::model::{ImagePreds, ERA5_RANGE, INCIDENCE_COL, LAT_COL, LON_RANGE, MONTH_RANGE, ORBIT_RANGE};
use crate::numerics::{dft2, Graph, ResizePlan, Tensor, Var};
use crate::posenc::cyclic_encoding;
use crate::sampler::Rng64;

pub const LABEL_SMOOTHING: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_SETS: usize = 4;
pub const MIN_TARGET_PATCH: usize = 4;
pub const MAX_TARGET_PATCH: usize = 32;

/// Loss components in report/CSV order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(usize)]
pub enum Term {
    Mae,
    Contrastive,
    MapWc,
    MapScl,
    MapGc,
    MapMcd,
    MapDem,
    Era5,
    Month,
    Coords,
    Incidence,
    Orbit,
    Fft,
}

pub const N_TERMS: usize = 13;

impl Term {
    pub const ALL: [Term; N_TERMS] = [
        Term::Mae,
        Term::Contrastive,
        Term::MapWc,
        Term::MapScl,
        Term::MapGc,
        Term::MapMcd,
        Term::MapDem,
        Term::Era5,
        Term::Month,
        Term::Coords,
        Term::Incidence,
        Term::Orbit,
        Term::Fft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Mae => "mae",
            Term::Contrastive => "contrastive",
            Term::MapWc => "map_wc",
            Term::MapScl => "map_scl",
            Term::MapGc => "map_gc",
            Term::MapMcd => "map_mcd",
            Term::MapDem => "map_dem",
            Term::Era5 => "era5",
            Term::Month => "month",
            Term::Coords => "coords",
            Term::Incidence => "incidence",
            Term::Orbit => "orbit",
            Term::Fft => "fft",
        }
    }

    pub fn map_term(target: crate::model::HeadTarget) -> Term {
        use crate::datagen::MapTask::*;
        use crate::model::HeadTarget::*;
        match target {
            Class(WorldCover) => Term::MapWc,
            Class(Scl) => Term::MapScl,
            Class(GlobCover) => Term::MapGc,
            Class(Mcd) => Term::MapMcd,
            Dem => Term::MapDem,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w: [f64; N_TERMS],
}

impl Default for LossWeights {
    fn default() -> Self {
        let mut w = [0.1; N_TERMS];
        w[Term::Mae as usize] = 1.5;
        w[Term::MapScl as usize] = 0.05;
        w[Term::Fft as usize] = 0.01;
        Self { w }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self { w: [0.0; N_TERMS] }
    }

    pub fn get(&self, t: Term) -> f64 {
        self.w[t as usize]
    }

    pub fn set(&mut self, t: Term, v: f64) {
        self.w[t as usize] = v;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { w: self.w.map(|v| v * s) }
    }

    pub fn validate(&self) -> Result<()> {
        match Term::ALL.iter().find(|&&t| !(self.get(t) >= 0.0 && self.get(t).is_finite())) {
            Some(t) => Err(Error::Config(format!("weight `{}` must be finite and nonnegative", t.name()))),
            None => Ok(()),
        }
    }

    pub fn from_kv(kv: &mut KvFile, base: &Self) -> Result<Self> {
        let mut out = base.clone();
        for t in Term::ALL {
            let v = kv.take(&format!("weights.{}", t.name()), out.get(t))?;
            out.set(t, v);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        Term::ALL.iter().map(|&t| (t.name(), self.get(t).to_string())).collect()
    }
}

/// Per-term values of one step; `None` marks an absent term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub terms: [Option<f64>; N_TERMS],
    pub total: f64,
}

/// Compensated (Neumaier) sum, so exact decimal weight sums stay exact.
fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

pub fn total_loss(terms: &[Option<f64>; N_TERMS], weights: &LossWeights) -> LossReport {
    let total = neumaier_sum(
        Term::ALL
            .iter()
            .filter_map(|&t| terms[t as usize].map(|v| weights.get(t) * v)),
    );
    LossReport { step: 0, terms: *terms, total }
}

impl LossReport {
    pub fn get(&self, t: Term) -> Option<f64> {
        self.terms[t as usize]
    }

    pub fn absent(&self) -> Vec<Term> {
        Term::ALL.iter().copied().filter(|&t| self.get(t).is_none()).collect()
    }

    pub fn csv_header() -> String {
        let mut s = String::from("step");
        for t in Term::ALL {
            s.push(',');
            s.push_str(t.name());
        }
        s.push_str(",total");
        s
    }

    /// Absent terms are empty cells.
    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for v in &self.terms {
            s.push(',');
            if let Some(v) = v {
                write!(s, "{v:.12e}").expect("string write");
            }
        }
        write!(s, ",{:.12e}", self.total).expect("string write");
        s
    }
}

/// Weighted sum on the graph, skipping absent and zero-weight terms.
pub fn weighted_total(g: &Graph, terms: &[Option<Var>; N_TERMS], weights: &LossWeights) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for t in Term::ALL {
        let (Some(v), w) = (terms[t as usize], weights.get(t)) else { continue };
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc)
}

// ---------------------------------------------------------------- reconstruction

/// Reconstruction loss at a resized patch size, pulled back to the
/// canonical size through `B⁺`.
///
/// `pred` and `target` are `R × Pt²` (one row per token and channel) and
/// `plan` maps canonical → `Pt`. The result equals the per-pixel MSE that
/// the same prediction would have at the canonical size.
pub fn flex_mae_graph(g: &Graph, pred: Var, target: &Tensor, plan: &ResizePlan) -> Result<Option<Var>> {
    let rows = target.rows();
    if rows == 0 {
        return Ok(None);
    }
    let pt2 = plan.p_dst * plan.p_dst;
    if target.cols() != pt2 || g.shape(pred) != [rows, pt2] {
        return Err(Error::Shape(format!(
            "prediction {:?} / target {:?} vs patch {}",
            g.shape(pred),
            target.shape(),
            plan.p_dst
        )));
    }
    let r = g.sub(g.constant(target.clone()), pred)?;
    let r = if plan.is_identity() {
        r
    } else {
        g.matmul(r, g.constant(plan.b_pinv.transpose()))?
    };
    let n = (rows * plan.p_src * plan.p_src) as f64;
    Ok(Some(g.scale(g.sum(g.square(r)), 1.0 / n)))
}

/// Plain-value form: `z` is `N × D`, `v` is `D × Pc²` (canonical), target
/// `N × Pt²`. Returns `None` when there are no patches.
pub fn flex_mae_loss(z: &Tensor, v: &Tensor, plan: &ResizePlan, target: &Tensor) -> Result<Option<f64>> {
    let g = Graph::new();
    let vr = crate::numerics::resize_decoder_weights(v, plan)?;
    let pred = g.constant(z.matmul(&vr)?);
    Ok(flex_mae_graph(&g, pred, target, plan)?.map(|l| g.item(l)))
}

// ---------------------------------------------------------------- contrastive

/// Cosine similarity of two nonnegative histograms (0 if either is empty).
pub fn histogram_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

pub fn soft_labels(hists: &[Vec<f64>]) -> Tensor {
    let m = hists.len();
    Tensor::from_fn(m, m, |i, j| histogram_similarity(&hists[i], &hists[j]))
}

/// Contrastive loss over `M` set embeddings (`M × E`).
///
/// Positives of `i` share its device label, negatives carry any other label.
/// Per row: `-log(P / (P + Q))` with `P = Σ_pos exp(-h·f/τ)` and
/// `Q = Σ_neg exp(-f/τ)`, `f` the cosine similarity. Rows without
/// positives are skipped.
pub fn contrastive_from_sets(g: &Graph, emb: Var, soft: &Tensor, labels: &[usize], tau: f64) -> Result<Option<Var>> {
    let m = labels.len();
    if g.shape(emb)[0] != m || soft.shape() != [m, m] {
        return Err(Error::Shape(format!(
            "{m} labels, embeddings {:?}, soft labels {:?}",
            g.shape(emb),
            soft.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleDevice);
    }
    let pos = Tensor::from_fn(m, m, |i, j| f64::from(u8::from(i != j && labels[i] == labels[j])));
    let neg = Tensor::from_fn(m, m, |i, j| f64::from(u8::from(labels[i] != labels[j])));
    let rows: Vec<usize> = (0..m).filter(|&i| pos.row(i).iter().any(|&v| v > 0.0)).collect();
    if rows.is_empty() {
        return Ok(None);
    }

    let norms = g.sqrt(g.sum_cols(g.square(emb)));
    let unit = g.mul_col(emb, g.recip(norms))?;
    let f = g.matmul_nt(unit, unit)?;
    let hf = g.mul(f, g.constant(soft.scale(-1.0 / tau)))?;
    let p = g.sum_cols(g.mul(g.exp(hf), g.constant(pos))?);
    let q = g.sum_cols(g.mul(g.exp(g.scale(f, -1.0 / tau)), g.constant(neg))?);
    let per_row = g.sub(g.log(g.add(p, q)?), g.log(p))?;
    let per_row = if rows.len() == m { per_row } else { g.gather_rows(per_row, &rows)? };
    Ok(Some(g.mean(per_row)))
}

/// One averaged set of tokens: rows into sample `sample`'s encoded tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SetSpec {
    pub sample: usize,
    pub rows: Vec<usize>,
    pub histogram: Vec<f64>,
}

/// All sets for one (band group, land-cover task) pair across a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGroup {
    pub group_id: u32,
    pub task: crate::datagen::MapTask,
    pub sets: Vec<SetSpec>,
}

/// Random partition of `rows` into `k` near-equal sets, each with the mean of
/// its members' histograms. Needs at least `k` rows.
pub fn partition_sets(
    sample: usize,
    rows: &[usize],
    hists: &[Vec<f64>],
    k: usize,
    rng: &mut Rng64,
) -> Result<Vec<SetSpec>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 sets, got {k}")));
    }
    if rows.len() != hists.len() {
        return Err(Error::Shape(format!("{} rows, {} histograms", rows.len(), hists.len())));
    }
    if rows.len() < k {
        return Err(Error::InvalidArgument(format!("{} tokens cannot fill {k} sets", rows.len())));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let classes = hists[0].len();
    Ok((0..k)
        .map(|s| {
            let members: Vec<usize> = order.iter().copied().skip(s).step_by(k).collect();
            let mut h = vec![0.0; classes];
            for &i in &members {
                for (a, b) in h.iter_mut().zip(&hists[i]) {
                    *a += b / members.len() as f64;
                }
            }
            SetSpec { sample, rows: members.iter().map(|&i| rows[i]).collect(), histogram: h }
        })
        .collect())
}

/// Contrastive term averaged over tasks within each group, then over groups.
///
/// `encoded[b]` holds sample `b`'s encoder tokens; `labels[b]` its device.
pub fn patch_contrastive_loss(
    g: &Graph,
    encoded: &[Var],
    groups: &[ContrastiveGroup],
    labels: &[usize],
    tau: f64,
) -> Result<Option<Var>> {
    if labels.len() != encoded.len() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), encoded.len())));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleDevice);
    }
    let mut by_group: std::collections::BTreeMap<u32, Vec<Var>> = Default::default();
    for cg in groups {
        let set_labels: Vec<usize> = cg.sets.iter().map(|s| labels[s.sample]).collect();
        if set_labels.is_empty() || set_labels.iter().all(|&l| l == set_labels[0]) {
            continue;
        }
        let means = cg
            .sets
            .iter()
            .map(|s| Ok(g.mean_rows(g.gather_rows(encoded[s.sample], &s.rows)?)))
            .collect::<Result<Vec<_>>>()?;
        let emb = g.concat_rows(&means)?;
        let hists: Vec<Vec<f64>> = cg.sets.iter().map(|s| s.histogram.clone()).collect();
        if let Some(l) = contrastive_from_sets(g, emb, &soft_labels(&hists), &set_labels, tau)? {
            by_group.entry(cg.group_id).or_default().push(l);
        }
    }
    mean_of_means(g, by_group.into_values())
}

fn mean_of(g: &Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, 1.0 / vars.len() as f64))
}

fn mean_of_means(g: &Graph, groups: impl Iterator<Item = Vec<Var>>) -> Result<Option<Var>> {
    let inner = groups
        .filter(|v| !v.is_empty())
        .map(|v| mean_of(g, &v))
        .collect::<Result<Vec<_>>>()?;
    if inner.is_empty() {
        Ok(None)
    } else {
        mean_of(g, &inner).map(Some)
    }
}

/// Average of the present values (absent if none).
pub fn mean_present(g: &Graph, vars: &[Option<Var>]) -> Result<Option<Var>> {
    let present: Vec<Var> = vars.iter().flatten().copied().collect();
    if present.is_empty() {
        Ok(None)
    } else {
        mean_of(g, &present).map(Some)
    }
}

// ---------------------------------------------------------------- map prediction

/// Target patch side implied by predicting a `gsd_target` map from a token
/// of `patch_px` pixels at `gsd_token`; `None` unless it is a whole number
/// of pixels within `[4, 32]`.
pub fn map_patch_side(patch_px: usize, gsd_token: f64, gsd_target: f64) -> Option<usize> {
    let side = patch_px as f64 * gsd_token / gsd_target;
    let r = side.round();
    let ok = (side - r).abs() <= 1e-9 * side.max(1.0)
        && (MIN_TARGET_PATCH as f64..=MAX_TARGET_PATCH as f64).contains(&r);
    ok.then_some(r as usize)
}

/// Smoothed one-hot targets: `1 - ε` on the true class, `ε/(K-1)` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("{classes} classes")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::UnknownClass { index: bad, classes });
    }
    let off = eps / (classes - 1) as f64;
    Ok(Tensor::from_fn(labels.len(), classes, |i, k| if k == labels[i] { 1.0 - eps } else { off }))
}

/// Lowest reachable smoothed cross-entropy: the entropy of the target row.
pub fn smoothed_ce_floor(classes: usize, eps: f64) -> f64 {
    let off = eps / (classes - 1) as f64;
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(1.0 - eps) + (classes - 1) as f64 * h(off)
}

/// Mean label-smoothed cross-entropy of `logits` (`R × K`).
pub fn class_map_loss(g: &Graph, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let s = g.shape(logits);
    if s[0] != labels.len() {
        return Err(Error::Shape(format!("{} logit rows, {} labels", s[0], labels.len())));
    }
    let q = smoothed_targets(labels, s[1], eps)?;
    let lp = g.log_softmax_rows(logits);
    Ok(g.scale(g.sum(g.mul(lp, g.constant(q))?), -1.0 / labels.len() as f64))
}

/// Rearranges `N × C·P²` (channel-major per token) into `N·P² × C`.
pub fn channels_last(g: &Graph, pred: Var, channels: usize) -> Result<Var> {
    let s = g.shape(pred);
    let (n, p2) = (s[0], s[1] / channels);
    let idx = (0..n)
        .flat_map(|t| (0..p2).flat_map(move |k| (0..channels).map(move |c| t * channels * p2 + c * p2 + k)))
        .collect();
    g.gather(pred, idx, &[n * p2, channels])
}

pub fn mse(g: &Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let d = g.sub(pred, g.constant(target.clone()))?;
    Ok(g.mean(g.square(d)))
}

// ---------------------------------------------------------------- image level

/// Scalar targets of one sample; ERA5 already standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub era5: Vec<f64>,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub month: f64,
    /// SAR targets, present only when a SAR group is in the sample.
    pub sar: Option<(f64, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageLosses {
    pub era5: Var,
    pub month: Var,
    pub coords: Var,
    pub incidence: Option<Var>,
    pub orbit: Option<Var>,
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("row")
}

pub fn image_level_losses(g: &Graph, preds: &ImagePreds, t: &ImageTargets) -> Result<ImageLosses> {
    let cols = |r: std::ops::Range<usize>| g.slice_cols(preds.all, r.start, r.len());
    let era5 = mse(g, cols(ERA5_RANGE)?, &row(&t.era5))?;
    let month = mse(g, cols(MONTH_RANGE)?, &cyclic_encoding(&row(&[t.month]), 12.0)?)?;
    let coords_pred = g.concat_cols(&[cols(LAT_COL..LAT_COL + 1)?, cols(LON_RANGE)?])?;
    let lon = cyclic_encoding(&row(&[t.lon_deg]), 360.0)?;
    let coords = mse(g, coords_pred, &row(&[t.lat_deg / 90.0, lon.at(0, 0), lon.at(0, 1)]))?;
    let (incidence, orbit) = match t.sar {
        None => (None, None),
        Some((inc, orb)) => {
            let i = mse(g, cols(INCIDENCE_COL..INCIDENCE_COL + 1)?, &row(&[inc / 90.0]))?;
            let o = class_map_loss(g, cols(ORBIT_RANGE)?, &[orb], 0.0)?;
            (Some(i), Some(o))
        }
    };
    Ok(ImageLosses { era5, month, coords, incidence, orbit })
}

// ---------------------------------------------------------------- fourier

/// Gathers `N × C·P²` patch predictions into a `rows·P × cols·P × C` mosaic.
pub fn assemble_mosaic(g: &Graph, pred: Var, rows: usize, cols: usize, p: usize, channels: usize) -> Result<Var> {
    let (h, w) = (rows * p, cols * p);
    let mut idx = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        for x in 0..w {
            let t = (y / p) * cols + x / p;
            let k = (y % p) * p + x % p;
            for c in 0..channels {
                idx.push(t * channels * p * p + c * p * p + k);
            }
        }
    }
    g.gather(pred, idx, &[h, w, channels])
}

/// Mean absolute difference of per-channel DFT magnitudes.
pub fn fft_loss(g: &Graph, pred_mosaic: Var, target: &Tensor) -> Result<Var> {
    let s = target.shape();
    if g.shape(pred_mosaic) != s || s.len() != 3 {
        return Err(Error::Shape(format!("mosaic {:?} vs target {s:?}", g.shape(pred_mosaic))));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut mag = vec![0.0; target.len()];
    for ch in 0..c {
        let plane = crate::numerics::dft::channel_plane(target, ch);
        for (k, m) in dft2(&plane, h, w).magnitude().into_iter().enumerate() {
            mag[k * c + ch] = m;
        }
    }
    let target_mag = Tensor::new(s.to_vec(), mag)?;
    let d = g.sub(g.dft2_magnitude(pred_mosaic)?, g.constant(target_mag))?;
    Ok(g.mean(g.abs(d)))
}
