//! Encoder/decoder with per-band patch projections.
//!
//! Token order is fixed throughout: groups in [`PatchPlan`] order, tokens
//! row-major within each group. Projection weights live at a canonical patch
//! size and are resized on the fly for every other size.

pub mod config;
pub mod layers;
pub mod params;

use crate::datagen::MapTask;
use crate::error::{Error, Result};
use crate::geometry::{FootprintSample, TokenGrid};
use crate::numerics::{Graph, ResizePlan, Tensor, Var};
use crate::posenc::{build_alibi_bias_cached, gsd_sinusoidal, AlibiBias};
use crate::sampler::{MaskPlan, PatchPlan};

pub use config::ModelConfig;
pub use params::{Bound, ParamStore};

use layers::{block, linear, norm};
use params::{embed_bias_name, embed_weight_name};

/// Layout of the image-level head output row.
pub const ERA5_RANGE: std::ops::Range<usize> = 0..17;
pub const LAT_COL: usize = 17;
pub const LON_RANGE: std::ops::Range<usize> = 18..20;
pub const MONTH_RANGE: std::ops::Range<usize> = 20..22;
pub const INCIDENCE_COL: usize = 22;
pub const ORBIT_RANGE: std::ops::Range<usize> = 23..25;
pub const IMAGE_OUTPUTS: usize = 25;

/// Dense targets predicted from decoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadTarget {
    Class(MapTask),
    /// Elevation and slope.
    Dem,
}

impl HeadTarget {
    pub const ALL: [HeadTarget; 5] = [
        HeadTarget::Class(MapTask::WorldCover),
        HeadTarget::Class(MapTask::Scl),
        HeadTarget::Class(MapTask::GlobCover),
        HeadTarget::Class(MapTask::Mcd),
        HeadTarget::Dem,
    ];

    pub fn channels(self) -> usize {
        match self {
            HeadTarget::Class(t) => t.n_classes(),
            HeadTarget::Dem => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadTarget::Class(t) => t.name(),
            HeadTarget::Dem => "dem",
        }
    }

    pub fn param_prefix(self) -> String {
        format!("map.{}", self.name())
    }
}

/// Where a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenRef {
    pub group_id: u32,
    /// Row-major index within the group grid.
    pub index: usize,
    /// Number of band tokens averaged into this one.
    pub bands: usize,
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `N × dim`
    pub tokens: Var,
    pub provenance: Vec<TokenRef>,
    pub masked: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn with_mask(mut self, mask: &MaskPlan) -> Result<Self> {
        let flat: Vec<bool> = mask.masks.iter().flatten().copied().collect();
        if flat.len() != self.len() {
            return Err(Error::Shape(format!("mask covers {} tokens, sequence has {}", flat.len(), self.len())));
        }
        self.masked = flat;
        Ok(self)
    }
}

pub fn token_grids(plan: &PatchPlan) -> Result<Vec<TokenGrid>> {
    plan.groups
        .iter()
        .map(|g| TokenGrid::new(g.group_id, g.patch_px, g.grid_rows(), g.grid_cols(), g.gsd_m))
        .collect()
}

/// `rows·cols × p²` matrix of patches read through `f(y, x)`, clamping
/// coordinates to `h × w` (edge replication past the border).
pub fn patch_matrix(rows: usize, cols: usize, p: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(rows * cols, p * p, |t, k| {
        let (r, c) = (t / cols, t % cols);
        let y = (r * p + k / p).min(h - 1);
        let x = (c * p + k % p).min(w - 1);
        f(y, x)
    })
}

/// One `N × p²` patch matrix per channel of an `H × W × C` image.
pub fn patchify(image: &Tensor, p: usize) -> Result<Vec<Tensor>> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Shape(format!("expected H x W x C image, got {:?}", image.shape())));
    };
    if p == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("cannot patchify {h}x{w} at {p}")));
    }
    let (rows, cols) = (h.div_ceil(p), w.div_ceil(p));
    let d = image.data();
    Ok((0..c)
        .map(|ch| patch_matrix(rows, cols, p, h, w, |y, x| d[(y * w + x) * c + ch]))
        .collect())
}

/// Band-wise projection at each group's patch size, averaged per group.
pub fn embed_bands(
    g: &Graph,
    p: &Bound,
    cfg: &ModelConfig,
    sample: &FootprintSample,
    plan: &PatchPlan,
) -> Result<TokenSequence> {
    let mut parts = Vec::with_capacity(plan.groups.len());
    let mut provenance = Vec::with_capacity(plan.total_tokens);
    for gp in &plan.groups {
        let img = sample
            .group(gp.group_id)
            .ok_or_else(|| Error::InvalidArgument(format!("sample lacks group {}", gp.group_id)))?;
        let s = img.image.shape();
        if s[0] != gp.h || s[1] != gp.w {
            return Err(Error::Shape(format!(
                "group {} planned at {}x{}, image is {:?}",
                gp.group_id, gp.h, gp.w, s
            )));
        }
        let patches = patchify(&img.image, gp.patch_px)?;
        let rplan = ResizePlan::cached(cfg.canonical_patch, gp.patch_px)?;
        let pinv_t = (!rplan.is_identity()).then(|| rplan.b_pinv.transpose());
        let mut xs = Vec::with_capacity(patches.len());
        let mut ws = Vec::with_capacity(patches.len());
        for (b, x) in patches.into_iter().enumerate() {
            let x = match &pinv_t {
                Some(pt) => x.matmul(pt)?,
                None => x,
            };
            xs.push(g.constant(x));
            ws.push(p.get(&embed_weight_name(gp.group_id, b))?);
        }
        let (x, w) = if xs.len() == 1 { (xs[0], ws[0]) } else { (g.concat_cols(&xs)?, g.concat_cols(&ws)?) };
        let acc = g.matmul_nt(x, w)?;
        let bands = s[2];
        let pooled = g.scale(acc, 1.0 / bands as f64);
        parts.push(g.add_row(pooled, p.get(&embed_bias_name(gp.group_id))?)?);
        provenance.extend((0..gp.token_count).map(|index| TokenRef { group_id: gp.group_id, index, bands }));
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("patch plan allocates no tokens".into()));
    }
    let tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let masked = vec![false; provenance.len()];
    Ok(TokenSequence { tokens, provenance, masked })
}

/// Encoder over the visible tokens of `seq`; `bias` spans all of `seq`.
pub fn encode(g: &Graph, p: &Bound, cfg: &ModelConfig, seq: &TokenSequence, bias: &AlibiBias) -> Result<TokenSequence> {
    if bias.n_tokens() != seq.len() || bias.n_heads() != cfg.heads {
        return Err(Error::Shape(format!(
            "bias is {} tokens x {} heads, sequence {} tokens x {} heads",
            bias.n_tokens(),
            bias.n_heads(),
            seq.len(),
            cfg.heads
        )));
    }
    let visible = seq.visible_indices();
    if visible.is_empty() {
        return Err(Error::InvalidArgument("every token is masked".into()));
    }
    let all_visible = visible.len() == seq.len();
    let mut x = if all_visible { seq.tokens } else { g.gather_rows(seq.tokens, &visible)? };
    if cfg.layers > 0 {
        let sub = if all_visible { None } else { Some(bias.select(&visible)) };
        let b = sub.as_ref().unwrap_or(bias);
        let heads: Vec<Var> = (0..cfg.heads).map(|h| g.constant(b.head(h))).collect();
        for l in 0..cfg.layers {
            x = block(g, p, &format!("enc.{l}"), x, cfg.heads, Some(&heads))?;
        }
        x = norm(g, p, "enc.norm", x)?;
    }
    Ok(TokenSequence {
        tokens: x,
        provenance: visible.iter().map(|&i| seq.provenance[i]).collect(),
        masked: vec![false; visible.len()],
    })
}

/// Convenience: bias for `plan` with the configured head count.
pub fn plan_bias(cfg: &ModelConfig, plan: &PatchPlan) -> Result<std::sync::Arc<AlibiBias>> {
    build_alibi_bias_cached(&token_grids(plan)?, cfg.heads)
}

/// Fixed decoder positional encoding for all tokens of `grids`.
pub fn decoder_positions(cfg: &ModelConfig, grids: &[TokenGrid]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for grid in grids {
        let pe = gsd_sinusoidal(grid, grid.gsd_m, cfg.decoder_dim / 2)?;
        n += pe.rows();
        data.extend_from_slice(pe.data());
    }
    Tensor::new(vec![n, cfg.decoder_dim], data)
}

/// Decoder embeddings `z` for every token (`N_total × decoder_dim`).
///
/// `masked` flags all tokens in sequence order; `encoded` holds the visible
/// ones in the same order. Masked slots get the shared mask token.
pub fn decode(
    g: &Graph,
    p: &Bound,
    cfg: &ModelConfig,
    encoded: &TokenSequence,
    masked: &[bool],
    positions: &Tensor,
) -> Result<Var> {
    let n_vis = masked.iter().filter(|&&m| !m).count();
    if n_vis != encoded.len() || positions.rows() != masked.len() {
        return Err(Error::Shape(format!(
            "{} encoded tokens, {} visible flags, {} positions",
            encoded.len(),
            n_vis,
            positions.rows()
        )));
    }
    let vis = linear(g, p, "dec.embed", encoded.tokens)?;
    let x = if n_vis == masked.len() {
        vis
    } else {
        let pool = g.concat_rows(&[vis, p.get("dec.mask_token")?])?;
        let mut next = 0;
        let idx: Vec<usize> = masked
            .iter()
            .map(|&m| {
                if m {
                    n_vis
                } else {
                    next += 1;
                    next - 1
                }
            })
            .collect();
        g.gather_rows(pool, &idx)?
    };
    let mut x = g.add(x, g.constant(positions.clone()))?;
    for l in 0..cfg.decoder_layers {
        x = block(g, p, &format!("dec.{l}"), x, cfg.decoder_heads, None)?;
    }
    norm(g, p, "dec.norm", x)
}

/// Transposed patch projection of `z` (`N × D`) with `channels` stacked heads.
///
/// `v` is `channels·D × Pc²` and `b` is `channels × Pc²`; both are resized
/// with `Bᵀ` for `plan` (canonical → target). Returns `N × channels·Pt²`,
/// channel-major within each row.
pub fn project_patches(g: &Graph, z: Var, v: Var, b: Var, channels: usize, plan: &ResizePlan) -> Result<Var> {
    let d = g.shape(z)[1];
    let vs = g.shape(v);
    if vs != [channels * d, plan.p_src * plan.p_src] {
        return Err(Error::Shape(format!(
            "head weights {vs:?} do not match {channels} channels x {d} dims at patch {}",
            plan.p_src
        )));
    }
    let (v, b) = if plan.is_identity() {
        (v, b)
    } else {
        let bt = g.constant(plan.b.transpose());
        (g.matmul(v, bt)?, g.matmul(b, bt)?)
    };
    let pt2 = plan.p_dst * plan.p_dst;
    // (c·D + d, p) → (d, c·Pt² + p)
    let idx: Vec<usize> = (0..d)
        .flat_map(|di| (0..channels).flat_map(move |c| (0..pt2).map(move |k| (c * d + di) * pt2 + k)))
        .collect();
    let w = g.gather(v, idx, &[d, channels * pt2])?;
    let b = g.reshape(b, &[1, channels * pt2])?;
    g.add_row(g.matmul(z, w)?, b)
}

/// Image-level predictions from mean-pooled encoder tokens.
#[derive(Debug, Clone, Copy)]
pub struct ImagePreds {
    /// `1 × IMAGE_OUTPUTS`, laid out per the `*_RANGE`/`*_COL` constants.
    pub all: Var,
}

pub fn image_heads(g: &Graph, p: &Bound, encoded: &TokenSequence) -> Result<ImagePreds> {
    let pooled = g.mean_rows(encoded.tokens);
    Ok(ImagePreds { all: linear(g, p, "img", pooled)? })
}

#[cfg(test)]
mod tests;
