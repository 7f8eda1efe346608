//! Ground-cover and patch-size sampling under a token budget, MAE mask
//! sampling, and virtual device labels for the contrastive loss.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{pixels_for, BandGroup};

/// Seedable generator used by every stochastic operation in the crate.
pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetConfig {
    pub max_tokens: usize,
    pub patch_min: usize,
    pub patch_max: usize,
    pub ground_cover_min_m: f64,
    pub ground_cover_max_m: f64,
    pub grid_min: usize,
    pub grid_max: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_tokens: 1296,
            patch_min: 4,
            patch_max: 32,
            ground_cover_min_m: 960.0,
            ground_cover_max_m: 46080.0,
            grid_min: 2,
            grid_max: 32,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_tokens > 0
            && self.patch_min > 0
            && self.patch_min <= self.patch_max
            && self.ground_cover_min_m > 0.0
            && self.ground_cover_min_m <= self.ground_cover_max_m
            && self.grid_min > 0
            && self.grid_min <= self.grid_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent budget bounds: {self:?}")))
        }
    }
}

/// Patch geometry allotted to one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPatch {
    pub group_id: u32,
    pub gsd_m: f64,
    pub h: usize,
    pub w: usize,
    pub patch_px: usize,
    pub token_count: usize,
}

impl GroupPatch {
    pub fn grid_rows(&self) -> usize {
        self.h.div_ceil(self.patch_px)
    }

    pub fn grid_cols(&self) -> usize {
        self.w.div_ceil(self.patch_px)
    }
}

/// Groups that received budget, in allocation order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub ground_cover_m: f64,
    pub groups: Vec<GroupPatch>,
    pub total_tokens: usize,
}

impl PatchPlan {
    pub fn get(&self, group_id: u32) -> Option<&GroupPatch> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }
}

/// Token-budget heuristic: visit groups in random order and give each the
/// finest patch size the remaining budget allows.
pub fn sample_patch_parameters(
    groups: &[BandGroup],
    ground_cover_m: f64,
    cfg: &BudgetConfig,
    rng: &mut Rng64,
) -> Result<PatchPlan> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no band groups to allocate".into()));
    }
    cfg.validate()?;
    if !(cfg.ground_cover_min_m..=cfg.ground_cover_max_m).contains(&ground_cover_m) {
        return Err(Error::InvalidArgument(format!(
            "ground cover {ground_cover_m} m outside [{}, {}]",
            cfg.ground_cover_min_m, cfg.ground_cover_max_m
        )));
    }
    let mut order: Vec<&BandGroup> = groups.iter().collect();
    order.shuffle(rng);

    let mut used = 0usize;
    let mut out = Vec::new();
    for g in order {
        let h = pixels_for(ground_cover_m, g.gsd_m);
        let w = h;
        let Some(remain) = cfg.max_tokens.checked_sub(used).filter(|&r| r > 0) else {
            break;
        };
        if h == 0 {
            continue;
        }
        let side_min = cfg.grid_min.max(h / cfg.patch_max);
        let side_max = cfg.grid_max.min(h.div_ceil(cfg.patch_min));
        let (t_min, t_max) = (side_min * side_min, side_max * side_max);
        // Too little budget, or the image is too small for the minimum grid.
        if t_min > remain || t_max < t_min {
            continue;
        }
        let t_target = t_max.min(remain);
        let g_target = (t_target as f64).sqrt();
        let p = ((h as f64 / g_target).floor() as usize).clamp(cfg.patch_min, cfg.patch_max);
        let tokens = h.div_ceil(p) * w.div_ceil(p);
        if used + tokens > cfg.max_tokens {
            continue;
        }
        used += tokens;
        out.push(GroupPatch {
            group_id: g.id,
            gsd_m: g.gsd_m,
            h,
            w,
            patch_px: p,
            token_count: tokens,
        });
    }
    Ok(PatchPlan {
        ground_cover_m,
        groups: out,
        total_tokens: used,
    })
}

pub fn sample_ground_cover(cfg: &BudgetConfig, rng: &mut Rng64) -> f64 {
    if cfg.ground_cover_min_m == cfg.ground_cover_max_m {
        return cfg.ground_cover_min_m;
    }
    rng.random_range(cfg.ground_cover_min_m..=cfg.ground_cover_max_m)
}

/// Per-group token masks; `true` marks a masked (hidden) token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    pub masks: Vec<Vec<bool>>,
}

impl MaskPlan {
    pub fn masked_count(&self, group: usize) -> usize {
        self.masks[group].iter().filter(|&&m| m).count()
    }

    /// Everything visible.
    pub fn none(plan: &PatchPlan) -> Self {
        Self {
            ratio: 0.0,
            masks: plan.groups.iter().map(|g| vec![false; g.token_count]).collect(),
        }
    }
}

pub fn sample_mask(plan: &PatchPlan, ratio: f64, rng: &mut Rng64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let masks = plan
        .groups
        .iter()
        .map(|g| {
            let n = g.token_count;
            let k = ((ratio * n as f64).round() as usize).min(n);
            let mut m = vec![false; n];
            for i in index::sample(rng, n, k) {
                m[i] = true;
            }
            m
        })
        .collect();
    Ok(MaskPlan { ratio, masks })
}

/// Contiguous, equal partition of batch indices into device labels.
pub fn assign_virtual_devices(batch_size: usize, n_devices: usize) -> Result<Vec<usize>> {
    if n_devices == 0 || n_devices > batch_size {
        return Err(Error::InvalidArgument(format!(
            "cannot spread {batch_size} samples over {n_devices} devices"
        )));
    }
    Ok((0..batch_size).map(|i| i * n_devices / batch_size).collect())
}
