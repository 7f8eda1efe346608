//! Turning synthetic tiles into model inputs and pretext targets.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::datagen::{dem_key, era5_key, generate_tile, min_normalized, MapTask, SyntheticTile, TargetStats, DEM_GSDS};
use crate::error::{Error, Result};
use crate::geometry::{multilook, pixels_for, BandGroup, BandRegistry, FootprintSample, GroupImage, SensorKind, MULTILOOK_LADDER};
use crate::losses::{map_patch_side, partition_sets, ContrastiveGroup, ImageTargets};
use crate::model::{decoder_positions, patchify, token_grids, HeadTarget, ModelConfig};
use crate::numerics::Tensor;
use crate::posenc::{build_alibi_bias_cached, AlibiBias};
use crate::sampler::{assign_virtual_devices, sample_ground_cover, sample_mask, sample_patch_parameters, BudgetConfig, MaskPlan, PatchPlan, Rng64};

/// Which dense targets a band group may predict (before the patch-size rule).
pub fn task_viable(group_id: u32, target: HeadTarget) -> bool {
    match target {
        HeadTarget::Class(MapTask::WorldCover | MapTask::Scl) | HeadTarget::Dem => (1..=5).contains(&group_id),
        HeadTarget::Class(MapTask::GlobCover) => (6..=8).contains(&group_id),
        HeadTarget::Class(MapTask::Mcd) => (9..=10).contains(&group_id),
    }
}

#[derive(Debug, Clone)]
pub struct MapTarget {
    pub target: HeadTarget,
    /// Target pixels per token side.
    pub side: usize,
    /// Class maps: `N·side²` labels, token-major.
    pub labels: Vec<usize>,
    /// DEM: `N × 2·side²`, elevation pixels then slope pixels.
    pub values: Option<Tensor>,
    /// Class maps: per-token class histogram (fractions).
    pub histograms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GroupTargets {
    pub channels: usize,
    /// Masked token indices within the group.
    pub masked: Vec<usize>,
    /// `masked·C × P²`, rows ordered token then channel.
    pub recon: Tensor,
    /// Edge-padded image, `rows·P × cols·P × C`.
    pub mosaic: Tensor,
    pub maps: Vec<MapTarget>,
}

#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub footprint: FootprintSample,
    pub plan: PatchPlan,
    pub mask: MaskPlan,
    pub alibi: Arc<AlibiBias>,
    pub positions: Tensor,
    /// Aligned with `plan.groups`.
    pub groups: Vec<GroupTargets>,
    pub image: ImageTargets,
}

impl PreparedSample {
    pub fn masked_flags(&self) -> Vec<bool> {
        self.mask.masks.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<PreparedSample>,
    pub labels: Vec<usize>,
    pub contrastive: Vec<ContrastiveGroup>,
}

/// Sampling knobs needed to prepare data.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub budget: BudgetConfig,
    pub mask_ratio: f64,
    pub sets: usize,
}

/// Random multi-look GSD for a SAR group: any ladder step at or above its
/// native GSD that still yields at least one pixel.
fn sar_gsd(native: f64, cover: f64, rng: &mut Rng64) -> f64 {
    let options: Vec<f64> = MULTILOOK_LADDER
        .iter()
        .copied()
        .filter(|&g| g >= native && pixels_for(cover, g) >= 1)
        .collect();
    if options.is_empty() {
        native
    } else {
        options[rng.random_range(0..options.len())]
    }
}

/// Group images for `tile`, with SAR groups multi-looked at random.
pub fn sample_group_images(tile: &SyntheticTile, registry: &BandRegistry, rng: &mut Rng64) -> Result<(Vec<BandGroup>, Vec<GroupImage>)> {
    let mut groups = Vec::new();
    let mut images = Vec::new();
    for g in registry.groups() {
        let Some(img) = tile.group(g.id) else { continue };
        if img.image.shape()[2] != g.n_bands() {
            return Err(Error::Shape(format!(
                "group {} has {} bands in the registry, {} in the tile",
                g.id,
                g.n_bands(),
                img.image.shape()[2]
            )));
        }
        let (gsd, image) = if g.kind == SensorKind::Sar {
            let gsd = sar_gsd(img.gsd_m, tile.footprint_m, rng);
            let image = if gsd == img.gsd_m { img.image.clone() } else { multilook(&img.image, img.gsd_m, gsd)? };
            (gsd, image)
        } else {
            (img.gsd_m, img.image.clone())
        };
        let mut bg = g.clone();
        bg.gsd_m = gsd;
        groups.push(bg);
        images.push(GroupImage { group_id: g.id, gsd_m: gsd, image });
    }
    Ok((groups, images))
}

fn token_block<T>(n_rows: usize, cols: usize, side: usize, map_side: usize, f: impl Fn(usize, usize) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(n_rows * cols * side * side);
    for t in 0..n_rows * cols {
        let (r, c) = (t / cols, t % cols);
        for k in 0..side * side {
            let y = (r * side + k / side).min(map_side - 1);
            let x = (c * side + k % side).min(map_side - 1);
            out.push(f(y, x));
        }
    }
    out
}

fn class_target(tile: &SyntheticTile, task: MapTask, rows: usize, cols: usize, side: usize) -> Option<MapTarget> {
    let map = tile.map(task)?;
    let labels = token_block(rows, cols, side, map.side, |y, x| map.at(y, x));
    let k = task.n_classes();
    let per = side * side;
    let histograms = labels
        .chunks(per)
        .map(|px| {
            let mut h = vec![0.0; k];
            for &l in px {
                h[l] += 1.0 / per as f64;
            }
            h
        })
        .collect();
    Some(MapTarget { target: HeadTarget::Class(task), side, labels, values: None, histograms })
}

fn dem_target(tile: &SyntheticTile, stats: &TargetStats, patch: usize, gsd: f64, rows: usize, cols: usize) -> Option<MapTarget> {
    let (dem_gsd, side) = DEM_GSDS
        .iter()
        .find_map(|&dg| map_patch_side(patch, gsd, dg).map(|s| (dg, s)))?;
    let dem = tile.dem(dem_gsd)?;
    let n = dem.elevation.rows();
    let elev = min_normalized(&dem.elevation);
    let (ek, sk) = (dem_key(dem_gsd, "elevation"), dem_key(dem_gsd, "slope"));
    let e = token_block(rows, cols, side, n, |y, x| stats.standardize(&ek, elev.at(y, x)));
    let s = token_block(rows, cols, side, n, |y, x| stats.standardize(&sk, dem.slope.at(y, x)));
    let per = side * side;
    let values = Tensor::from_fn(rows * cols, 2 * per, |t, j| {
        if j < per {
            e[t * per + j]
        } else {
            s[t * per + j - per]
        }
    });
    Some(MapTarget { target: HeadTarget::Dem, side, labels: Vec::new(), values: Some(values), histograms: Vec::new() })
}

pub fn image_targets(tile: &SyntheticTile, stats: &TargetStats, has_sar: bool) -> ImageTargets {
    let s = &tile.scalars;
    ImageTargets {
        era5: s.era5.iter().enumerate().map(|(i, &v)| stats.standardize(&era5_key(i), v)).collect(),
        lat_deg: s.lat_deg,
        lon_deg: s.lon_deg,
        month: s.month,
        sar: has_sar.then_some((s.incidence_deg, s.orbit)),
    }
}

/// Builds every target for a fixed plan and mask.
pub fn prepare_with_plan(
    tile: &SyntheticTile,
    registry: &BandRegistry,
    images: Vec<GroupImage>,
    plan: PatchPlan,
    mask: MaskPlan,
    model: &ModelConfig,
    stats: &TargetStats,
) -> Result<PreparedSample> {
    let footprint = FootprintSample::new(tile.footprint_m, images)?;
    let grids = token_grids(&plan)?;
    let alibi = build_alibi_bias_cached(&grids, model.heads)?;
    let positions = decoder_positions(model, &grids)?;
    let mut groups = Vec::with_capacity(plan.groups.len());
    for (gi, gp) in plan.groups.iter().enumerate() {
        let img = &footprint
            .group(gp.group_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no image for group {}", gp.group_id)))?
            .image;
        let c = img.shape()[2];
        let p = gp.patch_px;
        let patches = patchify(img, p)?;
        let masked: Vec<usize> = (0..gp.token_count).filter(|&t| mask.masks[gi][t]).collect();
        let recon = Tensor::from_fn(masked.len() * c, p * p, |r, k| patches[r % c].at(masked[r / c], k));
        let (rows, cols) = (gp.grid_rows(), gp.grid_cols());
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let d = img.data();
        let mosaic_data: Vec<f64> = (0..rows * p)
            .flat_map(|y| (0..cols * p).flat_map(move |x| (0..c).map(move |ch| (y.min(h - 1), x.min(w - 1), ch))))
            .map(|(y, x, ch)| d[(y * w + x) * c + ch])
            .collect();
        let mosaic = Tensor::new(vec![rows * p, cols * p, c], mosaic_data)?;
        let mut maps = Vec::new();
        for target in HeadTarget::ALL {
            if !task_viable(gp.group_id, target) {
                continue;
            }
            let m = match target {
                HeadTarget::Class(task) => map_patch_side(p, gp.gsd_m, task.gsd_m())
                    .and_then(|side| class_target(tile, task, rows, cols, side)),
                HeadTarget::Dem => dem_target(tile, stats, p, gp.gsd_m, rows, cols),
            };
            maps.extend(m);
        }
        groups.push(GroupTargets { channels: c, masked, recon, mosaic, maps });
    }
    let has_sar = plan
        .groups
        .iter()
        .any(|gp| registry.get(gp.group_id).is_some_and(|g| g.kind == SensorKind::Sar));
    let image = image_targets(tile, stats, has_sar);
    Ok(PreparedSample { footprint, plan, mask, alibi, positions, groups, image })
}

/// Random plan and mask for `tile`; `None` when the budget allots nothing.
pub fn prepare_sample(
    tile: &SyntheticTile,
    registry: &BandRegistry,
    data: &DataConfig,
    model: &ModelConfig,
    stats: &TargetStats,
    rng: &mut Rng64,
) -> Result<Option<PreparedSample>> {
    let (groups, images) = sample_group_images(tile, registry, rng)?;
    if groups.is_empty() {
        return Ok(None);
    }
    let plan = sample_patch_parameters(&groups, tile.footprint_m, &data.budget, rng)?;
    if plan.groups.is_empty() {
        return Ok(None);
    }
    let mut mask = sample_mask(&plan, data.mask_ratio, rng)?;
    if mask.masks.iter().flatten().all(|&m| m) {
        mask.masks[0][0] = false;
    }
    prepare_with_plan(tile, registry, images, plan, mask, model, stats).map(Some)
}

/// Groups prepared samples into a batch with device labels and contrastive sets.
pub fn assemble_batch(samples: Vec<PreparedSample>, devices: usize, sets: usize, rng: &mut Rng64) -> Result<Batch> {
    let labels = assign_virtual_devices(samples.len(), devices)?;
    let mut by_key: BTreeMap<(u32, MapTask), ContrastiveGroup> = BTreeMap::new();
    for (b, s) in samples.iter().enumerate() {
        let flags = s.masked_flags();
        // Row of each global token among the visible ones.
        let mut vis_row = vec![usize::MAX; flags.len()];
        let mut next = 0;
        for (i, &m) in flags.iter().enumerate() {
            if !m {
                vis_row[i] = next;
                next += 1;
            }
        }
        let mut offset = 0;
        for (gp, gt) in s.plan.groups.iter().zip(&s.groups) {
            let visible: Vec<usize> = (0..gp.token_count).filter(|&t| !flags[offset + t]).collect();
            for m in &gt.maps {
                let HeadTarget::Class(task) = m.target else { continue };
                if visible.len() < sets {
                    continue;
                }
                let rows: Vec<usize> = visible.iter().map(|&t| vis_row[offset + t]).collect();
                let hists: Vec<Vec<f64>> = visible.iter().map(|&t| m.histograms[t].clone()).collect();
                let parts = partition_sets(b, &rows, &hists, sets, rng)?;
                by_key
                    .entry((gp.group_id, task))
                    .or_insert_with(|| ContrastiveGroup { group_id: gp.group_id, task, sets: Vec::new() })
                    .sets
                    .extend(parts);
            }
            offset += gp.token_count;
        }
    }
    Ok(Batch { samples, labels, contrastive: by_key.into_values().collect() })
}

/// Draws a fresh batch of random tiles.
pub fn sample_batch(
    batch_size: usize,
    devices: usize,
    registry: &BandRegistry,
    data: &DataConfig,
    model: &ModelConfig,
    stats: &TargetStats,
    rng: &mut Rng64,
) -> Result<Batch> {
    let mut samples = Vec::with_capacity(batch_size);
    let mut attempts = 0;
    while samples.len() < batch_size {
        attempts += 1;
        if attempts > 100 * batch_size {
            return Err(Error::Config("budget never allots any tokens; check the budget and registry".into()));
        }
        let cover = sample_ground_cover(&data.budget, rng);
        let tile = generate_tile(rng.random(), cover)?;
        if let Some(s) = prepare_sample(&tile, registry, data, model, stats, rng)? {
            samples.push(s);
        }
    }
    assemble_batch(samples, devices, data.sets, rng)
}

/// Target statistics from `n` seeded tiles drawn over the budget's covers.
pub fn reference_stats(n: usize, budget: &BudgetConfig, rng: &mut Rng64) -> Result<TargetStats> {
    let tiles = (0..n)
        .map(|_| {
            let cover = sample_ground_cover(budget, rng);
            generate_tile(rng.random(), cover)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::datagen::standardization_stats(&tiles))
}
