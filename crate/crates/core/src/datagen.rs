//! Deterministic synthetic multi-sensor tiles.
//!
//! Everything derives from a handful of smooth latent fields sampled on a
//! 10 m base grid. Band images are fixed linear mixes of the latents,
//! block-averaged to each group's GSD, so every coarse image is an exact
//! block mean of the fine field. Class maps threshold (block-averaged)
//! latents and the DEM is one more latent scaled to meters.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{block_mean, default_band_registry, pixels_for, BandGroup, GroupImage};
use crate::io::{read_container, write_container, Array, Record};
use crate::numerics::Tensor;
use crate::sampler::seeded;

pub const BASE_GSD_M: f64 = 10.0;
pub const N_LATENTS: usize = 4;
const WAVES_PER_LATENT: usize = 5;
pub const N_ERA5: usize = 17;

const TILE_MAGIC: &[u8; 4] = b"FXTL";
const TILE_VERSION: u32 = 1;

/// Land-cover style class maps carried by every tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapTask {
    WorldCover,
    Scl,
    GlobCover,
    Mcd,
}

impl MapTask {
    pub const ALL: [MapTask; 4] = [MapTask::WorldCover, MapTask::Scl, MapTask::GlobCover, MapTask::Mcd];

    pub fn gsd_m(self) -> f64 {
        match self {
            MapTask::WorldCover => 10.0,
            MapTask::Scl => 20.0,
            MapTask::GlobCover => 300.0,
            MapTask::Mcd => 500.0,
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            MapTask::WorldCover => 11,
            MapTask::Scl => 12,
            MapTask::GlobCover => 22,
            MapTask::Mcd => 17,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapTask::WorldCover => "wc",
            MapTask::Scl => "scl",
            MapTask::GlobCover => "gc",
            MapTask::Mcd => "mcd",
        }
    }

    fn latent(self) -> usize {
        match self {
            MapTask::WorldCover => 0,
            MapTask::Scl => 1,
            MapTask::GlobCover => 0,
            MapTask::Mcd => 2,
        }
    }
}

/// DEM resolutions available to the elevation/slope task.
pub const DEM_GSDS: [f64; 2] = [10.0, 60.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub task: MapTask,
    pub side: usize,
    pub labels: Vec<u16>,
}

impl ClassMap {
    pub fn at(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.side + x] as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemMap {
    pub gsd_m: f64,
    /// meters, `side × side`
    pub elevation: Tensor,
    /// rise over run, `side × side`
    pub slope: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarTargets {
    pub era5: Vec<f64>,
    pub lat_deg: f64,
    pub lon_deg: f64,
    /// 0-based month index
    pub month: f64,
    pub incidence_deg: f64,
    /// 0 ascending, 1 descending
    pub orbit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTile {
    pub seed: u64,
    pub footprint_m: f64,
    /// `n × n × N_LATENTS` at [`BASE_GSD_M`]
    pub latent: Tensor,
    pub groups: Vec<GroupImage>,
    pub maps: Vec<ClassMap>,
    pub dems: Vec<DemMap>,
    pub scalars: ScalarTargets,
}

impl SyntheticTile {
    pub fn group(&self, id: u32) -> Option<&GroupImage> {
        self.groups.iter().find(|g| g.group_id == id)
    }

    pub fn map(&self, task: MapTask) -> Option<&ClassMap> {
        self.maps.iter().find(|m| m.task == task)
    }

    pub fn dem(&self, gsd_m: f64) -> Option<&DemMap> {
        self.dems.iter().find(|d| d.gsd_m == gsd_m)
    }

    pub fn base_side(&self) -> usize {
        self.latent.shape()[0]
    }
}

/// Per-band mixing weights: `(offset, weights over latents)`. Fixed for the
/// whole corpus so that bands are comparable across tiles.
pub fn band_mix(group_id: u32, band: usize) -> (f64, [f64; N_LATENTS]) {
    let mut rng = seeded(0x5eed_0000 ^ ((group_id as u64) << 8) ^ band as u64);
    let offset = rng.random_range(0.2..0.6);
    let mut w = [0.0; N_LATENTS];
    for v in w.iter_mut() {
        *v = rng.random_range(-0.15..0.15);
    }
    (offset, w)
}

fn era5_mix(var: usize) -> (f64, [f64; N_LATENTS]) {
    let mut rng = seeded(0xe5a5_0000 ^ var as u64);
    let b = rng.random_range(-1.0..1.0);
    let mut w = [0.0; N_LATENTS];
    for v in w.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    (b, w)
}

/// Latent fields at the 10 m base grid, `n × n × N_LATENTS`.
fn latent_fields(seed: u64, n: usize) -> Tensor {
    let mut rng = seeded(seed);
    // (kx, ky, phase, amplitude) per wave, wavelengths 300 m .. 6 km
    let waves: Vec<Vec<(f64, f64, f64, f64)>> = (0..N_LATENTS)
        .map(|_| {
            (0..WAVES_PER_LATENT)
                .map(|_| {
                    let lambda = rng.random_range(300.0..6000.0);
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let k = 2.0 * PI / lambda;
                    (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
                })
                .collect()
        })
        .collect();
    let offsets: Vec<f64> = (0..N_LATENTS).map(|_| rng.random_range(-0.5..0.5)).collect();
    let norm = 1.0 / (WAVES_PER_LATENT as f64).sqrt();
    let mut data = vec![0.0; n * n * N_LATENTS];
    for y in 0..n {
        let ym = (y as f64 + 0.5) * BASE_GSD_M;
        for x in 0..n {
            let xm = (x as f64 + 0.5) * BASE_GSD_M;
            for (k, ws) in waves.iter().enumerate() {
                let s: f64 = ws.iter().map(|(kx, ky, ph, a)| a * (kx * xm + ky * ym + ph).sin()).sum();
                data[(y * n + x) * N_LATENTS + k] = offsets[k] + s * norm;
            }
        }
    }
    Tensor::new(vec![n, n, N_LATENTS], data).expect("latent shape")
}

/// Band image of `group` at the 10 m base grid (`n × n × C`).
pub fn band_field_base(latent: &Tensor, group: &BandGroup) -> Tensor {
    let n = latent.shape()[0];
    let c = group.n_bands();
    let mixes: Vec<_> = (0..c).map(|b| band_mix(group.id, b)).collect();
    let mut data = vec![0.0; n * n * c];
    for p in 0..n * n {
        let l = &latent.data()[p * N_LATENTS..(p + 1) * N_LATENTS];
        for (b, (off, w)) in mixes.iter().enumerate() {
            data[p * c + b] = off + w.iter().zip(l).map(|(a, v)| a * v).sum::<f64>();
        }
    }
    Tensor::new(vec![n, n, c], data).expect("band shape")
}

/// Crop the top-left `side·k` square, then block-average by `k`.
fn coarsen(base: &Tensor, k: usize, side: usize) -> Result<Tensor> {
    let (n, c) = (base.shape()[0], base.shape()[2]);
    let m = side * k;
    if m > n {
        return Err(Error::Shape(format!("need {m} base pixels, have {n}")));
    }
    let cropped = if m == n {
        base.clone()
    } else {
        let mut d = Vec::with_capacity(m * m * c);
        for y in 0..m {
            d.extend_from_slice(&base.data()[y * n * c..(y * n + m) * c]);
        }
        Tensor::new(vec![m, m, c], d)?
    };
    if k == 1 {
        Ok(cropped)
    } else {
        block_mean(&cropped, k)
    }
}

fn ratio_to_base(gsd: f64) -> Result<usize> {
    let r = gsd / BASE_GSD_M;
    if (r - r.round()).abs() > 1e-9 || r < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "gsd {gsd} m is not a multiple of the {BASE_GSD_M} m base grid"
        )));
    }
    Ok(r.round() as usize)
}

fn quantize(v: f64, classes: usize) -> u16 {
    // latents live roughly in [-1.5, 1.5]
    let t = ((v + 1.5) / 3.0 * classes as f64).floor();
    t.clamp(0.0, (classes - 1) as f64) as u16
}

/// Gradient magnitude by central differences (one-sided at the border).
pub fn slope_of(elevation: &Tensor, gsd_m: f64) -> Tensor {
    let (h, w) = (elevation.rows(), elevation.cols());
    Tensor::from_fn(h, w, |y, x| {
        let d = |a: f64, b: f64, steps: usize| (a - b) / (steps as f64 * gsd_m);
        let dx = if w < 2 {
            0.0
        } else {
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            d(elevation.at(y, r), elevation.at(y, l), r - l)
        };
        let dy = if h < 2 {
            0.0
        } else {
            let (u, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
            d(elevation.at(b, x), elevation.at(u, x), b - u)
        };
        dx.hypot(dy)
    })
}

fn tile_mean(latent: &Tensor, k: usize) -> f64 {
    let n = latent.shape()[0];
    (0..n * n).map(|p| latent.data()[p * N_LATENTS + k]).sum::<f64>() / (n * n) as f64
}

pub fn generate_tile(seed: u64, footprint_m: f64) -> Result<SyntheticTile> {
    let n = pixels_for(footprint_m, BASE_GSD_M);
    if n == 0 {
        return Err(Error::InvalidArgument(format!("footprint {footprint_m} m smaller than one pixel")));
    }
    let latent = latent_fields(seed, n);

    let registry = default_band_registry();
    let mut groups = Vec::new();
    for g in registry.groups() {
        let side = pixels_for(footprint_m, g.gsd_m);
        if side == 0 {
            continue;
        }
        let base = band_field_base(&latent, g);
        let image = coarsen(&base, ratio_to_base(g.gsd_m)?, side)?;
        groups.push(GroupImage { group_id: g.id, gsd_m: g.gsd_m, image });
    }

    let single = |k: usize| -> Tensor {
        let d = (0..n * n).map(|p| latent.data()[p * N_LATENTS + k]).collect();
        Tensor::new(vec![n, n, 1], d).expect("latent channel")
    };

    let mut maps = Vec::new();
    for task in MapTask::ALL {
        let side = pixels_for(footprint_m, task.gsd_m());
        if side == 0 {
            continue;
        }
        let field = coarsen(&single(task.latent()), ratio_to_base(task.gsd_m())?, side)?;
        let labels = field.data().iter().map(|&v| quantize(v, task.n_classes())).collect();
        maps.push(ClassMap { task, side, labels });
    }

    let elevation_base = single(3).map(|v| 500.0 + 300.0 * v);
    let mut dems = Vec::new();
    for gsd in DEM_GSDS {
        let side = pixels_for(footprint_m, gsd);
        if side == 0 {
            continue;
        }
        let e = coarsen(&elevation_base, ratio_to_base(gsd)?, side)?.reshape(&[side, side])?;
        let slope = slope_of(&e, gsd);
        dems.push(DemMap { gsd_m: gsd, elevation: e, slope });
    }

    let means: Vec<f64> = (0..N_LATENTS).map(|k| tile_mean(&latent, k)).collect();
    let era5 = (0..N_ERA5)
        .map(|v| {
            let (b, w) = era5_mix(v);
            b + w.iter().zip(&means).map(|(a, m)| a * m).sum::<f64>()
        })
        .collect();
    let scalars = ScalarTargets {
        era5,
        lat_deg: 60.0 * (2.0 * means[0]).tanh(),
        lon_deg: 180.0 * (2.0 * means[1]).tanh(),
        month: (6.0 + 6.0 * (2.0 * means[2]).tanh()).floor().rem_euclid(12.0),
        incidence_deg: 37.5 + 8.0 * (2.0 * means[3]).tanh(),
        orbit: usize::from(means[0] + means[1] > 0.0),
    };

    Ok(SyntheticTile {
        seed,
        footprint_m,
        latent,
        groups,
        maps,
        dems,
        scalars,
    })
}

/// Running mean and (population) variance, mergeable across tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: f64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.merge(&Moments { count: 1.0, mean: v, m2: 0.0 });
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.count == 0.0 {
            return;
        }
        let n = self.count + o.count;
        let delta = o.mean - self.mean;
        self.mean += delta * o.count / n;
        self.m2 += o.m2 + delta * delta * self.count * o.count / n;
        self.count = n;
    }

    pub fn std(&self) -> f64 {
        if self.count == 0.0 {
            0.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-target mean/std used to standardize regression targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetStats {
    pub entries: BTreeMap<String, (f64, f64)>,
}

impl TargetStats {
    pub fn get(&self, name: &str) -> (f64, f64) {
        self.entries.get(name).copied().unwrap_or((0.0, 1.0))
    }

    pub fn standardize(&self, name: &str, v: f64) -> f64 {
        let (m, s) = self.get(name);
        (v - m) / s
    }

    pub fn from_moments(moments: &BTreeMap<String, Moments>) -> Self {
        Self {
            entries: moments
                .iter()
                .map(|(k, m)| (k.clone(), (m.mean, m.std().max(STD_FLOOR))))
                .collect(),
        }
    }
}

pub fn dem_key(gsd: f64, what: &str) -> String {
    format!("dem{}_{what}", gsd as u32)
}

pub fn era5_key(var: usize) -> String {
    format!("era5_{var:02}")
}

/// Elevation with the per-tile minimum removed.
pub fn min_normalized(elevation: &Tensor) -> Tensor {
    let lo = elevation.data().iter().copied().fold(f64::INFINITY, f64::min);
    elevation.map(|v| v - lo)
}

pub fn standardization_stats<'a>(tiles: impl IntoIterator<Item = &'a SyntheticTile>) -> TargetStats {
    let mut acc: BTreeMap<String, Moments> = BTreeMap::new();
    for t in tiles {
        for d in &t.dems {
            let mut e = Moments::default();
            min_normalized(&d.elevation).data().iter().for_each(|&v| e.push(v));
            acc.entry(dem_key(d.gsd_m, "elevation")).or_default().merge(&e);
            let mut s = Moments::default();
            d.slope.data().iter().for_each(|&v| s.push(v));
            acc.entry(dem_key(d.gsd_m, "slope")).or_default().merge(&s);
        }
        for (i, &v) in t.scalars.era5.iter().enumerate() {
            acc.entry(era5_key(i)).or_default().push(v);
        }
    }
    TargetStats::from_moments(&acc)
}

fn class_map_record(m: &ClassMap) -> Record {
    Record {
        name: format!("map/{}", m.task.name()),
        array: Array::U16 { dims: vec![m.side, m.side], data: m.labels.clone() },
    }
}

fn f64_record(name: String, t: &Tensor) -> Record {
    Record { name, array: Array::F64(t.clone()) }
}

pub fn write_tile(path: &Path, tile: &SyntheticTile) -> Result<()> {
    let mut header = Vec::new();
    header.write_u64::<LittleEndian>(tile.seed)?;
    header.write_f64::<LittleEndian>(tile.footprint_m)?;
    header.write_u32::<LittleEndian>(tile.groups.len() as u32)?;
    for g in &tile.groups {
        header.write_u32::<LittleEndian>(g.group_id)?;
        header.write_f64::<LittleEndian>(g.gsd_m)?;
        header.write_u32::<LittleEndian>(g.image.shape()[2] as u32)?;
    }
    let mut records = vec![f64_record("latent".into(), &tile.latent)];
    records.extend(tile.groups.iter().map(|g| f64_record(format!("group/{:02}", g.group_id), &g.image)));
    records.extend(tile.maps.iter().map(class_map_record));
    for d in &tile.dems {
        records.push(f64_record(format!("dem/{}/elevation", d.gsd_m as u32), &d.elevation));
        records.push(f64_record(format!("dem/{}/slope", d.gsd_m as u32), &d.slope));
    }
    let s = &tile.scalars;
    records.push(f64_record("scalars/era5".into(), &Tensor::new(vec![s.era5.len()], s.era5.clone())?));
    records.push(f64_record(
        "scalars/meta".into(),
        &Tensor::new(vec![5], vec![s.lat_deg, s.lon_deg, s.month, s.incidence_deg, s.orbit as f64])?,
    ));
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, TILE_MAGIC, TILE_VERSION, &header, &records)
}

pub fn read_tile(path: &Path) -> Result<SyntheticTile> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, records) = read_container(&mut r, TILE_MAGIC, TILE_VERSION)?;
    let corrupt = |m: &str| Error::CorruptHeader(m.to_string());
    let mut h = header.as_slice();
    let seed = h.read_u64::<LittleEndian>().map_err(|_| corrupt("tile header truncated"))?;
    let footprint_m = h.read_f64::<LittleEndian>().map_err(|_| corrupt("tile header truncated"))?;
    let n_groups = h.read_u32::<LittleEndian>().map_err(|_| corrupt("tile header truncated"))?;
    let mut table = Vec::new();
    for _ in 0..n_groups {
        let id = h.read_u32::<LittleEndian>().map_err(|_| corrupt("group table truncated"))?;
        let gsd = h.read_f64::<LittleEndian>().map_err(|_| corrupt("group table truncated"))?;
        let bands = h.read_u32::<LittleEndian>().map_err(|_| corrupt("group table truncated"))?;
        table.push((id, gsd, bands as usize));
    }

    let mut by_name: BTreeMap<String, Array> = records.into_iter().map(|r| (r.name, r.array)).collect();
    fn take_f64(map: &mut BTreeMap<String, Array>, name: &str) -> Result<Tensor> {
        match map.remove(name) {
            Some(Array::F64(t)) => Ok(t),
            _ => Err(Error::CorruptHeader(format!("missing f64 record `{name}`"))),
        }
    }
    let latent = take_f64(&mut by_name, "latent")?;
    let mut groups = Vec::new();
    for (id, gsd, bands) in table {
        let image = take_f64(&mut by_name, &format!("group/{id:02}"))?;
        if image.shape().get(2) != Some(&bands) {
            return Err(corrupt("group band count disagrees with header"));
        }
        groups.push(GroupImage { group_id: id, gsd_m: gsd, image });
    }
    let mut dems = Vec::new();
    for gsd in DEM_GSDS {
        let key = format!("dem/{}/elevation", gsd as u32);
        if by_name.contains_key(&key) {
            let elevation = take_f64(&mut by_name, &key)?;
            let slope = take_f64(&mut by_name, &format!("dem/{}/slope", gsd as u32))?;
            dems.push(DemMap { gsd_m: gsd, elevation, slope });
        }
    }
    let era5 = take_f64(&mut by_name, "scalars/era5")?.into_data();
    let meta = take_f64(&mut by_name, "scalars/meta")?.into_data();
    if meta.len() != 5 {
        return Err(corrupt("scalars/meta must hold 5 values"));
    }
    let mut maps = Vec::new();
    for task in MapTask::ALL {
        if let Some(a) = by_name.remove(&format!("map/{}", task.name())) {
            match a {
                Array::U16 { dims, data } if dims.len() == 2 && dims[0] == dims[1] => {
                    maps.push(ClassMap { task, side: dims[0], labels: data })
                }
                _ => return Err(corrupt("class map record malformed")),
            }
        }
    }
    Ok(SyntheticTile {
        seed,
        footprint_m,
        latent,
        groups,
        maps,
        dems,
        scalars: ScalarTargets {
            era5,
            lat_deg: meta[0],
            lon_deg: meta[1],
            month: meta[2],
            incidence_deg: meta[3],
            orbit: meta[4] as usize,
        },
    })
}
