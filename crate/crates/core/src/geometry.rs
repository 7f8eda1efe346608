//! Band-group registry, token-grid geometry in ground meters, multi-looking
//! and radiometric conversion.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// GSDs (m) SAR groups may be aggregated to.
pub const MULTILOOK_LADDER: [f64; 7] = [10.0, 20.0, 30.0, 60.0, 120.0, 180.0, 240.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SensorKind {
    Reflectance,
    Sar,
    Thermal,
    Synthetic,
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensorKind::Reflectance => "reflectance",
            SensorKind::Sar => "sar",
            SensorKind::Thermal => "thermal",
            SensorKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for SensorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reflectance" => Ok(SensorKind::Reflectance),
            "sar" => Ok(SensorKind::Sar),
            "thermal" => Ok(SensorKind::Thermal),
            "synthetic" => Ok(SensorKind::Synthetic),
            other => Err(Error::Config(format!("unknown sensor kind `{other}`"))),
        }
    }
}

/// Bands that share one GSD and one patch geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct BandGroup {
    pub id: u32,
    pub sensor: String,
    pub bands: Vec<String>,
    pub gsd_m: f64,
    pub kind: SensorKind,
}

impl BandGroup {
    pub fn new(id: u32, sensor: &str, bands: &[&str], gsd_m: f64, kind: SensorKind) -> Result<Self> {
        let group = Self {
            id,
            sensor: sensor.to_string(),
            bands: bands.iter().map(|b| b.to_string()).collect(),
            gsd_m,
            kind,
        };
        group.validate()?;
        Ok(group)
    }

    fn validate(&self) -> Result<()> {
        if !(self.gsd_m > 0.0 && self.gsd_m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "group {}: gsd must be positive, got {}",
                self.id, self.gsd_m
            )));
        }
        if self.bands.is_empty() {
            return Err(Error::InvalidArgument(format!("group {} has no bands", self.id)));
        }
        Ok(())
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandRegistry {
    groups: Vec<BandGroup>,
}

impl BandRegistry {
    pub fn new(groups: Vec<BandGroup>) -> Result<Self> {
        let mut seen = HashSet::new();
        for g in &groups {
            g.validate()?;
            if !seen.insert(g.id) {
                return Err(Error::InvalidArgument(format!("duplicate group id {}", g.id)));
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[BandGroup] {
        &self.groups
    }

    pub fn get(&self, id: u32) -> Option<&BandGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// One group per line: `id;sensor;band,band,...;gsd_m;kind`.
    pub fn to_config(&self) -> String {
        let mut out = String::from("# id;sensor;bands;gsd_m;kind\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{};{};{};{};{}\n",
                g.id,
                g.sensor,
                g.bands.join(","),
                g.gsd_m,
                g.kind
            ));
        }
        out
    }

    pub fn parse_config(text: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(';').map(str::trim).collect();
            let bad = |what: &str| Error::Config(format!("registry line {}: {what}", lineno + 1));
            if fields.len() != 5 {
                return Err(bad("expected 5 `;`-separated fields"));
            }
            let id = fields[0].parse().map_err(|_| bad("bad group id"))?;
            let bands: Vec<&str> = fields[2].split(',').map(str::trim).filter(|b| !b.is_empty()).collect();
            let gsd = fields[3].parse().map_err(|_| bad("bad gsd"))?;
            let kind = fields[4].parse()?;
            groups.push(BandGroup::new(id, fields[1], &bands, gsd, kind).map_err(|e| bad(&e.to_string()))?);
        }
        Self::new(groups)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_config(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config())?;
        Ok(())
    }
}

/// The ten Sentinel band groups with their default GSDs. SAR groups list
/// their finest GSD; multi-looking coarsens them along [`MULTILOOK_LADDER`].
pub fn default_band_registry() -> BandRegistry {
    use SensorKind::*;
    let g = |id, sensor, bands: &[&str], gsd, kind| {
        BandGroup::new(id, sensor, bands, gsd, kind).expect("static registry entry")
    };
    BandRegistry::new(vec![
        g(1, "Sentinel-2", &["Red", "Green", "Blue", "NIR"], 10.0, Reflectance),
        g(2, "Sentinel-2", &["RE1", "RE2", "RE3", "RE4", "SWIR1", "SWIR2"], 20.0, Reflectance),
        g(3, "Sentinel-2", &["CoastAerosol", "WaterVapor"], 60.0, Reflectance),
        g(4, "Sentinel-1", &["IW-VH", "IW-VV", "EW-VH", "EW-VV"], 10.0, Sar),
        g(5, "Sentinel-1", &["IW-HV", "IW-HH", "EW-HV", "EW-HH"], 10.0, Sar),
        g(6, "Sentinel-3 OLCI", &["Oa01", "Oa02", "Oa03", "Oa04", "Oa05", "Oa06", "Oa07"], 240.0, Reflectance),
        g(7, "Sentinel-3 OLCI", &["Oa08", "Oa09", "Oa10", "Oa11", "Oa12", "Oa13", "Oa14"], 240.0, Reflectance),
        g(8, "Sentinel-3 OLCI", &["Oa15", "Oa16", "Oa17", "Oa18", "Oa19", "Oa20", "Oa21"], 240.0, Reflectance),
        g(9, "Sentinel-3 SLSTR", &["S1", "S2", "S3", "S4", "S5", "S6"], 480.0, Reflectance),
        g(10, "Sentinel-3 SLSTR", &["S7", "S8", "S9"], 960.0, Thermal),
    ])
    .expect("static registry")
}

/// Patch grid of one band group over a footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub group_id: u32,
    pub patch_px: usize,
    pub rows: usize,
    pub cols: usize,
    pub origin_m: (f64, f64),
    pub gsd_m: f64,
}

impl TokenGrid {
    pub fn new(group_id: u32, patch_px: usize, rows: usize, cols: usize, gsd_m: f64) -> Result<Self> {
        if patch_px == 0 || rows == 0 || cols == 0 || !(gsd_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate grid: patch {patch_px}, {rows}x{cols}, gsd {gsd_m}"
            )));
        }
        Ok(Self {
            group_id,
            patch_px,
            rows,
            cols,
            origin_m: (0.0, 0.0),
            gsd_m,
        })
    }

    pub fn with_origin(mut self, x: f64, y: f64) -> Self {
        self.origin_m = (x, y);
        self
    }

    /// Side length of one patch on the ground.
    pub fn patch_footprint_m(&self) -> f64 {
        self.patch_px as f64 * self.gsd_m
    }

    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Patch centers in meters, row-major.
    pub fn patch_centers(&self) -> Vec<(f64, f64)> {
        let step = self.patch_footprint_m();
        let (ox, oy) = self.origin_m;
        (0..self.rows)
            .flat_map(|r| {
                (0..self.cols).map(move |c| (ox + (c as f64 + 0.5) * step, oy + (r as f64 + 0.5) * step))
            })
            .collect()
    }
}

/// Pixel side of a group image over a square ground cover (trailing
/// fractional pixels dropped).
pub fn pixels_for(ground_cover_m: f64, gsd_m: f64) -> usize {
    // Guard against 960/9.6 style representation error before flooring.
    ((ground_cover_m / gsd_m) + 1e-9).floor() as usize
}

/// One group's pixels over a footprint, `H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupImage {
    pub group_id: u32,
    pub gsd_m: f64,
    pub image: Tensor,
}

/// Aligned per-group images over one square footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintSample {
    pub ground_cover_m: f64,
    pub groups: Vec<GroupImage>,
}

impl FootprintSample {
    pub fn new(ground_cover_m: f64, groups: Vec<GroupImage>) -> Result<Self> {
        for g in &groups {
            let want = pixels_for(ground_cover_m, g.gsd_m);
            let s = g.image.shape();
            if s.len() != 3 || s[0] != want || s[1] != want {
                return Err(Error::Shape(format!(
                    "group {} at {} m over {} m needs {want}x{want}xC pixels, got {:?}",
                    g.group_id, g.gsd_m, ground_cover_m, s
                )));
            }
        }
        Ok(Self { ground_cover_m, groups })
    }

    pub fn group(&self, id: u32) -> Option<&GroupImage> {
        self.groups.iter().find(|g| g.group_id == id)
    }
}

fn as_hwc(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [h, w] => Ok((*h, *w, 1)),
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Shape(format!("expected H x W [x C], got {s:?}"))),
    }
}

/// Non-overlapping block mean from `gsd_src` to `gsd_dst`.
pub fn multilook(image: &Tensor, gsd_src: f64, gsd_dst: f64) -> Result<Tensor> {
    if !MULTILOOK_LADDER.contains(&gsd_dst) {
        return Err(Error::InvalidArgument(format!(
            "target gsd {gsd_dst} m is not on the multi-look ladder"
        )));
    }
    let ratio_f = gsd_dst / gsd_src;
    let ratio = ratio_f.round();
    if !(gsd_src > 0.0) || ratio < 1.0 || (ratio_f - ratio).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{gsd_dst} m is not an integer multiple of {gsd_src} m"
        )));
    }
    let k = ratio as usize;
    block_mean(image, k)
}

/// Mean over non-overlapping `k × k` blocks; trailing rows/cols dropped.
pub fn block_mean(image: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = as_hwc(image)?;
    if k == 0 || k > h || k > w {
        return Err(Error::InvalidArgument(format!(
            "block size {k} does not fit a {h}x{w} image"
        )));
    }
    if k == 1 {
        return Ok(image.clone());
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; oh * ow * c];
    let norm = 1.0 / (k * k) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for y in oy * k..(oy + 1) * k {
                    for x in ox * k..(ox + 1) * k {
                        s += image.data()[(y * w + x) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = s * norm;
            }
        }
    }
    let shape = if image.shape().len() == 2 { vec![oh, ow] } else { vec![oh, ow, c] };
    Tensor::new(shape, out)
}

/// Top-of-atmosphere reflectance `π·L / (E0·cos φ)` with per-band solar
/// irradiance `e0` indexed by the last image axis.
pub fn radiance_to_reflectance(radiance: &Tensor, e0: &[f64], sun_zenith_deg: f64) -> Result<Tensor> {
    let cos = sun_zenith_deg.to_radians().cos();
    if !(sun_zenith_deg < 90.0 && cos > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sun zenith {sun_zenith_deg} deg leaves no illumination"
        )));
    }
    let c = radiance.cols();
    if e0.len() != c {
        return Err(Error::Shape(format!("{} irradiance values for {c} bands", e0.len())));
    }
    if e0.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument("solar irradiance must be positive".into()));
    }
    let mut out = radiance.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = std::f64::consts::PI * *v / (e0[i % c] * cos);
    }
    Ok(out)
}
