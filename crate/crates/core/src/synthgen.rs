//! Procedural paired scenes: a latent convective-intensity field drives ten satellite
//! channels and four target variables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{build_manifest, Manifest, SplitRule, MANIFEST_FILE};
use crate::rng::RngPolicy;
use crate::swt1::{save_field, FieldFile};
use crate::types::{RegionId, SatelliteStack, VariableId, WeatherField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelGroup {
    Swir,
    Wv,
    Lwir,
    Gas,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 4] = [ChannelGroup::Swir, ChannelGroup::Wv, ChannelGroup::Lwir, ChannelGroup::Gas];

    pub fn key(self) -> &'static str {
        match self {
            ChannelGroup::Swir => "SWIR",
            ChannelGroup::Wv => "WV",
            ChannelGroup::Lwir => "LWIR",
            ChannelGroup::Gas => "GAS",
        }
    }

    /// Smoothing radius (pixels at 64-pixel scale), white-noise std and textured-noise std in K.
    fn perturbation(self) -> (f32, f32, f32) {
        match self {
            ChannelGroup::Lwir => (0.5, 0.3, 0.0),
            ChannelGroup::Swir => (1.0, 0.5, 6.0),
            ChannelGroup::Wv => (4.0, 0.5, 0.0),
            ChannelGroup::Gas => (1.5, 6.0, 10.0),
        }
    }
}

impl std::str::FromStr for ChannelGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChannelGroup::ALL
            .into_iter()
            .find(|g| g.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown channel group {s:?}")))
    }
}

impl std::fmt::Display for ChannelGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Monotone map from smoothed intensity to brightness temperature:
/// `warm - (warm - cold) * L^gamma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelResponse {
    pub name: String,
    pub group: ChannelGroup,
    pub warm: f32,
    pub cold: f32,
    pub gamma: f32,
}

pub fn default_channels() -> Vec<ChannelResponse> {
    use ChannelGroup::*;
    let table: [(ChannelGroup, f32, f32, f32); 10] = [
        (Swir, 295.0, 215.0, 0.8),
        (Wv, 250.0, 205.0, 1.2),
        (Wv, 262.0, 208.0, 1.0),
        (Wv, 272.0, 210.0, 0.9),
        (Lwir, 292.0, 200.0, 1.0),
        (Gas, 268.0, 250.0, 1.4),
        (Lwir, 298.0, 195.0, 0.7),
        (Lwir, 300.0, 192.0, 1.3),
        (Lwir, 297.0, 198.0, 0.85),
        (Gas, 275.0, 258.0, 1.1),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(group, warm, cold, gamma))| ChannelResponse { name: format!("C{:02}", i + 7), group, warm, cold, gamma })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: (usize, usize),
    /// Inclusive range of cell counts.
    pub n_cells: (usize, usize),
    /// Peak amplitude range of secondary cells, in intensity units.
    pub intensity: (f32, f32),
    /// Geometric-mean cell width as a fraction of the shorter grid side.
    pub cell_size: (f32, f32),
    /// Major/minor axis ratio range.
    pub anisotropy: (f32, f32),
    /// Share of each cell's peak carried by its narrow convective core; the rest forms the shield.
    pub core_fraction: f32,
    /// Core width relative to the shield width.
    pub core_width: f32,
    /// dBZ per unit intensity.
    pub cr_gain: f32,
    pub channels: Vec<ChannelResponse>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: (64, 64),
            n_cells: (3, 7),
            intensity: (0.3, 1.0),
            cell_size: (0.04, 0.14),
            anisotropy: (1.0, 2.5),
            core_fraction: 0.6,
            core_width: 0.25,
            cr_gain: 72.0,
            channels: default_channels(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if h < 64 || w < 64 {
            return Err(Error::InvalidArgument(format!("scene grid {h}x{w} is below 64x64")));
        }
        if self.n_cells.0 > self.n_cells.1 {
            return Err(Error::InvalidArgument("n_cells range is inverted".into()));
        }
        let ok = |r: (f32, f32)| r.0 > 0.0 && r.0 <= r.1;
        if !ok(self.intensity) || !ok(self.cell_size) || !ok(self.anisotropy) || self.anisotropy.0 < 1.0 {
            return Err(Error::InvalidArgument("scene ranges must be positive and ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.core_fraction) || !(self.core_width > 0.0 && self.core_width <= 1.0) {
            return Err(Error::InvalidArgument("core fraction must lie in [0, 1] and core width in (0, 1]".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("no channel responses".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub stack: SatelliteStack,
    pub targets: BTreeMap<VariableId, WeatherField>,
    /// Latent convective intensity in `[0, 1]`.
    pub intensity: Array2<f32>,
}

const ANCHOR_AMPLITUDE: (f32, f32) = (0.95, 1.0);
const ANCHOR_SIZE: (f32, f32) = (0.19, 0.23);

fn region_offset(r: RegionId) -> f32 {
    match r {
        RegionId::Conus => 0.0,
        RegionId::Europe => -4.0,
        RegionId::EastAsia => 2.0,
        RegionId::TcRegion => 5.0,
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct CellShape {
    amplitude: f32,
    size: f32,
    aniso: f32,
    core_fraction: f32,
    core_width: f32,
}

/// Stratiform shield plus embedded core, merged into `l` by pointwise maximum.
fn stamp_cell(l: &mut Array2<f32>, rng: &mut ChaCha8Rng, cell: CellShape, center: ((f32, f32), (f32, f32))) {
    let (h, w) = l.dim();
    let cy = uniform(rng, center.0) * h as f32;
    let cx = uniform(rng, center.1) * w as f32;
    let theta = rng.random_range(0.0..std::f32::consts::PI);
    let s = cell.size * h.min(w) as f32;
    let (sa, sb) = (s * cell.aniso.sqrt(), s / cell.aniso.sqrt());
    let (ct, st) = (theta.cos(), theta.sin());
    let inv_core = 1.0 / (cell.core_width * cell.core_width);
    for ((i, j), v) in l.indexed_iter_mut() {
        let (dy, dx) = (i as f32 - cy, j as f32 - cx);
        let u = (dx * ct + dy * st) / sa;
        let q = (-dx * st + dy * ct) / sb;
        let r2 = u * u + q * q;
        let shape = (1.0 - cell.core_fraction) * (-0.5 * r2).exp() + cell.core_fraction * (-0.5 * r2 * inv_core).exp();
        *v = v.max(cell.amplitude * shape);
    }
}

/// Separable Gaussian blur with clamped edges.
pub fn gaussian_blur(x: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma < 0.3 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = taps.iter().sum();
    let (h, w) = x.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        taps.iter().enumerate().map(|(k, t)| t * x[[i, clamp(j as isize + k as isize - radius, w)]]).sum::<f32>() / norm
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        taps.iter().enumerate().map(|(k, t)| t * rows[[clamp(i as isize + k as isize - radius, h), j]]).sum::<f32>() / norm
    })
}

fn white(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Unit-variance spatially correlated noise.
fn textured(rng: &mut ChaCha8Rng, shape: (usize, usize), sigma: f32) -> Array2<f32> {
    let b = gaussian_blur(&white(rng, shape), sigma);
    let var = b.mapv(|v| v * v).mean().unwrap_or(1.0).max(1e-12);
    b / var.sqrt()
}

pub const ZR_A: f32 = 200.0;
pub const ZR_B: f32 = 1.6;
pub const ZR_CUTOFF_DBZ: f32 = 5.0;

/// Rain rate in mm/h from reflectivity in dBZ via `Z = a R^b`.
pub fn zr_rate(dbz: f32, a: f32, b: f32) -> f32 {
    if dbz < ZR_CUTOFF_DBZ {
        return 0.0;
    }
    let z = 10f64.powf(dbz as f64 / 10.0);
    (z / a as f64).powf(1.0 / b as f64) as f32
}

pub fn zr_precip(cr_dbz: &WeatherField, a: f32, b: f32) -> WeatherField {
    WeatherField {
        data: cr_dbz.data.mapv(|d| zr_rate(d, a, b)),
        variable: VariableId::Precipitation,
        norm: None,
        normalized: false,
        ..cr_dbz.clone()
    }
}

pub fn visible_from_intensity(l: f32) -> f32 {
    5.0 + 90.0 * (1.0 - (-3.0 * l).exp())
}

pub fn mwbt_from_intensity(l: f32) -> f32 {
    let k = 2.5f32;
    290.0 - 140.0 * (1.0 - (-k * l).exp()) / (1.0 - (-k).exp())
}

/// Generate one scene; identical `(config, region)` gives identical output.
pub fn gen_scene(config: &SceneConfig, region: RegionId) -> Result<Scene> {
    config.validate()?;
    let mut rng = RngPolicy::new(config.seed).stream("scene", 0);
    let (h, w) = config.grid;
    let mut l = Array2::<f32>::zeros((h, w));
    let n = rng.random_range(config.n_cells.0..=config.n_cells.1);
    for k in 0..n {
        let aniso = uniform(&mut rng, config.anisotropy);
        let (amplitude, size, aniso, center) = if k == 0 {
            (uniform(&mut rng, ANCHOR_AMPLITUDE), uniform(&mut rng, ANCHOR_SIZE), aniso.min(1.5), ((0.3, 0.7), (0.3, 0.7)))
        } else {
            (uniform(&mut rng, config.intensity), uniform(&mut rng, config.cell_size), aniso, ((0.0, 1.0), (0.0, 1.0)))
        };
        let cell = CellShape { amplitude, size, aniso, core_fraction: config.core_fraction, core_width: config.core_width };
        stamp_cell(&mut l, &mut rng, cell, center);
    }
    l.mapv_inplace(|v| v.min(1.0));

    let scale = h.min(w) as f32 / 64.0;
    let offset = region_offset(region);
    let mut stack = Array3::<f32>::zeros((config.channels.len(), h, w));
    for (c, resp) in config.channels.iter().enumerate() {
        let (smooth, white_std, texture_std) = resp.group.perturbation();
        let ls = gaussian_blur(&l, smooth * scale);
        let mut bt = ls.mapv(|v| resp.warm + offset - (resp.warm - resp.cold) * v.clamp(0.0, 1.0).powf(resp.gamma));
        if texture_std > 0.0 {
            bt.scaled_add(texture_std, &textured(&mut rng, (h, w), 2.0 * scale));
        }
        bt.scaled_add(white_std, &white(&mut rng, (h, w)));
        stack.index_axis_mut(Axis(0), c).assign(&bt);
    }
    let names = config.channels.iter().map(|c| c.name.clone()).collect();
    let stack = SatelliteStack::new(stack, names, region, 0)?;

    let cr = WeatherField::new(l.mapv(|v| (config.cr_gain * v).clamp(0.0, 70.0)), region, VariableId::Cr, 0)?;
    let precip = zr_precip(&cr, ZR_A, ZR_B);
    let vis = WeatherField::new(l.mapv(visible_from_intensity), region, VariableId::VisibleLight, 0)?;
    let mwbt = WeatherField::new(l.mapv(mwbt_from_intensity), region, VariableId::Mwbt, 0)?;
    let targets = BTreeMap::from([
        (VariableId::Cr, cr),
        (VariableId::Precipitation, precip),
        (VariableId::VisibleLight, vis),
        (VariableId::Mwbt, mwbt),
    ]);
    Ok(Scene { stack, targets, intensity: l })
}

impl Scene {
    pub fn with_timestamp(mut self, t: i64) -> Self {
        self.stack.timestamp = t;
        for f in self.targets.values_mut() {
            f.timestamp = t;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    /// Regions assigned to scenes in round-robin order.
    pub regions: Vec<RegionId>,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub start_timestamp: i64,
    pub interval_seconds: i64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            regions: RegionId::ALL.to_vec(),
            valid_fraction: 0.1,
            test_fraction: 0.1,
            start_timestamp: 1_688_169_600,
            interval_seconds: 3600,
        }
    }
}

pub const SCENE_DIR: &str = "scenes";

/// Generate `n_scenes` scenes under `out/scenes` and write `out/manifest.json`.
pub fn gen_dataset(config: &SceneConfig, n_scenes: usize, out: &Path, opts: &GenOptions) -> Result<Manifest> {
    config.validate()?;
    if opts.regions.is_empty() {
        return Err(Error::InvalidArgument("no regions to generate".into()));
    }
    let dir = out.join(SCENE_DIR);
    fs::create_dir_all(&dir)?;
    let policy = RngPolicy::new(config.seed);
    let written: Vec<Result<()>> = crate::par::map_range(n_scenes, |i| {
        let region = opts.regions[i % opts.regions.len()];
        let cfg = SceneConfig { seed: policy.derive_seed("scene", i as u64), ..config.clone() };
        let t = opts.start_timestamp + i as i64 * opts.interval_seconds;
        let scene = gen_scene(&cfg, region)?.with_timestamp(t);
        let stem = format!("s{i:05}_{}", region.key());
        save_field(&FieldFile::Satellite(scene.stack), &dir.join(format!("{stem}_sat.swt1")))?;
        for (v, f) in scene.targets {
            save_field(&FieldFile::Weather(f), &dir.join(format!("{stem}_{}.swt1", v.key())))?;
        }
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let rule = SplitRule::fractions(n_scenes, opts.valid_fraction, opts.test_fraction);
    let manifest = build_manifest(out, &rule)?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zr_examples() {
        assert!((zr_rate(23.01, 200.0, 1.6) - 1.0).abs() < 1e-3);
        assert!((zr_rate(46.02, 200.0, 1.6) - 200f32.powf(0.625)).abs() < 0.05);
        assert!((zr_rate(46.02, 200.0, 1.6) - 27.4).abs() < 0.1);
        assert_eq!(zr_rate(4.9, 200.0, 1.6), 0.0);
    }

    #[test]
    fn no_cells_gives_constant_targets() {
        let cfg = SceneConfig { n_cells: (0, 0), ..Default::default() };
        let s = gen_scene(&cfg, RegionId::Conus).unwrap();
        for f in s.targets.values() {
            let first = f.data[[0, 0]];
            assert!(f.data.iter().all(|&v| v == first));
        }
        assert_eq!(s.stack.channels(), 10);
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig { seed: 9, ..Default::default() };
        assert_eq!(gen_scene(&cfg, RegionId::Europe).unwrap(), gen_scene(&cfg, RegionId::Europe).unwrap());
        let other = SceneConfig { seed: 10, ..Default::default() };
        assert_ne!(gen_scene(&cfg, RegionId::Europe).unwrap(), gen_scene(&other, RegionId::Europe).unwrap());
    }

    #[test]
    fn target_ranges() {
        let s = gen_scene(&SceneConfig { seed: 3, ..Default::default() }, RegionId::TcRegion).unwrap();
        let m = &s.targets[&VariableId::Mwbt].data;
        assert!(m.iter().all(|&v| (150.0..=300.0).contains(&v)));
        assert!(s.targets[&VariableId::Cr].data.iter().all(|&v| (0.0..=70.0).contains(&v)));
    }
}
