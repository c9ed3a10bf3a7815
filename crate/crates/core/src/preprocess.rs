//! Normalization, sliding-window patches, connected-component filtering and reassembly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::swt1::{self, NamedArray, Swt1};
use crate::types::{NormState, RegionId, SatelliteStack, VariableId, WeatherField};

/// Per-variable normalization bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTable(pub BTreeMap<VariableId, NormState>);

impl Default for NormTable {
    fn default() -> Self {
        let n = |a, b, log| NormState::new(a, b, log).expect("static bounds");
        NormTable(BTreeMap::from([
            (VariableId::Cr, n(0.0, 70.0, false)),
            (VariableId::Precipitation, n(0.0, 5.0, true)),
            (VariableId::VisibleLight, n(0.0, 100.0, false)),
            (VariableId::Mwbt, n(150.0, 300.0, false)),
        ]))
    }
}

impl NormTable {
    pub fn get(&self, v: VariableId) -> Result<NormState> {
        self.0.get(&v).copied().ok_or_else(|| Error::Config(format!("no normalization bounds for {v}")))
    }
}

/// Min/max of the (optionally log1p-transformed) values of training fields.
pub fn fit_norm<'a>(fields: impl IntoIterator<Item = &'a WeatherField>, log_applied: bool) -> Result<NormState> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for f in fields {
        for &v in &f.data {
            let v = if log_applied { (v as f64).ln_1p() } else { v as f64 };
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    NormState::new(lo, hi, log_applied)
}

pub fn normalize(field: &WeatherField, config: &NormState) -> Result<WeatherField> {
    if field.normalized {
        return Err(Error::InvalidArgument(format!("{} field at {} is already normalized", field.variable, field.timestamp)));
    }
    let config = NormState::new(config.min(), config.max(), config.log_applied())?;
    Ok(WeatherField {
        data: field.data.mapv(|x| config.forward(x)),
        norm: Some(config),
        normalized: true,
        ..field.clone()
    })
}

pub fn denormalize(field: &WeatherField) -> Result<WeatherField> {
    let norm = field.norm.ok_or(Error::MissingNormState)?;
    if !field.normalized {
        return Ok(field.clone());
    }
    Ok(WeatherField { data: field.data.mapv(|y| norm.inverse(y)), normalized: false, ..field.clone() })
}

/// Brightness-temperature bounds mapping satellite stacks onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackNorm {
    pub min: f32,
    pub max: f32,
}

impl Default for StackNorm {
    fn default() -> Self {
        Self { min: 170.0, max: 320.0 }
    }
}

impl StackNorm {
    pub fn apply(&self, data: &Array3<f32>) -> Array3<f32> {
        let span = self.max - self.min;
        data.mapv(|v| ((v - self.min) / span).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub data: Array2<f32>,
    /// `(row, col)` of the top-left pixel in the parent grid.
    pub origin: (usize, usize),
    pub region: RegionId,
    pub variable: VariableId,
    pub timestamp: i64,
    pub norm: Option<NormState>,
    pub normalized: bool,
}

/// Top-left corners of every full window; the remainder past the last window is dropped.
pub fn window_origins(h: usize, w: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    if h < window || w < window {
        return Err(Error::GridTooSmall { h, w, window });
    }
    let rows = (h - window) / stride + 1;
    let cols = (w - window) / stride + 1;
    Ok((0..rows).flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride))).collect())
}

pub fn extract_patches(field: &WeatherField, window: usize, stride: usize) -> Result<Vec<PatchRecord>> {
    let (h, w) = field.shape();
    Ok(window_origins(h, w, window, stride)?
        .into_iter()
        .map(|(r, c)| PatchRecord {
            data: field.data.slice(s![r..r + window, c..c + window]).to_owned(),
            origin: (r, c),
            region: field.region,
            variable: field.variable,
            timestamp: field.timestamp,
            norm: field.norm,
            normalized: field.normalized,
        })
        .collect())
}

/// Stack windows at the given origins.
pub fn extract_stack_windows(stack: &Array3<f32>, origins: &[(usize, usize)], window: usize) -> Vec<Array3<f32>> {
    origins.iter().map(|&(r, c)| stack.slice(s![.., r..r + window, c..c + window]).to_owned()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    /// Intensity threshold in physical units.
    pub gamma1: f32,
    /// Minimum pixel count of a connected exceedance region.
    pub gamma2: usize,
}

impl FilterThresholds {
    pub fn new(gamma1: f32, gamma2: usize) -> Result<Self> {
        if gamma2 < 1 || !gamma1.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid filter thresholds ({gamma1}, {gamma2})")));
        }
        Ok(Self { gamma1, gamma2 })
    }

    /// Default thresholds; `None` for variables that bypass filtering.
    pub fn for_variable(v: VariableId) -> Option<Self> {
        match v {
            VariableId::Cr => Some(Self { gamma1: 8.0, gamma2: 600 }),
            VariableId::Precipitation => Some(Self { gamma1: 5.0, gamma2: 500 }),
            VariableId::VisibleLight => Some(Self { gamma1: 30.0, gamma2: 1200 }),
            VariableId::Mwbt => None,
        }
    }
}

/// True when some 4-connected region of pixels `> gamma1` has at least `gamma2` pixels.
pub fn has_large_component(data: ArrayView2<f32>, gamma1: f32, gamma2: usize) -> bool {
    let (h, w) = data.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut stack = Vec::new();
    for start in 0..h * w {
        let (r0, c0) = (start / w, start % w);
        if seen[[r0, c0]] || data[[r0, c0]].is_nan() || data[[r0, c0]] <= gamma1 {
            continue;
        }
        seen[[r0, c0]] = true;
        stack.push((r0, c0));
        let mut size = 0;
        while let Some((r, c)) = stack.pop() {
            size += 1;
            let mut visit = |rr: usize, cc: usize| {
                if !seen[[rr, cc]] && data[[rr, cc]] > gamma1 {
                    seen[[rr, cc]] = true;
                    stack.push((rr, cc));
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
        }
        if size >= gamma2 {
            return true;
        }
    }
    false
}

fn keep(p: &PatchRecord, t: &FilterThresholds) -> bool {
    if p.variable == VariableId::Mwbt {
        return true;
    }
    match (p.normalized, p.norm) {
        (true, Some(n)) => has_large_component(p.data.mapv(|v| n.inverse(v)).view(), t.gamma1, t.gamma2),
        _ => has_large_component(p.data.view(), t.gamma1, t.gamma2),
    }
}

/// Keep patches holding a sufficiently large exceedance region, judged on physical values.
pub fn filter_patches(patches: Vec<PatchRecord>, thresholds: &FilterThresholds) -> Vec<PatchRecord> {
    let mask = crate::par::map_slice(&patches, |p| keep(p, thresholds));
    patches.into_iter().zip(mask).filter_map(|(p, k)| k.then_some(p)).collect()
}

/// Reassembled grid plus the pixels any patch covered.
#[derive(Clone, Debug, PartialEq)]
pub struct Reassembled {
    pub field: WeatherField,
    pub coverage: Array2<bool>,
}

/// Uniform average of overlapping windows; uncovered pixels are 0.
pub fn reassemble_arrays<'a>(
    patches: impl IntoIterator<Item = ((usize, usize), ArrayView2<'a, f32>)>,
    grid: (usize, usize),
) -> Result<(Array2<f32>, Array2<bool>)> {
    let (h, w) = grid;
    let mut sum = Array2::<f64>::zeros(grid);
    let mut count = Array2::<u32>::zeros(grid);
    for ((r, c), p) in patches {
        let (ph, pw) = p.dim();
        if r + ph > h || c + pw > w {
            return Err(Error::InvalidArgument(format!("patch at ({r}, {c}) of size {ph}x{pw} falls outside the {h}x{w} grid")));
        }
        let mut sv = sum.slice_mut(s![r..r + ph, c..c + pw]);
        sv.zip_mut_with(&p, |a, &b| *a += b as f64);
        count.slice_mut(s![r..r + ph, c..c + pw]).mapv_inplace(|n| n + 1);
    }
    let mut out = Array2::<f32>::zeros(grid);
    ndarray::Zip::from(&mut out).and(&sum).and(&count).for_each(|o, &s, &n| {
        if n > 0 {
            *o = (s / n as f64) as f32;
        }
    });
    Ok((out, count.mapv(|n| n > 0)))
}

pub fn reassemble(patches: &[PatchRecord], grid_shape: (usize, usize)) -> Result<Reassembled> {
    let first = patches.first().ok_or_else(|| Error::MissingData("no patches to reassemble".into()))?;
    let (data, coverage) = reassemble_arrays(patches.iter().map(|p| (p.origin, p.data.view())), grid_shape)?;
    let mut field = WeatherField::new(data, first.region, first.variable, first.timestamp)?;
    field.norm = first.norm;
    field.normalized = first.normalized;
    Ok(Reassembled { field, coverage })
}

pub fn save_patch_set(patches: &[PatchRecord], path: &Path) -> Result<()> {
    let first = patches.first().ok_or_else(|| Error::MissingData("empty patch set".into()))?;
    let mut arrays = Vec::with_capacity(patches.len() + 1);
    let mut origins = Vec::with_capacity(patches.len() * 2);
    for (i, p) in patches.iter().enumerate() {
        let (h, w) = p.data.dim();
        arrays.push(NamedArray::new(format!("patch_{i:05}"), vec![h, w], p.data.iter().copied().collect())?);
        origins.extend([p.origin.0 as f32, p.origin.1 as f32]);
    }
    arrays.push(NamedArray::new("origins", vec![patches.len(), 2], origins)?);
    let mut meta = Map::new();
    meta.insert("kind".into(), "patches".into());
    meta.insert("region".into(), first.region.key().into());
    meta.insert("variable".into(), first.variable.key().into());
    meta.insert("timestamp".into(), first.timestamp.into());
    meta.insert("norm".into(), swt1::norm_json(&first.norm));
    meta.insert("normalized".into(), first.normalized.into());
    Swt1 { arrays, meta }.write(path)
}

pub fn load_patch_set(path: &Path) -> Result<Vec<PatchRecord>> {
    let doc = Swt1::read(path)?;
    let region = swt1::parse_meta(&doc.meta, "region")?;
    let variable = swt1::parse_meta(&doc.meta, "variable")?;
    let timestamp = swt1::meta_timestamp(&doc.meta)?;
    let norm = swt1::norm_from_json(doc.meta.get("norm"))?;
    let normalized = doc.meta.get("normalized").and_then(Value::as_bool).unwrap_or(false);
    let origins = doc.array("origins")?;
    doc.arrays
        .iter()
        .filter(|a| a.name.starts_with("patch_"))
        .enumerate()
        .map(|(i, a)| {
            let [h, w] = a.shape[..] else {
                return Err(Error::Shape(format!("patch shape {:?}", a.shape)));
            };
            let o = origins.data.get(2 * i..2 * i + 2).ok_or_else(|| Error::Header("origins shorter than patch list".into()))?;
            Ok(PatchRecord {
                data: Array2::from_shape_vec((h, w), a.data.clone()).map_err(|e| Error::Shape(e.to_string()))?,
                origin: (o[0] as usize, o[1] as usize),
                region,
                variable,
                timestamp,
                norm,
                normalized,
            })
        })
        .collect()
}

/// Zero the listed channels of a normalized stack.
pub fn mask_channels(stack: &mut Array3<f32>, channels: &[usize]) {
    for &c in channels {
        if c < stack.dim().0 {
            stack.slice_mut(s![c, .., ..]).fill(0.0);
        }
    }
}

/// Normalized stack as an owned array.
pub fn normalize_stack(stack: &SatelliteStack, norm: &StackNorm) -> Array3<f32> {
    norm.apply(&stack.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn field(data: Array2<f32>, v: VariableId) -> WeatherField {
        WeatherField::new(data, RegionId::Conus, v, 0).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let cr = normalize(&field(array![[35.0, 0.0], [70.0, 90.0]], VariableId::Cr), &NormState::new(0.0, 70.0, false).unwrap()).unwrap();
        assert_eq!(cr.data, array![[0.5, 0.0], [1.0, 1.0]]);
        let e1 = std::f32::consts::E - 1.0;
        let p = normalize(&field(array![[0.0, e1]], VariableId::Precipitation), &NormState::new(0.0, 5.0, true).unwrap()).unwrap();
        assert_eq!(p.data[[0, 0]], 0.0);
        assert!((p.data[[0, 1]] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn denormalize_round_trip_and_endpoints() {
        let n = NormState::new(0.0, 70.0, false).unwrap();
        let f = normalize(&field(array![[42.0]], VariableId::Cr), &n).unwrap();
        assert!((denormalize(&f).unwrap().data[[0, 0]] - 42.0).abs() < 1e-4);
        assert_eq!(n.inverse(0.0), 0.0);
        assert_eq!(n.inverse(1.0), 70.0);
        assert!(matches!(denormalize(&field(array![[1.0]], VariableId::Cr)), Err(Error::MissingNormState)));
    }

    #[test]
    fn patch_counts() {
        assert_eq!(window_origins(550, 1175, 256, 128).unwrap().len(), 24);
        assert_eq!(window_origins(256, 256, 256, 128).unwrap(), vec![(0, 0)]);
        assert_eq!(window_origins(384, 384, 256, 128).unwrap().len(), 4);
        assert!(matches!(window_origins(100, 300, 256, 128), Err(Error::GridTooSmall { .. })));
    }

    #[test]
    fn component_filter_examples() {
        let p = array![[6.0f32, 6.0, 0.0], [0.0, 6.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(has_large_component(p.view(), 5.0, 3));
        assert!(!has_large_component(p.view(), 5.0, 4));
        assert!(!has_large_component(Array2::<f32>::zeros((8, 8)).view(), 5.0, 1));
        let diag = array![[6.0f32, 0.0], [0.0, 6.0]];
        assert!(!has_large_component(diag.view(), 5.0, 2));
        assert_eq!(FilterThresholds::for_variable(VariableId::Cr), Some(FilterThresholds { gamma1: 8.0, gamma2: 600 }));
        assert!(FilterThresholds::new(1.0, 0).is_err());
    }

    #[test]
    fn overlap_is_averaged() {
        let a = Array2::<f32>::from_elem((2, 4), 0.0);
        let b = Array2::<f32>::from_elem((2, 4), 0.2);
        let (out, cov) = reassemble_arrays([((0, 0), a.view()), ((0, 2), b.view())], (2, 7)).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.0, 0.0, 0.1, 0.1, 0.2, 0.2, 0.0]);
        assert!(!cov[[0, 6]] && cov[[1, 5]]);
        assert!(reassemble_arrays([((1, 0), a.view())], (2, 7)).is_err());
    }

    #[test]
    fn patch_set_round_trip() {
        let f = field(Array2::from_shape_fn((6, 9), |(i, j)| (i * 9 + j) as f32), VariableId::Cr);
        let patches = extract_patches(&f, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.swt1");
        save_patch_set(&patches, &path).unwrap();
        assert_eq!(load_patch_set(&path).unwrap(), patches);
    }
}
