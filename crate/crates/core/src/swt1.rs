//! SWT1 container: magic, little-endian header length, JSON header, raw f32 payloads.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::types::{NormState, RegionId, SatelliteStack, VariableId, WeatherField};

pub const MAGIC: &[u8; 4] = b"SWT1";

/// One named row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("array {name:?}: shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayHeader>,
    meta: Value,
}

/// In-memory SWT1 document.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Swt1 {
    pub arrays: Vec<NamedArray>,
    pub meta: Map<String, Value>,
}

impl Swt1 {
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Header(format!("missing array {name:?}")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Header(format!("missing string meta {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut headers = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            if let Some(bad) = a.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("array {:?} at element {bad}", a.name)));
            }
            let length = a.data.len() * 4;
            headers.push(ArrayHeader { name: a.name.clone(), shape: a.shape.clone(), dtype: "f32".into(), offset, length });
            offset += length;
        }
        let header = serde_json::to_vec(&Header { arrays: headers, meta: Value::Object(self.meta.clone()) })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Header("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(bytes)?;
        let header: Header = serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
        let meta = match header.meta {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => return Err(Error::Header(format!("meta must be an object, got {other}"))),
        };
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut declared = 0;
        for h in header.arrays {
            if h.dtype != "f32" {
                return Err(Error::UnsupportedDtype(h.dtype));
            }
            let n: usize = h.shape.iter().product();
            if h.length != n * 4 {
                return Err(Error::PayloadLength(format!("array {:?} declares {} bytes for shape {:?}", h.name, h.length, h.shape)));
            }
            let end = h.offset.checked_add(h.length).filter(|&e| e <= payload.len()).ok_or_else(|| {
                Error::PayloadLength(format!("array {:?} ends past the {}-byte payload", h.name, payload.len()))
            })?;
            let data = payload[h.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            declared = declared.max(end);
            arrays.push(NamedArray { name: h.name, shape: h.shape, data });
        }
        if declared != payload.len() {
            return Err(Error::PayloadLength(format!("{} payload bytes present, {declared} declared", payload.len())));
        }
        Ok(Self { arrays, meta })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::PayloadLength("file ends inside the header length".into()));
    }
    let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + n {
        return Err(Error::PayloadLength(format!("header declares {n} bytes, file has {}", bytes.len() - 8)));
    }
    Ok((&bytes[8..8 + n], &bytes[8 + n..]))
}

/// Read only the JSON metadata of an SWT1 file.
pub fn read_meta(path: &Path) -> Result<Map<String, Value>> {
    use std::io::Read;
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 8];
    f.read_exact(&mut head).map_err(|_| Error::BadMagic)?;
    if &head[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let n = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
    let mut buf = vec![0u8; n];
    f.read_exact(&mut buf).map_err(|_| Error::PayloadLength("file ends inside the header".into()))?;
    let header: Header = serde_json::from_slice(&buf).map_err(|e| Error::Header(e.to_string()))?;
    match header.meta {
        Value::Object(m) => Ok(m),
        _ => Ok(Map::new()),
    }
}

/// Contents of a data file.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldFile {
    Weather(WeatherField),
    Satellite(SatelliteStack),
}

impl From<WeatherField> for FieldFile {
    fn from(f: WeatherField) -> Self {
        FieldFile::Weather(f)
    }
}

impl From<SatelliteStack> for FieldFile {
    fn from(s: SatelliteStack) -> Self {
        FieldFile::Satellite(s)
    }
}

pub const KIND_FIELD: &str = "field";
pub const KIND_STACK: &str = "stack";

pub(crate) fn norm_json(norm: &Option<NormState>) -> Value {
    match norm {
        Some(n) => json!({"min": n.min(), "max": n.max(), "log": n.log_applied()}),
        None => Value::Null,
    }
}

pub(crate) fn norm_from_json(v: Option<&Value>) -> Result<Option<NormState>> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(v) => {
            let get = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| Error::Header(format!("norm.{k} missing")));
            let log = v.get("log").and_then(Value::as_bool).unwrap_or(false);
            Ok(Some(NormState::new(get("min")?, get("max")?, log)?))
        }
    }
}

pub(crate) fn parse_meta<T: std::str::FromStr<Err = Error>>(meta: &Map<String, Value>, key: &str) -> Result<T> {
    meta.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Header(format!("missing meta {key:?}")))?
        .parse()
}

pub(crate) fn meta_timestamp(meta: &Map<String, Value>) -> Result<i64> {
    meta.get("timestamp").and_then(Value::as_i64).ok_or_else(|| Error::Header("missing meta \"timestamp\"".into()))
}

impl FieldFile {
    pub fn to_swt1(&self) -> Result<Swt1> {
        let mut meta = Map::new();
        let array = match self {
            FieldFile::Weather(f) => {
                let (h, w) = f.shape();
                meta.insert("kind".into(), KIND_FIELD.into());
                meta.insert("region".into(), f.region.key().into());
                meta.insert("variable".into(), f.variable.key().into());
                meta.insert("timestamp".into(), f.timestamp.into());
                meta.insert("norm".into(), norm_json(&f.norm));
                meta.insert("normalized".into(), f.normalized.into());
                NamedArray::new("data", vec![1, h, w], f.data.iter().copied().collect())?
            }
            FieldFile::Satellite(s) => {
                let (c, h, w) = s.data.dim();
                meta.insert("kind".into(), KIND_STACK.into());
                meta.insert("region".into(), s.region.key().into());
                meta.insert("variable".into(), Value::Null);
                meta.insert("timestamp".into(), s.timestamp.into());
                meta.insert("norm".into(), Value::Null);
                meta.insert("channel_names".into(), s.channel_names.clone().into());
                NamedArray::new("data", vec![c, h, w], s.data.iter().copied().collect())?
            }
        };
        Ok(Swt1 { arrays: vec![array], meta })
    }

    pub fn from_swt1(doc: Swt1) -> Result<Self> {
        let kind = doc.meta_str("kind")?.to_owned();
        let region: RegionId = parse_meta(&doc.meta, "region")?;
        let timestamp = meta_timestamp(&doc.meta)?;
        let arr = doc.array("data")?;
        match kind.as_str() {
            KIND_FIELD => {
                let (h, w) = match arr.shape[..] {
                    [1, h, w] | [h, w] => (h, w),
                    _ => return Err(Error::Shape(format!("weather field shape {:?}", arr.shape))),
                };
                let variable: VariableId = parse_meta(&doc.meta, "variable")?;
                let data = Array2::from_shape_vec((h, w), arr.data.clone()).map_err(|e| Error::Shape(e.to_string()))?;
                let mut f = WeatherField::new(data, region, variable, timestamp)?;
                f.norm = norm_from_json(doc.meta.get("norm"))?;
                f.normalized = doc.meta.get("normalized").and_then(Value::as_bool).unwrap_or(false);
                Ok(FieldFile::Weather(f))
            }
            KIND_STACK => {
                let [c, h, w] = arr.shape[..] else {
                    return Err(Error::Shape(format!("satellite stack shape {:?}", arr.shape)));
                };
                let names = match doc.meta.get("channel_names") {
                    Some(Value::Array(v)) => v.iter().map(|s| s.as_str().unwrap_or_default().to_owned()).collect(),
                    _ => default_channel_names(c),
                };
                let data = Array3::from_shape_vec((c, h, w), arr.data.clone()).map_err(|e| Error::Shape(e.to_string()))?;
                Ok(FieldFile::Satellite(SatelliteStack::new(data, names, region, timestamp)?))
            }
            other => Err(Error::Header(format!("kind {other:?} is not a data file"))),
        }
    }

    pub fn into_weather(self) -> Result<WeatherField> {
        match self {
            FieldFile::Weather(f) => Ok(f),
            FieldFile::Satellite(_) => Err(Error::InvalidArgument("expected a weather field, found a satellite stack".into())),
        }
    }

    pub fn into_stack(self) -> Result<SatelliteStack> {
        match self {
            FieldFile::Satellite(s) => Ok(s),
            FieldFile::Weather(_) => Err(Error::InvalidArgument("expected a satellite stack, found a weather field".into())),
        }
    }
}

pub fn default_channel_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("C{:02}", i + 7)).collect()
}

pub fn save_field(field: &FieldFile, path: &Path) -> Result<()> {
    field.to_swt1()?.write(path)
}

pub fn load_field(path: &Path) -> Result<FieldFile> {
    FieldFile::from_swt1(Swt1::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field() -> WeatherField {
        WeatherField::new(Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 * 0.5), RegionId::Europe, VariableId::Precipitation, 1_700_000_000).unwrap()
    }

    #[test]
    fn header_declares_f32_and_three_axis_shape() {
        let doc = FieldFile::from(field()).to_swt1().unwrap();
        let bytes = doc.to_bytes().unwrap();
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["arrays"][0]["dtype"], "f32");
        assert_eq!(header["arrays"][0]["shape"], json!([1, 3, 5]));
        assert_eq!(header["arrays"][0]["offset"], 0);
        assert_eq!(header["arrays"][0]["length"], 60);
        assert_eq!(header["meta"]["region"], "Europe");
        assert_eq!(header["meta"]["timestamp"], 1_700_000_000i64);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_dtype() {
        let mut bytes = FieldFile::from(field()).to_swt1().unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert_eq!(Swt1::from_bytes(&bad).unwrap_err().to_string(), "bad magic");
        let short = &bytes[..bytes.len() - 3];
        assert!(Swt1::from_bytes(short).unwrap_err().to_string().starts_with("payload length mismatch"));
        let at = bytes.windows(5).position(|w| w == b"\"f32\"").unwrap();
        bytes[at + 2] = b'6';
        bytes[at + 3] = b'4';
        assert!(matches!(Swt1::from_bytes(&bytes), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut f = field();
        f.data[[0, 0]] = f32::NAN;
        assert!(matches!(FieldFile::from(f).to_swt1().unwrap().to_bytes(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn field_round_trip_keeps_norm_state() {
        let mut f = field();
        f.norm = Some(NormState::new(0.0, 5.0, true).unwrap());
        f.normalized = true;
        let doc = FieldFile::from(f.clone()).to_swt1().unwrap();
        let back = FieldFile::from_swt1(Swt1::from_bytes(&doc.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, FieldFile::Weather(f));
    }
}
