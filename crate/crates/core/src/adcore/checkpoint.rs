//! Parameter checkpoints: a UTF-8 `key = value` manifest plus a sidecar blob
//! of little-endian IEEE-754 values concatenated in manifest order.
//!
//! ```text
//! format = viewagg-checkpoint/1
//! blob = model.bin
//! iteration = 2000
//! param = coarse.agg.alpha f64 5
//! param = extractor.conv0.weight f64 3x3x3x8
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{ParamStore, Tensor};
use crate::Error;

const FORMAT: &str = "viewagg-checkpoint/1";

/// Storage precision of checkpoint values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Parse(format!("unknown dtype `{other}`"))),
        }
    }
}

/// A named set of tensors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: Vec<(String, String)>) -> Self {
        Self {
            meta,
            params: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copies values into same-named parameters of `store`; every parameter
    /// in `store` must be present with a matching shape.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<(), Error> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name.clone();
            let (_, value) = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let target = &mut store.get_mut(id).value;
            if target.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    target.shape(),
                    value.shape()
                )));
            }
            *target = value.clone();
        }
        Ok(())
    }

    /// Writes `manifest` and its blob (same stem, `.bin` extension).
    pub fn save(&self, manifest: &Path, dtype: DType) -> Result<(), Error> {
        let blob_path = blob_path(manifest);
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad manifest path {}", manifest.display())))?
            .to_string();

        let mut text = format!("format = {FORMAT}\nblob = {blob_name}\n");
        for (k, v) in &self.meta {
            if k == "param" || k == "format" || k == "blob" || k.contains('=') || v.contains('\n') {
                return Err(Error::Checkpoint(format!("reserved or malformed meta key `{k}`")));
            }
            text.push_str(&format!("{k} = {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.params {
            if name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("parameter name `{name}` has whitespace")));
            }
            text.push_str(&format!("param = {name} {dtype} {}\n", shape_string(t.shape())));
            for &x in t.data() {
                match dtype {
                    DType::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
                    DType::F64 => blob.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        fs::write(manifest, text)?;
        fs::write(blob_path, blob)?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(manifest)?;
        let mut blob_name = None;
        let mut format_ok = false;
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Checkpoint(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "format" => format_ok = v == FORMAT,
                "blob" => blob_name = Some(v.to_string()),
                "param" => {
                    let fields: Vec<&str> = v.split_whitespace().collect();
                    let [name, dtype, shape] = fields[..] else {
                        return Err(Error::Checkpoint(format!(
                            "line {}: expected `param = <name> <dtype> <shape>`",
                            lineno + 1
                        )));
                    };
                    entries.push((name.to_string(), dtype.parse::<DType>()?, parse_shape(shape)?));
                }
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        if !format_ok {
            return Err(Error::Checkpoint(format!(
                "{} is not a {FORMAT} manifest",
                manifest.display()
            )));
        }
        let blob_name = blob_name.ok_or_else(|| Error::Checkpoint("manifest lacks `blob`".into()))?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let blob = fs::read(dir.join(blob_name))?;

        let mut offset = 0;
        let mut params = Vec::with_capacity(entries.len());
        for (name, dtype, shape) in entries {
            let numel: usize = shape.iter().product();
            let bytes = numel * dtype.width();
            let chunk = blob.get(offset..offset + bytes).ok_or_else(|| {
                Error::Checkpoint(format!("blob too short for parameter `{name}`"))
            })?;
            let data = match dtype {
                DType::F32 => chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            offset += bytes;
            params.push((name, Tensor::new(&shape, data)?));
        }
        if offset != blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob has {} trailing bytes",
                blob.len() - offset
            )));
        }
        Ok(Self { meta, params })
    }
}

/// The blob that accompanies a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn shape_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>, Error> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad shape `{s}`")))
        })
        .collect()
}
