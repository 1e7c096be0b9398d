//! On-disk scene datasets.
//!
//! A dataset directory holds `manifest.json` and a `samples/` directory with
//! one flat file per tensor:
//!
//! ```text
//! samples/000000.target.f64      H*W*3 little-endian f64, row-major HWC
//! samples/000000.source.f64      H*W*3
//! samples/000000.disparity.f64   H*W
//! samples/000000.visible.u8      H*W bytes, 0 or 1
//! samples/000000.augmented.f64   H*W*3, only for degraded samples
//! ```
//!
//! Paths in the manifest are relative to the dataset directory.

use std::fs;
use std::path::{Path, PathBuf};

use secdepth_core::geom::CameraModel;
use secdepth_core::model::SIZE_MULTIPLE;
use secdepth_core::weather::{self, WeatherDescriptor, CHANNELS, MIN_SIDE};
use secdepth_core::{SceneSample, Tensor, WeatherKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio;

pub const FORMAT: &str = "secdepth-dataset";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid size {h}x{w}: sides must be at least {MIN_SIDE} and multiples of {SIZE_MULTIPLE}")]
    Size { h: usize, w: usize },
    #[error("invalid severity {0}: must lie in [0, 1]")]
    Severity(f64),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected {expected} bytes, found {found}")]
    Corrupt { path: PathBuf, expected: usize, found: usize },
    #[error("sample {index} has no ground-truth disparity")]
    MissingGroundTruth { index: usize },
    #[error("unsupported dataset format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("sample {index}: {message}")]
    Invalid { index: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Which degradation each synthesized sample receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeatherChoice {
    Clear,
    Only(WeatherKind),
    /// Cycles fog, rain, snow by sample index.
    Mixed,
}

impl WeatherChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "clear" => Some(Self::Clear),
            "mixed" => Some(Self::Mixed),
            k => WeatherKind::parse(k).map(Self::Only),
        }
    }

    fn kind_for(self, index: u64) -> Option<WeatherKind> {
        match self {
            Self::Clear => None,
            Self::Only(k) => Some(k),
            Self::Mixed => Some(WeatherKind::ALL[(index % 3) as usize]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: u64,
    pub height: usize,
    pub width: usize,
    pub weather: WeatherChoice,
    pub severity: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let ok = |n: usize| n >= MIN_SIDE && n.is_multiple_of(SIZE_MULTIPLE);
        if !ok(self.height) || !ok(self.width) {
            return Err(DatasetError::Size { h: self.height, w: self.width });
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(DatasetError::Severity(self.severity));
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::for_frame(self.height, self.width)
    }

    pub fn scene_seed(&self, index: u64) -> u64 {
        self.seed.wrapping_add(index)
    }

    /// Generates every sample in memory.
    pub fn generate(&self) -> Result<Vec<SceneSample>, DatasetError> {
        self.validate()?;
        let cam = self.camera();
        Ok((0..self.count)
            .map(|i| {
                let seed = self.scene_seed(i);
                let mut s = weather::generate_scene(seed, self.height, self.width, &cam);
                if let Some(kind) = self.weather.kind_for(i) {
                    weather::degrade(&mut s, kind, self.severity, seed ^ 0xA5A5_5A5A_0F0F_F0F0, &cam);
                }
                s
            })
            .collect())
    }
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shapes {
    pub image: [usize; 3],
    pub disparity: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub seed: u64,
    pub weather: Option<WeatherDescriptor>,
    pub target: String,
    pub source: String,
    pub disparity: Option<String>,
    pub visible: String,
    pub augmented: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub camera: CameraModel,
    pub shapes: Shapes,
    pub samples: Vec<SampleEntry>,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn camera(&self) -> CameraModel {
        self.manifest.camera
    }

    /// Weather kind name of sample `i`, `"clear"` when undegraded.
    pub fn kind_name(&self, i: usize) -> &'static str {
        self.samples[i].weather.map_or("clear", |d| d.kind.name())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `samples` under `dir`, creating it if needed.
pub fn write(dir: &Path, spec: &SynthSpec, samples: &[SceneSample]) -> Result<DatasetManifest, DatasetError> {
    let sdir = dir.join("samples");
    fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = |part: &str, ext: &str| format!("samples/{i:06}.{part}.{ext}");
        let entry = SampleEntry {
            seed: s.seed,
            weather: s.weather,
            target: name("target", "f64"),
            source: name("source", "f64"),
            disparity: Some(name("disparity", "f64")),
            visible: name("visible", "u8"),
            augmented: s.augmented.as_ref().map(|_| name("augmented", "f64")),
        };
        write_file(&dir.join(&entry.target), &binio::f64s_to_le(s.target.data()))?;
        write_file(&dir.join(&entry.source), &binio::f64s_to_le(s.source.data()))?;
        write_file(&dir.join(entry.disparity.as_ref().expect("set above")), &binio::f64s_to_le(s.disparity.data()))?;
        let vis: Vec<u8> = s.visible.iter().map(|&v| u8::from(v)).collect();
        write_file(&dir.join(&entry.visible), &vis)?;
        if let (Some(a), Some(p)) = (&s.augmented, &entry.augmented) {
            write_file(&dir.join(p), &binio::f64s_to_le(a.data()))?;
        }
        entries.push(entry);
    }
    let (h, w) = (spec.height, spec.width);
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: spec.seed,
        height: h,
        width: w,
        camera: spec.camera(),
        shapes: Shapes { image: [h, w, CHANNELS], disparity: [h, w] },
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|source| DatasetError::Json { path: path.clone(), source })?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(manifest)
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(DatasetError::Corrupt { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    Ok(bytes)
}

fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor, DatasetError> {
    let n: usize = shape.iter().product();
    let raw = read_exact_len(path, n * 8)?;
    Tensor::new(shape, binio::f64s_from_le(&raw))
        .map_err(|e| DatasetError::Invalid { index: usize::MAX, message: format!("{}: {e}", path.display()) })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json { path, source })?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(DatasetError::Format { format: m.format, version: m.version });
    }
    Ok(m)
}

/// Loads every sample; each must carry ground truth.
pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let Shapes { image, disparity } = manifest.shapes.clone();
    if image != [manifest.height, manifest.width, CHANNELS] || disparity != [manifest.height, manifest.width] {
        return Err(DatasetError::Size { h: manifest.height, w: manifest.width });
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (index, e) in manifest.samples.iter().enumerate() {
        let gt = e.disparity.as_ref().ok_or(DatasetError::MissingGroundTruth { index })?;
        let visible = read_exact_len(&dir.join(&e.visible), disparity.iter().product())?;
        if let Some(&b) = visible.iter().find(|&&b| b > 1) {
            return Err(DatasetError::Invalid { index, message: format!("visibility byte {b}") });
        }
        let augmented = e.augmented.as_ref().map(|p| read_tensor(&dir.join(p), &image)).transpose()?;
        if augmented.is_some() != e.weather.is_some() {
            return Err(DatasetError::Invalid { index, message: "weather descriptor and degraded image disagree".into() });
        }
        samples.push(SceneSample {
            seed: e.seed,
            target: read_tensor(&dir.join(&e.target), &image)?,
            source: read_tensor(&dir.join(&e.source), &image)?,
            disparity: read_tensor(&dir.join(gt), &disparity)?,
            visible: visible.into_iter().map(|b| b == 1).collect(),
            augmented,
            weather: e.weather,
        });
    }
    Ok(Dataset { manifest, samples })
}

/// Git-style object hash of a file's bytes: `sha256("blob <len>\0" ++ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// [`content_hash`] of a dataset's manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String, DatasetError> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(content_hash(&bytes))
}
