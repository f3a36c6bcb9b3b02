//! Dataset representation, AQI banding, synthetic fixtures, and file I/O.
//!
//! Real deployments precompute 1280-d backbone features offline and write
//! them into the fixture format below together with the tabular features
//! and PM2.5 target; everything downstream is backbone-agnostic. The
//! synthetic generator stands in for the real corpora and is built so that
//! each modality alone is informative but noisy, while combining them (and
//! especially letting the tabular context de-gate the image signal) is
//! strictly better.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;

/// One record: precomputed image features, tabular features, and the PM2.5
/// value with its derived AQI category.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub img_feat: Vec<f32>,
    pub tab_feat: Vec<f32>,
    pub pm25: f32,
    pub class_label: u8,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub d_tab: usize,
    pub d_img: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.class_label).collect()
    }

    /// Per-class counts over the six AQI categories.
    pub fn class_histogram(&self) -> [usize; 6] {
        let mut h = [0usize; 6];
        for s in &self.samples {
            h[s.class_label as usize] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            d_tab: self.d_tab,
            d_img: self.d_img,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// AQI category banding. Upper bounds are inclusive: 50.0 is Good,
/// 150.0 is Unhealthy for Sensitive Groups.
pub fn aqi_to_category(aqi: f32) -> Result<u8> {
    if !aqi.is_finite() || aqi < 0.0 {
        return Err(Error::Data(format!("AQI value must be >= 0, got {aqi}")));
    }
    Ok(match aqi {
        v if v <= 50.0 => 0,
        v if v <= 100.0 => 1,
        v if v <= 150.0 => 2,
        v if v <= 200.0 => 3,
        v if v <= 300.0 => 4,
        _ => 5,
    })
}

pub const AQI_CATEGORY_NAMES: [&str; 6] = [
    "Good",
    "Moderate",
    "Unhealthy for Sensitive Groups",
    "Unhealthy",
    "Very Unhealthy",
    "Hazardous",
];

/// Per-tabular-feature normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Population mean/stddev per tabular column.
pub fn compute_norm_stats(dataset: &Dataset) -> NormStats {
    let d = dataset.d_tab;
    let n = dataset.len().max(1) as f64;
    let mut mean = vec![0.0f64; d];
    for s in &dataset.samples {
        for (m, &v) in mean.iter_mut().zip(&s.tab_feat) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; d];
    for s in &dataset.samples {
        for (i, &v) in s.tab_feat.iter().enumerate() {
            let dv = v as f64 - mean[i];
            var[i] += dv * dv;
        }
    }
    NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: var.iter().map(|&v| ((v / n).sqrt()) as f32).collect(),
    }
}

/// Z-score the tabular features; constant columns map to zero. Image
/// features pass through unscaled.
pub fn normalize(mut dataset: Dataset, stats: &NormStats) -> Result<Dataset> {
    if stats.mean.len() != dataset.d_tab || stats.std.len() != dataset.d_tab {
        return Err(Error::Data(format!(
            "normalization stats have {} columns, dataset has {}",
            stats.mean.len(),
            dataset.d_tab
        )));
    }
    for s in &mut dataset.samples {
        for (i, v) in s.tab_feat.iter_mut().enumerate() {
            *v = if stats.std[i] == 0.0 {
                0.0
            } else {
                (*v - stats.mean[i]) / stats.std[i]
            };
        }
    }
    Ok(dataset)
}

/// Parameters of the synthetic fixture generator.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_tab: usize,
    pub d_img: usize,
    pub noise: f32,
    pub seed: u64,
}

// Relative noise scales, all multiplied by `SyntheticSpec::noise`.
// Signal-level noise is common to a whole modality and cannot be averaged
// away by adding feature dimensions; feature-level noise is per-dimension.
const TAB_SIGNAL_NOISE: f32 = 0.16;
const TAB_FEATURE_NOISE: f32 = 0.25;
const IMG_SIGNAL_NOISE: f32 = 0.12;
const IMG_FEATURE_NOISE: f32 = 0.40;

/// Latent layout mixed into the tabular features: the scaled PM2.5 signal,
/// then (when width allows) the image-gate context, then nuisance channels.
fn latent_dim(d_tab: usize) -> usize {
    1 + usize::from(d_tab >= 2) + d_tab.saturating_sub(2).min(3)
}

/// Draw a dataset. The latent PM2.5 is uniform on [0, 500]; the tabular
/// modality carries a noisy copy of the signal plus an exact gate context c
/// in {-1, +1}; the image modality carries (2s-1)*c, i.e. the signal is
/// only decodable after un-gating with the tabular context — which is what
/// makes the fusion path genuinely better than concatenation. Whole-dataset
/// redraws enforce a minimum class balance for n >= 60.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 || spec.d_tab == 0 || spec.d_img == 0 {
        return Err(Error::Config("synthetic sizes must be positive".into()));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let d_lat = latent_dim(spec.d_tab);
    // Mixing weights are fixed per seed, independent of the redraw attempt.
    let mut mix_rng = stream(spec.seed).tag("synth-mix").rng();
    let normal = Normal::<f32>::new(0.0, 1.0).unwrap();
    let mix: Vec<f32> = (0..spec.d_tab * d_lat)
        .map(|_| normal.sample(&mut mix_rng))
        .collect();
    let img_dir: Vec<f32> = (0..spec.d_img).map(|_| normal.sample(&mut mix_rng)).collect();

    let min_class = if spec.n >= 60 { spec.n / 12 } else { 0 };
    for attempt in 0..200u64 {
        let mut rng = stream(spec.seed).tag("synth").idx(attempt).rng();
        let mut samples = Vec::with_capacity(spec.n);
        let mut histogram = [0usize; 6];
        for id in 0..spec.n {
            let pm25: f32 = rng.random_range(0.0..=500.0);
            let class_label = aqi_to_category(pm25)?;
            histogram[class_label as usize] += 1;
            let s = pm25 / 500.0;
            let context: f32 = if rng.random::<bool>() { 1.0 } else { -1.0 };

            let s_tab = s + spec.noise * TAB_SIGNAL_NOISE * normal.sample(&mut rng);
            let mut latent = vec![0.0f32; d_lat];
            latent[0] = s_tab;
            if d_lat >= 2 {
                latent[1] = context;
            }
            for slot in latent.iter_mut().skip(2) {
                *slot = normal.sample(&mut rng);
            }
            let mut tab_feat = vec![0.0f32; spec.d_tab];
            for (row, t) in tab_feat.iter_mut().enumerate() {
                let w = &mix[row * d_lat..(row + 1) * d_lat];
                let mut acc = 0.0f32;
                for (a, b) in w.iter().zip(&latent) {
                    acc += a * b;
                }
                *t = acc + spec.noise * TAB_FEATURE_NOISE * normal.sample(&mut rng);
            }

            let gate = if d_lat >= 2 { context } else { 1.0 };
            let m = (2.0 * s - 1.0) * gate + spec.noise * IMG_SIGNAL_NOISE * normal.sample(&mut rng);
            let img_feat: Vec<f32> = img_dir
                .iter()
                .map(|&b| b * m + spec.noise * IMG_FEATURE_NOISE * normal.sample(&mut rng))
                .collect();

            samples.push(Sample {
                id: id as u64,
                img_feat,
                tab_feat,
                pm25,
                class_label,
            });
        }
        if histogram.iter().all(|&c| c >= min_class) {
            return Ok(Dataset {
                d_tab: spec.d_tab,
                d_img: spec.d_img,
                samples,
            });
        }
    }
    Err(Error::Partition(
        "could not draw a class-balanced synthetic dataset in 200 attempts".into(),
    ))
}

// ---------------------------------------------------------------------------
// Fixture files: binary blob plus a text manifest.
//
// Blob layout: magic "M2FA", version u8 = 1, row count u32, d_tab u32,
// d_img u32, then per row the tabular features, the image features (both
// little-endian f32), the pm25 f32, and the class label u8.

const BLOB_MAGIC: &[u8; 4] = b"M2FA";
const BLOB_VERSION: u8 = 1;

pub fn write_dataset_blob(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&[BLOB_VERSION])?;
    w.write_all(&(dataset.len() as u32).to_le_bytes())?;
    w.write_all(&(dataset.d_tab as u32).to_le_bytes())?;
    w.write_all(&(dataset.d_img as u32).to_le_bytes())?;
    for s in &dataset.samples {
        for &v in s.tab_feat.iter().chain(&s.img_feat) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&s.pm25.to_le_bytes())?;
        w.write_all(&[s.class_label])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_blob(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a dataset blob (bad magic)",
            path.display()
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != BLOB_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset blob version {}",
            version[0]
        )));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let n = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b)?;
    let d_tab = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b)?;
    let d_img = u32::from_le_bytes(u32b) as usize;

    let row_bytes = (d_tab + d_img + 1) * 4 + 1;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != n * row_bytes {
        return Err(Error::Data(format!(
            "dataset blob truncated: expected {} data bytes, found {}",
            n * row_bytes,
            raw.len()
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for row in 0..n {
        let base = row * row_bytes;
        let f32_at = |k: usize| -> f32 {
            f32::from_le_bytes(raw[base + 4 * k..base + 4 * k + 4].try_into().unwrap())
        };
        let tab_feat: Vec<f32> = (0..d_tab).map(f32_at).collect();
        let img_feat: Vec<f32> = (d_tab..d_tab + d_img).map(f32_at).collect();
        let pm25 = f32_at(d_tab + d_img);
        let class_label = raw[base + row_bytes - 1];
        if tab_feat.iter().chain(&img_feat).any(|v| !v.is_finite()) || !pm25.is_finite() {
            return Err(Error::Data(format!("non-finite value at row {row}")));
        }
        if class_label > 5 {
            return Err(Error::Data(format!(
                "class label {class_label} out of range at row {row}"
            )));
        }
        samples.push(Sample {
            id: row as u64,
            img_feat,
            tab_feat,
            pm25,
            class_label,
        });
    }
    Ok(Dataset {
        d_tab,
        d_img,
        samples,
    })
}

/// Text manifest describing one split: where its blob lives plus the
/// normalization statistics computed over the full training split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub n: usize,
    pub d_tab: usize,
    pub d_img: usize,
    pub stats: NormStats,
    pub data_path: PathBuf,
}

fn join_f32(values: &[f32]) -> String {
    values
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f32_list(s: &str) -> Result<Vec<f32>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| {
            tok.parse::<f32>()
                .map_err(|e| Error::Data(format!("bad float '{tok}' in manifest: {e}")))
        })
        .collect()
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let data = manifest
        .data_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| manifest.data_path.display().to_string());
    let text = format!(
        "name={}\nn={}\nd_tab={}\nd_img={}\ntasks=classification,regression\ndata={}\nmean={}\nstd={}\n",
        manifest.name,
        manifest.n,
        manifest.d_tab,
        manifest.d_img,
        data,
        join_f32(&manifest.stats.mean),
        join_f32(&manifest.stats.std),
    );
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut name = None;
    let mut n = None;
    let mut d_tab = None;
    let mut d_img = None;
    let mut mean = None;
    let mut std = None;
    let mut data = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Data(format!("manifest line {} is not key=value", lineno + 1))
        })?;
        match key {
            "name" => name = Some(value.to_string()),
            "n" => n = Some(value.parse::<usize>().map_err(|e| Error::Data(e.to_string()))?),
            "d_tab" => d_tab = Some(value.parse::<usize>().map_err(|e| Error::Data(e.to_string()))?),
            "d_img" => d_img = Some(value.parse::<usize>().map_err(|e| Error::Data(e.to_string()))?),
            "tasks" => {}
            "data" => data = Some(value.to_string()),
            "mean" => mean = Some(parse_f32_list(value)?),
            "std" => std = Some(parse_f32_list(value)?),
            other => {
                return Err(Error::Data(format!("unknown manifest key '{other}'")));
            }
        }
    }
    let missing = |what: &str| Error::Data(format!("manifest missing key '{what}'"));
    let d_tab = d_tab.ok_or_else(|| missing("d_tab"))?;
    let stats = NormStats {
        mean: mean.ok_or_else(|| missing("mean"))?,
        std: std.ok_or_else(|| missing("std"))?,
    };
    if stats.mean.len() != d_tab || stats.std.len() != d_tab {
        return Err(Error::Data(format!(
            "manifest stats have {} columns, d_tab is {d_tab}",
            stats.mean.len()
        )));
    }
    let data = data.ok_or_else(|| missing("data"))?;
    let data_path = {
        let p = PathBuf::from(&data);
        if p.is_absolute() {
            p
        } else {
            path.parent().unwrap_or(Path::new(".")).join(p)
        }
    };
    Ok(DatasetManifest {
        name: name.ok_or_else(|| missing("name"))?,
        n: n.ok_or_else(|| missing("n"))?,
        d_tab,
        d_img: d_img.ok_or_else(|| missing("d_img"))?,
        stats,
        data_path,
    })
}

/// Read a manifest's blob and apply its normalization statistics.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let raw = read_dataset_blob(&manifest.data_path)?;
    if raw.len() != manifest.n || raw.d_tab != manifest.d_tab || raw.d_img != manifest.d_img {
        return Err(Error::Data(format!(
            "blob {} is {}x(tab {}, img {}), manifest says {}x(tab {}, img {})",
            manifest.data_path.display(),
            raw.len(),
            raw.d_tab,
            raw.d_img,
            manifest.n,
            manifest.d_tab,
            manifest.d_img
        )));
    }
    normalize(raw, &manifest.stats)
}

/// Write blob + manifest for one split into `dir`.
pub fn write_split(
    dir: &Path,
    name: &str,
    dataset: &Dataset,
    stats: &NormStats,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let data_path = dir.join(format!("{name}.bin"));
    write_dataset_blob(&data_path, dataset)?;
    let manifest = DatasetManifest {
        name: name.to_string(),
        n: dataset.len(),
        d_tab: dataset.d_tab,
        d_img: dataset.d_img,
        stats: stats.clone(),
        data_path,
    };
    write_manifest(&dir.join(format!("{name}.manifest")), &manifest)?;
    Ok(manifest)
}
