//! Dataset manifest plumbing: JSON-lines manifests with per-image
//! geo-metadata, directory ingestion with an error report, and a synthetic
//! texture corpus generator for tests and toy trainings.

use crate::error::{Error, Result};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub lat: f64,
    pub lng: f64,
    /// Spatial resolution in m/pixel.
    pub resolution: f64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Validate geo ranges, path uniqueness and resolution membership.
    pub fn validate(&self, levels: &[f64]) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            validate_entry(e, levels)?;
            if !seen.insert(&e.path) {
                return Err(Error::Dataset(format!("duplicate path {}", e.path.display())));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Write as JSON-lines, one entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(DatasetManifest { entries })
    }
}

fn validate_entry(e: &ManifestEntry, levels: &[f64]) -> Result<()> {
    if !(-90.0..=90.0).contains(&e.lat) {
        return Err(Error::Dataset(format!("lat {} out of [-90, 90] for {}", e.lat, e.path.display())));
    }
    if !(-180.0..=180.0).contains(&e.lng) {
        return Err(Error::Dataset(format!("lng {} out of [-180, 180] for {}", e.lng, e.path.display())));
    }
    if !levels.iter().any(|l| (l - e.resolution).abs() < 1e-9) {
        return Err(Error::Dataset(format!(
            "resolution {} not among declared levels {levels:?} for {}",
            e.resolution,
            e.path.display()
        )));
    }
    Ok(())
}

/// Per-file failure captured during ingestion; entries failing validation
/// are reported, never silently dropped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestError {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildReport {
    pub manifest: DatasetManifest,
    pub errors: Vec<ManifestError>,
}

/// Optional JSON sidecar overriding filename metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntrySidecar {
    pub lat: f64,
    pub lng: f64,
    pub resolution: f64,
    pub split: Split,
}

/// Parse `{lat}_{lng}_{res}.png` filename metadata.
fn parse_filename(path: &Path) -> Result<(f64, f64, f64)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset("unreadable file name".into()))?;
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 3 {
        return Err(Error::Dataset(format!(
            "file name '{stem}' does not match {{lat}}_{{lng}}_{{res}}.png"
        )));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(format!("bad number in '{stem}': {e}")))?;
    Ok((nums[0], nums[1], nums[2]))
}

/// Scan a directory of PNGs into a validated manifest. Metadata comes from
/// a `<stem>.json` sidecar when present, otherwise the filename convention.
/// Files without a sidecar default to the train split.
pub fn build_manifest(root: &Path, levels: &[f64]) -> Result<BuildReport> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("corpus root {} is not a directory", root.display())));
    }
    let mut manifest = DatasetManifest::default();
    let mut errors = Vec::new();
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("png"))
        .collect();
    paths.sort();
    for path in paths {
        let result = (|| -> Result<ManifestEntry> {
            // the image must at least decode
            image::open(&path)?;
            let sidecar_path = path.with_extension("json");
            let (lat, lng, resolution, split) = if sidecar_path.exists() {
                let sc: EntrySidecar = serde_json::from_reader(std::fs::File::open(&sidecar_path)?)?;
                (sc.lat, sc.lng, sc.resolution, sc.split)
            } else {
                let (lat, lng, res) = parse_filename(&path)?;
                (lat, lng, res, Split::Train)
            };
            let entry = ManifestEntry { path: path.clone(), lat, lng, resolution, split };
            validate_entry(&entry, levels)?;
            Ok(entry)
        })();
        match result {
            Ok(entry) => manifest.entries.push(entry),
            Err(e) => errors.push(ManifestError { path, reason: e.to_string() }),
        }
    }
    manifest.validate(levels)?;
    Ok(BuildReport { manifest, errors })
}

/// Render one synthetic terrain-like texture: a few random low-frequency
/// sinusoids per channel plus mild pixel noise, so blur/downsampling
/// destroys recoverable structure.
pub fn synthetic_texture(size: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut waves = Vec::new();
    for _ in 0..6 {
        waves.push((
            rng.gen_range(0.5..4.0) * std::f64::consts::TAU / size as f64,
            rng.gen_range(0.5..4.0) * std::f64::consts::TAU / size as f64,
            rng.gen_range(0.0..std::f64::consts::TAU),
            [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        ));
    }
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let mut v = [0.0f64; 3];
            for (fx, fy, phase, amp) in &waves {
                let s = (fx * x as f64 + fy * y as f64 + phase).sin();
                for c in 0..3 {
                    v[c] += amp[c] * s;
                }
            }
            let mut px = [0u8; 3];
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-8.0..8.0);
                px[c] = ((v[c] / 3.0 + 0.5) * 255.0 + noise).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Generate a corpus of synthetic textures with sidecar metadata; returns
/// the validated manifest. Every `val_every`-th image goes to the val split.
pub fn generate_synthetic_corpus(
    dir: &Path,
    count: usize,
    size: usize,
    resolution: f64,
    seed: u64,
    val_every: usize,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(count);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in 0..count {
        let lat: f64 = rng.gen_range(-90.0..90.0);
        let lng: f64 = rng.gen_range(-180.0..180.0);
        let split = if val_every > 0 && i % val_every == val_every - 1 { Split::Val } else { Split::Train };
        let path = dir.join(format!("tex{i:05}.png"));
        crate::imgio::save_png(&synthetic_texture(size, seed.wrapping_add(i as u64)), &path)?;
        let sidecar = EntrySidecar { lat, lng, resolution, split };
        serde_json::to_writer_pretty(std::fs::File::create(path.with_extension("json"))?, &sidecar)?;
        entries.push(ManifestEntry { path, lat, lng, resolution, split });
    }
    let manifest = DatasetManifest { entries };
    manifest.validate(&[resolution])?;
    Ok(manifest)
}
