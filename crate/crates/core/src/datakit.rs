//! Site datasets: seeded splitting, CSV ingestion and a synthetic multi-site generator.
//!
//! Synthetic sites draw class-conditional Gaussians along a fixed unit
//! direction `u`: negatives are centered at `(-1 + mean_shift) * u`, positives
//! at `(1 + mean_shift) * u`, with isotropic noise of standard deviation
//! `noise_scale`. `mean_shift` models regional domain shift; `noise_scale`
//! models acquisition quality.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;

/// Scenario definitions shipped with the crate.
pub const PRESETS_TOML: &str = include_str!("../presets/scenarios.toml");

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid profile `{site}`: {reason}")]
    InvalidProfile { site: String, reason: String },
    #[error("row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("preset file: {0}")]
    PresetFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Train/validation percentages; the test split takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train_pct: u32,
    pub val_pct: u32,
}

impl SplitRatios {
    /// 70/20/10, the default for every flow except the size sweep.
    pub const STANDARD: SplitRatios = SplitRatios {
        train_pct: 70,
        val_pct: 20,
    };
    /// 80/10/10, used by the dataset-size sweep.
    pub const SIZE_SWEEP: SplitRatios = SplitRatios {
        train_pct: 80,
        val_pct: 10,
    };
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Seeded 70/20/10 partition of `0..n`.
pub fn split_dataset(n: usize, seed: u64) -> Result<Split, DataError> {
    split_dataset_with(n, seed, SplitRatios::STANDARD)
}

/// Seeded partition: `floor(train_pct * n / 100)` train, `floor(val_pct * n / 100)` val,
/// remainder test, over a uniform permutation.
pub fn split_dataset_with(n: usize, seed: u64, ratios: SplitRatios) -> Result<Split, DataError> {
    if n < 10 {
        return Err(DataError::TooFewSamples(n));
    }
    let n_train = n * ratios.train_pct as usize / 100;
    let n_val = n * ratios.val_pct as usize / 100;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = perm.split_off(n_train + n_val);
    let val = perm.split_off(n_train);
    Ok(Split { train: perm, val, test })
}

/// Labeled feature vectors for one site. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub site_id: String,
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u8>,
    pub split: Split,
}

impl SiteDataset {
    pub fn new(
        site_id: impl Into<String>,
        dim: usize,
        features: Vec<f32>,
        labels: Vec<u8>,
        split: Split,
    ) -> Result<Self, DataError> {
        let site_id = site_id.into();
        let invalid = |reason: String| DataError::InvalidProfile {
            site: site_id.clone(),
            reason,
        };
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(invalid(format!(
                "{} feature values for {} rows of dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(invalid("labels must be 0 or 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature".into()));
        }
        let mut seen = vec![false; labels.len()];
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            if i >= labels.len() || seen[i] {
                return Err(invalid(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("split does not cover every row".into()));
        }
        Ok(Self {
            site_id,
            dim,
            features,
            labels,
            split,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Copy of this dataset restricted to the first `n` rows, re-split with `seed`.
    pub fn truncated(&self, n: usize, seed: u64, ratios: SplitRatios) -> Result<Self, DataError> {
        let n = n.min(self.len());
        Self::new(
            self.site_id.clone(),
            self.dim,
            self.features[..n * self.dim].to_vec(),
            self.labels[..n].to_vec(),
            split_dataset_with(n, seed, ratios)?,
        )
    }
}

/// Generation parameters for one synthetic site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub site_id: String,
    pub n_samples: usize,
    pub positive_fraction: f64,
    #[serde(default)]
    pub mean_shift: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SiteProfile {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: &str| {
            Err(DataError::InvalidProfile {
                site: self.site_id.clone(),
                reason: reason.into(),
            })
        };
        if self.site_id.is_empty() {
            return bad("site_id must be non-empty");
        }
        if self.n_samples < 10 {
            return bad("n_samples must be at least 10");
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad("positive_fraction must lie in (0, 1)");
        }
        if !self.mean_shift.is_finite() {
            return bad("mean_shift must be finite");
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad("noise_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Number of positive labels the generator emits.
    pub fn positive_count(&self) -> usize {
        round_half_even(self.positive_fraction * self.n_samples as f64)
    }
}

/// Rounds to the nearest integer, ties to even. Values within 1e-9 of a
/// half-integer count as ties so that decimal fractions such as 0.17 * 250
/// round as they read.
pub fn round_half_even(x: f64) -> usize {
    let floor = x.floor();
    let frac = x - floor;
    let base = floor as usize;
    if (frac - 0.5).abs() < 1e-9 {
        if base.is_multiple_of(2) {
            base
        } else {
            base + 1
        }
    } else if frac > 0.5 {
        base + 1
    } else {
        base
    }
}

/// The fixed class direction used for every synthetic site of dimension `dim`.
pub fn class_direction(dim: usize) -> Vec<f32> {
    vec![(1.0 / (dim as f64).sqrt()) as f32; dim]
}

pub fn generate_site(profile: &SiteProfile, input_dim: usize) -> Result<SiteDataset, DataError> {
    generate_site_with(profile, input_dim, SplitRatios::STANDARD)
}

pub fn generate_site_with(
    profile: &SiteProfile,
    input_dim: usize,
    ratios: SplitRatios,
) -> Result<SiteDataset, DataError> {
    profile.validate()?;
    if input_dim == 0 {
        return Err(DataError::InvalidProfile {
            site: profile.site_id.clone(),
            reason: "input_dim must be positive".into(),
        });
    }
    let n = profile.n_samples;
    let n_pos = profile.positive_count();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, 0));
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let u = class_direction(input_dim);
    let mut features = Vec::with_capacity(n * input_dim);
    for &label in &labels {
        let center = if label == 1 { 1.0 } else { -1.0 } + profile.mean_shift;
        for &uj in &u {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push((center * f64::from(uj) + profile.noise_scale * z) as f32);
        }
    }
    let split = split_dataset_with(n, derive_seed(profile.seed, 1), ratios)?;
    SiteDataset::new(profile.site_id.clone(), input_dim, features, labels, split)
}

/// Writes `f0,...,f{D-1},label` rows. Floats use shortest round-trip notation.
pub fn write_csv(data: &SiteDataset, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..data.dim())
        .map(|j| format!("f{j}"))
        .chain(["label".into()])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut line: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        line.push(data.label(i).to_string());
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV dataset and applies a seeded 70/20/10 split. The site id is the file stem.
pub fn load_csv(path: &Path, seed: u64) -> Result<SiteDataset, DataError> {
    load_csv_with(path, seed, SplitRatios::STANDARD)
}

pub fn load_csv_with(path: &Path, seed: u64, ratios: SplitRatios) -> Result<SiteDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            other => DataError::ParseError {
                row: 0,
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::ParseError {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let dim = cols.len().saturating_sub(1);
    let header_ok =
        dim >= 1 && cols.last() == Some(&"label") && cols[..dim].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
    if !header_ok {
        return Err(DataError::ParseError {
            row: 1,
            message: "header must be f0,...,f{D-1},label".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        // Row numbers are 1-based file lines; the header is line 1.
        let row = k + 2;
        let record = record.map_err(|e| DataError::ParseError {
            row,
            message: e.to_string(),
        })?;
        if record.len() != dim + 1 {
            return Err(DataError::ParseError {
                row,
                message: format!("expected {} cells, found {}", dim + 1, record.len()),
            });
        }
        for (j, cell) in record.iter().take(dim).enumerate() {
            let v: f32 = cell.parse().map_err(|_| DataError::ParseError {
                row,
                message: format!("column f{j}: `{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::ParseError {
                    row,
                    message: format!("column f{j}: non-finite value"),
                });
            }
            features.push(v);
        }
        let label = match &record[dim] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::ParseError {
                    row,
                    message: format!("label must be 0 or 1, found `{other}`"),
                })
            }
        };
        labels.push(label);
    }

    let n = labels.len();
    let split = if n >= 10 {
        split_dataset_with(n, seed, ratios)?
    } else {
        // Too small to partition; everything is training data.
        Split {
            train: (0..n).collect(),
            ..Split::default()
        }
    };
    let site_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "site".into());
    SiteDataset::new(site_id, dim, features, labels, split)
}

/// A named set of site profiles sharing a feature dimension and split policy.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub input_dim: usize,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(rename = "site")]
    pub sites: Vec<SiteProfile>,
}

#[derive(Deserialize)]
struct PresetFile {
    scenario: Vec<Scenario>,
}

pub fn parse_scenarios(text: &str) -> Result<Vec<Scenario>, DataError> {
    let file: PresetFile = toml::from_str(text).map_err(|e| DataError::PresetFile(e.to_string()))?;
    for s in &file.scenario {
        for p in &s.sites {
            p.validate()?;
        }
    }
    Ok(file.scenario)
}

pub fn scenario(name: &str) -> Result<Scenario, DataError> {
    parse_scenarios(PRESETS_TOML)?
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| DataError::UnknownPreset(name.into()))
}

pub fn scenario_preset(name: &str) -> Result<Vec<SiteProfile>, DataError> {
    Ok(scenario(name)?.sites)
}

impl Scenario {
    /// Generates every site with profile seeds re-derived from `seed`.
    pub fn generate(&self, seed: u64) -> Result<Vec<SiteDataset>, DataError> {
        self.sites
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.seed = derive_seed(p.seed, seed);
                generate_site_with(&p, self.input_dim, self.split)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(n: usize, frac: f64, noise: f64) -> SiteProfile {
        SiteProfile {
            site_id: "site".into(),
            n_samples: n,
            positive_fraction: frac,
            mean_shift: 0.0,
            noise_scale: noise,
            seed: 9,
        }
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_dataset(507, 1).unwrap().sizes(), (354, 101, 52));
        assert_eq!(split_dataset(10, 1).unwrap().sizes(), (7, 2, 1));
        assert_eq!(
            split_dataset_with(1000, 1, SplitRatios::SIZE_SWEEP).unwrap().sizes(),
            (800, 100, 100)
        );
        assert!(matches!(split_dataset(9, 1), Err(DataError::TooFewSamples(9))));
    }

    #[test]
    fn split_is_seeded() {
        assert_eq!(split_dataset(50, 3).unwrap(), split_dataset(50, 3).unwrap());
        assert_ne!(split_dataset(50, 3).unwrap(), split_dataset(50, 4).unwrap());
    }

    #[test]
    fn gambia_like_label_counts() {
        let d = generate_site(&profile(250, 0.17, 1.0), 4).unwrap();
        assert_eq!(d.positives(), 42);
        assert_eq!(d.len() - d.positives(), 208);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_half_even(42.5), 42);
        assert_eq!(round_half_even(0.17 * 250.0), 42);
        assert_eq!(round_half_even(43.5), 44);
        assert_eq!(round_half_even(2.49), 2);
        assert_eq!(round_half_even(2.51), 3);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = profile(100, 0.3, 0.5);
        assert_eq!(generate_site(&p, 3).unwrap(), generate_site(&p, 3).unwrap());
    }

    #[test]
    fn zero_noise_is_separable_along_direction() {
        let d = generate_site(&profile(60, 0.5, 0.0), 5).unwrap();
        let u = class_direction(5);
        for i in 0..d.len() {
            let proj: f32 = d.row(i).iter().zip(&u).map(|(a, b)| a * b).sum();
            if d.label(i) == 1 {
                assert!(proj > 0.99);
            } else {
                assert!(proj < -0.99);
            }
        }
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(generate_site(&profile(9, 0.5, 1.0), 2).is_err());
        assert!(generate_site(&profile(20, 0.0, 1.0), 2).is_err());
        assert!(generate_site(&profile(20, 1.0, 1.0), 2).is_err());
        assert!(generate_site(&profile(20, 0.5, -1.0), 2).is_err());
        assert!(generate_site(&profile(20, 0.5, 1.0), 0).is_err());
    }

    #[test]
    fn presets() {
        let eight = scenario_preset("eight-sites").unwrap();
        let sizes: Vec<usize> = eight.iter().map(|p| p.n_samples).collect();
        assert_eq!(sizes, vec![211, 133, 250, 205, 1726, 250, 98, 507]);
        let drc = eight.iter().find(|p| p.site_id == "drc").unwrap();
        assert_eq!(drc.positive_fraction, 0.78);
        let gambia = eight.iter().find(|p| p.site_id == "gambia").unwrap();
        assert_eq!(gambia.positive_fraction, 0.17);
        let uganda = eight.iter().find(|p| p.site_id == "uganda").unwrap();
        assert!(eight
            .iter()
            .filter(|p| p.site_id != "uganda")
            .all(|p| p.noise_scale < uganda.noise_scale));

        let pair = scenario_preset("two-sites-skewed").unwrap();
        let fracs: Vec<f64> = pair.iter().map(|p| p.positive_fraction).collect();
        assert_eq!(fracs, vec![0.17, 0.78]);

        let sweep = scenario("size-sweep").unwrap();
        assert_eq!(sweep.split, SplitRatios::SIZE_SWEEP);
        assert!(matches!(scenario_preset("nope"), Err(DataError::UnknownPreset(_))));
    }

    #[test]
    fn csv_rejects_bad_label_with_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1,label\n0.1,0.2,1\n0.3,0.4,2\n").unwrap();
        match load_csv(&path, 0) {
            Err(DataError::ParseError { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.csv");
        std::fs::write(&path, "f0,f1,label\n0.1,0.2,1\n0.3,0.4,0\n-1,2e-3,1\n").unwrap();
        let d = load_csv(&path, 0).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(d.labels(), &[1, 0, 1]);
        assert_eq!(d.site_id, "three");
    }

    #[test]
    fn csv_rejects_arity_and_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "f0,f1,label\n0.1,1\n").unwrap();
        assert!(matches!(load_csv(&path, 0), Err(DataError::ParseError { row: 2, .. })));
        std::fs::write(&path, "f0,f1,label\n0.1,abc,1\n").unwrap();
        assert!(matches!(load_csv(&path, 0), Err(DataError::ParseError { row: 2, .. })));
        std::fs::write(&path, "a,b,label\n0.1,0.2,1\n").unwrap();
        assert!(matches!(load_csv(&path, 0), Err(DataError::ParseError { row: 1, .. })));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), 0),
            Err(DataError::Io(_))
        ));
    }
}
