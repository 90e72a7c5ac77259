//! Synthetic ground-truth images and on-disk datasets.
//!
//! Images live on `[-1, 1]^2` with pixel `(r, c)` at
//! `x = (c - N/2) / (N/2)`, `y = (N/2 - r) / (N/2)`, so pixel `(N/2, N/2)`
//! sits exactly at the origin. Every image is clamped to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, TnsrError};
use crate::tensor::{derive_seed, RealTensor2, RngStream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image size {0} must be a power of two")]
    Size(usize),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("manifest lists {file} but it cannot be loaded: {source}")]
    MissingItem { file: String, source: TnsrError },
    #[error("manifest inconsistency: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tnsr(#[from] TnsrError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: RealTensor2,
    pub kind: PhantomKind,
    pub seed: u64,
}

/// Filled ellipse with additive intensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Rotation in degrees, counter-clockwise.
    pub angle_deg: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

const fn ell(intensity: f64, semi_x: f64, semi_y: f64, cx: f64, cy: f64, angle: f64) -> Ellipse {
    Ellipse {
        intensity,
        semi_x,
        semi_y,
        center_x: cx,
        center_y: cy,
        angle_deg: angle,
    }
}

/// The ten ellipses of the contrast-enhanced ("modified") Shepp-Logan head.
pub const SHEPP_LOGAN: [Ellipse; 10] = [
    ell(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    ell(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    ell(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    ell(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    ell(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    ell(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    ell(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    ell(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    ell(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    ell(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

pub fn pixel_coords(size: usize, row: usize, col: usize) -> (f64, f64) {
    let half = size as f64 / 2.0;
    ((col as f64 - half) / half, (half - row as f64) / half)
}

fn rasterize(size: usize, ellipses: &[Ellipse]) -> RealTensor2 {
    RealTensor2::from_fn(size, size, |r, c| {
        let (x, y) = pixel_coords(size, r, c);
        let v: f64 = ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum();
        v.clamp(0.0, 1.0)
    })
}

fn check_size(size: usize) -> Result<(), DataError> {
    if size.is_power_of_two() {
        Ok(())
    } else {
        Err(DataError::Size(size))
    }
}

pub fn shepp_logan(size: usize) -> Result<Phantom, DataError> {
    check_size(size)?;
    Ok(Phantom {
        image: rasterize(size, &SHEPP_LOGAN),
        kind: PhantomKind::SheppLogan,
        seed: 0,
    })
}

/// Skull-like bright annulus shared by every random phantom.
pub const SKULL_OUTER: Ellipse = ell(0.9, 0.86, 0.96, 0.0, 0.0, 0.0);
pub const SKULL_INNER: Ellipse = ell(-0.9, 0.78, 0.88, 0.0, 0.0, 0.0);

/// Dark background, a skull ring, and `count_range` random tissue ellipses
/// inside it.
pub fn random_ellipses(
    size: usize,
    count_range: (usize, usize),
    rng: &mut RngStream,
) -> Result<Phantom, DataError> {
    check_size(size)?;
    let (lo, hi) = count_range;
    if lo > hi {
        return Err(DataError::Config(format!(
            "count range ({lo}, {hi}) is empty"
        )));
    }
    let count = lo + rng.below(hi - lo + 1);
    let mut ellipses = vec![SKULL_OUTER, SKULL_INNER];
    for _ in 0..count {
        let radius = 0.55 * rng.uniform().sqrt();
        let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
        ellipses.push(Ellipse {
            intensity: rng.uniform_range(0.15, 0.6),
            semi_x: rng.uniform_range(0.06, 0.3),
            semi_y: rng.uniform_range(0.06, 0.3),
            center_x: radius * theta.cos(),
            center_y: radius * theta.sin(),
            angle_deg: rng.uniform_range(0.0, 180.0),
        });
    }
    Ok(Phantom {
        image: rasterize(size, &ellipses),
        kind: PhantomKind::RandomEllipses,
        seed: rng.seed(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: PhantomKind,
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_count_range")]
    pub count_range: (usize, usize),
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_count_range() -> (usize, usize) {
    (3, 8)
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: PhantomKind::RandomEllipses,
            size: 64,
            count: 100,
            seed: 1,
            count_range: default_count_range(),
            train_fraction: default_train_fraction(),
        }
    }
}

impl DatasetConfig {
    pub fn train_count(&self) -> usize {
        (self.count as f64 * self.train_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub items: Vec<Phantom>,
}

impl Dataset {
    pub fn images(&self) -> Vec<RealTensor2> {
        self.items.iter().map(|p| p.image.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Train and test splits built from one config.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub config: DatasetConfig,
    pub train: Dataset,
    pub test: Dataset,
}

/// Builds both splits. Item `i` uses seed `derive_seed(config.seed, i)`; the
/// first `train_count` items form the training split.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetSplits, DataError> {
    check_size(config.size)?;
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(DataError::Config(format!(
            "train_fraction {} outside [0, 1]",
            config.train_fraction
        )));
    }
    let n_train = config.train_count();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(config.count - n_train);
    for i in 0..config.count {
        let seed = derive_seed(config.seed, i as u64);
        let phantom = match config.kind {
            PhantomKind::SheppLogan => Phantom {
                seed,
                ..shepp_logan(config.size)?
            },
            PhantomKind::RandomEllipses => {
                random_ellipses(config.size, config.count_range, &mut RngStream::new(seed))?
            }
        };
        if i < n_train {
            train.push(phantom);
        } else {
            test.push(phantom);
        }
    }
    Ok(DatasetSplits {
        config: config.clone(),
        train: Dataset {
            split: Split::Train,
            items: train,
        },
        test: Dataset {
            split: Split::Test,
            items: test,
        },
    })
}

/// One manifest row per stored image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub file: String,
    pub kind: PhantomKind,
    pub seed: u64,
    pub size: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_dataset(dir: impl AsRef<Path>, splits: &DatasetSplits) -> Result<PathBuf, DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut items = Vec::new();
    let all = splits
        .train
        .items
        .iter()
        .map(|p| (p, Split::Train))
        .chain(splits.test.items.iter().map(|p| (p, Split::Test)));
    for (index, (phantom, split)) in all.enumerate() {
        let file = format!("{index}.tnsr");
        io::save_real(dir.join(&file), &phantom.image)?;
        items.push(ManifestItem {
            index,
            file,
            kind: phantom.kind,
            seed: phantom.seed,
            size: phantom.image.rows(),
            split,
        });
    }
    let manifest = Manifest {
        version: 1,
        config: splits.config.clone(),
        items,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetSplits, DataError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for item in &manifest.items {
        let image =
            io::load_real(dir.join(&item.file)).map_err(|source| DataError::MissingItem {
                file: item.file.clone(),
                source,
            })?;
        if image.shape() != (item.size, item.size) {
            return Err(DataError::Manifest(format!(
                "{} is {:?}, manifest says {}",
                item.file,
                image.shape(),
                item.size
            )));
        }
        let phantom = Phantom {
            image,
            kind: item.kind,
            seed: item.seed,
        };
        match item.split {
            Split::Train => train.push(phantom),
            Split::Test => test.push(phantom),
        }
    }
    Ok(DatasetSplits {
        config: manifest.config,
        train: Dataset {
            split: Split::Train,
            items: train,
        },
        test: Dataset {
            split: Split::Test,
            items: test,
        },
    })
}
