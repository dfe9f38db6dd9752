//! On-disk synthetic datasets: MTSR1 slice pairs plus a CSV manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::phantom::jaw_phantom;
use super::{simulate_ma_pair, PhantomImage, SimParams, MIN_METAL_PIXELS};
use crate::error::{Error, Result};
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Every fifth pair goes to the test split.
    pub fn for_index(i: usize) -> Split {
        if i % 5 == 4 {
            Split::Test
        } else {
            Split::Train
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub pair_id: String,
    /// Relative to the dataset directory.
    pub clean_path: String,
    pub ma_path: String,
    pub split: Split,
    pub mask_pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

/// A loaded pair of `[1, H, W]` HU tensors.
#[derive(Debug, Clone)]
pub struct Pair {
    pub id: String,
    pub ma: Tensor,
    pub clean: Tensor,
}

fn generate_pair(size: usize, seed: u64, params: &SimParams) -> Result<(PhantomImage, PhantomImage, usize)> {
    // Redraw until the degraded slice qualifies; in practice the first draw does.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let p = jaw_phantom(size, &mut rng)?;
        let (ma, clean) = simulate_ma_pair(&p.image, &p.metal_mask, params)?;
        let over = ma.count_at_least(params.metal_threshold);
        let streaks = ma.hu.iter().zip(&clean.hu).zip(&p.metal_mask).any(|((a, b), &m)| !m && a != b);
        if over >= MIN_METAL_PIXELS && streaks {
            return Ok((ma, clean, p.metal_pixels()));
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not draw a qualifying metal-artifact slice in {MAX_ATTEMPTS} attempts (seed {seed})"
    )))
}

/// Generates `n_pairs` phantoms with metal, simulates artifacts and writes
/// `pair_XXXX_clean.mtsr`, `pair_XXXX_ma.mtsr` and `manifest.csv` into
/// `out_dir`. Pair `i` is drawn from seed `seed ^ i`, so output does not
/// depend on the thread count.
pub fn make_dataset(n_pairs: usize, size: usize, seed: u64, out_dir: impl AsRef<Path>, params: &SimParams) -> Result<DatasetManifest> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::InvalidArgument(format!("size must be a positive multiple of 8, got {size}")));
    }
    params.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(&root)?;

    let rows: Vec<ManifestRow> = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let (ma, clean, mask_pixel_count) = generate_pair(size, seed ^ i as u64, params)?;
            let pair_id = format!("pair_{i:04}");
            let clean_path = format!("{pair_id}_clean.mtsr");
            let ma_path = format!("{pair_id}_ma.mtsr");
            save_tensor(root.join(&clean_path), &clean.to_tensor())?;
            save_tensor(root.join(&ma_path), &ma.to_tensor())?;
            Ok(ManifestRow { pair_id, clean_path, ma_path, split: Split::for_index(i), mask_pixel_count })
        })
        .collect::<Result<_>>()?;

    let mut w = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(DatasetManifest { root, rows })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = dir.as_ref().to_path_buf();
    let mut r = csv::Reader::from_path(root.join(MANIFEST_FILE))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(DatasetManifest { root, rows })
}

pub fn load_pair(manifest: &DatasetManifest, row: &ManifestRow) -> Result<Pair> {
    let clean = load_tensor(manifest.root.join(&row.clean_path))?;
    let ma = load_tensor(manifest.root.join(&row.ma_path))?;
    if clean.shape() != ma.shape() {
        return Err(Error::Shape(format!(
            "{}: clean {:?} and degraded {:?} differ",
            row.pair_id,
            clean.shape(),
            ma.shape()
        )));
    }
    Ok(Pair { id: row.pair_id.clone(), ma, clean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rule() {
        let s: Vec<_> = (0..10).map(Split::for_index).collect();
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 2);
        assert_eq!(s[4], Split::Test);
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert!("val".parse::<Split>().is_err());
    }

    #[test]
    fn rejects_bad_size() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_dataset(1, 60, 0, dir.path(), &SimParams::default()).is_err());
    }
}
