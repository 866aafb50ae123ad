//! Identity-labelled image records, multi-low-resolution (MLR) split
//! construction, PK batch sampling, label masking, and the procedural toy
//! identity generator.

mod io;
mod resample;
mod sampler;
mod split;
mod toy;

pub use io::{load_dataset_dir, load_split_dir, read_split_manifest, write_dataset_dir, SplitManifest};
pub use resample::{area_resize, bilinear_resize, degrade, synthesize_lr};
pub use sampler::{mask_labels, pk_sample, Batch, Prefetcher, TrainPool};
pub use split::{build_mlr_split, build_mlr_split_with_rate, MlrSplit};
pub use toy::generate_toy_dataset;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::kv::{KvDoc, KvWriter};

/// One identity-labelled RGB image, interleaved `H×W×3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub identity: usize,
    pub camera: usize,
    /// Down-sampling rate; 1 marks a native HR image.
    pub rate: u32,
    pub labeled: bool,
}

impl ImageRecord {
    pub fn is_hr(&self) -> bool {
        self.rate == 1
    }

    /// Channel-planar copy (`3×H×W`).
    pub fn planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub num_identities: usize,
    pub images_per_id_per_cam: usize,
    pub cameras: usize,
    pub seen_rates: Vec<u32>,
    pub unseen_rates: Vec<u32>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    /// The 20-identity toy configuration.
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            num_identities: 20,
            images_per_id_per_cam: 4,
            cameras: 2,
            seen_rates: vec![2, 3, 4],
            unseen_rates: vec![8],
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.num_identities == 0 || self.images_per_id_per_cam == 0 || self.cameras == 0 {
            return Err(Error::Config("identity, image and camera counts must be positive".into()));
        }
        if self.seen_rates.is_empty() {
            return Err(Error::Config("seen_rates must not be empty".into()));
        }
        let seen: BTreeSet<u32> = self.seen_rates.iter().copied().collect();
        let unseen: BTreeSet<u32> = self.unseen_rates.iter().copied().collect();
        if let Some(r) = seen.intersection(&unseen).next() {
            return Err(Error::Config(format!("rate {r} is both seen and unseen")));
        }
        for &r in seen.iter().chain(&unseen) {
            if r < 2 {
                return Err(Error::Config(format!("rate {r} is not a down-sampling rate")));
            }
            if self.height / r as usize == 0 || self.width / r as usize == 0 {
                return Err(Error::Config(format!(
                    "rate {r} collapses a {}x{} image",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn num_records(&self) -> usize {
        self.num_identities * self.images_per_id_per_cam * self.cameras
    }

    pub const KEYS: [&'static str; 8] = [
        "height",
        "width",
        "num_identities",
        "images_per_id_per_cam",
        "cameras",
        "seen_rates",
        "unseen_rates",
        "seed",
    ];

    /// Read from `section` of `doc`; missing keys keep their defaults.
    pub fn from_kv(doc: &KvDoc, section: &str) -> Result<Self> {
        let d = Self::default();
        let mut s = doc.section(section);
        let cfg = Self {
            height: s.get_or("height", d.height)?,
            width: s.get_or("width", d.width)?,
            num_identities: s.get_or("num_identities", d.num_identities)?,
            images_per_id_per_cam: s.get_or("images_per_id_per_cam", d.images_per_id_per_cam)?,
            cameras: s.get_or("cameras", d.cameras)?,
            seen_rates: s.get_list("seen_rates")?.unwrap_or(d.seen_rates),
            unseen_rates: s.get_list("unseen_rates")?.unwrap_or(d.unseen_rates),
            seed: s.get_or("seed", d.seed)?,
        };
        s.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("height", self.height)
            .kv("width", self.width)
            .kv("num_identities", self.num_identities)
            .kv("images_per_id_per_cam", self.images_per_id_per_cam)
            .kv("cameras", self.cameras)
            .list("seen_rates", &self.seen_rates)
            .list("unseen_rates", &self.unseen_rates)
            .kv("seed", self.seed);
    }
}

/// `P` identities × `K` images per identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
}

impl BatchSpec {
    pub fn new(p: usize, k: usize) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Precondition(format!(
                "PK batches need P >= 2 and K >= 2 (got P={p}, K={k})"
            )));
        }
        Ok(Self { p, k })
    }

    pub fn total(&self) -> usize {
        self.p * self.k
    }
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { p: 4, k: 2 }
    }
}
