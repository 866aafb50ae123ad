use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::resample::synthesize_lr;
use super::{DatasetConfig, ImageRecord};

/// Train / query / gallery partition under the MLR protocol.
///
/// Camera `lr_camera` of every test identity supplies the LR queries; the
/// remaining cameras supply a single-shot HR gallery.
#[derive(Clone, Debug)]
pub struct MlrSplit {
    /// HR images of the training identities, all cameras.
    pub train: Vec<ImageRecord>,
    /// Query images (LR under the cross-resolution setting).
    pub query: Vec<ImageRecord>,
    /// HR source of each query, index-aligned with `query`.
    pub query_hr: Vec<ImageRecord>,
    /// One HR image per test identity per gallery camera.
    pub gallery: Vec<ImageRecord>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub lr_camera: usize,
}

impl MlrSplit {
    /// Same membership with every query re-synthesized at `rate`
    /// (`rate == 1` yields the standard HR-query setting).
    pub fn with_query_rate(&self, rate: u32) -> Result<MlrSplit> {
        let query = if rate == 1 {
            self.query_hr.clone()
        } else {
            self.query_hr
                .iter()
                .map(|hr| synthesize_lr(hr, rate))
                .collect::<Result<_>>()?
        };
        Ok(MlrSplit {
            query,
            ..self.clone()
        })
    }

    /// Standard setting: HR queries against the HR gallery.
    pub fn standard(&self) -> MlrSplit {
        MlrSplit {
            query: self.query_hr.clone(),
            ..self.clone()
        }
    }
}

/// Build the MLR split with query rates drawn uniformly from `cfg.seen_rates`.
pub fn build_mlr_split(records: &[ImageRecord], cfg: &DatasetConfig) -> Result<MlrSplit> {
    build_mlr_split_with_rate(records, cfg, None)
}

/// As [`build_mlr_split`], optionally forcing every query to `forced_rate`.
/// Identity membership and gallery picks depend only on the seed.
pub fn build_mlr_split_with_rate(
    records: &[ImageRecord],
    cfg: &DatasetConfig,
    forced_rate: Option<u32>,
) -> Result<MlrSplit> {
    if let Some(r) = records.iter().find(|r| !r.is_hr()) {
        return Err(Error::Precondition(format!(
            "split input must be HR, found rate {} for identity {}",
            r.rate, r.identity
        )));
    }
    let cameras: BTreeSet<usize> = records.iter().map(|r| r.camera).collect();
    if cameras.len() < 2 {
        return Err(Error::Dataset(format!(
            "cross-camera query/gallery needs at least 2 cameras, found {}",
            cameras.len()
        )));
    }
    let lr_camera = *cameras.iter().next().unwrap();
    let mut ids: Vec<usize> = records
        .iter()
        .map(|r| r.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < 2 {
        return Err(Error::Dataset("need at least 2 identities to split".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[10])));
    let n_train = ids.len() / 2;
    let mut train_ids = ids[..n_train].to_vec();
    let mut test_ids = ids[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();

    let train = records
        .iter()
        .filter(|r| train_ids.binary_search(&r.identity).is_ok())
        .cloned()
        .collect();

    let mut rate_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[11]));
    let mut pick_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[12]));
    let mut query = Vec::new();
    let mut query_hr = Vec::new();
    let mut gallery = Vec::new();
    for &id in &test_ids {
        for r in records.iter().filter(|r| r.identity == id && r.camera == lr_camera) {
            // always consume a draw so forcing the rate leaves other streams untouched
            let drawn = cfg.seen_rates[rate_rng.gen_range(0..cfg.seen_rates.len())];
            let rate = forced_rate.unwrap_or(drawn);
            query.push(if rate == 1 { r.clone() } else { synthesize_lr(r, rate)? });
            query_hr.push(r.clone());
        }
        for &cam in cameras.iter().filter(|&&c| c != lr_camera) {
            let candidates: Vec<&ImageRecord> =
                records.iter().filter(|r| r.identity == id && r.camera == cam).collect();
            if let Some(pick) = candidates.choose(&mut pick_rng) {
                gallery.push((*pick).clone());
            }
        }
    }
    Ok(MlrSplit {
        train,
        query,
        query_hr,
        gallery,
        train_ids,
        test_ids,
        lr_camera,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::generate_toy_dataset;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            height: 16,
            width: 8,
            num_identities: 10,
            images_per_id_per_cam: 2,
            cameras: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn ten_identity_split_sizes() {
        let cfg = small_cfg();
        let split = build_mlr_split(&generate_toy_dataset(&cfg), &cfg).unwrap();
        assert_eq!(split.train_ids.len(), 5);
        assert_eq!(split.test_ids.len(), 5);
        assert_eq!(split.train.len(), 5 * 2 * 2);
        assert_eq!(split.query.len(), 10);
        assert_eq!(split.gallery.len(), 5);
        let train: BTreeSet<_> = split.train_ids.iter().collect();
        assert!(split.test_ids.iter().all(|id| !train.contains(id)));
        for (q, hr) in split.query.iter().zip(&split.query_hr) {
            assert!(cfg.seen_rates.contains(&q.rate));
            assert_eq!((q.identity, q.camera), (hr.identity, hr.camera));
            assert_eq!(q.camera, split.lr_camera);
        }
        assert!(split.gallery.iter().all(|g| g.is_hr() && g.camera != split.lr_camera));
    }

    #[test]
    fn singleton_seen_rate() {
        let cfg = DatasetConfig {
            seen_rates: vec![2],
            ..small_cfg()
        };
        let split = build_mlr_split(&generate_toy_dataset(&cfg), &cfg).unwrap();
        assert!(split.query.iter().all(|q| q.rate == 2));
    }

    #[test]
    fn forced_rate_keeps_membership() {
        let cfg = small_cfg();
        let recs = generate_toy_dataset(&cfg);
        let a = build_mlr_split(&recs, &cfg).unwrap();
        let b = build_mlr_split_with_rate(&recs, &cfg, Some(8)).unwrap();
        assert_eq!(a.train_ids, b.train_ids);
        assert_eq!(a.test_ids, b.test_ids);
        assert_eq!(a.gallery, b.gallery);
        assert_eq!(a.query_hr, b.query_hr);
        assert!(b.query.iter().all(|q| q.rate == 8));
        let c = a.with_query_rate(8).unwrap();
        assert_eq!(c.query, b.query);
    }

    #[test]
    fn single_camera_is_rejected() {
        let cfg = DatasetConfig {
            cameras: 1,
            ..small_cfg()
        };
        let err = build_mlr_split(&generate_toy_dataset(&cfg), &cfg).unwrap_err();
        assert!(err.to_string().contains("2 cameras"));
    }
}
