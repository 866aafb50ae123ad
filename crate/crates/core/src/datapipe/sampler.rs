use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::resample::degrade;
use super::{BatchSpec, ImageRecord};

/// Training records indexed by identity, with every LR synthesis at each
/// seen rate precomputed.
#[derive(Debug)]
pub struct TrainPool {
    records: Vec<ImageRecord>,
    by_identity: BTreeMap<usize, Vec<usize>>,
    seen_rates: Vec<u32>,
    lr: HashMap<(usize, u32), Vec<f32>>,
    height: usize,
    width: usize,
}

impl TrainPool {
    pub fn new(records: Vec<ImageRecord>, seen_rates: &[u32]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Dataset("empty training set".into()))?;
        let (height, width) = (first.height, first.width);
        if seen_rates.is_empty() {
            return Err(Error::Config("seen_rates must not be empty".into()));
        }
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut lr = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if !r.is_hr() {
                return Err(Error::Precondition("training pool expects HR records".into()));
            }
            if (r.height, r.width) != (height, width) {
                return Err(Error::Shape(format!(
                    "record {i} is {}x{}, expected {height}x{width}",
                    r.height, r.width
                )));
            }
            by_identity.entry(r.identity).or_default().push(i);
            for &rate in seen_rates {
                lr.insert((i, rate), degrade(&r.pixels, height, width, rate));
            }
        }
        Ok(Self {
            records,
            by_identity,
            seen_rates: seen_rates.to_vec(),
            lr,
            height,
            width,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn identities(&self) -> Vec<usize> {
        self.by_identity.keys().copied().collect()
    }

    pub fn seen_rates(&self) -> &[u32] {
        &self.seen_rates
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// One training batch: an HR stream and an independently ordered LR stream.
///
/// Images are channel-planar `[B, 3, H, W]`. `lr_truth[i]` is the HR source
/// of LR sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub height: usize,
    pub width: usize,
    pub hr: Vec<f32>,
    pub hr_labels: Vec<usize>,
    pub hr_labeled: Vec<bool>,
    pub lr: Vec<f32>,
    pub lr_labels: Vec<usize>,
    pub lr_labeled: Vec<bool>,
    pub lr_rates: Vec<u32>,
    pub lr_truth: Vec<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.hr_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr_labels.is_empty()
    }

    fn tensor<T: Scalar>(&self, data: &[f32]) -> Tensor<T> {
        Tensor::from_vec(
            &[self.len(), 3, self.height, self.width],
            data.iter().map(|&v| T::from_f32(v).unwrap()).collect(),
        )
    }

    pub fn hr_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.tensor(&self.hr)
    }

    pub fn lr_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.tensor(&self.lr)
    }

    pub fn lr_truth_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.tensor(&self.lr_truth)
    }
}

/// Draw a PK batch: `P` distinct identities, `K` HR images each (with
/// replacement when an identity has fewer than `K`), each paired with an LR
/// synthesis at an independently drawn seen rate. The LR stream is shuffled
/// independently of the HR stream.
pub fn pk_sample(pool: &TrainPool, spec: BatchSpec, rng: &mut impl Rng) -> Result<Batch> {
    let ids = pool.identities();
    if ids.len() < spec.p {
        return Err(Error::Precondition(format!(
            "{} identities available, batch needs P={}",
            ids.len(),
            spec.p
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, ids.len(), spec.p).into_iter().map(|i| ids[i]).collect();
    let mut picks = Vec::with_capacity(spec.total());
    for id in chosen {
        let imgs = &pool.by_identity[&id];
        if imgs.len() >= spec.k {
            picks.extend(index::sample(rng, imgs.len(), spec.k).into_iter().map(|i| imgs[i]));
        } else {
            picks.extend((0..spec.k).map(|_| imgs[rng.gen_range(0..imgs.len())]));
        }
    }
    let rates: Vec<u32> = picks
        .iter()
        .map(|_| pool.seen_rates[rng.gen_range(0..pool.seen_rates.len())])
        .collect();
    let mut order: Vec<usize> = (0..picks.len()).collect();
    order.shuffle(rng);

    let (h, w) = (pool.height, pool.width);
    let plane = |pixels: &[f32], out: &mut Vec<f32>| {
        let hw = h * w;
        let start = out.len();
        out.resize(start + 3 * hw, 0.0);
        for (i, px) in pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[start + c * hw + i] = px[c];
            }
        }
    };
    let mut batch = Batch {
        height: h,
        width: w,
        hr: Vec::new(),
        hr_labels: Vec::new(),
        hr_labeled: Vec::new(),
        lr: Vec::new(),
        lr_labels: Vec::new(),
        lr_labeled: Vec::new(),
        lr_rates: Vec::new(),
        lr_truth: Vec::new(),
    };
    for &i in &picks {
        let r = &pool.records[i];
        plane(&r.pixels, &mut batch.hr);
        batch.hr_labels.push(r.identity);
        batch.hr_labeled.push(r.labeled);
    }
    for &j in &order {
        let i = picks[j];
        let r = &pool.records[i];
        plane(&pool.lr[&(i, rates[j])], &mut batch.lr);
        plane(&r.pixels, &mut batch.lr_truth);
        batch.lr_labels.push(r.identity);
        batch.lr_labeled.push(r.labeled);
        batch.lr_rates.push(rates[j]);
    }
    Ok(batch)
}

/// Keep labels for `round(k% · #identities)` identities chosen under `seed`;
/// every image of the remaining identities is marked unlabelled.
pub fn mask_labels(train: &[ImageRecord], k_percent: f64, seed: u64) -> Result<Vec<ImageRecord>> {
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::Precondition(format!("k must be in [0, 100], got {k_percent}")));
    }
    let mut ids: Vec<usize> = train
        .iter()
        .map(|r| r.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((k_percent / 100.0) * ids.len() as f64).round() as usize;
    let labeled: BTreeSet<usize> = ids[..keep.min(ids.len())].iter().copied().collect();
    Ok(train
        .iter()
        .map(|r| ImageRecord {
            labeled: labeled.contains(&r.identity),
            ..r.clone()
        })
        .collect())
}

/// Background batch producer feeding a bounded queue.
///
/// The producer owns its own rng stream, so the batch sequence is fixed by
/// `seed` even though production runs ahead of consumption by up to `bound`
/// batches.
pub struct Prefetcher {
    rx: Option<Receiver<Result<Batch>>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(pool: Arc<TrainPool>, spec: BatchSpec, seed: u64, bound: usize) -> Self {
        let (tx, rx) = sync_channel(bound.max(1));
        let handle = std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let batch = pk_sample(&pool, spec, &mut rng);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
        }
    }

    pub fn next_batch(&self) -> Result<Batch> {
        self.rx
            .as_ref()
            .expect("receiver alive")
            .recv()
            .map_err(|_| Error::Dataset("batch producer stopped".into()))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        drop(self.rx.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
