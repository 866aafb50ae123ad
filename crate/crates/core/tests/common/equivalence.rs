//! Randomized comparisons of the library against the brute-force oracles in
//! the parent module. Each returns a short summary, or the first mismatch.

use crossres::evaluator::{cmc_map, rank_query, ssim, GalleryIndex};
use crossres::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{brute_force_cmc_map, ssim_oracle, triplet_oracle};

pub type Outcome = Result<String, String>;

struct Instance {
    queries: Vec<Vec<f32>>,
    query_ids: Vec<usize>,
    query_cams: Vec<usize>,
    gallery: Vec<Vec<f32>>,
    gallery_ids: Vec<usize>,
    gallery_cams: Vec<usize>,
}

/// A random retrieval problem with at most 12 gallery rows. Coordinates come
/// from a coarse grid half of the time so that tied distances occur.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.gen_range(1..=4);
    let cams = rng.gen_range(2..=3);
    let ids = rng.gen_range(2..=5);
    let coarse = rng.gen_bool(0.5);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..dim)
            .map(|_| if coarse { rng.gen_range(0..3) as f32 } else { rng.gen_range(-1.0..1.0) })
            .collect()
    };
    let size = rng.gen_range(ids..=12);
    // every identity gets one entry on a random camera, the rest are free
    let mut gallery_ids: Vec<usize> = (0..ids).collect();
    gallery_ids.extend((ids..size).map(|_| rng.gen_range(0..ids)));
    gallery_ids.shuffle(rng);
    let gallery_cams: Vec<usize> = gallery_ids.iter().map(|_| rng.gen_range(0..cams)).collect();
    let gallery = (0..size).map(|_| vec(rng)).collect();

    let (mut queries, mut query_ids, mut query_cams) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..rng.gen_range(1..=6) {
        let qid = rng.gen_range(0..ids);
        // a camera that leaves at least one match after exclusion
        let usable: Vec<usize> = (0..cams)
            .filter(|&c| gallery_ids.iter().zip(&gallery_cams).any(|(&i, &gc)| i == qid && gc != c))
            .collect();
        let Some(&cam) = usable.choose(rng) else { continue };
        queries.push(vec(rng));
        query_ids.push(qid);
        query_cams.push(cam);
    }
    if queries.is_empty() {
        return random_instance(rng);
    }
    Instance {
        queries,
        query_ids,
        query_cams,
        gallery,
        gallery_ids,
        gallery_cams,
    }
}

/// CMC and mAP must equal the oracle exactly on every instance.
pub fn retrieval(instances: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut with_ties = 0;
    for case in 0..instances {
        let inst = random_instance(&mut rng);
        let dim = inst.gallery[0].len();
        let index = GalleryIndex::new(dim, inst.gallery.concat(), inst.gallery_ids.clone(), inst.gallery_cams.clone())
            .map_err(|e| e.to_string())?;
        let rankings = inst
            .queries
            .iter()
            .map(|q| rank_query(q, &index))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let got = cmc_map(&rankings, &inst.query_ids, &inst.query_cams, &index).map_err(|e| e.to_string())?;
        let (cmc, map) = brute_force_cmc_map(
            &inst.queries,
            &inst.query_ids,
            &inst.query_cams,
            &inst.gallery,
            &inst.gallery_ids,
            &inst.gallery_cams,
        );
        if got.cmc != cmc || got.map != map {
            return Err(format!("instance {case}: cmc {:?} mAP {} vs oracle {cmc:?} {map}", got.cmc, got.map));
        }
        with_ties += usize::from(inst.gallery.iter().enumerate().any(|(i, a)| inst.gallery[..i].contains(a)));
    }
    if with_ties * 10 < instances {
        return Err(format!("only {with_ties} of {instances} instances have tied gallery rows"));
    }
    Ok(format!("{instances} instances, {with_ties} with ties, all exact"))
}

/// Batch-hard triplet loss on random 8-point batches, to 1e-12.
pub fn triplet(batches: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::<f64>::new();
    let (mut active, mut worst) = (0, 0.0f64);
    for case in 0..batches {
        let dim = rng.gen_range(1..=5);
        let ids = rng.gen_range(2..=4);
        let mut labels: Vec<usize> = (0..8).map(|i| i % ids).collect();
        labels.shuffle(&mut rng);
        let labeled: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.85)).collect();
        let margin = [0.0, 0.3, 2.0][case % 3];
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();

        let mut g = Graph::new(&store);
        let u = g.input(Tensor::from_vec(&[8, dim], rows.concat()));
        let (loss, _) = g.batch_hard_triplet(u, &labels, &labeled, margin);
        let got = g.scalar(loss);
        let want = triplet_oracle(&rows, &labels, &labeled, margin);
        if (got - want).abs() > 1e-12 {
            return Err(format!("batch {case}: {got} vs oracle {want}"));
        }
        worst = worst.max((got - want).abs());
        active += usize::from(want > 0.0);
    }
    if active * 2 < batches {
        return Err(format!("only {active} of {batches} batches have a positive loss"));
    }
    Ok(format!("{batches} batches ({active} with positive loss), max deviation {worst:.1e}"))
}

/// Interleaved HWC image in `[0, 1]`.
fn rand_hwc(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// SSIM on random image pairs, to 1e-6.
pub fn structural_similarity(pairs: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..pairs {
        let (h, w) = (rng.gen_range(11..=24), rng.gen_range(11..=20));
        let x = rand_hwc(&mut rng, h, w);
        // half the pairs are strongly correlated, half independent
        let y: Vec<f32> = if case % 2 == 0 {
            x.iter().map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)).collect()
        } else {
            rand_hwc(&mut rng, h, w)
        };
        let got = ssim(&x, &y, h, w).map_err(|e| e.to_string())?;
        let want = ssim_oracle(&x, &y, h, w);
        if (got - want).abs() >= 1e-6 {
            return Err(format!("pair {case} ({h}x{w}): {got} vs oracle {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(format!("{pairs} pairs, max deviation {worst:.1e}"))
}
