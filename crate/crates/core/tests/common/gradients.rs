//! Finite-difference checks of every loss through a tiny double-precision
//! network, each against the parameters that loss trains. Every function
//! returns one labelled report per check.

use std::collections::BTreeMap;

use crossres::gradcheck::{self, GradCheckReport};
use crossres::losses;
use crossres::network::{group_ids, EmbeddingMode, FeaturePyramid, NetworkBundle, NetworkConfig};
use crossres::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{rand_images, tiny_config, tiny_network, TINY_H, TINY_W};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_PARAMS: usize = 1000;
const LABELS: [usize; 4] = [0, 0, 1, 1];
const LABELED: [bool; 4] = [true; 4];

pub type Checks = Vec<(String, GradCheckReport)>;

/// A check passes when something was compared, the gradient is not
/// trivially zero, and the relative error is under [`TOLERANCE`].
pub fn passes(r: &GradCheckReport) -> bool {
    r.checked > 0 && r.analytic_norm > 1e-8 && r.relative_error < TOLERANCE
}

pub fn describe(name: &str, r: &GradCheckReport) -> String {
    format!(
        "{name}: relative error {:.2e} over {} entries (max abs {:.2e}, |grad| {:.2e})",
        r.relative_error, r.checked, r.max_abs_error, r.analytic_norm
    )
}

struct Setup {
    net: NetworkBundle,
    x_h: Tensor<f64>,
    x_l: Tensor<f64>,
}

fn setup(mode: EmbeddingMode, seed: u64) -> (Setup, ParamStore<f64>) {
    let (net, store) = tiny_network(
        NetworkConfig {
            embedding: mode,
            ..tiny_config()
        },
        seed,
    );
    assert!(store.numel() <= MAX_PARAMS, "{} parameters", store.numel());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let s = Setup {
        net,
        x_h: rand_images(&mut rng, 4, TINY_H, TINY_W),
        x_l: rand_images(&mut rng, 4, TINY_H, TINY_W),
    };
    (s, store)
}

/// Parameter count of the network every check runs on.
pub fn network_size() -> usize {
    setup(EmbeddingMode::Joint, 0).1.numel()
}

/// Encode the stacked `[x_h; x_l]` batch and decode it.
fn encode_decode(s: &Setup, g: &mut Graph<'_, f64>) -> (FeaturePyramid, Var) {
    let x = g.input(Tensor::cat_outer(&[&s.x_h, &s.x_l]));
    let pyr = s.net.encode(g, x).unwrap();
    let rec = s.net.decode(g, &pyr).unwrap();
    (pyr, rec)
}

fn feature_probs(s: &Setup, g: &mut Graph<'_, f64>, pyr: &FeaturePyramid) -> (BTreeMap<usize, Var>, BTreeMap<usize, Var>) {
    let (mut h, mut l) = (BTreeMap::new(), BTreeMap::new());
    for j in s.net.align_levels() {
        let p = s.net.discriminate_feature(g, j, pyr.level(j)).unwrap();
        h.insert(j, g.slice_batch(p, 0, 4));
        l.insert(j, g.slice_batch(p, 4, 4));
    }
    (h, l)
}

/// Probabilities for real HR images, recoveries of HR and recoveries of LR.
fn image_probs(s: &Setup, g: &mut Graph<'_, f64>, rec: Var) -> (Var, Var, Var) {
    let real = g.input(s.x_h.clone());
    let stack = g.concat_batch(&[real, rec]);
    let p = s.net.discriminate_image(g, stack).unwrap();
    (g.slice_batch(p, 0, 4), g.slice_batch(p, 4, 4), g.slice_batch(p, 8, 4))
}

pub fn feature_adversarial() -> Checks {
    let (s, mut store) = setup(EmbeddingMode::Joint, 1);
    let disc = s.net.feature_disc_ids(&store);
    let enc = group_ids(&store, &["E"]);
    let d = gradcheck::check(&mut store, &disc, STEP, |g| {
        let (pyr, _) = encode_decode(&s, g);
        let (h, l) = feature_probs(&s, g, &pyr);
        losses::adv_feature_loss(g, &h, &l).unwrap().0.d_loss
    });
    let e = gradcheck::check(&mut store, &enc, STEP, |g| {
        let (pyr, _) = encode_decode(&s, g);
        let (h, l) = feature_probs(&s, g, &pyr);
        losses::adv_feature_loss(g, &h, &l).unwrap().0.g_loss
    });
    vec![("adv_F wrt D_F".into(), d), ("adv_F wrt E".into(), e)]
}

pub fn reconstruction() -> Checks {
    let (s, mut store) = setup(EmbeddingMode::Joint, 2);
    let enc_dec = group_ids(&store, &["E", "G"]);
    let r = gradcheck::check(&mut store, &enc_dec, STEP, |g| {
        let (_, rec) = encode_decode(&s, g);
        let rh = g.slice_batch(rec, 0, 4);
        let rl = g.slice_batch(rec, 4, 4);
        let th = g.input(s.x_h.clone());
        let tl = g.input(s.x_h.clone());
        losses::rec_loss(g, rh, rl, th, tl).unwrap()
    });
    vec![("rec wrt E, G".into(), r)]
}

pub fn image_adversarial() -> Checks {
    let (s, mut store) = setup(EmbeddingMode::Joint, 3);
    let disc = s.net.image_disc_ids(&store);
    let enc_dec = group_ids(&store, &["E", "G"]);
    let mut out = Checks::new();
    for dedup in [false, true] {
        let r = gradcheck::check(&mut store, &disc, STEP, |g| {
            let (_, rec) = encode_decode(&s, g);
            let (real, fh, fl) = image_probs(&s, g, rec);
            losses::adv_image_loss(g, real, fl, fh, dedup).unwrap().d_loss
        });
        out.push((format!("adv_I wrt D_I (dedup {dedup})"), r));
    }
    let r = gradcheck::check(&mut store, &enc_dec, STEP, |g| {
        let (_, rec) = encode_decode(&s, g);
        let (real, fh, fl) = image_probs(&s, g, rec);
        losses::adv_image_loss(g, real, fl, fh, false).unwrap().g_loss
    });
    out.push(("adv_I wrt E, G".into(), r));
    out
}

pub fn consistency() -> Checks {
    let (s, mut store) = setup(EmbeddingMode::Joint, 4);
    // targets are constants computed once from the ground truth
    let targets = {
        let mut g = Graph::new(&store);
        let t = g.input(Tensor::cat_outer(&[&s.x_h, &s.x_h]));
        let gt = s.net.hr_encode(&mut g, t).unwrap();
        g.value(gt).clone()
    };
    let mut out = Checks::new();
    // F alone, as trained, and the whole chain E → G → F
    for prefixes in [&["F"][..], &["E", "G", "F"][..]] {
        let trainable = group_ids(&store, prefixes);
        let r = gradcheck::check(&mut store, &trainable, STEP, |g| {
            let (_, rec) = encode_decode(&s, g);
            let gm = s.net.hr_encode(g, rec).unwrap();
            let (gh, gl) = (g.slice_batch(gm, 0, 4), g.slice_batch(gm, 4, 4));
            let t = g.input(targets.clone());
            let (th, tl) = (g.slice_batch(t, 0, 4), g.slice_batch(t, 4, 4));
            losses::consist_loss(g, gh, gl, th, tl).unwrap()
        });
        out.push((format!("consist wrt {}", prefixes.join(", ")), r));
    }
    out
}

pub fn identity() -> Checks {
    let modes = [EmbeddingMode::Joint, EmbeddingMode::FOnly, EmbeddingMode::GOnly];
    modes
        .into_iter()
        .enumerate()
        .map(|(k, mode)| {
            let (s, mut store) = setup(mode, 5 + k as u64);
            let main = s.net.main_ids(&store);
            let r = gradcheck::check(&mut store, &main, STEP, |g| {
                let x = g.input(s.x_l.clone());
                let (u, _) = s.net.embed(g, x).unwrap();
                let logits = s.net.classify_pooled(g, u);
                losses::id_loss(g, logits, &LABELS, &LABELED).unwrap()
            });
            (format!("id wrt E, G, F, C ({mode})"), r)
        })
        .collect()
}

pub fn triplet() -> Checks {
    let (s, mut store) = setup(EmbeddingMode::Joint, 8);
    let main = s.net.main_ids(&store);
    let r = gradcheck::check(&mut store, &main, STEP, |g| {
        let x = g.input(s.x_l.clone());
        let (u, _) = s.net.embed(g, x).unwrap();
        losses::triplet_loss(g, u, &LABELS, &LABELED, 2.0).unwrap()
    });
    vec![("tri wrt E, G, F, C".into(), r)]
}

/// A weighted sum of the generator-side terms, against every parameter.
pub fn weighted_total() -> Checks {
    let (s, mut store) = setup(EmbeddingMode::Joint, 9);
    let all: Vec<ParamId> = store.ids().collect();
    let r = gradcheck::check(&mut store, &all, STEP, |g| {
        let (pyr, rec) = encode_decode(&s, g);
        let (h, l) = feature_probs(&s, g, &pyr);
        let adv_f = losses::adv_feature_loss(g, &h, &l).unwrap().0.g_loss;
        let (real, fh, fl) = image_probs(&s, g, rec);
        let adv_i = losses::adv_image_loss(g, real, fl, fh, false).unwrap().g_loss;
        let (rh, rl) = (g.slice_batch(rec, 0, 4), g.slice_batch(rec, 4, 4));
        let (th, tl) = (g.input(s.x_h.clone()), g.input(s.x_h.clone()));
        let rec_l = losses::rec_loss(g, rh, rl, th, tl).unwrap();
        let x = g.input(s.x_h.clone());
        let (u, _) = s.net.embed(g, x).unwrap();
        let logits = s.net.classify_pooled(g, u);
        let id = losses::id_loss(g, logits, &LABELS, &LABELED).unwrap();
        let tri = losses::triplet_loss(g, u, &LABELS, &LABELED, 2.0).unwrap();
        g.weighted_sum(&[(adv_f, 0.7), (adv_i, 0.3), (rec_l, 1.5), (id, 1.0), (tri, 1.0)])
    });
    vec![("weighted total wrt all".into(), r)]
}

pub fn all() -> Checks {
    [
        feature_adversarial(),
        reconstruction(),
        image_adversarial(),
        consistency(),
        identity(),
        triplet(),
        weighted_total(),
    ]
    .concat()
}
