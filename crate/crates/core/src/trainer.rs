//! One optimisation iteration and the state it mutates.
//!
//! An iteration runs four phases in a fixed order:
//!
//! 1. encoder/decoder update on the generator side of both adversarial
//!    losses plus reconstruction;
//! 2. discriminator update on activations from phase 1, detached;
//! 3. HR-encoder update on the consistency loss;
//! 4. a fresh forward pass and a joint update of every non-discriminator
//!    parameter on identity plus triplet loss.
//!
//! A term whose weight is zero is neither computed nor reported; its column
//! reads 0 and the discriminator it would train stays untouched.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{pk_sample, Batch, BatchSpec, TrainPool};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::kv::{KvDoc, KvWriter};
use crate::losses::{self, LossReport, LossTerms, LossWeights};
use crate::network::{group, group_ids, NetworkBundle, NetworkConfig};
use crate::optim::{Sgd, SgdConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_disc: f64,
    pub batch: BatchSpec,
    pub iterations: usize,
    pub inner_crgan_steps: usize,
    pub inner_disc_steps: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Serial batch sampling in the training thread.
    pub deterministic: bool,
    /// Percentage of training identities whose labels are kept.
    pub label_percent: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_main: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_disc: 1e-4,
            batch: BatchSpec::default(),
            iterations: 1000,
            inner_crgan_steps: 1,
            inner_disc_steps: 1,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            deterministic: true,
            label_percent: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero rates are accepted so a phase can be frozen explicitly
        for (name, v) in [("lr_main", self.lr_main), ("lr_disc", self.lr_disc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.inner_crgan_steps == 0 || self.inner_disc_steps == 0 {
            return Err(Error::Config("inner step counts must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.label_percent) {
            return Err(Error::Config(format!("label_percent must be in [0, 100], got {}", self.label_percent)));
        }
        BatchSpec::new(self.batch.p, self.batch.k)?;
        self.weights.validate()
    }

    pub fn from_kv(doc: &KvDoc, section: &str) -> Result<Self> {
        let d = Self::default();
        let mut s = doc.section(section);
        let cfg = Self {
            lr_main: s.get_or("lr_main", d.lr_main)?,
            momentum: s.get_or("momentum", d.momentum)?,
            weight_decay: s.get_or("weight_decay", d.weight_decay)?,
            lr_disc: s.get_or("lr_disc", d.lr_disc)?,
            batch: BatchSpec {
                p: s.get_or("batch_p", d.batch.p)?,
                k: s.get_or("batch_k", d.batch.k)?,
            },
            iterations: s.get_or("iterations", d.iterations)?,
            inner_crgan_steps: s.get_or("inner_crgan_steps", d.inner_crgan_steps)?,
            inner_disc_steps: s.get_or("inner_disc_steps", d.inner_disc_steps)?,
            weights: LossWeights::read(&mut s)?,
            seed: s.get_or("seed", d.seed)?,
            eval_every: s.get_or("eval_every", d.eval_every)?,
            checkpoint_every: s.get_or("checkpoint_every", d.checkpoint_every)?,
            deterministic: s.get_or("deterministic", d.deterministic)?,
            label_percent: s.get_or("label_percent", d.label_percent)?,
        };
        s.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("lr_main", self.lr_main)
            .kv("momentum", self.momentum)
            .kv("weight_decay", self.weight_decay)
            .kv("lr_disc", self.lr_disc)
            .kv("batch_p", self.batch.p)
            .kv("batch_k", self.batch.k)
            .kv("iterations", self.iterations)
            .kv("inner_crgan_steps", self.inner_crgan_steps)
            .kv("inner_disc_steps", self.inner_disc_steps);
        self.weights.write_kv(w);
        w.kv("seed", self.seed)
            .kv("eval_every", self.eval_every)
            .kv("checkpoint_every", self.checkpoint_every)
            .kv("deterministic", self.deterministic)
            .kv("label_percent", self.label_percent);
    }

    fn main_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr_main,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    fn disc_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr_disc,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Momentum buffers of the main (`E`, `G`, `F`, `C`) and discriminator
/// optimisers.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub main: Sgd<T>,
    pub disc: Sgd<T>,
}

/// The four phases of [`Trainer::train_step`], in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    EncoderDecoder,
    Discriminators,
    Consistency,
    Classification,
}

/// Parameter id groups used by the phases.
#[derive(Clone, Debug)]
struct Groups {
    enc_dec: Vec<ParamId>,
    hr_encoder: Vec<ParamId>,
    main: Vec<ParamId>,
    feature_disc: Vec<ParamId>,
    image_disc: Vec<ParamId>,
}

/// Network parameters, optimiser state, sampling rng and iteration count.
pub struct Trainer<T: Scalar> {
    pub net: NetworkBundle,
    pub params: ParamStore<T>,
    pub optim: OptimState<T>,
    pub cfg: TrainConfig,
    /// Drives batch sampling in deterministic mode.
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    groups: Groups,
}

fn detach<T: Scalar>(g: &mut Graph<'_, T>, v: Var) -> Tensor<T> {
    g.value(v).clone()
}

fn ensure_finite<T: Scalar>(grads: &Gradients<T>, phase: &str) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradients of the {phase} phase")))
    }
}

fn ensure_value<T: Scalar>(g: &Graph<'_, T>, v: Var, what: &str) -> Result<f64> {
    let x = g.scalar(v).to_f64_lossy();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{what} = {x}")))
    }
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[21]));
        let net = NetworkBundle::init(net_cfg, &mut params, &mut init_rng)?;
        Ok(Self::assemble(net, params, cfg))
    }

    /// Wrap existing parameters with fresh optimiser state.
    pub fn assemble(net: NetworkBundle, params: ParamStore<T>, cfg: TrainConfig) -> Self {
        let groups = Groups {
            enc_dec: group_ids(&params, &[group::ENCODER, group::DECODER]),
            hr_encoder: group_ids(&params, &[group::HR_ENCODER]),
            main: net.main_ids(&params),
            feature_disc: net.feature_disc_ids(&params),
            image_disc: net.image_disc_ids(&params),
        };
        let n = params.len();
        Self {
            optim: OptimState {
                main: Sgd::new(cfg.main_sgd(), n),
                disc: Sgd::new(cfg.disc_sgd(), n),
            },
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[20])),
            iteration: 0,
            net,
            params,
            cfg,
            groups,
        }
    }

    /// Draw the next batch from the trainer's own rng stream.
    pub fn sample_batch(&mut self, pool: &TrainPool) -> Result<Batch> {
        pk_sample(pool, self.cfg.batch, &mut self.rng)
    }

    /// Run one full iteration on `batch` and advance the counter.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        self.train_step_observed(batch, |_, _| {})
    }

    /// [`Trainer::train_step`], calling `after` with the parameters once each
    /// phase has applied its update. Phases whose terms all have zero weight
    /// are still reported.
    pub fn train_step_observed(
        &mut self,
        batch: &Batch,
        mut after: impl FnMut(Phase, &ParamStore<T>),
    ) -> Result<LossReport> {
        losses::check_pk(&batch.hr_labels)?;
        losses::check_pk(&batch.lr_labels)?;
        let w = self.cfg.weights.clone();
        let b = batch.len();
        let x_h = batch.hr_tensor::<T>();
        let x_l = batch.lr_tensor::<T>();
        let x_lt = batch.lr_truth_tensor::<T>();
        let both = Tensor::cat_outer(&[&x_h, &x_l]);
        let mut terms = LossTerms::default();

        // phase 1: encoder and decoder
        let mut levels_cache: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        let mut rec_cache = Tensor::zeros(&[0]);
        for inner in 0..self.cfg.inner_crgan_steps {
            let grads = {
                let mut g = Graph::with_trainable(&self.params, &self.groups.enc_dec);
                let x = g.input(both.clone());
                let pyr = self.net.encode(&mut g, x)?;
                let rec = self.net.decode(&mut g, &pyr)?;
                let rec_h = g.slice_batch(rec, 0, b);
                let rec_l = g.slice_batch(rec, b, b);
                let mut objective = Vec::new();
                let mut step_terms = LossTerms::default();
                if w.adv_f > 0.0 {
                    let (mut ph, mut pl) = (BTreeMap::new(), BTreeMap::new());
                    for j in self.net.align_levels() {
                        let p = self.net.discriminate_feature(&mut g, j, pyr.level(j))?;
                        ph.insert(j, g.slice_batch(p, 0, b));
                        pl.insert(j, g.slice_batch(p, b, b));
                    }
                    let (adv, per) = losses::adv_feature_loss(&mut g, &ph, &pl)?;
                    step_terms.adv_f = ensure_value(&g, adv.g_loss, "adv_F")?;
                    for (j, v) in per {
                        step_terms.adv_f_per_level.insert(j, g.scalar(v).to_f64_lossy());
                    }
                    objective.push((adv.g_loss, T::c(w.adv_f)));
                }
                if w.rec > 0.0 {
                    let th = g.input(x_h.clone());
                    let tl = g.input(x_lt.clone());
                    let r = losses::rec_loss(&mut g, rec_h, rec_l, th, tl)?;
                    step_terms.rec = ensure_value(&g, r, "rec")?;
                    objective.push((r, T::c(w.rec)));
                }
                if w.adv_i > 0.0 {
                    let real = g.input(x_h.clone());
                    let stack = g.concat_batch(&[real, rec]);
                    let p = self.net.discriminate_image(&mut g, stack)?;
                    let p_real = g.slice_batch(p, 0, b);
                    let p_fh = g.slice_batch(p, b, b);
                    let p_fl = g.slice_batch(p, 2 * b, b);
                    let adv = losses::adv_image_loss(&mut g, p_real, p_fl, p_fh, w.dedup_image_real)?;
                    step_terms.adv_i = ensure_value(&g, adv.g_loss, "adv_I")?;
                    objective.push((adv.g_loss, T::c(w.adv_i)));
                }
                if inner == 0 {
                    terms.adv_f = step_terms.adv_f;
                    terms.adv_f_per_level = step_terms.adv_f_per_level;
                    terms.rec = step_terms.rec;
                    terms.adv_i = step_terms.adv_i;
                }
                levels_cache = self
                    .net
                    .align_levels()
                    .into_iter()
                    .map(|j| (j, detach(&mut g, pyr.level(j))))
                    .collect();
                rec_cache = detach(&mut g, rec);
                if objective.is_empty() {
                    None
                } else {
                    let loss = g.weighted_sum(&objective);
                    Some(g.backward(loss))
                }
            };
            if let Some(grads) = grads {
                ensure_finite(&grads, "encoder/decoder")?;
                self.optim.main.step(&mut self.params, &grads, &self.groups.enc_dec);
            }
        }
        after(Phase::EncoderDecoder, &self.params);

        // phase 2: discriminators on detached activations
        if w.adv_f > 0.0 || w.adv_i > 0.0 {
            let mut ids = Vec::new();
            if w.adv_f > 0.0 {
                ids.extend_from_slice(&self.groups.feature_disc);
            }
            if w.adv_i > 0.0 {
                ids.extend_from_slice(&self.groups.image_disc);
            }
            for _ in 0..self.cfg.inner_disc_steps {
                let grads = {
                    let mut g = Graph::with_trainable(&self.params, &ids);
                    let mut parts = Vec::new();
                    if w.adv_f > 0.0 {
                        let (mut ph, mut pl) = (BTreeMap::new(), BTreeMap::new());
                        for (&j, t) in &levels_cache {
                            let f = g.input(t.clone());
                            let p = self.net.discriminate_feature(&mut g, j, f)?;
                            ph.insert(j, g.slice_batch(p, 0, b));
                            pl.insert(j, g.slice_batch(p, b, b));
                        }
                        let (adv, _) = losses::adv_feature_loss(&mut g, &ph, &pl)?;
                        ensure_value(&g, adv.d_loss, "D_F loss")?;
                        parts.push((adv.d_loss, T::one()));
                    }
                    if w.adv_i > 0.0 {
                        let stack = Tensor::cat_outer(&[&x_h, &rec_cache]);
                        let x = g.input(stack);
                        let p = self.net.discriminate_image(&mut g, x)?;
                        let p_real = g.slice_batch(p, 0, b);
                        let p_fh = g.slice_batch(p, b, b);
                        let p_fl = g.slice_batch(p, 2 * b, b);
                        let adv = losses::adv_image_loss(&mut g, p_real, p_fl, p_fh, w.dedup_image_real)?;
                        ensure_value(&g, adv.d_loss, "D_I loss")?;
                        parts.push((adv.d_loss, T::one()));
                    }
                    let loss = g.weighted_sum(&parts);
                    g.backward(loss)
                };
                ensure_finite(&grads, "discriminator")?;
                self.optim.disc.step(&mut self.params, &grads, &ids);
            }
        }
        after(Phase::Discriminators, &self.params);

        // phase 3: HR encoder consistency
        let uses_g = self.net.config().embedding.needs_g();
        if w.consist > 0.0 && uses_g {
            let targets = {
                let mut g = Graph::with_trainable(&self.params, &[]);
                let truth = g.input(Tensor::cat_outer(&[&x_h, &x_lt]));
                let gt = self.net.hr_encode(&mut g, truth)?;
                g.value(gt).clone()
            };
            let grads = {
                let mut g = Graph::with_trainable(&self.params, &self.groups.hr_encoder);
                let rec = g.input(rec_cache.clone());
                let gm = self.net.hr_encode(&mut g, rec)?;
                let gt_h = g.slice_batch(gm, 0, b);
                let gt_l = g.slice_batch(gm, b, b);
                let tgt = g.input(targets);
                let t_h = g.slice_batch(tgt, 0, b);
                let t_l = g.slice_batch(tgt, b, b);
                let c = losses::consist_loss(&mut g, gt_h, gt_l, t_h, t_l)?;
                terms.consist = ensure_value(&g, c, "consist")?;
                let loss = g.weighted_sum(&[(c, T::c(w.consist))]);
                g.backward(loss)
            };
            ensure_finite(&grads, "consistency")?;
            self.optim.main.step(&mut self.params, &grads, &self.groups.hr_encoder);
        }
        after(Phase::Consistency, &self.params);

        // phase 4: classification over the whole pipeline, re-forwarded
        let labels: Vec<usize> = batch.hr_labels.iter().chain(&batch.lr_labels).copied().collect();
        let labeled: Vec<bool> = batch.hr_labeled.iter().chain(&batch.lr_labeled).copied().collect();
        let grads = {
            let mut g = Graph::with_trainable(&self.params, &self.groups.main);
            let x = g.input(both);
            let (u, _) = self.net.embed(&mut g, x)?;
            let logits = self.net.classify_pooled(&mut g, u);
            let id = losses::id_loss(&mut g, logits, &labels, &labeled)?;
            let u_h = g.slice_batch(u, 0, b);
            let u_l = g.slice_batch(u, b, b);
            let tri_h = losses::triplet_loss(&mut g, u_h, &batch.hr_labels, &batch.hr_labeled, w.phi)?;
            let tri_l = losses::triplet_loss(&mut g, u_l, &batch.lr_labels, &batch.lr_labeled, w.phi)?;
            let tri = g.weighted_sum(&[(tri_h, T::one()), (tri_l, T::one())]);
            terms.id = ensure_value(&g, id, "id")?;
            terms.tri = ensure_value(&g, tri, "tri")?;
            let cls = g.weighted_sum(&[(id, T::one()), (tri, T::one())]);
            g.backward(cls)
        };
        ensure_finite(&grads, "classification")?;
        self.optim.main.step(&mut self.params, &grads, &self.groups.main);
        after(Phase::Classification, &self.params);
        if self.params.ids().any(|id| !self.params.get(id).is_finite()) {
            return Err(Error::NonFinite("parameters after update".into()));
        }

        self.iteration += 1;
        losses::total_loss(&terms, &w)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot(t: &Trainer<f32>, ids: &[ParamId]) -> Vec<Vec<f32>> {
        ids.iter().map(|&id| t.params.get(id).data().to_vec()).collect()
    }

    #[test]
    fn step_reports_finite_terms() {
        let (mut t, pool) = crate::trainer::fixtures::tiny(TrainConfig::default());
        let batch = t.sample_batch(&pool).unwrap();
        let r = t.train_step(&batch).unwrap();
        assert!(r.is_finite());
        assert!(r.adv_f > 0.0 && r.adv_i > 0.0 && r.rec > 0.0 && r.consist >= 0.0 && r.id > 0.0);
        assert_eq!(r.adv_f_per_level.len(), 2);
        assert_eq!(t.iteration, 1);
    }

    #[test]
    fn zero_main_rate_freezes_main_path() {
        let cfg = TrainConfig {
            lr_main: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut t, pool) = crate::trainer::fixtures::tiny(cfg);
        let main = t.groups.main.clone();
        let disc = t.groups.feature_disc.clone();
        let before = snapshot(&t, &main);
        let disc_before = snapshot(&t, &disc);
        let batch = t.sample_batch(&pool).unwrap();
        t.train_step(&batch).unwrap();
        assert_eq!(before, snapshot(&t, &main));
        assert_ne!(disc_before, snapshot(&t, &disc));
    }

    #[test]
    fn classification_only_leaves_discriminators_alone() {
        let cfg = TrainConfig {
            weights: LossWeights {
                adv_f: 0.0,
                rec: 0.0,
                adv_i: 0.0,
                consist: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let (mut t, pool) = crate::trainer::fixtures::tiny(cfg);
        let disc: Vec<_> = t.groups.feature_disc.iter().chain(&t.groups.image_disc).copied().collect();
        let before = snapshot(&t, &disc);
        let main_before = snapshot(&t, &t.groups.main.clone());
        for _ in 0..2 {
            let batch = t.sample_batch(&pool).unwrap();
            let r = t.train_step(&batch).unwrap();
            assert_eq!((r.adv_f, r.rec, r.adv_i, r.consist), (0.0, 0.0, 0.0, 0.0));
            assert_eq!(r.total, r.cls);
        }
        assert_eq!(before, snapshot(&t, &disc));
        assert_ne!(main_before, snapshot(&t, &t.groups.main.clone()));
    }

    #[test]
    fn step_is_reproducible() {
        let run = || {
            let (mut t, pool) = crate::trainer::fixtures::tiny(TrainConfig::default());
            let batch = t.sample_batch(&pool).unwrap();
            let r = t.train_step(&batch).unwrap();
            (r, t.params.ids().map(|id| t.params.get(id).data().to_vec()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = TrainConfig {
            iterations: 33,
            label_percent: 20.0,
            weights: LossWeights {
                adv_f: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut w = KvWriter::new();
        w.section("train");
        cfg.write_kv(&mut w);
        let doc = KvDoc::parse(&w.finish()).unwrap();
        assert_eq!(TrainConfig::from_kv(&doc, "train").unwrap(), cfg);
        let bad = KvDoc::parse("[train]\nlr_mian = 0.1\n").unwrap();
        assert!(TrainConfig::from_kv(&bad, "train").is_err());
    }
}
