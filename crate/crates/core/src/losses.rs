//! Training objectives as graph builders, plus the per-iteration report.
//!
//! Each function records its computation on a [`Graph`] and returns scalar
//! nodes, so the same code serves forward evaluation and back-propagation.
//! Discriminator probabilities are clamped to `[EPS, 1 - EPS]` before logs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kv::{KvDoc, KvWriter};
use crate::scalar::Scalar;

pub const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub adv_f: f64,
    pub rec: f64,
    pub adv_i: f64,
    pub consist: f64,
    /// Triplet margin.
    pub phi: f64,
    /// Count the real-image term of the image discriminator loss once
    /// instead of twice.
    pub dedup_image_real: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv_f: 1.0,
            rec: 1.0,
            adv_i: 1.0,
            consist: 1.0,
            phi: 2.0,
            dedup_image_real: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv_f", self.adv_f),
            ("lambda_rec", self.rec),
            ("lambda_adv_i", self.adv_i),
            ("lambda_consist", self.consist),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Config(format!("phi must be positive, got {}", self.phi)));
        }
        Ok(())
    }

    /// Reads `lambda_*`, `phi` and `dedup_image_real` from an already open
    /// section; the caller decides when to call `finish`.
    pub fn read(s: &mut crate::kv::Section<'_>) -> Result<Self> {
        let d = Self::default();
        let w = Self {
            adv_f: s.get_or("lambda_adv_f", d.adv_f)?,
            rec: s.get_or("lambda_rec", d.rec)?,
            adv_i: s.get_or("lambda_adv_i", d.adv_i)?,
            consist: s.get_or("lambda_consist", d.consist)?,
            phi: s.get_or("phi", d.phi)?,
            dedup_image_real: s.get_or("dedup_image_real", d.dedup_image_real)?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn from_kv(doc: &KvDoc, section: &str) -> Result<Self> {
        let mut s = doc.section(section);
        let w = Self::read(&mut s)?;
        s.finish()?;
        Ok(w)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("lambda_adv_f", self.adv_f)
            .kv("lambda_rec", self.rec)
            .kv("lambda_adv_i", self.adv_i)
            .kv("lambda_consist", self.consist)
            .kv("phi", self.phi)
            .kv("dedup_image_real", self.dedup_image_real);
    }
}

/// Discriminator and generator sides of an adversarial objective.
#[derive(Clone, Copy, Debug)]
pub struct AdvLoss {
    pub d_loss: Var,
    pub g_loss: Var,
}

fn check_probs<T: Scalar>(g: &Graph<'_, T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).data().iter().any(|p| !(*p >= T::zero() && *p <= T::one())) {
        return Err(Error::NonFinite(format!("{what}: discriminator output outside [0, 1]")));
    }
    Ok(())
}

/// Multi-scale feature adversarial loss over levels `j`, given per-sample
/// probabilities for HR features (`h[j]`) and LR features (`l[j]`).
///
/// `d_loss = -Σ_j (mean log D_j(f_H) + mean log(1 - D_j(f_L)))` and the
/// non-saturating `g_loss = -Σ_j mean log D_j(f_L)`. Also returns the
/// generator loss of each level.
pub fn adv_feature_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    h: &BTreeMap<usize, Var>,
    l: &BTreeMap<usize, Var>,
) -> Result<(AdvLoss, BTreeMap<usize, Var>)> {
    if h.is_empty() {
        return Err(Error::Precondition("feature adversarial loss needs at least one level".into()));
    }
    if h.keys().ne(l.keys()) {
        return Err(Error::Precondition("HR and LR discriminator levels differ".into()));
    }
    let mut d_terms = Vec::new();
    let mut g_terms = Vec::new();
    let mut per_level = BTreeMap::new();
    let neg = T::c(-1.0);
    for (&j, &ph) in h {
        let pl = l[&j];
        check_probs(g, ph, "adv_F")?;
        check_probs(g, pl, "adv_F")?;
        let real = g.mean_log(ph, EPS, false);
        let fake = g.mean_log(pl, EPS, true);
        d_terms.push((real, neg));
        d_terms.push((fake, neg));
        let fool = g.mean_log(pl, EPS, false);
        let level_g = g.weighted_sum(&[(fool, neg)]);
        per_level.insert(j, level_g);
        g_terms.push((fool, neg));
    }
    let d_loss = g.weighted_sum(&d_terms);
    let g_loss = g.weighted_sum(&g_terms);
    Ok((AdvLoss { d_loss, g_loss }, per_level))
}

/// Mean absolute reconstruction error of both branches against their HR
/// targets, summed.
pub fn rec_loss<T: Scalar>(g: &mut Graph<'_, T>, rec_h: Var, rec_l: Var, truth_h: Var, truth_l: Var) -> Result<Var> {
    for (a, b) in [(rec_h, truth_h), (rec_l, truth_l)] {
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::Shape(format!(
                "reconstruction {:?} vs target {:?}",
                g.value(a).shape(),
                g.value(b).shape()
            )));
        }
    }
    let a = g.l1_mean(rec_h, truth_h);
    let b = g.l1_mean(rec_l, truth_l);
    Ok(g.weighted_sum(&[(a, T::one()), (b, T::one())]))
}

/// Image adversarial loss. The real term carries weight `2` unless
/// `dedup_real` is set.
pub fn adv_image_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    real: Var,
    fake_from_l: Var,
    fake_from_h: Var,
    dedup_real: bool,
) -> Result<AdvLoss> {
    for v in [real, fake_from_l, fake_from_h] {
        check_probs(g, v, "adv_I")?;
    }
    let neg = T::c(-1.0);
    let real_w = if dedup_real { neg } else { T::c(-2.0) };
    let lr = g.mean_log(real, EPS, false);
    let lfl = g.mean_log(fake_from_l, EPS, true);
    let lfh = g.mean_log(fake_from_h, EPS, true);
    let d_loss = g.weighted_sum(&[(lr, real_w), (lfl, neg), (lfh, neg)]);
    let gl = g.mean_log(fake_from_l, EPS, false);
    let gh = g.mean_log(fake_from_h, EPS, false);
    let g_loss = g.weighted_sum(&[(gl, neg), (gh, neg)]);
    Ok(AdvLoss { d_loss, g_loss })
}

/// `mean|F(x̃_H) - g|` summed over the two branches. The targets should be
/// constant inputs so no gradient reaches `F` through them.
pub fn consist_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    g_tilde_h: Var,
    g_tilde_l: Var,
    g_truth_h: Var,
    g_truth_l: Var,
) -> Result<Var> {
    for (a, b) in [(g_tilde_h, g_truth_h), (g_tilde_l, g_truth_l)] {
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::Shape(format!(
                "consistency {:?} vs {:?}",
                g.value(a).shape(),
                g.value(b).shape()
            )));
        }
    }
    let a = g.l1_mean(g_tilde_h, g_truth_h);
    let b = g.l1_mean(g_tilde_l, g_truth_l);
    Ok(g.weighted_sum(&[(a, T::one()), (b, T::one())]))
}

/// Mean softmax cross-entropy over labelled rows; zero when none are.
pub fn id_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[usize], labeled: &[bool]) -> Result<Var> {
    let (n, k) = g.value(logits).dims2();
    if labels.len() != n || labeled.len() != n {
        return Err(Error::Shape(format!("{n} logit rows, {} labels, {} mask entries", labels.len(), labeled.len())));
    }
    if let Some((&bad, _)) = labels.iter().zip(labeled).find(|(&l, &m)| m && l >= k) {
        return Err(Error::Precondition(format!("label {bad} out of range for {k} classes")));
    }
    Ok(g.softmax_xent(logits, labels, labeled))
}

/// At least two identities with at least two samples each.
pub fn check_pk(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let paired = counts.values().filter(|&&c| c >= 2).count();
    if counts.len() < 2 || paired < 2 {
        return Err(Error::Precondition(format!(
            "triplet batch needs >= 2 identities with >= 2 samples each, got counts {counts:?}"
        )));
    }
    Ok(())
}

/// Batch-hard triplet loss on the rows of `u` with margin `phi`. Only
/// labelled rows take part, as anchors, positives and negatives.
pub fn triplet_loss<T: Scalar>(g: &mut Graph<'_, T>, u: Var, labels: &[usize], labeled: &[bool], phi: f64) -> Result<Var> {
    let (n, _) = g.value(u).dims2();
    if labels.len() != n || labeled.len() != n {
        return Err(Error::Shape(format!("{n} embeddings, {} labels, {} mask entries", labels.len(), labeled.len())));
    }
    check_pk(labels)?;
    Ok(g.batch_hard_triplet(u, labels, labeled, phi).0)
}

/// Scalar values of every objective term for one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub adv_f_per_level: BTreeMap<usize, f64>,
    pub adv_f: f64,
    pub rec: f64,
    pub adv_i: f64,
    pub consist: f64,
    pub id: f64,
    pub tri: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub adv_f_per_level: BTreeMap<usize, f64>,
    pub adv_f: f64,
    pub rec: f64,
    pub adv_i: f64,
    pub consist: f64,
    pub id: f64,
    pub tri: f64,
    pub cls: f64,
    pub total: f64,
}

/// `total = (id + tri) + λ_advF·adv_F + λ_rec·rec + λ_advI·adv_I + λ_consist·consist`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let cls = terms.id + terms.tri;
    let total = cls + w.adv_f * terms.adv_f + w.rec * terms.rec + w.adv_i * terms.adv_i + w.consist * terms.consist;
    let report = LossReport {
        adv_f_per_level: terms.adv_f_per_level.clone(),
        adv_f: terms.adv_f,
        rec: terms.rec,
        adv_i: terms.adv_i,
        consist: terms.consist,
        id: terms.id,
        tri: terms.tri,
        cls,
        total,
    };
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss report {report:?}")));
    }
    Ok(report)
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,adv_F,rec,adv_I,consist,id,tri,total";

    pub fn is_finite(&self) -> bool {
        [self.adv_f, self.rec, self.adv_i, self.consist, self.id, self.tri, self.cls, self.total]
            .iter()
            .chain(self.adv_f_per_level.values())
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{},{},{},{},{},{},{}",
            self.adv_f, self.rec, self.adv_i, self.consist, self.id, self.tri, self.total
        )
    }

    /// Parse a row written by [`LossReport::csv_row`]; per-level values are
    /// not stored in the CSV and come back empty.
    pub fn parse_csv_row(line: &str) -> Result<(usize, LossReport)> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Config(format!("loss row has {} columns: `{line}`", cols.len())));
        }
        let iter = cols[0]
            .parse()
            .map_err(|e| Error::Config(format!("loss row iter `{}`: {e}", cols[0])))?;
        let v: Vec<f64> = cols[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| Error::Config(format!("loss row value `{c}`: {e}"))))
            .collect::<Result<_>>()?;
        Ok((
            iter,
            LossReport {
                adv_f: v[0],
                rec: v[1],
                adv_i: v[2],
                consist: v[3],
                id: v[4],
                tri: v[5],
                cls: v[4] + v[5],
                total: v[6],
                ..Default::default()
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn probs(g: &mut Graph<'_, f64>, v: &[f64]) -> Var {
        g.input(Tensor::from_vec(&[v.len()], v.to_vec()))
    }

    #[test]
    fn feature_adv_at_half() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let h = BTreeMap::from([(1, probs(&mut g, &[0.5; 4]))]);
        let l = BTreeMap::from([(1, probs(&mut g, &[0.5; 4]))]);
        let (adv, per) = adv_feature_loss(&mut g, &h, &l).unwrap();
        assert!((g.scalar(adv.d_loss) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.scalar(adv.g_loss) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(per.len(), 1);
    }

    #[test]
    fn feature_adv_is_additive_over_levels() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = probs(&mut g, &[0.2, 0.9, 0.6]);
        let b = probs(&mut g, &[0.3, 0.1, 0.7]);
        let one = adv_feature_loss(&mut g, &BTreeMap::from([(1, a)]), &BTreeMap::from([(1, b)])).unwrap().0;
        let two = adv_feature_loss(&mut g, &BTreeMap::from([(1, a), (2, a)]), &BTreeMap::from([(1, b), (2, b)]))
            .unwrap()
            .0;
        assert!((g.scalar(two.d_loss) - 2.0 * g.scalar(one.d_loss)).abs() < 1e-12);
        assert!((g.scalar(two.g_loss) - 2.0 * g.scalar(one.g_loss)).abs() < 1e-12);
    }

    #[test]
    fn feature_adv_limits() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let h = BTreeMap::from([(1, probs(&mut g, &[1.0, 1.0]))]);
        let l = BTreeMap::from([(1, probs(&mut g, &[0.0, 0.0]))]);
        let (adv, _) = adv_feature_loss(&mut g, &h, &l).unwrap();
        assert!(g.scalar(adv.d_loss) < 1e-6);
        assert!((g.scalar(adv.g_loss) + EPS.ln()).abs() < 1e-6);
        assert!(adv_feature_loss(&mut g, &BTreeMap::new(), &BTreeMap::new()).is_err());
        let nan = BTreeMap::from([(1, probs(&mut g, &[f64::NAN]))]);
        assert!(adv_feature_loss(&mut g, &nan, &nan).is_err());
    }

    #[test]
    fn image_adv_at_half_and_dedup() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let p = probs(&mut g, &[0.5; 3]);
        let adv = adv_image_loss(&mut g, p, p, p, false).unwrap();
        assert!((g.scalar(adv.d_loss) - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.scalar(adv.g_loss) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let adv = adv_image_loss(&mut g, p, p, p, true).unwrap();
        assert!((g.scalar(adv.d_loss) - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn image_adv_single_sample_by_hand() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let real = probs(&mut g, &[0.8]);
        let fl = probs(&mut g, &[0.3]);
        let fh = probs(&mut g, &[0.4]);
        let adv = adv_image_loss(&mut g, real, fl, fh, false).unwrap();
        let want_d = -(2.0 * 0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln());
        let want_g = -(0.3f64.ln() + 0.4f64.ln());
        assert!((g.scalar(adv.d_loss) - want_d).abs() < 1e-12);
        assert!((g.scalar(adv.g_loss) - want_g).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_offsets() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let truth = g.input(Tensor::full(&[2, 3, 4, 2], 0.4));
        let off = g.input(Tensor::full(&[2, 3, 4, 2], 0.5));
        let r = rec_loss(&mut g, truth, truth, truth, truth).unwrap();
        assert_eq!(g.scalar(r), 0.0);
        let r = rec_loss(&mut g, off, truth, truth, truth).unwrap();
        assert!((g.scalar(r) - 0.1).abs() < 1e-12);
        let small = g.input(Tensor::zeros(&[2, 3, 2, 2]));
        assert!(rec_loss(&mut g, small, truth, truth, truth).is_err());
    }

    #[test]
    fn consistency_offsets() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::full(&[2, 4, 2, 1], 1.0));
        let b = g.input(Tensor::full(&[2, 4, 2, 1], 1.25));
        let c = consist_loss(&mut g, b, a, a, a).unwrap();
        assert!((g.scalar(c) - 0.25).abs() < 1e-12);
        let c = consist_loss(&mut g, b, b, a, a).unwrap();
        assert!((g.scalar(c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_loss_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(&[3, 20]));
        let id = id_loss(&mut g, logits, &[0, 5, 19], &[true; 3]).unwrap();
        assert!((g.scalar(id) - 20f64.ln()).abs() < 1e-12);
        let id = id_loss(&mut g, logits, &[0, 5, 19], &[false; 3]).unwrap();
        assert_eq!(g.scalar(id), 0.0);
        assert!(id_loss(&mut g, logits, &[0, 20, 1], &[true; 3]).is_err());
        assert!(id_loss(&mut g, logits, &[0, 20, 1], &[true, false, true]).is_ok());
        let mut peaked = vec![0.0; 20];
        peaked[7] = 60.0;
        let logits = g.input(Tensor::from_vec(&[1, 20], peaked));
        let id = id_loss(&mut g, logits, &[7], &[true]).unwrap();
        assert!(g.scalar(id) < 1e-20);
    }

    #[test]
    fn triplet_hinge_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        // two identities, collapsed within identity, 10 apart
        let u = g.input(Tensor::from_vec(&[4, 1], vec![0.0, 0.0, 10.0, 10.0]));
        let t = triplet_loss(&mut g, u, &[0, 0, 1, 1], &[true; 4], 2.0).unwrap();
        assert_eq!(g.scalar(t), 0.0);
        // rectangle 3 wide and 2 tall: every anchor has d_pos = 3 and d_neg = 2
        let u = g.input(Tensor::from_vec(&[4, 2], vec![0.0, 0.0, 3.0, 0.0, 0.0, 2.0, 3.0, 2.0]));
        let t = triplet_loss(&mut g, u, &[0, 0, 1, 1], &[true; 4], 2.0).unwrap();
        assert!((g.scalar(t) - 3.0).abs() < 1e-12);
        assert!(triplet_loss(&mut g, u, &[0, 1, 2, 3], &[true; 4], 2.0).is_err());
        assert!(triplet_loss(&mut g, u, &[0, 0, 0, 1], &[true; 4], 2.0).is_err());
    }

    #[test]
    fn totals() {
        let terms = LossTerms {
            adv_f: 1.0,
            rec: 1.0,
            adv_i: 1.0,
            consist: 1.0,
            id: 0.5,
            tri: 0.5,
            ..Default::default()
        };
        let r = total_loss(&terms, &LossWeights::default()).unwrap();
        assert_eq!(r.cls, 1.0);
        assert_eq!(r.total, 5.0);
        let zero = LossWeights {
            adv_f: 0.0,
            rec: 0.0,
            adv_i: 0.0,
            consist: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&terms, &zero).unwrap().total, 1.0);
        let neg = LossWeights {
            rec: -1.0,
            ..Default::default()
        };
        assert!(total_loss(&terms, &neg).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let r = total_loss(
            &LossTerms {
                adv_f: 0.25,
                rec: 0.125,
                adv_i: 1.5,
                consist: 0.0625,
                id: 2.0,
                tri: 0.75,
                ..Default::default()
            },
            &LossWeights::default(),
        )
        .unwrap();
        let (iter, back) = LossReport::parse_csv_row(&r.csv_row(7)).unwrap();
        assert_eq!(iter, 7);
        assert_eq!(back.total, r.total);
        assert_eq!(back.cls, r.cls);
        assert_eq!(LossReport::CSV_HEADER.split(',').count(), 8);
    }

    #[test]
    fn weights_kv_roundtrip() {
        let w = LossWeights {
            adv_i: 0.0,
            phi: 1.5,
            dedup_image_real: true,
            ..Default::default()
        };
        let mut out = KvWriter::new();
        out.section("loss");
        w.write_kv(&mut out);
        let doc = KvDoc::parse(&out.finish()).unwrap();
        assert_eq!(LossWeights::from_kv(&doc, "loss").unwrap(), w);
    }
}
