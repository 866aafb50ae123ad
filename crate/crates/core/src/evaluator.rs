//! Retrieval metrics, recovered-image quality, and evaluation settings.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::datapipe::{ImageRecord, MlrSplit};
use crate::error::{Error, IoContext, Result};
use crate::graph::Graph;
use crate::network::NetworkBundle;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 16;

/// Embeddings of every gallery image with their identity and camera tags.
#[derive(Clone, Debug)]
pub struct GalleryIndex {
    pub dim: usize,
    pub embeddings: Vec<f32>,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl GalleryIndex {
    pub fn new(dim: usize, embeddings: Vec<f32>, identities: Vec<usize>, cameras: Vec<usize>) -> Result<Self> {
        if dim == 0 || embeddings.len() != dim * identities.len() || cameras.len() != identities.len() {
            return Err(Error::Shape(format!(
                "{} values for {} rows of width {dim} and {} cameras",
                embeddings.len(),
                identities.len(),
                cameras.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gallery embeddings".into()));
        }
        Ok(Self {
            dim,
            embeddings,
            identities,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }
}

/// Gallery rows sorted by ascending Euclidean distance to `query`; equal
/// distances keep gallery order.
pub fn rank_query(query: &[f32], index: &GalleryIndex) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::Precondition("empty gallery".into()));
    }
    if query.len() != index.dim {
        return Err(Error::Shape(format!("query width {} vs gallery {}", query.len(), index.dim)));
    }
    let dist: Vec<f64> = (0..index.len())
        .map(|i| {
            index
                .row(i)
                .iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    Ok(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcResult {
    /// `cmc[k - 1]` is the match rate within the top `k`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// `(query identity, ranked gallery identities)` after exclusions.
    pub per_query: Vec<(usize, Vec<usize>)>,
}

impl CmcResult {
    /// Match rate within the top `k` (saturating at the gallery size).
    pub fn rank(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.cmc.len());
        self.cmc[k - 1]
    }
}

/// CMC curve and mAP from per-query rankings of gallery rows.
///
/// Gallery entries sharing both identity and camera with the query are
/// dropped from its ranking before scoring.
pub fn cmc_map(
    rankings: &[Vec<usize>],
    query_ids: &[usize],
    query_cams: &[usize],
    index: &GalleryIndex,
) -> Result<CmcResult> {
    if rankings.len() != query_ids.len() || query_cams.len() != query_ids.len() {
        return Err(Error::Shape("rankings, identities and cameras must align".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Precondition("no queries".into()));
    }
    let n = index.len();
    let mut hits = vec![0usize; n];
    let mut ap_sum = 0.0;
    let mut per_query = Vec::with_capacity(rankings.len());
    for ((ranking, &qid), &qcam) in rankings.iter().zip(query_ids).zip(query_cams) {
        let kept: Vec<usize> = ranking
            .iter()
            .copied()
            .filter(|&g| !(index.identities[g] == qid && index.cameras[g] == qcam))
            .collect();
        let correct: Vec<bool> = kept.iter().map(|&g| index.identities[g] == qid).collect();
        let relevant = correct.iter().filter(|&&c| c).count();
        let Some(first) = correct.iter().position(|&c| c) else {
            return Err(Error::Precondition(format!("query identity {qid} has no gallery match")));
        };
        for h in &mut hits[first..] {
            *h += 1;
        }
        let mut found = 0;
        let mut ap = 0.0;
        for (k, &c) in correct.iter().enumerate() {
            if c {
                found += 1;
                ap += found as f64 / (k + 1) as f64;
            }
        }
        ap_sum += ap / relevant as f64;
        per_query.push((qid, kept.iter().map(|&g| index.identities[g]).collect()));
    }
    let q = rankings.len() as f64;
    Ok(CmcResult {
        cmc: hits.iter().map(|&h| h as f64 / q).collect(),
        map: ap_sum / q,
        per_query,
    })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("psnr inputs of length {} and {}", x.len(), y.len())));
    }
    let mse = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mse < 1e-10 { 100.0 } else { 10.0 * (1.0 / mse).log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable valid-mode Gaussian filter of one `h×w` plane.
fn blur_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two interleaved `h×w×3` images, using an
/// 11×11 Gaussian window (σ = 1.5) over fully covered positions and
/// averaging over channels.
pub fn ssim(x: &[f32], y: &[f32], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w * 3 || y.len() != x.len() {
        return Err(Error::Shape(format!("ssim inputs of length {} and {} for {h}x{w}x3", x.len(), y.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = x.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let b: Vec<f64> = y.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mu_a = blur_valid(&a, h, w, &taps);
        let mu_b = blur_valid(&b, h, w, &taps);
        let aa = blur_valid(&prod(&a, &a), h, w, &taps);
        let bb = blur_valid(&prod(&b, &b), h, w, &taps);
        let ab = blur_valid(&prod(&a, &b), h, w, &taps);
        let mut s = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += s / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Embeddings `u` (row-major `N×dim`) and recovered images (interleaved HWC)
/// of `images`, computed without gradients in batches.
pub fn extract_embeddings<T: Scalar>(
    net: &NetworkBundle,
    params: &ParamStore<T>,
    images: &[ImageRecord],
) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    let cfg = net.config();
    let (h, w) = (cfg.height, cfg.width);
    let mut emb = Vec::with_capacity(images.len() * cfg.embed_dim());
    let mut recovered = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
        for r in chunk {
            if (r.height, r.width) != (h, w) {
                return Err(Error::Shape(format!("image {}x{} vs network {h}x{w}", r.height, r.width)));
            }
            data.extend(r.planar().into_iter().map(|v| T::from_f32(v).unwrap()));
        }
        let mut g = Graph::with_trainable(params, &[]);
        let x = g.input(Tensor::from_vec(&[chunk.len(), 3, h, w], data));
        let (u, rec) = net.embed(&mut g, x)?;
        let u = g.value(u);
        if !u.is_finite() {
            return Err(Error::NonFinite("embeddings".into()));
        }
        emb.extend(u.data().iter().map(|v| v.to_f64_lossy() as f32));
        let hw = h * w;
        for plane in g.value(rec).data().chunks(3 * hw) {
            let mut px = Vec::with_capacity(3 * hw);
            for i in 0..hw {
                for c in 0..3 {
                    px.push(plane[c * hw + i].to_f64_lossy() as f32);
                }
            }
            recovered.push(px);
        }
    }
    Ok((emb, recovered))
}

/// Query construction for an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// LR queries at the split's drawn seen rates.
    Cross,
    /// HR queries.
    Standard,
    /// Every query synthesised at one rate.
    Unseen(u32),
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Cross => f.write_str("cross"),
            Setting::Standard => f.write_str("standard"),
            Setting::Unseen(r) => write!(f, "unseen:{r}"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Setting::Cross),
            "standard" => Ok(Setting::Standard),
            _ => s
                .strip_prefix("unseen:")
                .and_then(|r| r.parse().ok())
                .filter(|&r| r >= 2)
                .map(Setting::Unseen)
                .ok_or_else(|| Error::Config(format!("unknown setting `{s}` (cross, standard, unseen:<r>)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub setting: Setting,
    pub cmc: CmcResult,
    /// Mean PSNR / SSIM of recovered queries against their HR sources; absent
    /// for HR queries.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    /// Mean PSNR of the (already up-sampled) LR query itself.
    pub mean_input_psnr: Option<f64>,
    pub n_query: usize,
    pub n_gallery: usize,
    pub dim: usize,
    pub query_embeddings: Vec<f32>,
    pub query_ids: Vec<usize>,
    pub query_cams: Vec<usize>,
    pub query_rates: Vec<u32>,
    pub gallery: GalleryIndex,
    pub recovered: Vec<Vec<f32>>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "setting,rank1,rank5,rank10,mAP,mean_psnr,mean_ssim,n_query,n_gallery";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"));
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{},{},{},{}",
            self.setting,
            self.cmc.rank(1),
            self.cmc.rank(5),
            self.cmc.rank(10),
            self.cmc.map,
            opt(self.mean_psnr),
            opt(self.mean_ssim),
            self.n_query,
            self.n_gallery
        )
    }

    /// `setting=cross rank1=0.8125 rank5=0.9375 rank10=1.0000 mAP=0.7012`
    pub fn summary_line(&self) -> String {
        format!(
            "setting={} rank1={:.4} rank5={:.4} rank10={:.4} mAP={:.4}",
            self.setting,
            self.cmc.rank(1),
            self.cmc.rank(5),
            self.cmc.rank(10),
            self.cmc.map
        )
    }

    /// Write query then gallery embeddings to `<stem>.f32` and the manifest
    /// to `<stem>.txt`.
    pub fn write_embedding_dump(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("f32");
        let mut bytes = Vec::with_capacity((self.query_embeddings.len() + self.gallery.embeddings.len()) * 4);
        for v in self.query_embeddings.iter().chain(&self.gallery.embeddings) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin, bytes).at(&bin)?;
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(", ");
        let n = self.n_query + self.n_gallery;
        let ids = join(&mut self.query_ids.iter().chain(&self.gallery.identities).map(|v| v.to_string()));
        let cams = join(&mut self.query_cams.iter().chain(&self.gallery.cameras).map(|v| v.to_string()));
        let rates = join(
            &mut self
                .query_rates
                .iter()
                .map(|v| v.to_string())
                .chain(std::iter::repeat_n("1".to_string(), self.n_gallery)),
        );
        let txt = stem.with_extension("txt");
        let mut f = fs::File::create(&txt).at(&txt)?;
        writeln!(
            f,
            "setting = {}\nn = {n}\ndim = {}\nn_query = {}\nidentities = {ids}\ncameras = {cams}\nrates = {rates}",
            self.setting, self.dim, self.n_query
        )
        .at(&txt)?;
        Ok(())
    }
}

/// Embed queries and gallery of `split` under `setting`, rank, and score.
pub fn evaluate_setting<T: Scalar>(
    net: &NetworkBundle,
    params: &ParamStore<T>,
    split: &MlrSplit,
    setting: Setting,
) -> Result<EvalReport> {
    let view = match setting {
        Setting::Cross => split.clone(),
        Setting::Standard => split.standard(),
        Setting::Unseen(r) => split.with_query_rate(r)?,
    };
    let dim = net.config().embed_dim();
    let (q_emb, recovered) = extract_embeddings(net, params, &view.query)?;
    let (g_emb, _) = extract_embeddings(net, params, &view.gallery)?;
    let index = GalleryIndex::new(
        dim,
        g_emb,
        view.gallery.iter().map(|r| r.identity).collect(),
        view.gallery.iter().map(|r| r.camera).collect(),
    )?;
    let rankings = q_emb
        .chunks(dim)
        .map(|q| rank_query(q, &index))
        .collect::<Result<Vec<_>>>()?;
    let query_ids: Vec<usize> = view.query.iter().map(|r| r.identity).collect();
    let query_cams: Vec<usize> = view.query.iter().map(|r| r.camera).collect();
    let cmc = cmc_map(&rankings, &query_ids, &query_cams, &index)?;

    let lr: Vec<usize> = (0..view.query.len()).filter(|&i| !view.query[i].is_hr()).collect();
    let (mut mean_psnr, mut mean_ssim, mut mean_input_psnr) = (None, None, None);
    if !lr.is_empty() {
        let (h, w) = (net.config().height, net.config().width);
        // images narrower than the SSIM window get no SSIM
        let with_ssim = h >= SSIM_WINDOW && w >= SSIM_WINDOW;
        let (mut p, mut s, mut pin) = (0.0, 0.0, 0.0);
        for &i in &lr {
            let truth = &view.query_hr[i].pixels;
            p += psnr(&recovered[i], truth)?;
            if with_ssim {
                s += ssim(&recovered[i], truth, h, w)?;
            }
            pin += psnr(&view.query[i].pixels, truth)?;
        }
        let n = lr.len() as f64;
        mean_psnr = Some(p / n);
        mean_ssim = with_ssim.then_some(s / n);
        mean_input_psnr = Some(pin / n);
    }
    Ok(EvalReport {
        setting,
        cmc,
        mean_psnr,
        mean_ssim,
        mean_input_psnr,
        n_query: view.query.len(),
        n_gallery: view.gallery.len(),
        dim,
        query_embeddings: q_emb,
        query_ids,
        query_cams,
        query_rates: view.query.iter().map(|r| r.rate).collect(),
        gallery: index,
        recovered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: &[&[f32]], ids: &[usize]) -> GalleryIndex {
        GalleryIndex::new(
            rows[0].len(),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            ids.to_vec(),
            vec![1; ids.len()],
        )
        .unwrap()
    }

    #[test]
    fn rank_by_hand() {
        let idx = index(&[&[0.0, 0.0], &[3.0, 4.0]], &[0, 1]);
        assert_eq!(rank_query(&[0.0, 1.0], &idx).unwrap(), vec![0, 1]);
        assert_eq!(rank_query(&[3.0, 4.0], &idx).unwrap(), vec![1, 0]);
        let tied = index(&[&[1.0], &[-1.0]], &[0, 1]);
        assert_eq!(rank_query(&[0.0], &tied).unwrap(), vec![0, 1]);
        assert!(rank_query(&[0.0], &idx).is_err());
    }

    #[test]
    fn cmc_two_queries_by_hand() {
        let idx = index(&[&[0.0], &[1.0], &[2.0]], &[0, 1, 2]);
        // query 0 matches at rank 1, query 2 at rank 3
        let rankings = vec![vec![0, 1, 2], vec![0, 1, 2]];
        let r = cmc_map(&rankings, &[0, 2], &[0, 0], &idx).unwrap();
        assert_eq!(r.cmc, vec![0.5, 0.5, 1.0]);
        assert!((r.map - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!(cmc_map(&[vec![0, 1, 2]], &[7], &[0], &idx).is_err());
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        let idx = GalleryIndex::new(1, vec![0.0, 1.0, 2.0], vec![5, 5, 6], vec![0, 1, 1]).unwrap();
        let r = cmc_map(&[vec![0, 2, 1]], &[5], &[0], &idx).unwrap();
        assert_eq!(r.per_query[0].1, vec![6, 5]);
        assert_eq!(r.rank(1), 0.0);
        assert_eq!(r.rank(2), 1.0);
    }

    #[test]
    fn psnr_cases() {
        let x = vec![0.3f32; 48];
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (h, w) = (16, 12);
        let x: Vec<f32> = (0..h * w * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let y: Vec<f32> = (0..h * w * 3).map(|i| ((i * 53) % 97) as f32 / 96.0).collect();
        assert!((ssim(&x, &x, h, w).unwrap() - 1.0).abs() < 1e-12);
        let a = ssim(&x, &y, h, w).unwrap();
        assert!((a - ssim(&y, &x, h, w).unwrap()).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&a));
        assert!(ssim(&x[..30], &y[..30], 2, 5).is_err());
    }

    #[test]
    fn setting_parse() {
        assert_eq!("cross".parse::<Setting>().unwrap(), Setting::Cross);
        assert_eq!("unseen:8".parse::<Setting>().unwrap(), Setting::Unseen(8));
        assert_eq!(Setting::Unseen(8).to_string(), "unseen:8");
        assert!("unseen:1".parse::<Setting>().is_err());
        assert!("bogus".parse::<Setting>().is_err());
    }
}
