//! The six trainable components and their forward passes.
//!
//! * `E`, the cross-resolution encoder: a stem convolution followed by five
//!   residual stages whose outputs form the feature pyramid `f^1..f^5`.
//! * `G`, the HR decoder: starts from `f^5`, up-samples back to the input
//!   size, and concatenates configured shallow taps on the way.
//! * `F`, the HR encoder: same architecture as `E`, separate parameters.
//! * `C`, the classifier: global average pooling and one linear layer.
//! * `D_F<j>`, one feature discriminator per aligned pyramid level.
//! * `D_I`, the image discriminator.
//!
//! Parameters live in a [`ParamStore`] under dotted names such as
//! `E.stage3.conv1.weight`; the [`NetworkBundle`] only records their ids.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kv::{KvDoc, KvWriter};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 5;
const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
/// Channels per normalisation group; narrower layers use one group.
const NORM_GROUP_WIDTH: usize = 8;
/// Initial normalisation scale on the second convolution of each stage.
const RESIDUAL_GAMMA: f64 = 0.5;
/// Input clamp before taking the logit in the decoder residual.
const INPUT_LOGIT_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_stride: usize,
    pub channels: [usize; NUM_STAGES],
    pub strides: [usize; NUM_STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_stride: 1,
            channels: [16, 32, 64, 128, 256],
            strides: [2, 2, 2, 2, 1],
        }
    }
}

impl BackboneConfig {
    /// Channel count `d` of the embedding tap `f^5`.
    pub fn embed_channels(&self) -> usize {
        self.channels[NUM_STAGES - 1]
    }

    pub fn total_stride(&self) -> usize {
        self.stem_stride * self.strides.iter().product::<usize>()
    }

    /// `(h_j, w_j)` of each stage output for an `h×w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> [(usize, usize); NUM_STAGES] {
        let mut size = (h / self.stem_stride, w / self.stem_stride);
        let mut out = [(0, 0); NUM_STAGES];
        for (o, &s) in out.iter_mut().zip(&self.strides) {
            size = (size.0 / s, size.1 / s);
            *o = size;
        }
        out
    }
}

/// Which maps feed the pooled retrieval vector `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmbeddingMode {
    #[default]
    Joint,
    FOnly,
    GOnly,
}

impl EmbeddingMode {
    pub fn needs_g(self) -> bool {
        self != EmbeddingMode::FOnly
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Joint => "joint",
            EmbeddingMode::FOnly => "f_only",
            EmbeddingMode::GOnly => "g_only",
        })
    }
}

impl FromStr for EmbeddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(EmbeddingMode::Joint),
            "f_only" => Ok(EmbeddingMode::FOnly),
            "g_only" => Ok(EmbeddingMode::GOnly),
            other => Err(Error::Config(format!("unknown embedding mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    pub backbone: BackboneConfig,
    /// Pyramid levels (1-based) concatenated into the decoder.
    pub decoder_skips: Vec<usize>,
    /// Decoder head predicts a correction to the logit of the encoder input
    /// instead of the image itself.
    pub input_residual: bool,
    /// Pyramid levels (1-based) that get a feature discriminator.
    pub align_levels: Vec<usize>,
    pub disc_width: usize,
    pub num_classes: usize,
    pub embedding: EmbeddingMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            backbone: BackboneConfig::default(),
            decoder_skips: vec![2, 3],
            input_residual: true,
            align_levels: vec![1, 2],
            disc_width: 32,
            num_classes: 20,
            embedding: EmbeddingMode::Joint,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stem_stride == 0 || b.strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::Config("stage strides must be 1 or 2 and the stem stride positive".into()));
        }
        if b.channels.contains(&0) || self.disc_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let ts = b.total_stride();
        if self.height % ts != 0 || self.width % ts != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by the total stride {ts}",
                self.height, self.width
            )));
        }
        if !b.stem_stride.is_power_of_two() {
            return Err(Error::Config("stem stride must be a power of two".into()));
        }
        for (what, levels) in [("decoder_skips", &self.decoder_skips), ("align_levels", &self.align_levels)] {
            if let Some(&l) = levels.iter().find(|&&l| l == 0 || l > NUM_STAGES) {
                return Err(Error::Config(format!("{what}: level {l} outside 1..={NUM_STAGES}")));
            }
        }
        if self.decoder_skips.contains(&NUM_STAGES) {
            return Err(Error::Config("decoder_skips: the deepest map is already the trunk".into()));
        }
        if self.align_levels.is_empty() {
            return Err(Error::Config("align_levels must not be empty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Width of the pooled vector `u`.
    pub fn embed_dim(&self) -> usize {
        let d = self.backbone.embed_channels();
        match self.embedding {
            EmbeddingMode::Joint => 2 * d,
            _ => d,
        }
    }

    pub fn from_kv(doc: &KvDoc, section: &str) -> Result<Self> {
        Self::from_kv_over(doc, section, Self::default())
    }

    /// Like [`NetworkConfig::from_kv`], with missing keys taken from `d`.
    pub fn from_kv_over(doc: &KvDoc, section: &str, d: Self) -> Result<Self> {
        let mut s = doc.section(section);
        let arr = |v: Option<Vec<usize>>, dflt: [usize; NUM_STAGES], key: &str| -> Result<[usize; NUM_STAGES]> {
            match v {
                None => Ok(dflt),
                Some(v) => v
                    .try_into()
                    .map_err(|v: Vec<usize>| Error::Config(format!("{key} needs {NUM_STAGES} entries, got {}", v.len()))),
            }
        };
        let cfg = Self {
            height: s.get_or("height", d.height)?,
            width: s.get_or("width", d.width)?,
            backbone: BackboneConfig {
                stem_stride: s.get_or("stem_stride", d.backbone.stem_stride)?,
                channels: arr(s.get_list("channels")?, d.backbone.channels, "channels")?,
                strides: arr(s.get_list("strides")?, d.backbone.strides, "strides")?,
            },
            decoder_skips: s.get_list("decoder_skips")?.unwrap_or(d.decoder_skips),
            input_residual: s.get_or("input_residual", d.input_residual)?,
            align_levels: s.get_list("align_levels")?.unwrap_or(d.align_levels),
            disc_width: s.get_or("disc_width", d.disc_width)?,
            num_classes: s.get_or("num_classes", d.num_classes)?,
            embedding: s.get_or("embedding", d.embedding)?,
        };
        s.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.kv("height", self.height)
            .kv("width", self.width)
            .kv("stem_stride", self.backbone.stem_stride)
            .list("channels", &self.backbone.channels)
            .list("strides", &self.backbone.strides)
            .list("decoder_skips", &self.decoder_skips)
            .kv("input_residual", self.input_residual)
            .list("align_levels", &self.align_levels)
            .kv("disc_width", self.disc_width)
            .kv("num_classes", self.num_classes)
            .kv("embedding", self.embedding);
    }
}

/// Per-sample group normalisation with a learned per-channel affine map.
#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, gamma: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::c(gamma))),
            beta: store.add_zeros(format!("{name}.beta"), &[c]),
            groups: if c % NORM_GROUP_WIDTH == 0 { c / NORM_GROUP_WIDTH } else { 1 },
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<Norm>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_he(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, 1.0, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[c_out]));
        Self {
            weight,
            bias,
            norm: None,
            stride,
            pad: k / 2,
        }
    }

    /// Bias-free convolution followed by group normalisation whose scale
    /// starts at `gamma`.
    #[allow(clippy::too_many_arguments)]
    fn normed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gamma: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::new(store, name, c_in, c_out, k, stride, false, rng);
        conv.norm = Some(Norm::new(store, &format!("{name}.norm"), c_out, gamma));
        conv
    }

    fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Self {
        Self {
            weight: store.add_zeros(format!("{name}.weight"), &[c_out, c_in, k, k]),
            bias: bias.then(|| store.add_zeros(format!("{name}.bias"), &[c_out])),
            norm: None,
            stride: 1,
            pad: k / 2,
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        let y = g.conv2d(x, w, b, self.stride, self.pad);
        match self.norm {
            Some(n) => {
                let gamma = g.param(n.gamma);
                let beta = g.param(n.beta);
                g.group_norm(y, gamma, beta, n.groups, NORM_EPS)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualStage {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResidualStage {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.conv1.apply(g, x);
        let h = g.relu(h);
        let h = self.conv2.apply(g, h);
        let skip = match &self.shortcut {
            Some(s) => s.apply(g, x),
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: Conv,
    stages: Vec<ResidualStage>,
}

impl Backbone {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let c0 = cfg.channels[0];
        let stem = Conv::normed(store, &format!("{prefix}.stem"), 3, c0, 3, cfg.stem_stride, 1.0, rng);
        let mut c_in = c0;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (j, (&c, &s)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let name = format!("{prefix}.stage{}", j + 1);
            let conv1 = Conv::normed(store, &format!("{name}.conv1"), c_in, c, 3, s, 1.0, rng);
            // the residual branch starts small so the identity path dominates at init
            let conv2 = Conv::normed(store, &format!("{name}.conv2"), c, c, 3, 1, RESIDUAL_GAMMA, rng);
            let shortcut = (s != 1 || c_in != c)
                .then(|| Conv::normed(store, &format!("{name}.shortcut"), c_in, c, 1, s, 1.0, rng));
            stages.push(ResidualStage { conv1, conv2, shortcut });
            c_in = c;
        }
        Self { stem, stages }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Vec<Var> {
        let h = self.stem.apply(g, x);
        let mut h = g.relu(h);
        let mut taps = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            h = stage.forward(g, h);
            taps.push(h);
        }
        taps
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    /// `(level, upsample_first, conv)` for levels 4 down to 1.
    levels: Vec<(usize, bool, Conv)>,
    /// Extra up-sampling convolutions back to input resolution.
    outs: Vec<Conv>,
    head: Conv,
}

impl Decoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut impl Rng) -> Self {
        let b = &cfg.backbone;
        let sizes = b.stage_sizes(cfg.height, cfg.width);
        let mut cur_c = b.channels[NUM_STAGES - 1];
        let mut cur_hw = sizes[NUM_STAGES - 1];
        let mut levels = Vec::new();
        for j in (1..NUM_STAGES).rev() {
            let up = sizes[j - 1] != cur_hw;
            let mut c_in = cur_c;
            if cfg.decoder_skips.contains(&j) {
                c_in += b.channels[j - 1];
            }
            let c_out = b.channels[j - 1];
            levels.push((j, up, Conv::normed(store, &format!("G.level{j}"), c_in, c_out, 3, 1, 1.0, rng)));
            cur_c = c_out;
            cur_hw = sizes[j - 1];
        }
        let mut outs = Vec::new();
        while cur_hw.0 < cfg.height {
            let name = format!("G.out{}", outs.len() + 1);
            outs.push(Conv::normed(store, &name, cur_c, b.channels[0], 3, 1, 1.0, rng));
            cur_c = b.channels[0];
            cur_hw = (cur_hw.0 * 2, cur_hw.1 * 2);
        }
        let head = Conv::zeroed(store, "G.head", cur_c, 3, 3, !cfg.input_residual);
        Self { levels, outs, head }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pyramid: &FeaturePyramid, cfg: &NetworkConfig) -> Var {
        let skips = &cfg.decoder_skips;
        let mut h = pyramid.maps[NUM_STAGES - 1];
        for &(j, up, conv) in &self.levels {
            if up {
                h = g.upsample2x(h);
            }
            if skips.contains(&j) {
                h = g.concat_channels(&[h, pyramid.maps[j - 1]]);
            }
            let c = conv.apply(g, h);
            h = g.relu(c);
        }
        for conv in &self.outs {
            let u = g.upsample2x(h);
            let c = conv.apply(g, u);
            h = g.relu(c);
        }
        let mut out = self.head.apply(g, h);
        if cfg.input_residual {
            let base = g.value(pyramid.input).map(|v| {
                let p = v.to_f64_lossy().clamp(INPUT_LOGIT_EPS, 1.0 - INPUT_LOGIT_EPS);
                T::c((p / (1.0 - p)).ln())
            });
            let base = g.input(base);
            out = g.add(out, base);
        }
        g.sigmoid(out)
    }
}

/// Strided convolutions with leaky ReLU, a 1×1 sigmoid head, and a spatial
/// mean giving one probability per sample.
#[derive(Clone, Debug)]
struct Discriminator {
    convs: Vec<Conv>,
    head: Conv,
}

impl Discriminator {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        hw: (usize, usize),
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // down-sample until the shorter side reaches 2, at most three times, at least once
        let mut convs = Vec::new();
        let (mut c, mut side) = (c_in, hw.0.min(hw.1));
        let mut out_c = width;
        while convs.is_empty() || (side > 2 && convs.len() < 3) {
            let stride = if side >= 2 { 2 } else { 1 };
            convs.push(Conv::new(store, &format!("{prefix}.conv{}", convs.len()), c, out_c, 3, stride, true, rng));
            c = out_c;
            out_c *= 2;
            side /= stride;
        }
        let head = Conv::new(store, &format!("{prefix}.head"), c, 1, 1, 1, true, rng);
        Self { convs, head }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            let c = conv.apply(g, h);
            h = g.leaky_relu(c, LEAKY_SLOPE);
        }
        let logits = self.head.apply(g, h);
        let p = g.sigmoid(logits);
        g.sample_mean(p)
    }
}

/// The five stage outputs `f^1..f^5` of one encoder pass, and its input.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<Var>,
    pub input: Var,
}

impl FeaturePyramid {
    /// Level `j` (1-based).
    pub fn level(&self, j: usize) -> Var {
        self.maps[j - 1]
    }

    /// The resolution-invariant representation `f`.
    pub fn f(&self) -> Var {
        self.maps[NUM_STAGES - 1]
    }
}

/// `v` is the channel concatenation (f first), `u` its spatial mean.
#[derive(Clone, Copy, Debug)]
pub struct JointEmbedding {
    pub v: Var,
    pub u: Var,
}

/// Parameter-group names, usable with [`ParamStore::ids_with_prefix`].
pub mod group {
    pub const ENCODER: &str = "E";
    pub const DECODER: &str = "G";
    pub const HR_ENCODER: &str = "F";
    pub const CLASSIFIER: &str = "C";
    pub const IMAGE_DISC: &str = "D_I";

    pub fn feature_disc(level: usize) -> String {
        format!("D_F{level}")
    }
}

#[derive(Clone, Debug)]
pub struct NetworkBundle {
    config: NetworkConfig,
    encoder: Backbone,
    decoder: Decoder,
    hr_encoder: Backbone,
    classifier: (ParamId, ParamId),
    feature_discs: Vec<(usize, Discriminator)>,
    image_disc: Discriminator,
}

impl NetworkBundle {
    /// Register every parameter in `store` (which should start empty) and
    /// return the bundle describing the architecture.
    pub fn init<T: Scalar>(config: NetworkConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let b = &config.backbone;
        let encoder = Backbone::new(store, group::ENCODER, b, rng);
        let decoder = Decoder::new(store, &config, rng);
        let hr_encoder = Backbone::new(store, group::HR_ENCODER, b, rng);
        let dim = config.embed_dim();
        let fc_w = store.add_he("C.fc.weight", &[config.num_classes, dim], dim, 0.5, rng);
        let fc_b = store.add_zeros("C.fc.bias", &[config.num_classes]);
        let sizes = b.stage_sizes(config.height, config.width);
        let mut levels = config.align_levels.clone();
        levels.sort_unstable();
        levels.dedup();
        let feature_discs = levels
            .iter()
            .map(|&j| {
                let d = Discriminator::new(
                    store,
                    &group::feature_disc(j),
                    b.channels[j - 1],
                    sizes[j - 1],
                    config.disc_width,
                    rng,
                );
                (j, d)
            })
            .collect();
        let image_disc = Discriminator::new(
            store,
            group::IMAGE_DISC,
            3,
            (config.height, config.width),
            config.disc_width,
            rng,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
            hr_encoder,
            classifier: (fc_w, fc_b),
            feature_discs,
            image_disc,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Sorted, de-duplicated aligned levels.
    pub fn align_levels(&self) -> Vec<usize> {
        self.feature_discs.iter().map(|(j, _)| *j).collect()
    }

    fn check_input<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.height || s[3] != self.config.width {
            return Err(Error::Shape(format!(
                "expected [B, 3, {}, {}] images, got {s:?}",
                self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<FeaturePyramid> {
        self.check_input(g, x)?;
        Ok(FeaturePyramid {
            maps: self.encoder.forward(g, x),
            input: x,
        })
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, pyramid: &FeaturePyramid) -> Result<Var> {
        let sizes = self.config.backbone.stage_sizes(self.config.height, self.config.width);
        if pyramid.maps.len() != NUM_STAGES {
            return Err(Error::Shape(format!("pyramid has {} maps", pyramid.maps.len())));
        }
        for (j, (&m, &(h, w))) in pyramid.maps.iter().zip(&sizes).enumerate() {
            let s = g.value(m).shape();
            if s.len() != 4 || s[1] != self.config.backbone.channels[j] || (s[2], s[3]) != (h, w) {
                return Err(Error::Shape(format!("pyramid level {} has shape {s:?}", j + 1)));
            }
        }
        Ok(self.decoder.forward(g, pyramid, &self.config))
    }

    /// `g = F(x)`, the deepest tap of the HR encoder.
    pub fn hr_encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        Ok(*self.hr_encoder.forward(g, x).last().expect("five stages"))
    }

    pub fn joint_embed<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var, g_map: Option<Var>) -> Result<JointEmbedding> {
        let v = match (self.config.embedding, g_map) {
            (EmbeddingMode::FOnly, _) => f,
            (EmbeddingMode::GOnly, Some(gm)) => gm,
            (EmbeddingMode::Joint, Some(gm)) => {
                if g.value(f).shape() != g.value(gm).shape() {
                    return Err(Error::Shape(format!(
                        "f {:?} vs g {:?}",
                        g.value(f).shape(),
                        g.value(gm).shape()
                    )));
                }
                g.concat_channels(&[f, gm])
            }
            (mode, None) => return Err(Error::Precondition(format!("embedding mode {mode} needs the g map"))),
        };
        let u = g.gap(v);
        Ok(JointEmbedding { v, u })
    }

    /// Class logits `[B, num_classes]` from the joint map `v`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var) -> Result<Var> {
        let c = g.value(v).shape()[1];
        if c != self.config.embed_dim() {
            return Err(Error::Shape(format!(
                "classifier expects {} channels, got {c}",
                self.config.embed_dim()
            )));
        }
        let u = g.gap(v);
        Ok(self.classify_pooled(g, u))
    }

    /// Class logits from an already pooled `u`.
    pub fn classify_pooled<T: Scalar>(&self, g: &mut Graph<'_, T>, u: Var) -> Var {
        let w = g.param(self.classifier.0);
        let b = g.param(self.classifier.1);
        g.linear(u, w, b)
    }

    /// Probability per sample that `f_j` came from an HR image.
    pub fn discriminate_feature<T: Scalar>(&self, g: &mut Graph<'_, T>, level: usize, f_j: Var) -> Result<Var> {
        let (_, d) = self
            .feature_discs
            .iter()
            .find(|(j, _)| *j == level)
            .ok_or_else(|| Error::Precondition(format!("level {level} is not in the alignment set")))?;
        let sizes = self.config.backbone.stage_sizes(self.config.height, self.config.width);
        let s = g.value(f_j).shape();
        let want = sizes[level - 1];
        if s.len() != 4 || s[1] != self.config.backbone.channels[level - 1] || (s[2], s[3]) != want {
            return Err(Error::Shape(format!("level {level} map has shape {s:?}")));
        }
        Ok(d.forward(g, f_j))
    }

    pub fn discriminate_image<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        Ok(self.image_disc.forward(g, x))
    }

    /// Full inference path `x -> f -> x̃_H -> g -> u`, returning `(u, x̃_H)`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let pyr = self.encode(g, x)?;
        let rec = self.decode(g, &pyr)?;
        let gm = if self.config.embedding.needs_g() {
            Some(self.hr_encode(g, rec)?)
        } else {
            None
        };
        let emb = self.joint_embed(g, pyr.f(), gm)?;
        Ok((emb.u, rec))
    }
}

/// Parameter ids of the named groups, in registration order.
pub fn group_ids<T: Scalar>(store: &ParamStore<T>, prefixes: &[&str]) -> Vec<ParamId> {
    let mut ids: Vec<ParamId> = prefixes.iter().flat_map(|p| store.ids_with_prefix(p)).collect();
    ids.sort_by_key(|id| id.index());
    ids
}

impl NetworkBundle {
    /// `E`, `G`, `F`, `C`.
    pub fn main_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        group_ids(store, &[group::ENCODER, group::DECODER, group::HR_ENCODER, group::CLASSIFIER])
    }

    pub fn feature_disc_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        let names: Vec<String> = self.align_levels().iter().map(|&j| group::feature_disc(j)).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        group_ids(store, &refs)
    }

    pub fn image_disc_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        group_ids(store, &[group::IMAGE_DISC])
    }
}
