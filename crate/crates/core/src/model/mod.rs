//! The HAA network: a global stream, a head-shoulder attention (HSA) stream
//! fed by a localization layer (HLL), and adaptive attention fusion.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{self, Activation, ParamStore, PoolKind, Session};
use crate::tensor::{Graph, Real, Tensor, Var};

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

/// Initial HLL output `(s_x, s_y, t_x, t_y)`: an upper-body crop.
pub const HLL_INIT: [f64; 4] = [0.8, 0.45, 0.0, -0.55];

/// Stabilizer added to the standard deviation in spatial attention.
pub const SPATIAL_STD_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Both streams fused by adaptive attention.
    Haa,
    /// Both streams, plain concatenation (`w1 = w2 = 1`).
    Concat,
    GlobalOnly,
    HsaOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Haa, Variant::Concat, Variant::GlobalOnly, Variant::HsaOnly];

    pub fn uses_global(self) -> bool {
        self != Variant::HsaOnly
    }

    pub fn uses_hsa(self) -> bool {
        self != Variant::GlobalOnly
    }

    pub fn code(self) -> u32 {
        match self {
            Variant::Haa => 0,
            Variant::Concat => 1,
            Variant::GlobalOnly => 2,
            Variant::HsaOnly => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.code() == code)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Haa => "haa",
            Variant::Concat => "concat",
            Variant::GlobalOnly => "global-only",
            Variant::HsaOnly => "hsa-only",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// Zoom-and-shift transform predicted by the localization layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.sx, self.sy, self.tx, self.ty]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        AffineParams {
            sx: v[0],
            sy: v[1],
            tx: v[2],
            ty: v[3],
        }
    }
}

/// Normalized `(left, top, right, bottom)` box in `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLtrb {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BoxLtrb {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        BoxLtrb { left, top, right, bottom }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }

    pub fn area(self) -> f64 {
        (self.right - self.left).max(0.0) * (self.bottom - self.top).max(0.0)
    }

    pub fn iou(self, other: BoxLtrb) -> f64 {
        let inter = BoxLtrb::new(
            self.left.max(other.left),
            self.top.max(other.top),
            self.right.min(other.right),
            self.bottom.min(other.bottom),
        )
        .area();
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Maps a crop transform onto the box it covers, clamped to the image.
pub fn params_to_box(p: AffineParams) -> BoxLtrb {
    let c = |v: f64| v.clamp(0.0, 1.0);
    BoxLtrb::new(
        c((p.tx - p.sx + 1.0) / 2.0),
        c((p.ty - p.sy + 1.0) / 2.0),
        c((p.tx + p.sx + 1.0) / 2.0),
        c((p.ty + p.sy + 1.0) / 2.0),
    )
}

/// Differentiable [`params_to_box`] over `[n, 4]` params.
pub fn params_to_box_graph<T: Real>(g: &mut Graph<T>, params: Var) -> Result<Var> {
    #[rustfmt::skip]
    let map = Tensor::from_f64(&[4, 4], &[
        -0.5, 0.0, 0.5, 0.0,
        0.0, -0.5, 0.0, 0.5,
        0.5, 0.0, 0.5, 0.0,
        0.0, 0.5, 0.0, 0.5,
    ])?;
    let map = g.constant(map);
    let b = g.matmul(params, map)?;
    let b = g.add_scalar(b, 0.5);
    Ok(g.clamp(b, 0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of the four backbone conv blocks.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Output channels of the localization tower (stride 2 each).
    pub hll_widths: Vec<usize>,
    /// Final descriptor length; half global, half head-shoulder.
    pub embed_dim: usize,
    /// Channel reduction ratio of the attention gates.
    pub reduction: usize,
    pub stripes: usize,
    /// Use the global backbone weights for the HSA stream too.
    pub share_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 96,
            input_w: 32,
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 1],
            hll_widths: vec![8, 16, 32],
            embed_dim: 120,
            reduction: 4,
            stripes: 3,
            share_backbone: false,
        }
    }
}

const KERNEL: usize = 3;
const PAD: usize = 1;

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 * PAD - KERNEL) / stride + 1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return fail(format!("{} widths but {} strides", self.widths.len(), self.strides.len()));
        }
        if self.stripes != 3 {
            return fail(format!("stripe count is fixed at 3, got {}", self.stripes));
        }
        if self.embed_dim == 0 || self.embed_dim % (2 * self.stripes) != 0 {
            return fail(format!(
                "embedding size {} must be a positive multiple of {}",
                self.embed_dim,
                2 * self.stripes
            ));
        }
        let channels = self.channels();
        if self.reduction == 0 || channels / self.reduction == 0 {
            return fail(format!("reduction {} too large for {channels} channels", self.reduction));
        }
        let (fh, _) = self.feature_size();
        if fh < self.stripes {
            return fail(format!("feature map height {fh} is smaller than {} stripes", self.stripes));
        }
        if self.input_h < KERNEL || self.input_w < KERNEL || self.hll_widths.is_empty() {
            return fail("input too small or empty localization tower".into());
        }
        Ok(())
    }

    /// Channels of the backbone output.
    pub fn channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// Spatial size of the backbone output.
    pub fn feature_size(&self) -> (usize, usize) {
        self.strides
            .iter()
            .fold((self.input_h, self.input_w), |(h, w), &s| (conv_out(h, s), conv_out(w, s)))
    }

    /// Row ranges of the horizontal stripes; leftover rows go to the last one.
    pub fn stripe_rows(&self) -> Vec<(usize, usize)> {
        let (fh, _) = self.feature_size();
        let base = fh / self.stripes;
        (0..self.stripes)
            .map(|i| {
                let len = if i + 1 == self.stripes { fh - base * i } else { base };
                (i * base, len)
            })
            .collect()
    }

    pub fn half_dim(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn stripe_dim(&self) -> usize {
        self.embed_dim / (2 * self.stripes)
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Final descriptor `[n, d]`.
    pub f: Var,
    pub f_g: Option<Var>,
    pub f_h: Option<Var>,
    /// Black-vs-not logits `[n, 2]`.
    pub black_logits: Option<Var>,
    /// Fusion weights `(w1, w2)` as `[n, 2]`.
    pub weights: Option<Var>,
    /// Localization output `[n, 4]`.
    pub hll_params: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct FuseOutput {
    pub f: Var,
    pub black_logits: Var,
    pub weights: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HaaModel {
    pub config: ModelConfig,
    pub variant: Variant,
}

impl HaaModel {
    pub fn new(config: ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        Ok(HaaModel { config, variant })
    }

    fn hsa_backbone_prefix(&self) -> &'static str {
        if self.config.share_backbone {
            "global.bb"
        } else {
            "hsa.bb"
        }
    }

    fn init_backbone<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str, seed: u64) {
        let mut inp = 3;
        for (i, &w) in self.config.widths.iter().enumerate() {
            nn::init_conv(store, &format!("{prefix}.conv{i}"), w, inp, KERNEL, seed);
            inp = w;
        }
    }

    /// Freshly initialized parameters for this variant (classifier heads are
    /// added by [`init_head`]).
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let cfg = &self.config;
        let mut store = ParamStore::new();
        let c = cfg.channels();
        if self.variant.uses_global() || cfg.share_backbone {
            self.init_backbone(&mut store, "global.bb", seed);
        }
        if self.variant.uses_global() {
            nn::init_dense(&mut store, "global.red", cfg.half_dim(), c, seed);
        }
        if self.variant.uses_hsa() {
            let mut inp = 3;
            for (i, &w) in cfg.hll_widths.iter().enumerate() {
                nn::init_conv(&mut store, &format!("hll.conv{i}"), w, inp, KERNEL, seed);
                inp = w;
            }
            store.insert("hll.fc.w", Tensor::zeros(&[4, inp]));
            let [sx, sy, tx, ty] = HLL_INIT;
            let logit = |v: f64| (v / (1.0 - v)).ln();
            store.insert(
                "hll.fc.b",
                Tensor::from_parts(vec![4], vec![T::lit(logit(sx)), T::lit(logit(sy)), T::lit(tx.atanh()), T::lit(ty.atanh())]),
            );
            if !cfg.share_backbone {
                self.init_backbone(&mut store, "hsa.bb", seed);
            }
            let r = c / cfg.reduction;
            for i in 0..cfg.stripes {
                nn::init_gem(&mut store, &format!("hsa.han{i}.gem"));
                nn::init_dense(&mut store, &format!("hsa.han{i}.down"), r, c, seed);
                nn::init_dense(&mut store, &format!("hsa.han{i}.up"), c, r, seed);
                nn::init_gem(&mut store, &format!("hsa.pool{i}"));
                nn::init_dense(&mut store, &format!("hsa.red{i}"), cfg.stripe_dim(), c, seed);
            }
        }
        if self.variant == Variant::Haa {
            nn::init_dense(&mut store, "fuse.black", 2, cfg.half_dim(), seed);
            // zero map: fusion starts as an even split and only training moves it
            store.insert("fuse.weight.w", Tensor::zeros(&[2, 2]));
            store.insert("fuse.weight.b", Tensor::zeros(&[2]));
        }
        store
    }

    /// Descriptor length the variant produces.
    pub fn descriptor_dim(&self) -> usize {
        match self.variant {
            Variant::Haa | Variant::Concat => self.config.embed_dim,
            Variant::GlobalOnly | Variant::HsaOnly => self.config.half_dim(),
        }
    }

    fn check_images<T: Real>(&self, g: &Graph<T>, images: Var) -> Result<()> {
        let s = g.shape(images);
        let want = [s.first().copied().unwrap_or(0), 3, self.config.input_h, self.config.input_w];
        if s.len() != 4 || s[1..] != want[1..] {
            return Err(Error::shape("image size", s, &want));
        }
        Ok(())
    }

    fn backbone<T: Real>(&self, s: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
        let mut h = x;
        for (i, &stride) in self.config.strides.iter().enumerate() {
            h = nn::conv_block(s, h, &format!("{prefix}.conv{i}"), stride, PAD)?;
        }
        Ok(h)
    }

    /// Global stream: backbone, GAP, linear channel reduction -> `[n, d/2]`.
    pub fn global_forward<T: Real>(&self, s: &mut Session<T>, images: Var) -> Result<Var> {
        self.check_images(&s.graph, images)?;
        let x = self.backbone(s, images, "global.bb")?;
        let pooled = nn::gap(&mut s.graph, x)?;
        nn::dense(s, pooled, "global.red", Activation::None)
    }

    /// Localization layer: conv tower, GAP, 4-way dense; scales squashed by
    /// sigmoid, translations by tanh. Returns `[n, 4]`.
    pub fn hll_predict<T: Real>(&self, s: &mut Session<T>, images: Var) -> Result<Var> {
        self.check_images(&s.graph, images)?;
        let mut h = images;
        for i in 0..self.config.hll_widths.len() {
            h = nn::conv_block(s, h, &format!("hll.conv{i}"), 2, PAD)?;
        }
        let pooled = nn::gap(&mut s.graph, h)?;
        let raw = nn::dense(s, pooled, "hll.fc", Activation::None)?;
        let g = &mut s.graph;
        let scales = g.narrow(raw, 1, 0, 2)?;
        let scales = g.sigmoid(scales);
        let shifts = g.narrow(raw, 1, 2, 2)?;
        let shifts = g.tanh(shifts);
        g.concat(&[scales, shifts], 1)
    }

    /// HSA stream from given crop params: resample, backbone, three stripes
    /// of channel + spatial attention, GeM and per-stripe reduction,
    /// concatenated to `[n, d/2]`.
    pub fn hsa_from_params<T: Real>(&self, s: &mut Session<T>, images: Var, params: Var) -> Result<Var> {
        self.check_images(&s.graph, images)?;
        let (h, w) = (self.config.input_h, self.config.input_w);
        let crop = nn::affine_grid_sample(&mut s.graph, images, params, h, w)?;
        let x = self.backbone(s, crop, self.hsa_backbone_prefix())?;
        self.hsa_stripes(s, x)
    }

    /// Splits a `[n, c, h', w']` HSA feature map into horizontal stripes and
    /// concatenates their attended, pooled features.
    pub fn hsa_stripes<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.config.stripes);
        for (i, (start, len)) in self.config.stripe_rows().into_iter().enumerate() {
            let stripe = s.graph.narrow(x, 2, start, len)?;
            parts.push(self.stripe_feature(s, stripe, i)?);
        }
        s.graph.concat(&parts, 1)
    }

    /// Attention and pooling for one stripe -> `[n, d/6]`.
    pub fn stripe_feature<T: Real>(&self, s: &mut Session<T>, stripe: Var, i: usize) -> Result<Var> {
        let a = channel_attention(s, stripe, &format!("hsa.han{i}"))?;
        let f = spatial_attention(&mut s.graph, a)?;
        let pooled = nn::pool(s, f, PoolKind::Gem, &format!("hsa.pool{i}"))?;
        nn::dense(s, pooled, &format!("hsa.red{i}"), Activation::None)
    }

    /// Full HSA stream. Returns `(f_h, hll params)`.
    pub fn hsa_forward<T: Real>(&self, s: &mut Session<T>, images: Var) -> Result<(Var, Var)> {
        let params = self.hll_predict(s, images)?;
        let f_h = self.hsa_from_params(s, images, params)?;
        Ok((f_h, params))
    }

    /// Full forward pass for the configured variant.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, images: Var) -> Result<Forward> {
        let f_g = if self.variant.uses_global() {
            Some(self.global_forward(s, images)?)
        } else {
            None
        };
        let (f_h, hll_params) = if self.variant.uses_hsa() {
            let (f, p) = self.hsa_forward(s, images)?;
            (Some(f), Some(p))
        } else {
            (None, None)
        };
        let mut out = Forward {
            f: f_g.or(f_h).expect("variant uses at least one stream"),
            f_g,
            f_h,
            black_logits: None,
            weights: None,
            hll_params,
        };
        if let (Some(fg), Some(fh)) = (f_g, f_h) {
            if self.variant == Variant::Haa {
                let fused = adaptive_fuse(s, fg, fh)?;
                out.f = fused.f;
                out.black_logits = Some(fused.black_logits);
                out.weights = Some(fused.weights);
            } else {
                out.f = s.graph.concat(&[fg, fh], 1)?;
            }
        }
        Ok(out)
    }
}

/// Adds a classifier head `head.<name>` over features of length `dim`.
pub fn init_head<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, num_ids: usize, seed: u64) {
    nn::init_dense(store, &format!("head.{name}"), num_ids, dim, seed);
}

/// Identity logits from a descriptor: one dense layer, no activation.
pub fn classify_identity<T: Real>(s: &mut Session<T>, f: Var, head: &str) -> Result<Var> {
    nn::dense(s, f, &format!("head.{head}"), Activation::None)
}

/// Gated shortcut `x + x * d` with a per-channel gate `d` of shape `[n, c]`.
pub fn apply_channel_gate<T: Real>(g: &mut Graph<T>, x: Var, gate: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let gs = g.shape(gate).to_vec();
    if xs.len() != 4 || gs != xs[..2] {
        return Err(Error::shape("channel gate", &xs, &gs));
    }
    let d = g.reshape(gate, &[xs[0], xs[1], 1, 1])?;
    let xd = g.mul(x, d)?;
    g.add(x, xd)
}

/// Channel attention: `d = sigmoid(U relu(W GeM(x)))`, `A = x + x * d`.
pub fn channel_attention<T: Real>(s: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
    let pooled = nn::pool(s, x, PoolKind::Gem, &format!("{prefix}.gem"))?;
    let hidden = nn::dense(s, pooled, &format!("{prefix}.down"), Activation::Relu)?;
    let gate = nn::dense(s, hidden, &format!("{prefix}.up"), Activation::Sigmoid)?;
    apply_channel_gate(&mut s.graph, x, gate)
}

/// Spatial attention: the channel-sum map is standardized per sample and
/// squashed by a sigmoid, then used as a per-location gate on every channel.
pub fn spatial_attention<T: Real>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("spatial attention", &shape, &[]));
    }
    let s = g.sum(a, &[1], true)?;
    let mu = g.mean(s, &[2, 3], true)?;
    let centered = g.sub(s, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq, &[2, 3], true)?;
    let std = g.sqrt(var);
    let den = g.add_scalar(std, SPATIAL_STD_EPS);
    let z = g.div(centered, den)?;
    let gate = g.sigmoid(z);
    g.mul(a, gate)
}

/// `concat(w1 * f_g, w2 * f_h)` with weights `[n, 2]`.
pub fn fuse_with_weights<T: Real>(g: &mut Graph<T>, f_g: Var, f_h: Var, weights: Var) -> Result<Var> {
    let (gs, hs, ws) = (g.shape(f_g).to_vec(), g.shape(f_h).to_vec(), g.shape(weights).to_vec());
    if gs.len() != 2 || gs != hs {
        return Err(Error::shape("adaptive fuse", &gs, &hs));
    }
    if ws != [gs[0], 2] {
        return Err(Error::shape("adaptive fuse weights", &ws, &[gs[0], 2]));
    }
    let w1 = g.narrow(weights, 1, 0, 1)?;
    let w2 = g.narrow(weights, 1, 1, 1)?;
    let a = g.mul(f_g, w1)?;
    let b = g.mul(f_h, w2)?;
    g.concat(&[a, b], 1)
}

/// Adaptive attention: black logits from `f_g`, fusion weights from the
/// logits, weighted concatenation.
pub fn adaptive_fuse<T: Real>(s: &mut Session<T>, f_g: Var, f_h: Var) -> Result<FuseOutput> {
    let (gs, hs) = (s.graph.shape(f_g).to_vec(), s.graph.shape(f_h).to_vec());
    if gs != hs {
        return Err(Error::shape("adaptive fuse", &gs, &hs));
    }
    let black_logits = nn::dense(s, f_g, "fuse.black", Activation::None)?;
    let weights = nn::dense(s, black_logits, "fuse.weight", Activation::Sigmoid)?;
    let f = fuse_with_weights(&mut s.graph, f_g, f_h, weights)?;
    Ok(FuseOutput { f, black_logits, weights })
}
