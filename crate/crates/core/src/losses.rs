//! Training losses.
//!
//! Five terms are summed without weights: a perceptual distance between the
//! dehazed image and the clean image, L1 distances for the image, the
//! transmission and the atmospheric light, and the L1 distance between the
//! re-hazed prediction and the hazy input.
//!
//! The perceptual term uses a frozen, randomly initialized convolutional
//! feature extractor in place of ImageNet-trained VGG16 features, which are
//! not available offline. It taps three depths, standing in for VGG16 layers
//! 3, 8 and 15.

use crate::error::{Error, Result};
use crate::networks::ForwardVars;
use crate::nn::{Activation, ConvBlock, ParamBuilder, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const EXTRACTOR_SEED: u64 = 7777;
pub const EXTRACTOR_WIDTHS: [usize; 3] = [8, 16, 32];

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::shape("l1_loss", format!("{sa} vs {sb}")));
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// L1 between the re-hazed prediction and the observed hazy image.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, recon: Var, hazy: Var) -> Result<Var> {
    l1_loss(g, recon, hazy)
}

#[derive(Clone, Debug)]
struct Stage {
    first: ConvBlock,
    second: ConvBlock,
}

/// Fixed feature extractor: three stages of two 3×3 ReLU convs and a 2×2
/// average pool, widths 8/16/32. Parameters are never trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    params: ParamStore,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        Self::with_seed(EXTRACTOR_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, seed);
        let mut c = 3;
        let mut stages = Vec::new();
        for (i, &w) in EXTRACTOR_WIDTHS.iter().enumerate() {
            let mut s = b.scope(&format!("stage{i}"));
            stages.push(Stage {
                first: ConvBlock::new(&mut s, "conv0", c, w, 3, Activation::Relu).expect("fixed architecture"),
                second: ConvBlock::new(&mut s, "conv1", w, w, 3, Activation::Relu).expect("fixed architecture"),
            });
            c = w;
        }
        for (_, p) in params.iter_mut() {
            p.trainable = false;
        }
        Self { stages, params }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Record the (constant) extractor weights on a graph.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Feature maps after each stage.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x);
        if s.c != 3 {
            return Err(Error::shape("feature_extractor", format!("expected 3 channels, got {s}")));
        }
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut y = x;
        for stage in &self.stages {
            y = stage.first.forward(g, p, y)?;
            y = stage.second.forward(g, p, y)?;
            y = g.avg_pool2d(y, 2, 2)?;
            taps.push(y);
        }
        Ok(taps)
    }

    /// Sum over the three taps of the L1 distance between feature maps.
    pub fn perceptual_loss<T: Real>(&self, g: &mut Graph<T>, p: &[Var], pred: Var, gt: Var) -> Result<Var> {
        let (sp, sg) = (g.shape(pred), g.shape(gt));
        if sp != sg {
            return Err(Error::shape("perceptual_loss", format!("{sp} vs {sg}")));
        }
        let fp = self.features(g, p, pred)?;
        let fg = self.features(g, p, gt)?;
        let mut total: Option<Var> = None;
        for (a, b) in fp.into_iter().zip(fg) {
            let l = l1_loss(g, a, b)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("three taps"))
    }
}

/// Which terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LossToggles {
    pub per: bool,
    pub d: bool,
    pub t: bool,
    pub a: bool,
    pub rec: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl LossToggles {
    pub const ALL: Self = Self { per: true, d: true, t: true, a: true, rec: true };

    /// The ablation grid: the pixel terms (image, transmission, light), the
    /// perceptual term and the reconstruction term switched as three groups.
    pub fn grid() -> [Self; 8] {
        std::array::from_fn(|i| {
            let (pixel, per, rec) = (i & 1 != 0, i & 2 != 0, i & 4 != 0);
            Self { per, d: pixel, t: pixel, a: pixel, rec }
        })
    }

    /// Parse a comma list of `per,d,t,a,rec`; `all` and `none` are shorthands.
    pub fn parse(list: &str) -> Result<Self> {
        let list = list.trim();
        match list {
            "all" => return Ok(Self::ALL),
            "none" => return Ok(Self::none()),
            _ => {}
        }
        let mut t = Self::none();
        for item in list.split(',').map(str::trim) {
            let slot = match item {
                "per" => &mut t.per,
                "d" => &mut t.d,
                "t" => &mut t.t,
                "a" => &mut t.a,
                "rec" => &mut t.rec,
                other => return Err(Error::InvalidArgument(format!("unknown loss term {other:?}"))),
            };
            if std::mem::replace(slot, true) {
                return Err(Error::InvalidArgument(format!("loss term {item:?} listed twice")));
            }
        }
        Ok(t)
    }

    pub fn none() -> Self {
        Self { per: false, d: false, t: false, a: false, rec: false }
    }

    pub fn any(self) -> bool {
        self.per || self.d || self.t || self.a || self.rec
    }

    pub fn flags(self) -> [bool; 5] {
        [self.per, self.d, self.t, self.a, self.rec]
    }
}

impl std::fmt::Display for LossToggles {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if *self == Self::ALL {
            return f.write_str("all");
        }
        if !self.any() {
            return f.write_str("none");
        }
        let names = ["per", "d", "t", "a", "rec"];
        let on: Vec<&str> = names.iter().zip(self.flags()).filter(|(_, b)| *b).map(|(n, _)| *n).collect();
        f.write_str(&on.join(","))
    }
}

/// Ground truth for one batch, recorded on the graph.
#[derive(Clone, Copy, Debug)]
pub struct Targets {
    pub clean: Var,
    pub t: Var,
    pub airlight: Var,
    pub hazy: Var,
}

/// Graph handles of every term. All five are always evaluated so they can be
/// reported; only enabled ones enter `total`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_per: Var,
    pub l_d: Var,
    pub l_t: Var,
    pub l_a: Var,
    pub l_rec: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T: Real = f32> {
    pub l_per: T,
    pub l_d: T,
    pub l_t: T,
    pub l_a: T,
    pub l_rec: T,
    pub total: T,
}

impl LossVars {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport<T> {
        let v = |x: Var| g.value(x).item();
        LossReport {
            l_per: v(self.l_per),
            l_d: v(self.l_d),
            l_t: v(self.l_t),
            l_a: v(self.l_a),
            l_rec: v(self.l_rec),
            total: v(self.total),
        }
    }
}

impl<T: Real> LossReport<T> {
    pub fn terms(&self) -> [T; 5] {
        [self.l_per, self.l_d, self.l_t, self.l_a, self.l_rec]
    }
}

/// Evaluate all five terms and their toggled sum, accumulated left to right
/// in the order per, d, t, a, rec. With every term off the total is zero.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor,
    extractor_params: &[Var],
    out: &ForwardVars,
    truth: &Targets,
    toggles: LossToggles,
) -> Result<LossVars> {
    let l_per = extractor.perceptual_loss(g, extractor_params, out.final_image, truth.clean)?;
    let l_d = l1_loss(g, out.final_image, truth.clean)?;
    let l_t = l1_loss(g, out.t, truth.t)?;
    let l_a = l1_loss(g, out.airlight, truth.airlight)?;
    let l_rec = reconstruction_loss(g, out.recon, truth.hazy)?;
    let mut total: Option<Var> = None;
    for (on, term) in toggles.flags().into_iter().zip([l_per, l_d, l_t, l_a, l_rec]) {
        if on {
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(LossVars { l_per, l_d, l_t, l_a, l_rec, total })
}
