//! The dehazing networks and the full pipeline.
//!
//! ```text
//!            ┌─ TransNet ──> t ─┐
//! hazy I ────┼─ AtmosNet ──> A ─┼─> coarse J = (I − A)/max(t, t_floor) + A
//!            │                  │          │
//!            │                  │   PostProcess (3 → 7 channels)
//!            └─ Drn ──> detail D ──────────┴─> fuse ──> final J' ──> recon = J'·t + A·(1 − t)
//! ```

mod atmos;
mod drn;
mod postprocess;
mod transnet;

pub use atmos::{AtmosNet, DoubleConv, LEVEL_WIDTHS};
pub use drn::{Drn, DILATIONS};
pub use postprocess::{PostProcess, POOL_FACTORS};
pub use transnet::{DecoderStage, EncoderStage, TransNet};

use crate::error::{Error, Result};
use crate::haze::{self, T_FLOOR};
use crate::nn::{Activation, ConvBlock, ParamBuilder, ParamStore, SdcMode};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

pub const DEFAULT_WIDTH: usize = 16;
pub const SIZE_MULTIPLE: usize = 32;

pub(crate) fn check_multiple_of_32(op: &'static str, s: Shape) -> Result<()> {
    if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(SIZE_MULTIPLE) || !s.w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::shape(op, format!("spatial dims of {s} must be multiples of {SIZE_MULTIPLE}")));
    }
    Ok(())
}

/// Architecture switches, including the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub width: usize,
    pub sdc: SdcMode,
    /// Without the detail network the fusion sees only the enhanced coarse image.
    pub drn: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { width: DEFAULT_WIDTH, sdc: SdcMode::Learned, drn: true }
    }
}

#[derive(Clone, Debug)]
pub struct DehazeNet {
    pub config: NetConfig,
    pub trans: TransNet,
    pub atmos: AtmosNet,
    pub post: PostProcess,
    pub drn: Option<Drn>,
    pub fuse: ConvBlock,
}

/// Graph handles for every intermediate of one pipeline pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub t: Var,
    pub airlight: Var,
    pub coarse: Var,
    pub enhanced: Var,
    pub detail: Option<Var>,
    pub final_image: Var,
    pub recon: Var,
}

/// Values of one pipeline pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T: Real = f32> {
    pub t: Tensor<T>,
    pub airlight: Tensor<T>,
    pub coarse: Tensor<T>,
    /// All zeros when the detail network is disabled.
    pub detail: Tensor<T>,
    pub final_image: Tensor<T>,
    pub recon: Tensor<T>,
}

impl ForwardVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> ForwardOutputs<T> {
        let final_image = g.value(self.final_image).clone();
        let detail = match self.detail {
            Some(d) => g.value(d).clone(),
            None => Tensor::zeros(final_image.shape()),
        };
        ForwardOutputs {
            t: g.value(self.t).clone(),
            airlight: g.value(self.airlight).clone(),
            coarse: g.value(self.coarse).clone(),
            detail,
            final_image,
            recon: g.value(self.recon).clone(),
        }
    }
}

impl DehazeNet {
    pub fn new(b: &mut ParamBuilder<'_>, config: NetConfig) -> Result<Self> {
        let c = config.width;
        let trans = TransNet::new(&mut b.scope("trans"), c)?;
        let atmos = AtmosNet::new(&mut b.scope("atmos"))?;
        let post = PostProcess::new(&mut b.scope("post"), 3)?;
        let drn = config.drn.then(|| Drn::new(&mut b.scope("drn"), c, config.sdc)).transpose()?;
        let fuse_in = post.c_out() + if config.drn { 3 } else { 0 };
        let fuse = ConvBlock::new(b, "fuse", fuse_in, 3, 3, Activation::None)?;
        Ok(Self { config, trans, atmos, post, drn, fuse })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], hazy: Var) -> Result<ForwardVars> {
        let s = g.shape(hazy);
        if s.c != 3 {
            return Err(Error::shape("dehaze_forward", format!("expected an RGB batch, got {s}")));
        }
        check_multiple_of_32("dehaze_forward", s)?;
        let t = self.trans.forward(g, p, hazy)?;
        let airlight = self.atmos.forward(g, p, hazy)?;
        let coarse = haze::invert_var(g, hazy, t, airlight, T_FLOOR)?;
        let enhanced = self.post.forward(g, p, coarse)?;
        let detail = self.drn.as_ref().map(|d| d.forward(g, p, hazy)).transpose()?;
        let fused_in = match detail {
            Some(d) => g.concat_channels(&[enhanced, d])?,
            None => enhanced,
        };
        let final_image = self.fuse.forward(g, p, fused_in)?;
        let recon = haze::synthesize_var(g, final_image, t, airlight)?;
        Ok(ForwardVars { t, airlight, coarse, enhanced, detail, final_image, recon })
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: DehazeNet,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = DehazeNet::new(&mut ParamBuilder::new(&mut params, seed), config)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> NetConfig {
        self.net.config
    }

    /// Inference on a batch whose dims are multiples of 32.
    pub fn run<T: Real>(&self, hazy: &Tensor<T>) -> Result<ForwardOutputs<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(hazy.clone());
        let vars = self.net.forward(&mut g, &p, x)?;
        Ok(vars.values(&g))
    }

    /// Inference on an image of any size: edge-pad to a multiple of 32, run, crop.
    pub fn run_any_size(&self, hazy: &Tensor<f32>) -> Result<ForwardOutputs<f32>> {
        let (padded, rec) = pad_to_multiple(hazy, SIZE_MULTIPLE)?;
        let out = self.run(&padded)?;
        Ok(ForwardOutputs {
            t: crop(&out.t, rec)?,
            airlight: crop(&out.airlight, rec)?,
            coarse: crop(&out.coarse, rec)?,
            detail: crop(&out.detail, rec)?,
            final_image: crop(&out.final_image, rec)?,
            recon: crop(&out.recon, rec)?,
        })
    }
}

/// Original spatial size of a padded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub h: usize,
    pub w: usize,
}

/// Edge-replicate padding on the bottom and right up to the next multiple of `m`.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>, m: usize) -> Result<(Tensor<T>, CropRecord)> {
    if m == 0 {
        return Err(Error::InvalidArgument("pad multiple must be positive".into()));
    }
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("pad_to_multiple", format!("empty image {s}")));
    }
    let (h, w) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    let padded = Tensor::from_fn([s.n, s.c, h, w], |n, c, y, xx| x.at(n, c, y.min(s.h - 1), xx.min(s.w - 1)));
    Ok((padded, CropRecord { h: s.h, w: s.w }))
}

pub fn crop<T: Real>(x: &Tensor<T>, rec: CropRecord) -> Result<Tensor<T>> {
    let s = x.shape();
    if rec.h > s.h || rec.w > s.w {
        return Err(Error::shape("crop", format!("{}×{} from {s}", rec.h, rec.w)));
    }
    Ok(Tensor::from_fn([s.n, s.c, rec.h, rec.w], |n, c, y, xx| x.at(n, c, y, xx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::{invert_scattering, synthesize_haze};
    use crate::rng::SplitMix64;
    use crate::tensor::grad_check_sampled;

    fn image<T: Real>(shape: [usize; 4], seed: u64) -> Tensor<T> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_, _, _, _| T::of(rng.uniform(0.0, 1.0)))
    }

    fn zero_all(store: &mut ParamStore) {
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Zero biases put exact ReLU ties wherever a window is all zeros, and
    /// central differences straddle the kink there; nudge every parameter.
    fn jitter(store: &mut ParamStore, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.05, 0.05) as f32);
        }
    }

    #[test]
    fn pipeline_shapes_and_ranges() {
        let m = Model::new(NetConfig::default(), 3).unwrap();
        let out = m.run(&image::<f32>([2, 3, 32, 64], 1)).unwrap();
        assert_eq!(out.t.shape(), Shape::new(2, 1, 32, 64));
        assert_eq!(out.airlight.shape(), Shape::new(2, 3, 32, 64));
        for x in [&out.coarse, &out.detail, &out.final_image, &out.recon] {
            assert_eq!(x.shape(), Shape::new(2, 3, 32, 64));
            assert!(x.is_finite());
        }
        assert!(out.t.data().iter().chain(out.airlight.data()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn coarse_and_recon_identities_are_exact() {
        let m = Model::new(NetConfig::default(), 4).unwrap();
        let hazy = image::<f32>([1, 3, 32, 32], 2);
        let out = m.run(&hazy).unwrap();
        assert_eq!(out.coarse, invert_scattering(&hazy, &out.t, &out.airlight, T_FLOOR).unwrap());
        assert_eq!(out.recon, synthesize_haze(&out.final_image, &out.t, &out.airlight).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::new(NetConfig::default(), 0).unwrap();
        assert!(matches!(m.run(&image::<f32>([1, 3, 48, 32], 0)), Err(Error::Shape { .. })));
        assert!(matches!(m.run(&image::<f32>([1, 1, 32, 32], 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_parameters_give_zero_detail() {
        let mut store = ParamStore::new();
        let drn = Drn::new(&mut ParamBuilder::new(&mut store, 1), 16, SdcMode::Learned).unwrap();
        zero_all(&mut store);
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g);
        let x = g.constant(image([1, 3, 32, 32], 5));
        let d = drn.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(d), Shape::new(1, 3, 32, 32));
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn post_process_of_constant_with_zero_branches() {
        let mut store = ParamStore::new();
        let post = PostProcess::new(&mut ParamBuilder::new(&mut store, 1), 3).unwrap();
        zero_all(&mut store);
        let mut g = Graph::<f64>::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::full([1, 3, 64, 64], 0.3));
        let y = post.forward(&mut g, &p, x).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), Shape::new(1, 7, 64, 64));
        for c in 0..7 {
            let want = if c < 3 { 0.3 } else { 0.0 };
            assert!((0..64 * 64).all(|i| y.at(0, c, i / 64, i % 64) == want));
        }
    }

    #[test]
    fn coarsest_branch_pools_to_two_by_two() {
        let mut store = ParamStore::new();
        let post = PostProcess::new(&mut ParamBuilder::new(&mut store, 1), 3).unwrap();
        for (_, p) in store.iter_mut() {
            let w = p.value.data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            if w.len() == 3 {
                w[0] = 1.0;
            }
        }
        // A single hot pixel lands in exactly one 32×32 pooling cell.
        let mut probe = Tensor::<f64>::zeros([1, 3, 64, 64]);
        probe.set(0, 0, 40, 10, 1024.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(probe);
        let b = post.branch_pooled(&mut g, &p, x, 0).unwrap();
        assert_eq!(POOL_FACTORS[0], 32);
        assert_eq!(g.value(b).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn drn_is_translation_covariant_on_interior() {
        let mut store = ParamStore::new();
        let drn = Drn::new(&mut ParamBuilder::new(&mut store, 9), 16, SdcMode::Learned).unwrap();
        let x = image::<f32>([1, 3, 64, 64], 6);
        let shifted = Tensor::from_fn([1, 3, 64, 64], |n, c, y, xx| x.at(n, c, (y + 56) % 64, (xx + 56) % 64));
        let run = |input: Tensor<f32>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let v = g.constant(input);
            let d = drn.forward(&mut g, &p, v).unwrap();
            g.value(d).clone()
        };
        let (a, b) = (run(x), run(shifted));
        // Receptive-field radius is 21, so rows/cols 29..43 see no border in either run.
        for c in 0..3 {
            for y in 29..43 {
                for xx in 29..43 {
                    assert!((b.at(0, c, y, xx) - a.at(0, c, y - 8, xx - 8)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn parameter_counts() {
        let count = |config: NetConfig| {
            let m = Model::new(config, 0).unwrap();
            let p = &m.params;
            ["drn.", "trans.", "atmos.", "post.", "fuse.", ""].map(|prefix| p.count(prefix))
        };
        assert_eq!(count(NetConfig::default()), [23086, 50155, 75987, 16, 273, 149517]);
        let no_sdc = NetConfig { sdc: SdcMode::Frozen, ..NetConfig::default() };
        assert_eq!(count(no_sdc), [23086, 50155, 75987, 16, 273, 149517]);
        let no_drn = NetConfig { drn: false, ..NetConfig::default() };
        assert_eq!(count(no_drn), [0, 50155, 75987, 16, 192, 126350]);
    }

    #[test]
    fn drn_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let drn = Drn::new(&mut ParamBuilder::new(&mut store, 11), 4, SdcMode::Learned).unwrap();
        jitter(&mut store, 12);
        let img = image::<f64>([1, 3, 32, 32], 7);
        let weights = image::<f64>([1, 3, 32, 32], 8);
        let r = grad_check_sampled(
            |g, v| {
                let x = g.constant(img.clone());
                let d = drn.forward(g, v, x)?;
                let w = g.constant(weights.clone());
                let y = g.mul(d, w)?;
                let y = g.mul(y, d)?;
                Ok(g.sum(y))
            },
            &store.tensors_f64(),
            1e-4,
            4,
            1,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn pad_then_crop_restores_the_image() {
        let x = image::<f32>([1, 3, 50, 70], 5);
        let (p, rec) = pad_to_multiple(&x, 32).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 3, 64, 96));
        assert_eq!(rec, CropRecord { h: 50, w: 70 });
        assert_eq!(crop(&p, rec).unwrap(), x);
        assert_eq!(p.at(0, 1, 63, 95), x.at(0, 1, 49, 69));
        assert_eq!(p.at(0, 2, 10, 80), x.at(0, 2, 10, 69));
        assert_eq!(p.at(0, 0, 55, 3), x.at(0, 0, 49, 3));
        let (same, r) = pad_to_multiple(&p, 32).unwrap();
        assert_eq!((same, r), (p.clone(), CropRecord { h: 64, w: 96 }));
        assert!(crop(&x, CropRecord { h: 51, w: 70 }).is_err());
    }

    #[test]
    fn any_size_inference() {
        let m = Model::new(NetConfig { width: 4, ..NetConfig::default() }, 9).unwrap();
        let out = m.run_any_size(&image::<f32>([1, 3, 20, 45], 6)).unwrap();
        assert_eq!(out.final_image.shape(), Shape::new(1, 3, 20, 45));
        assert_eq!(out.t.shape(), Shape::new(1, 1, 20, 45));
    }
}
