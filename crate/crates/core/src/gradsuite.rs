//! The 64-bit finite-difference suite behind `hazeforge gradcheck`.
//!
//! Every check differentiates a scalar built from a layer or network output
//! with respect to its parameters and its input. Layer and sub-network
//! checks must stay below [`LAYER_TOL`]; checks through the full pipeline
//! and loss below [`END_TO_END_TOL`].

use std::fmt;

use crate::error::{Error, Result};
use crate::haze;
use crate::losses::{l1_loss, reconstruction_loss, total_loss, FeatureExtractor, LossToggles, Targets};
use crate::networks::{AtmosNet, DehazeNet, Drn, NetConfig, TransNet};
use crate::nn::{
    Activation, ConvBlock, DenseBlock, ParamBuilder, ParamStore, Resample, SdcMode, SmoothDilatedConvBlock,
    TransitionBlock,
};
use crate::rng::SplitMix64;
use crate::tensor::{grad_check_sampled, GradCheckReport, Graph, Tensor, Var};

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const EPS: f64 = 1e-4;
/// Coordinates probed per parameter tensor and per input image.
pub const PER_INPUT: usize = 3;
/// The shipped width. Narrower nets leave whole stages with exactly zero
/// gradient, which tests nothing.
pub const WIDTH: usize = crate::networks::DEFAULT_WIDTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Drn,
    TransNet,
    AtmosNet,
    Losses,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Drn, Group::TransNet, Group::AtmosNet, Group::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Group::Drn => "drn",
            Group::TransNet => "transnet",
            Group::AtmosNet => "atmosnet",
            Group::Losses => "losses",
        }
    }

    /// `all` selects every group.
    pub fn parse_selection(s: &str) -> Result<Vec<Group>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .map(|g| vec![g])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck module {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        write!(
            f,
            "{:<16} max_rel_err {:.3e} (tol {:.0e})  coords {}  kinks {}  unresolved {}  noise_violations {}  {}",
            self.name,
            r.max_rel_error,
            self.tolerance,
            r.coordinates,
            r.skipped,
            r.unresolved,
            r.noise_violations,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub group: Group,
    pub checks: Vec<CheckResult>,
}

impl GroupResult {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// Nudge every parameter by U(−0.05, 0.05). Zero-initialized biases leave
/// exact ReLU ties that no finite difference can resolve.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.05, 0.05) as f32);
    }
}

fn random(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform(lo, hi))
}

/// `Σ w·y` for a fixed random `w`, so every output element carries a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let s = g.shape(y);
    let w = g.constant(random([s.n, s.c, s.h, s.w], seed, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Check `net` with respect to its parameters and an input image.
fn check_module<F>(name: &'static str, store: &ParamStore, input: Tensor<f64>, seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[Var], Var) -> Result<Var>,
{
    let mut inputs = store.tensors_f64();
    let n = inputs.len();
    inputs.push(input);
    let report = grad_check_sampled(
        |g, v| {
            let y = f(g, &v[..n], v[n])?;
            weighted_sum(g, y, seed ^ 0x5eed)
        },
        &inputs,
        EPS,
        PER_INPUT,
        seed,
    )?;
    Ok(CheckResult { name, tolerance: LAYER_TOL, report })
}

fn built<M>(seed: u64, make: impl FnOnce(&mut ParamBuilder<'_>) -> Result<M>) -> Result<(ParamStore, M)> {
    let mut store = ParamStore::new();
    let m = make(&mut ParamBuilder::new(&mut store, seed))?;
    jitter(&mut store, seed.wrapping_add(1));
    Ok((store, m))
}

fn drn_checks() -> Result<Vec<CheckResult>> {
    let (s1, sdc) = built(101, |b| SmoothDilatedConvBlock::new(b, "sdc", 3, 4, 3, SdcMode::Learned))?;
    let (s2, drn) = built(102, |b| Drn::new(b, WIDTH, SdcMode::Learned))?;
    Ok(vec![
        check_module("sdc_block", &s1, random([1, 3, 16, 16], 1, 0.0, 1.0), 11, |g, p, x| sdc.forward(g, p, x))?,
        check_module("drn", &s2, random([1, 3, 32, 32], 2, 0.0, 1.0), 12, |g, p, x| drn.forward(g, p, x))?,
    ])
}

fn transnet_checks() -> Result<Vec<CheckResult>> {
    let (s1, dense) = built(201, |b| DenseBlock::new(b, "dense", 4, 4))?;
    let (s2, down) = built(202, |b| TransitionBlock::new(b, "down", 4, 3, Resample::Down))?;
    let (s3, up) = built(203, |b| TransitionBlock::new(b, "up", 4, 3, Resample::Up))?;
    let (s4, trans) = built(204, |b| TransNet::new(b, WIDTH))?;
    let feat = |seed| random([1, 4, 16, 16], seed, -0.5, 1.0);
    Ok(vec![
        check_module("dense_block", &s1, feat(3), 21, |g, p, x| dense.forward(g, p, x))?,
        check_module("transition_down", &s2, feat(4), 22, |g, p, x| down.forward(g, p, x))?,
        check_module("transition_up", &s3, feat(5), 23, |g, p, x| up.forward(g, p, x))?,
        check_module("transnet", &s4, random([1, 3, 32, 32], 6, 0.0, 1.0), 24, |g, p, x| trans.forward(g, p, x))?,
    ])
}

fn atmos_checks() -> Result<Vec<CheckResult>> {
    let (s1, conv) = built(301, |b| ConvBlock::new(b, "conv", 3, 4, 3, Activation::Relu))?;
    let (s2, atmos) = built(302, AtmosNet::new)?;
    Ok(vec![
        check_module("conv_block", &s1, random([1, 3, 16, 16], 7, -0.5, 1.0), 31, |g, p, x| conv.forward(g, p, x))?,
        check_module("atmosnet", &s2, random([1, 3, 32, 32], 8, 0.0, 1.0), 32, |g, p, x| atmos.forward(g, p, x))?,
    ])
}

fn loss_checks() -> Result<Vec<CheckResult>> {
    let fx = FeatureExtractor::new();
    let a = random([1, 3, 8, 8], 9, 0.0, 1.0);
    let b = random([1, 3, 8, 8], 10, 0.0, 1.0);
    let l1 = grad_check_sampled(|g, v| l1_loss(g, v[0], v[1]), &[a.clone(), b.clone()], EPS, 64, 41)?;
    // Re-hazing J·t + A·(1−t) then comparing with the observed image.
    let t = random([1, 1, 8, 8], 15, 0.1, 1.0);
    let rec = grad_check_sampled(
        |g, v| {
            let hazy = g.constant(b.clone());
            let recon = haze::synthesize_var(g, v[0], v[1], v[2])?;
            reconstruction_loss(g, recon, hazy)
        },
        &[a.clone(), t, b.clone()],
        EPS,
        64,
        42,
    )?;

    let pred = random([1, 3, 32, 32], 11, 0.0, 1.0);
    let clean = random([1, 3, 32, 32], 12, 0.0, 1.0);
    let per = grad_check_sampled(
        |g, v| {
            let p = fx.bind(g);
            let gt = g.constant(clean.clone());
            fx.perceptual_loss(g, &p, v[0], gt)
        },
        &[pred],
        EPS,
        24,
        43,
    )?;

    // Full pipeline into the summed loss, w.r.t. every parameter tensor and the hazy input.
    let config = NetConfig { width: WIDTH, ..NetConfig::default() };
    let (store, net) = built(401, |b| DehazeNet::new(b, config))?;
    let mut inputs = store.tensors_f64();
    let n = inputs.len();
    inputs.push(random([1, 3, 32, 32], 13, 0.1, 0.9));
    let t = random([1, 1, 32, 32], 14, 0.2, 1.0);
    let airlight = Tensor::full([1, 3, 32, 32], 0.8);
    let pipeline = grad_check_sampled(
        |g, v| {
            let out = net.forward(g, &v[..n], v[n])?;
            let truth = Targets {
                clean: g.constant(clean.clone()),
                t: g.constant(t.clone()),
                airlight: g.constant(airlight.clone()),
                hazy: v[n],
            };
            let fp = fx.bind(g);
            Ok(total_loss(g, &fx, &fp, &out, &truth, LossToggles::ALL)?.total)
        },
        &inputs,
        EPS,
        2,
        44,
    )?;
    Ok(vec![
        CheckResult { name: "l1", tolerance: LAYER_TOL, report: l1 },
        CheckResult { name: "reconstruction", tolerance: LAYER_TOL, report: rec },
        CheckResult { name: "perceptual", tolerance: LAYER_TOL, report: per },
        CheckResult { name: "pipeline_total", tolerance: END_TO_END_TOL, report: pipeline },
    ])
}

pub fn run_group(group: Group) -> Result<GroupResult> {
    let checks = match group {
        Group::Drn => drn_checks()?,
        Group::TransNet => transnet_checks()?,
        Group::AtmosNet => atmos_checks()?,
        Group::Losses => loss_checks()?,
    };
    Ok(GroupResult { group, checks })
}
