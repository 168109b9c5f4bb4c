//! The atmospheric scattering model.
//!
//! A hazy image is the clean scene attenuated by the transmission plus
//! airlight scattered in: `I = J·t + A·(1 − t)`, with `t = exp(−γ·d)` for
//! scene depth `d`. Inversion recovers `J = (I − A) / max(t, t_floor) + A`.
//!
//! The graph forms ([`synthesize_var`], [`invert_var`]) are what the
//! networks use; the tensor forms run the very same operations, so their
//! results agree bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Lower bound on the transmission used when inverting the model.
pub const T_FLOOR: f64 = 0.05;

fn check_single_channel(kind: &'static str, t: &Tensor<f32>) -> Result<()> {
    if t.shape().c != 1 {
        return Err(Error::shape(kind, format!("expected one channel, got {}", t.shape())));
    }
    Ok(())
}

/// Scene depth map `(n, 1, h, w)`, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDepth(Tensor<f32>);

impl SceneDepth {
    pub fn new(d: Tensor<f32>) -> Result<Self> {
        check_single_channel("depth", &d)?;
        if let Some(v) = d.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!("depth must be finite and positive, found {v}")));
        }
        Ok(Self(d))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}

/// Transmission map `(n, 1, h, w)` with values in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission(Tensor<f32>);

impl Transmission {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        check_single_channel("transmission", &t)?;
        if let Some(v) = t.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidArgument(format!("transmission must lie in (0, 1], found {v}")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}

/// Atmospheric light map `(n, 3, h, w)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtmosphericMap(Tensor<f32>);

impl AtmosphericMap {
    pub fn new(a: Tensor<f32>) -> Result<Self> {
        if a.shape().c != 3 {
            return Err(Error::shape("atmospheric map", format!("expected three channels, got {}", a.shape())));
        }
        if let Some(v) = a.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("atmospheric light must lie in [0, 1], found {v}")));
        }
        Ok(Self(a))
    }

    /// A spatially constant map of value `a` shaped like `(n, 3, h, w)`.
    pub fn constant(n: usize, h: usize, w: usize, a: f32) -> Result<Self> {
        Self::new(Tensor::full([n, 3, h, w], a))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}

/// `exp(−γ·d)` on the graph.
pub fn transmission_var<T: Real>(g: &mut Graph<T>, depth: Var, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("scattering coefficient {gamma} must be positive")));
    }
    let scaled = g.scale(depth, T::of(-gamma));
    Ok(g.exp(scaled))
}

/// `exp(−γ·d)` for any non-negative depth tensor.
pub fn transmission_map(depth: &Tensor<f32>, gamma: f64) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let d = g.constant(depth.clone());
    let t = transmission_var(&mut g, d, gamma)?;
    Ok(g.value(t).clone())
}

pub fn transmission_from_depth(depth: &SceneDepth, gamma: f64) -> Result<Transmission> {
    Transmission::new(transmission_map(depth.tensor(), gamma)?)
}

/// `I = J·t + A·(1 − t)`, with a one-channel `t` shared across colour channels.
pub fn synthesize_var<T: Real>(g: &mut Graph<T>, clean: Var, t: Var, airlight: Var) -> Result<Var> {
    g.blend(clean, airlight, t)
}

/// `J = (I − A) / max(t, t_floor) + A`.
pub fn invert_var<T: Real>(g: &mut Graph<T>, hazy: Var, t: Var, airlight: Var, t_floor: f64) -> Result<Var> {
    g.unblend(hazy, airlight, t, T::of(t_floor))
}

pub fn synthesize_haze<T: Real>(clean: &Tensor<T>, t: &Tensor<T>, airlight: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (j, t, a) = (g.constant(clean.clone()), g.constant(t.clone()), g.constant(airlight.clone()));
    let i = synthesize_var(&mut g, j, t, a)?;
    Ok(g.value(i).clone())
}

pub fn invert_scattering<T: Real>(
    hazy: &Tensor<T>,
    t: &Tensor<T>,
    airlight: &Tensor<T>,
    t_floor: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (i, t, a) = (g.constant(hazy.clone()), g.constant(t.clone()), g.constant(airlight.clone()));
    let j = invert_var(&mut g, i, t, a, t_floor)?;
    Ok(g.value(j).clone())
}
