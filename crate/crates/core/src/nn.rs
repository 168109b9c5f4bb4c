//! Parameterized layers: convolution blocks, smooth dilated convolution,
//! dense blocks and transition blocks.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`]. A
//! forward pass binds the store onto a [`Graph`] (one [`Var`] per parameter)
//! and every layer looks its weights up in that slice. The same layer
//! description therefore runs in `f32` for training and `f64` for gradient
//! checks.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, SplitMix64};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    /// Declared dimensions as written to checkpoints (rank 1 for biases).
    pub dims: Vec<usize>,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn insert(&mut self, name: String, dims: Vec<usize>, value: Tensor<f32>, trainable: bool) -> Result<ParamId> {
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let (i, _) = self.params.insert_full(name, Param { dims, value, trainable });
        Ok(ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Param)> {
        self.params.get_full(name).map(|(i, _, p)| (ParamId(i), p))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.params.iter().enumerate().map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(n, _)| n.as_str()).expect("parameter id")
    }

    /// Total number of scalars, optionally restricted to names with a prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Record every parameter on `g`; trainable ones require gradients.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.values().map(|p| g.leaf(p.value.cast(), p.trainable)).collect()
    }

    /// Parameter values in `f64`, in store order, for gradient checking.
    pub fn tensors_f64(&self) -> Vec<Tensor<f64>> {
        self.params.values().map(|p| p.value.cast()).collect()
    }

    /// `(name, dims)` table, the architecture fingerprint compared on checkpoint load.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(n, p)| (n.clone(), p.dims.clone())).collect()
    }
}

/// Registers parameters under a name prefix and initializes them from a seed.
///
/// Each tensor gets its own stream derived from `(seed, full name)`, so a
/// layer is initialized identically regardless of which other layers exist.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, seed, prefix: String::new() }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder { store: self.store, seed: self.seed, prefix: format!("{}{}.", self.prefix, name) }
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    /// Conv weight `(c_out, c_in, k, k)`, uniform on `±sqrt(2 / fan_in)`.
    pub fn conv_weight(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<ParamId> {
        let full = self.full_name(name);
        let bound = (2.0 / (c_in * k * k) as f64).sqrt();
        let mut rng = SplitMix64::new(derive_seed_str(self.seed, &full));
        let value = Tensor::from_fn([c_out, c_in, k, k], |_, _, _, _| rng.uniform(-bound, bound) as f32);
        self.store.insert(full, vec![c_out, c_in, k, k], value, true)
    }

    pub fn bias(&mut self, name: &str, len: usize) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, vec![len], Tensor::zeros([len, 1, 1, 1]), true)
    }

    /// `(1, 1, k, k)` kernel with a single 1 at the centre.
    pub fn dirac(&mut self, name: &str, k: usize, trainable: bool) -> Result<ParamId> {
        let full = self.full_name(name);
        let mut value = Tensor::zeros([1, 1, k, k]);
        value.set(0, 0, k / 2, k / 2, 1.0);
        self.store.insert(full, vec![1, 1, k, k], value, trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::None => x,
        }
    }
}

/// Convolution + bias + activation. Stride-1 blocks are padded to keep the
/// spatial size: `padding = dilation · (k − 1) / 2`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub activation: Activation,
}

impl ConvBlock {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        activation: Activation,
    ) -> Result<Self> {
        Self::dilated(b, name, c_in, c_out, k, 1, activation)
    }

    pub fn dilated(
        b: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        activation: Activation,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("{name}: kernel size {k} must be odd")));
        }
        let mut b = b.scope(name);
        Ok(Self {
            weight: b.conv_weight("weight", c_out, c_in, k)?,
            bias: b.bias("bias", c_out)?,
            c_in,
            c_out,
            k,
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
            activation,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight.0], Some(p[self.bias.0]), self.stride, self.padding, self.dilation)?;
        Ok(self.activation.apply(g, y))
    }
}

/// How the smoothing pre-convolution of a [`SmoothDilatedConvBlock`] behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SdcMode {
    /// Dirac-initialized and trained.
    Learned,
    /// Dirac kernel present but never updated.
    Frozen,
    /// No smoothing kernel at all: a plain dilated convolution.
    Off,
}

/// A shared depthwise smoothing convolution followed by a dilated convolution.
///
/// The smoothing kernel is a single `(2d − 1) × (2d − 1)` filter applied to
/// every channel independently with the same weights.
#[derive(Clone, Debug)]
pub struct SmoothDilatedConvBlock {
    pub shared: Option<ParamId>,
    pub dilated: ConvBlock,
    pub dilation: usize,
}

impl SmoothDilatedConvBlock {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        mode: SdcMode,
    ) -> Result<Self> {
        let mut b = b.scope(name);
        let shared = match mode {
            SdcMode::Off => None,
            SdcMode::Learned | SdcMode::Frozen => Some(b.dirac("shared", 2 * dilation - 1, mode == SdcMode::Learned)?),
        };
        let dilated = ConvBlock::dilated(&mut b, "dilated", c_in, c_out, 3, dilation, Activation::Relu)?;
        Ok(Self { shared, dilated, dilation })
    }

    /// The shared per-channel smoothing on its own.
    pub fn smooth<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let Some(kernel) = self.shared else { return Ok(x) };
        let s = g.shape(x);
        if s.c != self.dilated.c_in {
            return Err(Error::shape("sdc", format!("expected {} channels, got {s}", self.dilated.c_in)));
        }
        let planes = g.reshape(x, Shape::new(s.n * s.c, 1, s.h, s.w))?;
        let smoothed = g.conv2d(planes, p[kernel.0], None, 1, self.dilation - 1, 1)?;
        g.reshape(smoothed, s)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = self.smooth(g, p, x)?;
        self.dilated.forward(g, p, s)
    }
}

pub const DENSE_LAYERS: usize = 6;
pub const GROWTH: usize = 4;

/// Six densely connected 3×3 layers, a 1×1 projection of the concatenated
/// features, and a 1×1 projected shortcut from the block input.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<ConvBlock>,
    pub project: ConvBlock,
    pub shortcut: ConvBlock,
}

impl DenseBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut b = b.scope(name);
        let layers = (0..DENSE_LAYERS)
            .map(|i| ConvBlock::new(&mut b, &format!("layer{i}"), c_in + i * GROWTH, GROWTH, 3, Activation::Relu))
            .collect::<Result<Vec<_>>>()?;
        let project = ConvBlock::new(&mut b, "project", c_in + DENSE_LAYERS * GROWTH, c_out, 1, Activation::None)?;
        let shortcut = ConvBlock::new(&mut b, "shortcut", c_in, c_out, 1, Activation::None)?;
        Ok(Self { layers, project, shortcut })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = if features.len() == 1 { x } else { g.concat_channels(&features)? };
            features.push(layer.forward(g, p, input)?);
        }
        let all = g.concat_channels(&features)?;
        let projected = self.project.forward(g, p, all)?;
        let shortcut = self.shortcut.forward(g, p, x)?;
        g.add(projected, shortcut)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// 1×1 conv then 2×2 average pooling.
    Down,
    /// ×2 bilinear upsampling then 1×1 conv.
    Up,
}

#[derive(Clone, Debug)]
pub struct TransitionBlock {
    pub conv: ConvBlock,
    pub mode: Resample,
}

impl TransitionBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize, mode: Resample) -> Result<Self> {
        Ok(Self { conv: ConvBlock::new(b, name, c_in, c_out, 1, Activation::Relu)?, mode })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        match self.mode {
            Resample::Down => {
                let s = g.shape(x);
                if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
                    return Err(Error::shape("transition", format!("down-sampling needs even dims, got {s}")));
                }
                let y = self.conv.forward(g, p, x)?;
                g.avg_pool2d(y, 2, 2)
            }
            Resample::Up => {
                let s = g.shape(x);
                let y = g.upsample_bilinear(x, s.h * 2, s.w * 2)?;
                self.conv.forward(g, p, y)
            }
        }
    }
}
