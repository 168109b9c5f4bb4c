use crate::error::Result;
use crate::nn::{Activation, ConvBlock, ParamBuilder};
use crate::tensor::{Graph, Real, Var};

/// Channel widths of the three U-Net levels; the bottleneck uses the last.
pub const LEVEL_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl DoubleConv {
    fn new(b: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut b = b.scope(name);
        Ok(Self {
            first: ConvBlock::new(&mut b, "conv0", c_in, c_out, 3, Activation::Relu)?,
            second: ConvBlock::new(&mut b, "conv1", c_out, c_out, 3, Activation::Relu)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = self.first.forward(g, p, x)?;
        self.second.forward(g, p, y)
    }
}

/// Atmospheric-light estimator: a three-level U-Net with average-pool
/// downsampling, bilinear upsampling and concatenated skips.
#[derive(Clone, Debug)]
pub struct AtmosNet {
    pub down: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    pub up: Vec<DoubleConv>,
    pub out: ConvBlock,
}

impl AtmosNet {
    pub fn new(b: &mut ParamBuilder<'_>) -> Result<Self> {
        let w = LEVEL_WIDTHS;
        let mut down = Vec::new();
        let mut c = 3;
        for (i, &wi) in w.iter().enumerate() {
            down.push(DoubleConv::new(b, &format!("down{i}"), c, wi)?);
            c = wi;
        }
        let bottleneck = DoubleConv::new(b, "bottleneck", c, c)?;
        // Up level i takes the upsampled features from below plus skip i.
        let up = (0..w.len())
            .map(|i| {
                let below = if i + 1 < w.len() { w[i + 1] } else { c };
                DoubleConv::new(b, &format!("up{i}"), below + w[i], w[i])
            })
            .collect::<Result<_>>()?;
        let out = ConvBlock::new(b, "out", w[0], 3, 1, Activation::Sigmoid)?;
        Ok(Self { down, bottleneck, up, out })
    }

    /// Atmospheric light map `(n, 3, h, w)` in `(0, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], image: Var) -> Result<Var> {
        let mut x = image;
        let mut skips = Vec::new();
        for level in &self.down {
            let y = level.forward(g, p, x)?;
            skips.push(y);
            x = g.avg_pool2d(y, 2, 2)?;
        }
        x = self.bottleneck.forward(g, p, x)?;
        for (level, skip) in self.up.iter().zip(skips).rev() {
            let s = g.shape(skip);
            let u = g.upsample_bilinear(x, s.h, s.w)?;
            let cat = g.concat_channels(&[u, skip])?;
            x = level.forward(g, p, cat)?;
        }
        self.out.forward(g, p, x)
    }
}
