use crate::error::Result;
use crate::nn::{Activation, ConvBlock, ParamBuilder, SdcMode, SmoothDilatedConvBlock};
use crate::tensor::{Graph, Real, Var};

use super::check_multiple_of_32;

pub const DILATIONS: [usize; 3] = [2, 4, 8];

/// Detail-recovery network: a one-layer local branch and a global branch of
/// three parallel smooth dilated convolutions, fused by two additions.
///
/// ```text
/// x  = stem(I)                       l = local(x)
/// gi = g_in(x)
/// g  = g_merge([sdc2(gi), sdc4(gi), sdc8(gi)])
/// y  = a1(h0([x, g]) + l)
/// y  = a2(y + l)
/// D  = out2(out1(y))
/// ```
#[derive(Clone, Debug)]
pub struct Drn {
    pub stem: ConvBlock,
    pub g_in: ConvBlock,
    pub sdc: Vec<SmoothDilatedConvBlock>,
    pub g_merge: ConvBlock,
    pub h0: ConvBlock,
    pub a1: ConvBlock,
    pub a2: ConvBlock,
    pub local: ConvBlock,
    pub out1: ConvBlock,
    pub out2: ConvBlock,
}

impl Drn {
    pub fn new(b: &mut ParamBuilder<'_>, width: usize, sdc: SdcMode) -> Result<Self> {
        let c = width;
        let relu = Activation::Relu;
        Ok(Self {
            stem: ConvBlock::new(b, "stem", 3, c, 3, relu)?,
            g_in: ConvBlock::new(b, "g_in", c, c, 1, relu)?,
            sdc: DILATIONS
                .iter()
                .map(|&d| SmoothDilatedConvBlock::new(b, &format!("sdc{d}"), c, c, d, sdc))
                .collect::<Result<_>>()?,
            g_merge: ConvBlock::new(b, "g_merge", DILATIONS.len() * c, c, 1, relu)?,
            h0: ConvBlock::new(b, "h0", 2 * c, c, 3, relu)?,
            a1: ConvBlock::new(b, "a1", c, c, 3, relu)?,
            a2: ConvBlock::new(b, "a2", c, c, 3, relu)?,
            local: ConvBlock::new(b, "local", c, c, 3, relu)?,
            out1: ConvBlock::new(b, "out1", c, c, 3, relu)?,
            out2: ConvBlock::new(b, "out2", c, 3, 3, Activation::None)?,
        })
    }

    /// Detail feature map `(n, 3, h, w)`; unbounded.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], image: Var) -> Result<Var> {
        check_multiple_of_32("drn", g.shape(image))?;
        let x = self.stem.forward(g, p, image)?;
        let l = self.local.forward(g, p, x)?;
        let gi = self.g_in.forward(g, p, x)?;
        let branches = self.sdc.iter().map(|s| s.forward(g, p, gi)).collect::<Result<Vec<_>>>()?;
        let cat = g.concat_channels(&branches)?;
        let global = self.g_merge.forward(g, p, cat)?;
        let cat = g.concat_channels(&[x, global])?;
        let h = self.h0.forward(g, p, cat)?;
        let y = g.add(h, l)?;
        let y = self.a1.forward(g, p, y)?;
        let y = g.add(y, l)?;
        let y = self.a2.forward(g, p, y)?;
        let y = self.out1.forward(g, p, y)?;
        self.out2.forward(g, p, y)
    }
}
