use crate::error::Result;
use crate::nn::{Activation, ConvBlock, ParamBuilder};
use crate::tensor::{Graph, Real, Var};

use super::check_multiple_of_32;

pub const POOL_FACTORS: [usize; 4] = [32, 16, 8, 4];

/// Pyramid pooling: four branches pool by 32/16/8/4, project to one channel
/// with a 1×1 conv and upsample back; the input is passed through alongside.
#[derive(Clone, Debug)]
pub struct PostProcess {
    pub branches: Vec<(usize, ConvBlock)>,
    pub c_in: usize,
}

impl PostProcess {
    pub fn new(b: &mut ParamBuilder<'_>, c_in: usize) -> Result<Self> {
        let branches = POOL_FACTORS
            .iter()
            .map(|&f| Ok((f, ConvBlock::new(b, &format!("pool{f}"), c_in, 1, 1, Activation::None)?)))
            .collect::<Result<_>>()?;
        Ok(Self { branches, c_in })
    }

    pub fn c_out(&self) -> usize {
        self.c_in + self.branches.len()
    }

    /// The pooled-and-projected map of one branch before upsampling.
    pub fn branch_pooled<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, branch: usize) -> Result<Var> {
        let (f, conv) = &self.branches[branch];
        let pooled = g.avg_pool2d(x, *f, *f)?;
        conv.forward(g, p, pooled)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x);
        check_multiple_of_32("post_process", s)?;
        let mut parts = vec![x];
        for i in 0..self.branches.len() {
            let y = self.branch_pooled(g, p, x, i)?;
            parts.push(g.upsample_bilinear(y, s.h, s.w)?);
        }
        g.concat_channels(&parts)
    }
}
