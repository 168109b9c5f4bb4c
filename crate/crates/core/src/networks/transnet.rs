use crate::error::Result;
use crate::nn::{Activation, ConvBlock, DenseBlock, ParamBuilder, Resample, TransitionBlock};
use crate::tensor::{Graph, Real, Var};

use super::postprocess::PostProcess;

pub const DEPTH: usize = 3;

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub dense: DenseBlock,
    pub down: TransitionBlock,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: TransitionBlock,
    pub merge: ConvBlock,
    pub dense: DenseBlock,
}

/// Transmission estimator: a dense-block encoder–decoder with skip links,
/// a channel-adjusting head, pyramid post-processing and a sigmoid output.
///
/// The stem pools once, so the encoder runs at half resolution; the decoder
/// output is upsampled back before the head.
#[derive(Clone, Debug)]
pub struct TransNet {
    pub stem: ConvBlock,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: DenseBlock,
    pub decoder: Vec<DecoderStage>,
    pub head: ConvBlock,
    pub post: PostProcess,
    pub out: ConvBlock,
}

impl TransNet {
    pub fn new(b: &mut ParamBuilder<'_>, width: usize) -> Result<Self> {
        let c = width;
        let relu = Activation::Relu;
        let encoder = (0..DEPTH)
            .map(|i| {
                let mut b = b.scope(&format!("enc{i}"));
                Ok(EncoderStage {
                    dense: DenseBlock::new(&mut b, "dense", c, c)?,
                    down: TransitionBlock::new(&mut b, "down", c, c, Resample::Down)?,
                })
            })
            .collect::<Result<_>>()?;
        // Decoder stage i mirrors encoder stage i; they run deepest first.
        let decoder = (0..DEPTH)
            .map(|i| {
                let mut b = b.scope(&format!("dec{i}"));
                Ok(DecoderStage {
                    up: TransitionBlock::new(&mut b, "up", c, c, Resample::Up)?,
                    merge: ConvBlock::new(&mut b, "merge", 2 * c, c, 1, relu)?,
                    dense: DenseBlock::new(&mut b, "dense", c, c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stem: ConvBlock::new(b, "stem", 3, c, 3, relu)?,
            encoder,
            bottleneck: DenseBlock::new(b, "bottleneck", c, c)?,
            decoder,
            head: ConvBlock::new(b, "head", c, 3, 3, relu)?,
            post: PostProcess::new(&mut b.scope("post"), 3)?,
            out: ConvBlock::new(b, "out", 3 + 4, 1, 3, Activation::Sigmoid)?,
        })
    }

    /// Transmission map `(n, 1, h, w)` in `(0, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], image: Var) -> Result<Var> {
        let s = g.shape(image);
        let x = self.stem.forward(g, p, image)?;
        let mut x = g.avg_pool2d(x, 2, 2)?;
        let mut skips = Vec::with_capacity(DEPTH);
        for stage in &self.encoder {
            let d = stage.dense.forward(g, p, x)?;
            skips.push(d);
            x = stage.down.forward(g, p, d)?;
        }
        x = self.bottleneck.forward(g, p, x)?;
        for (stage, skip) in self.decoder.iter().zip(skips).rev() {
            let u = stage.up.forward(g, p, x)?;
            let cat = g.concat_channels(&[u, skip])?;
            let m = stage.merge.forward(g, p, cat)?;
            x = stage.dense.forward(g, p, m)?;
        }
        let x = g.upsample_bilinear(x, s.h, s.w)?;
        let x = self.head.forward(g, p, x)?;
        let x = self.post.forward(g, p, x)?;
        self.out.forward(g, p, x)
    }
}
