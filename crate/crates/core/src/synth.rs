//! Procedural scenes with exact depth, and haze samples built from them.
//!
//! A scene is a back-to-front composition of flat-depth primitives over a
//! gradient background that is always the farthest layer. Haze is then
//! added with a random constant airlight and scattering coefficient.

use crate::error::{Error, Result};
use crate::haze::{self, AtmosphericMap, SceneDepth, Transmission};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

pub const MIN_PRIMITIVES: usize = 4;
pub const MAX_PRIMITIVES: usize = 10;
pub const DEPTH_RANGE: (f64, f64) = (0.3, 2.5);
const MIN_CHANNEL_STD: f64 = 0.05;
const MIN_VISIBLE_DEPTHS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Fill {
    Solid([f64; 3]),
    Gradient { from: [f64; 3], to: [f64; 3], dir: (f64, f64) },
    Noise { base: [f64; 3], cell: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Region {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Region {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Region::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Region::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

struct Primitive {
    region: Option<Region>,
    fill: Fill,
    depth: f64,
}

fn random_colour(rng: &mut SplitMix64, previous: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for _ in 0..32 {
        c = [rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)];
        let distinct = previous
            .iter()
            .all(|p| p.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 0.3);
        if distinct {
            break;
        }
    }
    c
}

/// Smooth value noise in `[0, 1]` on a lattice of `cell`-pixel squares.
fn value_noise(seed: u64, cell: usize, y: usize, x: usize) -> f64 {
    let lattice = |gy: usize, gx: usize| {
        let h = derive_seed(seed, ((gy as u64) << 32) | gx as u64);
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
    let (gy, gx) = (fy.floor() as usize, fx.floor() as usize);
    let (ty, tx) = (fy - gy as f64, fx - gx as f64);
    let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
    let top = lattice(gy, gx) * (1.0 - sx) + lattice(gy, gx + 1) * sx;
    let bottom = lattice(gy + 1, gx) * (1.0 - sx) + lattice(gy + 1, gx + 1) * sx;
    top * (1.0 - sy) + bottom * sy
}

impl Fill {
    fn colour(&self, y: usize, x: usize, h: usize, w: usize) -> [f64; 3] {
        match *self {
            Fill::Solid(c) => c,
            Fill::Gradient { from, to, dir } => {
                let u = (y as f64 / h as f64 - 0.5) * dir.0 + (x as f64 / w as f64 - 0.5) * dir.1;
                let s = (u + 0.5).clamp(0.0, 1.0);
                [0, 1, 2].map(|i| from[i] * (1.0 - s) + to[i] * s)
            }
            Fill::Noise { base, cell, seed } => {
                let m = 0.55 + 0.45 * value_noise(seed, cell, y, x);
                base.map(|c| (c * m).clamp(0.0, 1.0))
            }
        }
    }
}

fn random_region(rng: &mut SplitMix64, h: usize, w: usize) -> Region {
    if rng.below(2) == 0 {
        let rh = (h as f64 * rng.uniform(0.2, 0.6)) as usize;
        let rw = (w as f64 * rng.uniform(0.2, 0.6)) as usize;
        let y0 = rng.below((h - rh + 1) as u64) as usize;
        let x0 = rng.below((w - rw + 1) as u64) as usize;
        Region::Rect { y0, x0, y1: y0 + rh.max(1), x1: x0 + rw.max(1) }
    } else {
        let r = h.min(w) as f64 * rng.uniform(0.12, 0.3);
        Region::Disc { cy: rng.uniform(0.0, h as f64), cx: rng.uniform(0.0, w as f64), r }
    }
}

fn random_fill(rng: &mut SplitMix64, colours: &mut Vec<[f64; 3]>) -> Fill {
    let a = random_colour(rng, colours);
    colours.push(a);
    match rng.below(3) {
        0 => Fill::Solid(a),
        1 => {
            let b = random_colour(rng, colours);
            colours.push(b);
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            Fill::Gradient { from: a, to: b, dir: (angle.sin(), angle.cos()) }
        }
        _ => Fill::Noise { base: a, cell: [4, 8, 16][rng.below(3) as usize], seed: rng.next_u64() },
    }
}

fn render(seed: u64, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = SplitMix64::new(seed);
    let mut colours = Vec::new();
    let count = MIN_PRIMITIVES + rng.below((MAX_PRIMITIVES - MIN_PRIMITIVES + 1) as u64) as usize;
    let far = rng.uniform(2.0, DEPTH_RANGE.1);
    let from = random_colour(&mut rng, &colours);
    colours.push(from);
    let to = random_colour(&mut rng, &colours);
    colours.push(to);
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let mut prims = vec![Primitive {
        region: None,
        fill: Fill::Gradient { from, to, dir: (angle.sin(), angle.cos()) },
        depth: far,
    }];
    for _ in 1..count {
        let region = Some(random_region(&mut rng, h, w));
        let fill = random_fill(&mut rng, &mut colours);
        let depth = rng.uniform(DEPTH_RANGE.0, far - 0.1);
        prims.push(Primitive { region, fill, depth });
    }
    // Painter's order: far to near, so nearer primitives occlude.
    prims.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut clean = Tensor::zeros([1, 3, h, w]);
    let mut depth = Tensor::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let top = prims
                .iter()
                .rev()
                .find(|p| p.region.is_none_or(|r| r.contains(y, x)))
                .expect("background covers every pixel");
            let c = top.fill.colour(y, x, h, w);
            for (ch, v) in c.iter().enumerate() {
                clean.set(0, ch, y, x, *v as f32);
            }
            depth.set(0, 0, y, x, top.depth as f32);
        }
    }
    (clean, depth)
}

fn channel_std(t: &Tensor<f32>, c: usize) -> f64 {
    let s = t.shape();
    let vals: Vec<f64> = (0..s.h).flat_map(|y| (0..s.w).map(move |x| (y, x))).map(|(y, x)| t.at(0, c, y, x) as f64).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

pub fn distinct_depths(depth: &Tensor<f32>) -> usize {
    let mut seen: Vec<u32> = depth.data().iter().map(|v| v.to_bits()).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::InvalidArgument(format!("scene size {h}×{w} must be positive multiples of 32")));
    }
    Ok(())
}

/// A clean image and its depth map, deterministic in `seed`.
///
/// Scenes with a flat colour channel or fewer than three visible depth
/// layers are redrawn with a perturbed seed.
pub fn gen_scene(seed: u64, h: usize, w: usize) -> Result<(Tensor<f32>, SceneDepth)> {
    check_dims(h, w)?;
    for attempt in 0.. {
        let (clean, depth) = render(derive_seed(seed, attempt), h, w);
        let textured = (0..3).all(|c| channel_std(&clean, c) >= MIN_CHANNEL_STD);
        if textured && distinct_depths(&depth) >= MIN_VISIBLE_DEPTHS {
            return Ok((clean, SceneDepth::new(depth)?));
        }
    }
    unreachable!()
}

/// Parameters of a synthetic haze dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub a_range: (f64, f64),
    pub gamma_range: (f64, f64),
}

impl DatasetSpec {
    pub const A_RANGE: (f64, f64) = (0.5, 1.0);
    pub const GAMMA_RANGE: (f64, f64) = (0.4, 1.6);

    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        Self { count, h: size, w: size, seed, a_range: Self::A_RANGE, gamma_range: Self::GAMMA_RANGE }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.h, self.w)?;
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.a_range) || self.a_range.0 < 0.0 || self.a_range.1 > 1.0 {
            return Err(Error::InvalidArgument(format!("airlight range {:?}", self.a_range)));
        }
        if !ok(self.gamma_range) || self.gamma_range.0 <= 0.0 {
            return Err(Error::InvalidArgument(format!("scattering range {:?}", self.gamma_range)));
        }
        Ok(())
    }
}

/// One training example: every quantity of the scattering model.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeSample {
    pub clean: Tensor<f32>,
    pub depth: SceneDepth,
    pub t: Transmission,
    pub airlight: AtmosphericMap,
    pub hazy: Tensor<f32>,
    pub gamma: f64,
    pub seed: u64,
}

pub fn gen_sample(spec: &DatasetSpec, index: usize) -> Result<HazeSample> {
    spec.validate()?;
    if index >= spec.count {
        return Err(Error::InvalidArgument(format!("sample index {index} out of range 0..{}", spec.count)));
    }
    let seed = derive_seed(spec.seed, index as u64);
    let mut rng = SplitMix64::new(derive_seed(seed, 1));
    let a = rng.uniform(spec.a_range.0, spec.a_range.1) as f32;
    let gamma = rng.uniform(spec.gamma_range.0, spec.gamma_range.1);
    let (clean, depth) = gen_scene(derive_seed(seed, 2), spec.h, spec.w)?;
    haze_sample(clean, depth, a, gamma, seed)
}

/// Compose a sample from a scene and explicit haze parameters.
pub fn haze_sample(clean: Tensor<f32>, depth: SceneDepth, a: f32, gamma: f64, seed: u64) -> Result<HazeSample> {
    let s = clean.shape();
    let t = haze::transmission_from_depth(&depth, gamma)?;
    let airlight = AtmosphericMap::constant(s.n, s.h, s.w, a)?;
    let hazy = haze::synthesize_haze(&clean, t.tensor(), airlight.tensor())?;
    Ok(HazeSample { clean, depth, t, airlight, hazy, gamma, seed })
}

/// Fisher–Yates permutation of `0..count`, deterministic in `epoch_seed`.
pub fn shuffled_order(count: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = SplitMix64::new(epoch_seed);
    for i in (1..count).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// A batch of samples stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub hazy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub t: Tensor<f32>,
    pub airlight: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(indices: Vec<usize>, samples: &[&HazeSample]) -> Result<Self> {
        let stack = |f: fn(&HazeSample) -> &Tensor<f32>| Tensor::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
        Ok(Self {
            indices,
            hazy: stack(|s| &s.hazy)?,
            clean: stack(|s| &s.clean)?,
            t: stack(|s| s.t.tensor())?,
            airlight: stack(|s| s.airlight.tensor())?,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// All samples of a [`DatasetSpec`], generated up front.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<HazeSample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let samples = (0..spec.count).map(|i| gen_sample(spec, i)).collect::<Result<_>>()?;
        Ok(Self { spec: spec.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shuffled batches for one epoch; the last batch may be short.
    pub fn batches(&self, batch: usize, epoch_seed: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = shuffled_order(self.len(), epoch_seed);
        self.chunks(order, batch)
    }

    /// Batches in index order.
    pub fn sequential(&self, batch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        self.chunks((0..self.len()).collect(), batch)
    }

    fn chunks(&self, order: Vec<usize>, batch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let batch = batch.max(1);
        let groups: Vec<Vec<usize>> = order.chunks(batch).map(|c| c.to_vec()).collect();
        groups.into_iter().map(move |idx| {
            let samples: Vec<&HazeSample> = idx.iter().map(|&i| &self.samples[i]).collect();
            Batch::from_samples(idx, &samples)
        })
    }
}
