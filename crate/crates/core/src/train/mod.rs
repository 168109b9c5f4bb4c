//! Adam training against the summed loss, evaluation and checkpointing.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{Checkpoint, NamedTensor, MAGIC, VERSION};

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::{total_loss, FeatureExtractor, LossReport, LossToggles, Targets};
use crate::metrics::{psnr, ssim};
use crate::networks::{Model, NetConfig};
use crate::nn::SdcMode;
use crate::rng::{derive_seed, derive_seed_str};
use crate::synth::{Batch, Dataset, DatasetSpec};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub adam: AdamParams,
    pub seed: u64,
    pub toggles: LossToggles,
    pub image_size: usize,
    pub dataset_count: usize,
    pub eval_count: usize,
    pub net: NetConfig,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 140,
            batch: 4,
            lr0: 1e-4,
            adam: AdamParams::default(),
            seed: 0,
            toggles: LossToggles::ALL,
            image_size: 64,
            dataset_count: 32,
            eval_count: 8,
            net: NetConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be ≥ 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if self.dataset_count == 0 {
            return bad("dataset_count must be ≥ 1".into());
        }
        if !self.toggles.any() {
            return bad("at least one loss term must be enabled".into());
        }
        self.train_spec().validate()?;
        if self.eval_count > 0 {
            self.eval_spec().validate()?;
        }
        Ok(())
    }

    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec::new(self.dataset_count, self.image_size, derive_seed_str(self.seed, "train"))
    }

    pub fn eval_spec(&self) -> DatasetSpec {
        DatasetSpec::new(self.eval_count, self.image_size, derive_seed_str(self.seed, "eval"))
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed_str(self.seed, "model")
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_count.div_ceil(self.batch)
    }
}

/// `lr0 · (1 − epoch / epochs)`, for zero-based `epoch < epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    Ok(cfg.lr0 * (1.0 - epoch as f64 / cfg.epochs as f64))
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    /// Per-term means over the epoch's training samples.
    pub losses: LossReport<f64>,
    /// Eval-split means; `None` without an eval split.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("nothing to evaluate".into()));
        }
        let n = rows.len() as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Ok(Self { rows, mean_psnr, mean_ssim })
    }
}

/// Score each dehazed image, clamped to `[0, 1]`, against its clean image.
pub fn evaluate(model: &Model, data: &Dataset, batch: usize) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(data.len());
    for b in data.sequential(batch) {
        let b = b?;
        let out = model.run(&b.hazy)?;
        let pred = out.final_image.map(|v| v.clamp(0.0, 1.0));
        for (k, &index) in b.indices.iter().enumerate() {
            let (p, c) = (pred.sample(k), b.clean.sample(k));
            rows.push(EvalRow { index, psnr: psnr(&p, &c, 1.0)?, ssim: ssim(&p, &c)? });
        }
    }
    EvalReport::from_rows(rows)
}

/// Rebuild a model of architecture `net` from a checkpoint.
pub fn load_model(net: NetConfig, ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(net, 0)?;
    ckpt.restore_params(&mut model.params)?;
    Ok(model)
}

/// Owns every piece of mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub extractor: FeatureExtractor,
    pub train_set: Dataset,
    pub eval_set: Option<Dataset>,
    /// Completed epochs.
    pub epoch: usize,
    pub trace: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.net, cfg.model_seed())?;
        let adam = AdamState::new(&model.params);
        let train_set = Dataset::generate(&cfg.train_spec())?;
        let eval_set = (cfg.eval_count > 0).then(|| Dataset::generate(&cfg.eval_spec())).transpose()?;
        Ok(Self { cfg, model, adam, extractor: FeatureExtractor::new(), train_set, eval_set, epoch: 0, trace: Vec::new() })
    }

    /// Continue from a checkpoint written by a run with this configuration.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        ckpt.restore_params(&mut t.model.params)?;
        let epoch = ckpt.epoch as usize;
        if epoch > t.cfg.epochs {
            return Err(Error::InvalidArgument(format!("checkpoint epoch {epoch} beyond configured {}", t.cfg.epochs)));
        }
        t.adam = ckpt.restore_adam(&t.model.params, (epoch * t.cfg.steps_per_epoch()) as u64)?;
        t.epoch = epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.params, &self.adam, self.epoch as u32, self.cfg.echo())
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn step(&mut self, batch: &Batch, lr: f64, epoch: usize, step: usize) -> Result<LossReport<f64>> {
        let mut g = Graph::<f32>::new();
        let p = self.model.params.bind(&mut g);
        let fp = self.extractor.bind(&mut g);
        let hazy = g.constant(batch.hazy.clone());
        let out = self.model.net.forward(&mut g, &p, hazy)?;
        let truth = Targets {
            clean: g.constant(batch.clean.clone()),
            t: g.constant(batch.t.clone()),
            airlight: g.constant(batch.airlight.clone()),
            hazy,
        };
        let lv = total_loss(&mut g, &self.extractor, &fp, &out, &truth, self.cfg.toggles)?;
        let r = lv.report(&g);
        if !r.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at epoch {epoch}, step {step}", r.total)));
        }
        g.backward(lv.total)?;
        let grads: Vec<Option<Tensor<f32>>> = p.iter().map(|&v| g.take_grad(v)).collect();
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, self.cfg.adam)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, step {step}")),
                other => other,
            })?;
        Ok(LossReport {
            l_per: r.l_per as f64,
            l_d: r.l_d as f64,
            l_t: r.l_t as f64,
            l_a: r.l_a as f64,
            l_rec: r.l_rec as f64,
            total: r.total as f64,
        })
    }

    /// Train one epoch and score the eval split.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.finished() {
            return Err(Error::InvalidArgument(format!("all {} epochs already done", self.cfg.epochs)));
        }
        let e = self.epoch;
        let lr = lr_schedule(e, &self.cfg)?;
        let batches: Vec<Batch> =
            self.train_set.batches(self.cfg.batch, derive_seed(self.cfg.seed, e as u64)).collect::<Result<_>>()?;
        let mut sums = [0.0f64; 6];
        for (i, b) in batches.iter().enumerate() {
            let r = self.step(b, lr, e + 1, i + 1)?;
            let w = b.len() as f64;
            for (s, v) in sums.iter_mut().zip([r.l_per, r.l_d, r.l_t, r.l_a, r.l_rec, r.total]) {
                *s += w * v;
            }
        }
        let n = self.train_set.len() as f64;
        let losses = LossReport {
            l_per: sums[0] / n,
            l_d: sums[1] / n,
            l_t: sums[2] / n,
            l_a: sums[3] / n,
            l_rec: sums[4] / n,
            total: sums[5] / n,
        };
        self.epoch += 1;
        let (psnr, ssim) = match &self.eval_set {
            Some(d) => {
                let r = evaluate(&self.model, d, self.cfg.batch)?;
                (Some(r.mean_psnr), Some(r.mean_ssim))
            }
            None => (None, None),
        };
        let rec = EpochRecord { epoch: self.epoch, lr, losses, psnr, ssim };
        self.trace.push(rec.clone());
        Ok(rec)
    }

    /// Train until the configured epoch count, calling `after` after each epoch.
    pub fn run(&mut self, mut after: impl FnMut(&Self, &EpochRecord) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let rec = self.run_epoch()?;
            after(self, &rec)?;
        }
        Ok(())
    }
}

impl TrainConfig {
    /// The training-relevant settings as config text; the output directory is
    /// left out so identical runs in different places write identical bytes.
    pub fn echo(&self) -> String {
        crate::io::config::render(self, false)
    }
}

pub fn sdc_name(mode: SdcMode) -> &'static str {
    match mode {
        SdcMode::Learned => "on",
        SdcMode::Frozen => "frozen",
        SdcMode::Off => "off",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch: 2,
            image_size: 32,
            dataset_count: 3,
            eval_count: 1,
            net: NetConfig { width: 4, ..NetConfig::default() },
            lr0: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn linear_decay() {
        let cfg = TrainConfig { epochs: 4, lr0: 2e-4, ..Default::default() };
        let lrs: Vec<f64> = (0..4).map(|e| lr_schedule(e, &cfg).unwrap()).collect();
        for (got, want) in lrs.iter().zip([2e-4, 1.5e-4, 1e-4, 0.5e-4]) {
            assert!((got - want).abs() < 1e-18, "{got} vs {want}");
        }
        assert!(lr_schedule(4, &cfg).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig { toggles: LossToggles::none(), ..tiny() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..tiny() }.validate().is_err());
        assert!(TrainConfig { image_size: 48, ..tiny() }.validate().is_err());
        assert!(TrainConfig { lr0: f64::NAN, ..tiny() }.validate().is_err());
        assert_eq!(tiny().steps_per_epoch(), 2);
    }

    #[test]
    fn deterministic_and_resumable() {
        let mut a = Trainer::new(tiny()).unwrap();
        a.run(|_, _| Ok(())).unwrap();
        assert_eq!(a.trace.len(), 3);
        assert!(a.trace.iter().all(|r| r.psnr.is_some() && r.losses.total.is_finite()));

        let mut b = Trainer::new(tiny()).unwrap();
        b.run_epoch().unwrap();
        let bytes = b.checkpoint().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), bytes);
        let mut c = Trainer::resume(tiny(), &ck).unwrap();
        assert_eq!(c.adam.step, 2);
        c.run(|_, _| Ok(())).unwrap();

        let (fa, fc) = (a.checkpoint().to_bytes().unwrap(), c.checkpoint().to_bytes().unwrap());
        assert_eq!(fa, fc);
        assert_eq!(a.trace[1..], c.trace[..]);
    }

    #[test]
    fn nan_loss_names_the_step() {
        let mut t = Trainer::new(tiny()).unwrap();
        let (_, p) = t.model.params.iter_mut().find(|(n, _)| n.starts_with("fuse.")).unwrap();
        p.value.data_mut()[0] = f32::NAN;
        let err = t.run_epoch().unwrap_err().to_string();
        assert!(err.contains("epoch 1, step 1"), "{err}");
    }

    #[test]
    fn checkpoint_errors() {
        let t = Trainer::new(tiny()).unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        for cut in [3, 8, bytes.len() / 2, bytes.len() - 1] {
            let e = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err().to_string();
            assert!(e.contains("truncated") || e.contains("magic"), "{cut}: {e}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).unwrap_err().to_string().contains("trailing"));
        let mut v2 = bytes.clone();
        v2[7] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));

        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut off = tiny();
        off.net.sdc = SdcMode::Off;
        let e = Trainer::resume(off, &ck).unwrap_err();
        assert!(matches!(e, Error::Architecture(_)), "{e}");
        let mut no_drn = tiny();
        no_drn.net.drn = false;
        assert!(matches!(Trainer::resume(no_drn, &ck).unwrap_err(), Error::Architecture(_)));
    }
}
