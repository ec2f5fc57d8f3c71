//! Shared training loop: optimizer state, per-epoch RNG streams, loss history
//! and checkpoint round trips with resumable optimizer moments.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ensure_arg, Error, Result};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Checkpoint, Module};
use crate::util::{rng_for, stream_tag};

/// Optimization hyperparameters common to all three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f32,
    /// Fraction of the final learning rate reached by cosine decay; 1 keeps it constant.
    pub final_lr_frac: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            steps_per_epoch: 50,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            final_lr_frac: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.batch_size > 0, "batch size must be positive");
        ensure_arg!(self.steps_per_epoch > 0, "steps per epoch must be positive");
        ensure_arg!(
            self.lr > 0.0 && self.lr.is_finite(),
            "learning rate must be positive"
        );
        ensure_arg!(
            (0.0..=1.0).contains(&self.final_lr_frac),
            "final_lr_frac must lie in [0, 1]"
        );
        Ok(())
    }

    /// Learning rate for a 0-based global step.
    pub fn lr_at(&self, step: usize) -> f32 {
        let total = (self.epochs * self.steps_per_epoch).max(1);
        let progress = (step as f64 / total as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let frac = self.final_lr_frac as f64 + (1.0 - self.final_lr_frac as f64) * cos;
        (self.lr as f64 * frac) as f32
    }
}

/// One line of a training-curve log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f32,
    pub grad_norm: f32,
}

/// A model together with its optimizer and training progress.
pub struct Trainer<M> {
    pub stage: String,
    pub model: M,
    pub opt: AdamW,
    pub epoch: usize,
    pub losses: Vec<f64>,
}

impl<M: Module> Trainer<M> {
    pub fn new(stage: &str, model: M, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        Trainer {
            stage: stage.to_string(),
            model,
            opt,
            epoch: 0,
            losses: Vec::new(),
        }
    }

    /// Rebuilds the training state saved by `checkpoint`; `model` must already
    /// have the checkpoint's architecture.
    pub fn resume(stage: &str, mut model: M, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        ck.load_module("", &mut model)?;
        let mut t = Trainer::new(stage, model, cfg);
        let meta = &ck.meta;
        t.epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        t.losses = meta["losses"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        let step = meta["step"].as_u64().unwrap_or(0);
        if step > 0 {
            let lookup = |name: &str| ck.get(name).map(|t| t.data.clone());
            t.opt.load_state(&mut t.model, step, &lookup)?;
        }
        Ok(t)
    }

    /// Runs epochs `self.epoch..cfg.epochs`. `step` computes one batch's loss
    /// and leaves gradients in the model. Epoch `e` always draws from the same
    /// RNG stream, so resumed runs match uninterrupted ones.
    pub fn run(
        &mut self,
        cfg: &TrainConfig,
        seed: u64,
        step: impl FnMut(&mut M, &mut ChaCha8Rng) -> Result<f64>,
        log: &mut dyn FnMut(&EpochLog),
    ) -> Result<()> {
        self.run_until(cfg, seed, cfg.epochs, step, log)
    }

    /// Like `run`, but stops after epoch `stop - 1`; the learning-rate
    /// schedule still spans `cfg.epochs`.
    pub fn run_until(
        &mut self,
        cfg: &TrainConfig,
        seed: u64,
        stop: usize,
        mut step: impl FnMut(&mut M, &mut ChaCha8Rng) -> Result<f64>,
        log: &mut dyn FnMut(&EpochLog),
    ) -> Result<()> {
        cfg.validate()?;
        let tag = stream_tag(&self.stage);
        while self.epoch < stop.min(cfg.epochs) {
            let mut rng = rng_for(seed ^ tag, self.epoch as u64);
            let mut sum = 0.0;
            let mut norm = 0.0;
            let mut lr = cfg.lr;
            for s in 0..cfg.steps_per_epoch {
                lr = cfg.lr_at(self.epoch * cfg.steps_per_epoch + s);
                self.opt.config.lr = lr;
                self.model.zero_grad();
                let loss = step(&mut self.model, &mut rng)?;
                if !loss.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "{} training diverged at epoch {} (loss {loss})",
                        self.stage, self.epoch
                    )));
                }
                norm = clip_grad_norm(&mut self.model, cfg.grad_clip);
                self.opt.update(&mut self.model);
                sum += loss;
            }
            let loss = sum / cfg.steps_per_epoch as f64;
            self.losses.push(loss);
            log(&EpochLog {
                stage: self.stage.clone(),
                epoch: self.epoch,
                loss,
                lr,
                grad_norm: norm,
            });
            self.epoch += 1;
        }
        Ok(())
    }

    /// Checkpoint holding weights, optimizer moments and progress; `extra`
    /// fields are merged into the metadata.
    pub fn checkpoint(&mut self, kind: &str, config: Value, extra: Value) -> Checkpoint {
        let mut meta = json!({
            "epoch": self.epoch,
            "step": self.opt.step,
            "losses": self.losses,
        });
        if let (Some(m), Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut ck = Checkpoint::new(kind, config, meta);
        ck.add_module("", &mut self.model);
        for (name, shape, data) in self.opt.state_tensors(&mut self.model) {
            ck.push(name, shape, data);
        }
        ck
    }
}

/// Column header matching `log_line`.
pub const LOG_HEADER: &str = "stage,epoch,loss,lr,grad_norm";

pub fn log_line(e: &EpochLog) -> String {
    format!(
        "{},{},{:.8e},{:.6e},{:.6e}",
        e.stage, e.epoch, e.loss, e.lr, e.grad_norm
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::nn::ParamVisitor;
    use rand::Rng;

    struct Quadratic {
        w: Param,
    }

    impl Module for Quadratic {
        fn visit(&mut self, v: &mut ParamVisitor) {
            v.param("w", &mut self.w);
        }
    }

    fn quad() -> Quadratic {
        Quadratic {
            w: Param::filled(&[3], 2.0),
        }
    }

    fn step(m: &mut Quadratic, rng: &mut ChaCha8Rng) -> Result<f64> {
        let target: f32 = rng.gen_range(-0.1..0.1);
        let mut loss = 0.0;
        for i in 0..3 {
            let d = m.w.value[i] - target;
            loss += (d * d) as f64;
            m.w.grad[i] = 2.0 * d;
        }
        Ok(loss)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            steps_per_epoch: 5,
            lr: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_and_is_logged_per_epoch() {
        let mut t = Trainer::new("quad", quad(), &cfg(6));
        let mut epochs = Vec::new();
        t.run(&cfg(6), 1, step, &mut |e| epochs.push(e.epoch))
            .unwrap();
        assert_eq!(epochs, (0..6).collect::<Vec<_>>());
        assert!(t.losses[5] < t.losses[0]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut full = Trainer::new("quad", quad(), &cfg(6));
        full.run(&cfg(6), 3, step, &mut |_| {}).unwrap();

        let mut first = Trainer::new("quad", quad(), &cfg(6));
        first.run(&cfg(3), 3, step, &mut |_| {}).unwrap();
        let ck = first.checkpoint("quad", json!({}), json!({"note": 1}));
        assert_eq!(ck.meta["note"], 1);
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut resumed = Trainer::resume("quad", quad(), &cfg(6), &ck).unwrap();
        assert_eq!(resumed.epoch, 3);
        let mut seen = Vec::new();
        resumed
            .run(&cfg(6), 3, step, &mut |e| seen.push(e.epoch))
            .unwrap();
        assert_eq!(seen, vec![3, 4, 5]);
        assert_eq!(resumed.model.w.value, full.model.w.value);
        assert_eq!(resumed.losses, full.losses);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig {
            final_lr_frac: 0.1,
            ..cfg(4)
        };
        assert_eq!(c.lr_at(0), c.lr);
        assert!((c.lr_at(20) - 0.1 * c.lr).abs() < 1e-7);
        assert!(c.lr_at(5) > c.lr_at(15));
    }

    #[test]
    fn divergence_is_reported() {
        let mut t = Trainer::new("quad", quad(), &cfg(1));
        let err = t
            .run(&cfg(1), 0, |_, _| Ok(f64::NAN), &mut |_| {})
            .unwrap_err();
        assert!(err.to_string().contains("diverged"));
    }
}
