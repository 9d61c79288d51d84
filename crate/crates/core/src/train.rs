//! The alternating training loop: per iteration, sample latent codes and a
//! generated batch, sample a data batch and its inferred codes, then ascend
//! the energy objective, descend the inference objective, and descend the
//! generator objective (optionally several generator sub-steps, each with
//! fresh samples).
//!
//! Every random draw comes from a named stream indexed by (iteration,
//! sub-step), so a run is a pure function of its config and resuming from a
//! checkpoint is bitwise identical to an uninterrupted run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointData};
use crate::data::{epoch_batches, DataSet};
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::loss::{
    energy_gap_terms, generated_batch, sleep_term, wake_terms, Diagnostics, LossWeights,
    TriangleBatchLoss,
};
use crate::models::{ModelConfig, Models, NoiseMode};
use crate::optim::{adam_step, clip_global_norm, AdamHyper, AdamState};
use crate::pgm;
use crate::rng::{normal_tensor, SeedTree};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Data batch size M.
    pub batch_data: usize,
    /// Generated batch size M~.
    pub batch_gen: usize,
    pub lr_alpha: f64,
    pub lr_phi: f64,
    pub lr_theta: f64,
    pub theta_steps: usize,
    pub weight_decay: f64,
    pub adam: AdamHyper,
    pub seed: u64,
    pub weights: LossWeights,
    pub gen_noise: NoiseMode,
    pub sleep_detach_theta: bool,
    pub grad_clip: Option<f64>,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_data: 64,
            batch_gen: 64,
            lr_alpha: 1e-4,
            lr_phi: 3e-4,
            lr_theta: 3e-4,
            theta_steps: 1,
            weight_decay: 5e-4,
            adam: AdamHyper::default(),
            seed: 0,
            weights: LossWeights::default(),
            gen_noise: NoiseMode::Gaussian,
            sleep_detach_theta: false,
            grad_clip: None,
            log_interval: 50,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_alpha < 0.0 || self.lr_phi < 0.0 || self.lr_theta < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.theta_steps < 1 {
            return Err(Error::Config("theta_steps must be >= 1".into()));
        }
        if self.batch_data < 1 || self.batch_gen < 1 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.log_interval < 1 || self.checkpoint_interval < 1 {
            return Err(Error::Config("intervals must be >= 1".into()));
        }
        self.weights.validate()
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    pub opt_theta: AdamState,
    pub opt_phi: AdamState,
    pub opt_alpha: AdamState,
    pub iter: u64,
    pub seeds: SeedTree,
    /// Fresh (z, eps) draws consumed by generator sub-steps; test hook for
    /// the multiple-step contract.
    pub resamples: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = SeedTree::new(cfg.seed);
        let models = Models::new(model_cfg, &seeds)?;
        Ok(Trainer {
            opt_theta: AdamState::for_params(&models.gen.params),
            opt_phi: AdamState::for_params(&models.inf.params),
            opt_alpha: AdamState::for_params(&models.en.params),
            models,
            iter: 0,
            seeds,
            resamples: 0,
            cfg,
        })
    }

    pub fn from_checkpoint(cfg: TrainConfig, data: CheckpointData) -> Result<Self> {
        cfg.validate()?;
        if data.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} does not match config seed {}",
                data.seed, cfg.seed
            )));
        }
        let (models, [opt_theta, opt_phi, opt_alpha], iter, seed) = data.into_models()?;
        Ok(Trainer {
            cfg,
            models,
            opt_theta,
            opt_phi,
            opt_alpha,
            iter,
            seeds: SeedTree::new(seed),
            resamples: 0,
        })
    }

    pub fn checkpoint_data(&self) -> CheckpointData {
        CheckpointData {
            config: self.models.config.clone(),
            iter: self.iter,
            seed: self.cfg.seed,
            gen: self.models.gen.params.clone(),
            inf: self.models.inf.params.clone(),
            en: self.models.en.params.clone(),
            adam_gen: self.opt_theta.clone(),
            adam_inf: self.opt_phi.clone(),
            adam_en: self.opt_alpha.clone(),
        }
    }

    fn scalar(&self, tape: &Tape, v: Val, name: &str) -> Result<f64> {
        let x = tape.value(v).item();
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("training halted: {name}")));
        }
        Ok(x)
    }

    fn grads_of(&self, tape: &Tape, bound: &[Val]) -> Vec<Tensor> {
        bound.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }

    /// Draw (z, obs noise, reparam noise) for iteration `t`, sub-step `sub`.
    fn draw_samples(&self, t: u64, sub: u64) -> (Tensor, Option<Tensor>, Tensor) {
        let d = self.models.config.latent_dim;
        let z = normal_tensor(
            &mut self.seeds.stream("prior", &[t, sub]),
            &[self.cfg.batch_gen, d],
        );
        let obs = match self.cfg.gen_noise {
            NoiseMode::None => None,
            NoiseMode::Gaussian => {
                let mut shape = vec![self.cfg.batch_gen];
                shape.extend_from_slice(&self.models.config.signal_shape);
                Some(normal_tensor(&mut self.seeds.stream("obs", &[t, sub]), &shape))
            }
        };
        let eps = normal_tensor(
            &mut self.seeds.stream("reparam", &[t, sub]),
            &[self.cfg.batch_data, d],
        );
        (z, obs, eps)
    }

    /// Generated batch as a plain tensor at the current parameters.
    pub fn generate_value(&self, z: &Tensor, obs_eps: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let gen_bound = self.models.gen.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let xg = generated_batch(&mut tape, &self.models, &gen_bound, zv, obs_eps)?;
        Ok(tape.value(xg).clone())
    }

    /// Energy ascent step on (data batch, generated batch). Returns
    /// (loss_alpha, mean f on data, mean f on generated).
    fn alpha_phase(&mut self, x: &Tensor, x_gen: &Tensor) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let en_bound = self.models.en.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let xg = tape.constant(x_gen.clone());
        let (f_data, f_gen, loss_alpha) =
            energy_gap_terms(&mut tape, &self.models, &en_bound, xv, xg)?;
        let out = (
            self.scalar(&tape, loss_alpha, "loss_alpha")?,
            self.scalar(&tape, f_data, "energy_data_mean")?,
            self.scalar(&tape, f_gen, "energy_gen_mean")?,
        );
        tape.backward(loss_alpha)?;
        // Ascend: Adam descends, so feed the negated gradient.
        let mut grads: Vec<Tensor> =
            self.grads_of(&tape, &en_bound).into_iter().map(|g| g.map(|v| -v)).collect();
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adam_step(
            &mut self.models.en.params,
            &grads,
            &mut self.opt_alpha,
            self.cfg.lr_alpha,
            &self.cfg.adam,
            self.cfg.weight_decay,
        )?;
        Ok(out)
    }

    /// Inference descent step. Returns (loss_phi, kl, recon, sleep).
    fn phi_phase(
        &mut self,
        x: &Tensor,
        visible: Option<&Tensor>,
        z: &Tensor,
        x_gen: &Tensor,
        reparam_eps: &Tensor,
    ) -> Result<(f64, f64, f64, f64)> {
        let w = self.cfg.weights;
        let mut tape = Tape::new();
        let inf_bound = self.models.inf.bind(&mut tape, true);
        let gen_bound = self.models.gen.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let zv = tape.constant(z.clone());
        let xg = tape.constant(x_gen.clone());
        let wake =
            wake_terms(&mut tape, &self.models, &gen_bound, &inf_bound, xv, visible, reparam_eps)?;
        let sleep = sleep_term(&mut tape, &self.models, &inf_bound, xg, zv, false)?;
        let kl_w = tape.scale(wake.kl_mean, w.w_klprior);
        let rec_w = tape.scale(wake.recon_mean, w.w_recon);
        let sleep_w = tape.scale(sleep, w.w_sleep);
        let partial = tape.add(kl_w, rec_w)?;
        let loss_phi = tape.add(partial, sleep_w)?;
        let out = (
            self.scalar(&tape, loss_phi, "loss_phi")?,
            self.scalar(&tape, wake.kl_mean, "kl_wake")?,
            self.scalar(&tape, wake.recon_mean, "recon_wake")?,
            self.scalar(&tape, sleep, "sleep_nll")?,
        );
        tape.backward(loss_phi)?;
        let mut grads = self.grads_of(&tape, &inf_bound);
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adam_step(
            &mut self.models.inf.params,
            &grads,
            &mut self.opt_phi,
            self.cfg.lr_phi,
            &self.cfg.adam,
            self.cfg.weight_decay,
        )?;
        Ok(out)
    }

    /// One generator descent sub-step with fresh samples. Returns loss_theta.
    fn theta_phase(&mut self, x: &Tensor, visible: Option<&Tensor>, t: u64, sub: u64) -> Result<f64> {
        let w = self.cfg.weights;
        let (z, obs, eps) = self.draw_samples(t, sub);
        self.resamples += 1;
        let mut tape = Tape::new();
        let gen_bound = self.models.gen.bind(&mut tape, true);
        let inf_bound = self.models.inf.bind(&mut tape, false);
        let en_bound = self.models.en.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let zv = tape.constant(z.clone());
        let x_gen = generated_batch(&mut tape, &self.models, &gen_bound, zv, obs.as_ref())?;
        let wake = wake_terms(&mut tape, &self.models, &gen_bound, &inf_bound, xv, visible, &eps)?;
        let f_gen = self.models.en.forward(&mut tape, &en_bound, x_gen)?;
        let f_gen_mean = tape.mean_all(f_gen)?;
        let sleep =
            sleep_term(&mut tape, &self.models, &inf_bound, x_gen, zv, self.cfg.sleep_detach_theta)?;
        let rec_w = tape.scale(wake.recon_mean, w.w_recon);
        let f_gen_w = tape.scale(f_gen_mean, -w.w_energy);
        let sleep_w = tape.scale(sleep, w.w_sleep);
        let partial = tape.add(rec_w, f_gen_w)?;
        let loss_theta = tape.add(partial, sleep_w)?;
        let out = self.scalar(&tape, loss_theta, "loss_theta")?;
        tape.backward(loss_theta)?;
        let mut grads = self.grads_of(&tape, &gen_bound);
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adam_step(
            &mut self.models.gen.params,
            &grads,
            &mut self.opt_theta,
            self.cfg.lr_theta,
            &self.cfg.adam,
            self.cfg.weight_decay,
        )?;
        Ok(out)
    }

    /// One full iteration in the fixed order: sample, alpha-step (ascent),
    /// phi-step, then `theta_steps` generator sub-steps with fresh samples.
    pub fn train_iteration(&mut self, x: &Tensor, visible: Option<&Tensor>) -> Result<TriangleBatchLoss> {
        let t = self.iter;
        let (z, obs, reparam_eps) = self.draw_samples(t, 0);
        let x_gen = self.generate_value(&z, obs.as_ref())?;

        let (loss_alpha, f_data_mean, f_gen_mean) = self.alpha_phase(x, &x_gen)?;
        let (loss_phi, kl_wake, recon_wake, sleep_nll) =
            self.phi_phase(x, visible, &z, &x_gen, &reparam_eps)?;
        let mut loss_theta = 0.0;
        for sub in 0..self.cfg.theta_steps {
            let l = self.theta_phase(x, visible, t, sub as u64 + 1)?;
            if sub == 0 {
                loss_theta = l;
            }
        }
        self.iter += 1;
        Ok(TriangleBatchLoss {
            loss_alpha,
            loss_theta,
            loss_phi,
            diagnostics: Diagnostics {
                recon_wake,
                kl_wake,
                sleep_nll,
                energy_data_mean: f_data_mean,
                energy_gen_mean: f_gen_mean,
            },
        })
    }
}

// ── Run loop with metrics, checkpoints, sample grids ────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: TriangleBatchLoss,
}

/// Render metric rows as CSV (UTF-8, LF, header + one row per log point).
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iter,loss_alpha,loss_theta,loss_phi,recon_wake,energy_gap\n");
    for r in rows {
        let d = &r.loss.diagnostics;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter,
            r.loss.loss_alpha,
            r.loss.loss_theta,
            r.loss.loss_phi,
            d.recon_wake,
            d.energy_data_mean - d.energy_gen_mean,
        ));
    }
    out
}

pub struct TrainOutput {
    pub rows: Vec<MetricsRow>,
}

/// Run the loop to `cfg.iterations`, batching `data` per epoch. With a run
/// directory, writes metrics.csv, periodic checkpoints, and (for image
/// signals) sample grids at log intervals.
pub fn train(trainer: &mut Trainer, data: &DataSet, run_dir: Option<&Path>) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if data.signal_shape() != trainer.models.config.signal_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "dataset signal {:?} vs model signal {:?}",
            data.signal_shape(),
            trainer.models.config.signal_shape
        )));
    }
    let m = trainer.cfg.batch_data;
    let bpe = (data.len() / m).max(1) as u64;
    let mut rows = Vec::new();
    let mut cur_epoch = u64::MAX;
    let mut batches = Vec::new();

    while trainer.iter < trainer.cfg.iterations {
        let t = trainer.iter;
        let epoch = t / bpe;
        if epoch != cur_epoch {
            batches = epoch_batches(data, m, &trainer.seeds, epoch)?;
            cur_epoch = epoch;
        }
        let x = data.examples.gather_rows(&batches[(t % bpe) as usize]);
        let loss = trainer.train_iteration(&x, None)?;

        if t % trainer.cfg.log_interval == 0 {
            rows.push(MetricsRow { iter: t, loss });
            if let Some(dir) = run_dir {
                write_sample_grid(trainer, dir, t)?;
            }
        }
        if let Some(dir) = run_dir {
            if trainer.iter % trainer.cfg.checkpoint_interval == 0
                && trainer.iter < trainer.cfg.iterations
            {
                checkpoint::save(
                    &dir.join(format!("ckpt_{:06}.dtri", trainer.iter)),
                    &trainer.checkpoint_data(),
                )?;
                atomic_write(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
            }
        }
    }
    if let Some(dir) = run_dir {
        checkpoint::save(&dir.join("ckpt_final.dtri"), &trainer.checkpoint_data())?;
        atomic_write(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    }
    Ok(TrainOutput { rows })
}

fn write_sample_grid(trainer: &Trainer, dir: &Path, t: u64) -> Result<()> {
    if trainer.models.config.signal_shape.len() != 3 {
        return Ok(()); // non-image signals have no grid representation
    }
    let n = 64;
    let z = normal_tensor(
        &mut trainer.seeds.stream("sample", &[t]),
        &[n, trainer.models.config.latent_dim],
    );
    let x = trainer.generate_value(&z, None)?;
    pgm::write_grid(&dir.join(format!("samples_{t:06}.pgm")), &x, 8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Synthetic2D;
    use crate::models::energy_value;

    fn tiny_setup(seed: u64) -> (TrainConfig, ModelConfig, DataSet) {
        let cfg = TrainConfig {
            iterations: 10,
            batch_data: 8,
            batch_gen: 8,
            seed,
            log_interval: 3,
            ..TrainConfig::default()
        };
        let model = ModelConfig::mlp(vec![8, 8], 2, 2);
        let spec = Synthetic2D::GaussianMixture {
            means: vec![[-1.0, 0.0], [1.0, 0.0]],
            weights: vec![0.5, 0.5],
            std: 0.2,
        };
        let seeds = SeedTree::new(seed);
        let data =
            crate::data::sample_synthetic(&spec, 32, &mut seeds.stream("dataset", &[])).unwrap();
        (cfg, model, data)
    }

    #[test]
    fn zero_iterations_leave_parameters_at_initialization() {
        let (mut cfg, model, data) = tiny_setup(1);
        cfg.iterations = 0;
        let mut trainer = Trainer::new(cfg.clone(), model.clone()).unwrap();
        let fresh = Trainer::new(cfg, model).unwrap();
        train(&mut trainer, &data, None).unwrap();
        assert_eq!(trainer.models.gen.params, fresh.models.gen.params);
        assert_eq!(trainer.models.inf.params, fresh.models.inf.params);
        assert_eq!(trainer.models.en.params, fresh.models.en.params);
    }

    #[test]
    fn zero_learning_rates_keep_parameters_but_log_losses() {
        let (mut cfg, model, data) = tiny_setup(2);
        cfg.lr_alpha = 0.0;
        cfg.lr_phi = 0.0;
        cfg.lr_theta = 0.0;
        cfg.weight_decay = 0.0;
        let mut trainer = Trainer::new(cfg.clone(), model.clone()).unwrap();
        let fresh = Trainer::new(cfg, model).unwrap();
        let out = train(&mut trainer, &data, None).unwrap();
        assert_eq!(trainer.models.gen.params, fresh.models.gen.params);
        assert_eq!(trainer.models.en.params, fresh.models.en.params);
        assert_eq!(out.rows.len(), 4); // ceil(10/3)
    }

    #[test]
    fn metrics_row_count_is_ceil_t_over_interval() {
        for (t, interval, expect) in [(10u64, 3u64, 4usize), (9, 3, 3), (1, 5, 1), (20, 20, 1)] {
            let (mut cfg, model, data) = tiny_setup(3);
            cfg.iterations = t;
            cfg.log_interval = interval;
            let mut trainer = Trainer::new(cfg, model).unwrap();
            let out = train(&mut trainer, &data, None).unwrap();
            assert_eq!(out.rows.len(), expect, "T={t} interval={interval}");
        }
    }

    #[test]
    fn empty_dataset_errors_before_iteration_zero() {
        let (cfg, model, data) = tiny_setup(4);
        let empty = DataSet::new(Tensor::zeros(&[0, 2]), None, "empty").unwrap();
        let mut trainer = Trainer::new(cfg, model).unwrap();
        assert!(train(&mut trainer, &empty, None).is_err());
        // Untouched by the failed call.
        let _ = data;
        assert_eq!(trainer.iter, 0);
    }

    #[test]
    fn theta_steps_consume_exactly_k_resamples_per_iteration() {
        let (mut cfg, model, data) = tiny_setup(5);
        cfg.theta_steps = 3;
        cfg.iterations = 4;
        let mut trainer = Trainer::new(cfg, model).unwrap();
        train(&mut trainer, &data, None).unwrap();
        assert_eq!(trainer.resamples, 3 * 4);
    }

    #[test]
    fn alpha_step_ascends_its_objective_on_the_same_batch() {
        // First-order ascent: with a small learning rate, loss_alpha
        // evaluated on the same (x, x_gen) must not decrease after the
        // alpha-step, in at least 95 of 100 iterations.
        let (mut cfg, model, data) = tiny_setup(6);
        cfg.iterations = 100;
        cfg.lr_alpha = 1e-4;
        let mut trainer = Trainer::new(cfg, model).unwrap();
        let seeds = trainer.seeds;
        let mut non_decreasing = 0;
        for t in 0..100 {
            // Replay the exact samples iteration t will use.
            let batches = epoch_batches(&data, trainer.cfg.batch_data, &seeds, t / 4).unwrap();
            let x = data.examples.gather_rows(&batches[(t % 4) as usize]);
            let (z, obs, _) = trainer.draw_samples(t, 0);
            let x_gen = trainer.generate_value(&z, obs.as_ref()).unwrap();
            let eval = |models: &Models| {
                let fd = energy_value(&models.en, &x).unwrap();
                let fg = energy_value(&models.en, &x_gen).unwrap();
                fd.data().iter().sum::<f64>() / fd.numel() as f64
                    - fg.data().iter().sum::<f64>() / fg.numel() as f64
            };
            let before = eval(&trainer.models);
            trainer.train_iteration(&x, None).unwrap();
            let after = eval(&trainer.models);
            if after >= before {
                non_decreasing += 1;
            }
        }
        assert!(non_decreasing >= 95, "only {non_decreasing}/100 ascended");
    }

    #[test]
    fn resume_from_checkpoint_is_bitwise_identical() {
        let (mut cfg, model, data) = tiny_setup(7);
        cfg.iterations = 8;
        cfg.theta_steps = 2;

        let mut straight = Trainer::new(cfg.clone(), model.clone()).unwrap();
        train(&mut straight, &data, None).unwrap();
        let full = checkpoint::encode(&straight.checkpoint_data());

        let mut first = Trainer::new(cfg.clone(), model).unwrap();
        first.cfg.iterations = 4;
        train(&mut first, &data, None).unwrap();
        let mid = first.checkpoint_data();
        let mut resumed =
            Trainer::from_checkpoint(cfg, checkpoint::decode(&checkpoint::encode(&mid)).unwrap())
                .unwrap();
        train(&mut resumed, &data, None).unwrap();
        let resumed_bytes = checkpoint::encode(&resumed.checkpoint_data());
        assert_eq!(full, resumed_bytes);
    }

    #[test]
    fn identical_config_and_seed_reproduce_metrics_exactly() {
        let run = || {
            let (cfg, model, data) = tiny_setup(8);
            let mut trainer = Trainer::new(cfg, model).unwrap();
            metrics_csv(&train(&mut trainer, &data, None).unwrap().rows)
        };
        assert_eq!(run(), run());
    }
}
