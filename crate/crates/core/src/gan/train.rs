use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{discriminator_pass, generator_loss_and_grads};
use super::{sample_latent, GanConfig, GanError, GanModel, TrainingRatio};
use crate::data::ReturnMatrix;
use crate::rng::{self, Stream};
use crate::validation::per_factor_wasserstein;

/// Validation snapshot taken during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    /// W1 distance per factor between generated and training columns, in
    /// normalized units.
    pub wasserstein: Vec<f64>,
    pub max_wasserstein: f64,
    /// Most recent discriminator objective; `None` before the first step.
    pub discriminator_objective: Option<f64>,
    /// Most recent generator loss; `None` before the first step.
    pub generator_loss: Option<f64>,
}

struct Trainer<'a> {
    model: GanModel,
    data: &'a Array2<f64>,
    g_opt: Adam,
    d_opt: Adam,
    batch_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
    last_d: Option<f64>,
    last_g: Option<f64>,
}

impl Trainer<'_> {
    fn real_batch(&mut self) -> Array2<f64> {
        let m = self.model.config.batch_size;
        let rows = self.data.nrows();
        let mut batch = Array2::zeros((m, self.data.ncols()));
        for mut row in batch.rows_mut() {
            let i = self.batch_rng.random_range(0..rows);
            row.assign(&self.data.row(i));
        }
        batch
    }

    fn discriminator_step(&mut self) -> Result<(), GanError> {
        let real = self.real_batch();
        let z = sample_latent(self.model.config.batch_size, &self.model.config, &mut self.latent_rng);
        let (fake, _) = self.model.generator.forward_train(&z)?;
        let pass = discriminator_pass(
            &self.model.discriminator,
            &real,
            &fake,
            self.model.config.discriminator_batching,
        )?;
        self.d_opt.apply(&mut self.model.discriminator, &pass.grads)?;
        for trace in &pass.traces {
            self.model.discriminator.update_running_stats(trace);
        }
        self.last_d = Some(pass.objective);
        Ok(())
    }

    fn generator_step(&mut self) -> Result<(), GanError> {
        let z = sample_latent(self.model.config.batch_size, &self.model.config, &mut self.latent_rng);
        let pass = generator_loss_and_grads(
            &self.model.generator,
            &self.model.discriminator,
            &z,
            self.model.config.generator_loss,
        )?;
        self.g_opt.apply(&mut self.model.generator, &pass.grads)?;
        self.model.generator.update_running_stats(&pass.trace);
        self.last_g = Some(pass.loss);
        Ok(())
    }

    fn iteration(&mut self) -> Result<(), GanError> {
        let k = self.model.config.k_ratio;
        match self.model.config.k_direction {
            TrainingRatio::DiscriminatorMoreOften => {
                for _ in 0..k {
                    self.discriminator_step()?;
                }
                self.generator_step()
            }
            TrainingRatio::GeneratorMoreOften => {
                self.discriminator_step()?;
                for _ in 0..k {
                    self.generator_step()?;
                }
                Ok(())
            }
        }
    }

    fn checkpoint(&self, iteration: usize, eval_size: usize) -> Result<Checkpoint, GanError> {
        // identical evaluation latents at every checkpoint
        let mut rng = rng::stream(self.model.config.seed, Stream::EvaluationLatents);
        let generated = self.model.sample_normalized(eval_size, &mut rng)?;
        let wasserstein = per_factor_wasserstein(&generated, self.data)
            .map_err(|e| GanError::InvalidConfig(e.to_string()))?;
        let max_wasserstein = wasserstein.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Checkpoint {
            iteration,
            wasserstein,
            max_wasserstein,
            discriminator_objective: self.last_d,
            generator_loss: self.last_g,
        })
    }
}

/// Trains generator and discriminator on normalized returns.
///
/// Each outer iteration draws fresh data and latent batches for every
/// optimizer step. Validation checkpoints are recorded at iteration 0, every
/// `checkpoint_every` iterations and after the final iteration; `hook` sees
/// each one as it is recorded. Non-finite parameters abort with
/// [`GanError::TrainingDiverged`] carrying the model at the last checkpoint.
pub fn train_gan(
    cfg: &GanConfig,
    data: &ReturnMatrix,
    mut hook: Option<&mut dyn FnMut(&Checkpoint)>,
) -> Result<GanModel, GanError> {
    cfg.validate()?;
    let rows = data.n_obs();
    if rows < cfg.batch_size {
        return Err(GanError::DataTooSmall {
            rows,
            batch: cfg.batch_size,
        });
    }
    if cfg.batch_size < 2 {
        return Err(GanError::BatchTooSmall(cfg.batch_size));
    }
    let mut model = GanModel::initialize(cfg.clone(), data.factors.clone(), data.scaling.clone())?;
    let g_opt = Adam::new(&mut model.generator, cfg.adam);
    let d_opt = Adam::new(&mut model.discriminator, cfg.adam);
    let mut trainer = Trainer {
        model,
        data: &data.returns,
        g_opt,
        d_opt,
        batch_rng: rng::stream(cfg.seed, Stream::DataBatches),
        latent_rng: rng::stream(cfg.seed, Stream::TrainingLatents),
        last_d: None,
        last_g: None,
    };
    let eval_size = cfg.eval_size.unwrap_or(rows);

    let mut record = |trainer: &mut Trainer, iteration: usize| -> Result<GanModel, GanError> {
        let cp = trainer.checkpoint(iteration, eval_size)?;
        if let Some(h) = hook.as_mut() {
            h(&cp);
        }
        trainer.model.history.push(cp);
        Ok(trainer.model.clone())
    };

    let mut last_good = record(&mut trainer, 0)?;
    for it in 0..cfg.iterations {
        let step = trainer.iteration();
        let diverged = match step {
            Ok(()) => !trainer.model.generator.all_finite() || !trainer.model.discriminator.all_finite(),
            Err(GanError::NonFiniteGradient | GanError::NonFiniteLoss) => true,
            Err(e) => return Err(e),
        };
        if diverged {
            return Err(GanError::TrainingDiverged {
                iteration: it + 1,
                last_good: Box::new(last_good),
            });
        }
        trainer.model.iterations_completed = it + 1;
        let done = it + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.iterations {
            last_good = record(&mut trainer, done)?;
        }
    }
    Ok(trainer.model)
}
