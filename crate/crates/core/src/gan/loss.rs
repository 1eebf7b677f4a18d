//! Binary cross-entropy objectives of the adversarial game.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkGrads, Trace, PROB_EPSILON};
use super::GanError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// Minimize `mean log(1 - D(G(z)))`.
    #[default]
    Saturating,
    /// Minimize `-mean log D(G(z))`.
    NonSaturating,
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// `mean log D(x) + mean log(1 - D(x'))` for given discriminator outputs.
pub fn discriminator_objective(real_probs: &[f64], fake_probs: &[f64]) -> f64 {
    let real = real_probs.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / real_probs.len() as f64;
    let fake = fake_probs
        .iter()
        .map(|&p| (1.0 - clamp_prob(p)).ln())
        .sum::<f64>()
        / fake_probs.len() as f64;
    real + fake
}

pub fn generator_objective(fake_probs: &[f64], variant: GeneratorLoss) -> f64 {
    let n = fake_probs.len() as f64;
    match variant {
        GeneratorLoss::Saturating => {
            fake_probs.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / n
        }
        GeneratorLoss::NonSaturating => {
            -fake_probs.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / n
        }
    }
}

/// How real and generated rows share batch-norm statistics in the
/// discriminator step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorBatching {
    /// One batch of real rows followed by generated rows.
    Joint,
    /// Real and generated rows normalized as two separate batches, the way
    /// the generator step sees generated rows.
    #[default]
    Separate,
}

pub struct DiscriminatorPass {
    /// The ascended objective, not the minimized loss.
    pub objective: f64,
    /// Gradients of `-objective`.
    pub grads: NetworkGrads,
    /// One trace per forward pass, in the order the batches were scored.
    pub traces: Vec<Trace>,
}

fn check_batches(real: &Array2<f64>, fake: &Array2<f64>) -> Result<(), GanError> {
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(GanError::EmptyBatch);
    }
    if real.ncols() != fake.ncols() {
        return Err(GanError::DimensionMismatch {
            expected: real.ncols(),
            got: fake.ncols(),
        });
    }
    Ok(())
}

/// Scores real and generated rows as one concatenated batch and returns the
/// discriminator objective with the gradients that ascend it (as gradients of
/// its negative).
pub fn discriminator_loss_and_grads(
    disc: &Network,
    real: &Array2<f64>,
    fake: &Array2<f64>,
) -> Result<DiscriminatorPass, GanError> {
    check_batches(real, fake)?;
    let (n_real, n_fake) = (real.nrows(), fake.nrows());
    let batch = concatenate(Axis(0), &[real.view(), fake.view()]).expect("same width");
    let (probs, trace) = disc.forward_train(&batch)?;
    let probs = probs.column(0).to_vec();
    let objective = discriminator_objective(&probs[..n_real], &probs[n_real..]);
    if !objective.is_finite() {
        return Err(GanError::NonFiniteLoss);
    }
    let mut grad = Array2::zeros((n_real + n_fake, 1));
    for (i, &p) in probs.iter().enumerate() {
        let p = clamp_prob(p);
        grad[[i, 0]] = if i < n_real {
            -1.0 / (n_real as f64 * p)
        } else {
            1.0 / (n_fake as f64 * (1.0 - p))
        };
    }
    let (grads, _) = disc.backward(&trace, &grad);
    Ok(DiscriminatorPass {
        objective,
        grads,
        traces: vec![trace],
    })
}

/// As [`discriminator_loss_and_grads`] but scoring real and generated rows
/// in two forward passes.
pub fn discriminator_loss_and_grads_separate(
    disc: &Network,
    real: &Array2<f64>,
    fake: &Array2<f64>,
) -> Result<DiscriminatorPass, GanError> {
    check_batches(real, fake)?;
    let (p_real, t_real) = disc.forward_train(real)?;
    let (p_fake, t_fake) = disc.forward_train(fake)?;
    let p_real = p_real.column(0).to_vec();
    let p_fake = p_fake.column(0).to_vec();
    let objective = discriminator_objective(&p_real, &p_fake);
    if !objective.is_finite() {
        return Err(GanError::NonFiniteLoss);
    }
    let (n_real, n_fake) = (p_real.len() as f64, p_fake.len() as f64);
    let g_real = Array2::from_shape_fn((p_real.len(), 1), |(i, _)| -1.0 / (n_real * clamp_prob(p_real[i])));
    let g_fake =
        Array2::from_shape_fn((p_fake.len(), 1), |(i, _)| 1.0 / (n_fake * (1.0 - clamp_prob(p_fake[i]))));
    let (mut grads, _) = disc.backward(&t_real, &g_real);
    grads.add_assign(&disc.backward(&t_fake, &g_fake).0);
    Ok(DiscriminatorPass {
        objective,
        grads,
        traces: vec![t_real, t_fake],
    })
}

pub fn discriminator_pass(
    disc: &Network,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    batching: DiscriminatorBatching,
) -> Result<DiscriminatorPass, GanError> {
    match batching {
        DiscriminatorBatching::Joint => discriminator_loss_and_grads(disc, real, fake),
        DiscriminatorBatching::Separate => discriminator_loss_and_grads_separate(disc, real, fake),
    }
}

pub struct GeneratorPass {
    /// The minimized generator loss for the chosen variant.
    pub loss: f64,
    pub grads: NetworkGrads,
    pub trace: Trace,
}

/// Generator loss on a latent batch with gradients flowing through a fixed
/// discriminator (batch statistics, no running-stat update).
pub fn generator_loss_and_grads(
    gen: &Network,
    disc: &Network,
    latent: &Array2<f64>,
    variant: GeneratorLoss,
) -> Result<GeneratorPass, GanError> {
    if latent.nrows() == 0 {
        return Err(GanError::EmptyBatch);
    }
    let (fake, gen_trace) = gen.forward_train(latent)?;
    let (probs, disc_trace) = disc.forward_train(&fake)?;
    let probs = probs.column(0).to_vec();
    let loss = generator_objective(&probs, variant);
    if !loss.is_finite() {
        return Err(GanError::NonFiniteLoss);
    }
    let n = probs.len() as f64;
    let mut grad = Array2::zeros((probs.len(), 1));
    for (i, &p) in probs.iter().enumerate() {
        let p = clamp_prob(p);
        grad[[i, 0]] = match variant {
            GeneratorLoss::Saturating => -1.0 / (n * (1.0 - p)),
            GeneratorLoss::NonSaturating => -1.0 / (n * p),
        };
    }
    let (_, d_fake) = disc.backward(&disc_trace, &grad);
    let (grads, _) = gen.backward(&gen_trace, &d_fake);
    Ok(GeneratorPass {
        loss,
        grads,
        trace: gen_trace,
    })
}

/// Both players' objectives and gradients for one real batch and one latent
/// batch.
pub struct BceOutput {
    pub discriminator_objective: f64,
    pub generator_loss: f64,
    pub discriminator_grads: NetworkGrads,
    pub generator_grads: NetworkGrads,
}

pub fn bce_loss_and_grads(
    gen: &Network,
    disc: &Network,
    real: &Array2<f64>,
    latent: &Array2<f64>,
    variant: GeneratorLoss,
    batching: DiscriminatorBatching,
) -> Result<BceOutput, GanError> {
    let fake = gen.forward_train(latent)?.0;
    let d = discriminator_pass(disc, real, &fake, batching)?;
    let g = generator_loss_and_grads(gen, disc, latent, variant)?;
    Ok(BceOutput {
        discriminator_objective: d.objective,
        generator_loss: g.loss,
        discriminator_grads: d.grads,
        generator_grads: g.grads,
    })
}
