//! Feed-forward generative adversarial network: architecture, optimizer,
//! adversarial training and scenario sampling.

pub mod adam;
pub mod loss;
pub mod network;
mod train;

use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{denormalize, DataError, FactorDecl, Scaling};
use crate::rng::{self, Stream};
use crate::scenario::ScenarioSet;

pub use adam::{adam_step, Adam, AdamConstants};
pub use loss::{
    bce_loss_and_grads, discriminator_loss_and_grads, discriminator_loss_and_grads_separate,
    discriminator_pass, generator_loss_and_grads, BceOutput, DiscriminatorBatching, GeneratorLoss,
};
pub use network::{leaky_relu, Activation, LayerSpec, Mode, Network};
pub use train::{train_gan, Checkpoint};

/// Version tag written into persisted models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch of {0} rows is too small for batch statistics")]
    BatchTooSmall(usize),
    #[error("parameter and gradient shapes disagree")]
    ShapeMismatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("{rows} training rows are fewer than the batch size {batch}")]
    DataTooSmall { rows: usize, batch: usize },
    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged {
        iteration: usize,
        last_good: Box<GanModel>,
    },
    #[error("model has not been trained")]
    Untrained,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("model file {path}: {message}")]
    Persist { path: String, message: String },
}

/// Which network takes `k_ratio` optimizer steps per step of the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingRatio {
    DiscriminatorMoreOften,
    GeneratorMoreOften,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Dense layers in the generator, output layer included.
    pub n_layers_g: usize,
    /// Dense layers in the discriminator, output layer included.
    pub n_layers_d: usize,
    pub neurons_g: usize,
    pub neurons_d: usize,
    pub k_ratio: usize,
    pub k_direction: TrainingRatio,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub latent_std: f64,
    pub init_std: f64,
    pub leaky_alpha: f64,
    pub adam: AdamConstants,
    /// Outer iterations; each runs one step of one network and `k_ratio`
    /// steps of the other.
    pub iterations: usize,
    pub checkpoint_every: usize,
    /// Rows generated per checkpoint evaluation; defaults to the training
    /// row count.
    pub eval_size: Option<usize>,
    pub generator_loss: GeneratorLoss,
    pub discriminator_batching: DiscriminatorBatching,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            n_layers_g: 4,
            n_layers_d: 4,
            neurons_g: 200,
            neurons_d: 400,
            k_ratio: 10,
            k_direction: TrainingRatio::GeneratorMoreOften,
            batch_size: 200,
            latent_dim: 200,
            latent_std: 0.02,
            init_std: 0.02,
            leaky_alpha: 0.2,
            adam: AdamConstants::default(),
            iterations: 2500,
            checkpoint_every: 50,
            eval_size: None,
            generator_loss: GeneratorLoss::Saturating,
            discriminator_batching: DiscriminatorBatching::Separate,
            seed: 2019_12_31,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let counts = [
            ("n_layers_g", self.n_layers_g),
            ("n_layers_d", self.n_layers_d),
            ("neurons_g", self.neurons_g),
            ("neurons_d", self.neurons_d),
            ("k_ratio", self.k_ratio),
            ("batch_size", self.batch_size),
            ("latent_dim", self.latent_dim),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GanError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.eval_size == Some(0) {
            return Err(GanError::InvalidConfig("eval_size must be positive".into()));
        }
        if !(self.latent_std >= 0.0 && self.latent_std.is_finite()) {
            return Err(GanError::InvalidConfig("latent_std must be >= 0".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(GanError::InvalidConfig("init_std must be > 0".into()));
        }
        if !self.leaky_alpha.is_finite() {
            return Err(GanError::InvalidConfig("leaky_alpha must be finite".into()));
        }
        self.adam.validate()
    }

    pub fn generator_specs(&self, n_x: usize) -> Vec<LayerSpec> {
        stack(
            self.latent_dim,
            self.neurons_g,
            n_x,
            self.n_layers_g,
            self.leaky_alpha,
            Activation::Linear,
        )
    }

    pub fn discriminator_specs(&self, n_x: usize) -> Vec<LayerSpec> {
        stack(
            n_x,
            self.neurons_d,
            1,
            self.n_layers_d,
            self.leaky_alpha,
            Activation::Sigmoid,
        )
    }

    /// Trainable parameter count of both networks for `n_x` factors.
    pub fn n_params(&self, n_x: usize) -> usize {
        let count = |specs: Vec<LayerSpec>| -> usize {
            specs
                .iter()
                .map(|s| s.in_dim * s.out_dim + s.out_dim + if s.batch_norm { 2 * s.out_dim } else { 0 })
                .sum()
        };
        count(self.generator_specs(n_x)) + count(self.discriminator_specs(n_x))
    }
}

/// `n_layers - 1` hidden layers (batch norm + LeakyReLU) and one output layer.
fn stack(
    input: usize,
    width: usize,
    output: usize,
    n_layers: usize,
    alpha: f64,
    output_activation: Activation,
) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(n_layers);
    let mut in_dim = input;
    for _ in 1..n_layers {
        specs.push(LayerSpec {
            in_dim,
            out_dim: width,
            activation: Activation::LeakyRelu { alpha },
            batch_norm: true,
        });
        in_dim = width;
    }
    specs.push(LayerSpec {
        in_dim,
        out_dim: output,
        activation: output_activation,
        batch_norm: false,
    });
    specs
}

/// `n x latent_dim` matrix of i.i.d. `N(0, latent_std^2)` draws.
pub fn sample_latent<R: Rng + ?Sized>(n: usize, cfg: &GanConfig, rng: &mut R) -> Array2<f64> {
    let std = cfg.latent_std;
    Array2::from_shape_simple_fn((n, cfg.latent_dim), || std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub format_version: u32,
    pub config: GanConfig,
    pub factors: Vec<FactorDecl>,
    /// Scaling of the training data, used to de-normalize generated rows.
    pub scaling: Option<Scaling>,
    pub generator: Network,
    pub discriminator: Network,
    pub history: Vec<Checkpoint>,
    pub iterations_completed: usize,
}

/// Rows generated per inference call; keeps peak memory bounded.
const GENERATION_CHUNK: usize = 4096;

impl GanModel {
    /// Freshly initialized, untrained networks for `factors`.
    pub fn initialize(
        config: GanConfig,
        factors: Vec<FactorDecl>,
        scaling: Option<Scaling>,
    ) -> Result<Self, GanError> {
        config.validate()?;
        let n_x = factors.len();
        if n_x == 0 {
            return Err(GanError::InvalidConfig("no factors".into()));
        }
        let mut g_rng = rng::stream(config.seed, Stream::GeneratorInit);
        let mut d_rng = rng::stream(config.seed, Stream::DiscriminatorInit);
        let generator = Network::new(&config.generator_specs(n_x), config.init_std, &mut g_rng)?;
        let discriminator =
            Network::new(&config.discriminator_specs(n_x), config.init_std, &mut d_rng)?;
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            config,
            factors,
            scaling,
            generator,
            discriminator,
            history: Vec::new(),
            iterations_completed: 0,
        })
    }

    pub fn n_x(&self) -> usize {
        self.generator.out_dim()
    }

    pub fn factor_ids(&self) -> Vec<String> {
        self.factors.iter().map(|f| f.id.clone()).collect()
    }

    /// Generator output in normalized units, inference mode.
    pub fn sample_normalized<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>, GanError> {
        let mut out = Array2::zeros((n, self.n_x()));
        let mut start = 0;
        while start < n {
            let rows = GENERATION_CHUNK.min(n - start);
            let z = sample_latent(rows, &self.config, rng);
            let x = self.generator.forward(&z, Mode::Inference)?;
            out.slice_mut(s![start..start + rows, ..]).assign(&x);
            start += rows;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GanError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| GanError::Persist {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| GanError::Persist {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GanError> {
        let path = path.as_ref();
        let persist = |message: String| GanError::Persist {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| persist(e.to_string()))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| persist(e.to_string()))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(persist(format!(
                "unsupported format version {}",
                model.format_version
            )));
        }
        let n_x = model.factors.len();
        if model.generator.specs() != model.config.generator_specs(n_x)
            || model.discriminator.specs() != model.config.discriminator_specs(n_x)
        {
            return Err(persist("layer shapes disagree with config".into()));
        }
        Ok(model)
    }
}

/// Draws `n` scenarios from a trained model and maps them to natural units.
pub fn generate_scenarios(
    model: &GanModel,
    n: usize,
    scaling: &Scaling,
    seed: u64,
) -> Result<ScenarioSet, GanError> {
    if model.iterations_completed == 0 {
        return Err(GanError::Untrained);
    }
    if n == 0 {
        return Err(GanError::EmptyBatch);
    }
    if scaling.len() != model.n_x() {
        return Err(GanError::DimensionMismatch {
            expected: model.n_x(),
            got: scaling.len(),
        });
    }
    let mut rng = rng::stream(seed, Stream::Generation);
    let normalized = model.sample_normalized(n, &mut rng)?;
    let values = denormalize(&normalized, scaling)?;
    Ok(ScenarioSet::new(model.factor_ids(), values).expect("widths agree"))
}
