#![allow(dead_code)]

use esg_core::data::{normalize, FactorDecl, ReturnKind, ReturnMatrix};
use esg_core::gan::{
    discriminator_pass, generator_loss_and_grads, Activation, DiscriminatorBatching,
    GeneratorLoss, LayerSpec, Network,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// 500 draws of a 2-D Gaussian with correlation 0.8, normalized.
pub fn toy_gaussian(n: usize, seed: u64) -> ReturnMatrix {
    let mut r = rng(seed);
    let mut x = Array2::zeros((n, 2));
    for mut row in x.rows_mut() {
        let a: f64 = r.sample(StandardNormal);
        let b: f64 = r.sample(StandardNormal);
        row[0] = 0.01 + 0.02 * a;
        row[1] = 0.3 + 0.5 * (0.8 * a + 0.6 * b);
    }
    wrap(x)
}

/// Equal-weight mixture of two 2-D Gaussians centred at (-2, -2) and (2, 2).
pub fn toy_mixture(n: usize, seed: u64) -> ReturnMatrix {
    let mut r = rng(seed);
    let mut x = Array2::zeros((n, 2));
    for mut row in x.rows_mut() {
        let c = if r.random_bool(0.5) { 2.0 } else { -2.0 };
        row[0] = c + 0.5 * r.sample::<f64, _>(StandardNormal);
        row[1] = c + 0.5 * r.sample::<f64, _>(StandardNormal);
    }
    wrap(x)
}

fn wrap(x: Array2<f64>) -> ReturnMatrix {
    let n = x.nrows();
    let rm = ReturnMatrix {
        factors: vec![
            FactorDecl::new("a", ReturnKind::Absolute),
            FactorDecl::new("b", ReturnKind::Relative),
        ],
        dates: (0..n).map(|i| format!("{i}")).collect(),
        returns: x,
        window: 1,
        scaling: None,
    };
    normalize(&rm).unwrap()
}

/// Relative error, floored so that exactly-zero gradients (a bias feeding
/// batch norm) compare on roundoff rather than on 0/0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn flatten(slices: Vec<&[f64]>) -> Vec<f64> {
    slices.into_iter().flatten().copied().collect()
}

/// Central-difference check of `analytic` (flattened in parameter order)
/// against `loss`. Returns the largest relative error.
pub fn fd_check(net: &Network, analytic: &[f64], loss: impl Fn(&Network) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    let mut k = 0;
    let n_slices = probe.param_slices_mut().len();
    for s in 0..n_slices {
        let len = probe.param_slices_mut()[s].len();
        for i in 0..len {
            let orig = probe.param_slices_mut()[s][i];
            let h = 1e-6 * orig.abs().max(1.0);
            probe.param_slices_mut()[s][i] = orig + h;
            let up = loss(&probe);
            probe.param_slices_mut()[s][i] = orig - h;
            let down = loss(&probe);
            probe.param_slices_mut()[s][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            worst = worst.max(rel_err(a, numeric));
            k += 1;
        }
    }
    assert_eq!(k, analytic.len());
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    LeakyRelu,
    Sigmoid,
    LinearBatchNorm,
    LeakyReluBatchNorm,
}

pub const LAYER_KINDS: [LayerKind; 5] = [
    LayerKind::Linear,
    LayerKind::LeakyRelu,
    LayerKind::Sigmoid,
    LayerKind::LinearBatchNorm,
    LayerKind::LeakyReluBatchNorm,
];

fn spec(kind: LayerKind, in_dim: usize, out_dim: usize) -> LayerSpec {
    let (activation, batch_norm) = match kind {
        LayerKind::Linear => (Activation::Linear, false),
        LayerKind::LeakyRelu => (Activation::LeakyRelu { alpha: 0.2 }, false),
        LayerKind::Sigmoid => (Activation::Sigmoid, false),
        LayerKind::LinearBatchNorm => (Activation::Linear, true),
        LayerKind::LeakyReluBatchNorm => (Activation::LeakyRelu { alpha: 0.2 }, true),
    };
    LayerSpec {
        in_dim,
        out_dim,
        activation,
        batch_norm,
    }
}

/// Hidden layer of `kind` followed by a linear read-out, checked on the
/// scalar `sum(c * f(x))` for random `x` and `c`. Batch norm is never
/// allowed on an output layer, hence the read-out.
pub fn check_layer(kind: LayerKind, seed: u64) -> f64 {
    let mut r = rng(seed);
    let in_dim = r.random_range(1..5);
    let width = r.random_range(1..6);
    let out_dim = r.random_range(1..4);
    let batch = r.random_range(3..9);
    let specs = [spec(kind, in_dim, width), spec(LayerKind::Linear, width, out_dim)];
    let net = Network::new(&specs, 0.7, &mut r).unwrap();
    let x = normal_matrix(batch, in_dim, &mut r);
    let c = normal_matrix(batch, out_dim, &mut r);
    let (_, trace) = net.forward_train(&x).unwrap();
    let (grads, grad_x) = net.backward(&trace, &c);
    let loss = |n: &Network| (&n.forward_train(&x).unwrap().0 * &c).sum();
    let mut worst = fd_check(&net, &flatten(grads.slices()), loss);

    // input gradient
    for i in 0..batch {
        for j in 0..in_dim {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let f = |x: &Array2<f64>| (&net.forward_train(x).unwrap().0 * &c).sum();
            let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = grad_x[[i, j]];
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

fn three_layer(in_dim: usize, width: usize, out_dim: usize, last: LayerKind, r: &mut ChaCha8Rng) -> Network {
    let specs = [
        spec(LayerKind::LeakyReluBatchNorm, in_dim, width),
        spec(LayerKind::LeakyReluBatchNorm, width, width),
        spec(last, width, out_dim),
    ];
    Network::new(&specs, 0.5, r).unwrap()
}

/// Full adversarial losses on 3-layer generator and discriminator nets.
/// Returns the worst relative error over both players.
pub fn check_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n_x = r.random_range(1..4);
    let latent_dim = r.random_range(1..5);
    let width = r.random_range(2..6);
    let batch = r.random_range(3..7);
    let gen = three_layer(latent_dim, width, n_x, LayerKind::Linear, &mut r);
    let disc = three_layer(n_x, width, 1, LayerKind::Sigmoid, &mut r);
    let real = normal_matrix(batch, n_x, &mut r);
    let latent = normal_matrix(batch, latent_dim, &mut r);
    let fake = gen.forward_train(&latent).unwrap().0;
    let batching = if seed % 2 == 0 {
        DiscriminatorBatching::Joint
    } else {
        DiscriminatorBatching::Separate
    };
    let variant = if seed % 3 == 0 {
        GeneratorLoss::NonSaturating
    } else {
        GeneratorLoss::Saturating
    };

    let d = discriminator_pass(&disc, &real, &fake, batching).unwrap();
    let d_err = fd_check(&disc, &flatten(d.grads.slices()), |n| {
        -discriminator_pass(n, &real, &fake, batching).unwrap().objective
    });
    let g = generator_loss_and_grads(&gen, &disc, &latent, variant).unwrap();
    let g_err = fd_check(&gen, &flatten(g.grads.slices()), |n| {
        generator_loss_and_grads(n, &disc, &latent, variant).unwrap().loss
    });
    d_err.max(g_err)
}

/// 2-layer generator and discriminator, width 64, default optimizer constants.
pub fn toy_config(iterations: usize, seed: u64) -> esg_core::gan::GanConfig {
    esg_core::gan::GanConfig {
        n_layers_g: 2,
        n_layers_d: 2,
        neurons_g: 64,
        neurons_d: 64,
        latent_dim: 16,
        batch_size: 100,
        iterations,
        checkpoint_every: 50,
        seed,
        ..Default::default()
    }
}

const TOY_UNIVERSE: &str = r#"
[[instrument]]
id = "GOV_5Y"
kind = "zero_coupon_bond"
maturity = 5.0
rate_factor = "ir5"
spread_factor = "spread"
base_rate = 0.002
base_spread = 0.004
rating = "AA"
issuer_country = "DE"
base_market_value = 100.0

[[instrument]]
id = "CORP_7Y"
kind = "zero_coupon_bond"
maturity = 7.0
rate_factor = "ir5"
spread_factor = "spread"
base_rate = 0.004
base_spread = 0.009
rating = "A"
base_market_value = 100.0

[[instrument]]
id = "EQ"
kind = "equity"
factor = "stocks"
base_market_value = 100.0

[[instrument]]
id = "PROP"
kind = "property"
factor = "houses"
base_market_value = 100.0

[[instrument]]
id = "L_LONG"
kind = "liability_leg"
maturity = 12.0
base_market_value = 100.0

[[instrument]]
id = "L_SHORT"
kind = "liability_leg"
maturity = 4.5
base_market_value = 100.0

[[curve_shift]]
maturity = 5.0
factor = "ir5"
"#;

const TOY_PORTFOLIOS: &str = r#"
[[portfolio]]
id = "BONDS"
holding = [
  { instrument = "GOV_5Y", weight = 0.6 },
  { instrument = "CORP_7Y", weight = 0.4 },
]

[[portfolio]]
id = "MIXED"
holding = [
  { instrument = "GOV_5Y", weight = 0.4 },
  { instrument = "EQ", weight = 0.4 },
  { instrument = "PROP", weight = 0.2 },
]

[[portfolio]]
id = "MIXED+L"
holding = [
  { instrument = "GOV_5Y", weight = 0.4 },
  { instrument = "EQ", weight = 0.4 },
  { instrument = "PROP", weight = 0.2 },
  { instrument = "L_LONG", weight = 0.5, side = "liability" },
  { instrument = "L_SHORT", weight = 0.3, side = "liability" },
]
"#;

const TOY_MIGRATION: &str = "rating,AA,A,BBB,default
AA,0.90,0.08,0.015,0.005
A,0.02,0.90,0.07,0.01
BBB,0.00,0.05,0.90,0.05
";

/// Writes a 4-factor, 6-instrument project into `dir` and returns the path
/// of its run configuration.
pub fn write_toy_project(dir: &std::path::Path, stability: bool) -> std::path::PathBuf {
    use esg_core::synth::{write_synthetic_dataset, Correlation, SyntheticFactor, SyntheticSpec};
    let factor = |id: &str, kind, start, drift, vol| SyntheticFactor {
        id: id.into(),
        kind,
        start,
        drift,
        vol,
    };
    let spec = SyntheticSpec {
        factors: vec![
            factor("ir5", ReturnKind::Absolute, 0.01, 0.0, 0.0005),
            factor("spread", ReturnKind::Absolute, 0.006, 0.0, 0.0002),
            factor("stocks", ReturnKind::Relative, 100.0, 0.0002, 0.012),
            factor("houses", ReturnKind::Relative, 100.0, 0.0001, 0.005),
        ],
        days: 1500,
        start_date: "2015-01-01".into(),
        correlation: Correlation::Equi(0.3),
        seed: 77,
    };
    write_synthetic_dataset(&spec, dir).unwrap();
    std::fs::write(dir.join("universe.toml"), TOY_UNIVERSE).unwrap();
    std::fs::write(dir.join("portfolios.toml"), TOY_PORTFOLIOS).unwrap();
    std::fs::write(dir.join("migration.csv"), TOY_MIGRATION).unwrap();
    let curve = toml::to_string(&esg_core::valuation::YieldCurveSpec::eur_2019()).unwrap();
    std::fs::write(dir.join("curve.toml"), curve).unwrap();
    let config = format!(
        r#"seed = 7
n_scenarios = 5000

[paths]
data = "data.csv"
schema = "schema.toml"
universe = "universe.toml"
portfolios = "portfolios.toml"
migration = "migration.csv"
curve = "curve.toml"
output_dir = "out"

[stages]
stability = {stability}

[gan]
n_layers_g = 2
n_layers_d = 2
neurons_g = 32
neurons_d = 32
latent_dim = 8
batch_size = 100
iterations = 200
checkpoint_every = 50

[evaluation]
one_sided = ["spread"]

[stability]
n_trainings = 2
n_generations = 2
n_scenarios = 1000
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}
