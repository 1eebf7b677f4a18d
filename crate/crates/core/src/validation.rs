//! Scenario-quality metrics: one-dimensional Wasserstein distances, the
//! architecture-search target function and nearest-neighbour novelty.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ReturnMatrix};
use crate::gan::{train_gan, Checkpoint, GanConfig, GanError, GanModel};
use crate::rng::{self, derive_seed, Stream};

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("empty sample")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("Wasserstein order must be >= 1, got {0}")]
    InvalidOrder(f64),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty checkpoint history")]
    EmptyHistory,
    #[error("empty search grid")]
    EmptyGrid,
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn sorted(sample: impl IntoIterator<Item = f64>) -> Result<Vec<f64>, ValidationError> {
    let mut v: Vec<f64> = sample.into_iter().collect();
    if v.is_empty() {
        return Err(ValidationError::EmptySample);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ValidationError::NonFinite);
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// p-Wasserstein distance between two empirical distributions: the L^p
/// distance of their quantile functions, integrated exactly over the merged
/// grid of jump points `i/n` and `j/m`.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<f64, ValidationError> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(ValidationError::InvalidOrder(p));
    }
    let a = sorted(a.iter().copied())?;
    let b = sorted(b.iter().copied())?;
    Ok(wasserstein_sorted(&a, &b, p))
}

fn wasserstein_sorted(a: &[f64], b: &[f64], p: f64) -> f64 {
    let (n, m) = (a.len() as u128, b.len() as u128);
    // positions on [0, 1] measured in units of 1 / (n * m)
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let end = next_a.min(next_b);
        let diff = (a[i] - b[j]).abs();
        let term = if p == 1.0 { diff } else { diff.powf(p) };
        total += (end - pos) as f64 * term;
        pos = end;
        if next_a == end {
            i += 1;
        }
        if next_b == end {
            j += 1;
        }
    }
    let mean = total / (n * m) as f64;
    if p == 1.0 {
        mean
    } else {
        mean.powf(1.0 / p)
    }
}

/// W1 between matching columns of `generated` and `empirical`.
pub fn per_factor_wasserstein(
    generated: &Array2<f64>,
    empirical: &Array2<f64>,
) -> Result<Vec<f64>, ValidationError> {
    if generated.ncols() != empirical.ncols() {
        return Err(ValidationError::DimensionMismatch {
            expected: empirical.ncols(),
            got: generated.ncols(),
        });
    }
    generated
        .columns()
        .into_iter()
        .zip(empirical.columns())
        .map(|(g, e)| column_w1(g, e))
        .collect()
}

fn column_w1(g: ArrayView1<f64>, e: ArrayView1<f64>) -> Result<f64, ValidationError> {
    let g = sorted(g.iter().copied())?;
    let e = sorted(e.iter().copied())?;
    Ok(wasserstein_sorted(&g, &e, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub factor_ids: Vec<String>,
    pub per_factor_wasserstein: Vec<f64>,
    pub checkpoint_index: usize,
    /// Target function over the model's recorded history and this evaluation.
    pub tf_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novelty_distances: Option<Vec<f64>>,
}

/// Generates `eval_size` rows (default: the training row count) in
/// normalized space and measures per-factor W1 against `data`.
pub fn evaluate_checkpoint(
    model: &GanModel,
    data: &ReturnMatrix,
    eval_size: Option<usize>,
    seed: u64,
) -> Result<ValidationReport, ValidationError> {
    let n = eval_size.unwrap_or(data.n_obs());
    let mut rng = rng::stream(seed, Stream::EvaluationLatents);
    let generated = model.sample_normalized(n, &mut rng)?;
    let per_factor = per_factor_wasserstein(&generated, &data.returns)?;
    let mut history: Vec<Vec<f64>> = model.history.iter().map(|c| c.wasserstein.clone()).collect();
    history.push(per_factor.clone());
    Ok(ValidationReport {
        factor_ids: data.factor_ids(),
        per_factor_wasserstein: per_factor,
        checkpoint_index: model.iterations_completed,
        tf_value: target_function(&history)?,
        novelty_distances: None,
    })
}

/// `min over checkpoints (max over factors W_i)`.
pub fn target_function<V: AsRef<[f64]>>(history: &[V]) -> Result<f64, ValidationError> {
    if history.is_empty() {
        return Err(ValidationError::EmptyHistory);
    }
    let mut best = f64::INFINITY;
    for cp in history {
        let cp = cp.as_ref();
        if cp.is_empty() {
            return Err(ValidationError::EmptySample);
        }
        let worst = cp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        best = best.min(worst);
    }
    Ok(best)
}

pub fn history_target_function(history: &[Checkpoint]) -> Result<f64, ValidationError> {
    let rows: Vec<&[f64]> = history.iter().map(|c| c.wasserstein.as_slice()).collect();
    target_function(&rows)
}

/// Writes `iteration,factor,distance` rows for external plotting.
pub fn write_history_plot_data<W: Write>(
    history: &[Checkpoint],
    factor_ids: &[String],
    out: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "factor", "distance"])?;
    for cp in history {
        for (id, d) in factor_ids.iter().zip(&cp.wasserstein) {
            w.write_record([cp.iteration.to_string(), id.clone(), format!("{d:e}")])?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })
}

/// Cartesian grid over layer counts and widths around a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchGrid {
    #[serde(default)]
    pub base: GanConfig,
    pub n_layers_g: Vec<usize>,
    pub n_layers_d: Vec<usize>,
    pub neurons_g: Vec<usize>,
    pub neurons_d: Vec<usize>,
}

impl SearchGrid {
    /// Configurations ordered generator-major: layers G, layers D, neurons G,
    /// neurons D, last index fastest.
    pub fn expand(&self) -> Vec<GanConfig> {
        let mut out = Vec::new();
        for &lg in &self.n_layers_g {
            for &ld in &self.n_layers_d {
                for &ng in &self.neurons_g {
                    for &nd in &self.neurons_d {
                        out.push(GanConfig {
                            n_layers_g: lg,
                            n_layers_d: ld,
                            neurons_g: ng,
                            neurons_d: nd,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    /// Position in the input grid.
    pub index: usize,
    pub config: GanConfig,
    pub n_params: usize,
    /// `None` when training failed.
    pub tf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Sorts by ascending `tf`, then fewer parameters, then grid order; failed
/// entries go last in grid order.
pub fn rank_entries(entries: &mut [SearchEntry]) {
    entries.sort_by(|x, y| match (x.tf, y.tf) {
        (Some(a), Some(b)) => a
            .total_cmp(&b)
            .then(x.n_params.cmp(&y.n_params))
            .then(x.index.cmp(&y.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => x.index.cmp(&y.index),
    });
}

/// Trains every configuration with seed `derive_seed(base_seed, [index])`
/// and ranks them by target function. Members may train concurrently; the
/// result does not depend on scheduling.
pub fn architecture_search(
    grid: &[GanConfig],
    data: &ReturnMatrix,
    base_seed: u64,
) -> Result<Vec<SearchEntry>, ValidationError> {
    if grid.is_empty() {
        return Err(ValidationError::EmptyGrid);
    }
    let n_x = data.n_factors();
    let mut entries: Vec<SearchEntry> = grid
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| {
            let config = GanConfig {
                seed: derive_seed(base_seed, &[index as u64]),
                ..cfg.clone()
            };
            let outcome = train_gan(&config, data, None)
                .map_err(ValidationError::from)
                .and_then(|m| history_target_function(&m.history));
            let (tf, error) = match outcome {
                Ok(tf) => (Some(tf), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SearchEntry {
                index,
                n_params: config.n_params(n_x),
                config,
                tf,
                error,
            }
        })
        .collect();
    rank_entries(&mut entries);
    Ok(entries)
}

pub fn write_search_table<W: Write>(entries: &[SearchEntry], out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rank",
        "index",
        "n_layers_g",
        "n_layers_d",
        "neurons_g",
        "neurons_d",
        "n_params",
        "seed",
        "tf",
        "error",
    ])?;
    for (rank, e) in entries.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            e.index.to_string(),
            e.config.n_layers_g.to_string(),
            e.config.n_layers_d.to_string(),
            e.config.neurons_g.to_string(),
            e.config.neurons_d.to_string(),
            e.n_params.to_string(),
            e.config.seed.to_string(),
            e.tf.map(|v| format!("{v:e}")).unwrap_or_default(),
            e.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })
}

/// Euclidean distance from each generated row to its nearest empirical row.
pub fn novelty_distances(
    generated: &Array2<f64>,
    empirical: &Array2<f64>,
) -> Result<Vec<f64>, ValidationError> {
    if generated.ncols() != empirical.ncols() {
        return Err(ValidationError::DimensionMismatch {
            expected: empirical.ncols(),
            got: generated.ncols(),
        });
    }
    if empirical.nrows() == 0 {
        return Err(ValidationError::EmptySample);
    }
    let emp = empirical.as_standard_layout();
    let gen = generated.as_standard_layout();
    let width = emp.ncols();
    let emp_flat = emp.as_slice().expect("standard layout");
    let gen_flat = gen.as_slice().expect("standard layout");
    Ok(gen_flat
        .par_chunks(width.max(1))
        .take(gen.nrows())
        .map(|g| {
            emp_flat
                .chunks(width.max(1))
                .take(emp.nrows())
                .map(|e| g.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0, 3.0], 1.0).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0], 1.0).unwrap(), 0.0);
        let a = [0.5, -1.0, 2.0];
        let b: Vec<f64> = a.iter().map(|x| x - 0.75).collect();
        assert!((wasserstein_1d(&a, &b, 1.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_unequal_sizes() {
        // quantile functions: a = 0 on (0, 1/2], 1 on (1/2, 1]; b = 0 on (0, 1/3], 2 on (1/3, 1]
        // |diff| = 0 on (0,1/3], 2 on (1/3,1/2], 1 on (1/2,1] -> 2/6 + 1/2
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 2.0, 2.0], 1.0).unwrap();
        assert!((w - (2.0 / 6.0 + 0.5)).abs() < 1e-15);
        // p = 2: sqrt(4/6 + 1/2)
        let w2 = wasserstein_1d(&[0.0, 1.0], &[0.0, 2.0, 2.0], 2.0).unwrap();
        assert!((w2 - (4.0f64 / 6.0 + 0.5).sqrt()).abs() < 1e-15);
        // a point mass against a sample: mean absolute deviation
        let w = wasserstein_1d(&[1.0], &[0.0, 1.0, 5.0], 1.0).unwrap();
        assert!((w - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_errors() {
        assert!(matches!(
            wasserstein_1d(&[], &[1.0], 1.0),
            Err(ValidationError::EmptySample)
        ));
        assert!(matches!(
            wasserstein_1d(&[1.0], &[1.0], 0.5),
            Err(ValidationError::InvalidOrder(_))
        ));
        assert!(matches!(
            wasserstein_1d(&[f64::NAN], &[1.0], 1.0),
            Err(ValidationError::NonFinite)
        ));
    }

    #[test]
    fn target_function_examples() {
        assert_eq!(target_function(&[vec![0.3, 0.1], vec![0.2, 0.25]]).unwrap(), 0.25);
        assert_eq!(target_function(&[vec![0.4, 0.2]]).unwrap(), 0.4);
        assert!(matches!(
            target_function::<Vec<f64>>(&[]),
            Err(ValidationError::EmptyHistory)
        ));
    }

    fn entry(index: usize, tf: Option<f64>, n_params: usize) -> SearchEntry {
        SearchEntry {
            index,
            config: GanConfig::default(),
            n_params,
            tf,
            error: tf.is_none().then(|| "diverged".to_string()),
        }
    }

    #[test]
    fn ranking_rules() {
        let mut e = vec![
            entry(0, None, 1),
            entry(1, Some(0.2), 50),
            entry(2, Some(0.1), 10),
            entry(3, Some(0.2), 40),
            entry(4, Some(0.2), 40),
        ];
        rank_entries(&mut e);
        let order: Vec<usize> = e.iter().map(|x| x.index).collect();
        assert_eq!(order, vec![2, 3, 4, 1, 0]);
    }

    /// Published target-function values for the 46-factor EUR data set; rows
    /// are generator settings, columns discriminator settings.
    const LAYER_GRID: [[f64; 4]; 4] = [
        [0.143, 0.252, 0.636, 0.799],
        [1.036, 0.118, 0.235, 0.435],
        [0.947, 0.172, 0.197, 0.281],
        [0.807, 0.188, 0.171, 0.178],
    ];
    const NEURON_GRID: [[f64; 3]; 3] = [
        [0.180, 0.117, 0.125],
        [0.185, 0.118, 0.108],
        [0.197, 0.116, 0.124],
    ];

    #[test]
    fn published_grids_rank_to_published_winners() {
        let layers = [2, 4, 6, 8];
        let grid = SearchGrid {
            base: GanConfig::default(),
            n_layers_g: layers.to_vec(),
            n_layers_d: layers.to_vec(),
            neurons_g: vec![200],
            neurons_d: vec![200],
        };
        let mut entries: Vec<SearchEntry> = grid
            .expand()
            .into_iter()
            .enumerate()
            .map(|(i, config)| SearchEntry {
                index: i,
                n_params: config.n_params(46),
                tf: Some(LAYER_GRID[i / 4][i % 4]),
                config,
                error: None,
            })
            .collect();
        rank_entries(&mut entries);
        assert_eq!((entries[0].config.n_layers_g, entries[0].config.n_layers_d), (4, 4));
        assert_eq!(entries[0].tf, Some(0.118));

        let widths = [100, 200, 400];
        let grid = SearchGrid {
            base: GanConfig::default(),
            n_layers_g: vec![4],
            n_layers_d: vec![4],
            neurons_g: widths.to_vec(),
            neurons_d: widths.to_vec(),
        };
        let mut entries: Vec<SearchEntry> = grid
            .expand()
            .into_iter()
            .enumerate()
            .map(|(i, config)| SearchEntry {
                index: i,
                n_params: config.n_params(46),
                tf: Some(NEURON_GRID[i / 3][i % 3]),
                config,
                error: None,
            })
            .collect();
        rank_entries(&mut entries);
        assert_eq!((entries[0].config.neurons_d, entries[0].config.neurons_g), (400, 200));
    }

    #[test]
    fn novelty_examples() {
        let emp = array![[0.0, 0.0]];
        assert_eq!(novelty_distances(&array![[3.0, 4.0]], &emp).unwrap(), vec![5.0]);
        let emp = array![[1.0, 2.0], [3.0, 4.0]];
        let d = novelty_distances(&array![[3.0, 4.0], [1.0, 2.5]], &emp).unwrap();
        assert_eq!(d, vec![0.0, 0.5]);
        assert!(novelty_distances(&array![[1.0]], &emp).is_err());
    }
}
