//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use esg_core::gan::train_gan;
use esg_core::pipeline::{run_pipeline, RunConfig};
use esg_core::portfolio::{
    cqv, empirical_quantile, jqe, month_end_dates, stability_study, worst_case_backtest,
    StabilityOptions,
};
use esg_core::rng::derive_seed;
use esg_core::validation::{
    architecture_search, history_target_function, target_function, wasserstein_1d, SearchGrid,
};
use esg_core::valuation::curve::fitted_zero_rate;
use esg_core::valuation::{
    discount_liability, extrapolate_curve, scale_market_value, zero_coupon_value, YieldCurve,
    YieldCurveSpec,
};
use rand::Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn valuation_exactness() -> Outcome {
    let mut r = common::rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (r0, dr, s0, ds) = (
            r.random_range(-0.01..0.05),
            r.random_range(-0.02..0.03),
            r.random_range(0.0..0.04),
            r.random_range(-0.01..0.03),
        );
        let y: f64 = r0 + dr + s0 + ds;
        // integer maturities by repeated division, fractional ones through logs
        let n = r.random_range(1..31);
        let mut oracle = 1.0;
        for _ in 0..n {
            oracle /= 1.0 + y;
        }
        worst = worst.max(rel(zero_coupon_value(r0, dr, s0, ds, n as f64).unwrap(), oracle));
        let tau: f64 = r.random_range(0.1..30.0);
        let oracle = (-tau * y.ln_1p()).exp();
        worst = worst.max(rel(zero_coupon_value(r0, dr, s0, ds, tau).unwrap(), oracle));

        let (mv, shift) = (r.random_range(1.0..1e6), r.random_range(-0.9..2.0));
        worst = worst.max(rel(scale_market_value(mv, shift), mv + mv * shift));

        let rate: f64 = r.random_range(-0.005..0.05);
        let (notional, t) = (r.random_range(1.0..1e6), r.random_range(0.0..100.0));
        let pv = discount_liability(notional, t, &YieldCurve::flat(rate)).unwrap();
        worst = worst.max(rel(pv, notional * (-t * rate.ln_1p()).exp()));
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e} over 1000 draws"))
}

fn null_scenario() -> Result<(), String> {
    use esg_core::valuation::{MigrationMatrix, Universe, Valuator};
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    common::write_toy_project(dir.path(), false);
    let u = Universe::load(dir.path().join("universe.toml")).map_err(|e| e.to_string())?;
    let mm_text = std::fs::read_to_string(dir.path().join("migration.csv")).unwrap();
    let mm = MigrationMatrix::from_csv(&mm_text, 0.45).map_err(|e| e.to_string())?;
    let ids: Vec<String> = ["ir5", "spread", "stocks", "houses"].map(String::from).to_vec();
    let v = Valuator::new(u.clone(), &ids, Some(mm.clone()), Some(YieldCurveSpec::eur_2019()))
        .map_err(|e| e.to_string())?;
    let values = v.value_row(ndarray::Array1::zeros(4).view()).map_err(|e| e.to_string())?;
    for (inst, value) in u.instruments.iter().zip(values) {
        let multiplier = match &inst.rating {
            Some(rt) => 1.0 - mm.default_probability(rt).unwrap() * 0.55,
            None => 1.0,
        };
        let expected = inst.base_market_value * multiplier;
        ensure(rel(value, expected) < 1e-12, || format!("null scenario {}: {value} vs {expected}", inst.id))?;
    }
    Ok(())
}

fn valuation() -> Outcome {
    let detail = valuation_exactness()?;
    null_scenario()?;
    Ok(format!("{detail}; null scenario reproduces base values"))
}

fn smith_wilson() -> Outcome {
    let spec = YieldCurveSpec::eur_2019();
    let curve = extrapolate_curve(&spec).map_err(|e| e.to_string())?;
    let mut fit: f64 = 0.0;
    for &(u, rate) in &spec.liquid_rates {
        let z = fitted_zero_rate(&spec, &curve, u).map_err(|e| e.to_string())?;
        fit = fit.max((z - (rate - spec.cra)).abs());
    }
    let fwd = curve.forward_rate(60).unwrap();
    ensure(fit < 1e-8, || format!("fit error {fit:e}"))?;
    ensure((fwd - 0.039).abs() < 1e-4, || format!("forward at 60y {fwd}"))?;
    Ok(format!("fit error {fit:.1e}, 60y forward {:.4}% (alpha {:.4})", fwd * 100.0, curve.alpha))
}

fn quantile_oracle() -> Outcome {
    // levels in thousandths so the rank ceil(q * n) is exact integer arithmetic
    let grid: [usize; 10] = [1, 5, 10, 100, 250, 500, 750, 900, 990, 995];
    (1..=10_000usize).into_par_iter().try_for_each(|n| {
        let mut r = common::rng(7 + n as u64);
        let values: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut sorted = values.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        for &m in &grid {
            let q = m as f64 / 1000.0;
            let k = ((m * n).div_ceil(1000)).max(1);
            let got = empirical_quantile(&values, q).map_err(|e| e.to_string())?;
            ensure(got == sorted[k - 1], || format!("n={n}, q={q}: {got} vs {}", sorted[k - 1]))?;
        }
        Ok::<(), String>(())
    })?;
    let ramp: Vec<f64> = (1..=1000).map(f64::from).collect();
    let q = empirical_quantile(&ramp, 0.005).unwrap();
    ensure(q == 5.0, || format!("1..1000 at 0.005 gave {q}"))?;
    Ok("N = 1..10^4 over 10 levels; 1..1000 at 0.005 -> 5".into())
}

fn wasserstein_suite() -> Outcome {
    let mut r = common::rng(11);
    for _ in 0..500 {
        let n = r.random_range(1..200);
        let mut draw = || -> Vec<f64> { (0..n).map(|_| r.random_range(-5.0..5.0)).collect() };
        let (a, b, c) = (draw(), draw(), draw());
        let shift: f64 = r.random_range(-10.0..10.0);
        let w = |x: &[f64], y: &[f64]| wasserstein_1d(x, y, 1.0).unwrap();
        ensure(w(&a, &a) == 0.0, || "identity".into())?;
        let moved: Vec<f64> = a.iter().map(|v| v + shift).collect();
        ensure((w(&a, &moved) - shift.abs()).abs() < 1e-9, || "translation".into())?;
        ensure((w(&a, &b) - w(&b, &a)).abs() < 1e-12, || "symmetry".into())?;
        ensure(w(&a, &b) <= w(&a, &c) + w(&c, &b) + 1e-12, || "triangle inequality".into())?;
    }
    let exact = wasserstein_1d(&[0.0, 1.0], &[0.0, 3.0], 1.0).unwrap();
    ensure(exact == 1.0, || format!("{{0,1}} vs {{0,3}} gave {exact}"))?;
    Ok("500 random pairs; {0,1} vs {0,3} = 1.0".into())
}

fn jqe_calibration() -> Outcome {
    let mut r = common::rng(13);
    let n = 1_000_000;
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let indep = jqe(&x, &y, 0.8).unwrap();
    let como = jqe(&x, &x, 0.8).unwrap();
    let counter = jqe(&x, &neg, 0.8).unwrap();
    ensure((indep - 0.04).abs() <= 0.002, || format!("independent {indep}"))?;
    ensure((como - 0.20).abs() <= 0.001, || format!("comonotone {como}"))?;
    ensure(counter == 0.0, || format!("countermonotone {counter}"))?;
    Ok(format!("independent {indep:.4}, comonotone {como:.4}, countermonotone {counter}"))
}

fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let kind = common::LAYER_KINDS[i as usize % common::LAYER_KINDS.len()];
        worst = worst.max(common::check_layer(kind, 5000 + i));
    }
    for i in 0..50u64 {
        worst = worst.max(common::check_bce(9000 + i));
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    Ok(format!("100 configurations, worst relative error {worst:.1e}"))
}

fn toy_gan() -> Outcome {
    let data = common::toy_gaussian(500, 2024);
    let model = train_gan(&common::toy_config(2000, 31), &data, None).map_err(|e| e.to_string())?;
    let initial = model.history[0].max_wasserstein;
    let mut best_so_far = Vec::new();
    for k in 1..=model.history.len() {
        best_so_far.push(history_target_function(&model.history[..k]).unwrap());
    }
    ensure(best_so_far.windows(2).all(|w| w[1] <= w[0]), || "best-so-far increased".into())?;
    let best = *best_so_far.last().unwrap();
    let reduction = 1.0 - best / initial;
    ensure(reduction >= 0.5, || format!("max W1 {initial:.3} -> {best:.3} ({:.0}%)", reduction * 100.0))?;
    Ok(format!("max W1 {initial:.3} -> {best:.3} ({:.0}% reduction)", reduction * 100.0))
}

fn architecture() -> Outcome {
    let mut r = common::rng(17);
    for _ in 0..200 {
        let cps = r.random_range(1..30);
        let f = r.random_range(1..10);
        let history: Vec<Vec<f64>> = (0..cps).map(|_| (0..f).map(|_| r.random::<f64>()).collect()).collect();
        let mut oracle = f64::INFINITY;
        for cp in &history {
            let mut m = f64::NEG_INFINITY;
            for v in cp {
                m = m.max(*v);
            }
            oracle = oracle.min(m);
        }
        ensure(target_function(&history).unwrap() == oracle, || "target function".into())?;
    }

    let data = common::toy_gaussian(500, 5);
    let grid = SearchGrid {
        base: common::toy_config(300, 0),
        n_layers_g: vec![2, 3],
        n_layers_d: vec![2],
        neurons_g: vec![16, 32],
        neurons_d: vec![32],
    }
    .expand();
    let ranked = architecture_search(&grid, &data, 99).map_err(|e| e.to_string())?;
    let mut exhaustive: Vec<(f64, usize, usize)> = grid
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let cfg = esg_core::gan::GanConfig { seed: derive_seed(99, &[i as u64]), ..cfg.clone() };
            let m = train_gan(&cfg, &data, None).unwrap();
            (history_target_function(&m.history).unwrap(), cfg.n_params(2), i)
        })
        .collect();
    exhaustive.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let got: Vec<(Option<f64>, usize)> = ranked.iter().map(|e| (e.tf, e.index)).collect();
    let want: Vec<(Option<f64>, usize)> = exhaustive.iter().map(|e| (Some(e.0), e.2)).collect();
    ensure(got == want, || format!("ranking {got:?} vs {want:?}"))?;
    Ok(format!("200 synthetic histories; 2x2 grid order {:?}", want.iter().map(|w| w.1).collect::<Vec<_>>()))
}

fn business_dates(start: &str, n: usize) -> Vec<String> {
    let start = chrono::NaiveDate::parse_from_str(start, "%Y-%m-%d").unwrap();
    esg_core::synth::business_days(start, n)
        .iter()
        .map(|d| d.format("%Y-%m-%d").to_string())
        .collect()
}

fn backtest() -> Outcome {
    let dates = business_dates("2015-12-01", 1300);
    let eval = month_end_dates(&dates, "2017-01-31", "2020-09-30").map_err(|e| e.to_string())?;
    ensure(eval.len() == 45, || format!("{} evaluation dates", eval.len()))?;
    let mut r = common::rng(19);
    for _ in 0..50 {
        let mut mv = vec![100.0f64];
        for _ in 1..dates.len() {
            let last = *mv.last().unwrap();
            mv.push(last * (1.0 + r.random_range(-0.02..0.021)));
        }
        let wc = worst_case_backtest(&mv, &eval, 258).map_err(|e| e.to_string())?;
        let brute = eval.iter().map(|&t| mv[t] / mv[t - 258] - 1.0).fold(f64::INFINITY, f64::min);
        ensure(wc.value == brute, || format!("{} vs brute force {brute}", wc.value))?;
    }
    // flat at 100 except one month-end sitting exactly 30% below its value a year earlier
    let hit = eval[20];
    let mut mv = vec![100.0; dates.len()];
    mv[hit] = 70.0;
    let wc = worst_case_backtest(&mv, &eval, 258).map_err(|e| e.to_string())?;
    ensure(wc.index == hit && (wc.value + 0.30).abs() < 1e-15, || format!("engineered year gave {wc:?}"))?;
    Ok(format!("50 series exact; engineered year {:.4} at {}", wc.value, dates[hit]))
}

fn stability() -> Outcome {
    let data = common::toy_gaussian(500, 23);
    let cfg = common::toy_config(200, 0);
    let same = StabilityOptions {
        n_trainings: 1,
        n_generations: 4,
        n_scenarios: 2000,
        base_seed: 5,
        reuse_generation_seed: true,
    };
    let study = stability_study(&cfg, &data, &same).map_err(|e| e.to_string())?;
    for row in &study.table {
        ensure(row.down == Some(0.0) && row.up == Some(0.0), || format!("identical runs: {row:?}"))?;
    }
    let distinct = StabilityOptions {
        n_trainings: 2,
        n_generations: 2,
        reuse_generation_seed: false,
        ..same
    };
    let study = stability_study(&cfg, &data, &distinct).map_err(|e| e.to_string())?;
    ensure(study.table.len() == 2 && study.runs.len() == 4, || "table shape".into())?;
    for row in &study.table {
        for v in [row.down, row.up] {
            let v = v.ok_or_else(|| format!("undefined CQV for {}", row.factor))?;
            ensure(v.is_finite() && v >= 0.0, || format!("CQV {v}"))?;
        }
    }
    let hand = cqv(&[0.5, 1.0, 2.0, 3.0, 4.0, 9.0, 1.5, 2.5]).unwrap();
    // sorted 0.5 1 1.5 2 2.5 3 4 9: Q1 = 1, Q3 = 3
    ensure(hand == 0.5, || format!("hand oracle {hand}"))?;
    ensure(cqv(&[2.0; 6]).unwrap() == 0.0, || "constant".into())?;
    let row = &study.table[0];
    Ok(format!("identical seeds 0; toy 2x2 CQV {:.3}/{:.3}; hand oracle 0.5", row.down.unwrap(), row.up.unwrap()))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(common::write_toy_project(dir.path(), false)).map_err(|e| e.to_string())?;
    let read = |s: &esg_core::pipeline::RunSummary| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = s
            .artifacts
            .iter()
            .map(|p| (p.display().to_string(), std::fs::read(p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let first = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let a = read(&first);
    let second = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let b = read(&second);
    ensure(a == b, || "artifacts differ between runs".into())?;
    ensure(a.iter().any(|(p, _)| p.ends_with("report.json")), || "no report.json".into())?;
    Ok(format!("{} artifacts byte-identical (4 factors, 6 instruments, 5000 scenarios)", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("valuation exactness", Duration::from_secs(1), valuation),
        ("smith-wilson", Duration::from_secs(1), smith_wilson),
        ("quantile oracle", Duration::from_secs(10), quantile_oracle),
        ("wasserstein suite", Duration::from_secs(10), wasserstein_suite),
        ("jqe calibration", Duration::from_secs(30), jqe_calibration),
        ("gradient checks", Duration::from_secs(60), gradient_checks),
        ("toy gan convergence", Duration::from_secs(300), toy_gan),
        ("architecture search", Duration::from_secs(900), architecture),
        ("backtest", Duration::from_secs(10), backtest),
        ("stability harness", Duration::from_secs(600), stability),
        ("end-to-end determinism", Duration::from_secs(600), end_to_end),
    ];
    let mut failed = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = outcome.and_then(|d| {
            if took <= limit {
                Ok(d)
            } else {
                Err(format!("{d}; took {took:.1?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{took:.2?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
