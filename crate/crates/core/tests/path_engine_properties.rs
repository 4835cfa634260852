use delayed_bsde::path_engine::{
    conditional_expectation, empirical_sp_norm, BasisSpec, PathArray, PathEnsemble, TimeGrid,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn brownian_values(ens: &PathEnsemble) -> Vec<f64> {
    let n = ens.grid().steps();
    let mut out = Vec::with_capacity(ens.paths() * (n + 1));
    for m in 0..ens.paths() {
        for j in 0..=n {
            out.push(ens.brownian_at(m, j)[0]);
        }
    }
    out
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn terminal_value_moments() {
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let m = 100_000;
    let ens = PathEnsemble::simulate(&grid, m, 1, 17).unwrap();
    let wt: Vec<f64> = (0..m).map(|i| ens.brownian_at(i, 50)[0]).collect();
    let (mean, var) = mean_var(&wt);
    assert!(mean.abs() < 4.0 * (1.0 / m as f64).sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn increments_have_step_variance() {
    let grid = TimeGrid::new(2.0, 40).unwrap();
    let m = 20_000;
    let ens = PathEnsemble::simulate(&grid, m, 2, 5).unwrap();
    let dt = grid.dt();
    for j in [0, 17, 39] {
        for c in 0..2 {
            let dw: Vec<f64> = (0..m).map(|i| ens.increment(i, j)[c]).collect();
            let (mean, var) = mean_var(&dw);
            assert!(mean.abs() < 4.0 * (dt / m as f64).sqrt());
            assert!((var / dt - 1.0).abs() < 0.05, "step {j} component {c}: {var}");
        }
    }
}

#[test]
fn regression_recovers_the_martingale_slope() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let m = 100_000;
    let ens = PathEnsemble::simulate(&grid, m, 1, 9).unwrap();
    let j = 6;
    let targets: Vec<f64> = (0..m).map(|i| ens.brownian_at(i, j + 1)[0]).collect();
    let fit = conditional_expectation(&ens, &targets, 1, j, &BasisSpec::polynomial(1)).unwrap();
    // plain least squares of the fitted values on (1, W_{t_j})
    let x: Vec<f64> = (0..m).map(|i| ens.brownian_at(i, j)[0]).collect();
    let (mx, vx) = mean_var(&x);
    let my = fit.fitted.iter().sum::<f64>() / m as f64;
    let cov = x
        .iter()
        .zip(&fit.fitted)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (m as f64 - 1.0);
    let slope = cov / vx;
    assert!((slope - 1.0).abs() < 0.01, "slope {slope}");
    let rms = (x.iter().zip(&fit.fitted).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m as f64).sqrt();
    assert!(rms < 0.01, "rms {rms}");
}

#[test]
fn squared_terminal_conditional_expectation() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let m = 50_000;
    let ens = PathEnsemble::simulate(&grid, m, 1, 4).unwrap();
    let targets: Vec<f64> = (0..m).map(|i| ens.brownian_at(i, 10)[0].powi(2)).collect();
    for j in [2, 5, 8] {
        let fit = conditional_expectation(&ens, &targets, 1, j, &BasisSpec::polynomial(2)).unwrap();
        let t = grid.time(j);
        let rms = ((0..m)
            .map(|i| {
                let w = ens.brownian_at(i, j)[0];
                (fit.fitted[i] - (w * w + 1.0 - t)).powi(2)
            })
            .sum::<f64>()
            / m as f64)
            .sqrt();
        assert!(rms < 0.03, "step {j}: rms {rms}");
    }
}

#[test]
fn projection_is_idempotent() {
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let m = 5_000;
    let ens = PathEnsemble::simulate(&grid, m, 1, 12).unwrap();
    let targets: Vec<f64> = (0..m).map(|i| ens.brownian_at(i, 8)[0].sin()).collect();
    let basis = BasisSpec::polynomial(3);
    let once = conditional_expectation(&ens, &targets, 1, 4, &basis).unwrap();
    let twice = conditional_expectation(&ens, &once.fitted, 1, 4, &basis).unwrap();
    let diff = once.fitted.iter().zip(&twice.fitted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "max difference {diff}");
}

#[test]
fn tower_property_on_polynomial_target() {
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let m = 50_000;
    let ens = PathEnsemble::simulate(&grid, m, 1, 31).unwrap();
    let basis = BasisSpec::polynomial(3);
    // E[W_T³ | F_t] = W_t³ + 3(T−t)W_t lies in the cubic span
    let targets: Vec<f64> = (0..m).map(|i| ens.brownian_at(i, 10)[0].powi(3)).collect();
    let inner = conditional_expectation(&ens, &targets, 1, 7, &basis).unwrap();
    let nested = conditional_expectation(&ens, &inner.fitted, 1, 3, &basis).unwrap();
    let direct = conditional_expectation(&ens, &targets, 1, 3, &basis).unwrap();
    let t = grid.time(3);
    let mut gap = 0.0;
    let mut err = 0.0;
    for i in 0..m {
        let w = ens.brownian_at(i, 3)[0];
        let exact = w.powi(3) + 3.0 * (1.0 - t) * w;
        gap += (nested.fitted[i] - direct.fitted[i]).powi(2);
        err += (direct.fitted[i] - exact).powi(2);
    }
    let (gap, err) = ((gap / m as f64).sqrt(), (err / m as f64).sqrt());
    assert!(gap < 0.1, "nested vs direct rms {gap}");
    assert!(err < 0.1, "direct vs exact rms {err}");
}

/// `E sup_{t≤1} |W_t|²` on a dense grid with an independent generator.
fn dense_sup_oracle(paths: usize, steps: usize) -> f64 {
    let sd = (1.0 / steps as f64).sqrt();
    let total: f64 = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + i as u64);
            let mut w = 0.0_f64;
            let mut sup = 0.0_f64;
            let mut k = 0;
            while k < steps {
                // Box-Muller pair
                let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
                let u2 = ((rng.next_u64() >> 11) as f64) / (1u64 << 53) as f64;
                let r = (-2.0 * u1.ln()).sqrt();
                let ang = std::f64::consts::TAU * u2;
                for z in [r * ang.cos(), r * ang.sin()] {
                    if k < steps {
                        w += sd * z;
                        sup = sup.max(w * w);
                        k += 1;
                    }
                }
            }
            sup
        })
        .sum();
    total / paths as f64
}

#[test]
fn sup_norm_of_brownian_motion_matches_dense_oracle() {
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let m = 50_000;
    let ens = PathEnsemble::simulate(&grid, m, 1, 8).unwrap();
    let w = brownian_values(&ens);
    let est = empirical_sp_norm(PathArray::new(&w, m, 1), 2.0);
    let oracle = dense_sup_oracle(100_000, 2000).sqrt();
    assert!((est / oracle - 1.0).abs() < 0.10, "estimate {est} oracle {oracle}");
}
