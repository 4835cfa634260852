//! Picard iteration and the bounded-truncation route on a discretised
//! delayed BSDE, with contraction diagnostics and a divergence probe.
//!
//! One iteration maps `(Y^{n-1}, Z^{n-1})` to `(Y^n, Z^n)` by the backward
//! sweep
//!
//! ```text
//! Y^n_N = ξ
//! Y^n_j = E[Y^n_{j+1} | F_j] + f(t_j, Y^{n-1}_{t_j+·}, Z^{n-1}_{t_j+·}) dt
//! Z^n_j = E[(Y^n_{j+1} - E[Y^n_{j+1} | F_j]) ΔW_j | F_j] / dt
//! ```
//!
//! The generator only ever sees the previous iterate, so each sweep is a
//! linear problem. Subtracting the conditional mean in the `Z` target does
//! not change its conditional expectation but removes most of its variance.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::bsde_model::{truncate_problem, BsdeProblem, Generator, TerminalCondition, ZeroGenerator};
use crate::constants::{l2_value, picard_contraction_constant};
use crate::delay_measure::{GridMeasure, Segment};
use crate::error::{Error, Result};
use crate::path_engine::{
    quadratic_power_samples, sup_power_samples, BasisSpec, Design, Estimate, PathArray, PathEnsemble,
    Projector, StepModel, TimeGrid,
};

/// Default stopping tolerance on `Δ_n`.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default iteration budget.
pub const DEFAULT_MAX_ITER: usize = 50;

/// Discrete solution `(Y, Z)` on one ensemble.
#[derive(Debug, Clone)]
pub struct SolutionProcess {
    grid: TimeGrid,
    paths: usize,
    k: usize,
    d: usize,
    /// `M × (N+1) × k`.
    y: Vec<f64>,
    /// `M × N × (k·d)`.
    z: Vec<f64>,
    /// Per path `ξ + Σ_j f_j dt` (`M × k`); averages to `Y(0)`.
    y0_samples: Vec<f64>,
    z_models: Vec<Option<StepModel>>,
    regularized_steps: Vec<usize>,
}

impl SolutionProcess {
    /// The identically zero pair.
    pub fn zeros(grid: TimeGrid, paths: usize, k: usize, d: usize) -> Self {
        let n = grid.steps();
        Self {
            grid,
            paths,
            k,
            d,
            y: vec![0.0; paths * (n + 1) * k],
            z: vec![0.0; paths * n * k * d],
            y0_samples: vec![0.0; paths * k],
            z_models: vec![None; n],
            regularized_steps: Vec::new(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn state_dim(&self) -> usize {
        self.k
    }

    pub fn noise_dim(&self) -> usize {
        self.d
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn y_at(&self, m: usize, j: usize) -> &[f64] {
        let i = (m * (self.grid.steps() + 1) + j) * self.k;
        &self.y[i..i + self.k]
    }

    pub fn z_at(&self, m: usize, j: usize) -> &[f64] {
        let w = self.k * self.d;
        let i = (m * self.grid.steps() + j) * w;
        &self.z[i..i + w]
    }

    pub fn y_path(&self, m: usize) -> &[f64] {
        let w = (self.grid.steps() + 1) * self.k;
        &self.y[m * w..(m + 1) * w]
    }

    pub fn z_path(&self, m: usize) -> &[f64] {
        let w = self.grid.steps() * self.k * self.d;
        &self.z[m * w..(m + 1) * w]
    }

    pub fn y_array(&self) -> PathArray<'_> {
        PathArray::new(&self.y, self.paths, self.k)
    }

    pub fn z_array(&self) -> PathArray<'_> {
        PathArray::new(&self.z, self.paths, self.k * self.d)
    }

    /// Time steps whose regression needed a ridge term.
    pub fn regularized_steps(&self) -> &[usize] {
        &self.regularized_steps
    }

    /// Regression model that produced `Z` at step `j`, if any.
    pub fn z_model(&self, j: usize) -> Option<&StepModel> {
        self.z_models.get(j).and_then(Option::as_ref)
    }

    /// `Y(0)` (first component) with the standard error of the pathwise
    /// estimator `ξ + Σ f dt` it averages.
    pub fn y0_estimate(&self) -> Estimate {
        let mean = (0..self.paths).map(|m| self.y_at(m, 0)[0]).sum::<f64>() / self.paths as f64;
        let samples: Vec<f64> = self.y0_samples.chunks(self.k).map(|r| r[0]).collect();
        Estimate {
            mean,
            stderr: Estimate::from_samples(&samples).stderr,
        }
    }

    /// Per grid node: mean and standard error over paths of the first
    /// component of `Y` and `Z`. `Z` is absent at the terminal node.
    pub fn time_profile(&self) -> Vec<ProfileRow> {
        let n = self.grid.steps();
        (0..=n)
            .map(|j| {
                let ys: Vec<f64> = (0..self.paths).map(|m| self.y_at(m, j)[0]).collect();
                let z = (j < n).then(|| {
                    let zs: Vec<f64> = (0..self.paths).map(|m| self.z_at(m, j)[0]).collect();
                    Estimate::from_samples(&zs)
                });
                ProfileRow {
                    t: self.grid.time(j),
                    y: Estimate::from_samples(&ys),
                    z,
                }
            })
            .collect()
    }

    /// Re-evaluates `Z^n(t_j)` on path `m` of `ensemble` from the stored
    /// step model, reading only `W` up to `t_j` and the previous iterate
    /// `prev` strictly before `t_j`.
    pub fn recompute_z(
        &self,
        ensemble: &PathEnsemble,
        prev: &SolutionProcess,
        basis: &BasisSpec,
        generator: &dyn Generator,
        m: usize,
        j: usize,
    ) -> Result<Vec<f64>> {
        let model = self.z_model(j).ok_or_else(|| Error::Regression {
            step: j,
            reason: "no stored model".into(),
        })?;
        let alpha = generator.delay().on_grid(self.grid.dt())?;
        let memory = MemoryLayout::new(basis, generator, &alpha, self.k, self.d);
        let mut extras = vec![0.0; memory.width];
        memory.fill(prev, m, j, &mut extras);
        let mut raw = Vec::new();
        basis.raw_features(ensemble, m, j, &extras, &mut raw);
        let mut out = vec![0.0; self.k * self.d];
        model.predict(&raw, &mut out);
        Ok(out)
    }
}

/// One line of [`SolutionProcess::time_profile`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub t: f64,
    pub y: Estimate,
    pub z: Option<Estimate>,
}

/// `E sup_j |Y_a - Y_b|^p + E (Σ_j |Z_a - Z_b|² dt)^{p/2}`.
pub fn iterate_distance(a: &SolutionProcess, b: &SolutionProcess, p: f64) -> f64 {
    let dy: Vec<f64> = a.y.par_iter().zip(&b.y).map(|(x, y)| x - y).collect();
    let dz: Vec<f64> = a.z.par_iter().zip(&b.z).map(|(x, y)| x - y).collect();
    let sy = sup_power_samples(PathArray::new(&dy, a.paths, a.k), p);
    let sz = quadratic_power_samples(PathArray::new(&dz, a.paths, a.k * a.d), a.grid.dt(), p);
    mean(&sy) + mean(&sz)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Which delayed values of the previous iterate enter the regression basis.
struct MemoryLayout {
    state_lags: Vec<usize>,
    control_lags: Vec<usize>,
    k: usize,
    kd: usize,
    width: usize,
}

impl MemoryLayout {
    fn new(basis: &BasisSpec, generator: &dyn Generator, alpha: &GridMeasure, k: usize, d: usize) -> Self {
        let lags: Vec<usize> = alpha.past_lags().collect();
        let state_lags = if basis.state_memory && generator.uses_state() {
            lags.clone()
        } else {
            Vec::new()
        };
        let control_lags = if basis.control_memory && generator.uses_control() {
            lags
        } else {
            Vec::new()
        };
        let width = state_lags.len() * k + control_lags.len() * k * d;
        Self {
            state_lags,
            control_lags,
            k,
            kd: k * d,
            width,
        }
    }

    fn fill(&self, prev: &SolutionProcess, m: usize, j: usize, out: &mut [f64]) {
        let mut at = 0;
        for &l in &self.state_lags {
            let src = prev.y_at(m, j.saturating_sub(l));
            out[at..at + self.k].copy_from_slice(src);
            at += self.k;
        }
        for &l in &self.control_lags {
            if l <= j {
                out[at..at + self.kd].copy_from_slice(prev.z_at(m, j - l));
            } else {
                out[at..at + self.kd].fill(0.0);
            }
            at += self.kd;
        }
    }
}

fn check_shapes(problem: &BsdeProblem, ensemble: &PathEnsemble) -> Result<()> {
    if ensemble.dim() != problem.noise_dim() {
        return Err(Error::InvalidProblem(format!(
            "ensemble has {} Brownian components, problem expects {}",
            ensemble.dim(),
            problem.noise_dim()
        )));
    }
    if (ensemble.grid().horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(Error::InvalidProblem(format!(
            "ensemble horizon {} differs from problem horizon {}",
            ensemble.grid().horizon(),
            problem.horizon()
        )));
    }
    Ok(())
}

fn terminal_values(terminal: &dyn TerminalCondition, ensemble: &PathEnsemble, k: usize) -> Vec<f64> {
    let mut xi = vec![0.0; ensemble.paths() * k];
    xi.par_chunks_mut(k)
        .enumerate()
        .for_each(|(m, out)| terminal.evaluate(ensemble.path(m), out));
    xi
}

/// Regression at step `j` of `Y_{j+1}` and of the `Z` target. Returns
/// `(yfit, zfit, z model, regularized)`.
fn project_step(
    ensemble: &PathEnsemble,
    j: usize,
    basis: &BasisSpec,
    extras: &[f64],
    extra_width: usize,
    next: &[f64],
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>, StepModel, bool)> {
    let paths = ensemble.paths();
    let d = ensemble.dim();
    let dt = ensemble.grid().dt();
    let design = Design::build(ensemble, j, basis, extras, extra_width);
    if design.width() >= paths {
        return Err(Error::Regression {
            step: j,
            reason: format!("{paths} paths cannot support {} regressors", design.width()),
        });
    }
    let projector = Projector::new(design, j)?;
    let yfit = projector.project(next, k).fitted;
    let mut target = vec![0.0; paths * k * d];
    target
        .par_chunks_mut(k * d)
        .enumerate()
        .for_each(|(m, row)| {
            let dw = ensemble.increment(m, j);
            for a in 0..k {
                let r = next[m * k + a] - yfit[m * k + a];
                for b in 0..d {
                    row[a * d + b] = r * dw[b] / dt;
                }
            }
        });
    let zproj = projector.project(&target, k * d);
    Ok((yfit, zproj.fitted, zproj.model, projector.regularized()))
}

/// One Picard iteration: the generator is evaluated on the segments of
/// `prev`, then `(Y, Z)` is rebuilt backward from `ξ`.
pub fn picard_step(
    problem: &BsdeProblem,
    prev: &SolutionProcess,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<SolutionProcess> {
    picard_step_with(problem.generator().as_ref(), problem.terminal().as_ref(), problem, prev, ensemble, basis)
}

fn picard_step_with(
    generator: &dyn Generator,
    terminal: &dyn TerminalCondition,
    problem: &BsdeProblem,
    prev: &SolutionProcess,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
) -> Result<SolutionProcess> {
    check_shapes(problem, ensemble)?;
    let grid = *ensemble.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let (paths, k, d) = (ensemble.paths(), problem.state_dim(), problem.noise_dim());
    if prev.paths != paths || prev.grid.steps() != n || prev.k != k || prev.d != d {
        return Err(Error::InvalidProblem(
            "previous iterate lives on a different grid or ensemble".into(),
        ));
    }
    let alpha = generator.delay().on_grid(dt)?;

    // driver on the previous iterate, M × N × k
    let mut driver = vec![0.0; paths * n * k];
    driver
        .par_chunks_mut(n * k)
        .enumerate()
        .for_each(|(m, row)| {
            let ys = Segment::state(prev.y_path(m), k, dt);
            let zs = Segment::control(prev.z_path(m), k * d, dt);
            for j in 0..n {
                let y = ys.with_anchor_index(j);
                let z = zs.with_anchor_index(j);
                generator.evaluate(grid.time(j), &alpha, &y, &z, &mut row[j * k..(j + 1) * k]);
            }
        });

    let memory = MemoryLayout::new(basis, generator, &alpha, k, d);
    let mut out = SolutionProcess::zeros(grid, paths, k, d);
    let xi = terminal_values(terminal, ensemble, k);
    let mut next = xi.clone();
    let mut extras = vec![0.0; paths * memory.width];
    for j in (0..n).rev() {
        if memory.width > 0 {
            extras
                .par_chunks_mut(memory.width)
                .enumerate()
                .for_each(|(m, row)| memory.fill(prev, m, j, row));
        }
        let (yfit, zfit, model, regularized) =
            project_step(ensemble, j, basis, &extras, memory.width, &next, k)?;
        for m in 0..paths {
            let yo = (m * (n + 1) + j + 1) * k;
            out.y[yo..yo + k].copy_from_slice(&next[m * k..(m + 1) * k]);
            let zo = (m * n + j) * k * d;
            out.z[zo..zo + k * d].copy_from_slice(&zfit[m * k * d..(m + 1) * k * d]);
        }
        next.par_chunks_mut(k)
            .zip(yfit.par_chunks(k))
            .enumerate()
            .for_each(|(m, (y, fit))| {
                let f = &driver[(m * n + j) * k..(m * n + j + 1) * k];
                for a in 0..k {
                    y[a] = fit[a] + f[a] * dt;
                }
            });
        out.z_models[j] = Some(model);
        if regularized {
            out.regularized_steps.push(j);
        }
    }
    for m in 0..paths {
        out.y[m * (n + 1) * k..(m * (n + 1) + 1) * k].copy_from_slice(&next[m * k..(m + 1) * k]);
    }
    out.regularized_steps.reverse();
    out.y0_samples = xi;
    out.y0_samples
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(m, s)| {
            for j in 0..n {
                let f = &driver[(m * n + j) * k..(m * n + j + 1) * k];
                for a in 0..k {
                    s[a] += f[a] * dt;
                }
            }
        });
    Ok(out)
}

/// Starting point of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Initialization {
    /// `Y⁰ = Z⁰ = 0`.
    #[default]
    Zero,
    /// `Y⁰ = E[ξ | F_t]` with its representing `Z⁰`.
    TerminalMartingale,
}

/// Controls for [`solve_picard_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub basis: BasisSpec,
    pub tol: f64,
    pub max_iter: usize,
    pub init: Initialization,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            basis: BasisSpec::default(),
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            init: Initialization::Zero,
        }
    }
}

fn finite_or_null<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        _ => s.serialize_none(),
    }
}

fn ratios_or_null<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let mapped: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
    mapped.serialize(s)
}

/// Per-iteration record of a Picard run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardDiagnostics {
    /// `Δ_n` for `n = 1..=iterations`.
    pub deltas: Vec<f64>,
    /// `Δ_n / Δ_{n−1}` for `n = 2..=iterations`.
    #[serde(serialize_with = "ratios_or_null")]
    pub ratios: Vec<f64>,
    /// `C_p(K,T)` for `1 < p < 2`, `28TK·max(1,T)` at `p = 2`.
    #[serde(rename = "C_theoretical", serialize_with = "finite_or_null")]
    pub c_theoretical: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub regularized_steps: Vec<usize>,
}

/// Theoretical contraction factor matching `p`, if the theory provides one.
pub fn theoretical_factor(problem: &BsdeProblem) -> Option<f64> {
    let (p, k, t) = (problem.p(), problem.lipschitz(), problem.horizon());
    if p < 2.0 {
        picard_contraction_constant(p, k, t).ok()
    } else if p == 2.0 {
        Some(l2_value(k, t))
    } else {
        None
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn initial_iterate(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    init: Initialization,
) -> Result<SolutionProcess> {
    let zero = SolutionProcess::zeros(*ensemble.grid(), ensemble.paths(), problem.state_dim(), problem.noise_dim());
    match init {
        Initialization::Zero => Ok(zero),
        Initialization::TerminalMartingale => picard_step_with(
            &ZeroGenerator::default(),
            problem.terminal().as_ref(),
            problem,
            &zero,
            ensemble,
            basis,
        ),
    }
}

/// Picard iteration from `Y⁰ = Z⁰ = 0` until `Δ_n ≤ tol` or `max_iter`.
pub fn solve_picard(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    tol: f64,
    max_iter: usize,
) -> Result<(SolutionProcess, PicardDiagnostics)> {
    solve_picard_with(
        problem,
        ensemble,
        &PicardOptions {
            basis: *basis,
            tol,
            max_iter,
            init: Initialization::Zero,
        },
    )
}

/// Picard iteration with explicit options. Non-convergence is reported in
/// the diagnostics, not as an error.
pub fn solve_picard_with(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    opts: &PicardOptions,
) -> Result<(SolutionProcess, PicardDiagnostics)> {
    if !(opts.tol >= 0.0) {
        return Err(Error::Domain {
            name: "tol",
            value: opts.tol,
            domain: "[0, inf)",
        });
    }
    if opts.max_iter == 0 {
        return Err(Error::Domain {
            name: "max_iter",
            value: 0.0,
            domain: "[1, inf)",
        });
    }
    let mut current = initial_iterate(problem, ensemble, &opts.basis, opts.init)?;
    let mut diag = PicardDiagnostics {
        deltas: Vec::new(),
        ratios: Vec::new(),
        c_theoretical: theoretical_factor(problem),
        iterations: 0,
        converged: false,
        regularized_steps: Vec::new(),
    };
    for _ in 0..opts.max_iter {
        let next = picard_step(problem, &current, ensemble, &opts.basis)?;
        let delta = iterate_distance(&next, &current, problem.p());
        if let Some(&prev) = diag.deltas.last() {
            diag.ratios.push(ratio(delta, prev));
        }
        diag.deltas.push(delta);
        diag.iterations += 1;
        for &s in next.regularized_steps() {
            if !diag.regularized_steps.contains(&s) {
                diag.regularized_steps.push(s);
            }
        }
        current = next;
        if delta <= opts.tol {
            diag.converged = true;
            break;
        }
    }
    diag.regularized_steps.sort_unstable();
    Ok((current, diag))
}

/// Per-level record of the truncation route.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub level: u64,
    pub y0: Estimate,
    pub iterations: usize,
    pub converged: bool,
    /// Empirical `P(|ξ| > level)`.
    pub exceedance: f64,
}

/// Cauchy check of the truncated solutions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CauchyDiagnostics {
    pub levels: Vec<LevelRecord>,
    /// Iterate distance between consecutive levels.
    pub distances: Vec<f64>,
    /// `E|ξ_{n_{i+1}} − ξ_{n_i}|^p` on the ensemble, per consecutive pair.
    pub truncation_errors: Vec<f64>,
}

fn terminal_norms(problem: &BsdeProblem, ensemble: &PathEnsemble) -> Vec<f64> {
    let k = problem.state_dim();
    terminal_values(problem.terminal().as_ref(), ensemble, k)
        .chunks(k)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Powers of two until the empirical `P(|ξ| > n)` drops below `10/M`.
pub fn default_levels(problem: &BsdeProblem, ensemble: &PathEnsemble) -> Vec<u64> {
    let norms = terminal_norms(problem, ensemble);
    let cut = 10.0 / ensemble.paths() as f64;
    let mut levels = Vec::new();
    let mut n = 1u64;
    loop {
        levels.push(n);
        let exceed = norms.iter().filter(|&&x| x > n as f64).count() as f64 / norms.len() as f64;
        if exceed < cut || n >= 1 << 40 {
            break;
        }
        n *= 2;
    }
    levels
}

/// Solves the truncated problems at each level by Picard iteration and
/// reports consecutive-level distances. Returns the highest-level solution.
pub fn solve_via_truncation(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    levels: &[u64],
    opts: &PicardOptions,
) -> Result<(SolutionProcess, CauchyDiagnostics)> {
    if levels.is_empty() || levels[0] == 0 || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("levels", "must be a nonempty increasing list of positive integers"));
    }
    let norms = terminal_norms(problem, ensemble);
    let k = problem.state_dim();
    let mut diag = CauchyDiagnostics {
        levels: Vec::new(),
        distances: Vec::new(),
        truncation_errors: Vec::new(),
    };
    let mut previous: Option<(SolutionProcess, Vec<f64>)> = None;
    for &level in levels {
        let truncated = truncate_problem(problem, level);
        let (sol, pd) = solve_picard_with(&truncated, ensemble, opts)?;
        let xi = terminal_values(truncated.terminal().as_ref(), ensemble, k);
        let exceed = norms.iter().filter(|&&x| x > level as f64).count() as f64 / norms.len() as f64;
        diag.levels.push(LevelRecord {
            level,
            y0: sol.y0_estimate(),
            iterations: pd.iterations,
            converged: pd.converged,
            exceedance: exceed,
        });
        if let Some((prev_sol, prev_xi)) = &previous {
            diag.distances.push(iterate_distance(&sol, prev_sol, problem.p()));
            let err: Vec<f64> = xi
                .chunks(k)
                .zip(prev_xi.chunks(k))
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                        .powf(problem.p())
                })
                .collect();
            diag.truncation_errors.push(mean(&err));
        }
        previous = Some((sol, xi));
    }
    let (sol, _) = previous.expect("at least one level");
    Ok((sol, diag))
}

/// Qualitative behaviour of `Δ_n` in a probe run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    /// Every ratio below one.
    Shrinks,
    /// Every ratio at least one.
    Grows,
    /// Ratios start at or above one and settle below it.
    Transient,
    /// Ratios cross one repeatedly.
    Oscillates,
    /// Fewer than two iterations.
    Undetermined,
}

/// Classifies a ratio sequence.
pub fn classify_ratios(ratios: &[f64]) -> Trend {
    if ratios.is_empty() {
        return Trend::Undetermined;
    }
    let above: Vec<bool> = ratios.iter().map(|&r| r >= 1.0).collect();
    if above.iter().all(|&a| !a) {
        return Trend::Shrinks;
    }
    if above.iter().all(|&a| a) {
        return Trend::Grows;
    }
    let crossings = above.windows(2).filter(|w| w[0] != w[1]).count();
    if crossings == 1 && above[0] {
        Trend::Transient
    } else {
        Trend::Oscillates
    }
}

/// Result of [`divergence_probe`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub diagnostics: PicardDiagnostics,
    pub trend: Trend,
    /// Largest observed `Δ_n / Δ_{n−1}`.
    #[serde(serialize_with = "finite_or_null")]
    pub max_ratio: Option<f64>,
}

/// Runs `n_iters` Picard iterations without a stopping rule and records how
/// `Δ_n` evolves. Stops early only if two iterates coincide exactly.
pub fn divergence_probe(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    n_iters: usize,
) -> Result<ProbeReport> {
    let (_, diagnostics) = solve_picard_with(
        problem,
        ensemble,
        &PicardOptions {
            basis: *basis,
            tol: 0.0,
            max_iter: n_iters,
            init: Initialization::Zero,
        },
    )?;
    let trend = classify_ratios(&diagnostics.ratios);
    let max_ratio = diagnostics.ratios.iter().copied().reduce(f64::max);
    Ok(ProbeReport {
        diagnostics,
        trend,
        max_ratio,
    })
}

/// Least-squares slope of `ln Δ_n` against `n` over `n ∈ [from, to]`
/// (1-based, inclusive), skipping zero distances. `None` with fewer than two
/// usable points.
pub fn log_delta_slope(deltas: &[f64], from: usize, to: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = (from.max(1)..=to.min(deltas.len()))
        .filter(|&n| deltas[n - 1] > 0.0)
        .map(|n| (n as f64, deltas[n - 1].ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let len = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / len;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / len;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

/// Contraction study: Picard diagnostics plus the fitted decay slope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub diagnostics: PicardDiagnostics,
    #[serde(serialize_with = "finite_or_null")]
    pub log_slope: Option<f64>,
    #[serde(serialize_with = "finite_or_null")]
    pub log_c_theoretical: Option<f64>,
    pub max_ratio_below_one: bool,
}

/// Runs `iterations` Picard steps (stopping only on exact coincidence) and
/// fits the slope of `ln Δ_n` over `n = 2..=iterations`.
pub fn contraction_study(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    iterations: usize,
) -> Result<ContractionReport> {
    let probe = divergence_probe(problem, ensemble, basis, iterations)?;
    let diagnostics = probe.diagnostics;
    let log_slope = log_delta_slope(&diagnostics.deltas, 2, iterations);
    let log_c = diagnostics.c_theoretical.map(f64::ln);
    let below = diagnostics.ratios.iter().all(|&r| r < 1.0);
    Ok(ContractionReport {
        diagnostics,
        log_slope,
        log_c_theoretical: log_c,
        max_ratio_below_one: below,
    })
}

/// Driver of a non-delayed BSDE: `f(s, Y(s), Z(s))` with `Z` flattened `k × d`.
pub type MarkovDriver = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Reference Picard solver for a BSDE without delay, where the generator
/// reads the previous iterate at the current node only.
#[allow(clippy::too_many_arguments)]
pub fn solve_markov_reference(
    horizon: f64,
    k: usize,
    terminal: Arc<dyn TerminalCondition>,
    driver: &MarkovDriver,
    ensemble: &PathEnsemble,
    basis: &BasisSpec,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if (ensemble.grid().horizon() - horizon).abs() > 1e-12 * horizon {
        return Err(Error::InvalidProblem("horizon mismatch".into()));
    }
    let grid = *ensemble.grid();
    let (n, dt, paths, d) = (grid.steps(), grid.dt(), ensemble.paths(), ensemble.dim());
    let xi = terminal_values(terminal.as_ref(), ensemble, k);
    let mut y = SolutionProcess::zeros(grid, paths, k, d);
    let mut iterations = 0;
    for _ in 0..max_iter {
        let mut next = SolutionProcess::zeros(grid, paths, k, d);
        let mut carry = xi.clone();
        for j in (0..n).rev() {
            let (yfit, zfit, _, _) = project_step(ensemble, j, basis, &[], 0, &carry, k)?;
            let mut f = vec![0.0; k];
            for m in 0..paths {
                let yo = (m * (n + 1) + j + 1) * k;
                next.y[yo..yo + k].copy_from_slice(&carry[m * k..(m + 1) * k]);
                let zo = (m * n + j) * k * d;
                next.z[zo..zo + k * d].copy_from_slice(&zfit[m * k * d..(m + 1) * k * d]);
                driver(grid.time(j), y.y_at(m, j), y.z_at(m, j), &mut f);
                for a in 0..k {
                    carry[m * k + a] = yfit[m * k + a] + f[a] * dt;
                }
            }
        }
        for m in 0..paths {
            next.y[m * (n + 1) * k..(m * (n + 1) + 1) * k].copy_from_slice(&carry[m * k..(m + 1) * k]);
        }
        let delta = iterate_distance(&next, &y, p);
        y = next;
        iterations += 1;
        if delta <= tol {
            break;
        }
    }
    Ok((y.y, y.z, iterations))
}
