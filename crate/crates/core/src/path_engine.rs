//! Brownian ensembles, regression-based conditional expectations and
//! empirical `S^p` / `H^p` norms.
//!
//! Every reduction over paths is split into fixed-size chunks whose partial
//! results are combined in chunk order, so results do not depend on the
//! number of worker threads.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Rows per parallel reduction chunk.
const CHUNK_ROWS: usize = 2048;

/// Default cap on the number of `f64` values an ensemble may hold (1 GiB).
pub const DEFAULT_MEMORY_CAP: usize = 1 << 27;

/// Uniform grid `t_j = j·dt`, `j = 0..=N`, on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain {
                name: "horizon",
                value: horizon,
                domain: "(0, inf)",
            });
        }
        if steps == 0 {
            return Err(Error::Domain {
                name: "grid steps",
                value: 0.0,
                domain: "N >= 1",
            });
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.dt
        }
    }
}

/// Generator for path `index` of the ensemble keyed by `seed`.
///
/// Each path owns its own ChaCha stream, so paths can be drawn in any order
/// or in parallel without changing their values.
pub fn path_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Standard normal variate by inverse-CDF transform of an open-interval uniform.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    Normal::standard().inverse_cdf(u)
}

/// `M` discretised Brownian paths in `R^d` on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    seed: u64,
    /// `M × N × d` increments, row-major.
    increments: Vec<f64>,
    /// `M × (N+1) × d` running sums of the increments.
    brownian: Vec<f64>,
}

impl PathEnsemble {
    pub fn simulate(grid: &TimeGrid, paths: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::simulate_with_cap(grid, paths, dim, seed, DEFAULT_MEMORY_CAP)
    }

    pub fn simulate_with_cap(
        grid: &TimeGrid,
        paths: usize,
        dim: usize,
        seed: u64,
        cap: usize,
    ) -> Result<Self> {
        check_capacity(grid, paths, dim, cap)?;
        let n = grid.steps();
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; paths * n * dim];
        increments
            .par_chunks_mut(n * dim)
            .enumerate()
            .for_each(|(m, row)| {
                let mut rng = path_rng(seed, m as u64);
                for x in row {
                    *x = sd * standard_normal(&mut rng);
                }
            });
        Self::from_increments(*grid, paths, dim, seed, increments)
    }

    /// Wraps externally produced increments (`M × N × d`, row-major).
    pub fn from_increments(
        grid: TimeGrid,
        paths: usize,
        dim: usize,
        seed: u64,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if paths == 0 || dim == 0 {
            return Err(Error::Domain {
                name: "ensemble shape",
                value: 0.0,
                domain: "M >= 1, d >= 1",
            });
        }
        let n = grid.steps();
        if increments.len() != paths * n * dim {
            return Err(Error::InvalidProblem(format!(
                "expected {} increments, got {}",
                paths * n * dim,
                increments.len()
            )));
        }
        let mut brownian = vec![0.0; paths * (n + 1) * dim];
        brownian
            .par_chunks_mut((n + 1) * dim)
            .zip(increments.par_chunks(n * dim))
            .for_each(|(w, dw)| {
                for j in 0..n {
                    for b in 0..dim {
                        w[(j + 1) * dim + b] = w[j * dim + b] + dw[j * dim + b];
                    }
                }
            });
        Ok(Self {
            grid,
            paths,
            dim,
            seed,
            increments,
            brownian,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn path(&self, m: usize) -> PathView<'_> {
        let n = self.grid.steps();
        let d = self.dim;
        PathView {
            brownian: &self.brownian[m * (n + 1) * d..(m + 1) * (n + 1) * d],
            increments: &self.increments[m * n * d..(m + 1) * n * d],
            dim: d,
        }
    }

    /// `W(t_j)` on path `m`.
    pub fn brownian_at(&self, m: usize, j: usize) -> &[f64] {
        let i = (m * (self.grid.steps() + 1) + j) * self.dim;
        &self.brownian[i..i + self.dim]
    }

    /// `W(t_{j+1}) - W(t_j)` on path `m`.
    pub fn increment(&self, m: usize, j: usize) -> &[f64] {
        let i = (m * self.grid.steps() + j) * self.dim;
        &self.increments[i..i + self.dim]
    }

    /// Copy with every increment from step `j` onwards set to zero.
    pub fn with_increments_zeroed_from(&self, j: usize) -> Self {
        let n = self.grid.steps();
        let d = self.dim;
        let mut inc = self.increments.clone();
        for row in inc.chunks_mut(n * d) {
            row[j.min(n) * d..].fill(0.0);
        }
        Self::from_increments(self.grid, self.paths, d, self.seed, inc)
            .expect("shape is unchanged")
    }

    /// Writes the flat binary layout: `M, N, d, seed` as little-endian `u64`,
    /// then the increments row-major as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [
            self.paths as u64,
            self.grid.steps() as u64,
            self.dim as u64,
            self.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in &self.increments {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the layout produced by [`PathEnsemble::write_binary`]. The
    /// horizon is not stored and must be supplied.
    pub fn read_binary<R: Read>(mut r: R, horizon: f64) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in &mut header {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [paths, steps, dim, seed] = header;
        let grid = TimeGrid::new(horizon, steps as usize)?;
        let len = (paths * steps * dim) as usize;
        let mut increments = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word)?;
            increments.push(f64::from_le_bytes(word));
        }
        Self::from_increments(grid, paths as usize, dim as usize, seed, increments)
    }
}

fn check_capacity(grid: &TimeGrid, paths: usize, dim: usize, cap: usize) -> Result<()> {
    let n = grid.steps();
    let requested = paths
        .checked_mul(dim)
        .and_then(|md| md.checked_mul(2 * n + 1))
        .unwrap_or(usize::MAX);
    if requested > cap {
        return Err(Error::Capacity { requested, cap });
    }
    Ok(())
}

/// One path of an ensemble.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    brownian: &'a [f64],
    increments: &'a [f64],
    dim: usize,
}

impl<'a> PathView<'a> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim
    }

    pub fn brownian(&self, j: usize) -> &'a [f64] {
        &self.brownian[j * self.dim..(j + 1) * self.dim]
    }

    pub fn terminal(&self) -> &'a [f64] {
        self.brownian(self.steps())
    }

    pub fn increment(&self, j: usize) -> &'a [f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }
}

/// Regression basis at a grid time.
///
/// Polynomial part: powers `1..=degree` of each component of `W(t_j)/sqrt(t_j)`
/// (dropped at `t_0`, where `W` vanishes). Memory flags ask the solver to
/// append delayed values of the previous iterate as extra regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub state_memory: bool,
    pub control_memory: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree: 3,
            state_memory: true,
            control_memory: false,
        }
    }
}

impl BasisSpec {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            degree,
            state_memory: false,
            control_memory: false,
        }
    }

    /// Raw (unstandardised) regressors of path `m` at step `j`, followed by `extras`.
    pub fn raw_features(
        &self,
        ensemble: &PathEnsemble,
        m: usize,
        j: usize,
        extras: &[f64],
        out: &mut Vec<f64>,
    ) {
        out.clear();
        if j > 0 {
            let scale = 1.0 / ensemble.grid().time(j).sqrt();
            for &w in ensemble.brownian_at(m, j) {
                let x = w * scale;
                let mut power = 1.0;
                for _ in 0..self.degree {
                    power *= x;
                    out.push(power);
                }
            }
        }
        out.extend_from_slice(extras);
    }

    fn raw_width(&self, dim: usize, j: usize) -> usize {
        if j > 0 {
            dim * self.degree
        } else {
            0
        }
    }
}

/// Affine standardisation of the kept raw regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnTransform {
    /// Indices into the raw feature row of the kept columns.
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ColumnTransform {
    /// Width of the standardised design, constant column included.
    pub fn width(&self) -> usize {
        self.columns.len() + 1
    }

    fn apply(&self, raw: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (i, &c) in self.columns.iter().enumerate() {
            out[i + 1] = (raw[c] - self.means[i]) / self.scales[i];
        }
    }
}

/// Standardised design matrix for one time step: a leading constant column
/// followed by the non-degenerate raw regressors, centred and scaled.
#[derive(Debug, Clone)]
pub struct Design {
    rows: usize,
    data: Vec<f64>,
    transform: ColumnTransform,
}

impl Design {
    /// Builds the design at step `j`. `extras` holds `rows × extra_width`
    /// additional raw regressors (row-major), possibly empty.
    pub fn build(
        ensemble: &PathEnsemble,
        j: usize,
        basis: &BasisSpec,
        extras: &[f64],
        extra_width: usize,
    ) -> Self {
        let rows = ensemble.paths();
        debug_assert_eq!(extras.len(), rows * extra_width);
        let raw_width = basis.raw_width(ensemble.dim(), j) + extra_width;
        let mut raw = vec![0.0; rows * raw_width];
        if raw_width > 0 {
            raw.par_chunks_mut(raw_width)
                .enumerate()
                .for_each_init(Vec::new, |buf, (m, row)| {
                    let ex = &extras[m * extra_width..(m + 1) * extra_width];
                    basis.raw_features(ensemble, m, j, ex, buf);
                    row.copy_from_slice(buf);
                });
        }
        Self::from_raw(&raw, rows, raw_width)
    }

    /// Standardises a raw `rows × raw_width` regressor matrix.
    pub fn from_raw(raw: &[f64], rows: usize, raw_width: usize) -> Self {
        let mut transform = ColumnTransform {
            columns: Vec::new(),
            means: Vec::new(),
            scales: Vec::new(),
        };
        if raw_width > 0 {
            let sums = column_sums(raw, raw_width, |x, _| x);
            let means: Vec<f64> = sums.iter().map(|s| s / rows as f64).collect();
            let sq = column_sums(raw, raw_width, |x, c| (x - means[c]) * (x - means[c]));
            let maxabs = column_max_abs(raw, raw_width);
            for c in 0..raw_width {
                let std = (sq[c] / rows as f64).sqrt();
                let constant = raw.chunks(raw_width).all(|r| r[c] == raw[c]);
                if constant || !(std > 1e-12 * maxabs[c]) {
                    continue;
                }
                transform.columns.push(c);
                transform.means.push(means[c]);
                transform.scales.push(std);
            }
        }
        let width = transform.width();
        let mut data = vec![0.0; rows * width];
        if raw_width > 0 {
            data.par_chunks_mut(width)
                .zip(raw.par_chunks(raw_width))
                .for_each(|(out, r)| transform.apply(r, out));
        } else {
            data.fill(1.0);
        }
        Self {
            rows,
            data,
            transform,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.transform.width()
    }

    pub fn transform(&self) -> &ColumnTransform {
        &self.transform
    }
}

fn column_sums(data: &[f64], width: usize, f: impl Fn(f64, usize) -> f64 + Sync) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK_ROWS * width)
        .map(|block| {
            let mut acc = vec![0.0; width];
            for row in block.chunks(width) {
                for (c, &x) in row.iter().enumerate() {
                    acc[c] += f(x, c);
                }
            }
            acc
        })
        .collect();
    sum_partials(partials, width)
}

fn column_max_abs(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; width];
    for row in data.chunks(width) {
        for (o, x) in out.iter_mut().zip(row) {
            *o = o.max(x.abs());
        }
    }
    out
}

fn sum_partials(partials: Vec<Vec<f64>>, width: usize) -> Vec<f64> {
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, x) in total.iter_mut().zip(p) {
            *t += x;
        }
    }
    total
}

/// Least-squares projection onto a fixed design, factorised once and
/// reusable for several targets.
#[derive(Debug, Clone)]
pub struct Projector {
    design: Design,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    regularized: bool,
}

impl Projector {
    /// Factorises the normal equations. A singular Gram matrix is retried
    /// with a small ridge term and flagged as regularized.
    pub fn new(design: Design, step: usize) -> Result<Self> {
        let p = design.width();
        let gram = gram_matrix(&design.data, p);
        let gram = DMatrix::from_row_slice(p, p, &gram);
        if let Some(factor) = gram.clone().cholesky() {
            return Ok(Self {
                design,
                factor,
                regularized: false,
            });
        }
        let ridge = 1e-10 * gram.trace() / p as f64;
        let shifted = gram + DMatrix::identity(p, p) * ridge;
        let factor = shifted.cholesky().ok_or_else(|| Error::Regression {
            step,
            reason: "normal equations not positive definite".into(),
        })?;
        Ok(Self {
            design,
            factor,
            regularized: true,
        })
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Projects the `rows × ncols` targets. Columns that are exactly constant
    /// are reproduced exactly.
    pub fn project(&self, targets: &[f64], ncols: usize) -> Projection {
        let rows = self.design.rows;
        let p = self.design.width();
        debug_assert_eq!(targets.len(), rows * ncols);
        let constants: Vec<Option<f64>> = (0..ncols)
            .map(|c| {
                let first = targets[c];
                targets
                    .chunks(ncols)
                    .all(|r| r[c] == first)
                    .then_some(first)
            })
            .collect();
        let mut coefficients = vec![0.0; p * ncols];
        if constants.iter().any(Option::is_none) {
            let xty = cross_moments(&self.design.data, p, targets, ncols);
            let rhs = DMatrix::from_row_slice(p, ncols, &xty);
            let beta = self.factor.solve(&rhs);
            for a in 0..p {
                for c in 0..ncols {
                    coefficients[a * ncols + c] = beta[(a, c)];
                }
            }
        }
        for (c, k) in constants.iter().enumerate() {
            if let Some(v) = k {
                for a in 0..p {
                    coefficients[a * ncols + c] = if a == 0 { *v } else { 0.0 };
                }
            }
        }
        let mut fitted = vec![0.0; rows * ncols];
        fitted
            .par_chunks_mut(ncols)
            .zip(self.design.data.par_chunks(p))
            .for_each(|(out, x)| fit_row(x, &coefficients, &constants, out));
        Projection {
            fitted,
            model: StepModel {
                transform: self.design.transform.clone(),
                coefficients,
                constants,
            },
        }
    }
}

fn fit_row(x: &[f64], coefficients: &[f64], constants: &[Option<f64>], out: &mut [f64]) {
    let ncols = out.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = match constants[c] {
            Some(v) => v,
            None => {
                let mut acc = 0.0;
                for (a, xa) in x.iter().enumerate() {
                    acc += xa * coefficients[a * ncols + c];
                }
                acc
            }
        };
    }
}

fn gram_matrix(data: &[f64], p: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK_ROWS * p)
        .map(|block| {
            let mut g = vec![0.0; p * p];
            for row in block.chunks(p) {
                for a in 0..p {
                    let ra = row[a];
                    for b in a..p {
                        g[a * p + b] += ra * row[b];
                    }
                }
            }
            g
        })
        .collect();
    let mut g = sum_partials(partials, p * p);
    for a in 0..p {
        for b in 0..a {
            g[a * p + b] = g[b * p + a];
        }
    }
    g
}

fn cross_moments(data: &[f64], p: usize, targets: &[f64], ncols: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(CHUNK_ROWS * p)
        .zip(targets.par_chunks(CHUNK_ROWS * ncols))
        .map(|(xb, yb)| {
            let mut acc = vec![0.0; p * ncols];
            for (x, y) in xb.chunks(p).zip(yb.chunks(ncols)) {
                for a in 0..p {
                    for c in 0..ncols {
                        acc[a * ncols + c] += x[a] * y[c];
                    }
                }
            }
            acc
        })
        .collect();
    sum_partials(partials, p * ncols)
}

/// Fitted values together with the per-step model that produced them.
#[derive(Debug, Clone)]
pub struct Projection {
    pub fitted: Vec<f64>,
    pub model: StepModel,
}

/// Regression function of one time step: maps a path's raw regressors to
/// fitted values. Depends only on the path up to that time.
#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    pub transform: ColumnTransform,
    /// `width × ncols`, row-major, in standardised coordinates.
    pub coefficients: Vec<f64>,
    /// Columns reproduced exactly as constants.
    pub constants: Vec<Option<f64>>,
}

impl StepModel {
    pub fn ncols(&self) -> usize {
        self.constants.len()
    }

    pub fn predict(&self, raw: &[f64], out: &mut [f64]) {
        let mut x = vec![0.0; self.transform.width()];
        self.transform.apply(raw, &mut x);
        fit_row(&x, &self.coefficients, &self.constants, out);
    }
}

/// Result of [`conditional_expectation`].
#[derive(Debug, Clone)]
pub struct ConditionalFit {
    pub fitted: Vec<f64>,
    pub model: StepModel,
    pub regularized: bool,
}

/// Approximates `E[target | F_{t_j}]` path by path by least-squares
/// regression of `targets` (`M × ncols`) on the basis at step `j`.
pub fn conditional_expectation(
    ensemble: &PathEnsemble,
    targets: &[f64],
    ncols: usize,
    j: usize,
    basis: &BasisSpec,
) -> Result<ConditionalFit> {
    if targets.len() != ensemble.paths() * ncols {
        return Err(Error::Regression {
            step: j,
            reason: format!(
                "expected {} target values, got {}",
                ensemble.paths() * ncols,
                targets.len()
            ),
        });
    }
    let design = Design::build(ensemble, j, basis, &[], 0);
    if design.width() >= ensemble.paths() {
        return Err(Error::Regression {
            step: j,
            reason: format!(
                "{} paths cannot support {} regressors",
                ensemble.paths(),
                design.width()
            ),
        });
    }
    let proj = Projector::new(design, j)?;
    let regularized = proj.regularized();
    let Projection { fitted, model } = proj.project(targets, ncols);
    Ok(ConditionalFit {
        fitted,
        model,
        regularized,
    })
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        if samples.len() < 2 {
            return Self { mean, stderr: 0.0 };
        }
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// View of a per-path process stored as `paths × nodes × width`.
#[derive(Debug, Clone, Copy)]
pub struct PathArray<'a> {
    pub data: &'a [f64],
    pub paths: usize,
    pub width: usize,
}

impl<'a> PathArray<'a> {
    pub fn new(data: &'a [f64], paths: usize, width: usize) -> Self {
        assert!(paths > 0 && width > 0 && data.len().is_multiple_of(paths * width));
        Self { data, paths, width }
    }

    pub fn nodes(&self) -> usize {
        self.data.len() / (self.paths * self.width)
    }

    fn rows(&self) -> rayon::slice::Chunks<'a, f64> {
        self.data.par_chunks(self.nodes() * self.width)
    }
}

fn euclid_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Per-path `sup_j |Y(t_j)|^p`.
pub fn sup_power_samples(y: PathArray<'_>, p: f64) -> Vec<f64> {
    let w = y.width;
    y.rows()
        .map(|row| {
            row.chunks(w)
                .map(euclid_sq)
                .fold(0.0, f64::max)
                .sqrt()
                .powf(p)
        })
        .collect()
}

/// Per-path `(Σ_j |Z(t_j)|² dt)^{p/2}`.
pub fn quadratic_power_samples(z: PathArray<'_>, dt: f64, p: f64) -> Vec<f64> {
    let w = z.width;
    z.rows()
        .map(|row| {
            let s: f64 = row.chunks(w).map(euclid_sq).sum();
            (s * dt).powf(p / 2.0)
        })
        .collect()
}

fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Empirical `(E sup_t |Y(t)|^p)^{1/p}` over the grid.
pub fn empirical_sp_norm(y: PathArray<'_>, p: f64) -> f64 {
    mean(&sup_power_samples(y, p)).powf(1.0 / p)
}

/// Empirical `(E (∫_0^T |Z|² ds)^{p/2})^{1/p}` by left Riemann sums.
pub fn empirical_hp_norm(z: PathArray<'_>, dt: f64, p: f64) -> f64 {
    mean(&quadratic_power_samples(z, dt, p)).powf(1.0 / p)
}
