//! Problem data for delayed BSDEs: generators, terminal conditions and the
//! bounded truncations used by the approximation scheme.
//!
//! A generator is evaluated at time `s` on the past of the previous iterate,
//! given as [`Segment`] views: the state segment holds `Y` on the grid (held
//! at `Y(0)` before zero) and the control segment holds `Z` flattened
//! row-major as `k × d` (zero before zero).

use std::fmt;
use std::sync::Arc;

use rand_core::RngCore;

use crate::delay_measure::{DelayMeasure, GridMeasure, Segment};
use crate::error::{Error, Result};
use crate::path_engine::{path_rng, PathView};

/// Driver `f(s, Y_s, Z_s)` of a delayed BSDE.
pub trait Generator: Send + Sync + fmt::Debug {
    /// Writes `f(s, y, z)` into `out` (length `k`). `alpha` is
    /// `self.delay()` resolved on the segments' grid. Must write zeros for
    /// `s < 0`.
    fn evaluate(
        &self,
        s: f64,
        alpha: &GridMeasure,
        y: &Segment<'_>,
        z: &Segment<'_>,
        out: &mut [f64],
    );

    /// Declared constant `K` of the delayed Lipschitz condition.
    fn lipschitz(&self) -> f64;

    fn delay(&self) -> &DelayMeasure;

    /// Whether the value depends on the state segment at all.
    fn uses_state(&self) -> bool {
        true
    }

    /// Whether the value depends on the control segment at all.
    fn uses_control(&self) -> bool {
        true
    }

    /// `f(s, 0, 0)`. `z_width` is `k·d`.
    fn zero_driver(&self, s: f64, z_width: usize, out: &mut [f64]) {
        let y0 = vec![0.0; out.len()];
        let z0 = vec![0.0; z_width];
        let y = Segment::state(&y0, out.len(), 1.0);
        let z = Segment::control(&z0, z_width, 1.0);
        let alpha = DelayMeasure::dirac_zero().on_grid(1.0).expect("zero lag");
        self.evaluate(s, &alpha, &y, &z, out);
    }
}

/// Resolves the generator's delay measure on the segments' grid and evaluates.
pub fn evaluate_generator(
    generator: &dyn Generator,
    s: f64,
    y: &Segment<'_>,
    z: &Segment<'_>,
) -> Result<Vec<f64>> {
    let alpha = generator.delay().on_grid(y.step())?;
    let mut out = vec![0.0; y.width()];
    generator.evaluate(s, &alpha, y, z, &mut out);
    Ok(out)
}

/// Piecewise-constant coefficient indexed by grid node, zero before time zero
/// and held at its last value past the end.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    values: Vec<f64>,
}

impl StepFunction {
    pub fn constant(value: f64) -> Self {
        Self {
            values: vec![value],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem(
                "step function needs finite values on at least one node".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn at_index(&self, i: i64) -> f64 {
        if i < 0 {
            0.0
        } else {
            self.values[(i as usize).min(self.values.len() - 1)]
        }
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// `f ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroGenerator {
    alpha: DelayMeasure,
}

impl Default for ZeroGenerator {
    fn default() -> Self {
        Self {
            alpha: DelayMeasure::dirac_zero(),
        }
    }
}

impl Generator for ZeroGenerator {
    fn evaluate(&self, _: f64, _: &GridMeasure, _: &Segment<'_>, _: &Segment<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }

    fn delay(&self) -> &DelayMeasure {
        &self.alpha
    }

    fn uses_state(&self) -> bool {
        false
    }

    fn uses_control(&self) -> bool {
        false
    }

    fn zero_driver(&self, _: f64, _: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Linear portfolio driver
/// `f(s, Y_s, Z_s) = ∫ (r(s+u) Y(s+u) + Z(s+u) θ(s+u)) α(du)`,
/// with `θ` a `d`-vector of coefficients acting on the columns of `Z`.
#[derive(Debug, Clone)]
pub struct LinearDelayed {
    rate: StepFunction,
    premium: Vec<StepFunction>,
    alpha: DelayMeasure,
    lipschitz: f64,
}

impl LinearDelayed {
    /// `K` defaults to `sup (r² + |θ|²)`.
    pub fn new(rate: StepFunction, premium: Vec<StepFunction>, alpha: DelayMeasure) -> Result<Self> {
        if premium.is_empty() {
            return Err(Error::InvalidProblem(
                "risk premium needs one coefficient per Brownian component".into(),
            ));
        }
        let lipschitz = rate.sup_abs().powi(2) + premium.iter().map(|t| t.sup_abs().powi(2)).sum::<f64>();
        Ok(Self {
            rate,
            premium,
            alpha,
            lipschitz,
        })
    }

    pub fn with_lipschitz(mut self, k: f64) -> Self {
        self.lipschitz = k;
        self
    }

    pub fn noise_dim(&self) -> usize {
        self.premium.len()
    }
}

/// Builds the linear delayed portfolio generator.
pub fn linear_delayed_generator(
    rate: StepFunction,
    premium: Vec<StepFunction>,
    alpha: DelayMeasure,
) -> Result<LinearDelayed> {
    LinearDelayed::new(rate, premium, alpha)
}

impl Generator for LinearDelayed {
    fn evaluate(
        &self,
        s: f64,
        alpha: &GridMeasure,
        y: &Segment<'_>,
        z: &Segment<'_>,
        out: &mut [f64],
    ) {
        out.fill(0.0);
        if s < 0.0 {
            return;
        }
        let d = self.premium.len();
        for atom in alpha.atoms() {
            let idx = y.index_back(atom.steps);
            let r = self.rate.at_index(idx);
            let yv = y.back(atom.steps);
            let zv = z.back(atom.steps);
            for (a, o) in out.iter_mut().enumerate() {
                let mut term = match yv {
                    Some(v) => r * v[a],
                    None => 0.0,
                };
                if let Some(zr) = zv {
                    for (b, theta) in self.premium.iter().enumerate() {
                        term += theta.at_index(idx) * zr[a * d + b];
                    }
                }
                *o += atom.weight * term;
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn delay(&self) -> &DelayMeasure {
        &self.alpha
    }

    fn uses_state(&self) -> bool {
        !self.rate.is_zero()
    }

    fn uses_control(&self) -> bool {
        self.premium.iter().any(|t| !t.is_zero())
    }

    fn zero_driver(&self, _: f64, _: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `f(s, Y_s, Z_s) = c · Y(s - δ)`, reading `Y(0)` while `s < δ`.
#[derive(Debug, Clone)]
pub struct SingleLag {
    coefficient: f64,
    lag: f64,
    alpha: DelayMeasure,
}

impl SingleLag {
    pub fn new(coefficient: f64, lag: f64) -> Result<Self> {
        if !(lag > 0.0) {
            return Err(Error::Domain {
                name: "single-lag delay",
                value: lag,
                domain: "(0, T]",
            });
        }
        Ok(Self {
            coefficient,
            lag,
            alpha: DelayMeasure::dirac(-lag)?,
        })
    }

    pub fn lag(&self) -> f64 {
        self.lag
    }
}

/// Builds the single-lag generator `c · Y(s - δ)`.
pub fn single_lag_generator(coefficient: f64, lag: f64) -> Result<SingleLag> {
    SingleLag::new(coefficient, lag)
}

impl Generator for SingleLag {
    fn evaluate(
        &self,
        s: f64,
        alpha: &GridMeasure,
        y: &Segment<'_>,
        _: &Segment<'_>,
        out: &mut [f64],
    ) {
        out.fill(0.0);
        if s < 0.0 {
            return;
        }
        for atom in alpha.atoms() {
            if let Some(v) = y.back(atom.steps) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += atom.weight * (self.coefficient * x);
                }
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.coefficient * self.coefficient
    }

    fn delay(&self) -> &DelayMeasure {
        &self.alpha
    }

    fn uses_control(&self) -> bool {
        false
    }

    fn zero_driver(&self, _: f64, _: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `f + g(s)`: adds a deterministic per-component drift to a generator.
#[derive(Debug, Clone)]
pub struct Drifted {
    inner: Arc<dyn Generator>,
    drift: Vec<f64>,
}

impl Drifted {
    /// `drift` holds one constant per state component.
    pub fn new(inner: Arc<dyn Generator>, drift: Vec<f64>) -> Self {
        Self { inner, drift }
    }
}

impl Generator for Drifted {
    fn evaluate(
        &self,
        s: f64,
        alpha: &GridMeasure,
        y: &Segment<'_>,
        z: &Segment<'_>,
        out: &mut [f64],
    ) {
        self.inner.evaluate(s, alpha, y, z, out);
        if s >= 0.0 {
            for (o, g) in out.iter_mut().zip(&self.drift) {
                *o += g;
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }

    fn delay(&self) -> &DelayMeasure {
        self.inner.delay()
    }

    fn uses_state(&self) -> bool {
        self.inner.uses_state()
    }

    fn uses_control(&self) -> bool {
        self.inner.uses_control()
    }

    fn zero_driver(&self, s: f64, z_width: usize, out: &mut [f64]) {
        self.inner.zero_driver(s, z_width, out);
        if s >= 0.0 {
            for (o, g) in out.iter_mut().zip(&self.drift) {
                *o += g;
            }
        }
    }
}

/// `q_n(x) = x · n / (|x| ∨ n)` for a vector `x` with Euclidean norm.
pub fn truncate_scalar(x: &[f64], n: u64) -> Vec<f64> {
    let mut v = x.to_vec();
    truncate_in_place(&mut v, n);
    v
}

/// In-place `q_n`. Leaves `x` bit-for-bit unchanged when `|x| <= n`.
pub fn truncate_in_place(x: &mut [f64], n: u64) {
    assert!(n >= 1, "truncation level must be at least 1");
    let level = n as f64;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > level {
        if x.len() == 1 {
            x[0] = level.copysign(x[0]);
            return;
        }
        let factor = level / norm;
        for v in x {
            *v *= factor;
        }
    }
}

/// `f_n = f - f(·,0,0) + q_n(f(·,0,0))`: same Lipschitz constant, bounded
/// zero driver.
#[derive(Debug, Clone)]
pub struct TruncatedGenerator {
    inner: Arc<dyn Generator>,
    level: u64,
}

impl TruncatedGenerator {
    fn shift(&self, s: f64, z_width: usize, out: &mut [f64]) {
        let mut f0 = vec![0.0; out.len()];
        self.inner.zero_driver(s, z_width, &mut f0);
        let mut q = f0.clone();
        truncate_in_place(&mut q, self.level);
        for ((o, a), b) in out.iter_mut().zip(&q).zip(&f0) {
            *o = a - b;
        }
    }
}

impl Generator for TruncatedGenerator {
    fn evaluate(
        &self,
        s: f64,
        alpha: &GridMeasure,
        y: &Segment<'_>,
        z: &Segment<'_>,
        out: &mut [f64],
    ) {
        self.inner.evaluate(s, alpha, y, z, out);
        let mut shift = vec![0.0; out.len()];
        self.shift(s, z.width(), &mut shift);
        for (o, d) in out.iter_mut().zip(&shift) {
            if *d != 0.0 {
                *o += d;
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }

    fn delay(&self) -> &DelayMeasure {
        self.inner.delay()
    }

    fn uses_state(&self) -> bool {
        self.inner.uses_state()
    }

    fn uses_control(&self) -> bool {
        self.inner.uses_control()
    }

    fn zero_driver(&self, s: f64, z_width: usize, out: &mut [f64]) {
        self.inner.zero_driver(s, z_width, out);
        truncate_in_place(out, self.level);
    }
}

/// Terminal value `ξ` as a functional of the discrete Brownian path.
pub trait TerminalCondition: Send + Sync + fmt::Debug {
    /// Writes `ξ(path)` into `out` (length `k`).
    fn evaluate(&self, path: PathView<'_>, out: &mut [f64]);

    /// Analytic `E|ξ|^p` for a scalar terminal value on horizon `T`, if known.
    fn moment_hint(&self, _p: f64, _horizon: f64) -> Option<f64> {
        None
    }

    /// Pathwise bound `sup |ξ|`, if known.
    fn bound(&self) -> Option<f64> {
        None
    }
}

/// `E|N(0, T)|^q = (2T)^{q/2} Γ((q+1)/2) / √π`.
fn gaussian_abs_moment(q: f64, horizon: f64) -> f64 {
    (2.0 * horizon).powf(q / 2.0) * statrs::function::gamma::gamma((q + 1.0) / 2.0)
        / std::f64::consts::PI.sqrt()
}

/// `ξ = W(T)`; component `a` of `ξ` reads Brownian component `a mod d`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BrownianTerminal;

impl TerminalCondition for BrownianTerminal {
    fn evaluate(&self, path: PathView<'_>, out: &mut [f64]) {
        let w = path.terminal();
        for (a, o) in out.iter_mut().enumerate() {
            *o = w[a % w.len()];
        }
    }

    fn moment_hint(&self, p: f64, horizon: f64) -> Option<f64> {
        Some(gaussian_abs_moment(p, horizon))
    }
}

/// `ξ = W(T)²`, componentwise as for [`BrownianTerminal`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredBrownianTerminal;

impl TerminalCondition for SquaredBrownianTerminal {
    fn evaluate(&self, path: PathView<'_>, out: &mut [f64]) {
        let w = path.terminal();
        for (a, o) in out.iter_mut().enumerate() {
            let x = w[a % w.len()];
            *o = x * x;
        }
    }

    fn moment_hint(&self, p: f64, horizon: f64) -> Option<f64> {
        Some(gaussian_abs_moment(2.0 * p, horizon))
    }
}

/// Deterministic terminal value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantTerminal(pub Vec<f64>);

impl TerminalCondition for ConstantTerminal {
    fn evaluate(&self, _: PathView<'_>, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }

    fn moment_hint(&self, p: f64, _: f64) -> Option<f64> {
        Some(self.0.iter().map(|x| x * x).sum::<f64>().sqrt().powf(p))
    }

    fn bound(&self) -> Option<f64> {
        Some(self.0.iter().map(|x| x * x).sum::<f64>().sqrt())
    }
}

/// `factor · ξ`.
#[derive(Debug, Clone)]
pub struct ScaledTerminal {
    pub inner: Arc<dyn TerminalCondition>,
    pub factor: f64,
}

impl TerminalCondition for ScaledTerminal {
    fn evaluate(&self, path: PathView<'_>, out: &mut [f64]) {
        self.inner.evaluate(path, out);
        for o in out {
            *o *= self.factor;
        }
    }

    fn moment_hint(&self, p: f64, horizon: f64) -> Option<f64> {
        self.inner
            .moment_hint(p, horizon)
            .map(|m| self.factor.abs().powf(p) * m)
    }

    fn bound(&self) -> Option<f64> {
        self.inner.bound().map(|b| self.factor.abs() * b)
    }
}

/// `q_n(ξ)`.
#[derive(Debug, Clone)]
pub struct TruncatedTerminal {
    pub inner: Arc<dyn TerminalCondition>,
    pub level: u64,
}

impl TerminalCondition for TruncatedTerminal {
    fn evaluate(&self, path: PathView<'_>, out: &mut [f64]) {
        self.inner.evaluate(path, out);
        truncate_in_place(out, self.level);
    }

    fn bound(&self) -> Option<f64> {
        let n = self.level as f64;
        Some(self.inner.bound().map_or(n, |b| b.min(n)))
    }
}

/// Terminal value, driver, horizon and integrability exponent of a delayed BSDE.
#[derive(Debug, Clone)]
pub struct BsdeProblem {
    horizon: f64,
    state_dim: usize,
    noise_dim: usize,
    p: f64,
    lipschitz: f64,
    generator: Arc<dyn Generator>,
    terminal: Arc<dyn TerminalCondition>,
}

impl BsdeProblem {
    pub fn new(
        horizon: f64,
        state_dim: usize,
        noise_dim: usize,
        p: f64,
        generator: Arc<dyn Generator>,
        terminal: Arc<dyn TerminalCondition>,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain {
                name: "horizon",
                value: horizon,
                domain: "(0, inf)",
            });
        }
        if !(p > 1.0) {
            return Err(Error::Domain {
                name: "integrability exponent",
                value: p,
                domain: "(1, inf)",
            });
        }
        if state_dim == 0 || noise_dim == 0 {
            return Err(Error::InvalidProblem("dimensions must be at least 1".into()));
        }
        generator.delay().check_horizon(horizon)?;
        Ok(Self {
            horizon,
            state_dim,
            noise_dim,
            p,
            lipschitz: generator.lipschitz(),
            generator,
            terminal,
        })
    }

    /// Overrides the Lipschitz constant used by condition checks.
    pub fn with_lipschitz(mut self, k: f64) -> Self {
        self.lipschitz = k;
        self
    }

    pub fn with_terminal(mut self, terminal: Arc<dyn TerminalCondition>) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_generator(mut self, generator: Arc<dyn Generator>) -> Self {
        self.generator = generator;
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn generator(&self) -> &Arc<dyn Generator> {
        &self.generator
    }

    pub fn terminal(&self) -> &Arc<dyn TerminalCondition> {
        &self.terminal
    }
}

/// Problem with `ξ_n = q_n(ξ)` and `f_n = f - f(·,0,0) + q_n(f(·,0,0))`.
pub fn truncate_problem(problem: &BsdeProblem, n: u64) -> BsdeProblem {
    assert!(n >= 1, "truncation level must be at least 1");
    problem
        .clone()
        .with_terminal(Arc::new(TruncatedTerminal {
            inner: problem.terminal.clone(),
            level: n,
        }))
        .with_generator(Arc::new(TruncatedGenerator {
            inner: problem.generator.clone(),
            level: n,
        }))
}

/// Largest observed `|f(s,y,z) - f(s,y',z')|² / (K ∫(|Δy|² + |Δz|²) α(du))`
/// over random segment pairs on a grid of `nodes` points with step `step`.
///
/// Values at most `1` (up to rounding) support the declared `K`.
pub fn lipschitz_probe(
    generator: &dyn Generator,
    k: usize,
    d: usize,
    step: f64,
    nodes: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let alpha = generator.delay().on_grid(step)?;
    let kk = generator.lipschitz();
    let mut rng = path_rng(seed, 0);
    let mut uniform = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0;
    let mut worst: f64 = 0.0;
    let (mut f1, mut f2) = (vec![0.0; k], vec![0.0; k]);
    for _ in 0..samples {
        let y1: Vec<f64> = (0..nodes * k).map(|_| uniform()).collect();
        let y2: Vec<f64> = (0..nodes * k).map(|_| uniform()).collect();
        let z1: Vec<f64> = (0..nodes * k * d).map(|_| uniform()).collect();
        let z2: Vec<f64> = (0..nodes * k * d).map(|_| uniform()).collect();
        let anchor = (uniform().abs() * 0.5 * nodes as f64) as usize % nodes;
        let s = anchor as f64 * step;
        let sy1 = Segment::state(&y1, k, step).with_anchor_index(anchor);
        let sy2 = Segment::state(&y2, k, step).with_anchor_index(anchor);
        let sz1 = Segment::control(&z1, k * d, step).with_anchor_index(anchor);
        let sz2 = Segment::control(&z2, k * d, step).with_anchor_index(anchor);
        generator.evaluate(s, &alpha, &sy1, &sz1, &mut f1);
        generator.evaluate(s, &alpha, &sy2, &sz2, &mut f2);
        let lhs: f64 = f1.iter().zip(&f2).map(|(a, b)| (a - b) * (a - b)).sum();
        let mut rhs = 0.0;
        for atom in alpha.atoms() {
            let dy = match (sy1.back(atom.steps), sy2.back(atom.steps)) {
                (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
                _ => 0.0,
            };
            let dz = match (sz1.back(atom.steps), sz2.back(atom.steps)) {
                (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
                _ => 0.0,
            };
            rhs += atom.weight * (dy + dz);
        }
        rhs *= kk;
        if lhs > 0.0 {
            worst = worst.max(if rhs > 0.0 { lhs / rhs } else { f64::INFINITY });
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::{PathEnsemble, TimeGrid};
    use proptest::prelude::*;

    fn eval(g: &dyn Generator, s: f64, y: &[f64], z: &[f64], step: f64) -> f64 {
        let anchor = (s / step).round() as usize;
        let ys = Segment::state(y, 1, step).with_anchor_index(anchor);
        let zs = Segment::control(z, 1, step).with_anchor_index(anchor);
        evaluate_generator(g, s, &ys, &zs).unwrap()[0]
    }

    #[test]
    fn null_coefficients_give_zero_generator() {
        let g = linear_delayed_generator(
            StepFunction::constant(0.0),
            vec![StepFunction::constant(0.0)],
            DelayMeasure::uniform(1.0, 5).unwrap(),
        )
        .unwrap();
        let y = [1.0, -2.0, 3.0, 0.5, 9.0];
        assert_eq!(eval(&g, 1.0, &y, &y, 0.25), 0.0);
        assert_eq!(g.lipschitz(), 0.0);
    }

    #[test]
    fn no_delay_linear_reduces_to_rate_times_state() {
        let g = linear_delayed_generator(
            StepFunction::constant(0.3),
            vec![StepFunction::constant(0.0)],
            DelayMeasure::dirac_zero(),
        )
        .unwrap();
        let y = [1.0, -2.0, 3.0];
        let z = [5.0, 5.0, 5.0];
        assert!((eval(&g, 0.5, &y, &z, 0.25) - 0.3 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn linear_with_single_lag() {
        let g = linear_delayed_generator(
            StepFunction::constant(0.1),
            vec![StepFunction::constant(0.0)],
            DelayMeasure::dirac(-0.5).unwrap(),
        )
        .unwrap();
        let y = [2.0; 5];
        let z = [0.0; 5];
        for s in [0.5, 0.75, 1.0] {
            assert!((eval(&g, s, &y, &z, 0.25) - 0.2).abs() < 1e-15);
        }
        // coefficients vanish before time zero
        assert_eq!(eval(&g, 0.25, &y, &z, 0.25), 0.0);
        assert!((g.lipschitz() - 0.01).abs() < 1e-17);
    }

    #[test]
    fn single_lag_reads_initial_value_early() {
        let g = single_lag_generator(0.1, 0.5).unwrap();
        let y = [1.0; 5];
        for s in [0.0, 0.25, 0.5, 1.0] {
            assert!((eval(&g, s, &y, &y, 0.25) - 0.1).abs() < 1e-16);
        }
        let ramp = [4.0, 1.0, 2.0, 3.0, 5.0];
        assert!((eval(&g, 0.25, &ramp, &ramp, 0.25) - 0.4).abs() < 1e-15);
        assert!((eval(&g, 1.0, &ramp, &ramp, 0.25) - 0.2).abs() < 1e-15);
        assert!((g.lipschitz() - 0.01).abs() < 1e-17);
        assert_eq!(single_lag_generator(0.0, 0.5).unwrap().lipschitz(), 0.0);
    }

    #[test]
    fn generators_vanish_before_zero() {
        let g = single_lag_generator(2.0, 0.25).unwrap();
        let y = [1.0; 5];
        let ys = Segment::state(&y, 1, 0.25);
        let mut out = [7.0];
        let alpha = g.delay().on_grid(0.25).unwrap();
        g.evaluate(-0.5, &alpha, &ys, &ys, &mut out);
        assert_eq!(out, [0.0]);
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(truncate_scalar(&[0.0], 1), vec![0.0]);
        assert_eq!(truncate_scalar(&[3.0], 2), vec![2.0]);
        assert_eq!(truncate_scalar(&[3.0], 5), vec![3.0]);
        assert_eq!(truncate_scalar(&[-3.0], 1), vec![-1.0]);
        let v = truncate_scalar(&[3.0, 4.0], 1);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn truncated_zero_driver() {
        let g: Arc<dyn Generator> = Arc::new(Drifted::new(Arc::new(ZeroGenerator::default()), vec![3.0]));
        let problem = BsdeProblem::new(1.0, 1, 1, 1.5, g, Arc::new(ConstantTerminal(vec![0.0]))).unwrap();
        let t = truncate_problem(&problem, 1);
        let mut out = [0.0];
        t.generator().zero_driver(0.3, 1, &mut out);
        assert_eq!(out, [1.0]);
        let y = [0.0; 3];
        assert!((eval(t.generator().as_ref(), 0.5, &y, &y, 0.25) - 1.0).abs() < 1e-15);
        assert_eq!(t.lipschitz(), problem.lipschitz());
    }

    #[test]
    fn truncation_of_brownian_terminal() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let ens = PathEnsemble::simulate(&grid, 200, 1, 3).unwrap();
        let problem = BsdeProblem::new(
            1.0,
            1,
            1,
            1.5,
            Arc::new(ZeroGenerator::default()),
            Arc::new(BrownianTerminal),
        )
        .unwrap();
        let t = truncate_problem(&problem, 1);
        let mut out = [0.0];
        for m in 0..200 {
            let w = ens.path(m).terminal()[0];
            t.terminal().evaluate(ens.path(m), &mut out);
            assert_eq!(out[0], if w.abs() > 1.0 { w.signum() } else { w });
            assert!(out[0].abs() <= 1.0);
        }
    }

    #[test]
    fn inactive_truncation_is_exact() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let ens = PathEnsemble::simulate(&grid, 50, 1, 3).unwrap();
        let bounded: Arc<dyn TerminalCondition> = Arc::new(TruncatedTerminal {
            inner: Arc::new(BrownianTerminal),
            level: 2,
        });
        let g: Arc<dyn Generator> = Arc::new(single_lag_generator(0.2, 0.5).unwrap());
        let problem = BsdeProblem::new(1.0, 1, 1, 1.5, g, bounded).unwrap();
        let t = truncate_problem(&problem, 2);
        let (mut a, mut b) = ([0.0], [0.0]);
        for m in 0..50 {
            problem.terminal().evaluate(ens.path(m), &mut a);
            t.terminal().evaluate(ens.path(m), &mut b);
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
        let y = [0.7, -0.2, 1.3, 0.4, 2.2];
        for s in [0.0, 0.5, 1.0] {
            let x = eval(problem.generator().as_ref(), s, &y, &y, 0.25);
            let z = eval(t.generator().as_ref(), s, &y, &y, 0.25);
            assert_eq!(x.to_bits(), z.to_bits());
        }
    }

    #[test]
    fn brownian_moments() {
        // E|W_1|^2 = 1, E|W_1|^4 = 3, E|W_2| = 2/sqrt(pi)
        assert!((BrownianTerminal.moment_hint(2.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((SquaredBrownianTerminal.moment_hint(2.0, 1.0).unwrap() - 3.0).abs() < 1e-12);
        let e = BrownianTerminal.moment_hint(1.0, 2.0).unwrap();
        assert!((e - 2.0 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn problem_validation() {
        let g: Arc<dyn Generator> = Arc::new(ZeroGenerator::default());
        let xi: Arc<dyn TerminalCondition> = Arc::new(BrownianTerminal);
        assert!(BsdeProblem::new(1.0, 1, 1, 1.0, g.clone(), xi.clone()).is_err());
        assert!(BsdeProblem::new(0.0, 1, 1, 2.0, g.clone(), xi.clone()).is_err());
        assert!(BsdeProblem::new(1.0, 0, 1, 2.0, g.clone(), xi.clone()).is_err());
        let far: Arc<dyn Generator> = Arc::new(single_lag_generator(0.1, 2.0).unwrap());
        assert!(BsdeProblem::new(1.0, 1, 1, 2.0, far, xi).is_err());
    }

    #[test]
    fn builtin_generators_satisfy_declared_lipschitz() {
        let step = 0.125;
        let gens: Vec<(Box<dyn Generator>, usize)> = vec![
            (Box::new(single_lag_generator(0.7, 0.25).unwrap()), 1),
            (Box::new(single_lag_generator(3.0, 1.0).unwrap()), 1),
            (
                Box::new(
                    linear_delayed_generator(
                        StepFunction::from_values((0..9).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap(),
                        vec![StepFunction::constant(0.4), StepFunction::constant(-0.2)],
                        DelayMeasure::uniform(1.0, 9).unwrap(),
                    )
                    .unwrap(),
                ),
                2,
            ),
            (
                Box::new(
                    linear_delayed_generator(
                        StepFunction::constant(0.05),
                        vec![StepFunction::constant(0.1)],
                        DelayMeasure::new(vec![(-0.5, 0.3), (-0.125, 0.2), (0.0, 0.5)]).unwrap(),
                    )
                    .unwrap(),
                ),
                1,
            ),
        ];
        for (g, d) in &gens {
            let ratio = lipschitz_probe(g.as_ref(), 2, *d, step, 9, 10_000, 17).unwrap();
            assert!(ratio <= 1.0 + 1e-9, "{g:?}: {ratio}");
        }
    }

    proptest! {
        #[test]
        fn truncation_bounds_and_nonexpansive(x in -50.0f64..50.0, y in -50.0f64..50.0, n in 1u64..20) {
            let qx = truncate_scalar(&[x], n)[0];
            let qy = truncate_scalar(&[y], n)[0];
            prop_assert!(qx.abs() <= n as f64);
            prop_assert!(qx * x >= 0.0);
            if x.abs() <= n as f64 { prop_assert_eq!(qx, x); }
            prop_assert!((qx - qy).abs() <= (x - y).abs() * (1.0 + 1e-12));
        }

        #[test]
        fn vector_truncation_within_twice_the_distance(
            x in prop::collection::vec(-20.0f64..20.0, 3),
            y in prop::collection::vec(-20.0f64..20.0, 3),
            n in 1u64..10,
        ) {
            let qx = truncate_scalar(&x, n);
            let qy = truncate_scalar(&y, n);
            let dq: f64 = qx.iter().zip(&qy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let d: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            prop_assert!(dq <= 2.0 * d + 1e-12);
        }

        #[test]
        fn truncation_error_nonincreasing_in_level(x in -100.0f64..100.0) {
            let mut prev = f64::INFINITY;
            for n in 1..40u64 {
                let e = (truncate_scalar(&[x], n)[0] - x).abs();
                prop_assert!(e <= prev);
                prev = e;
            }
        }
    }
}
