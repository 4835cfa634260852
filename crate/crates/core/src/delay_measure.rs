//! Delay probability measures and delayed averages of path segments.
//!
//! A delayed generator sees, at time `s`, the past of the solution through
//! `∫_{-T}^0 g(s + u) α(du)`. Measures here are finitely atomic; continuous
//! measures enter through quadrature atoms (see [`DelayMeasure::uniform`]).
//!
//! Values before time zero follow the extension rule of the equation: the
//! state component holds its initial value, the control component is zero.

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;
const ALIGN_TOL: f64 = 1e-9;

/// One atom of a delay measure: a non-positive lag and its probability weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub lag: f64,
    pub weight: f64,
}

/// Finitely atomic probability measure on `[-T, 0]`.
///
/// Atoms are kept sorted by lag (most negative first) with pairwise distinct
/// lags. The horizon bound is checked separately by [`DelayMeasure::check_horizon`]
/// because the measure itself does not know `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMeasure {
    atoms: Vec<Atom>,
}

impl DelayMeasure {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("empty atom list".into()));
        }
        let mut atoms: Vec<Atom> = atoms
            .into_iter()
            .map(|(lag, weight)| Atom { lag, weight })
            .collect();
        for a in &atoms {
            if !a.lag.is_finite() || a.lag > 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "lag {} must be finite and non-positive",
                    a.lag
                )));
            }
            if !a.weight.is_finite() || a.weight < 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "weight {} must be finite and non-negative",
                    a.weight
                )));
            }
        }
        atoms.sort_by(|a, b| a.lag.total_cmp(&b.lag));
        if atoms.windows(2).any(|w| w[0].lag == w[1].lag) {
            return Err(Error::InvalidMeasure("duplicate lags".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { atoms })
    }

    /// Point mass at lag zero: the generator only sees the present.
    pub fn dirac_zero() -> Self {
        Self {
            atoms: vec![Atom {
                lag: 0.0,
                weight: 1.0,
            }],
        }
    }

    /// Point mass at `lag` (`lag <= 0`).
    pub fn dirac(lag: f64) -> Result<Self> {
        Self::new(vec![(lag, 1.0)])
    }

    /// Trapezoidal quadrature of the uniform law on `[-horizon, 0]` with
    /// `n_atoms` equally spaced nodes, both endpoints included.
    pub fn uniform(horizon: f64, n_atoms: usize) -> Result<Self> {
        if n_atoms < 2 {
            return Err(Error::InvalidMeasure(
                "uniform quadrature needs at least 2 atoms".into(),
            ));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidMeasure(format!(
                "horizon {horizon} must be positive"
            )));
        }
        let intervals = (n_atoms - 1) as f64;
        let atoms = (0..n_atoms)
            .map(|i| {
                let lag = -horizon * (n_atoms - 1 - i) as f64 / intervals;
                let weight = if i == 0 || i == n_atoms - 1 {
                    0.5 / intervals
                } else {
                    1.0 / intervals
                };
                (lag, weight)
            })
            .collect();
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_dirac_zero(&self) -> bool {
        self.atoms.len() == 1 && self.atoms[0].lag == 0.0
    }

    /// True if some atom looks strictly into the past.
    pub fn has_memory(&self) -> bool {
        self.atoms.iter().any(|a| a.lag < 0.0)
    }

    /// Checks `lag >= -horizon` for every atom. An atom exactly at `-horizon`
    /// is allowed; at any `s <= horizon` it reads the held initial value.
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        match self.atoms.first() {
            Some(a) if a.lag < -horizon * (1.0 + 1e-12) => Err(Error::InvalidMeasure(format!(
                "lag {} lies outside [-{horizon}, 0]",
                a.lag
            ))),
            _ => Ok(()),
        }
    }

    /// Converts lags into whole grid steps, failing on any lag that is not a
    /// multiple of `step`.
    pub fn on_grid(&self, step: f64) -> Result<GridMeasure> {
        let atoms = self
            .atoms
            .iter()
            .map(|a| {
                let steps = lag_steps(a.lag, step)?;
                Ok(GridAtom {
                    steps,
                    weight: a.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GridMeasure { atoms })
    }

    /// Snaps every lag to the nearest multiple of `step`, merging atoms that
    /// land on the same node. Exact midpoints go to the smaller delay.
    pub fn align(&self, step: f64) -> Self {
        assert!(step > 0.0, "grid step must be positive");
        let mut merged: Vec<Atom> = Vec::with_capacity(self.atoms.len());
        for a in &self.atoms {
            let x = -a.lag / step;
            let n = if x - x.floor() == 0.5 {
                x.floor()
            } else {
                x.round()
            };
            let lag = if n == 0.0 { 0.0 } else { -n * step };
            match merged.last_mut() {
                Some(last) if last.lag == lag => last.weight += a.weight,
                _ => merged.push(Atom {
                    lag,
                    weight: a.weight,
                }),
            }
        }
        Self { atoms: merged }
    }
}

fn lag_steps(lag: f64, step: f64) -> Result<usize> {
    let x = -lag / step;
    let n = x.round();
    if (x - n).abs() > ALIGN_TOL * x.abs().max(1.0) {
        return Err(Error::Alignment { lag, step });
    }
    Ok(n as usize)
}

/// Lag measured in whole grid steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAtom {
    pub steps: usize,
    pub weight: f64,
}

/// A delay measure resolved against a fixed grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    atoms: Vec<GridAtom>,
}

impl GridMeasure {
    pub fn atoms(&self) -> &[GridAtom] {
        &self.atoms
    }

    /// Distinct non-zero lags in steps, in atom order.
    pub fn past_lags(&self) -> impl Iterator<Item = usize> + '_ {
        self.atoms.iter().map(|a| a.steps).filter(|&s| s > 0)
    }

    /// Writes `Σ w_i seg(t + u_i)` into `out` (length = segment width).
    pub fn average_into(&self, seg: &Segment<'_>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), seg.width());
        out.fill(0.0);
        for atom in &self.atoms {
            if let Some(v) = seg.back(atom.steps) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += atom.weight * x;
                }
            }
        }
    }
}

/// How a segment is continued before time zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extension {
    /// `Y(s) = Y(0)` for `s < 0`.
    HoldInitial,
    /// `Z(s) = 0` for `s < 0`.
    Zero,
}

/// Read-only view of one path's grid values, anchored at a grid time.
///
/// `values` holds consecutive grid nodes `t_0, t_1, ...`, each `width` wide.
/// Only nodes at or before the anchor are reachable; there is no
/// interpolation between nodes.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    values: &'a [f64],
    width: usize,
    step: f64,
    anchor: usize,
    extension: Extension,
}

impl<'a> Segment<'a> {
    /// Segment anchored at the last stored node.
    pub fn new(values: &'a [f64], width: usize, step: f64, extension: Extension) -> Self {
        assert!(width > 0 && values.len().is_multiple_of(width) && !values.is_empty());
        Self {
            values,
            width,
            step,
            anchor: values.len() / width - 1,
            extension,
        }
    }

    /// State-type segment (holds `Y(0)` before zero).
    pub fn state(values: &'a [f64], width: usize, step: f64) -> Self {
        Self::new(values, width, step, Extension::HoldInitial)
    }

    /// Control-type segment (zero before zero).
    pub fn control(values: &'a [f64], width: usize, step: f64) -> Self {
        Self::new(values, width, step, Extension::Zero)
    }

    pub fn with_anchor_index(mut self, anchor: usize) -> Self {
        assert!(anchor < self.values.len() / self.width);
        self.anchor = anchor;
        self
    }

    /// Re-anchors at time `t`, which must be a stored grid node.
    pub fn anchored_at(self, t: f64) -> Result<Self> {
        let idx = lag_steps(-t, self.step)?;
        if idx >= self.values.len() / self.width {
            return Err(Error::Domain {
                name: "segment anchor",
                value: t,
                domain: "stored grid times",
            });
        }
        Ok(self.with_anchor_index(idx))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn anchor_index(&self) -> usize {
        self.anchor
    }

    pub fn anchor_time(&self) -> f64 {
        self.anchor as f64 * self.step
    }

    pub fn extension(&self) -> Extension {
        self.extension
    }

    /// Value `steps` grid steps before the anchor; `None` stands for zero.
    pub fn back(&self, steps: usize) -> Option<&'a [f64]> {
        if steps <= self.anchor {
            let i = (self.anchor - steps) * self.width;
            Some(&self.values[i..i + self.width])
        } else {
            match self.extension {
                Extension::HoldInitial => Some(&self.values[..self.width]),
                Extension::Zero => None,
            }
        }
    }

    /// Grid index `steps` before the anchor, negative before time zero.
    pub fn index_back(&self, steps: usize) -> i64 {
        self.anchor as i64 - steps as i64
    }
}

/// `∫ seg(t + u) α(du)` for the atomic measure `alpha`, with `seg` anchored at `t`.
pub fn delay_average(seg: &Segment<'_>, alpha: &DelayMeasure, t: f64) -> Result<Vec<f64>> {
    let seg = seg.anchored_at(t)?;
    let grid = alpha.on_grid(seg.step)?;
    let mut out = vec![0.0; seg.width];
    grid.average_into(&seg, &mut out);
    Ok(out)
}

/// Snaps `alpha` onto multiples of `grid_step`.
pub fn align_measure(alpha: &DelayMeasure, grid_step: f64) -> DelayMeasure {
    alpha.align(grid_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> Vec<f64> {
        vec![0.0, 0.25, 0.5, 0.75, 1.0]
    }

    #[test]
    fn dirac_zero_is_identity() {
        let v = ramp();
        let seg = Segment::state(&v, 1, 0.25);
        for (j, &x) in v.iter().enumerate() {
            let t = j as f64 * 0.25;
            assert_eq!(delay_average(&seg, &DelayMeasure::dirac_zero(), t).unwrap(), vec![x]);
        }
    }

    #[test]
    fn constant_segment_averages_to_constant() {
        let v = vec![3.5; 5];
        let seg = Segment::state(&v, 1, 0.25);
        let alpha = DelayMeasure::uniform(1.0, 5).unwrap();
        let avg = delay_average(&seg, &alpha, 0.5).unwrap();
        assert!((avg[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn two_atom_average_on_ramp() {
        let v = ramp();
        let seg = Segment::state(&v, 1, 0.25);
        let alpha = DelayMeasure::new(vec![(-0.5, 0.5), (0.0, 0.5)]).unwrap();
        let avg = delay_average(&seg, &alpha, 0.75).unwrap();
        assert!((avg[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn extension_rules_before_zero() {
        let v = vec![2.0, 5.0, 7.0];
        let alpha = DelayMeasure::dirac(-1.0).unwrap();
        let y = Segment::state(&v, 1, 0.25);
        let z = Segment::control(&v, 1, 0.25);
        assert_eq!(delay_average(&y, &alpha, 0.5).unwrap(), vec![2.0]);
        assert_eq!(delay_average(&z, &alpha, 0.5).unwrap(), vec![0.0]);
    }

    #[test]
    fn misaligned_lag_is_rejected() {
        let v = ramp();
        let seg = Segment::state(&v, 1, 0.25);
        let alpha = DelayMeasure::dirac(-0.3).unwrap();
        assert!(matches!(
            delay_average(&seg, &alpha, 1.0),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn invalid_measures() {
        assert!(DelayMeasure::new(vec![]).is_err());
        assert!(DelayMeasure::new(vec![(0.1, 1.0)]).is_err());
        assert!(DelayMeasure::new(vec![(-0.1, 0.5)]).is_err());
        assert!(DelayMeasure::new(vec![(-0.1, 0.5), (-0.1, 0.5)]).is_err());
        assert!(DelayMeasure::new(vec![(-0.1, 1.5), (0.0, -0.5)]).is_err());
    }

    #[test]
    fn atoms_are_sorted() {
        let m = DelayMeasure::new(vec![(0.0, 0.25), (-0.5, 0.75)]).unwrap();
        assert_eq!(m.atoms()[0].lag, -0.5);
    }

    #[test]
    fn uniform_trapezoid_weights() {
        let m = DelayMeasure::uniform(2.0, 5).unwrap();
        let lags: Vec<f64> = m.atoms().iter().map(|a| a.lag).collect();
        assert_eq!(lags, vec![-2.0, -1.5, -1.0, -0.5, 0.0]);
        let w: Vec<f64> = m.atoms().iter().map(|a| a.weight).collect();
        assert_eq!(w, vec![0.125, 0.25, 0.25, 0.25, 0.125]);
        assert!(m.check_horizon(2.0).is_ok());
        assert!(m.check_horizon(1.5).is_err());
    }

    #[test]
    fn align_fixed_point() {
        let m = DelayMeasure::new(vec![(-0.5, 0.25), (-0.25, 0.5), (0.0, 0.25)]).unwrap();
        assert_eq!(align_measure(&m, 0.25), m);
    }

    #[test]
    fn align_nearest_multiple() {
        let m = DelayMeasure::dirac(-0.49).unwrap();
        let a = align_measure(&m, 0.25);
        assert_eq!(a.atoms(), &[Atom { lag: -0.5, weight: 1.0 }]);
    }

    #[test]
    fn align_splits_close_atoms() {
        let m = DelayMeasure::new(vec![(-0.13, 0.5), (-0.12, 0.5)]).unwrap();
        let a = align_measure(&m, 0.25);
        assert_eq!(
            a.atoms(),
            &[
                Atom { lag: -0.25, weight: 0.5 },
                Atom { lag: 0.0, weight: 0.5 }
            ]
        );
    }

    #[test]
    fn align_merges_and_ties_toward_zero() {
        let m = DelayMeasure::new(vec![(-0.375, 0.5), (-0.3, 0.5)]).unwrap();
        let a = align_measure(&m, 0.25);
        assert_eq!(a.atoms(), &[Atom { lag: -0.25, weight: 1.0 }]);
        let tie = align_measure(&DelayMeasure::dirac(-0.125).unwrap(), 0.25);
        assert_eq!(tie.atoms()[0].lag, 0.0);
    }

    fn arb_measure() -> impl Strategy<Value = DelayMeasure> {
        prop::collection::btree_set(0usize..8, 1..5).prop_flat_map(|lags| {
            let n = lags.len();
            (Just(lags), prop::collection::vec(0.01f64..1.0, n)).prop_map(|(lags, w)| {
                let total: f64 = w.iter().sum();
                let atoms = lags
                    .into_iter()
                    .zip(w)
                    .map(|(l, w)| (-(l as f64) * 0.125, w / total))
                    .collect::<Vec<_>>();
                DelayMeasure::new(atoms).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn average_is_linear(
            alpha in arb_measure(),
            s1 in prop::collection::vec(-5.0f64..5.0, 9),
            s2 in prop::collection::vec(-5.0f64..5.0, 9),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            anchor in 0usize..9,
        ) {
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let t = anchor as f64 * 0.125;
            for ext in [Extension::HoldInitial, Extension::Zero] {
                let f = |v: &[f64]| delay_average(&Segment::new(v, 1, 0.125, ext), &alpha, t).unwrap()[0];
                let lhs = f(&mix);
                let rhs = a * f(&s1) + b * f(&s2);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }

        #[test]
        fn average_is_bounded_by_sampled_sup(
            alpha in arb_measure(),
            s in prop::collection::vec(-5.0f64..5.0, 9),
            anchor in 0usize..9,
        ) {
            let seg = Segment::state(&s, 1, 0.125).with_anchor_index(anchor);
            let grid = alpha.on_grid(0.125).unwrap();
            let sup = grid
                .atoms()
                .iter()
                .map(|a| seg.back(a.steps).map_or(0.0, |v| v[0].abs()))
                .fold(0.0, f64::max);
            let mut out = [0.0];
            grid.average_into(&seg, &mut out);
            prop_assert!(out[0].abs() <= sup * (1.0 + 1e-12));
        }
    }
}
