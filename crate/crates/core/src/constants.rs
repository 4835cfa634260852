//! Closed-form constants of the a priori estimates and the existence /
//! uniqueness conditions, each reported with a pass/fail margin.
//!
//! Power terms are evaluated in the log domain: exponents reach `p²` and the
//! bases can be large near the edge of `2KT < 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Absolute tolerance of the threshold bisection.
pub const BISECTION_TOL: f64 = 1e-10;

/// Which formula for the `Z`-control coefficient to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The expressions obtained at the end of the estimate's derivation.
    #[default]
    Proof,
    /// The compact expression `[2(1−2TK)^{-1}(2K(T+1)+1)]^{p/2}`.
    Statement,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proof" => Ok(Variant::Proof),
            "statement" => Ok(Variant::Statement),
            _ => Err(Error::config("variant", format!("expected `proof` or `statement`, got `{s}`"))),
        }
    }
}

/// Identifier of a checked condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionId {
    /// `2KT < 1`.
    Horizon,
    /// `β_p < 1`, `p ≥ 2`.
    AprioriHighP,
    /// `β̄_p < 1`, `1 < p < 2`.
    AprioriLowP,
    /// `28TK·max(1,T) < 1`.
    L2Existence,
    /// `C_p(K,T) < 1`, `1 < p < 2`.
    PicardContraction,
}

impl ConditionId {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionId::Horizon => "horizon",
            ConditionId::AprioriHighP => "apriori_high_p",
            ConditionId::AprioriLowP => "apriori_low_p",
            ConditionId::L2Existence => "l2_existence",
            ConditionId::PicardContraction => "picard_contraction",
        }
    }

    /// Value of the condition's left-hand side at `(p, K, T)`.
    pub fn value(self, p: f64, k: f64, t: f64, variant: Variant) -> Result<f64> {
        match self {
            ConditionId::Horizon => Ok(2.0 * k * t),
            ConditionId::AprioriHighP => apriori_value(p, k, t, variant, true),
            ConditionId::AprioriLowP => apriori_value(p, k, t, variant, false),
            ConditionId::L2Existence => Ok(l2_value(k, t)),
            ConditionId::PicardContraction => picard_contraction_constant(p, k, t),
        }
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ConditionId::Horizon,
            ConditionId::AprioriHighP,
            ConditionId::AprioriLowP,
            ConditionId::L2Existence,
            ConditionId::PicardContraction,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| Error::config("condition", format!("unknown condition `{s}`")))
    }
}

impl Serialize for ConditionId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn opt_finite_or_null<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        _ => s.serialize_none(),
    }
}

/// One condition `value < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionFlag {
    pub id: ConditionId,
    #[serde(serialize_with = "finite_or_null")]
    pub value: f64,
    pub threshold: f64,
    pub holds: bool,
    #[serde(serialize_with = "finite_or_null")]
    pub margin: f64,
}

impl ConditionFlag {
    pub fn new(id: ConditionId, value: f64) -> Self {
        let margin = 1.0 - value;
        Self {
            id,
            value,
            threshold: 1.0,
            holds: margin > 0.0,
            margin,
        }
    }
}

/// All constants and conditions at one `(p, K, T)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub p: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub variant: Variant,
    /// `λ_p` for `p ≥ 2`, `λ̄_p` for `1 < p < 2`.
    pub bdg_constant: f64,
    /// `d_p` or `d̄_p`; absent when `2KT ≥ 1`.
    #[serde(serialize_with = "opt_finite_or_null")]
    pub z_control: Option<f64>,
    /// `β_p` or `β̄_p`; absent when `2KT ≥ 1`.
    #[serde(serialize_with = "opt_finite_or_null")]
    pub apriori_beta: Option<f64>,
    pub l2_value: f64,
    /// `C_p(K,T)`, only for `1 < p < 2`.
    #[serde(serialize_with = "opt_finite_or_null")]
    pub picard_c: Option<f64>,
    pub conditions: Vec<ConditionFlag>,
}

impl ConditionReport {
    pub fn flag(&self, id: ConditionId) -> Option<&ConditionFlag> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn holds(&self, id: ConditionId) -> bool {
        self.flag(id).is_some_and(|c| c.holds)
    }
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> Error {
    Error::Domain {
        name,
        value,
        domain,
    }
}

fn check_kt(k: f64, t: f64) -> Result<()> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(domain("Lipschitz constant", k, "[0, inf)"));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(domain("horizon", t, "(0, inf)"));
    }
    Ok(())
}

/// `λ_p = (p/(p−1))^{p²/2} (p(p−1)/2)^{p/2}`, `p ≥ 2`.
pub fn bdg_constant_high(p: f64) -> Result<f64> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(domain("bdg_constant_high", p, "[2, inf)"));
    }
    Ok((p * p / 2.0 * (p / (p - 1.0)).ln() + p / 2.0 * (p * (p - 1.0) / 2.0).ln()).exp())
}

/// `λ̄_p = (4/p)^{p/4} · 4/(4−p)`, `1 < p < 2`.
pub fn bdg_constant_low(p: f64) -> Result<f64> {
    if !(p > 1.0 && p < 2.0) {
        return Err(domain("bdg_constant_low", p, "(1, 2)"));
    }
    Ok((p / 4.0 * (4.0 / p).ln() + (4.0 / (4.0 - p)).ln()).exp())
}

/// `λ_p` or `λ̄_p` according to `p`.
pub fn bdg_constant(p: f64) -> Result<f64> {
    if p >= 2.0 {
        bdg_constant_high(p)
    } else {
        bdg_constant_low(p)
    }
}

/// Coefficient `d_p` (`p ≥ 2`) or `d̄_p` (`1 < p < 2`) in front of
/// `E sup|Y|^p` in the `Z` estimate. Requires `2KT < 1`.
pub fn z_control_coefficient(p: f64, k: f64, t: f64, variant: Variant) -> Result<f64> {
    check_kt(k, t)?;
    if !(p > 1.0 && p.is_finite()) {
        return Err(domain("z_control_coefficient", p, "(1, inf)"));
    }
    let h = 2.0 * k * t;
    if !(h < 1.0) {
        return Err(Error::ConditionViolated {
            id: ConditionId::Horizon.as_str(),
            value: h,
        });
    }
    let ln_inv = -(1.0 - h).ln();
    if variant == Variant::Statement {
        let base = 2.0f64.ln() + ln_inv + (2.0 * k * (t + 1.0) + 1.0).ln();
        return Ok((p / 2.0 * base).exp());
    }
    let ln_ratio = (k * t * t + 1.0).ln() + ln_inv;
    let ln2 = 2.0f64.ln();
    let d = if p >= 2.0 {
        let a = (p * ln2 + p / 2.0 * ln_ratio).exp();
        let b = ((2.0 * p + 1.0) * ln2
            + p * p * (p / (p - 1.0)).ln()
            + p * (p * (p - 1.0) / 2.0).ln()
            + p * ln_inv)
            .exp();
        a + b
    } else {
        let a = (1.5 * p * ln2 + p / 2.0 * ln_ratio).exp();
        let b = ((2.0 * p + 1.0) * ln2 + p / 4.0 * (4.0 / p).ln() + p * ln_inv - (4.0 - p).ln()).exp();
        a + b
    };
    Ok(d)
}

/// `K^{p/2}` in the log domain, `0` at `K = 0`.
fn ln_k_half(p: f64, k: f64) -> f64 {
    p / 2.0 * k.ln()
}

/// `β_p` (`p ≥ 2`) or `β̄_p` (`1 < p < 2`). Requires `2KT < 1`.
pub fn apriori_beta(p: f64, k: f64, t: f64, variant: Variant) -> Result<f64> {
    let d = z_control_coefficient(p, k, t, variant)?;
    if k == 0.0 {
        return Ok(0.0);
    }
    let ln2 = 2.0f64.ln();
    let lk = ln_k_half(p, k);
    let inner_ln = if p >= 2.0 {
        ln_sum(p / 2.0 * t.ln(), (p / 2.0 - 1.0) * ln2 + lk + d.ln())
    } else {
        ln_sum(p / 2.0 * t.ln(), (p - 1.0) * ln2 + lk + d.ln())
    };
    let lead = if p >= 2.0 { 2.0 * p - 2.0 } else { 2.5 * p - 2.0 };
    Ok((lead * ln2 + p * (p / (p - 1.0)).ln() + lk + inner_ln).exp())
}

/// `ln(e^a + e^b)`.
fn ln_sum(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn apriori_value(p: f64, k: f64, t: f64, variant: Variant, high: bool) -> Result<f64> {
    if high != (p >= 2.0) {
        return Err(domain(
            "a priori condition",
            p,
            if high { "[2, inf)" } else { "(1, 2)" },
        ));
    }
    match apriori_beta(p, k, t, variant) {
        Err(Error::ConditionViolated { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// `28TK·max(1,T)`.
pub fn l2_value(k: f64, t: f64) -> f64 {
    28.0 * t * k * t.max(1.0)
}

/// Value and flag of `28TK·max(1,T) < 1`.
pub fn l2_condition(k: f64, t: f64) -> Result<ConditionFlag> {
    check_kt(k, t)?;
    Ok(ConditionFlag::new(ConditionId::L2Existence, l2_value(k, t)))
}

/// `C_p(K,T) = 2^{2p−1} T^{p/2} K^{p/2} max(1,T^{p/2}) [1 + 2^{p/2−2}(2+λ̄_p²)(p/(p−1))^p]`.
pub fn picard_contraction_constant(p: f64, k: f64, t: f64) -> Result<f64> {
    check_kt(k, t)?;
    let lambda = bdg_constant_low(p)?;
    if k == 0.0 {
        return Ok(0.0);
    }
    let ln2 = 2.0f64.ln();
    let bracket = 1.0 + ((p / 2.0 - 2.0) * ln2 + (2.0 + lambda * lambda).ln() + p * (p / (p - 1.0)).ln()).exp();
    let th = p / 2.0 * t.ln();
    Ok(((2.0 * p - 1.0) * ln2 + th + ln_k_half(p, k) + th.max(0.0) + bracket.ln()).exp())
}

/// Evaluates every constant and every condition applicable at `p`.
pub fn condition_report(p: f64, k: f64, t: f64, variant: Variant) -> Result<ConditionReport> {
    check_kt(k, t)?;
    if !(p > 1.0 && p.is_finite()) {
        return Err(domain("p", p, "(1, inf)"));
    }
    let bdg = bdg_constant(p)?;
    let horizon = 2.0 * k * t;
    let (z_control, apriori) = if horizon < 1.0 {
        (
            Some(z_control_coefficient(p, k, t, variant)?),
            Some(apriori_beta(p, k, t, variant)?),
        )
    } else {
        (None, None)
    };
    let l2 = l2_value(k, t);
    let picard = if p < 2.0 {
        Some(picard_contraction_constant(p, k, t)?)
    } else {
        None
    };
    let apriori_id = if p >= 2.0 {
        ConditionId::AprioriHighP
    } else {
        ConditionId::AprioriLowP
    };
    let mut conditions = vec![
        ConditionFlag::new(ConditionId::Horizon, horizon),
        ConditionFlag::new(apriori_id, apriori.unwrap_or(f64::INFINITY)),
        ConditionFlag::new(ConditionId::L2Existence, l2),
    ];
    if let Some(c) = picard {
        conditions.push(ConditionFlag::new(ConditionId::PicardContraction, c));
    }
    Ok(ConditionReport {
        p,
        k,
        t,
        variant,
        bdg_constant: bdg,
        z_control,
        apriori_beta: apriori,
        l2_value: l2,
        picard_c: picard,
        conditions,
    })
}

/// Largest `K` for which `condition` holds at `(p, T)`, to [`BISECTION_TOL`].
pub fn max_lipschitz_for_contraction(p: f64, t: f64, condition: ConditionId) -> Result<f64> {
    max_lipschitz_with_tol(p, t, condition, Variant::Proof, BISECTION_TOL)
}

/// Bisection for the threshold `K*` with an explicit absolute tolerance.
/// Returns the upper end of the final bracket's holding side.
pub fn max_lipschitz_with_tol(
    p: f64,
    t: f64,
    condition: ConditionId,
    variant: Variant,
    tol: f64,
) -> Result<f64> {
    check_kt(0.0, t)?;
    match condition {
        ConditionId::AprioriHighP if p < 2.0 => {
            return Err(domain("apriori_high_p threshold", p, "[2, inf)"))
        }
        ConditionId::AprioriLowP | ConditionId::PicardContraction if !(p > 1.0 && p < 2.0) => {
            return Err(domain("low-p threshold", p, "(1, 2)"))
        }
        _ => {}
    }
    let value = |k: f64| condition.value(p, k, t, variant);
    let holds = |k: f64| value(k).map(|v| v < 1.0);
    // every closed form is increasing in K; 2KT = 1 bounds the a priori ones
    let mut lo = 0.0;
    let mut hi = match condition {
        ConditionId::Horizon | ConditionId::AprioriHighP | ConditionId::AprioriLowP => 1.0 / (2.0 * t),
        _ => {
            let mut h = 1.0;
            while holds(h)? {
                h *= 2.0;
            }
            h
        }
    };
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if holds(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn bdg_high_values() {
        assert_eq!(bdg_constant_high(2.0).unwrap(), 4.0);
        assert!(rel(bdg_constant_high(4.0).unwrap(), (4.0f64 / 3.0).powi(8) * 36.0) < 1e-13);
        assert!(rel(bdg_constant_high(3.0).unwrap(), 1.5f64.powf(4.5) * 3.0f64.powf(1.5)) < 1e-13);
        assert!(bdg_constant_high(1.9).is_err());
    }

    #[test]
    fn bdg_low_values() {
        let v = bdg_constant_low(1.5).unwrap();
        assert!(rel(v, (8.0f64 / 3.0).powf(0.375) * 1.6) < 1e-13);
        assert!((v - 2.3113).abs() < 1e-4);
        let near = bdg_constant_low(1.999).unwrap();
        assert!((near - (4.0f64 / 1.999).powf(1.999 / 4.0) * (4.0 / 2.001)).abs() < 1e-6);
        assert!((bdg_constant_low(1.2).unwrap() - 2.0503).abs() < 1e-3);
        assert!(bdg_constant_low(2.0).is_err());
        assert!(bdg_constant_low(1.0).is_err());
    }

    #[test]
    fn z_control_values() {
        assert!(rel(z_control_coefficient(2.0, 0.0, 1.0, Variant::Proof).unwrap(), 516.0) < 1e-13);
        assert!(rel(z_control_coefficient(2.0, 0.1, 1.0, Variant::Proof).unwrap(), 805.5) < 1e-13);
        let low = z_control_coefficient(1.5, 0.0, 1.0, Variant::Proof).unwrap();
        assert!((low - 14.002).abs() < 1e-3);
        assert!(matches!(
            z_control_coefficient(2.0, 0.5, 1.0, Variant::Proof),
            Err(Error::ConditionViolated { .. })
        ));
        // statement form at K = 0: 2^{p/2}
        assert!(rel(z_control_coefficient(3.0, 0.0, 1.0, Variant::Statement).unwrap(), 2.0f64.powf(1.5)) < 1e-13);
    }

    #[test]
    fn beta_example_fails() {
        let b = apriori_beta(2.0, 0.1, 1.0, Variant::Proof).unwrap();
        assert!(rel(b, 130.48) < 1e-12);
        let r = condition_report(2.0, 0.1, 1.0, Variant::Proof).unwrap();
        let f = r.flag(ConditionId::AprioriHighP).unwrap();
        assert!(!f.holds);
        assert!((f.margin + 129.48).abs() < 1e-9);
        assert!(r.holds(ConditionId::Horizon));
    }

    #[test]
    fn null_lipschitz_constant() {
        for p in [1.5, 2.0, 3.0] {
            let r = condition_report(p, 0.0, 1.0, Variant::Proof).unwrap();
            for c in &r.conditions {
                assert!(c.holds);
                assert_eq!(c.margin, 1.0);
            }
        }
    }

    #[test]
    fn l2_values() {
        assert!(l2_condition(0.0, 1.0).unwrap().holds);
        let f = l2_condition(0.01, 1.0).unwrap();
        assert!((f.value - 0.28).abs() < 1e-15 && f.holds);
        let f = l2_condition(0.05, 2.0).unwrap();
        assert!((f.value - 5.6).abs() < 1e-12 && !f.holds);
    }

    #[test]
    fn picard_constant_values() {
        assert_eq!(picard_contraction_constant(1.5, 0.0, 1.0).unwrap(), 0.0);
        let c = picard_contraction_constant(1.5, 0.01, 1.0).unwrap();
        assert!((c - 2.1555).abs() < 1e-3);
        assert!(picard_contraction_constant(2.0, 0.01, 1.0).is_err());
    }

    #[test]
    fn thresholds() {
        let k = max_lipschitz_for_contraction(2.0, 1.0, ConditionId::L2Existence).unwrap();
        assert!((k - 1.0 / 28.0).abs() < 1e-10);
        let k = max_lipschitz_for_contraction(1.5, 1.0, ConditionId::PicardContraction).unwrap();
        assert!((k - 0.00359).abs() < 1e-5);
        let c = picard_contraction_constant(1.5, k, 1.0).unwrap();
        assert!(c < 1.0 && (c - 1.0).abs() < 1e-6);
        let k4 = max_lipschitz_for_contraction(1.5, 4.0, ConditionId::PicardContraction).unwrap();
        assert!(k4 < k);
        let kb = max_lipschitz_for_contraction(2.0, 1.0, ConditionId::AprioriHighP).unwrap();
        assert!(apriori_beta(2.0, kb, 1.0, Variant::Proof).unwrap() < 1.0);
        assert!(apriori_beta(2.0, kb + 2e-10, 1.0, Variant::Proof).unwrap() >= 1.0);
        assert!(max_lipschitz_for_contraction(2.0, 1.0, ConditionId::PicardContraction).is_err());
        assert!(max_lipschitz_for_contraction(1.5, 1.0, ConditionId::AprioriHighP).is_err());
    }

    #[test]
    fn monotone_in_k_and_t() {
        for p in [1.3, 1.5, 2.0, 3.0] {
            let mut prev = 0.0;
            for i in 1..40 {
                let k = 0.01 * i as f64;
                let b = apriori_beta(p, k, 1.0, Variant::Proof).unwrap();
                assert!(b > prev);
                prev = b;
            }
            let mut prev = 0.0;
            for i in 1..40 {
                let t = 0.02 * i as f64;
                let b = apriori_beta(p, 0.5, t, Variant::Proof).unwrap();
                assert!(b > prev);
                prev = b;
            }
        }
    }

    #[test]
    fn picard_vanishes_with_k() {
        let mut prev = f64::INFINITY;
        for e in 1..12 {
            let c = picard_contraction_constant(1.5, 10f64.powi(-e), 2.0).unwrap();
            assert!(c < prev);
            prev = c;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn report_json_shape() {
        let r = condition_report(1.5, 0.3, 2.0, Variant::Proof).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        // 2KT = 1.2: no finite d or beta
        assert!(v["z_control"].is_null());
        let c = &v["conditions"][1];
        assert_eq!(c["id"], "apriori_low_p");
        assert!(c["value"].is_null());
        assert_eq!(c["holds"], false);
    }
}
