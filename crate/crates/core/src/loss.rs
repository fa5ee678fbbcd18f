//! Loss families `Q(w)`, their convex conjugates `g(z)` and weight maps.
//!
//! Every formula carries the per-unit scale `q`. For all families
//! `g'(z) = w(z)` and `g''(z) = w'(z) = 1 / Q''(w(z))`.
//!
//! Conjugate domains, derived from each `g`:
//! - square, entropy, maximum entropy, bounded logistic, truncated linear: all real `z`;
//! - empirical likelihood: `q z < 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SoftcalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Square,
    EntropyDivergence,
    EmpiricalLikelihood,
    MaximumEntropy,
    BoundedLogistic,
    TruncatedLinear,
}

impl LossFamily {
    pub const ALL: [LossFamily; 6] = [
        LossFamily::Square,
        LossFamily::EntropyDivergence,
        LossFamily::EmpiricalLikelihood,
        LossFamily::MaximumEntropy,
        LossFamily::BoundedLogistic,
        LossFamily::TruncatedLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Square => "square",
            LossFamily::EntropyDivergence => "entropy_divergence",
            LossFamily::EmpiricalLikelihood => "empirical_likelihood",
            LossFamily::MaximumEntropy => "maximum_entropy",
            LossFamily::BoundedLogistic => "bounded_logistic",
            LossFamily::TruncatedLinear => "truncated_linear",
        }
    }

    /// Short CLI code.
    pub fn code(self) -> &'static str {
        match self {
            LossFamily::Square => "sq",
            LossFamily::EntropyDivergence => "ent",
            LossFamily::EmpiricalLikelihood => "el",
            LossFamily::MaximumEntropy => "me",
            LossFamily::BoundedLogistic => "logit",
            LossFamily::TruncatedLinear => "trunc",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.code() == code || f.name() == code)
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, LossFamily::BoundedLogistic | LossFamily::TruncatedLinear)
    }
}

/// A loss family with its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub family: LossFamily,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// `(g, w, w')` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugatePoint {
    pub g: f64,
    pub w: f64,
    pub dw: f64,
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn xlogx_ratio(x: f64, c: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / c).ln()
    }
}

impl LossSpec {
    pub fn new(family: LossFamily, bounds: Option<(f64, f64)>) -> Result<Self> {
        match (family.is_bounded(), bounds) {
            (false, None) => Ok(Self {
                family,
                lower: None,
                upper: None,
            }),
            (false, Some(_)) => Err(SoftcalError::InvalidSpec(format!(
                "{} takes no bounds",
                family.name()
            ))),
            (true, None) => Err(SoftcalError::InvalidSpec(format!(
                "{} requires bounds L,U",
                family.name()
            ))),
            (true, Some((l, u))) => {
                let ok = l.is_finite() && u.is_finite() && (0.0..1.0).contains(&l) && u > 1.0;
                if !ok {
                    return Err(SoftcalError::InvalidSpec(format!(
                        "bounds must satisfy 0 <= L < 1 < U, got [{l}, {u}]"
                    )));
                }
                Ok(Self {
                    family,
                    lower: Some(l),
                    upper: Some(u),
                })
            }
        }
    }

    pub fn square() -> Self {
        Self::new(LossFamily::Square, None).unwrap()
    }
    pub fn entropy() -> Self {
        Self::new(LossFamily::EntropyDivergence, None).unwrap()
    }
    pub fn empirical_likelihood() -> Self {
        Self::new(LossFamily::EmpiricalLikelihood, None).unwrap()
    }
    pub fn maximum_entropy() -> Self {
        Self::new(LossFamily::MaximumEntropy, None).unwrap()
    }
    pub fn bounded_logistic(l: f64, u: f64) -> Result<Self> {
        Self::new(LossFamily::BoundedLogistic, Some((l, u)))
    }
    pub fn truncated_linear(l: f64, u: f64) -> Result<Self> {
        Self::new(LossFamily::TruncatedLinear, Some((l, u)))
    }

    fn bounds(&self) -> (f64, f64) {
        (self.lower.unwrap_or(f64::NAN), self.upper.unwrap_or(f64::NAN))
    }

    /// Logistic slope `a = q(U−L)/((1−L)(U−1))` and offset `b` with `σ(b) = (1−L)/(U−L)`.
    fn logistic_ab(&self, q: f64) -> (f64, f64) {
        let (l, u) = self.bounds();
        let a = q * (u - l) / ((1.0 - l) * (u - 1.0));
        let b = ((1.0 - l) / (u - 1.0)).ln();
        (a, b)
    }

    /// `Q(w)`; `+∞` outside `[L, U]` for the truncated family.
    pub fn loss_value(&self, w: f64, q: f64) -> Result<f64> {
        let dom = |ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(SoftcalError::LossDomain {
                    family: self.family.name(),
                    w,
                })
            }
        };
        match self.family {
            LossFamily::Square => Ok((w - 1.0).powi(2) / (2.0 * q)),
            LossFamily::EntropyDivergence => {
                dom(w > 0.0)?;
                Ok((w * w.ln() - w + 1.0) / q)
            }
            LossFamily::EmpiricalLikelihood => {
                dom(w > 0.0)?;
                Ok((-w.ln() - 1.0 + w) / q)
            }
            LossFamily::MaximumEntropy => {
                dom(w > 1.0)?;
                Ok((w - 1.0) * ((w - 1.0).ln() - 1.0) / q)
            }
            LossFamily::BoundedLogistic => {
                let (l, u) = self.bounds();
                dom(w >= l && w <= u)?;
                let k = (1.0 - l) * (u - 1.0) / (q * (u - l));
                Ok(k * (xlogx_ratio(w - l, 1.0 - l) + xlogx_ratio(u - w, u - 1.0)))
            }
            LossFamily::TruncatedLinear => {
                let (l, u) = self.bounds();
                if w >= l && w <= u {
                    Ok((w - 1.0).powi(2) / (2.0 * q))
                } else {
                    Ok(f64::INFINITY)
                }
            }
        }
    }

    /// `Q'(w)`.
    pub fn loss_grad(&self, w: f64, q: f64) -> Result<f64> {
        self.loss_value(w, q)?;
        Ok(match self.family {
            LossFamily::Square | LossFamily::TruncatedLinear => (w - 1.0) / q,
            LossFamily::EntropyDivergence => w.ln() / q,
            LossFamily::EmpiricalLikelihood => (1.0 - 1.0 / w) / q,
            LossFamily::MaximumEntropy => (w - 1.0).ln() / q,
            LossFamily::BoundedLogistic => {
                let (l, u) = self.bounds();
                let k = (1.0 - l) * (u - 1.0) / (q * (u - l));
                k * (((w - l) / (1.0 - l)).ln() - ((u - w) / (u - 1.0)).ln())
            }
        })
    }

    /// `Q''(w)`.
    pub fn loss_hess(&self, w: f64, q: f64) -> Result<f64> {
        self.loss_value(w, q)?;
        Ok(match self.family {
            LossFamily::Square | LossFamily::TruncatedLinear => 1.0 / q,
            LossFamily::EntropyDivergence => 1.0 / (q * w),
            LossFamily::EmpiricalLikelihood => 1.0 / (q * w * w),
            LossFamily::MaximumEntropy => 1.0 / (q * (w - 1.0)),
            LossFamily::BoundedLogistic => {
                let (l, u) = self.bounds();
                (1.0 - l) * (u - 1.0) / (q * (w - l) * (u - w))
            }
        })
    }

    /// Whether `z` lies in the conjugate domain.
    pub fn in_domain(&self, z: f64, q: f64) -> bool {
        z.is_finite()
            && match self.family {
                LossFamily::EmpiricalLikelihood => q * z < 1.0,
                _ => true,
            }
    }

    /// `(g(z), w(z), w'(z))`, or `None` outside the conjugate domain or on overflow.
    pub fn eval(&self, z: f64, q: f64) -> Option<ConjugatePoint> {
        if !self.in_domain(z, q) {
            return None;
        }
        let pt = match self.family {
            LossFamily::Square => ConjugatePoint {
                g: z + q * z * z / 2.0,
                w: 1.0 + q * z,
                dw: q,
            },
            LossFamily::EntropyDivergence => {
                let e = (q * z).exp();
                ConjugatePoint {
                    g: (q * z).exp_m1() / q,
                    w: e,
                    dw: q * e,
                }
            }
            LossFamily::EmpiricalLikelihood => {
                let r = 1.0 - q * z;
                ConjugatePoint {
                    g: -(-q * z).ln_1p() / q,
                    w: 1.0 / r,
                    dw: q / (r * r),
                }
            }
            LossFamily::MaximumEntropy => {
                let e = (q * z).exp();
                ConjugatePoint {
                    g: z + e / q,
                    w: 1.0 + e,
                    dw: q * e,
                }
            }
            LossFamily::BoundedLogistic => {
                let (l, u) = self.bounds();
                let (a, b) = self.logistic_ab(q);
                let t = a * z + b;
                let s = sigmoid(t);
                let s_c = sigmoid(-t);
                ConjugatePoint {
                    g: l * z + (u - l) / a * (softplus(t) - softplus(b)),
                    w: l + (u - l) * s,
                    dw: a * (u - l) * s * s_c,
                }
            }
            LossFamily::TruncatedLinear => {
                let (l, u) = self.bounds();
                let lo = (l - 1.0) / q;
                let hi = (u - 1.0) / q;
                if z < lo {
                    ConjugatePoint {
                        g: z * l - (l - 1.0).powi(2) / (2.0 * q),
                        w: l,
                        dw: 0.0,
                    }
                } else if z > hi {
                    ConjugatePoint {
                        g: z * u - (u - 1.0).powi(2) / (2.0 * q),
                        w: u,
                        dw: 0.0,
                    }
                } else {
                    // kinks take the band value
                    ConjugatePoint {
                        g: z + q * z * z / 2.0,
                        w: 1.0 + q * z,
                        dw: q,
                    }
                }
            }
        };
        (pt.g.is_finite() && pt.w.is_finite() && pt.dw.is_finite()).then_some(pt)
    }

    fn eval_checked(&self, z: f64, q: f64) -> Result<ConjugatePoint> {
        self.eval(z, q).ok_or(SoftcalError::ConjugateDomain {
            family: self.family.name(),
            z,
        })
    }

    /// `w(z) = (Q')⁻¹(z)`.
    pub fn weight_map(&self, z: f64, q: f64) -> Result<f64> {
        Ok(self.eval_checked(z, q)?.w)
    }

    /// `g(z)`.
    pub fn conjugate_value(&self, z: f64, q: f64) -> Result<f64> {
        Ok(self.eval_checked(z, q)?.g)
    }

    /// `g'(z) = w(z)`.
    pub fn conjugate_grad(&self, z: f64, q: f64) -> Result<f64> {
        self.weight_map(z, q)
    }

    /// `g''(z) = w'(z)`.
    pub fn conjugate_hess(&self, z: f64, q: f64) -> Result<f64> {
        Ok(self.eval_checked(z, q)?.dw)
    }

    pub fn label(&self) -> String {
        match (self.lower, self.upper) {
            (Some(l), Some(u)) => format!("{}[{l},{u}]", self.family.code()),
            _ => self.family.code().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_specs() -> Vec<LossSpec> {
        vec![
            LossSpec::square(),
            LossSpec::entropy(),
            LossSpec::empirical_likelihood(),
            LossSpec::maximum_entropy(),
            LossSpec::bounded_logistic(0.0, 10.0).unwrap(),
            LossSpec::bounded_logistic(0.3, 4.0).unwrap(),
            LossSpec::truncated_linear(0.0, 3.0).unwrap(),
        ]
    }

    #[test]
    fn hand_values() {
        assert_eq!(LossSpec::square().loss_value(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(LossSpec::square().loss_value(3.0, 2.0).unwrap(), 1.0);
        assert_eq!(LossSpec::entropy().loss_value(1.0, 5.0).unwrap(), 0.0);
        let t = LossSpec::truncated_linear(0.0, 2.0).unwrap();
        assert_eq!(t.loss_value(3.0, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(LossSpec::square().weight_map(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(LossSpec::maximum_entropy().weight_map(0.0, 1.0).unwrap(), 2.0);
        assert_eq!(LossSpec::empirical_likelihood().weight_map(0.5, 1.0).unwrap(), 2.0);
        assert_eq!(LossSpec::square().conjugate_value(2.0, 1.0).unwrap(), 4.0);
        assert_eq!(LossSpec::entropy().conjugate_value(0.0, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn logistic_upper_limit() {
        let s = LossSpec::bounded_logistic(0.0, 10.0).unwrap();
        assert!((s.weight_map(1e3, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(s.weight_map(-1e3, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn logistic_matches_closed_ratio() {
        // w(z) = [L(U−1) + U(1−L)E] / [U−1 + (1−L)E], E = exp(a z)
        let (l, u, q) = (0.2, 5.0, 1.7);
        let s = LossSpec::bounded_logistic(l, u).unwrap();
        let a = q * (u - l) / ((1.0 - l) * (u - 1.0));
        for &z in &[-2.0, -0.3, 0.0, 0.4, 1.5] {
            let e = (a * z).exp();
            let w = (l * (u - 1.0) + u * (1.0 - l) * e) / (u - 1.0 + (1.0 - l) * e);
            assert!((s.weight_map(z, q).unwrap() - w).abs() < 1e-13);
        }
    }

    #[test]
    fn logistic_conjugate_is_legendre_transform() {
        let s = LossSpec::bounded_logistic(0.2, 5.0).unwrap();
        for &z in &[-1.5, -0.2, 0.0, 0.7, 2.0] {
            let p = s.eval(z, 1.3).unwrap();
            let legendre = z * p.w - s.loss_value(p.w, 1.3).unwrap();
            assert!((p.g - legendre).abs() < 1e-11, "z={z}");
        }
    }

    #[test]
    fn truncated_is_continuous_at_kinks() {
        let s = LossSpec::truncated_linear(0.5, 3.0).unwrap();
        let q = 2.0;
        for &k in &[(0.5 - 1.0) / q, (3.0 - 1.0) / q] {
            let a = s.eval(k - 1e-12, q).unwrap();
            let b = s.eval(k + 1e-12, q).unwrap();
            assert!((a.g - b.g).abs() < 1e-10);
            assert!((a.w - b.w).abs() < 1e-10);
            assert_eq!(s.eval(k, q).unwrap().dw, q);
        }
    }

    #[test]
    fn el_domain_guard() {
        let s = LossSpec::empirical_likelihood();
        assert!(s.weight_map(1.0, 1.0).is_err());
        assert!(s.weight_map(0.25, 2.0).is_ok());
        assert!(s.weight_map(0.5, 2.0).is_err());
    }

    #[test]
    fn grad_equals_weight_map() {
        for s in all_specs() {
            for &z in &[-1.0, 0.0, 0.3] {
                assert_eq!(s.conjugate_grad(z, 1.0).unwrap(), s.weight_map(z, 1.0).unwrap());
            }
        }
    }

    #[test]
    fn normalization_at_zero() {
        for s in all_specs() {
            let p = s.eval(0.0, 1.0).unwrap();
            if s.family == LossFamily::MaximumEntropy {
                assert_eq!((p.w, p.dw), (2.0, 1.0));
            } else {
                assert!((p.w - 1.0).abs() < 1e-15, "{:?}", s);
                assert!((p.dw - 1.0).abs() < 1e-14, "{:?}", s);
            }
        }
    }

    #[test]
    fn loss_grad_inverts_weight_map() {
        for s in all_specs() {
            // the truncated family is invertible only on its linear band
            let zs: &[f64] = if s.family == LossFamily::TruncatedLinear {
                &[-0.1, 0.2, 0.6]
            } else {
                &[-0.8, -0.1, 0.2, 0.6]
            };
            for &z in zs {
                let w = s.weight_map(z, 1.4).unwrap();
                let back = s.loss_grad(w, 1.4).unwrap();
                assert!((back - z).abs() < 1e-10, "{:?} z={z}", s.family);
            }
        }
    }

    #[test]
    fn bounds_validated() {
        assert!(LossSpec::bounded_logistic(1.0, 2.0).is_err());
        assert!(LossSpec::truncated_linear(0.0, 1.0).is_err());
        assert!(LossSpec::new(LossFamily::Square, Some((0.0, 2.0))).is_err());
        assert!(LossSpec::new(LossFamily::BoundedLogistic, None).is_err());
    }

    #[test]
    fn codes_round_trip() {
        for f in LossFamily::ALL {
            assert_eq!(LossFamily::from_code(f.code()), Some(f));
        }
    }
}
