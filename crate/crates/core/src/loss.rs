//! Heatmap regression losses with closed-form derivatives.
//!
//! The rescale focal loss compares the prediction to the target through ratios:
//! `x/g` when under-estimating and `(1−x)/(1−g)` when over-estimating, each
//! weighted by a focal factor. L1, L2 and a standard binary focal loss are
//! provided as baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Heatmap;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    RescaleFocal,
    Focal,
    L1,
    L2,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [Self::RescaleFocal, Self::Focal, Self::L1, Self::L2];

    pub fn name(self) -> &'static str {
        match self {
            Self::RescaleFocal => "rescale-focal",
            Self::Focal => "focal",
            Self::L1 => "l1",
            Self::L2 => "l2",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "rescalefocal" | "rfl" => Ok(Self::RescaleFocal),
            "focal" => Ok(Self::Focal),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            _ => Err(Error::param(
                "variant",
                format!("unknown loss variant `{s}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams<S = f64> {
    pub alpha_under: S,
    pub alpha_over: S,
    pub gamma1: S,
    pub gamma2: S,
    pub epsilon: S,
    pub variant: LossVariant,
}

impl<S: Scalar> Default for LossParams<S> {
    fn default() -> Self {
        Self {
            alpha_under: S::one(),
            alpha_over: S::one(),
            gamma1: S::lit(2.0),
            gamma2: S::lit(2.0),
            epsilon: S::lit(1e-4),
            variant: LossVariant::RescaleFocal,
        }
    }
}

impl<S: Scalar> LossParams<S> {
    pub fn with_variant(variant: LossVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= S::zero() && self.gamma2 >= S::zero()) {
            return Err(Error::param("gamma", "exponents must be non-negative"));
        }
        if !(self.epsilon > S::zero() && self.epsilon < S::lit(0.5)) {
            return Err(Error::param("epsilon", "need 0 < epsilon < 0.5"));
        }
        if !(self.alpha_under >= S::zero() && self.alpha_over >= S::zero()) {
            return Err(Error::param("alpha", "weights must be non-negative"));
        }
        Ok(())
    }

    fn clamp(&self, v: S) -> S {
        v.max(self.epsilon).min(S::one() - self.epsilon)
    }
}

fn check_unit<S: Scalar>(name: &str, v: S) -> Result<()> {
    if v >= S::zero() && v <= S::one() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} = {v} is outside [0, 1]"
        )))
    }
}

/// `(1 − q)^γ · (−ln q)` for a ratio `q ∈ (0, 1]`.
fn focal_term<S: Scalar>(q: S, gamma: S) -> S {
    (S::one() - q).powf(gamma) * (-q.ln())
}

/// Derivative of `focal_term` with respect to `q`.
fn focal_term_dq<S: Scalar>(q: S, gamma: S) -> S {
    let base = S::one() - q;
    let mut d = -base.powf(gamma) / q;
    if gamma != S::zero() {
        d = d - gamma * base.powf(gamma - S::one()) * (-q.ln());
    }
    d
}

pub fn loss_value<S: Scalar>(x: S, gt: S, params: &LossParams<S>) -> Result<S> {
    check_unit("x", x)?;
    check_unit("gt", gt)?;
    Ok(match params.variant {
        LossVariant::L1 => (x - gt).abs(),
        LossVariant::L2 => (x - gt) * (x - gt),
        LossVariant::Focal => {
            let xc = params.clamp(x);
            if gt >= S::lit(0.5) {
                params.alpha_under * (S::one() - xc).powf(params.gamma1) * (-xc.ln())
            } else {
                params.alpha_over * xc.powf(params.gamma2) * (-(S::one() - xc).ln())
            }
        }
        LossVariant::RescaleFocal => {
            let (xc, gc) = (params.clamp(x), params.clamp(gt));
            if xc < gc {
                params.alpha_under * focal_term(xc / gc, params.gamma1)
            } else if xc > gc {
                params.alpha_over * focal_term((S::one() - xc) / (S::one() - gc), params.gamma2)
            } else {
                S::zero()
            }
        }
    })
}

/// `d loss / d x`. Zero at `x = gt`, and zero where clamping makes the loss flat in `x`.
pub fn loss_grad<S: Scalar>(x: S, gt: S, params: &LossParams<S>) -> Result<S> {
    check_unit("x", x)?;
    check_unit("gt", gt)?;
    let (lo, hi) = (params.epsilon, S::one() - params.epsilon);
    let clamped = x < lo || x > hi;
    Ok(match params.variant {
        LossVariant::L1 => {
            if x > gt {
                S::one()
            } else if x < gt {
                -S::one()
            } else {
                S::zero()
            }
        }
        LossVariant::L2 => S::lit(2.0) * (x - gt),
        LossVariant::Focal if clamped => S::zero(),
        LossVariant::Focal => {
            let one = S::one();
            if gt >= S::lit(0.5) {
                let g = params.gamma1;
                let mut d = -(one - x).powf(g) / x;
                if g != S::zero() {
                    d = d + g * (one - x).powf(g - one) * x.ln();
                }
                params.alpha_under * d
            } else {
                let g = params.gamma2;
                let mut d = x.powf(g) / (one - x);
                if g != S::zero() {
                    d = d - g * x.powf(g - one) * (one - x).ln();
                }
                params.alpha_over * d
            }
        }
        LossVariant::RescaleFocal if clamped => S::zero(),
        LossVariant::RescaleFocal => {
            let gc = params.clamp(gt);
            let one = S::one();
            if x < gc {
                params.alpha_under * focal_term_dq(x / gc, params.gamma1) / gc
            } else if x > gc {
                -params.alpha_over * focal_term_dq((one - x) / (one - gc), params.gamma2)
                    / (one - gc)
            } else {
                S::zero()
            }
        }
    })
}

/// Mean loss and per-element gradient of the mean, summed in index order.
pub fn mean_loss_and_grad<S: Scalar>(
    pred: &[S],
    gt: &[S],
    params: &LossParams<S>,
) -> Result<(S, Vec<S>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} cells, target has {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = S::lit(pred.len() as f64);
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&x, &g) in pred.iter().zip(gt) {
        total = total + loss_value(x, g, params)?;
        grad.push(loss_grad(x, g, params)? / n);
    }
    Ok((total / n, grad))
}

/// Arithmetic mean of per-cell losses.
pub fn batch_loss(pred: &Heatmap, gt: &Heatmap, params: &LossParams) -> Result<f64> {
    pred.check_same_spec(gt)?;
    let mut total = 0.0;
    for (&x, &g) in pred.cells().iter().zip(gt.cells()) {
        total += loss_value(x, g, params)?;
    }
    Ok(total / pred.len() as f64)
}
