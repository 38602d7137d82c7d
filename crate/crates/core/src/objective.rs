//! Training objective: a convex combination of the Tversky loss and binary
//! cross-entropy, both restricted to non-ignored pixels.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the probabilities, which seeds the network's backward sweep.

use mustan_autograd::ShapeError;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the Tversky term; `1 - theta` weights BCE.
    pub theta: f64,
    /// False-positive weight in the Tversky index.
    pub alpha: f64,
    /// False-negative weight in the Tversky index.
    pub beta: f64,
    /// Smoothing constant for the Tversky ratio and clamp margin for BCE.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            theta: 0.5,
            alpha: 0.5,
            beta: 0.5,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("loss theta {} outside [0, 1]", self.theta)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("Tversky alpha and beta must be non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("loss epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// d(value)/d(p), one entry per pixel; zero at ignored pixels.
    pub grad: Vec<f64>,
    /// Set when every pixel was ignored; the value is then 0.
    pub degenerate: bool,
}

impl LossValue {
    fn degenerate(n: usize) -> Self {
        LossValue {
            value: 0.0,
            grad: vec![0.0; n],
            degenerate: true,
        }
    }
}

fn check_lengths(p: &[f64], y: &[u8], ignore: &[u8]) -> Result<()> {
    if p.len() != y.len() || p.len() != ignore.len() {
        return Err(ShapeError::new(format!(
            "loss inputs differ in length: p {}, y {}, ignore {}",
            p.len(),
            y.len(),
            ignore.len()
        ))
        .into());
    }
    Ok(())
}

/// `1 − (TP + ε) / (TP + α·FP + β·FN + ε)` over soft counts of valid pixels.
pub fn tversky_loss(p: &[f64], y: &[u8], ignore: &[u8], cfg: &LossConfig) -> Result<LossValue> {
    check_lengths(p, y, ignore)?;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    let mut valid = 0usize;
    for ((&pv, &yv), &ig) in p.iter().zip(y).zip(ignore) {
        if ig != 0 {
            continue;
        }
        valid += 1;
        if yv != 0 {
            tp += pv;
            fn_ += 1.0 - pv;
        } else {
            fp += pv;
        }
    }
    if valid == 0 {
        return Ok(LossValue::degenerate(p.len()));
    }
    let eps = cfg.epsilon;
    let num = tp + eps;
    let den = tp + cfg.alpha * fp + cfg.beta * fn_ + eps;
    // d(num)/dp = y;  d(den)/dp = y·(1 − β) + (1 − y)·α
    let d_pos = -((den - num * (1.0 - cfg.beta)) / (den * den));
    let d_neg = num * cfg.alpha / (den * den);
    let grad = y
        .iter()
        .zip(ignore)
        .map(|(&yv, &ig)| match (ig != 0, yv != 0) {
            (true, _) => 0.0,
            (false, true) => d_pos,
            (false, false) => d_neg,
        })
        .collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad,
        degenerate: false,
    })
}

/// Mean binary cross-entropy over valid pixels, with `p` clamped to `[ε, 1 − ε]`.
pub fn bce_loss(p: &[f64], y: &[u8], ignore: &[u8], epsilon: f64) -> Result<LossValue> {
    check_lengths(p, y, ignore)?;
    let valid = ignore.iter().filter(|&&i| i == 0).count();
    if valid == 0 {
        return Ok(LossValue::degenerate(p.len()));
    }
    let inv_n = 1.0 / valid as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (i, ((&pv, &yv), &ig)) in p.iter().zip(y).zip(ignore).enumerate() {
        if ig != 0 {
            continue;
        }
        let clamped = pv.clamp(epsilon, 1.0 - epsilon);
        let inside = pv > epsilon && pv < 1.0 - epsilon;
        if yv != 0 {
            total -= clamped.ln();
            if inside {
                grad[i] = -inv_n / clamped;
            }
        } else {
            total -= (1.0 - clamped).ln();
            if inside {
                grad[i] = inv_n / (1.0 - clamped);
            }
        }
    }
    Ok(LossValue {
        value: total * inv_n,
        grad,
        degenerate: false,
    })
}

/// `θ · tversky + (1 − θ) · bce`.
pub fn combined_loss(p: &[f64], y: &[u8], ignore: &[u8], cfg: &LossConfig) -> Result<LossValue> {
    let tl = tversky_loss(p, y, ignore, cfg)?;
    let bce = bce_loss(p, y, ignore, cfg.epsilon)?;
    let t = cfg.theta;
    Ok(LossValue {
        value: t * tl.value + (1.0 - t) * bce.value,
        grad: tl
            .grad
            .iter()
            .zip(&bce.grad)
            .map(|(a, b)| t * a + (1.0 - t) * b)
            .collect(),
        degenerate: tl.degenerate || bce.degenerate,
    })
}
