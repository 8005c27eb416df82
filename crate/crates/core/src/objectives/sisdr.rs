use std::f64::consts::LN_10;

use crate::error::{Error, Result};

/// Relative regularizer of the distortion energy; bounds a perfect estimate
/// at `10·log10(1 / SI_SDR_EPS)` = 120 dB.
pub const SI_SDR_EPS: f64 = 1e-12;

/// Keeps the ratio defined for an all-zero estimate.
const TINY: f64 = 1e-30;

fn check_pair(target: &[f64], estimate: &[f64]) -> Result<()> {
    if target.len() != estimate.len() || target.is_empty() {
        return Err(Error::InvalidInput(format!(
            "target has {} samples, estimate has {}",
            target.len(),
            estimate.len()
        )));
    }
    Ok(())
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Terms {
    x0: Vec<f64>,
    s0: Vec<f64>,
    a: f64,
    p: f64,
    num: f64,
    den: f64,
}

fn terms(target: &[f64], estimate: &[f64]) -> Result<Terms> {
    check_pair(target, estimate)?;
    let x0 = centered(target);
    let s0 = centered(estimate);
    let p = dot(&x0, &x0);
    if p < 1e-20 {
        return Err(Error::InvalidInput("SI-SDR undefined for a silent target".into()));
    }
    let a = dot(&x0, &s0);
    let q = dot(&s0, &s0);
    let proj = a * a / p;
    // ⟨e, e⟩ = q - a²/p; the regularizer adds SI_SDR_EPS·⟨x̃, x̃⟩.
    let den = (q - (1.0 - SI_SDR_EPS) * proj).max(0.0) + TINY;
    Ok(Terms {
        x0,
        s0,
        a,
        p,
        num: proj + TINY,
        den,
    })
}

/// Scale-invariant SDR in dB of `estimate` against `target`, both
/// mean-subtracted first.
pub fn si_sdr(target: &[f64], estimate: &[f64]) -> Result<f64> {
    let t = terms(target, estimate)?;
    Ok(10.0 * (t.num / t.den).log10())
}

/// SI-SDR and its gradient with respect to `estimate`.
pub fn si_sdr_with_grad(target: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t = terms(target, estimate)?;
    let value = 10.0 * (t.num / t.den).log10();
    let c = 10.0 / LN_10;
    let k = 2.0 * t.a / t.p;
    let mut g: Vec<f64> = t
        .x0
        .iter()
        .zip(&t.s0)
        .map(|(&x, &s)| c * (k * x / t.num - (2.0 * s - (1.0 - SI_SDR_EPS) * k * x) / t.den))
        .collect();
    // Chain through the mean subtraction of the estimate.
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    for v in &mut g {
        *v -= mean;
    }
    Ok((value, g))
}

/// Plain signal-to-distortion ratio `10·log10(⟨x,x⟩ / ⟨x−s, x−s⟩)` in dB, with
/// the same relative regularizer as [`si_sdr`].
pub fn sdr(target: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(target, estimate)?;
    let p = dot(target, target);
    if p < 1e-20 {
        return Err(Error::InvalidInput("SDR undefined for a silent target".into()));
    }
    let err: f64 = target.iter().zip(estimate).map(|(x, s)| (x - s) * (x - s)).sum();
    Ok(10.0 * (p / (err + SI_SDR_EPS * p)).log10())
}
