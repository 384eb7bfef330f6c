//! Normalised gradient ascent with an adaptive step.
//!
//! Each iteration moves every parameter by at most `step` (the gradient is
//! scaled by its largest component). Improvements are accepted and the step
//! grows; failures halve it. Gains below `tolerance·|score|` count as
//! failures. The score therefore never decreases, and the loop ends when the
//! step falls below `min_step` or the evaluation budget is spent.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    /// Pyramid levels (1 = full resolution only).
    pub levels: usize,
    /// Objective evaluations per level.
    pub max_iterations: usize,
    /// First step at full resolution (mm); doubled per coarser level.
    pub initial_step: f64,
    /// Smallest step at full resolution (mm); doubled per coarser level.
    pub min_step: f64,
    /// Relative score gain below which a step is not an improvement.
    pub tolerance: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            levels: 3,
            max_iterations: 80,
            initial_step: 1.0,
            min_step: 0.01,
            tolerance: 1e-5,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidParameter(
                "optimizer needs at least one level".into(),
            ));
        }
        if !(self.initial_step > 0.0 && self.min_step > 0.0 && self.min_step <= self.initial_step) {
            return Err(Error::InvalidParameter(
                "optimizer steps must satisfy 0 < min_step <= initial_step".into(),
            ));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidParameter(
                "optimizer tolerance must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Whether `candidate` beats `current` by more than the relative tolerance.
pub(crate) fn improves(candidate: f64, current: f64, tolerance: f64) -> bool {
    candidate > current + tolerance * current.abs()
}

#[derive(Debug, Clone)]
pub struct Ascent {
    pub params: Vec<f64>,
    pub score: f64,
    pub evaluations: usize,
}

/// Objective callback: score and, when requested, the gradient.
pub(crate) type Objective<'a> = dyn Fn(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)> + 'a;

fn checked(score: f64) -> Result<f64> {
    if score.is_finite() {
        Ok(score)
    } else {
        Err(Error::Diverged(format!("objective evaluated to {score}")))
    }
}

pub(crate) fn ascend(
    f: &Objective<'_>,
    x0: Vec<f64>,
    initial_step: f64,
    min_step: f64,
    max_evaluations: usize,
    tolerance: f64,
) -> Result<Ascent> {
    let mut x = x0;
    let (s0, g0) = f(&x, true)?;
    let mut score = checked(s0)?;
    let mut grad = g0.expect("gradient requested");
    let mut step = initial_step;
    let mut evaluations = 1;
    while evaluations < max_evaluations && step >= min_step {
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !gmax.is_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        if gmax == 0.0 {
            break;
        }
        let trial: Vec<f64> = x
            .iter()
            .zip(&grad)
            .map(|(xi, gi)| xi + step * gi / gmax)
            .collect();
        let (s, g) = f(&trial, true)?;
        evaluations += 1;
        if improves(checked(s)?, score, tolerance) {
            x = trial;
            score = s;
            grad = g.expect("gradient requested");
            step *= 1.2;
        } else {
            step *= 0.5;
        }
    }
    Ok(Ascent {
        params: x,
        score,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn climbs_a_quadratic() {
        let f = |x: &[f64], g: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let s = -(x[0] - 3.0).powi(2) - 2.0 * (x[1] + 1.0).powi(2);
            Ok((s, g.then(|| vec![-2.0 * (x[0] - 3.0), -4.0 * (x[1] + 1.0)])))
        };
        let r = ascend(&f, vec![0.0, 0.0], 1.0, 1e-6, 500, 0.0).unwrap();
        assert!((r.params[0] - 3.0).abs() < 1e-3 && (r.params[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_is_divergence() {
        let f = |x: &[f64], g: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let s = if x[0] > 0.5 { f64::NAN } else { x[0] };
            Ok((s, g.then(|| vec![1.0])))
        };
        assert!(matches!(
            ascend(&f, vec![0.0], 1.0, 1e-3, 50, 0.0),
            Err(Error::Diverged(_))
        ));
    }
}
