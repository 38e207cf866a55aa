//! Deviation risk measures on finite probability spaces.

use crate::error::{invalid, Result};

/// Outcomes with strictly positive probabilities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSampleSpace {
    probs: Vec<f64>,
}

impl FiniteSampleSpace {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(invalid("probabilities must be positive"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn expectation(&self, x: &[f64]) -> f64 {
        self.probs.iter().zip(x).map(|(p, v)| p * v).sum()
    }
}

pub trait DeviationMeasure {
    fn name(&self) -> &str;
    fn deviation(&self, space: &FiniteSampleSpace, x: &[f64]) -> f64;
}

/// `sqrt(E[(X - EX)^2])`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardDeviation;

impl DeviationMeasure for StandardDeviation {
    fn name(&self) -> &str {
        "std"
    }

    fn deviation(&self, space: &FiniteSampleSpace, x: &[f64]) -> f64 {
        let m = space.expectation(x);
        space
            .probs()
            .iter()
            .zip(x)
            .map(|(p, v)| p * (v - m) * (v - m))
            .sum::<f64>()
            .sqrt()
    }
}
