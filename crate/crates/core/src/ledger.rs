use serde::{Deserialize, Serialize};

use crate::mining::ExampleClass;

/// Measured fractions of boundary, robust and outlier examples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Fractions {
    pub boundary: f64,
    pub robust: f64,
    pub outlier: f64,
}

impl Fractions {
    pub fn new(boundary: f64, robust: f64, outlier: f64) -> Self {
        Self {
            boundary,
            robust,
            outlier,
        }
    }

    pub fn total(&self) -> f64 {
        self.boundary + self.robust + self.outlier
    }
}

/// Exact accounting of the work a training run performed.
///
/// One unit is one forward+backward pass over one sample: a generation step
/// costs one unit, and each loss pass (clean or corrupted) costs one unit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLedger {
    pub generation_steps: u64,
    pub clean_passes: u64,
    pub corrupted_passes: u64,
    pub boundary_samples: u64,
    pub robust_samples: u64,
    pub outlier_samples: u64,
    pub updates: u64,
    /// PGD steps spent on oracle separation. Not part of the training cost.
    #[serde(default)]
    pub separation_steps: u64,
}

impl StepLedger {
    pub fn charge_generation(&mut self, steps: u64) {
        self.generation_steps += steps;
    }

    pub fn record_class(&mut self, class: ExampleClass) {
        match class {
            ExampleClass::Boundary => self.boundary_samples += 1,
            ExampleClass::Robust => self.robust_samples += 1,
            ExampleClass::Outlier => self.outlier_samples += 1,
        }
    }

    pub fn samples(&self) -> u64 {
        self.boundary_samples + self.robust_samples + self.outlier_samples
    }

    pub fn loss_passes(&self) -> u64 {
        self.clean_passes + self.corrupted_passes
    }

    pub fn cost_units(&self) -> u64 {
        self.generation_steps + self.loss_passes()
    }

    /// Sample-weighted class fractions; all zero before any sample is seen.
    pub fn fractions(&self) -> Fractions {
        let n = self.samples();
        if n == 0 {
            return Fractions::default();
        }
        let n = n as f64;
        Fractions {
            boundary: self.boundary_samples as f64 / n,
            robust: self.robust_samples as f64 / n,
            outlier: self.outlier_samples as f64 / n,
        }
    }

    pub fn absorb(&mut self, other: &StepLedger) {
        self.generation_steps += other.generation_steps;
        self.clean_passes += other.clean_passes;
        self.corrupted_passes += other.corrupted_passes;
        self.boundary_samples += other.boundary_samples;
        self.robust_samples += other.robust_samples;
        self.outlier_samples += other.outlier_samples;
        self.updates += other.updates;
        self.separation_steps += other.separation_steps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_sum_to_one() {
        let mut l = StepLedger::default();
        for c in [ExampleClass::Boundary, ExampleClass::Robust, ExampleClass::Robust] {
            l.record_class(c);
        }
        let f = l.fractions();
        assert!((f.total() - 1.0).abs() < 1e-15);
        assert!((f.robust - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(StepLedger::default().fractions(), Fractions::default());
    }
}
