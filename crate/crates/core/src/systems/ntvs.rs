use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::System;
use crate::error::{DktvError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimpleNtvsConfig {
    /// Rate at which the rotation speed `1 + gamma t` grows.
    pub gamma: f64,
    #[serde(default = "default_x0")]
    pub x0: Vec<f64>,
}

fn default_x0() -> Vec<f64> {
    vec![1.0, 0.0]
}

impl Default for SimpleNtvsConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            x0: default_x0(),
        }
    }
}

/// `x' = M_t cos(x)` with `M_t = [[0, 1 + gamma t], [-(1 + gamma t), 0]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimpleNtvs {
    pub gamma: f64,
}

impl SimpleNtvs {
    pub fn new(gamma: f64) -> Self {
        Self { gamma }
    }

    pub fn x0(cfg: &SimpleNtvsConfig) -> Result<DVector<f64>> {
        if cfg.x0.len() != 2 {
            return Err(DktvError::dims("initial state", 2, cfg.x0.len()));
        }
        Ok(DVector::from_column_slice(&cfg.x0))
    }

    pub fn field(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let s = 1.0 + self.gamma * t;
        DVector::from_vec(vec![s * x[1].cos(), -s * x[0].cos()])
    }
}

impl System for SimpleNtvs {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn deriv(&self, x: &DVector<f64>, _u: &DVector<f64>, t: f64, _w: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != 2 {
            return Err(DktvError::dims("state", 2, x.len()));
        }
        Ok(self.field(x, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{advance, sample_trajectory, SampleOptions, ZeroInput};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn hand_values() {
        let sys = SimpleNtvs::new(3.0);
        let d = sys.field(&DVector::from_vec(vec![1.0, 0.0]), 0.0);
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert!((d[1] + 1.0f64.cos()).abs() < 1e-15);
        let eq = sys.field(&DVector::from_vec(vec![FRAC_PI_2, FRAC_PI_2]), 4.0);
        assert!(eq.amax() < 1e-15);
        let frozen = SimpleNtvs::new(0.0);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(frozen.field(&x, 0.0), frozen.field(&x, 100.0));
    }

    #[test]
    fn richardson_order_four() {
        let sys = SimpleNtvs::new(0.8);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let none = DVector::zeros(0);
        let t = 1.3;
        let reference = advance(&sys, &x, &none, &none, t, 0.2, 100).unwrap();
        let coarse = advance(&sys, &x, &none, &none, t, 0.2, 1).unwrap();
        let fine = advance(&sys, &x, &none, &none, t, 0.2, 2).unwrap();
        let ratio = (coarse - &reference).norm() / (fine - &reference).norm();
        // global error over a fixed interval scales as h^4
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn trajectory_stays_bounded() {
        let sys = SimpleNtvs::new(0.8);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let tr = sample_trajectory(&sys, &mut ZeroInput(0), &x0, &SampleOptions::new(100, 0)).unwrap();
        assert!(!tr.truncated);
        assert!(tr.states.amax() < 5.0);
        // reference integration with ten times finer substeps
        let mut opts = SampleOptions::new(100, 0);
        opts.substeps = 100;
        let fine = sample_trajectory(&sys, &mut ZeroInput(0), &x0, &opts).unwrap();
        let dev = (&tr.states - &fine.states).amax();
        assert!(dev < 1e-5, "{dev}");
    }
}
