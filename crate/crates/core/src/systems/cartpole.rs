use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::System;
use crate::error::{DktvError, Result};

/// How the cart-track friction coefficient evolves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrictionLaw {
    /// `mu' = rate * |cos t|`: monotone growth, about 14.3 after 75 s.
    #[default]
    Monotone,
    /// `mu' = rate * cos t`, i.e. `mu0 + rate * sin t`.
    Oscillatory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartpoleConfig {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half-length of the pole.
    pub length: f64,
    pub mu_p: f64,
    pub mu_c0: f64,
    /// Signed gravity; negative means downward. The pole angle is measured
    /// from the upright position, which is unstable.
    pub gravity: f64,
    pub friction_rate: f64,
    pub friction_law: FrictionLaw,
}

impl Default for CartpoleConfig {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            length: 0.5,
            mu_p: 0.000002,
            mu_c0: 0.0005,
            gravity: -9.8,
            friction_rate: 0.3,
            friction_law: FrictionLaw::Monotone,
        }
    }
}

impl CartpoleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cart_mass > 0.0 && self.pole_mass > 0.0 && self.length > 0.0) {
            return Err(DktvError::InvalidConfig("cartpole masses and length must be positive".into()));
        }
        Ok(())
    }
}

/// `int_0^t |cos s| ds` for `t >= 0`.
fn abs_cos_integral(t: f64) -> f64 {
    let t = t.max(0.0);
    let n = (t / PI).floor();
    let s = t - n * PI;
    if s <= FRAC_PI_2 {
        2.0 * n + s.sin()
    } else {
        2.0 * n + 2.0 - s.sin()
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cart-pole with Coulomb cart friction and viscous pole friction. State is
/// `(x, x', theta, theta')`, input is the horizontal force `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cartpole {
    pub cfg: CartpoleConfig,
}

impl Cartpole {
    pub fn new(cfg: CartpoleConfig) -> Self {
        Self { cfg }
    }

    pub fn friction(&self, t: f64) -> f64 {
        let c = &self.cfg;
        match c.friction_law {
            FrictionLaw::Monotone => c.mu_c0 + c.friction_rate * abs_cos_integral(t),
            FrictionLaw::Oscillatory => c.mu_c0 + c.friction_rate * t.sin(),
        }
    }

    /// `(x'', theta'')` at the given state.
    pub fn accelerations(&self, x: &DVector<f64>, force: f64, t: f64) -> (f64, f64) {
        let c = &self.cfg;
        let total = c.cart_mass + c.pole_mass;
        let ml = c.pole_mass * c.length;
        let g = -c.gravity;
        let (xd, th, thd) = (x[1], x[2], x[3]);
        let (s, co) = th.sin_cos();
        let mu_c = self.friction(t);
        let temp = (-force - ml * thd * thd * s + mu_c * sgn(xd)) / total;
        let denom = c.length * (4.0 / 3.0 - c.pole_mass * co * co / total);
        let thdd = (g * s + co * temp - c.mu_p * thd / ml) / denom;
        let xdd = (force + ml * (thd * thd * s - thdd * co) - mu_c * sgn(xd)) / total;
        (xdd, thdd)
    }

    /// Mechanical energy of the rod-on-cart model.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let c = &self.cfg;
        let total = c.cart_mass + c.pole_mass;
        let ml = c.pole_mass * c.length;
        let g = -c.gravity;
        let (xd, th, thd) = (x[1], x[2], x[3]);
        0.5 * total * xd * xd + ml * xd * thd * th.cos() + 2.0 / 3.0 * ml * c.length * thd * thd + ml * g * th.cos()
    }
}

impl System for Cartpole {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn deriv(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64, _w: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != 4 {
            return Err(DktvError::dims("cartpole state", 4, x.len()));
        }
        if u.len() != 1 {
            return Err(DktvError::dims("cartpole input", 1, u.len()));
        }
        let (xdd, thdd) = self.accelerations(x, u[0], t);
        Ok(DVector::from_vec(vec![x[1], xdd, x[3], thdd]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::advance;

    fn state(v: [f64; 4]) -> DVector<f64> {
        DVector::from_column_slice(&v)
    }

    #[test]
    fn upright_rest_is_equilibrium() {
        let cp = Cartpole::new(CartpoleConfig::default());
        let d = cp.deriv(&state([0.0; 4]), &DVector::zeros(1), 10.0, &DVector::zeros(0)).unwrap();
        assert!(d.amax() == 0.0);
    }

    #[test]
    fn hanging_hand_evaluation() {
        let cp = Cartpole::new(CartpoleConfig::default());
        let (xdd, thdd) = cp.accelerations(&state([0.0, 0.0, PI, 0.0]), 0.0, 0.0);
        // sin(pi) ~ 1.2e-16, so both accelerations are round-off sized;
        // evaluate the same expression by hand
        let s = PI.sin();
        let denom = 0.5 * (4.0 / 3.0 - 0.1 / 1.1);
        let thdd_hand = 9.8 * s / denom;
        let xdd_hand = (0.05 * (-thdd_hand * -1.0)) / 1.1;
        assert!((thdd - thdd_hand).abs() < 1e-15);
        assert!((xdd - xdd_hand).abs() < 1e-15);
        // hanging with a push: temp = -F / M, cos(pi) = -1
        let (xdd, thdd) = cp.accelerations(&state([0.0, 0.0, PI, 0.0]), 2.0, 0.0);
        let thdd_hand = (9.8 * s + 2.0 / 1.1) / denom;
        let xdd_hand = (2.0 + 0.05 * thdd_hand) / 1.1;
        assert!((thdd - thdd_hand).abs() < 1e-14);
        assert!((xdd - xdd_hand).abs() < 1e-14);
        // tilted pole falls away from upright
        let (_, t2) = cp.accelerations(&state([0.0, 0.0, 0.1, 0.0]), 0.0, 0.0);
        assert!(t2 > 0.0);
    }

    #[test]
    fn positive_force_pushes_right() {
        let cp = Cartpole::new(CartpoleConfig::default());
        let (xdd, _) = cp.accelerations(&state([0.0; 4]), 1.0, 0.0);
        assert!(xdd > 0.0);
    }

    #[test]
    fn friction_laws() {
        let cp = Cartpole::new(CartpoleConfig::default());
        assert!((cp.friction(0.0) - 0.0005).abs() < 1e-15);
        let end = cp.friction(75.0);
        assert!((end - 14.288).abs() < 0.01, "friction at 75 s = {end}");
        let mut prev = 0.0;
        for k in 0..750 {
            let v = cp.friction(k as f64 * 0.1);
            assert!(v >= prev);
            prev = v;
        }
        // numerical integral of |cos|
        let h = 1e-4;
        let num: f64 = (0..(7.3 / h) as usize).map(|i| ((i as f64 + 0.5) * h).cos().abs() * h).sum();
        assert!((abs_cos_integral(7.3) - num).abs() < 1e-6);
        let lit = Cartpole::new(CartpoleConfig {
            friction_law: FrictionLaw::Oscillatory,
            ..CartpoleConfig::default()
        });
        assert!(lit.friction(75.0).abs() <= 0.3005 + 1e-12);
        let frozen = Cartpole::new(CartpoleConfig {
            friction_rate: 0.0,
            ..CartpoleConfig::default()
        });
        assert_eq!(frozen.friction(50.0), 0.0005);
    }

    #[test]
    fn conservative_limit_keeps_energy() {
        let cp = Cartpole::new(CartpoleConfig {
            mu_p: 0.0,
            mu_c0: 0.0,
            friction_rate: 0.0,
            ..CartpoleConfig::default()
        });
        let mut x = state([0.0, 0.3, 0.4, -0.2]);
        let none = DVector::zeros(0);
        let f = DVector::zeros(1);
        for k in 0..100 {
            let e0 = cp.energy(&x);
            x = advance(&cp, &x, &f, &none, k as f64 * 0.1, 0.1, 10).unwrap();
            let e1 = cp.energy(&x);
            assert!(e1 <= e0 + 1e-6 * e0.abs().max(1.0));
            assert!((e1 - e0).abs() < 1e-6 * e0.abs().max(1.0));
        }
    }
}
