//! Twelve-state quadcopter with an additive body-force disturbance.
//!
//! State `(p_n, p_e, z, u, v, w, phi, theta, psi, p, q, r)`: inertial north,
//! east and altitude, body-frame velocities, Euler angles and body rates.
//! Input `(T, tau_phi, tau_theta, tau_psi)`: total thrust and three torques.
//! Body z points down, so hover needs `T = m g` and the altitude rate is
//! `s_theta u - s_phi c_theta v - c_phi c_theta w`.

use nalgebra::{DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{InputSource, System};
use crate::error::{DktvError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadConfig {
    pub mass: f64,
    pub jx: f64,
    pub jy: f64,
    pub jz: f64,
    pub gravity: f64,
    pub disturbance_seed: u64,
    pub disturbance_scale: f64,
    /// Use the textbook rotation (`c_theta s_psi` in the east row) instead of
    /// the matrix with `c_theta c_psi` repeated in both horizontal rows.
    pub standard_rotation: bool,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            mass: 1.0,
            jx: 0.01,
            jy: 0.01,
            jz: 0.02,
            gravity: 9.81,
            disturbance_seed: 0,
            disturbance_scale: 1.0,
            standard_rotation: false,
        }
    }
}

impl QuadConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.mass, self.jx, self.jy, self.jz, self.gravity].iter().any(|v| !(*v > 0.0)) {
            return Err(DktvError::InvalidConfig("quadcopter mass, inertias and gravity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quadcopter {
    pub cfg: QuadConfig,
}

impl Quadcopter {
    pub fn new(cfg: QuadConfig) -> Self {
        Self { cfg }
    }

    /// Maps body velocities to `(p_n', p_e', z')`.
    pub fn position_matrix(&self, phi: f64, theta: f64, psi: f64) -> Matrix3<f64> {
        let (sf, cf) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = psi.sin_cos();
        let east_first = if self.cfg.standard_rotation { ct * sp } else { ct * cp };
        Matrix3::new(
            ct * cp,
            sf * st * cp - cf * sp,
            cf * st * cp + sf * sp,
            east_first,
            sf * st * sp + cf * cp,
            cf * st * sp - sf * cp,
            st,
            -sf * ct,
            -cf * ct,
        )
    }

    /// Maps body rates to Euler-angle rates.
    pub fn euler_rate_matrix(phi: f64, theta: f64) -> Result<Matrix3<f64>> {
        let (st, ct) = theta.sin_cos();
        if ct.abs() < 1e-6 {
            return Err(DktvError::GimbalSingularity { pitch: theta });
        }
        let (sf, cf) = phi.sin_cos();
        let tt = st / ct;
        Ok(Matrix3::new(1.0, sf * tt, cf * tt, 0.0, cf, -sf, 0.0, sf / ct, cf / ct))
    }

    /// Gravity plus thrust in body coordinates.
    pub fn body_force(&self, phi: f64, theta: f64, thrust: f64) -> Vector3<f64> {
        let mg = self.cfg.mass * self.cfg.gravity;
        let (sf, cf) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        Vector3::new(-mg * st, mg * ct * sf, mg * ct * cf - thrust)
    }

    pub fn hover_thrust(&self) -> f64 {
        self.cfg.mass * self.cfg.gravity
    }
}

impl System for Quadcopter {
    fn state_dim(&self) -> usize {
        12
    }

    fn input_dim(&self) -> usize {
        4
    }

    fn disturbance_dim(&self) -> usize {
        3
    }

    fn deriv(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64, w: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != 12 {
            return Err(DktvError::dims("quadcopter state", 12, x.len()));
        }
        if u.len() != 4 {
            return Err(DktvError::dims("quadcopter input", 4, u.len()));
        }
        let c = &self.cfg;
        let vel = Vector3::new(x[3], x[4], x[5]);
        let (phi, theta, psi) = (x[6], x[7], x[8]);
        let rates = Vector3::new(x[9], x[10], x[11]);
        let (p, q, r) = (rates[0], rates[1], rates[2]);
        let wt = if w.len() == 3 { Vector3::new(w[0], w[1], w[2]) } else { Vector3::zeros() };

        let pos_dot = self.position_matrix(phi, theta, psi) * vel;
        let euler_dot = Self::euler_rate_matrix(phi, theta)? * rates;
        let coriolis = Vector3::new(r * vel[1] - q * vel[2], p * vel[2] - r * vel[0], q * vel[0] - p * vel[1]);
        let vel_dot = coriolis + (self.body_force(phi, theta, u[0]) + wt) / c.mass;
        let rate_dot = Vector3::new(
            (c.jy - c.jz) / c.jx * q * r + u[1] / c.jx,
            (c.jz - c.jx) / c.jy * p * r + u[2] / c.jy,
            (c.jx - c.jy) / c.jz * p * q + u[3] / c.jz,
        );
        let mut out = DVector::zeros(12);
        out.fixed_rows_mut::<3>(0).copy_from(&pos_dot);
        out.fixed_rows_mut::<3>(3).copy_from(&vel_dot);
        out.fixed_rows_mut::<3>(6).copy_from(&euler_dot);
        out.fixed_rows_mut::<3>(9).copy_from(&rate_dot);
        Ok(out)
    }
}

/// Cascaded PD flight controller following a minimum-jerk path between two
/// positions (north, east, altitude).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadController {
    pub start: [f64; 3],
    pub goal: [f64; 3],
    /// Duration of the reference path; the goal is held afterwards.
    pub travel_time: f64,
    pub kp_pos: f64,
    pub kp_vel: f64,
    pub kp_att: f64,
    pub kd_att: f64,
    pub max_tilt: f64,
    /// Yaw reference `yaw_amplitude * sin(2 pi t / yaw_period)`.
    pub yaw_amplitude: f64,
    pub yaw_period: f64,
    /// Standard deviation of Gaussian dither added to `(T, tau_phi,
    /// tau_theta, tau_psi)` at every sample, imitating a human pilot.
    pub dither: [f64; 4],
    pub dither_seed: u64,
    #[serde(skip)]
    pub model: Option<QuadConfig>,
    #[serde(skip)]
    rng: Option<ChaCha8Rng>,
}

impl Default for QuadController {
    fn default() -> Self {
        Self {
            start: [0.0; 3],
            goal: [1.0, 2.0, 3.0],
            travel_time: 15.0,
            kp_pos: 0.8,
            kp_vel: 1.5,
            kp_att: 16.0,
            kd_att: 8.0,
            max_tilt: 0.4,
            yaw_amplitude: 0.0,
            yaw_period: 8.0,
            dither: [0.0; 4],
            dither_seed: 0,
            model: None,
            rng: None,
        }
    }
}

impl QuadController {
    pub fn with_excitation(mut self, yaw_amplitude: f64, dither: [f64; 4]) -> Self {
        self.yaw_amplitude = yaw_amplitude;
        self.dither = dither;
        self
    }

    pub fn for_model(mut self, cfg: &QuadConfig) -> Self {
        self.model = Some(cfg.clone());
        self
    }

    /// Reference position and velocity at time `t`.
    pub fn reference(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let p0 = Vector3::from(self.start);
        let p1 = Vector3::from(self.goal);
        let tau = (t / self.travel_time).clamp(0.0, 1.0);
        let s = tau.powi(3) * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        let ds = if t >= self.travel_time || t <= 0.0 {
            0.0
        } else {
            30.0 * tau * tau * (1.0 - tau) * (1.0 - tau) / self.travel_time
        };
        (p0 + (p1 - p0) * s, (p1 - p0) * ds)
    }

    pub fn control(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let cfg = self.model.clone().unwrap_or_default();
        let quad = Quadcopter::new(cfg.clone());
        let g = cfg.gravity;
        let pos = Vector3::new(x[0], x[1], x[2]);
        let vel_b = Vector3::new(x[3], x[4], x[5]);
        let (phi, theta, psi) = (x[6], x[7], x[8]);
        let (p_ref, v_ref) = self.reference(t);
        let v_des = v_ref + (p_ref - pos) * self.kp_pos;
        let rot = quad.position_matrix(phi, theta, psi);
        let vb_des = rot.try_inverse().map(|ri| ri * v_des).unwrap_or_else(|| rot.transpose() * v_des);
        let a_b = (vb_des - vel_b) * self.kp_vel;
        let theta_des = (-a_b[0] / g).clamp(-1.0, 1.0).asin().clamp(-self.max_tilt, self.max_tilt);
        let phi_des = (a_b[1] / (g * theta.cos())).clamp(-1.0, 1.0).asin().clamp(-self.max_tilt, self.max_tilt);
        let thrust = (cfg.mass * (g * theta.cos() * phi.cos() - a_b[2])).max(0.0);
        let tau_phi = cfg.jx * (self.kp_att * (phi_des - phi) - self.kd_att * x[9]);
        let tau_theta = cfg.jy * (self.kp_att * (theta_des - theta) - self.kd_att * x[10]);
        let psi_des = self.yaw_amplitude * (2.0 * std::f64::consts::PI * t / self.yaw_period).sin();
        let tau_psi = cfg.jz * (self.kp_att * (psi_des - psi) - self.kd_att * x[11]);
        DVector::from_vec(vec![thrust, tau_phi, tau_theta, tau_psi])
    }
}

impl InputSource for QuadController {
    fn input(&mut self, _k: usize, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut u = self.control(t, x);
        if self.dither.iter().any(|&d| d != 0.0) {
            let seed = self.dither_seed;
            let rng = self.rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(seed));
            for (ui, &d) in u.iter_mut().zip(&self.dither) {
                let z: f64 = StandardNormal.sample(rng);
                *ui += d * z;
            }
        }
        u
    }
}
