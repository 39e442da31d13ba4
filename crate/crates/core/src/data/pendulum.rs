//! Torque-driven damped pendulum integrated with classical RK4.
//!
//! The angle obeys `m l² φ'' = −μ φ' + m g l sin φ + u(t)`, so `φ = 0` is
//! the upright equilibrium.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::generative::Sequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Torque {
    Zero,
    /// Held constant for `interval` seconds, then redrawn uniformly in `[−max, max]`.
    Piecewise { interval: f64, max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Observation {
    /// `[sin φ, cos φ]`.
    Trig,
    /// A Gaussian blob at the rod tip on a `side × side` grid.
    Image { side: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumConfig {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    pub torque: Torque,
    /// Integration step in seconds.
    pub dt: f64,
    /// Simulated time in seconds.
    pub duration: f64,
    /// Seconds between observations; a multiple of `dt`.
    pub obs_interval: f64,
    pub observation: Observation,
    pub noise_std: f64,
    /// Initial angle; drawn uniformly in `[−π, π)` when absent.
    pub phi0: Option<f64>,
    /// Initial angular velocity; drawn uniformly in `[−1, 1)` when absent.
    pub omega0: Option<f64>,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        PendulumConfig {
            mass: 1.0,
            length: 1.0,
            damping: 0.5,
            gravity: 9.81,
            torque: Torque::Piecewise {
                interval: 0.5,
                max: 2.0,
            },
            dt: 0.01,
            duration: 10.0,
            obs_interval: 0.1,
            observation: Observation::Trig,
            noise_std: 0.05,
            phi0: None,
            omega0: None,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("length", self.length),
            ("gravity", self.gravity),
            ("dt", self.dt),
            ("duration", self.duration),
            ("obs_interval", self.obs_interval),
        ];
        for (what, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SsnnError::contract(format!("pendulum {what} must be > 0, got {v}")));
            }
        }
        if !(self.damping >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(SsnnError::contract("damping and noise_std must be >= 0"));
        }
        if let Torque::Piecewise { interval, max } = self.torque {
            if !(interval > 0.0 && max >= 0.0) {
                return Err(SsnnError::contract("torque interval must be > 0 and max >= 0"));
            }
        }
        if let Observation::Image { side } = self.observation {
            if side < 2 {
                return Err(SsnnError::contract("image side must be >= 2"));
            }
        }
        if self.substeps() == 0 || self.steps() == 0 {
            return Err(SsnnError::contract("duration and obs_interval leave no observations"));
        }
        Ok(())
    }

    /// Integration steps per observation.
    pub fn substeps(&self) -> usize {
        (self.obs_interval / self.dt).round() as usize
    }

    /// Number of observations.
    pub fn steps(&self) -> usize {
        (self.duration / self.obs_interval).round() as usize
    }

    pub fn obs_dim(&self) -> usize {
        match self.observation {
            Observation::Trig => 2,
            Observation::Image { side } => side * side,
        }
    }

    /// `(φ', ω')` at state `(φ, ω)` under torque `u`.
    pub fn derivative(&self, phi: f64, omega: f64, u: f64) -> (f64, f64) {
        let inertia = self.mass * self.length * self.length;
        let acc = (-self.damping * omega + self.mass * self.gravity * self.length * phi.sin() + u) / inertia;
        (omega, acc)
    }

    /// One classical RK4 step of length `h`.
    pub fn rk4_step(&self, phi: f64, omega: f64, u: f64, h: f64) -> (f64, f64) {
        let (k1p, k1w) = self.derivative(phi, omega, u);
        let (k2p, k2w) = self.derivative(phi + 0.5 * h * k1p, omega + 0.5 * h * k1w, u);
        let (k3p, k3w) = self.derivative(phi + 0.5 * h * k2p, omega + 0.5 * h * k2w, u);
        let (k4p, k4w) = self.derivative(phi + h * k3p, omega + h * k3w, u);
        (
            phi + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
            omega + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w),
        )
    }

    /// Integrates `n` steps of `h` from `(φ, ω)` under zero torque.
    pub fn integrate(&self, phi: f64, omega: f64, h: f64, n: usize) -> (f64, f64) {
        (0..n).fold((phi, omega), |(p, w), _| self.rk4_step(p, w, 0.0, h))
    }

    fn render(&self, phi: f64) -> Vec<f64> {
        match self.observation {
            Observation::Trig => vec![phi.sin(), phi.cos()],
            Observation::Image { side } => {
                let (tx, ty) = (phi.sin(), phi.cos());
                let extent = 1.2;
                let width = 0.25;
                let cell = 2.0 * extent / side as f64;
                let mut img = Vec::with_capacity(side * side);
                for r in 0..side {
                    let y = extent - (r as f64 + 0.5) * cell;
                    for c in 0..side {
                        let x = -extent + (c as f64 + 0.5) * cell;
                        let d2 = (x - tx).powi(2) + (y - ty).powi(2);
                        img.push((-d2 / (2.0 * width * width)).exp());
                    }
                }
                img
            }
        }
    }
}

/// One simulated trajectory sampled at the observation times.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumTrace {
    pub phi: Vec<f64>,
    pub omega: Vec<f64>,
    pub x: Sequence,
}

pub fn simulate_pendulum<R: Rng + ?Sized>(
    config: &PendulumConfig,
    id: impl Into<String>,
    rng: &mut R,
) -> Result<PendulumTrace> {
    config.validate()?;
    let mut phi = match config.phi0 {
        Some(v) => v,
        None => rng.random_range(-PI..PI),
    };
    let mut omega = match config.omega0 {
        Some(v) => v,
        None => rng.random_range(-1.0..1.0),
    };
    let steps = config.steps();
    let sub = config.substeps();
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise std");
    let mut u = 0.0;
    let mut next_switch = 0.0;
    let (mut phis, mut omegas) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    let mut data = Vec::with_capacity(steps * config.obs_dim());
    for step in 0..steps {
        for j in 0..sub {
            if let Torque::Piecewise { interval, max } = config.torque {
                let time = (step * sub + j) as f64 * config.dt;
                if time >= next_switch - 1e-9 {
                    u = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
                    next_switch += interval;
                }
            }
            (phi, omega) = config.rk4_step(phi, omega, u, config.dt);
        }
        phis.push(phi);
        omegas.push(omega);
        for v in config.render(phi) {
            let n = if config.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(v + n);
        }
    }
    let x = Sequence::new(id, steps, config.obs_dim(), data)?;
    Ok(PendulumTrace {
        phi: phis,
        omega: omegas,
        x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upright_rest_is_a_fixed_point() {
        let cfg = PendulumConfig {
            torque: Torque::Zero,
            noise_std: 0.0,
            phi0: Some(0.0),
            omega0: Some(0.0),
            ..PendulumConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = simulate_pendulum(&cfg, "p", &mut rng).unwrap();
        assert!(tr.phi.iter().chain(&tr.omega).all(|v| *v == 0.0));
    }

    #[test]
    fn undamped_energy_is_conserved() {
        let cfg = PendulumConfig {
            damping: 0.0,
            ..PendulumConfig::default()
        };
        let energy = |p: f64, w: f64| 0.5 * w * w + cfg.gravity * p.cos();
        let (p0, w0) = (2.5, 0.3);
        let h = 1e-3;
        let secs = 5.0;
        let (p, w) = cfg.integrate(p0, w0, h, (secs / h) as usize);
        let drift = (energy(p, w) - energy(p0, w0)).abs() / secs;
        assert!(drift < 1e-6, "{drift}");
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let cfg = PendulumConfig::default();
        let (p0, w0, horizon) = (2.0, 0.5, 2.0);
        let reference = cfg.integrate(p0, w0, 0.05 / 16.0, (horizon / (0.05 / 16.0)) as usize);
        let err = |h: f64| {
            let (p, w) = cfg.integrate(p0, w0, h, (horizon / h).round() as usize);
            ((p - reference.0).powi(2) + (w - reference.1).powi(2)).sqrt()
        };
        let ratio = err(0.05) / err(0.025);
        assert!((8.0..=24.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn image_mode_peaks_at_the_tip() {
        let cfg = PendulumConfig {
            observation: Observation::Image { side: 16 },
            noise_std: 0.0,
            ..PendulumConfig::default()
        };
        let img = cfg.render(0.0);
        assert_eq!(img.len(), 256);
        let best = crate::numerics::argmax(&img);
        // upright: tip at the top centre
        assert!(best / 16 <= 3, "row {}", best / 16);
        assert!((7..=8).contains(&(best % 16)));
    }

    #[test]
    fn seeded_runs_repeat() {
        let cfg = PendulumConfig::default();
        let a = simulate_pendulum(&cfg, "p", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = simulate_pendulum(&cfg, "p", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.len(), 100);
    }
}
