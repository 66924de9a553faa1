//! Bouc-Wen hysteretic spring used as a cheap labeling oracle.
//!
//! ```text
//! dz/dt = A du/dt - beta |du/dt| |z|^(n-1) z - gamma du/dt |z|^n
//! r     = alpha k u + (1 - alpha) k z
//! ```
//!
//! The displacement is linear between samples, so `du/dt` is constant on each
//! interval and `z` is advanced with classical RK4 sub-steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoucWenParams {
    /// Initial stiffness, force per length unit.
    pub k: f64,
    /// Post-yield stiffness ratio in (0, 1].
    pub alpha: f64,
    pub a: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n_exp: f64,
    /// Inner integration step in seconds; at most the series time step.
    pub dt_sub: f64,
}

impl BoucWenParams {
    /// Defaults with visible loops at unit-scale displacement; `dt_sub = dt / 10`.
    pub fn default_for(dt: f64) -> Self {
        Self {
            k: 100.0,
            alpha: 0.1,
            a: 1.0,
            beta: 0.5,
            gamma: 0.5,
            n_exp: 1.0,
            dt_sub: dt / 10.0,
        }
    }

    /// Ultimate hysteretic displacement `(A / (beta + gamma))^(1/n)`.
    pub fn z_ultimate(&self) -> f64 {
        (self.a / (self.beta + self.gamma)).powf(1.0 / self.n_exp)
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        let finite = [self.k, self.alpha, self.a, self.beta, self.gamma, self.n_exp, self.dt_sub]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config(format!("non-finite Bouc-Wen parameter in {self:?}")));
        }
        if self.k <= 0.0 {
            return Err(Error::Config(format!("stiffness {} must be positive", self.k)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1]", self.alpha)));
        }
        if self.n_exp < 1.0 {
            return Err(Error::Config(format!("exponent {} must be >= 1", self.n_exp)));
        }
        if !(self.dt_sub > 0.0 && self.dt_sub <= dt * (1.0 + 1e-12)) {
            return Err(Error::Config(format!(
                "inner step {} must lie in (0, {dt}]",
                self.dt_sub
            )));
        }
        Ok(())
    }

    fn z_rate(&self, z: f64, v: f64) -> f64 {
        let az = z.abs();
        self.a * v - self.beta * v.abs() * az.powf(self.n_exp - 1.0) * z - self.gamma * v * az.powf(self.n_exp)
    }
}

/// Force and hysteretic state histories.
#[derive(Clone, Debug, PartialEq)]
pub struct BoucWenTrace {
    pub force: Vec<f64>,
    pub z: Vec<f64>,
}

/// Reaction force for displacement history `u` sampled at `dt`.
pub fn boucwen_response(u: &[f64], dt: f64, params: &BoucWenParams) -> Result<Vec<f64>> {
    Ok(boucwen_trace(u, dt, params)?.force)
}

/// Like [`boucwen_response`] but also returns `z`. `u` is shifted so it starts at 0.
pub fn boucwen_trace(u: &[f64], dt: f64, params: &BoucWenParams) -> Result<BoucWenTrace> {
    params.validate(dt)?;
    if u.len() < 2 {
        return Err(Error::LengthMismatch {
            what: "Bouc-Wen input".into(),
            expected: 2,
            got: u.len(),
        });
    }
    if let Some(i) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "Bouc-Wen input".into(),
            index: i,
        });
    }
    let u0 = u[0];
    let n_sub = ((dt / params.dt_sub).round() as usize).max(1);
    let h = dt / n_sub as f64;
    let (k, alpha) = (params.k, params.alpha);

    let mut z = 0.0;
    let mut zs = Vec::with_capacity(u.len());
    let mut force = Vec::with_capacity(u.len());
    zs.push(0.0);
    force.push(alpha * k * (u[0] - u0));
    for step in 1..u.len() {
        let v = (u[step] - u[step - 1]) / dt;
        for _ in 0..n_sub {
            let k1 = params.z_rate(z, v);
            let k2 = params.z_rate(z + 0.5 * h * k1, v);
            let k3 = params.z_rate(z + 0.5 * h * k2, v);
            let k4 = params.z_rate(z + h * k3, v);
            z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        if !z.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("hysteretic state became {z}"),
            });
        }
        zs.push(z);
        force.push(alpha * k * (u[step] - u0) + (1.0 - alpha) * k * z);
    }
    Ok(BoucWenTrace { force, z: zs })
}
