//! Cart-pole with Coulomb cart friction and viscous pivot friction.
//!
//! State `(x, ẋ, θ, θ̇)` with θ measured from upright, control the cart
//! force `F`. The cart friction force depends on the sign of the normal
//! force, which in turn depends on θ̈, so the angular acceleration is
//! solved assuming a positive normal force and re-solved once if that
//! assumption fails.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force_limit: f64,
    /// Sampling period in seconds.
    pub dt: f64,
    pub cart_friction_base: f64,
    /// Amplitude of the sinusoidal cart-friction modulation.
    pub cart_friction_amplitude: f64,
    /// Angular frequency of the modulation, rad/s.
    pub cart_friction_omega: f64,
    pub pole_friction: f64,
    pub max_angle: f64,
    pub max_position: f64,
}

impl CartPoleParams {
    /// Frictionless time-invariant benchmark.
    pub fn time_invariant() -> Self {
        Self {
            gravity: 10.0,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force_limit: 20.0,
            dt: 0.02,
            cart_friction_base: 0.0,
            cart_friction_amplitude: 0.0,
            cart_friction_omega: 1.0,
            pole_friction: 0.0,
            max_angle: 20f64.to_radians(),
            max_position: 10.0,
        }
    }

    /// Cart friction `5e-4 + sin(t)`, pole friction `2e-6`.
    pub fn time_varying() -> Self {
        Self {
            cart_friction_base: 5e-4,
            cart_friction_amplitude: 1.0,
            pole_friction: 2e-6,
            ..Self::time_invariant()
        }
    }

    pub fn cart_friction(&self, t: f64) -> f64 {
        self.cart_friction_base + self.cart_friction_amplitude * (self.cart_friction_omega * t).sin()
    }

    /// Mechanical energy of the frictionless system (uniform rod of length
    /// `2ℓ`), with zero potential at the pivot height.
    pub fn energy(&self, s: &[f64; 4]) -> f64 {
        let [_, xd, th, thd] = *s;
        let total = self.cart_mass + self.pole_mass;
        let ml = self.pole_mass * self.half_length;
        0.5 * total * xd * xd
            + ml * xd * thd * th.cos()
            + 0.5 * (4.0 / 3.0) * self.pole_mass * self.half_length.powi(2) * thd * thd
            + ml * self.gravity * th.cos()
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(ẋ, ẍ, θ̇, θ̈)` at time `t` under force `force` (already clipped).
pub fn cartpole_deriv(p: &CartPoleParams, s: &[f64; 4], force: f64, t: f64) -> [f64; 4] {
    let [_, xd, th, thd] = *s;
    let (sin, cos) = th.sin_cos();
    let total = p.cart_mass + p.pole_mass;
    let ml = p.pole_mass * p.half_length;
    let mu_c = p.cart_friction(t);
    let mu_p = p.pole_friction;
    let g = p.gravity;

    let angular = |sgn: f64| {
        let num = g * sin
            + cos * ((-force - ml * thd * thd * (sin + mu_c * sgn * cos)) / total + mu_c * g * sgn)
            - mu_p * thd / ml;
        let den = p.half_length * (4.0 / 3.0 - p.pole_mass * cos / total * (cos - mu_c * sgn));
        num / den
    };
    let normal = |thdd: f64| total * g - ml * (thdd * sin + thd * thd * cos);

    let mut sgn = signum0(xd);
    let mut thdd = angular(sgn);
    let mut n_c = normal(thdd);
    if n_c < 0.0 && sgn != 0.0 {
        sgn = -sgn;
        thdd = angular(sgn);
        n_c = normal(thdd);
    }
    let xdd = (force + ml * (thd * thd * sin - thdd * cos) - mu_c * n_c * signum0(n_c * xd)) / total;
    [xd, xdd, thd, thdd]
}
