//! Reactor-separator process with recycle: two CSTRs in series running
//! `A → B → C`, followed by a flash separator whose bottoms recycle to the
//! first reactor. Time is in hours, duties in kJ/h.

use serde::{Deserialize, Serialize};

use super::SimError;

pub const RSCP_STATE_DIM: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RscpParams {
    pub volumes: [f64; 3],
    pub feed_flow_1: f64,
    pub feed_flow_2: f64,
    pub recycle_flow: f64,
    pub purge_flow: f64,
    pub feed_temp_1: f64,
    pub feed_temp_2: f64,
    pub feed_xa: [f64; 2],
    pub feed_xb: [f64; 2],
    pub rate_constants: [f64; 2],
    pub activation_energies: [f64; 2],
    pub reaction_enthalpies: [f64; 2],
    pub density: f64,
    pub heat_capacity: f64,
    pub molar_concentration: f64,
    pub vaporization_enthalpies: [f64; 3],
    pub volatilities: [f64; 3],
    pub gas_constant: f64,
    /// Catalyst deactivation rate: Arrhenius terms are scaled by
    /// `e^{−decay·t}`. Zero for the time-invariant plant.
    pub deactivation_rate: f64,
    /// Nominal operating point used as the tracking reference.
    pub nominal_state: [f64; RSCP_STATE_DIM],
    /// Half-width of the duty box around the nominal duties.
    pub duty_span: f64,
    /// Sampling period in hours.
    pub dt: f64,
    pub min_temperature: f64,
    pub max_temperature: f64,
}

impl RscpParams {
    pub fn time_invariant() -> Self {
        Self {
            volumes: [1.0, 0.5, 1.0],
            feed_flow_1: 5.04,
            feed_flow_2: 5.04,
            recycle_flow: 50.4,
            purge_flow: 5.04,
            feed_temp_1: 300.0,
            feed_temp_2: 300.0,
            feed_xa: [1.0, 1.0],
            feed_xb: [0.0, 0.0],
            rate_constants: [9.972e6, 9.36e6],
            activation_energies: [5e4, 6e4],
            reaction_enthalpies: [-1.2e5, -1.4e5],
            density: 1000.0,
            heat_capacity: 4.2,
            molar_concentration: 2.0,
            vaporization_enthalpies: [-3.53e4, -1.57e4, -4.07e4],
            volatilities: [3.5, 1.0, 0.5],
            gas_constant: 8.314,
            deactivation_rate: 0.0,
            nominal_state: [0.18, 0.67, 480.32, 0.20, 0.65, 472.79, 0.07, 0.67, 474.89],
            duty_span: 1e6,
            dt: 0.005,
            min_temperature: 250.0,
            max_temperature: 700.0,
        }
    }

    pub fn time_varying() -> Self {
        Self {
            deactivation_rate: 0.01,
            ..Self::time_invariant()
        }
    }

    fn heat_coefficient(&self, j: usize) -> f64 {
        -self.reaction_enthalpies[j] * self.molar_concentration / (self.density * self.heat_capacity)
    }

    /// `∂Ṫ_i/∂Q_i`.
    pub fn duty_gain(&self, vessel: usize) -> f64 {
        1.0 / (self.density * self.heat_capacity * self.volumes[vessel])
    }

    /// Recycle mass fractions `(x_A,r, x_B,r, x_C,r)` from the separator
    /// composition.
    pub fn recycle_composition(&self, xa3: f64, xb3: f64) -> Result<[f64; 3], SimError> {
        let [aa, ab, ac] = self.volatilities;
        let xc3 = 1.0 - xa3 - xb3;
        let d = aa * xa3 + ab * xb3 + ac * xc3;
        if !(d > 0.0) {
            return Err(SimError::Domain {
                what: "relative-volatility denominator is not positive",
            });
        }
        Ok([aa * xa3 / d, ab * xb3 / d, ac * xc3 / d])
    }

    /// Duties that zero the three energy balances at the nominal state.
    pub fn nominal_duties(&self) -> [f64; 3] {
        let d = rscp_deriv(self, &self.nominal_state, &[0.0; 3], 0.0)
            .expect("nominal state lies in the valid domain");
        [
            -d[2] / self.duty_gain(0),
            -d[5] / self.duty_gain(1),
            -d[8] / self.duty_gain(2),
        ]
    }

    /// Equilibrium of the time-invariant plant under the nominal duties,
    /// found by Newton's method from the nominal state.
    pub fn fixed_point(&self) -> [f64; RSCP_STATE_DIM] {
        let ti = Self {
            deactivation_rate: 0.0,
            ..*self
        };
        let q = ti.nominal_duties();
        let mut x = ti.nominal_state;
        let f = |x: &[f64; RSCP_STATE_DIM]| rscp_deriv(&ti, x, &q, 0.0).expect("fixed point iterate left the domain");
        for _ in 0..50 {
            let fx = f(&x);
            let mut jac = crate::Matrix::zeros(RSCP_STATE_DIM, RSCP_STATE_DIM);
            for j in 0..RSCP_STATE_DIM {
                let h = 1e-7 * x[j].abs().max(1e-3);
                let mut plus = x;
                plus[j] += h;
                let mut minus = x;
                minus[j] -= h;
                let (fp, fm) = (f(&plus), f(&minus));
                for i in 0..RSCP_STATE_DIM {
                    jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
                }
            }
            let step = jac.lu().expect("nonsingular Jacobian at the fixed point").solve_vec(&fx);
            for i in 0..RSCP_STATE_DIM {
                x[i] -= step[i];
            }
            if step.iter().zip(&x).all(|(s, xi)| s.abs() <= 1e-13 * xi.abs().max(1.0)) {
                break;
            }
        }
        x
    }
}

/// Time derivative of the nine-dimensional state, per hour.
pub fn rscp_deriv(p: &RscpParams, s: &[f64; RSCP_STATE_DIM], q: &[f64; 3], t: f64) -> Result<[f64; RSCP_STATE_DIM], SimError> {
    let [xa1, xb1, t1, xa2, xb2, t2, xa3, xb3, t3] = *s;
    let [xar, xbr, xcr] = p.recycle_composition(xa3, xb3)?;
    let [v1, v2, v3] = p.volumes;
    let f1 = p.feed_flow_1 + p.recycle_flow;
    let f2 = f1 + p.feed_flow_2;
    let out3 = p.recycle_flow + p.purge_flow;
    let activity = (-p.deactivation_rate * t).exp();
    let rates = |temp: f64| {
        let r = p.gas_constant * temp;
        (
            activity * p.rate_constants[0] * (-p.activation_energies[0] / r).exp(),
            activity * p.rate_constants[1] * (-p.activation_energies[1] / r).exp(),
        )
    };
    let (r11, r21) = rates(t1);
    let (r12, r22) = rates(t2);
    let (b1, b2) = (p.heat_coefficient(0), p.heat_coefficient(1));
    let rho_cp = p.density * p.heat_capacity;
    let [hva, hvb, hvc] = p.vaporization_enthalpies;

    Ok([
        p.feed_flow_1 / v1 * (p.feed_xa[0] - xa1) + p.recycle_flow / v1 * (xar - xa1) - r11 * xa1,
        p.feed_flow_1 / v1 * (p.feed_xb[0] - xb1) + p.recycle_flow / v1 * (xbr - xb1) + r11 * xa1 - r21 * xb1,
        p.feed_flow_1 / v1 * (p.feed_temp_1 - t1)
            + p.recycle_flow / v1 * (t3 - t1)
            + b1 * r11 * xa1
            + b2 * r21 * xb1
            + q[0] / (rho_cp * v1),
        f1 / v2 * (xa1 - xa2) + p.feed_flow_2 / v2 * (p.feed_xa[1] - xa2) - r12 * xa2,
        f1 / v2 * (xb1 - xb2) + p.feed_flow_2 / v2 * (p.feed_xb[1] - xb2) + r12 * xa2 - r22 * xb2,
        f1 / v2 * (t1 - t2)
            + p.feed_flow_2 / v2 * (p.feed_temp_2 - t2)
            + b1 * r12 * xa2
            + b2 * r22 * xb2
            + q[1] / (rho_cp * v2),
        f2 / v3 * (xa2 - xa3) - out3 / v3 * (xar - xa3),
        f2 / v3 * (xb2 - xb3) - out3 / v3 * (xbr - xb3),
        f2 / v3 * (t2 - t3)
            + q[2] / (rho_cp * v3)
            + out3 * p.molar_concentration / (rho_cp * v3) * (xar * hva + xbr * hvb + xcr * hvc),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nominal_duties_are_order_1e6() {
        let q = RscpParams::time_invariant().nominal_duties();
        let expected = [2.870e6, 9.885e5, 3.129e6];
        for i in 0..3 {
            assert!((q[i] - expected[i]).abs() < 1e-3 * expected[i], "{q:?}");
        }
    }

    #[test]
    fn steady_state_residual() {
        let p = RscpParams::time_invariant();
        let q = p.nominal_duties();
        let d = rscp_deriv(&p, &p.nominal_state, &q, 0.0).unwrap();
        for i in [2, 5, 8] {
            assert!(d[i].abs() < 1e-6);
        }
        // compositions: per-second rates
        for i in [0, 1, 3, 4, 6, 7] {
            assert!(d[i].abs() / 3600.0 < 4e-3);
        }
    }

    #[test]
    fn duty_gain_of_first_reactor() {
        let p = RscpParams::time_invariant();
        assert_eq!(p.duty_gain(0), 1.0 / 4200.0);
    }

    #[test]
    fn pure_a_separator_recycles_pure_a() {
        let p = RscpParams::time_invariant();
        let r = p.recycle_composition(1.0, 0.0).unwrap();
        assert_eq!(r, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_composition_is_a_domain_error() {
        let p = RscpParams::time_invariant();
        let mut s = p.nominal_state;
        s[6] = 0.0;
        s[7] = -2.0;
        assert!(matches!(
            rscp_deriv(&p, &s, &[0.0; 3], 0.0),
            Err(SimError::Domain { .. })
        ));
    }

    #[test]
    fn fixed_point_matches_recorded_value() {
        let p = RscpParams::time_invariant();
        let x = p.fixed_point();
        let expected = [0.2273, 0.6584, 466.74, 0.2490, 0.6387, 459.68, 0.0826, 0.6937, 461.77];
        for i in 0..9 {
            assert!((x[i] - expected[i]).abs() < 1e-2 * expected[i].abs().max(0.01), "{x:?}");
        }
        let d = rscp_deriv(&p, &x, &p.nominal_duties(), 0.0).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-8), "{d:?}");
    }

    #[test]
    fn tv_matches_ti_at_time_zero() {
        let ti = RscpParams::time_invariant();
        let tv = RscpParams::time_varying();
        let q = ti.nominal_duties();
        let s = ti.fixed_point();
        assert_eq!(rscp_deriv(&ti, &s, &q, 0.0).unwrap(), rscp_deriv(&tv, &s, &q, 0.0).unwrap());
        assert_ne!(rscp_deriv(&ti, &s, &q, 5.0).unwrap(), rscp_deriv(&tv, &s, &q, 5.0).unwrap());
    }

    proptest! {
        #[test]
        fn duties_enter_additively(
            xs in proptest::array::uniform9(0.0f64..1.0),
            q1 in proptest::array::uniform3(-3e6f64..3e6),
            q2 in proptest::array::uniform3(-3e6f64..3e6),
        ) {
            let p = RscpParams::time_invariant();
            let mut s = p.nominal_state;
            for i in [0, 1, 3, 4, 6] {
                s[i] = xs[i] * 0.5;
            }
            s[7] = xs[7] * 0.5;
            for i in [2, 5, 8] {
                s[i] = 400.0 + 100.0 * xs[i];
            }
            let a = rscp_deriv(&p, &s, &q1, 0.0).unwrap();
            let b = rscp_deriv(&p, &s, &q2, 0.0).unwrap();
            for i in 0..9 {
                let diff = a[i] - b[i];
                match i {
                    2 | 5 | 8 => {
                        let v = i / 3;
                        let want = (q1[v] - q2[v]) * p.duty_gain(v);
                        prop_assert!((diff - want).abs() <= 1e-9 * want.abs().max(1.0));
                    }
                    _ => prop_assert_eq!(diff, 0.0),
                }
            }
        }

        #[test]
        fn recycle_fractions_sum_to_one(xa in 0.0f64..1.0, frac in 0.0f64..1.0) {
            let xb = (1.0 - xa) * frac;
            let r = RscpParams::time_invariant().recycle_composition(xa, xb).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
