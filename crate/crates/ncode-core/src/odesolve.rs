//! Explicit ODE integrators over flat state buffers.
//!
//! The right-hand side is any `FnMut(t, z, dz)` writing dz in place; the
//! augmented typing (x vs theta split) lives in [`AugmentedState`] and is
//! applied only at the API boundary. Backward integration is requested by
//! passing `t1 < t0`; the step size simply carries a negative sign.

use crate::error::{Error, Result};
use crate::numcore::{AugmentedState, ControlWeights, StateVec};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Integration method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

/// Solver settings shared by all integrators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Step size for the fixed-step methods (euler, rk4).
    pub fixed_dt: f64,
    pub max_steps: usize,
    /// Store every accepted step instead of just the endpoints.
    pub dense_record: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol: 1e-3,
            atol: 1e-3,
            fixed_dt: 1e-2,
            max_steps: 1_000_000,
            dense_record: false,
        }
    }
}

impl SolverConfig {
    pub fn rk4(dt: f64) -> Self {
        SolverConfig {
            method: Method::Rk4,
            fixed_dt: dt,
            ..SolverConfig::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol,
            atol,
            ..SolverConfig::default()
        }
    }

    pub fn with_dense(mut self, dense: bool) -> Self {
        self.dense_record = dense;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.fixed_dt > 0.0) {
            return Err(Error::param(
                "rtol, atol and fixed_dt must be positive".to_string(),
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::param("max_steps must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Time-stamped sequence of augmented states from one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<AugmentedState>,
    pub n_rhs_evals: usize,
}

impl Trajectory {
    pub fn last(&self) -> &AugmentedState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `t,x_0..x_{d-1},theta_0..theta_{k-1}`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let first = self
            .states
            .first()
            .ok_or_else(|| Error::Input("cannot export an empty trajectory".to_string()))?;
        let d = first.x.dim();
        let k = first.theta.len();
        let mut header = String::from("t");
        for i in 0..d {
            header.push_str(&format!(",x_{i}"));
        }
        for i in 0..k {
            header.push_str(&format!(",theta_{i}"));
        }
        writeln!(w, "{header}")?;
        for (t, z) in self.times.iter().zip(&self.states) {
            let mut row = format!("{t:.16e}");
            for v in z.x.values() {
                row.push_str(&format!(",{v:.16e}"));
            }
            for v in z.theta.values() {
                row.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Trajectory over raw flat buffers; used internally and by the adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub n_rhs_evals: usize,
}

impl FlatTrajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

fn check_finite(buf: &[f64], t: f64, what: &str) -> Result<()> {
    if buf.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            t,
            what: what.to_string(),
        });
    }
    Ok(())
}

/// One classical 4th-order Runge-Kutta step on a flat buffer.
pub fn rk4_step_flat<F>(rhs: &mut F, t: f64, y: &[f64], dt: f64, out: &mut [f64]) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    rhs(t, y, &mut k1);
    check_finite(&k1, t, "non-finite rhs output")?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k1[i];
    }
    rhs(t + 0.5 * dt, &tmp, &mut k2);
    check_finite(&k2, t + 0.5 * dt, "non-finite rhs output")?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k2[i];
    }
    rhs(t + 0.5 * dt, &tmp, &mut k3);
    check_finite(&k3, t + 0.5 * dt, "non-finite rhs output")?;
    for i in 0..n {
        tmp[i] = y[i] + dt * k3[i];
    }
    rhs(t + dt, &tmp, &mut k4);
    check_finite(&k4, t + dt, "non-finite rhs output")?;

    for i in 0..n {
        out[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Outcome of one embedded 5(4) step attempt.
#[derive(Debug, Clone)]
pub struct Dopri5Step {
    /// 5th-order candidate (equals the input state when rejected).
    pub y_next: Vec<f64>,
    pub dt_next: f64,
    pub accepted: bool,
    pub err_norm: f64,
}

/// One Dormand-Prince 5(4) attempt with the standard step controller.
///
/// err = max_i |y5_i - y4_i| / (atol + rtol * max(|y_i|, |y5_i|)), accepted iff
/// err <= 1, and dt_next = dt * clamp(0.9 * err^(-1/5), 0.2, 5.0).
pub fn dopri5_step_flat<F>(
    rhs: &mut F,
    t: f64,
    y: &[f64],
    dt_try: f64,
    rtol: f64,
    atol: f64,
) -> Result<Dopri5Step>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];

    for s in 0..7 {
        for i in 0..n {
            let mut acc = y[i];
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    acc += dt_try * a * kj[i];
                }
            }
            tmp[i] = acc;
        }
        let ts = t + DP_C[s] * dt_try;
        rhs(ts, &tmp, &mut k[s]);
        check_finite(&k[s], ts, "non-finite stage derivative")?;
    }

    let mut y5 = vec![0.0; n];
    let mut err: f64 = 0.0;
    for i in 0..n {
        let mut acc5 = y[i];
        let mut acc4 = y[i];
        for (s, ks) in k.iter().enumerate() {
            acc5 += dt_try * DP_B5[s] * ks[i];
            acc4 += dt_try * DP_B4[s] * ks[i];
        }
        y5[i] = acc5;
        let scale = atol + rtol * y[i].abs().max(acc5.abs());
        err = err.max((acc5 - acc4).abs() / scale);
    }

    let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
    let accepted = err <= 1.0;
    Ok(Dopri5Step {
        y_next: if accepted { y5 } else { y.to_vec() },
        dt_next: dt_try * factor,
        accepted,
        err_norm: err,
    })
}

/// Integrate a flat system from t0 to t1 (either direction).
pub fn integrate_flat<F>(
    mut rhs: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<FlatTrajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    if t0 == t1 {
        return Err(Error::param(
            "integration interval is empty (t0 == t1)".to_string(),
        ));
    }
    check_finite(y0, t0, "non-finite initial state")?;

    let direction = if t1 > t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let snap = span * 1e-14;

    let mut times = vec![t0];
    let mut states = vec![y0.to_vec()];
    let mut n_evals = 0usize;
    let mut t = t0;
    let mut y = y0.to_vec();

    macro_rules! budget {
        ($steps:expr) => {{
            let mut partial_times = times.clone();
            let mut partial_states = states.clone();
            if !cfg.dense_record {
                partial_times.push(t);
                partial_states.push(y.clone());
            }
            return Err(Error::Budget {
                steps: $steps,
                t,
                partial: Box::new(FlatTrajectory {
                    times: partial_times,
                    states: partial_states,
                    n_rhs_evals: n_evals,
                }),
            });
        }};
    }

    match cfg.method {
        Method::Euler | Method::Rk4 => {
            let dt_mag = cfg.fixed_dt.min(span);
            let evals_per = if cfg.method == Method::Euler { 1 } else { 4 };
            let mut steps = 0usize;
            let mut out = vec![0.0; y.len()];
            let mut k = vec![0.0; y.len()];
            while (t1 - t) * direction > snap {
                if steps >= cfg.max_steps {
                    budget!(steps);
                }
                let remaining = (t1 - t) * direction;
                let dt = direction * dt_mag.min(remaining);
                match cfg.method {
                    Method::Euler => {
                        rhs(t, &y, &mut k);
                        check_finite(&k, t, "non-finite rhs output")?;
                        for i in 0..y.len() {
                            out[i] = y[i] + dt * k[i];
                        }
                    }
                    Method::Rk4 => rk4_step_flat(&mut rhs, t, &y, dt, &mut out)?,
                    Method::Dopri5 => unreachable!(),
                }
                n_evals += evals_per;
                steps += 1;
                y.copy_from_slice(&out);
                t += dt;
                if (t1 - t) * direction <= snap {
                    t = t1;
                }
                check_finite(&y, t, "non-finite state")?;
                if cfg.dense_record {
                    times.push(t);
                    states.push(y.clone());
                }
            }
        }
        Method::Dopri5 => {
            let mut dt = direction * span * 1e-2;
            let mut attempts = 0usize;
            while (t1 - t) * direction > snap {
                if attempts >= cfg.max_steps {
                    budget!(attempts);
                }
                let remaining = (t1 - t) * direction;
                // Shorten the final step to land exactly on t1.
                if dt.abs() > remaining {
                    dt = direction * remaining;
                }
                let step = dopri5_step_flat(&mut rhs, t, &y, dt, cfg.rtol, cfg.atol)?;
                n_evals += 7;
                attempts += 1;
                if step.accepted {
                    t += dt;
                    if (t1 - t) * direction <= snap {
                        t = t1;
                    }
                    y = step.y_next;
                    check_finite(&y, t, "non-finite state")?;
                    if cfg.dense_record {
                        times.push(t);
                        states.push(y.clone());
                    }
                }
                dt = step.dt_next;
            }
        }
    }

    // Endpoints are always present even without dense recording.
    if !cfg.dense_record {
        times.push(t1);
        states.push(y);
    }

    Ok(FlatTrajectory {
        times,
        states,
        n_rhs_evals: n_evals,
    })
}

/// One RK4 step on an augmented state.
pub fn step_rk4<F>(mut rhs: F, z: &AugmentedState, dt: f64) -> Result<AugmentedState>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if dt <= 0.0 {
        return Err(Error::param(format!("step_rk4 needs dt > 0, got {dt}")));
    }
    let y = z.to_flat();
    let mut out = vec![0.0; y.len()];
    rk4_step_flat(&mut rhs, z.t, &y, dt, &mut out)?;
    z.from_flat(&out, z.t + dt)
}

/// One embedded 5(4) attempt on an augmented state.
pub fn step_dopri5<F>(
    mut rhs: F,
    z: &AugmentedState,
    dt_try: f64,
    rtol: f64,
    atol: f64,
) -> Result<(AugmentedState, f64, bool, f64)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if dt_try <= 0.0 {
        return Err(Error::param(format!(
            "step_dopri5 needs dt > 0, got {dt_try}"
        )));
    }
    let y = z.to_flat();
    let step = dopri5_step_flat(&mut rhs, z.t, &y, dt_try, rtol, atol)?;
    let t_next = if step.accepted { z.t + dt_try } else { z.t };
    let z_next = z.from_flat(&step.y_next, t_next)?;
    Ok((z_next, step.dt_next, step.accepted, step.err_norm))
}

/// Integrate the augmented system from t0 to t1.
pub fn integrate<F>(
    rhs: F,
    z0: &AugmentedState,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let flat = integrate_flat(rhs, &z0.to_flat(), t0, t1, cfg)?;
    let states = flat
        .times
        .iter()
        .zip(&flat.states)
        .map(|(&t, s)| z0.from_flat(s, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        times: flat.times,
        states,
        n_rhs_evals: flat.n_rhs_evals,
    })
}

/// Solve the flow map: integrate from (x0, theta) over [0, T] and return x(T).
pub fn flow_map<F>(
    rhs: F,
    x0: &StateVec,
    theta: &ControlWeights,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<StateVec>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let z0 = AugmentedState::new(x0.clone(), theta.clone(), 0.0);
    let traj = integrate(rhs, &z0, 0.0, horizon, cfg)?;
    Ok(traj.last().x.clone())
}
