//! Fixed-step classical Runge–Kutta integration.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("invalid integration parameters: {0}")]
    InvalidParameters(String),
    #[error("state became non-finite at t = {t:e} s")]
    Diverged { t: f64 },
}

/// Uniformly sampled solution of an initial value problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Work buffers for [`rk4_step`], reused across steps to avoid allocation.
#[derive(Debug, Clone)]
pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// One classical RK4 step of length `dt` from `(t, y)`, written into `out`.
///
/// `rhs(t, y, dydt)` must fill `dydt` with the vector field at `(t, y)`.
#[allow(clippy::needless_range_loop)]
pub fn rk4_step<F>(rhs: &mut F, t: f64, y: &[f64], dt: f64, out: &mut [f64], s: &mut Rk4Scratch)
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    rhs(t, y, &mut s.k1);
    for i in 0..n {
        s.tmp[i] = y[i] + 0.5 * dt * s.k1[i];
    }
    rhs(t + 0.5 * dt, &s.tmp, &mut s.k2);
    for i in 0..n {
        s.tmp[i] = y[i] + 0.5 * dt * s.k2[i];
    }
    rhs(t + 0.5 * dt, &s.tmp, &mut s.k3);
    for i in 0..n {
        s.tmp[i] = y[i] + dt * s.k3[i];
    }
    rhs(t + dt, &s.tmp, &mut s.k4);
    for i in 0..n {
        out[i] = y[i] + dt / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// Integrates `y' = rhs(t, y)` from `t = 0` to `t_end` on a uniform grid of step `dt`.
///
/// The final step is shortened if `t_end` is not a multiple of `dt`, so the last
/// sample always sits at `t_end`.
pub fn integrate_ode<F>(mut rhs: F, y0: &[f64], t_end: f64, dt: f64) -> Result<Trajectory, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(OdeError::InvalidParameters(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(OdeError::InvalidParameters(format!(
            "t_end must be positive, got {t_end}"
        )));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::Diverged { t: 0.0 });
    }

    let steps = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(y0.to_vec());

    let mut scratch = Rk4Scratch::new(y0.len());
    let mut y = y0.to_vec();
    let mut next = vec![0.0; y0.len()];
    for step in 0..steps {
        let t = step as f64 * dt;
        let h = if step + 1 == steps { t_end - t } else { dt };
        rk4_step(&mut rhs, t, &y, h, &mut next, &mut scratch);
        let t_next = if step + 1 == steps {
            t_end
        } else {
            (step + 1) as f64 * dt
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::Diverged { t: t_next });
        }
        std::mem::swap(&mut y, &mut next);
        times.push(t_next);
        states.push(y.clone());
    }
    Ok(Trajectory { times, states })
}
