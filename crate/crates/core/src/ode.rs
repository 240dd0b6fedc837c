//! Dormand-Prince 5(4) for autonomous systems, with cubic Hermite dense output.

use crate::error::{Error, Result};

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// difference between the 5th and embedded 4th order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Horizon,
    /// `|f(x)|` fell below the stall threshold.
    Equilibrium,
    /// The user predicate fired.
    Event,
}

#[derive(Debug, Clone)]
pub struct OdeOptions<'a> {
    pub t_end: f64,
    /// Absolute and relative tolerance.
    pub tol: f64,
    pub max_step: f64,
    pub stall_speed: Option<f64>,
    pub domain: Option<&'a [(f64, f64)]>,
    pub max_steps: usize,
}

impl Default for OdeOptions<'_> {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            tol: 1e-8,
            max_step: f64::INFINITY,
            stall_speed: None,
            domain: None,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Vector field at each accepted state, for Hermite interpolation.
    pub slopes: Vec<Vec<f64>>,
    pub termination: Termination,
}

impl OdeSolution {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("solution is never empty")
    }

    /// Cubic Hermite interpolant at `t`, clamped to the solved interval.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let (y0, y1, f0, f1) = (&self.states[k], &self.states[k + 1], &self.slopes[k], &self.slopes[k + 1]);
        (0..y0.len())
            .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn outside(x: &[f64], domain: Option<&[(f64, f64)]>) -> bool {
    match domain {
        Some(d) => x.iter().zip(d).any(|(v, (lo, hi))| !(*v >= *lo && *v <= *hi)),
        None => x.iter().any(|v| !v.is_finite()),
    }
}

/// Integrates `x' = f(x)` from `x0` over `[0, t_end]`.
///
/// `event` is checked after every accepted step; returning true stops the
/// integration with [`Termination::Event`].
pub fn integrate<F, S>(mut f: F, x0: &[f64], opts: &OdeOptions<'_>, mut event: S) -> Result<OdeSolution>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    S: FnMut(f64, &[f64]) -> bool,
{
    if !(opts.t_end > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("integrate: t_end and tol must be positive".into()));
    }
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut fx = vec![0.0; d];
    f(&x, &mut fx)?;
    let mut sol = OdeSolution {
        times: vec![0.0],
        states: vec![x.clone()],
        slopes: vec![fx.clone()],
        termination: Termination::Horizon,
    };
    if outside(&x, opts.domain) {
        return Err(Error::BlowUp { t: 0.0 });
    }
    if opts.stall_speed.is_some_and(|s| norm(&fx) < s) {
        sol.termination = Termination::Equilibrium;
        return Ok(sol);
    }

    let mut t = 0.0;
    let mut h = {
        let sp = norm(&fx);
        let guess = if sp > 0.0 { 0.01 * (1.0 + norm(&x)) / sp } else { 1e-2 };
        guess.min(opts.max_step).min(opts.t_end).max(1e-12)
    };
    let mut k = vec![vec![0.0; d]; 7];
    let mut tmp = vec![0.0; d];
    let mut x_new = vec![0.0; d];
    let mut steps = 0usize;

    while t < opts.t_end {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::NoConvergence(format!("ode: step budget exhausted at t = {t}")));
        }
        if t + h > opts.t_end {
            h = opts.t_end - t;
        }
        k[0].copy_from_slice(&fx);
        for s in 1..7 {
            for i in 0..d {
                let mut acc = x[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h * A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            f(&tmp, &mut k[s])?;
        }
        // stage 7 is evaluated at the 5th-order solution (FSAL)
        x_new.copy_from_slice(&tmp);
        let mut err = 0.0;
        for i in 0..d {
            let mut e = 0.0;
            for s in 0..7 {
                e += E[s] * k[s][i];
            }
            e *= h;
            let sc = opts.tol + opts.tol * x[i].abs().max(x_new[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / d as f64).sqrt();
        if !err.is_finite() {
            h *= 0.2;
            if h < 1e-14 {
                return Err(Error::NonFiniteValue("ode step".into()));
            }
            continue;
        }
        if err <= 1.0 {
            t += h;
            x.copy_from_slice(&x_new);
            fx.copy_from_slice(&k[6]);
            sol.times.push(t);
            sol.states.push(x.clone());
            sol.slopes.push(fx.clone());
            if outside(&x, opts.domain) {
                return Err(Error::BlowUp { t });
            }
            if opts.stall_speed.is_some_and(|s| norm(&fx) < s) {
                sol.termination = Termination::Equilibrium;
                return Ok(sol);
            }
            if event(t, &x) {
                sol.termination = Termination::Event;
                return Ok(sol);
            }
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = (h * factor).min(opts.max_step);
        if h < 1e-14 * (1.0 + t.abs()) {
            return Err(Error::NoConvergence(format!("ode: step size underflow at t = {t}")));
        }
    }
    Ok(sol)
}
