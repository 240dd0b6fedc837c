//! Deterministic flows, instantons and the Freidlin-Wentzell action.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::distance;
use crate::model::{Field, ModelSpec};
use crate::ode::{integrate, OdeOptions, Termination};
use crate::saddle::SaddleData;

/// Speed below which a flow is considered to have reached an equilibrium.
pub const EQUILIBRIUM_SPEED: f64 = 1e-10;
pub const DEFAULT_DELTA: f64 = 1e-4;
pub const DEFAULT_TRUNCATION: f64 = 1e-7;
/// Time cap for the reverse integration that builds an instanton.
const INSTANTON_TIME_CAP: f64 = 1e3;
/// Step cap for flows and instantons so that stored paths are finely sampled.
const PATH_MAX_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Relaxation,
    Fluctuation,
    Instanton,
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub kind: PathKind,
}

impl Path {
    pub fn new(times: Vec<f64>, points: Vec<Vec<f64>>, kind: PathKind) -> Result<Self> {
        if times.len() != points.len() || times.len() < 2 {
            return Err(Error::InvalidInput("path needs at least two samples with matching times".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("path times must be strictly increasing".into()));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteValue("path point".into()));
        }
        Ok(Self { times, points, kind })
    }

    /// Builds a path from an ODE solution, padding a stationary start with a
    /// second sample so the two-sample minimum holds.
    fn from_flow(times: Vec<f64>, mut points: Vec<Vec<f64>>, kind: PathKind) -> Self {
        let mut times = times;
        if times.len() == 1 {
            times.push(times[0] + 1.0);
            points.push(points[0].clone());
        }
        Self { times, points, kind }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn first(&self) -> &[f64] {
        &self.points[0]
    }

    pub fn last(&self) -> &[f64] {
        &self.points[self.points.len() - 1]
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    /// Same geometric path run backwards, with times `t_end - t`.
    pub fn reversed(&self) -> Path {
        let t_end = self.times[self.times.len() - 1];
        Path {
            times: self.times.iter().rev().map(|t| t_end - t).collect(),
            points: self.points.iter().rev().cloned().collect(),
            kind: self.kind,
        }
    }

    /// Cubic interpolation through the nearest nodes, clamped to the ends.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.points[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.points[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        if n < 4 {
            let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
            return self.points[k].iter().zip(&self.points[k + 1]).map(|(a, b)| a + w * (b - a)).collect();
        }
        // cubic Lagrange through the four nearest nodes
        let lo = k.saturating_sub(1).min(n - 4);
        let ts = &self.times[lo..lo + 4];
        let mut out = vec![0.0; self.dim()];
        for i in 0..4 {
            let mut w = 1.0;
            for j in 0..4 {
                if j != i {
                    w *= (t - ts[j]) / (ts[i] - ts[j]);
                }
            }
            for (o, v) in out.iter_mut().zip(&self.points[lo + i]) {
                *o += w * v;
            }
        }
        out
    }

    /// Writes `t,x1,...,xd` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim()).map(|i| format!("x{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, p) in self.times.iter().zip(&self.points) {
            write!(w, "{t:.16e}")?;
            for v in p {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Symmetric Hausdorff distance between the vertex sets of two paths.
pub fn hausdorff(a: &Path, b: &Path) -> f64 {
    let one_way = |p: &Path, q: &Path| {
        p.points
            .iter()
            .map(|x| q.points.iter().map(|y| distance(x, y)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

fn flow(model: &ModelSpec, x0: &[f64], t_end: f64, tol: f64, fluctuation: bool) -> Result<Path> {
    if x0.len() != model.dim {
        return Err(Error::InvalidInput(format!("point has dimension {}, model has {}", x0.len(), model.dim)));
    }
    let opts = OdeOptions {
        t_end,
        tol,
        max_step: PATH_MAX_STEP,
        stall_speed: Some(EQUILIBRIUM_SPEED),
        domain: Some(&model.domain),
        ..Default::default()
    };
    let sol = if fluctuation {
        model.transverse()?;
        integrate(|x, o| model.fluctuation_into(x, o), x0, &opts, |_, _| false)?
    } else {
        integrate(
            |x, o| {
                model.drift_into(x, o);
                Ok(())
            },
            x0,
            &opts,
            |_, _| false,
        )?
    };
    let kind = if fluctuation { PathKind::Fluctuation } else { PathKind::Relaxation };
    Ok(Path::from_flow(sol.times, sol.states, kind))
}

/// Solves `x' = b(x)` on `[0, t_end]`, stopping early at an equilibrium.
pub fn integrate_relaxation(model: &ModelSpec, x0: &[f64], t_end: f64, tol: f64) -> Result<Path> {
    flow(model, x0, t_end, tol, false)
}

/// Solves `x' = a grad U + l` forward for `t_end`. Read right to left this is
/// the fluctuation path terminated at the final point.
pub fn integrate_fluctuation(model: &ModelSpec, x0: &[f64], t_end: f64, tol: f64) -> Result<Path> {
    flow(model, x0, t_end, tol, true)
}

fn cholesky(a: DMatrix<f64>, at: &[f64]) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = a.abs().max();
    let ch = a.cholesky().ok_or_else(|| Error::SingularDiffusion(at.to_vec()))?;
    let l = ch.l_dirty();
    let dmin = (0..l.nrows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    if dmin * dmin <= 1e-14 * scale {
        return Err(Error::SingularDiffusion(at.to_vec()));
    }
    Ok(ch)
}

/// `(1/4) int <x' - b, a^{-1} (x' - b)> dt`, midpoint rule on each segment.
pub fn action(model: &ModelSpec, path: &Path) -> Result<f64> {
    let d = model.dim;
    let mut total = 0.0;
    let mut mid = vec![0.0; d];
    let mut b = vec![0.0; d];
    for k in 0..path.len() - 1 {
        let dt = path.times[k + 1] - path.times[k];
        let (p, q) = (&path.points[k], &path.points[k + 1]);
        for i in 0..d {
            mid[i] = 0.5 * (p[i] + q[i]);
        }
        model.drift_into(&mid, &mut b);
        let r = DVector::from_iterator(d, (0..d).map(|i| (q[i] - p[i]) / dt - b[i]));
        let ch = cholesky(model.diffusion(&mid), &mid)?;
        let w = ch.solve(&r);
        total += 0.25 * dt * r.dot(&w);
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteValue("action".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct InstantonResult {
    pub path: Path,
    pub action: f64,
    /// Distances to the attractor and to the saddle at truncation.
    pub endpoint_gaps: (f64, f64),
    pub incoming_direction: Vec<f64>,
}

/// Builds the instanton attractor -> saddle by integrating the reversed
/// fluctuation field from `x* - delta v'+` until within `tol` of `attractor`.
pub fn compute_instanton(
    model: &ModelSpec,
    saddle: &SaddleData,
    attractor: &[f64],
    delta: f64,
    tol: f64,
) -> Result<InstantonResult> {
    model.transverse()?;
    if !(delta > 0.0 && delta <= 1e-2) {
        return Err(Error::InvalidInput(format!("delta must lie in (0, 1e-2], got {delta}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tol must be positive".into()));
    }
    let d = model.dim;
    let xs = &saddle.x_star;
    let vp = &saddle.v_prime_plus;
    let x0: Vec<f64> = (0..d).map(|i| xs[i] - delta * vp[i]).collect();
    let opts = OdeOptions {
        t_end: INSTANTON_TIME_CAP,
        tol: 1e-10,
        max_step: PATH_MAX_STEP,
        stall_speed: Some(EQUILIBRIUM_SPEED),
        domain: Some(&model.domain),
        ..Default::default()
    };
    let sol = integrate(
        |x, o| {
            model.fluctuation_into(x, o)?;
            o.iter_mut().for_each(|v| *v = -*v);
            Ok(())
        },
        &x0,
        &opts,
        |_, x| distance(x, attractor) <= tol,
    )?;
    let end = sol.last().to_vec();
    match sol.termination {
        Termination::Event => {}
        Termination::Equilibrium => {
            if distance(&end, attractor) > tol {
                return Err(Error::WrongBasin { found: end });
            }
        }
        Termination::Horizon => {
            return Err(Error::NoConvergence(format!(
                "instanton still {:.3e} from the attractor after t = {INSTANTON_TIME_CAP}",
                distance(&end, attractor)
            )))
        }
    }

    let s_end = *sol.times.last().expect("nonempty");
    let n = sol.times.len();
    let pad_first = (sol.times[n - 1] - sol.times[n - 2]).max(1e-3);
    let pad_last = (sol.times[1] - sol.times[0]).max(1e-3);
    let mut times = Vec::with_capacity(n + 2);
    let mut points = Vec::with_capacity(n + 2);
    times.push(0.0);
    points.push(attractor.to_vec());
    for k in (0..n).rev() {
        times.push(pad_first + (s_end - sol.times[k]));
        points.push(sol.states[k].clone());
    }
    times.push(pad_first + s_end + pad_last);
    points.push(xs.clone());
    let path = Path::new(times, points, PathKind::Instanton)?;
    let action = action(model, &path)?;
    Ok(InstantonResult {
        action,
        endpoint_gaps: (distance(&end, attractor), distance(&x0, xs)),
        incoming_direction: vp.clone(),
        path,
    })
}

#[derive(Debug, Clone)]
pub enum PathInit {
    Linear,
    Path(Path),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MinimizerStatus {
    Converged,
    MaxIterations,
    /// Line search stalled; the best path so far is returned.
    NoDecrease,
}

#[derive(Debug, Clone)]
pub struct ActionMinimum {
    pub path: Path,
    pub action: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub status: MinimizerStatus,
}

pub const MINIMIZER_GRADIENT_TOL: f64 = 1e-6;
pub const MINIMIZER_MAX_ITER: usize = 10_000;

/// Discretised action on a uniform grid and its gradient with respect to the
/// interior points, stacked as one vector.
struct ActionObjective<'a> {
    model: &'a ModelSpec,
    from: Vec<f64>,
    to: Vec<f64>,
    dt: f64,
    n_steps: usize,
}

impl ActionObjective<'_> {
    fn point<'b>(&'b self, z: &'b [f64], k: usize) -> &'b [f64] {
        let d = self.model.dim;
        if k == 0 {
            &self.from
        } else if k == self.n_steps {
            &self.to
        } else {
            &z[(k - 1) * d..k * d]
        }
    }

    fn value_grad(&self, z: &[f64], grad: &mut [f64]) -> Result<f64> {
        let d = self.model.dim;
        let dt = self.dt;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        let mut mid = vec![0.0; d];
        let mut b = vec![0.0; d];
        for k in 0..self.n_steps {
            let (p, q) = (self.point(z, k), self.point(z, k + 1));
            for i in 0..d {
                mid[i] = 0.5 * (p[i] + q[i]);
            }
            self.model.drift_into(&mid, &mut b);
            let r = DVector::from_iterator(d, (0..d).map(|i| (q[i] - p[i]) / dt - b[i]));
            let a = self.model.diffusion(&mid);
            let ch = cholesky(a, &mid)?;
            let w = ch.solve(&r);
            total += 0.25 * dt * r.dot(&w);
            // dL/dp = dt/2 (dr/dp)^T w, dr/dp = -I/dt - Db/2; same with +I/dt for q
            let jb = self.model.jacobian(Field::Drift, &mid)?;
            let jw = jb.transpose() * &w;
            let mut extra = vec![0.0; d];
            if !self.model.constant_noise() {
                // derivative of r^T a(m)^{-1} r in m at fixed r
                for j in 0..d {
                    let h = 1e-6_f64.max(1e-6 * mid[j].abs());
                    let mut mp = mid.clone();
                    mp[j] += h;
                    let qp = r.dot(&cholesky(self.model.diffusion(&mp), &mp)?.solve(&r));
                    mp[j] -= 2.0 * h;
                    let qm = r.dot(&cholesky(self.model.diffusion(&mp), &mp)?.solve(&r));
                    extra[j] = 0.25 * dt * 0.5 * (qp - qm) / (2.0 * h);
                }
            }
            if k >= 1 {
                let g = &mut grad[(k - 1) * d..k * d];
                for i in 0..d {
                    g[i] += 0.5 * dt * (-w[i] / dt - 0.5 * jw[i]) + extra[i];
                }
            }
            if k + 1 < self.n_steps {
                let g = &mut grad[k * d..(k + 1) * d];
                for i in 0..d {
                    g[i] += 0.5 * dt * (w[i] / dt - 0.5 * jw[i]) + extra[i];
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteValue("action".into()));
        }
        Ok(total)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Minimises the discretised action over the interior points of a
/// fixed-endpoint path on a uniform grid of `n_steps` segments over `[0, T]`,
/// by L-BFGS with a backtracking Armijo search.
pub fn minimize_action(
    model: &ModelSpec,
    x_from: &[f64],
    x_to: &[f64],
    t_total: f64,
    n_steps: usize,
    init: &PathInit,
) -> Result<ActionMinimum> {
    let d = model.dim;
    if n_steps < 16 {
        return Err(Error::InvalidInput(format!("n_steps must be at least 16, got {n_steps}")));
    }
    if !(t_total > 0.0) {
        return Err(Error::InvalidInput("T must be positive".into()));
    }
    if x_from.len() != d || x_to.len() != d {
        return Err(Error::InvalidInput("endpoint dimension mismatch".into()));
    }
    let dt = t_total / n_steps as f64;
    let obj = ActionObjective { model, from: x_from.to_vec(), to: x_to.to_vec(), dt, n_steps };
    let mut z: Vec<f64> = Vec::with_capacity((n_steps - 1) * d);
    for k in 1..n_steps {
        let s = k as f64 / n_steps as f64;
        match init {
            PathInit::Linear => z.extend((0..d).map(|i| x_from[i] + s * (x_to[i] - x_from[i]))),
            PathInit::Path(p) => {
                let t = p.times[0] + s * p.duration();
                z.extend(p.at(t));
            }
        }
    }
    let nz = z.len();
    let mut g = vec![0.0; nz];
    let mut f = obj.value_grad(&z, &mut g)?;

    const MEMORY: usize = 10;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut status = MinimizerStatus::MaxIterations;
    let mut iterations = 0;
    let mut z_new = vec![0.0; nz];
    let mut g_new = vec![0.0; nz];

    while iterations < MINIMIZER_MAX_ITER {
        if max_norm(&g) <= MINIMIZER_GRADIENT_TOL {
            status = MinimizerStatus::Converged;
            break;
        }
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            q.iter_mut().zip(&y_hist[i]).for_each(|(qv, yv)| *qv -= alpha[i] * yv);
        }
        if m > 0 {
            let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            // first step: scale so the largest move is modest
            let gn = max_norm(&g);
            q.iter_mut().for_each(|v| *v *= 1e-2 / gn.max(1e-300));
        }
        for i in 0..m {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            q.iter_mut().zip(&s_hist[i]).for_each(|(qv, sv)| *qv += (alpha[i] - beta) * sv);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            let gn = max_norm(&g);
            dir = g.iter().map(|v| -v * 1e-2 / gn).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..nz {
                z_new[i] = z[i] + step * dir[i];
            }
            match obj.value_grad(&z_new, &mut g_new) {
                Ok(f_new) if f_new <= f + 1e-4 * step * slope => {
                    let s: Vec<f64> = (0..nz).map(|i| z_new[i] - z[i]).collect();
                    let y: Vec<f64> = (0..nz).map(|i| g_new[i] - g[i]).collect();
                    if dot(&s, &y) > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                        if s_hist.len() == MEMORY {
                            s_hist.remove(0);
                            y_hist.remove(0);
                        }
                        s_hist.push(s);
                        y_hist.push(y);
                    }
                    std::mem::swap(&mut z, &mut z_new);
                    std::mem::swap(&mut g, &mut g_new);
                    f = f_new;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            if s_hist.is_empty() {
                status = MinimizerStatus::NoDecrease;
                log::warn!("minimize_action: line search stalled at |grad| = {:.3e}", max_norm(&g));
                break;
            }
            // drop curvature memory and retry once from steepest descent
            s_hist.clear();
            y_hist.clear();
        }
    }
    if status == MinimizerStatus::MaxIterations && max_norm(&g) <= MINIMIZER_GRADIENT_TOL {
        status = MinimizerStatus::Converged;
    }
    let mut points = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        points.push(obj.point(&z, k).to_vec());
    }
    let times = (0..=n_steps).map(|k| k as f64 * dt).collect();
    let path = Path::new(times, points, PathKind::Generic)?;
    Ok(ActionMinimum { path, action: f, iterations, gradient_norm: max_norm(&g), status })
}
