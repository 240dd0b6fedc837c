//! Quasipotential, Hamilton-Jacobi residual, the non-Gibbsianness function `F`
//! and the WKB prefactor of the stationary density.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::Path;
use crate::error::{Error, Result};
use crate::linalg::distance;
use crate::model::ModelSpec;
use crate::ode::{integrate, OdeOptions, Termination};
use crate::saddle::{quasipotential_hessian, EquilibriumKind};

/// Time allowed for a reverse fluctuation ray to fall back onto the attractor.
pub const REACH_TIME: f64 = 1e3;
/// Distance to the attractor at which a ray counts as arrived.
pub const REACH_TOL: f64 = 1e-6;

pub fn quasipotential(model: &ModelSpec, attractor: &[f64], x: &[f64]) -> Result<f64> {
    Ok(model.potential(x)? - model.potential(attractor)?)
}

/// `<grad U, a grad U> + <b, grad U>`; zero for a valid transverse decomposition.
pub fn hj_residual(model: &ModelSpec, x: &[f64]) -> Result<f64> {
    let g = DVector::from_vec(model.grad_potential(x)?);
    let b = DVector::from_vec(model.drift(x)?);
    let a = model.diffusion(x);
    Ok(g.dot(&(&a * &g)) + b.dot(&g))
}

/// `F = div l + <A, grad U>` with `A_i = sum_j d_j a_ij`.
pub fn f_function(model: &ModelSpec, x: &[f64]) -> Result<f64> {
    let div_l = model.transverse_jacobian(x)?.trace();
    let g = model.grad_potential(x)?;
    let a_div = model.diffusion_divergence(x);
    Ok(div_l + g.iter().zip(&a_div).map(|(u, v)| u * v).sum::<f64>())
}

/// Trapezoidal `int F dt` along the samples of `path`. Tails beyond the
/// sampled range are taken as zero.
pub fn f_integral_along(model: &ModelSpec, path: &Path) -> Result<f64> {
    let f: Vec<f64> = path.points.iter().map(|x| f_function(model, x)).collect::<Result<_>>()?;
    Ok(path
        .times
        .windows(2)
        .zip(f.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum())
}

#[derive(Debug, Clone, Serialize)]
pub struct PrefactorData {
    pub c_at_attractor: f64,
    pub f_integral: f64,
    pub c_value: f64,
    pub attractor_hessian: Vec<Vec<f64>>,
}

/// `sqrt(det H / (2 pi)^d)`.
pub fn laplace_prefactor(hessian: &DMatrix<f64>) -> f64 {
    let d = hessian.nrows() as i32;
    (hessian.determinant() / (2.0 * std::f64::consts::PI).powi(d)).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct RayOptions {
    pub tol: f64,
    pub reach_tol: f64,
    pub max_step: f64,
}

impl Default for RayOptions {
    fn default() -> Self {
        Self { tol: 1e-10, reach_tol: REACH_TOL, max_step: 0.05 }
    }
}

/// `int F` over the fluctuation path ending at `x`, found by running the
/// fluctuation field backwards from `x` until it reaches the attractor. The
/// integral is carried as an extra ODE component so it inherits the
/// integrator's error control.
pub fn ray_f_integral(model: &ModelSpec, attractor: &[f64], x: &[f64], opts: &RayOptions) -> Result<f64> {
    let d = model.dim;
    if distance(x, attractor) <= opts.reach_tol {
        return Ok(0.0);
    }
    let mut domain = model.domain.clone();
    domain.push((f64::NEG_INFINITY, f64::INFINITY));
    let mut y0 = x.to_vec();
    y0.push(0.0);
    let ode = OdeOptions {
        t_end: REACH_TIME,
        tol: opts.tol,
        max_step: opts.max_step,
        domain: Some(&domain),
        ..Default::default()
    };
    let mut stalled = false;
    let sol = integrate(
        |y, o| {
            model.fluctuation_into(&y[..d], &mut o[..d])?;
            o[..d].iter_mut().for_each(|v| *v = -*v);
            o[d] = f_function(model, &y[..d])?;
            Ok(())
        },
        &y0,
        &ode,
        |_, y| {
            let mut f = vec![0.0; d];
            if model.fluctuation_into(&y[..d], &mut f).is_ok()
                && f.iter().map(|v| v * v).sum::<f64>().sqrt() < crate::dynamics::EQUILIBRIUM_SPEED
            {
                stalled = true;
                return true;
            }
            distance(&y[..d], attractor) <= opts.reach_tol
        },
    )
    .map_err(|e| match e {
        Error::BlowUp { .. } => Error::UnreachablePoint(x.to_vec()),
        other => other,
    })?;
    let end = sol.last();
    if sol.termination != Termination::Event || (stalled && distance(&end[..d], attractor) > opts.reach_tol) {
        return Err(Error::UnreachablePoint(x.to_vec()));
    }
    Ok(end[d])
}

pub fn stationary_prefactor(model: &ModelSpec, attractor: &[f64], x: &[f64]) -> Result<PrefactorData> {
    stationary_prefactor_with(model, attractor, x, &RayOptions::default())
}

pub fn stationary_prefactor_with(
    model: &ModelSpec,
    attractor: &[f64],
    x: &[f64],
    opts: &RayOptions,
) -> Result<PrefactorData> {
    model.transverse()?;
    let h = quasipotential_hessian(model, attractor, EquilibriumKind::Attractor)?;
    let c_bar = laplace_prefactor(&h);
    let f_integral = ray_f_integral(model, attractor, x, opts)?;
    Ok(PrefactorData {
        c_at_attractor: c_bar,
        f_integral,
        c_value: c_bar * (-f_integral).exp(),
        attractor_hessian: h.row_iter().map(|r| r.iter().copied().collect()).collect(),
    })
}

/// `C_st(x) eps^{-d/2} exp(-V(x)/eps)`.
pub fn ensemble_density(model: &ModelSpec, attractor: &[f64], x: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let c = stationary_prefactor(model, attractor, x)?.c_value;
    let v = quasipotential(model, attractor, x)?;
    Ok(c * epsilon.powf(-(model.dim as f64) / 2.0) * (-v / epsilon).exp())
}

/// Right side of the stationary Fokker-Planck equation at `x` for the
/// unnormalised Gibbs density `exp(-U/eps)`. Returns `(residual, scale)`
/// where `scale` is the sum of the magnitudes of the individual terms.
pub fn gibbs_fpe_residual(model: &ModelSpec, x: &[f64], epsilon: f64) -> Result<(f64, f64)> {
    let d = model.dim;
    let u = model.potential(x)?;
    let p = (-u / epsilon).exp();
    let g = DVector::from_vec(model.grad_potential(x)?);
    let b = DVector::from_vec(model.drift(x)?);
    let a = model.diffusion(x);
    let hess = model.hessian_potential(x)?;
    let div_b = model.jacobian(crate::model::Field::Drift, x)?.trace();
    let a_div = DVector::from_vec(model.diffusion_divergence(x));

    // sum_ij d_i d_j a_ij by nested central differences
    let mut dd_a = 0.0;
    if !model.constant_noise() {
        let h = crate::model::SECOND_DIFF_STEP;
        let mut q = x.to_vec();
        for i in 0..d {
            for j in 0..d {
                let mut corner = |si: f64, sj: f64| {
                    q.copy_from_slice(x);
                    q[i] += si * h;
                    q[j] += sj * h;
                    model.diffusion(&q)[(i, j)]
                };
                dd_a += (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                    / (4.0 * h * h);
            }
        }
    }
    let terms = [
        -p * div_b,
        p * b.dot(&g) / epsilon,
        p * g.dot(&(&a * &g)) / epsilon,
        -p * (&a * &hess).trace(),
        epsilon * p * dd_a,
        -2.0 * p * a_div.dot(&g),
    ];
    Ok((terms.iter().sum(), terms.iter().map(|t| t.abs()).sum()))
}

/// Residual of the transport equation
/// `<grad C, b + 2 a grad U> + C (div b + a:Hess U + 2 <A, grad U>)`, with
/// `grad C` from central differences of independently computed ray integrals.
pub fn transport_residual(model: &ModelSpec, attractor: &[f64], x: &[f64], h: f64) -> Result<f64> {
    let d = model.dim;
    let opts = RayOptions { tol: 1e-12, reach_tol: 1e-10, max_step: 0.05 };
    let c = |p: &[f64]| stationary_prefactor_with(model, attractor, p, &opts).map(|r| r.c_value);
    let c0 = c(x)?;
    let mut grad_c = DVector::zeros(d);
    let mut q = x.to_vec();
    for j in 0..d {
        q[j] = x[j] + h;
        let cp = c(&q)?;
        q[j] = x[j] - h;
        let cm = c(&q)?;
        q[j] = x[j];
        grad_c[j] = (cp - cm) / (2.0 * h);
    }
    let g = DVector::from_vec(model.grad_potential(x)?);
    let b = DVector::from_vec(model.drift(x)?);
    let a = model.diffusion(x);
    let hess = model.hessian_potential(x)?;
    let div_b = model.jacobian(crate::model::Field::Drift, x)?.trace();
    let a_div = DVector::from_vec(model.diffusion_divergence(x));
    let transport = &b + (&a * &g) * 2.0;
    Ok(grad_c.dot(&transport) + c0 * (div_b + (&a * &hess).trace() + 2.0 * a_div.dot(&g)))
}
