//! Saddle geometry, quasipotential Hessians, exit through a boundary layer,
//! the committor and the irreversible Eyring-Kramers transition time.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::dynamics::{compute_instanton, InstantonResult, DEFAULT_DELTA, DEFAULT_TRUNCATION};
use crate::error::{Error, Result};
use crate::landscape::{ensemble_density, f_integral_along, laplace_prefactor, quasipotential};
use crate::linalg::{
    count_negative, eigenvalues, lyapunov_residual, orthonormal_complement, real_eigenvector, solve_lyapunov,
    solve_lyapunov_near,
};
use crate::model::{Field, ModelSpec};

/// Real parts below this magnitude count as zero when classifying equilibria.
const SPECTRAL_GAP: f64 = 1e-10;
/// Identity residuals above this mean the smooth picture has broken down.
pub const SMOOTHNESS_TOL: f64 = 1e-6;
/// Agreement required between Lyapunov and finite-difference Hessians.
pub const HESSIAN_CROSSCHECK_TOL: f64 = 1e-5;
/// Largest tolerated gap between instanton action and barrier height.
pub const ACTION_GAP_TOL: f64 = 1e-3;

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EquilibriumKind {
    Attractor,
    Saddle,
}

/// Hessian of the quasipotential at a hyperbolic equilibrium from
/// `M X + X M^T = -2 a`, `H = X^{-1}`, with a signature check.
pub fn quasipotential_hessian(model: &ModelSpec, x_eq: &[f64], kind: EquilibriumKind) -> Result<DMatrix<f64>> {
    let m = model.jacobian(Field::Drift, x_eq)?;
    let a = model.diffusion(x_eq);
    match hessian_from_lyapunov(&m, &a, kind) {
        // pairs with lambda_i + lambda_j = 0 leave a family of solutions;
        // the potential singles out the right member
        Err(Error::ResonantSpectrum(_)) if model.has_transverse() => {
            let x0 = model
                .hessian_potential(x_eq)?
                .try_inverse()
                .ok_or_else(|| Error::DegenerateHessian("Hessian of U is singular".into()))?;
            let x = solve_lyapunov_near(&m, &(&a * -2.0), &x0)?;
            invert_with_signature(x, kind)
        }
        other => other,
    }
}

pub fn hessian_from_lyapunov(m: &DMatrix<f64>, a: &DMatrix<f64>, kind: EquilibriumKind) -> Result<DMatrix<f64>> {
    invert_with_signature(solve_lyapunov(m, &(a * -2.0))?, kind)
}

fn invert_with_signature(x: DMatrix<f64>, kind: EquilibriumKind) -> Result<DMatrix<f64>> {
    let h = x
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateHessian("Lyapunov solution is singular".into()))?;
    let h = (&h + h.transpose()) * 0.5;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateHessian("non-finite inverse".into()));
    }
    let neg = count_negative(&h);
    match kind {
        EquilibriumKind::Attractor if neg != 0 => Err(Error::WrongSignature { expected: "positive definite", negative: neg }),
        EquilibriumKind::Saddle if neg != 1 => {
            Err(Error::WrongSignature { expected: "exactly one negative eigenvalue", negative: neg })
        }
        _ => Ok(h),
    }
}

fn unstable_count(m: &DMatrix<f64>) -> usize {
    eigenvalues(m).iter().filter(|z| z.re > SPECTRAL_GAP).count()
}

/// Newton iteration on `b(x) = 0`, then a check that the zero has exactly one
/// unstable direction.
pub fn find_saddle(model: &ModelSpec, guess: &[f64]) -> Result<Vec<f64>> {
    if guess.len() != model.dim {
        return Err(Error::InvalidInput("guess has the wrong dimension".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x = guess.to_vec();
    let mut b = model.drift(&x)?;
    let mut converged = norm(&b) <= 1e-12;
    for _ in 0..100 {
        if converged {
            break;
        }
        let j = model.jacobian(Field::Drift, &x)?;
        let step = j
            .lu()
            .solve(&-dv(&b))
            .ok_or_else(|| Error::NoConvergence(format!("singular Jacobian at {x:?}")))?;
        // halve the step until |b| decreases
        let mut t = 1.0;
        let base = norm(&b);
        loop {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, si)| xi + t * si).collect();
            let bt = model.drift(&trial)?;
            if norm(&bt) < base || t < 1e-6 {
                x = trial;
                b = bt;
                break;
            }
            t *= 0.5;
        }
        converged = norm(&b) <= 1e-12;
    }
    if !converged {
        return Err(Error::NoConvergence(format!("Newton stalled at {x:?} with |b| = {:.3e}", norm(&b))));
    }
    let unstable = unstable_count(&model.jacobian(Field::Drift, &x)?);
    if unstable != 1 {
        return Err(Error::NotASaddle { point: x, unstable });
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct SaddleData {
    pub x_star: Vec<f64>,
    pub m_star: DMatrix<f64>,
    pub lambda_plus: f64,
    pub v_plus: Vec<f64>,
    pub n_star: Vec<f64>,
    pub cos_theta: f64,
    pub h_star: DMatrix<f64>,
    pub d_star: DMatrix<f64>,
    pub n_matrix: DMatrix<f64>,
    pub a_star: DMatrix<f64>,
    pub v_prime_plus: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaddleResiduals {
    /// `|M^T n - lambda n|`
    pub left_eigenvector: f64,
    /// `|H D + D^T H|`
    pub hd_antisymmetry: f64,
    /// `|N H^{-1} n + lambda H^{-1} n| / |H^{-1} n|`
    pub n_hinv_n: f64,
    /// `|N v' + lambda v'|`
    pub incoming_eigenvector: f64,
    /// `|M X + X M^T + 2 a|` with `X = H^{-1}`
    pub lyapunov: f64,
    /// `|det H + lambda det h / <a n, n>|` relative to `|det H|`
    pub det_identity: f64,
}

impl SaddleResiduals {
    pub fn max(&self) -> f64 {
        [
            self.left_eigenvector,
            self.hd_antisymmetry,
            self.n_hinv_n,
            self.incoming_eigenvector,
            self.lyapunov,
            self.det_identity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

impl SaddleData {
    pub fn dim(&self) -> usize {
        self.x_star.len()
    }

    /// `<a n, n>`
    pub fn a_nn(&self) -> f64 {
        let n = dv(&self.n_star);
        n.dot(&(&self.a_star * &n))
    }

    /// `zeta_+(y) = <y - x*, n> / cos theta`.
    pub fn zeta_plus(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.x_star).zip(&self.n_star).map(|((a, b), n)| (a - b) * n).sum::<f64>() / self.cos_theta
    }

    /// Determinant of `H*` restricted to the hyperplane orthogonal to `n*`.
    pub fn det_h(&self) -> f64 {
        let e = orthonormal_complement(&dv(&self.n_star));
        if e.ncols() == 0 {
            return 1.0;
        }
        (e.transpose() * &self.h_star * e).determinant()
    }

    pub fn residuals(&self) -> Result<SaddleResiduals> {
        let n = dv(&self.n_star);
        let l = self.lambda_plus;
        let hinv = self
            .h_star
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateHessian("H* is singular".into()))?;
        let hn = &hinv * &n;
        let vp = dv(&self.v_prime_plus);
        let det_hs = self.h_star.determinant();
        let predicted = -l * self.det_h() / self.a_nn();
        Ok(SaddleResiduals {
            left_eigenvector: (self.m_star.transpose() * &n - &n * l).norm(),
            hd_antisymmetry: (&self.h_star * &self.d_star + self.d_star.transpose() * &self.h_star).norm(),
            n_hinv_n: (&self.n_matrix * &hn + &hn * l).norm() / hn.norm(),
            incoming_eigenvector: (&self.n_matrix * &vp + &vp * l).norm(),
            lyapunov: lyapunov_residual(&self.m_star, &hinv, &(&self.a_star * -2.0)),
            det_identity: (det_hs - predicted).abs() / det_hs.abs().max(1e-300),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "x_star": self.x_star,
            "m_star": rows(&self.m_star),
            "lambda_plus": self.lambda_plus,
            "v_plus": self.v_plus,
            "n_star": self.n_star,
            "cos_theta": self.cos_theta,
            "h_star": rows(&self.h_star),
            "d_star": rows(&self.d_star),
            "n_matrix": rows(&self.n_matrix),
            "a_star": rows(&self.a_star),
            "v_prime_plus": self.v_prime_plus,
        })
    }
}

fn largest_component_positive(v: DVector<f64>) -> DVector<f64> {
    let k = v.iamax();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

/// Spectral data at the saddle `x*`. Without attractors to orient against,
/// `v+` has its largest component positive.
pub fn saddle_geometry(model: &ModelSpec, x_star: &[f64]) -> Result<SaddleData> {
    geometry(model, x_star, None)
}

/// As [`saddle_geometry`], with `v+` oriented toward `x2` and the incoming
/// direction `v'+` chosen so that `<v'+, x1 - x*> < 0`.
pub fn saddle_geometry_between(model: &ModelSpec, x_star: &[f64], x1: &[f64], x2: &[f64]) -> Result<SaddleData> {
    geometry(model, x_star, Some((x1, x2)))
}

fn geometry(model: &ModelSpec, x_star: &[f64], ends: Option<(&[f64], &[f64])>) -> Result<SaddleData> {
    let d = model.dim;
    let m = model.jacobian(Field::Drift, x_star)?;
    let spectrum = eigenvalues(&m);
    let unstable: Vec<_> = spectrum.iter().filter(|z| z.re > SPECTRAL_GAP).collect();
    if unstable.len() == 2 && unstable[0].im.abs() > SPECTRAL_GAP {
        return Err(Error::ComplexUnstableEigenvalue);
    }
    if unstable.len() != 1 {
        return Err(Error::NotASaddle { point: x_star.to_vec(), unstable: unstable.len() });
    }
    if unstable[0].im.abs() > SPECTRAL_GAP {
        return Err(Error::ComplexUnstableEigenvalue);
    }
    let lambda = unstable[0].re;

    let mut v_plus = largest_component_positive(real_eigenvector(&m, lambda));
    if let Some((_, x2)) = ends {
        let toward: f64 = (0..d).map(|i| v_plus[i] * (x2[i] - x_star[i])).sum();
        if toward < 0.0 {
            v_plus = -v_plus;
        }
    }
    let mut n_star = real_eigenvector(&m.transpose(), lambda);
    if n_star.dot(&v_plus) < 0.0 {
        n_star = -n_star;
    }
    let cos_theta = n_star.dot(&v_plus);

    let a = model.diffusion(x_star);
    let h = quasipotential_hessian(model, x_star, EquilibriumKind::Saddle)?;
    let d_star = &m + &a * &h;
    let n_matrix = &a * &h + &d_star;

    let mut vp = real_eigenvector(&n_matrix, -lambda);
    match ends {
        Some((x1, _)) => {
            let side: f64 = (0..d).map(|i| vp[i] * (x1[i] - x_star[i])).sum();
            if side > 0.0 {
                vp = -vp;
            }
        }
        None => {
            if vp.dot(&n_star) < 0.0 {
                vp = -vp;
            }
        }
    }
    Ok(SaddleData {
        x_star: x_star.to_vec(),
        m_star: m,
        lambda_plus: lambda,
        v_plus: v_plus.iter().copied().collect(),
        n_star: n_star.iter().copied().collect(),
        cos_theta,
        h_star: h,
        d_star,
        n_matrix,
        a_star: a,
        v_prime_plus: vp.iter().copied().collect(),
    })
}

/// Outcome of the two boundary inequalities at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryCheck {
    /// `<-a grad U + l, n>`, must be negative.
    pub drift_normal: f64,
    /// `<grad U, n>`, must be positive.
    pub gradient_normal: f64,
}

impl BoundaryCheck {
    pub fn holds(&self) -> bool {
        self.drift_normal < 0.0 && self.gradient_normal > 0.0
    }
}

pub fn boundary_check(model: &ModelSpec, y: &[f64], n: &[f64]) -> Result<BoundaryCheck> {
    let g = dv(&model.grad_potential(y)?);
    let l = dv(&model.transverse_field(y)?);
    let a = model.diffusion(y);
    let nv = dv(n);
    Ok(BoundaryCheck { drift_normal: (-(&a * &g) + &l).dot(&nv), gradient_normal: g.dot(&nv) })
}

/// `mu(y) = <a grad U + l, n> / <n, a n>`.
pub fn boundary_mu(model: &ModelSpec, y: &[f64], n: &[f64]) -> Result<f64> {
    if !boundary_check(model, y, n)?.holds() {
        return Err(Error::CharacteristicPoint(y.to_vec()));
    }
    let a = model.diffusion(y);
    let nv = dv(n);
    let f = dv(&model.fluctuation(y)?);
    Ok(f.dot(&nv) / nv.dot(&(&a * &nv)))
}

/// `C_bl(y, r) = C_st(y) (1 - exp(-mu(y) r))`.
pub fn boundary_layer_profile(model: &ModelSpec, attractor: &[f64], y: &[f64], n: &[f64], r: f64) -> Result<f64> {
    let mu = boundary_mu(model, y, n)?;
    let c = crate::landscape::stationary_prefactor(model, attractor, y)?.c_value;
    Ok(c * -(-mu * r).exp_m1())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundarySample {
    pub y: Vec<f64>,
    pub normal: Vec<f64>,
    /// Surface element attached to this sample.
    pub weight: f64,
}

/// Maps `s` in `[0, 1)` to (point, outward unit normal, `|dy/ds|`).
pub type CurveParam = Arc<dyn Fn(f64) -> Result<(Vec<f64>, Vec<f64>, f64)> + Send + Sync>;

#[derive(Clone)]
pub enum Boundary {
    Points(Vec<BoundarySample>),
    Curve(CurveParam),
}

#[derive(Clone)]
pub struct DomainSpec {
    pub boundary: Boundary,
    pub attractor_inside: Vec<f64>,
}

impl std::fmt::Debug for DomainSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.boundary {
            Boundary::Points(p) => format!("{} points", p.len()),
            Boundary::Curve(_) => "closed curve".to_string(),
        };
        f.debug_struct("DomainSpec").field("boundary", &kind).field("attractor_inside", &self.attractor_inside).finish()
    }
}

impl DomainSpec {
    /// The interval `[lo, hi]` on the line, absorbing at both ends.
    pub fn interval(lo: f64, hi: f64, attractor: f64) -> Result<Self> {
        if !(lo < attractor && attractor < hi) {
            return Err(Error::InvalidInput("attractor must lie strictly inside the interval".into()));
        }
        Ok(Self {
            boundary: Boundary::Points(vec![
                BoundarySample { y: vec![lo], normal: vec![-1.0], weight: 1.0 },
                BoundarySample { y: vec![hi], normal: vec![1.0], weight: 1.0 },
            ]),
            attractor_inside: vec![attractor],
        })
    }

    /// The planar level set `{V = level}` around `attractor`, parametrised
    /// by the polar angle seen from the attractor. Needs every ray from the
    /// attractor to cross the level exactly once.
    pub fn level_set(model: &ModelSpec, attractor: &[f64], level: f64) -> Result<Self> {
        if model.dim != 2 {
            return Err(Error::InvalidInput("level-set domains are planar".into()));
        }
        if !(level > 0.0) {
            return Err(Error::InvalidInput("level must be positive".into()));
        }
        let m = model.clone();
        let x0 = attractor.to_vec();
        let param: CurveParam = Arc::new(move |s: f64| {
            let th = 2.0 * PI * s;
            let (er, et) = ([th.cos(), th.sin()], [-th.sin(), th.cos()]);
            let at = |r: f64| [x0[0] + r * er[0], x0[1] + r * er[1]];
            let v = |r: f64| quasipotential(&m, &x0, &at(r));
            let (mut lo, mut hi) = (0.0, 0.01);
            while v(hi)? < level {
                lo = hi;
                hi += 0.01;
                if !m.in_domain(&at(hi)) {
                    return Err(Error::InvalidInput(format!("level {level} not reached along angle {th}")));
                }
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if v(mid)? < level {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let r = 0.5 * (lo + hi);
            let y = at(r);
            let g = m.grad_potential(&y)?;
            let (gr, gt) = (g[0] * er[0] + g[1] * er[1], g[0] * et[0] + g[1] * et[1]);
            if gr <= 0.0 {
                return Err(Error::InvalidInput("level set is not star-shaped around the attractor".into()));
            }
            let dr = -r * gt / gr;
            let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
            Ok((y.to_vec(), vec![g[0] / gn, g[1] / gn], 2.0 * PI * (r * r + dr * dr).sqrt()))
        });
        Ok(Self { boundary: Boundary::Curve(param), attractor_inside: attractor.to_vec() })
    }

    /// Quadrature nodes: `n_quad` equispaced parameter values for a curve
    /// (periodic trapezoid), the fixed points otherwise.
    pub fn samples(&self, n_quad: usize) -> Result<Vec<BoundarySample>> {
        match &self.boundary {
            Boundary::Points(p) => Ok(p.clone()),
            Boundary::Curve(f) => (0..n_quad)
                .map(|k| {
                    let (y, normal, speed) = f(k as f64 / n_quad as f64)?;
                    Ok(BoundarySample { y, normal, weight: speed / n_quad as f64 })
                })
                .collect(),
        }
    }

    /// Total surface measure, e.g. the perimeter of a curve.
    pub fn measure(&self, n_quad: usize) -> Result<f64> {
        Ok(self.samples(n_quad)?.iter().map(|s| s.weight).sum())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitRate {
    pub rate: f64,
    pub used: usize,
    pub characteristic: usize,
    pub unreachable: usize,
}

/// `sum_k w_k <a grad U + l, n>(y_k) p_ens(y_k)` over the boundary nodes.
/// Nodes violating the exit conditions or unreachable from the attractor
/// contribute zero.
pub fn quasistationary_exit_rate(model: &ModelSpec, domain: &DomainSpec, epsilon: f64, n_quad: usize) -> Result<ExitRate> {
    let x1 = &domain.attractor_inside;
    let mut out = ExitRate { rate: 0.0, used: 0, characteristic: 0, unreachable: 0 };
    for s in domain.samples(n_quad)? {
        if !boundary_check(model, &s.y, &s.normal)?.holds() {
            out.characteristic += 1;
            continue;
        }
        let p = match ensemble_density(model, x1, &s.y, epsilon) {
            Ok(p) => p,
            Err(Error::UnreachablePoint(_)) => {
                out.unreachable += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let flux: f64 = model.fluctuation(&s.y)?.iter().zip(&s.normal).map(|(f, n)| f * n).sum();
        out.rate += s.weight * flux * p;
        out.used += 1;
    }
    if out.characteristic > 0 {
        log::warn!("{} boundary nodes violate the exit conditions and were skipped", out.characteristic);
    }
    if out.unreachable > 0 {
        log::warn!("{} boundary nodes are unreachable from the attractor", out.unreachable);
    }
    if out.used == 0 {
        return Err(Error::UnreachableBoundary);
    }
    Ok(out)
}

/// Probability that the linearised dynamics started at `y` leaves toward the
/// target side: `Phi(zeta_+(y) sqrt(lambda cos^2 / (eps <a n, n>)))`.
pub fn committor(saddle: &SaddleData, y: &[f64], epsilon: f64) -> f64 {
    let k = (saddle.lambda_plus * saddle.cos_theta.powi(2) / (epsilon * saddle.a_nn())).sqrt();
    normal_cdf(saddle.zeta_plus(y) * k)
}

#[derive(Debug, Clone, Serialize)]
pub struct SurfaceFactors {
    /// Minimiser of the quadratic potential on `{zeta_+ = -1}`.
    pub y_bar: Vec<f64>,
    pub det_h: f64,
    pub det_identity_residual: f64,
    pub eigen_residual: f64,
    /// Angle between `y_bar - x*` and the incoming direction (mod sign).
    pub alignment_angle: f64,
}

pub fn surface_integral_factors(saddle: &SaddleData) -> Result<SurfaceFactors> {
    let hinv = saddle
        .h_star
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateHessian("H* is singular".into()))?;
    let det_h = saddle.det_h();
    if !(det_h.abs() > 1e-14) {
        return Err(Error::DegenerateHessian("restriction of H* to the stable hyperplane is singular".into()));
    }
    let n = dv(&saddle.n_star);
    let l = saddle.lambda_plus;
    let u = &hinv * &n * (l * saddle.cos_theta / saddle.a_nn());
    let y_bar: Vec<f64> = saddle.x_star.iter().zip(u.iter()).map(|(x, v)| x + v).collect();
    let det_hs = saddle.h_star.determinant();
    let vp = dv(&saddle.v_prime_plus);
    // asin of the normalised rejection keeps precision near zero
    let along = vp.dot(&u) / vp.norm_squared();
    let sin = ((&u - &vp * along).norm() / u.norm()).min(1.0);
    Ok(SurfaceFactors {
        y_bar,
        det_h,
        det_identity_residual: (det_hs + l * det_h / saddle.a_nn()).abs() / det_hs.abs(),
        eigen_residual: (&saddle.n_matrix * &u + &u * l).norm() / u.norm(),
        alignment_angle: sin.asin(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub delta_v: f64,
    pub lambda_plus: f64,
    pub hessian_ratio: f64,
    pub f_integral: f64,
    pub f_correction: f64,
    pub prefactor: f64,
    pub epsilon: f64,
    pub mean_time: f64,
    pub rate: f64,
}

/// Everything in the transition time that does not depend on `eps`.
#[derive(Debug, Clone)]
pub struct TransitionAnalysis {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub saddle: SaddleData,
    pub attractor_hessian: DMatrix<f64>,
    pub instanton: InstantonResult,
    pub delta_v: f64,
    pub f_integral: f64,
    pub residuals: SaddleResiduals,
    pub hessian_crosscheck: f64,
}

impl TransitionAnalysis {
    pub fn hessian_ratio(&self) -> f64 {
        (self.saddle.h_star.determinant().abs() / self.attractor_hessian.determinant()).sqrt()
    }

    /// `(2 pi / lambda) sqrt(|det H*| / det H) exp(int F)`.
    pub fn prefactor(&self) -> f64 {
        2.0 * PI / self.saddle.lambda_plus * self.hessian_ratio() * self.f_integral.exp()
    }

    pub fn report(&self, epsilon: f64) -> RateReport {
        let prefactor = self.prefactor();
        let mean_time = prefactor * (self.delta_v / epsilon).exp();
        RateReport {
            delta_v: self.delta_v,
            lambda_plus: self.saddle.lambda_plus,
            hessian_ratio: self.hessian_ratio(),
            f_integral: self.f_integral,
            f_correction: self.f_integral.exp(),
            prefactor,
            epsilon,
            mean_time,
            rate: 1.0 / mean_time,
        }
    }

    /// `C_st(x*) = C_st(x1) exp(-int F)`.
    pub fn saddle_prefactor(&self) -> f64 {
        laplace_prefactor(&self.attractor_hessian) * (-self.f_integral).exp()
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Locates the saddle between `x1` and `x2`, builds the instanton and checks
/// the smoothness diagnostics.
pub fn analyze_transition(model: &ModelSpec, x1: &[f64], x2: &[f64]) -> Result<TransitionAnalysis> {
    model.transverse()?;
    let guess: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| 0.5 * (a + b)).collect();
    let x_star = find_saddle(model, &guess)?;
    let saddle = saddle_geometry_between(model, &x_star, x1, x2)?;
    let h_bar = quasipotential_hessian(model, x1, EquilibriumKind::Attractor)?;

    let mut crosscheck: f64 = 0.0;
    for (x, h) in [(&x_star[..], &saddle.h_star), (x1, &h_bar)] {
        let fd = model.fd_hessian_potential(x)?;
        crosscheck = crosscheck.max(max_abs_diff(&fd, h) / h.abs().max().max(1.0));
    }
    if crosscheck > HESSIAN_CROSSCHECK_TOL {
        return Err(Error::NonSmoothQuasipotential(format!(
            "Lyapunov and finite-difference Hessians differ by {crosscheck:.3e}"
        )));
    }
    let residuals = saddle.residuals()?;
    if residuals.max() > SMOOTHNESS_TOL {
        return Err(Error::NonSmoothQuasipotential(format!("saddle identity residual {:.3e}", residuals.max())));
    }
    let instanton = compute_instanton(model, &saddle, x1, DEFAULT_DELTA, DEFAULT_TRUNCATION)
        .map_err(|e| Error::NonSmoothQuasipotential(format!("instanton construction failed: {e}")))?;
    let delta_v = quasipotential(model, x1, &x_star)?;
    if (instanton.action - delta_v).abs() > ACTION_GAP_TOL {
        return Err(Error::NonSmoothQuasipotential(format!(
            "instanton action {:.6} differs from the barrier {:.6}",
            instanton.action, delta_v
        )));
    }
    let f_integral = f_integral_along(model, &instanton.path)?;
    Ok(TransitionAnalysis {
        x1: x1.to_vec(),
        x2: x2.to_vec(),
        saddle,
        attractor_hessian: h_bar,
        instanton,
        delta_v,
        f_integral,
        residuals,
        hessian_crosscheck: crosscheck,
    })
}

pub fn transition_rate(model: &ModelSpec, x1: &[f64], x2: &[f64], epsilon: f64) -> Result<RateReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    Ok(analyze_transition(model, x1, x2)?.report(epsilon))
}

/// Textbook reversible formula built from the Hessians of `U` alone:
/// `(2 pi / |mu_-|) sqrt(|det Hess U(x*)| / det Hess U(x1)) exp(dU / eps)`,
/// `mu_-` the negative eigenvalue of `Hess U(x*)`. Valid for `a = I`, `l = 0`.
pub fn classical_eyring_kramers(model: &ModelSpec, x1: &[f64], x_star: &[f64], epsilon: f64) -> Result<f64> {
    let hs = model.hessian_potential(x_star)?;
    let h1 = model.hessian_potential(x1)?;
    let mu = crate::linalg::symmetric_eigenvalues(&hs)[0];
    if !(mu < 0.0) {
        return Err(Error::WrongSignature { expected: "exactly one negative eigenvalue", negative: 0 });
    }
    let du = model.potential(x_star)? - model.potential(x1)?;
    Ok(2.0 * PI / mu.abs() * (hs.determinant().abs() / h1.determinant()).sqrt() * (du / epsilon).exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct EtaEntry {
    pub eta_over_sqrt_eps: f64,
    pub eta: f64,
    pub committor: f64,
    pub surface_integral: f64,
    /// Explicit rate divided by the closed form.
    pub ratio: f64,
    /// `r sqrt(2 pi) exp(r^2/2) Phi(-r)`, the exact value the ratio must take.
    pub mills_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EtaDiagnostic {
    pub entries: Vec<EtaEntry>,
    /// `max |ratio - 1|`
    pub spread: f64,
    /// `max |ratio - mills_ratio|`
    pub mills_residual: f64,
}

/// `int_{S_eta} exp(-<y-x*, H (y-x*)>/2 eps) <N (y-x*), n> dS` by quadrature
/// along the hyperplane in `d <= 2`, by its Gaussian closed form above.
fn surface_integral(s: &SaddleData, eta: f64, epsilon: f64) -> f64 {
    let d = s.dim();
    let n = dv(&s.n_star);
    let l = s.lambda_plus;
    let hinv = s.h_star.clone().try_inverse().expect("checked by surface_integral_factors");
    let u = &hinv * &n * (l * eta * s.cos_theta / s.a_nn());
    let integrand = |w: &DVector<f64>| (-w.dot(&(&s.h_star * w)) / (2.0 * epsilon)).exp() * (&s.n_matrix * w).dot(&n);
    match d {
        1 => integrand(&u),
        2 => {
            let e = orthonormal_complement(&n).column(0).into_owned();
            let hh = e.dot(&(&s.h_star * &e));
            let half = 14.0 * (epsilon / hh).sqrt();
            let m = 4000;
            let step = 2.0 * half / m as f64;
            let total: f64 = (0..=m)
                .map(|k| {
                    let w = &u + &e * (-half + k as f64 * step);
                    let c = if k == 0 || k == m { 0.5 } else { 1.0 };
                    c * integrand(&w)
                })
                .sum();
            total * step
        }
        _ => {
            let peak = (l * eta * eta * s.cos_theta.powi(2) / (2.0 * epsilon * s.a_nn())).exp();
            l * eta * s.cos_theta * ((2.0 * PI * epsilon).powi(d as i32 - 1) / s.det_h()).sqrt() * peak
        }
    }
}

/// Rebuilds the rate through the committor on `S_eta` and the surface
/// integral `I_eta` for each `eta = k sqrt(eps)`, and compares it with the
/// closed form where the `eta` dependence has been cancelled.
pub fn eta_cancellation(saddle: &SaddleData, epsilon: f64, ks: &[f64]) -> Result<EtaDiagnostic> {
    surface_integral_factors(saddle)?;
    let d = saddle.dim() as i32;
    let l = saddle.lambda_plus;
    // common factor C_st(x*) exp(-dV/eps) divides out of the ratio
    let closed = l * ((2.0 * PI).powi(d - 2) / saddle.h_star.determinant().abs()).sqrt();
    let kappa = (l * saddle.cos_theta.powi(2) / (epsilon * saddle.a_nn())).sqrt();
    let entries: Vec<EtaEntry> = ks
        .iter()
        .map(|&k| {
            let eta = k * epsilon.sqrt();
            let q = normal_cdf(-eta * kappa);
            let i_eta = surface_integral(saddle, eta, epsilon);
            let explicit = epsilon.powf(-(d as f64) / 2.0) * q * i_eta;
            let r = eta * kappa;
            EtaEntry {
                eta_over_sqrt_eps: k,
                eta,
                committor: q,
                surface_integral: i_eta,
                ratio: explicit / closed,
                mills_ratio: r * (2.0 * PI).sqrt() * (0.5 * r * r).exp() * normal_cdf(-r),
            }
        })
        .collect();
    let spread = entries.iter().map(|e| (e.ratio - 1.0).abs()).fold(0.0, f64::max);
    let mills_residual = entries.iter().map(|e| (e.ratio - e.mills_ratio).abs()).fold(0.0, f64::max);
    Ok(EtaDiagnostic { entries, spread, mills_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lookup;
    use approx::assert_abs_diff_eq;

    fn spec(name: &str) -> ModelSpec {
        lookup(name).unwrap().spec()
    }

    fn saddle2d_lambda(mu: f64, rho: f64, alpha: f64) -> f64 {
        0.5 * (-mu * (1.0 - rho)
            + mu * (1.0 + rho) * (1.0 + 4.0 * rho * alpha * alpha / (mu * mu * (1.0 + rho).powi(2))).sqrt())
    }

    #[test]
    fn find_saddle_examples() {
        let x = find_saddle(&spec("dw1d"), &[0.3]).unwrap();
        assert!(x[0].abs() <= 1e-12);
        let x = find_saddle(&spec("dw2d-shear(kappa=0.5)"), &[0.2, 0.2]).unwrap();
        assert!(x[0].abs() <= 1e-12 && x[1].abs() <= 1e-12, "{x:?}");
        assert!(matches!(
            find_saddle(&spec("dw1d"), &[-1.0]),
            Err(Error::NotASaddle { unstable: 0, .. })
        ));
    }

    #[test]
    fn gradient_geometry() {
        let s = saddle_geometry(&spec("dw2d"), &[0.0, 0.0]).unwrap();
        assert!((&s.m_star - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).abs().max() < 1e-14);
        assert_abs_diff_eq!(s.lambda_plus, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.v_plus[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.n_star[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cos_theta, 1.0, epsilon = 1e-12);
        assert!((&s.h_star - DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0])).abs().max() < 1e-12);
    }

    #[test]
    fn rotation_geometry() {
        for c in [0.0f64, 0.5, 1.0, 2.0] {
            let s = saddle_geometry(&spec(&format!("dw2d-rot(c={c})")), &[0.0, 0.0]).unwrap();
            assert_abs_diff_eq!(s.lambda_plus, (1.0 + c * c).sqrt(), epsilon = 1e-10);
            assert!((&s.h_star - DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0])).abs().max() < 1e-10);
            assert!(s.residuals().unwrap().max() < 1e-8);
        }
    }

    #[test]
    fn saddle2d_eigenvalue_and_angle() {
        for (mu, rho, alpha) in [(1.0, 0.5, 1.0), (2.0, 0.3, 0.4), (0.7, 1.5, 2.0)] {
            let m = spec(&format!("saddle2d(mu={mu},rho={rho},alpha={alpha})"));
            let s = saddle_geometry(&m, &[0.0, 0.0]).unwrap();
            assert_abs_diff_eq!(s.lambda_plus, saddle2d_lambda(mu, rho, alpha), epsilon = 1e-10);
            // stable eigenvector of M
            let lm = eigenvalues(&s.m_star).iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
            let vm = real_eigenvector(&s.m_star, lm);
            let vp = dv(&s.v_prime_plus);
            let cross = (vm[0] * vp[1] - vm[1] * vp[0]).abs();
            assert_abs_diff_eq!(cross, 1.0 / (1.0 + (alpha / mu).powi(2)).sqrt(), epsilon = 1e-8);
            // H* recovers the model's potential Hessian
            let h = DMatrix::from_row_slice(2, 2, &[-rho * mu, 0.0, 0.0, mu]);
            assert!((&s.h_star - h).abs().max() < 1e-10);
        }
    }

    #[test]
    fn lyapunov_hessians() {
        let m = spec("dw2d");
        let h = quasipotential_hessian(&m, &[-1.0, 0.0], EquilibriumKind::Attractor).unwrap();
        assert!((h - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).abs().max() < 1e-12);
        let m = spec("dw2d-rot(c=1)");
        let h = quasipotential_hessian(&m, &[-1.0, 0.0], EquilibriumKind::Attractor).unwrap();
        assert!((h - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).abs().max() < 1e-12);
        assert!(matches!(
            quasipotential_hessian(&m, &[0.0, 0.0], EquilibriumKind::Attractor),
            Err(Error::WrongSignature { negative: 1, .. })
        ));
    }

    #[test]
    fn boundary_mu_examples() {
        let m = spec("dw1d");
        assert_abs_diff_eq!(boundary_mu(&m, &[-0.5], &[1.0]).unwrap(), 0.375, epsilon = 1e-15);
        let g = spec("dw2d");
        let y = [-0.6, 0.3];
        let n = [0.6, 0.8];
        let gu = g.grad_potential(&y).unwrap();
        assert_abs_diff_eq!(boundary_mu(&g, &y, &n).unwrap(), gu[0] * n[0] + gu[1] * n[1], epsilon = 1e-15);
        assert!(matches!(boundary_mu(&m, &[-0.5], &[-1.0]), Err(Error::CharacteristicPoint(_))));
    }

    #[test]
    fn boundary_layer_shape() {
        let m = spec("dw1d");
        let (y, n) = ([-0.5], [1.0]);
        assert_eq!(boundary_layer_profile(&m, &[-1.0], &y, &n, 0.0).unwrap(), 0.0);
        let mu = boundary_mu(&m, &y, &n).unwrap();
        let c = crate::landscape::stationary_prefactor(&m, &[-1.0], &y).unwrap().c_value;
        let far = boundary_layer_profile(&m, &[-1.0], &y, &n, 100.0 / mu).unwrap();
        assert!((far / c - 1.0).abs() < 1e-10);
        let h = 1e-7;
        let slope = boundary_layer_profile(&m, &[-1.0], &y, &n, h).unwrap() / h;
        assert_abs_diff_eq!(slope, mu * c, epsilon = 1e-6);
    }

    #[test]
    fn exit_rate_on_interval() {
        let m = spec("dw1d");
        let eps = 0.08;
        let yb = -0.3;
        let dom = DomainSpec::interval(-2.0, yb, -1.0).unwrap();
        let r = quasistationary_exit_rate(&m, &dom, eps, 1).unwrap();
        let c = (2.0 / (2.0 * PI)).sqrt();
        let v = quasipotential(&m, &[-1.0], &[yb]).unwrap();
        let want = c * (yb.powi(3) - yb) * eps.powf(-0.5) * (-v / eps).exp();
        assert!((r.rate / want - 1.0).abs() < 1e-6, "{} vs {want}", r.rate);
    }

    #[test]
    fn level_set_perimeter_of_circle() {
        // for a radially symmetric quadratic potential the level set is a circle
        let m = spec("saddle2d(mu=1,rho=-1,alpha=0)");
        let dom = DomainSpec::level_set(&m, &[0.0, 0.0], 0.125).unwrap();
        assert_abs_diff_eq!(dom.measure(64).unwrap(), 2.0 * PI * 0.5, epsilon = 1e-10);
    }

    #[test]
    fn level_set_rate_quadrature_converges() {
        let m = spec("dw2d");
        let dom = DomainSpec::level_set(&m, &[-1.0, 0.0], 0.15).unwrap();
        let a = quasistationary_exit_rate(&m, &dom, 0.1, 64).unwrap().rate;
        let b = quasistationary_exit_rate(&m, &dom, 0.1, 128).unwrap().rate;
        assert!((a / b - 1.0).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn exit_rate_scaling_on_level_set() {
        // V and C_st are constant on the level set of dw2d, so the rate is
        // exactly proportional to exp(-level / eps) / eps
        let m = spec("dw2d");
        let dom = DomainSpec::level_set(&m, &[-1.0, 0.0], 0.15).unwrap();
        let scaled = |eps: f64| quasistationary_exit_rate(&m, &dom, eps, 128).unwrap().rate * eps * (0.15 / eps).exp();
        assert!((scaled(0.1) / scaled(0.05) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn committor_values() {
        let s = saddle_geometry(&spec("dw2d"), &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(committor(&s, &[0.0, 0.7], 0.01), 0.5, epsilon = 1e-15);
        let y = [-0.3, 0.0];
        assert_abs_diff_eq!(committor(&s, &y, 0.01), 0.0013498980316301, epsilon = 1e-12);
        let mut prev = 0.0;
        for k in -50..=50 {
            let q = committor(&s, &[k as f64 * 0.01, 0.0], 0.01);
            assert!(q > prev || (q == 1.0 && prev == 1.0));
            prev = q;
        }
        assert!(committor(&s, &[-5.0, 0.0], 0.01) < 1e-300);
        assert_eq!(committor(&s, &[5.0, 0.0], 0.01), 1.0);
    }

    #[test]
    fn surface_factors_dw2d() {
        let s = saddle_geometry(&spec("dw2d"), &[0.0, 0.0]).unwrap();
        let f = surface_integral_factors(&s).unwrap();
        assert_abs_diff_eq!(f.det_h, 1.0, epsilon = 1e-12);
        assert!(f.det_identity_residual < 1e-12);
        assert!(f.alignment_angle < 1e-8);
    }

    #[test]
    fn saddle2d_grid_identities() {
        let grid = [0.5, 0.8, 1.0, 1.5, 2.0];
        for &mu in &grid {
            for &rho in &grid {
                for &alpha in &grid {
                    let m = spec(&format!("saddle2d(mu={mu},rho={rho},alpha={alpha})"));
                    let s = saddle_geometry(&m, &[0.0, 0.0]).unwrap();
                    let f = surface_integral_factors(&s).unwrap();
                    assert!(f.det_identity_residual < 1e-10);
                    assert!(f.eigen_residual < 1e-8);
                    assert!(f.alignment_angle < 1e-8);
                    assert!(s.residuals().unwrap().max() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn dw1d_rate_matches_classical() {
        let m = spec("dw1d");
        let r = transition_rate(&m, &[-1.0], &[1.0], 0.1).unwrap();
        assert_abs_diff_eq!(r.prefactor, 2.0 * PI * 0.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.delta_v, 0.25, epsilon = 1e-15);
        let classic = classical_eyring_kramers(&m, &[-1.0], &[0.0], 0.1).unwrap();
        assert!((r.mean_time / classic - 1.0).abs() < 1e-10);
        assert_abs_diff_eq!(r.mean_time, 2.0 * PI / 2f64.sqrt() * 2.5f64.exp(), epsilon = 1e-10);
    }

    #[test]
    fn rotation_rate() {
        let r = transition_rate(&spec("dw2d-rot(c=1)"), &[-1.0, 0.0], &[1.0, 0.0], 0.1).unwrap();
        assert_abs_diff_eq!(r.prefactor, PI, epsilon = 1e-8);
        assert_abs_diff_eq!(r.f_correction, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn shear_rate_has_f_correction() {
        let a = analyze_transition(&spec("dw2d-shear(kappa=0.5)"), &[-1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(a.f_integral > 0.2 && a.f_integral < 0.3, "{}", a.f_integral);
        let r = a.report(0.1);
        assert_abs_diff_eq!(r.prefactor, PI * a.f_integral.exp(), epsilon = 1e-8);
        assert_abs_diff_eq!(r.rate * r.mean_time, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn eta_ratio_is_mills_ratio() {
        let s = saddle_geometry(&spec("dw2d-shear(kappa=0.5)"), &[0.0, 0.0]).unwrap();
        let d = eta_cancellation(&s, 0.01, &[3.0, 5.0, 8.0]).unwrap();
        assert!(d.mills_residual < 1e-9, "{}", d.mills_residual);
        // the explicit pipeline approaches the closed form as eta grows
        assert!(d.entries[0].ratio < d.entries[1].ratio && d.entries[1].ratio < d.entries[2].ratio);
    }
}
