//! Diffusion models `dX = b dt + sqrt(2 eps) sigma dW` and the built-in registry.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub type VecField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type MatField = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Residual bound for the transverse relations.
pub const TRANSVERSE_TOL: f64 = 1e-9;
/// Step of the nested central differences used for second derivatives.
pub const SECOND_DIFF_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    /// Use closed-form derivatives where the model provides them.
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Drift,
    /// The fluctuation field `a grad U + l`.
    Fluctuation,
}

/// Exact decomposition `b = -a grad U + l` with `<grad U, l> = 0`.
#[derive(Clone)]
pub struct Transverse {
    pub potential: ScalarField,
    pub gradient: VecField,
    pub transverse: VecField,
    pub hessian: Option<MatField>,
    pub transverse_jacobian: Option<MatField>,
}

#[derive(Clone)]
pub struct ModelSpec {
    pub dim: usize,
    drift: VecField,
    drift_jacobian: Option<MatField>,
    sigma: MatField,
    constant_noise: bool,
    transverse: Option<Transverse>,
    pub derivative_mode: DerivativeMode,
    /// Per-coordinate bounds of the domain box.
    pub domain: Vec<(f64, f64)>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("transverse", &self.transverse.is_some())
            .field("constant_noise", &self.constant_noise)
            .field("derivative_mode", &self.derivative_mode)
            .field("domain", &self.domain)
            .finish()
    }
}

fn fd_step(x: f64) -> f64 {
    1e-6_f64.max(1e-6 * x.abs())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl ModelSpec {
    /// A model with identity noise and the default box `[-3, 3]^d`.
    pub fn new(dim: usize, drift: VecField) -> Self {
        Self {
            dim,
            drift,
            drift_jacobian: None,
            sigma: Arc::new(move |_| DMatrix::identity(dim, dim)),
            constant_noise: true,
            transverse: None,
            derivative_mode: DerivativeMode::Analytic,
            domain: vec![(-3.0, 3.0); dim],
        }
    }

    pub fn with_drift_jacobian(mut self, jac: MatField) -> Self {
        self.drift_jacobian = Some(jac);
        self
    }

    /// Replaces the noise matrix. `constant` lets callers skip derivatives of `a`.
    pub fn with_sigma(mut self, sigma: MatField, constant: bool) -> Self {
        self.sigma = sigma;
        self.constant_noise = constant;
        self
    }

    pub fn with_transverse(mut self, t: Transverse) -> Self {
        self.transverse = Some(t);
        self
    }

    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_derivative_mode(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    pub fn has_drift_jacobian(&self) -> bool {
        self.drift_jacobian.is_some()
    }

    pub fn has_transverse(&self) -> bool {
        self.transverse.is_some()
    }

    pub fn constant_noise(&self) -> bool {
        self.constant_noise
    }

    pub fn transverse(&self) -> Result<&Transverse> {
        self.transverse.as_ref().ok_or(Error::MissingTransverse)
    }

    /// Raw drift evaluation, no checks. Hot loops use this.
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        (self.drift)(x, &mut out);
        if !all_finite(&out) {
            return Err(Error::NonFiniteValue(format!("drift at {x:?}")));
        }
        Ok(out)
    }

    pub fn sigma(&self, x: &[f64]) -> DMatrix<f64> {
        (self.sigma)(x)
    }

    pub fn diffusion(&self, x: &[f64]) -> DMatrix<f64> {
        let s = (self.sigma)(x);
        &s * s.transpose()
    }

    pub fn potential(&self, x: &[f64]) -> Result<f64> {
        Ok((self.transverse()?.potential)(x))
    }

    pub fn grad_potential(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.transverse()?;
        let mut g = vec![0.0; self.dim];
        (t.gradient)(x, &mut g);
        if !all_finite(&g) {
            return Err(Error::NonFiniteValue(format!("grad U at {x:?}")));
        }
        Ok(g)
    }

    pub fn transverse_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.transverse()?;
        let mut l = vec![0.0; self.dim];
        (t.transverse)(x, &mut l);
        if !all_finite(&l) {
            return Err(Error::NonFiniteValue(format!("l at {x:?}")));
        }
        Ok(l)
    }

    /// `a grad U + l`, evaluated without checks.
    pub fn fluctuation_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let t = self.transverse()?;
        let d = self.dim;
        let mut g = vec![0.0; d];
        (t.gradient)(x, &mut g);
        (t.transverse)(x, out);
        let a = self.diffusion(x);
        for i in 0..d {
            for j in 0..d {
                out[i] += a[(i, j)] * g[j];
            }
        }
        Ok(())
    }

    pub fn fluctuation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.fluctuation_into(x, &mut out)?;
        if !all_finite(&out) {
            return Err(Error::NonFiniteValue(format!("fluctuation field at {x:?}")));
        }
        Ok(out)
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.domain).all(|(v, (lo, hi))| v.is_finite() && *v >= *lo && *v <= *hi)
    }

    fn fd_jacobian<F>(&self, x: &[f64], f: F) -> Result<DMatrix<f64>>
    where
        F: Fn(&[f64], &mut [f64]) -> Result<()>,
    {
        let d = self.dim;
        let mut jac = DMatrix::zeros(d, d);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            f(&xp, &mut fp)?;
            xp[j] = x[j] - h;
            f(&xp, &mut fm)?;
            xp[j] = x[j];
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("jacobian at {x:?}")));
        }
        Ok(jac)
    }

    /// `(Df)_ij = d_j f_i`.
    pub fn jacobian(&self, field: Field, x: &[f64]) -> Result<DMatrix<f64>> {
        let analytic = self.derivative_mode == DerivativeMode::Analytic;
        match field {
            Field::Drift => {
                if let (true, Some(j)) = (analytic, &self.drift_jacobian) {
                    let m = j(x);
                    if m.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteValue(format!("drift jacobian at {x:?}")));
                    }
                    return Ok(m);
                }
                self.fd_jacobian(x, |p, out| {
                    self.drift_into(p, out);
                    Ok(())
                })
            }
            Field::Fluctuation => {
                let t = self.transverse()?;
                // a grad U + l = -b + 2 l
                if let (true, Some(_), Some(lj)) =
                    (analytic, &self.drift_jacobian, &t.transverse_jacobian)
                {
                    let m = lj(x) * 2.0 - self.jacobian(Field::Drift, x)?;
                    return Ok(m);
                }
                self.fd_jacobian(x, |p, out| self.fluctuation_into(p, out))
            }
        }
    }

    /// Jacobian of `l`.
    pub fn transverse_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let t = self.transverse()?;
        if self.derivative_mode == DerivativeMode::Analytic {
            if let Some(lj) = &t.transverse_jacobian {
                return Ok(lj(x));
            }
        }
        let tr = t.transverse.clone();
        self.fd_jacobian(x, move |p, out| {
            tr(p, out);
            Ok(())
        })
    }

    /// Hessian of `U`: analytic if available, else nested central differences.
    pub fn hessian_potential(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let t = self.transverse()?;
        if self.derivative_mode == DerivativeMode::Analytic {
            if let Some(h) = &t.hessian {
                return Ok(h(x));
            }
        }
        self.fd_hessian_potential(x)
    }

    /// Hessian of `U` by nested central differences of `U` itself.
    pub fn fd_hessian_potential(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let t = self.transverse()?;
        let d = self.dim;
        let h = SECOND_DIFF_STEP;
        let u = &t.potential;
        let mut hess = DMatrix::zeros(d, d);
        let mut p = x.to_vec();
        for i in 0..d {
            for j in i..d {
                let mut eval = |si: f64, sj: f64| {
                    p.copy_from_slice(x);
                    p[i] += si * h;
                    p[j] += sj * h;
                    u(&p)
                };
                let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        Ok(hess)
    }

    /// `A_i = sum_j d_j a_ij`; zero for constant noise.
    pub fn diffusion_divergence(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        if self.constant_noise {
            return out;
        }
        let mut p = x.to_vec();
        for j in 0..d {
            let h = fd_step(x[j]);
            p[j] = x[j] + h;
            let ap = self.diffusion(&p);
            p[j] = x[j] - h;
            let am = self.diffusion(&p);
            p[j] = x[j];
            for i in 0..d {
                out[i] += (ap[(i, j)] - am[(i, j)]) / (2.0 * h);
            }
        }
        out
    }

    /// Max over `points` of `|b + a grad U - l|` and `|<grad U, l>|`.
    pub fn check_transverse(&self, points: &[Vec<f64>]) -> Result<TransverseReport> {
        self.transverse()?;
        let mut drift_residual: f64 = 0.0;
        let mut orthogonality_residual: f64 = 0.0;
        for x in points {
            let b = self.drift(x)?;
            let g = self.grad_potential(x)?;
            let l = self.transverse_field(x)?;
            let a = self.diffusion(x);
            let ag = &a * DVector::from_column_slice(&g);
            let r: f64 = (0..self.dim)
                .map(|i| (b[i] + ag[i] - l[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            let o: f64 = g.iter().zip(&l).map(|(u, v)| u * v).sum();
            drift_residual = drift_residual.max(r);
            orthogonality_residual = orthogonality_residual.max(o.abs());
        }
        Ok(TransverseReport {
            drift_residual,
            orthogonality_residual,
            passed: drift_residual <= TRANSVERSE_TOL && orthogonality_residual <= TRANSVERSE_TOL,
        })
    }

    /// Uniform random points in the domain box, deterministic in `seed`.
    pub fn sample_domain(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        sample_box(&self.domain, n, seed)
    }

    /// Copy of this model whose drift is shifted by a constant vector.
    /// Only useful to exercise failure paths.
    pub fn with_drift_offset(&self, offset: Vec<f64>) -> ModelSpec {
        let inner = self.drift.clone();
        let mut m = self.clone();
        m.drift = Arc::new(move |x, out| {
            inner(x, out);
            for (o, s) in out.iter_mut().zip(&offset) {
                *o += s;
            }
        });
        m.drift_jacobian = self.drift_jacobian.clone();
        m
    }

    /// Copy of this model with `l` replaced by `l + s grad U` and the drift
    /// moved along with it, so `b = -a grad U + l` still holds but
    /// orthogonality fails.
    pub fn with_broken_orthogonality(&self, s: f64) -> Result<ModelSpec> {
        let t = self.transverse()?.clone();
        let d = self.dim;
        let drift = self.drift.clone();
        let g1 = t.gradient.clone();
        let g2 = t.gradient.clone();
        let l0 = t.transverse.clone();
        let mut m = self.clone();
        m.drift = Arc::new(move |x, out| {
            drift(x, out);
            let mut g = vec![0.0; d];
            g1(x, &mut g);
            for i in 0..d {
                out[i] += s * g[i];
            }
        });
        m.drift_jacobian = None;
        m.transverse = Some(Transverse {
            transverse: Arc::new(move |x, out| {
                l0(x, out);
                let mut g = vec![0.0; d];
                g2(x, &mut g);
                for i in 0..d {
                    out[i] += s * g[i];
                }
            }),
            transverse_jacobian: None,
            ..t
        });
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransverseReport {
    pub drift_residual: f64,
    pub orthogonality_residual: f64,
    pub passed: bool,
}

pub fn sample_box(domain: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| domain.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnownFacts {
    pub attractors: Option<(Vec<f64>, Vec<f64>)>,
    pub saddle: Vec<f64>,
    pub delta_v: Option<f64>,
}

type Factory = fn(&BTreeMap<String, f64>) -> ModelSpec;
type FactsFn = fn(&BTreeMap<String, f64>) -> KnownFacts;

#[derive(Clone)]
pub struct RegisteredModel {
    pub name: String,
    pub parameters: BTreeMap<String, f64>,
    factory: Factory,
    facts: FactsFn,
}

impl fmt::Debug for RegisteredModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegisteredModel")
            .field("name", &self.name)
            .field("parameters", &self.parameters)
            .finish()
    }
}

impl RegisteredModel {
    pub fn spec(&self) -> ModelSpec {
        (self.factory)(&self.parameters)
    }

    pub fn known_facts(&self) -> Option<KnownFacts> {
        Some((self.facts)(&self.parameters))
    }

    /// Canonical label, e.g. `dw2d-rot(c=1)`.
    pub fn label(&self) -> String {
        if self.parameters.is_empty() {
            return self.name.clone();
        }
        let args: Vec<String> = self.parameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.name, args.join(","))
    }
}

fn p(params: &BTreeMap<String, f64>, k: &str) -> f64 {
    params[k]
}

// U = x^4/4 - x^2/2 (+ y^2/2)
fn quartic_grad(x: &[f64], g: &mut [f64]) {
    g[0] = x[0] * x[0] * x[0] - x[0];
    if x.len() > 1 {
        g[1] = x[1];
    }
}

fn quartic_potential(x: &[f64]) -> f64 {
    let q = x[0] * x[0];
    let mut u = 0.25 * q * q - 0.5 * q;
    if x.len() > 1 {
        u += 0.5 * x[1] * x[1];
    }
    u
}

fn quartic_hessian(x: &[f64]) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(x.len(), x.len());
    h[(0, 0)] = 3.0 * x[0] * x[0] - 1.0;
    if x.len() > 1 {
        h[(1, 1)] = 1.0;
    }
    h
}

fn dw1d(_: &BTreeMap<String, f64>) -> ModelSpec {
    ModelSpec::new(1, Arc::new(|x, out| out[0] = x[0] - x[0] * x[0] * x[0]))
        .with_drift_jacobian(Arc::new(|x| DMatrix::from_element(1, 1, 1.0 - 3.0 * x[0] * x[0])))
        .with_transverse(Transverse {
            potential: Arc::new(quartic_potential),
            gradient: Arc::new(quartic_grad),
            transverse: Arc::new(|_, out| out[0] = 0.0),
            hessian: Some(Arc::new(quartic_hessian)),
            transverse_jacobian: Some(Arc::new(|_| DMatrix::zeros(1, 1))),
        })
}

/// Planar double well with `l = (1 + kappa x) c J grad U`, `J = [[0,-1],[1,0]]`.
fn dw2d_family(c: f64, kappa: f64) -> ModelSpec {
    let ell = move |x: &[f64], out: &mut [f64]| {
        let s = c * (1.0 + kappa * x[0]);
        let ux = x[0] * x[0] * x[0] - x[0];
        out[0] = -s * x[1];
        out[1] = s * ux;
    };
    let ell_jac = move |x: &[f64]| {
        let s = c * (1.0 + kappa * x[0]);
        let ux = x[0] * x[0] * x[0] - x[0];
        let uxx = 3.0 * x[0] * x[0] - 1.0;
        DMatrix::from_row_slice(2, 2, &[-c * kappa * x[1], -s, c * kappa * ux + s * uxx, 0.0])
    };
    ModelSpec::new(
        2,
        Arc::new(move |x, out| {
            let mut l = [0.0; 2];
            ell(x, &mut l);
            out[0] = -(x[0] * x[0] * x[0] - x[0]) + l[0];
            out[1] = -x[1] + l[1];
        }),
    )
    .with_drift_jacobian(Arc::new(move |x| {
        let uxx = 3.0 * x[0] * x[0] - 1.0;
        ell_jac(x) - DMatrix::from_row_slice(2, 2, &[uxx, 0.0, 0.0, 1.0])
    }))
    .with_transverse(Transverse {
        potential: Arc::new(quartic_potential),
        gradient: Arc::new(quartic_grad),
        transverse: Arc::new(ell),
        hessian: Some(Arc::new(quartic_hessian)),
        transverse_jacobian: Some(Arc::new(ell_jac)),
    })
}

fn dw2d(_: &BTreeMap<String, f64>) -> ModelSpec {
    dw2d_family(0.0, 0.0)
}

fn dw2d_rot(params: &BTreeMap<String, f64>) -> ModelSpec {
    dw2d_family(p(params, "c"), 0.0)
}

fn dw2d_shear(params: &BTreeMap<String, f64>) -> ModelSpec {
    dw2d_family(1.0, p(params, "kappa"))
}

/// Linear saddle: `U = x^T H x / 2`, `l = D x`.
fn saddle2d(params: &BTreeMap<String, f64>) -> ModelSpec {
    let (mu, rho, alpha) = (p(params, "mu"), p(params, "rho"), p(params, "alpha"));
    let h = DMatrix::from_row_slice(2, 2, &[-rho * mu, 0.0, 0.0, mu]);
    let dm = DMatrix::from_row_slice(2, 2, &[0.0, alpha, alpha * rho, 0.0]);
    let m = &dm - &h;
    let (h2, dm2, m2) = (h.clone(), dm.clone(), m.clone());
    ModelSpec::new(
        2,
        Arc::new(move |x, out| {
            out[0] = m[(0, 0)] * x[0] + m[(0, 1)] * x[1];
            out[1] = m[(1, 0)] * x[0] + m[(1, 1)] * x[1];
        }),
    )
    .with_drift_jacobian(Arc::new(move |_| m2.clone()))
    .with_transverse(Transverse {
        potential: Arc::new(move |x| 0.5 * (-rho * mu * x[0] * x[0] + mu * x[1] * x[1])),
        gradient: Arc::new(move |x, g| {
            g[0] = -rho * mu * x[0];
            g[1] = mu * x[1];
        }),
        transverse: Arc::new(move |x, out| {
            out[0] = alpha * x[1];
            out[1] = alpha * rho * x[0];
        }),
        hessian: Some(Arc::new(move |_| h2.clone())),
        transverse_jacobian: Some(Arc::new(move |_| dm2.clone())),
    })
}

fn double_well_facts(params: &BTreeMap<String, f64>) -> KnownFacts {
    let _ = params;
    KnownFacts {
        attractors: Some((vec![-1.0, 0.0], vec![1.0, 0.0])),
        saddle: vec![0.0, 0.0],
        delta_v: Some(0.25),
    }
}

fn dw1d_facts(_: &BTreeMap<String, f64>) -> KnownFacts {
    KnownFacts { attractors: Some((vec![-1.0], vec![1.0])), saddle: vec![0.0], delta_v: Some(0.25) }
}

fn saddle2d_facts(_: &BTreeMap<String, f64>) -> KnownFacts {
    KnownFacts { attractors: None, saddle: vec![0.0, 0.0], delta_v: None }
}

struct Entry {
    name: &'static str,
    defaults: &'static [(&'static str, f64)],
    factory: Factory,
    facts: FactsFn,
}

const REGISTRY: &[Entry] = &[
    Entry { name: "dw1d", defaults: &[], factory: dw1d, facts: dw1d_facts },
    Entry { name: "dw2d", defaults: &[], factory: dw2d, facts: double_well_facts },
    Entry { name: "dw2d-rot", defaults: &[("c", 1.0)], factory: dw2d_rot, facts: double_well_facts },
    Entry {
        name: "dw2d-shear",
        defaults: &[("kappa", 0.5)],
        factory: dw2d_shear,
        facts: double_well_facts,
    },
    Entry {
        name: "saddle2d",
        defaults: &[("mu", 1.0), ("rho", 0.5), ("alpha", 1.0)],
        factory: saddle2d,
        facts: saddle2d_facts,
    },
];

fn instantiate(e: &Entry, params: BTreeMap<String, f64>) -> RegisteredModel {
    RegisteredModel { name: e.name.to_string(), parameters: params, factory: e.factory, facts: e.facts }
}

/// Every registered family at its default parameters.
pub fn builtin_models() -> Vec<RegisteredModel> {
    REGISTRY
        .iter()
        .map(|e| {
            let params = e.defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            instantiate(e, params)
        })
        .collect()
}

/// Parses `name` or `name(k1=v1,k2=v2)` and instantiates the model.
pub fn lookup(spec: &str) -> Result<RegisteredModel> {
    let spec = spec.trim();
    let (name, args) = match spec.find('(') {
        Some(i) => {
            let rest = spec[i + 1..]
                .strip_suffix(')')
                .ok_or_else(|| Error::InvalidInput(format!("unbalanced parentheses in `{spec}`")))?;
            (spec[..i].trim(), rest)
        }
        None => (spec, ""),
    };
    let entry = REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::NotFound(name.to_string()))?;
    let mut params: BTreeMap<String, f64> =
        entry.defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for kv in args.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("expected key=value, got `{kv}`")))?;
        let k = k.trim();
        if !params.contains_key(k) {
            return Err(Error::InvalidInput(format!("model `{name}` has no parameter `{k}`")));
        }
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("parameter `{k}`: `{v}` is not a number")))?;
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("parameter `{k}` must be finite")));
        }
        params.insert(k.to_string(), v);
    }
    Ok(instantiate(entry, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn dw1d_jacobian_at_origin() {
        let m = lookup("dw1d").unwrap().spec();
        let j = m.jacobian(Field::Drift, &[0.0]).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 1.0, epsilon = 1e-14);
        let fd = m.clone().with_derivative_mode(DerivativeMode::CentralDifference);
        assert_abs_diff_eq!(fd.jacobian(Field::Drift, &[0.0]).unwrap()[(0, 0)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn linear_field_jacobian_is_exact() {
        let m = lookup("saddle2d(mu=2,rho=0.3,alpha=0.7)").unwrap().spec();
        let exact = m.jacobian(Field::Drift, &[0.0, 0.0]).unwrap();
        let fd = m.with_derivative_mode(DerivativeMode::CentralDifference);
        let j = fd.jacobian(Field::Drift, &[0.4, -1.2]).unwrap();
        assert!((j - exact).abs().max() < 1e-9);
    }

    #[test]
    fn rot_jacobian_at_saddle() {
        let m = lookup("dw2d-rot(c=1)").unwrap().spec();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, -1.0]);
        assert!((m.jacobian(Field::Drift, &[0.0, 0.0]).unwrap() - &want).abs().max() < 1e-14);
        let fd = m.with_derivative_mode(DerivativeMode::CentralDifference);
        assert!((fd.jacobian(Field::Drift, &[0.0, 0.0]).unwrap() - want).abs().max() < 1e-9);
    }

    #[test]
    fn fluctuation_jacobian_needs_transverse() {
        let m = ModelSpec::new(1, Arc::new(|x, o| o[0] = -x[0]));
        assert_eq!(m.jacobian(Field::Fluctuation, &[0.0]).unwrap_err(), Error::MissingTransverse);
    }

    #[test]
    fn non_finite_drift_reported() {
        let m = ModelSpec::new(1, Arc::new(|x, o| o[0] = 1.0 / x[0]));
        assert!(matches!(m.drift(&[0.0]), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn transverse_checks() {
        let m = lookup("dw2d").unwrap().spec();
        let r = m.check_transverse(&m.sample_domain(50, 1)).unwrap();
        assert_eq!(r.drift_residual, 0.0);
        assert_eq!(r.orthogonality_residual, 0.0);

        let m = lookup("dw2d-shear(kappa=0.5)").unwrap().spec();
        let pts = sample_box(&[(-2.0, 2.0), (-2.0, 2.0)], 100, 7);
        let r = m.check_transverse(&pts).unwrap();
        assert!(r.drift_residual < 1e-12 && r.orthogonality_residual < 1e-12);

        let bad = m.with_drift_offset(vec![1e-3, 0.0]);
        let r = bad.check_transverse(&pts).unwrap();
        assert!(!r.passed);
        assert_abs_diff_eq!(r.drift_residual, 1e-3, epsilon = 1e-12);
    }

    #[test]
    fn registry_transverse_on_large_cloud() {
        for rm in builtin_models() {
            let m = rm.spec();
            let r = m.check_transverse(&m.sample_domain(10_000, 3)).unwrap();
            assert!(r.passed, "{}: {:?}", rm.label(), r);
        }
    }

    #[test]
    fn analytic_and_fd_jacobians_agree() {
        for rm in builtin_models() {
            let m = rm.spec();
            let fd = m.clone().with_derivative_mode(DerivativeMode::CentralDifference);
            for x in m.sample_domain(100, 11) {
                for field in [Field::Drift, Field::Fluctuation] {
                    let a = m.jacobian(field, &x).unwrap();
                    let b = fd.jacobian(field, &x).unwrap();
                    let scale = a.abs().max().max(1.0);
                    assert!((a - b).abs().max() <= 1e-6 * scale, "{} at {x:?}", rm.label());
                }
            }
        }
    }

    #[test]
    fn fd_hessian_matches_analytic() {
        let m = lookup("dw2d").unwrap().spec();
        let x = [0.7, -0.3];
        let a = m.hessian_potential(&x).unwrap();
        let b = m.fd_hessian_potential(&x).unwrap();
        assert!((a - b).abs().max() < 1e-6);
    }

    #[test]
    fn diffusion_is_spd() {
        for rm in builtin_models() {
            let m = rm.spec();
            for x in m.sample_domain(20, 5) {
                let a = m.diffusion(&x);
                assert!(crate::linalg::is_spd(&a, 1e-14));
            }
        }
    }

    #[test]
    fn known_facts_are_equilibria() {
        for rm in builtin_models() {
            let m = rm.spec();
            let f = rm.known_facts().unwrap();
            let mut pts = vec![f.saddle.clone()];
            if let Some((a, b)) = f.attractors {
                pts.push(a);
                pts.push(b);
            }
            for x in pts {
                let x = &x[..m.dim];
                assert!(m.drift(x).unwrap().iter().all(|v| v.abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn lookup_parses_parameters() {
        let rm = lookup("dw1d").unwrap();
        let f = rm.known_facts().unwrap();
        assert_eq!(f.attractors, Some((vec![-1.0], vec![1.0])));
        assert_eq!(f.saddle, vec![0.0]);
        assert_eq!(f.delta_v, Some(0.25));

        let rm = lookup("dw2d-rot(c=1)").unwrap();
        assert_eq!(rm.known_facts(), lookup("dw2d").unwrap().known_facts());
        assert_eq!(rm.parameters["c"], 1.0);

        let rm = lookup(" saddle2d( mu = 2 , alpha=0.25 ) ").unwrap();
        assert_eq!(rm.parameters["mu"], 2.0);
        assert_eq!(rm.parameters["rho"], 0.5);
        assert_eq!(rm.label(), "saddle2d(alpha=0.25,mu=2,rho=0.5)");

        assert_eq!(lookup("nosuch").unwrap_err(), Error::NotFound("nosuch".into()));
        assert!(matches!(lookup("dw2d-rot(q=1)"), Err(Error::InvalidInput(_))));
        assert!(matches!(lookup("dw2d-rot(c=abc)"), Err(Error::InvalidInput(_))));
        assert!(matches!(lookup("dw2d-rot(c=1"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn broken_orthogonality_keeps_drift_relation() {
        let m = lookup("dw2d-rot").unwrap().spec().with_broken_orthogonality(1e-2).unwrap();
        let r = m.check_transverse(&m.sample_domain(20, 2)).unwrap();
        assert!(r.drift_residual < 1e-12);
        assert!(r.orthogonality_residual > 1e-3);
    }

    proptest! {
        #[test]
        fn shear_transverse_is_orthogonal(x in -3.0f64..3.0, y in -3.0f64..3.0, k in -1.0f64..1.0) {
            let m = lookup(&format!("dw2d-shear(kappa={k})")).unwrap().spec();
            let g = m.grad_potential(&[x, y]).unwrap();
            let l = m.transverse_field(&[x, y]).unwrap();
            prop_assert!((g[0] * l[0] + g[1] * l[1]).abs() < 1e-12 * (1.0 + g[0].abs() + g[1].abs()).powi(2));
        }
    }
}
