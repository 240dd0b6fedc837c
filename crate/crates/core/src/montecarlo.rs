//! Euler-Maruyama first-passage sampling, the empirical committor and
//! Arrhenius regression.
//!
//! Trajectory `k` draws from ChaCha8 stream `k` of `seed`, and results are
//! gathered in index order, so the worker count never changes the output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, pairwise_sum};
use crate::model::{Field, ModelSpec};
use crate::saddle::SaddleData;

pub const DEFAULT_STOP_RADIUS: f64 = 0.2;
/// Mean passage times below this multiple of the relaxation time are not metastable.
pub const METASTABILITY_FACTOR: f64 = 50.0;
/// Smallest sample accepted by the exponential-shape check.
pub const MIN_DISTRIBUTION_SAMPLES: usize = 500;
/// Two-sided 99% standard normal quantile.
const Z99: f64 = 2.5758293035489004;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McConfig {
    pub epsilon: f64,
    pub dt: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub stop_radius: f64,
    pub max_steps: u64,
    /// 0 lets rayon pick.
    pub workers: usize,
}

impl McConfig {
    pub fn new(epsilon: f64, dt: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            epsilon,
            dt,
            n_samples,
            seed,
            stop_radius: DEFAULT_STOP_RADIUS,
            max_steps: 100_000_000,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.dt > 0.0) || self.n_samples == 0 || !(self.stop_radius > 0.0) {
            return Err(Error::InvalidInput("epsilon, dt, n and stop_radius must be positive".into()));
        }
        if self.dt > self.epsilon / 10.0 || self.dt > 1e-2 {
            return Err(Error::InvalidInput(format!(
                "dt = {} violates dt <= eps/10 and dt <= 1e-2 (eps = {})",
                self.dt, self.epsilon
            )));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub censored: usize,
    pub median: f64,
    /// `1 / mean(t - median)` over the times above the median.
    pub exp_fit_rate: f64,
    /// Sup distance to Exponential(1/mean); absent below 500 samples.
    pub ks_pvalue_proxy: Option<f64>,
    #[serde(skip)]
    pub times: Vec<f64>,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Summary statistics of completed passage times.
pub fn summarize(times: Vec<f64>, censored: usize) -> Result<McEstimate> {
    if times.is_empty() {
        return Err(Error::AllCensored);
    }
    let n = times.len();
    let mean = pairwise_sum(&times) / n as f64;
    let dev: Vec<f64> = times.iter().map(|t| (t - mean).powi(2)).collect();
    let var = if n > 1 { pairwise_sum(&dev) / (n - 1) as f64 } else { 0.0 };
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let median = median_sorted(&sorted);
    let tail: Vec<f64> = sorted.iter().filter(|&&t| t > median).map(|t| t - median).collect();
    let exp_fit_rate = if tail.is_empty() { f64::NAN } else { tail.len() as f64 / pairwise_sum(&tail) };
    let ks_pvalue_proxy = (n >= MIN_DISTRIBUTION_SAMPLES).then(|| sup_distance_sorted(&sorted, mean));
    Ok(McEstimate { mean, stderr: (var / n as f64).sqrt(), n, censored, median, exp_fit_rate, ks_pvalue_proxy, times })
}

fn sup_distance_sorted(sorted: &[f64], mean: f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = -(-t / mean).exp_m1();
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov sup distance between the sample and Exponential(1/mean).
pub fn exit_time_distribution_check(times: &[f64]) -> Result<f64> {
    if times.len() < MIN_DISTRIBUTION_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_DISTRIBUTION_SAMPLES} samples, got {}",
            times.len()
        )));
    }
    let mut s = times.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(sup_distance_sorted(&s, pairwise_sum(&s) / s.len() as f64))
}

/// One Euler-Maruyama trajectory from `x0` until `stop` fires; `None` if
/// `max_steps` runs out first.
fn passage<S: Fn(&[f64]) -> bool>(model: &ModelSpec, cfg: &McConfig, x0: &[f64], stop: &S, k: u64) -> Option<f64> {
    let d = model.dim;
    let mut rng = stream(cfg.seed, k);
    let amp = (2.0 * cfg.epsilon * cfg.dt).sqrt();
    let fixed_sigma = model.constant_noise().then(|| model.sigma(x0));
    let mut x = x0.to_vec();
    let mut b = vec![0.0; d];
    let mut xi = DVector::<f64>::zeros(d);
    for step in 1..=cfg.max_steps {
        model.drift_into(&x, &mut b);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let noise = match &fixed_sigma {
            Some(s) => s * &xi,
            None => model.sigma(&x) * &xi,
        };
        for i in 0..d {
            x[i] += b[i] * cfg.dt + amp * noise[i];
        }
        if stop(&x) {
            return Some(step as f64 * cfg.dt);
        }
    }
    None
}

/// First-passage times from `from` until `stop` fires, one per trajectory,
/// `None` for censored ones, in trajectory order.
pub fn sample_first_passage<S>(model: &ModelSpec, cfg: &McConfig, from: &[f64], stop: S) -> Result<Vec<Option<f64>>>
where
    S: Fn(&[f64]) -> bool + Sync,
{
    cfg.validate()?;
    if from.len() != model.dim {
        return Err(Error::InvalidInput("start point has the wrong dimension".into()));
    }
    let pool = cfg.pool()?;
    Ok(pool.install(|| {
        (0..cfg.n_samples as u64)
            .into_par_iter()
            .map(|k| passage(model, cfg, from, &stop, k))
            .collect()
    }))
}

fn estimate(raw: Vec<Option<f64>>) -> Result<McEstimate> {
    let censored = raw.iter().filter(|t| t.is_none()).count();
    summarize(raw.into_iter().flatten().collect(), censored)
}

/// Mean first time to enter the ball of radius `stop_radius` around `to`.
pub fn sample_transition_times(model: &ModelSpec, cfg: &McConfig, from: &[f64], to: &[f64]) -> Result<McEstimate> {
    if from.len() != to.len() || from == to {
        return Err(Error::InvalidInput("from and to must be distinct points of equal dimension".into()));
    }
    let r2 = cfg.stop_radius * cfg.stop_radius;
    let to = to.to_vec();
    let stop = move |x: &[f64]| x.iter().zip(&to).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2;
    estimate(sample_first_passage(model, cfg, from, stop)?)
}

/// Mean first time at which `U(X) - U(from) >= level`.
pub fn sample_level_exit_times(model: &ModelSpec, cfg: &McConfig, from: &[f64], level: f64) -> Result<McEstimate> {
    let u0 = model.potential(from)?;
    let stop = |x: &[f64]| model.potential(x).map_or(true, |u| u - u0 >= level);
    estimate(sample_first_passage(model, cfg, from, stop)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommittorEstimate {
    pub fraction: f64,
    pub hits: usize,
    pub n: usize,
    /// Trajectories that reached neither side within `max_steps`.
    pub undecided: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval at 99%.
pub fn wilson_interval(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (k, n) = (hits as f64, n as f64);
    let p = k / n;
    let z2 = Z99 * Z99;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z99 / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Fraction of linearised trajectories `dX = M (X - x*) dt + sqrt(2 eps) sigma(x*) dW`
/// started at `y` that reach `zeta_+ = z_cap` before `zeta_+ = -z_cap`.
pub fn empirical_committor(
    model: &ModelSpec,
    saddle: &SaddleData,
    y: &[f64],
    cfg: &McConfig,
    z_cap: f64,
) -> Result<CommittorEstimate> {
    cfg.validate()?;
    let d = model.dim;
    let sigma = model.sigma(&saddle.x_star);
    let m = &saddle.m_star;
    let amp = (2.0 * cfg.epsilon * cfg.dt).sqrt();
    let run = |k: u64| -> Option<bool> {
        let mut rng = stream(cfg.seed, k);
        let mut w = DVector::from_iterator(d, y.iter().zip(&saddle.x_star).map(|(a, b)| a - b));
        let mut xi = DVector::<f64>::zeros(d);
        let zeta = |w: &DVector<f64>| w.iter().zip(&saddle.n_star).map(|(a, n)| a * n).sum::<f64>() / saddle.cos_theta;
        for _ in 0..cfg.max_steps {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            w += m * &w * cfg.dt + &sigma * &xi * amp;
            let z = zeta(&w);
            if z >= z_cap {
                return Some(true);
            }
            if z <= -z_cap {
                return Some(false);
            }
        }
        None
    };
    let outcomes: Vec<Option<bool>> =
        cfg.pool()?.install(|| (0..cfg.n_samples as u64).into_par_iter().map(run).collect());
    let hits = outcomes.iter().filter(|o| **o == Some(true)).count();
    let undecided = outcomes.iter().filter(|o| o.is_none()).count();
    let n = outcomes.len() - undecided;
    let (ci_low, ci_high) = wilson_interval(hits, n);
    Ok(CommittorEstimate {
        fraction: if n > 0 { hits as f64 / n as f64 } else { f64::NAN },
        hits,
        n,
        undecided,
        ci_low,
        ci_high,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrheniusFit {
    pub delta_v_hat: f64,
    pub log_prefactor_hat: f64,
    pub r2: f64,
    /// `(eps, mean time)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

/// Least squares of `log T` against `1/eps`.
pub fn arrhenius_regression(points: &[(f64, f64)]) -> Result<ArrheniusFit> {
    if points.len() < 3 {
        return Err(Error::InvalidInput("need at least three epsilon values".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| 1.0 / p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidInput("epsilon values must differ".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(ArrheniusFit { delta_v_hat: slope, log_prefactor_hat: intercept, r2, points: points.to_vec() })
}

/// Slowest relaxation time `1 / min |Re mu|` over the spectrum of `Db(x)`.
pub fn relaxation_time(model: &ModelSpec, x: &[f64]) -> Result<f64> {
    let j: DMatrix<f64> = model.jacobian(Field::Drift, x)?;
    let slowest = eigenvalues(&j).iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
    Ok(1.0 / slowest)
}

/// Simulated mean transition times at each `eps`, then the Arrhenius fit.
/// `template.dt` is reduced to `eps/10` where needed.
pub fn arrhenius_fit(
    model: &ModelSpec,
    from: &[f64],
    to: &[f64],
    epsilons: &[f64],
    template: &McConfig,
) -> Result<ArrheniusFit> {
    if epsilons.len() < 3 {
        return Err(Error::InvalidInput("need at least three epsilon values".into()));
    }
    let threshold = METASTABILITY_FACTOR * relaxation_time(model, from)?;
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = McConfig { epsilon: eps, dt: template.dt.min(eps / 10.0), ..template.clone() };
        let est = sample_transition_times(model, &cfg, from, to)?;
        if est.mean < threshold {
            return Err(Error::InsufficientRegime { epsilon: eps, mean_time: est.mean, threshold });
        }
        points.push((eps, est.mean));
    }
    arrhenius_regression(&points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lookup;
    use crate::saddle::{committor, saddle_geometry};
    use rand_distr::{Distribution, Exp};

    fn dw1d() -> ModelSpec {
        lookup("dw1d").unwrap().spec()
    }

    #[test]
    fn dt_guard() {
        assert!(McConfig::new(0.1, 0.02, 10, 1).validate().is_err());
        assert!(McConfig::new(0.05, 0.006, 10, 1).validate().is_err());
        assert!(McConfig::new(0.1, 1e-3, 10, 1).validate().is_ok());
    }

    #[test]
    fn deterministic_across_workers() {
        let m = dw1d();
        let run = |w| {
            let cfg = McConfig { workers: w, ..McConfig::new(0.5, 1e-3, 64, 7) };
            sample_transition_times(&m, &cfg, &[-1.0], &[1.0]).unwrap()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(4));
        assert_eq!(a.times.len(), 64);
    }

    #[test]
    fn hot_run_terminates() {
        let cfg = McConfig::new(5.0, 1e-3, 50, 3);
        let est = sample_transition_times(&dw1d(), &cfg, &[-1.0], &[1.0]).unwrap();
        assert_eq!(est.n, 50);
        assert_eq!(est.censored, 0);
        assert!(est.mean < 4.4429 * (0.25f64 / 5.0).exp());
    }

    #[test]
    fn all_censored() {
        let cfg = McConfig { max_steps: 10, ..McConfig::new(0.05, 1e-3, 8, 1) };
        assert_eq!(sample_transition_times(&dw1d(), &cfg, &[-1.0], &[1.0]).unwrap_err(), Error::AllCensored);
    }

    #[test]
    fn summary_statistics() {
        let e = summarize(vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.median, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(e.censored, 2);
        // tail deviations 0.5 and 1.5
        assert_eq!(e.exp_fit_rate, 1.0);
        assert!(e.ks_pvalue_proxy.is_none());
    }

    #[test]
    fn exponential_sample_passes_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let exp = Exp::new(0.3).unwrap();
        let t: Vec<f64> = (0..5000).map(|_| exp.sample(&mut rng)).collect();
        assert!(exit_time_distribution_check(&t).unwrap() < 0.03);
        let est = summarize(t, 0).unwrap();
        // median-shifted tail of an exponential is again exponential
        assert!((est.exp_fit_rate / 0.3 - 1.0).abs() < 0.1);
    }

    #[test]
    fn uniform_sample_fails_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // on [0, 1) the distance is only about 0.15, so shift away from zero
        let t: Vec<f64> = (0..5000).map(|_| 1.0 + rng.random::<f64>()).collect();
        assert!(exit_time_distribution_check(&t).unwrap() > 0.2);
        assert!(exit_time_distribution_check(&t[..100]).is_err());
    }

    #[test]
    fn wilson_interval_properties() {
        let (lo, hi) = wilson_interval(1000, 2000);
        assert!(lo < 0.5 && hi > 0.5);
        assert!((0.5 - lo - (hi - 0.5)).abs() < 1e-15);
        let (lo, hi) = wilson_interval(0, 100);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.1);
    }

    #[test]
    fn regression_recovers_exact_data() {
        let pts: Vec<(f64, f64)> = [0.07f64, 0.09, 0.12].iter().map(|&e| (e, 4.4429 * (0.25 / e).exp())).collect();
        let f = arrhenius_regression(&pts).unwrap();
        assert!((f.delta_v_hat - 0.25).abs() < 1e-12);
        assert!((f.log_prefactor_hat - 4.4429f64.ln()).abs() < 1e-10);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regime_guard() {
        let cfg = McConfig::new(0.5, 1e-3, 32, 5);
        let r = arrhenius_fit(&dw1d(), &[-1.0], &[1.0], &[0.5, 0.6, 0.7], &cfg);
        assert!(matches!(r, Err(Error::InsufficientRegime { .. })));
    }

    #[test]
    fn committor_symmetric_start() {
        let m = lookup("dw2d").unwrap().spec();
        let s = saddle_geometry(&m, &[0.0, 0.0]).unwrap();
        let cfg = McConfig::new(0.01, 1e-3, 2000, 9);
        let est = empirical_committor(&m, &s, &[0.0, 0.3], &cfg, 1.0).unwrap();
        assert!(est.ci_low <= 0.5 && 0.5 <= est.ci_high, "{est:?}");
        assert_eq!(est.undecided, 0);
    }

    #[test]
    fn committor_off_centre_matches_analytic() {
        let m = lookup("dw2d").unwrap().spec();
        let s = saddle_geometry(&m, &[0.0, 0.0]).unwrap();
        let cfg = McConfig::new(0.01, 1e-4, 2000, 13);
        let y = [-0.05, 0.0];
        let est = empirical_committor(&m, &s, &y, &cfg, 1.0).unwrap();
        let q = committor(&s, &y, 0.01);
        assert!(est.ci_low <= q && q <= est.ci_high, "{q} not in {est:?}");
        let wider = empirical_committor(&m, &s, &y, &cfg, 2.0).unwrap();
        assert!((wider.fraction - est.fraction).abs() < est.ci_high - est.ci_low);
    }
}
