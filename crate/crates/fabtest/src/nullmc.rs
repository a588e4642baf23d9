//! Null-distribution engine: uniform-sphere and permutation ensembles,
//! Monte Carlo p-values and critical values, and the analytic cone
//! quantile.
//!
//! Ensembles are deterministic functions of `(seed, S, n, provenance)`;
//! each draw comes from its own counter-keyed substream, so parallel
//! generation reproduces the sequential result bit for bit.

use crate::error::{FabError, Result};
use crate::rng::{substream, Purpose};
use crate::special::betainc_inv;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// How a null ensemble was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Provenance {
    GaussianSphere,
    Permutation,
}

/// A bag of unit vectors representing the null distribution of `u`.
#[derive(Debug, Clone)]
pub struct NullEnsemble {
    pub draws: Vec<DVector<f64>>,
    pub seed: u64,
    pub n: usize,
    pub provenance: Provenance,
}

impl NullEnsemble {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

fn gaussian_unit_vector(n: usize, seed: u64, index: u64) -> DVector<f64> {
    // redraw on a zero norm; cannot happen in practice but keeps the
    // function total and deterministic
    for attempt in 0..16 {
        let mut rng = substream(seed, Purpose::SphereDraw, index, attempt);
        let v = DVector::from_fn(n, |_, _| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        });
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
    unreachable!("sixteen zero-norm gaussian draws");
}

/// `S` i.i.d. uniform unit vectors in dimension `n`, via normalized
/// standard Gaussian draws.
pub fn sample_null_sphere(n: usize, s: usize, seed: u64) -> Result<NullEnsemble> {
    if n < 2 {
        return Err(FabError::InvalidArgument("sphere sampling needs n >= 2".into()));
    }
    if s == 0 {
        return Err(FabError::InvalidArgument("ensemble needs at least one draw".into()));
    }
    let draws: Vec<DVector<f64>> = (0..s as u64)
        .into_par_iter()
        .map(|i| gaussian_unit_vector(n, seed, i))
        .collect();
    Ok(NullEnsemble { draws, seed, n, provenance: Provenance::GaussianSphere })
}

/// `S` normalized random permutations of the observed vector.
pub fn permutation_null(y: &DVector<f64>, s: usize, seed: u64) -> Result<NullEnsemble> {
    let n = y.len();
    if n < 2 {
        return Err(FabError::InvalidArgument("permutation null needs length >= 2".into()));
    }
    if s == 0 {
        return Err(FabError::InvalidArgument("ensemble needs at least one draw".into()));
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    if lo == hi {
        return Err(FabError::DegeneratePermutation);
    }
    let norm = y.norm();
    let base: Vec<f64> = y.iter().map(|&v| v / norm).collect();
    let draws: Vec<DVector<f64>> = (0..s as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::PermutationDraw, i, 0);
            let mut v = base.clone();
            // Fisher-Yates
            for k in (1..v.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=k);
                v.swap(k, j);
            }
            DVector::from_vec(v)
        })
        .collect();
    Ok(NullEnsemble { draws, seed, n, provenance: Provenance::Permutation })
}

/// Monte Carlo p-value fragment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PValueEstimate {
    pub p_value: f64,
    pub mc_se: f64,
    /// Draws with statistic >= the observed one.
    pub count: usize,
    pub s: usize,
}

/// Evaluates the statistic over the ensemble; any non-finite draw value
/// is an error carrying the draw index.
fn eval_over<F>(stat_fn: &F, ens: &NullEnsemble) -> Result<Vec<f64>>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let vals: Vec<f64> = ens.draws.par_iter().map(stat_fn).collect();
    for (i, v) in vals.iter().enumerate() {
        if !v.is_finite() {
            return Err(FabError::NonFiniteStatistic { index: i });
        }
    }
    Ok(vals)
}

/// `p = #{ T(u_s) >= T(u_obs) } / S`, ties counted as exceedances.
/// With `add_one` the small-sample correction `(1 + count)/(1 + S)` is
/// used instead.
pub fn mc_pvalue_with<F>(
    stat_fn: F,
    u_obs: &DVector<f64>,
    ens: &NullEnsemble,
    add_one: bool,
) -> Result<PValueEstimate>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    if u_obs.len() != ens.n {
        return Err(FabError::DimensionMismatch("observation vs ensemble dimension".into()));
    }
    let t_obs = stat_fn(u_obs);
    if t_obs.is_nan() {
        return Err(FabError::NonFinite("observed statistic".into()));
    }
    let vals = eval_over(&stat_fn, ens)?;
    let count = vals.iter().filter(|&&v| v >= t_obs).count();
    let s = vals.len();
    let p = if add_one {
        (1 + count) as f64 / (1 + s) as f64
    } else {
        count as f64 / s as f64
    };
    Ok(PValueEstimate { p_value: p, mc_se: (p * (1.0 - p) / s as f64).sqrt(), count, s })
}

/// `mc_pvalue_with` without the add-one correction (the default).
pub fn mc_pvalue<F>(stat_fn: F, u_obs: &DVector<f64>, ens: &NullEnsemble) -> Result<PValueEstimate>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    mc_pvalue_with(stat_fn, u_obs, ens, false)
}

/// Monte Carlo critical value fragment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuantileEstimate {
    pub value: f64,
    /// Draw count behind the estimate.
    pub s: usize,
    /// Set when `S * alpha < 10`: too few draws beyond the cutoff.
    pub low_draw_warning: bool,
}

/// Empirical `(1 - alpha)` quantile of the statistic over the ensemble,
/// upper order-statistic convention: ascending order statistic number
/// `ceil((1 - alpha) S)`.
pub fn mc_quantile<F>(stat_fn: F, ens: &NullEnsemble, alpha: f64) -> Result<QuantileEstimate>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(FabError::InvalidArgument(format!("alpha must be in (0,1), got {alpha}")));
    }
    let mut vals = eval_over(&stat_fn, ens)?;
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let s = vals.len();
    // ceil((1 - alpha) S), snapping values within 1e-9 of an integer so
    // binary representation noise cannot shift the order statistic
    let t = (1.0 - alpha) * s as f64;
    let k = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.ceil() } as usize;
    let idx = k.clamp(1, s) - 1;
    Ok(QuantileEstimate { value: vals[idx], s, low_draw_warning: (s as f64) * alpha < 10.0 })
}

/// Exact cone-test critical value: `P(u_1 > c) = alpha` for `u` uniform
/// on the sphere in dimension `n`, via the Beta(1/2, (n-1)/2) law of
/// `u_1^2`. Restricted to `alpha < 1/2` where `c > 0`.
pub fn cone_quantile_exact(n: usize, alpha: f64) -> Result<f64> {
    if n < 2 {
        return Err(FabError::InvalidArgument("cone quantile needs n >= 2".into()));
    }
    if !(0.0 < alpha && alpha < 0.5) {
        return Err(FabError::InvalidArgument(format!(
            "cone level must be in (0, 1/2), got {alpha}"
        )));
    }
    let q = betainc_inv(0.5, 0.5 * (n as f64 - 1.0), 1.0 - 2.0 * alpha)?;
    Ok(q.sqrt())
}

/// Flags carried by a test result.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TestFlags {
    /// Reduced design identically zero: power equals level.
    pub powerless: bool,
    /// Observed statistic saturated (e.g. F at +inf).
    pub saturated: bool,
    /// Reduced hypothesis equivalent to (not just implied by) the original.
    pub hypotheses_equivalent: bool,
    /// The F fallback replaced the configured statistic.
    pub fallback_f: bool,
    /// Critical-value ensemble had fewer than 10 draws beyond the cutoff.
    pub low_quantile_draws: bool,
}

/// Outcome of one calibrated test.
#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub mc_se: f64,
    pub critical_value: f64,
    pub alpha: f64,
    pub decision: bool,
    /// Draw count behind the p-value.
    pub s_pvalue: usize,
    /// Draw count behind the critical value.
    pub s_quantile: usize,
    pub seed: u64,
    pub flags: TestFlags,
}

impl TestResult {
    pub fn assemble(
        statistic: f64,
        pv: PValueEstimate,
        q: QuantileEstimate,
        alpha: f64,
        seed: u64,
        mut flags: TestFlags,
    ) -> Self {
        flags.saturated = flags.saturated || statistic.is_infinite();
        flags.low_quantile_draws = flags.low_quantile_draws || q.low_draw_warning;
        TestResult {
            statistic,
            p_value: pv.p_value,
            mc_se: pv.mc_se,
            critical_value: q.value,
            alpha,
            decision: statistic > q.value,
            s_pvalue: pv.s,
            s_quantile: q.s,
            seed,
            flags,
        }
    }
}

/// Cache of raw sphere ensembles keyed by `(n, seed, S)`, shared across
/// groups of equal dimension. Valid because the null law of `u` is
/// prior-free; statistics are re-evaluated per prior.
#[derive(Default)]
pub struct EnsembleCache {
    map: Mutex<HashMap<(usize, u64, usize), Arc<NullEnsemble>>>,
}

impl EnsembleCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sphere(&self, n: usize, s: usize, seed: u64) -> Result<Arc<NullEnsemble>> {
        if let Some(hit) = self.map.lock().unwrap().get(&(n, seed, s)) {
            return Ok(hit.clone());
        }
        let ens = Arc::new(sample_null_sphere(n, s, seed)?);
        self.map
            .lock()
            .unwrap()
            .entry((n, seed, s))
            .or_insert_with(|| ens.clone());
        Ok(ens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_draws_are_unit_and_reproducible() {
        let a = sample_null_sphere(5, 64, 42).unwrap();
        let b = sample_null_sphere(5, 64, 42).unwrap();
        for (x, y) in a.draws.iter().zip(b.draws.iter()) {
            assert!((x.norm() - 1.0).abs() < 1e-12);
            assert_eq!(x.as_slice(), y.as_slice(), "bit-identical ensembles");
        }
        let c = sample_null_sphere(5, 64, 43).unwrap();
        assert_ne!(a.draws[0].as_slice(), c.draws[0].as_slice());
    }

    #[test]
    fn permutation_preserves_norm_and_multiset() {
        let y = DVector::from_row_slice(&[1.0, -1.0, 1.0, -1.0]);
        let ens = permutation_null(&y, 16, 3).unwrap();
        for d in &ens.draws {
            assert!((d.norm() - 1.0).abs() < 1e-12);
            let mut mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!(mags.iter().all(|&m| (m - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn constant_vector_cannot_be_permuted() {
        let y = DVector::from_element(4, 2.5);
        assert!(matches!(
            permutation_null(&y, 4, 0),
            Err(FabError::DegeneratePermutation)
        ));
    }

    #[test]
    fn single_permutation_pvalue_is_zero_or_one() {
        let y = DVector::from_row_slice(&[2.0, -1.0, 0.5]);
        let ens = permutation_null(&y, 1, 9).unwrap();
        let u = &y / y.norm();
        let p = mc_pvalue(|v| v[0], &u, &ens).unwrap();
        assert!(p.p_value == 0.0 || p.p_value == 1.0);
    }

    #[test]
    fn constant_statistic_gives_pvalue_one() {
        let ens = sample_null_sphere(3, 50, 1).unwrap();
        let u = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let p = mc_pvalue(|_| 1.0, &u, &ens).unwrap();
        assert_eq!(p.p_value, 1.0);
        assert_eq!(p.count, 50);
    }

    #[test]
    fn dominating_observation_pvalue_zero_or_corrected() {
        let ens = sample_null_sphere(3, 20, 5).unwrap();
        let u = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        // statistic designed so the observation strictly dominates
        let stat = |v: &DVector<f64>| if (v[0] - 1.0).abs() < 1e-12 { 10.0 } else { v[0] };
        let p = mc_pvalue(stat, &u, &ens).unwrap();
        assert_eq!(p.p_value, 0.0);
        let pc = mc_pvalue_with(stat, &u, &ens, true).unwrap();
        assert!((pc.p_value - 1.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_statistic_reports_draw_index() {
        let ens = sample_null_sphere(3, 10, 7).unwrap();
        let u = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let stat = |v: &DVector<f64>| if v[1] > 0.0 { f64::NAN } else { 0.0 };
        match mc_pvalue(stat, &u, &ens) {
            Err(FabError::NonFiniteStatistic { index }) => assert!(index < 10),
            other => panic!("expected NonFiniteStatistic, got {other:?}"),
        }
    }

    #[test]
    fn quantile_order_statistic_definition() {
        // statistic = first coordinate rank proxy; use a synthetic
        // ensemble with known values by evaluating index-dependent stats
        let ens = sample_null_sphere(2, 10, 11).unwrap();
        // order draws by first coordinate and pick alpha = 1 - k/S
        let mut vals: Vec<f64> = ens.draws.iter().map(|d| d[0]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for k in 1..10 {
            let alpha = 1.0 - k as f64 / 10.0;
            let q = mc_quantile(|d| d[0], &ens, alpha).unwrap();
            assert_eq!(q.value, vals[k - 1], "k = {k}");
        }
    }

    #[test]
    fn quantile_warns_on_few_tail_draws() {
        let ens = sample_null_sphere(2, 50, 13).unwrap();
        let q = mc_quantile(|d| d[0], &ens, 0.05).unwrap();
        assert!(q.low_draw_warning);
        let big = sample_null_sphere(2, 400, 13).unwrap();
        let q2 = mc_quantile(|d| d[0], &big, 0.05).unwrap();
        assert!(!q2.low_draw_warning);
    }

    #[test]
    fn monotone_transform_leaves_pvalue_unchanged() {
        let ens = sample_null_sphere(4, 200, 17).unwrap();
        let u = {
            let v = DVector::from_row_slice(&[0.3, -0.2, 0.8, 0.1]);
            let n = v.norm();
            v / n
        };
        let base = |d: &DVector<f64>| d[0] + 0.5 * d[1];
        let p0 = mc_pvalue(base, &u, &ens).unwrap();
        let p1 = mc_pvalue(|d| (base(d)).exp(), &u, &ens).unwrap();
        let p2 = mc_pvalue(|d| 3.0 * base(d) - 7.0, &u, &ens).unwrap();
        assert_eq!(p0.p_value, p1.p_value);
        assert_eq!(p0.p_value, p2.p_value);
    }

    #[test]
    fn cone_quantile_closed_forms() {
        // circle: c = cos(alpha * pi)
        let c2 = cone_quantile_exact(2, 0.05).unwrap();
        assert!((c2 - (0.05 * std::f64::consts::PI).cos()).abs() < 1e-10, "got {c2}");
        // 2-sphere: u1 uniform on [-1, 1], c = 1 - 2 alpha
        let c3 = cone_quantile_exact(3, 0.05).unwrap();
        assert!((c3 - 0.9).abs() < 1e-10, "got {c3}");
        // boundary: alpha -> 1/2 gives c -> 0+
        let cb = cone_quantile_exact(6, 0.4999999).unwrap();
        assert!(cb > 0.0 && cb < 1e-3);
        assert!(cone_quantile_exact(6, 0.5).is_err());
    }

    #[test]
    fn ensemble_cache_shares_draws() {
        let cache = EnsembleCache::new();
        let a = cache.sphere(4, 32, 5).unwrap();
        let b = cache.sphere(4, 32, 5).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let c = cache.sphere(4, 64, 5).unwrap();
        assert!(!Arc::ptr_eq(&a, &c));
    }
}
