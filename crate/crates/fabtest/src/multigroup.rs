//! The multigroup testing procedure: hold out the focal group(s), fit
//! the linking model on the rest, build the prior, evaluate the
//! configured statistic at the observed direction, and calibrate it
//! against the prior-specific Monte Carlo null.
//!
//! Exactness of the level rests on one firewall: nothing about the
//! focal observation enters the linking fit, the null ensemble, or the
//! critical value.

use crate::error::{FabError, Result};
use crate::kernels;
use crate::linalg::{cholesky_jitter, log_det};
use crate::linking::{
    estimate_sigma2_reml, fit_ig_moments, fit_linking_iterative, fit_tn_variance,
    residual_summary, LinkingFit, VarianceFit,
};
use crate::model::{project_out_nuisance, GroupData, LinearHypothesis, ReducedProblem};
use crate::nullmc::{
    mc_pvalue_with, mc_quantile, EnsembleCache, TestFlags, TestResult,
};
use crate::rng::{fnv1a, mix, TAG_GROUP_TEST, TAG_PVALUE_ENSEMBLE, TAG_QUANTILE_ENSEMBLE};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Statistic selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    Fab,
    Afab,
    Igfab,
    Tnfab,
    F,
    Cone,
}

/// How linking parameters are estimated across a batch run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkingMode {
    /// Refit without the focal group for every test; preserves the level
    /// exactly.
    LeaveOneOut,
    /// One fit on all usable groups, shared across tests. An
    /// approximation: the focal data leak into the prior.
    Shared,
}

/// Per-test configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestConfig {
    pub alpha: f64,
    pub seed: u64,
    pub s_pvalue: usize,
    pub s_quantile: usize,
    pub statistic: StatisticKind,
    /// Variance draws for mixture statistics.
    pub mixture_draws: usize,
    /// Overrides the pooled residual variance used as sigma0^2.
    pub sigma0_sq_override: Option<f64>,
    /// Overrides the fitted (mu_z, tau_sq) of the scaled-half-normal model.
    pub tn_override: Option<(f64, f64)>,
    /// On linking failure, fall back to the F test instead of erroring.
    pub fallback_to_f: bool,
    /// Use the (1+count)/(1+S) p-value correction.
    pub pvalue_add_one: bool,
    pub linking_max_iter: usize,
    pub linking_tol: f64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            alpha: 0.05,
            seed: 0,
            s_pvalue: 10_000,
            s_quantile: 4_000,
            statistic: StatisticKind::Fab,
            mixture_draws: 100,
            sigma0_sq_override: None,
            tn_override: None,
            fallback_to_f: false,
            pvalue_add_one: false,
            linking_max_iter: 100,
            linking_tol: 1e-8,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(FabError::InvalidArgument("alpha must be in (0,1)".into()));
        }
        if self.s_pvalue < 100 || self.s_quantile < 100 {
            return Err(FabError::InvalidArgument("draw counts must be at least 100".into()));
        }
        if self.mixture_draws == 0 {
            return Err(FabError::InvalidArgument("mixture_draws must be positive".into()));
        }
        Ok(())
    }
}

/// A statistic bound to a fitted prior, with factorizations done once so
/// ensemble evaluation is cheap.
enum Evaluator {
    PointMass {
        chol: Cholesky<f64, Dyn>,
        si_mu: DVector<f64>,
        n: usize,
        approximate: bool,
    },
    Mixture {
        components: Vec<MixtureComponent>,
        n: usize,
    },
    FStat {
        basis: DMatrix<f64>,
        rank: usize,
        n: usize,
    },
    Cone {
        dir: Option<DVector<f64>>,
    },
}

struct MixtureComponent {
    chol: Cholesky<f64, Dyn>,
    si_mu: DVector<f64>,
    qform: f64,
    half_logdet: f64,
}

impl Evaluator {
    /// Statistic value; NaN signals an internal evaluation failure and is
    /// surfaced by the Monte Carlo layer as a per-draw error.
    fn eval(&self, u: &DVector<f64>) -> f64 {
        match self {
            Evaluator::PointMass { chol, si_mu, n, approximate } => {
                let si_u = chol.solve(u);
                let x_sq = u.dot(&si_u);
                if !(x_sq > 0.0) {
                    return f64::NAN;
                }
                let x = x_sq.sqrt();
                let r = u.dot(si_mu) / x;
                let nf = *n as f64;
                if *approximate {
                    0.25 * r * r + nf.sqrt() * r - nf * x.ln()
                } else {
                    match kernels::log_in(*n, r) {
                        Ok(l) => 0.5 * r * r + l - nf * x.ln(),
                        Err(_) => f64::NAN,
                    }
                }
            }
            Evaluator::Mixture { components, n } => {
                let nf = *n as f64;
                let mut terms = Vec::with_capacity(components.len());
                for c in components {
                    let si_u = c.chol.solve(u);
                    let x_sq = u.dot(&si_u);
                    if !(x_sq > 0.0) {
                        return f64::NAN;
                    }
                    let x = x_sq.sqrt();
                    let r = u.dot(&c.si_mu) / x;
                    match kernels::log_in(*n, r) {
                        Ok(l) => terms.push(
                            -c.half_logdet - nf * x.ln() + l + 0.5 * (r * r - c.qform),
                        ),
                        Err(_) => return f64::NAN,
                    }
                }
                crate::special::log_sum_exp(&terms) - (components.len() as f64).ln()
            }
            Evaluator::FStat { basis, rank, n } => {
                let p = *rank;
                let upu = basis.transpose() * u;
                let s = upu.norm_squared().min(1.0);
                let resid = 1.0 - s;
                if resid <= 1e-12 {
                    f64::INFINITY
                } else {
                    (*n - p) as f64 / p as f64 * s / resid
                }
            }
            Evaluator::Cone { dir } => match dir {
                Some(d) => u.dot(d).clamp(-1.0, 1.0),
                None => 0.0,
            },
        }
    }
}

fn point_mass_evaluator(
    mu: &DVector<f64>,
    sigma_base: &DMatrix<f64>,
    sigma0_sq: f64,
    approximate: bool,
) -> Result<Evaluator> {
    let n = mu.len();
    let mut sigma = sigma_base.clone();
    for i in 0..n {
        sigma[(i, i)] += sigma0_sq;
    }
    let (chol, _) = cholesky_jitter(&sigma)?;
    let si_mu = chol.solve(mu);
    Ok(Evaluator::PointMass { chol, si_mu, n, approximate })
}

fn mixture_evaluator(
    mu: &DVector<f64>,
    sigma_base: &DMatrix<f64>,
    variance: &kernels::VarianceModel,
    draws: usize,
    subseed: u64,
) -> Result<Evaluator> {
    let n = mu.len();
    let sigmas = kernels::variance_draws_for(variance, draws, subseed)?;
    let mut components = Vec::with_capacity(sigmas.len());
    for s2 in sigmas {
        let mut sigma = sigma_base.clone();
        for i in 0..n {
            sigma[(i, i)] += s2;
        }
        let (chol, _) = cholesky_jitter(&sigma)?;
        let si_mu = chol.solve(mu);
        let qform = mu.dot(&si_mu);
        let half_logdet = 0.5 * log_det(&chol);
        components.push(MixtureComponent { chol, si_mu, qform, half_logdet });
    }
    Ok(Evaluator::Mixture { components, n })
}

/// Everything the per-group test needs from the held-out groups.
struct FittedPrior {
    fit: LinkingFit,
    sigma0_sq: f64,
}

fn fit_held_out(
    others: &[&GroupData],
    config: &TestConfig,
) -> Result<FittedPrior> {
    // groups with nuisance designs enter the fit in reduced form
    let reduced: Vec<GroupData> = others
        .iter()
        .filter_map(|g| {
            if g.z.is_none() {
                return Some((*g).clone());
            }
            let red = project_out_nuisance(g).ok()?;
            GroupData::new(red.reduced_obs.clone(), red.design.clone(), None, g.group_id.clone())
                .ok()
        })
        .collect();
    let refs: Vec<&GroupData> = reduced.iter().collect();
    if refs.len() < 1 {
        return Err(FabError::LinkingFailed("no usable held-out groups".into()));
    }
    let fit = if refs.len() == 1 {
        // a single held-out group cannot identify Psi; use its OLS-style
        // moments with Psi = 0
        let sigma2 = estimate_sigma2_reml(&refs)?;
        let p = refs[0].p();
        let beta0 = crate::linking::estimate_beta0_gls(&refs, &DMatrix::zeros(p, p), sigma2.max(1e-12))?;
        LinkingFit {
            beta0_hat: beta0.iter().copied().collect(),
            psi_hat: (0..p).map(|i| (0..p).map(|j| if i == j { 0.0 } else { 0.0 }).collect()).collect(),
            sigma2_hat: sigma2,
            variance_fit: None,
            iterations: 1,
            converged: true,
            groups_used: refs.iter().map(|g| g.group_id.clone()).collect(),
        }
    } else {
        fit_linking_iterative(&refs, config.linking_max_iter, config.linking_tol)?
    };
    let sigma0_sq = match config.sigma0_sq_override {
        Some(v) if v > 0.0 => v,
        Some(_) => return Err(FabError::InvalidArgument("sigma0 override must be positive".into())),
        None => {
            if fit.sigma2_hat > 0.0 {
                fit.sigma2_hat
            } else {
                return Err(FabError::LinkingFailed(
                    "pooled residual variance is zero; supply a sigma0 override".into(),
                ));
            }
        }
    };
    let mut fit = fit;
    // attach the variance-model fit needed by the mixture statistics
    match config.statistic {
        StatisticKind::Igfab => {
            let summary = residual_summary(&refs);
            let (alpha, beta) = fit_ig_moments(&summary)?;
            fit.variance_fit = Some(VarianceFit::InverseGamma { alpha, beta });
        }
        StatisticKind::Tnfab => {
            if let Some((mu_z, tau_sq)) = config.tn_override {
                fit.variance_fit =
                    Some(VarianceFit::TruncatedNormal { mu_z, tau_sq, collapsed: false });
            } else {
                let summary = residual_summary(&refs);
                let tn = fit_tn_variance(&summary, sigma0_sq)?;
                fit.variance_fit = Some(VarianceFit::TruncatedNormal {
                    mu_z: tn.mu_z,
                    tau_sq: tn.tau_sq,
                    collapsed: tn.collapsed,
                });
            }
        }
        _ => {}
    }
    Ok(FittedPrior { fit, sigma0_sq })
}

fn build_evaluator(
    red: &ReducedProblem,
    prior: &FittedPrior,
    config: &TestConfig,
    subseed: u64,
) -> Result<Evaluator> {
    let beta0 = prior.fit.beta0();
    let psi = prior.fit.psi();
    match config.statistic {
        StatisticKind::Fab | StatisticKind::Afab => {
            let (mu, cov) = red.prior_moments(&beta0, &psi);
            point_mass_evaluator(&mu, &cov, prior.sigma0_sq, config.statistic == StatisticKind::Afab)
        }
        StatisticKind::Igfab => {
            let (mu, cov) = red.prior_moments(&beta0, &psi);
            let (alpha, beta) = match prior.fit.variance_fit {
                Some(VarianceFit::InverseGamma { alpha, beta }) => (alpha, beta),
                _ => return Err(FabError::LinkingFailed("missing inverse-gamma fit".into())),
            };
            mixture_evaluator(
                &mu,
                &cov,
                &kernels::VarianceModel::InverseGamma { alpha, beta },
                config.mixture_draws,
                subseed,
            )
        }
        StatisticKind::Tnfab => {
            let (mu, cov) = red.prior_moments(&beta0, &psi);
            let (mu_z, tau_sq) = match prior.fit.variance_fit {
                Some(VarianceFit::TruncatedNormal { mu_z, tau_sq, .. }) => (mu_z, tau_sq),
                _ => return Err(FabError::LinkingFailed("missing truncated-normal fit".into())),
            };
            mixture_evaluator(
                &mu,
                &cov,
                &kernels::VarianceModel::ScaledHalfNormal {
                    sigma0_sq: prior.sigma0_sq,
                    mu_z,
                    tau_sq,
                },
                config.mixture_draws,
                subseed,
            )
        }
        StatisticKind::F => {
            let proj = red.projection()?;
            if proj.rank == 0 || proj.rank >= red.n_prime {
                return Err(FabError::DegenerateFTest);
            }
            Ok(Evaluator::FStat { basis: proj.col_basis, rank: proj.rank, n: red.n_prime })
        }
        StatisticKind::Cone => {
            let (mu, _) = red.prior_moments(&beta0, &psi);
            let norm = mu.norm();
            if norm <= 1e-12 {
                Ok(Evaluator::Cone { dir: None })
            } else {
                Ok(Evaluator::Cone { dir: Some(mu / norm) })
            }
        }
    }
}

fn f_evaluator(red: &ReducedProblem) -> Result<Evaluator> {
    let proj = red.projection()?;
    if proj.rank == 0 || proj.rank >= red.n_prime {
        return Err(FabError::DegenerateFTest);
    }
    Ok(Evaluator::FStat { basis: proj.col_basis, rank: proj.rank, n: red.n_prime })
}

fn calibrate(
    evaluator: &Evaluator,
    red: &ReducedProblem,
    config: &TestConfig,
    cache: &EnsembleCache,
    flags: TestFlags,
) -> Result<TestResult> {
    let n = red.n_prime;
    if n < 2 {
        return Err(FabError::InvalidArgument(
            "reduced problem has fewer than two dimensions".into(),
        ));
    }
    let seed_p = mix(&[config.seed, TAG_PVALUE_ENSEMBLE, n as u64]);
    let seed_q = mix(&[config.seed, TAG_QUANTILE_ENSEMBLE, n as u64]);
    let ens_p = cache.sphere(n, config.s_pvalue, seed_p)?;
    let ens_q = cache.sphere(n, config.s_quantile, seed_q)?;
    let stat_fn = |u: &DVector<f64>| evaluator.eval(u);
    let observed = evaluator.eval(&red.u);
    if observed.is_nan() {
        return Err(FabError::NonFinite("observed statistic".into()));
    }
    let pv = mc_pvalue_with(stat_fn, &red.u, &ens_p, config.pvalue_add_one)?;
    let q = mc_quantile(stat_fn, &ens_q, config.alpha)?;
    Ok(TestResult::assemble(observed, pv, q, config.alpha, config.seed, flags))
}

/// Tests one focal group against the rest at level `alpha`.
pub fn fab_test_group(
    groups: &[GroupData],
    focal_index: usize,
    config: &TestConfig,
    cache: &EnsembleCache,
) -> Result<TestResult> {
    config.validate()?;
    if focal_index >= groups.len() {
        return Err(FabError::InvalidArgument("focal index out of range".into()));
    }
    let focal = &groups[focal_index];
    if focal.n() < 2 {
        return Err(FabError::InvalidArgument("focal group needs at least two rows".into()));
    }
    let others: Vec<&GroupData> = groups
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != focal_index)
        .map(|(_, g)| g)
        .collect();
    if others.is_empty() {
        return Err(FabError::InvalidArgument("need at least one non-focal group".into()));
    }
    let red = project_out_nuisance(focal)?;
    test_reduced(&red, &others, config, cache, &focal.group_id)
}

fn test_reduced(
    red: &ReducedProblem,
    others: &[&GroupData],
    config: &TestConfig,
    cache: &EnsembleCache,
    focal_id: &str,
) -> Result<TestResult> {
    let mut flags = TestFlags {
        powerless: red.powerless,
        hypotheses_equivalent: red.hypotheses_equivalent,
        ..TestFlags::default()
    };
    if red.powerless {
        // the reduced design is zero: every invariant statistic is
        // constant, so report the defined p = 1 outcome under the flag
        let constant = Evaluator::Cone { dir: None };
        return calibrate(&constant, red, config, cache, flags);
    }
    let subseed = mix(&[config.seed, TAG_GROUP_TEST, fnv1a(focal_id.as_bytes())]);
    match fit_held_out(others, config) {
        Ok(prior) => {
            let evaluator = build_evaluator(red, &prior, config, subseed)?;
            calibrate(&evaluator, red, config, cache, flags)
        }
        Err(e) => {
            if config.fallback_to_f {
                flags.fallback_f = true;
                let evaluator = f_evaluator(red)?;
                calibrate(&evaluator, red, config, cache, flags)
            } else {
                Err(e)
            }
        }
    }
}

/// Tests a general linear hypothesis on the coefficients of several
/// groups, holding out exactly those groups from the linking fit.
/// Requires the common-variance assumption across the stacked groups.
pub fn fab_test_linear(
    groups: &[GroupData],
    h: &LinearHypothesis,
    config: &TestConfig,
    cache: &EnsembleCache,
) -> Result<TestResult> {
    config.validate()?;
    let mut constrained = Vec::with_capacity(h.group_indices.len());
    for &gi in &h.group_indices {
        let g = groups.get(gi).ok_or_else(|| {
            FabError::InvalidArgument(format!("hypothesis references missing group {gi}"))
        })?;
        if g.z.is_some() {
            return Err(FabError::InvalidArgument(
                "joint hypotheses on groups with nuisance designs are not supported".into(),
            ));
        }
        constrained.push(g);
    }
    let red = reduce_linear_hypothesis_on(&constrained, h)?;
    let others: Vec<&GroupData> = groups
        .iter()
        .enumerate()
        .filter(|(i, _)| !h.group_indices.contains(i))
        .map(|(_, g)| g)
        .collect();
    if others.is_empty() {
        return Err(FabError::InvalidArgument("no held-out groups for the linking fit".into()));
    }
    let id = format!(
        "hypothesis:{}",
        h.group_indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
    );
    test_reduced(&red, &others, config, cache, &id)
}

fn reduce_linear_hypothesis_on(
    constrained: &[&GroupData],
    h: &LinearHypothesis,
) -> Result<ReducedProblem> {
    crate::model::reduce_linear_hypothesis(constrained, h)
}

/// Outcome of one group's test inside a batch run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub group_id: String,
    pub outcome: Result<TestResult>,
}

/// Tests every group. Leave-one-out mode refits the linking model
/// without the focal group each time (level-exact); shared mode fits
/// once on all groups and reuses the estimates (approximate). Output
/// order equals input order; per-group errors are collected, not fatal.
pub fn run_all_groups(
    groups: &[GroupData],
    config: &TestConfig,
    mode: LinkingMode,
    cache: &EnsembleCache,
) -> Vec<RunOutcome> {
    match mode {
        LinkingMode::LeaveOneOut => (0..groups.len())
            .into_par_iter()
            .map(|i| RunOutcome {
                group_id: groups[i].group_id.clone(),
                outcome: fab_test_group(groups, i, config, cache),
            })
            .collect(),
        LinkingMode::Shared => {
            let all: Vec<&GroupData> = groups.iter().collect();
            let shared = fit_held_out(&all, config);
            (0..groups.len())
                .into_par_iter()
                .map(|i| {
                    let focal = &groups[i];
                    let outcome = (|| {
                        config.validate()?;
                        if focal.n() < 2 {
                            return Err(FabError::InvalidArgument(
                                "focal group needs at least two rows".into(),
                            ));
                        }
                        let red = project_out_nuisance(focal)?;
                        let flags = TestFlags {
                            powerless: red.powerless,
                            hypotheses_equivalent: red.hypotheses_equivalent,
                            ..TestFlags::default()
                        };
                        if red.powerless {
                            let constant = Evaluator::Cone { dir: None };
                            return calibrate(&constant, &red, config, cache, flags);
                        }
                        let subseed =
                            mix(&[config.seed, TAG_GROUP_TEST, fnv1a(focal.group_id.as_bytes())]);
                        match &shared {
                            Ok(prior) => {
                                let evaluator = build_evaluator(&red, prior, config, subseed)?;
                                calibrate(&evaluator, &red, config, cache, flags)
                            }
                            Err(e) => {
                                if config.fallback_to_f {
                                    let mut flags = flags;
                                    flags.fallback_f = true;
                                    let evaluator = f_evaluator(&red)?;
                                    calibrate(&evaluator, &red, config, cache, flags)
                                } else {
                                    Err(e.clone())
                                }
                            }
                        }
                    })();
                    RunOutcome { group_id: focal.group_id.clone(), outcome }
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};
    use rand::Rng;

    fn gaussian_group(id: &str, n: usize, p: usize, beta: &[f64], sigma: f64, key: u64) -> GroupData {
        let mut rng = substream(key, Purpose::Replicate, fnv1a(id.as_bytes()), 0);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let b = DVector::from_row_slice(beta);
        let noise = DVector::from_fn(n, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma
        });
        let y = &x * b + noise;
        GroupData::new(y, x, None, id).unwrap()
    }

    fn toy_groups(m: usize, key: u64) -> Vec<GroupData> {
        (0..m)
            .map(|j| gaussian_group(&format!("g{j}"), 12, 2, &[1.0, -0.5], 1.0, key + j as u64))
            .collect()
    }

    #[test]
    fn leave_one_out_uses_only_the_other_group() {
        // with two groups, corrupting group 1 must not change group 0's
        // null distribution machinery, only its prior
        let groups = toy_groups(2, 10);
        let cache = EnsembleCache::new();
        let config = TestConfig { s_pvalue: 400, s_quantile: 400, ..TestConfig::default() };
        let r0 = fab_test_group(&groups, 0, &config, &cache).unwrap();
        let r1 = fab_test_group(&groups, 1, &config, &cache).unwrap();
        assert!(r0.p_value >= 0.0 && r0.p_value <= 1.0);
        assert!(r1.p_value >= 0.0 && r1.p_value <= 1.0);
    }

    #[test]
    fn deterministic_across_runs_and_parallelism() {
        let groups = toy_groups(4, 77);
        let config = TestConfig { s_pvalue: 300, s_quantile: 300, ..TestConfig::default() };
        let a = run_all_groups(&groups, &config, LinkingMode::LeaveOneOut, &EnsembleCache::new());
        let b = run_all_groups(&groups, &config, LinkingMode::LeaveOneOut, &EnsembleCache::new());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.group_id, y.group_id);
            let (rx, ry) = (x.outcome.as_ref().unwrap(), y.outcome.as_ref().unwrap());
            assert_eq!(rx.statistic.to_bits(), ry.statistic.to_bits());
            assert_eq!(rx.p_value.to_bits(), ry.p_value.to_bits());
            assert_eq!(rx.critical_value.to_bits(), ry.critical_value.to_bits());
        }
        // output order equals input order
        for (i, o) in a.iter().enumerate() {
            assert_eq!(o.group_id, format!("g{i}"));
        }
    }

    #[test]
    fn forced_f_fallback_matches_f_statistic_kind() {
        let groups = toy_groups(3, 5);
        let cache = EnsembleCache::new();
        let f_config = TestConfig {
            statistic: StatisticKind::F,
            s_pvalue: 500,
            s_quantile: 500,
            ..TestConfig::default()
        };
        let direct = fab_test_group(&groups, 0, &f_config, &cache).unwrap();
        // fallback triggers when the linking fit cannot run: make the
        // held-out groups unusable by erasing their residual dof
        let mut broken = vec![groups[0].clone()];
        let xsq = DMatrix::identity(2, 2);
        broken.push(GroupData::new(DVector::from_row_slice(&[1.0, 2.0]), xsq, None, "sat").unwrap());
        let fb_config = TestConfig {
            fallback_to_f: true,
            s_pvalue: 500,
            s_quantile: 500,
            ..TestConfig::default()
        };
        let fell_back = fab_test_group(&broken, 0, &fb_config, &cache).unwrap();
        assert!(fell_back.flags.fallback_f);
        // same ensemble seeds, same statistic: identical calibration
        assert_eq!(direct.statistic.to_bits(), fell_back.statistic.to_bits());
        assert_eq!(direct.p_value.to_bits(), fell_back.p_value.to_bits());
    }

    #[test]
    fn full_constraint_hypothesis_equals_group_test() {
        let groups = toy_groups(3, 21);
        let cache = EnsembleCache::new();
        let config = TestConfig { s_pvalue: 500, s_quantile: 500, ..TestConfig::default() };
        let by_group = fab_test_group(&groups, 0, &config, &cache).unwrap();
        let h = LinearHypothesis::new(DMatrix::identity(2, 2), DVector::zeros(2), vec![0]).unwrap();
        let by_hypothesis = fab_test_linear(&groups, &h, &config, &cache).unwrap();
        assert_eq!(by_group.statistic.to_bits(), by_hypothesis.statistic.to_bits());
        assert_eq!(by_group.p_value.to_bits(), by_hypothesis.p_value.to_bits());
        assert_eq!(by_group.decision, by_hypothesis.decision);
    }

    #[test]
    fn powerless_group_is_flagged_with_unit_pvalue() {
        // nuisance spans the focal design; two focal columns to match
        // the covariate count of the other groups
        let n = 6;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { 2.0 });
        let z = DMatrix::from_element(n, 1, 2.0);
        let mut rng = substream(3, Purpose::Replicate, 0, 0);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let focal = GroupData::new(y, x, Some(z), "void").unwrap();
        let mut groups = toy_groups(3, 40);
        groups[0] = focal;
        let cache = EnsembleCache::new();
        let config = TestConfig { s_pvalue: 300, s_quantile: 300, ..TestConfig::default() };
        let r = fab_test_group(&groups, 0, &config, &cache).unwrap();
        assert!(r.flags.powerless);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.decision);
    }

    #[test]
    fn mixture_statistics_run_end_to_end() {
        // heteroskedastic groups so the inverse-gamma moments exist
        let sigmas = [0.4, 0.8, 1.0, 1.6, 2.2, 3.0, 0.6, 1.2];
        let groups: Vec<GroupData> = sigmas
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                gaussian_group(&format!("g{j}"), 14, 2, &[1.0, -0.5], s, 101 + j as u64)
            })
            .collect();
        let cache = EnsembleCache::new();
        for kind in [StatisticKind::Igfab, StatisticKind::Tnfab] {
            let config = TestConfig {
                statistic: kind,
                s_pvalue: 200,
                s_quantile: 200,
                mixture_draws: 25,
                tn_override: if kind == StatisticKind::Tnfab { Some((0.2, 1.3)) } else { None },
                ..TestConfig::default()
            };
            let r = fab_test_group(&groups, 0, &config, &cache).unwrap();
            assert!(r.statistic.is_finite());
            assert!(r.p_value >= 0.0 && r.p_value <= 1.0);
        }
    }

    #[test]
    fn shared_mode_close_to_leave_one_out_with_many_groups() {
        let groups = toy_groups(40, 900);
        let cache = EnsembleCache::new();
        let config = TestConfig { s_pvalue: 2000, s_quantile: 1000, ..TestConfig::default() };
        let loo = run_all_groups(&groups, &config, LinkingMode::LeaveOneOut, &cache);
        let shared = run_all_groups(&groups, &config, LinkingMode::Shared, &cache);
        let mut max_dp: f64 = 0.0;
        for (a, b) in loo.iter().zip(shared.iter()) {
            let (ra, rb) = (a.outcome.as_ref().unwrap(), b.outcome.as_ref().unwrap());
            max_dp = max_dp.max((ra.p_value - rb.p_value).abs());
        }
        assert!(max_dp < 0.08, "shared vs leave-one-out p-values diverged: {max_dp}");
    }
}
