//! Theory-verification toolkit: exact p-value ratios between the F and
//! cone tests, power simulations across asymptotic regimes, agreement of
//! the FAB and F decisions as the prior becomes diffuse, and the
//! Benjamini-Hochberg step-up rule.

use crate::error::{FabError, Result};
use crate::kernels::t_fab_scaled_projector;
use crate::model::qr_projection;
use crate::nullmc::{cone_quantile_exact, mc_pvalue, NullEnsemble};
use crate::rng::{substream, Purpose};
use crate::special::{betainc_upper, f_quantile};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Rule for the regression dimension as `n` grows.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionRule {
    Fixed { p: usize },
    /// `p = floor(gamma n)` with `gamma` in (0, 1).
    Ratio { gamma: f64 },
}

/// Rule for the signal magnitude `|X beta|`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalRule {
    Fixed { c: f64 },
    /// `c = n^{1/4}`.
    FourthRoot,
}

/// Rule for the cone-direction misspecification. The rates act on the
/// chord `|mu - v/|v||`, converted to the angle via `2 sin(theta/2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleRule {
    /// Correctly specified direction.
    Zero,
    /// Constant angle in radians.
    FixedAngle { theta: f64 },
    /// Chord `n^{-1/4} - a n^{-1/2}`, clamped at zero.
    ChordRate { a: f64 },
    /// Chord `n^{-1/3}`, a representative `o(n^{-1/4})` rate.
    ChordSubFourthRoot,
}

impl AngleRule {
    pub fn theta(&self, n: usize) -> f64 {
        let nf = n as f64;
        match self {
            AngleRule::Zero => 0.0,
            AngleRule::FixedAngle { theta } => *theta,
            AngleRule::ChordRate { a } => {
                let chord = (nf.powf(-0.25) - a * nf.powf(-0.5)).max(0.0);
                2.0 * (0.5 * chord.min(2.0)).asin()
            }
            AngleRule::ChordSubFourthRoot => {
                let chord = nf.powf(-1.0 / 3.0);
                2.0 * (0.5 * chord.min(2.0)).asin()
            }
        }
    }
}

/// One point of the asymptotic-regime grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PowerScenario {
    pub n: usize,
    pub p_rule: DimensionRule,
    pub c_rule: SignalRule,
    pub mis_angle_rule: AngleRule,
    pub sigma2: f64,
    pub alpha: f64,
    pub replicates: usize,
}

impl PowerScenario {
    pub fn dimension(&self) -> Result<usize> {
        let p = match self.p_rule {
            DimensionRule::Fixed { p } => p,
            DimensionRule::Ratio { gamma } => {
                if !(0.0 < gamma && gamma < 1.0) {
                    return Err(FabError::InvalidArgument("gamma must be in (0,1)".into()));
                }
                ((gamma * self.n as f64).floor() as usize).max(1)
            }
        };
        if p == 0 || p >= self.n {
            return Err(FabError::InvalidArgument(format!(
                "dimension rule gives p = {p} outside [1, n)"
            )));
        }
        Ok(p)
    }

    pub fn signal(&self) -> f64 {
        match self.c_rule {
            SignalRule::Fixed { c } => c,
            SignalRule::FourthRoot => (self.n as f64).powf(0.25),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dimension()?;
        if self.signal() < 0.0 {
            return Err(FabError::InvalidArgument("signal must be nonnegative".into()));
        }
        if !(self.sigma2 > 0.0) {
            return Err(FabError::InvalidArgument("sigma2 must be positive".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 0.5) {
            return Err(FabError::InvalidArgument("alpha must be in (0, 1/2)".into()));
        }
        if self.replicates == 0 {
            return Err(FabError::InvalidArgument("replicates must be positive".into()));
        }
        Ok(())
    }
}

/// Which test the power simulation drives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    F,
    Cone,
    /// FAB with the `gamma (X'X)^{-1}` prior centered on the (possibly
    /// misdirected) truth.
    Fab { gamma: f64 },
}

/// Empirical power with a Wilson 95% interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PowerEstimate {
    pub power: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub rejections: usize,
    pub replicates: usize,
}

/// Wilson score interval at z = 1.96.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    let z = 1.959963984540054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Null critical value of the FAB statistic for a prior mean of
/// magnitude `c_prior` lying in the column space, from draws of the
/// sufficient pair. The null law of the pair is frame-invariant, so one
/// critical value serves every replicate of a scenario.
fn fab_null_quantile(
    n: usize,
    p: usize,
    c_prior: f64,
    gamma: f64,
    sigma0_sq: f64,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut vals: Vec<f64> = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::Replicate, i, 1);
            let g1: f64 = rng.sample(rand_distr::StandardNormal);
            let rest_p: f64 = chi_sq(&mut rng, p - 1);
            let perp: f64 = chi_sq(&mut rng, n - p);
            let total = g1 * g1 + rest_p + perp;
            let align = c_prior * g1 / total.sqrt();
            let resid = perp / total;
            t_fab_scaled_projector(n, resid, align, gamma, sigma0_sq).unwrap_or(f64::NAN)
        })
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(FabError::NonFinite("fab null draws".into()));
    }
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let t = (1.0 - alpha) * draws as f64;
    let k = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.ceil() } as usize;
    Ok(vals[k.clamp(1, draws) - 1])
}

fn chi_sq<R: Rng>(rng: &mut R, df: usize) -> f64 {
    if df == 0 {
        return 0.0;
    }
    rand_distr::ChiSquared::new(df as f64)
        .expect("positive df")
        .sample(rng)
}

/// Empirical rejection rate of the chosen test under the scenario.
///
/// Each replicate draws a fresh design with orthonormal columns, places
/// the signal along its first column, and rotates the test direction
/// away by the scenario's misspecification angle (within the column
/// space when p >= 2). The F and cone tests use their exact critical
/// values; the FAB test uses a Monte Carlo critical value shared across
/// replicates, which is valid because its null law does not depend on
/// the realized design.
pub fn power_simulation(scn: &PowerScenario, kind: TestKind, seed: u64) -> Result<PowerEstimate> {
    scn.validate()?;
    let n = scn.n;
    let p = scn.dimension()?;
    let c = scn.signal();
    let sigma = scn.sigma2.sqrt();
    let theta = scn.mis_angle_rule.theta(n);

    let f_crit = f_quantile(p as f64, (n - p) as f64, 1.0 - scn.alpha)?;
    let cone_crit = cone_quantile_exact(n, scn.alpha)?;
    let fab_setup = match kind {
        TestKind::Fab { gamma } => Some((
            gamma,
            fab_null_quantile(n, p, c, gamma, scn.sigma2, scn.alpha, 4000, mix_seed(seed))?,
        )),
        _ => None,
    };

    let rejections: usize = (0..scn.replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, Purpose::Replicate, rep, 0);
            // random orthonormal columns
            let raw = DMatrix::from_fn(n, p, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let q = raw.qr().q();
            let v_dir = q.column(0).into_owned();
            // test direction at the prescribed angle from the truth
            let mu_dir = if theta == 0.0 {
                v_dir.clone()
            } else {
                let w = if p >= 2 {
                    q.column(1).into_owned()
                } else {
                    // orthogonal completion outside the column space
                    let mut g =
                        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                    let c1 = v_dir.dot(&g);
                    g.axpy(-c1, &v_dir, 1.0);
                    let nm = g.norm();
                    g / nm
                };
                &v_dir * theta.cos() + w * theta.sin()
            };
            let noise =
                DVector::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal));
            let y = &v_dir * c + noise;
            let u = &y / y.norm();
            let reject = match kind {
                TestKind::F => {
                    let upu = (q.transpose() * &u).norm_squared().min(1.0);
                    let resid = 1.0 - upu;
                    if resid <= 1e-12 {
                        true
                    } else {
                        (n - p) as f64 / p as f64 * upu / resid > f_crit
                    }
                }
                TestKind::Cone => u.dot(&mu_dir) > cone_crit,
                TestKind::Fab { gamma } => {
                    let (_, crit) = fab_setup.expect("initialized above");
                    let resid = (1.0 - (q.transpose() * &u).norm_squared()).clamp(0.0, 1.0);
                    let align = c * u.dot(&mu_dir);
                    match t_fab_scaled_projector(n, resid, align, gamma, scn.sigma2) {
                        Ok(t) => t > crit,
                        Err(_) => false,
                    }
                }
            };
            reject as usize
        })
        .sum();

    let (lo, hi) = wilson_interval(rejections, scn.replicates);
    Ok(PowerEstimate {
        power: rejections as f64 / scn.replicates as f64,
        wilson_lo: lo,
        wilson_hi: hi,
        rejections,
        replicates: scn.replicates,
    })
}

fn mix_seed(seed: u64) -> u64 {
    crate::rng::mix(&[seed, 0x9e37])
}

/// Exact p-value ratio of the F test to the cone test for observations
/// lying in the plane of the test direction, plus the closed-form lower
/// bound `(4/(n-p)) (c/(1-c))^{(p-1)/2}`.
///
/// The squared coordinates of a uniform direction are Dirichlet with
/// symmetric 1/2 weights, and the relevant sums aggregate to Beta laws:
/// ratio = P(B(p/2,(n-p)/2) > c) / ((1/2) P(B(1/2,(n-1)/2) > c)).
pub fn pvalue_ratio_exact(n: usize, p: usize, c: f64) -> Result<(f64, f64)> {
    if p < 1 || p >= n {
        return Err(FabError::InvalidArgument("need 1 <= p < n".into()));
    }
    if !(0.0 < c && c < 1.0) {
        return Err(FabError::InvalidArgument("c must be inside (0,1)".into()));
    }
    let nf = n as f64;
    let pf = p as f64;
    let p_f = betainc_upper(0.5 * pf, 0.5 * (nf - pf), c)?;
    let p_c = 0.5 * betainc_upper(0.5, 0.5 * (nf - 1.0), c)?;
    let ratio = if p_c > 0.0 { p_f / p_c } else { f64::INFINITY };
    // bound computed in log space so c near 1 cannot overflow
    let log_bound = (4.0 / (nf - pf)).ln() + 0.5 * (pf - 1.0) * (c.ln() - (1.0 - c).ln());
    Ok((ratio, log_bound.exp()))
}

/// Monte Carlo F-to-cone p-value ratio on a shared ensemble.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioEstimate {
    pub ratio: f64,
    pub p_f: f64,
    pub p_c: f64,
    pub count_f: usize,
    pub count_c: usize,
    /// Delta-method standard error of the ratio (independence
    /// approximation; conservative for positively correlated counts).
    pub combined_se: f64,
}

/// Both Monte Carlo p-values and their ratio for an observation under
/// the design's F test and the cone test along `mu_dir`. A zero cone
/// p-value reports an infinite ratio with both counts retained.
pub fn pvalue_ratio_mc(
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    mu_dir: &DVector<f64>,
    ens: &NullEnsemble,
) -> Result<RatioEstimate> {
    let norm = y.norm();
    if norm == 0.0 {
        return Err(FabError::DegenerateObservation);
    }
    let u = y / norm;
    let proj = qr_projection(design)?;
    let n = y.len();
    let p = proj.rank;
    if p == 0 || p >= n {
        return Err(FabError::DegenerateFTest);
    }
    let basis = proj.col_basis.clone();
    let f_stat = move |v: &DVector<f64>| {
        let upu = (basis.transpose() * v).norm_squared().min(1.0);
        let resid = 1.0 - upu;
        if resid <= 1e-12 {
            // saturated draws are vanishingly unlikely; map to a huge
            // finite value so the ensemble evaluation stays total
            1e300
        } else {
            (n - p) as f64 / p as f64 * upu / resid
        }
    };
    let dir = mu_dir.clone();
    let cone_stat = move |v: &DVector<f64>| v.dot(&dir);
    let pf = mc_pvalue(f_stat, &u, ens)?;
    let pc = mc_pvalue(cone_stat, &u, ens)?;
    let ratio = if pc.count == 0 { f64::INFINITY } else { pf.p_value / pc.p_value };
    let combined_se = if pc.count == 0 || pf.count == 0 {
        f64::INFINITY
    } else {
        ratio
            * ((pf.mc_se / pf.p_value).powi(2) + (pc.mc_se / pc.p_value).powi(2)).sqrt()
    };
    Ok(RatioEstimate {
        ratio,
        p_f: pf.p_value,
        p_c: pc.p_value,
        count_f: pf.count,
        count_c: pc.count,
        combined_se,
    })
}

/// Agreement rate between the FAB and F decisions at matched Monte
/// Carlo critical values, per prior-diffuseness value. Datasets
/// alternate between the null and random alternatives; `prior_c` is the
/// magnitude of the prior mean (0 makes the two tests identical).
pub fn gamma_limit_agreement(
    n: usize,
    p: usize,
    gammas: &[f64],
    replicates: usize,
    seed: u64,
    prior_c: f64,
    alpha: f64,
    sigma0_sq: f64,
) -> Result<Vec<(f64, f64)>> {
    if p < 2 || p >= n {
        return Err(FabError::InvalidArgument("need 2 <= p < n".into()));
    }
    if replicates == 0 || gammas.is_empty() {
        return Err(FabError::InvalidArgument("need replicates and gammas".into()));
    }
    // shared null ensemble of the sufficient pair (resid_sq, align)
    let s_null = 4000usize;
    let null_pairs: Vec<(f64, f64)> = (0..s_null as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::SphereDraw, i, 2);
            let g1: f64 = rng.sample(rand_distr::StandardNormal);
            let rest: f64 = chi_sq(&mut rng, p - 1);
            let perp: f64 = chi_sq(&mut rng, n - p);
            let tot = g1 * g1 + rest + perp;
            (perp / tot, prior_c * g1 / tot.sqrt())
        })
        .collect();

    // observed sufficient pairs: half null, half alternative
    let obs_pairs: Vec<(f64, f64)> = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, Purpose::Replicate, rep, 3);
            let c_r = if rep % 2 == 0 { 0.0 } else { 4.0 * rng.gen::<f64>() };
            let phi = std::f64::consts::PI * rng.gen::<f64>();
            let y1: f64 = c_r * phi.cos() + rng.sample::<f64, _>(rand_distr::StandardNormal);
            let y2: f64 = c_r * phi.sin() + rng.sample::<f64, _>(rand_distr::StandardNormal);
            let rest: f64 = chi_sq(&mut rng, p - 2);
            let perp: f64 = chi_sq(&mut rng, n - p);
            let tot = y1 * y1 + y2 * y2 + rest + perp;
            (perp / tot, prior_c * y1 / tot.sqrt())
        })
        .collect();

    let quantile = |vals: &mut Vec<f64>| -> f64 {
        vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let t = (1.0 - alpha) * vals.len() as f64;
        let k = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.ceil() } as usize;
        vals[k.clamp(1, vals.len()) - 1]
    };

    // F decisions (F is a decreasing function of resid_sq; compare there)
    let mut f_null: Vec<f64> = null_pairs.iter().map(|&(d, _)| -d).collect();
    let f_crit = quantile(&mut f_null);
    let f_decisions: Vec<bool> = obs_pairs.iter().map(|&(d, _)| -d > f_crit).collect();

    let mut out = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if gamma < 0.0 {
            return Err(FabError::InvalidArgument("gamma must be nonnegative".into()));
        }
        let mut tvals: Vec<f64> = null_pairs
            .par_iter()
            .map(|&(d, h)| t_fab_scaled_projector(n, d, h, gamma, sigma0_sq).unwrap_or(f64::NAN))
            .collect();
        if tvals.iter().any(|v| !v.is_finite()) {
            return Err(FabError::NonFinite("fab null draws".into()));
        }
        let crit = quantile(&mut tvals);
        let agree = obs_pairs
            .par_iter()
            .zip(f_decisions.par_iter())
            .map(|(&(d, h), &fd)| {
                let t = t_fab_scaled_projector(n, d, h, gamma, sigma0_sq).unwrap_or(f64::NAN);
                ((t > crit) == fd) as usize
            })
            .sum::<usize>() as f64
            / replicates as f64;
        out.push((gamma, agree));
    }
    Ok(out)
}

/// Benjamini-Hochberg step-up rule: returns the original indices of the
/// rejected hypotheses. Ties are broken by a stable sort on index.
pub fn bh_fdr(pvalues: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if pvalues.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(FabError::InvalidArgument("p-values must lie in [0,1]".into()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(FabError::InvalidArgument("alpha must be in (0,1)".into()));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].partial_cmp(&pvalues[b]).unwrap().then(a.cmp(&b)));
    let mut istar = 0usize;
    for (rank, &idx) in order.iter().enumerate() {
        if pvalues[idx] <= alpha * (rank + 1) as f64 / m as f64 {
            istar = rank + 1;
        }
    }
    let mut rejected: Vec<usize> = order[..istar].to_vec();
    rejected.sort_unstable();
    Ok(rejected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_is_two_when_p_is_one() {
        for &n in &[3usize, 7, 20, 101] {
            for &c in &[0.05, 0.3, 0.77, 0.99] {
                let (ratio, bound) = pvalue_ratio_exact(n, 1, c).unwrap();
                assert!((ratio - 2.0).abs() < 1e-10, "n={n} c={c}: {ratio}");
                assert!(ratio >= bound);
            }
        }
    }

    #[test]
    fn ratio_dominates_bound_on_a_grid() {
        for &n in &[5usize, 10, 50] {
            for p in 2..n {
                for &c in &[0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
                    let (ratio, bound) = pvalue_ratio_exact(n, p, c).unwrap();
                    assert!(
                        ratio >= bound * (1.0 - 1e-12),
                        "n={n} p={p} c={c}: ratio {ratio} < bound {bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn ratio_explodes_near_one() {
        let (ratio, _) = pvalue_ratio_exact(10, 5, 0.999).unwrap();
        assert!(ratio > 1e3, "got {ratio}");
    }

    #[test]
    fn ratio_rejects_bad_inputs() {
        assert!(pvalue_ratio_exact(10, 5, 0.0).is_err());
        assert!(pvalue_ratio_exact(10, 5, 1.0).is_err());
        assert!(pvalue_ratio_exact(10, 10, 0.5).is_err());
    }

    #[test]
    fn bh_plugin_example() {
        let rejected = bh_fdr(&[0.01, 0.02, 0.5], 0.05).unwrap();
        assert_eq!(rejected, vec![0, 1]);
    }

    #[test]
    fn bh_rejects_none_at_unit_pvalues() {
        assert!(bh_fdr(&[1.0, 1.0, 1.0], 0.05).unwrap().is_empty());
    }

    #[test]
    fn bh_matches_brute_force_scan() {
        let mut rng = substream(5, Purpose::Replicate, 0, 0);
        for _ in 0..500 {
            let m = 1 + (rng.gen::<u64>() % 12) as usize;
            let pv: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let alpha = 0.01 + 0.5 * rng.gen::<f64>();
            let got = bh_fdr(&pv, alpha).unwrap();
            // brute force: largest i with p_(i) <= alpha i / m
            let mut sorted: Vec<f64> = pv.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut istar = 0;
            for i in 1..=m {
                if sorted[i - 1] <= alpha * i as f64 / m as f64 {
                    istar = i;
                }
            }
            assert_eq!(got.len(), istar, "pv={pv:?} alpha={alpha}");
            let thresh = if istar > 0 { sorted[istar - 1] } else { -1.0 };
            for &idx in &got {
                assert!(pv[idx] <= thresh);
            }
        }
    }

    #[test]
    fn bh_monotone_in_alpha() {
        let mut rng = substream(6, Purpose::Replicate, 1, 0);
        for _ in 0..200 {
            let pv: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
            let lo = bh_fdr(&pv, 0.05).unwrap();
            let hi = bh_fdr(&pv, 0.2).unwrap();
            for idx in &lo {
                assert!(hi.contains(idx), "rejection lost as alpha grew");
            }
        }
    }

    #[test]
    fn wilson_interval_contains_point() {
        let (lo, hi) = wilson_interval(50, 1000);
        assert!(lo < 0.05 && 0.05 < hi);
        assert!(hi - lo < 0.03);
    }

    #[test]
    fn angle_rules_shrink_with_n() {
        let a = AngleRule::ChordRate { a: 1.0 };
        assert!(a.theta(100) > a.theta(10_000));
        let s = AngleRule::ChordSubFourthRoot;
        // sub-fourth-root chord shrinks faster than the boundary rate
        let boundary = AngleRule::ChordRate { a: 0.0 };
        assert!(s.theta(10_000) < boundary.theta(10_000));
        assert!((AngleRule::Zero.theta(50) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn null_power_is_level_for_all_tests() {
        let scn = PowerScenario {
            n: 40,
            p_rule: DimensionRule::Fixed { p: 4 },
            c_rule: SignalRule::Fixed { c: 0.0 },
            mis_angle_rule: AngleRule::Zero,
            sigma2: 1.0,
            alpha: 0.05,
            replicates: 4000,
        };
        for kind in [TestKind::F, TestKind::Cone, TestKind::Fab { gamma: 0.8 }] {
            let est = power_simulation(&scn, kind, 77).unwrap();
            let se = (0.05_f64 * 0.95 / 4000.0).sqrt();
            assert!(
                (est.power - 0.05).abs() < 4.0 * se,
                "{kind:?}: null rejection rate {} out of range",
                est.power
            );
        }
    }

    #[test]
    fn cone_power_does_not_depend_on_dimension() {
        let base = PowerScenario {
            n: 60,
            p_rule: DimensionRule::Fixed { p: 2 },
            c_rule: SignalRule::Fixed { c: 2.0 },
            mis_angle_rule: AngleRule::Zero,
            sigma2: 1.0,
            alpha: 0.05,
            replicates: 3000,
        };
        let wide = PowerScenario { p_rule: DimensionRule::Fixed { p: 30 }, ..base };
        let a = power_simulation(&base, TestKind::Cone, 31).unwrap();
        let b = power_simulation(&wide, TestKind::Cone, 31).unwrap();
        let se = (a.power * (1.0 - a.power) / 3000.0).sqrt() * 2.0_f64.sqrt();
        assert!((a.power - b.power).abs() < 4.0 * se, "{} vs {}", a.power, b.power);
        assert!(a.power > 0.3, "cone should have real power here: {}", a.power);
    }

    #[test]
    fn agreement_is_exact_with_zero_prior_mean() {
        // gamma = 0 with a zero prior mean is a degenerate corner (the
        // statistic is constant), so the exactness claim starts above it
        let rates =
            gamma_limit_agreement(20, 4, &[0.5, 10.0, 1e6], 400, 9, 0.0, 0.05, 1.0).unwrap();
        for (gamma, agree) in rates {
            assert_eq!(agree, 1.0, "gamma={gamma}");
        }
    }

    #[test]
    fn agreement_grows_toward_one_with_diffuse_priors() {
        let rates = gamma_limit_agreement(
            20,
            4,
            &[0.0, 1.0, 100.0, 1e6],
            600,
            12,
            1.0,
            0.05,
            1.0,
        )
        .unwrap();
        let final_rate = rates.last().unwrap().1;
        assert!(final_rate >= 0.99, "diffuse-limit agreement {final_rate}");
        for w in rates.windows(2) {
            assert!(w[1].1 >= w[0].1 - 0.03, "agreement dipped: {rates:?}");
        }
    }
}
