//! Machine-readable reports and the synthetic-data generator.
//!
//! JSON output uses struct-declaration key order and serializes every
//! float with 17 significant digits, so identical runs produce
//! byte-identical files that other implementations can diff. Non-finite
//! values appear as `null` with the information carried by flags.

use crate::config::{fmt_f64, RunConfig};
use crate::error::{FabError, Result};
use crate::linking::LinkingFit;
use crate::nullmc::TestResult;
use crate::rng::{substream, Purpose};
use rand::Rng;
use rand_distr::Distribution;
use serde::Serialize;
use std::io::Write;

/// serde_json formatter pinning floats to 17 significant digits.
struct SigDigits17;

impl serde_json::ser::Formatter for SigDigits17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{:.16e}", value)
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{:.16e}", value as f64)
    }
}

/// Serializes any report value with the pinned float format.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigits17);
    value
        .serialize(&mut ser)
        .map_err(|e| FabError::Io(format!("serialize: {e}")))?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| FabError::Io(e.to_string()))
}

pub fn write_json<T: Serialize>(value: &T, path: &std::path::Path) -> Result<()> {
    let text = to_json_string(value)?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| FabError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// One group's entry in the batch report.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub n: usize,
    pub result: Option<TestResult>,
    pub error: Option<String>,
}

/// Step-up rejection set at one level.
#[derive(Debug, Clone, Serialize)]
pub struct BhReport {
    pub alpha: f64,
    pub rejected: Vec<String>,
    pub proportion_rejected: f64,
}

/// Top-level report for `test` and `hypothesis` runs.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub version: u32,
    pub kind: String,
    /// Canonical key=value text; re-running with exactly this
    /// configuration reproduces the report byte for byte.
    pub config_kv: String,
    pub config: RunConfig,
    pub groups: Vec<GroupReport>,
    /// Informational fit on all usable groups (the per-test fits in
    /// leave-one-out mode each exclude their focal group).
    pub linking_reference: Option<LinkingFit>,
    pub bh: Vec<BhReport>,
    /// Wall-clock milliseconds; populated only when timing is enabled,
    /// since it breaks byte-identical reruns.
    pub timing_ms: Option<f64>,
}

/// Plot-ready flat table: group, statistic, p_value, decision.
pub fn flat_csv(groups: &[GroupReport]) -> String {
    let mut out = String::from("group,statistic,p_value,decision\n");
    for g in groups {
        match &g.result {
            Some(r) => {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    g.group,
                    fmt_f64(r.statistic),
                    fmt_f64(r.p_value),
                    r.decision
                ));
            }
            None => {
                out.push_str(&format!("{},,,\n", g.group));
            }
        }
    }
    out
}

/// Shape parameters of the synthetic multigroup dataset.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SynthConfig {
    /// Number of groups.
    pub groups: usize,
    /// Target mean group size.
    pub mean_n: f64,
    /// Exact number of groups with fewer than 10 rows.
    pub small_groups: usize,
    /// Number of focal factor levels (one-hot columns).
    pub factor_levels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { groups: 751, mean_n: 20.0, small_groups: 34, factor_levels: 4 }
    }
}

/// Generates a multigroup CSV with the configured shape: a one-hot
/// focal factor, four nuisance covariates (female, ses, par_ed, lang),
/// per-group coefficients drawn around a common mean, and group error
/// variances from a scaled-half-normal law. Deterministic in the seed.
pub fn generate_synth(cfg: &SynthConfig, seed: u64) -> Result<String> {
    if cfg.groups < 2 || cfg.factor_levels < 2 {
        return Err(FabError::InvalidArgument("need >= 2 groups and >= 2 levels".into()));
    }
    if cfg.small_groups >= cfg.groups {
        return Err(FabError::InvalidArgument("small_groups must be below groups".into()));
    }
    let l = cfg.factor_levels;
    let mut header = String::from("group,y");
    for k in 0..l {
        header.push_str(&format!(",eth{}", k + 1));
    }
    header.push_str(",female,ses,par_ed,lang\n");
    let mut out = header;

    // small groups spread evenly through the file
    let stride = (cfg.groups / cfg.small_groups.max(1)).max(1);
    let mut small_left = cfg.small_groups;
    // mean of the small sizes is about 6.5; solve for the big mean
    let big_mean = ((cfg.groups as f64) * cfg.mean_n - 6.5 * cfg.small_groups as f64)
        / (cfg.groups - cfg.small_groups) as f64;

    // level probabilities proportional to powers of two: skewed so small
    // groups often miss levels, exercising rank-deficient designs
    let mut probs: Vec<f64> = (0..l).map(|k| 2.0_f64.powi(k as i32)).collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }

    // common coefficient mean, cycling signs
    let beta0: Vec<f64> = (0..l)
        .map(|k| if k % 2 == 0 { 0.5 - 0.1 * k as f64 } else { -0.4 + 0.1 * k as f64 })
        .collect();
    let alpha_nuis = [-0.1, 0.8, 0.15, -0.3];

    for j in 0..cfg.groups {
        let mut rng = substream(seed, Purpose::Synth, j as u64, 0);
        let small = small_left > 0 && j % stride == 0;
        if small {
            small_left -= 1;
        }
        let n_j = if small {
            4 + (rng.gen::<u64>() % 6) as usize // 4..=9
        } else {
            let pois = rand_distr::Poisson::new(big_mean.max(10.5))
                .map_err(|e| FabError::InvalidArgument(e.to_string()))?;
            let mut v = pois.sample(&mut rng) as usize;
            if v < 10 {
                v = 10;
            }
            v
        };
        // group coefficients and variance
        let beta_j: Vec<f64> = beta0
            .iter()
            .map(|&b| b + 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let z_j: f64 = 0.2 + 1.3_f64.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let sigma_j = z_j.abs().max(1e-3).sqrt();

        for _ in 0..n_j {
            let roll: f64 = rng.gen();
            let mut level = l - 1;
            let mut acc = 0.0;
            for (k, &p) in probs.iter().enumerate() {
                acc += p;
                if roll < acc {
                    level = k;
                    break;
                }
            }
            let female = (rng.gen::<f64>() < 0.5) as u32;
            let ses: f64 = rng.sample(rand_distr::StandardNormal);
            let par_ed = 1 + (rng.gen::<u64>() % 5) as u32;
            let lang = (rng.gen::<f64>() < 0.2) as u32;
            let noise: f64 = sigma_j * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let y = beta_j[level]
                + alpha_nuis[0] * female as f64
                + alpha_nuis[1] * ses
                + alpha_nuis[2] * par_ed as f64
                + alpha_nuis[3] * lang as f64
                + noise;
            out.push_str(&format!("g{:04},{:.6}", j + 1, y));
            for k in 0..l {
                out.push_str(if k == level { ",1" } else { ",0" });
            }
            out.push_str(&format!(",{female},{ses:.6},{par_ed},{lang}\n"));
        }
    }
    Ok(out)
}
