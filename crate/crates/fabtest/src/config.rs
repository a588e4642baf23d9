//! Run configuration and its plain-text format.
//!
//! The format is line-oriented `key=value` with dotted section prefixes:
//!
//! * one `key=value` per line, split at the first `=`;
//! * keys and values are trimmed of surrounding whitespace;
//! * blank lines and lines whose first non-space character is `#` are
//!   skipped (no trailing comments);
//! * later assignments override earlier ones;
//! * unknown keys are errors.
//!
//! `render_canonical` emits the configuration with sorted keys and
//! 17-significant-digit floats, and parses back to an identical value.

use crate::error::{FabError, Result};
use crate::multigroup::{LinkingMode, StatisticKind, TestConfig};
use serde::{Deserialize, Serialize};

/// Full batch-run configuration; mirrors the CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub seed: u64,
    pub s_pvalue: usize,
    pub s_quantile: usize,
    pub statistic: StatisticKind,
    pub linking_mode: LinkingMode,
    pub linking_max_iter: usize,
    pub linking_tol: f64,
    pub mixture_draws: usize,
    pub sigma0_sq: Option<f64>,
    pub tn_mu_z: Option<f64>,
    pub tn_tau_sq: Option<f64>,
    pub fallback_f: bool,
    pub pvalue_add_one: bool,
    /// Nuisance column names for ingestion.
    pub nuisance: Vec<String>,
    /// Constraint matrix rows (semicolon-separated rows of
    /// whitespace-separated numbers) for the hypothesis subcommand.
    pub hypothesis_a: Option<String>,
    /// Target vector (whitespace-separated numbers).
    pub hypothesis_v: Option<String>,
    /// Group labels (comma-separated) the hypothesis constrains.
    pub hypothesis_groups: Vec<String>,
    /// Levels at which the report includes step-up rejection sets.
    pub bh_alphas: Vec<f64>,
    /// Include wall-clock timing in the report (breaks byte-identical
    /// reruns; off by default).
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.05,
            seed: 0,
            s_pvalue: 10_000,
            s_quantile: 4_000,
            statistic: StatisticKind::Fab,
            linking_mode: LinkingMode::LeaveOneOut,
            linking_max_iter: 100,
            linking_tol: 1e-8,
            mixture_draws: 100,
            sigma0_sq: None,
            tn_mu_z: None,
            tn_tau_sq: None,
            fallback_f: false,
            pvalue_add_one: false,
            nuisance: Vec::new(),
            hypothesis_a: None,
            hypothesis_v: None,
            hypothesis_groups: Vec::new(),
            bh_alphas: Vec::new(),
            timing: false,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| FabError::Parse(format!("key '{key}': expected a number, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| FabError::Parse(format!("key '{key}': expected an integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| FabError::Parse(format!("key '{key}': expected an integer, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(FabError::Parse(format!("key '{key}': expected true/false, got '{v}'"))),
    }
}

pub fn parse_statistic(v: &str) -> Result<StatisticKind> {
    Ok(match v {
        "fab" => StatisticKind::Fab,
        "afab" => StatisticKind::Afab,
        "igfab" => StatisticKind::Igfab,
        "tnfab" => StatisticKind::Tnfab,
        "f" => StatisticKind::F,
        "cone" => StatisticKind::Cone,
        _ => {
            return Err(FabError::Parse(format!(
                "unknown statistic '{v}' (expected fab|afab|igfab|tnfab|f|cone)"
            )))
        }
    })
}

pub fn statistic_name(s: StatisticKind) -> &'static str {
    match s {
        StatisticKind::Fab => "fab",
        StatisticKind::Afab => "afab",
        StatisticKind::Igfab => "igfab",
        StatisticKind::Tnfab => "tnfab",
        StatisticKind::F => "f",
        StatisticKind::Cone => "cone",
    }
}

pub fn parse_mode(v: &str) -> Result<LinkingMode> {
    Ok(match v {
        "leave_one_out" => LinkingMode::LeaveOneOut,
        "shared" => LinkingMode::Shared,
        _ => {
            return Err(FabError::Parse(format!(
                "unknown linking mode '{v}' (expected leave_one_out|shared)"
            )))
        }
    })
}

pub fn mode_name(m: LinkingMode) -> &'static str {
    match m {
        LinkingMode::LeaveOneOut => "leave_one_out",
        LinkingMode::Shared => "shared",
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse_f64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "mc.s_pvalue" => self.s_pvalue = parse_usize(key, value)?,
            "mc.s_quantile" => self.s_quantile = parse_usize(key, value)?,
            "statistic" => self.statistic = parse_statistic(value)?,
            "linking.mode" => self.linking_mode = parse_mode(value)?,
            "linking.max_iter" => self.linking_max_iter = parse_usize(key, value)?,
            "linking.tol" => self.linking_tol = parse_f64(key, value)?,
            "variance.draws" => self.mixture_draws = parse_usize(key, value)?,
            "variance.sigma0_sq" => self.sigma0_sq = Some(parse_f64(key, value)?),
            "variance.tn_mu_z" => self.tn_mu_z = Some(parse_f64(key, value)?),
            "variance.tn_tau_sq" => self.tn_tau_sq = Some(parse_f64(key, value)?),
            "fallback_f" => self.fallback_f = parse_bool(key, value)?,
            "pvalue.add_one" => self.pvalue_add_one = parse_bool(key, value)?,
            "nuisance" => {
                self.nuisance = split_list(value);
            }
            "hypothesis.a" => self.hypothesis_a = Some(value.to_string()),
            "hypothesis.v" => self.hypothesis_v = Some(value.to_string()),
            "hypothesis.groups" => {
                self.hypothesis_groups = split_list(value);
            }
            "bh.alphas" => {
                let mut out = Vec::new();
                for tok in split_list(value) {
                    out.push(parse_f64(key, &tok)?);
                }
                self.bh_alphas = out;
            }
            "timing" => self.timing = parse_bool(key, value)?,
            _ => return Err(FabError::Parse(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Parses the plain-text format, applying assignments onto defaults.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(FabError::Parse(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if key.is_empty() {
                return Err(FabError::Parse(format!("line {}: empty key", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(FabError::InvalidArgument("alpha must be in (0,1)".into()));
        }
        if self.s_pvalue < 100 || self.s_quantile < 100 {
            return Err(FabError::InvalidArgument("draw counts must be at least 100".into()));
        }
        if self.tn_mu_z.is_some() != self.tn_tau_sq.is_some() {
            return Err(FabError::InvalidArgument(
                "variance.tn_mu_z and variance.tn_tau_sq must be set together".into(),
            ));
        }
        for &a in &self.bh_alphas {
            if !(0.0 < a && a < 1.0) {
                return Err(FabError::InvalidArgument("bh alphas must be in (0,1)".into()));
            }
        }
        Ok(())
    }

    /// Canonical rendering: sorted keys, 17-significant-digit floats.
    /// Parsing the output reproduces this configuration exactly.
    pub fn render_canonical(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        lines.push(format!("alpha={}", fmt_f64(self.alpha)));
        if !self.bh_alphas.is_empty() {
            let toks: Vec<String> = self.bh_alphas.iter().map(|&a| fmt_f64(a)).collect();
            lines.push(format!("bh.alphas={}", toks.join(",")));
        }
        lines.push(format!("fallback_f={}", self.fallback_f));
        if let Some(a) = &self.hypothesis_a {
            lines.push(format!("hypothesis.a={a}"));
        }
        if !self.hypothesis_groups.is_empty() {
            lines.push(format!("hypothesis.groups={}", self.hypothesis_groups.join(",")));
        }
        if let Some(v) = &self.hypothesis_v {
            lines.push(format!("hypothesis.v={v}"));
        }
        lines.push(format!("linking.max_iter={}", self.linking_max_iter));
        lines.push(format!("linking.mode={}", mode_name(self.linking_mode)));
        lines.push(format!("linking.tol={}", fmt_f64(self.linking_tol)));
        lines.push(format!("mc.s_pvalue={}", self.s_pvalue));
        lines.push(format!("mc.s_quantile={}", self.s_quantile));
        if !self.nuisance.is_empty() {
            lines.push(format!("nuisance={}", self.nuisance.join(",")));
        }
        lines.push(format!("pvalue.add_one={}", self.pvalue_add_one));
        lines.push(format!("seed={}", self.seed));
        lines.push(format!("statistic={}", statistic_name(self.statistic)));
        lines.push(format!("timing={}", self.timing));
        lines.push(format!("variance.draws={}", self.mixture_draws));
        if let Some(v) = self.sigma0_sq {
            lines.push(format!("variance.sigma0_sq={}", fmt_f64(v)));
        }
        if let Some(v) = self.tn_mu_z {
            lines.push(format!("variance.tn_mu_z={}", fmt_f64(v)));
        }
        if let Some(v) = self.tn_tau_sq {
            lines.push(format!("variance.tn_tau_sq={}", fmt_f64(v)));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    pub fn to_test_config(&self) -> TestConfig {
        TestConfig {
            alpha: self.alpha,
            seed: self.seed,
            s_pvalue: self.s_pvalue,
            s_quantile: self.s_quantile,
            statistic: self.statistic,
            mixture_draws: self.mixture_draws,
            sigma0_sq_override: self.sigma0_sq,
            tn_override: match (self.tn_mu_z, self.tn_tau_sq) {
                (Some(m), Some(t)) => Some((m, t)),
                _ => None,
            },
            fallback_to_f: self.fallback_f,
            pvalue_add_one: self.pvalue_add_one,
            linking_max_iter: self.linking_max_iter,
            linking_tol: self.linking_tol,
        }
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// 17 significant digits in scientific notation; round-trips any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Parses a whitespace-separated vector literal.
pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        out.push(
            tok.parse::<f64>()
                .map_err(|_| FabError::Parse(format!("vector entry '{tok}' is not a number")))?,
        );
    }
    if out.is_empty() {
        return Err(FabError::Parse("empty vector".into()));
    }
    Ok(out)
}

/// Parses a matrix literal: rows separated by `;`, entries by spaces.
pub fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for row in text.split(';') {
        let row = row.trim();
        if row.is_empty() {
            continue;
        }
        rows.push(parse_vector(row)?);
    }
    if rows.is_empty() {
        return Err(FabError::Parse("empty matrix".into()));
    }
    let w = rows[0].len();
    if rows.iter().any(|r| r.len() != w) {
        return Err(FabError::Parse("matrix rows have unequal lengths".into()));
    }
    Ok(rows)
}
