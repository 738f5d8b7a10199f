//! Fuel accounting and controller comparison.
//!
//! Runs that end with a different battery energy than they started with
//! are compared on corrected fuel: the terminal energy difference is priced
//! with the mean MPC costate. The costate is an equivalence factor (W of
//! fuel power per W of battery source power), so the energy difference is
//! converted to fuel mass through the lower heating value.

use std::fmt;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::orchestrator::{charge_sustain_check, RunLog};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("run log has no costate samples")]
    NoCostateSamples,
}

/// `m_fuel + λ̄·(E_0 − E_f)/H_l`: a deficit costs fuel, a surplus refunds it.
pub fn correct_fuel(fuel_kg: f64, mean_lambda: f64, e0: f64, e_final: f64, h_l: f64) -> f64 {
    fuel_kg + mean_lambda * (e0 - e_final) / h_l
}

pub fn mean_lambda(log: &RunLog) -> Result<f64, MetricsError> {
    let samples = log.lambda_samples();
    if samples.is_empty() {
        return Err(MetricsError::NoCostateSamples);
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

pub fn corrected_fuel(log: &RunLog, h_l: f64) -> Result<f64, MetricsError> {
    Ok(correct_fuel(log.fuel_kg, mean_lambda(log)?, log.e0, log.e_final, h_l))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub name: String,
    pub fuel_kg: f64,
    pub corrected_kg: f64,
    pub charge_deviation: f64,
    pub slack_events: usize,
    pub mean_lambda: f64,
    pub p_crit_mean: Option<f64>,
    pub p_crit_min: Option<f64>,
    pub p_crit_max: Option<f64>,
}

pub fn report(log: &RunLog, h_l: f64) -> Result<VariantReport, MetricsError> {
    let lam = mean_lambda(log)?;
    let p: Vec<f64> = log.steps.iter().filter_map(|s| s.p_crit).collect();
    let (p_mean, p_min, p_max) = if p.is_empty() {
        (None, None, None)
    } else {
        (
            Some(p.iter().sum::<f64>() / p.len() as f64),
            p.iter().copied().reduce(f64::min),
            p.iter().copied().reduce(f64::max),
        )
    };
    Ok(VariantReport {
        name: log.variant.name().to_string(),
        fuel_kg: log.fuel_kg,
        corrected_kg: correct_fuel(log.fuel_kg, lam, log.e0, log.e_final, h_l),
        charge_deviation: charge_sustain_check(log),
        slack_events: log.slack_events,
        mean_lambda: lam,
        p_crit_mean: p_mean,
        p_crit_min: p_min,
        p_crit_max: p_max,
    })
}

/// Share of the baseline's excess over the optimum that a controller
/// removes, in percent; `None` when the baseline is already optimal.
pub fn recovery(baseline: f64, controller: f64, optimum: f64) -> Option<f64> {
    let gap = baseline - optimum;
    (gap.abs() > 1e-12).then(|| (baseline - controller) / gap * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub fuel_kg: f64,
    pub corrected_kg: f64,
    pub percent_of_dp: f64,
    pub charge_deviation: f64,
    pub slack_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub dp_kg: f64,
    /// DP first, then the variants in input order.
    pub rows: Vec<ComparisonRow>,
    /// Recovery of the learning variant against the baseline.
    pub recovery: Option<f64>,
}

pub fn compare(reports: &[VariantReport], dp_kg: f64) -> Comparison {
    let mut rows = vec![ComparisonRow {
        name: "dp".into(),
        fuel_kg: dp_kg,
        corrected_kg: dp_kg,
        percent_of_dp: 100.0,
        charge_deviation: 0.0,
        slack_events: 0,
    }];
    rows.extend(reports.iter().map(|r| ComparisonRow {
        name: r.name.clone(),
        fuel_kg: r.fuel_kg,
        corrected_kg: r.corrected_kg,
        percent_of_dp: r.corrected_kg / dp_kg * 100.0,
        charge_deviation: r.charge_deviation,
        slack_events: r.slack_events,
    }));
    let find = |n: &str| reports.iter().find(|r| r.name == n).map(|r| r.corrected_kg);
    let recovery = match (find("baseline"), find("lb_mpc")) {
        (Some(b), Some(l)) => recovery(b, l, dp_kg),
        _ => None,
    };
    Comparison { dp_kg, rows, recovery }
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>14} {:>9} {:>10} {:>6}",
            "variant", "fuel [kg]", "corrected [kg]", "% of DP", "ΔE_b [%]", "slack"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>10.4} {:>14.4} {:>9.2} {:>10.3} {:>6}",
                r.name,
                r.fuel_kg,
                r.corrected_kg,
                r.percent_of_dp,
                r.charge_deviation * 100.0,
                r.slack_events
            )?;
        }
        match self.recovery {
            Some(x) => write!(f, "suboptimality recovered: {x:.1} %"),
            None => write!(f, "suboptimality recovered: n/a"),
        }
    }
}
