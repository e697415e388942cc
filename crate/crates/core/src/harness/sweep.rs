use super::{run_virtual, HarnessError, RunReport, Scenario};
use crate::par::{self, Execution};

/// Runs independent virtual-clock scenarios, in parallel when enabled.
/// Results keep the input order.
pub fn run_batch(runs: Vec<(Scenario, Option<f64>)>, execution: Execution) -> Vec<Result<RunReport, HarnessError>> {
    par::map(execution, runs, |(scenario, boundary)| run_virtual(&scenario, boundary))
}

#[derive(Debug, Clone)]
pub struct SustainableRate {
    /// Highest arrival rate found whose p99 meets the SLO.
    pub rate: f64,
    /// The run at `rate`.
    pub report: RunReport,
    pub evaluations: usize,
}

/// Bisects the arrival rate in `[low, high]` for the largest one at which
/// the scenario still meets its SLO. `low` must meet it and `high` must not.
/// Stops once the bracket is narrower than `rel_tol · low`.
pub fn max_sustainable_rate(
    template: &Scenario,
    boundary: Option<f64>,
    mut low: f64,
    mut high: f64,
    rel_tol: f64,
) -> Result<SustainableRate, HarnessError> {
    if !(low > 0.0 && high > low && rel_tol > 0.0) {
        return Err(HarnessError::ConfigInvalid(
            "need 0 < low < high and rel_tol > 0".into(),
        ));
    }
    let at = |rate: f64| {
        let mut s = template.clone();
        s.workload.arrival_rate = rate;
        run_virtual(&s, boundary)
    };
    let mut best = at(low)?;
    let mut evaluations = 1;
    if !best.slo_met {
        return Err(HarnessError::ScenarioFailed(format!(
            "SLO missed at the lower rate {low}"
        )));
    }
    if at(high)?.slo_met {
        return Err(HarnessError::ScenarioFailed(format!(
            "SLO met at the upper rate {high}"
        )));
    }
    evaluations += 1;
    while high - low > rel_tol * low {
        let mid = 0.5 * (low + high);
        let report = at(mid)?;
        evaluations += 1;
        if report.slo_met {
            low = mid;
            best = report;
        } else {
            high = mid;
        }
    }
    Ok(SustainableRate {
        rate: low,
        report: best,
        evaluations,
    })
}
