//! Active-parameter budgets and growth schedules.
//!
//! Counts exclude biases, router rows and layernorm parameters, and cover only
//! the expandable core block.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{apply_expansion, build_core, ExpansionMethod};
use crate::nn::count_params;
use crate::params::ParamStore;

/// Relative slack allowed between a schedule's final count and its budget.
pub const BUDGET_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StageAction {
    Keep,
    AddExperts(usize),
    Widen(Vec<usize>),
    AddColumn,
    Inject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SolvedDims {
    Plain { hidden: usize },
    Net2Wider { widths: Vec<usize> },
    Moe { granularity: usize, h: usize },
    Progressive { column_width: usize },
    Injection { width: usize },
}

/// Per-stage actions for one method. `actions[0]` is always `Keep`; stage 0
/// is the initial build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthSchedule {
    pub method: ExpansionMethod,
    pub d: usize,
    pub budget: usize,
    pub dims: SolvedDims,
    pub actions: Vec<StageAction>,
}

impl GrowthSchedule {
    pub fn stages(&self) -> usize {
        self.actions.len()
    }

    /// Closed-form weight count of the core after `stage`.
    pub fn expected_params(&self, stage: usize) -> usize {
        let d = self.d;
        let c = stage + 1;
        match &self.dims {
            SolvedDims::Plain { hidden } => 2 * d * hidden,
            SolvedDims::Net2Wider { widths } => 2 * d * widths[stage],
            SolvedDims::Moe { granularity, h } => 2 * d * h * granularity * c,
            SolvedDims::Progressive { column_width: w } => d * w * (2 * c + c * (c - 1) / 2),
            SolvedDims::Injection { width } => (1 + 2 * stage) * 2 * d * width,
        }
    }
}

/// Largest expert hidden width `h` with `2·d·h·g·(N+1) ≤ budget`.
pub fn solve_bottleneck_width(d: usize, budget: usize, granularity: usize, growths: usize) -> Result<usize> {
    if d == 0 || granularity == 0 {
        return Err(Error::InfeasibleBudget("d and granularity must be positive".into()));
    }
    let per_h = 2 * d * granularity * (growths + 1);
    let h = budget / per_h;
    if h == 0 {
        return Err(Error::InfeasibleBudget(format!(
            "budget {budget} is below {per_h}, the cost of h = 1 for d={d}, g={granularity}, N={growths}"
        )));
    }
    Ok(h)
}

fn nearest_width(budget: usize, per_unit: usize, what: &str) -> Result<usize> {
    let w = ((budget as f64) / (per_unit as f64)).round() as usize;
    if w == 0 {
        return Err(Error::InfeasibleBudget(format!("budget {budget} leaves {what} width 0")));
    }
    Ok(w)
}

fn within_tolerance(count: usize, budget: usize) -> bool {
    (count as f64 - budget as f64).abs() <= BUDGET_TOLERANCE * budget as f64
}

/// Solves the dims and per-stage actions so that `method` ends at `budget`
/// after `stages` stages.
pub fn solve_method_dims(method: ExpansionMethod, d: usize, budget: usize, stages: usize) -> Result<GrowthSchedule> {
    if stages == 0 || d == 0 {
        return Err(Error::InfeasibleBudget("stages and d must be positive".into()));
    }
    let growths = stages - 1;
    let (dims, grow) = match method {
        ExpansionMethod::None => (
            SolvedDims::Plain { hidden: nearest_width(budget, 2 * d, "hidden")? },
            StageAction::Keep,
        ),
        ExpansionMethod::Net2wider => {
            let last = nearest_width(budget, 2 * d, "hidden")?;
            let widths: Vec<usize> = (1..=stages)
                .map(|s| ((last * s) as f64 / stages as f64).round() as usize)
                .collect();
            if widths[0] == 0 {
                return Err(Error::InfeasibleBudget(format!(
                    "final width {last} is too small for {stages} equal increments"
                )));
            }
            let sched = GrowthSchedule {
                method,
                d,
                budget,
                actions: std::iter::once(StageAction::Keep)
                    .chain(widths[1..].iter().map(|w| StageAction::Widen(vec![*w])))
                    .collect(),
                dims: SolvedDims::Net2Wider { widths },
            };
            return check(sched);
        }
        ExpansionMethod::DynamicMoe { granularity } => (
            SolvedDims::Moe { granularity, h: solve_bottleneck_width(d, budget, granularity, growths)? },
            StageAction::AddExperts(granularity),
        ),
        ExpansionMethod::Progressive => {
            let c = stages;
            (
                SolvedDims::Progressive { column_width: nearest_width(budget, d * (2 * c + c * (c - 1) / 2), "column")? },
                StageAction::AddColumn,
            )
        }
        ExpansionMethod::Injection => (
            SolvedDims::Injection { width: nearest_width(budget, 2 * d * (1 + 2 * growths), "branch")? },
            StageAction::Inject,
        ),
    };
    let mut actions = vec![StageAction::Keep];
    actions.extend(std::iter::repeat_n(grow, growths));
    check(GrowthSchedule { method, d, budget, dims, actions })
}

fn check(sched: GrowthSchedule) -> Result<GrowthSchedule> {
    let last = sched.expected_params(sched.stages() - 1);
    if !within_tolerance(last, sched.budget) {
        return Err(Error::InfeasibleBudget(format!(
            "{} reaches {last} parameters, more than {:.0}% from budget {}",
            sched.method.label(),
            BUDGET_TOLERANCE * 100.0,
            sched.budget
        )));
    }
    Ok(sched)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub stage: usize,
    pub method: String,
    pub params: usize,
    pub violation: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BudgetReport {
    pub rows: Vec<ReportRow>,
}

impl BudgetReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violation).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "method", "params", "violation"])?;
        for r in &self.rows {
            out.write_record([
                r.stage.to_string(),
                r.method.clone(),
                r.params.to_string(),
                (r.violation as u8).to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Builds the core at every stage of `schedule` in a scratch store and
/// records exact weight counts. A stage is flagged when it exceeds the budget
/// by more than the tolerance; the final stage is also flagged when it falls
/// short by more than the tolerance.
pub fn verify_schedule(schedule: &GrowthSchedule, seed: u64) -> Result<BudgetReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut core = build_core(schedule, &mut store, "core", true, &mut rng)?;
    let label = schedule.method.label();
    let limit = schedule.budget as f64 * (1.0 + BUDGET_TOLERANCE);
    let last = schedule.stages() - 1;
    let mut report = BudgetReport::default();
    for stage in 0..schedule.stages() {
        let params = if stage == 0 {
            count_params(&core, &store, false, false)
        } else {
            apply_expansion(schedule, &mut core, &mut store, stage, seed.wrapping_add(stage as u64))?
        };
        let violation = params as f64 > limit || (stage == last && !within_tolerance(params, schedule.budget));
        report.rows.push(ReportRow { stage, method: label.clone(), params, violation });
    }
    Ok(report)
}
