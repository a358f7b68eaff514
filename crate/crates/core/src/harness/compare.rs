use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::task::make_task;
use super::train::{diffusion_report, train, MetricRow, TrainOutcome};
use crate::attention::{ModelConfig, Variant};
use crate::config::RunConfig;
use crate::diagnostics::DiffusionReport;
use crate::error::{Error, Result};
use crate::report::{render_aligned, sig6};

/// Row label in the `Mode` column, e.g. `QV-Ka (d_ctx = 2 d_head)`.
pub fn mode_label(cfg: &ModelConfig) -> String {
    match cfg.variant {
        Variant::QvKa { d_ctx } if d_ctx == cfg.d_k => "QV-Ka (d_ctx = d_head)".to_string(),
        Variant::QvKa { d_ctx } if d_ctx == 2 * cfg.d_k => "QV-Ka (d_ctx = 2 d_head)".to_string(),
        Variant::QvKa { d_ctx } => format!("QV-Ka (d_ctx = {d_ctx})"),
        v => v.to_string(),
    }
}

/// Row label in the `Crafts` column.
pub fn crafts_label(cfg: &ModelConfig) -> String {
    cfg.positions.label().to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mode: String,
    pub crafts: String,
    pub final_valid_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

pub const SUMMARY_CSV_HEADER: &str = "mode,crafts,final_valid_acc";

impl Comparison {
    /// `# seed=...` provenance line, header and one row per run.
    pub fn summary_csv(&self) -> String {
        let seed = self.runs.first().map_or(0, |r| r.config.train.seed);
        let mut s = format!("# seed={seed}\n{SUMMARY_CSV_HEADER}\n");
        for r in &self.summary {
            writeln!(s, "{},{},{}", r.mode, r.crafts, r.final_valid_acc).unwrap();
        }
        s
    }

    /// Aligned `Mode / Crafts / Valid Accuracy (%)` table.
    pub fn summary_table(&self) -> String {
        let mut rows = vec![[
            "Mode".to_string(),
            "Crafts".to_string(),
            "Valid Accuracy (%)".to_string(),
        ]];
        for r in &self.summary {
            rows.push([
                r.mode.clone(),
                r.crafts.clone(),
                sig6(100.0 * r.final_valid_acc),
            ]);
        }
        render_aligned(&rows)
    }

    pub fn rows_of(&self, name: &str) -> Option<&[MetricRow]> {
        self.runs
            .iter()
            .find(|r| r.config.name == name)
            .map(|r| r.outcome.rows.as_slice())
    }
}

/// Rejects run sets that do not share task, seed and step budget, or that
/// reuse a name.
pub fn check_comparable(runs: &[RunConfig]) -> Result<()> {
    let first = runs
        .first()
        .ok_or_else(|| Error::config("comparison needs at least one config"))?;
    let mut names = HashSet::new();
    for r in runs {
        r.validate()?;
        if !names.insert(r.name.as_str()) {
            return Err(Error::config(format!("duplicate config name {:?}", r.name)));
        }
        if r.task != first.task {
            return Err(Error::Mismatch(format!(
                "{} uses a different task than {}",
                r.name, first.name
            )));
        }
        if r.train.seed != first.train.seed || r.train.steps != first.train.steps {
            return Err(Error::Mismatch(format!(
                "{} differs from {} in seed or steps",
                r.name, first.name
            )));
        }
    }
    Ok(())
}

/// Trains every config on the shared task, up to `jobs` at a time. Output
/// order follows input order.
pub fn compare(runs: &[RunConfig], jobs: usize) -> Result<Comparison> {
    check_comparable(runs)?;
    let data = make_task(&runs[0].task)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TrainOutcome>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= runs.len() {
                    break;
                }
                let result = train(&runs[i].model, &runs[i].train, &data);
                slots.lock().expect("result slots")[i] = Some(result);
            });
        }
    });
    let mut results = Vec::with_capacity(runs.len());
    for (config, slot) in runs.iter().zip(slots.into_inner().expect("result slots")) {
        let outcome = slot.expect("every run executed")?;
        results.push(RunResult {
            config: config.clone(),
            outcome,
        });
    }
    let summary = results
        .iter()
        .map(|r| SummaryRow {
            name: r.config.name.clone(),
            mode: mode_label(&r.config.model),
            crafts: crafts_label(&r.config.model),
            final_valid_acc: r.outcome.final_row().valid_acc,
        })
        .collect();
    Ok(Comparison {
        runs: results,
        summary,
    })
}

/// Side-by-side attention diffusion of two finished runs on their shared
/// validation set. Reports data only; no judgment is made.
pub fn dodm_compare(a: &RunResult, b: &RunResult) -> Result<(DiffusionReport, DiffusionReport)> {
    if a.config.task != b.config.task || a.config.train.seed != b.config.train.seed {
        return Err(Error::Mismatch(format!(
            "{} and {} were not trained on the same task and seed",
            a.config.name, b.config.name
        )));
    }
    let valid = make_task(&a.config.task)?.valid;
    let report = |r: &RunResult| {
        diffusion_report(
            &r.config.name,
            r.outcome.final_row().step,
            &r.config.model,
            &r.outcome.weights,
            &valid,
        )
    };
    Ok((report(a)?, report(b)?))
}
