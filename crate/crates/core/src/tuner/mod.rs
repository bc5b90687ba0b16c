//! Template-driven hyperparameter search: the Cartesian product of network
//! and optimization parameter records is rendered into concrete experiment
//! configs, and the resulting jobs run concurrently on a bounded pool of
//! resource slots.

mod slots;
mod template;

pub use slots::{verify_trace, EventKind, SlotGuard, SlotPool, TraceEvent, TraceStats};
pub use template::{placeholders, render, Placeholder, Root, Selector};

use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// A tune run: a config template plus the parameter grid to sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSpec {
    /// Template text, or the path of a file holding it (used when the
    /// string names an existing file).
    pub template: String,
    pub net_paras_list: Vec<Value>,
    pub opt_paras_list: Vec<Value>,
    pub num_slots: usize,
}

impl TuneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TuneSpec = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("tune spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 {
            return Err(Error::Config("num_slots must be at least 1".into()));
        }
        if self.net_paras_list.is_empty() || self.opt_paras_list.is_empty() {
            return Err(Error::Config(
                "net_paras_list and opt_paras_list must not be empty".into(),
            ));
        }
        Ok(())
    }

    /// The template text, reading it from disk when the field names a file.
    pub fn template_text(&self) -> Result<String> {
        if Path::new(&self.template).is_file() {
            Ok(std::fs::read_to_string(&self.template)?)
        } else {
            Ok(self.template.clone())
        }
    }
}

/// One fully-instantiated training instance awaiting a slot.
#[derive(Clone, Debug)]
pub struct TuneJob {
    /// Stable id `net<i>_opt<j>`.
    pub id: String,
    pub net_index: usize,
    pub opt_index: usize,
    /// Rendered config text, or the render error for this combination.
    pub config: std::result::Result<String, String>,
}

/// Cartesian expansion, row-major: the net index is the outer loop. Render
/// failures are carried per job rather than aborting the sweep.
pub fn expand(spec: &TuneSpec) -> Result<Vec<TuneJob>> {
    spec.validate()?;
    let template = spec.template_text()?;
    let mut jobs = Vec::with_capacity(spec.net_paras_list.len() * spec.opt_paras_list.len());
    for (i, net) in spec.net_paras_list.iter().enumerate() {
        for (j, opt) in spec.opt_paras_list.iter().enumerate() {
            jobs.push(TuneJob {
                id: format!("net{i}_opt{j}"),
                net_index: i,
                opt_index: j,
                config: template::render(&template, net, opt).map_err(|e| e.to_string()),
            });
        }
    }
    Ok(jobs)
}

/// Final metrics of one completed job.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobMetrics {
    pub clock: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// One row of the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobReport {
    pub id: String,
    pub ok: bool,
    /// Slot the job ran on; render failures never claim one.
    pub slot: Option<usize>,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<JobMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneReport {
    pub num_slots: usize,
    pub jobs: Vec<JobReport>,
}

impl TuneReport {
    pub fn all_ok(&self) -> bool {
        self.jobs.iter().all(|j| j.ok)
    }
}

/// Runs every job of the sweep through the slot protocol, with `runner`
/// doing the actual work for one job on its claimed slot. Jobs run on their
/// own threads; a failing (or panicking) job is reported and the rest
/// continue. Returns the report and the full scheduling trace.
pub fn run_with<F>(spec: &TuneSpec, runner: F) -> Result<(TuneReport, Vec<TraceEvent>)>
where
    F: Fn(&TuneJob, usize) -> Result<JobMetrics> + Sync,
{
    let jobs = expand(spec)?;
    let pool = SlotPool::new(spec.num_slots)?;
    let reports: Mutex<Vec<Option<JobReport>>> = Mutex::new(vec![None; jobs.len()]);

    std::thread::scope(|scope| {
        for (index, job) in jobs.iter().enumerate() {
            let pool = &pool;
            let reports = &reports;
            let runner = &runner;
            scope.spawn(move || {
                let report = run_one(job, pool, runner);
                reports.lock().unwrap()[index] = Some(report);
            });
        }
    });

    let jobs = reports
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every worker reports"))
        .collect();
    Ok((
        TuneReport {
            num_slots: spec.num_slots,
            jobs,
        },
        pool.trace(),
    ))
}

fn run_one<F>(job: &TuneJob, pool: &SlotPool, runner: &F) -> JobReport
where
    F: Fn(&TuneJob, usize) -> Result<JobMetrics> + Sync,
{
    let start = Instant::now();
    if let Err(render_error) = &job.config {
        return JobReport {
            id: job.id.clone(),
            ok: false,
            slot: None,
            wall_seconds: start.elapsed().as_secs_f64(),
            error: Some(render_error.clone()),
            metrics: None,
        };
    }
    let guard = pool.acquire(&job.id);
    let slot = guard.slot();
    pool.record_start(&job.id);
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| runner(job, slot)));
    let (ok, error, metrics) = match outcome {
        Ok(Ok(metrics)) => (true, None, Some(metrics)),
        Ok(Err(e)) => (false, Some(e.to_string()), None),
        Err(panic) => (false, Some(panic_text(panic)), None),
    };
    pool.record_end(&job.id, ok);
    drop(guard);
    JobReport {
        id: job.id.clone(),
        ok,
        slot: Some(slot),
        wall_seconds: start.elapsed().as_secs_f64(),
        error,
        metrics,
    }
}

fn panic_text(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("job panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("job panicked: {s}")
    } else {
        "job panicked".into()
    }
}

/// The default runner: parses the rendered config as an experiment, trains
/// it, and logs per-job summaries under `run_dir/<job-id>/`. The report is
/// written to `run_dir/report.json`.
pub fn run(spec: &TuneSpec, run_dir: &Path, offline: bool) -> Result<TuneReport> {
    std::fs::create_dir_all(run_dir)?;
    let (report, _trace) = run_with(spec, |job, _slot| {
        let text = job.config.as_ref().expect("render-failed jobs never run");
        let document: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{}: rendered config is not JSON: {e}", job.id)))?;
        let mut config = ExperimentConfig::from_value(document)?;
        config.kid.log_dir = Some(run_dir.join(&job.id).to_string_lossy().into_owned());
        let mut kid = config.build_kid::<f32>(offline)?;
        kid.setup()?;
        let metrics = kid.practice()?;
        Ok(JobMetrics {
            clock: metrics.clock,
            train_loss: metrics.train_loss,
            val_loss: metrics.val_loss,
            val_accuracy: metrics.val_accuracy,
        })
    })?;
    let file = std::fs::File::create(run_dir.join("report.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn spec(nets: usize, opts: usize, num_slots: usize) -> TuneSpec {
        TuneSpec {
            template: r#"{"net": {{ net_paras["id"] }}, "opt": {{ opt_paras["id"] }}}"#.into(),
            net_paras_list: (0..nets).map(|i| json!({"id": i})).collect(),
            opt_paras_list: (0..opts).map(|j| json!({"id": j})).collect(),
            num_slots,
        }
    }

    #[test]
    fn two_by_two_expands_to_four_jobs() {
        let jobs = expand(&spec(2, 2, 2)).unwrap();
        assert_eq!(jobs.len(), 4);
        let ids: Vec<&str> = jobs.iter().map(|j| j.id.as_str()).collect();
        assert_eq!(ids, ["net0_opt0", "net0_opt1", "net1_opt0", "net1_opt1"]);
    }

    #[test]
    fn one_by_one_expands_to_one_job() {
        let jobs = expand(&spec(1, 1, 1)).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].id, "net0_opt0");
        assert_eq!(
            jobs[0].config.as_deref().unwrap(),
            r#"{"net": 0, "opt": 0}"#
        );
    }

    #[test]
    fn three_by_two_enumerates_row_major() {
        let jobs = expand(&spec(3, 2, 1)).unwrap();
        let ids: Vec<&str> = jobs.iter().map(|j| j.id.as_str()).collect();
        assert_eq!(
            ids,
            ["net0_opt0", "net0_opt1", "net1_opt0", "net1_opt1", "net2_opt0", "net2_opt1"]
        );
        assert_eq!((jobs[4].net_index, jobs[4].opt_index), (2, 0));
    }

    #[test]
    fn render_failures_are_carried_per_job() {
        let mut bad = spec(2, 1, 1);
        bad.net_paras_list[1] = json!({"wrong_key": 0});
        let jobs = expand(&bad).unwrap();
        assert!(jobs[0].config.is_ok());
        let err = jobs[1].config.as_ref().unwrap_err();
        assert!(err.contains(r#"net_paras["id"]"#), "{err}");
    }

    #[test]
    fn template_field_may_name_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("template.json");
        std::fs::write(&path, r#"{"n": {{ net_paras["id"] }}}"#).unwrap();
        let mut from_file = spec(1, 1, 1);
        from_file.template = path.to_string_lossy().into_owned();
        let jobs = expand(&from_file).unwrap();
        assert_eq!(jobs[0].config.as_deref().unwrap(), r#"{"n": 0}"#);
    }

    #[test]
    fn run_executes_every_job_within_the_slot_budget() {
        let spec = spec(2, 2, 2);
        let (report, trace) = run_with(&spec, |_job, _slot| {
            std::thread::sleep(std::time::Duration::from_millis(3));
            Ok(JobMetrics {
                clock: 1,
                train_loss: 0.5,
                val_loss: None,
                val_accuracy: None,
            })
        })
        .unwrap();
        assert!(report.all_ok());
        let ids: Vec<&str> = report.jobs.iter().map(|j| j.id.as_str()).collect();
        assert_eq!(ids, ["net0_opt0", "net0_opt1", "net1_opt0", "net1_opt1"]);
        let expected: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        let stats = verify_trace(&trace, 2, &expected).unwrap();
        assert!(stats.peak_concurrency >= 1 && stats.peak_concurrency <= 2);
    }

    #[test]
    fn a_failing_job_does_not_abort_the_others() {
        let spec = spec(2, 2, 2);
        let (report, trace) = run_with(&spec, |job, _slot| {
            if job.id == "net1_opt0" {
                return Err(Error::Config("boom".into()));
            }
            if job.id == "net0_opt1" {
                panic!("kaboom");
            }
            Ok(JobMetrics {
                clock: 1,
                train_loss: 0.1,
                val_loss: None,
                val_accuracy: None,
            })
        })
        .unwrap();
        assert!(!report.all_ok());
        let by_id = |id: &str| report.jobs.iter().find(|j| j.id == id).unwrap();
        assert!(by_id("net0_opt0").ok && by_id("net1_opt1").ok);
        assert!(!by_id("net1_opt0").ok);
        assert!(by_id("net1_opt0").error.as_ref().unwrap().contains("boom"));
        assert!(by_id("net0_opt1").error.as_ref().unwrap().contains("kaboom"));
        // Failed jobs still free their slots: the trace stays coherent.
        let ids: Vec<String> = report.jobs.iter().map(|j| j.id.clone()).collect();
        verify_trace(&trace, 2, &ids).unwrap();
    }

    #[test]
    fn render_failed_jobs_are_reported_without_claiming_a_slot() {
        let mut bad = spec(2, 1, 1);
        bad.net_paras_list[0] = json!({"oops": 1});
        let (report, trace) = run_with(&bad, |_job, _slot| {
            Ok(JobMetrics {
                clock: 0,
                train_loss: 0.0,
                val_loss: None,
                val_accuracy: None,
            })
        })
        .unwrap();
        assert!(!report.jobs[0].ok);
        assert_eq!(report.jobs[0].slot, None);
        assert!(report.jobs[1].ok);
        // Only the good job appears in the trace.
        verify_trace(&trace, 1, &["net1_opt0".to_string()]).unwrap();
    }

    #[test]
    fn empty_grid_or_zero_slots_is_rejected() {
        let mut s = spec(1, 1, 1);
        s.num_slots = 0;
        assert!(expand(&s).is_err());
        let mut s = spec(1, 1, 1);
        s.opt_paras_list.clear();
        assert!(expand(&s).is_err());
    }
}
