//! Implementations behind the `train`, `tune`, and `visualize` subcommands.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde_json::Value;

use akid::config::ExperimentConfig;
use akid::observer;
use akid::tuner::{self, TuneSpec};

/// Parses `section.key=value` (an optional leading `--` is tolerated) into
/// a path/value pair for [`ExperimentConfig::apply_override`].
fn split_override(raw: &str) -> Result<(&str, &str)> {
    let token = raw.strip_prefix("--").unwrap_or(raw);
    let (path, value) = token
        .split_once('=')
        .with_context(|| format!("override {raw:?} is not of the form section.key=value"))?;
    if path.is_empty() {
        bail!("override {raw:?} has an empty path");
    }
    Ok((path, value))
}

/// Reads the config file, layers CLI flags and `--section.key=value`
/// overrides onto the document, and validates the result.
fn load_config(
    config_path: &Path,
    log_dir: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let mut document: Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not JSON", config_path.display()))?;
    for raw in overrides {
        let (path, value) = split_override(raw)?;
        ExperimentConfig::apply_override(&mut document, path, value)
            .with_context(|| format!("applying override {raw:?}"))?;
    }
    if let Some(seed) = seed {
        ExperimentConfig::apply_override(&mut document, "seed", &seed.to_string())?;
    }
    if let Some(dir) = log_dir {
        // Encode as a JSON string literal so a numeric-looking path stays a path.
        let literal = Value::String(dir.display().to_string()).to_string();
        ExperimentConfig::apply_override(&mut document, "kid.log_dir", &literal)?;
    }
    let config = ExperimentConfig::from_value(document)
        .with_context(|| format!("config {}", config_path.display()))?;
    Ok(config)
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Builds the student from the config and trains it to its stop rule.
pub fn cmd_train(
    config_path: &Path,
    log_dir: Option<&Path>,
    seed: Option<u64>,
    offline: bool,
    overrides: &[String],
) -> Result<()> {
    let config = load_config(config_path, log_dir, seed, overrides)?;
    let mut kid = config.build_kid::<f32>(offline)?;
    kid.setup()?;
    let metrics = kid.practice()?;
    println!(
        "final: clock={} train_loss={:.6} train_accuracy={}",
        metrics.clock,
        metrics.train_loss,
        fmt_opt(metrics.train_eval),
    );
    if metrics.val_loss.is_some() || metrics.val_accuracy.is_some() {
        println!(
            "validation: loss={} accuracy={}",
            fmt_opt(metrics.val_loss),
            fmt_opt(metrics.val_accuracy),
        );
    }
    if let Some(dir) = &config.kid.log_dir {
        println!("log dir: {dir}");
    }
    Ok(())
}

fn default_run_dir() -> PathBuf {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("results").join(format!("tune-{stamp}"))
}

/// Runs the sweep described by a tune spec and prints the report table.
/// Returns an error (nonzero exit) when any job failed, after the table
/// and `report.json` are already out.
pub fn cmd_tune(spec_path: &Path, log_dir: Option<&Path>, offline: bool) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading tune spec {}", spec_path.display()))?;
    let mut spec = TuneSpec::from_json(&text)?;
    // A relative template path in the spec is resolved against the spec
    // file's directory, not whatever directory the tool runs from.
    if !Path::new(&spec.template).is_file() {
        if let Some(dir) = spec_path.parent() {
            let sibling = dir.join(&spec.template);
            if sibling.is_file() {
                spec.template = sibling.display().to_string();
            }
        }
    }
    let run_dir = log_dir.map_or_else(default_run_dir, Path::to_path_buf);
    let report = tuner::run(&spec, &run_dir, offline)?;
    println!(
        "{:<12} {:<6} {:>4} {:>8} {:>7} {:>10} {:>10} {:>8}",
        "job", "ok", "slot", "seconds", "clock", "train_loss", "val_loss", "val_acc"
    );
    for job in &report.jobs {
        let slot = job.slot.map_or_else(|| "-".to_string(), |s| s.to_string());
        let (clock, train_loss, val_loss, val_acc) = match &job.metrics {
            Some(m) => (
                m.clock.to_string(),
                format!("{:.4}", m.train_loss),
                fmt_opt(m.val_loss),
                fmt_opt(m.val_accuracy),
            ),
            None => ("-".into(), "-".into(), "-".into(), "-".into()),
        };
        println!(
            "{:<12} {:<6} {:>4} {:>8.2} {:>7} {:>10} {:>10} {:>8}",
            job.id,
            if job.ok { "ok" } else { "FAILED" },
            slot,
            job.wall_seconds,
            clock,
            train_loss,
            val_loss,
            val_acc,
        );
        if let Some(error) = &job.error {
            let first = error.lines().next().unwrap_or("");
            println!("{:<12} ^ {first}", "");
        }
    }
    println!("report: {}", run_dir.join("report.json").display());
    let failed = report.jobs.iter().filter(|j| !j.ok).count();
    if failed > 0 {
        bail!("{failed} of {} jobs failed", report.jobs.len());
    }
    Ok(())
}

/// What `visualize` should render from a trained checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Visualization {
    /// One tiled filter image per convolution layer.
    Filters,
    /// One tiled feature-map image per image-shaped layer output.
    Activations,
    /// The block graph in DOT format.
    Graph,
}

/// Restores a checkpoint into the configured model and renders the
/// requested view into `out_dir`.
pub fn cmd_visualize(
    config_path: &Path,
    checkpoint: &Path,
    what: Visualization,
    out_dir: &Path,
    offline: bool,
) -> Result<()> {
    let config = load_config(config_path, None, None, &[])?;
    let mut kid = config.build_kid::<f32>(offline)?;
    kid.setup()?;
    kid.load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let clock = kid.clock();
    let written = match what {
        Visualization::Filters => observer::visualize_filters(kid.brain(), out_dir, clock)?,
        Visualization::Activations => {
            let (data, labels) = kid.sensor().setup_batch()?;
            observer::visualize_activation(kid.brain_mut(), &[data, labels], out_dir, clock)?
        }
        Visualization::Graph => {
            let dot = observer::export_dot(kid.brain());
            let path = out_dir.join(format!("{}.dot", kid.brain().name()));
            std::fs::write(&path, dot)?;
            vec![path]
        }
    };
    if written.is_empty() {
        bail!("nothing to render: the model has no matching layers");
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_split_at_the_first_equals() {
        let (path, value) = split_override("--kongfu.base_lr=0.01").unwrap();
        assert_eq!(path, "kongfu.base_lr");
        assert_eq!(value, "0.01");
        let (path, value) = split_override("source.path=a=b").unwrap();
        assert_eq!(path, "source.path");
        assert_eq!(value, "a=b");
    }

    #[test]
    fn overrides_without_equals_are_rejected() {
        assert!(split_override("--kid.max_steps").is_err());
        assert!(split_override("=5").is_err());
    }
}
