//! CSV summary sinks for scalar series and tensor distributions.
//!
//! One row per observation; rows for a given tag must arrive with strictly
//! increasing clocks, which the sinks enforce. Distribution rows store nine
//! percentiles `[min, 7%, 16%, 31%, 50%, 69%, 84%, 93%, max]` computed by
//! linear interpolation between closest ranks on the sorted values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The percentile levels of a distribution row, in column order.
pub const PERCENTILE_LEVELS: [f64; 9] = [0.0, 7.0, 16.0, 31.0, 50.0, 69.0, 84.0, 93.0, 100.0];

/// Nine percentiles of a tensor's values by linear interpolation on the
/// sorted data: level `p` sits at rank `p/100 · (n−1)`.
pub fn percentiles<S: Scalar>(tensor: &Tensor<S>) -> Result<[f64; 9]> {
    if tensor.is_empty() {
        return Err(Error::shape(
            "observer.percentiles",
            "cannot summarize an empty tensor".to_string(),
        ));
    }
    let mut sorted: Vec<f64> = tensor.data().iter().map(|v| v.to_f64_lossy()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out = [0.0; 9];
    for (slot, level) in out.iter_mut().zip(PERCENTILE_LEVELS) {
        // Multiply before dividing so integer-valued ranks stay exact.
        let rank = level * (n - 1) as f64 / 100.0;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let frac = rank - lo as f64;
        *slot = sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
    }
    Ok(out)
}

fn check_tag(tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains([',', '\n', '\r']) {
        return Err(Error::Config(format!(
            "summary tag {tag:?} must be non-empty and free of commas/newlines"
        )));
    }
    Ok(())
}

struct CsvSink {
    path: PathBuf,
    writer: BufWriter<File>,
    last_clock: BTreeMap<String, u64>,
}

impl CsvSink {
    fn create(path: &Path, header: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = BufWriter::new(File::create(path)?);
        writeln!(writer, "{header}")?;
        writer.flush()?;
        Ok(CsvSink {
            path: path.to_path_buf(),
            writer,
            last_clock: BTreeMap::new(),
        })
    }

    fn admit(&mut self, clock: u64, tag: &str) -> Result<()> {
        check_tag(tag)?;
        if let Some(&last) = self.last_clock.get(tag) {
            if clock <= last {
                return Err(Error::Config(format!(
                    "summary clock went backwards for {tag:?}: {clock} after {last}"
                )));
            }
        }
        self.last_clock.insert(tag.to_string(), clock);
        Ok(())
    }
}

/// Appends `clock,tag,value` rows.
pub struct ScalarSink(CsvSink);

impl ScalarSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(ScalarSink(CsvSink::create(path, "clock,tag,value")?))
    }

    pub fn path(&self) -> &Path {
        &self.0.path
    }

    pub fn record(&mut self, clock: u64, tag: &str, value: f64) -> Result<()> {
        self.0.admit(clock, tag)?;
        writeln!(self.0.writer, "{clock},{tag},{value}")?;
        self.0.writer.flush()?;
        Ok(())
    }
}

/// Appends `clock,tag,min,p7,p16,p31,p50,p69,p84,p93,max` rows.
pub struct DistributionSink(CsvSink);

impl DistributionSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(DistributionSink(CsvSink::create(
            path,
            "clock,tag,min,p7,p16,p31,p50,p69,p84,p93,max",
        )?))
    }

    pub fn path(&self) -> &Path {
        &self.0.path
    }

    pub fn record<S: Scalar>(&mut self, clock: u64, tag: &str, tensor: &Tensor<S>) -> Result<()> {
        let ps = percentiles(tensor)?;
        self.0.admit(clock, tag)?;
        write!(self.0.writer, "{clock},{tag}")?;
        for p in ps {
            write!(self.0.writer, ",{p}")?;
        }
        writeln!(self.0.writer)?;
        self.0.writer.flush()?;
        Ok(())
    }
}
