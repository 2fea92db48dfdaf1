use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One record per training step. Everything here is a deterministic
/// function of config and seed; wall-clock timings live in [`StepTiming`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub step: usize,
    pub global_step: usize,
    pub mean_reward: f64,
    pub reward_components: BTreeMap<String, f64>,
    pub accuracy: f64,
    pub policy_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_mean: Option<f64>,
    pub entropy_mean: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub grad_norm: f64,
    pub mean_response_len: f64,
    pub mean_turns: f64,
    pub truncated_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mean_reward: Option<f64>,
}

impl StepMetrics {
    /// Flat `name -> value` view used for CSV export and finiteness checks.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let value = serde_json::to_value(self).expect("metrics serialize");
        flatten("", &value, &mut out);
        for k in ["iteration", "step", "global_step"] {
            out.remove(k);
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.scalars().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((k, v)) => Err(Error::Numeric(format!("metric `{k}` is {v}"))),
            None => Ok(()),
        }
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, f64>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let name = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&name, v, out);
            }
        }
        serde_json::Value::Number(n) => {
            out.insert(prefix.to_string(), n.as_f64().unwrap_or(f64::NAN));
        }
        // serde_json writes non-finite floats as null
        serde_json::Value::Null => {
            out.insert(prefix.to_string(), f64::NAN);
        }
        _ => {}
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub global_step: usize,
    pub sampling_s: f64,
    pub scoring_s: f64,
    pub advantage_s: f64,
    pub update_s: f64,
    pub total_s: f64,
}

/// First line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format_version: u32,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    RunHeader(RunHeader),
    Step(StepMetrics),
}

/// Append-only JSONL writers for a run directory.
pub struct MetricsLog {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    /// Starts `metrics.jsonl` and `timing.jsonl` in `dir`. When `keep_through`
    /// is set, records up to that global step from an earlier run are kept.
    pub fn create(dir: &Path, header: RunHeader, keep_through: Option<usize>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let timing_path = dir.join("timing.jsonl");
        let kept = match keep_through {
            Some(n) if path.is_file() => read_metrics(&path)?
                .1
                .into_iter()
                .filter(|m| m.global_step <= n)
                .collect(),
            _ => Vec::new(),
        };
        let kept_timing: Vec<StepTiming> = match keep_through {
            Some(n) if timing_path.is_file() => read_jsonl::<StepTiming>(&timing_path)?
                .into_iter()
                .filter(|t| t.global_step <= n)
                .collect(),
            _ => Vec::new(),
        };
        let open = |p: &Path| {
            File::create(p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        let mut log = Self {
            metrics: open(&path)?,
            timing: open(&timing_path)?,
            path,
        };
        log.write_line(&Line::RunHeader(header))?;
        for m in kept {
            log.write_line(&Line::Step(m))?;
        }
        for t in kept_timing {
            serde_json::to_writer(&mut log.timing, &t)?;
            writeln!(log.timing).map_err(|e| Error::io(&timing_path, e))?;
        }
        log.flush()?;
        Ok(log)
    }

    fn write_line(&mut self, line: &Line) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, line)?;
        writeln!(self.metrics).map_err(|e| Error::io(&self.path, e))
    }

    pub fn record(&mut self, metrics: &StepMetrics, timing: &StepTiming) -> Result<()> {
        self.write_line(&Line::Step(metrics.clone()))?;
        serde_json::to_writer(&mut self.timing, timing)?;
        writeln!(self.timing).map_err(|e| Error::io(&self.path, e))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.path, e))?;
        self.timing.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reads a `metrics.jsonl` file into its header and step records.
pub fn read_metrics(path: &Path) -> Result<(Option<RunHeader>, Vec<StepMetrics>)> {
    let mut header = None;
    let mut steps = Vec::new();
    for line in read_jsonl::<Line>(path)? {
        match line {
            Line::RunHeader(h) => header = Some(h),
            Line::Step(m) => steps.push(m),
        }
    }
    Ok((header, steps))
}

/// Writes one `global_step,value` CSV per scalar metric into `dir/plots`.
pub fn write_plot_data(dir: &Path) -> Result<Vec<PathBuf>> {
    let (_, steps) = read_metrics(&dir.join("metrics.jsonl"))?;
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for m in &steps {
        for (k, v) in m.scalars() {
            series.entry(k).or_default().push((m.global_step, v));
        }
    }
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();
    for (name, points) in series {
        let path = plots.join(format!("{name}.csv"));
        let mut text = format!("global_step,{name}\n");
        for (s, v) in points {
            text.push_str(&format!("{s},{v}\n"));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
