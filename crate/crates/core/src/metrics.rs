//! Per-step training metrics as JSON lines with a fixed key order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Mode, StepReport};
use crate::error::{Error, Result};

/// Unweighted per-scale prediction losses and their weighted total.
/// Unconfigured scales are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredLosses {
    pub micro: Option<f64>,
    pub meso: Option<f64>,
    #[serde(rename = "macro")]
    pub macro_: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub step: u64,
    pub episode: u64,
    pub mode: String,
    pub l_perception: f64,
    pub l_memory: f64,
    pub l_pred: PredLosses,
    pub utility: f64,
    pub l_td: f64,
    pub l_aux: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

impl MetricRecord {
    pub fn from_report(step: u64, episode: u64, mode: Mode, r: &StepReport) -> Self {
        Self {
            step,
            episode,
            mode: mode.name().to_string(),
            l_perception: r.losses.l_perception,
            l_memory: r.losses.l_memory,
            l_pred: PredLosses {
                micro: r.pred_by_scale[0],
                meso: r.pred_by_scale[1],
                macro_: r.pred_by_scale[2],
                total: r.losses.l_pred,
            },
            utility: r.losses.utility,
            l_td: r.losses.l_td,
            l_aux: r.losses.l_aux,
            eta: r.eta,
            epsilon: r.epsilon,
            action: r.record.action,
            reward: r.reward,
            done: r.done,
        }
    }

    pub fn to_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Contract(format!("metric record does not serialise: {e}")))
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        let line = rec.to_line()?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("metrics.jsonl", e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("metrics.jsonl", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Contract(format!("{}:{}: invalid metric record: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
