//! The training metrics stream: one JSON object per line, fixed field set,
//! `null` where a quantity does not apply to the algorithm variant.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::learner::UpdateStats;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Environment steps collected so far.
    pub step: u64,
    pub episodes: u64,
    pub return_mean: Option<f64>,
    pub success_rate: Option<f64>,
    pub loss_q: Option<f64>,
    pub loss_opt: Option<f64>,
    pub loss_alpha: Option<f64>,
    pub alpha: Option<f64>,
    pub joint_entropy: Option<f64>,
    /// Mean squared gap between `Q_tot` and the summed policy logits, measured
    /// on each batch before the head is updated on it.
    pub delta_q_mse: Option<f64>,
    pub q_gap: Option<f64>,
    pub epsilon: Option<f64>,
}

/// Appends records as lines and flushes after each one, so a partially
/// written stream is always a sequence of complete records.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Accumulates episodes and gradient steps between two records.
#[derive(Debug, Clone, Default)]
pub struct IntervalStats {
    ret: Mean,
    success: Mean,
    loss_q: Mean,
    loss_opt: Mean,
    loss_alpha: Mean,
    entropy: Mean,
    q_gap: Mean,
}

impl IntervalStats {
    pub fn add_episode(&mut self, ret: f64, success: bool) {
        self.ret.add(Some(ret));
        self.success.add(Some(if success { 1.0 } else { 0.0 }));
    }

    pub fn add_update(&mut self, s: &UpdateStats) {
        self.loss_q.add(Some(s.loss_q));
        self.loss_opt.add(s.loss_opt);
        self.loss_alpha.add(s.loss_alpha);
        self.entropy.add(s.joint_entropy);
        self.q_gap.add(s.q_gap);
    }

    pub fn is_empty(&self) -> bool {
        self.ret.n == 0 && self.loss_q.n == 0
    }

    /// Builds the record and resets the accumulators.
    pub fn flush(&mut self, step: u64, episodes: u64, alpha: Option<f64>, epsilon: Option<f64>) -> MetricsRecord {
        let r = MetricsRecord {
            step,
            episodes,
            return_mean: self.ret.get(),
            success_rate: self.success.get(),
            loss_q: self.loss_q.get(),
            loss_opt: self.loss_opt.get(),
            loss_alpha: self.loss_alpha.get(),
            alpha,
            joint_entropy: self.entropy.get(),
            delta_q_mse: self.loss_opt.get(),
            q_gap: self.q_gap.get(),
            epsilon,
        };
        *self = IntervalStats::default();
        r
    }
}
