//! Accuracy matrix and the incremental-learning summary metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `acc[k][j]`: accuracy on the test classes of task `j` after phase `k`
/// (zero-based, `j <= k`). `overall[k]`: accuracy on the cumulative test set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub acc: Vec<Vec<f64>>,
    pub overall: Vec<f64>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phases(&self) -> usize {
        self.overall.len()
    }

    /// Appends the row for the next phase; `per_task` must cover tasks
    /// `0..=phase`.
    pub fn record(&mut self, per_task: Vec<f64>, overall: f64) -> Result<()> {
        let phase = self.overall.len();
        if per_task.len() != phase + 1 {
            return Err(Error::Data(format!(
                "phase {phase} needs {} task accuracies, got {}",
                phase + 1,
                per_task.len()
            )));
        }
        if per_task.iter().chain([&overall]).any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Data("accuracies must lie in [0, 1]".into()));
        }
        self.acc.push(per_task);
        self.overall.push(overall);
        Ok(())
    }

    pub fn avg_incremental_accuracy(&self) -> Result<f64> {
        avg_incremental_accuracy(&self.overall)
    }

    pub fn avg_forgetting(&self) -> Result<f64> {
        avg_forgetting(&self.acc)
    }
}

/// Mean cumulative accuracy over all phases, the first one included.
pub fn avg_incremental_accuracy(overall: &[f64]) -> Result<f64> {
    if overall.is_empty() {
        return Err(Error::Data("no phases recorded".into()));
    }
    Ok(overall.iter().sum::<f64>() / overall.len() as f64)
}

/// Mean over tasks `j < n` of the drop from the best accuracy seen before
/// the final phase to the final accuracy. A task that ends above its
/// earlier best counts as zero forgetting.
pub fn avg_forgetting(acc: &[Vec<f64>]) -> Result<f64> {
    let n = acc.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "forgetting needs at least two phases, got {n}"
        )));
    }
    let last = &acc[n - 1];
    let mut total = 0.0;
    for j in 0..n - 1 {
        let best = (j..n - 1)
            .map(|l| acc[l][j])
            .fold(f64::NEG_INFINITY, f64::max);
        total += (best - last[j]).max(0.0);
    }
    Ok(total / (n - 1) as f64)
}
