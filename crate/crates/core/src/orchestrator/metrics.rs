use serde::{Deserialize, Serialize};

use super::EpochSummary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Update,
    Epoch,
}

/// One line of the metrics stream. Loss fields are `null` in an epoch summary without updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub update: u64,
    pub loss_td: Option<f64>,
    pub loss_pg: Option<f64>,
    pub loss_fbc: Option<f64>,
    pub grad_norm: Option<f64>,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub epsilon: f64,
    pub attn_entropy_mean: Option<f64>,
    pub buffer_size: usize,
    pub wallclock_s: f64,
}

impl MetricRecord {
    pub fn summary(s: &EpochSummary, wallclock_s: f64) -> Self {
        Self {
            kind: RecordKind::Epoch,
            epoch: s.epoch,
            update: s.updates,
            loss_td: s.loss_td,
            loss_pg: s.loss_pg,
            loss_fbc: s.loss_fbc,
            grad_norm: s.grad_norm,
            mean_return: s.mean_return,
            success_rate: s.success_rate,
            epsilon: s.epsilon,
            attn_entropy_mean: s.attn_entropy_mean,
            buffer_size: s.buffer_size,
            wallclock_s,
        }
    }
}
