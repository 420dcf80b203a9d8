//! Deterministic evaluation: mean IoU per threshold, BCE, and material
//! accuracy for audio-bearing variants.

use super::network::{Network, Session};
use super::train::{MetricsRecord, PreparedSample};
use crate::error::Result;
use crate::tensor::Tape;
use crate::voxel::{iou, VoxelGrid};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Threshold (formatted) -> mean IoU.
    pub mean_iou: BTreeMap<String, f64>,
    pub bce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub material_accuracy: Option<f64>,
}

pub(crate) fn threshold_key(t: f64) -> String {
    format!("{t}")
}

impl EvalReport {
    pub fn mean_iou_at(&self, t: f64) -> f64 {
        self.mean_iou.get(&threshold_key(t)).copied().unwrap_or(0.0)
    }

    pub fn to_record(&self, epoch: usize, split: &str) -> MetricsRecord {
        MetricsRecord {
            epoch,
            split: split.into(),
            loss: self.bce,
            iou: Some(self.mean_iou.clone()),
            material_acc: self.material_accuracy,
        }
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples: {}\n", self.n_samples));
        out.push_str(&format!("bce:     {:.6}\n", self.bce));
        for (t, v) in &self.mean_iou {
            out.push_str(&format!("iou@{t}: {v:.4}\n"));
        }
        if let Some(acc) = self.material_accuracy {
            out.push_str(&format!("material accuracy: {:.2}%\n", 100.0 * acc));
        }
        out
    }
}

/// Runs the network over `samples` and aggregates the metrics.
pub fn evaluate(net: &Network, samples: &[PreparedSample], thresholds: &[f64]) -> Result<EvalReport> {
    struct PerSample {
        ious: Vec<f64>,
        bce: f64,
        material_hit: Option<bool>,
    }
    let rows: Vec<PerSample> = samples
        .par_iter()
        .map(|sample| -> Result<PerSample> {
            let mut tape = Tape::new();
            let mut sess = Session::new(&net.params);
            let fw = net.forward_on_tape(&mut tape, &mut sess, sample)?;
            let target = tape.leaf(&sample.occupancy);
            let bce = tape.bce(fw.occ, target)?;
            let bce = tape.value(bce).data()[0];
            let pred = VoxelGrid::new(tape.value(fw.occ).data().to_vec(), None)?;
            let gt = VoxelGrid::new(sample.occupancy.data().to_vec(), None)?;
            let ious = thresholds
                .iter()
                .map(|&t| iou(&pred, &gt, t))
                .collect::<Result<_>>()?;
            let material_hit = fw.logits.map(|l| {
                let logits = tape.value(l).data();
                let arg = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                arg == sample.material
            });
            Ok(PerSample {
                ious,
                bce,
                material_hit,
            })
        })
        .collect::<Result<_>>()?;

    let n = rows.len().max(1) as f64;
    let mut mean_iou = BTreeMap::new();
    for (k, &t) in thresholds.iter().enumerate() {
        let mean = rows.iter().map(|r| r.ious[k]).sum::<f64>() / n;
        mean_iou.insert(threshold_key(t), mean);
    }
    let bce = rows.iter().map(|r| r.bce).sum::<f64>() / n;
    let hits: Vec<bool> = rows.iter().filter_map(|r| r.material_hit).collect();
    let material_accuracy = if hits.is_empty() {
        None
    } else {
        Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    };
    Ok(EvalReport {
        n_samples: rows.len(),
        mean_iou,
        bce,
        material_accuracy,
    })
}

/// Evaluates stored prediction grids against ground truth (the CLI's
/// `predictions=` mode and oracle fixtures).
pub fn evaluate_predictions(
    preds: &[VoxelGrid],
    gts: &[VoxelGrid],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(crate::error::Error::validation(format!(
            "{} predictions for {} ground-truth grids",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len().max(1) as f64;
    let mut mean_iou = BTreeMap::new();
    for &t in thresholds {
        let mut total = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            total += iou(p, g, t)?;
        }
        mean_iou.insert(threshold_key(t), total / n);
    }
    let mut bce_total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let mut tape = Tape::new();
        let pv = tape.leaf(&crate::tensor::Tensor::new(
            vec![p.occupancy().len()],
            p.occupancy().to_vec(),
        )?);
        let gv = tape.leaf(&crate::tensor::Tensor::new(
            vec![g.occupancy().len()],
            g.occupancy().to_vec(),
        )?);
        let bce = tape.bce(pv, gv)?;
        bce_total += tape.value(bce).data()[0];
    }
    let hits: Vec<bool> = preds
        .iter()
        .zip(gts)
        .filter_map(|(p, g)| match (p.material, g.material) {
            (Some(a), Some(b)) => Some(a == b),
            _ => None,
        })
        .collect();
    let material_accuracy = if hits.is_empty() {
        None
    } else {
        Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    };
    Ok(EvalReport {
        n_samples: preds.len(),
        mean_iou,
        bce: bce_total / n,
        material_accuracy,
    })
}
