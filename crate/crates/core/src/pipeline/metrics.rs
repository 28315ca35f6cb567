use serde::Serialize;

use crate::geometry::RefState;

use super::decoder::FramePrediction;

/// Center-distance matching summary for one frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub frame_index: usize,
    pub num_predictions: usize,
    pub num_truth: usize,
    pub matches: usize,
    pub recall: f64,
    pub precision: f64,
    /// Mean 3D center distance over matched pairs; 0 with no matches.
    pub mean_center_error: f64,
}

/// Greedy one-to-one matching on 3D center distance: repeatedly pair the
/// closest unmatched prediction and truth while their distance is within
/// `threshold`. Ties break toward lower indices.
pub fn evaluate(preds: &FramePrediction, truth: &[RefState], threshold: f64) -> Metrics {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.predictions.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = (p.state.center() - t.center()).norm();
            if d <= threshold {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; preds.predictions.len()];
    let mut truth_used = vec![false; truth.len()];
    let (mut matches, mut err_sum) = (0usize, 0.0);
    for (d, i, j) in pairs {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            matches += 1;
            err_sum += d;
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    Metrics {
        frame_index: preds.frame_index,
        num_predictions: preds.predictions.len(),
        num_truth: truth.len(),
        matches,
        recall: ratio(matches, truth.len()),
        precision: ratio(matches, preds.predictions.len()),
        mean_center_error: if matches == 0 {
            0.0
        } else {
            err_sum / matches as f64
        },
    }
}
