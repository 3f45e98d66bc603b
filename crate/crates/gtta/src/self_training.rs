//! Pseudo-labels, the adaptive confidence threshold, filtering, and the two
//! cross-entropy objectives (pseudo-labeled test loss, supervised source loss).

use ndarray::Array2;

use crate::error::{GttaError, Result};

const LOG_CLAMP: f64 = 1e-12;

/// Adaptive confidence threshold. The first observed batch initializes
/// gamma directly; later batches blend with momentum `alpha_th`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ThresholdState {
    pub gamma: f64,
    pub alpha_th: f64,
    pub initialized: bool,
}

impl Default for ThresholdState {
    fn default() -> Self {
        ThresholdState {
            gamma: 0.0,
            alpha_th: 0.1,
            initialized: false,
        }
    }
}

impl ThresholdState {
    pub fn with_momentum(alpha_th: f64) -> Self {
        ThresholdState {
            alpha_th,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub keep_mask: Option<Vec<bool>>,
}

impl PseudoLabelBatch {
    pub fn kept_count(&self) -> usize {
        match &self.keep_mask {
            Some(mask) => mask.iter().filter(|&&k| k).count(),
            None => self.labels.len(),
        }
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.kept_count() as f64 / self.labels.len() as f64
    }
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub fn pseudo_labels(softmax_batch: &Array2<f64>) -> PseudoLabelBatch {
    let mut labels = Vec::with_capacity(softmax_batch.nrows());
    let mut confidences = Vec::with_capacity(softmax_batch.nrows());
    for row in softmax_batch.rows() {
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        labels.push(best);
        confidences.push(row[best]);
    }
    PseudoLabelBatch {
        labels,
        confidences,
        keep_mask: None,
    }
}

/// gamma_t = (1 - alpha) gamma_{t-1} + alpha * sqrt(mean_i max_c p_ic).
pub fn update_threshold(
    state: &ThresholdState,
    softmax_batch: &Array2<f64>,
) -> Result<ThresholdState> {
    if softmax_batch.nrows() == 0 {
        return Err(GttaError::Parameter("empty softmax batch".into()));
    }
    let mean_max = softmax_batch
        .rows()
        .into_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / softmax_batch.nrows() as f64;
    let stat = mean_max.sqrt();
    let gamma = if state.initialized {
        (1.0 - state.alpha_th) * state.gamma + state.alpha_th * stat
    } else {
        stat
    };
    Ok(ThresholdState {
        gamma,
        alpha_th: state.alpha_th,
        initialized: true,
    })
}

/// keep[i] = confidence[i] >= gamma. An all-false mask is legal; the caller
/// skips the test loss in that case.
pub fn filter_by_confidence(batch: &PseudoLabelBatch, gamma: f64) -> PseudoLabelBatch {
    let keep = batch.confidences.iter().map(|&c| c >= gamma).collect();
    PseudoLabelBatch {
        labels: batch.labels.clone(),
        confidences: batch.confidences.clone(),
        keep_mask: Some(keep),
    }
}

/// Mean over kept samples of -log p at the pseudo-label class. Returns None
/// when no samples survive the filter.
pub fn ce_loss_test(pseudo: &PseudoLabelBatch, softmax_batch: &Array2<f64>) -> Option<f64> {
    let kept = pseudo.kept_count();
    if kept == 0 {
        return None;
    }
    let mut loss = 0.0;
    for (i, &y) in pseudo.labels.iter().enumerate() {
        let keep = pseudo.keep_mask.as_ref().map(|m| m[i]).unwrap_or(true);
        if keep {
            loss += -(softmax_batch[[i, y]].max(LOG_CLAMP)).ln();
        }
    }
    Some(loss / kept as f64)
}

/// Supervised cross-entropy against ground-truth labels, no filtering.
pub fn ce_loss_source(labels: &[usize], softmax_batch: &Array2<f64>) -> Result<f64> {
    if labels.len() != softmax_batch.nrows() {
        return Err(GttaError::Shape("labels/softmax length mismatch".into()));
    }
    if labels.is_empty() {
        return Err(GttaError::Parameter("empty batch".into()));
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += -(softmax_batch[[i, y]].max(LOG_CLAMP)).ln();
    }
    Ok(loss / labels.len() as f64)
}

/// d(test CE)/d(logits), normalized over kept samples; zero rows for
/// filtered samples. Returns None when nothing is kept.
pub fn ce_test_logits_grad(
    pseudo: &PseudoLabelBatch,
    softmax_batch: &Array2<f64>,
) -> Option<Array2<f64>> {
    let kept = pseudo.kept_count();
    if kept == 0 {
        return None;
    }
    let mut g = Array2::<f64>::zeros(softmax_batch.raw_dim());
    for (i, &y) in pseudo.labels.iter().enumerate() {
        let keep = pseudo.keep_mask.as_ref().map(|m| m[i]).unwrap_or(true);
        if keep {
            for c in 0..softmax_batch.ncols() {
                g[[i, c]] = softmax_batch[[i, c]] / kept as f64;
            }
            g[[i, y]] -= 1.0 / kept as f64;
        }
    }
    Some(g)
}
