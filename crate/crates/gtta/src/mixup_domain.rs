//! Label-free mixup between source samples and their most similar test
//! samples. Source labels are kept untouched; only pixels are interpolated.

use ndarray::{Array2, ArrayView1, ArrayView3, Axis};

use crate::error::{GttaError, Result};
use crate::model::Classifier;
use crate::nn::Tensor4;
use crate::toy_data::LabeledImageSet;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MixupConfig {
    pub lambda_mix: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { lambda_mix: 1.0 / 3.0 }
    }
}

impl MixupConfig {
    pub fn new(lambda_mix: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_mix) {
            return Err(GttaError::Parameter(format!(
                "lambda_mix must be in [0,1], got {lambda_mix}"
            )));
        }
        Ok(MixupConfig { lambda_mix })
    }
}

/// Index of the test softmax row with the largest dot product against the
/// source softmax. Ties break toward the lowest index.
pub fn select_partner(
    source_softmax: ArrayView1<f64>,
    test_softmax_batch: &Array2<f64>,
) -> Result<usize> {
    if test_softmax_batch.nrows() == 0 {
        return Err(GttaError::Parameter("empty test batch".into()));
    }
    if test_softmax_batch.ncols() != source_softmax.len() {
        return Err(GttaError::Shape(format!(
            "class count mismatch: {} vs {}",
            test_softmax_batch.ncols(),
            source_softmax.len()
        )));
    }
    let mut best = 0usize;
    let mut best_dot = f64::NEG_INFINITY;
    for (i, row) in test_softmax_batch.axis_iter(Axis(0)).enumerate() {
        let dot = row.dot(&source_softmax);
        if dot > best_dot {
            best_dot = dot;
            best = i;
        }
    }
    Ok(best)
}

/// Pixel-wise convex combination; the caller keeps the source label.
pub fn mix_images(
    x_source: ArrayView3<f64>,
    x_test: ArrayView3<f64>,
    lambda_mix: f64,
) -> Result<ndarray::Array3<f64>> {
    if x_source.dim() != x_test.dim() {
        return Err(GttaError::Shape(format!(
            "image shape mismatch: {:?} vs {:?}",
            x_source.dim(),
            x_test.dim()
        )));
    }
    if lambda_mix == 0.0 {
        return Ok(x_source.to_owned());
    }
    if lambda_mix == 1.0 {
        return Ok(x_test.to_owned());
    }
    Ok(&x_source * (1.0 - lambda_mix) + &x_test * lambda_mix)
}

/// Pairs every source sample with its best softmax partner in the test batch
/// and mixes pixels. Returned labels are the untouched source labels.
pub fn build_mixed_batch(
    source_batch: &LabeledImageSet,
    test_batch: &Tensor4,
    model: &Classifier,
    config: &MixupConfig,
) -> Result<(Tensor4, Vec<usize>)> {
    if source_batch.is_empty() {
        return Err(GttaError::Parameter("empty source batch".into()));
    }
    if test_batch.dim().0 == 0 {
        return Err(GttaError::Parameter("empty test batch".into()));
    }
    let source_softmax = model.forward(&source_batch.images)?;
    let test_softmax = model.forward(test_batch)?;
    let (n, c, h, w) = source_batch.images.dim();
    let mut mixed = Tensor4::zeros((n, c, h, w));
    for j in 0..n {
        let partner = select_partner(source_softmax.row(j), &test_softmax)?;
        let img = mix_images(
            source_batch.images.index_axis(Axis(0), j),
            test_batch.index_axis(Axis(0), partner),
            config.lambda_mix,
        )?;
        mixed.index_axis_mut(Axis(0), j).assign(&img);
    }
    Ok((mixed, source_batch.labels.clone()))
}
