//! Batch-norm statistics adaptation baselines: interpolation between source
//! and test-batch moments, and the exponential-moving-average variant.
//! Means and stds are combined directly (stds, not variances).

use crate::error::{GttaError, Result};
use crate::model::BNStatistics;
use crate::nn::{LayerStats, STD_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnVariant {
    Bn0,
    Bn0_1,
    Bn1,
    BnEma,
}

impl BnVariant {
    pub fn name(&self) -> &'static str {
        match self {
            BnVariant::Bn0 => "bn0",
            BnVariant::Bn0_1 => "bn0_1",
            BnVariant::Bn1 => "bn1",
            BnVariant::BnEma => "bn_ema",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BNAdaptConfig {
    pub variant: BnVariant,
    pub alpha: f64,
}

impl BNAdaptConfig {
    pub fn new(variant: BnVariant) -> Self {
        let alpha = match variant {
            BnVariant::Bn0 => 0.0,
            BnVariant::Bn0_1 => 0.1,
            BnVariant::Bn1 => 1.0,
            // EMA momentum; 0.1 matches the BN-0.1 prior
            BnVariant::BnEma => 0.1,
        };
        BNAdaptConfig { variant, alpha }
    }

    pub fn with_alpha(variant: BnVariant, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(GttaError::Parameter(format!("alpha must be in [0,1], got {alpha}")));
        }
        let fixed = match variant {
            BnVariant::Bn0 => Some(0.0),
            BnVariant::Bn0_1 => Some(0.1),
            BnVariant::Bn1 => Some(1.0),
            BnVariant::BnEma => None,
        };
        if let Some(f) = fixed {
            if (alpha - f).abs() > 1e-12 {
                return Err(GttaError::Parameter(format!(
                    "variant {} requires alpha {f}",
                    variant.name()
                )));
            }
        }
        Ok(BNAdaptConfig { variant, alpha })
    }
}

fn check_structure(a: &BNStatistics, b: &BNStatistics) -> Result<()> {
    if !a.same_structure(b) {
        return Err(GttaError::Shape(
            "BN statistics layer/channel structure mismatch".into(),
        ));
    }
    Ok(())
}

fn combine(a: &BNStatistics, b: &BNStatistics, alpha: f64) -> BNStatistics {
    let layers = a
        .layers
        .iter()
        .zip(b.layers.iter())
        .map(|(la, lb)| LayerStats {
            mean: la
                .mean
                .iter()
                .zip(lb.mean.iter())
                .map(|(&x, &y)| (1.0 - alpha) * x + alpha * y)
                .collect(),
            std: la
                .std
                .iter()
                .zip(lb.std.iter())
                .map(|(&x, &y)| ((1.0 - alpha) * x + alpha * y).max(STD_EPS))
                .collect(),
        })
        .collect();
    BNStatistics { layers }
}

/// Convex combination of source and test-batch statistics.
/// alpha = 0 reproduces the source stats, alpha = 1 the test stats.
pub fn interpolate_stats(
    source: &BNStatistics,
    test: &BNStatistics,
    alpha: f64,
) -> Result<BNStatistics> {
    check_structure(source, test)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GttaError::Parameter(format!("alpha must be in [0,1], got {alpha}")));
    }
    // endpoints are returned bit-equal
    if alpha == 0.0 {
        return Ok(source.clone());
    }
    if alpha == 1.0 {
        return Ok(test.clone());
    }
    Ok(combine(source, test, alpha))
}

/// One EMA step on the running statistics. The recursion starts from the
/// source stats (caller seeds `running` with them on the first step).
pub fn ema_update_stats(
    running: &BNStatistics,
    test: &BNStatistics,
    alpha: f64,
) -> Result<BNStatistics> {
    check_structure(running, test)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GttaError::Parameter(format!("alpha must be in [0,1], got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(running.clone());
    }
    Ok(combine(running, test, alpha))
}
