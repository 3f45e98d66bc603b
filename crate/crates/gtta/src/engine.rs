//! The online adaptation loop: per test batch, step 1 trains on
//! intermediate-domain samples with source labels, step 2 self-trains on
//! confidence-filtered pseudo-labels. Also hosts the BN-statistics
//! baselines, the source reservoir, and the single-sample sliding window.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::bn_adapt::{ema_update_stats, interpolate_stats, BNAdaptConfig, BnVariant};
use crate::error::{GttaError, Result};
use crate::mixup_domain::{build_mixed_batch, MixupConfig};
use crate::model::{
    accuracy, ce_logits_grad, BNStatistics, BnMode, Classifier, EncoderDecoderState,
};
use crate::nn::{seeded_rng, Adam, Tensor4};
use crate::self_training::{
    ce_loss_source, ce_loss_test, ce_test_logits_grad, filter_by_confidence, pseudo_labels,
    update_threshold, ThresholdState,
};
use crate::style_transfer::{extract_style, stylize, train_decoder_step, StyleMemory};
use crate::toy_data::{apply_corruption, DomainSchedule, LabeledImageSet};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    /// Prediction with frozen source model and source BN stats (BN-0).
    Source,
    /// One of the BN statistics baselines, no parameter updates.
    Bn { config: BNAdaptConfig },
    /// Filtered pseudo-label self-training without any source data.
    SelfTrainingOnly,
    /// Self-training plus replayed (unmixed) source batches.
    SourceReplay,
    /// Mixup intermediate domains plus self-training.
    GttaMix,
    /// AdaIN style-transfer intermediate domains plus self-training.
    GttaSt,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Source => "source".into(),
            Method::Bn { config } => config.variant.name().into(),
            Method::SelfTrainingOnly => "self_training".into(),
            Method::SourceReplay => "source_replay".into(),
            Method::GttaMix => "gtta_mix".into(),
            Method::GttaSt => "gtta_st".into(),
        }
    }

    pub fn uses_gradients(&self) -> bool {
        matches!(
            self,
            Method::SelfTrainingOnly | Method::SourceReplay | Method::GttaMix | Method::GttaSt
        )
    }

    fn uses_source(&self) -> bool {
        matches!(self, Method::SourceReplay | Method::GttaMix | Method::GttaSt)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StyleEngineConfig {
    pub capacity: usize,
    pub lambda_s: f64,
    pub pretrain_iters: usize,
    pub decoder_lr: f64,
}

impl Default for StyleEngineConfig {
    fn default() -> Self {
        StyleEngineConfig {
            capacity: 16,
            lambda_s: crate::style_transfer::LAMBDA_S,
            pretrain_iters: 200,
            decoder_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SelfTrainConfig {
    pub alpha_th: f64,
    pub filtering: bool,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            alpha_th: 0.1,
            filtering: true,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdaptConfig {
    pub method: Method,
    pub updates_per_batch: usize,
    pub lr: f64,
    pub batch_size_test: usize,
    pub batch_size_source: usize,
    pub mixup: MixupConfig,
    pub style: StyleEngineConfig,
    pub st: SelfTrainConfig,
    pub source_fraction: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::Source,
            updates_per_batch: 1,
            lr: 1e-5,
            batch_size_test: 32,
            batch_size_source: 32,
            mixup: MixupConfig::default(),
            style: StyleEngineConfig::default(),
            st: SelfTrainConfig::default(),
            source_fraction: 1.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.updates_per_batch < 1 {
            return Err(GttaError::Config("updates_per_batch must be >= 1".into()));
        }
        if !(self.source_fraction > 0.0 && self.source_fraction <= 1.0) {
            return Err(GttaError::Config("source_fraction must be in (0,1]".into()));
        }
        if self.batch_size_test == 0 || self.batch_size_source == 0 {
            return Err(GttaError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Source reservoir
// ---------------------------------------------------------------------------

/// Retained subset of the source set; sampling is uniform with replacement
/// and deterministic given (seed, step).
#[derive(Debug, Clone)]
pub struct SourceReservoir {
    data: LabeledImageSet,
    pub fraction: f64,
    seed: u64,
}

impl SourceReservoir {
    pub fn new(source: &LabeledImageSet, fraction: f64, seed: u64) -> Result<Self> {
        if source.is_empty() {
            return Err(GttaError::Config("source set is empty".into()));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(GttaError::Config("fraction must be in (0,1]".into()));
        }
        let keep = ((fraction * source.len() as f64).round() as usize).max(1);
        let data = if keep == source.len() {
            source.clone()
        } else {
            let mut order: Vec<usize> = (0..source.len()).collect();
            let mut rng = seeded_rng(seed, &[0x_5e5e]);
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            order.truncate(keep);
            order.sort_unstable();
            source.select(&order)
        };
        Ok(SourceReservoir {
            data,
            fraction,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &LabeledImageSet {
        &self.data
    }

    /// Uniform with replacement.
    pub fn sample_source(&self, n: usize, step_seed: u64) -> Result<LabeledImageSet> {
        if self.data.is_empty() {
            return Err(GttaError::Config("empty reservoir".into()));
        }
        let mut rng = seeded_rng(self.seed, &[0x_d2a3, step_seed]);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.data.len())).collect();
        Ok(self.data.select(&idx))
    }
}

// ---------------------------------------------------------------------------
// Sliding buffer for single-sample streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SlidingBuffer {
    capacity: usize,
    samples: std::collections::VecDeque<(ndarray::Array3<f64>, usize)>,
    since_update: usize,
}

impl SlidingBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(GttaError::Config("buffer capacity must be >= 2".into()));
        }
        Ok(SlidingBuffer {
            capacity,
            samples: std::collections::VecDeque::new(),
            since_update: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Adds a sample, evicting the oldest at capacity. Returns true when a
    /// model update should fire (every `capacity` arrivals).
    pub fn push(&mut self, image: ndarray::Array3<f64>, label: usize) -> bool {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((image, label));
        self.since_update += 1;
        if self.since_update == self.capacity {
            self.since_update = 0;
            true
        } else {
            false
        }
    }

    pub fn is_padded(&self) -> bool {
        self.samples.len() < self.capacity
    }

    /// Buffer contents as a batch, padded by repeating the newest sample
    /// when not yet full. Index of the newest sample is returned.
    pub fn as_batch(&self) -> (Tensor4, usize) {
        assert!(!self.samples.is_empty());
        let (c, h, w) = self.samples[0].0.dim();
        let mut images = Tensor4::zeros((self.capacity, c, h, w));
        for (i, (img, _)) in self.samples.iter().enumerate() {
            images.index_axis_mut(Axis(0), i).assign(img);
        }
        let newest = self.samples.len() - 1;
        for i in self.samples.len()..self.capacity {
            let filler = &self.samples[newest].0;
            images.index_axis_mut(Axis(0), i).assign(filler);
        }
        (images, newest)
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepReport {
    pub loss_source: Option<f64>,
    pub loss_test: Option<f64>,
    pub kept_fraction: f64,
    pub threshold: f64,
    pub updates: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DomainReport {
    pub kind: String,
    pub severity: u8,
    pub error_rate: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SequenceReport {
    pub domains: Vec<DomainReport>,
    pub mean_error: f64,
    pub steps: Vec<StepReport>,
    /// set when a sliding-window run emitted predictions from a buffer
    /// that was not yet full
    pub padded_predictions: usize,
}

impl SequenceReport {
    fn from_domains(domains: Vec<DomainReport>, steps: Vec<StepReport>, padded: usize) -> Self {
        let mean_error = if domains.is_empty() {
            0.0
        } else {
            domains.iter().map(|d| d.error_rate).sum::<f64>() / domains.len() as f64
        };
        SequenceReport {
            domains,
            mean_error,
            steps,
            padded_predictions: padded,
        }
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct StyleRuntime {
    state: EncoderDecoderState,
    adam: Adam,
    memory: StyleMemory,
}

/// Owns all mutable state of one adaptation run. Strictly sequential.
pub struct AdaptRunner {
    pub config: AdaptConfig,
    pub model: Classifier,
    opt: Adam,
    pub threshold: ThresholdState,
    reservoir: Option<SourceReservoir>,
    style: Option<StyleRuntime>,
    /// running stats for the BN-EMA baseline
    ema_stats: Option<BNStatistics>,
    source_stats: BNStatistics,
    seed: u64,
    step: u64,
    pub verbose: bool,
}

impl AdaptRunner {
    /// `style_state` must be a pre-trained encoder/decoder when the method
    /// is GTTA-ST; it is ignored otherwise.
    pub fn new(
        model: Classifier,
        source: &LabeledImageSet,
        style_state: Option<EncoderDecoderState>,
        config: AdaptConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = model;
        let source_stats = model.bn_statistics();
        let reservoir = if config.method.uses_source() {
            Some(SourceReservoir::new(source, config.source_fraction, seed)?)
        } else {
            None
        };
        let style = match config.method {
            Method::GttaSt => {
                let state = style_state.ok_or_else(|| {
                    GttaError::Config("gtta_st requires a pre-trained style network".into())
                })?;
                let adam = Adam::new(state.decoder.param_count());
                Some(StyleRuntime {
                    state,
                    adam,
                    memory: StyleMemory::new(config.style.capacity),
                })
            }
            _ => None,
        };
        let ema_stats = match config.method {
            Method::Bn { config: bc } if bc.variant == BnVariant::BnEma => {
                // the EMA recursion starts from the source stats
                Some(source_stats.clone())
            }
            _ => None,
        };
        model.bn_mode = match config.method {
            Method::Source => BnMode::EvalStats,
            Method::Bn { config: bc } => match bc.variant {
                BnVariant::Bn0 => BnMode::EvalStats,
                BnVariant::Bn1 => BnMode::TrainStats,
                BnVariant::Bn0_1 => BnMode::Interpolated,
                BnVariant::BnEma => BnMode::Ema,
            },
            _ => BnMode::TrainStats,
        };
        let opt = Adam::new(model.param_count());
        let threshold = ThresholdState::with_momentum(config.st.alpha_th);
        Ok(AdaptRunner {
            config,
            model,
            opt,
            threshold,
            reservoir,
            style,
            ema_stats,
            source_stats,
            seed,
            step: 0,
            verbose: false,
        })
    }

    pub fn reservoir(&self) -> Option<&SourceReservoir> {
        self.reservoir.as_ref()
    }

    pub fn param_checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.model.params_flat() {
            acc ^= v.to_bits();
            acc = acc.wrapping_mul(0x1000_0000_01b3);
        }
        acc
    }

    /// Softmax prediction for a batch, applying the method's BN-statistic
    /// handling. Does not touch parameters.
    pub fn predict(&mut self, batch: &Tensor4) -> Result<Array2<f64>> {
        if let Method::Bn { config: bc } = self.config.method {
            match bc.variant {
                BnVariant::Bn0 | BnVariant::Bn1 => {}
                BnVariant::Bn0_1 => {
                    let test_stats = self.model.collect_batch_stats(batch)?;
                    let mixed = interpolate_stats(&self.source_stats, &test_stats, bc.alpha)?;
                    self.model.override_stats = Some(mixed);
                }
                BnVariant::BnEma => {
                    let test_stats = self.model.collect_batch_stats(batch)?;
                    let running = self.ema_stats.as_ref().expect("ema stats initialized");
                    let updated = ema_update_stats(running, &test_stats, bc.alpha)?;
                    self.model.override_stats = Some(updated.clone());
                    self.ema_stats = Some(updated);
                }
            }
        }
        self.model.forward(batch)
    }

    /// One two-step adaptation on a test batch. No-op for prediction-only
    /// methods.
    pub fn adapt_step(&mut self, test_batch: &Tensor4) -> Result<StepReport> {
        if test_batch.dim().0 == 0 {
            return Err(GttaError::Parameter("empty test batch".into()));
        }
        if !self.config.method.uses_gradients() {
            return Ok(StepReport {
                loss_source: None,
                loss_test: None,
                kept_fraction: 0.0,
                threshold: self.threshold.gamma,
                updates: 0,
            });
        }
        let updates = self.config.updates_per_batch;
        let mut last_source = None;
        let mut last_test = None;
        let mut last_kept = 0.0;
        for rep in 0..updates {
            let step_seed = self.step.wrapping_mul(64).wrapping_add(rep as u64);
            let (src_loss, test_loss, kept) = self.single_update(test_batch, step_seed)?;
            last_source = src_loss.or(last_source);
            last_test = test_loss.or(last_test);
            last_kept = kept;
        }
        self.step += 1;
        Ok(StepReport {
            loss_source: last_source,
            loss_test: last_test,
            kept_fraction: last_kept,
            threshold: self.threshold.gamma,
            updates,
        })
    }

    fn single_update(
        &mut self,
        test_batch: &Tensor4,
        step_seed: u64,
    ) -> Result<(Option<f64>, Option<f64>, f64)> {
        // step 1: intermediate-domain batch with source labels
        let intermediate = match self.config.method {
            Method::SelfTrainingOnly => None,
            Method::SourceReplay | Method::GttaMix => {
                let reservoir = self.reservoir.as_ref().expect("reservoir present");
                let src = reservoir.sample_source(self.config.batch_size_source, step_seed)?;
                let lambda = if self.config.method == Method::SourceReplay {
                    MixupConfig::new(0.0)?
                } else {
                    self.config.mixup
                };
                let (mixed, labels) = build_mixed_batch(&src, test_batch, &self.model, &lambda)?;
                Some((mixed, labels))
            }
            Method::GttaSt => Some(self.build_styled_batch(test_batch, step_seed)?),
            _ => unreachable!("prediction-only methods return earlier"),
        };

        let mut grads: Option<Vec<f64>> = None;
        let mut loss_source = None;
        if let Some((images, labels)) = &intermediate {
            let cache = self.model.forward_cached(images)?;
            let loss = ce_loss_source(labels, &cache.softmax)?;
            let dlogits = ce_logits_grad(&cache.softmax, labels);
            grads = Some(self.model.backward(&cache, &dlogits));
            loss_source = Some(loss);
        }

        // step 2: filtered self-training on the test batch
        let cache = self.model.forward_cached(test_batch)?;
        self.threshold = update_threshold(&self.threshold, &cache.softmax)?;
        let mut pseudo = pseudo_labels(&cache.softmax);
        if self.config.st.filtering {
            pseudo = filter_by_confidence(&pseudo, self.threshold.gamma);
        }
        let kept = pseudo.kept_fraction();
        let mut loss_test = None;
        if let Some(dlogits) = ce_test_logits_grad(&pseudo, &cache.softmax) {
            loss_test = ce_loss_test(&pseudo, &cache.softmax);
            let g = self.model.backward(&cache, &dlogits);
            grads = Some(match grads {
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                    acc
                }
                None => g,
            });
        }
        // all-filtered test batch: proceed with the source loss alone

        if let Some(g) = grads {
            let mut params = self.model.params_flat();
            self.opt.step(&mut params, &g, self.config.lr)?;
            self.model.set_params_flat(&params);
        }
        Ok((loss_source, loss_test, kept))
    }

    /// GTTA-ST step 1: one decoder update on the current style, then one
    /// source sub-batch transferred to the current style and one to a
    /// previously seen style from memory.
    fn build_styled_batch(
        &mut self,
        test_batch: &Tensor4,
        step_seed: u64,
    ) -> Result<(Tensor4, Vec<usize>)> {
        let reservoir = self.reservoir.as_ref().expect("reservoir present");
        let src = reservoir.sample_source(self.config.batch_size_source, step_seed)?;
        let style_rt = self.style.as_mut().expect("style runtime present");
        let mut rng = seeded_rng(self.seed, &[0x_571e, step_seed]);
        let test_idx = rng.gen_range(0..test_batch.dim().0);
        let current = extract_style(&style_rt.state.encoder, test_batch, test_idx);

        // decoder adapts online before styles are consumed
        train_decoder_step(
            &mut style_rt.state.decoder,
            &mut style_rt.adam,
            &src.images,
            &current,
            &style_rt.state.encoder,
            self.config.style.decoder_lr,
        )?;
        style_rt.memory.push(current.clone());

        let half = src.len() / 2;
        let (first, second) = if half == 0 {
            (src.select(&(0..src.len()).collect::<Vec<_>>()), None)
        } else {
            let a: Vec<usize> = (0..half).collect();
            let b: Vec<usize> = (half..src.len()).collect();
            (src.select(&a), Some(src.select(&b)))
        };
        let mut images = stylize(
            &first.images,
            &current,
            &style_rt.state.encoder,
            &style_rt.state.decoder,
        )?;
        let mut labels = first.labels.clone();
        if let Some(rest) = second {
            let past = style_rt.memory.sample(self.seed ^ step_seed)?;
            let styled = stylize(
                &rest.images,
                &past,
                &style_rt.state.encoder,
                &style_rt.state.decoder,
            )?;
            let (n1, c, h, w) = images.dim();
            let n2 = styled.dim().0;
            let mut merged = Tensor4::zeros((n1 + n2, c, h, w));
            merged
                .slice_mut(ndarray::s![..n1, .., .., ..])
                .assign(&images);
            merged
                .slice_mut(ndarray::s![n1.., .., .., ..])
                .assign(&styled);
            images = merged;
            labels.extend(rest.labels.iter());
        }
        Ok((images, labels))
    }

    /// Predict-then-adapt over a corruption schedule. The pool supplies the
    /// clean test images; corruption is applied per scheduled batch.
    pub fn run_sequence(
        &mut self,
        schedule: &DomainSchedule,
        test_pool: &LabeledImageSet,
        run_seed: u64,
    ) -> Result<SequenceReport> {
        let mut domains = Vec::new();
        let mut steps = Vec::new();
        let mut cursor = 0usize;
        for (d_idx, (spec, batch_count)) in schedule.entries.iter().enumerate() {
            let mut errors = Vec::with_capacity(*batch_count);
            for b_idx in 0..*batch_count {
                let (clean, labels) =
                    next_pool_batch(test_pool, &mut cursor, self.config.batch_size_test);
                let corrupted = apply_corruption(
                    &clean,
                    spec,
                    batch_seed(run_seed, d_idx as u64, b_idx as u64),
                )?;
                let probs = self.predict(&corrupted)?;
                errors.push(100.0 * (1.0 - accuracy(&probs, &labels)));
                let report = self.adapt_step(&corrupted)?;
                steps.push(report);
            }
            let error_rate = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
            if self.verbose {
                println!(
                    "domain {:>2} {}@{}: error {:.2}%",
                    d_idx,
                    spec.kind.name(),
                    spec.severity,
                    error_rate
                );
            }
            domains.push(DomainReport {
                kind: spec.kind.name().into(),
                severity: spec.severity,
                error_rate,
                batches: *batch_count,
            });
        }
        Ok(SequenceReport::from_domains(domains, steps, 0))
    }

    /// Single-sample streaming over the schedule: each scheduled batch is
    /// fed sample by sample through a sliding buffer of size `b`; an
    /// adaptation fires every `b` arrivals.
    pub fn sliding_window_adapt(
        &mut self,
        schedule: &DomainSchedule,
        test_pool: &LabeledImageSet,
        buffer: &mut SlidingBuffer,
        run_seed: u64,
    ) -> Result<SequenceReport> {
        let mut domains = Vec::new();
        let mut steps = Vec::new();
        let mut cursor = 0usize;
        let mut padded = 0usize;
        for (d_idx, (spec, batch_count)) in schedule.entries.iter().enumerate() {
            let mut correct = 0usize;
            let mut total = 0usize;
            for b_idx in 0..*batch_count {
                let (clean, labels) =
                    next_pool_batch(test_pool, &mut cursor, self.config.batch_size_test);
                let corrupted = apply_corruption(
                    &clean,
                    spec,
                    batch_seed(run_seed, d_idx as u64, b_idx as u64),
                )?;
                for (i, &label) in labels.iter().enumerate().take(corrupted.dim().0) {
                    let image = corrupted.index_axis(Axis(0), i).to_owned();
                    let fire = buffer.push(image, label);
                    if buffer.is_padded() {
                        padded += 1;
                    }
                    let (batch, newest) = buffer.as_batch();
                    let probs = self.predict(&batch)?;
                    let row = probs.row(newest);
                    let mut best = 0usize;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    if best == labels[i] {
                        correct += 1;
                    }
                    total += 1;
                    if fire {
                        let report = self.adapt_step(&batch)?;
                        steps.push(report);
                    }
                }
            }
            let error_rate = 100.0 * (1.0 - correct as f64 / total.max(1) as f64);
            if self.verbose {
                println!(
                    "domain {:>2} {}@{} (window): error {:.2}%",
                    d_idx,
                    spec.kind.name(),
                    spec.severity,
                    error_rate
                );
            }
            domains.push(DomainReport {
                kind: spec.kind.name().into(),
                severity: spec.severity,
                error_rate,
                batches: *batch_count,
            });
        }
        Ok(SequenceReport::from_domains(domains, steps, padded))
    }
}

fn batch_seed(run_seed: u64, domain: u64, batch: u64) -> u64 {
    run_seed
        .wrapping_mul(0x0100_0000_01b3)
        .wrapping_add(domain.wrapping_mul(0x1_0001))
        .wrapping_add(batch)
}

/// Next `n` images from the pool, wrapping around its end.
fn next_pool_batch(
    pool: &LabeledImageSet,
    cursor: &mut usize,
    n: usize,
) -> (Tensor4, Vec<usize>) {
    let idx: Vec<usize> = (0..n).map(|i| (*cursor + i) % pool.len()).collect();
    *cursor = (*cursor + n) % pool.len();
    let subset = pool.select(&idx);
    (subset.images, subset.labels)
}
