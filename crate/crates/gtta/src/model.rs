//! Small BN-equipped classifier, the style-transfer encoder/decoder pair,
//! source pre-training, and checkpoint I/O.

use ndarray::Array2;
use rand::seq::SliceRandom;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GttaError, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, seeded_rng, softmax, upsample2, upsample2_backward, Adam, BatchNorm2d,
    BnCache, BnStats, Conv2d, ConvCache, LayerStats, Linear, Tensor4,
};
use crate::toy_data::LabeledImageSet;

/// Running mean/std for every BN layer of a model, outermost-first.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BNStatistics {
    pub layers: Vec<LayerStats>,
}

impl BNStatistics {
    pub fn same_structure(&self, other: &BNStatistics) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(other.layers.iter())
                .all(|(a, b)| a.len() == b.len())
    }
}

/// Which statistics the classifier's BN layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Current-batch moments (train-mode semantics; gradients flow through them).
    TrainStats,
    /// Stored running statistics from source training.
    EvalStats,
    /// Externally supplied statistics (BN-0.1 style interpolation).
    Interpolated,
    /// Externally supplied statistics maintained as an EMA (BN-EMA).
    Ema,
}

const CH1: usize = 16;
const CH2: usize = 32;
const CH3: usize = 64;

/// 3 conv blocks (conv -> BN -> ReLU -> pool) + global average pool + linear head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub head: Linear,
    pub class_count: usize,
    pub bn_mode: BnMode,
    /// Stats used when bn_mode is Interpolated or Ema.
    pub override_stats: Option<BNStatistics>,
}

pub struct ForwardCache {
    x: Tensor4,
    conv_caches: [ConvCache; 3],
    bn_caches: [BnCache; 3],
    relu_in: [Tensor4; 3],
    pool_in_dims: [(usize, usize); 3],
    gap_in_dim: (usize, usize),
    gap_out: Array2<f64>,
    pub softmax: Array2<f64>,
}

impl Classifier {
    pub fn new(class_count: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, &[0x_c1a5_51f1]);
        Classifier {
            conv1: Conv2d::new(crate::toy_data::IMG_CHANNELS, CH1, &mut rng),
            bn1: BatchNorm2d::new(CH1),
            conv2: Conv2d::new(CH1, CH2, &mut rng),
            bn2: BatchNorm2d::new(CH2),
            conv3: Conv2d::new(CH2, CH3, &mut rng),
            bn3: BatchNorm2d::new(CH3),
            head: Linear::new(CH3, class_count, &mut rng),
            class_count,
            bn_mode: BnMode::EvalStats,
            override_stats: None,
        }
    }

    fn bn_layers(&self) -> [&BatchNorm2d; 3] {
        [&self.bn1, &self.bn2, &self.bn3]
    }

    fn layer_stats_for(&self, layer: usize) -> Result<BnStats<'_>> {
        match self.bn_mode {
            BnMode::TrainStats => Ok(BnStats::Batch),
            BnMode::EvalStats => Ok(BnStats::Running),
            BnMode::Interpolated | BnMode::Ema => {
                let stats = self.override_stats.as_ref().ok_or_else(|| {
                    GttaError::Config("bn_mode requires override_stats to be set".into())
                })?;
                Ok(BnStats::Fixed(&stats.layers[layer]))
            }
        }
    }

    /// Full forward pass returning softmax probabilities and the caches
    /// needed for a backward pass. BN statistics follow `bn_mode`.
    pub fn forward_cached(&self, x: &Tensor4) -> Result<ForwardCache> {
        let (_, c, h, w) = x.dim();
        if c != crate::toy_data::IMG_CHANNELS {
            return Err(GttaError::Shape(format!("expected {} channels, got {c}", crate::toy_data::IMG_CHANNELS)));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(GttaError::Shape("spatial dims must be divisible by 8".into()));
        }
        let (c1, cc1) = self.conv1.forward(x);
        let (b1, bc1) = self.bn1.forward(&c1, self.layer_stats_for(0)?);
        let r1 = relu(&b1);
        let p1 = avg_pool2(&r1);

        let (c2, cc2) = self.conv2.forward(&p1);
        let (b2, bc2) = self.bn2.forward(&c2, self.layer_stats_for(1)?);
        let r2 = relu(&b2);
        let p2 = avg_pool2(&r2);

        let (c3, cc3) = self.conv3.forward(&p2);
        let (b3, bc3) = self.bn3.forward(&c3, self.layer_stats_for(2)?);
        let r3 = relu(&b3);
        let p3 = avg_pool2(&r3);

        let gap = global_avg_pool(&p3);
        let logits = self.head.forward(&gap);
        let probs = softmax(&logits);
        Ok(ForwardCache {
            x: x.clone(),
            conv_caches: [cc1, cc2, cc3],
            bn_caches: [bc1, bc2, bc3],
            relu_in: [b1, b2, b3],
            pool_in_dims: [
                (r1.dim().2, r1.dim().3),
                (r2.dim().2, r2.dim().3),
                (r3.dim().2, r3.dim().3),
            ],
            gap_in_dim: (p3.dim().2, p3.dim().3),
            gap_out: gap,
            softmax: probs,
        })
    }

    /// Softmax probabilities only.
    pub fn forward(&self, x: &Tensor4) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.softmax)
    }

    /// Backward pass from d(loss)/d(logits); returns flat gradients in
    /// `params_flat` order.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Vec<f64> {
        let (dgap, gw_head, gb_head) = self.head.backward(&cache.gap_out, dlogits);
        let mut grad = global_avg_pool_backward(&dgap, cache.gap_in_dim.0, cache.gap_in_dim.1);

        let mut conv_grads = Vec::with_capacity(3);
        let mut bn_grads = Vec::with_capacity(3);
        let convs = [&self.conv1, &self.conv2, &self.conv3];
        let bns = self.bn_layers();
        for layer in (0..3).rev() {
            let dr = avg_pool2_backward(&grad);
            debug_assert_eq!((dr.dim().2, dr.dim().3), cache.pool_in_dims[layer]);
            let db = relu_backward(&cache.relu_in[layer], &dr);
            let (dc, dgamma, dbeta) = bns[layer].backward(&cache.bn_caches[layer], &db);
            let (dx, dw, dbias) = convs[layer].backward(&cache.conv_caches[layer], &dc);
            conv_grads.push((dw, dbias));
            bn_grads.push((dgamma, dbeta));
            grad = dx;
        }
        conv_grads.reverse();
        bn_grads.reverse();
        let _ = &cache.x;

        let mut flat = Vec::new();
        for layer in 0..3 {
            flat.extend(conv_grads[layer].0.iter());
            flat.extend(conv_grads[layer].1.iter());
            flat.extend(bn_grads[layer].0.iter());
            flat.extend(bn_grads[layer].1.iter());
        }
        flat.extend(gw_head.iter());
        flat.extend(gb_head.iter());
        flat
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (conv, bn) in [
            (&self.conv1, &self.bn1),
            (&self.conv2, &self.bn2),
            (&self.conv3, &self.bn3),
        ] {
            flat.extend(conv.weight.iter());
            flat.extend(conv.bias.iter());
            flat.extend(bn.gamma.iter());
            flat.extend(bn.beta.iter());
        }
        flat.extend(self.head.weight.iter());
        flat.extend(self.head.bias.iter());
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for (conv, bn) in [
            (&mut self.conv1, &mut self.bn1),
            (&mut self.conv2, &mut self.bn2),
            (&mut self.conv3, &mut self.bn3),
        ] {
            for v in conv.weight.iter_mut() {
                *v = it.next().expect("param length");
            }
            for v in conv.bias.iter_mut() {
                *v = it.next().expect("param length");
            }
            for v in bn.gamma.iter_mut() {
                *v = it.next().expect("param length");
            }
            for v in bn.beta.iter_mut() {
                *v = it.next().expect("param length");
            }
        }
        for v in self.head.weight.iter_mut() {
            *v = it.next().expect("param length");
        }
        for v in self.head.bias.iter_mut() {
            *v = it.next().expect("param length");
        }
        assert!(it.next().is_none(), "param length mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.params_flat().len()
    }

    /// Stored running statistics of all BN layers.
    pub fn bn_statistics(&self) -> BNStatistics {
        BNStatistics {
            layers: self.bn_layers().iter().map(|bn| bn.stats()).collect(),
        }
    }

    pub fn set_bn_statistics(&mut self, stats: &BNStatistics) -> Result<()> {
        if stats.layers.len() != 3 {
            return Err(GttaError::Shape("expected 3 BN layers".into()));
        }
        self.bn1.set_stats(&stats.layers[0])?;
        self.bn2.set_stats(&stats.layers[1])?;
        self.bn3.set_stats(&stats.layers[2])?;
        Ok(())
    }

    /// Per-layer moments of the pre-normalization activations of `x`,
    /// computed with train-mode normalization in a single forward pass.
    pub fn collect_batch_stats(&self, x: &Tensor4) -> Result<BNStatistics> {
        let (n, _, h, w) = x.dim();
        if n < 2 && h * w < 2 {
            return Err(GttaError::DegenerateStats(
                "batch too small for meaningful moments".into(),
            ));
        }
        let mut layers = Vec::with_capacity(3);
        let (c1, _) = self.conv1.forward(x);
        let (m, s) = BatchNorm2d::batch_moments(&c1);
        layers.push(LayerStats {
            mean: m.to_vec(),
            std: s.to_vec(),
        });
        let (b1, _) = self.bn1.forward(&c1, BnStats::Batch);
        let p1 = avg_pool2(&relu(&b1));
        let (c2, _) = self.conv2.forward(&p1);
        let (m, s) = BatchNorm2d::batch_moments(&c2);
        layers.push(LayerStats {
            mean: m.to_vec(),
            std: s.to_vec(),
        });
        let (b2, _) = self.bn2.forward(&c2, BnStats::Batch);
        let p2 = avg_pool2(&relu(&b2));
        let (c3, _) = self.conv3.forward(&p2);
        let (m, s) = BatchNorm2d::batch_moments(&c3);
        layers.push(LayerStats {
            mean: m.to_vec(),
            std: s.to_vec(),
        });
        Ok(BNStatistics { layers })
    }

    /// Updates the stored running statistics from one batch (used during
    /// source training, momentum 0.1).
    fn update_running_stats(&mut self, x: &Tensor4, momentum: f64) {
        let (c1, _) = self.conv1.forward(x);
        let (m1, s1) = BatchNorm2d::batch_moments(&c1);
        self.bn1.update_running(&m1, &s1, momentum);
        let (b1, _) = self.bn1.forward(&c1, BnStats::Batch);
        let p1 = avg_pool2(&relu(&b1));
        let (c2, _) = self.conv2.forward(&p1);
        let (m2, s2) = BatchNorm2d::batch_moments(&c2);
        self.bn2.update_running(&m2, &s2, momentum);
        let (b2, _) = self.bn2.forward(&c2, BnStats::Batch);
        let p2 = avg_pool2(&relu(&b2));
        let (c3, _) = self.conv3.forward(&p2);
        let (m3, s3) = BatchNorm2d::batch_moments(&c3);
        self.bn3.update_running(&m3, &s3, momentum);
    }
}

// ---------------------------------------------------------------------------
// Source pre-training
// ---------------------------------------------------------------------------

/// Gradient of mean cross-entropy w.r.t. logits: (softmax - onehot) / n.
pub fn ce_logits_grad(probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    g.mapv_inplace(|e| e / n);
    g
}

pub fn mean_ce_loss(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(probs[[i, y]].max(1e-12)).ln())
        .sum::<f64>()
        / n
}

pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Trains a classifier from scratch on the labeled source set.
pub fn train_source(
    data: &LabeledImageSet,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Classifier> {
    let mut model = Classifier::new(data.class_count, seed);
    model.bn_mode = BnMode::TrainStats;
    let mut adam = Adam::new(model.param_count());
    let batch_size = 32.min(data.len());
    let mut rng = seeded_rng(seed, &[0x0007_ea14]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.select(chunk);
            let cache = model.forward_cached(&batch.images)?;
            let loss = mean_ce_loss(&cache.softmax, &batch.labels);
            if !loss.is_finite() {
                return Err(GttaError::Training(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            let dlogits = ce_logits_grad(&cache.softmax, &batch.labels);
            let grads = model.backward(&cache, &dlogits);
            let mut params = model.params_flat();
            adam.step(&mut params, &grads, lr)?;
            model.set_params_flat(&params);
            model.update_running_stats(&batch.images, 0.1);
        }
    }
    model.bn_mode = BnMode::EvalStats;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Style-transfer encoder / decoder
// ---------------------------------------------------------------------------

const ENC_CH1: usize = 16;
const ENC_CH2: usize = 32;

/// Two conv blocks with a tap after each ReLU; E() is the second tap.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct EncoderCache {
    c1: Tensor4,
    r1: Tensor4,
    c2: Tensor4,
    cc1: ConvCache,
    cc2: ConvCache,
    /// tap outputs, shallow to deep
    pub taps: [Tensor4; 2],
}

impl Encoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, &[0x00e2_c0de]);
        Encoder {
            conv1: Conv2d::new(crate::toy_data::IMG_CHANNELS, ENC_CH1, &mut rng),
            conv2: Conv2d::new(ENC_CH1, ENC_CH2, &mut rng),
        }
    }

    pub fn tap_count(&self) -> usize {
        2
    }

    pub fn forward_cached(&self, x: &Tensor4) -> EncoderCache {
        let (c1, cc1) = self.conv1.forward(x);
        let r1 = relu(&c1);
        let p1 = avg_pool2(&r1);
        let (c2, cc2) = self.conv2.forward(&p1);
        let r2 = relu(&c2);
        EncoderCache {
            taps: [r1.clone(), r2],
            c1,
            r1,
            c2,
            cc1,
            cc2,
        }
    }

    /// Top-layer embedding E(x).
    pub fn encode(&self, x: &Tensor4) -> Tensor4 {
        let cache = self.forward_cached(x);
        cache.taps[1].clone()
    }

    /// Backpropagates gradients injected at both taps to the input.
    pub fn backward_input(&self, cache: &EncoderCache, dtaps: [&Tensor4; 2]) -> Tensor4 {
        let dc2 = relu_backward(&cache.c2, dtaps[1]);
        let (dp1, _, _) = self.conv2.backward(&cache.cc2, &dc2);
        let mut dr1 = avg_pool2_backward(&dp1);
        dr1 += dtaps[0];
        let dc1 = relu_backward(&cache.c1, &dr1);
        let _ = &cache.r1;
        let (dx, _, _) = self.conv1.backward(&cache.cc1, &dc1);
        dx
    }

    /// Same as `backward_input` but also returns parameter gradients
    /// (used only during autoencoder pre-training).
    pub fn backward_full(
        &self,
        cache: &EncoderCache,
        dtaps: [&Tensor4; 2],
    ) -> (Tensor4, Vec<f64>) {
        let dc2 = relu_backward(&cache.c2, dtaps[1]);
        let (dp1, gw2, gb2) = self.conv2.backward(&cache.cc2, &dc2);
        let mut dr1 = avg_pool2_backward(&dp1);
        dr1 += dtaps[0];
        let dc1 = relu_backward(&cache.c1, &dr1);
        let (dx, gw1, gb1) = self.conv1.backward(&cache.cc1, &dc1);
        let mut flat = Vec::new();
        flat.extend(gw1.iter());
        flat.extend(gb1.iter());
        flat.extend(gw2.iter());
        flat.extend(gb2.iter());
        (dx, flat)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend(self.conv1.weight.iter());
        flat.extend(self.conv1.bias.iter());
        flat.extend(self.conv2.weight.iter());
        flat.extend(self.conv2.bias.iter());
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self
            .conv1
            .weight
            .iter_mut()
            .chain(self.conv1.bias.iter_mut())
            .chain(self.conv2.weight.iter_mut())
            .chain(self.conv2.bias.iter_mut())
        {
            *v = it.next().expect("param length");
        }
        assert!(it.next().is_none());
    }

    pub fn param_checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params_flat() {
            acc ^= v.to_bits();
            acc = acc.wrapping_mul(0x1000_0000_01b3);
        }
        acc
    }
}

/// Mirrors the encoder: conv -> ReLU -> nearest upsample -> conv -> sigmoid.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct DecoderCache {
    c1: Tensor4,
    up: Tensor4,
    c2: Tensor4,
    cc1: ConvCache,
    cc2: ConvCache,
    pub out: Tensor4,
}

impl Decoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, &[0x00de_c0de]);
        Decoder {
            conv1: Conv2d::new(ENC_CH2, ENC_CH1, &mut rng),
            conv2: Conv2d::new(ENC_CH1, crate::toy_data::IMG_CHANNELS, &mut rng),
        }
    }

    pub fn forward_cached(&self, z: &Tensor4) -> DecoderCache {
        let (c1, cc1) = self.conv1.forward(z);
        let r1 = relu(&c1);
        let up = upsample2(&r1);
        let (c2, cc2) = self.conv2.forward(&up);
        let out = c2.mapv(sigmoid);
        DecoderCache {
            c1,
            up,
            c2,
            cc1,
            cc2,
            out,
        }
    }

    pub fn decode(&self, z: &Tensor4) -> Tensor4 {
        self.forward_cached(z).out
    }

    /// Parameter gradients (flat) and input gradient from d(loss)/d(output).
    pub fn backward(&self, cache: &DecoderCache, dout: &Tensor4) -> (Vec<f64>, Tensor4) {
        let mut dc2 = dout.clone();
        dc2.zip_mut_with(&cache.c2, |d, &pre| {
            let s = sigmoid(pre);
            *d *= s * (1.0 - s);
        });
        let (dup, gw2, gb2) = self.conv2.backward(&cache.cc2, &dc2);
        let dr1 = upsample2_backward(&dup);
        let dc1 = relu_backward(&cache.c1, &dr1);
        let _ = &cache.up;
        let (dz, gw1, gb1) = self.conv1.backward(&cache.cc1, &dc1);
        let mut flat = Vec::new();
        flat.extend(gw1.iter());
        flat.extend(gb1.iter());
        flat.extend(gw2.iter());
        flat.extend(gb2.iter());
        (flat, dz)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend(self.conv1.weight.iter());
        flat.extend(self.conv1.bias.iter());
        flat.extend(self.conv2.weight.iter());
        flat.extend(self.conv2.bias.iter());
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self
            .conv1
            .weight
            .iter_mut()
            .chain(self.conv1.bias.iter_mut())
            .chain(self.conv2.weight.iter_mut())
            .chain(self.conv2.bias.iter_mut())
        {
            *v = it.next().expect("param length");
        }
        assert!(it.next().is_none());
    }

    pub fn param_count(&self) -> usize {
        self.params_flat().len()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Frozen encoder plus trainable decoder.
#[derive(Debug, Clone)]
pub struct EncoderDecoderState {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Autoencoder pre-training of the encoder/decoder on source images.
/// After this the encoder is frozen for good.
pub fn pretrain_autoencoder(
    data: &LabeledImageSet,
    iters: usize,
    lr: f64,
    seed: u64,
) -> Result<EncoderDecoderState> {
    let mut enc = Encoder::new(seed);
    let mut dec = Decoder::new(seed.wrapping_add(1));
    let enc_len = enc.params_flat().len();
    let dec_len = dec.params_flat().len();
    let mut adam = Adam::new(enc_len + dec_len);
    let batch_size = 16.min(data.len());
    let mut rng = seeded_rng(seed, &[0x_ae_17]);
    for _ in 0..iters {
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let batch = data.select(&idx);
        let ec = enc.forward_cached(&batch.images);
        let dc = dec.forward_cached(&ec.taps[1]);
        let numel = dc.out.len() as f64;
        // MSE reconstruction; d/dout = 2 (out - x) / numel
        let dout = (&dc.out - &batch.images).mapv(|e| 2.0 * e / numel);
        let (dec_grads, dz) = dec.backward(&dc, &dout);
        let zero_tap = Tensor4::zeros(ec.taps[0].dim());
        let (_, enc_grads) = enc.backward_full(&ec, [&zero_tap, &dz]);
        let mut grads = enc_grads;
        grads.extend(dec_grads);
        let mut params = enc.params_flat();
        params.extend(dec.params_flat());
        adam.step(&mut params, &grads, lr)?;
        enc.set_params_flat(&params[..enc_len]);
        dec.set_params_flat(&params[enc_len..]);
    }
    Ok(EncoderDecoderState {
        encoder: enc,
        decoder: dec,
    })
}

/// Mean squared reconstruction error of the autoencoder on a batch.
pub fn reconstruction_mse(state: &EncoderDecoderState, images: &Tensor4) -> f64 {
    let z = state.encoder.encode(images);
    let out = state.decoder.decode(&z);
    (&out - images).mapv(|e| e * e).mean().unwrap()
}

// ---------------------------------------------------------------------------
// Checkpoints: flat f64 parameter blob + JSON manifest
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    architecture: String,
    class_count: usize,
    seed: u64,
    param_count: usize,
    bn_stats: BNStatistics,
}

pub fn save_classifier(model: &Classifier, seed: u64, bin: &Path, json: &Path) -> Result<()> {
    let params = model.params_flat();
    let mut f = std::fs::File::create(bin)?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for v in &params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    let manifest = CheckpointManifest {
        architecture: format!("conv{CH1}-{CH2}-{CH3}-gap-linear"),
        class_count: model.class_count,
        seed,
        param_count: params.len(),
        bn_stats: model.bn_statistics(),
    };
    std::fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_classifier(bin: &Path, json: &Path) -> Result<Classifier> {
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(json)?)?;
    let mut model = Classifier::new(manifest.class_count, manifest.seed);
    let mut raw = Vec::new();
    std::fs::File::open(bin)?.read_to_end(&mut raw)?;
    if raw.len() != manifest.param_count * 8 {
        return Err(GttaError::Parameter(format!(
            "checkpoint blob size {} does not match manifest ({})",
            raw.len(),
            manifest.param_count * 8
        )));
    }
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if params.len() != model.param_count() {
        return Err(GttaError::Parameter(
            "checkpoint does not match the current architecture".into(),
        ));
    }
    model.set_params_flat(&params);
    model.set_bn_statistics(&manifest.bn_stats)?;
    Ok(model)
}

use rand::Rng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_data::generate_dataset;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_rows_normalized() {
        let data = generate_dataset(0, 4, 8, 16).unwrap();
        let model = Classifier::new(4, 0);
        let mut m = model.clone();
        m.bn_mode = BnMode::TrainStats;
        let p = m.forward(&data.images).unwrap();
        for row in p.axis_iter(ndarray::Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_stats_rows_independent_of_batch() {
        let data = generate_dataset(0, 4, 8, 16).unwrap();
        let mut model = Classifier::new(4, 0);
        model.bn_mode = BnMode::EvalStats;
        let full = model.forward(&data.images).unwrap();
        let solo = model.forward(&data.select(&[3]).images).unwrap();
        for c in 0..4 {
            assert_relative_eq!(full[[3, c]], solo[[0, c]], epsilon = 1e-10);
        }
    }

    #[test]
    fn train_stats_rows_depend_on_companions() {
        let data = generate_dataset(0, 4, 8, 16).unwrap();
        let mut model = Classifier::new(4, 0);
        model.bn_mode = BnMode::TrainStats;
        let a = model.forward(&data.select(&[0, 1, 2, 3]).images).unwrap();
        let b = model.forward(&data.select(&[0, 4, 5, 6]).images).unwrap();
        let diff: f64 = (0..4).map(|c| (a[[0, c]] - b[[0, c]]).abs()).sum();
        assert!(diff > 1e-9, "train-mode rows should depend on batch");
    }

    #[test]
    fn epochs_zero_is_chance_level() {
        let data = generate_dataset(0, 4, 64, 16).unwrap();
        let model = train_source(&data, 0, 1e-3, 0).unwrap();
        let p = model.forward(&data.images).unwrap();
        let acc = accuracy(&p, &data.labels);
        assert!(acc < 0.6, "untrained accuracy should be near chance, got {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_dataset(0, 4, 48, 16).unwrap();
        let a = train_source(&data, 2, 1e-3, 7).unwrap();
        let b = train_source(&data, 2, 1e-3, 7).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
    }

    #[test]
    fn bn_mode_switch_keeps_parameters() {
        let data = generate_dataset(0, 4, 16, 16).unwrap();
        let mut model = train_source(&data, 1, 1e-3, 0).unwrap();
        let before = model.params_flat();
        model.bn_mode = BnMode::TrainStats;
        let _ = model.forward(&data.images).unwrap();
        model.bn_mode = BnMode::EvalStats;
        assert_eq!(model.params_flat(), before);
    }

    #[test]
    fn collect_batch_stats_close_to_running_on_train_data() {
        let data = generate_dataset(0, 4, 96, 16).unwrap();
        let model = train_source(&data, 8, 1e-3, 0).unwrap();
        let batch_stats = model.collect_batch_stats(&data.images).unwrap();
        let running = model.bn_statistics();
        for (b, r) in batch_stats.layers.iter().zip(running.layers.iter()) {
            for (bs, rs) in b.std.iter().zip(r.std.iter()) {
                let rel = (bs - rs).abs() / rs.abs().max(1e-6);
                assert!(rel < 0.35, "std mismatch rel {rel}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let data = generate_dataset(0, 4, 16, 16).unwrap();
        let model = train_source(&data, 1, 1e-3, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        let json = dir.path().join("ckpt.json");
        save_classifier(&model, 3, &bin, &json).unwrap();
        let back = load_classifier(&bin, &json).unwrap();
        assert_eq!(back.params_flat(), model.params_flat());
        assert_eq!(back.bn_statistics(), model.bn_statistics());
    }

    #[test]
    fn classifier_backward_matches_finite_differences() {
        let data = generate_dataset(0, 3, 6, 16).unwrap();
        let mut model = Classifier::new(3, 5);
        model.bn_mode = BnMode::TrainStats;
        let cache = model.forward_cached(&data.images).unwrap();
        let dlogits = ce_logits_grad(&cache.softmax, &data.labels);
        let grads = model.backward(&cache, &dlogits);
        let params = model.params_flat();
        let loss_at = |m: &Classifier| -> f64 {
            let c = m.forward_cached(&data.images).unwrap();
            mean_ce_loss(&c.softmax, &data.labels)
        };
        let mut rng = seeded_rng(99, &[1]);
        let h = 1e-5;
        for _ in 0..10 {
            let i = rng.gen_range(0..params.len());
            let mut pp = params.clone();
            pp[i] += h;
            let mut mp = model.clone();
            mp.set_params_flat(&pp);
            let mut pm = params.clone();
            pm[i] -= h;
            let mut mm = model.clone();
            mm.set_params_flat(&pm);
            let fd = (loss_at(&mp) - loss_at(&mm)) / (2.0 * h);
            let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {}", grads[i], fd);
        }
    }

    #[test]
    fn autoencoder_learns_to_reconstruct() {
        let data = generate_dataset(0, 4, 32, 16).unwrap();
        let init = EncoderDecoderState {
            encoder: Encoder::new(1),
            decoder: Decoder::new(2),
        };
        let before = reconstruction_mse(&init, &data.images);
        let trained = pretrain_autoencoder(&data, 150, 1e-3, 1).unwrap();
        let after = reconstruction_mse(&trained, &data.images);
        assert!(after < before * 0.5, "mse {before} -> {after}");
    }
}
