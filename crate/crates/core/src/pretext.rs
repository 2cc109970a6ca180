//! Shift pretext task: paired slices, tempo-error and reconstruction losses,
//! and the training loop.
//!
//! Two slices of the same log-tempogram frame, offset by `k1` and `k2` bins,
//! go through the shared model. The tempo head must reproduce the offset
//! difference (`t1 - t2 = sigma * (k2 - k1)`), the decoder must rebuild each
//! slice from its scalar.

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, backward, decoder_forward, encoder_forward, AdamState, Gradients, ModelParams,
};
use crate::tempogram::LogTempogram;

/// Smallest and largest vertical offset, in log bins.
pub const SHIFT_MIN: usize = 11;
pub const SHIFT_MAX: usize = 18;

/// Two slices of one frame at offsets `k1` and `k2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub k1: usize,
    pub k2: usize,
    pub frame_index: usize,
}

/// Copies `len` bins of `frame` starting at bin `offset`.
pub fn slice_at(logtg: &LogTempogram, frame: usize, offset: usize, len: usize) -> Result<Vec<f64>> {
    if frame >= logtg.n_frames() {
        return Err(Error::contract(format!(
            "frame {frame} out of range ({} frames)",
            logtg.n_frames()
        )));
    }
    if offset + len > logtg.n_bins() {
        return Err(Error::config(format!(
            "slice [{offset}, {}) exceeds {} log bins",
            offset + len,
            logtg.n_bins()
        )));
    }
    Ok(logtg.values.slice(s![frame, offset..offset + len]).to_vec())
}

/// Draws `k1`, `k2` independently from `{11, ..., 18}` and copies both slices.
pub fn sample_pair<R: Rng>(
    logtg: &LogTempogram,
    frame: usize,
    slice_len: usize,
    rng: &mut R,
) -> Result<SlicePair> {
    if logtg.n_bins() < SHIFT_MAX + slice_len {
        return Err(Error::config(format!(
            "log tempogram has {} bins, need at least {}",
            logtg.n_bins(),
            SHIFT_MAX + slice_len
        )));
    }
    let k1 = rng.random_range(SHIFT_MIN..=SHIFT_MAX);
    let k2 = rng.random_range(SHIFT_MIN..=SHIFT_MAX);
    Ok(SlicePair {
        x1: slice_at(logtg, frame, k1, slice_len)?,
        x2: slice_at(logtg, frame, k2, slice_len)?,
        k1,
        k2,
        frame_index: frame,
    })
}

/// `1 / (q * log2(t_max / t_min))`: output units per log bin over the training range.
pub fn sigma_of(t_min: f64, t_max: f64, q: f64) -> Result<f64> {
    if !(t_min > 0.0 && t_max > t_min && q > 0.0) || !t_max.is_finite() {
        return Err(Error::config(format!(
            "sigma needs t_max > t_min > 0 and q > 0, got t_min={t_min} t_max={t_max} q={q}"
        )));
    }
    Ok(1.0 / (q * (t_max / t_min).log2()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub sigma: f64,
    pub delta: f64,
    pub w_t: f64,
    pub w_r: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub q: f64,
}

impl LossConfig {
    pub fn new(t_min: f64, t_max: f64, q: f64) -> Result<Self> {
        Ok(Self {
            sigma: sigma_of(t_min, t_max, q)?,
            delta: 0.25,
            w_t: 1e4,
            w_r: 1.0,
            t_min,
            t_max,
            q,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expect = sigma_of(self.t_min, self.t_max, self.q)?;
        if (self.sigma - expect).abs() > 1e-12 * expect {
            return Err(Error::config("sigma does not match t_min, t_max and q"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config("huber delta must be positive"));
        }
        if !(self.w_t >= 0.0 && self.w_r >= 0.0) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(30.0, 240.0, 40.0).expect("default tempo range is valid")
    }
}

/// Signed tempo residual `(t1 - t2) - sigma * (k2 - k1)`.
pub fn tempo_residual(t1: f64, t2: f64, k1: usize, k2: usize, sigma: f64) -> f64 {
    (t1 - t2) - sigma * (k2 as f64 - k1 as f64)
}

/// Relative tempo error: absolute value of [`tempo_residual`].
pub fn tempo_error(t1: f64, t2: f64, k1: usize, k2: usize, sigma: f64) -> f64 {
    tempo_residual(t1, t2, k1, k2, sigma).abs()
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        0.5 * delta * delta + delta * (a - delta)
    }
}

/// Derivative of [`huber`]; at `|x| = delta` the quadratic side is used.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Branch outputs and offsets of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempoItem {
    pub t1: f64,
    pub t2: f64,
    pub k1: usize,
    pub k2: usize,
}

/// Mean Huber tempo error over a batch.
pub fn loss_t(batch: &[TempoItem], cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("tempo loss over an empty batch"));
    }
    let sum: f64 = batch
        .iter()
        .map(|it| {
            huber(
                tempo_error(it.t1, it.t2, it.k1, it.k2, cfg.sigma),
                cfg.delta,
            )
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Mean over the batch of `|x1 - x̂1|² + |x2 - x̂2|²`. Rows are samples.
pub fn loss_r(
    x1: ArrayView2<f64>,
    xhat1: ArrayView2<f64>,
    x2: ArrayView2<f64>,
    xhat2: ArrayView2<f64>,
) -> Result<f64> {
    let dim = x1.dim();
    if xhat1.dim() != dim || x2.dim() != dim || xhat2.dim() != dim {
        return Err(Error::contract(format!(
            "reconstruction shapes differ: {:?} {:?} {:?} {:?}",
            dim,
            xhat1.dim(),
            x2.dim(),
            xhat2.dim()
        )));
    }
    if dim.0 == 0 {
        return Err(Error::contract("reconstruction loss over an empty batch"));
    }
    let sq = |a: &ArrayView2<f64>, b: &ArrayView2<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
    };
    Ok((sq(&x1, &xhat1) + sq(&x2, &xhat2)) / dim.0 as f64)
}

pub fn total_loss(l_t: f64, l_r: f64, cfg: &LossConfig) -> f64 {
    cfg.w_t * l_t + cfg.w_r * l_r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub loss_t: f64,
    pub loss_r: f64,
    pub total: f64,
}

/// Forward both branches through the shared parameters, evaluate the combined
/// loss and return its exact gradient.
///
/// `x1`, `x2` hold one slice per row; `k1`, `k2` the matching offsets.
pub fn loss_and_gradients(
    params: &ModelParams,
    x1: ArrayView2<f64>,
    x2: ArrayView2<f64>,
    k1: &[usize],
    k2: &[usize],
    cfg: &LossConfig,
) -> Result<(BatchLoss, Gradients)> {
    let batch = x1.nrows();
    if x2.dim() != x1.dim() || k1.len() != batch || k2.len() != batch {
        return Err(Error::contract("pair batch components disagree in size"));
    }
    if batch == 0 {
        return Err(Error::contract("empty batch"));
    }
    // Both branches in one pass: rows [0, B) are branch 1, [B, 2B) branch 2.
    let x = concatenate(Axis(0), &[x1, x2]).map_err(|e| Error::contract(e.to_string()))?;
    let (t, enc) = encoder_forward(params, x.view())?;
    let (xhat, dec) = decoder_forward(params, t.as_slice().unwrap())?;

    let items: Vec<TempoItem> = (0..batch)
        .map(|i| TempoItem {
            t1: t[i],
            t2: t[batch + i],
            k1: k1[i],
            k2: k2[i],
        })
        .collect();
    let l_t = loss_t(&items, cfg)?;
    let l_r = loss_r(
        x1,
        xhat.slice(s![..batch, ..]),
        x2,
        xhat.slice(s![batch.., ..]),
    )?;
    let total = total_loss(l_t, l_r, cfg);

    let scale = 1.0 / batch as f64;
    let mut d_t = vec![0.0; 2 * batch];
    for (i, it) in items.iter().enumerate() {
        let r = tempo_residual(it.t1, it.t2, it.k1, it.k2, cfg.sigma);
        let g = cfg.w_t * scale * huber_grad(r, cfg.delta);
        d_t[i] = g;
        d_t[batch + i] = -g;
    }
    let d_xhat: Array2<f64> = (&xhat - &x) * (2.0 * cfg.w_r * scale);
    let grads = backward(params, &enc, &dec, &d_t, d_xhat.view())?;
    Ok((
        BatchLoss {
            loss_t: l_t,
            loss_r: l_r,
            total,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Use every `frame_stride`-th tempogram frame. 1 keeps all frames.
    #[serde(default = "default_frame_stride")]
    pub frame_stride: usize,
}

fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    15
}
fn default_lr() -> f64 {
    1e-4
}
fn default_frame_stride() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lr: default_lr(),
            seed: 0,
            frame_stride: default_frame_stride(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("need at least one epoch"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "learning rate must be finite and nonnegative",
            ));
        }
        if self.frame_stride == 0 {
            return Err(Error::config("frame stride must be positive"));
        }
        Ok(())
    }
}

/// Mean losses of one epoch, weighted by batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    #[serde(rename = "loss_T")]
    pub loss_t: f64,
    #[serde(rename = "loss_R")]
    pub loss_r: f64,
    pub loss_total: f64,
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochStats>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// `(track, frame)` for every `stride`-th frame of every track.
pub fn frame_pool(dataset: &[LogTempogram], stride: usize) -> Vec<(usize, usize)> {
    dataset
        .iter()
        .enumerate()
        .flat_map(|(track, tg)| (0..tg.n_frames()).step_by(stride).map(move |f| (track, f)))
        .collect()
}

/// What the training loop reports when it aborts on a non-finite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
    pub loss: BatchLoss,
}

/// Trains `params` in place.
///
/// Frames from all tracks are pooled and reshuffled every epoch; each frame
/// contributes one pair per epoch. `on_epoch` sees the stats and the current
/// state after every epoch (checkpointing hook). On a non-finite loss the
/// loop stops before applying that batch and returns a numerical error;
/// `params` and `adam` then hold the last finite state.
pub fn train<F>(
    dataset: &[LogTempogram],
    params: &mut ModelParams,
    adam: &mut AdamState,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochStats>>
where
    F: FnMut(&EpochStats, &ModelParams, &AdamState) -> Result<()>,
{
    train_cfg.validate()?;
    loss_cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::data("training set is empty"))?;
    if dataset
        .iter()
        .any(|tg| tg.axis != first.axis || tg.n_bins() != first.n_bins())
    {
        return Err(Error::config(
            "all tempograms must share t0, Q and bin count",
        ));
    }
    let slice_len = params.config.encoder.input_len;
    if first.n_bins() < SHIFT_MAX + slice_len {
        return Err(Error::config(format!(
            "log tempograms have {} bins, need at least {}",
            first.n_bins(),
            SHIFT_MAX + slice_len
        )));
    }
    let mut pool = frame_pool(dataset, train_cfg.frame_stride);
    if pool.is_empty() {
        return Err(Error::data("training set has no frames"));
    }
    adam.lr = train_cfg.lr;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    for epoch in 1..=train_cfg.epochs {
        pool.shuffle(&mut rng);
        let (mut sum_t, mut sum_r, mut sum_total) = (0.0, 0.0, 0.0);
        for (batch_index, chunk) in pool.chunks(train_cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut x1 = Array2::zeros((b, slice_len));
            let mut x2 = Array2::zeros((b, slice_len));
            let mut k1 = Vec::with_capacity(b);
            let mut k2 = Vec::with_capacity(b);
            for (row, &(track, frame)) in chunk.iter().enumerate() {
                let pair = sample_pair(&dataset[track], frame, slice_len, &mut rng)?;
                x1.row_mut(row).assign(&ndarray::ArrayView1::from(&pair.x1));
                x2.row_mut(row).assign(&ndarray::ArrayView1::from(&pair.x2));
                k1.push(pair.k1);
                k2.push(pair.k2);
            }
            let (loss, grads) =
                loss_and_gradients(params, x1.view(), x2.view(), &k1, &k2, loss_cfg)?;
            if !loss.total.is_finite() || !grads.max_abs().is_finite() {
                let d = Divergence {
                    epoch,
                    batch: batch_index,
                    loss,
                };
                return Err(Error::numerical(format!(
                    "non-finite loss at epoch {} batch {} (L_T={}, L_R={})",
                    d.epoch, d.batch, d.loss.loss_t, d.loss.loss_r
                )));
            }
            adam_step(params, &grads, adam)?;
            sum_t += loss.loss_t * b as f64;
            sum_r += loss.loss_r * b as f64;
            sum_total += loss.total * b as f64;
        }
        let n = pool.len() as f64;
        let stats = EpochStats {
            epoch,
            loss_t: sum_t / n,
            loss_r: sum_r / n,
            loss_total: sum_total / n,
        };
        log::info!(
            "epoch {epoch}: L_T={:.6e} L_R={:.4} L={:.4}",
            stats.loss_t,
            stats.loss_r,
            stats.loss_total
        );
        on_epoch(&stats, params, adam)?;
        history.push(stats);
    }
    Ok(history)
}
