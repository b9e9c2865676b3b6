//! Adaptation criteria, the Adam optimizer, the epoch loop and evaluation metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chansim::WindowedDataset;
use crate::detector::{build_trellis, llr_backward, maxlog_llr_from, viterbi_hard_from, SoftDecision, Start, Trellis};
use crate::equalizer::{init_mlp, Checkpoint, MlpParams, MlpSpec, PrTarget};
use crate::grad::{sigmoid, softplus, ParamSet};
use crate::{Error, Result};

pub const DEFAULT_LLR_CLIP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Mse,
    Ce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetMode {
    /// Fixed taps; with `unit_energy` they are rescaled to unit norm, which
    /// leaves hard decisions unchanged but keeps LLRs in a trainable range.
    Fixed {
        taps: Vec<f64>,
        #[serde(default)]
        unit_energy: bool,
    },
    Adaptive { len: usize, monic: bool },
}

impl Default for TargetMode {
    fn default() -> Self {
        TargetMode::Fixed { taps: vec![4.0, 7.0, 1.0], unit_energy: false }
    }
}

impl TargetMode {
    pub fn fixed(taps: &[f64]) -> Self {
        TargetMode::Fixed { taps: taps.to_vec(), unit_energy: false }
    }

    pub fn adaptive() -> Self {
        TargetMode::Adaptive { len: 5, monic: true }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, TargetMode::Adaptive { .. })
    }

    pub fn initial_target(&self) -> Result<PrTarget> {
        match self {
            TargetMode::Fixed { taps, unit_energy: false } => PrTarget::fixed(taps),
            TargetMode::Fixed { taps, unit_energy: true } => {
                let norm = taps.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !(norm > 0.0) {
                    return Err(Error::InvalidParameter("unit-energy target needs a nonzero tap".into()));
                }
                PrTarget::fixed(&taps.iter().map(|g| g / norm).collect::<Vec<_>>())
            }
            TargetMode::Adaptive { len, monic: true } => PrTarget::monic(*len),
            TargetMode::Adaptive { len, monic: false } => {
                let mut t = PrTarget::monic(*len)?;
                t.monic = false;
                Ok(t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub criterion: Criterion,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub target_mode: TargetMode,
    pub seed: u64,
    /// Symmetric LLR clip applied to reported CE values. Gradients follow the
    /// unclipped loss, whose slope is already bounded by 1.
    pub llr_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            criterion: Criterion::Mse,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 4,
            adam: AdamConfig::default(),
            target_mode: TargetMode::default(),
            seed: 1,
            llr_clip: DEFAULT_LLR_CLIP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be positive".into()));
        }
        if !(self.llr_clip > 0.0) {
            return Err(Error::InvalidParameter("llr_clip must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::InvalidParameter("Adam needs β1, β2 in [0, 1) and ε > 0".into()));
        }
        self.target_mode.initial_target().map(|_| ())
    }
}

// ---------------------------------------------------------------------------
// Losses

pub fn mse_loss(e: &[f64]) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64)
}

/// One bit's cross-entropy term with the LLR clipped to `±clip`.
pub fn ce_term(llr: f64, bit: i8, clip: f64) -> f64 {
    let l = llr.clamp(-clip, clip);
    if bit > 0 {
        softplus(-l)
    } else {
        softplus(l)
    }
}

/// Mean cross entropy between the true bits and the LLR-implied estimates.
pub fn ce_loss(llr: &[f64], bits: &[i8], clip: f64) -> Result<f64> {
    if llr.len() != bits.len() {
        return Err(Error::LengthMismatch(format!("{} LLRs for {} bits", llr.len(), bits.len())));
    }
    if llr.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(llr.iter().zip(bits).map(|(&l, &u)| ce_term(l, u, clip)).sum::<f64>() / llr.len() as f64)
}

/// `∂ce/∂llr`: `P̂⁺` for a `−1` bit, `−P̂⁻` for a `+1` bit.
pub fn dce_dllr(llr: f64, bit: i8) -> f64 {
    if bit > 0 {
        -sigmoid(-llr)
    } else {
        sigmoid(llr)
    }
}

/// One steepest-descent step on the per-bit CE with respect to the LLRs themselves.
pub fn llr_descent_step(llr: &[f64], bits: &[i8], mu: f64) -> Vec<f64> {
    llr.iter().zip(bits).map(|(&l, &u)| l - mu * dce_dllr(l, u)).collect()
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam update; frozen entries are skipped and keep zero moments.
pub fn adam_step(params: &mut ParamSet, grads: &[f64], state: &mut AdamState, adam: &AdamConfig, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::LengthMismatch(format!(
            "Adam over {n} learnables got {} gradients and {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let frozen = params.frozen().to_vec();
    let values = params.values_mut();
    for i in 0..n {
        if frozen[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * g;
        state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + adam.epsilon);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model

/// Equalizer plus partial-response target, trained jointly when the target adapts.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mlp: MlpParams,
    pub target: PrTarget,
    pub adapt_target: bool,
}

impl Model {
    pub fn new(spec: &MlpSpec, target_mode: &TargetMode, seed: u64) -> Result<Self> {
        Ok(Self {
            mlp: init_mlp(spec, seed)?,
            target: target_mode.initial_target()?,
            adapt_target: target_mode.is_adaptive(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self { mlp: ckpt.mlp()?, target: ckpt.target(), adapt_target: ckpt.adapt_target })
    }

    pub fn checkpoint(&self, decision_delay: i64, steps: u64) -> Checkpoint {
        Checkpoint {
            layer_sizes: self.mlp.spec.layer_sizes.clone(),
            activation: self.mlp.spec.activation,
            weights: self.mlp.params.values().to_vec(),
            target_taps: self.target.taps.clone(),
            monic: self.target.monic,
            adapt_target: self.adapt_target,
            decision_delay,
            steps,
        }
    }

    /// Every learnable in one set: the network groups, then a `target` group.
    /// Target taps are frozen unless they adapt; the monic tap is always frozen.
    pub fn param_set(&self) -> ParamSet {
        let mut set = self.mlp.params.clone();
        let offset = set.len();
        set.push_group("target", &self.target.taps);
        for j in 0..self.target.len() {
            let frozen = !self.adapt_target || (self.target.monic && j == 0);
            set.set_frozen(offset + j, frozen);
        }
        set
    }

    pub fn load_param_set(&mut self, set: &ParamSet) {
        let n = self.mlp.n_params();
        self.mlp.params.values_mut().copy_from_slice(&set.values()[..n]);
        self.target.taps.copy_from_slice(&set.values()[n..]);
        self.target.enforce_monic();
    }

    pub fn n_learnables(&self) -> usize {
        self.mlp.n_params() + if self.adapt_target { self.target.len() - usize::from(self.target.monic) } else { 0 }
    }

    /// Equalizer outputs for windows `range` of sector `s`.
    pub fn outputs(&self, data: &WindowedDataset, s: usize, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut buf = vec![0.0; 2 * data.d_in()];
        range
            .map(|i| {
                data.window(s, i).write_input(&mut buf);
                self.mlp.predict(&buf)
            })
            .collect()
    }

    /// Noiseless target output for stage `i` of sector `s`.
    pub fn reference(&self, data: &WindowedDataset, s: usize, i: usize) -> f64 {
        let k = data.stage_bit_index(i);
        let sector = data.sector(s);
        self.target.output_from_history((0..self.target.len() as i64).map(|m| sector.bit(k - m)))
    }
}

// ---------------------------------------------------------------------------
// Decision delay

pub const DELAY_TIE_TOLERANCE: f64 = 0.01;

/// Picks the decision delay whose least-squares linear equalizer reaches the
/// lowest normalized error against `target`, using at most `max_windows`
/// windows per candidate from the first sector. Scores within
/// [`DELAY_TIE_TOLERANCE`] of the best count as ties.
pub fn select_delay(data: &WindowedDataset, target: &PrTarget, max_windows: usize) -> Result<i64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let half = data.half() as i64;
    let dim = 2 * data.d_in() + 1;
    let n = data.windows_per_sector(0).min(max_windows.max(dim));
    let mut scores = Vec::new();
    let mut buf = vec![0.0; dim];
    for delay in -half..=half {
        let d = data.rewindow(data.d_in(), delay)?;
        let mut ata = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut atb = nalgebra::DVector::<f64>::zeros(dim);
        let mut refs = Vec::with_capacity(n);
        for i in 0..n {
            d.window(0, i).write_input(&mut buf[..dim - 1]);
            buf[dim - 1] = 1.0;
            let k = d.stage_bit_index(i);
            let r = target.output_from_history((0..target.len() as i64).map(|m| d.sector(0).bit(k - m)));
            let x = nalgebra::DVector::from_column_slice(&buf);
            ata.ger(1.0, &x, &x, 1.0);
            atb.axpy(r, &x, 1.0);
            refs.push(r);
        }
        let Some(chol) = ata.clone().cholesky() else { continue };
        let w = chol.solve(&atb);
        // Residual energy ‖r‖² − wᵀAᵀr for the LS solution.
        let energy: f64 = refs.iter().map(|r| r * r).sum();
        let score = (energy - w.dot(&atb)) / energy;
        scores.push((delay, score));
    }
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::InvalidParameter("no decision delay admits a least-squares fit".into()));
    }
    // A long window makes neighbouring delays nearly equivalent; prefer the most central.
    Ok(scores
        .iter()
        .filter(|s| s.1 <= best * (1.0 + DELAY_TIE_TOLERANCE))
        .min_by_key(|s| (s.0.abs(), s.0))
        .map(|s| s.0)
        .unwrap_or(0))
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorMetrics {
    pub epoch: usize,
    pub sector: usize,
    pub mse: f64,
    pub ce: f64,
    pub ber: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mse: f64,
    pub ce: f64,
    pub ber: f64,
}

/// Adaptation curves; row `r` is sector `r mod n_sectors` of epoch `r div n_sectors`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rows: Vec<SectorMetrics>,
}

impl MetricsRecord {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,sector,mse,ce,ber")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:.9e},{:.9e},{:.9e}", r.epoch, r.sector, r.mse, r.ce, r.ber)?;
        }
        Ok(())
    }

    pub fn n_epochs(&self) -> usize {
        self.rows.last().map_or(0, |r| r.epoch + 1)
    }

    pub fn epoch_means(&self, epoch: usize) -> Option<MetricMeans> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.epoch == epoch).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(MetricMeans {
            mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            ce: rows.iter().map(|r| r.ce).sum::<f64>() / n,
            ber: rows.iter().map(|r| r.ber).sum::<f64>() / n,
        })
    }

    /// Means over the last full epoch.
    pub fn final_means(&self) -> Option<MetricMeans> {
        self.n_epochs().checked_sub(1).and_then(|e| self.epoch_means(e))
    }

    /// Number of epochs until the epoch-mean BER first comes within `rel_tol`
    /// of the best epoch mean reached afterwards.
    pub fn epochs_to_convergence(&self, rel_tol: f64) -> Option<usize> {
        let bers: Vec<f64> = (0..self.n_epochs()).filter_map(|e| self.epoch_means(e)).map(|m| m.ber).collect();
        (0..bers.len()).find(|&e| {
            let best_after = bers[e..].iter().copied().fold(f64::INFINITY, f64::min);
            bers[e] <= best_after * (1.0 + rel_tol) + 1e-12
        })
        .map(|e| e + 1)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curves: MetricsRecord,
    pub adam: AdamState,
}

/// Trains `model` on every sector of `data`, one epoch being one pass over all sectors.
pub fn train(config: &TrainConfig, mut model: Model, data: &WindowedDataset) -> Result<TrainOutcome> {
    train_with(config, &mut model, data, |_| {}).map(|(curves, adam)| TrainOutcome { model, curves, adam })
}

/// As [`train`], calling `on_sector` after every sector's row is recorded.
pub fn train_with(
    config: &TrainConfig,
    model: &mut Model,
    data: &WindowedDataset,
    mut on_sector: impl FnMut(&SectorMetrics),
) -> Result<(MetricsRecord, AdamState)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut set = model.param_set();
    let mut adam = AdamState::new(set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curves = MetricsRecord::default();
    for epoch in 0..config.epochs {
        for s in 0..data.n_sectors() {
            let row = match config.criterion {
                Criterion::Mse => mse_sector(config, model, &mut set, &mut adam, data, s, &mut rng)?,
                Criterion::Ce => ce_sector(config, model, &mut set, &mut adam, data, s)?,
            };
            let row = SectorMetrics { epoch, sector: s, ..row };
            on_sector(&row);
            curves.rows.push(row);
        }
    }
    Ok((curves, adam))
}

fn mse_sector(
    config: &TrainConfig,
    model: &mut Model,
    set: &mut ParamSet,
    adam: &mut AdamState,
    data: &WindowedDataset,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SectorMetrics> {
    let n = data.windows_per_sector(s);
    let n_mlp = model.mlp.n_params();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut ys = vec![0.0; n];
    let mut sq = 0.0;
    let mut grad = vec![0.0; set.len()];
    let mut buf = vec![0.0; 2 * data.d_in()];
    for batch in order.chunks(config.batch_size) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 2.0 / batch.len() as f64;
        for &i in batch {
            data.window(s, i).write_input(&mut buf);
            let y_ref = model.reference(data, s, i);
            let mut err = 0.0;
            let y = model.mlp.accumulate_gradient(&buf, &mut grad[..n_mlp], |y| {
                err = y - y_ref;
                scale * err
            });
            if model.adapt_target {
                let k = data.stage_bit_index(i);
                for (j, g) in grad[n_mlp..].iter_mut().enumerate() {
                    *g -= scale * err * f64::from(data.sector(s).bit(k - j as i64));
                }
            }
            ys[i] = y;
            sq += err * err;
        }
        adam_step(set, &grad, adam, &config.adam, config.learning_rate)?;
        model.load_param_set(set);
    }
    let trellis = build_trellis(&model.target)?;
    let bits = data.stage_bits(s, 0..n, 0);
    let soft = maxlog_llr_from(&trellis, &ys, &Start::Free)?;
    Ok(SectorMetrics {
        epoch: 0,
        sector: s,
        mse: sq / n as f64,
        ce: ce_loss(&soft.llr, &bits, config.llr_clip)?,
        ber: bit_errors(&soft.hard_bits, &bits) as f64 / n as f64,
    })
}

/// Detector output and loss gradient for one contiguous CE batch.
#[derive(Debug, Clone)]
pub struct CeBatch {
    pub outputs: Vec<f64>,
    pub bits: Vec<i8>,
    pub soft: SoftDecision,
    /// `∂/∂θ` of the mean unclipped CE, laid out like [`Model::param_set`];
    /// target entries stay zero unless the target adapts.
    pub grad: Vec<f64>,
}

impl CeBatch {
    /// Mean unclipped CE whose gradient `grad` is.
    pub fn loss(&self) -> f64 {
        ce_loss(&self.soft.llr, &self.bits, f64::INFINITY).expect("batch is non-empty")
    }
}

/// Forward and backward pass of the CE criterion over windows `range` of sector `s`.
pub fn ce_batch_gradient(
    model: &Model,
    data: &WindowedDataset,
    s: usize,
    range: std::ops::Range<usize>,
    start: &Start,
) -> Result<CeBatch> {
    let n_mlp = model.mlp.n_params();
    let trellis = build_trellis(&model.target)?;
    let outputs = model.outputs(data, s, range.clone());
    let bits = data.stage_bits(s, range.clone(), 0);
    let soft = maxlog_llr_from(&trellis, &outputs, start)?;
    let k = outputs.len() as f64;
    let upstream: Vec<f64> = soft.llr.iter().zip(&bits).map(|(&l, &u)| dce_dllr(l, u) / k).collect();
    let back = llr_backward(&trellis, &outputs, &soft, &upstream)?;
    let mut grad = vec![0.0; n_mlp + model.target.len()];
    let mut buf = vec![0.0; 2 * data.d_in()];
    for (offset, i) in range.enumerate() {
        data.window(s, i).write_input(&mut buf);
        model.mlp.accumulate_gradient(&buf, &mut grad[..n_mlp], |_| back.samples[offset]);
    }
    if model.adapt_target {
        grad[n_mlp..].copy_from_slice(&back.taps);
    }
    Ok(CeBatch { outputs, bits, soft, grad })
}

fn ce_sector(
    config: &TrainConfig,
    model: &mut Model,
    set: &mut ParamSet,
    adam: &mut AdamState,
    data: &WindowedDataset,
    s: usize,
) -> Result<SectorMetrics> {
    let n = data.windows_per_sector(s);
    let mut start = Start::Free;
    let (mut sq, mut ce_sum, mut errors) = (0.0, 0.0, 0usize);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + config.batch_size).min(n);
        let batch = ce_batch_gradient(model, data, s, lo..hi, &start)?;
        for (offset, i) in (lo..hi).enumerate() {
            let e = batch.outputs[offset] - model.reference(data, s, i);
            sq += e * e;
        }
        let soft = &batch.soft;
        ce_sum += soft.llr.iter().zip(&batch.bits).map(|(&l, &u)| ce_term(l, u, config.llr_clip)).sum::<f64>();
        errors += bit_errors(&soft.hard_bits, &batch.bits);
        start = Start::Metrics(soft.final_metrics().unwrap_or_default());
        adam_step(set, &batch.grad, adam, &config.adam, config.learning_rate)?;
        model.load_param_set(set);
        lo = hi;
    }
    Ok(SectorMetrics { epoch: 0, sector: s, mse: sq / n as f64, ce: ce_sum / n as f64, ber: errors as f64 / n as f64 })
}

pub fn bit_errors(decided: &[i8], truth: &[i8]) -> usize {
    decided.iter().zip(truth).filter(|(a, b)| a != b).count()
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorEval {
    pub sector: usize,
    pub mse: f64,
    pub ce: f64,
    pub ber: f64,
    pub bits: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sectors: Vec<SectorEval>,
    pub mse: f64,
    pub ce: f64,
    pub ber: f64,
    pub bits: usize,
    pub errors: usize,
}

/// Per-sector MSE, CE and hard-Viterbi BER with the detector started from an
/// unknown state at the beginning of each sector.
pub fn evaluate(model: &Model, data: &WindowedDataset, llr_clip: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let trellis = build_trellis(&model.target)?;
    let sectors = par_map(data.n_sectors(), |s| evaluate_sector(model, &trellis, data, s, llr_clip))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let bits: usize = sectors.iter().map(|r| r.bits).sum();
    let errors: usize = sectors.iter().map(|r| r.errors).sum();
    let weighted = |f: fn(&SectorEval) -> f64| sectors.iter().map(|r| f(r) * r.bits as f64).sum::<f64>() / bits as f64;
    Ok(EvalReport {
        mse: weighted(|r| r.mse),
        ce: weighted(|r| r.ce),
        ber: errors as f64 / bits as f64,
        bits,
        errors,
        sectors,
    })
}

fn evaluate_sector(model: &Model, trellis: &Trellis, data: &WindowedDataset, s: usize, clip: f64) -> Result<SectorEval> {
    let n = data.windows_per_sector(s);
    let ys = model.outputs(data, s, 0..n);
    let bits = data.stage_bits(s, 0..n, 0);
    let hard = viterbi_hard_from(trellis, &ys, &Start::Free)?;
    let soft = maxlog_llr_from(trellis, &ys, &Start::Free)?;
    let errs: Vec<f64> = ys.iter().enumerate().map(|(i, y)| y - model.reference(data, s, i)).collect();
    let errors = bit_errors(&hard, &bits);
    Ok(SectorEval {
        sector: s,
        mse: mse_loss(&errs)?,
        ce: ce_loss(&soft.llr, &bits, clip)?,
        ber: errors as f64 / n as f64,
        bits: n,
        errors,
    })
}

/// Runs `f(0..n)` across the available cores, preserving order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        let mut out: Vec<(usize, T)> = handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect();
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, t)| t).collect()
    })
}

// ---------------------------------------------------------------------------
// Error histogram

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    /// `n_bins + 1` bin edges spanning `[−half_range, half_range]`.
    pub edges: Vec<f64>,
    /// Density per bin; samples beyond the range are counted in the outer bins.
    pub density: Vec<f64>,
    pub tau: f64,
    /// Fraction of samples with `|e| > tau`.
    pub tail_mass: f64,
    pub samples: usize,
}

impl ErrorHistogram {
    pub fn integral(&self) -> f64 {
        self.density.iter().zip(self.edges.windows(2)).map(|(d, w)| d * (w[1] - w[0])).sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_lo,bin_hi,density")?;
        for (d, w) in self.density.iter().zip(self.edges.windows(2)) {
            writeln!(out, "{:.9e},{:.9e},{:.9e}", w[0], w[1], d)?;
        }
        Ok(())
    }
}

/// Equalizer-error histogram over all windows of `data`.
pub fn error_histogram(model: &Model, data: &WindowedDataset, n_bins: usize, half_range: f64, tau: f64) -> Result<ErrorHistogram> {
    if n_bins == 0 || !(half_range > 0.0) {
        return Err(Error::InvalidParameter("histogram needs n_bins ≥ 1 and a positive range".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let width = 2.0 * half_range / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    let (mut total, mut tail) = (0usize, 0usize);
    for s in 0..data.n_sectors() {
        let n = data.windows_per_sector(s);
        for (i, y) in model.outputs(data, s, 0..n).into_iter().enumerate() {
            let e = y - model.reference(data, s, i);
            let bin = ((e + half_range) / width).floor().clamp(0.0, (n_bins - 1) as f64) as usize;
            counts[bin] += 1;
            total += 1;
            tail += usize::from(e.abs() > tau);
        }
    }
    Ok(ErrorHistogram {
        edges: (0..=n_bins).map(|b| -half_range + b as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / (total as f64 * width)).collect(),
        tau,
        tail_mass: tail as f64 / total as f64,
        samples: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::SectorSamples;
    use crate::chansim::{generate_sector, ChannelParams, ReaderGeometry};
    use crate::equalizer::Activation;
    use std::sync::Arc;

    fn small_data(n_sectors: usize, n_bits: usize, d_in: usize, delay: i64) -> WindowedDataset {
        let params = ChannelParams { awgn_sigma: 0.25, ..Default::default() };
        let geometry = ReaderGeometry::default();
        let sectors = (0..n_sectors)
            .map(|s| SectorSamples::from_sector(&generate_sector(n_bits, 100 + s as u64, &params, &geometry).unwrap()).unwrap())
            .collect();
        WindowedDataset::from_sectors(Arc::new(sectors), d_in, delay).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 2.0]).unwrap(), 2.5);
        assert!(mse_loss(&[]).is_err());
    }

    #[test]
    fn ce_examples() {
        for u in [-1, 1] {
            assert!((ce_term(0.0, u, 50.0) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(ce_term(200.0, 1, 1e9) < 1e-80);
        assert!((ce_term(-50.0, 1, 50.0) - 50.000_000_000_000_000_000_02).abs() < 1e-12);
        assert!((ce_term(-80.0, 1, 50.0) - ce_term(-50.0, 1, 50.0)).abs() == 0.0);
        assert!(ce_loss(&[0.0], &[1, 1], 50.0).is_err());
    }

    #[test]
    fn dce_examples() {
        assert_eq!(dce_dllr(0.0, -1), 0.5);
        assert_eq!(dce_dllr(0.0, 1), -0.5);
        for u in [-1, 1] {
            let h = 1e-6;
            let fd = (ce_term(1.37 + h, u, 50.0) - ce_term(1.37 - h, u, 50.0)) / (2.0 * h);
            assert!((fd - dce_dllr(1.37, u)).abs() / fd.abs() < 1e-8);
        }
    }

    #[test]
    fn adam_first_step_zero_gradient_and_freeze() {
        let mut set = ParamSet::new();
        set.push_group("w", &[1.0, -2.0, 0.5]);
        set.set_frozen(2, true);
        let mut st = AdamState::new(3);
        let cfg = AdamConfig::default();
        adam_step(&mut set, &[0.3, -4.0, 9.0], &mut st, &cfg, 1e-3).unwrap();
        assert!((set.values()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((set.values()[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(set.values()[2], 0.5);
        assert_eq!((st.m[2], st.v[2]), (0.0, 0.0));
        let before = set.values().to_vec();
        let mut st = AdamState::new(3);
        for _ in 0..100 {
            adam_step(&mut set, &[0.0; 3], &mut st, &cfg, 1e-3).unwrap();
        }
        assert_eq!(set.values(), &before[..]);
        assert!(adam_step(&mut set, &[0.0; 2], &mut st, &cfg, 1e-3).is_err());
    }

    #[test]
    fn descent_step_moves_llr_toward_truth() {
        let llr = [0.3, -2.0, 5.0];
        let bits = [-1, 1, 1];
        let next = llr_descent_step(&llr, &bits, 0.1);
        assert!(next[0] < llr[0] && next[1] > llr[1] && next[2] > llr[2]);
    }

    #[test]
    fn param_set_round_trip_keeps_monic() {
        let spec = MlpSpec::new(vec![6, 3, 1], Activation::Tanh).unwrap();
        let mut model = Model::new(&spec, &TargetMode::adaptive(), 3).unwrap();
        let mut set = model.param_set();
        assert_eq!(set.len(), model.mlp.n_params() + 5);
        assert_eq!(set.n_free(), model.n_learnables());
        set.values_mut().iter_mut().for_each(|v| *v += 0.25);
        model.load_param_set(&set);
        assert_eq!(model.target.taps[0], 1.0);
        assert_eq!(model.target.taps[1], 0.25);
    }

    #[test]
    fn delay_sweep_finds_energy_centre() {
        let data = small_data(1, 4000, 11, 0);
        for target in [PrTarget::fixed(&[4.0, 7.0, 1.0]).unwrap(), PrTarget::monic(5).unwrap()] {
            let d = select_delay(&data, &target, 3000).unwrap();
            assert!(d.abs() <= 1, "delay {d}");
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = small_data(2, 3000, 11, -1);
        let spec = MlpSpec::linear(11);
        for criterion in [Criterion::Mse, Criterion::Ce] {
            let cfg = TrainConfig { criterion, epochs: 3, learning_rate: 1e-2, batch_size: 256, ..Default::default() };
            let model = Model::new(&spec, &cfg.target_mode, 7).unwrap();
            let a = train(&cfg, model.clone(), &data).unwrap();
            let b = train(&cfg, model, &data).unwrap();
            assert_eq!(a.curves, b.curves);
            let first = a.curves.epoch_means(0).unwrap();
            let last = a.curves.final_means().unwrap();
            match criterion {
                Criterion::Mse => assert!(last.mse < first.mse),
                Criterion::Ce => assert!(last.ce < first.ce),
            }
            assert!(a.curves.rows.iter().all(|r| (0.0..=0.5).contains(&r.ber) || r.ber <= 1.0));
            assert!(a.curves.rows.iter().all(|r| r.ce >= 0.0));
        }
    }

    #[test]
    fn perfect_equalizer_evaluates_clean() {
        // A one-tap "network" reading the noiseless target directly.
        let bits: Vec<i8> = (0..400).map(|i| if (i * 7 + i / 3) % 5 < 2 { 1 } else { -1 }).collect();
        let target = PrTarget::fixed(&[1.0]).unwrap();
        let r: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
        let sector = SectorSamples { readers: [r.clone(), r], bits };
        let data = WindowedDataset::from_sectors(Arc::new(vec![sector]), 1, 0).unwrap();
        let spec = MlpSpec::linear(1);
        let mlp = MlpParams::from_values(spec, &[1.0, 0.0, 0.0]).unwrap();
        let model = Model { mlp, target, adapt_target: false };
        let rep = evaluate(&model, &data, 50.0).unwrap();
        assert_eq!((rep.ber, rep.mse, rep.errors), (0.0, 0.0, 0));
        let h = error_histogram(&model, &data, 21, 1.0, 0.1).unwrap();
        assert!((h.integral() - 1.0).abs() < 1e-9);
        assert_eq!(h.density.iter().filter(|&&d| d > 0.0).count(), 1);
        assert!(h.density[10] > 0.0);
        assert_eq!(h.tail_mass, 0.0);
    }

    #[test]
    fn metrics_csv_and_convergence() {
        let rows = (0..3)
            .flat_map(|e| (0..2).map(move |s| SectorMetrics { epoch: e, sector: s, mse: 1.0, ce: 0.5, ber: [0.2, 0.1, 0.1][e] }))
            .collect();
        let rec = MetricsRecord { rows };
        assert_eq!(rec.epochs_to_convergence(0.01), Some(2));
        let mut out = Vec::new();
        rec.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("epoch,sector,mse,ce,ber\n0,0,"));
        assert_eq!(text.lines().count(), 7);
    }
}
