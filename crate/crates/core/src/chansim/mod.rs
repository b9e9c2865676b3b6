//! Two-reader readback synthesis.
//!
//! Every track is written as a ±1 NRZ sequence padded with −1 on both sides.
//! Track `i` produces the noiseless waveform
//!
//! ```text
//! s(t) = P + Σ_m (u_m − u_{m−1}) · h(t − mT + Δt_m),    h(t) = ½·erf(2√ln2 · t / PW50)
//! ```
//!
//! which equals `Σ_m u_m · p(t − mT)` with the dibit `p(t) = h(t) − h(t − T)`
//! when there is no jitter. Reader `j` sees `Σ_i λ⟨j⟩_i s_i(t)` plus white
//! Gaussian noise, sampled once per bit cell at `t = (k + phase)·T`.

mod archive;
mod dataset;

pub use archive::{read_sector, write_sector, SectorHeader};
pub use dataset::{SectorSamples, Window, WindowedDataset};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of simulated tracks (center track plus two on each side).
pub const N_TRACKS: usize = 5;
/// Index of track 0 inside a [`TrackEnsemble`].
pub const CENTER_TRACK: usize = 2;
/// Bit value written outside the sector.
pub const PAD_BIT: i8 = -1;
/// Cross-track weights reported for reader 1 at 30% CTS.
pub const REFERENCE_ITI_READER1: [f64; N_TRACKS] = [3.54e-05, 0.1514, 0.8207, 0.0279, 5.96e-07];
/// Cross-track pulse width (track pitches) that reproduces [`REFERENCE_ITI_READER1`] at 30% CTS.
pub const DEFAULT_CROSSTRACK_SIGMA: f64 = 0.339_729;

const ADC_FULL_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Bit interval `T`.
    pub bit_interval: f64,
    pub pw50_over_t: f64,
    /// Standard deviation of transition jitter, in units of `T`.
    pub jitter_sigma: f64,
    pub awgn_sigma: f64,
    /// Half-width of the tabulated dibit response, in bits.
    pub span_bits: usize,
    pub quantizer_bits: Option<u32>,
    /// Sampling instant within the bit cell, as a fraction of `T`.
    pub sample_phase: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            bit_interval: 1.0,
            pw50_over_t: 1.5,
            jitter_sigma: 0.08,
            awgn_sigma: 0.0,
            span_bits: 8,
            quantizer_bits: None,
            sample_phase: 0.5,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bit_interval > 0.0) {
            return Err(Error::InvalidParameter("bit_interval must be positive".into()));
        }
        if !(self.pw50_over_t > 0.0) {
            return Err(Error::InvalidParameter("pw50_over_t must be positive".into()));
        }
        if !(self.jitter_sigma >= 0.0) || !(self.awgn_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise deviations must be non-negative".into()));
        }
        if self.span_bits < 4 {
            return Err(Error::InvalidParameter("span_bits must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.sample_phase) {
            return Err(Error::InvalidParameter("sample_phase must lie in [0, 1)".into()));
        }
        if let Some(bits) = self.quantizer_bits {
            if !(1..=24).contains(&bits) {
                return Err(Error::InvalidParameter("quantizer_bits must be in 1..=24".into()));
            }
        }
        Ok(())
    }

    fn pw50(&self) -> f64 {
        self.pw50_over_t * self.bit_interval
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReaderGeometry {
    /// Separation between the two readers, percent of track pitch.
    pub cts_percent: f64,
    /// Standard deviation of the cross-track head response, in track pitches.
    pub crosstrack_sigma: f64,
    pub track_pitch: f64,
    pub n_side_tracks: usize,
}

impl Default for ReaderGeometry {
    fn default() -> Self {
        Self {
            cts_percent: 30.0,
            crosstrack_sigma: DEFAULT_CROSSTRACK_SIGMA,
            track_pitch: 1.0,
            n_side_tracks: 2,
        }
    }
}

impl ReaderGeometry {
    /// Cross-track position of reader `j` (0 or 1) relative to the center of track 0.
    /// Readers sit symmetrically, reader 1 toward track −1.
    pub fn reader_offset(&self, reader: usize) -> f64 {
        let half = 0.5 * self.cts_percent / 100.0 * self.track_pitch;
        if reader == 0 {
            -half
        } else {
            half
        }
    }
}

/// Transition response `h(t)`, swinging from −½ to +½.
pub fn transition_response(t: f64, params: &ChannelParams) -> f64 {
    let scale = 2.0 * std::f64::consts::LN_2.sqrt() / params.pw50();
    0.5 * libm::erf(scale * t)
}

/// Dibit response `p(t) = h(t) − h(t − T)`.
pub fn dibit_response(t: f64, params: &ChannelParams) -> f64 {
    transition_response(t, params) - transition_response(t - params.bit_interval, params)
}

/// Dibit response at the sampling instants, `p((j + phase)·T)` for `j = −span..=span`.
/// Entry `span + j` multiplies `u_{k−j}` in the sample at `k`.
pub fn dibit_table(params: &ChannelParams) -> Vec<f64> {
    let span = params.span_bits as i64;
    (-span..=span)
        .map(|j| dibit_response((j as f64 + params.sample_phase) * params.bit_interval, params))
        .collect()
}

/// Upper-tail mass of the standard normal, accurate far into both tails.
fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Probability that a standard normal falls in `[a, b]`.
fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        normal_sf(a) - normal_sf(b)
    } else if b <= 0.0 {
        normal_sf(-b) - normal_sf(-a)
    } else {
        1.0 - normal_sf(-a) - normal_sf(b)
    }
}

/// Cross-track weights `λ⟨j⟩_i` for both readers, tracks ordered −2..=2.
///
/// Each weight is the Gaussian head-response mass over that track's extent;
/// the tails beyond the outermost edges fold into tracks ±2.
pub fn iti_weights(geometry: &ReaderGeometry) -> Result<[[f64; N_TRACKS]; 2]> {
    if geometry.n_side_tracks != 2 {
        return Err(Error::InvalidParameter("exactly two side tracks per side are modeled".into()));
    }
    if !(geometry.crosstrack_sigma > 0.0) {
        return Err(Error::InvalidParameter("crosstrack_sigma must be positive".into()));
    }
    if !(geometry.track_pitch > 0.0) {
        return Err(Error::InvalidParameter("track_pitch must be positive".into()));
    }
    let mut out = [[0.0; N_TRACKS]; 2];
    for (reader, weights) in out.iter_mut().enumerate() {
        *weights = weights_at(geometry, geometry.reader_offset(reader));
    }
    Ok(out)
}

fn weights_at(geometry: &ReaderGeometry, offset: f64) -> [f64; N_TRACKS] {
    let sigma = geometry.crosstrack_sigma * geometry.track_pitch;
    let mut w = [0.0; N_TRACKS];
    for (idx, slot) in w.iter_mut().enumerate() {
        let track = idx as f64 - CENTER_TRACK as f64;
        let lo = if idx == 0 {
            f64::NEG_INFINITY
        } else {
            ((track - 0.5) * geometry.track_pitch - offset) / sigma
        };
        let hi = if idx == N_TRACKS - 1 {
            f64::INFINITY
        } else {
            ((track + 0.5) * geometry.track_pitch - offset) / sigma
        };
        *slot = normal_mass(lo, hi);
    }
    w
}

/// Fits the cross-track pulse width so that reader 1's weights match `target`
/// in the log-ratio least-squares sense (golden-section search on the width).
pub fn fit_crosstrack_sigma(cts_percent: f64, target: &[f64; N_TRACKS]) -> Result<f64> {
    if target.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidParameter("target weights must be positive".into()));
    }
    let cost = |sigma: f64| {
        let geometry = ReaderGeometry { cts_percent, crosstrack_sigma: sigma, ..Default::default() };
        let w = weights_at(&geometry, geometry.reader_offset(0));
        w.iter().zip(target).map(|(a, b)| (a / b).ln().powi(2)).sum::<f64>()
    };
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.02, 3.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    while b - a > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = cost(d);
        }
    }
    Ok(0.5 * (a + b))
}

/// Ground-truth bits and jitter for the five tracks of one sector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEnsemble {
    /// `bits[i]` holds track `i − 2`.
    pub bits: Vec<Vec<i8>>,
    /// `jitter[i][m]` shifts the transition into bit `m` of track `i − 2`.
    pub jitter: Vec<Vec<f64>>,
    pub seed: u64,
}

impl TrackEnsemble {
    pub fn len(&self) -> usize {
        self.bits[CENTER_TRACK].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self) -> &[i8] {
        &self.bits[CENTER_TRACK]
    }
}

fn draw_jitter(rng: &mut ChaCha8Rng, sigma: f64, half_interval: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let dt = sigma * z;
        if dt.abs() < half_interval {
            return dt;
        }
    }
}

/// Draws i.i.d. equiprobable bits and truncated-Gaussian jitter for all tracks.
pub fn gen_tracks(n_bits: usize, seed: u64, params: &ChannelParams) -> Result<TrackEnsemble> {
    if n_bits == 0 {
        return Err(Error::InvalidParameter("n_bits must be at least 1".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = params.jitter_sigma * params.bit_interval;
    let half = 0.5 * params.bit_interval;
    let mut bits = Vec::with_capacity(N_TRACKS);
    let mut jitter = Vec::with_capacity(N_TRACKS);
    for _ in 0..N_TRACKS {
        bits.push((0..n_bits).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect());
        jitter.push((0..n_bits).map(|_| draw_jitter(&mut rng, sigma, half)).collect());
    }
    Ok(TrackEnsemble { bits, jitter, seed })
}

/// Noiseless samples of one track for an arbitrary real-valued level sequence.
///
/// Levels outside `0..levels.len()` equal `pad`. `jitter[m]` shifts the
/// transition between `levels[m−1]` and `levels[m]`; the closing transition
/// back to `pad` carries no jitter. The map is linear in `(levels, pad)`.
pub fn noiseless_readback(levels: &[f64], pad: f64, jitter: &[f64], params: &ChannelParams) -> Vec<f64> {
    let n = levels.len() as i64;
    let span = params.span_bits as i64;
    let t_bit = params.bit_interval;
    let level = |m: i64| if m < 0 || m >= n { pad } else { levels[m as usize] };
    let shift = |m: i64| if m >= 0 && m < n { jitter.get(m as usize).copied().unwrap_or(0.0) } else { 0.0 };
    (0..n)
        .map(|k| {
            let lo = k - span;
            let hi = k + span;
            // Transitions older than the span have saturated at +½, newer ones at −½.
            let mut acc = 0.5 * (level(lo - 1) + level(hi));
            for m in lo..=hi {
                let d = level(m) - level(m - 1);
                if d != 0.0 {
                    let t = (k - m) as f64 * t_bit + params.sample_phase * t_bit + shift(m);
                    acc += d * transition_response(t, params);
                }
            }
            acc
        })
        .collect()
}

/// Per-reader sample streams for one sector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcFrame {
    pub samples: [Vec<f64>; 2],
    pub norm_mean: [f64; 2],
    pub norm_std: [f64; 2],
    pub normalized: bool,
}

impl AdcFrame {
    pub fn new(samples: [Vec<f64>; 2]) -> Self {
        Self { samples, norm_mean: [0.0; 2], norm_std: [1.0; 2], normalized: false }
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn quantize(x: f64, bits: u32) -> f64 {
    let levels = (1u64 << bits) as f64;
    let step = 2.0 * ADC_FULL_SCALE / levels;
    let idx = (x / step).floor().clamp(-levels / 2.0, levels / 2.0 - 1.0);
    (idx + 0.5) * step
}

/// Two-reader readback `r⟨j⟩_k = Σ_i λ⟨j⟩_i s_i(kT) + n⟨j⟩_k`.
pub fn synthesize_readback(
    tracks: &TrackEnsemble,
    params: &ChannelParams,
    geometry: &ReaderGeometry,
    noise_seed: u64,
) -> Result<AdcFrame> {
    params.validate()?;
    let weights = iti_weights(geometry)?;
    let mut frame = noiseless_frame(tracks, params, &weights);
    add_noise(&mut frame, params, noise_seed);
    Ok(frame)
}

fn noiseless_frame(tracks: &TrackEnsemble, params: &ChannelParams, weights: &[[f64; N_TRACKS]; 2]) -> AdcFrame {
    let n = tracks.len();
    let mut samples = [vec![0.0; n], vec![0.0; n]];
    for (track, (bits, jitter)) in tracks.bits.iter().zip(&tracks.jitter).enumerate() {
        if weights.iter().all(|w| w[track] == 0.0) {
            continue;
        }
        let levels: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
        let s = noiseless_readback(&levels, f64::from(PAD_BIT), jitter, params);
        for (reader, out) in samples.iter_mut().enumerate() {
            let w = weights[reader][track];
            for (o, v) in out.iter_mut().zip(&s) {
                *o += w * v;
            }
        }
    }
    AdcFrame::new(samples)
}

fn add_noise(frame: &mut AdcFrame, params: &ChannelParams, noise_seed: u64) {
    if params.awgn_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for reader in frame.samples.iter_mut() {
            for x in reader.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += params.awgn_sigma * z;
            }
        }
    }
    if let Some(bits) = params.quantizer_bits {
        for reader in frame.samples.iter_mut() {
            for x in reader.iter_mut() {
                *x = quantize(*x, bits);
            }
        }
    }
}

/// Shifts and scales each reader to zero mean and unit (population) deviation.
pub fn normalize_frame(frame: &AdcFrame) -> Result<AdcFrame> {
    if frame.normalized {
        return Err(Error::AlreadyNormalized);
    }
    let mut out = frame.clone();
    for reader in 0..2 {
        let xs = &frame.samples[reader];
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::ZeroVariance { reader });
        }
        out.samples[reader] = xs.iter().map(|x| (x - mean) / std).collect();
        out.norm_mean[reader] = mean;
        out.norm_std[reader] = std;
    }
    out.normalized = true;
    Ok(out)
}

/// Fraction of bits where the sign of each reader's sample disagrees with track 0.
pub fn raw_ber(frame: &AdcFrame, tracks: &TrackEnsemble) -> [f64; 2] {
    let center = tracks.center();
    let mut out = [0.0; 2];
    for (reader, ber) in out.iter_mut().enumerate() {
        let errors = frame.samples[reader]
            .iter()
            .zip(center)
            .filter(|(&r, &u)| (r >= 0.0) != (u > 0))
            .count();
        *ber = errors as f64 / center.len() as f64;
    }
    out
}

/// Derives a well-mixed child seed so that related streams never share state.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One synthesized sector: ground truth and normalized readback.
#[derive(Debug, Clone)]
pub struct Sector {
    pub tracks: TrackEnsemble,
    pub frame: AdcFrame,
    pub raw_ber: [f64; 2],
}

/// Generates and normalizes one sector; bit and noise streams are derived from `seed`.
pub fn generate_sector(
    n_bits: usize,
    seed: u64,
    params: &ChannelParams,
    geometry: &ReaderGeometry,
) -> Result<Sector> {
    let tracks = gen_tracks(n_bits, derive_seed(seed, 1), params)?;
    let frame = synthesize_readback(&tracks, params, geometry, derive_seed(seed, 2))?;
    let raw_ber = raw_ber(&frame, &tracks);
    let frame = normalize_frame(&frame)?;
    Ok(Sector { tracks, frame, raw_ber })
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    pub sectors: usize,
    pub n_bits: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_sigma: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { sectors: 5, n_bits: 39_512, seed: 0xCA11, tolerance: 0.005, max_sigma: 10.0 }
    }
}

/// Bisects `awgn_sigma` until the mean per-reader raw BER over the calibration
/// sectors is within tolerance of `target`. Jitter stays as configured.
///
/// The noiseless part and the unit-variance noise draws are fixed across
/// iterations, so the raw BER is a monotone step function of sigma.
pub fn calibrate_noise(
    params: &ChannelParams,
    geometry: &ReaderGeometry,
    target: f64,
    options: &CalibrationOptions,
) -> Result<ChannelParams> {
    if !(0.0..0.5).contains(&target) {
        return Err(Error::InvalidParameter("target raw BER must lie in [0, 0.5)".into()));
    }
    if options.sectors == 0 {
        return Err(Error::InvalidParameter("calibration needs at least one sector".into()));
    }
    params.validate()?;
    let weights = iti_weights(geometry)?;
    let mut cases = Vec::with_capacity(options.sectors);
    for s in 0..options.sectors {
        let seed = derive_seed(options.seed, 100 + s as u64);
        let tracks = gen_tracks(options.n_bits, derive_seed(seed, 1), params)?;
        let clean = noiseless_frame(&tracks, params, &weights);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let noise: [Vec<f64>; 2] = std::array::from_fn(|_| {
            (0..options.n_bits).map(|_| StandardNormal.sample(&mut rng)).collect()
        });
        cases.push((tracks, clean, noise));
    }
    let measure = |sigma: f64| {
        let total: f64 = cases
            .iter()
            .map(|(tracks, clean, noise)| {
                let mut frame = clean.clone();
                for r in 0..2 {
                    for (x, z) in frame.samples[r].iter_mut().zip(&noise[r]) {
                        *x += sigma * z;
                    }
                    if let Some(bits) = params.quantizer_bits {
                        frame.samples[r].iter_mut().for_each(|x| *x = quantize(*x, bits));
                    }
                }
                let b = raw_ber(&frame, tracks);
                0.5 * (b[0] + b[1])
            })
            .sum();
        total / cases.len() as f64
    };
    let mut lo = 0.0;
    let mut hi = options.max_sigma;
    let ber_lo = measure(lo);
    let ber_hi = measure(hi);
    let done = |sigma: f64| ChannelParams { awgn_sigma: sigma, ..*params };
    if ber_lo >= target - options.tolerance {
        if ber_lo <= target + options.tolerance {
            return Ok(done(0.0));
        }
        return Err(Error::Unreachable { target, low: ber_lo, high: ber_hi });
    }
    if ber_hi < target - options.tolerance {
        return Err(Error::Unreachable { target, low: ber_lo, high: ber_hi });
    }
    let mut best = (f64::INFINITY, hi);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let ber = measure(mid);
        let miss = (ber - target).abs();
        if miss < best.0 {
            best = (miss, mid);
        }
        if miss <= 0.1 * options.tolerance || hi - lo < 1e-12 {
            break;
        }
        if ber < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > options.tolerance {
        return Err(Error::Unreachable { target, low: ber_lo, high: ber_hi });
    }
    Ok(done(best.1))
}
