//! Configuration-driven experiment runner: dataset generation and archiving,
//! single runs, named presets with ordering checks, and summary comparison.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chansim::{
    calibrate_noise, derive_seed, generate_sector, iti_weights, read_sector, write_sector, CalibrationOptions,
    ChannelParams, ReaderGeometry, SectorHeader, SectorSamples, WindowedDataset,
};
use crate::equalizer::{Activation, Checkpoint, MlpSpec};
use crate::training::{
    error_histogram, evaluate, select_delay, train, Criterion, ErrorHistogram, EvalReport, MetricMeans, Model,
    TargetMode, TrainConfig,
};
use crate::{Error, Result, TOOL_VERSION};

/// Sector length of the reference protocol.
pub const SECTOR_BITS: usize = 39_512;
/// Samples per reader in one equalizer window.
pub const D_IN: usize = 11;
pub const DESK_SECTORS: usize = 20;
pub const FULL_SECTORS: usize = 100;
/// Relative tolerance used to report epochs to convergence.
pub const CONVERGENCE_TOLERANCE: f64 = 0.02;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub params: ChannelParams,
    pub geometry: ReaderGeometry,
    /// When true, `params.awgn_sigma` is replaced by the value that meets
    /// `raw_ber_target`.
    pub calibrate: bool,
    pub raw_ber_target: f64,
    pub calibration_sectors: usize,
    pub n_bits: usize,
    pub train_sectors: usize,
    pub test_sectors: usize,
    pub seed: u64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            params: ChannelParams::default(),
            geometry: ReaderGeometry::default(),
            calibrate: true,
            raw_ber_target: 0.11,
            calibration_sectors: 5,
            n_bits: SECTOR_BITS,
            train_sectors: DESK_SECTORS,
            test_sectors: DESK_SECTORS,
            seed: 2024,
        }
    }
}

/// Jitter standard deviation (fraction of `T`) of the jitter-dominated regime.
pub const JITTER_DOMINATED_SIGMA: f64 = 0.35;

/// Which impairment dominates the 11% raw BER of a preset's channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseRegime {
    /// Default jitter (0.08 T); calibrated AWGN carries most of the noise.
    Electronic,
    /// Jitter at [`JITTER_DOMINATED_SIGMA`]; calibration adds little or no AWGN.
    Jitter,
}

impl NoiseRegime {
    pub fn params(self) -> ChannelParams {
        match self {
            NoiseRegime::Electronic => ChannelParams::default(),
            NoiseRegime::Jitter => ChannelParams { jitter_sigma: JITTER_DOMINATED_SIGMA, ..ChannelParams::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EqualizerSection {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Fixed decision delay; chosen by a least-squares sweep when absent.
    pub decision_delay: Option<i64>,
    pub init_seed: u64,
}

impl Default for EqualizerSection {
    fn default() -> Self {
        Self { layer_sizes: vec![2 * D_IN, 1], activation: Activation::Tanh, decision_delay: None, init_seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub channel: ChannelSection,
    pub equalizer: EqualizerSection,
    pub training: TrainConfig,
    pub output_dir: PathBuf,
    /// Sector archive directory; `None` generates the data in memory.
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            channel: ChannelSection::default(),
            equalizer: EqualizerSection::default(),
            training: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
            data_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingData(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.params.validate()?;
        iti_weights(&self.channel.geometry)?;
        if self.channel.train_sectors == 0 {
            return Err(Error::Config("channel.train_sectors must be at least 1".into()));
        }
        if self.channel.n_bits < D_IN {
            return Err(Error::WindowTooLong { d_in: D_IN, len: self.channel.n_bits });
        }
        let spec = self.mlp_spec()?;
        if spec.d_in() % 2 == 0 {
            return Err(Error::Config(format!("window length {} must be odd", spec.d_in())));
        }
        self.training.validate()
    }

    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.equalizer.layer_sizes.clone(), self.equalizer.activation)
    }

    /// SHA-256 of the canonical JSON form, ignoring where data and results live.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.data_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Datasets

/// Train and test sectors with the channel they were drawn from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub params: ChannelParams,
    pub geometry: ReaderGeometry,
    pub seed: u64,
    pub train: Arc<Vec<SectorSamples>>,
    pub test: Arc<Vec<SectorSamples>>,
    pub raw_ber: f64,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub seed: u64,
    pub n_bits: usize,
    pub params: ChannelParams,
    pub geometry: ReaderGeometry,
    pub train_sectors: usize,
    pub test_sectors: usize,
    pub raw_ber: f64,
    pub hash: String,
}

pub fn train_sector_seed(seed: u64, s: usize) -> u64 {
    derive_seed(seed, 1_000 + s as u64)
}

pub fn test_sector_seed(seed: u64, s: usize) -> u64 {
    derive_seed(seed, 1_000_000 + s as u64)
}

/// Content hash over every sample (as stored, f32) and bit of both splits.
pub fn dataset_hash(train: &[SectorSamples], test: &[SectorSamples]) -> String {
    let mut h = Sha256::new();
    for (tag, split) in [(b'r', train), (b't', test)] {
        h.update([tag]);
        h.update((split.len() as u64).to_le_bytes());
        for s in split {
            for reader in &s.readers {
                for &x in reader {
                    h.update((x as f32).to_le_bytes());
                }
            }
            h.update(s.bits.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
    }
    hex::encode(h.finalize())
}

/// Calibrates the noise (when asked) and synthesizes both splits.
pub fn generate_dataset(channel: &ChannelSection) -> Result<Dataset> {
    let params = if channel.calibrate {
        let opts = CalibrationOptions {
            sectors: channel.calibration_sectors.max(1),
            n_bits: channel.n_bits,
            seed: derive_seed(channel.seed, 7),
            ..Default::default()
        };
        calibrate_noise(&channel.params, &channel.geometry, channel.raw_ber_target, &opts)?
    } else {
        channel.params
    };
    let make = |seed_of: fn(u64, usize) -> u64, n: usize| -> Result<(Vec<SectorSamples>, f64)> {
        let mut ber = 0.0;
        let sectors = (0..n)
            .map(|s| {
                let sector = generate_sector(channel.n_bits, seed_of(channel.seed, s), &params, &channel.geometry)?;
                ber += 0.5 * (sector.raw_ber[0] + sector.raw_ber[1]);
                SectorSamples::from_sector(&sector)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((sectors, ber))
    };
    let (train, ber_train) = make(train_sector_seed, channel.train_sectors)?;
    let (test, ber_test) = make(test_sector_seed, channel.test_sectors)?;
    let n = (train.len() + test.len()) as f64;
    let hash = dataset_hash(&train, &test);
    Ok(Dataset {
        params,
        geometry: channel.geometry,
        seed: channel.seed,
        train: Arc::new(train),
        test: Arc::new(test),
        raw_ber: (ber_train + ber_test) / n,
        hash,
    })
}

fn sector_file(dir: &Path, split: &str, s: usize) -> PathBuf {
    dir.join(format!("{split}_{s:03}.bin"))
}

/// Writes one archive per sector plus `manifest.json`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let weights = iti_weights(&data.geometry)?;
    let n_bits = data.train.first().or(data.test.first()).map_or(0, |s| s.len());
    for (split, sectors, seed_of) in [
        ("train", &data.train, train_sector_seed as fn(u64, usize) -> u64),
        ("test", &data.test, test_sector_seed),
    ] {
        for (s, samples) in sectors.iter().enumerate() {
            let header = SectorHeader {
                seed: seed_of(data.seed, s),
                n_bits: samples.len(),
                params: data.params,
                geometry: data.geometry,
                iti_weights: weights,
                norm_mean: [0.0; 2],
                norm_std: [1.0; 2],
                raw_ber: [data.raw_ber; 2],
            };
            write_sector(&sector_file(dir, split, s), &header, samples)?;
        }
    }
    let manifest = DatasetManifest {
        tool_version: TOOL_VERSION.into(),
        seed: data.seed,
        n_bits,
        params: data.params,
        geometry: data.geometry,
        train_sectors: data.train.len(),
        test_sectors: data.test.len(),
        raw_ber: data.raw_ber,
        hash: data.hash.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingData(manifest_path.clone()),
        _ => Error::Io(e),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let load = |split: &str, n: usize| -> Result<Vec<SectorSamples>> {
        (0..n).map(|s| read_sector(&sector_file(dir, split, s)).map(|(_, samples)| samples)).collect()
    };
    let train = load("train", manifest.train_sectors)?;
    let test = load("test", manifest.test_sectors)?;
    let hash = dataset_hash(&train, &test);
    if hash != manifest.hash {
        return Err(Error::DatasetMismatch(manifest.hash, hash));
    }
    Ok(Dataset {
        params: manifest.params,
        geometry: manifest.geometry,
        seed: manifest.seed,
        train: Arc::new(train),
        test: Arc::new(test),
        raw_ber: manifest.raw_ber,
        hash,
    })
}

// ---------------------------------------------------------------------------
// Single runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub mse: f64,
    pub ce: f64,
    pub ber: f64,
    pub bits: usize,
    pub errors: usize,
}

impl From<&EvalReport> for TestMetrics {
    fn from(r: &EvalReport) -> Self {
        Self { mse: r.mse, ce: r.ce, ber: r.ber, bits: r.bits, errors: r.errors }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub tool_version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub architecture: String,
    pub activation: Activation,
    pub criterion: Criterion,
    pub target_mode: TargetMode,
    pub learnables: usize,
    pub decision_delay: i64,
    pub epochs: usize,
    pub epochs_to_convergence: Option<usize>,
    pub steps: u64,
    /// Means over the last training epoch of the adaptation curves.
    pub final_train: MetricMeans,
    /// Held-out sectors, hard Viterbi decisions.
    pub test: TestMetrics,
    pub final_target: Vec<f64>,
    pub awgn_sigma: f64,
    pub raw_ber: f64,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingData(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub model: Model,
    pub curves: crate::training::MetricsRecord,
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
}

/// Trains and evaluates one configuration on `data`.
pub fn run_on(config: &ExperimentConfig, data: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    let spec = config.mlp_spec()?;
    let tm = &config.training.target_mode;
    let d_in = spec.d_in();
    let delay = match config.equalizer.decision_delay {
        Some(d) => d,
        None => {
            let probe = WindowedDataset::from_sectors(data.train.clone(), d_in, 0)?;
            select_delay(&probe, &tm.initial_target()?, 40_000)?
        }
    };
    let train_set = WindowedDataset::from_sectors(data.train.clone(), d_in, delay)?;
    let model = Model::new(&spec, tm, config.equalizer.init_seed)?;
    let outcome = train(&config.training, model, &train_set)?;
    let test_source = if data.test.is_empty() { data.train.clone() } else { data.test.clone() };
    let test_set = WindowedDataset::from_sectors(test_source, d_in, delay)?;
    let report = evaluate(&outcome.model, &test_set, config.training.llr_clip)?;
    let final_train = outcome.curves.final_means().ok_or(Error::EmptyDataset)?;
    let summary = RunSummary {
        name: config.name.clone(),
        tool_version: TOOL_VERSION.into(),
        config_hash: config.hash(),
        dataset_hash: data.hash.clone(),
        architecture: spec.label(),
        activation: spec.activation,
        criterion: config.training.criterion,
        target_mode: tm.clone(),
        learnables: outcome.model.n_learnables(),
        decision_delay: delay,
        epochs: config.training.epochs,
        epochs_to_convergence: outcome.curves.epochs_to_convergence(CONVERGENCE_TOLERANCE),
        steps: outcome.adam.step,
        final_train,
        test: TestMetrics::from(&report),
        final_target: outcome.model.target.taps.clone(),
        awgn_sigma: data.params.awgn_sigma,
        raw_ber: data.raw_ber,
    };
    let checkpoint = outcome.model.checkpoint(delay, outcome.adam.step);
    Ok(RunOutcome { summary, model: outcome.model, curves: outcome.curves, report, checkpoint })
}

/// Writes `<name>_curves.csv`, `<name>_summary.json` and `<name>_checkpoint.json`.
pub fn write_outcome(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let name = &outcome.summary.name;
    let mut csv = Vec::new();
    outcome.curves.write_csv(&mut csv)?;
    fs::write(dir.join(format!("{name}_curves.csv")), csv)?;
    fs::write(dir.join(format!("{name}_summary.json")), serde_json::to_string_pretty(&outcome.summary)? + "\n")?;
    outcome.checkpoint.save(&dir.join(format!("{name}_checkpoint.json")))
}

/// Loads the archive named in the config (or generates the data when `gen`
/// is set, archiving it if a data directory is configured), then trains.
pub fn run(config_path: &Path, gen: bool) -> Result<RunSummary> {
    let config = ExperimentConfig::load(config_path)?;
    let data = obtain_dataset(&config, gen)?;
    let outcome = run_on(&config, &data)?;
    write_outcome(&outcome, &config.output_dir)?;
    Ok(outcome.summary)
}

pub fn obtain_dataset(config: &ExperimentConfig, gen: bool) -> Result<Dataset> {
    match (&config.data_dir, gen) {
        (Some(dir), false) => load_dataset(dir),
        (Some(dir), true) => {
            let data = generate_dataset(&config.channel)?;
            write_dataset(&data, dir)?;
            Ok(data)
        }
        (None, true) => generate_dataset(&config.channel),
        (None, false) => Err(Error::Config("no data_dir configured; pass --gen to synthesize the data".into())),
    }
}

/// Evaluates a saved checkpoint on the test split (train split when there is none).
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, data: &Dataset, llr_clip: f64) -> Result<EvalReport> {
    let model = Model::from_checkpoint(checkpoint)?;
    let source = if data.test.is_empty() { data.train.clone() } else { data.test.clone() };
    let set = WindowedDataset::from_sectors(source, model.mlp.spec.d_in(), checkpoint.decision_delay)?;
    evaluate(&model, &set, llr_clip)
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub ber_baseline: f64,
    pub ber_candidate: f64,
    /// `(BER_a − BER_b) / BER_a`.
    pub reduction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn relative_reduction(ber_a: f64, ber_b: f64) -> f64 {
    (ber_a - ber_b) / ber_a
}

/// 95% interval for the relative reduction from binomial error counts, via
/// the delta method on the log BER ratio.
pub fn reduction_ci(errors_a: usize, bits_a: usize, errors_b: usize, bits_b: usize) -> (f64, f64) {
    // Half an error keeps the interval finite when a count is zero.
    let ea = (errors_a as f64).max(0.5);
    let eb = (errors_b as f64).max(0.5);
    let pa = ea / bits_a as f64;
    let pb = eb / bits_b as f64;
    let log_ratio = (pb / pa).ln();
    let sd = ((1.0 - pa) / ea + (1.0 - pb) / eb).sqrt();
    let z = 1.959_963_984_540_054;
    (1.0 - (log_ratio + z * sd).exp(), 1.0 - (log_ratio - z * sd).exp())
}

pub fn compare(a: &RunSummary, b: &RunSummary) -> Result<Comparison> {
    if a.dataset_hash != b.dataset_hash {
        return Err(Error::DatasetMismatch(a.dataset_hash.clone(), b.dataset_hash.clone()));
    }
    let (ci_low, ci_high) = reduction_ci(a.test.errors, a.test.bits, b.test.errors, b.test.bits);
    Ok(Comparison {
        baseline: a.name.clone(),
        candidate: b.name.clone(),
        ber_baseline: a.test.ber,
        ber_candidate: b.test.ber,
        reduction: relative_reduction(a.test.ber, b.test.ber),
        ci_low,
        ci_high,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} → {}: BER {:.5} → {:.5}, reduction {:.2}% (95% CI {:.2}% … {:.2}%)",
            self.baseline,
            self.candidate,
            self.ber_baseline,
            self.ber_candidate,
            100.0 * self.reduction,
            100.0 * self.ci_low,
            100.0 * self.ci_high
        )
    }
}

// ---------------------------------------------------------------------------
// Presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Table1,
    Table2,
    Table3,
    Fig3,
    Fig4,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Table1, Preset::Table2, Preset::Table3, Preset::Fig3, Preset::Fig4];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
            Preset::Fig3 => "fig3",
            Preset::Fig4 => "fig4",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (expected table1|table2|table3|fig3|fig4)")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetOptions {
    /// Train sectors (and as many test sectors); `None` means the desk default.
    pub sectors: Option<usize>,
    /// Reference protocol: 100 sectors and the matching epoch counts.
    pub full: bool,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self { sectors: None, full: false, seed: ChannelSection::default().seed, out: PathBuf::from("runs") }
    }
}

impl PresetOptions {
    pub fn n_sectors(&self) -> usize {
        self.sectors.unwrap_or(if self.full { FULL_SECTORS } else { DESK_SECTORS })
    }

    /// Epoch count giving roughly the same number of optimizer steps as
    /// `desk_epochs` would at the desk sector count.
    fn epochs(&self, desk_epochs: usize) -> usize {
        let steps = desk_epochs * DESK_SECTORS;
        steps.div_ceil(self.n_sectors()).max(1)
    }

    pub fn channel(&self, regime: NoiseRegime) -> ChannelSection {
        let n = self.n_sectors();
        ChannelSection {
            params: regime.params(),
            train_sectors: n,
            test_sectors: n,
            seed: self.seed,
            ..ChannelSection::default()
        }
    }
}

/// Desk-scale epoch counts per criterion.
pub const MSE_EPOCHS: usize = 20;
pub const CE_EPOCHS: usize = 60;

/// Named model variants shared by the presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    LeMseFixed,
    NleMseFixed,
    LeMseTa,
    LeCeTa,
    NleCeTa,
    NleCeFixed,
    NleReluCeTa,
    Nle4CeTa,
    Nle8CeTa,
    Nle63CeTa,
    Nle64CeTa,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::LeMseFixed => "le_mse_fixed",
            Variant::NleMseFixed => "nle_22-4-1_mse_fixed",
            Variant::LeMseTa => "le_mse_ta",
            Variant::LeCeTa => "le_ce_ta",
            Variant::NleCeTa => "nle_22-6-1_tanh_ce_ta",
            Variant::NleCeFixed => "nle_22-6-1_tanh_ce_fixed",
            Variant::NleReluCeTa => "nle_22-6-1_relu_ce_ta",
            Variant::Nle4CeTa => "nle_22-4-1_tanh_ce_ta",
            Variant::Nle8CeTa => "nle_22-8-1_tanh_ce_ta",
            Variant::Nle63CeTa => "nle_22-6-3-1_tanh_ce_ta",
            Variant::Nle64CeTa => "nle_22-6-4-1_tanh_ce_ta",
        }
    }

    fn layout(self) -> (Vec<usize>, Activation, Criterion, TargetMode) {
        let w = 2 * D_IN;
        let fixed = TargetMode::fixed(&[4.0, 7.0, 1.0]);
        let ta = TargetMode::adaptive();
        use Activation::{Relu, Tanh};
        use Criterion::{Ce, Mse};
        match self {
            Variant::LeMseFixed => (vec![w, 1], Tanh, Mse, fixed),
            Variant::NleMseFixed => (vec![w, 4, 1], Tanh, Mse, fixed),
            Variant::LeMseTa => (vec![w, 1], Tanh, Mse, ta),
            Variant::LeCeTa => (vec![w, 1], Tanh, Ce, ta),
            Variant::NleCeTa => (vec![w, 6, 1], Tanh, Ce, ta),
            Variant::NleCeFixed => {
                (vec![w, 6, 1], Tanh, Ce, TargetMode::Fixed { taps: vec![4.0, 7.0, 1.0], unit_energy: true })
            }
            Variant::NleReluCeTa => (vec![w, 6, 1], Relu, Ce, ta),
            Variant::Nle4CeTa => (vec![w, 4, 1], Tanh, Ce, ta),
            Variant::Nle8CeTa => (vec![w, 8, 1], Tanh, Ce, ta),
            Variant::Nle63CeTa => (vec![w, 6, 3, 1], Tanh, Ce, ta),
            Variant::Nle64CeTa => (vec![w, 6, 4, 1], Tanh, Ce, ta),
        }
    }

    pub fn config(self, opts: &PresetOptions, preset: Preset) -> ExperimentConfig {
        let (layer_sizes, activation, criterion, target_mode) = self.layout();
        let desk_epochs = match criterion {
            Criterion::Mse => MSE_EPOCHS,
            Criterion::Ce => CE_EPOCHS,
        };
        ExperimentConfig {
            name: self.name().into(),
            channel: opts.channel(preset.regime()),
            equalizer: EqualizerSection { layer_sizes, activation, ..Default::default() },
            training: TrainConfig {
                criterion,
                epochs: opts.epochs(desk_epochs),
                target_mode,
                seed: derive_seed(opts.seed, 3),
                ..Default::default()
            },
            output_dir: opts.out.join(preset.name()),
            data_dir: None,
        }
    }
}

impl Preset {
    /// The structure comparison under MSE uses the electronic-noise channel;
    /// the criterion and target comparisons use the jitter-dominated one.
    pub fn regime(self) -> NoiseRegime {
        match self {
            Preset::Table1 | Preset::Fig3 => NoiseRegime::Electronic,
            Preset::Table2 | Preset::Table3 | Preset::Fig4 => NoiseRegime::Jitter,
        }
    }

    pub fn variants(self) -> Vec<Variant> {
        use Variant::*;
        match self {
            Preset::Table1 | Preset::Fig3 => vec![LeMseFixed, NleMseFixed],
            Preset::Table2 => vec![NleCeFixed, NleCeTa, NleReluCeTa, Nle4CeTa, Nle8CeTa, Nle63CeTa, Nle64CeTa],
            Preset::Table3 => vec![LeMseTa, LeCeTa, NleCeTa],
            Preset::Fig4 => vec![LeMseTa, LeCeTa],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

impl OrderingCheck {
    fn new(name: &str, holds: bool, detail: String) -> Self {
        Self { name: name.into(), holds, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub model: String,
    pub file: String,
    pub tau: f64,
    pub tail_mass: f64,
    pub peak_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSummary {
    pub preset: Preset,
    pub tool_version: String,
    pub regime: NoiseRegime,
    pub jitter_sigma: f64,
    pub awgn_sigma: f64,
    pub raw_ber: f64,
    pub dataset_hash: String,
    pub sectors: usize,
    pub rows: Vec<RunSummary>,
    pub comparisons: Vec<Comparison>,
    pub histograms: Vec<HistogramSummary>,
    pub orderings: Vec<OrderingCheck>,
}

impl PresetSummary {
    pub fn all_hold(&self) -> bool {
        self.orderings.iter().all(|o| o.holds)
    }

    pub fn row(&self, name: &str) -> Option<&RunSummary> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Trains several configurations on shared data, one worker per model.
pub fn run_many(configs: &[ExperimentConfig], data: &Dataset) -> Result<Vec<RunOutcome>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get());
    if workers <= 1 || configs.len() <= 1 {
        return configs.iter().map(|c| run_on(c, data)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || run_on(c, data))).collect();
        handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
    })
}

/// Runs a preset on freshly generated data and writes every artifact under
/// `<out>/<preset>/`.
pub fn run_preset(preset: Preset, opts: &PresetOptions) -> Result<PresetSummary> {
    let data = generate_dataset(&opts.channel(preset.regime()))?;
    run_preset_on(preset, opts, &data)
}

pub fn run_preset_on(preset: Preset, opts: &PresetOptions, data: &Dataset) -> Result<PresetSummary> {
    let configs: Vec<_> = preset.variants().into_iter().map(|v| v.config(opts, preset)).collect();
    let dir = opts.out.join(preset.name());
    fs::create_dir_all(&dir)?;
    for c in &configs {
        fs::write(dir.join(format!("{}.toml", c.name)), c.to_toml()?)?;
    }
    let outcomes = run_many(&configs, data)?;
    for o in &outcomes {
        write_outcome(o, &dir)?;
    }
    let mut summary = PresetSummary {
        preset,
        tool_version: TOOL_VERSION.into(),
        regime: preset.regime(),
        jitter_sigma: data.params.jitter_sigma,
        awgn_sigma: data.params.awgn_sigma,
        raw_ber: data.raw_ber,
        dataset_hash: data.hash.clone(),
        sectors: data.train.len(),
        rows: outcomes.iter().map(|o| o.summary.clone()).collect(),
        comparisons: Vec::new(),
        histograms: Vec::new(),
        orderings: Vec::new(),
    };
    let get = |v: Variant| summary.row(v.name()).cloned().expect("variant trained");
    match preset {
        Preset::Table1 => {
            let (le, nle) = (get(Variant::LeMseFixed), get(Variant::NleMseFixed));
            summary.orderings = table1_orderings(&le, &nle);
        }
        Preset::Table2 => {
            let (fixed, ta) = (get(Variant::NleCeFixed), get(Variant::NleCeTa));
            summary.comparisons.push(compare(&fixed, &ta)?);
            summary.orderings = table2_orderings(&fixed, &ta);
        }
        Preset::Table3 => {
            let (le_mse, le_ce, nle_ce) = (get(Variant::LeMseTa), get(Variant::LeCeTa), get(Variant::NleCeTa));
            summary.comparisons = vec![compare(&le_mse, &nle_ce)?, compare(&le_mse, &le_ce)?, compare(&le_ce, &nle_ce)?];
            summary.orderings = table3_orderings(&le_mse, &le_ce, &nle_ce)?;
        }
        Preset::Fig3 => {
            let find = |v: Variant| outcomes.iter().find(|o| o.summary.name == v.name()).expect("variant trained");
            let (le, nle) = (find(Variant::LeMseFixed), find(Variant::NleMseFixed));
            let (hists, checks) = fig3_histograms(le, nle, data, &dir)?;
            summary.histograms = hists;
            summary.orderings = checks;
        }
        Preset::Fig4 => {
            let (mse, ce) = (get(Variant::LeMseTa), get(Variant::LeCeTa));
            summary.orderings = fig4_orderings(&mse, &ce);
        }
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

pub fn table1_orderings(le: &RunSummary, nle: &RunSummary) -> Vec<OrderingCheck> {
    vec![
        OrderingCheck::new(
            "mse_nle_below_le",
            nle.test.mse < le.test.mse,
            format!("MSE NLE {:.4} vs LE {:.4}", nle.test.mse, le.test.mse),
        ),
        OrderingCheck::new(
            "ber_nle_above_le",
            nle.test.ber > le.test.ber,
            format!("BER NLE {:.5} vs LE {:.5}", nle.test.ber, le.test.ber),
        ),
    ]
}

pub fn table2_orderings(fixed: &RunSummary, ta: &RunSummary) -> Vec<OrderingCheck> {
    vec![OrderingCheck::new(
        "ta_beats_fixed",
        ta.test.ber < fixed.test.ber,
        format!("BER TA {:.5} vs fixed {:.5}", ta.test.ber, fixed.test.ber),
    )]
}

/// Minimum relative reduction of NLE-CE over LE-MSE, required of the lower
/// 95% confidence bound.
pub const TABLE3_MIN_REDUCTION: f64 = 0.10;

pub fn table3_orderings(le_mse: &RunSummary, le_ce: &RunSummary, nle_ce: &RunSummary) -> Result<Vec<OrderingCheck>> {
    let c = compare(le_mse, nle_ce)?;
    Ok(vec![
        OrderingCheck::new(
            "nle_ce_below_le_ce",
            nle_ce.test.ber < le_ce.test.ber,
            format!("BER NLE-CE {:.5} vs LE-CE {:.5}", nle_ce.test.ber, le_ce.test.ber),
        ),
        OrderingCheck::new(
            "le_ce_below_le_mse",
            le_ce.test.ber < le_mse.test.ber,
            format!("BER LE-CE {:.5} vs LE-MSE {:.5}", le_ce.test.ber, le_mse.test.ber),
        ),
        OrderingCheck::new(
            "nle_ce_reduction_at_least_10pct",
            c.ci_low >= TABLE3_MIN_REDUCTION,
            format!("{c}"),
        ),
    ])
}

pub fn fig4_orderings(mse: &RunSummary, ce: &RunSummary) -> Vec<OrderingCheck> {
    let (a, b) = (&mse.final_train, &ce.final_train);
    vec![
        OrderingCheck::new("final_ce_lower", b.ce < a.ce, format!("final CE: CE-trained {:.5} vs MSE-trained {:.5}", b.ce, a.ce)),
        OrderingCheck::new(
            "final_ber_lower",
            b.ber < a.ber,
            format!("final BER: CE-trained {:.5} vs MSE-trained {:.5}", b.ber, a.ber),
        ),
        OrderingCheck::new(
            "final_mse_higher",
            b.mse > a.mse,
            format!("final MSE: CE-trained {:.5} vs MSE-trained {:.5}", b.mse, a.mse),
        ),
    ]
}

/// Histogram bins used by the error-PDF preset.
pub const HISTOGRAM_BINS: usize = 121;

/// Where the NLE error density, having dropped below the LE density on the
/// shoulders of its peak, first rises back above it (`±e` folded together).
/// `None` when the densities cross fewer than twice.
pub fn tail_crossover(le: &ErrorHistogram, nle: &ErrorHistogram) -> Option<f64> {
    let n = le.density.len();
    let centre = n / 2;
    let folded = |h: &ErrorHistogram, d: usize| h.density[centre + d] + if d == 0 { 0.0 } else { h.density[centre - d] };
    let mut in_shoulder = false;
    for d in 0..n - centre {
        let (a, b) = (folded(le, d), folded(nle, d));
        if a == 0.0 && b == 0.0 {
            continue;
        }
        if b < a {
            in_shoulder = true;
        } else if in_shoulder {
            return Some(le.edges[centre + d]);
        }
    }
    None
}

fn fig3_histograms(
    le: &RunOutcome,
    nle: &RunOutcome,
    data: &Dataset,
    dir: &Path,
) -> Result<(Vec<HistogramSummary>, Vec<OrderingCheck>)> {
    let test = if data.test.is_empty() { data.train.clone() } else { data.test.clone() };
    let set = |o: &RunOutcome| WindowedDataset::from_sectors(test.clone(), D_IN, o.summary.decision_delay);
    let half_range = 6.0 * le.summary.test.mse.max(nle.summary.test.mse).sqrt();
    let (le_set, nle_set) = (set(le)?, set(nle)?);
    let h_le = error_histogram(&le.model, &le_set, HISTOGRAM_BINS, half_range, 0.0)?;
    let h_nle = error_histogram(&nle.model, &nle_set, HISTOGRAM_BINS, half_range, 0.0)?;
    let tau = tail_crossover(&h_le, &h_nle).unwrap_or(half_range);
    let h_le = error_histogram(&le.model, &le_set, HISTOGRAM_BINS, half_range, tau)?;
    let h_nle = error_histogram(&nle.model, &nle_set, HISTOGRAM_BINS, half_range, tau)?;
    let mut out = Vec::new();
    for (o, h) in [(le, &h_le), (nle, &h_nle)] {
        let file = format!("{}_error_hist.csv", o.summary.name);
        let mut csv = Vec::new();
        h.write_csv(&mut csv)?;
        fs::write(dir.join(&file), csv)?;
        out.push(HistogramSummary {
            model: o.summary.name.clone(),
            file,
            tau,
            tail_mass: h.tail_mass,
            peak_density: h.density[HISTOGRAM_BINS / 2],
        });
    }
    let checks = vec![
        OrderingCheck::new(
            "nle_more_peaked",
            out[1].peak_density > out[0].peak_density,
            format!("density at 0: NLE {:.4} vs LE {:.4}", out[1].peak_density, out[0].peak_density),
        ),
        OrderingCheck::new(
            "nle_heavier_tail",
            out[1].tail_mass > out[0].tail_mass,
            format!("P(|e| > {tau:.3}): NLE {:.5} vs LE {:.5}", out[1].tail_mass, out[0].tail_mass),
        ),
    ];
    Ok((out, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_reduction_values() {
        assert!((relative_reduction(0.0145, 0.0112) - 0.2276).abs() < 5e-5);
        assert!((relative_reduction(0.0145, 0.0137) - 0.0552).abs() < 5e-5);
    }

    #[test]
    fn identical_counts_give_zero_centred_interval() {
        let (lo, hi) = reduction_ci(1000, 100_000, 1000, 100_000);
        assert!(lo < 0.0 && hi > 0.0);
        assert!((lo + hi).abs() < 0.01);
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let err = ExperimentConfig::from_toml("[training]\nlearning_rte = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = ExperimentConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let ta = ExperimentConfig::from_toml(
            "[training]\ncriterion = \"ce\"\n[training.target_mode]\nkind = \"adaptive\"\nlen = 5\nmonic = true\n",
        )
        .unwrap();
        assert_eq!(ta.training.target_mode, TargetMode::adaptive());
    }

    #[test]
    fn config_hash_ignores_locations() {
        let a = ExperimentConfig::default();
        let moved = ExperimentConfig { output_dir: "elsewhere".into(), data_dir: Some("d".into()), ..a.clone() };
        assert_eq!(a.hash(), moved.hash());
        let mut reseeded = a.clone();
        reseeded.channel.seed += 1;
        assert_ne!(a.hash(), reseeded.hash());
    }

    #[test]
    fn tail_crossover_finds_outer_region() {
        let edges: Vec<f64> = (0..=7).map(|i| i as f64 - 3.5).collect();
        let hist = |density: Vec<f64>| ErrorHistogram { edges: edges.clone(), density, tau: 0.0, tail_mass: 0.0, samples: 1 };
        let le = hist(vec![0.0, 0.05, 0.2, 0.3, 0.2, 0.05, 0.0]);
        let nle = hist(vec![0.02, 0.01, 0.1, 0.6, 0.1, 0.01, 0.02]);
        assert_eq!(tail_crossover(&le, &nle), Some(2.5));
        let nle = hist(vec![0.0, 0.01, 0.1, 0.6, 0.1, 0.01, 0.0]);
        assert_eq!(tail_crossover(&le, &nle), None);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("table9".parse::<Preset>().is_err());
        assert_eq!(Preset::Table2.variants().len(), 7);
        assert_eq!(Preset::Table3.variants().len(), 3);
    }

    #[test]
    fn epoch_scaling_keeps_step_budget() {
        let desk = PresetOptions::default();
        let full = PresetOptions { full: true, ..Default::default() };
        assert_eq!(desk.epochs(CE_EPOCHS), CE_EPOCHS);
        assert_eq!(full.epochs(CE_EPOCHS), CE_EPOCHS * DESK_SECTORS / FULL_SECTORS);
        assert_eq!(full.n_sectors(), 100);
    }

    #[test]
    fn dataset_archive_round_trip_and_mismatch() {
        let channel = ChannelSection { n_bits: 400, train_sectors: 2, test_sectors: 1, calibrate: false, ..Default::default() };
        let data = generate_dataset(&channel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.hash, data.hash);
        assert_eq!(back.train, data.train);
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::MissingData(_))));

        let other = generate_dataset(&ChannelSection { seed: 9, ..channel }).unwrap();
        assert_ne!(other.hash, data.hash);
    }
}
