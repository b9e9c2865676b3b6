use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tdmr::equalizer::Checkpoint;
use tdmr::experiment::{
    compare, evaluate_checkpoint, generate_dataset, load_dataset, obtain_dataset, run_on, run_preset, write_dataset,
    write_outcome, ExperimentConfig, Preset, PresetOptions, PresetSummary, RunSummary, TestMetrics,
};
use tdmr::training::DEFAULT_LLR_CLIP;

#[derive(Parser)]
#[command(name = "tdmr", version, about = "Two-reader read-channel equalizer and detector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the train/test sectors of a config and archive them.
    Gen {
        config: PathBuf,
        /// Archive directory; overrides `data_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one config.
    Train {
        config: PathBuf,
        /// Synthesize the data instead of loading the archive.
        #[arg(long)]
        gen: bool,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an archived dataset.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LLR_CLIP)]
        llr_clip: f64,
    },
    /// Relative BER reduction of summary B over summary A.
    Compare { a: PathBuf, b: PathBuf },
    /// Run one of the built-in experiment presets.
    Preset {
        #[arg(value_parser = ["table1", "table2", "table3", "fig3", "fig4"])]
        name: String,
        /// Train and test sectors.
        #[arg(long)]
        sectors: Option<usize>,
        /// 100-sector protocol.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Exit with status 2 if any ordering check fails.
        #[arg(long)]
        assert_orderings: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let Some(dir) = out.or(cfg.data_dir.clone()) else {
                bail!("no output directory: pass --out or set data_dir in the config");
            };
            let data = generate_dataset(&cfg.channel)?;
            let manifest = write_dataset(&data, &dir)?;
            println!(
                "wrote {} train + {} test sectors to {} (awgn_sigma {:.4}, raw BER {:.4}, hash {})",
                manifest.train_sectors,
                manifest.test_sectors,
                dir.display(),
                manifest.params.awgn_sigma,
                manifest.raw_ber,
                &manifest.hash[..12]
            );
        }
        Command::Train { config, gen, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let data = obtain_dataset(&cfg, gen)?;
            let outcome = run_on(&cfg, &data)?;
            write_outcome(&outcome, &cfg.output_dir)?;
            print_rows(std::slice::from_ref(&outcome.summary));
        }
        Command::Eval { checkpoint, data, llr_clip } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(&data)?;
            let report = evaluate_checkpoint(&ckpt, &data, llr_clip)?;
            println!("{}", serde_json::to_string_pretty(&TestMetrics::from(&report))?);
        }
        Command::Compare { a, b } => {
            let a = RunSummary::load(&a).with_context(|| format!("reading {}", a.display()))?;
            let b = RunSummary::load(&b).with_context(|| format!("reading {}", b.display()))?;
            println!("{}", compare(&a, &b)?);
        }
        Command::Preset { name, sectors, full, seed, out, assert_orderings } => {
            let preset: Preset = name.parse()?;
            let mut opts = PresetOptions { sectors, full, out, ..Default::default() };
            if let Some(seed) = seed {
                opts.seed = seed;
            }
            let summary = run_preset(preset, &opts)?;
            print_preset(&summary);
            println!("artifacts in {}", opts.out.join(preset.name()).display());
            if assert_orderings && !summary.all_hold() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_rows(rows: &[RunSummary]) {
    println!(
        "{:<26} {:>10} {:>6} {:>6} {:>5} {:>9} {:>9} {:>9} {:>9}",
        "model", "arch", "crit", "target", "delay", "learnable", "test MSE", "test CE", "test BER"
    );
    for r in rows {
        println!(
            "{:<26} {:>10} {:>6} {:>6} {:>5} {:>9} {:>9.4} {:>9.4} {:>9.5}",
            r.name,
            r.architecture,
            format!("{:?}", r.criterion).to_lowercase(),
            if r.target_mode.is_adaptive() { "ta" } else { "fixed" },
            r.decision_delay,
            r.learnables,
            r.test.mse,
            r.test.ce,
            r.test.ber,
        );
    }
}

fn print_preset(summary: &PresetSummary) {
    println!(
        "preset {} on {} sectors, {:?} channel: jitter {}T, awgn σ={:.4}, raw BER {:.4} (dataset {})",
        summary.preset,
        summary.sectors,
        summary.regime,
        summary.jitter_sigma,
        summary.awgn_sigma,
        summary.raw_ber,
        &summary.dataset_hash[..12]
    );
    print_rows(&summary.rows);
    for c in &summary.comparisons {
        println!("{c}");
    }
    for h in &summary.histograms {
        println!("{}: {} (tau {:.4}, tail mass {:.5})", h.model, h.file, h.tau, h.tail_mass);
    }
    for o in &summary.orderings {
        println!("[{}] {}: {}", if o.holds { "ok" } else { "VIOLATED" }, o.name, o.detail);
    }
}
