use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tdmr::chansim::{ChannelParams, ReaderGeometry};
use tdmr::experiment::{generate_dataset, write_dataset, ChannelSection, SECTOR_BITS};

#[derive(Parser)]
#[command(name = "chansim", version, about = "Two-reader magnetic recording channel simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and archive train/test sectors.
    Gen {
        #[arg(long, default_value_t = 20)]
        sectors: usize,
        /// Test sectors (defaults to --sectors).
        #[arg(long)]
        test_sectors: Option<usize>,
        #[arg(long, default_value_t = SECTOR_BITS)]
        bits: usize,
        /// Reader separation, percent of track pitch.
        #[arg(long, default_value_t = 30.0)]
        cts: f64,
        /// Target raw BER for noise calibration.
        #[arg(long, default_value_t = 0.11, conflicts_with = "awgn")]
        raw_ber: f64,
        /// Fixed AWGN standard deviation instead of calibration.
        #[arg(long)]
        awgn: Option<f64>,
        #[arg(long)]
        pw50: Option<f64>,
        /// Jitter standard deviation, fraction of T.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let Command::Gen { sectors, test_sectors, bits, cts, raw_ber, awgn, pw50, jitter, seed, out } =
        Cli::parse().command;
    let base = ChannelSection::default();
    let params = ChannelParams {
        pw50_over_t: pw50.unwrap_or(base.params.pw50_over_t),
        jitter_sigma: jitter.unwrap_or(base.params.jitter_sigma),
        awgn_sigma: awgn.unwrap_or(0.0),
        ..base.params
    };
    let channel = ChannelSection {
        params,
        geometry: ReaderGeometry { cts_percent: cts, ..base.geometry },
        calibrate: awgn.is_none(),
        raw_ber_target: raw_ber,
        n_bits: bits,
        train_sectors: sectors,
        test_sectors: test_sectors.unwrap_or(sectors),
        seed,
        ..base
    };
    let data = generate_dataset(&channel)?;
    let manifest = write_dataset(&data, &out)?;
    println!(
        "wrote {} train + {} test sectors of {} bits to {} (awgn_sigma {:.4}, raw BER {:.4})",
        manifest.train_sectors,
        manifest.test_sectors,
        manifest.n_bits,
        out.display(),
        manifest.params.awgn_sigma,
        manifest.raw_ber
    );
    Ok(())
}
