use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use codesign::io::checkpoint::load_checkpoint;
use codesign::io::config::{DatasetSpec, RunConfig};
use codesign::io::formats::{encode_measurement_raw, load_ca, load_scene, measurement_csv, save_ca, CaFormat};
use codesign::trainer::{gradient_check, GradCheckInstance};
use codesign::workflow::{
    design, evaluate, export, load_split, metrics_csv, parse_levels, prepare, simulate, write_design,
};
use codesign::SensingKind;

const TINY_GRADCHECK_CONFIG: &str = include_str!("../../../recipes/gradcheck_tiny.json");

/// End-to-end coded-aperture design.
#[derive(Parser)]
#[command(name = "codesign", version, about)]
struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Raw,
    Csv,
    Pgm,
}

impl From<FormatArg> for CaFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Raw => CaFormat::Raw,
            FormatArg::Csv => CaFormat::Csv,
            FormatArg::Pgm => CaFormat::Pgm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train aperture and decoder from a config file.
    Design {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding the MNIST IDX files.
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Write test-split metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset name (`mnist`, `synthetic`) or a JSON dataset object.
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        /// Levels for the binarization residual.
        #[arg(long, default_value = "0,1")]
        levels: String,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Config to check; defaults to a built-in tiny instance.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        /// Training scenes in the checked batch.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Apply the forward model to one scene.
    Simulate {
        #[arg(long)]
        ca: PathBuf,
        #[arg(long, value_enum, default_value = "raw")]
        ca_format: FormatArg,
        /// Scene file: `.csv`, `.pgm`, or raw little-endian f64.
        #[arg(long)]
        scene: PathBuf,
        /// Measurement SNR in dB, or `none`.
        #[arg(long)]
        snr: String,
        /// `spc` or `cassi:<bands>`.
        #[arg(long, default_value = "spc")]
        sensing: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; `.csv` writes text, anything else RAW.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the checkpoint's aperture snapped to the given levels.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        levels: String,
        /// Output path; a file stem for CSV and PGM.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "raw")]
        format: FormatArg,
    },
}

fn parse_sensing(text: &str) -> Result<SensingKind> {
    match text.split_once(':') {
        None if text == "spc" => Ok(SensingKind::Spc),
        Some(("cassi", bands)) => Ok(SensingKind::Cassi {
            bands: bands.parse().context("band count after `cassi:`")?,
        }),
        _ => bail!("sensing must be `spc` or `cassi:<bands>`, got `{text}`"),
    }
}

fn parse_snr(text: &str) -> Result<Option<f64>> {
    if text.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    Ok(Some(text.parse().with_context(|| format!("SNR `{text}`"))?))
}

fn parse_dataset(text: &str) -> Result<DatasetSpec> {
    if text.trim_start().starts_with('{') {
        Ok(serde_json::from_str(text).context("dataset object")?)
    } else {
        text.parse::<DatasetSpec>().map_err(anyhow::Error::msg)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        codesign::par::configure_threads(n);
    }
    match cli.command {
        Command::Design {
            config,
            out,
            data_dir,
            quiet,
        } => {
            let cfg = codesign::io::load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            let prepared = prepare(&cfg, &data_dir)?;
            let result = design(&prepared, !quiet)?;
            for p in write_design(&out, &cfg, &result)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
            data_dir,
            levels,
        } => {
            let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let spec = parse_dataset(&dataset)?;
            let bands = match ck.sensing {
                SensingKind::Spc => 1,
                SensingKind::Cassi { bands } => bands,
            };
            let hint = (ck.aperture.rows(), ck.aperture.cols(), bands);
            let split = load_split(&spec, Some(hint), &data_dir)?;
            let report = evaluate(&ck, &split.test, &parse_levels(&levels)?)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("metrics.csv");
            std::fs::write(&path, metrics_csv(&report))?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck {
            config,
            data_dir,
            samples,
            step,
        } => {
            let cfg = match config {
                Some(p) => codesign::io::load_config(&p).with_context(|| format!("loading {}", p.display()))?,
                None => RunConfig::from_json(TINY_GRADCHECK_CONFIG)?,
            };
            let prepared = prepare(&cfg, &data_dir)?;
            let inst = GradCheckInstance {
                param: prepared.param,
                net: prepared.net,
                kind: prepared.sensing,
                data: prepared.split.train.head(samples),
                epoch: 0,
            };
            let report = gradient_check(&prepared.train, &inst, step)?;
            let mut ok = true;
            for g in &report {
                println!(
                    "{:<18} {:>5} params  max relative error {:.3e}",
                    g.group, g.parameters, g.max_rel_error
                );
                ok &= g.max_rel_error <= 1e-4;
            }
            return Ok(ok);
        }
        Command::Simulate {
            ca,
            ca_format,
            scene,
            snr,
            sensing,
            seed,
            out,
        } => {
            let aperture = load_ca(&ca, ca_format.into()).with_context(|| format!("loading {}", ca.display()))?;
            let f = load_scene(&scene).with_context(|| format!("loading {}", scene.display()))?;
            let g = simulate(&aperture, parse_sensing(&sensing)?, &f, parse_snr(&snr)?, seed)?;
            ensure_parent(&out)?;
            if out.extension().is_some_and(|e| e == "csv") {
                std::fs::write(&out, measurement_csv(&g))?;
            } else {
                std::fs::write(&out, encode_measurement_raw(&g)?)?;
            }
            println!("wrote {}", out.display());
        }
        Command::Export {
            checkpoint,
            levels,
            out,
            format,
        } => {
            let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let q = export(&ck, &parse_levels(&levels)?)?;
            ensure_parent(&out)?;
            for p in save_ca(&out, &q, format.into())? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed: relative error above 1e-4");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
