//! Config-driven runs: build a problem from a [`RunConfig`], train it,
//! write its artifacts, and evaluate, export or simulate from checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ca::{expand, gaussian_filter_bank, quantize_for_export, CaParameterization, CodedApertureSet};
use crate::data::{synthetic_dataset, Dataset, Split};
use crate::decoder::{init_network, Activation, DecoderNetwork};
use crate::error::{param_err, Error, Result};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::io::config::{DatasetName, DatasetSpec, ParameterizationName, RunConfig, SensingName};
use crate::io::formats::{save_ca, CaFormat};
use crate::io::idx::load_mnist_dir;
use crate::metrics::{mean_sam, psnr, MetricReport};
use crate::sensing::{add_measurement_noise, Measurement, SensingKind, SensingModel};
use crate::trainer::{infer, predict_classes, train_e2e, Task, TrainConfig, TrainOutcome};

/// Everything needed to start training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: RunConfig,
    pub train: TrainConfig,
    pub sensing: SensingKind,
    pub param: CaParameterization,
    pub net: DecoderNetwork,
    pub split: Split,
}

/// Loads or generates the train/test split described by `spec`. `shape`
/// fills in synthetic dimensions the spec leaves open.
pub fn load_split(spec: &DatasetSpec, shape: Option<(usize, usize, usize)>, data_dir: &Path) -> Result<Split> {
    match spec.kind {
        DatasetName::Mnist => {
            let full = load_mnist_dir(data_dir)?;
            let train = match spec.train {
                Some(n) => full.train.head(n),
                None => full.train,
            };
            let test = match spec.test {
                Some(n) => full.test.head(n),
                None => full.test,
            };
            Ok(Split { train, test })
        }
        DatasetName::Synthetic => {
            let (r, c, b) = shape.unwrap_or((8, 8, 1));
            let rows = spec.rows.unwrap_or(r);
            let cols = spec.cols.unwrap_or(c);
            let bands = spec.bands.unwrap_or(b);
            let blobs = spec.blobs.unwrap_or(3);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0));
            Ok(Split {
                train: synthetic_dataset(spec.train.unwrap_or(64), rows, cols, bands, blobs, &mut rng)?,
                test: synthetic_dataset(spec.test.unwrap_or(16), rows, cols, bands, blobs, &mut rng)?,
            })
        }
    }
}

/// Reads the dataset named in `config` and initializes aperture and decoder.
pub fn prepare(config: &RunConfig, data_dir: &Path) -> Result<Prepared> {
    let hint = match config.sensing.kind {
        SensingName::Cassi => config.sensing.bands.map(|b| (8, 8, b)),
        SensingName::Spc => None,
    };
    prepare_with_split(config, load_split(&config.dataset, hint, data_dir)?)
}

/// As [`prepare`] with an already loaded split.
pub fn prepare_with_split(config: &RunConfig, split: Split) -> Result<Prepared> {
    config.validate()?;
    let (rows, cols, bands) = split.train.shape;
    if split.test.shape != split.train.shape {
        return param_err("train and test scenes differ in shape");
    }
    let sensing = config.sensing_kind(bands);
    match sensing {
        SensingKind::Spc if bands != 1 => return param_err("the single-pixel camera needs single-band scenes"),
        SensingKind::Cassi { bands: b } if b != bands => {
            return param_err(format!("config asks for {b} bands, dataset has {bands}"))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shots = config.sensing.shots;
    let init = config.ca_init();
    let param = match config.ca.parameterization {
        ParameterizationName::Dense => CaParameterization::init_dense(shots, rows, cols, 1, init, &mut rng)?,
        ParameterizationName::Kronecker => {
            let [kr, kc] = config.ca.kernel.expect("validated");
            CaParameterization::init_kronecker(shots, rows, cols, kr, kc, 1, init, &mut rng)?
        }
        ParameterizationName::Colored => {
            let [kr, kc] = config.ca.kernel.expect("validated");
            let bank = gaussian_filter_bank(config.ca.colors.unwrap_or(3), bands);
            CaParameterization::init_colored(shots, rows, cols, kr, kc, bank, init, &mut rng)?
        }
    };
    let aperture = expand(&param)?;
    let model = SensingModel::new(sensing, &aperture)?;
    let outputs = match config.task.kind {
        Task::Classification => config
            .task
            .classes
            .or(split.train.num_classes())
            .ok_or_else(|| Error::InvalidParameter("classification needs labelled data".into()))?,
        Task::Reconstruction => split.train.scene_len(),
    };
    let mut sizes = vec![model.measurement_len()];
    sizes.extend(&config.task.hidden);
    sizes.push(outputs);
    let mut acts: Vec<Activation> = vec![config.task.activation; config.task.hidden.len()];
    acts.push(config.task.output_activation());
    let net = init_network(&sizes, &acts, &mut rng)?;
    Ok(Prepared {
        config: config.clone(),
        train: config.train_config(split.train.scene_len())?,
        sensing,
        param,
        net,
        split,
    })
}

/// Trained system ready to be written out.
#[derive(Clone, Debug)]
pub struct DesignResult {
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
    pub report: MetricReport,
}

pub fn design(prepared: &Prepared, verbose: bool) -> Result<DesignResult> {
    let mut train = prepared.train.clone();
    train.verbose = verbose;
    let outcome = train_e2e(
        &train,
        &prepared.split.train,
        prepared.param.clone(),
        prepared.sensing,
        prepared.net.clone(),
    )?;
    let checkpoint = Checkpoint {
        task: train.task,
        sensing: prepared.sensing,
        measurement_scale: train.measurement_scale,
        aperture: outcome.effective_aperture()?,
        net: outcome.net.clone(),
    };
    let report = evaluate(&checkpoint, &prepared.split.test, &train.residual_levels())?;
    Ok(DesignResult {
        outcome,
        checkpoint,
        report,
    })
}

/// Writes `checkpoint.apck`, `history.csv`, `metrics.csv`, `ca.raw`,
/// `ca_s{s}_l{l}.pgm` and the canonical `config.json` under `out`.
pub fn write_design(out: &Path, config: &RunConfig, result: &DesignResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let ck = out.join("checkpoint.apck");
    save_checkpoint(&ck, &result.checkpoint)?;
    written.push(ck);
    let history = out.join("history.csv");
    fs::write(&history, result.outcome.history.to_csv())?;
    written.push(history);
    let metrics = out.join("metrics.csv");
    fs::write(&metrics, metrics_csv(&result.report))?;
    written.push(metrics);
    written.extend(save_ca(
        &out.join("ca.raw"),
        &result.checkpoint.aperture,
        CaFormat::Raw,
    )?);
    written.extend(save_ca(&out.join("ca"), &result.checkpoint.aperture, CaFormat::Pgm)?);
    let cfg = out.join("config.json");
    fs::write(&cfg, config.to_json() + "\n")?;
    written.push(cfg);
    Ok(written)
}

pub fn metrics_csv(report: &MetricReport) -> String {
    format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row())
}

/// Metrics of a deployed system on `data`: accuracy for classifiers, PSNR
/// pooled over the split (and mean SAM for spectral scenes) for
/// reconstruction, plus the aperture fields.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, levels: &[f64]) -> Result<MetricReport> {
    let model = SensingModel::new(ck.sensing, &ck.aperture)?;
    let mut report = MetricReport {
        compression_ratio: Some(model.compression_ratio()),
        ..Default::default()
    };
    match ck.task {
        Task::Classification => {
            let labels = data
                .labels
                .as_deref()
                .ok_or_else(|| Error::InvalidParameter("classification metrics need labels".into()))?;
            let pred = predict_classes(
                &ck.aperture,
                ck.sensing,
                &ck.net,
                data.scenes.view(),
                ck.measurement_scale,
            )?;
            report.accuracy = Some(crate::metrics::accuracy(&pred, labels)?);
        }
        Task::Reconstruction => {
            let est = infer(
                &ck.aperture,
                ck.sensing,
                &ck.net,
                data.scenes.view(),
                ck.measurement_scale,
            )?;
            let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<f64>>();
            let reference = flat(&data.scenes);
            let estimate = flat(&est);
            report.psnr_db = match psnr(&reference, &estimate, 1.0) {
                Ok(v) => Some(v),
                Err(Error::InfinitePsnr) => Some(f64::INFINITY),
                Err(e) => return Err(e),
            };
            let bands = data.shape.2;
            if bands > 1 {
                report.sam_radians = mean_sam(&reference, &estimate, bands).ok();
            }
        }
    }
    report.with_aperture(&ck.aperture, levels)
}

/// Deployed aperture snapped to `levels`.
pub fn export(ck: &Checkpoint, levels: &[f64]) -> Result<CodedApertureSet> {
    quantize_for_export(&ck.aperture, levels)
}

/// Noisy or noiseless measurements of one scene.
pub fn simulate(
    ca: &CodedApertureSet,
    sensing: SensingKind,
    scene: &[f64],
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Measurement> {
    let model = SensingModel::new(sensing, ca)?;
    let clean = model.forward(scene)?;
    if snr_db.is_none() {
        return Ok(clean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = add_measurement_noise(clean.as_slice(), snr_db, &mut rng)?;
    Measurement::new(noisy.into(), clean.shots, clean.per_shot)
}

/// Parses a comma-separated level list such as `"0,1"`.
pub fn parse_levels(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidParameter(format!("level `{t}`: {e}")))
        })
        .collect()
}
