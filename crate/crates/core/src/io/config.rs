//! JSON run configuration.
//!
//! Top-level keys are `task`, `sensing`, `ca`, `regularizers`, `optimizer`,
//! `schedule`, `noise`, `seed` and `dataset`. Unknown keys anywhere are
//! rejected and errors carry the key path. `task` and `dataset` accept a
//! bare name in place of an object. Every default is listed on the field it
//! applies to and in `docs/config.md`.

use std::fmt;
use std::marker::PhantomData;
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::ca::{CaInit, NoiseSpec};
use crate::decoder::Activation;
use crate::error::{param_err, Error, Result};
use crate::regularizers::{RegularizerKind, RegularizerSpec, RhoSchedule};
use crate::sensing::SensingKind;
use crate::trainer::{GateSpec, OptimizerKind, Task, TrainConfig};

fn string_or_struct<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
where
    T: Deserialize<'de> + FromStr<Err = String>,
    D: Deserializer<'de>,
{
    struct NameOrObject<T>(PhantomData<fn() -> T>);

    impl<'de, T> Visitor<'de> for NameOrObject<T>
    where
        T: Deserialize<'de> + FromStr<Err = String>,
    {
        type Value = T;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a name or an object")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<T, E> {
            T::from_str(v).map_err(E::custom)
        }

        fn visit_map<M: MapAccess<'de>>(self, m: M) -> std::result::Result<T, M::Error> {
            T::deserialize(de::value::MapAccessDeserializer::new(m))
        }
    }

    d.deserialize_any(NameOrObject(PhantomData))
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn one() -> f64 {
    1.0
}

/// Decoder and loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: Task,
    /// Hidden layer widths. Default `[128]`.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Hidden activation. Default `relu`.
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Output activation. Default `softmax` for classification, `identity`
    /// for reconstruction.
    #[serde(default)]
    pub output: Option<Activation>,
    /// Output classes. Default: the dataset's label range.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Weight on the task loss. Default 1.
    #[serde(default = "one")]
    pub weight: f64,
    /// Factor applied to measurements before decoding. Default
    /// `1/sqrt(scene length)`.
    #[serde(default)]
    pub measurement_scale: Option<f64>,
}

impl TaskSpec {
    pub fn new(kind: Task) -> Self {
        Self {
            kind,
            hidden: default_hidden(),
            activation: default_activation(),
            output: None,
            classes: None,
            weight: 1.0,
            measurement_scale: None,
        }
    }

    pub fn output_activation(&self) -> Activation {
        self.output.unwrap_or(match self.kind {
            Task::Classification => Activation::Softmax,
            Task::Reconstruction => Activation::Identity,
        })
    }

    pub fn scale_for(&self, scene_len: usize) -> f64 {
        self.measurement_scale
            .unwrap_or_else(|| 1.0 / (scene_len.max(1) as f64).sqrt())
    }
}

impl FromStr for TaskSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Task::deserialize(de::value::StrDeserializer::<de::value::Error>::new(s))
            .map(TaskSpec::new)
            .map_err(|e| e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensingName {
    Spc,
    Cassi,
}

/// Optical system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingSpec {
    pub kind: SensingName,
    pub shots: usize,
    /// Spectral bands for CASSI. Default: the dataset's band count.
    #[serde(default)]
    pub bands: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterizationName {
    #[default]
    Dense,
    Kronecker,
    Colored,
}

/// Aperture parameterization. Rows and columns follow the dataset.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaSpec {
    /// Default `dense`.
    #[serde(default)]
    pub parameterization: ParameterizationName,
    /// `[rows, cols]` of the tiled kernel; required for kronecker and colored.
    #[serde(default)]
    pub kernel: Option<[usize; 2]>,
    /// Filters in the colored bank. Default 3.
    #[serde(default)]
    pub colors: Option<usize>,
    /// Default `plus_minus_one` when a `binary_pm1` term is present, else
    /// `zero_one`.
    #[serde(default)]
    pub init: Option<CaInit>,
    /// Default: no gate.
    #[serde(default)]
    pub gate: Option<GateSpec>,
}

/// One regularizer term: the penalty's own keys plus `rho0`, optional
/// `rhoT` (dynamic schedule when present) and optional `period` (epochs per
/// update, default `epochs / 10`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Map<String, Value>", into = "Map<String, Value>")]
pub struct RegularizerEntry {
    pub kind: RegularizerKind,
    pub rho0: f64,
    pub rho_t: Option<f64>,
    pub period: Option<usize>,
}

impl TryFrom<Map<String, Value>> for RegularizerEntry {
    type Error = String;

    fn try_from(mut map: Map<String, Value>) -> std::result::Result<Self, String> {
        let number = |v: Value, key: &str| v.as_f64().ok_or_else(|| format!("`{key}` must be a number"));
        let rho0 = number(map.remove("rho0").ok_or("missing field `rho0`")?, "rho0")?;
        let rho_t = map.remove("rhoT").map(|v| number(v, "rhoT")).transpose()?;
        let period = map
            .remove("period")
            .map(|v| {
                v.as_u64()
                    .map(|p| p as usize)
                    .ok_or("`period` must be a non-negative integer")
            })
            .transpose()?;
        let kind = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(Self {
            kind,
            rho0,
            rho_t,
            period,
        })
    }
}

impl From<RegularizerEntry> for Map<String, Value> {
    fn from(e: RegularizerEntry) -> Self {
        let mut map = match serde_json::to_value(&e.kind) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        map.insert("rho0".into(), e.rho0.into());
        if let Some(t) = e.rho_t {
            map.insert("rhoT".into(), t.into());
        }
        if let Some(p) = e.period {
            map.insert("period".into(), p.into());
        }
        map
    }
}

impl RegularizerEntry {
    pub fn spec(&self, epochs: usize) -> Result<RegularizerSpec> {
        let rho = match self.rho_t {
            None => {
                if !(self.rho0 >= 0.0 && self.rho0.is_finite()) {
                    return param_err(format!("rho0 must be non-negative, got {}", self.rho0));
                }
                RhoSchedule::constant(self.rho0)
            }
            Some(t) => {
                let period = self.period.unwrap_or((epochs / 10).max(1));
                RhoSchedule::dynamic(self.rho0, t, epochs, period)?
            }
        };
        Ok(RegularizerSpec {
            kind: self.kind.clone(),
            rho,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Adam,
    Sgd,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

/// Defaults: Adam, lr 1e-3, betas 0.9/0.999, eps 1e-8, SGD momentum 0,
/// aperture learning-rate multiplier 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default)]
    pub kind: OptimizerName,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "one")]
    pub ca_lr_multiplier: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerName::Adam,
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            momentum: 0.0,
            ca_lr_multiplier: 1.0,
        }
    }
}

impl OptimizerSpec {
    pub fn kind(&self) -> OptimizerKind {
        match self.kind {
            OptimizerName::Adam => OptimizerKind::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            OptimizerName::Sgd => OptimizerKind::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
        }
    }
}

fn default_epochs() -> usize {
    10
}

fn default_batch() -> usize {
    32
}

fn default_chunk() -> usize {
    64
}

/// Defaults: 10 epochs, batches of 32, reduction chunks of 64.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            chunk_size: default_chunk(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Synthetic,
}

/// For `mnist`, `train`/`test` cap the number of images taken from the
/// front of each split (default: all). For `synthetic`, they are the split
/// sizes (default 64/16) and `rows`, `cols`, `bands`, `blobs` shape the
/// cubes (defaults 8, 8, the CASSI band count or 1, and 3). `seed` drives
/// synthetic generation independently of the run seed (default 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetName,
    #[serde(default)]
    pub train: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default)]
    pub cols: Option<usize>,
    #[serde(default)]
    pub bands: Option<usize>,
    #[serde(default)]
    pub blobs: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DatasetSpec {
    pub fn named(kind: DatasetName) -> Self {
        Self {
            kind,
            train: None,
            test: None,
            rows: None,
            cols: None,
            bands: None,
            blobs: None,
            seed: None,
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        DatasetName::deserialize(de::value::StrDeserializer::<de::value::Error>::new(s))
            .map(DatasetSpec::named)
            .map_err(|e| e.to_string())
    }
}

/// Complete description of one design run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(deserialize_with = "string_or_struct")]
    pub task: TaskSpec,
    pub sensing: SensingSpec,
    #[serde(default)]
    pub ca: CaSpec,
    #[serde(default)]
    pub regularizers: Vec<RegularizerEntry>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    /// Default: no noise.
    #[serde(default)]
    pub noise: NoiseSpec,
    pub seed: u64,
    #[serde(deserialize_with = "string_or_struct")]
    pub dataset: DatasetSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if self.sensing.shots == 0 {
            return bad("sensing.shots", "must be at least 1".into());
        }
        if self.sensing.kind == SensingName::Spc && self.sensing.bands.is_some_and(|b| b != 1) {
            return bad("sensing.bands", "the single-pixel camera takes one band".into());
        }
        if self.ca.parameterization != ParameterizationName::Dense && self.ca.kernel.is_none() {
            return bad("ca.kernel", "required for kronecker and colored apertures".into());
        }
        if self.task.kind == Task::Classification && self.task.output_activation() != Activation::Softmax {
            return bad("task.output", "classification needs a softmax output".into());
        }
        if self.task.hidden.contains(&0) {
            return bad("task.hidden", "layer widths must be positive".into());
        }
        for (i, r) in self.regularizers.iter().enumerate() {
            if let Err(e) = r.spec(self.schedule.epochs.max(1)) {
                return bad(&format!("regularizers[{i}]"), e.to_string());
            }
        }
        Ok(())
    }

    /// Default initialization range for the configured regularizers.
    pub fn ca_init(&self) -> CaInit {
        self.ca.init.unwrap_or_else(|| {
            if self
                .regularizers
                .iter()
                .any(|r| matches!(r.kind, RegularizerKind::BinaryPm1 { .. }))
            {
                CaInit::PlusMinusOne
            } else {
                CaInit::ZeroOne
            }
        })
    }

    /// Sensing kind given the dataset's band count.
    pub fn sensing_kind(&self, data_bands: usize) -> SensingKind {
        match self.sensing.kind {
            SensingName::Spc => SensingKind::Spc,
            SensingName::Cassi => SensingKind::Cassi {
                bands: self.sensing.bands.unwrap_or(data_bands),
            },
        }
    }

    /// Trainer settings for scenes of `scene_len` values.
    pub fn train_config(&self, scene_len: usize) -> Result<TrainConfig> {
        let regularizers = self
            .regularizers
            .iter()
            .map(|r| r.spec(self.schedule.epochs))
            .collect::<Result<Vec<_>>>()?;
        let cfg = TrainConfig {
            epochs: self.schedule.epochs,
            batch_size: self.schedule.batch_size,
            optimizer: self.optimizer.kind(),
            ca_lr_multiplier: self.optimizer.ca_lr_multiplier,
            seed: self.seed,
            noise: self.noise,
            gate: self.ca.gate,
            regularizers,
            task: self.task.kind,
            task_weight: self.task.weight,
            measurement_scale: self.task.scale_for(scene_len),
            chunk_size: self.schedule.chunk_size,
            verbose: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_json(&std::fs::read_to_string(path)?)
}
