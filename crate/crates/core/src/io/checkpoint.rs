//! Trained-system checkpoints.
//!
//! Little-endian container:
//!
//! ```text
//! "APCK" u32 version
//! u32 task (0 classification, 1 reconstruction)
//! u32 sensing (0 spc, 1 cassi)  u32 bands
//! f64 measurement scale
//! u64 aperture block length, then a RAW aperture block
//! u32 layer count
//! per layer: u32 outputs, u32 inputs, u32 activation code
//! per layer: outputs*inputs f64 weights (row-major), outputs f64 bias
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::formats::{encode_ca_raw, put_f64s, put_u32, read_ca_raw, Reader};
use crate::ca::CodedApertureSet;
use crate::decoder::{Activation, DecoderNetwork, Dense};
use crate::error::{Error, Result};
use crate::sensing::SensingKind;
use crate::trainer::Task;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"APCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Deployed aperture and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub sensing: SensingKind,
    pub measurement_scale: f64,
    pub aperture: CodedApertureSet,
    pub net: DecoderNetwork,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut out, matches!(ck.task, Task::Reconstruction) as usize)?;
    let (kind, bands) = match ck.sensing {
        SensingKind::Spc => (0, 0),
        SensingKind::Cassi { bands } => (1, bands),
    };
    put_u32(&mut out, kind)?;
    put_u32(&mut out, bands)?;
    put_f64s(&mut out, [ck.measurement_scale]);
    let raw = encode_ca_raw(&ck.aperture)?;
    out.extend_from_slice(&(raw.len() as u64).to_le_bytes());
    out.extend_from_slice(&raw);
    let layers = ck.net.layers();
    put_u32(&mut out, layers.len())?;
    for l in layers {
        put_u32(&mut out, l.outputs())?;
        put_u32(&mut out, l.inputs())?;
        put_u32(&mut out, l.activation.code() as usize)?;
    }
    for l in layers {
        put_f64s(&mut out, l.weights.iter().copied());
        put_f64s(&mut out, l.bias.iter().copied());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return format_err("bad checkpoint magic");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let task = match r.u32()? {
        0 => Task::Classification,
        1 => Task::Reconstruction,
        t => return format_err(format!("unknown task code {t}")),
    };
    let sensing = match (r.u32()?, r.u32()? as usize) {
        (0, _) => SensingKind::Spc,
        (1, bands) => SensingKind::Cassi { bands },
        (k, _) => return format_err(format!("unknown sensing code {k}")),
    };
    let measurement_scale = r.f64()?;
    let block_len = usize::try_from(r.u64()?).map_err(|_| Error::Format("aperture block too large".into()))?;
    let mut block = Reader::new(r.take(block_len)?);
    let aperture = read_ca_raw(&mut block)?;
    block.finish()?;
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (o, i, a) = (r.u32()? as usize, r.u32()? as usize, r.u32()?);
        let act = Activation::from_code(a).ok_or_else(|| Error::Format(format!("unknown activation code {a}")))?;
        shapes.push((o, i, act));
    }
    let mut layers = Vec::with_capacity(count);
    for (o, i, activation) in shapes {
        let weights = Array2::from_shape_vec((o, i), r.f64s(o * i)?).map_err(|e| Error::Format(e.to_string()))?;
        let bias = Array1::from(r.f64s(o)?);
        layers.push(Dense {
            weights,
            bias,
            activation,
        });
    }
    r.finish()?;
    Ok(Checkpoint {
        task,
        sensing,
        measurement_scale,
        aperture,
        net: DecoderNetwork::from_layers(layers)?,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::init_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Checkpoint {
            task: Task::Classification,
            sensing: SensingKind::Cassi { bands: 3 },
            measurement_scale: 0.125,
            aperture: CodedApertureSet::from_vec((2, 2, 2, 1), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap(),
            net: init_network(&[16, 5, 3], &[Activation::Relu, Activation::Softmax], &mut rng).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_trailing_bytes_fail() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(1);
        assert!(decode_checkpoint(&long).is_err());
        let mut bad = bytes;
        bad[1] = b'x';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
