//! Aperture and measurement files.
//!
//! RAW aperture layout, all little-endian:
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 0..4  | `APTR`                          |
//! | 4..8  | format version (`u32`, 1)       |
//! | 8..24 | `S, M, N, L` as `u32`           |
//! | 24..  | `f64` entries, shot-major, then rows, cols, planes |
//!
//! CSV and PGM write one file per shot and plane, named
//! `{stem}_s{shot}_l{plane}.{ext}`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::ca::CodedApertureSet;
use crate::error::{param_err, Error, Result};
use crate::sensing::Measurement;

pub const RAW_MAGIC: &[u8; 4] = b"APTR";
pub const RAW_VERSION: u32 = 1;
pub const RAW_HEADER_LEN: usize = 24;
pub const MEASUREMENT_MAGIC: &[u8; 4] = b"APMS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaFormat {
    Csv,
    Pgm,
    Raw,
}

impl std::str::FromStr for CaFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(CaFormat::Csv),
            "pgm" => Ok(CaFormat::Pgm),
            "raw" => Ok(CaFormat::Raw),
            other => param_err(format!("unknown aperture format `{other}` (expected csv, pgm or raw)")),
        }
    }
}

impl CaFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CaFormat::Csv => "csv",
            CaFormat::Pgm => "pgm",
            CaFormat::Raw => "raw",
        }
    }
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => format_err(format!(
                "truncated data: need {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.at == self.bytes.len() {
            Ok(())
        } else {
            format_err(format!("{} trailing bytes", self.bytes.len() - self.at))
        }
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_ca_raw(ca: &CodedApertureSet) -> Result<Vec<u8>> {
    let (s, m, n, l) = ca.dim();
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 8 * ca.as_slice().len());
    out.extend_from_slice(RAW_MAGIC);
    put_u32(&mut out, RAW_VERSION as usize)?;
    for d in [s, m, n, l] {
        put_u32(&mut out, d)?;
    }
    put_f64s(&mut out, ca.as_slice().iter().copied());
    Ok(out)
}

pub(crate) fn read_ca_raw(r: &mut Reader<'_>) -> Result<CodedApertureSet> {
    let magic = r.take(4)?;
    if magic != RAW_MAGIC {
        return format_err(format!("bad aperture magic {magic:?}, expected {RAW_MAGIC:?}"));
    }
    let version = r.u32()?;
    if version != RAW_VERSION {
        return format_err(format!("unsupported aperture version {version}"));
    }
    let (s, m, n, l) = (
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    let len = s
        .checked_mul(m)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| Error::Format("aperture dimensions overflow".into()))?;
    let data = r.f64s(len)?;
    CodedApertureSet::from_vec((s, m, n, l), data)
}

pub fn decode_ca_raw(bytes: &[u8]) -> Result<CodedApertureSet> {
    let mut r = Reader::new(bytes);
    let ca = read_ca_raw(&mut r)?;
    r.finish()?;
    Ok(ca)
}

/// 8-bit grey value of an aperture entry.
pub fn pgm_pixel(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Binary `P5` image with maxval 255.
pub fn encode_pgm(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// `(rows, cols, pixels)` of a `P5` image with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return format_err("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1;
    if fields[0] != "P5" {
        return format_err(format!("bad PGM magic `{}`", fields[0]));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
    };
    let (cols, rows, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return format_err(format!("PGM maxval {maxval}, expected 255"));
    }
    let body = bytes.get(at..).unwrap_or_default();
    if body.len() != rows * cols {
        return format_err(format!("PGM body has {} bytes, expected {}", body.len(), rows * cols));
    }
    Ok((rows, cols, body.to_vec()))
}

fn plane_path(stem: &Path, shot: usize, plane: usize, ext: &str) -> PathBuf {
    let name = stem
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.with_file_name(format!("{name}_s{shot}_l{plane}.{ext}"))
}

fn plane_values(ca: &CodedApertureSet, shot: usize, plane: usize) -> Vec<f64> {
    ca.shot(shot)
        .index_axis(ndarray::Axis(2), plane)
        .iter()
        .copied()
        .collect()
}

fn csv_plane(values: &[f64], cols: usize) -> String {
    let mut out = String::with_capacity(values.len() * 24);
    for row in values.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn parse_csv_plane(text: &str, path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return format_err(format!(
                    "{}:{}: {} fields, expected {c}",
                    path.display(),
                    i + 1,
                    row.len()
                ))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), values))
}

/// Writes `ca` and returns the files created. RAW writes `path` itself;
/// CSV and PGM treat `path` as a stem.
pub fn save_ca(path: &Path, ca: &CodedApertureSet, format: CaFormat) -> Result<Vec<PathBuf>> {
    if format == CaFormat::Raw {
        fs::write(path, encode_ca_raw(ca)?)?;
        return Ok(vec![path.to_path_buf()]);
    }
    let (shots, rows, cols, planes) = ca.dim();
    let mut written = Vec::with_capacity(shots * planes);
    for s in 0..shots {
        for l in 0..planes {
            let p = plane_path(path, s, l, format.extension());
            let values = plane_values(ca, s, l);
            let bytes = match format {
                CaFormat::Csv => csv_plane(&values, cols).into_bytes(),
                _ => encode_pgm(rows, cols, &values.iter().map(|&v| pgm_pixel(v)).collect::<Vec<_>>()),
            };
            fs::write(&p, bytes)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Reads an aperture written by [`save_ca`]. PGM is lossy: entries come
/// back as `pixel / 255`.
pub fn load_ca(path: &Path, format: CaFormat) -> Result<CodedApertureSet> {
    if format == CaFormat::Raw {
        return decode_ca_raw(&fs::read(path)?);
    }
    let mut shots = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    loop {
        let s = shots.len();
        let mut planes = Vec::new();
        loop {
            let p = plane_path(path, s, planes.len(), format.extension());
            if !p.is_file() {
                break;
            }
            let (rows, cols, values) = match format {
                CaFormat::Csv => parse_csv_plane(&fs::read_to_string(&p)?, &p)?,
                _ => {
                    let (r, c, px) = decode_pgm(&fs::read(&p)?)?;
                    (r, c, px.iter().map(|&v| v as f64 / 255.0).collect())
                }
            };
            planes.push((rows, cols, values));
        }
        if planes.is_empty() {
            break;
        }
        let (rows, cols) = (planes[0].0, planes[0].1);
        let this = (rows, cols, planes.len());
        if planes.iter().any(|p| (p.0, p.1) != (rows, cols)) || dims.is_some_and(|d| d != this) {
            return format_err(format!("shot {s} does not match the shape of the other shots"));
        }
        dims = Some(this);
        shots.push(planes);
    }
    let Some((rows, cols, planes)) = dims else {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "no files matching {}",
                plane_path(path, 0, 0, format.extension()).display()
            ),
        )));
    };
    let mut data = vec![0.0; shots.len() * rows * cols * planes];
    for (s, shot) in shots.iter().enumerate() {
        for (l, (_, _, values)) in shot.iter().enumerate() {
            for (p, &v) in values.iter().enumerate() {
                data[((s * rows * cols) + p) * planes + l] = v;
            }
        }
    }
    CodedApertureSet::from_vec((shots.len(), rows, cols, planes), data)
}

/// `APMS`, version, shots, per-shot length, then `f64` values.
pub fn encode_measurement_raw(g: &Measurement) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * g.as_slice().len());
    out.extend_from_slice(MEASUREMENT_MAGIC);
    put_u32(&mut out, RAW_VERSION as usize)?;
    put_u32(&mut out, g.shots)?;
    put_u32(&mut out, g.per_shot)?;
    put_f64s(&mut out, g.as_slice().iter().copied());
    Ok(out)
}

pub fn decode_measurement_raw(bytes: &[u8]) -> Result<Measurement> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MEASUREMENT_MAGIC {
        return format_err("bad measurement magic");
    }
    if r.u32()? != RAW_VERSION {
        return format_err("unsupported measurement version");
    }
    let (shots, per_shot) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f64s(shots * per_shot)?;
    r.finish()?;
    Measurement::new(data.into(), shots, per_shot)
}

/// One line per shot.
pub fn measurement_csv(g: &Measurement) -> String {
    csv_plane(g.as_slice(), g.per_shot.max(1))
}

pub fn parse_measurement_csv(text: &str) -> Result<Measurement> {
    let (shots, per_shot, values) = parse_csv_plane(text, Path::new("<measurement>"))?;
    Measurement::new(values.into(), shots, per_shot)
}

/// Scene files: RAW (`f64` LE, no header), CSV (comma-separated values on
/// any number of lines) or an 8-bit PGM scaled by 1/255.
pub fn load_scene(path: &Path) -> Result<Vec<f64>> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
    {
        Some(e) if e == "csv" => {
            let text = fs::read_to_string(path)?;
            text.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
                })
                .collect()
        }
        Some(e) if e == "pgm" => {
            let (_, _, px) = decode_pgm(&fs::read(path)?)?;
            Ok(px.iter().map(|&v| v as f64 / 255.0).collect())
        }
        _ => {
            let bytes = fs::read(path)?;
            if bytes.len() % 8 != 0 {
                return format_err(format!("{} is not a whole number of f64 values", path.display()));
            }
            let mut r = Reader::new(&bytes);
            r.f64s(bytes.len() / 8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ca(dims: (usize, usize, usize, usize), seed: u64) -> CodedApertureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        CodedApertureSet::from_vec(dims, (0..n).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn raw_round_trip_is_bitwise() {
        let ca = random_ca((3, 4, 5, 2), 1);
        let bytes = encode_ca_raw(&ca).unwrap();
        assert_eq!(bytes.len(), RAW_HEADER_LEN + 8 * 120);
        assert_eq!(decode_ca_raw(&bytes).unwrap(), ca);
    }

    #[test]
    fn raw_rejects_corruption() {
        let ca = random_ca((1, 2, 2, 1), 2);
        let mut bytes = encode_ca_raw(&ca).unwrap();
        bytes[0] = b'X';
        assert!(decode_ca_raw(&bytes).is_err());
        let mut bytes = encode_ca_raw(&ca).unwrap();
        bytes.pop();
        assert!(decode_ca_raw(&bytes).is_err());
        let mut bytes = encode_ca_raw(&ca).unwrap();
        bytes.push(0);
        assert!(decode_ca_raw(&bytes).is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ca = random_ca((2, 3, 4, 3), 3);
        let files = save_ca(&dir.path().join("ca"), &ca, CaFormat::Csv).unwrap();
        assert_eq!(files.len(), 6);
        assert_eq!(load_ca(&dir.path().join("ca"), CaFormat::Csv).unwrap(), ca);
    }

    #[test]
    fn pgm_of_binary_aperture_is_black_and_white() {
        let dir = tempfile::tempdir().unwrap();
        let ca = CodedApertureSet::from_vec((1, 2, 3, 1), vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let files = save_ca(&dir.path().join("ca"), &ca, CaFormat::Pgm).unwrap();
        let (rows, cols, px) = decode_pgm(&fs::read(&files[0]).unwrap()).unwrap();
        assert_eq!((rows, cols), (2, 3));
        assert!(px.iter().all(|&p| p == 0 || p == 255));
        assert_eq!(load_ca(&dir.path().join("ca"), CaFormat::Pgm).unwrap(), ca);
        assert_eq!(pgm_pixel(0.5), 128);
        assert_eq!(pgm_pixel(-2.0), 0);
    }

    #[test]
    fn measurement_round_trips() {
        let g = Measurement::new(vec![1.5, -2.25, 1e-300, 7.0].into(), 2, 2).unwrap();
        assert_eq!(decode_measurement_raw(&encode_measurement_raw(&g).unwrap()).unwrap(), g);
        assert_eq!(parse_measurement_csv(&measurement_csv(&g)).unwrap(), g);
    }
}
