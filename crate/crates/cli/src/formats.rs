//! On-disk formats: score tensors, label files, poisoning instances and
//! schema-versioned JSON artifacts. Byte layouts are in docs/formats.md.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RCPT";
pub const TENSOR_VERSION: u32 = 1;
const TENSOR_HEADER_LEN: usize = 20;

pub const TENSOR_CSV_HEADER: [&str; 4] = ["point_id", "class_id", "sample_id", "score"];
pub const LABELS_CSV_HEADER: [&str; 2] = ["point_id", "label"];
pub const FEATURE_INSTANCE_HEADER: [&str; 4] = ["point_id", "score", "lower", "upper"];

fn input(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {msg}", path.display()))
}

/// Smoothed-score samples indexed by `(point, class, sample)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub points: usize,
    pub classes: usize,
    pub samples: usize,
    pub data: Vec<f64>,
}

impl ScoreTensor {
    pub fn new(points: usize, classes: usize, samples: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != points * classes * samples {
            return Err(CliError::Input(format!(
                "tensor of shape {points}x{classes}x{samples} needs {} values, got {}",
                points * classes * samples,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CliError::Input(format!("score {v} is outside [0, 1]")));
        }
        if points > 0 && (classes == 0 || samples == 0) {
            return Err(CliError::Input("tensor has points but no classes or samples".into()));
        }
        Ok(Self { points, classes, samples, data })
    }

    pub fn samples_of(&self, point: usize, class: usize) -> &[f64] {
        let start = (point * self.classes + class) * self.samples;
        &self.data[start..start + self.samples]
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| input(path, e))?;
        if bytes.starts_with(TENSOR_MAGIC) {
            Self::from_binary(&bytes).map_err(|e| input(path, e))
        } else {
            Self::from_csv(&bytes[..]).map_err(|e| input(path, e))
        }
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < TENSOR_HEADER_LEN || &bytes[..4] != TENSOR_MAGIC {
            return Err(CliError::Input("truncated or missing tensor header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != TENSOR_VERSION {
            return Err(CliError::Input(format!("unsupported tensor version {version}")));
        }
        let (p, c, s) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let body = &bytes[TENSOR_HEADER_LEN..];
        let expected = p
            .checked_mul(c)
            .and_then(|v| v.checked_mul(s))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| CliError::Input("tensor dimensions overflow".into()))?;
        if body.len() != expected {
            return Err(CliError::Input(format!("tensor body has {} bytes, expected {expected}", body.len())));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(p, c, s, data)
    }

    /// Scores are narrowed to `f32`.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        for w in [TENSOR_VERSION, self.points as u32, self.classes as u32, self.samples as u32] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Rows may come in any order but must cover the full
    /// `points x classes x samples` grid exactly once.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        check_header(rdr.headers()?, &TENSOR_CSV_HEADER)?;
        let mut cells: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        let (mut p, mut c, mut s) = (0, 0, 0);
        for row in rdr.deserialize::<(usize, usize, usize, f64)>() {
            let (pi, ci, si, v) = row?;
            if cells.insert((pi, ci, si), v).is_some() {
                return Err(CliError::Input(format!("duplicate entry ({pi}, {ci}, {si})")));
            }
            p = p.max(pi + 1);
            c = c.max(ci + 1);
            s = s.max(si + 1);
        }
        if cells.len() != p * c * s {
            return Err(CliError::Input(format!(
                "tensor is not dense: {} entries for shape {p}x{c}x{s}",
                cells.len()
            )));
        }
        // BTreeMap iteration is already row-major.
        Self::new(p, c, s, cells.into_values().collect())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TENSOR_CSV_HEADER)?;
        for p in 0..self.points {
            for c in 0..self.classes {
                for (s, v) in self.samples_of(p, c).iter().enumerate() {
                    w.serialize((p, c, s, v))?;
                }
            }
        }
        w.into_inner().map_err(|e| CliError::Input(e.to_string()))
    }
}

fn check_header(found: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if found.len() < want.len() || found.iter().zip(want).any(|(a, b)| a != *b) {
        return Err(CliError::Input(format!("expected header {}, found {}", want.join(","), found.iter().collect::<Vec<_>>().join(","))));
    }
    Ok(())
}

/// Checks that ids are exactly `0..n` and returns values ordered by id.
fn dense_by_id<T>(rows: Vec<(usize, T)>, what: &str) -> Result<Vec<T>> {
    let n = rows.len();
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for (id, v) in rows {
        match slots.get_mut(id) {
            Some(slot @ None) => *slot = Some(v),
            Some(Some(_)) => return Err(CliError::Input(format!("{what}: duplicate point_id {id}"))),
            None => return Err(CliError::Input(format!("{what}: point_id {id} out of range 0..{n}"))),
        }
    }
    Ok(slots.into_iter().map(|v| v.expect("all ids present")).collect())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path).map_err(|e| input(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    check_header(rdr.headers()?, &LABELS_CSV_HEADER).map_err(|e| input(path, e))?;
    let rows = rdr
        .deserialize::<(usize, usize)>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| input(path, e))?;
    dense_by_id(rows, "labels").map_err(|e| input(path, e))
}

pub fn labels_csv(labels: &[usize]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LABELS_CSV_HEADER)?;
    for (i, l) in labels.iter().enumerate() {
        w.serialize((i, l))?;
    }
    w.into_inner().map_err(|e| CliError::Input(e.to_string()))
}

/// A calibration set to certify against poisoning.
#[derive(Debug, Clone, PartialEq)]
pub enum PoisonFile {
    /// Observed true-label scores with per-point attainable intervals.
    Feature { scores: Vec<f64>, lower: Vec<f64>, upper: Vec<f64> },
    /// Observed labels with the full class-score matrix.
    Label { labels: Vec<usize>, matrix: Vec<Vec<f64>> },
}

impl PoisonFile {
    /// The header decides the flavour: `point_id,score,lower,upper` or
    /// `point_id,label,<one column per class>`.
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| input(path, e))?;
        Self::from_csv(file).map_err(|e| input(path, e))
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().eq(FEATURE_INSTANCE_HEADER) {
            let rows = rdr
                .deserialize::<(usize, f64, f64, f64)>()
                .map(|r| r.map(|(i, s, l, u)| (i, (s, l, u))))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = dense_by_id(rows, "instance")?;
            let mut out = (Vec::new(), Vec::new(), Vec::new());
            for (s, l, u) in rows {
                out.0.push(s);
                out.1.push(l);
                out.2.push(u);
            }
            return Ok(PoisonFile::Feature { scores: out.0, lower: out.1, upper: out.2 });
        }
        if header.len() < 3 || &header[0] != "point_id" || &header[1] != "label" {
            return Err(CliError::Input(format!(
                "expected header point_id,score,lower,upper or point_id,label,<class scores>, found {}",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let classes = header.len() - 2;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != classes + 2 {
                return Err(CliError::Input(format!("row has {} fields, expected {}", rec.len(), classes + 2)));
            }
            let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| CliError::Input(format!("`{s}`: {e}")));
            let id = parse_usize(&rec[0])?;
            let label = parse_usize(&rec[1])?;
            let scores = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>().map_err(|e| CliError::Input(format!("`{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((id, (label, scores)));
        }
        let (labels, matrix) = dense_by_id(rows, "instance")?.into_iter().unzip();
        Ok(PoisonFile::Label { labels, matrix })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        match self {
            PoisonFile::Feature { scores, lower, upper } => {
                w.write_record(FEATURE_INSTANCE_HEADER)?;
                for i in 0..scores.len() {
                    w.serialize((i, scores[i], lower[i], upper[i]))?;
                }
            }
            PoisonFile::Label { labels, matrix } => {
                let classes = matrix.first().map_or(0, Vec::len);
                let mut header = vec!["point_id".to_string(), "label".to_string()];
                header.extend((0..classes).map(|c| format!("class_{c}")));
                w.write_record(&header)?;
                for (i, (l, row)) in labels.iter().zip(matrix).enumerate() {
                    let mut rec = vec![i.to_string(), l.to_string()];
                    rec.extend(row.iter().map(f64::to_string));
                    w.write_record(&rec)?;
                }
            }
        }
        w.into_inner().map_err(|e| CliError::Input(e.to_string()))
    }
}

/// JSON document tagged with a schema name and version.
#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    schema: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

pub trait Artifact: Serialize + DeserializeOwned {
    const SCHEMA: &'static str;
    const VERSION: u32;

    fn to_json(&self) -> Result<Vec<u8>> {
        let env = Envelope { schema: Self::SCHEMA.to_string(), version: Self::VERSION, body: self };
        let mut out = serde_json::to_vec_pretty(&env)?;
        out.push(b'\n');
        Ok(out)
    }

    fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes)?;
        let schema = value.get("schema").and_then(|v| v.as_str());
        if schema != Some(Self::SCHEMA) {
            return Err(CliError::Input(format!("expected schema `{}`, found {schema:?}", Self::SCHEMA)));
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(Self::VERSION as u64) {
            return Err(CliError::Input(format!(
                "unsupported {} version {version:?} (this build reads version {})",
                Self::SCHEMA,
                Self::VERSION
            )));
        }
        let env: Envelope<Self> = serde_json::from_value(value)?;
        Ok(env.body)
    }

    fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| input(path, e))?;
        Self::from_json(&bytes).map_err(|e| input(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor() -> ScoreTensor {
        let data = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).fract()).collect();
        ScoreTensor::new(2, 3, 4, data).unwrap()
    }

    #[test]
    fn csv_tensor_round_trips() {
        let t = tensor();
        let back = ScoreTensor::from_csv(&t.to_csv().unwrap()[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn binary_tensor_round_trips_at_f32() {
        let t = tensor();
        let once = ScoreTensor::from_binary(&t.to_binary()).unwrap();
        assert_eq!(once.to_binary(), t.to_binary());
        for (a, b) in once.data.iter().zip(&t.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn tensor_rejects_bad_input() {
        let mut bytes = tensor().to_binary();
        bytes[4] = 2;
        assert!(ScoreTensor::from_binary(&bytes).is_err());
        let short = tensor().to_binary();
        assert!(ScoreTensor::from_binary(&short[..short.len() - 1]).is_err());
        let sparse = "point_id,class_id,sample_id,score\n0,0,0,0.5\n1,1,0,0.5\n";
        assert!(ScoreTensor::from_csv(sparse.as_bytes()).is_err());
        let dup = "point_id,class_id,sample_id,score\n0,0,0,0.5\n0,0,0,0.5\n";
        assert!(ScoreTensor::from_csv(dup.as_bytes()).is_err());
        let range = "point_id,class_id,sample_id,score\n0,0,0,1.5\n";
        assert!(ScoreTensor::from_csv(range.as_bytes()).is_err());
        let header = "point,class,sample,score\n";
        assert!(ScoreTensor::from_csv(header.as_bytes()).is_err());
    }

    #[test]
    fn empty_csv_tensor_is_allowed() {
        let t = ScoreTensor::from_csv("point_id,class_id,sample_id,score\n".as_bytes()).unwrap();
        assert_eq!(t.points, 0);
    }

    #[test]
    fn poison_files_round_trip() {
        let f = PoisonFile::Feature { scores: vec![0.5, 0.25], lower: vec![0.125, 0.0], upper: vec![0.75, 1.0] };
        assert_eq!(PoisonFile::from_csv(&f.to_csv().unwrap()[..]).unwrap(), f);
        let l = PoisonFile::Label { labels: vec![1, 0], matrix: vec![vec![0.1, 0.9], vec![0.6, 0.4]] };
        assert_eq!(PoisonFile::from_csv(&l.to_csv().unwrap()[..]).unwrap(), l);
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Dummy {
        x: f64,
    }

    impl Artifact for Dummy {
        const SCHEMA: &'static str = "dummy";
        const VERSION: u32 = 3;
    }

    #[test]
    fn artifacts_check_schema_and_version() {
        let json = Dummy { x: 0.5 }.to_json().unwrap();
        assert_eq!(Dummy::from_json(&json).unwrap(), Dummy { x: 0.5 });
        let bumped = String::from_utf8(json).unwrap().replace("\"version\": 3", "\"version\": 4");
        assert!(Dummy::from_json(bumped.as_bytes()).unwrap_err().to_string().contains("version"));
        assert!(Dummy::from_json(br#"{"schema":"other","version":3,"x":0.5}"#).is_err());
    }
}
