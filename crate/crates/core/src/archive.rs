//! Versioned persistence for trained models and unit libraries.
//!
//! A model file is the line `UNITSEL-MODEL <version>` followed by one JSON
//! object. Every weight is written as the 16 hex digits of its `f64` bit
//! pattern, so loading reproduces the stored values bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{Provenance, UnitLibrary};
use crate::error::{Error, Result};
use crate::features::FeatureVocabulary;
use crate::lm::NoteVocabulary;
use crate::music::{Duration, Measure, Note, Unit};
use crate::nn::{Activation, Dense, Lstm};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &str = "UNITSEL-MODEL";
pub const LIBRARY_MAGIC: &str = "UNITSEL-LIBRARY";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Autoencoder,
    Dssm,
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Dssm => "dssm",
            ModelKind::Lstm => "lstm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut data = String::with_capacity(self.data.len() * 16);
        for v in &self.data {
            data.push_str(&format!("{:016x}", v.to_bits()));
        }
        WireTensor {
            name: self.name.clone(),
            rows: self.rows,
            cols: self.cols,
            data,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let w = WireTensor::deserialize(d)?;
        if w.data.len() % 16 != 0 || !w.data.is_ascii() {
            return Err(D::Error::custom(format!("tensor {}: malformed hex payload", w.name)));
        }
        let data = (0..w.data.len() / 16)
            .map(|k| u64::from_str_radix(&w.data[16 * k..16 * (k + 1)], 16).map(f64::from_bits))
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| D::Error::custom(format!("tensor {}: {e}", w.name)))?;
        Ok(Tensor {
            name: w.name,
            rows: w.rows,
            cols: w.cols,
            data,
        })
    }
}

impl Tensor {
    pub fn from_slice<T: Scalar>(name: impl Into<String>, rows: usize, cols: usize, data: &[T]) -> Self {
        Tensor {
            name: name.into(),
            rows,
            cols,
            data: data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::of(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSnapshot {
    Features(FeatureVocabulary),
    Notes(NoteVocabulary),
}

impl VocabSnapshot {
    pub fn hash(&self) -> String {
        match self {
            VocabSnapshot::Features(v) => v.hash(),
            VocabSnapshot::Notes(v) => v.hash(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u32,
    pub kind: ModelKind,
    pub scalar: String,
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    pub layer_dims: Vec<usize>,
    pub tensors: Vec<Tensor>,
    pub vocabulary: VocabSnapshot,
    pub vocab_hash: String,
}

impl ModelArchive {
    pub fn new<T: Scalar>(kind: ModelKind, layer_dims: Vec<usize>, vocabulary: VocabSnapshot) -> Self {
        let vocab_hash = vocabulary.hash();
        ModelArchive {
            format_version: FORMAT_VERSION,
            kind,
            scalar: T::NAME.to_string(),
            hyperparameters: BTreeMap::new(),
            layer_dims,
            tensors: Vec::new(),
            vocabulary,
            vocab_hash,
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.hyperparameters.insert(
            key.to_string(),
            serde_json::to_value(value).expect("hyperparameter serialization"),
        );
    }

    pub fn get<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .hyperparameters
            .get(key)
            .ok_or_else(|| Error::Parse(format!("archive lacks hyperparameter {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("hyperparameter {key}: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Parse(format!("archive lacks tensor {name:?}")))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.name().into(),
                found: self.kind.name().into(),
            });
        }
        Ok(())
    }

    pub fn push_dense<T: Scalar>(&mut self, prefix: &str, d: &Dense<T>) {
        self.tensors
            .push(Tensor::from_slice(format!("{prefix}.weights"), d.outputs, d.inputs, &d.weights));
        self.tensors
            .push(Tensor::from_slice(format!("{prefix}.bias"), d.outputs, 1, &d.bias));
        self.set(&format!("{prefix}.activation"), d.activation);
    }

    pub fn read_dense<T: Scalar>(&self, prefix: &str) -> Result<Dense<T>> {
        let w = self.tensor(&format!("{prefix}.weights"))?;
        let b = self.tensor(&format!("{prefix}.bias"))?;
        let act: Activation = self.get(&format!("{prefix}.activation"))?;
        Dense::from_parts(w.cols, w.rows, w.to_vec(), b.to_vec(), act)
    }

    pub fn push_lstm<T: Scalar>(&mut self, prefix: &str, l: &Lstm<T>) {
        let cols = l.inputs + l.hidden;
        self.tensors
            .push(Tensor::from_slice(format!("{prefix}.weights"), 4 * l.hidden, cols, &l.weights));
        self.tensors
            .push(Tensor::from_slice(format!("{prefix}.bias"), 4 * l.hidden, 1, &l.bias));
    }

    pub fn read_lstm<T: Scalar>(&self, prefix: &str) -> Result<Lstm<T>> {
        let w = self.tensor(&format!("{prefix}.weights"))?;
        let b = self.tensor(&format!("{prefix}.bias"))?;
        let hidden = w.rows / 4;
        if w.rows % 4 != 0 || w.cols < hidden {
            return Err(Error::Shape(format!("tensor {prefix}.weights has {}x{}", w.rows, w.cols)));
        }
        Lstm::from_parts(w.cols - hidden, hidden, w.to_vec(), b.to_vec())
    }

    /// Checks version, tensor sizes and the vocabulary hash.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        for t in &self.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Shape(format!(
                    "tensor {} declares {}x{} but holds {} values",
                    t.name,
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
        }
        let found = self.vocabulary.hash();
        if found != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MODEL_MAGIC} {}\n", self.format_version).into_bytes();
        out.extend(serde_json::to_vec(self).expect("archive serialization"));
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))?;
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        let version = parse_header(header, MODEL_MAGIC)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let a: ModelArchive = serde_json::from_str(body).map_err(|e| Error::Parse(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }
}

fn parse_header(line: &str, magic: &str) -> Result<u32> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::Parse(format!("missing {magic} header")));
    }
    parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("{magic} header lacks a version")))
}

pub fn save_model(a: &ModelArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, a.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelArchive::from_bytes(&bytes)
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    measures: Vec<Vec<Note>>,
    provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct WireLibrary {
    unit_length: usize,
    meter: Duration,
    units: Vec<WireEntry>,
}

pub fn library_to_bytes(lib: &UnitLibrary) -> Vec<u8> {
    let wire = WireLibrary {
        unit_length: lib.unit_length,
        meter: lib.meter,
        units: lib
            .iter()
            .map(|(u, p)| WireEntry {
                measures: u.measures.iter().map(|m| m.notes.clone()).collect(),
                provenance: p.clone(),
            })
            .collect(),
    };
    let mut out = format!("{LIBRARY_MAGIC} {FORMAT_VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&wire).expect("library serialization"));
    out.push(b'\n');
    out
}

pub fn library_from_bytes(bytes: &[u8]) -> Result<UnitLibrary> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))?;
    let (header, body) = text.split_once('\n').unwrap_or((text, ""));
    let version = parse_header(header, LIBRARY_MAGIC)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let w: WireLibrary = serde_json::from_str(body).map_err(|e| Error::Parse(e.to_string()))?;
    let mut lib = UnitLibrary::new(w.unit_length, w.meter);
    for e in w.units {
        if e.measures.len() != w.unit_length {
            return Err(Error::Parse(format!(
                "library unit has {} measures, expected {}",
                e.measures.len(),
                w.unit_length
            )));
        }
        let unit = Unit::new(e.measures.into_iter().map(|n| Measure::new(n, w.meter)).collect());
        for p in e.provenance {
            lib.insert(unit.clone(), p);
        }
    }
    if lib.is_empty() {
        return Err(Error::Parse("library holds no units".into()));
    }
    Ok(lib)
}

pub fn save_library(lib: &UnitLibrary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, library_to_bytes(lib)).map_err(|e| Error::io(path, e))
}

pub fn load_library(path: impl AsRef<Path>) -> Result<UnitLibrary> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    library_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::Pitch;

    fn tiny_archive() -> ModelArchive {
        let q = Duration::new(1, 4).unwrap();
        let u = Unit::new(vec![Measure::new(vec![Note::new(Pitch::midi(60), q); 4], Duration::WHOLE)]);
        let vocab = FeatureVocabulary::from_units([&u]).unwrap();
        let mut a = ModelArchive::new::<f64>(ModelKind::Dssm, vec![3, 2], VocabSnapshot::Features(vocab));
        a.tensors.push(Tensor::from_slice("w", 2, 3, &[0.1f64, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 1.0 / 3.0]));
        a.set("lr", 0.005);
        a
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let a = tiny_archive();
        let bytes = a.to_bytes();
        assert!(bytes.starts_with(b"UNITSEL-MODEL 1\n"));
        let b = ModelArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.tensors[0].data[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(b.to_bytes(), bytes);
    }

    #[test]
    fn version_mismatch() {
        let bytes = tiny_archive().to_bytes();
        let text = String::from_utf8(bytes).unwrap().replacen("UNITSEL-MODEL 1", "UNITSEL-MODEL 99", 1);
        assert!(matches!(
            ModelArchive::from_bytes(text.as_bytes()),
            Err(Error::Version { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_tensor_is_a_dimension_error() {
        let mut a = tiny_archive();
        a.tensors[0].data.pop();
        let err = ModelArchive::from_bytes(&a.to_bytes()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn tampered_vocabulary_detected() {
        let mut a = tiny_archive();
        a.vocab_hash = "00".into();
        assert!(matches!(
            ModelArchive::from_bytes(&a.to_bytes()),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn missing_magic() {
        assert!(matches!(ModelArchive::from_bytes(b"hello\n{}"), Err(Error::Parse(_))));
    }
}
