//! Binary checkpoint format.
//!
//! ```text
//! "HNRT"                      magic
//! u32 version = 1
//! u32 metadata length, UTF-8 `key = value` lines (sorted by key)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, u64 extents[rank], u64 byte offset
//! u64 data length, raw little-endian values (f32 or f64, per the `dtype` key)
//! ```
//!
//! All integers are little-endian. Offsets are relative to the start of the
//! data block and must tile it exactly.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::optim::AdamState;
use crate::nn::{ModelConfig, ScoreScale};
use crate::student::{SoftCopyConfig, Student};
use crate::teacher::Teacher;
use crate::tensor::{NdArray, ParamStore};

pub const MAGIC: &[u8; 4] = b"HNRT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor table does not tile the data block")]
    Layout,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub soft_copy: Option<SoftCopyConfig>,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Every random stream is derived from this seed and the step counter.
    pub seed: u64,
    pub vocab: Vec<String>,
    /// Length bias `C` measured on the training corpus, when known.
    pub length_bias: Option<i64>,
    pub dtype: DType,
}

impl Checkpoint {
    pub fn from_teacher(t: &Teacher, vocab: &[String]) -> Self {
        Self {
            kind: ModelKind::Teacher,
            model: t.config().clone(),
            soft_copy: None,
            params: t.params().clone(),
            optimizer: None,
            step: 0,
            seed: 0,
            vocab: vocab.to_vec(),
            length_bias: None,
            dtype: DType::F64,
        }
    }

    pub fn from_student(s: &Student, vocab: &[String]) -> Self {
        Self {
            kind: ModelKind::Student,
            soft_copy: Some(s.soft_copy()),
            ..Self::from_teacher_like(s.config(), s.params(), vocab)
        }
    }

    fn from_teacher_like(model: &ModelConfig, params: &ParamStore, vocab: &[String]) -> Self {
        Self {
            kind: ModelKind::Teacher,
            model: model.clone(),
            soft_copy: None,
            params: params.clone(),
            optimizer: None,
            step: 0,
            seed: 0,
            vocab: vocab.to_vec(),
            length_bias: None,
            dtype: DType::F64,
        }
    }

    pub fn teacher(&self) -> Result<Teacher, crate::Error> {
        if self.kind != ModelKind::Teacher {
            return Err(crate::Error::config("checkpoint holds a student, not a teacher"));
        }
        let mut t = Teacher::new(self.model.clone(), 0)?;
        copy_params(t.params_mut(), &self.params)?;
        Ok(t)
    }

    pub fn student(&self) -> Result<Student, crate::Error> {
        if self.kind != ModelKind::Student {
            return Err(crate::Error::config("checkpoint holds a teacher, not a student"));
        }
        let mut s = Student::new(self.model.clone(), self.soft_copy.unwrap_or_default(), 0)?;
        copy_params(s.params_mut(), &self.params)?;
        Ok(s)
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let mut md = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            md.insert(k.to_owned(), v);
        };
        put("kind", self.kind.as_str().into());
        put("dtype", if self.dtype == DType::F32 { "f32" } else { "f64" }.into());
        put("enc_layers", m.enc_layers.to_string());
        put("dec_layers", m.dec_layers.to_string());
        put("heads", m.heads.to_string());
        put("d_model", m.d_model.to_string());
        put("d_k", m.d_k.to_string());
        put("d_v", m.d_v.to_string());
        put("d_ff", m.d_ff.to_string());
        put("src_vocab", m.src_vocab.to_string());
        put("tgt_vocab", m.tgt_vocab.to_string());
        put("max_len", m.max_len.to_string());
        put(
            "score_scale",
            match m.score_scale {
                ScoreScale::PerHead => "per-head",
                ScoreScale::ModelWidth => "model-width",
            }
            .into(),
        );
        if let Some(sc) = self.soft_copy {
            put("tau", format!("{:?}", sc.tau));
        }
        put("step", self.step.to_string());
        put("rng_seed", self.seed.to_string());
        put("rng_stream", "chacha8".into());
        if let Some(c) = self.length_bias {
            put("length_bias", c.to_string());
        }
        if let Some(opt) = &self.optimizer {
            put("adam_step", opt.step.to_string());
        }
        put("vocab", self.vocab.join(" "));
        md
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let metadata: String = self
            .metadata()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let mut tensors: Vec<(String, &NdArray)> = self
            .params
            .iter()
            .map(|(n, v)| (format!("param/{n}"), v))
            .collect();
        if let Some(opt) = &self.optimizer {
            for ((name, _), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                tensors.push((format!("adam.m/{name}"), m));
                tensors.push((format!("adam.v/{name}"), v));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(metadata.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let width = self.dtype.width();
        let mut offset = 0u64;
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.len() * width) as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &tensors {
            for &v in t.data() {
                match self.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let md_len = r.u32("metadata length")? as usize;
        let md_text = std::str::from_utf8(r.take(md_len, "metadata")?)
            .map_err(|_| CheckpointError::Metadata("not UTF-8".into()))?;
        let md = parse_metadata(md_text)?;
        let count = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| CheckpointError::Metadata("tensor name not UTF-8".into()))?
                .to_owned();
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("tensor extent").map(|e| e as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64("tensor offset")? as usize;
            table.push((name, shape, offset));
        }
        let data_len = r.u64("data length")? as usize;
        let data = r.take(data_len, "tensor data")?;
        let dtype = match md.get("dtype").map(String::as_str) {
            Some("f32") => DType::F32,
            Some("f64") | None => DType::F64,
            Some(other) => return Err(CheckpointError::Metadata(format!("unknown dtype {other}"))),
        };
        let width = dtype.width();
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0;
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            if offset != expected_offset || offset + n * width > data.len() {
                return Err(CheckpointError::Layout);
            }
            let raw = &data[offset..offset + n * width];
            let values = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let array = NdArray::new(shape.clone(), values).map_err(|_| CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: shape,
            })?;
            tensors.insert(name, array);
            expected_offset = offset + n * width;
        }
        if expected_offset != data.len() {
            return Err(CheckpointError::Layout);
        }
        Self::assemble(&md, tensors, dtype)
    }

    fn assemble(md: &BTreeMap<String, String>, mut tensors: BTreeMap<String, NdArray>, dtype: DType) -> Result<Self, CheckpointError> {
        let get = |k: &str| md.get(k).ok_or_else(|| CheckpointError::Metadata(format!("missing key {k}")));
        let num = |k: &str| -> Result<usize, CheckpointError> {
            get(k)?
                .parse()
                .map_err(|_| CheckpointError::Metadata(format!("{k} is not an integer")))
        };
        let kind = match get("kind")?.as_str() {
            "teacher" => ModelKind::Teacher,
            "student" => ModelKind::Student,
            other => return Err(CheckpointError::Metadata(format!("unknown kind {other}"))),
        };
        let model = ModelConfig {
            enc_layers: num("enc_layers")?,
            dec_layers: num("dec_layers")?,
            heads: num("heads")?,
            d_model: num("d_model")?,
            d_k: num("d_k")?,
            d_v: num("d_v")?,
            d_ff: num("d_ff")?,
            src_vocab: num("src_vocab")?,
            tgt_vocab: num("tgt_vocab")?,
            max_len: num("max_len")?,
            score_scale: match get("score_scale")?.as_str() {
                "per-head" => ScoreScale::PerHead,
                "model-width" => ScoreScale::ModelWidth,
                other => return Err(CheckpointError::Metadata(format!("unknown score_scale {other}"))),
            },
        };
        let soft_copy = match md.get("tau") {
            Some(t) => Some(SoftCopyConfig {
                tau: t.parse().map_err(|_| CheckpointError::Metadata("tau is not a number".into()))?,
            }),
            None => None,
        };
        // Build the reference layout to validate names and shapes.
        let reference = match kind {
            ModelKind::Teacher => Teacher::new(model.clone(), 0).map(|t| t.params().clone()),
            ModelKind::Student => Student::new(model.clone(), soft_copy.unwrap_or_default(), 0).map(|s| s.params().clone()),
        }
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut params = reference.clone();
        for id in reference.ids() {
            let name = format!("param/{}", reference.name(id));
            let t = tensors.remove(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if t.shape() != reference.get(id).shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: reference.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *params.get_mut(id) = t;
        }
        let optimizer = match md.get("adam_step") {
            Some(s) => {
                let step = s
                    .parse()
                    .map_err(|_| CheckpointError::Metadata("adam_step is not an integer".into()))?;
                let mut m = Vec::new();
                let mut v = Vec::new();
                for id in reference.ids() {
                    let name = reference.name(id);
                    for (prefix, dst) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                        let key = format!("{prefix}/{name}");
                        let t = tensors.remove(&key).ok_or(CheckpointError::MissingTensor(key.clone()))?;
                        if t.shape() != reference.get(id).shape() {
                            return Err(CheckpointError::ShapeMismatch {
                                name: key,
                                expected: reference.get(id).shape().to_vec(),
                                found: t.shape().to_vec(),
                            });
                        }
                        dst.push(t);
                    }
                }
                Some(AdamState { m, v, step })
            }
            None => None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(CheckpointError::Metadata(format!("unexpected tensor {extra}")));
        }
        let vocab = md
            .get("vocab")
            .map(|v| v.split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect())
            .unwrap_or_default();
        let length_bias = match md.get("length_bias") {
            Some(c) => Some(
                c.parse()
                    .map_err(|_| CheckpointError::Metadata("length_bias is not an integer".into()))?,
            ),
            None => None,
        };
        Ok(Self {
            kind,
            model,
            soft_copy,
            params,
            optimizer,
            step: num("step")? as u64,
            seed: get("rng_seed")?
                .parse()
                .map_err(|_| CheckpointError::Metadata("rng_seed is not an integer".into()))?,
            vocab,
            length_bias,
            dtype,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), crate::Error> {
        crate::data::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn copy_params(dst: &mut ParamStore, src: &ParamStore) -> Result<(), crate::Error> {
    dst.load_from(src)?;
    Ok(())
}

fn parse_metadata(text: &str) -> Result<BTreeMap<String, String>, CheckpointError> {
    let mut md = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once(" = ")
            .or_else(|| line.strip_suffix(" =").map(|k| (k, "")))
            .ok_or_else(|| CheckpointError::Metadata(format!("malformed line {line:?}")))?;
        md.insert(k.to_owned(), v.to_owned());
    }
    Ok(md)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_teacher() -> Teacher {
        Teacher::new(ModelConfig::new(1, 1, 2, 8, 16, 10, 10, 12), 5).unwrap()
    }

    #[test]
    fn round_trip_preserves_forward_bits() {
        let t = small_teacher();
        let ck = Checkpoint::from_teacher(&t, &["<pad>".into(), "a".into()]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let t2 = back.teacher().unwrap();
        assert_eq!(
            t.forced_decode(&[4, 5, 6], &[7, 8]).unwrap(),
            t2.forced_decode(&[4, 5, 6], &[7, 8]).unwrap()
        );
    }

    #[test]
    fn header_corruption_and_truncation_are_distinct_errors() {
        let bytes = Checkpoint::from_teacher(&small_teacher(), &[]).to_bytes();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn shape_table_is_validated_against_config() {
        let mut ck = Checkpoint::from_teacher(&small_teacher(), &[]);
        let id = ck.params.find("out.b").unwrap();
        *ck.params.get_mut(id) = NdArray::zeros(&[3]);
        assert!(matches!(
            Checkpoint::from_bytes(&ck.to_bytes()),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn f32_payload_is_half_the_size() {
        let mut ck = Checkpoint::from_teacher(&small_teacher(), &[]);
        let wide = ck.to_bytes().len();
        ck.dtype = DType::F32;
        let narrow = ck.to_bytes();
        assert!(narrow.len() < wide);
        let back = Checkpoint::from_bytes(&narrow).unwrap();
        assert_eq!(back.dtype, DType::F32);
        let id = back.params.find("out.w").unwrap();
        let orig = ck.params.get(id).data()[0];
        assert_eq!(back.params.get(id).data()[0], f64::from(orig as f32));
    }
}
