//! Learner checkpoints.
//!
//! Container: `"ATCK" | version u32 | section count u32`, then per section
//! `name_len u16 | name | payload_len u64 | payload`, then a trailing u64
//! holding the first 8 bytes of SHA-256 over everything before it. The
//! checksum is verified before any section is parsed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::bank::AttributeBank;
use crate::encoders::{ClassId, EncoderSpec, TokenSequence};
use crate::autodiff::Tensor;
use crate::eval::AccuracyMatrix;
use crate::trainer::{LearnerState, Mode, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: EncoderSpec,
    pub state: LearnerState,
    /// Accuracy rows of the tasks completed so far.
    pub matrix: Option<AccuracyMatrix>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    encoder: EncoderSpec,
    mode: Mode,
    step_counter: u64,
    tasks_completed: usize,
    class_order: Vec<ClassId>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            DataError::MalformedCheckpoint(format!("{} section ends early", self.what))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        (0..n).map(|_| self.u64().map(f64::from_bits)).collect()
    }

    fn finish(&self) -> Result<(), DataError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(DataError::MalformedCheckpoint(format!("{} section has trailing bytes", self.what)))
        }
    }
}

fn bank_payload(bank: &AttributeBank) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [bank.n(), bank.m(), bank.d()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for k in bank.keys() {
        put_f64s(&mut out, k);
    }
    for i in 0..bank.n() {
        put_f64s(&mut out, bank.prompt(i));
    }
    out
}

fn parse_bank(bytes: &[u8]) -> Result<AttributeBank, DataError> {
    let mut r = Reader::new(bytes, "bank");
    let (n, m, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let keys = (0..n).map(|_| r.f64s(d)).collect::<Result<Vec<_>, _>>()?;
    let prompts = (0..n).map(|_| r.f64s(m * d)).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    AttributeBank::from_parts(m, keys, prompts)
        .map_err(|e| DataError::MalformedCheckpoint(e.to_string()))
}

fn tokens_payload(tokens: &BTreeMap<ClassId, TokenSequence>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for (c, seq) in tokens {
        out.extend_from_slice(&c.0.to_le_bytes());
        out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
        put_f64s(&mut out, seq.tensor().data());
    }
    out
}

fn parse_tokens(bytes: &[u8]) -> Result<BTreeMap<ClassId, TokenSequence>, DataError> {
    let mut r = Reader::new(bytes, "class_tokens");
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let c = ClassId(r.u32()?);
        let (len, d) = (r.u32()? as usize, r.u32()? as usize);
        let t = Tensor::matrix(len, d, r.f64s(len * d)?)
            .map_err(|e| DataError::MalformedCheckpoint(e.to_string()))?;
        out.insert(c, TokenSequence::from_tensor(t)?);
    }
    r.finish()?;
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        let st = &self.state;
        let meta = Meta {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            mode: st.mode,
            step_counter: st.step_counter,
            tasks_completed: st.tasks_completed,
            class_order: st.class_order.clone(),
        };
        let mut sections: Vec<(&str, Vec<u8>)> = vec![("meta", serde_json::to_vec(&meta)?)];
        if let Some(b) = &st.bank {
            sections.push(("bank", bank_payload(b)));
        }
        sections.push(("class_tokens", tokens_payload(&st.class_tokens)));
        if let Some(p) = &st.shared_prompt {
            let mut out = Vec::new();
            put_f64s(&mut out, p);
            sections.push(("shared_prompt", out));
        }
        if let Some(m) = &self.matrix {
            sections.push(("matrix", serde_json::to_vec(m)?));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, payload) in &sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 20 {
            return Err(DataError::Truncated {
                expected: 20,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = checksum(body);
        if stored != computed {
            return Err(DataError::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader::new(body, "header");
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DataError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()?;
        let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
        for _ in 0..count {
            let nl = r.u16()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| DataError::MalformedCheckpoint("section name is not UTF-8".into()))?;
            let pl = r.u64()? as usize;
            let payload = r.take(pl)?;
            if sections.insert(name.clone(), payload).is_some() {
                return Err(DataError::MalformedCheckpoint(format!("duplicate section {name}")));
            }
        }
        r.finish()?;
        let need = |name: &str| {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| DataError::MalformedCheckpoint(format!("missing section {name}")))
        };
        let meta: Meta = serde_json::from_slice(need("meta")?)?;
        let bank = sections.get("bank").map(|b| parse_bank(b)).transpose()?;
        let class_tokens = parse_tokens(need("class_tokens")?)?;
        let shared_prompt = sections
            .get("shared_prompt")
            .map(|b| {
                if b.len() % 8 != 0 {
                    return Err(DataError::MalformedCheckpoint("shared_prompt length".into()));
                }
                Reader::new(b, "shared_prompt").f64s(b.len() / 8)
            })
            .transpose()?;
        let matrix = sections
            .get("matrix")
            .map(|b| serde_json::from_slice(b))
            .transpose()?;
        if meta.class_order.len() != class_tokens.len()
            || meta.class_order.iter().any(|c| !class_tokens.contains_key(c))
        {
            return Err(DataError::MalformedCheckpoint(
                "class order and class tokens disagree".into(),
            ));
        }
        Ok(Self {
            config: meta.config,
            encoder: meta.encoder,
            state: LearnerState {
                mode: meta.mode,
                bank,
                shared_prompt,
                class_order: meta.class_order,
                class_tokens,
                step_counter: meta.step_counter,
                tasks_completed: meta.tasks_completed,
            },
            matrix,
        })
    }
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), DataError> {
    let bytes = ck.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ImageBackendSpec;

    fn sample(mode: Mode) -> Checkpoint {
        let config = TrainConfig {
            n: 3,
            m: 2,
            c: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut state = LearnerState::init(mode, &config, 4).unwrap();
        state.class_order = vec![ClassId(5), ClassId(2)];
        state.class_tokens.insert(ClassId(5), TokenSequence::single(vec![0.1, -0.2, 0.3, 1e-300]).unwrap());
        state
            .class_tokens
            .insert(ClassId(2), TokenSequence::new(&[vec![1.0; 4], vec![f64::MIN_POSITIVE; 4]]).unwrap());
        state.step_counter = 42;
        state.tasks_completed = 1;
        Checkpoint {
            config,
            encoder: EncoderSpec {
                seed: 9,
                dim: 4,
                max_len: 16,
                image: ImageBackendSpec::Linear { input_width: 6 },
            },
            state,
            matrix: Some(AccuracyMatrix::from_rows(vec!["a".into(), "b".into()], vec![vec![12.5]]).unwrap()),
        }
    }

    #[test]
    fn round_trip_all_modes() {
        for mode in Mode::ALL {
            let ck = sample(mode);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let bytes = sample(Mode::Attriclip).to_bytes().unwrap();
        for pos in [4, 13, bytes.len() / 2, bytes.len() - 9] {
            let mut b = bytes.clone();
            b[pos] ^= 0x01;
            assert!(matches!(
                Checkpoint::from_bytes(&b),
                Err(DataError::ChecksumMismatch { .. })
            ));
        }
    }

    #[test]
    fn wrong_version_detected_after_checksum() {
        let mut b = sample(Mode::ZeroShot).to_bytes().unwrap();
        b[4] = 9;
        let n = b.len();
        let sum = checksum(&b[..n - 8]);
        b[n - 8..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(DataError::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn atomic_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample(Mode::SharedPrompt);
        write_checkpoint(&ck, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ck);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
