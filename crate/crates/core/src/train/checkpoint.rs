//! Checkpoint files: a magic line, the byte length of a JSON header on its
//! own line, the header, then every tensor as little-endian f64 in header
//! order (parameters first, then optimizer moments if present).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, Param, ParamStore};
use crate::tensor::{Rng, Tensor};
use crate::train::optim::AdamState;

pub const MAGIC: &str = "LIONCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub trainable: bool,
}

/// Where an interrupted stage stands, so it can be resumed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeInfo {
    pub stage: String,
    pub next_step: usize,
    pub adam_t: u64,
    /// Parameters with optimizer moments, in payload order.
    pub moments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    pub rng_state: u64,
    pub provenance: Vec<String>,
    /// Free-form description of the model that owns these tensors.
    #[serde(default)]
    pub model: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<ResumeInfo>,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        let params: usize = self
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let moments: usize = self.resume.as_ref().map_or(0, |r| {
            r.moments
                .iter()
                .filter_map(|n| self.tensors.iter().find(|t| &t.name == n))
                .map(|t| 2 * t.shape.iter().product::<usize>())
                .sum()
        });
        8 * (params + moments)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub rng: Rng,
    pub model: serde_json::Value,
    /// Optimizer state and position of an unfinished stage.
    pub resume: Option<(ResumeInfo, AdamState)>,
}

fn push_f64s(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors: Vec<TensorEntry> = ck
        .params
        .iter()
        .map(|(n, p)| TensorEntry {
            name: n.to_string(),
            shape: p.tensor.shape().to_vec(),
            group: p.group,
            trainable: p.trainable,
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        tensors,
        rng_state: ck.rng.state(),
        provenance: ck.params.provenance.clone(),
        model: ck.model.clone(),
        resume: ck.resume.as_ref().map(|(r, _)| r.clone()),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let mut buf = format!("{MAGIC}\n{}\n{json}", json.len()).into_bytes();
    buf.reserve(header.payload_len());
    for (_, p) in ck.params.iter() {
        push_f64s(&mut buf, &p.tensor);
    }
    if let Some((r, st)) = &ck.resume {
        for n in &r.moments {
            let m =
                st.m.get(n)
                    .ok_or_else(|| Error::contract(format!("no first moment for {n}")))?;
            push_f64s(&mut buf, m);
        }
        for n in &r.moments {
            let v =
                st.v.get(n)
                    .ok_or_else(|| Error::contract(format!("no second moment for {n}")))?;
            push_f64s(&mut buf, v);
        }
    }
    Ok(buf)
}

fn take_line<'a>(bytes: &'a [u8], what: &str) -> Result<(&'a str, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptHeader(format!("missing {what} line")))?;
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::CorruptHeader(format!("{what} is not UTF-8")))?;
    Ok((line, &bytes[nl + 1..]))
}

/// Parses and validates just the header.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let (magic, rest) = take_line(bytes, "magic")?;
    if magic != MAGIC {
        return Err(Error::CorruptHeader(format!("bad magic {magic:?}")));
    }
    let (len, rest) = take_line(rest, "header length")?;
    let len: usize = len
        .trim()
        .parse()
        .map_err(|_| Error::CorruptHeader(format!("bad header length {len:?}")))?;
    if rest.len() < len {
        return Err(Error::CorruptHeader(format!(
            "header claims {len} bytes, only {} present",
            rest.len()
        )));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptHeader("missing version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    Ok((header, &rest[len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_header(bytes)?;
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after the payload",
            payload.len() - expected
        )));
    }
    let mut off = 0;
    let mut read = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = payload[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off += 8 * n;
        Tensor::new(shape, data).map_err(|e| Error::CorruptHeader(e.to_string()))
    };
    let mut params = ParamStore::new();
    let mut shapes = BTreeMap::new();
    for t in &header.tensors {
        let tensor = read(&t.shape)?;
        if params.contains(&t.name) {
            return Err(Error::CorruptHeader(format!(
                "tensor {} listed twice",
                t.name
            )));
        }
        params.insert_param(
            t.name.clone(),
            Param {
                tensor,
                trainable: t.trainable,
                group: t.group,
            },
        );
        shapes.insert(t.name.clone(), t.shape.clone());
    }
    params.provenance = header.provenance.clone();
    let resume = match &header.resume {
        None => None,
        Some(r) => {
            let mut st = AdamState {
                t: r.adam_t,
                ..AdamState::default()
            };
            for which in 0..2 {
                for n in &r.moments {
                    let shape = shapes.get(n).ok_or_else(|| {
                        Error::CorruptHeader(format!("moments for unknown tensor {n}"))
                    })?;
                    let t = read(shape)?;
                    if which == 0 {
                        st.m.insert(n.clone(), t);
                    } else {
                        st.v.insert(n.clone(), t);
                    }
                }
            }
            Some((r.clone(), st))
        }
    };
    Ok(Checkpoint {
        params,
        rng: Rng::from_state(header.rng_state),
        model: header.model,
        resume,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(3);
        s.randn("a.w", &[2, 3], 1.0, Group::Bridge, &mut rng)
            .unwrap();
        s.randn("b", &[4], 1.0, Group::Gates, &mut rng).unwrap();
        s.set_trainable_groups(&[Group::Gates].into_iter().collect());
        s.provenance = vec!["s1".into()];
        Checkpoint {
            params: s,
            rng,
            model: serde_json::json!({"d_model": 4}),
            resume: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = to_bytes(&ck).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params.content_hash(), ck.params.content_hash());
        assert_eq!(back.rng.state(), ck.rng.state());
        assert_eq!(back.params.provenance, ck.params.provenance);
        assert!(back.params.param("b").unwrap().trainable);
        assert!(!back.params.param("a.w").unwrap().trainable);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn resume_state_round_trips() {
        let mut ck = sample();
        let mut st = AdamState {
            t: 5,
            ..AdamState::default()
        };
        st.m.insert(
            "b".into(),
            Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        st.v.insert(
            "b".into(),
            Tensor::from_vec(vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
        );
        let info = ResumeInfo {
            stage: "s1".into(),
            next_step: 3,
            adam_t: 5,
            moments: vec!["b".into()],
        };
        ck.resume = Some((info.clone(), st.clone()));
        let back = from_bytes(&to_bytes(&ck).unwrap()).unwrap();
        assert_eq!(back.resume, Some((info, st)));
    }

    #[test]
    fn distinct_errors() {
        let bytes = to_bytes(&sample()).unwrap();
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedPayload { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::CorruptHeader(_))));
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let json_start = text.find('{').unwrap();
        let mut garbled = bytes.clone();
        garbled[json_start + 1] = b'#';
        assert!(matches!(from_bytes(&garbled), Err(Error::CorruptHeader(_))));
        let v2 = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            from_bytes(v2.as_bytes()),
            Err(Error::VersionMismatch {
                expected: 1,
                found: 2
            })
        ));
    }
}
