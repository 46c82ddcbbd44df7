//! Checkpoint files: a text header followed by a little-endian f32 payload.
//!
//! ```text
//! GEAN-CHECKPOINT 1
//! input_size 64
//! landmarks 21
//! tensor enc1.weight 8 3 3 3
//! ...
//! meta <key> <value>
//! payload <float count>
//! <raw bytes>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::network::{round_f32, DetectorConfig, ToyDetector};
use crate::error::{Error, Result};

const MAGIC: &str = "GEAN-CHECKPOINT";
const VERSION: u32 = 1;

/// Detector parameters plus free-form `key value` metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub detector: ToyDetector,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(detector: ToyDetector) -> Self {
        Self {
            detector,
            meta: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.detector.config();
        let mut head = format!("{MAGIC} {VERSION}\ninput_size {}\nlandmarks {}\n", cfg.input_size, cfg.landmarks);
        for (name, shape) in cfg.tensors() {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let _ = writeln!(head, "tensor {name} {}", dims.join(" "));
        }
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unencodable meta entry {k:?}")));
            }
            let _ = writeln!(head, "meta {k} {v}");
        }
        let params = self.detector.params();
        let _ = writeln!(head, "payload {}", params.len());
        let mut bytes = head.into_bytes();
        bytes.reserve(params.len() * 4);
        for &v in params {
            if round_f32(v) != v {
                return Err(Error::Checkpoint("parameter is not representable as f32".into()));
            }
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
        };

        let magic = next_line()?;
        let version = magic
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(format!("not a checkpoint (header {magic:?})")))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }

        let (mut input_size, mut landmarks) = (None, None);
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        let mut meta = Vec::new();
        let count = loop {
            let line = next_line()?;
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
            match key {
                "input_size" => input_size = Some(num(rest)?),
                "landmarks" => landmarks = Some(num(rest)?),
                "tensor" => {
                    let mut it = rest.split_whitespace();
                    let name = it.next().ok_or_else(|| bad(format!("bad tensor line {line:?}")))?;
                    let shape = it.map(num).collect::<Result<Vec<_>>>()?;
                    tensors.push((name.to_string(), shape));
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "payload" => break num(rest)?,
                _ => return Err(bad(format!("unexpected header line {line:?}"))),
            }
        };

        let input_size = input_size.ok_or_else(|| bad("missing input_size".into()))?;
        let landmarks = landmarks.ok_or_else(|| bad("missing landmarks".into()))?;
        let width = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, s)| s.first().copied())
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let config = DetectorConfig {
            input_size,
            landmarks,
            widths: [width("enc1.weight")?, width("enc2.weight")?],
        };
        let expected: Vec<(String, Vec<usize>)> =
            config.tensors().into_iter().map(|(n, s)| (n.to_string(), s)).collect();
        if tensors != expected {
            return Err(bad("tensor manifest does not match the detector layout".into()));
        }

        let payload = &bytes[pos..];
        if payload.len() != count * 4 {
            return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), count * 4)));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self {
            detector: ToyDetector::from_parts(config, params)?,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(ToyDetector::new(DetectorConfig::new(16, 4), 3).unwrap());
        c.set_meta("epoch_loss", "0.5,0.25");
        c.set_meta("variant", "GK");
        c
    }

    #[test]
    fn bit_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta("variant"), Some("GK"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::load(dir.path().join("nope")), Err(Error::NotFound(_))));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"P5\n").is_err());
        let text = String::from_utf8_lossy(&bytes[..40]).replace("CHECKPOINT 1", "CHECKPOINT 9");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[40..]);
        assert!(Checkpoint::from_bytes(&bumped).is_err());
        let mut c = sample();
        c.set_meta("bad key", "x");
        assert!(c.to_bytes().is_err());
    }
}
