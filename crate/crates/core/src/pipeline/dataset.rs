//! Samples and their on-disk layout.
//!
//! A dataset directory holds `index.txt` plus one `<name>.pgm` image and one
//! `<name>.lm` landmark file per sample. The index starts with
//! `samples=<n>` and lists `<name> face_size=<f> interocular=<f>` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::landmarks::LandmarkSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Ground truth `P*`.
    pub landmarks: LandmarkSet,
    pub face_size: f64,
    pub interocular: f64,
}

impl Sample {
    pub fn new(image: Image, landmarks: LandmarkSet, face_size: f64, interocular: f64) -> Result<Self> {
        if landmarks.iter().any(|p| !(p.x.abs() <= 1.0 && p.y.abs() <= 1.0)) {
            return Err(Error::LandmarkFile("landmark outside [-1,1]".into()));
        }
        if !(face_size > 0.0 && face_size.is_finite()) || !(interocular >= 0.0 && interocular.is_finite()) {
            return Err(Error::Config(format!(
                "invalid normalizers: face_size={face_size}, interocular={interocular}"
            )));
        }
        Ok(Self {
            image,
            landmarks,
            face_size,
            interocular,
        })
    }
}

/// `√(width · height)` of the landmarks' bounding box.
pub fn face_size(p: &LandmarkSet) -> f64 {
    let (x0, y0, x1, y1) = p.bounds();
    ((x1 - x0) * (y1 - y0)).sqrt()
}

const INDEX: &str = "index.txt";

fn sample_name(i: usize) -> String {
    format!("{i:05}")
}

pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = format!("samples={}\n", samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = sample_name(i);
        s.image.save(dir.join(format!("{name}.pgm")))?;
        s.landmarks.save(dir.join(format!("{name}.lm")))?;
        let _ = writeln!(index, "{name} face_size={} interocular={}", s.face_size, s.interocular);
    }
    let path = dir.join(INDEX);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |msg: String| Error::Config(format!("{}: {msg}", path.display()));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let count = lines
        .next()
        .and_then(|l| l.trim().strip_prefix("samples="))
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| bad("missing samples=<n> header".into()))?;
    let mut out = Vec::with_capacity(count);
    for line in lines {
        let mut it = line.split_whitespace();
        let name = it.next().ok_or_else(|| bad(format!("bad line {line:?}")))?;
        let (mut face, mut iod) = (None, None);
        for tok in it {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("bad field {tok:?}")))?;
            let v: f64 = v.parse().map_err(|_| bad(format!("bad number {tok:?}")))?;
            match k {
                "face_size" => face = Some(v),
                "interocular" => iod = Some(v),
                _ => return Err(bad(format!("unknown field {k:?}"))),
            }
        }
        let image = Image::load(dir.join(format!("{name}.pgm")))?;
        let landmarks = LandmarkSet::load(dir.join(format!("{name}.lm")))?;
        let face = face.ok_or_else(|| bad(format!("{name}: missing face_size")))?;
        let iod = iod.ok_or_else(|| bad(format!("{name}: missing interocular")))?;
        out.push(Sample::new(image, landmarks, face, iod)?);
    }
    if out.len() != count {
        return Err(bad(format!("header declares {count} samples, found {}", out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth_dataset;

    #[test]
    fn directory_round_trip() {
        let data = synth_dataset(3, 2, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.face_size, b.face_size);
            assert_eq!(a.interocular, b.interocular);
            for (p, q) in a.landmarks.iter().zip(b.landmarks.iter()) {
                assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            }
        }
        assert!(matches!(load_dataset(dir.path().join("missing")), Err(Error::NotFound(_))));
    }

    #[test]
    fn sample_validation() {
        let img = Image::filled(4, 4, 0.0).unwrap();
        let lm = LandmarkSet::from_xy(&[[0.0, 0.0]]);
        assert!(Sample::new(img.clone(), lm.clone(), 0.0, 1.0).is_err());
        assert!(Sample::new(img.clone(), lm, 1.0, -1.0).is_err());
        assert!(Sample::new(img, LandmarkSet::from_xy(&[[1.5, 0.0]]), 1.0, 1.0).is_err());
    }
}
