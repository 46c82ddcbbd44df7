//! Ordered landmark sets in the normalized frame and their text file format.
//!
//! File layout: a header line `L=<count> norm=[-1,1]` followed by one
//! `x y` line per landmark.

use std::fmt::Write as _;
use std::fs;
use std::ops::{Index, IndexMut};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::NormalizedPoint;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet(Vec<NormalizedPoint>);

impl LandmarkSet {
    pub fn new(points: Vec<NormalizedPoint>) -> Self {
        Self(points)
    }

    pub fn from_xy(coords: &[[f64; 2]]) -> Self {
        Self(coords.iter().map(|c| NormalizedPoint::new(c[0], c[1])).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[NormalizedPoint] {
        &self.0
    }

    pub fn points_mut(&mut self) -> &mut [NormalizedPoint] {
        &mut self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, NormalizedPoint> {
        self.0.iter()
    }

    pub fn to_xy(&self) -> Vec<[f64; 2]> {
        self.0.iter().map(|p| [p.x, p.y]).collect()
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self(flat.chunks_exact(2).map(|c| NormalizedPoint::new(c[0], c[1])).collect())
    }

    pub fn clamped(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|p| NormalizedPoint::new(p.x.clamp(-1.0, 1.0), p.y.clamp(-1.0, 1.0)))
                .collect(),
        )
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.0.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self(indices.iter().map(|&i| self.0[i]).collect())
    }

    pub fn ensure_same_len(&self, other: &LandmarkSet, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {} vs {} landmarks",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("L={} norm=[-1,1]\n", self.len());
        for p in &self.0 {
            let _ = writeln!(out, "{:.12} {:.12}", p.x, p.y);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::LandmarkFile("empty file".into()))?;
        let count = header
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix("L="))
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| Error::LandmarkFile(format!("bad header {header:?}")))?;
        let mut points = Vec::with_capacity(count);
        for line in lines {
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => {
                    points.push(NormalizedPoint::new(x, y))
                }
                _ => return Err(Error::LandmarkFile(format!("bad line {line:?}"))),
            }
        }
        if points.len() != count {
            return Err(Error::LandmarkFile(format!(
                "header declares {count} landmarks, found {}",
                points.len()
            )));
        }
        Ok(Self(points))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl Index<usize> for LandmarkSet {
    type Output = NormalizedPoint;
    fn index(&self, i: usize) -> &NormalizedPoint {
        &self.0[i]
    }
}

impl IndexMut<usize> for LandmarkSet {
    fn index_mut(&mut self, i: usize) -> &mut NormalizedPoint {
        &mut self.0[i]
    }
}

impl FromIterator<NormalizedPoint> for LandmarkSet {
    fn from_iter<I: IntoIterator<Item = NormalizedPoint>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a LandmarkSet {
    type Item = &'a NormalizedPoint;
    type IntoIter = std::slice::Iter<'a, NormalizedPoint>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_round_trip(coords in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 0..40)) {
            let set: LandmarkSet = coords.iter().map(|&(x, y)| NormalizedPoint::new(x, y)).collect();
            let back = LandmarkSet::parse(&set.to_text()).unwrap();
            prop_assert_eq!(back.len(), set.len());
            for (a, b) in set.iter().zip(back.iter()) {
                prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn header_format() {
        let set = LandmarkSet::from_xy(&[[0.5, -0.25]]);
        assert_eq!(set.to_text(), "L=1 norm=[-1,1]\n0.500000000000 -0.250000000000\n");
    }

    #[test]
    fn rejects_count_mismatch_and_garbage() {
        assert!(LandmarkSet::parse("L=2 norm=[-1,1]\n0 0\n").is_err());
        assert!(LandmarkSet::parse("L=1 norm=[-1,1]\n0 zero\n").is_err());
        assert!(LandmarkSet::parse("").is_err());
    }
}
