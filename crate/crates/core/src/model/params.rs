//! Flat parameter vectors with a named-block layout.

use super::ModelError;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// One named contiguous block of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// Ordered block descriptor; ranges are disjoint and cover the vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout(Vec<Block>);

impl Layout {
    pub fn new(blocks: &[(&str, usize)]) -> Self {
        let mut out = Vec::with_capacity(blocks.len());
        let mut cursor = 0;
        for &(name, len) in blocks {
            out.push(Block {
                name: name.to_string(),
                start: cursor,
                end: cursor + len,
            });
            cursor += len;
        }
        Layout(out)
    }

    pub fn len(&self) -> usize {
        self.0.last().map_or(0, |b| b.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> &[Block] {
        &self.0
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>, ModelError> {
        self.0
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.start..b.end)
            .ok_or_else(|| ModelError::UnknownBlock(name.to_string()))
    }
}

/// Flat numeric parameter vector; the unit exchanged between clients and
/// server. All arithmetic checks that both operands share a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != layout.len() {
            return Err(ModelError::LayoutMismatch);
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, name: &str) -> Result<&[f64], ModelError> {
        Ok(&self.values[self.layout.range(name)?])
    }

    pub fn set_block(&mut self, name: &str, values: &[f64]) -> Result<(), ModelError> {
        let range = self.layout.range(name)?;
        if range.len() != values.len() {
            return Err(ModelError::LayoutMismatch);
        }
        self.values[range].copy_from_slice(values);
        Ok(())
    }

    fn check_same_layout(&self, other: &ParamVector) -> Result<(), ModelError> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(ModelError::LayoutMismatch)
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<(), ModelError> {
        self.check_same_layout(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, ModelError> {
        self.check_same_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(ParamVector {
            layout: self.layout.clone(),
            values,
        })
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> Result<f64, ModelError> {
        self.check_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn digest(&self) -> String {
        let mut h = crate::util::Fnv1a::new();
        for &v in &self.values {
            h.update_f64(v);
        }
        h.finish_hex()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        Layout::new(&[("featurizer.weight", 4), ("classifier.weight", 2)])
    }

    #[test]
    fn block_extraction_then_reassembly_is_identity() {
        let mut p = ParamVector::from_values(layout(), (1..=6).map(f64::from).collect()).unwrap();
        let feat = p.block("featurizer.weight").unwrap().to_vec();
        let clf = p.block("classifier.weight").unwrap().to_vec();
        p.set_block("featurizer.weight", &feat).unwrap();
        p.set_block("classifier.weight", &clf).unwrap();
        assert_eq!(p.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn unknown_block_is_an_error() {
        let p = ParamVector::zeros(layout());
        assert!(matches!(
            p.block("missing"),
            Err(ModelError::UnknownBlock(_))
        ));
    }

    #[test]
    fn arithmetic_requires_same_layout() {
        let a = ParamVector::zeros(layout());
        let b = ParamVector::zeros(Layout::new(&[("classifier.weight", 6)]));
        assert!(a.sub(&b).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let p = ParamVector::from_values(layout(), vec![0.5; 6]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: ParamVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
