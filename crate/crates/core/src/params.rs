//! Flat parameter storage with a named segment layout.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    /// Matrix view used when the segment enters a graph: `[r, c]` stays,
    /// `[n]` becomes a row vector, `[]` a 1×1.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let total: usize = layout.iter().map(Segment::size).sum();
        if total != values.len() {
            return Err(Error::Shape(format!(
                "layout covers {total} values but {} were given",
                values.len()
            )));
        }
        for (i, s) in layout.iter().enumerate() {
            if layout[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate segment name {}", s.name)));
            }
        }
        Ok(ParamVector { values, layout })
    }

    /// Append a segment. Panics on a duplicate name or wrong value count,
    /// both of which are programming errors in model construction.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        let seg = Segment {
            name: name.into(),
            shape,
        };
        assert_eq!(seg.size(), values.len(), "segment {} size", seg.name);
        assert!(
            self.index_of(&seg.name).is_none(),
            "duplicate segment {}",
            seg.name
        );
        self.values.extend_from_slice(values);
        self.layout.push(seg);
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

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|s| s.name == name)
    }

    fn offset(&self, index: usize) -> usize {
        self.layout[..index].iter().map(Segment::size).sum()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let i = self.index_of(name)?;
        let o = self.offset(i);
        Some(&self.values[o..o + self.layout[i].size()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.index_of(name)?;
        let o = self.offset(i);
        let n = self.layout[i].size();
        Some(&mut self.values[o..o + n])
    }

    /// A zero vector with the same layout.
    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: alloc::vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Register every segment as a graph leaf, in layout order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layout.len());
        let mut o = 0;
        for s in &self.layout {
            let (r, c) = s.matrix_shape();
            let n = s.size();
            out.push(g.leaf(Tensor::from_vec(r, c, self.values[o..o + n].to_vec())));
            o += n;
        }
        out
    }

    /// Reassemble per-segment gradient tensors into this layout.
    pub fn with_values_from(&self, parts: &[Tensor]) -> Result<Self> {
        if parts.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "{} gradient parts for {} segments",
                parts.len(),
                self.layout.len()
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for (p, s) in parts.iter().zip(&self.layout) {
            if p.len() != s.size() {
                return Err(Error::Shape(format!(
                    "gradient for {} has wrong size",
                    s.name
                )));
            }
            values.extend_from_slice(p.data());
        }
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn layout_validation() {
        let seg = |n: &str, s: Vec<usize>| Segment {
            name: n.into(),
            shape: s,
        };
        assert!(ParamVector::from_parts(vec![0.0; 6], vec![seg("a", vec![2, 3])]).is_ok());
        assert!(ParamVector::from_parts(vec![0.0; 5], vec![seg("a", vec![2, 3])]).is_err());
        let dup = vec![seg("a", vec![1]), seg("a", vec![1])];
        assert!(ParamVector::from_parts(vec![0.0; 2], dup).is_err());
    }

    #[test]
    fn segments_and_leaves() {
        let mut p = ParamVector::new();
        p.push("w", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        p.push("b", vec![2], &[5.0, 6.0]);
        assert_eq!(p.segment("b").unwrap(), &[5.0, 6.0]);
        let mut g = Graph::new();
        let vars = p.leaves(&mut g);
        assert_eq!(g.shape(vars[0]), (2, 2));
        assert_eq!(g.shape(vars[1]), (1, 2));
        let parts: Vec<Tensor> = vars.iter().map(|&v| g.value(v).clone()).collect();
        assert_eq!(p.with_values_from(&parts).unwrap(), p);
    }
}
