//! Ordered, flattenable parameter storage.
//!
//! A `ParameterSet` is the full trainable state of a model as an ordered
//! list of named tensors. Flattening to one f32 vector (and restoring from
//! it) is the bridge to aggregation, checkpoints, and the wire.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Position of one named tensor inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The ordered manifest of all entries; offsets are contiguous.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    /// 64-bit digest used to detect layout disagreement between peers.
    pub fn hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update((e.name.len() as u64).to_le_bytes());
            hasher.update(e.name.as_bytes());
            hasher.update((e.shape.len() as u64).to_le_bytes());
            for &d in &e.shape {
                hasher.update((d as u64).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Gradients with the same layout as the `ParameterSet` they differentiate.
pub type GradientSet = ParameterSet;

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    /// Append an entry; order of pushes defines the layout.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn layout(&self) -> Layout {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in self.iter() {
            entries.push(LayoutEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        Layout { entries }
    }

    /// Structural equality of names and shapes (values ignored).
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// All entries concatenated in layout order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of `flatten` for a known layout; bit-exact round trip.
    pub fn restore(layout: &Layout, flat: &[f32]) -> Result<ParameterSet> {
        if flat.len() != layout.total_len() {
            return Err(Error::Codec(format!(
                "flat vector has {} elements, layout expects {}",
                flat.len(),
                layout.total_len()
            )));
        }
        let mut set = ParameterSet::new();
        for e in &layout.entries {
            let data = flat[e.offset..e.offset + e.len()].to_vec();
            set.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(set)
    }

    /// Overwrite values in place from a flat vector with matching layout.
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::Codec(format!(
                "flat vector has {} elements, parameter set expects {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// theta <- theta - lr * g for every entry. Layouts must match.
pub fn sgd_step(params: &mut ParameterSet, grads: &GradientSet, lr: f32) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(Error::Codec(
            "gradient layout does not match parameter layout".into(),
        ));
    }
    for i in 0..params.len() {
        let g = grads.tensor(i).data().to_vec();
        let t = params.tensor_mut(i).data_mut();
        for (p, gv) in t.iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

// File form: layout manifest (entry count, then per entry name length +
// UTF-8 name + rank + dims), followed by the little-endian f32 array.
// Integer fields: entry count u32, name length u16, rank u8, dims u32.

pub fn write_param_file(w: &mut impl Write, params: &ParameterSet) -> Result<()> {
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Codec(format!("entry name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let rank = t.shape().len();
        if rank > u8::MAX as usize {
            return Err(Error::Codec("tensor rank exceeds u8".into()));
        }
        w.write_all(&[rank as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for (_, t) in params.iter() {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_param_file(r: &mut impl Read) -> Result<ParameterSet> {
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut names = Vec::with_capacity(count);
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Codec("entry name is not UTF-8".into()))?;
        let mut rank_b = [0u8; 1];
        r.read_exact(&mut rank_b)?;
        let mut shape = Vec::with_capacity(rank_b[0] as usize);
        for _ in 0..rank_b[0] {
            r.read_exact(&mut u32b)?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        names.push(name);
        shapes.push(shape);
    }
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut raw = vec![0u8; total * 4];
    r.read_exact(&mut raw).map_err(|e| {
        Error::Codec(format!(
            "parameter data truncated: expected {} bytes ({e})",
            total * 4
        ))
    })?;
    let mut flat = Vec::with_capacity(total);
    for chunk in raw.chunks_exact(4) {
        flat.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let mut set = ParameterSet::new();
    let mut offset = 0;
    for (name, shape) in names.into_iter().zip(shapes) {
        let n: usize = shape.iter().product();
        set.push(name, Tensor::new(shape, flat[offset..offset + n].to_vec())?);
        offset += n;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push(
            "a.weight",
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.125]).unwrap(),
        );
        p.push("a.bias", Tensor::from_vec(vec![0.5, -0.5]));
        p
    }

    #[test]
    fn flatten_restore_roundtrip_bit_exact() {
        let p = sample_set();
        let flat = p.flatten();
        let back = ParameterSet::restore(&p.layout(), &flat).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn empty_set_roundtrip() {
        let p = ParameterSet::new();
        let flat = p.flatten();
        assert!(flat.is_empty());
        let back = ParameterSet::restore(&p.layout(), &flat).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn restore_rejects_short_vector() {
        let p = sample_set();
        let mut flat = p.flatten();
        flat.pop();
        let err = ParameterSet::restore(&p.layout(), &flat)
            .unwrap_err()
            .to_string();
        assert!(err.contains('7') && err.contains('8'), "{err}");
    }

    #[test]
    fn sgd_basic_step() {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::from_vec(vec![1.0]));
        let mut g = ParameterSet::new();
        g.push("w", Tensor::from_vec(vec![0.5]));
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.tensor(0).data(), &[0.95]);
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut p = sample_set();
        let before = p.flatten();
        let mut g = ParameterSet::new();
        g.push("a.weight", Tensor::zeros(vec![2, 3]));
        g.push("a.bias", Tensor::zeros(vec![2]));
        sgd_step(&mut p, &g, 0.7).unwrap();
        assert_eq!(before, p.flatten());
    }

    #[test]
    fn sgd_constant_gradients_compose_linearly() {
        let mut two_steps = ParameterSet::new();
        two_steps.push("w", Tensor::from_vec(vec![2.0]));
        let mut g1 = ParameterSet::new();
        g1.push("w", Tensor::from_vec(vec![0.25]));
        let mut g2 = ParameterSet::new();
        g2.push("w", Tensor::from_vec(vec![0.5]));
        sgd_step(&mut two_steps, &g1, 0.1).unwrap();
        sgd_step(&mut two_steps, &g2, 0.1).unwrap();
        // theta - lr*(g1+g2)
        let expect = 2.0 - 0.1 * (0.25 + 0.5);
        assert!((two_steps.tensor(0).data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_layout_mismatch() {
        let mut p = sample_set();
        let mut g = ParameterSet::new();
        g.push("other", Tensor::zeros(vec![2, 3]));
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn param_file_roundtrip() {
        let p = sample_set();
        let mut buf = Vec::new();
        write_param_file(&mut buf, &p).unwrap();
        let back = read_param_file(&mut buf.as_slice()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn param_file_truncation_detected() {
        let p = sample_set();
        let mut buf = Vec::new();
        write_param_file(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_param_file(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn layout_hash_tracks_structure() {
        let p = sample_set();
        let mut q = sample_set();
        assert_eq!(p.layout().hash(), q.layout().hash());
        q.push("extra", Tensor::zeros(vec![1]));
        assert_ne!(p.layout().hash(), q.layout().hash());
    }
}
