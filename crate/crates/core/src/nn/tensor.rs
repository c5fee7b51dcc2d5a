use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::embedding::{read_bounded, read_exact_or, read_u32};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            other => panic!("expected a matrix, found shape {other:?}"),
        }
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(self.dims2(), &self.data).expect("shape checked at construction")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let dims = self.dims2();
        ArrayViewMut2::from_shape(dims, &mut self.data).expect("shape checked at construction")
    }

    pub fn vector(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn vector_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[..])
    }
}

/// Handle to one parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Gradient buffers shaped like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            values: self.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length");
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrite values from checkpoint records. Every parameter must be
    /// present with a matching shape; extra records are an error.
    pub fn load_records(&mut self, records: Vec<CheckpointRecord>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for rec in records {
            let id = self
                .index
                .get(&rec.name)
                .copied()
                .ok_or_else(|| Error::Corrupt(format!("unknown parameter {:?}", rec.name)))?;
            let t = &mut self.values[id];
            if t.shape() != rec.shape.as_slice() {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "{}: expected {:?}, found {:?}",
                        rec.name,
                        t.shape(),
                        rec.shape
                    ),
                ));
            }
            for (dst, src) in t.data.iter_mut().zip(&rec.data) {
                *dst = f64::from(*src);
            }
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Corrupt(format!(
                "checkpoint lacks parameter {:?}",
                self.names[missing]
            )));
        }
        Ok(())
    }
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter()
    }

    pub fn zero(&mut self) {
        for t in &mut self.values {
            t.data.fill(0.0);
        }
    }

    /// `self += other`, element order fixed.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parse a checkpoint: `b"CKPT"` followed by records until end of input.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "checkpoint header")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "CKPT".into(),
            found: magic.to_vec(),
        });
    }
    let mut records = Vec::new();
    loop {
        let mut len_bytes = [0u8; 4];
        let got = read_bounded(&mut r, 4)?;
        if got.is_empty() {
            break;
        }
        if got.len() != 4 {
            return Err(Error::Corrupt("truncated record header".into()));
        }
        len_bytes.copy_from_slice(&got);
        let name_len = u32::from_le_bytes(len_bytes) as usize;
        let name_bytes = read_bounded(&mut r, name_len)?;
        if name_bytes.len() != name_len {
            return Err(Error::Corrupt("truncated parameter name".into()));
        }
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Corrupt(format!("{name}: invalid shape {shape:?}")))?;
        let n_bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt(format!("{name}: invalid shape {shape:?}")))?;
        let bytes = read_bounded(&mut r, n_bytes)?;
        if bytes.len() != n_bytes {
            return Err(Error::Corrupt(format!("{name}: truncated data")));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(CheckpointRecord { name, shape, data });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oversized_checkpoint_shape_is_corrupt() {
        let mut bytes = b"CKPT".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(u32::MAX.to_le_bytes());
        bytes.extend(u32::MAX.to_le_bytes());
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.25, 4.0]).unwrap());
        ps.add("b", Tensor::new(vec![3], vec![0.5, 0.0, -1.0]).unwrap());
        let mut buf = Vec::new();
        ps.write_checkpoint(&mut buf).unwrap();
        let records = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].shape, [2, 2]);
        let mut other = ps.clone();
        other.set_flat(&[0.0; 7]);
        other.load_records(records).unwrap();
        assert_eq!(other, ps);
    }

    #[test]
    fn checkpoint_shape_mismatch() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[2, 2]));
        let mut buf = Vec::new();
        ps.write_checkpoint(&mut buf).unwrap();
        let mut other = ParamSet::new();
        other.add("w", Tensor::zeros(&[4]));
        let err = other.load_records(read_checkpoint(&buf[..]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(read_checkpoint(&b"EMB1"[..]).is_err());
        let mut buf = b"CKPT".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(b'x');
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
