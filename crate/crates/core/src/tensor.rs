//! Dense row-major `f64` tensors and their binary serialization.
//!
//! Serialized layout (little-endian): magic `PTNS`, `u32` version (1),
//! `u32` rank, `u64` dims, then `f64` data in row-major order.

use crate::error::{shape_err, Error, Result};
use crate::wire::{self, Reader};

pub const TENSOR_MAGIC: &[u8; 4] = b"PTNS";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("Tensor::new", shape, &[data.len()]));
        }
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value stored in tensor"
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Row-major matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(&[r, c], data).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel]).unwrap()
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(&[], vec![v]).unwrap()
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        wire::put_u32(out, TENSOR_VERSION);
        wire::put_u32(out, self.shape.len() as u32);
        for &d in &self.shape {
            wire::put_u64(out, d as u64);
        }
        for &v in &self.data {
            wire::put_f64(out, v);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.shape.len() + self.data.len()));
        self.write_to(&mut out);
        out
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(TENSOR_MAGIC)?;
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return r.fail(format!("unsupported tensor version {version}"));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return r.fail(format!("implausible tensor rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| *n <= (1 << 32));
        let Some(numel) = numel else {
            return r.fail(format!("implausible tensor shape {shape:?}"));
        };
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let at = r.offset();
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: at,
                    msg: "non-finite tensor value".into(),
                });
            }
            data.push(v);
        }
        Tensor::new(&shape, data)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let t = Tensor::read_from(&mut r)?;
        if !r.is_empty() {
            return r.fail("trailing bytes after tensor");
        }
        Ok(t)
    }
}
