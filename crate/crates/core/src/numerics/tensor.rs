//! Dense row-major `f64` arrays and the `CAPT` binary container.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"CAPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value {} at flat index {}",
                data[i], i
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor over `values`.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the payload. Callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if !self.same_shape(other) {
            return dim_err(format!("add {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if !self.same_shape(other) {
            return dim_err(format!("sub {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Writes `CAPT`, u32 rank, u32 dims, then the little-endian f64 payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
