//! Dense rank-4 tensors in rows × height × width × channels order.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor, outermost first.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub rows: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims {
    pub const fn new(rows: usize, height: usize, width: usize, channels: usize) -> Self {
        Dims {
            rows,
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one row (one sample).
    pub const fn row_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn with_rows(self, rows: usize) -> Self {
        Dims { rows, ..self }
    }

    #[inline]
    pub fn offset(&self, r: usize, h: usize, w: usize, c: usize) -> usize {
        ((r * self.height + h) * self.width + w) * self.channels + c
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.rows, self.height, self.width, self.channels]
    }
}

impl fmt::Debug for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.rows, self.height, self.width, self.channels
        )
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A dense `f32` tensor. Value-like: cloning copies the data.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for dims {dims} ({} expected)", data.len(), dims.len()),
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn scalar(value: f32) -> Self {
        Tensor4 {
            dims: Dims::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: Dims, std: f32, rng: &mut R) -> Self {
        let data = (0..dims.len())
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor4 { dims, data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(dims: Dims, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..dims.len())
            .map(|_| lo + (hi - lo) * rng.random::<f32>())
            .collect();
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.dims.offset(r, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, h: usize, w: usize, c: usize, v: f32) {
        let i = self.dims.offset(r, h, w, c);
        self.data[i] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let n = self.dims.row_len();
        &self.data[r * n..(r + 1) * n]
    }

    /// Same data under new dims of equal length.
    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if dims.len() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {} as {dims}", self.dims),
            ));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Copies of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let n = self.dims.row_len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor4 {
            dims: self.dims.with_rows(rows.len()),
            data,
        }
    }

    /// Stacks tensors of identical row shape along the row axis.
    pub fn concat_rows(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of zero tensors"))?;
        let mut rows = 0;
        for p in parts {
            let d = p.dims();
            if d.with_rows(0) != first.dims.with_rows(0) {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} vs {}", first.dims, d),
                ));
            }
            rows += d.rows;
        }
        let mut data = Vec::with_capacity(rows * first.dims.row_len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            dims: first.dims.with_rows(rows),
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4({}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let d = Dims::new(2, 3, 4, 5);
        assert_eq!(d.offset(0, 0, 0, 1), 1);
        assert_eq!(d.offset(0, 0, 1, 0), 5);
        assert_eq!(d.offset(0, 1, 0, 0), 20);
        assert_eq!(d.offset(1, 0, 0, 0), 60);
        assert_eq!(d.len(), 120);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::from_vec(Dims::new(1, 2, 2, 1), vec![0.0; 3]).is_err());
        assert!(Tensor4::from_vec(Dims::new(1, 2, 2, 1), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn concat_and_select() {
        let a = Tensor4::from_vec(Dims::new(1, 1, 2, 1), vec![1.0, 2.0]).unwrap();
        let b = Tensor4::from_vec(Dims::new(2, 1, 2, 1), vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor4::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), Dims::new(3, 1, 2, 1));
        assert_eq!(c.select_rows(&[2, 0]).data(), &[5.0, 6.0, 1.0, 2.0]);
        let bad = Tensor4::zeros(Dims::new(1, 1, 3, 1));
        assert!(Tensor4::concat_rows(&[&a, &bad]).is_err());
    }
}
