//! Dense row-major f32 tensors.
//!
//! Deliberately minimal: the model needs 1-D and 2-D tensors, matrix
//! products against small weight matrices, and elementwise maps. No views,
//! no broadcasting, no autograd.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// 2-D constructor from nested rows; rows must be equally long.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn from_vec(data: Vec<f32>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails if any element is NaN or infinite; `what` names the tensor.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Data(format!("non-finite value in {what}")))
        }
    }
}

/// y[b] = w · x[b] + bias, with w laid out [out × in].
pub fn matmul_xwt(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (batch, d_in) = (x.rows(), x.cols());
    let (d_out, w_in) = (w.rows(), w.cols());
    if d_in != w_in {
        return Err(Error::Shape(format!(
            "input [{}x{}] incompatible with weight [{}x{}]",
            batch, d_in, d_out, w_in
        )));
    }
    let mut out = Tensor::zeros(vec![batch, d_out]);
    for b in 0..batch {
        let xb = x.row(b);
        let ob = out.row_mut(b);
        for o in 0..d_out {
            let wr = w.row(o);
            let mut acc = 0.0f32;
            for i in 0..d_in {
                acc += wr[i] * xb[i];
            }
            ob[o] = acc;
        }
        if let Some(bias) = bias {
            for (o, v) in ob.iter_mut().enumerate() {
                *v += bias.data()[o];
            }
        }
    }
    Ok(out)
}

/// y[b] = dy[b] · w, i.e. the input gradient of `matmul_xwt`.
pub fn matmul_xw(dy: &Tensor, w: &Tensor) -> Tensor {
    let (batch, d_out) = (dy.rows(), dy.cols());
    let d_in = w.cols();
    let mut out = Tensor::zeros(vec![batch, d_in]);
    for b in 0..batch {
        let db = dy.row(b);
        let ob = out.row_mut(b);
        for o in 0..d_out {
            let g = db[o];
            if g == 0.0 {
                continue;
            }
            let wr = w.row(o);
            for i in 0..d_in {
                ob[i] += g * wr[i];
            }
        }
    }
    out
}

/// dw = dy^T · x, the weight gradient of `matmul_xwt` ([out × in]).
pub fn matmul_ytx(dy: &Tensor, x: &Tensor) -> Tensor {
    let (batch, d_out) = (dy.rows(), dy.cols());
    let d_in = x.cols();
    let mut out = Tensor::zeros(vec![d_out, d_in]);
    for b in 0..batch {
        let db = dy.row(b);
        let xb = x.row(b);
        for o in 0..d_out {
            let g = db[o];
            if g == 0.0 {
                continue;
            }
            let or = out.row_mut(o);
            for i in 0..d_in {
                or[i] += g * xb[i];
            }
        }
    }
    out
}

/// Column sums of a 2-D tensor (bias gradient).
pub fn column_sums(dy: &Tensor) -> Tensor {
    let (batch, d) = (dy.rows(), dy.cols());
    let mut out = Tensor::zeros(vec![d]);
    for b in 0..batch {
        let row = dy.row(b);
        let acc = out.data_mut();
        for i in 0..d {
            acc[i] += row[i];
        }
    }
    out
}

/// Concatenate two 2-D tensors along columns.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "row mismatch in concat: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    let (batch, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![batch, ca + cb]);
    for r in 0..batch {
        let orow = out.row_mut(r);
        orow[..ca].copy_from_slice(a.row(r));
        orow[ca..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

/// Split a 2-D tensor into two column blocks at `at`.
pub fn split_cols(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (batch, c) = (t.rows(), t.cols());
    debug_assert!(at <= c);
    let mut a = Tensor::zeros(vec![batch, at]);
    let mut b = Tensor::zeros(vec![batch, c - at]);
    for r in 0..batch {
        let row = t.row(r);
        a.row_mut(r).copy_from_slice(&row[..at]);
        b.row_mut(r).copy_from_slice(&row[at..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_hand_case() {
        // w = [[1,1],[1,-1]], bias = [0.5, 0], x = [[2,1]] -> [[3.5, 1]]
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let b = Tensor::from_vec(vec![0.5, 0.0]);
        let x = Tensor::from_rows(&[vec![2.0, 1.0]]).unwrap();
        let y = matmul_xwt(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.5, 1.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        let (a2, b2) = split_cols(&c, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
