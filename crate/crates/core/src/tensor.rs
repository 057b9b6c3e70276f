//! Dense row-major tensors.

use std::fmt;

use thiserror::Error;

/// Errors raised by tensor construction and the differentiable op set.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("spectral consistency error: imaginary residue {residue:e} exceeds tolerance")]
    SpectralConsistency { residue: f64 },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

/// Dense real tensor. Immutable once handed to the tape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::dim("tensor", format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Extents of a `[C, H, W]` tensor.
    pub fn chw(&self, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(TensorError::dim(op, format!("expected [C,H,W], got {s:?}"))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Integer class map of an `H × W` image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<usize>) -> Result<Self, TensorError> {
        if height == 0 || width == 0 || classes.len() != height * width {
            return Err(TensorError::dim(
                "label_map",
                format!("{} labels for {height}x{width}", classes.len()),
            ));
        }
        Ok(LabelMap { height, width, classes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn count(&self, class_id: usize) -> usize {
        self.classes.iter().filter(|&&c| c == class_id).count()
    }

    /// Nearest-neighbour resampling to `h × w`: each target cell takes the
    /// label under its centre.
    pub fn downsample_nearest(&self, h: usize, w: usize) -> Result<LabelMap, TensorError> {
        if h == 0 || w == 0 || h > self.height || w > self.width {
            return Err(TensorError::dim(
                "downsample_nearest",
                format!("cannot resample {}x{} to {h}x{w}", self.height, self.width),
            ));
        }
        if h == self.height && w == self.width {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = (2 * y + 1) * self.height / (2 * h);
            for x in 0..w {
                let sx = (2 * x + 1) * self.width / (2 * w);
                out.push(self.classes[sy * self.width + sx]);
            }
        }
        LabelMap::new(h, w, out)
    }

    /// Flat positions holding `class_id`.
    pub fn positions(&self, class_id: usize) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == class_id).then_some(i))
            .collect()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        let r = t.clone().reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4]).is_err());
    }

    #[test]
    fn nearest_downsampling_takes_cell_centres() {
        // 4x4 labels, 2x2 target: centres land on (1,1), (1,3), (3,1), (3,3).
        let labels = LabelMap::new(4, 4, (0..16).collect()).unwrap();
        assert_eq!(labels.downsample_nearest(2, 2).unwrap().classes(), &[5, 7, 13, 15]);
        assert_eq!(labels.downsample_nearest(4, 4).unwrap(), labels);
        assert!(labels.downsample_nearest(8, 8).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }
}
