use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorBuf {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(None, format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                None,
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(TensorBuf { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        TensorBuf::new(shape, vec![0.0; numel]).expect("zeros: positive dimensions")
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let mut t = TensorBuf::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of elements in one slice along dimension 0.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Keep only the given indices along dimension 0, in the given order.
    pub fn select_dim0(&self, keep: &[usize]) -> Result<Self> {
        let row = self.row_len();
        let mut data = Vec::with_capacity(keep.len() * row);
        for &i in keep {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = keep.len();
        TensorBuf::new(shape, data)
    }

    /// Keep only the given indices along dimension 1, in the given order.
    pub fn select_dim1(&self, keep: &[usize]) -> Result<Self> {
        if self.shape.len() < 2 {
            return Err(Error::shape(None, "select_dim1 on a tensor with rank < 2"));
        }
        let outer = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * cols * inner;
            for &c in keep {
                data.extend_from_slice(&self.data[base + c * inner..base + (c + 1) * inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = keep.len();
        TensorBuf::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &TensorBuf) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(TensorBuf::new(vec![2, 0], vec![]).is_err());
        assert!(TensorBuf::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorBuf::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn select_along_dims() {
        let t = TensorBuf::new(vec![2, 3, 1], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.select_dim0(&[1]).unwrap();
        assert_eq!(r.shape(), &[1, 3, 1]);
        assert_eq!(r.data(), &[3.0, 4.0, 5.0]);
        let c = t.select_dim1(&[0, 2]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.data(), &[0.0, 2.0, 3.0, 5.0]);
    }
}
