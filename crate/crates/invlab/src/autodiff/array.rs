/// Dense multi-dimensional array of f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    data: Vec<f64>,
    dims: Vec<usize>,
}

impl Array {
    pub fn from_vec(data: Vec<f64>, dims: &[usize]) -> Self {
        let count: usize = dims.iter().product();
        assert_eq!(
            data.len(),
            count,
            "value count {} does not match dims {:?}",
            data.len(),
            dims
        );
        Array {
            data,
            dims: dims.to_vec(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Array {
            data: vec![0.0; dims.iter().product()],
            dims: dims.to_vec(),
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        Array {
            data: vec![value; dims.iter().product()],
            dims: dims.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            data: vec![value],
            dims: vec![1],
        }
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    /// Single value of a scalar (length-1) array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar array {:?}", self.dims);
        self.data[0]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
