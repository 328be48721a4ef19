use ndgrad::Tensor;

use super::DataError;

/// Dense single-channel attention map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(DataError::Extents {
                expected: (width, height),
                detail: format!("{} values", values.len()),
            });
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        SaliencyMap {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        SaliencyMap {
            width,
            height,
            values,
        }
    }

    /// Map view of a `[1, H, W]` or `[H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self, DataError> {
        let s = t.shape();
        let (h, w) = match s {
            [1, h, w] | [h, w] => (*h, *w),
            _ => {
                return Err(DataError::Extents {
                    expected: (0, 0),
                    detail: format!("tensor of shape {s:?} is not a single map"),
                })
            }
        };
        Self::new(w, h, t.data().to_vec())
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("extents checked")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Index of the first maximum, as `(x, y)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Divides by the maximum so the peak is exactly 1.
    pub fn normalize(&self) -> Result<SaliencyMap, DataError> {
        let m = self.max();
        if !(m > 0.0) {
            return Err(DataError::ZeroMap);
        }
        Ok(self.map(|v| v / m))
    }

    /// Like [`normalize`](Self::normalize), returning all-zero maps unchanged.
    pub fn normalize_or_zero(&self) -> SaliencyMap {
        self.normalize().unwrap_or_else(|_| self.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SaliencyMap {
        SaliencyMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mean over the rectangle `[x0, x1) x [y0, y1)`.
    pub fn region_mean(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                acc += self.get(x, y);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }

    /// Means of the (top-left, top-right, bottom-left, bottom-right) quadrants.
    pub fn quadrant_means(&self) -> [f64; 4] {
        let (hw, hh) = (self.width / 2, self.height / 2);
        [
            self.region_mean(0, 0, hw, hh),
            self.region_mean(hw, 0, self.width, hh),
            self.region_mean(0, hh, hw, self.height),
            self.region_mean(hw, hh, self.width, self.height),
        ]
    }
}
