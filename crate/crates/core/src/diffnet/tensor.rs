use alloc::vec;
use alloc::vec::Vec;

/// Dense channel-major (`channels × height × width`) image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Panics if `data` does not hold exactly `channels * height * width` values.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self { channels, height, width, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Pixel-major copy: row `p` holds the channel vector of pixel `p`.
    pub fn to_pixel_rows(&self) -> Vec<f64> {
        let n = self.plane_len();
        let c = self.channels;
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for (p, v) in self.plane(ch).iter().enumerate() {
                out[p * c + ch] = *v;
            }
        }
        out
    }

    /// Inverse of [`Tensor::to_pixel_rows`].
    pub fn from_pixel_rows(channels: usize, height: usize, width: usize, rows: &[f64]) -> Self {
        let n = height * width;
        assert_eq!(rows.len(), n * channels, "pixel row data length");
        let mut t = Tensor::zeros(channels, height, width);
        for ch in 0..channels {
            let plane = t.plane_mut(ch);
            for (p, v) in plane.iter_mut().enumerate() {
                *v = rows[p * channels + ch];
            }
        }
        t
    }
}
