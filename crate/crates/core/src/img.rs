//! Minimal dense 2D image container shared by the tracking and fusion code.

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }
}

impl Image<f32> {
    /// Bilinear interpolation at sub-pixel (x, y). Returns None when the
    /// 2x2 support leaves the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let x0 = x.floor();
        let y0 = y.floor();
        let (ix, iy) = (x0 as i64, y0 as i64);
        if ix < 0 || iy < 0 || ix + 1 >= self.width as i64 || iy + 1 >= self.height as i64 {
            return None;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        let fx = x - x0;
        let fy = y - y0;
        let v00 = *self.get(ix, iy) as f64;
        let v10 = *self.get(ix + 1, iy) as f64;
        let v01 = *self.get(ix, iy + 1) as f64;
        let v11 = *self.get(ix + 1, iy + 1) as f64;
        Some(v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy + v11 * fx * fy)
    }

    /// Exact gradient of the bilinear interpolant at (x, y); the analytic
    /// counterpart of [`Self::sample_bilinear`], so finite differences of the
    /// sample match this to machine precision inside a cell.
    pub fn gradient_bilinear(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let x0 = x.floor();
        let y0 = y.floor();
        let (ix, iy) = (x0 as i64, y0 as i64);
        if ix < 0 || iy < 0 || ix + 1 >= self.width as i64 || iy + 1 >= self.height as i64 {
            return None;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        let fx = x - x0;
        let fy = y - y0;
        let v00 = *self.get(ix, iy) as f64;
        let v10 = *self.get(ix + 1, iy) as f64;
        let v01 = *self.get(ix, iy + 1) as f64;
        let v11 = *self.get(ix + 1, iy + 1) as f64;
        let gx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let gy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
        Some((gx, gy))
    }

    /// Nearest-neighbor lookup; used for depth where interpolation across
    /// discontinuities would fabricate surfaces.
    pub fn sample_nearest(&self, x: f64, y: f64) -> Option<f64> {
        let ix = x.round() as i64;
        let iy = y.round() as i64;
        if !self.in_bounds(ix, iy) {
            return None;
        }
        Some(*self.get(ix as usize, iy as usize) as f64)
    }
}
