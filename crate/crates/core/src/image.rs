use serde::{Deserialize, Serialize};

/// Height x width x channels grid of intensities, row-major with channels
/// innermost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image { h, w, c, data: vec![0.0; h * w * c] }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[self.index(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        let i = self.index(y, x, ch);
        self.data[i] = v;
    }

    pub fn pixel_is_blank(&self, y: usize, x: usize) -> bool {
        (0..self.c).all(|ch| self.get(y, x, ch) == 0.0)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    /// Bit pattern of the pixels, usable as a hash key.
    pub fn fingerprint(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}
