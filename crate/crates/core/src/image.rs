/// Channel-last, row-major `f32` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == height * width * channels).then_some(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize, ch: usize) -> &mut f32 {
        &mut self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Column `c` of the result is column `W - 1 - c` of `self`.
    pub fn mirrored(&self) -> Self {
        let mut out = Self::zeros(self.height, self.width, self.channels);
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    *out.get_mut(r, c, ch) = self.get(r, self.width - 1 - c, ch);
                }
            }
        }
        out
    }

    pub fn swap_channels(&mut self, a: usize, b: usize) {
        for px in self.data.chunks_exact_mut(self.channels) {
            px.swap(a, b);
        }
    }
}
