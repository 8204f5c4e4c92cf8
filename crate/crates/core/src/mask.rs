//! Per-pixel maps shared by prediction, data loading and evaluation.

/// Binary tumor mask, row-major, `1` = tumor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Builds a mask from any byte map; nonzero bytes are tumor.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != width * height {
            return None;
        }
        Some(Self {
            width,
            height,
            data: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    /// `0`/`1` per pixel.
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Grayscale rendering: tumor white (255) on black (0).
    pub fn to_gray(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

/// Tumor-class probability per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn threshold(&self, t: f32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| u8::from(p > t)).collect(),
        }
    }
}
