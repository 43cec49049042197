use crate::error::{Error, Result};

/// What the values of a [`Grid`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridRole {
    /// Intensities in `[0, 1]`.
    Image,
    /// Per-pixel probabilities in `[0, 1]`.
    Probability,
    /// Values in `{0, 1}`.
    BinaryMask,
}

/// A single-channel `height x width` scalar field stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
    role: GridRole,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>, role: GridRole) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        let ok = match role {
            GridRole::Image | GridRole::Probability => data.iter().all(|v| (0.0..=1.0).contains(v)),
            GridRole::BinaryMask => data.iter().all(|&v| v == 0.0 || v == 1.0),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "values out of range for {role:?} grid"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            role,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, role: GridRole) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], role)
    }

    pub fn zeros(height: usize, width: usize, role: GridRole) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
            role,
        }
    }

    /// Builds a grid from arbitrary values, clamping them into `[0, 1]`
    /// (and thresholding at 0.5 for binary masks).
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>, role: GridRole) -> Self {
        assert_eq!(data.len(), height * width, "grid data length");
        let data = match role {
            GridRole::BinaryMask => data
                .into_iter()
                .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
            _ => data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        };
        Self {
            height,
            width,
            data,
            role,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        1
    }

    pub fn role(&self) -> GridRole {
        self.role
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Number of non-zero pixels.
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}
