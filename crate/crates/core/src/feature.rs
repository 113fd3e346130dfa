use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Spatial;
use crate::real::Real;

/// Coordinate frame a feature map lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Camera pixel space.
    Uv,
    /// Metric bird's-eye-view grid.
    Bev,
}

impl Frame {
    pub fn name(self) -> &'static str {
        match self {
            Frame::Uv => "uv",
            Frame::Bev => "bev",
        }
    }

    pub fn expect(self, want: Frame) -> Result<()> {
        if self == want {
            Ok(())
        } else {
            Err(Error::FrameMismatch {
                expected: want.name(),
                actual: self.name(),
            })
        }
    }
}

/// A batch of `sp.n` feature maps with `c` channels, held in the graph as a
/// channel-last `[n*h*w, c]` matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMap {
    pub var: Var,
    pub sp: Spatial,
    pub c: usize,
    pub frame: Frame,
    /// Input pixels (or BEV cells) per feature cell.
    pub stride: usize,
}

impl FeatureMap {
    /// `[c, h, w]` values of map `b` in the batch.
    pub fn to_chw<T: Real>(&self, g: &Graph<T>, b: usize) -> Vec<T> {
        let data = g.value(self.var).data();
        let per = self.sp.h * self.sp.w;
        let mut out = Vec::with_capacity(self.c * per);
        for ch in 0..self.c {
            for i in 0..per {
                out.push(data[(b * per + i) * self.c + ch]);
            }
        }
        out
    }

    /// `[c, h, w]` shape of one map.
    pub fn chw(&self) -> [usize; 3] {
        [self.c, self.sp.h, self.sp.w]
    }
}

/// Two-channel (background, foreground) segmentation logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLogits {
    pub var: Var,
    pub sp: Spatial,
    pub frame: Frame,
}

impl SegLogits {
    pub fn chw(&self) -> [usize; 3] {
        [2, self.sp.h, self.sp.w]
    }

    /// Foreground probability per cell, row-major over `[n, h, w]`.
    pub fn foreground_probs<T: Real>(&self, g: &Graph<T>) -> Vec<f64> {
        g.value(self.var)
            .data()
            .chunks(2)
            .map(|l| {
                let (a, b) = (l[0].f64(), l[1].f64());
                1.0 / (1.0 + libm::exp(a - b))
            })
            .collect()
    }
}
