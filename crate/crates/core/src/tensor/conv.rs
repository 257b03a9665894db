//! 2-D convolution over `[h*w, c]` row-major feature maps, lowered to a
//! gather (im2col) followed by a matrix product.

use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(self.height), f(self.width))
    }

    /// Columns per output position: `kernel * kernel * channels`, ordered
    /// `(ky, kx, c)`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source index of every im2col entry; `None` marks zero padding.
    pub fn im2col_index(&self) -> Vec<Option<usize>> {
        let (ho, wo) = self.out_size();
        let mut idx = Vec::with_capacity(ho * wo * self.patch_len());
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        let x = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width;
                        for c in 0..self.channels {
                            idx.push(inside.then(|| ((y as usize) * self.width + x as usize) * self.channels + c));
                        }
                    }
                }
            }
        }
        idx
    }
}

/// `x` is `[h*w, c]`, `weight` is `[c_out, k*k*c]`; returns `[ho*wo, c_out]`.
pub fn conv2d(g: &mut Graph, x: Var, geom: &ConvGeometry, weight: Var, bias: Var) -> Result<Var> {
    let n_in = geom.height * geom.width * geom.channels;
    if g.value(x).numel() != n_in || g.value(weight).cols() != geom.patch_len() {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, weight {:?} for {geom:?}", g.shape(x), g.shape(weight)),
        ));
    }
    let (ho, wo) = geom.out_size();
    let cols = g.gather(x, Arc::new(geom.im2col_index()), vec![ho * wo, geom.patch_len()])?;
    let y = g.matmul_bt(cols, weight)?;
    g.add_row(y, bias)
}
