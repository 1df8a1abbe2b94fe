//! Convolution kernel container and padding modes.

use ndarray::{Array1, Array4};

use crate::elem::Elem;
use crate::error::{Error, Result};

/// Border handling for same-size stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Out-of-range taps read zero. Used by all network layers.
    Zero,
    /// Out-of-range taps wrap around. Used by the spectral oracles, where
    /// the operator matrix is exactly doubly block-circulant.
    Circular,
}

/// Weights and bias of one convolutional layer.
///
/// Weights are laid out `(c_out, c_in, k, k)` with odd `k`; the operator is
/// stride 1 and keeps the spatial size for either padding mode.
#[derive(Debug, Clone)]
pub struct Kernel<T: Elem> {
    pub weights: Array4<T>,
    pub bias: Array1<T>,
    pub padding: Padding,
}

impl<T: Elem> Kernel<T> {
    pub fn new(weights: Array4<T>, bias: Array1<T>, padding: Padding) -> Result<Self> {
        let (c_out, _c_in, kh, kw) = weights.dim();
        if kh != kw {
            return Err(Error::config(format!(
                "kernel must be square, got {kh}x{kw}"
            )));
        }
        if kh % 2 == 0 {
            return Err(Error::config(format!(
                "kernel size must be odd for same-size output, got {kh}"
            )));
        }
        if bias.len() != c_out {
            return Err(Error::shape(format!(
                "bias length {} does not match c_out {}",
                bias.len(),
                c_out
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::domain("kernel weights must be finite".to_string()));
        }
        Ok(Kernel {
            weights,
            bias,
            padding,
        })
    }

    /// Identity kernel scaled by `gain`: `c` matched in/out channels, each
    /// channel mapped to itself through the center tap.
    pub fn delta(c: usize, k: usize, gain: T, padding: Padding) -> Self {
        let mut weights = Array4::zeros((c, c, k, k));
        let r = k / 2;
        for ch in 0..c {
            weights[[ch, ch, r, r]] = gain;
        }
        Kernel {
            weights,
            bias: Array1::zeros(c),
            padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weights.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn ksize(&self) -> usize {
        self.weights.dim().2
    }

    /// Scale all weights in place (bias untouched).
    pub fn scale_weights(&mut self, factor: T) {
        self.weights.mapv_inplace(|w| w * factor);
    }
}
