//! Spectral analysis and normalization of convolution operators.
//!
//! The spectral norm of a convolutional layer is estimated by power
//! iteration on the *operator itself* (conv / transposed-conv pairs on the
//! layer's true input shape) rather than on the reshaped kernel matrix,
//! which underestimates the operator norm. A dense materialization of the
//! operator provides the brute-force SVD oracle for small sizes, and the
//! per-layer norms multiply into a network-level Lipschitz bound for the
//! recurrent map.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffops::{conv2d_linear, conv2d_transpose, l2_norm, Kernel, Padding};
use crate::elem::Elem;
use crate::error::{Error, Result};

/// Largest dense-operator size [`materialize_operator`] will build.
pub const MATERIALIZE_ELEMENT_BUDGET: usize = 1 << 22;

/// Stable-rank normalization settings for one constrained layer.
///
/// `beta == 1` degenerates to plain spectral normalization; the hard
/// constraint is `alpha == 1, beta == 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SrnlConfig {
    /// Target spectral norm.
    pub alpha: f64,
    /// Stable-rank shrink factor in (0, 1].
    pub beta: f64,
    /// Power iterations per training step (warm-started).
    pub power_iters_train: usize,
    /// Power iterations for the final normalization baked in at export.
    pub power_iters_final: usize,
}

impl SrnlConfig {
    /// Hard Lipschitz constraint: spectral norm clamped to 1.
    pub fn hard() -> Self {
        SrnlConfig {
            alpha: 1.0,
            beta: 1.0,
            power_iters_train: 1,
            power_iters_final: 100,
        }
    }

    /// Soft constraint: spectral norm set to `alpha`, stable rank shrunk
    /// by `beta`.
    pub fn soft(alpha: f64, beta: f64) -> Self {
        SrnlConfig {
            alpha,
            beta,
            power_iters_train: 1,
            power_iters_final: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!(
                "beta must be in (0, 1], got {}",
                self.beta
            )));
        }
        if self.power_iters_train == 0 || self.power_iters_final == 0 {
            return Err(Error::config("power iteration counts must be >= 1"));
        }
        Ok(())
    }
}

/// Warm-start state for power iteration on one layer.
#[derive(Debug, Clone)]
pub struct PowerIterState<T: Elem> {
    /// Unit-norm vector shaped like the layer input `(1, c_in, h, w)`.
    pub u: Array4<T>,
    /// Latest spectral-norm estimate.
    pub sigma: T,
}

fn seeded_unit_vector<T: Elem>(shape: (usize, usize, usize), seed: u64) -> Array4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Array4::from_shape_simple_fn((1, shape.0, shape.1, shape.2), || {
        T::from_f64(rng.random::<f64>() * 2.0 - 1.0)
    });
    let n = l2_norm(&u);
    if n > T::zero() {
        u.mapv_inplace(|v| v / n);
    }
    u
}

/// Deterministic per-layer seed for power-iteration initialization.
fn layer_seed(c_out: usize, c_in: usize, k: usize, shape: (usize, usize, usize)) -> u64 {
    // splitmix64 over the shape signature, so certification output is
    // reproducible run to run.
    let mut z = 0x9E37_79B9_7F4A_7C15u64
        ^ ((c_out as u64) << 48 | (c_in as u64) << 32 | (k as u64) << 24)
        ^ ((shape.0 as u64) << 16 | (shape.1 as u64) << 8 | shape.2 as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Power-iteration estimate of the largest singular value of the
/// convolution operator on inputs of shape `(c_in, h, w)`.
///
/// The estimate is the Rayleigh quotient `||A u||` with `u` unit-norm, so
/// it improves monotonically across iterations and can be warm-started
/// from a previous [`PowerIterState`]. Bias plays no role: only the linear
/// part is measured.
pub fn spectral_norm<T: Elem>(
    kern: &Kernel<T>,
    input_shape: (usize, usize, usize),
    iters: usize,
    state: Option<PowerIterState<T>>,
) -> Result<(T, PowerIterState<T>)> {
    if iters == 0 {
        return Err(Error::usage("spectral_norm: iters must be >= 1"));
    }
    if input_shape.0 != kern.c_in() {
        return Err(Error::shape(format!(
            "spectral_norm: input shape has {} channels, kernel expects {}",
            input_shape.0,
            kern.c_in()
        )));
    }
    let seed = layer_seed(kern.c_out(), kern.c_in(), kern.ksize(), input_shape);
    let mut u = match state {
        Some(st) if st.u.dim() == (1, input_shape.0, input_shape.1, input_shape.2) => st.u,
        _ => seeded_unit_vector(input_shape, seed),
    };

    if kern.weights.iter().all(|&w| w == T::zero()) {
        let u = seeded_unit_vector(input_shape, seed);
        return Ok((
            T::zero(),
            PowerIterState {
                u,
                sigma: T::zero(),
            },
        ));
    }

    let mut sigma = T::zero();
    for _ in 0..iters {
        let v = conv2d_linear(&u, kern)?;
        sigma = l2_norm(&v);
        if sigma == T::zero() {
            // Unit vector landed in the null space; restart from the
            // seeded direction perturbed by one extra hash round.
            u = seeded_unit_vector(input_shape, seed.wrapping_add(1));
            continue;
        }
        let w = conv2d_transpose(&v, kern)?;
        let wn = l2_norm(&w);
        if wn == T::zero() {
            break;
        }
        u = w.mapv(|x| x / wn);
    }
    Ok((sigma, PowerIterState { u, sigma }))
}

/// Dense matrix of the convolution operator for inputs `(c_in, h, w)`,
/// shaped `(c_out*h*w, c_in*h*w)`. Constructed directly from kernel taps
/// (independent of the conv implementation), so it doubles as an oracle.
pub fn materialize_operator<T: Elem>(
    kern: &Kernel<T>,
    input_shape: (usize, usize, usize),
) -> Result<Array2<T>> {
    let (c_in, h, w) = input_shape;
    if c_in != kern.c_in() {
        return Err(Error::shape(format!(
            "materialize_operator: input shape has {c_in} channels, kernel expects {}",
            kern.c_in()
        )));
    }
    let c_out = kern.c_out();
    let rows = c_out * h * w;
    let cols = c_in * h * w;
    if rows.saturating_mul(cols) > MATERIALIZE_ELEMENT_BUDGET {
        return Err(Error::domain(format!(
            "materialize_operator: {rows}x{cols} exceeds element budget {MATERIALIZE_ELEMENT_BUDGET}"
        )));
    }
    let k = kern.ksize() as isize;
    let r = k / 2;
    let mut m = Array2::<T>::zeros((rows, cols));
    for co in 0..c_out {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let row = (co * h + y as usize) * w + x as usize;
                for ci in 0..c_in {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y + dy - r;
                            let sx = x + dx - r;
                            let (sy, sx) = match kern.padding {
                                Padding::Zero => {
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    (sy as usize, sx as usize)
                                }
                                Padding::Circular => (
                                    sy.rem_euclid(h as isize) as usize,
                                    sx.rem_euclid(w as isize) as usize,
                                ),
                            };
                            let col = (ci * h + sy) * w + sx;
                            m[[row, col]] =
                                m[[row, col]] + kern.weights[[co, ci, dy as usize, dx as usize]];
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Largest singular value of a dense matrix (computed in f64).
pub fn operator_norm<T: Elem>(m: &Array2<T>) -> f64 {
    let (rows, cols) = m.dim();
    let dm = nalgebra::DMatrix::from_fn(rows, cols, |i, j| m[[i, j]].as_f64());
    dm.singular_values().max()
}

/// Stable rank `||m||_F^2 / ||m||_2^2` of a nonzero dense matrix.
pub fn stable_rank<T: Elem>(m: &Array2<T>) -> Result<f64> {
    let fro2: f64 = m.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    if fro2 == 0.0 {
        return Err(Error::domain("stable_rank: zero matrix"));
    }
    let sigma = operator_norm(m);
    Ok(fro2 / (sigma * sigma))
}

/// Kernel reshaped to the `(c_out, c_in*k*k)` matrix used by the
/// stable-rank path.
pub fn reshaped_kernel_matrix<T: Elem>(kern: &Kernel<T>) -> Array2<T> {
    let (c_out, c_in, k, _) = kern.weights.dim();
    kern.weights
        .view()
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("kernel weights contiguous")
        .to_owned()
}

/// Normalize one layer under the configured constraint.
///
/// For `beta == 1`, the whole kernel is scaled by `alpha / sigma`, where
/// `sigma` is the power-iteration operator norm at `input_shape`; after
/// normalization the operator norm equals `alpha` up to iteration
/// tolerance.
///
/// For `beta < 1`, the stable-rank decomposition is applied to the
/// reshaped `(c_out, c_in*k*k)` kernel matrix: its top singular component
/// is set to `alpha` and the residual rescaled so the reshaped matrix's
/// stable rank equals `max(1, beta * srank_before)`. This operates on the
/// reshaped matrix rather than the conv operator (the rank-1 component of
/// a conv operator is generally not a convolution), so it approximates the
/// operator-space constraint. Bias is untouched in both paths.
pub fn srnl_normalize<T: Elem>(
    kern: &Kernel<T>,
    cfg: &SrnlConfig,
    input_shape: (usize, usize, usize),
    state: Option<PowerIterState<T>>,
    iters: usize,
) -> Result<(Kernel<T>, PowerIterState<T>)> {
    cfg.validate()?;
    if kern.weights.iter().all(|&w| w == T::zero()) {
        // Norm 0 already satisfies any alpha; leave untouched.
        let (_, st) = spectral_norm(kern, input_shape, 1, state)?;
        return Ok((kern.clone(), st));
    }

    if cfg.beta >= 1.0 {
        let (sigma, st) = spectral_norm(kern, input_shape, iters, state)?;
        let mut out = kern.clone();
        if sigma > T::zero() {
            out.scale_weights(T::from_f64(cfg.alpha) / sigma);
        }
        let state = PowerIterState {
            u: st.u,
            sigma: T::from_f64(cfg.alpha),
        };
        return Ok((out, state));
    }

    // beta < 1: stable-rank decomposition of the reshaped kernel matrix.
    let (c_out, c_in, k, _) = kern.weights.dim();
    let m = reshaped_kernel_matrix(kern);
    let dm = nalgebra::DMatrix::from_fn(c_out, c_in * k * k, |i, j| m[[i, j]].as_f64());
    let svd = nalgebra::SVD::new(dm.clone(), true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd vt");
    let s = &svd.singular_values;
    let sigma1 = s[0];
    if sigma1 == 0.0 {
        let (_, st) = spectral_norm(kern, input_shape, 1, state)?;
        return Ok((kern.clone(), st));
    }
    let top = u.column(0) * vt.row(0) * sigma1;
    let residual = &dm - &top;
    let res_fro2: f64 = residual.iter().map(|v| v * v).sum();
    let srank_before = dm.iter().map(|v| v * v).sum::<f64>() / (sigma1 * sigma1);
    let target = (cfg.beta * srank_before).max(1.0);
    // ||alpha u1 v1' + gamma R||_F^2 = alpha^2 + gamma^2 ||R||_F^2, and the
    // top singular value stays alpha because gamma * sigma2 <= alpha for
    // beta <= 1. Solving for the target stable rank gives gamma.
    let gamma = if res_fro2 > 0.0 {
        cfg.alpha * ((target - 1.0).max(0.0)).sqrt() / res_fro2.sqrt()
    } else {
        0.0
    };
    let new = u.column(0) * vt.row(0) * cfg.alpha + residual * gamma;
    let mut weights = Array4::<T>::zeros((c_out, c_in, k, k));
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    weights[[co, ci, ky, kx]] = T::from_f64(new[(co, (ci * k + ky) * k + kx)]);
                }
            }
        }
    }
    let out = Kernel::new(weights, kern.bias.clone(), kern.padding)?;
    // The enforced quantity in this path is the reshaped-matrix norm,
    // which equals alpha exactly by construction.
    let st = match state {
        Some(mut st) => {
            st.sigma = T::from_f64(cfg.alpha);
            st
        }
        None => PowerIterState {
            u: seeded_unit_vector(input_shape, layer_seed(c_out, c_in, k, input_shape)),
            sigma: T::from_f64(cfg.alpha),
        },
    };
    Ok((out, st))
}

/// Upper bound on the Lipschitz constant of a recurrent map made of the
/// given convolutions interspaced with 1-Lipschitz activations: the
/// product of per-layer spectral norms at the given input shapes.
pub fn certify_network<T: Elem>(
    layers: &[(&Kernel<T>, (usize, usize, usize))],
    iters: usize,
) -> Result<f64> {
    Ok(certify_network_detailed(layers, iters)?.1)
}

/// Per-layer spectral norms plus their product.
pub fn certify_network_detailed<T: Elem>(
    layers: &[(&Kernel<T>, (usize, usize, usize))],
    iters: usize,
) -> Result<(Vec<f64>, f64)> {
    if layers.is_empty() {
        return Err(Error::domain("certify_network: empty layer list"));
    }
    let mut sigmas = Vec::with_capacity(layers.len());
    for (kern, shape) in layers {
        let (sigma, _) = spectral_norm(kern, *shape, iters, None)?;
        sigmas.push(sigma.as_f64());
    }
    let bound = sigmas.iter().product();
    Ok((sigmas, bound))
}

/// Largest observed ratio `||phi(h, z) - phi(h', z)|| / ||h - h'||` over
/// random draws. For a certified network this must stay at or below the
/// spectral bound.
pub fn empirical_contraction<T: Elem>(
    phi: impl Fn(&Array4<T>, &Array4<T>) -> Array4<T>,
    h_shape: (usize, usize, usize),
    z_shape: (usize, usize, usize),
    trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |shape: (usize, usize, usize), rng: &mut ChaCha8Rng| {
        Array4::from_shape_simple_fn((1, shape.0, shape.1, shape.2), || {
            T::from_f64(rng.random::<f64>() * 2.0 - 1.0)
        })
    };
    let mut max_ratio = 0.0f64;
    for _ in 0..trials {
        let h = draw(h_shape, &mut rng);
        let h2 = draw(h_shape, &mut rng);
        let z = draw(z_shape, &mut rng);
        let d_in = l2_norm(&(&h - &h2));
        if d_in == T::zero() {
            continue;
        }
        let d_out = l2_norm(&(phi(&h, &z) - phi(&h2, &z)));
        let ratio = d_out.as_f64() / d_in.as_f64();
        max_ratio = max_ratio.max(ratio);
    }
    max_ratio
}
