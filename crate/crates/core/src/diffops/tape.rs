//! Dynamic reverse-mode tape.
//!
//! Operations are evaluated eagerly and recorded in forward order; one
//! variable per node. `backward` seeds the (scalar) root with 1, replays
//! the record in reverse into scratch adjoints, and finally adds the leaf
//! adjoints into persistent per-leaf gradient accumulators, so repeated
//! backward calls without a reset accumulate additively.
//!
//! A tape is single-owner: build it, run backward, read gradients, drop it.
//! Variables that do not require gradients prune their backward work (a
//! kernel registered with `requires_grad = false` costs no weight-gradient
//! GEMMs).

use ndarray::Array4;

use super::kernel::Padding;
use super::ops;
use crate::elem::Elem;
use crate::error::{Error, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Node<T: Elem> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: Padding,
    },
    Conv2dTranspose {
        y: Var,
        w: Var,
        pad: Padding,
    },
    Relu {
        x: Var,
    },
    PixelShuffle {
        x: Var,
        s: usize,
    },
    PixelUnshuffle {
        x: Var,
        s: usize,
    },
    ConcatChannels {
        xs: Vec<Var>,
    },
    RepeatChannels {
        x: Var,
        n: usize,
    },
    Luma {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    MseLoss {
        pred: Var,
        target: Var,
    },
    PickPixel {
        x: Var,
        b: usize,
        c: usize,
        i: usize,
        j: usize,
    },
    Abs {
        x: Var,
    },
}

/// Reverse-mode tape over rank-4 tensors. Scalars are `(1,1,1,1)` tensors.
pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
    vals: Vec<Array4<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Array4<T>>>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, node: Node<T>, val: Array4<T>, requires: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.vals.push(val);
        self.requires.push(requires);
        self.grads.push(None);
        Var(id)
    }

    /// Register an input tensor. Gradients are accumulated only for leaves
    /// with `requires_grad` set.
    pub fn leaf(&mut self, val: Array4<T>, requires_grad: bool) -> Var {
        self.push(Node::Leaf, val, requires_grad)
    }

    /// Register a scalar leaf.
    pub fn scalar_leaf(&mut self, v: T, requires_grad: bool) -> Var {
        self.leaf(Array4::from_elem((1, 1, 1, 1), v), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array4<T> {
        &self.vals[v.0]
    }

    /// Scalar payload of a `(1,1,1,1)` variable.
    pub fn scalar_value(&self, v: Var) -> T {
        self.vals[v.0][[0, 0, 0, 0]]
    }

    /// Accumulated gradient of a leaf, if any backward pass touched it.
    pub fn grad(&self, v: Var) -> Option<&Array4<T>> {
        self.grads[v.0].as_ref()
    }

    /// Clear all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ── Recorded operations ─────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Result<Var> {
        if let Some(bv) = b {
            let bs = self.vals[bv.0].dim();
            let c_out = self.vals[w.0].dim().0;
            if bs != (1, c_out, 1, 1) {
                return Err(Error::shape(format!(
                    "conv2d bias must be (1,{c_out},1,1), got {bs:?}"
                )));
            }
        }
        let bias_view = b.map(|bv| {
            self.vals[bv.0]
                .view()
                .into_shape_with_order(self.vals[w.0].dim().0)
                .expect("bias contiguous")
        });
        let out = ops::conv2d_raw(&self.vals[x.0], &self.vals[w.0], bias_view, pad)?;
        let req = self.requires_any(&[x, w]) || b.map_or(false, |bv| self.requires[bv.0]);
        Ok(self.push(Node::Conv2d { x, w, b, pad }, out, req))
    }

    pub fn conv2d_transpose(&mut self, y: Var, w: Var, pad: Padding) -> Result<Var> {
        let out = ops::conv2d_transpose_raw(&self.vals[y.0], &self.vals[w.0], pad)?;
        let req = self.requires_any(&[y, w]);
        Ok(self.push(Node::Conv2dTranspose { y, w, pad }, out, req))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(&self.vals[x.0]);
        let req = self.requires[x.0];
        self.push(Node::Relu { x }, out, req)
    }

    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(&self.vals[x.0], s)?;
        let req = self.requires[x.0];
        Ok(self.push(Node::PixelShuffle { x, s }, out, req))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = ops::pixel_unshuffle(&self.vals[x.0], s)?;
        let req = self.requires[x.0];
        Ok(self.push(Node::PixelUnshuffle { x, s }, out, req))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let views: Vec<&Array4<T>> = xs.iter().map(|v| &self.vals[v.0]).collect();
        let out = ops::concat_channels(&views)?;
        let req = self.requires_any(xs);
        Ok(self.push(Node::ConcatChannels { xs: xs.to_vec() }, out, req))
    }

    pub fn repeat_channels(&mut self, x: Var, n: usize) -> Var {
        let out = ops::repeat_channels(&self.vals[x.0], n);
        let req = self.requires[x.0];
        self.push(Node::RepeatChannels { x, n }, out, req)
    }

    pub fn luma(&mut self, x: Var) -> Result<Var> {
        let out = ops::luma(&self.vals[x.0])?;
        let req = self.requires[x.0];
        Ok(self.push(Node::Luma { x }, out, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].dim() != self.vals[b.0].dim() {
            return Err(Error::shape(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.vals[a.0].dim(),
                self.vals[b.0].dim()
            )));
        }
        let out = &self.vals[a.0] + &self.vals[b.0];
        let req = self.requires_any(&[a, b]);
        Ok(self.push(Node::Add { a, b }, out, req))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.vals[x.0].mapv(|v| v * factor);
        let req = self.requires[x.0];
        self.push(Node::Scale { x, factor }, out, req)
    }

    /// Sum of all elements, as a scalar variable.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array4::from_elem((1, 1, 1, 1), ops::sum_all(&self.vals[x.0]));
        let req = self.requires[x.0];
        self.push(Node::Sum { x }, out, req)
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = ops::mse_loss(&self.vals[pred.0], &self.vals[target.0])?;
        let out = Array4::from_elem((1, 1, 1, 1), v);
        let req = self.requires_any(&[pred, target]);
        Ok(self.push(Node::MseLoss { pred, target }, out, req))
    }

    /// Extract one element as a scalar variable.
    pub fn pick_pixel(&mut self, x: Var, b: usize, c: usize, i: usize, j: usize) -> Result<Var> {
        let dim = self.vals[x.0].dim();
        if b >= dim.0 || c >= dim.1 || i >= dim.2 || j >= dim.3 {
            return Err(Error::usage(format!(
                "pick_pixel: index ({b},{c},{i},{j}) out of bounds for {dim:?}"
            )));
        }
        let out = Array4::from_elem((1, 1, 1, 1), self.vals[x.0][[b, c, i, j]]);
        let req = self.requires[x.0];
        Ok(self.push(Node::PickPixel { x, b, c, i, j }, out, req))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.vals[x.0].mapv(|v| v.abs());
        let req = self.requires[x.0];
        self.push(Node::Abs { x }, out, req)
    }

    /// Mean of a list of scalar variables.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::usage("mean_scalars: empty list"));
        }
        let mut acc = xs[0];
        for &v in &xs[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, T::from_f64(1.0 / xs.len() as f64)))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Accumulates `d root / d leaf`
    /// into every gradient-requiring leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.vals[root.0].len() != 1 {
            return Err(Error::usage(format!(
                "backward: root must be scalar, got shape {:?}",
                self.vals[root.0].dim()
            )));
        }
        let mut adj: Vec<Option<Array4<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Array4::from_elem((1, 1, 1, 1), T::one()));

        for i in (0..=root.0).rev() {
            if !self.requires[i] {
                adj[i] = None;
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i] {
                Node::Leaf => {
                    match &mut self.grads[i] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Node::Conv2d { x, w, b, pad } => {
                    let (x, w, b, pad) = (*x, *w, *b, *pad);
                    if self.requires[x.0] {
                        let dx = ops::conv2d_transpose_raw(&g, &self.vals[w.0], pad)
                            .expect("shapes validated at record time");
                        accumulate(&mut adj[x.0], dx);
                    }
                    if self.requires[w.0] {
                        let k = self.vals[w.0].dim().2;
                        let dw = ops::conv2d_grad_weights(&self.vals[x.0], &g, k, pad);
                        accumulate(&mut adj[w.0], dw);
                    }
                    if let Some(bv) = b {
                        if self.requires[bv.0] {
                            let db = ops::conv2d_grad_bias(&g);
                            let c = db.len();
                            let db4 = db.into_shape_with_order((1, c, 1, 1)).expect("reshape");
                            accumulate(&mut adj[bv.0], db4);
                        }
                    }
                }
                Node::Conv2dTranspose { y, w, pad } => {
                    let (y, w, pad) = (*y, *w, *pad);
                    if self.requires[y.0] {
                        let dy = ops::conv2d_raw(&g, &self.vals[w.0], None, pad)
                            .expect("shapes validated at record time");
                        accumulate(&mut adj[y.0], dy);
                    }
                    if self.requires[w.0] {
                        let k = self.vals[w.0].dim().2;
                        let dw = ops::conv2d_grad_weights(&g, &self.vals[y.0], k, pad);
                        accumulate(&mut adj[w.0], dw);
                    }
                }
                Node::Relu { x } => {
                    let x = *x;
                    if self.requires[x.0] {
                        let dx = ops::relu_backward(&self.vals[x.0], &g);
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Node::PixelShuffle { x, s } => {
                    let (x, s) = (*x, *s);
                    if self.requires[x.0] {
                        let dx = ops::pixel_unshuffle(&g, s).expect("validated");
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Node::PixelUnshuffle { x, s } => {
                    let (x, s) = (*x, *s);
                    if self.requires[x.0] {
                        let dx = ops::pixel_shuffle(&g, s).expect("validated");
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Node::ConcatChannels { xs } => {
                    let xs = xs.clone();
                    let mut at = 0;
                    for v in xs {
                        let c = self.vals[v.0].dim().1;
                        if self.requires[v.0] {
                            let dx = ops::slice_channels(&g, at, at + c);
                            accumulate(&mut adj[v.0], dx);
                        }
                        at += c;
                    }
                }
                Node::RepeatChannels { x, n } => {
                    let (x, n) = (*x, *n);
                    if self.requires[x.0] {
                        let c = self.vals[x.0].dim().1;
                        let mut dx = ops::slice_channels(&g, 0, c);
                        for i in 1..n {
                            dx += &ops::slice_channels(&g, i * c, (i + 1) * c);
                        }
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Node::Luma { x } => {
                    let x = *x;
                    if self.requires[x.0] {
                        let dx = ops::luma_adjoint(&g);
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Node::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.requires[a.0] {
                        accumulate(&mut adj[a.0], g.clone());
                    }
                    if self.requires[b.0] {
                        accumulate(&mut adj[b.0], g);
                    }
                }
                Node::Scale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    if self.requires[x.0] {
                        accumulate(&mut adj[x.0], g.mapv(|v| v * factor));
                    }
                }
                Node::Sum { x } => {
                    let x = *x;
                    if self.requires[x.0] {
                        let gv = g[[0, 0, 0, 0]];
                        let dx = Array4::from_elem(self.vals[x.0].dim(), gv);
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Node::MseLoss { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let gv = g[[0, 0, 0, 0]];
                    let n = T::from_f64(self.vals[pred.0].len() as f64);
                    let two = T::from_f64(2.0);
                    if self.requires[pred.0] {
                        let dx = ndarray::Zip::from(&self.vals[pred.0])
                            .and(&self.vals[target.0])
                            .map_collect(|&p, &t| gv * two * (p - t) / n);
                        accumulate(&mut adj[pred.0], dx);
                    }
                    if self.requires[target.0] {
                        let dt = ndarray::Zip::from(&self.vals[pred.0])
                            .and(&self.vals[target.0])
                            .map_collect(|&p, &t| gv * two * (t - p) / n);
                        accumulate(&mut adj[target.0], dt);
                    }
                }
                Node::PickPixel { x, b, c, i, j } => {
                    let (x, b, c, i, j) = (*x, *b, *c, *i, *j);
                    if self.requires[x.0] {
                        let mut dx = Array4::zeros(self.vals[x.0].dim());
                        dx[[b, c, i, j]] = g[[0, 0, 0, 0]];
                        accumulate(&mut adj[x.0], dx);
                    }
                }
                Node::Abs { x } => {
                    let x = *x;
                    if self.requires[x.0] {
                        let mut dx = g.clone();
                        dx.zip_mut_with(&self.vals[x.0], |gv, &xv| {
                            if xv < T::zero() {
                                *gv = -*gv;
                            } else if xv == T::zero() {
                                *gv = T::zero();
                            }
                        });
                        accumulate(&mut adj[x.0], dx);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Elem>(slot: &mut Option<Array4<T>>, g: Array4<T>) {
    match slot {
        Some(acc) => *acc += &g,
        none => *none = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 1, 2, 2)), true);
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::Usage(_))
        ));
    }

    #[test]
    fn relu_all_negative_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::from_elem((1, 2, 3, 3), -0.5), true);
        let y = tape.relu(x);
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_shuffle_gradient_is_unshuffle_of_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut tape = Tape::<f64>::new();
        let xv = rand_tensor(&mut rng, (1, 4, 3, 3));
        let x = tape.leaf(xv, true);
        let y = tape.pixel_shuffle(x, 2).unwrap();
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        // d sum / d x is all-ones regardless of the permutation.
        let g = tape.grad(x).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn repeated_backward_accumulates_additively() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::<f64>::new();
        let xv = rand_tensor(&mut rng, (1, 1, 2, 2));
        let x = tape.leaf(xv, true);
        let y = tape.scale(x, 3.0);
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        let g1 = tape.grad(x).unwrap().clone();
        tape.backward(root).unwrap();
        let g2 = tape.grad(x).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn no_grad_leaf_stays_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut tape = Tape::<f64>::new();
        let xv = rand_tensor(&mut rng, (1, 2, 4, 4));
        let wv = rand_tensor(&mut rng, (3, 2, 3, 3));
        let x = tape.leaf(xv, true);
        let w = tape.leaf(wv, false);
        let y = tape.conv2d(x, w, None, Padding::Zero).unwrap();
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::<f64>::new();
        let pv = rand_tensor(&mut rng, (1, 1, 2, 2));
        let tv = rand_tensor(&mut rng, (1, 1, 2, 2));
        let p = tape.leaf(pv.clone(), true);
        let t = tape.leaf(tv.clone(), false);
        let loss = tape.mse_loss(p, t).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        let n = pv.len() as f64;
        for ((gv, pvv), tvv) in g.iter().zip(pv.iter()).zip(tv.iter()) {
            assert!((gv - 2.0 * (pvv - tvv) / n).abs() < 1e-14);
        }
    }

    #[test]
    fn abs_and_pick_pixel_backward() {
        let mut tape = Tape::<f64>::new();
        let mut xv = Array4::zeros((1, 1, 2, 2));
        xv[[0, 0, 0, 0]] = -2.0;
        xv[[0, 0, 1, 1]] = 5.0;
        let x = tape.leaf(xv, true);
        let p = tape.pick_pixel(x, 0, 0, 0, 0).unwrap();
        let a = tape.abs(p);
        assert_eq!(tape.scalar_value(a), 2.0);
        tape.backward(a).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[[0, 0, 0, 0]], -1.0);
        assert_eq!(g[[0, 0, 1, 1]], 0.0);
    }

    #[test]
    fn taped_forward_matches_pure_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let xv = rand_tensor(&mut rng, (2, 3, 5, 5));
        let wv = rand_tensor(&mut rng, (4, 3, 3, 3));
        let bv = rand_tensor(&mut rng, (1, 4, 1, 1));

        let kern = super::super::Kernel::new(
            wv.clone(),
            bv.view()
                .into_shape_with_order(4)
                .unwrap()
                .to_owned(),
            Padding::Zero,
        )
        .unwrap();
        let pure = ops::relu(&ops::conv2d(&xv, &kern).unwrap());

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xv, false);
        let w = tape.leaf(wv, true);
        let b = tape.leaf(bv, true);
        let c = tape.conv2d(x, w, Some(b), Padding::Zero).unwrap();
        let r = tape.relu(c);
        assert_eq!(tape.value(r), &pure);
    }
}
