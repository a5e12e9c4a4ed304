//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it in
//! reverse and accumulates gradients for every registered parameter. Tensors
//! are value-semantic, so backward closures hold no references into the tape;
//! saved context (indices, masks, strides) is captured by value.

use std::cell::{Cell, RefCell};

use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient contributions for the parents of a node, in parent order.
type BackFn<S> = Box<dyn FnOnce(&Tensor<S>, &[Tensor<S>]) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<usize>,
    backward: Option<BackFn<S>>,
    /// Parameter slot this leaf mirrors, if any.
    param: Option<usize>,
}

/// Per-parameter gradients produced by one backward pass, indexed by the
/// parameter slots handed to [`Tape::param`].
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn new(n_slots: usize) -> Self {
        Self {
            slots: (0..n_slots).map(|_| None).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor<S>> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    /// Gradient for a slot, materializing zeros for parameters the loss never
    /// touched.
    pub fn get_or_zeros(&self, slot: usize, shape: &[usize]) -> Tensor<S> {
        match self.get(slot) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn accumulate(&mut self, slot: usize, grad: Tensor<S>) {
        match &mut self.slots[slot] {
            Some(g) => g.add_assign(&grad),
            empty => *empty = Some(grad),
        }
    }

    /// Elementwise sum of two gradient sets (for batch reduction).
    pub fn merge(&mut self, other: Gradients<S>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (slot, grad) in other.slots.into_iter().enumerate() {
            if let Some(grad) = grad {
                self.accumulate(slot, grad);
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    n_param_slots: usize,
    backward_done: Cell<bool>,
}

impl<S: Scalar> Tape<S> {
    pub fn new(n_param_slots: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            n_param_slots,
            backward_done: Cell::new(false),
        }
    }

    fn push(&self, node: Node<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Constant leaf; gradients stop here.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            param: None,
        })
    }

    /// Leaf mirroring a trainable parameter; backward deposits its gradient
    /// into `slot`.
    pub fn param(&self, slot: usize, value: Tensor<S>) -> Var {
        debug_assert!(slot < self.n_param_slots);
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            param: Some(slot),
        })
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn unary(
        &self,
        a: Var,
        value: Tensor<S>,
        back: impl FnOnce(&Tensor<S>, &[Tensor<S>]) -> Vec<Tensor<S>> + 'static,
    ) -> Var {
        self.push(Node {
            value,
            parents: vec![a.0],
            backward: Some(Box::new(back)),
            param: None,
        })
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        value: Tensor<S>,
        back: impl FnOnce(&Tensor<S>, &[Tensor<S>]) -> Vec<Tensor<S>> + 'static,
    ) -> Var {
        self.push(Node {
            value,
            parents: vec![a.0, b.0],
            backward: Some(Box::new(back)),
            param: None,
        })
    }

    /// Reverse pass from a scalar loss. Consumes the recorded backward
    /// closures; calling it a second time on the same tape is a contract
    /// violation.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.backward_done.replace(true) {
            return Err(contract("backward called twice on the same tape"));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(contract("backward requires a scalar loss"));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        let mut out = Gradients::new(self.n_param_slots);
        for i in (0..n).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if let Some(slot) = nodes[i].param {
                out.accumulate(slot, grad);
                continue;
            }
            let Some(back) = nodes[i].backward.take() else {
                continue;
            };
            let parents = nodes[i].parents.clone();
            let parent_values: Vec<Tensor<S>> =
                parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let contribs = back(&grad, &parent_values);
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, contrib) in parents.into_iter().zip(contribs) {
                match &mut grads[p] {
                    Some(g) => g.add_assign(&contrib),
                    empty => *empty = Some(contrib),
                }
            }
        }
        Ok(out)
    }

    // ----- elementwise ops -----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(contract(format!(
                "add shape mismatch: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va.zip_map(&vb, |x, y| x + y);
        Ok(self.binary(a, b, out, |g, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(contract("sub shape mismatch"));
        }
        let out = va.zip_map(&vb, |x, y| x - y);
        Ok(self.binary(a, b, out, |g, _| {
            vec![g.clone(), g.map(|x| -x)]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(contract("mul shape mismatch"));
        }
        let out = va.zip_map(&vb, |x, y| x * y);
        Ok(self.binary(a, b, out, move |g, _| {
            vec![g.zip_map(&vb, |gi, y| gi * y), g.zip_map(&va, |gi, x| gi * x)]
        }))
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.unary(a, out, move |g, _| vec![g.map(|gi| gi * c)])
    }

    /// Elementwise product with a constant tensor (e.g. a 0/1 mask).
    pub fn mul_const(&self, a: Var, t: Tensor<S>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != t.shape() {
            return Err(contract("mul_const shape mismatch"));
        }
        let out = va.zip_map(&t, |x, y| x * y);
        Ok(self.unary(a, out, move |g, _| vec![g.zip_map(&t, |gi, y| gi * y)]))
    }

    /// Add a constant tensor; gradients pass through unchanged. This is the
    /// straight-through estimator when `t` holds (quantized − encoder) values.
    pub fn add_const(&self, a: Var, t: Tensor<S>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != t.shape() {
            return Err(contract("add_const shape mismatch"));
        }
        let out = va.zip_map(&t, |x, y| x + y);
        Ok(self.unary(a, out, |g, _| vec![g.clone()]))
    }

    pub fn gelu(&self, a: Var) -> Var {
        // tanh approximation of GELU; the derivative below matches it.
        let c0 = S::from_f64(0.7978845608028654); // sqrt(2/pi)
        let c1 = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let one = S::one();
        let three = S::from_f64(3.0);
        let va = self.value(a);
        let out = va.map(|x| {
            let t = (c0 * (x + c1 * x * x * x)).tanh();
            half * x * (one + t)
        });
        self.unary(a, out, move |g, _| {
            vec![g.zip_map(&va, |gi, x| {
                let u = c0 * (x + c1 * x * x * x);
                let t = u.tanh();
                let du = c0 * (one + three * c1 * x * x);
                let d = half * (one + t) + half * x * (one - t * t) * du;
                gi * d
            })]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let one = S::one();
        let out = va.map(|x| one / (one + (-x).exp()));
        let saved = out.clone();
        self.unary(a, out, move |g, _| {
            vec![g.zip_map(&saved, |gi, s| gi * s * (one - s))]
        })
    }

    /// φ(u) = elu(u) + 1: u + 1 for u > 0, exp(u) otherwise. Strictly
    /// positive, which keeps linear-attention denominators positive.
    pub fn elu_plus_one(&self, a: Var) -> Var {
        let va = self.value(a);
        let one = S::one();
        let out = va.map(|x| if x > S::zero() { x + one } else { x.exp() });
        self.unary(a, out, move |g, _| {
            vec![g.zip_map(&va, |gi, x| {
                if x > S::zero() {
                    gi
                } else {
                    gi * x.exp()
                }
            })]
        })
    }

    pub fn clamp_min(&self, a: Var, floor: S) -> Var {
        let va = self.value(a);
        let out = va.map(|x| if x < floor { floor } else { x });
        self.unary(a, out, move |g, _| {
            vec![g.zip_map(&va, |gi, x| if x < floor { S::zero() } else { gi })]
        })
    }

    // ----- linear algebra -----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::matmul(&va, false, &vb, false)?;
        Ok(self.binary(a, b, out, move |g, _| {
            let da = Tensor::matmul(g, false, &vb, true).expect("matmul backward dA");
            let db = Tensor::matmul(&va, true, g, false).expect("matmul backward dB");
            vec![da, db]
        }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed()?;
        Ok(self.unary(a, out, |g, _| {
            vec![g.transposed().expect("transpose backward")]
        }))
    }

    /// y = x Wᵀ + b for x[..., in], W[out, in], b[out]. Leading extents of x
    /// are flattened into rows.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        if vw.shape().len() != 2 || vb.shape().len() != 1 {
            return Err(contract("linear expects W[out,in], b[out]"));
        }
        let (out_dim, in_dim) = (vw.shape()[0], vw.shape()[1]);
        let x_shape = vx.shape().to_vec();
        if x_shape.last().copied() != Some(in_dim) {
            return Err(contract(format!(
                "linear input trailing extent {:?} does not match in={}",
                x_shape, in_dim
            )));
        }
        if vb.shape()[0] != out_dim {
            return Err(contract("linear bias extent does not match out"));
        }
        let m = vx.len() / in_dim;
        let x2 = vx.reshaped([m, in_dim])?;
        let mut y = Tensor::matmul(&x2, false, &vw, true)?;
        {
            let yd = y.data_mut();
            let bd = vb.data();
            for r in 0..m {
                for c in 0..out_dim {
                    yd[r * out_dim + c] += bd[c];
                }
            }
        }
        let mut out_shape = x_shape.clone();
        *out_shape.last_mut().unwrap() = out_dim;
        let out = y.reshaped(out_shape)?;
        Ok(self.push(Node {
            value: out,
            parents: vec![x.0, w.0, b.0],
            backward: Some(Box::new(move |g, _| {
                let g2 = g.reshaped([m, out_dim]).expect("linear backward grad");
                let dx = Tensor::matmul(&g2, false, &vw, false)
                    .expect("linear backward dx")
                    .reshaped(x_shape.clone())
                    .expect("linear backward dx shape");
                let dw = Tensor::matmul(&g2, true, &x2, false).expect("linear backward dw");
                let mut db = Tensor::zeros([out_dim]);
                {
                    let dbd = db.data_mut();
                    let gd = g2.data();
                    for r in 0..m {
                        for c in 0..out_dim {
                            dbd[c] += gd[r * out_dim + c];
                        }
                    }
                }
                vec![dx, dw, db]
            })),
            param: None,
        }))
    }

    /// Valid cross-correlation over x[ch_in, len] with W[ch_out, ch_in, k].
    pub fn conv1d(&self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        if vx.shape().len() != 2 || vw.shape().len() != 3 {
            return Err(contract("conv1d expects x[ch_in,len], W[ch_out,ch_in,k]"));
        }
        if stride == 0 {
            return Err(contract("conv1d stride must be >= 1"));
        }
        let (ci, len) = (vx.shape()[0], vx.shape()[1]);
        let (co, wci, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        if wci != ci {
            return Err(contract("conv1d channel mismatch"));
        }
        if len < k {
            return Err(contract(format!("conv1d input length {len} < kernel {k}")));
        }
        if vb.shape() != [co] {
            return Err(contract("conv1d bias extent mismatch"));
        }
        let olen = (len - k) / stride + 1;
        let mut out = Tensor::zeros([co, olen]);
        {
            let od = out.data_mut();
            let xd = vx.data();
            let wd = vw.data();
            let bd = vb.data();
            for oc in 0..co {
                for t in 0..olen {
                    let start = t * stride;
                    let mut acc = bd[oc];
                    for ic in 0..ci {
                        let xrow = &xd[ic * len + start..ic * len + start + k];
                        let wrow = &wd[(oc * ci + ic) * k..(oc * ci + ic + 1) * k];
                        for j in 0..k {
                            acc += xrow[j] * wrow[j];
                        }
                    }
                    od[oc * olen + t] = acc;
                }
            }
        }
        Ok(self.push(Node {
            value: out,
            parents: vec![x.0, w.0, b.0],
            backward: Some(Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = Tensor::zeros([ci, len]);
                let mut dw = Tensor::zeros([co, ci, k]);
                let mut db = Tensor::zeros([co]);
                {
                    let dxd = dx.data_mut();
                    let xd = vx.data();
                    let wd = vw.data();
                    for oc in 0..co {
                        for t in 0..olen {
                            let go = gd[oc * olen + t];
                            let start = t * stride;
                            for ic in 0..ci {
                                for j in 0..k {
                                    dxd[ic * len + start + j] += go * wd[(oc * ci + ic) * k + j];
                                }
                            }
                        }
                    }
                    let dwd = dw.data_mut();
                    for oc in 0..co {
                        for t in 0..olen {
                            let go = gd[oc * olen + t];
                            let start = t * stride;
                            for ic in 0..ci {
                                for j in 0..k {
                                    dwd[(oc * ci + ic) * k + j] += go * xd[ic * len + start + j];
                                }
                            }
                        }
                    }
                    let dbd = db.data_mut();
                    for oc in 0..co {
                        for t in 0..olen {
                            dbd[oc] += gd[oc * olen + t];
                        }
                    }
                }
                vec![dx, dw, db]
            })),
            param: None,
        }))
    }

    // ----- normalization -----

    /// Group normalization over x[ch, len] with per-channel affine.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        if vx.shape().len() != 2 {
            return Err(contract("group_norm expects x[ch,len]"));
        }
        let (ch, len) = (vx.shape()[0], vx.shape()[1]);
        if groups == 0 || ch % groups != 0 {
            return Err(contract(format!(
                "group_norm: {ch} channels not divisible by {groups} groups"
            )));
        }
        if vg.shape() != [ch] || vb.shape() != [ch] {
            return Err(contract("group_norm affine extents must equal channels"));
        }
        let cpg = ch / groups;
        let gsize = cpg * len;
        let mut normed = Tensor::zeros([ch, len]);
        let mut means = vec![S::zero(); groups];
        let mut inv_stds = vec![S::zero(); groups];
        {
            let xd = vx.data();
            let nd = normed.data_mut();
            let denom = S::from_f64(gsize as f64);
            for g in 0..groups {
                let base = g * cpg * len;
                let mut mean = S::zero();
                for i in 0..gsize {
                    mean += xd[base + i];
                }
                mean = mean / denom;
                let mut var = S::zero();
                for i in 0..gsize {
                    let d = xd[base + i] - mean;
                    var += d * d;
                }
                var = var / denom;
                let inv_std = S::one() / (var + eps).sqrt();
                means[g] = mean;
                inv_stds[g] = inv_std;
                for i in 0..gsize {
                    nd[base + i] = (xd[base + i] - mean) * inv_std;
                }
            }
        }
        let mut out = Tensor::zeros([ch, len]);
        {
            let od = out.data_mut();
            let nd = normed.data();
            let gd = vg.data();
            let bd = vb.data();
            for c in 0..ch {
                for t in 0..len {
                    od[c * len + t] = nd[c * len + t] * gd[c] + bd[c];
                }
            }
        }
        let saved_normed = normed;
        Ok(self.push(Node {
            value: out,
            parents: vec![x.0, gamma.0, beta.0],
            backward: Some(Box::new(move |g, _| {
                let gd = g.data();
                let nd = saved_normed.data();
                let gamd = vg.data();
                let mut dgamma = Tensor::zeros([ch]);
                let mut dbeta = Tensor::zeros([ch]);
                {
                    let dgd = dgamma.data_mut();
                    for c in 0..ch {
                        for t in 0..len {
                            dgd[c] += gd[c * len + t] * nd[c * len + t];
                        }
                    }
                    let dbd = dbeta.data_mut();
                    for c in 0..ch {
                        for t in 0..len {
                            dbd[c] += gd[c * len + t];
                        }
                    }
                }
                // d/dx of (x - mean)/std with mean/var over the group, then
                // the per-channel gamma factor folded into the upstream grad.
                let mut dx = Tensor::zeros([ch, len]);
                {
                    let dxd = dx.data_mut();
                    let denom = S::from_f64(gsize as f64);
                    for grp in 0..groups {
                        let base = grp * cpg * len;
                        let mut sum_dy = S::zero();
                        let mut sum_dy_n = S::zero();
                        for i in 0..gsize {
                            let c = grp * cpg + i / len;
                            let dy = gd[base + i] * gamd[c];
                            sum_dy += dy;
                            sum_dy_n += dy * nd[base + i];
                        }
                        let inv_std = inv_stds[grp];
                        for i in 0..gsize {
                            let c = grp * cpg + i / len;
                            let dy = gd[base + i] * gamd[c];
                            dxd[base + i] = inv_std
                                * (dy - sum_dy / denom - nd[base + i] * sum_dy_n / denom);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
            param: None,
        }))
    }

    /// Layer normalization over the last axis of x[m, n].
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(contract("layer_norm expects x[m,n]"));
        }
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        // One row of layer norm is one group of group norm over [n, 1].
        // Shapes differ, so it gets its own kernel.
        let vg = self.value(gamma);
        let vb = self.value(beta);
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(contract("layer_norm affine extents must equal width"));
        }
        let mut normed = Tensor::zeros([m, n]);
        let mut inv_stds = vec![S::zero(); m];
        {
            let xd = vx.data();
            let nd = normed.data_mut();
            let denom = S::from_f64(n as f64);
            for r in 0..m {
                let row = &xd[r * n..(r + 1) * n];
                let mut mean = S::zero();
                for &v in row {
                    mean += v;
                }
                mean = mean / denom;
                let mut var = S::zero();
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / denom;
                let inv_std = S::one() / (var + eps).sqrt();
                inv_stds[r] = inv_std;
                for c in 0..n {
                    nd[r * n + c] = (row[c] - mean) * inv_std;
                }
            }
        }
        let mut out = Tensor::zeros([m, n]);
        {
            let od = out.data_mut();
            let nd = normed.data();
            let gd = vg.data();
            let bd = vb.data();
            for r in 0..m {
                for c in 0..n {
                    od[r * n + c] = nd[r * n + c] * gd[c] + bd[c];
                }
            }
        }
        let saved_normed = normed;
        Ok(self.push(Node {
            value: out,
            parents: vec![x.0, gamma.0, beta.0],
            backward: Some(Box::new(move |g, _| {
                let gd = g.data();
                let nd = saved_normed.data();
                let gamd = vg.data();
                let mut dgamma = Tensor::zeros([n]);
                let mut dbeta = Tensor::zeros([n]);
                {
                    let dgd = dgamma.data_mut();
                    let dbd = dbeta.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            dgd[c] += gd[r * n + c] * nd[r * n + c];
                            dbd[c] += gd[r * n + c];
                        }
                    }
                }
                let mut dx = Tensor::zeros([m, n]);
                {
                    let dxd = dx.data_mut();
                    let denom = S::from_f64(n as f64);
                    for r in 0..m {
                        let mut sum_dy = S::zero();
                        let mut sum_dy_n = S::zero();
                        for c in 0..n {
                            let dy = gd[r * n + c] * gamd[c];
                            sum_dy += dy;
                            sum_dy_n += dy * nd[r * n + c];
                        }
                        let inv_std = inv_stds[r];
                        for c in 0..n {
                            let dy = gd[r * n + c] * gamd[c];
                            dxd[r * n + c] = inv_std
                                * (dy - sum_dy / denom - nd[r * n + c] * sum_dy_n / denom);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
            param: None,
        }))
    }

    // ----- shape ops -----

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let old_shape = va.shape().to_vec();
        let out = va.reshaped(shape)?;
        Ok(self.unary(a, out, move |g, _| {
            vec![g.reshaped(old_shape.clone()).expect("reshape backward")]
        }))
    }

    /// Stack rank-2 tensors with identical widths along the row axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_rows of zero parts"));
        }
        let values: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let n = values[0].shape().last().copied().unwrap_or(0);
        let mut row_counts = Vec::with_capacity(values.len());
        let mut total = 0usize;
        for v in &values {
            if v.shape().len() != 2 || v.shape()[1] != n {
                return Err(contract("concat_rows width mismatch"));
            }
            row_counts.push(v.shape()[0]);
            total += v.shape()[0];
        }
        let mut data = Vec::with_capacity(total * n);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec([total, n], data)?;
        Ok(self.push(Node {
            value: out,
            parents: parts.iter().map(|p| p.0).collect(),
            backward: Some(Box::new(move |g, _| {
                let gd = g.data();
                let mut offset = 0;
                row_counts
                    .iter()
                    .map(|&rows| {
                        let part =
                            Tensor::from_vec([rows, n], gd[offset * n..(offset + rows) * n].to_vec())
                                .expect("concat_rows backward");
                        offset += rows;
                        part
                    })
                    .collect()
            })),
            param: None,
        }))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[0] != vb.shape()[0] {
            return Err(contract("concat_cols expects matching row counts"));
        }
        let (m, p, q) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(&va.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&vb.data()[r * q..(r + 1) * q]);
        }
        let out = Tensor::from_vec([m, p + q], data)?;
        Ok(self.binary(a, b, out, move |g, _| {
            let gd = g.data();
            let mut da = Vec::with_capacity(m * p);
            let mut db = Vec::with_capacity(m * q);
            for r in 0..m {
                da.extend_from_slice(&gd[r * (p + q)..r * (p + q) + p]);
                db.extend_from_slice(&gd[r * (p + q) + p..(r + 1) * (p + q)]);
            }
            vec![
                Tensor::from_vec([m, p], da).expect("concat_cols backward a"),
                Tensor::from_vec([m, q], db).expect("concat_cols backward b"),
            ]
        }))
    }

    pub fn slice_cols(&self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(contract("slice_cols expects rank-2"));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        if lo >= hi || hi > n {
            return Err(contract(format!("slice_cols range {lo}..{hi} out of {n}")));
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&va.data()[r * n + lo..r * n + hi]);
        }
        let out = Tensor::from_vec([m, w], data)?;
        Ok(self.unary(a, out, move |g, _| {
            let mut dx = Tensor::zeros([m, n]);
            {
                let dxd = dx.data_mut();
                let gd = g.data();
                for r in 0..m {
                    dxd[r * n + lo..r * n + hi].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
            }
            vec![dx]
        }))
    }

    /// Row gather: out[i] = x[ids[i]]. Backward scatter-adds, so this also
    /// serves as the embedding lookup.
    pub fn gather_rows(&self, x: Var, ids: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(contract("gather_rows expects rank-2"));
        }
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(contract(format!("gather_rows index {bad} out of {m} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in &ids {
            data.extend_from_slice(&vx.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_vec([ids.len(), n], data)?;
        Ok(self.unary(x, out, move |g, _| {
            let mut dx = Tensor::zeros([m, n]);
            {
                let dxd = dx.data_mut();
                let gd = g.data();
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..n {
                        dxd[i * n + c] += gd[r * n + c];
                    }
                }
            }
            vec![dx]
        }))
    }

    // ----- rows/softmax -----

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(contract("softmax_rows expects rank-2"));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut out = Tensor::zeros([m, n]);
        {
            let od = out.data_mut();
            let xd = va.data();
            for r in 0..m {
                let row = &xd[r * n..(r + 1) * n];
                let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for c in 0..n {
                    let e = (row[c] - max).exp();
                    od[r * n + c] = e;
                    sum += e;
                }
                for c in 0..n {
                    od[r * n + c] = od[r * n + c] / sum;
                }
            }
        }
        let saved = out.clone();
        Ok(self.unary(a, out, move |g, _| {
            let mut dx = Tensor::zeros([m, n]);
            {
                let dxd = dx.data_mut();
                let gd = g.data();
                let yd = saved.data();
                for r in 0..m {
                    let mut dot = S::zero();
                    for c in 0..n {
                        dot += gd[r * n + c] * yd[r * n + c];
                    }
                    for c in 0..n {
                        dxd[r * n + c] = yd[r * n + c] * (gd[r * n + c] - dot);
                    }
                }
            }
            vec![dx]
        }))
    }

    /// Divide each row of a[m,n] by the matching entry of d[m,1].
    pub fn div_cols(&self, a: Var, d: Var) -> Result<Var> {
        let (va, vd) = (self.value(a), self.value(d));
        if va.shape().len() != 2 || vd.shape() != [va.shape()[0], 1] {
            return Err(contract("div_cols expects a[m,n], d[m,1]"));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut out = Tensor::zeros([m, n]);
        {
            let od = out.data_mut();
            let ad = va.data();
            let dd = vd.data();
            for r in 0..m {
                for c in 0..n {
                    od[r * n + c] = ad[r * n + c] / dd[r];
                }
            }
        }
        Ok(self.binary(a, d, out, move |g, _| {
            let gd = g.data();
            let ad = va.data();
            let dd = vd.data();
            let mut da = Tensor::zeros([m, n]);
            let mut ddv = Tensor::zeros([m, 1]);
            {
                let dad = da.data_mut();
                let ddd = ddv.data_mut();
                for r in 0..m {
                    let inv = S::one() / dd[r];
                    let mut acc = S::zero();
                    for c in 0..n {
                        dad[r * n + c] = gd[r * n + c] * inv;
                        acc += gd[r * n + c] * ad[r * n + c];
                    }
                    ddd[r] = -acc * inv * inv;
                }
            }
            vec![da, ddv]
        }))
    }

    // ----- reductions and losses -----

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let total = va.data().iter().fold(S::zero(), |acc, &x| acc + x);
        self.unary(a, Tensor::scalar(total), move |g, _| {
            vec![Tensor::full(shape.clone(), g.item())]
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::from_f64(n as f64))
    }

    /// Mean squared error of `a` against a constant target, optionally over
    /// masked positions only.
    pub fn mse_against(
        &self,
        a: Var,
        target: &Tensor<S>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != target.shape() {
            return Err(contract("mse shape mismatch"));
        }
        let count = match mask {
            Some(m) => {
                if m.len() != va.len() {
                    return Err(contract("mse mask length mismatch"));
                }
                m.iter().filter(|&&b| b).count()
            }
            None => va.len(),
        };
        if count == 0 {
            return Err(contract("mse over an empty mask"));
        }
        let mask_owned: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        let denom = S::from_f64(count as f64);
        let mut total = S::zero();
        for (i, (&x, &t)) in va.data().iter().zip(target.data().iter()).enumerate() {
            if mask_owned.as_ref().map_or(true, |m| m[i]) {
                let d = x - t;
                total += d * d;
            }
        }
        let target = target.clone();
        let shape = va.shape().to_vec();
        Ok(self.unary(a, Tensor::scalar(total / denom), move |g, _| {
            let scale = S::from_f64(2.0) * g.item() / denom;
            let mut dx = Tensor::zeros(shape.clone());
            {
                let dxd = dx.data_mut();
                for (i, (&x, &t)) in va.data().iter().zip(target.data().iter()).enumerate() {
                    if mask_owned.as_ref().map_or(true, |m| m[i]) {
                        dxd[i] = scale * (x - t);
                    }
                }
            }
            vec![dx]
        }))
    }

    /// Label-smoothed softmax cross-entropy, mean over rows.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], smoothing: S) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 {
            return Err(contract("cross_entropy expects logits[n,K]"));
        }
        let (n, k) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != n {
            return Err(contract("cross_entropy target count mismatch"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(contract(format!("cross_entropy target {bad} out of {k}")));
        }
        if smoothing < S::zero() || smoothing >= S::one() {
            return Err(contract("cross_entropy smoothing must be in [0,1)"));
        }
        let ld = vl.data();
        let mut probs = Tensor::zeros([n, k]);
        let mut total = S::zero();
        {
            let pd = probs.data_mut();
            let kf = S::from_f64(k as f64);
            for r in 0..n {
                let row = &ld[r * k..(r + 1) * k];
                let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for c in 0..k {
                    let e = (row[c] - max).exp();
                    pd[r * k + c] = e;
                    sum += e;
                }
                let lse = max + sum.ln();
                for c in 0..k {
                    pd[r * k + c] = pd[r * k + c] / sum;
                }
                // -sum_j q_j log p_j with q = (1-s) one-hot + s/K uniform
                let mut row_loss = lse - (S::one() - smoothing) * row[targets[r]];
                let mut mean_logit = S::zero();
                for c in 0..k {
                    mean_logit += row[c];
                }
                row_loss = row_loss - smoothing * mean_logit / kf;
                total += row_loss;
            }
        }
        let nf = S::from_f64(n as f64);
        let targets = targets.to_vec();
        Ok(self.unary(logits, Tensor::scalar(total / nf), move |g, _| {
            let scale = g.item() / nf;
            let kf = S::from_f64(k as f64);
            let mut dl = probs.clone();
            {
                let dld = dl.data_mut();
                for r in 0..n {
                    for c in 0..k {
                        let mut q = smoothing / kf;
                        if c == targets[r] {
                            q += S::one() - smoothing;
                        }
                        dld[r * k + c] = scale * (dld[r * k + c] - q);
                    }
                }
            }
            vec![dl]
        }))
    }

    /// Focal loss on probabilities p[n] with binary labels, mean over the
    /// batch. γ=0, α=1 reduces to binary cross-entropy. Probabilities are
    /// clamped to [1e-7, 1-1e-7] as part of the contract.
    pub fn focal_loss(&self, p: Var, labels: &[bool], gamma: S, alpha: S) -> Result<Var> {
        let vp = self.value(p);
        if vp.len() != labels.len() {
            return Err(contract("focal_loss label count mismatch"));
        }
        if vp.is_empty() {
            return Err(contract("focal_loss on empty batch"));
        }
        let eps = S::from_f64(1e-7);
        let one = S::one();
        let labels = labels.to_vec();
        let n = vp.len();
        let nf = S::from_f64(n as f64);
        let clamp = move |x: S| x.max(eps).min(one - eps);
        let mut total = S::zero();
        for (i, &praw) in vp.data().iter().enumerate() {
            let pc = clamp(praw);
            let pt = if labels[i] { pc } else { one - pc };
            total += -alpha * (one - pt).powf(gamma) * pt.ln();
        }
        let shape = vp.shape().to_vec();
        Ok(self.unary(p, Tensor::scalar(total / nf), move |g, _| {
            let scale = g.item() / nf;
            let mut dp = Tensor::zeros(shape.clone());
            {
                let dpd = dp.data_mut();
                for (i, &praw) in vp.data().iter().enumerate() {
                    if praw <= eps || praw >= one - eps {
                        continue; // clamped: zero local slope
                    }
                    let pt = if labels[i] { praw } else { one - praw };
                    // d/dpt of -alpha (1-pt)^gamma ln pt
                    let omp = one - pt;
                    let dpt = if gamma == S::zero() {
                        -alpha / pt
                    } else {
                        alpha * (gamma * omp.powf(gamma - one) * pt.ln() - omp.powf(gamma) / pt)
                    };
                    dpd[i] = scale * if labels[i] { dpt } else { -dpt };
                }
            }
            vec![dp]
        }))
    }
}
