use super::conv::{conv2d_backward, conv2d_forward};
use super::ops;
use super::{el, Elem};
use ndarray::{Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T: Elem> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// rhs broadcast to lhs shape
    AddB(Var, Var),
    MulB(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    PowConst(Var, f64),
    ClampMin(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Matmul(Var, Var),
    /// a (M,K) x b (N,K)^T -> (M,N)
    MatmulTB(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Narrow0 {
        x: Var,
        start: usize,
        len: usize,
    },
    Concat1(Vec<Var>),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelMax(Var),
    SumAxis {
        x: Var,
        axis: usize,
        keep: bool,
    },
    MeanAll(Var),
    SumAll(Var),
    Softmax1(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    InstanceNorm {
        x: Var,
        eps: T,
    },
    GradReverse(Var, T),
    Reshape(Var),
}

enum Aux<T: Elem> {
    None,
    InstanceNorm { inv_std: Array2<T> },
    ChannelMax { argmax: Vec<usize> },
    CrossEntropy { probs: Array2<T> },
}

struct Node<T: Elem> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
    aux: Aux<T>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T: Elem> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A define-by-run computation tape.
pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
    /// Leaves registered under an external key (parameter slots), deduped.
    leaf_keys: Vec<(usize, Var)>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_keys: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool, aux: Aux<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false, Aux::None)
    }

    /// A differentiable leaf. `key` identifies an external parameter slot;
    /// a key already present returns the existing node so that gradients
    /// from multiple uses accumulate.
    pub fn leaf(&mut self, value: ArrayD<T>, key: Option<usize>, trainable: bool) -> Var {
        if let Some(k) = key {
            if let Some(&(_, v)) = self.leaf_keys.iter().find(|(lk, _)| *lk == k) {
                return v;
            }
        }
        let v = self.push(value, Op::Leaf, trainable, Aux::None);
        if let Some(k) = key {
            self.leaf_keys.push((k, v));
        }
        v
    }

    pub fn leaf_vars(&self) -> &[(usize, Var)] {
        &self.leaf_keys
    }

    // ---- elementwise / arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg, Aux::None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg, Aux::None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg, Aux::None)
    }

    /// `a + broadcast(b)`; `b`'s shape must broadcast to `a`'s.
    pub fn add_b(&mut self, a: Var, b: Var) -> Var {
        let bv = self.nodes[b.0]
            .value
            .broadcast(self.nodes[a.0].value.raw_dim())
            .unwrap_or_else(|| panic!("add_b broadcast {:?} -> {:?}",
                self.nodes[b.0].value.shape(), self.nodes[a.0].value.shape()))
            .to_owned();
        let v = &self.nodes[a.0].value + &bv;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddB(a, b), rg, Aux::None)
    }

    /// `a * broadcast(b)`.
    pub fn mul_b(&mut self, a: Var, b: Var) -> Var {
        let bv = self.nodes[b.0]
            .value
            .broadcast(self.nodes[a.0].value.raw_dim())
            .unwrap_or_else(|| panic!("mul_b broadcast {:?} -> {:?}",
                self.nodes[b.0].value.shape(), self.nodes[a.0].value.shape()))
            .to_owned();
        let v = &self.nodes[a.0].value * &bv;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MulB(a, b), rg, Aux::None)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg, Aux::None)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg, Aux::None)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a, c), rg, Aux::None)
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let pe = el::<T>(p);
        let v = self.nodes[a.0].value.mapv(|x| x.powf(pe));
        let rg = self.rg(a);
        self.push(v, Op::PowConst(a, p), rg, Aux::None)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pow_const(a, 2.0)
    }

    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x < c { c } else { x });
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, c), rg, Aux::None)
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg, Aux::None)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg, Aux::None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg, Aux::None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg, Aux::None)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg, Aux::None)
    }

    /// `a (M,K) · b(N,K)ᵀ -> (M,N)`
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv.t()).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatmulTB(a, b), rg, Aux::None)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let v = conv2d_forward(&xv, &wv, stride, pad).into_dyn();
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv2d { x, w, stride, pad }, rg, Aux::None)
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(x);
        self.push(v, Op::Narrow0 { x, start, len }, rg, Aux::None)
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat1(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat1");
        let rg = xs.iter().any(|v| self.rg(*v));
        self.push(v, Op::Concat1(xs.to_vec()), rg, Aux::None)
    }

    /// Bilinear 2x upsample of a (B,C,H,W) map (half-pixel centers).
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let v = ops::upsample2x_forward(&xv).into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::Upsample2x(x), rg, Aux::None)
    }

    /// (B,C,H,W) -> (B,C)
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let inv = T::one() / el::<T>((h * w) as f64);
        let mut out = Array2::<T>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = xv.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() * inv;
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), rg, Aux::None)
    }

    /// Mean over channel axis, keepdim: (B,C,H,W) -> (B,1,H,W)
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[1];
        let inv = T::one() / el::<T>(c as f64);
        let v = xv.sum_axis(Axis(1)).insert_axis(Axis(1)).mapv(|s| s * inv);
        let rg = self.rg(x);
        self.push(v, Op::ChannelMean(x), rg, Aux::None)
    }

    /// Max over channel axis, keepdim: (B,C,H,W) -> (B,1,H,W)
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = ndarray::Array4::<T>::zeros((b, 1, h, w));
        let mut argmax = vec![0usize; b * h * w];
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let mut best = xv[[bi, 0, hi, wi]];
                    let mut besti = 0usize;
                    for ci in 1..c {
                        let v = xv[[bi, ci, hi, wi]];
                        if v > best {
                            best = v;
                            besti = ci;
                        }
                    }
                    out[[bi, 0, hi, wi]] = best;
                    argmax[(bi * h + hi) * w + wi] = besti;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::ChannelMax(x), rg, Aux::ChannelMax { argmax })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keep: bool) -> Var {
        let mut v = self.nodes[x.0].value.sum_axis(Axis(axis));
        if keep {
            v = v.insert_axis(Axis(axis));
        }
        let rg = self.rg(x);
        self.push(v, Op::SumAxis { x, axis, keep }, rg, Aux::None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let v = self.nodes[x.0].value.sum() / el::<T>(n as f64);
        let rg = self.rg(x);
        self.push(ndarray::arr0(v).into_dyn(), Op::MeanAll(x), rg, Aux::None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(ndarray::arr0(v).into_dyn(), Op::SumAll(x), rg, Aux::None)
    }

    /// Row softmax of a (B,K) matrix.
    pub fn softmax1(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = ops::softmax_rows(&xv);
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::Softmax1(x), rg, Aux::None)
    }

    /// Mean cross-entropy of (B,K) logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), b, "cross_entropy label count");
        assert!(labels.iter().all(|&y| y < k), "cross_entropy label out of range");
        let probs = ops::softmax_rows(&lv);
        let mut loss = T::zero();
        for (bi, &y) in labels.iter().enumerate() {
            let p = probs[[bi, y]].max(T::from_f64(1e-30));
            loss -= p.ln();
        }
        loss = loss / el::<T>(b as f64);
        let rg = self.rg(logits);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
            Aux::CrossEntropy { probs },
        )
    }

    /// Per-sample per-channel normalization over spatial dims (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (v, inv_std) = ops::instance_norm_forward(&xv, eps);
        let rg = self.rg(x);
        self.push(v.into_dyn(), Op::InstanceNorm { x, eps }, rg, Aux::InstanceNorm { inv_std })
    }

    /// Identity forward; gradient multiplied by `-scale` on the way back.
    pub fn grad_reverse(&mut self, x: Var, scale: T) -> Var {
        assert!(scale > T::zero(), "grad_reverse scale must be positive");
        let v = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        self.push(v, Op::GradReverse(x, scale), rg, Aux::None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg, Aux::None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Returns per-var gradients for
    /// every node with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(go) = grads[idx].take() else { continue };
            self.dispatch_backward(idx, &go, &mut grads);
            // scalar-loss grads for intermediate nodes are not retained
            if idx != loss.0 {
                grads[idx] = Some(go);
            } else {
                grads[idx] = Some(go);
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn dispatch_backward(&self, idx: usize, go: &ArrayD<T>, grads: &mut Vec<Option<ArrayD<T>>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, go.clone());
                self.accum(grads, *b, go.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, go.clone());
                self.accum(grads, *b, go.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, go * &self.nodes[b.0].value);
                }
                if self.rg(*b) {
                    self.accum(grads, *b, go * &self.nodes[a.0].value);
                }
            }
            Op::AddB(a, b) => {
                self.accum(grads, *a, go.clone());
                if self.rg(*b) {
                    let gb = ops::reduce_to_shape(go, self.nodes[b.0].value.shape());
                    self.accum(grads, *b, gb);
                }
            }
            Op::MulB(a, b) => {
                if self.rg(*a) {
                    let bb = self.nodes[b.0]
                        .value
                        .broadcast(self.nodes[a.0].value.raw_dim())
                        .unwrap()
                        .to_owned();
                    self.accum(grads, *a, go * &bb);
                }
                if self.rg(*b) {
                    let prod = go * &self.nodes[a.0].value;
                    let gb = ops::reduce_to_shape(&prod, self.nodes[b.0].value.shape());
                    self.accum(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.accum(grads, *a, go.mapv(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, go.mapv(|v| v * c));
            }
            Op::AddScalar(a, _) => self.accum(grads, *a, go.clone()),
            Op::PowConst(a, p) => {
                let pe = el::<T>(*p);
                let pm1 = el::<T>(*p - 1.0);
                let gx = ndarray::Zip::from(go)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * pe * x.powf(pm1));
                self.accum(grads, *a, gx);
            }
            Op::ClampMin(a, c) => {
                let c = *c;
                let gx = ndarray::Zip::from(go)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| if x > c { g } else { T::zero() });
                self.accum(grads, *a, gx);
            }
            Op::Relu(a) => {
                let gx = ndarray::Zip::from(go)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() });
                self.accum(grads, *a, gx);
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let gx = ndarray::Zip::from(go)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| if x > T::zero() { g } else { g * s });
                self.accum(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = ndarray::Zip::from(go)
                    .and(&node.value)
                    .map_collect(|&g, &y| g * y * (T::one() - y));
                self.accum(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let gx = ndarray::Zip::from(go)
                    .and(&node.value)
                    .map_collect(|&g, &y| g * (T::one() - y * y));
                self.accum(grads, *a, gx);
            }
            Op::Matmul(a, b) => {
                let g2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                if self.rg(*a) {
                    self.accum(grads, *a, g2.dot(&bv.t()).into_dyn());
                }
                if self.rg(*b) {
                    self.accum(grads, *b, av.t().dot(&g2).into_dyn());
                }
            }
            Op::MatmulTB(a, b) => {
                let g2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                if self.rg(*a) {
                    self.accum(grads, *a, g2.dot(&bv).into_dyn());
                }
                if self.rg(*b) {
                    self.accum(grads, *b, g2.t().dot(&av).into_dyn());
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let gov = go.view().into_dimensionality::<Ix4>().unwrap();
                let (gx, gw) =
                    conv2d_backward(&xv, &wv, &gov, *stride, *pad, self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    self.accum(grads, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.accum(grads, *w, gw.into_dyn());
                }
            }
            Op::Narrow0 { x, start, len } => {
                let mut gx = ArrayD::<T>::zeros(self.nodes[x.0].value.raw_dim());
                gx.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*start + *len))
                    .assign(go);
                self.accum(grads, *x, gx);
            }
            Op::Concat1(xs) => {
                let mut offset = 0usize;
                for xv in xs {
                    let c = self.nodes[xv.0].value.shape()[1];
                    if self.rg(*xv) {
                        let part = go
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                            .to_owned();
                        self.accum(grads, *xv, part);
                    }
                    offset += c;
                }
            }
            Op::Upsample2x(x) => {
                let gov = go.view().into_dimensionality::<Ix4>().unwrap();
                let gx = ops::upsample2x_backward(&gov);
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let inv = T::one() / el::<T>((h * w) as f64);
                let g2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array4::<T>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let v = g2[[bi, ci]] * inv;
                        gx.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(v);
                    }
                }
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::ChannelMean(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let c = shape[1];
                let inv = T::one() / el::<T>(c as f64);
                let scaled = go.mapv(|v| v * inv);
                let gx = scaled
                    .broadcast(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                self.accum(grads, *x, gx);
            }
            Op::ChannelMax(x) => {
                let Aux::ChannelMax { argmax } = &node.aux else { unreachable!() };
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (b, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gov = go.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ArrayD::<T>::zeros(IxDyn(&shape));
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let ci = argmax[(bi * h + hi) * w + wi];
                            gx[[bi, ci, hi, wi]] += gov[[bi, 0, hi, wi]];
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::SumAxis { x, axis, keep } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let gexp = if *keep {
                    go.clone()
                } else {
                    go.clone().insert_axis(Axis(*axis))
                };
                let gx = gexp.broadcast(IxDyn(&shape)).unwrap().to_owned();
                self.accum(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let shape = self.nodes[x.0].value.raw_dim();
                let n = self.nodes[x.0].value.len();
                let g = *go.iter().next().unwrap() / el::<T>(n as f64);
                self.accum(grads, *x, ArrayD::from_elem(shape, g));
            }
            Op::SumAll(x) => {
                let shape = self.nodes[x.0].value.raw_dim();
                let g = *go.iter().next().unwrap();
                self.accum(grads, *x, ArrayD::from_elem(shape, g));
            }
            Op::Softmax1(x) => {
                let y = node.value.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let gy_y = (&g2 * &y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let gx = &y * &(&g2 - &gy_y);
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::CrossEntropy { logits, labels } => {
                let Aux::CrossEntropy { probs } = &node.aux else { unreachable!() };
                let gscale = *go.iter().next().unwrap() / el::<T>(labels.len() as f64);
                let mut gx = probs.clone();
                for (bi, &y) in labels.iter().enumerate() {
                    gx[[bi, y]] -= T::one();
                }
                let gx = gx.mapv(|v| v * gscale);
                self.accum(grads, *logits, gx.into_dyn());
            }
            Op::InstanceNorm { x, .. } => {
                let Aux::InstanceNorm { inv_std } = &node.aux else { unreachable!() };
                let y = node.value.view().into_dimensionality::<Ix4>().unwrap();
                let gov = go.view().into_dimensionality::<Ix4>().unwrap();
                let gx = ops::instance_norm_backward(&y, &gov, inv_std);
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::GradReverse(x, scale) => {
                let s = *scale;
                self.accum(grads, *x, go.mapv(|v| -(v * s)));
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.raw_dim();
                let gx = go.clone().into_shape_with_order(shape).unwrap();
                self.accum(grads, *x, gx);
            }
        }
    }
}
