//! Minimal reverse-mode automatic differentiation over `f64` nd-arrays.
//!
//! Every model component builds its forward pass on a [`Tape`]; `backward`
//! walks the recorded graph once and returns gradients for any recorded
//! variable. Parameters live in a [`ParamStore`](crate::params::ParamStore)
//! and are bound to a tape as leaf nodes, so the same store can drive many
//! tapes (one per video during training, one per frame during inference).
//!
//! The op set is deliberately small: exactly what the anticipation model
//! needs (affine maps, gated recurrences, attention, CBAM-style pooling and
//! gating, a small same-padding convolution, and scalar reductions for the
//! losses). All values are `f64`; gradient-check tests compare analytic
//! gradients against central finite differences in double precision.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, Ix3, Ix4, IxDyn};

use crate::params::{GradBuffer, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddN(Vec<usize>),
    Scale(usize, f64),
    AddConst(usize),
    MatVec { w: usize, x: usize },
    TMatVec { a: usize, x: usize },
    StackRows(Vec<usize>),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Ln(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SpatialMean(usize),
    SpatialMax { a: usize, argmax: Vec<usize> },
    ChannelMean(usize),
    ChannelMax { a: usize, argmax: Vec<usize> },
    MulChannelGate { x: usize, gate: usize },
    MulSpatialGate { x: usize, gate: usize },
    Conv2dSame { x: usize, w: usize, b: usize },
    Stack2Maps(usize, usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    Gather { a: usize, indices: Vec<usize> },
    ReduceMax { a: usize, argmax: usize },
    ReduceMin { a: usize, argmin: usize },
}

struct Node {
    value: Arc<ArrayD<f64>>,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` influenced the root.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

/// Record of a forward computation; append-only, topologically ordered.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node (0-d or length-1).
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar_value on node with {} elements", a.len());
        *a.first().unwrap()
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> Var {
        self.constant(Array1::from_vec(v.to_vec()).into_dyn())
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Bind a stored parameter as a leaf of this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf { param: Some(id) },
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise sum of any number of same-shape nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n of empty list");
        let mut acc = self.value(parts[0]).clone();
        for p in &parts[1..] {
            let v = self.value(*p);
            assert_eq!(acc.shape(), v.shape(), "add_n shape mismatch");
            acc += v;
        }
        self.push(acc, Op::AddN(parts.iter().map(|p| p.0).collect()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddConst(a.0))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_const(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a: a.0, lo, hi })
    }

    // ---- linear algebra ----

    /// `w @ x` for `w: (m, n)`, `x: (n,)`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let wv = self.view2(w);
        let xv = self.view1(x);
        assert_eq!(wv.ncols(), xv.len(), "matvec dimension mismatch");
        let y = wv.dot(&xv);
        self.push(y.into_dyn(), Op::MatVec { w: w.0, x: x.0 })
    }

    /// `aᵀ @ x` for `a: (n, m)`, `x: (n,)`.
    pub fn tmatvec(&mut self, a: Var, x: Var) -> Var {
        let av = self.view2(a);
        let xv = self.view1(x);
        assert_eq!(av.nrows(), xv.len(), "tmatvec dimension mismatch");
        let y = av.t().dot(&xv);
        self.push(y.into_dyn(), Op::TMatVec { a: a.0, x: x.0 })
    }

    /// Stack equal-length vectors into a `(rows, d)` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of empty list");
        let d = self.value(rows[0]).len();
        let mut out = Array2::<f64>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            let rv = self.view1(*r);
            assert_eq!(rv.len(), d, "stack_rows length mismatch");
            out.row_mut(i).assign(&rv);
        }
        self.push(out.into_dyn(), Op::StackRows(rows.iter().map(|r| r.0).collect()))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.view1(a);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = x.mapv(|v| (v - max).exp());
        let sum: f64 = exps.sum();
        self.push((exps / sum).into_dyn(), Op::Softmax(a.0))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(!v.is_empty(), "mean of empty array");
        let m = v.sum() / v.len() as f64;
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(a.0))
    }

    /// Average over the spatial dims of a `(C, H, W)` map, giving `(C,)`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let x = self.view3(a);
        let (c, h, w) = x.dim();
        let mut out = Array1::<f64>::zeros(c);
        for ci in 0..c {
            out[ci] = x.index_axis(ndarray::Axis(0), ci).sum() / (h * w) as f64;
        }
        self.push(out.into_dyn(), Op::SpatialMean(a.0))
    }

    /// Max over the spatial dims of a `(C, H, W)` map, giving `(C,)`.
    pub fn spatial_max(&mut self, a: Var) -> Var {
        let x = self.view3(a);
        let (c, h, w) = x.dim();
        let mut out = Array1::<f64>::zeros(c);
        let mut argmax = vec![0usize; c];
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[(ci, hi, wi)];
                    if v > best {
                        best = v;
                        argmax[ci] = hi * w + wi;
                    }
                }
            }
            out[ci] = best;
        }
        self.push(out.into_dyn(), Op::SpatialMax { a: a.0, argmax })
    }

    /// Mean over channels of a `(C, H, W)` map, giving `(H, W)`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let x = self.view3(a);
        let (c, h, w) = x.dim();
        let mut out = Array2::<f64>::zeros((h, w));
        for ci in 0..c {
            out += &x.index_axis(ndarray::Axis(0), ci);
        }
        out /= c as f64;
        self.push(out.into_dyn(), Op::ChannelMean(a.0))
    }

    /// Max over channels of a `(C, H, W)` map, giving `(H, W)`.
    pub fn channel_max(&mut self, a: Var) -> Var {
        let x = self.view3(a);
        let (c, h, w) = x.dim();
        let mut out = Array2::<f64>::from_elem((h, w), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; h * w];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[(ci, hi, wi)];
                    if v > out[(hi, wi)] {
                        out[(hi, wi)] = v;
                        argmax[hi * w + wi] = ci;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::ChannelMax { a: a.0, argmax })
    }

    /// Multiply each channel of `x: (C, H, W)` by `gate: (C,)`.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.view3(x);
        let gv = self.view1(gate);
        let (c, h, w) = xv.dim();
        assert_eq!(gv.len(), c, "channel gate length mismatch");
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let g = gv[ci];
            out.index_axis_mut(ndarray::Axis(0), ci)
                .assign(&xv.index_axis(ndarray::Axis(0), ci).mapv(|v| v * g));
        }
        self.push(out.into_dyn(), Op::MulChannelGate { x: x.0, gate: gate.0 })
    }

    /// Multiply each location of `x: (C, H, W)` by `gate: (H, W)`.
    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.view3(x);
        let gv = self.value(gate).view().into_dimensionality::<Ix2>().unwrap();
        let (c, h, w) = xv.dim();
        assert_eq!(gv.dim(), (h, w), "spatial gate shape mismatch");
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[(ci, hi, wi)] = xv[(ci, hi, wi)] * gv[(hi, wi)];
                }
            }
        }
        self.push(out.into_dyn(), Op::MulSpatialGate { x: x.0, gate: gate.0 })
    }

    /// Same-padding 2-D convolution: `x: (Cin, H, W)`, `w: (Cout, Cin, K, K)`
    /// with odd `K`, `b: (Cout,)` -> `(Cout, H, W)`. Zero padding.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.view3(x);
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.view1(b);
        let (cin, h, wd) = xv.dim();
        let (cout, wcin, kh, kw) = wv.dim();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(bv.len(), cout, "conv2d bias mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d_same needs odd kernel");
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = Array3::<f64>::zeros((cout, h, wd));
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = oy as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox as isize + kx as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xv[(ci, iy as usize, ix as usize)] * wv[(co, ci, ky, kx)];
                            }
                        }
                    }
                    out[(co, oy, ox)] = acc;
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv2dSame { x: x.0, w: w.0, b: b.0 })
    }

    /// Stack two `(H, W)` maps into a `(2, H, W)` volume.
    pub fn stack2_maps(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.dim(), bv.dim(), "stack2 shape mismatch");
        let (h, w) = av.dim();
        let mut out = Array3::<f64>::zeros((2, h, w));
        out.index_axis_mut(ndarray::Axis(0), 0).assign(&av);
        out.index_axis_mut(ndarray::Axis(0), 1).assign(&bv);
        self.push(out.into_dyn(), Op::Stack2Maps(a.0, b.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        let n: usize = shape.iter().product();
        assert_eq!(v.len(), n, "reshape element count mismatch");
        let flat: Vec<f64> = v.iter().cloned().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        self.push(out, Op::Reshape(a.0))
    }

    /// Concatenate 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of empty list");
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert!(v.ndim() <= 1, "concat expects 1-d parts");
            data.extend(v.iter().cloned());
        }
        self.push(
            Array1::from_vec(data).into_dyn(),
            Op::Concat(parts.iter().map(|p| p.0).collect()),
        )
    }

    /// 1-D slice `a[start..start+len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.view1(a);
        assert!(start + len <= v.len(), "slice out of range");
        let out: Array1<f64> = v.slice(ndarray::s![start..start + len]).to_owned();
        self.push(out.into_dyn(), Op::Slice { a: a.0, start })
    }

    /// Select `indices` from a 1-D vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let v = self.view1(a);
        let out: Array1<f64> = indices.iter().map(|&i| v[i]).collect();
        self.push(
            out.into_dyn(),
            Op::Gather { a: a.0, indices: indices.to_vec() },
        )
    }

    /// Max element of a non-empty 1-D vector (0-d output).
    pub fn reduce_max(&mut self, a: Var) -> Var {
        let v = self.view1(a);
        assert!(!v.is_empty(), "reduce_max of empty vector");
        let mut arg = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[arg] {
                arg = i;
            }
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), v[arg]),
            Op::ReduceMax { a: a.0, argmax: arg },
        )
    }

    /// Min element of a non-empty 1-D vector (0-d output).
    pub fn reduce_min(&mut self, a: Var) -> Var {
        let v = self.view1(a);
        assert!(!v.is_empty(), "reduce_min of empty vector");
        let mut arg = 0;
        for (i, &x) in v.iter().enumerate() {
            if x < v[arg] {
                arg = i;
            }
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), v[arg]),
            Op::ReduceMin { a: a.0, argmin: arg },
        )
    }

    /// Affine map `w @ x + b`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Var {
        let wx = self.matvec(w, x);
        self.add(wx, b)
    }

    // ---- backward ----

    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_scaled(root, 1.0)
    }

    /// Backward pass seeding the root gradient with `seed` (root must be a
    /// single-element node).
    pub fn backward_scaled(&self, root: Var, seed: f64) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), seed));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Add every parameter-leaf gradient into `buf`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, buf: &mut GradBuffer) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &grads.grads[idx] {
                    buf.accumulate(id, g);
                }
            }
        }
    }

    fn propagate(&self, idx: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let add_to = |grads: &mut Vec<Option<ArrayD<f64>>>, target: usize, delta: ArrayD<f64>| {
            match &mut grads[target] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = &*self.nodes[*a].value;
                let bv = &*self.nodes[*b].value;
                add_to(grads, *a, g * bv);
                add_to(grads, *b, g * av);
            }
            Op::AddN(parts) => {
                for p in parts {
                    add_to(grads, *p, g.clone());
                }
            }
            Op::Scale(a, c) => add_to(grads, *a, g.mapv(|v| v * c)),
            Op::AddConst(a) => add_to(grads, *a, g.clone()),
            Op::MatVec { w, x } => {
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let (m, n) = wv.dim();
                let mut dw = Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    let gi = gv[i];
                    if gi != 0.0 {
                        for j in 0..n {
                            dw[(i, j)] = gi * xv[j];
                        }
                    }
                }
                let dx = wv.t().dot(&gv);
                add_to(grads, *w, dw.into_dyn());
                add_to(grads, *x, dx.into_dyn());
            }
            Op::TMatVec { a, x } => {
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let (n, m) = av.dim();
                let mut da = Array2::<f64>::zeros((n, m));
                for i in 0..n {
                    let xi = xv[i];
                    if xi != 0.0 {
                        for j in 0..m {
                            da[(i, j)] = xi * gv[j];
                        }
                    }
                }
                let dx = av.dot(&gv);
                add_to(grads, *a, da.into_dyn());
                add_to(grads, *x, dx.into_dyn());
            }
            Op::StackRows(rows) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                for (i, r) in rows.iter().enumerate() {
                    add_to(grads, *r, gv.row(i).to_owned().into_dyn());
                }
            }
            Op::Sigmoid(a) => {
                let y = &*self.nodes[idx].value;
                add_to(grads, *a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &*self.nodes[idx].value;
                add_to(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Relu(a) => {
                let x = &*self.nodes[*a].value;
                add_to(grads, *a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Ln(a) => {
                let x = &*self.nodes[*a].value;
                add_to(grads, *a, g / x);
            }
            Op::Clamp { a, lo, hi } => {
                let x = &*self.nodes[*a].value;
                let mask = x.mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                add_to(grads, *a, g * &mask);
            }
            Op::Softmax(a) => {
                let y = self.nodes[idx].value.view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let dot: f64 = y.iter().zip(gv.iter()).map(|(yi, gi)| yi * gi).sum();
                let dx: Array1<f64> = y
                    .iter()
                    .zip(gv.iter())
                    .map(|(yi, gi)| yi * (gi - dot))
                    .collect();
                add_to(grads, *a, dx.into_dyn());
            }
            Op::Sum(a) => {
                let s = *g.first().unwrap();
                let shape = self.nodes[*a].value.raw_dim();
                add_to(grads, *a, ArrayD::from_elem(shape, s));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let s = *g.first().unwrap() / n;
                let shape = self.nodes[*a].value.raw_dim();
                add_to(grads, *a, ArrayD::from_elem(shape, s));
            }
            Op::SpatialMean(a) => {
                let x = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(ndarray::Axis(0), ci)
                        .fill(gv[ci] / (h * w) as f64);
                }
                add_to(grads, *a, dx.into_dyn());
            }
            Op::SpatialMax { a, argmax } => {
                let x = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    let (hi, wi) = (argmax[ci] / w, argmax[ci] % w);
                    dx[(ci, hi, wi)] = gv[ci];
                }
                let _ = h;
                add_to(grads, *a, dx.into_dyn());
            }
            Op::ChannelMean(a) => {
                let x = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(ndarray::Axis(0), ci)
                        .assign(&gv.mapv(|v| v / c as f64));
                }
                add_to(grads, *a, dx.into_dyn());
            }
            Op::ChannelMax { a, argmax } => {
                let x = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for hi in 0..h {
                    for wi in 0..w {
                        dx[(argmax[hi * w + wi], hi, wi)] = gv[(hi, wi)];
                    }
                }
                add_to(grads, *a, dx.into_dyn());
            }
            Op::MulChannelGate { x, gate } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let gatev = self.nodes[*gate].value.view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = xv.dim();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                let mut dgate = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let gc = gatev[ci];
                    let mut acc = 0.0;
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[(ci, hi, wi)] = gv[(ci, hi, wi)] * gc;
                            acc += gv[(ci, hi, wi)] * xv[(ci, hi, wi)];
                        }
                    }
                    dgate[ci] = acc;
                }
                add_to(grads, *x, dx.into_dyn());
                add_to(grads, *gate, dgate.into_dyn());
            }
            Op::MulSpatialGate { x, gate } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let gatev = self.nodes[*gate].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = xv.dim();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                let mut dgate = Array2::<f64>::zeros((h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[(ci, hi, wi)] = gv[(ci, hi, wi)] * gatev[(hi, wi)];
                            dgate[(hi, wi)] += gv[(ci, hi, wi)] * xv[(ci, hi, wi)];
                        }
                    }
                }
                add_to(grads, *x, dx.into_dyn());
                add_to(grads, *gate, dgate.into_dyn());
            }
            Op::Conv2dSame { x, w, b } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (cin, h, wd) = xv.dim();
                let (cout, _, kh, kw) = wv.dim();
                let (ph, pw) = (kh / 2, kw / 2);
                let mut dx = Array3::<f64>::zeros((cin, h, wd));
                let mut dw = ndarray::Array4::<f64>::zeros((cout, cin, kh, kw));
                let mut db = Array1::<f64>::zeros(cout);
                for co in 0..cout {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let go = gv[(co, oy, ox)];
                            if go == 0.0 {
                                continue;
                            }
                            db[co] += go;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = oy as isize + ky as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = ox as isize + kx as isize - pw as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        dx[(ci, iy as usize, ix as usize)] +=
                                            go * wv[(co, ci, ky, kx)];
                                        dw[(co, ci, ky, kx)] +=
                                            go * xv[(ci, iy as usize, ix as usize)];
                                    }
                                }
                            }
                        }
                    }
                }
                add_to(grads, *x, dx.into_dyn());
                add_to(grads, *w, dw.into_dyn());
                add_to(grads, *b, db.into_dyn());
            }
            Op::Stack2Maps(a, b) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                add_to(grads, *a, gv.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn());
                add_to(grads, *b, gv.index_axis(ndarray::Axis(0), 1).to_owned().into_dyn());
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.raw_dim();
                let flat: Vec<f64> = g.iter().cloned().collect();
                add_to(grads, *a, ArrayD::from_shape_vec(shape, flat).unwrap());
            }
            Op::Concat(parts) => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[*p].value.len();
                    let piece: Array1<f64> =
                        gv.slice(ndarray::s![offset..offset + len]).to_owned();
                    let shape = self.nodes[*p].value.raw_dim();
                    add_to(
                        grads,
                        *p,
                        ArrayD::from_shape_vec(shape, piece.to_vec()).unwrap(),
                    );
                    offset += len;
                }
            }
            Op::Slice { a, start } => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array1::<f64>::zeros(self.nodes[*a].value.len());
                for (i, &gi) in gv.iter().enumerate() {
                    dx[start + i] = gi;
                }
                add_to(grads, *a, dx.into_dyn());
            }
            Op::Gather { a, indices } => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array1::<f64>::zeros(self.nodes[*a].value.len());
                for (i, &src) in indices.iter().enumerate() {
                    dx[src] += gv[i];
                }
                add_to(grads, *a, dx.into_dyn());
            }
            Op::ReduceMax { a, argmax } => {
                let mut dx = Array1::<f64>::zeros(self.nodes[*a].value.len());
                dx[*argmax] = *g.first().unwrap();
                add_to(grads, *a, dx.into_dyn());
            }
            Op::ReduceMin { a, argmin } => {
                let mut dx = Array1::<f64>::zeros(self.nodes[*a].value.len());
                dx[*argmin] = *g.first().unwrap();
                add_to(grads, *a, dx.into_dyn());
            }
        }
    }

    // ---- view helpers ----

    fn view1(&self, v: Var) -> ndarray::ArrayView1<'_, f64> {
        self.value(v).view().into_dimensionality::<Ix1>().unwrap()
    }

    fn view2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.value(v).view().into_dimensionality::<Ix2>().unwrap()
    }

    fn view3(&self, v: Var) -> ndarray::ArrayView3<'_, f64> {
        self.value(v).view().into_dimensionality::<Ix3>().unwrap()
    }

    fn binary_same_shape(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> ArrayD<f64> {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let mut out = av.clone();
        out.zip_mut_with(bv, |x, &y| *x = f(*x, y));
        out
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::array;

    #[test]
    fn matvec_forward_and_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let x = store.add("x", array![5.0, 6.0].into_dyn());

        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let xv = tape.param(&store, x);
        let y = tape.matvec(wv, xv);
        assert_eq!(tape.value(y).as_slice().unwrap(), &[17.0, 39.0]);

        let s = tape.sum(y);
        let grads = tape.backward(s);
        let dw = grads.wrt(wv).unwrap();
        let dx = grads.wrt(xv).unwrap();
        assert_eq!(dw.as_slice().unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        // dx = Wᵀ·1 = [1+3, 2+4]
        assert_eq!(dx.as_slice().unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_grad_is_orthogonal_to_ones() {
        let mut tape = Tape::new();
        let x = tape.constant_vec(&[0.3, -1.2, 2.0, 0.0]);
        let y = tape.softmax(x);
        let sum: f64 = tape.value(y).sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // d(sum softmax)/dx = 0 because the output always sums to 1.
        let s = tape.sum(y);
        let grads = tape.backward(s);
        for &g in grads.wrt(x).unwrap().iter() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn branch_reuse_accumulates() {
        // f(x) = sum(x*x) + sum(x) has gradient 2x + 1.
        let mut tape = Tape::new();
        let x = tape.constant_vec(&[1.0, -2.0, 0.5]);
        let sq = tape.mul(x, x);
        let a = tape.sum(sq);
        let b = tape.sum(x);
        let f = tape.add(a, b);
        let grads = tape.backward(f);
        let dx = grads.wrt(x).unwrap();
        assert_eq!(dx.as_slice().unwrap(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn concat_slice_roundtrip_grads() {
        let mut tape = Tape::new();
        let a = tape.constant_vec(&[1.0, 2.0]);
        let b = tape.constant_vec(&[3.0]);
        let c = tape.concat(&[a, b]);
        let s = tape.slice(c, 1, 2);
        let total = tape.sum(s);
        assert_eq!(tape.scalar_value(total), 5.0);
        let grads = tape.backward(total);
        assert_eq!(grads.wrt(a).unwrap().as_slice().unwrap(), &[0.0, 1.0]);
        assert_eq!(grads.wrt(b).unwrap().as_slice().unwrap(), &[1.0]);
    }

    #[test]
    fn reduce_max_min_pick_unique_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant_vec(&[0.2, 0.9, -0.4]);
        let hi = tape.reduce_max(x);
        let lo = tape.reduce_min(x);
        assert_eq!(tape.scalar_value(hi), 0.9);
        assert_eq!(tape.scalar_value(lo), -0.4);
        let diff = tape.sub(hi, lo);
        let grads = tape.backward(diff);
        assert_eq!(grads.wrt(x).unwrap().as_slice().unwrap(), &[0.0, 1.0, -1.0]);
    }
}
