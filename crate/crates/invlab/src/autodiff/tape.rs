use super::Array;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, #[allow(dead_code)] f64),
    Relu(Var),
    Elu(Var),
    Softplus(Var),
    Matmul(Var, Var),
    CausalConv {
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SelectTime(Var, usize),
    SelectCol(Var, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of operations; node parents always precede the node,
/// so a single reverse sweep propagates adjoints.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Broadcast pattern of a binary elementwise op.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// `[B,D] op [D]` (rhs repeated per row) and its mirror.
    RhsRow,
    LhsRow,
    /// `[B,T] op [B,1]` (rhs repeated per column) and its mirror.
    RhsCol,
    LhsCol,
}

fn resolve_bcast(a: &[usize], b: &[usize]) -> (Vec<usize>, Bcast) {
    if a == b {
        return (a.to_vec(), Bcast::Same);
    }
    let (alen, blen): (usize, usize) = (a.iter().product(), b.iter().product());
    if blen == 1 {
        return (a.to_vec(), Bcast::RhsScalar);
    }
    if alen == 1 {
        return (b.to_vec(), Bcast::LhsScalar);
    }
    if a.len() == 2 && b.len() == 1 && b[0] == a[1] {
        return (a.to_vec(), Bcast::RhsRow);
    }
    if b.len() == 2 && a.len() == 1 && a[0] == b[1] {
        return (b.to_vec(), Bcast::LhsRow);
    }
    if a.len() == 2 && b.len() == 2 && a[0] == b[0] && b[1] == 1 {
        return (a.to_vec(), Bcast::RhsCol);
    }
    if a.len() == 2 && b.len() == 2 && a[0] == b[0] && a[1] == 1 {
        return (b.to_vec(), Bcast::LhsCol);
    }
    panic!("shape error: cannot broadcast {:?} with {:?}", a, b);
}

/// Map an output linear index to (lhs index, rhs index) under a broadcast.
#[inline]
fn bcast_idx(kind: Bcast, i: usize, last: usize) -> (usize, usize) {
    match kind {
        Bcast::Same => (i, i),
        Bcast::LhsScalar => (0, i),
        Bcast::RhsScalar => (i, 0),
        Bcast::RhsRow => (i, i % last),
        Bcast::LhsRow => (i % last, i),
        Bcast::RhsCol => (i, i / last),
        Bcast::LhsCol => (i / last, i),
    }
}

/// Trailing extent used by the row/col index maps.
#[inline]
fn bcast_last(out_dims: &[usize]) -> usize {
    *out_dims.last().unwrap_or(&1)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`; zeros if `v` is
    /// disconnected from the target.
    pub fn grad(&self, v: Var) -> Array {
        match self.grads.get(v.0) {
            Some(Some(g)) => Array::from_vec(g.clone(), self.nodes[v.0].value.dims()),
            _ => Array::zeros(self.nodes[v.0].value.dims()),
        }
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Array::scalar(v))
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (out_dims, kind) =
            resolve_bcast(self.nodes[a.0].value.dims(), self.nodes[b.0].value.dims());
        let last = bcast_last(&out_dims);
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let n: usize = out_dims.iter().product();
        let mut out = Vec::with_capacity(n);
        if kind == Bcast::Same {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..n {
                let (ia, ib) = bcast_idx(kind, i, last);
                out.push(f(av[ia], bv[ib]));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Array::from_vec(out, &out_dims), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise max; gradient follows the selected operand, ties go to the
    /// first operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    /// Elementwise min; ties go to the first operand.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = Array::from_vec(
            self.nodes[a.0].value.values().iter().map(|&x| x * k).collect(),
            self.nodes[a.0].value.dims(),
        );
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, k), needs)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = Array::from_vec(
            self.nodes[a.0].value.values().iter().map(|&x| x + k).collect(),
            self.nodes[a.0].value.dims(),
        );
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a, k), needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = Array::from_vec(
            self.nodes[a.0].value.values().iter().map(|&x| f(x)).collect(),
            self.nodes[a.0].value.dims(),
        );
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    /// relu(x) = max(0, x); derivative at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// elu(x) = x for x >= 0, e^x - 1 otherwise.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x >= 0.0 { x } else { x.exp() - 1.0 },
            Op::Elu(a),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ad, bd) = (self.nodes[a.0].value.dims(), self.nodes[b.0].value.dims());
        assert!(
            ad.len() == 2 && bd.len() == 2 && ad[1] == bd[0],
            "shape error: matmul {:?} x {:?}",
            ad,
            bd
        );
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Array::from_vec(out, &[m, n]), Op::Matmul(a, b), needs)
    }

    /// Causal dilated 1-d convolution with left zero-padding.
    ///
    /// `input [B,Cin,T]`, `kernel [Cout,Cin,K]`, `bias [Cout]`; the output at
    /// time `t` reads inputs at `t, t-d, ..., t-(K-1)d` only.
    pub fn causal_conv1d(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Var {
        assert!(dilation >= 1, "dilation must be >= 1");
        let id = self.nodes[input.0].value.dims().to_vec();
        let kd = self.nodes[kernel.0].value.dims().to_vec();
        let bd = self.nodes[bias.0].value.dims().to_vec();
        assert!(
            id.len() == 3 && kd.len() == 3 && id[1] == kd[1],
            "shape error: conv input {:?} kernel {:?}",
            id,
            kd
        );
        assert!(kd[2] >= 1, "kernel width must be >= 1");
        assert_eq!(bd, vec![kd[0]], "shape error: conv bias {:?}", bd);
        let (batch, cin, t_len) = (id[0], id[1], id[2]);
        let (cout, klen) = (kd[0], kd[2]);
        let iv = self.nodes[input.0].value.values();
        let kv = self.nodes[kernel.0].value.values();
        let bv = self.nodes[bias.0].value.values();
        let mut out = vec![0.0; batch * cout * t_len];
        for b in 0..batch {
            for co in 0..cout {
                let orow = &mut out[(b * cout + co) * t_len..(b * cout + co + 1) * t_len];
                orow.fill(bv[co]);
                for ci in 0..cin {
                    let irow = &iv[(b * cin + ci) * t_len..(b * cin + ci + 1) * t_len];
                    for k in 0..klen {
                        let w = kv[(co * cin + ci) * klen + k];
                        if w == 0.0 {
                            continue;
                        }
                        let shift = k * dilation;
                        for t in shift..t_len {
                            orow[t] += w * irow[t - shift];
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        self.push(
            Array::from_vec(out, &[batch, cout, t_len]),
            Op::CausalConv {
                input,
                kernel,
                bias,
                dilation,
            },
            needs,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.values().iter().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        assert!(n > 0, "usage error: mean of empty array");
        let s: f64 = self.nodes[a.0].value.values().iter().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(s / n as f64), Op::MeanAll(a), needs)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let (value, _) = reduce_axis(&self.nodes[a.0].value, axis, false);
        let needs = self.needs(a);
        self.push(value, Op::SumAxis(a, axis), needs)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let (value, mid) = reduce_axis(&self.nodes[a.0].value, axis, true);
        assert!(mid > 0, "usage error: mean over empty axis");
        let needs = self.needs(a);
        self.push(value, Op::MeanAxis(a, axis), needs)
    }

    /// `[B,C,T] -> [B,C]` at a fixed time index.
    pub fn select_time(&mut self, a: Var, t: usize) -> Var {
        let d = self.nodes[a.0].value.dims().to_vec();
        assert!(d.len() == 3 && t < d[2], "shape error: select_time {:?} t={}", d, t);
        let (batch, ch, t_len) = (d[0], d[1], d[2]);
        let av = self.nodes[a.0].value.values();
        let mut out = Vec::with_capacity(batch * ch);
        for b in 0..batch {
            for c in 0..ch {
                out.push(av[(b * ch + c) * t_len + t]);
            }
        }
        let needs = self.needs(a);
        self.push(
            Array::from_vec(out, &[batch, ch]),
            Op::SelectTime(a, t),
            needs,
        )
    }

    /// `[B,D] -> [B]` at a fixed column.
    pub fn select_col(&mut self, a: Var, col: usize) -> Var {
        let d = self.nodes[a.0].value.dims().to_vec();
        assert!(d.len() == 2 && col < d[1], "shape error: select_col {:?} col={}", d, col);
        let (batch, width) = (d[0], d[1]);
        let av = self.nodes[a.0].value.values();
        let out: Vec<f64> = (0..batch).map(|b| av[b * width + col]).collect();
        let needs = self.needs(a);
        self.push(Array::from_vec(out, &[batch]), Op::SelectCol(a, col), needs)
    }

    /// Concatenate `[B,Di]` (or `[B]`, treated as `[B,1]`) blocks into `[B,sum Di]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "usage error: concat of nothing");
        let batch = self.nodes[parts[0].0].value.dims()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let d = self.nodes[p.0].value.dims();
                assert_eq!(d[0], batch, "shape error: concat batch mismatch");
                if d.len() == 1 {
                    1
                } else {
                    assert_eq!(d.len(), 2, "shape error: concat expects rank <= 2");
                    d[1]
                }
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; batch * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = self.nodes[p.0].value.values();
            for b in 0..batch {
                out[b * total + offset..b * total + offset + w]
                    .copy_from_slice(&pv[b * w..(b + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            Array::from_vec(out, &[batch, total]),
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    /// Reverse sweep from a scalar loss node. Populates adjoints for every
    /// node that (transitively) requires gradients; visits each node once.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "usage error: backward target must be scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        var: Var,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[var.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Max(a, b) | Op::Min(a, b) => {
                self.propagate_binary(i, g, grads, *a, *b);
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv * k;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let xv = self.nodes[a.0].value.values();
                    let ga = Self::ensure(grads, *a, g.len());
                    for ((gi, &gv), &x) in ga.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *gi += gv;
                        }
                    }
                }
            }
            Op::Elu(a) => {
                if self.needs(*a) {
                    let xv = self.nodes[a.0].value.values();
                    let yv = node.value.values();
                    let ga = Self::ensure(grads, *a, g.len());
                    for i in 0..g.len() {
                        let d = if xv[i] >= 0.0 { 1.0 } else { yv[i] + 1.0 };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Softplus(a) => {
                if self.needs(*a) {
                    let xv = self.nodes[a.0].value.values();
                    let ga = Self::ensure(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(xv[i]);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let ad = self.nodes[a.0].value.dims();
                let bd = self.nodes[b.0].value.dims();
                let (m, k, n) = (ad[0], ad[1], bd[1]);
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.values().to_vec();
                    let ga = Self::ensure(grads, *a, m * k);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + kk] += acc;
                        }
                    }
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.values().to_vec();
                    let gb = Self::ensure(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                brow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::CausalConv {
                input,
                kernel,
                bias,
                dilation,
            } => {
                let id = self.nodes[input.0].value.dims().to_vec();
                let kd = self.nodes[kernel.0].value.dims().to_vec();
                let (batch, cin, t_len) = (id[0], id[1], id[2]);
                let (cout, klen) = (kd[0], kd[2]);
                if self.needs(*bias) {
                    let gb = Self::ensure(grads, *bias, cout);
                    for b in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(b * cout + co) * t_len..(b * cout + co + 1) * t_len];
                            gb[co] += grow.iter().sum::<f64>();
                        }
                    }
                }
                if self.needs(*kernel) {
                    let iv = self.nodes[input.0].value.values().to_vec();
                    let gk = Self::ensure(grads, *kernel, cout * cin * klen);
                    for b in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(b * cout + co) * t_len..(b * cout + co + 1) * t_len];
                            for ci in 0..cin {
                                let irow = &iv[(b * cin + ci) * t_len..(b * cin + ci + 1) * t_len];
                                for k in 0..klen {
                                    let shift = k * *dilation;
                                    let mut acc = 0.0;
                                    for t in shift..t_len {
                                        acc += grow[t] * irow[t - shift];
                                    }
                                    gk[(co * cin + ci) * klen + k] += acc;
                                }
                            }
                        }
                    }
                }
                if self.needs(*input) {
                    let kv = self.nodes[kernel.0].value.values().to_vec();
                    let gi = Self::ensure(grads, *input, batch * cin * t_len);
                    for b in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(b * cout + co) * t_len..(b * cout + co + 1) * t_len];
                            for ci in 0..cin {
                                let girow =
                                    &mut gi[(b * cin + ci) * t_len..(b * cin + ci + 1) * t_len];
                                for k in 0..klen {
                                    let w = kv[(co * cin + ci) * klen + k];
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let shift = k * *dilation;
                                    for t in shift..t_len {
                                        girow[t - shift] += w * grow[t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.len();
                    let ga = Self::ensure(grads, *a, n);
                    for gi in ga.iter_mut() {
                        *gi += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.len();
                    let ga = Self::ensure(grads, *a, n);
                    let w = g[0] / n as f64;
                    for gi in ga.iter_mut() {
                        *gi += w;
                    }
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                if self.needs(*a) {
                    let dims = self.nodes[a.0].value.dims().to_vec();
                    let outer: usize = dims[..*axis].iter().product();
                    let mid = dims[*axis];
                    let inner: usize = dims[*axis + 1..].iter().product();
                    let scale = if matches!(node.op, Op::MeanAxis(..)) {
                        1.0 / mid as f64
                    } else {
                        1.0
                    };
                    let n = self.nodes[a.0].value.len();
                    let ga = Self::ensure(grads, *a, n);
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                ga[(o * mid + m) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::SelectTime(a, t) => {
                if self.needs(*a) {
                    let d = self.nodes[a.0].value.dims().to_vec();
                    let (batch, ch, t_len) = (d[0], d[1], d[2]);
                    let ga = Self::ensure(grads, *a, batch * ch * t_len);
                    for b in 0..batch {
                        for c in 0..ch {
                            ga[(b * ch + c) * t_len + t] += g[b * ch + c];
                        }
                    }
                }
            }
            Op::SelectCol(a, col) => {
                if self.needs(*a) {
                    let d = self.nodes[a.0].value.dims().to_vec();
                    let (batch, width) = (d[0], d[1]);
                    let ga = Self::ensure(grads, *a, batch * width);
                    for b in 0..batch {
                        ga[b * width + col] += g[b];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims()[1];
                let batch = node.value.dims()[0];
                let mut offset = 0;
                for p in parts {
                    let d = self.nodes[p.0].value.dims();
                    let w = if d.len() == 1 { 1 } else { d[1] };
                    if self.needs(*p) {
                        let gp = Self::ensure(grads, *p, batch * w);
                        for b in 0..batch {
                            for j in 0..w {
                                gp[b * w + j] += g[b * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
        }
    }

    fn propagate_binary(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
    ) {
        let node = &self.nodes[i];
        let (out_dims, kind) =
            resolve_bcast(self.nodes[a.0].value.dims(), self.nodes[b.0].value.dims());
        let last = bcast_last(&out_dims);
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let needs_a = self.needs(a);
        let needs_b = self.needs(b);
        let alen = av.len();
        let blen = bv.len();
        // Split borrows: accumulate locally, then add. Keeps the generic loop simple.
        let mut ga_acc = if needs_a { Some(vec![0.0; alen]) } else { None };
        let mut gb_acc = if needs_b { Some(vec![0.0; blen]) } else { None };
        for idx in 0..g.len() {
            let (ia, ib) = bcast_idx(kind, idx, last);
            let gv = g[idx];
            match node.op {
                Op::Add(..) => {
                    if let Some(ga) = ga_acc.as_mut() {
                        ga[ia] += gv;
                    }
                    if let Some(gb) = gb_acc.as_mut() {
                        gb[ib] += gv;
                    }
                }
                Op::Sub(..) => {
                    if let Some(ga) = ga_acc.as_mut() {
                        ga[ia] += gv;
                    }
                    if let Some(gb) = gb_acc.as_mut() {
                        gb[ib] -= gv;
                    }
                }
                Op::Mul(..) => {
                    if let Some(ga) = ga_acc.as_mut() {
                        ga[ia] += gv * bv[ib];
                    }
                    if let Some(gb) = gb_acc.as_mut() {
                        gb[ib] += gv * av[ia];
                    }
                }
                Op::Max(..) => {
                    if av[ia] >= bv[ib] {
                        if let Some(ga) = ga_acc.as_mut() {
                            ga[ia] += gv;
                        }
                    } else if let Some(gb) = gb_acc.as_mut() {
                        gb[ib] += gv;
                    }
                }
                Op::Min(..) => {
                    if av[ia] <= bv[ib] {
                        if let Some(ga) = ga_acc.as_mut() {
                            ga[ia] += gv;
                        }
                    } else if let Some(gb) = gb_acc.as_mut() {
                        gb[ib] += gv;
                    }
                }
                _ => unreachable!(),
            }
        }
        if let Some(acc) = ga_acc {
            let ga = Self::ensure(grads, a, alen);
            for (gi, v) in ga.iter_mut().zip(acc) {
                *gi += v;
            }
        }
        if let Some(acc) = gb_acc {
            let gb = Self::ensure(grads, b, blen);
            for (gi, v) in gb.iter_mut().zip(acc) {
                *gi += v;
            }
        }
    }
}

fn reduce_axis(a: &Array, axis: usize, mean: bool) -> (Array, usize) {
    let dims = a.dims();
    assert!(axis < dims.len(), "shape error: axis {} of {:?}", axis, dims);
    let outer: usize = dims[..axis].iter().product();
    let mid = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out_dims: Vec<usize> = dims.to_vec();
    out_dims.remove(axis);
    if out_dims.is_empty() {
        out_dims.push(1);
    }
    let av = a.values();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            for i in 0..inner {
                out[o * inner + i] += av[(o * mid + m) * inner + i];
            }
        }
    }
    if mean && mid > 0 {
        let w = 1.0 / mid as f64;
        for v in out.iter_mut() {
            *v *= w;
        }
    }
    (Array::from_vec(out, &out_dims), mid)
}

fn softplus(x: f64) -> f64 {
    // ln(1+e^x) without overflow
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
