//! Reverse-mode tape. Every op records its inputs and whatever it needs for
//! the backward pass; `backward` walks the tape once in reverse.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Parameter ids of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub steps: ParamId,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Up2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mae {
        a: Var,
        b: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    AbsSum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
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

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor4, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient is reported for it).
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter node; repeated calls for the same id return the same node,
    /// so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Same-padded (zero) cross-correlation with a square odd kernel.
    /// Weight shape is `[out, in, k, k]`, bias `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let [n, cin, h, wd] = xs;
        let [cout, wcin, kh, kw] = ws;
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d: kernel {kh}x{kw}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: bias has {} values for {cout} outputs",
                    self.value(b).len()
                )));
            }
        }
        let k = kh;
        let hw = h * wd;
        let ck = cin * k * k;
        let mut out = Tensor4::zeros([n, cout, h, wd]);
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ck * hw] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for s in 0..n {
                let xin = &xv[s * cin * hw..(s + 1) * cin * hw];
                let src: &[f64] = if k == 1 {
                    xin
                } else {
                    im2col(xin, cin, h, wd, k, &mut cols);
                    &cols
                };
                let dst = &mut od[s * cout * hw..(s + 1) * cout * hw];
                gemm(cout, ck, hw, wv, false, src, false, dst, 0.0);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (c, &bc) in bv.iter().enumerate() {
                        let start = (s * cout + c) * hw;
                        od[start..start + hw].iter_mut().for_each(|o| *o += bc);
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv { x, w, b, k }))
    }

    /// Per-channel batch normalization. Train mode uses batch statistics and
    /// updates the running estimates in `store`; infer mode uses the running
    /// estimates and fails if none were ever recorded.
    pub fn batch_norm(
        &mut self,
        store: &mut ParamStore,
        x: Var,
        bn: BnParams,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = self.param(store, bn.gamma);
        let beta = self.param(store, bn.beta);
        let [n, c, h, w] = self.value(x).shape();
        let hw = h * w;
        let m = n * hw;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm: {c} channels, gamma/beta sized {}/{}",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::ShapeMismatch(
                        "batch_norm: train mode needs at least 2 values per channel".into(),
                    ));
                }
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for s in 0..n {
                        let start = (s * c + ch) * hw;
                        sum += xv[start..start + hw].iter().sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut ss = 0.0;
                    for s in 0..n {
                        let start = (s * c + ch) * hw;
                        ss += xv[start..start + hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = ss / m as f64;
                    let is = 1.0 / (var + BN_EPS).sqrt();
                    for s in 0..n {
                        let start = (s * c + ch) * hw;
                        for i in start..start + hw {
                            xhat[i] = (xv[i] - mean) * is;
                        }
                    }
                    means[ch] = mean;
                    vars[ch] = ss / (m - 1) as f64;
                    inv_std[ch] = is;
                }
                let rm = store.value_mut(bn.running_mean).data_mut();
                for (r, mu) in rm.iter_mut().zip(&means) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * mu;
                }
                let rv = store.value_mut(bn.running_var).data_mut();
                for (r, v) in rv.iter_mut().zip(&vars) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
                store.value_mut(bn.steps).data_mut()[0] += 1.0;
            }
            Mode::Infer => {
                if store.value(bn.steps).item() < 1.0 {
                    return Err(Error::Untrained(format!(
                        "batch norm '{}' has no running statistics",
                        store.get(bn.gamma).name
                    )));
                }
                let rm = store.value(bn.running_mean).data();
                let rv = store.value(bn.running_var).data();
                for ch in 0..c {
                    let is = 1.0 / (rv[ch] + BN_EPS).sqrt();
                    inv_std[ch] = is;
                    for s in 0..n {
                        let start = (s * c + ch) * hw;
                        for i in start..start + hw {
                            xhat[i] = (xv[i] - rm[ch]) * is;
                        }
                    }
                }
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor4::zeros([n, c, h, w]);
        let od = out.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * hw;
                for i in start..start + hw {
                    od[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor4::from_vec(xv.shape(), data).expect("same shape");
        self.push(out, Op::LeakyRelu { x, slope })
    }

    /// 2x2 max pooling, stride 2. Ties go to the first element in row-major
    /// window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "max_pool2: odd spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let od = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    od[o] = xv[best];
                    argmax[o] = (best - base) as u32;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// 2x bilinear upsampling, half-pixel centers (`align_corners = false`),
    /// edge samples clamped. Each output row/column mixes two source
    /// rows/columns with weights 0.75 and 0.25.
    pub fn bilinear_up2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let ry = up2_taps(h);
        let rx = up2_taps(w);
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        let od = out.data_mut();
        let mut row = vec![0.0; w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1)) in ry.iter().enumerate() {
                for x in 0..w {
                    row[x] = 0.75 * src[y0 * w + x] + 0.25 * src[y1 * w + x];
                }
                for (ox, &(x0, x1)) in rx.iter().enumerate() {
                    dst[oy * ow + ox] = 0.75 * row[x0] + 0.25 * row[x1];
                }
            }
        }
        self.push(out, Op::Up2 { x })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).shape();
        let [nb, cb, hb, wb] = self.value(b).shape();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for s in 0..na {
            data.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let out = Tensor4::from_vec([na, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Mean absolute error; the subgradient of `|0|` is taken as 0.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mae")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum();
        let v = s / av.len() as f64;
        Ok(self.push(Tensor4::scalar(v), Op::Mae { a, b }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / av.len() as f64;
        Ok(self.push(Tensor4::scalar(v), Op::Mse { a, b }))
    }

    pub fn abs_sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor4::scalar(v), Op::AbsSum { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * k).collect();
        let out = Tensor4::from_vec(xv.shape(), data).expect("same shape");
        self.push(out, Op::Scale { x, k })
    }

    /// Back-propagates from the scalar `root` and adds parameter gradients
    /// into `store`. Consumes the tape.
    pub fn backward(mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward: root has shape {:?}, expected a scalar",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor4::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = std::mem::replace(
                &mut self.nodes[i],
                Node {
                    value: Tensor4::scalar(0.0),
                    op: Op::Leaf,
                },
            );
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor4| match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(id, &g),
                Op::Conv { x, w, b, k } => {
                    let (dx, dw, db) = conv_backward(val(x), val(w), b.is_some(), k, &g);
                    acc(x, dx);
                    acc(w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (dx, dg, db) = bn_backward(val(gamma), &xhat, &inv_std, train, &g);
                    acc(x, dx);
                    acc(gamma, dg);
                    acc(beta, db);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = val(x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                        .collect();
                    acc(x, Tensor4::from_vec(xv.shape(), data)?);
                }
                Op::MaxPool { x, argmax } => {
                    let [n, c, h, w] = val(x).shape();
                    let mut dx = Tensor4::zeros([n, c, h, w]);
                    let op = g.plane();
                    let dd = dx.data_mut();
                    for (o, (&gv, &am)) in g.data().iter().zip(&argmax).enumerate() {
                        dd[(o / op) * h * w + am as usize] += gv;
                    }
                    acc(x, dx);
                }
                Op::Up2 { x } => acc(x, up2_backward(val(x).shape(), &g)),
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = val(a).shape();
                    let cb = val(b).channels();
                    let hw = h * w;
                    let gd = g.data();
                    let mut da = Vec::with_capacity(n * ca * hw);
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        let base = s * (ca + cb) * hw;
                        da.extend_from_slice(&gd[base..base + ca * hw]);
                        db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    acc(a, Tensor4::from_vec([n, ca, h, w], da)?);
                    acc(b, Tensor4::from_vec([n, cb, h, w], db)?);
                }
                Op::Mae { a, b } => {
                    let (av, bv) = (val(a), val(b));
                    let k = g.item() / av.len() as f64;
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| k * sign0(x - y))
                        .collect();
                    let db = da.iter().map(|v| -v).collect();
                    let shape = av.shape();
                    acc(a, Tensor4::from_vec(shape, da)?);
                    acc(b, Tensor4::from_vec(shape, db)?);
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (val(a), val(b));
                    let k = 2.0 * g.item() / av.len() as f64;
                    let da: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| k * (x - y))
                        .collect();
                    let db = da.iter().map(|v| -v).collect();
                    let shape = av.shape();
                    acc(a, Tensor4::from_vec(shape, da)?);
                    acc(b, Tensor4::from_vec(shape, db)?);
                }
                Op::AbsSum { x } => {
                    let xv = val(x);
                    let k = g.item();
                    let d = xv.data().iter().map(|&v| k * sign0(v)).collect();
                    acc(x, Tensor4::from_vec(xv.shape(), d)?);
                }
                Op::Add { a, b } => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                Op::Scale { x, k } => {
                    let d = g.data().iter().map(|v| v * k).collect();
                    acc(x, Tensor4::from_vec(g.shape(), d)?);
                }
            }
        }
        Ok(())
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Source taps `(near, far)` for each of the `2n` output positions; the near
/// tap carries weight 0.75, the far tap 0.25.
fn up2_taps(n: usize) -> Vec<(usize, usize)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let far = if o % 2 == 0 {
                i.saturating_sub(1)
            } else {
                (i + 1).min(n - 1)
            };
            (i, far)
        })
        .collect()
}

fn up2_backward(shape: [usize; 4], g: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = shape;
    let ry = up2_taps(h);
    let rx = up2_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor4::zeros(shape);
    let dd = dx.data_mut();
    let gd = g.data();
    let mut row = vec![0.0; w];
    for p in 0..n * c {
        let src = &gd[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1)) in ry.iter().enumerate() {
            row.iter_mut().for_each(|r| *r = 0.0);
            for (ox, &(x0, x1)) in rx.iter().enumerate() {
                let v = src[oy * ow + ox];
                row[x0] += 0.75 * v;
                row[x1] += 0.25 * v;
            }
            for x in 0..w {
                dst[y0 * w + x] += 0.75 * row[x];
                dst[y1 * w + x] += 0.25 * row[x];
            }
        }
    }
    dx
}

/// `cols[(c*k + ky)*k + kx][y*w + x] = x[c][y + ky - r][x + kx - r]`, zero
/// outside the image.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let r = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - r as isize;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let (lo, hi) = valid_range(w, kx, r);
                    out[..lo].iter_mut().for_each(|v| *v = 0.0);
                    out[hi..].iter_mut().for_each(|v| *v = 0.0);
                    if lo < hi {
                        let s0 = (lo as isize + kx as isize - r as isize) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let r = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let (lo, hi) = valid_range(w, kx, r);
                if lo >= hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - r as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + kx as isize - r as isize) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..hi - lo];
                    for (d, v) in dst.iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the image.
fn valid_range(w: usize, kx: usize, r: usize) -> (usize, usize) {
    let lo = r.saturating_sub(kx).min(w);
    let hi = (w + r).saturating_sub(kx).min(w);
    (lo, hi.max(lo))
}

/// `c = a' * b' + beta * c` for row-major `a` (m x k) and `b` (k x n), where
/// `'` is an optional transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the slices, as
    // checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_backward(
    x: &Tensor4,
    w: &Tensor4,
    has_bias: bool,
    k: usize,
    g: &Tensor4,
) -> (Tensor4, Tensor4, Option<Tensor4>) {
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let hw = h * wd;
    let ck = cin * k * k;
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ck * hw] };
    let mut dcols = vec![0.0; ck * hw];
    for s in 0..n {
        let xin = &x.data()[s * cin * hw..(s + 1) * cin * hw];
        let gs = &g.data()[s * cout * hw..(s + 1) * cout * hw];
        let src: &[f64] = if k == 1 {
            xin
        } else {
            im2col(xin, cin, h, wd, k, &mut cols);
            &cols
        };
        gemm(cout, hw, ck, gs, false, src, true, dw.data_mut(), 1.0);
        let dxs = &mut dx.data_mut()[s * cin * hw..(s + 1) * cin * hw];
        if k == 1 {
            gemm(ck, cout, hw, w.data(), true, gs, false, dxs, 1.0);
        } else {
            gemm(ck, cout, hw, w.data(), true, gs, false, &mut dcols, 0.0);
            col2im(&dcols, cin, h, wd, k, dxs);
        }
    }
    let db = has_bias.then(|| {
        let mut db = Tensor4::zeros([1, cout, 1, 1]);
        let d = db.data_mut();
        for s in 0..n {
            for (c, dc) in d.iter_mut().enumerate() {
                let start = (s * cout + c) * hw;
                *dc += g.data()[start..start + hw].iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}

fn bn_backward(
    gamma: &Tensor4,
    xhat: &[f64],
    inv_std: &[f64],
    train: bool,
    g: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let [n, c, h, w] = g.shape();
    let hw = h * w;
    let m = (n * hw) as f64;
    let gd = g.data();
    let gv = gamma.data();
    let mut dx = Tensor4::zeros(g.shape());
    let mut dgamma = Tensor4::zeros(gamma.shape());
    let mut dbeta = Tensor4::zeros(gamma.shape());
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for s in 0..n {
            let start = (s * c + ch) * hw;
            for i in start..start + hw {
                sum_g += gd[i];
                sum_gx += gd[i] * xhat[i];
            }
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        let k = gv[ch] * inv_std[ch];
        let dd = dx.data_mut();
        for s in 0..n {
            let start = (s * c + ch) * hw;
            for i in start..start + hw {
                dd[i] = if train {
                    k * (gd[i] - sum_g / m - xhat[i] * sum_gx / m)
                } else {
                    k * gd[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::ParamKind;
    use crate::rng::{stream, Domain};
    use rand::Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor4 {
        let mut r = stream(seed, Domain::GradCheck, 0);
        let n = shape.iter().product();
        Tensor4::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_oracle(x: &Tensor4, w: &Tensor4, b: &[f64]) -> Tensor4 {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let r = (k / 2) as isize;
        let mut out = Tensor4::zeros([n, cout, h, wd]);
        for s in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - r;
                                    let sx = xx as isize + kx as isize - r;
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                                        acc += w.at(co, ci, ky, kx)
                                            * x.at(s, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_and_ones() {
        let x = random([2, 1, 5, 7], 1);
        let mut k = Tensor4::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let kv = t.leaf(k);
        let y = t.conv2d(xv, kv, None).unwrap();
        assert_eq!(t.value(y), &x);

        let c = Tensor4::filled([1, 1, 6, 6], 1.5);
        let xv = t.leaf(c);
        let kv = t.leaf(Tensor4::filled([1, 1, 3, 3], 1.0));
        let y = t.conv2d(xv, kv, None).unwrap();
        assert!((t.value(y).at(0, 0, 2, 3) - 13.5).abs() < 1e-12);
        assert!((t.value(y).at(0, 0, 0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for (k, seed) in [(3, 2), (1, 3)] {
            let x = random([2, 3, 6, 5], seed);
            let w = random([4, 3, k, k], seed + 10);
            let b = random([1, 4, 1, 1], seed + 20);
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let y = t.conv2d(xv, wv, Some(bv)).unwrap();
            let oracle = conv_oracle(&x, &w, b.data());
            for (a, e) in t.value(y).data().iter().zip(oracle.data()) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor4::zeros([1, 2, 4, 4]));
        let w = t.leaf(Tensor4::zeros([1, 3, 3, 3]));
        assert!(matches!(t.conv2d(x, w, None), Err(Error::ShapeMismatch(_))));
    }

    fn bn_store(c: usize, gamma: f64, beta: f64) -> (ParamStore, BnParams) {
        let mut s = ParamStore::new();
        let bn = BnParams {
            gamma: s.add("g", ParamKind::BnScale, Tensor4::filled([1, c, 1, 1], gamma)),
            beta: s.add("b", ParamKind::BnShift, Tensor4::filled([1, c, 1, 1], beta)),
            running_mean: s.add("m", ParamKind::RunningMean, Tensor4::zeros([1, c, 1, 1])),
            running_var: s.add("v", ParamKind::RunningVar, Tensor4::filled([1, c, 1, 1], 1.0)),
            steps: s.add("n", ParamKind::BnSteps, Tensor4::zeros([1, 1, 1, 1])),
        };
        (s, bn)
    }

    #[test]
    fn batch_norm_train_statistics() {
        let x = random([3, 2, 4, 5], 4);
        let (mut s, bn) = bn_store(2, 1.0, 0.0);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = t.batch_norm(&mut s, xv, bn, Mode::Train).unwrap();
        let yv = t.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).flat_map(move |i| (0..5).map(move |j| (n, i, j))))
                .map(|(n, i, j)| yv.at(n, c, i, j))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4, "variance {v} (eps shifts it slightly)");

            // hand oracle
            let xs: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).flat_map(move |i| (0..5).map(move |j| (n, i, j))))
                .map(|(n, i, j)| x.at(n, c, i, j))
                .collect();
            let mu = xs.iter().sum::<f64>() / 60.0;
            let var = xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 60.0;
            for (a, xo) in vals.iter().zip(&xs) {
                assert!((a - (xo - mu) / (var + 1e-5).sqrt()).abs() < 1e-8);
            }
            let rm = s.value(bn.running_mean).data()[c];
            assert!((rm - 0.1 * mu).abs() < 1e-12);
            let rv = s.value(bn.running_var).data()[c];
            assert!((rv - (0.9 + 0.1 * var * 60.0 / 59.0)).abs() < 1e-12);
        }
        assert_eq!(s.value(bn.steps).item(), 1.0);
    }

    #[test]
    fn batch_norm_affine_and_infer() {
        let x = random([2, 1, 3, 3], 5);
        let (mut s1, bn1) = bn_store(1, 1.0, 0.0);
        let (mut s2, bn2) = bn_store(1, 2.0, 3.0);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y1 = t.batch_norm(&mut s1, xv, bn1, Mode::Train).unwrap();
        let mut t2 = Tape::new();
        let xv2 = t2.leaf(x.clone());
        let y2 = t2.batch_norm(&mut s2, xv2, bn2, Mode::Train).unwrap();
        for (a, b) in t.value(y1).data().iter().zip(t2.value(y2).data()) {
            assert!((b - (2.0 * a + 3.0)).abs() < 1e-12);
        }

        let (mut fresh, bnf) = bn_store(1, 1.0, 0.0);
        let mut t3 = Tape::new();
        let xv3 = t3.leaf(x);
        assert!(matches!(
            t3.batch_norm(&mut fresh, xv3, bnf, Mode::Infer),
            Err(Error::Untrained(_))
        ));
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("x", ParamKind::Weight, Tensor4::from_vec([1, 1, 1, 3], vec![5.0, -4.0, -2.0]).unwrap());
        let mut t = Tape::new();
        let x = t.param(&s, id);
        let y = t.leaky_relu(x, 0.1);
        assert_eq!(t.value(y).data()[0], 5.0);
        assert!((t.value(y).data()[1] + 0.4).abs() < 1e-15);
        let l = t.abs_sum(y);
        t.backward(l, &mut s).unwrap();
        // d|y|/dx at -2 is sign(y) * slope = -0.1
        assert!((s.grad(id).data()[2] + 0.1).abs() < 1e-15);
        assert_eq!(s.grad(id).data()[0], 1.0);
    }

    #[test]
    fn max_pool_values_and_ties() {
        let mut s = ParamStore::new();
        let id = s.add("x", ParamKind::Weight, Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut t = Tape::new();
        let x = t.param(&s, id);
        let y = t.max_pool2(x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);

        let mut s = ParamStore::new();
        let id = s.add("x", ParamKind::Weight, Tensor4::filled([1, 1, 4, 4], 2.0));
        let mut t = Tape::new();
        let x = t.param(&s, id);
        let y = t.max_pool2(x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 2.0));
        let l = t.abs_sum(y);
        t.backward(l, &mut s).unwrap();
        let g = s.grad(id);
        for yy in 0..4 {
            for xx in 0..4 {
                let expect = if yy % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g.at(0, 0, yy, xx), expect);
            }
        }

        let mut t = Tape::new();
        let odd = t.leaf(Tensor4::zeros([1, 1, 3, 4]));
        assert!(t.max_pool2(odd).is_err());
    }

    #[test]
    fn max_pool_matches_loop_oracle() {
        let x = random([2, 3, 6, 4], 6);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = t.max_pool2(xv).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..2 {
                        let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|(a, b)| x.at(n, c, 2 * i + a, 2 * j + b))
                            .fold(f64::NEG_INFINITY, f64::max);
                        assert_eq!(t.value(y).at(n, c, i, j), m);
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_up2_cases() {
        let mut t = Tape::new();
        let c = t.leaf(Tensor4::filled([1, 2, 3, 5], 0.7));
        let y = t.bilinear_up2(c);
        assert_eq!(t.value(y).shape(), [1, 2, 6, 10]);
        assert!(t.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let one = t.leaf(Tensor4::filled([1, 1, 1, 1], 3.0));
        let y = t.bilinear_up2(one);
        assert_eq!(t.value(y).data(), &[3.0; 4]);

        // [a b; c d]: output (0,0) samples at (-0.25,-0.25) -> clamps to a
        // on both axes; (1,2) samples at (0.25, 0.75).
        let (a, b, c, d) = (1.0, 2.0, 5.0, 11.0);
        let x = t.leaf(Tensor4::from_vec([1, 1, 2, 2], vec![a, b, c, d]).unwrap());
        let y = t.bilinear_up2(x);
        let v = t.value(y);
        assert_eq!(v.at(0, 0, 0, 0), a);
        let top = 0.25 * a + 0.75 * b;
        let bot = 0.25 * c + 0.75 * d;
        assert!((v.at(0, 0, 1, 2) - (0.75 * top + 0.25 * bot)).abs() < 1e-15);
        assert_eq!(v.at(0, 0, 3, 3), d);
    }

    #[test]
    fn bilinear_backward_is_transpose() {
        // <up(x), g> == <x, up^T(g)>
        let x = random([1, 2, 3, 4], 7);
        let g = random([1, 2, 6, 8], 8);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = t.bilinear_up2(xv);
        let lhs: f64 = t.value(y).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = up2_backward(x.shape(), &g);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_order_and_gradient_split() {
        let a = random([1, 4, 8, 8], 9);
        let b = random([1, 4, 8, 8], 10);
        let mut s = ParamStore::new();
        let ia = s.add("a", ParamKind::Weight, a.clone());
        let ib = s.add("b", ParamKind::Weight, b.clone());
        let mut t = Tape::new();
        let (av, bv) = (t.param(&s, ia), t.param(&s, ib));
        let y = t.concat_channels(av, bv).unwrap();
        assert_eq!(t.value(y).shape(), [1, 8, 8, 8]);
        assert_eq!(t.value(y).at(0, 2, 3, 4), a.at(0, 2, 3, 4));
        assert_eq!(t.value(y).at(0, 6, 3, 4), b.at(0, 2, 3, 4));
        let l = t.abs_sum(y);
        t.backward(l, &mut s).unwrap();
        for (g, v) in s.grad(ia).data().iter().zip(a.data()) {
            assert_eq!(*g, sign0(*v));
        }
        for (g, v) in s.grad(ib).data().iter().zip(b.data()) {
            assert_eq!(*g, sign0(*v));
        }

        let mut t = Tape::new();
        let p = t.leaf(Tensor4::zeros([1, 1, 4, 4]));
        let q = t.leaf(Tensor4::zeros([1, 1, 4, 2]));
        assert!(t.concat_channels(p, q).is_err());
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Weight, Tensor4::scalar(3.0));
        let mut t = Tape::new();
        let a = t.param(&s, id);
        let b = t.param(&s, id);
        assert_eq!(a, b);
        let sum = t.add(a, b).unwrap();
        let l = t.scale(sum, 2.0);
        t.backward(l, &mut s).unwrap();
        assert_eq!(s.grad(id).item(), 4.0);
    }

    #[test]
    fn mae_subgradient_zero_at_tie() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Weight, Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let mut t = Tape::new();
        let a = t.param(&s, id);
        let b = t.leaf(Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
        let l = t.mae(a, b).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        t.backward(l, &mut s).unwrap();
        assert_eq!(s.grad(id).data(), &[0.0, 0.5]);
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let x = random([2, 2, 8, 8], 11);
        let w = random([3, 2, 3, 3], 12);
        let run = || {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let y = t.conv2d(xv, wv, None).unwrap();
            let y = t.max_pool2(y).unwrap();
            let y = t.bilinear_up2(y);
            let out = t.value(y).clone();
            assert_eq!(t.value(xv), &x);
            out
        };
        assert_eq!(run(), run());
    }
}
