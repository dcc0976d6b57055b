//! Channel-first (C×H×W) image operations.

use super::{Graph, Op, Var};
use crate::tensor::{gemm, Tensor};

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a C×H×W tensor, got {s:?}");
    (s[0], s[1], s[2])
}

/// Unfolds a zero-padded k×k neighbourhood around every pixel into the
/// columns of a (C·k·k)×(H·W) matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[(ci * h + sy as usize) * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Same-size convolution with an odd square kernel and zero padding.
    /// `w` is Cout×Cin×k×k, `b` has Cout entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (c, h, wd) = chw(self.value(x));
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv2d input channel mismatch");
        let (cout, k) = (ws[0], ws[2]);
        assert!(k % 2 == 1 && ws[3] == k);
        let hw = h * wd;
        let cols = im2col(self.value(x).data(), c, h, wd, k);
        let mut out = vec![0.0; cout * hw];
        let bv = self.value(b).data();
        for (o, bias) in out.chunks_mut(hw).zip(bv) {
            o.fill(*bias);
        }
        gemm(cout, c * k * k, hw, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        self.push(Tensor::from_vec(&[cout, h, wd], out), Op::Conv2d { x, w, b })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ci * h2 + y) * w2 + xx] = xv[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::from_vec(&[c, h2, w2], out), Op::Upsample2(x))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns drop.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let out = avg_pool2_values(self.value(x).data(), c, h, w);
        self.push(Tensor::from_vec(&[c, h / 2, w / 2], out), Op::AvgPool2(x))
    }

    /// Separable "valid" filtering with the outer product of `kernel` with
    /// itself, per channel. Output is C×(H−k+1)×(W−k+1).
    pub fn blur_valid(&mut self, x: Var, kernel: &[f64]) -> Var {
        let (c, h, w) = chw(self.value(x));
        let k = kernel.len();
        assert!(h >= k && w >= k, "blur window larger than the image");
        let out = blur_valid_values(self.value(x).data(), c, h, w, kernel);
        let shape = [c, h - k + 1, w - k + 1];
        self.push(Tensor::from_vec(&shape, out), Op::BlurValid { x, kernel: kernel.to_vec() })
    }

    /// Horizontal forward difference `x[.., u+1] − x[.., u]`.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * (w - 1));
        for row in xv.chunks(w) {
            for u in 0..w - 1 {
                out.push(row[u + 1] - row[u]);
            }
        }
        self.push(Tensor::from_vec(&[c, h, w - 1], out), Op::DiffX(x))
    }

    /// Vertical forward difference `x[.., v+1, ..] − x[.., v, ..]`.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * (h - 1) * w);
        for ci in 0..c {
            for v in 0..h - 1 {
                for u in 0..w {
                    out.push(xv[(ci * h + v + 1) * w + u] - xv[(ci * h + v) * w + u]);
                }
            }
        }
        self.push(Tensor::from_vec(&[c, h - 1, w], out), Op::DiffY(x))
    }

    /// Mean over channels, giving 1×H×W.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.value(x));
        let xv = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for chunk in xv.chunks(hw) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        self.push(Tensor::from_vec(&[1, h, w], out), Op::ChannelMean(x))
    }

    pub(super) fn backprop_spatial(&self, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[out.0].op {
            &Op::Conv2d { x, w, b } => {
                let (c, h, wd) = chw(self.value(x));
                let ws = self.value(w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let hw = h * wd;
                let ckk = c * k * k;
                if let Some(gb) = self.grad_buf(grads, b) {
                    for (d, chunk) in gb.data_mut().iter_mut().zip(g.data().chunks(hw)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                }
                let need_w = self.requires_grad(w);
                let need_x = self.requires_grad(x);
                if need_w {
                    let cols = im2col(self.value(x).data(), c, h, wd, k);
                    let gw = self.grad_buf(grads, w).expect("requires grad");
                    gemm(cout, hw, ckk, g.data(), false, &cols, true, gw.data_mut(), 1.0);
                }
                if need_x {
                    let mut gcols = vec![0.0; ckk * hw];
                    gemm(ckk, cout, hw, self.value(w).data(), true, g.data(), false, &mut gcols, 0.0);
                    let gx = self.grad_buf(grads, x).expect("requires grad");
                    col2im(&gcols, c, h, wd, k, gx.data_mut());
                }
            }
            &Op::Upsample2(x) => {
                let (c, h, w) = chw(self.value(x));
                let (h2, w2) = (2 * h, 2 * w);
                if let Some(gx) = self.grad_buf(grads, x) {
                    let d = gx.data_mut();
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                d[(ci * h + y / 2) * w + xx / 2] += g.data()[(ci * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
            }
            &Op::AvgPool2(x) => {
                let (c, h, w) = chw(self.value(x));
                let (ho, wo) = (h / 2, w / 2);
                if let Some(gx) = self.grad_buf(grads, x) {
                    let d = gx.data_mut();
                    for ci in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gi = 0.25 * g.data()[(ci * ho + y) * wo + xx];
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    d[(ci * h + 2 * y + dy) * w + 2 * xx + dx] += gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::BlurValid { x, kernel } => {
                let (c, h, w) = chw(self.value(*x));
                let k = kernel.len();
                let (ho, wo) = (h - k + 1, w - k + 1);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let d = gx.data_mut();
                    let mut gtmp = vec![0.0; ho * w];
                    for ci in 0..c {
                        gtmp.fill(0.0);
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gi = g.data()[(ci * ho + y) * wo + xx];
                                for (j, kj) in kernel.iter().enumerate() {
                                    gtmp[y * w + xx + j] += kj * gi;
                                }
                            }
                        }
                        for y in 0..ho {
                            for (i, ki) in kernel.iter().enumerate() {
                                let dst = &mut d[(ci * h + y + i) * w..(ci * h + y + i + 1) * w];
                                for (dv, tv) in dst.iter_mut().zip(&gtmp[y * w..(y + 1) * w]) {
                                    *dv += ki * tv;
                                }
                            }
                        }
                    }
                }
            }
            &Op::DiffX(x) => {
                let (_, _, w) = chw(self.value(x));
                if let Some(gx) = self.grad_buf(grads, x) {
                    for (drow, grow) in gx.data_mut().chunks_mut(w).zip(g.data().chunks(w - 1)) {
                        for u in 0..w - 1 {
                            drow[u + 1] += grow[u];
                            drow[u] -= grow[u];
                        }
                    }
                }
            }
            &Op::DiffY(x) => {
                let (c, h, w) = chw(self.value(x));
                if let Some(gx) = self.grad_buf(grads, x) {
                    let d = gx.data_mut();
                    for ci in 0..c {
                        for v in 0..h - 1 {
                            for u in 0..w {
                                let gi = g.data()[(ci * (h - 1) + v) * w + u];
                                d[(ci * h + v + 1) * w + u] += gi;
                                d[(ci * h + v) * w + u] -= gi;
                            }
                        }
                    }
                }
            }
            &Op::ChannelMean(x) => {
                let (c, h, w) = chw(self.value(x));
                let hw = h * w;
                if let Some(gx) = self.grad_buf(grads, x) {
                    for chunk in gx.data_mut().chunks_mut(hw) {
                        for (d, gi) in chunk.iter_mut().zip(g.data()) {
                            *d += gi / c as f64;
                        }
                    }
                }
            }
            _ => unreachable!("not a spatial op"),
        }
    }
}

pub(crate) fn avg_pool2_values(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let s = x[(ci * h + 2 * y) * w + 2 * xx]
                    + x[(ci * h + 2 * y) * w + 2 * xx + 1]
                    + x[(ci * h + 2 * y + 1) * w + 2 * xx]
                    + x[(ci * h + 2 * y + 1) * w + 2 * xx + 1];
                out[(ci * ho + y) * wo + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn blur_valid_values(x: &[f64], c: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; c * ho * wo];
    let mut tmp = vec![0.0; ho * w];
    for ci in 0..c {
        tmp.fill(0.0);
        for y in 0..ho {
            for (i, ki) in kernel.iter().enumerate() {
                let src = &x[(ci * h + y + i) * w..(ci * h + y + i + 1) * w];
                for (t, s) in tmp[y * w..(y + 1) * w].iter_mut().zip(src) {
                    *t += ki * s;
                }
            }
        }
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = 0.0;
                for (j, kj) in kernel.iter().enumerate() {
                    s += kj * tmp[y * w + xx + j];
                }
                out[(ci * ho + y) * wo + xx] = s;
            }
        }
    }
    out
}
