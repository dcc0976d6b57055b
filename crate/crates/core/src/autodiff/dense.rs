use super::{Graph, Op, Unary, Var};
use crate::tensor::{gemm, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// `a·b` for a: m×k, b: k×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul { a, b, trans_b: false })
    }

    /// `a·bᵀ` for a: m×k, b: n×k. This is how every linear layer is applied.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_nt inner dimensions disagree");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(row).len(), n, "add_row length mismatch");
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow { a, row })
    }

    /// Scales column j of an m×n matrix by `s[j]`.
    pub fn mul_cols(&mut self, a: Var, s: Var) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(s).len(), n, "mul_cols length mismatch");
        let mut out = self.value(a).clone();
        let sv = self.value(s).data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, f) in chunk.iter_mut().zip(&sv) {
                *o *= f;
            }
        }
        self.push(out, Op::MulCols { a, s })
    }

    /// Euclidean norm of each column of an m×n matrix, as a length-n vector.
    pub fn col_norms(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut sums = vec![0.0; n];
        for chunk in av.data().chunks(n) {
            for (s, v) in sums.iter_mut().zip(chunk) {
                *s += v * v;
            }
        }
        let out = Tensor::from_vec(&[n], sums.into_iter().map(f64::sqrt).collect());
        self.push(out, Op::ColNorms(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Relu => |x| x.max(0.0),
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
            Unary::Recip => |x| 1.0 / x,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
        };
        let out = self.value(a).map(f);
        self.push(out, Op::Unary(a, u))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Pow(a, p))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.value(a).map(|x| x.max(lo));
        self.push(out, Op::ClampMin(a, lo))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let (mean, inv) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[j] + bv[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose2();
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, Op::Reshape(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(start + len <= n);
        let mut out = Vec::with_capacity(m * len);
        for row in av.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::from_vec(&[m, len], out), Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                assert_eq!(self.value(p).rows(), m);
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_vec(&[m, total], out), Op::ConcatCols(parts.to_vec()))
    }

    /// Contiguous range of the flattened data, as a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = Tensor::from_vec(&[len], self.value(a).data()[start..start + len].to_vec());
        self.push(out, Op::Slice { a, start })
    }

    /// Mean over rows of an m×n matrix, giving 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; n];
        for row in av.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::from_vec(&[1, n], out), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over the entries where `mask` is true. Panics on an empty mask;
    /// callers check for that and raise a proper error first.
    pub fn masked_mean(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), mask.len(), "mask length mismatch");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "masked_mean over an empty mask");
        let s: f64 = av
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        self.push(Tensor::scalar(s / count as f64), Op::MaskedMean { a, mask, count })
    }

    pub(super) fn backprop_dense(&self, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(out);
        match &self.nodes[out.0].op {
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if let Some(ga) = self.grad_buf(grads, a) {
                    // trans_b: ga = g·b (b is n×k); else ga = g·bᵀ (b is k×n)
                    gemm(m, n, k, g.data(), false, bv.data(), !trans_b, ga.data_mut(), 1.0);
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    if trans_b {
                        gemm(n, m, k, g.data(), true, av.data(), false, gb.data_mut(), 1.0);
                    } else {
                        gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    gb.add_assign(g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for (d, s) in gb.data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for ((d, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            &Op::Div(a, b) => {
                let bv = self.value(b).data();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gi / bi;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    for (((d, gi), bi), yi) in gb.data_mut().iter_mut().zip(g.data()).zip(bv).zip(y.data()) {
                        *d -= gi * yi / bi;
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.add_assign(g);
                }
                let n = y.cols();
                if let Some(gr) = self.grad_buf(grads, row) {
                    for chunk in g.data().chunks(n) {
                        for (d, v) in gr.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            &Op::MulCols { a, s } => {
                let n = y.cols();
                let sv = self.value(s).data();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for (dchunk, gchunk) in ga.data_mut().chunks_mut(n).zip(g.data().chunks(n)) {
                        for ((d, gi), f) in dchunk.iter_mut().zip(gchunk).zip(sv) {
                            *d += gi * f;
                        }
                    }
                }
                let av = self.value(a).data();
                if let Some(gs) = self.grad_buf(grads, s) {
                    for (achunk, gchunk) in av.chunks(n).zip(g.data().chunks(n)) {
                        for ((d, gi), ai) in gs.data_mut().iter_mut().zip(gchunk).zip(achunk) {
                            *d += gi * ai;
                        }
                    }
                }
            }
            &Op::ColNorms(a) => {
                let n = y.cols();
                let av = self.value(a).data();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for (dchunk, achunk) in ga.data_mut().chunks_mut(n).zip(av.chunks(n)) {
                        for j in 0..n {
                            let norm = y.data()[j];
                            if norm > 0.0 {
                                dchunk[j] += g.data()[j] * achunk[j] / norm;
                            }
                        }
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    for (d, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += c * gi;
                    }
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.add_assign(g);
                }
            }
            &Op::Unary(a, u) => {
                let xv = self.value(a).data();
                if let Some(ga) = self.grad_buf(grads, a) {
                    let it = ga.data_mut().iter_mut().zip(g.data()).zip(xv).zip(y.data());
                    for (((d, gi), &x), &yv) in it {
                        let local = match u {
                            Unary::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(x),
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Exp => yv,
                            Unary::Abs => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Recip => -yv * yv,
                            Unary::Sqrt => 0.5 / yv,
                            Unary::Square => 2.0 * x,
                        };
                        *d += gi * local;
                    }
                }
            }
            &Op::Pow(a, p) => {
                let xv = self.value(a).data();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, gi), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d += gi * p * x.powf(p - 1.0);
                    }
                }
            }
            &Op::ClampMin(a, lo) => {
                let xv = self.value(a).data();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, gi), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if x > lo {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let n = y.cols();
                if let Some(ga) = self.grad_buf(grads, a) {
                    let rows = ga.data_mut().chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n));
                    for ((drow, grow), yrow) in rows {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(x);
                let n = xv.cols();
                let gv = self.value(gamma).data();
                let mut xhat = xv.clone();
                let mut invs = Vec::with_capacity(xv.rows());
                for row in xhat.data_mut().chunks_mut(n) {
                    let (mean, inv) = row_stats(row, eps);
                    for v in row.iter_mut() {
                        *v = (*v - mean) * inv;
                    }
                    invs.push(inv);
                }
                if let Some(gb) = self.grad_buf(grads, beta) {
                    for chunk in g.data().chunks(n) {
                        for (d, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
                if let Some(gg) = self.grad_buf(grads, gamma) {
                    for (gchunk, hchunk) in g.data().chunks(n).zip(xhat.data().chunks(n)) {
                        for ((d, gi), hi) in gg.data_mut().iter_mut().zip(gchunk).zip(hchunk) {
                            *d += gi * hi;
                        }
                    }
                }
                if let Some(gx) = self.grad_buf(grads, x) {
                    let nf = n as f64;
                    let rows = gx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(xhat.data().chunks(n))
                        .zip(&invs);
                    for (((drow, grow), hrow), &inv) in rows {
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..n {
                            let gh = grow[j] * gv[j];
                            mean_gh += gh;
                            mean_ghx += gh * hrow[j];
                        }
                        mean_gh /= nf;
                        mean_ghx /= nf;
                        for j in 0..n {
                            let gh = grow[j] * gv[j];
                            drow[j] += inv * (gh - mean_gh - hrow[j] * mean_ghx);
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.add_assign(&g.transpose2());
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    ga.add_assign(g);
                }
            }
            &Op::SliceCols { a, start } => {
                let len = y.cols();
                let n = self.value(a).cols();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for (drow, grow) in ga.data_mut().chunks_mut(n).zip(g.data().chunks(len)) {
                        for (d, gi) in drow[start..start + len].iter_mut().zip(grow) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.grad_buf(grads, p) {
                        for (drow, grow) in gp.data_mut().chunks_mut(w).zip(g.data().chunks(total)) {
                            for (d, gi) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                                *d += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice { a, start } => {
                if let Some(ga) = self.grad_buf(grads, a) {
                    for (d, gi) in ga.data_mut()[start..start + g.len()].iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            &Op::MeanRows(a) => {
                let av = self.value(a);
                let (m, n) = (av.rows(), av.cols());
                if let Some(ga) = self.grad_buf(grads, a) {
                    for drow in ga.data_mut().chunks_mut(n) {
                        for (d, gi) in drow.iter_mut().zip(g.data()) {
                            *d += gi / m as f64;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                let gi = g.item();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for d in ga.data_mut() {
                        *d += gi;
                    }
                }
            }
            &Op::Mean(a) => {
                let gi = g.item() / self.value(a).len() as f64;
                if let Some(ga) = self.grad_buf(grads, a) {
                    for d in ga.data_mut() {
                        *d += gi;
                    }
                }
            }
            Op::MaskedMean { a, mask, count } => {
                let gi = g.item() / *count as f64;
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, &m) in ga.data_mut().iter_mut().zip(mask) {
                        if m {
                            *d += gi;
                        }
                    }
                }
            }
            _ => unreachable!("not a dense op"),
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
