//! Rotation parameterisation and view synthesis as graph operations.

use nalgebra::{Matrix3, Vector3};

use super::{Graph, Op, Var};
use crate::geometry::{rodrigues, rodrigues_jacobian, AxisAngle};
use crate::tensor::Tensor;
use crate::warp::{inside, project_point, sample_pixel, Image, Intrinsics, ValidityMask, DEFAULT_Z_MIN};

/// Forward-pass state the warp needs for its backward sweep.
pub struct WarpCache {
    width: usize,
    height: usize,
    channels: usize,
    k: Intrinsics,
    /// Per pixel: carries gradient (valid depth, in front of the camera).
    active: Vec<bool>,
    /// Transformed points `R·P + t`.
    q: Vec<Vector3<f64>>,
    /// Per pixel and channel: ∂I/∂x and ∂I/∂y at the sampling location.
    dx: Vec<f64>,
    dy: Vec<f64>,
    mask: ValidityMask,
}

fn mat3(t: &Tensor) -> Matrix3<f64> {
    assert_eq!(t.len(), 9, "rotation must have 9 entries");
    Matrix3::from_row_slice(t.data())
}

fn vec3(t: &Tensor) -> Vector3<f64> {
    assert_eq!(t.len(), 3, "expected 3 entries");
    Vector3::from_column_slice(t.data())
}

impl Graph {
    /// Axis-angle (3) to a row-major 3×3 rotation.
    pub fn rodrigues(&mut self, phi: Var) -> Var {
        let r = rodrigues(&AxisAngle(vec3(self.value(phi))));
        let m = r.matrix();
        let data = (0..9).map(|i| m[(i / 3, i % 3)]).collect();
        self.push(Tensor::from_vec(&[3, 3], data), Op::Rodrigues(phi))
    }

    /// Inverse-warps `source` into the grid of `depth` (H·W values) with the
    /// pose `(rot, trans)`. Returns the C×H×W synthesised view and the
    /// validity mask of the forward pass.
    pub fn warp(&mut self, source: &Image, depth: Var, rot: Var, trans: Var, k: &Intrinsics) -> (Var, ValidityMask) {
        let (w, h, c) = (source.width(), source.height(), source.channels());
        let dv = self.value(depth).data();
        assert_eq!(dv.len(), w * h, "depth size does not match the source image");
        let r = mat3(self.value(rot));
        let t = vec3(self.value(trans));
        let hw = w * h;
        let mut out = vec![0.0; c * hw];
        let mut active = vec![false; hw];
        let mut q = Vec::with_capacity(hw);
        let mut dx = vec![0.0; c * hw];
        let mut dy = vec![0.0; c * hw];
        let mut mask = vec![false; hw];
        let mut px = vec![0.0; c];
        for v in 0..h {
            for u in 0..w {
                let p = v * w + u;
                let d = dv[p];
                let qp = r * (k.ray(u as f64, v as f64) * d) + t;
                let (x, y, in_front) = project_point(k, &qp, DEFAULT_Z_MIN);
                let depth_ok = d.is_finite() && d > 0.0;
                sample_pixel(
                    source,
                    x,
                    y,
                    &mut px,
                    Some((&mut dx[p * c..(p + 1) * c], &mut dy[p * c..(p + 1) * c])),
                );
                for ci in 0..c {
                    out[ci * hw + p] = px[ci];
                }
                active[p] = depth_ok && in_front;
                mask[p] = active[p] && inside(x, y, w, h);
                q.push(qp);
            }
        }
        let mask = ValidityMask::new(w, h, mask).expect("sizes match");
        let cache = WarpCache {
            width: w,
            height: h,
            channels: c,
            k: *k,
            active,
            q,
            dx,
            dy,
            mask: mask.clone(),
        };
        let var = self.push(
            Tensor::from_vec(&[c, h, w], out),
            Op::Warp {
                depth,
                rot,
                trans,
                cache: Box::new(cache),
            },
        );
        (var, mask)
    }

    /// Validity mask recorded by a warp node.
    pub fn warp_mask(&self, v: Var) -> Option<&ValidityMask> {
        match &self.nodes[v.0].op {
            Op::Warp { cache, .. } => Some(&cache.mask),
            _ => None,
        }
    }

    pub(super) fn backprop_geom(&self, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[out.0].op {
            &Op::Rodrigues(phi) => {
                let jac = rodrigues_jacobian(&vec3(self.value(phi)));
                if let Some(gp) = self.grad_buf(grads, phi) {
                    let gm = g.data();
                    for (i, j) in jac.iter().enumerate() {
                        let mut s = 0.0;
                        for e in 0..9 {
                            s += gm[e] * j[(e / 3, e % 3)];
                        }
                        gp.data_mut()[i] += s;
                    }
                }
            }
            Op::Warp {
                depth,
                rot,
                trans,
                cache,
            } => {
                let (depth, rot, trans) = (*depth, *rot, *trans);
                let WarpCache {
                    width: w,
                    height: h,
                    channels: c,
                    k,
                    ..
                } = **cache;
                let hw = w * h;
                let r = mat3(self.value(rot));
                let dv = self.value(depth).data();
                let need_d = self.requires_grad(depth);
                let need_r = self.requires_grad(rot);
                let need_t = self.requires_grad(trans);
                let mut gd = vec![0.0; if need_d { hw } else { 0 }];
                let mut gr = Matrix3::zeros();
                let mut gt = Vector3::zeros();
                let gv = g.data();
                for p in 0..hw {
                    if !cache.active[p] {
                        continue;
                    }
                    let (mut gu, mut gvv) = (0.0, 0.0);
                    for ci in 0..c {
                        let go = gv[ci * hw + p];
                        gu += go * cache.dx[p * c + ci];
                        gvv += go * cache.dy[p * c + ci];
                    }
                    if gu == 0.0 && gvv == 0.0 {
                        continue;
                    }
                    let qp = &cache.q[p];
                    let iz = 1.0 / qp.z;
                    let gq = Vector3::new(
                        gu * k.fx * iz,
                        gvv * k.fy * iz,
                        -(gu * k.fx * qp.x + gvv * k.fy * qp.y) * iz * iz,
                    );
                    gt += gq;
                    let ray = k.ray((p % w) as f64, (p / w) as f64);
                    if need_r {
                        gr += gq * (ray * dv[p]).transpose();
                    }
                    if need_d {
                        gd[p] = (r.transpose() * gq).dot(&ray);
                    }
                }
                if need_d {
                    let buf = self.grad_buf(grads, depth).expect("requires grad");
                    for (a, b) in buf.data_mut().iter_mut().zip(&gd) {
                        *a += b;
                    }
                }
                if need_r {
                    let buf = self.grad_buf(grads, rot).expect("requires grad");
                    for e in 0..9 {
                        buf.data_mut()[e] += gr[(e / 3, e % 3)];
                    }
                }
                if need_t {
                    let buf = self.grad_buf(grads, trans).expect("requires grad");
                    for e in 0..3 {
                        buf.data_mut()[e] += gt[e];
                    }
                }
            }
            _ => unreachable!("not a geometric op"),
        }
    }
}
