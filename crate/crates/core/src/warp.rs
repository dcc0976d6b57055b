//! Pinhole reprojection and differentiable view synthesis.
//!
//! Pixel centres sit at integer coordinates with the origin at the top-left
//! corner. [`synthesize_view`] is inverse warping: every pixel of the output
//! grid is lifted with the supplied depth, moved by the pose, projected, and
//! the source image is sampled there. The pose therefore maps output-grid
//! camera coordinates into the source camera, which for a source/target pair
//! is the camera motion from source to target.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::tensor::Tensor;

/// Points at or in front of this depth are masked out by [`project`].
pub const DEFAULT_Z_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid(format!(
                "intrinsics need positive focal lengths, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        let inside = |c: f64, n: usize| c >= 0.0 && c <= n as f64 - 1.0;
        if !inside(self.cx, width) || !inside(self.cy, height) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside a {width}×{height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// `K⁻¹·(u, v, 1)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// H×W×C image with values in `[0, 1]`, channels interleaved per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Values are clamped into `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}×{height}×{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Channel-first C×H×W tensor.
    pub fn to_chw(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; c * h * w];
        for (p, px) in self.data.chunks(c).enumerate() {
            for (ci, v) in px.iter().enumerate() {
                out[ci * h * w + p] = *v;
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }

    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::invalid(format!("expected C×H×W tensor, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for p in 0..h * w {
                data[p * c + ci] = t.data()[ci * h * w + p];
            }
        }
        Image::new(w, h, c, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}×{height} depth map needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|d| d * factor).collect(),
        }
    }

    /// True where depth is finite and strictly positive.
    pub fn valid_mask(&self) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|d| d.is_finite() && *d > 0.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("mask size does not match its dimensions"));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Per-pixel 3-D points with a flag for pixels whose depth was unusable.
#[derive(Clone, Debug)]
pub struct PointGrid {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

/// Per-pixel sampling coordinates `(x, y)` in source-image pixels.
#[derive(Clone, Debug)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<(f64, f64)>,
}

impl PixelGrid {
    /// Each pixel sampling itself.
    pub fn identity(width: usize, height: usize) -> Self {
        let mut coords = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                coords.push((x as f64, y as f64));
            }
        }
        Self { width, height, coords }
    }
}

/// `(u, v) ↦ D[v, u]·K⁻¹(u, v, 1)`; nonpositive depth is flagged invalid.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> PointGrid {
    let (w, h) = (depth.width, depth.height);
    let mut points = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let d = depth.get(u, v);
            points.push(k.ray(u as f64, v as f64) * d);
            valid.push(d.is_finite() && d > 0.0);
        }
    }
    PointGrid {
        width: w,
        height: h,
        points,
        valid,
    }
}

/// `p ↦ R·p + t`.
pub fn transform_points(points: &PointGrid, pose: &PoseSE3) -> PointGrid {
    PointGrid {
        width: points.width,
        height: points.height,
        points: points.points.iter().map(|p| pose.transform_point(p)).collect(),
        valid: points.valid.clone(),
    }
}

/// Pinhole projection of one camera-frame point. Returns pixel coordinates
/// and whether the point lies in front of `z_min`; points behind are
/// projected as if at `z_min` so the coordinates stay finite.
pub(crate) fn project_point(k: &Intrinsics, q: &Vector3<f64>, z_min: f64) -> (f64, f64, bool) {
    if !q.iter().all(|v| v.is_finite()) {
        return (0.0, 0.0, false);
    }
    let in_front = q.z > z_min;
    let z = if in_front { q.z } else { z_min };
    (snap(k.fx * q.x / z + k.cx), snap(k.fy * q.y / z + k.cy), in_front)
}

/// Rounds coordinates within rounding noise of a pixel centre onto it, so
/// an identity reprojection samples pixel centres exactly.
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < 1e-9 {
        r
    } else {
        c
    }
}

pub(crate) fn inside(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && x <= (width - 1) as f64 && y >= 0.0 && y <= (height - 1) as f64
}

/// Projects points into a `width`×`height` image. The mask is false where
/// the point is at or behind `z_min`, leaves the image, or came from an
/// invalid depth.
pub fn project_with(
    points: &PointGrid,
    k: &Intrinsics,
    width: usize,
    height: usize,
    z_min: f64,
) -> (PixelGrid, ValidityMask) {
    let mut coords = Vec::with_capacity(points.points.len());
    let mut mask = Vec::with_capacity(points.points.len());
    for (q, &ok) in points.points.iter().zip(&points.valid) {
        let (x, y, in_front) = project_point(k, q, z_min);
        coords.push((x, y));
        mask.push(ok && in_front && inside(x, y, width, height));
    }
    (
        PixelGrid {
            width: points.width,
            height: points.height,
            coords,
        },
        ValidityMask {
            width: points.width,
            height: points.height,
            data: mask,
        },
    )
}

/// [`project_with`] into an image the size of the point grid, with
/// [`DEFAULT_Z_MIN`].
pub fn project(points: &PointGrid, k: &Intrinsics) -> (PixelGrid, ValidityMask) {
    project_with(points, k, points.width, points.height, DEFAULT_Z_MIN)
}

/// Bilinear lookup at `(x, y)` with border clamping. Writes the channel
/// values into `out` and, when given, the partial derivatives with respect
/// to `x` and `y` (zero along an axis whose coordinate was clamped).
pub(crate) fn sample_pixel(
    img: &Image,
    x: f64,
    y: f64,
    out: &mut [f64],
    grad: Option<(&mut [f64], &mut [f64])>,
) {
    let (w, h, c) = (img.width, img.height, img.channels);
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let xc = x.clamp(0.0, max_x);
    let yc = y.clamp(0.0, max_y);
    let x0 = if w > 1 { (xc.floor() as usize).min(w - 2) } else { 0 };
    let y0 = if h > 1 { (yc.floor() as usize).min(h - 2) } else { 0 };
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = xc - x0 as f64;
    let ay = yc - y0 as f64;
    let px = |xx: usize, yy: usize| (yy * w + xx) * c;
    let (i00, i10, i01, i11) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    let d = &img.data;
    for ci in 0..c {
        let top = d[i00 + ci] + ax * (d[i10 + ci] - d[i00 + ci]);
        let bot = d[i01 + ci] + ax * (d[i11 + ci] - d[i01 + ci]);
        out[ci] = top + ay * (bot - top);
    }
    if let Some((gx, gy)) = grad {
        let x_free = x > 0.0 && x < max_x;
        let y_free = y > 0.0 && y < max_y;
        for ci in 0..c {
            let top_dx = d[i10 + ci] - d[i00 + ci];
            let bot_dx = d[i11 + ci] - d[i01 + ci];
            gx[ci] = if x_free { top_dx + ay * (bot_dx - top_dx) } else { 0.0 };
            let top = d[i00 + ci] + ax * top_dx;
            let bot = d[i01 + ci] + ax * bot_dx;
            gy[ci] = if y_free { bot - top } else { 0.0 };
        }
    }
}

/// Four-neighbour bilinear interpolation of `img` at every coordinate of
/// the grid; coordinates outside the image clamp to the border.
pub fn bilinear_sample(img: &Image, coords: &PixelGrid) -> Image {
    let c = img.channels;
    let mut data = vec![0.0; coords.coords.len() * c];
    for (chunk, &(x, y)) in data.chunks_mut(c).zip(&coords.coords) {
        sample_pixel(img, x, y, chunk, None);
    }
    Image {
        width: coords.width,
        height: coords.height,
        channels: c,
        data,
    }
}

/// Synthesises the view seen from the output grid's camera:
/// backproject → transform → project → sample.
pub fn synthesize_view(
    source: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    pose: &PoseSE3,
) -> Result<(Image, ValidityMask)> {
    if source.width != depth.width || source.height != depth.height {
        return Err(Error::invalid(format!(
            "image is {}×{} but depth is {}×{}",
            source.width, source.height, depth.width, depth.height
        )));
    }
    let points = transform_points(&backproject(depth, k), pose);
    let (coords, mask) = project_with(&points, k, source.width, source.height, DEFAULT_Z_MIN);
    Ok((bilinear_sample(source, &coords), mask))
}
