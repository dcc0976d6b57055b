//! Photometric reprojection loss (MS-SSIM + L1), edge-aware inverse-depth
//! smoothness and the total self-supervised objective.
//!
//! Every loss exists twice: as a plain function on images and as a
//! [`Graph`] construction for training. Both follow the same arithmetic.

use crate::autodiff::{avg_pool2_values, blur_valid_values, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::{DepthMap, Image, ValidityMask};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Exponents of the five-scale pyramid, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Lower bound applied to per-scale terms before exponentiation.
const POW_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Gaussian,
    Box,
}

impl std::str::FromStr for WindowKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(WindowKind::Gaussian),
            "box" => Ok(WindowKind::Box),
            _ => Err(Error::Config(format!("unknown SSIM window {s:?} (expected gaussian or box)"))),
        }
    }
}

impl std::fmt::Display for WindowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WindowKind::Gaussian => "gaussian",
            WindowKind::Box => "box",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub scales: usize,
    pub smoothness_weight: f64,
    pub window: WindowKind,
    pub window_size: usize,
    pub window_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta: 0.15,
            scales: 3,
            smoothness_weight: 1e-3,
            window: WindowKind::Gaussian,
            window_size: 11,
            window_sigma: 1.5,
        }
    }
}

impl LossConfig {
    /// Five scales once both sides reach 160 px, three below.
    pub fn default_scales(width: usize, height: usize) -> usize {
        if width.min(height) >= 160 {
            5
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss weights need alpha, beta >= 0 with a positive sum, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.scales == 0 || self.scales > MS_SSIM_WEIGHTS.len() {
            return Err(Error::Config(format!("ms-ssim scales must lie in 1..=5, got {}", self.scales)));
        }
        if !(self.smoothness_weight >= 0.0) {
            return Err(Error::Config("smoothness weight must be non-negative".into()));
        }
        if self.window_size == 0 || self.window_size.is_multiple_of(2) {
            return Err(Error::Config(format!("SSIM window size must be odd, got {}", self.window_size)));
        }
        if self.window == WindowKind::Gaussian && !(self.window_sigma > 0.0) {
            return Err(Error::Config("gaussian window needs a positive sigma".into()));
        }
        Ok(())
    }

    /// Normalised 1-D window; the 2-D window is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let n = self.window_size;
        let raw: Vec<f64> = match self.window {
            WindowKind::Box => vec![1.0; n],
            WindowKind::Gaussian => {
                let c = (n / 2) as f64;
                (0..n)
                    .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.window_sigma.powi(2))).exp())
                    .collect()
            }
        };
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Exponents for an `m`-scale pyramid: the standard five for `m = 5`,
/// otherwise the first `m` renormalised to sum to one.
pub fn scale_weights(m: usize) -> Vec<f64> {
    if m == MS_SSIM_WEIGHTS.len() {
        return MS_SSIM_WEIGHTS.to_vec();
    }
    let w = &MS_SSIM_WEIGHTS[..m];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub reproj: f64,
    pub tikhonov: f64,
    pub total: f64,
}

/// Sums the two terms; any non-finite part is an error.
pub fn total_loss(reproj: f64, tikhonov: f64) -> Result<LossBreakdown> {
    if !reproj.is_finite() || !tikhonov.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch_index: None,
            detail: format!("reproj={reproj}, tikhonov={tikhonov}"),
        });
    }
    Ok(LossBreakdown {
        reproj,
        tikhonov,
        total: reproj + tikhonov,
    })
}

/// Per-pixel SSIM over the positions where the window fits, averaged over
/// channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

struct Planes {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Planes {
    fn of(img: &Image) -> Self {
        Planes {
            c: img.channels(),
            h: img.height(),
            w: img.width(),
            data: img.to_chw().into_data(),
        }
    }

    fn blur(&self, data: &[f64], kernel: &[f64]) -> Vec<f64> {
        blur_valid_values(data, self.c, self.h, self.w, kernel)
    }

    fn pool(&self) -> Planes {
        Planes {
            c: self.c,
            h: self.h / 2,
            w: self.w / 2,
            data: avg_pool2_values(&self.data, self.c, self.h, self.w),
        }
    }
}

/// Luminance and contrast-structure maps, C×(H−k+1)×(W−k+1).
fn ssim_terms(x: &Planes, y: &Planes, kernel: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mx = x.blur(&x.data, kernel);
    let my = x.blur(&y.data, kernel);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let sxx = x.blur(&prod(&x.data, &x.data), kernel);
    let syy = x.blur(&prod(&y.data, &y.data), kernel);
    let sxy = x.blur(&prod(&x.data, &y.data), kernel);
    let n = mx.len();
    let mut l = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cxy = sxy[i] - a * b;
        l.push((2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1));
        cs.push((2.0 * cxy + SSIM_C2) / (vx + vy + SSIM_C2));
    }
    (l, cs)
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::invalid(format!(
            "image dimensions differ: {}×{}×{} vs {}×{}×{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn ssim(a: &Image, b: &Image, cfg: &LossConfig) -> Result<SsimMap> {
    check_pair(a, b)?;
    let k = cfg.window_size;
    if a.width() < k || a.height() < k {
        return Err(Error::invalid(format!(
            "{}×{} image is smaller than the {k}-pixel SSIM window",
            a.width(),
            a.height()
        )));
    }
    let (x, y) = (Planes::of(a), Planes::of(b));
    let (l, cs) = ssim_terms(&x, &y, &cfg.kernel());
    let (ho, wo) = (x.h - k + 1, x.w - k + 1);
    let mut values = vec![0.0; ho * wo];
    for ci in 0..x.c {
        for (p, v) in values.iter_mut().enumerate() {
            *v += l[ci * ho * wo + p] * cs[ci * ho * wo + p] / x.c as f64;
        }
    }
    Ok(SsimMap {
        width: wo,
        height: ho,
        values,
    })
}

/// Window positions whose whole window lies on valid pixels.
fn erode(mask: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut out = vec![false; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).all(|i| (0..k).all(|j| mask[(y + i) * w + x + j]));
        }
    }
    out
}

/// A 2×2 block is valid only when all four pixels are.
fn pool_mask(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![false; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let at = |yy: usize, xx: usize| mask[yy * w + xx];
            out[y * wo + x] = at(2 * y, 2 * x) && at(2 * y, 2 * x + 1) && at(2 * y + 1, 2 * x) && at(2 * y + 1, 2 * x + 1);
        }
    }
    out
}

/// Masks for each scale of the pyramid, already eroded by the window and
/// repeated over channels. Errors if the image is too small or any scale
/// has no valid window.
fn pyramid_masks(
    mask: Option<&ValidityMask>,
    c: usize,
    h: usize,
    w: usize,
    cfg: &LossConfig,
) -> Result<Vec<Vec<bool>>> {
    let k = cfg.window_size;
    let (mut ch, mut cw) = (h, w);
    let mut m = match mask {
        Some(m) => m.data().to_vec(),
        None => vec![true; h * w],
    };
    let mut out = Vec::with_capacity(cfg.scales);
    for j in 0..cfg.scales {
        if ch < k || cw < k {
            return Err(Error::invalid(format!(
                "{w}×{h} image is too small for {} scales with a {k}-pixel window",
                cfg.scales
            )));
        }
        let eroded = erode(&m, ch, cw, k);
        if !eroded.iter().any(|&b| b) {
            return Err(Error::NoValidPixels);
        }
        out.push(eroded.repeat(c));
        if j + 1 < cfg.scales {
            m = pool_mask(&m, ch, cw);
            ch /= 2;
            cw /= 2;
        }
    }
    Ok(out)
}

fn masked_mean(v: &[f64], mask: &[bool]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, &m) in v.iter().zip(mask) {
        if m {
            s += x;
            n += 1;
        }
    }
    s / n as f64
}

/// Multi-scale SSIM restricted to windows that lie fully on valid pixels.
/// Contrast-structure means enter at every scale but the coarsest, which
/// contributes its luminance × contrast-structure mean; with one scale the
/// result is the mean SSIM.
pub fn ms_ssim_masked(a: &Image, b: &Image, mask: Option<&ValidityMask>, cfg: &LossConfig) -> Result<f64> {
    check_pair(a, b)?;
    cfg.validate()?;
    let masks = pyramid_masks(mask, a.channels(), a.height(), a.width(), cfg)?;
    let kernel = cfg.kernel();
    let weights = scale_weights(cfg.scales);
    let (mut x, mut y) = (Planes::of(a), Planes::of(b));
    let mut out = 1.0;
    for j in 0..cfg.scales {
        let (l, cs) = ssim_terms(&x, &y, &kernel);
        let last = j + 1 == cfg.scales;
        let term = if last {
            let lcs: Vec<f64> = l.iter().zip(&cs).map(|(p, q)| p * q).collect();
            masked_mean(&lcs, &masks[j])
        } else {
            masked_mean(&cs, &masks[j])
        };
        out *= if cfg.scales == 1 {
            term
        } else {
            term.max(POW_FLOOR).powf(weights[j])
        };
        if !last {
            x = x.pool();
            y = y.pool();
        }
    }
    Ok(out)
}

pub fn ms_ssim(a: &Image, b: &Image, cfg: &LossConfig) -> Result<f64> {
    ms_ssim_masked(a, b, None, cfg)
}

/// `α·(1 − MS-SSIM) + β·mean|I_t − I_st|` over valid pixels.
pub fn reprojection_loss(target: &Image, synth: &Image, mask: &ValidityMask, cfg: &LossConfig) -> Result<f64> {
    check_pair(target, synth)?;
    if mask.width() != target.width() || mask.height() != target.height() {
        return Err(Error::invalid("mask dimensions do not match the images"));
    }
    if mask.count() == 0 {
        return Err(Error::NoValidPixels);
    }
    let c = target.channels();
    let mut l1 = 0.0;
    for (p, &m) in mask.data().iter().enumerate() {
        if m {
            for ci in 0..c {
                l1 += (target.data()[p * c + ci] - synth.data()[p * c + ci]).abs();
            }
        }
    }
    l1 /= (mask.count() * c) as f64;
    let ssim_term = if cfg.alpha == 0.0 {
        0.0
    } else {
        cfg.alpha * (1.0 - ms_ssim_masked(target, synth, Some(mask), cfg)?)
    };
    Ok(ssim_term + cfg.beta * l1)
}

/// `exp(−mean_c |∂I|)` along x (C×H×(W−1) → H×(W−1)) and y.
fn edge_weights(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut wx = Vec::with_capacity(h * (w - 1));
    for y in 0..h {
        for x in 0..w - 1 {
            let g: f64 = (0..c).map(|ci| (img.get(x + 1, y, ci) - img.get(x, y, ci)).abs()).sum();
            wx.push((-g / c as f64).exp());
        }
    }
    let mut wy = Vec::with_capacity((h - 1) * w);
    for y in 0..h - 1 {
        for x in 0..w {
            let g: f64 = (0..c).map(|ci| (img.get(x, y + 1, ci) - img.get(x, y, ci)).abs()).sum();
            wy.push((-g / c as f64).exp());
        }
    }
    (wx, wy)
}

fn check_depth_image(depth: &DepthMap, img: &Image) -> Result<()> {
    if depth.width() != img.width() || depth.height() != img.height() {
        return Err(Error::invalid("depth and image dimensions differ"));
    }
    if depth.width() < 2 || depth.height() < 2 {
        return Err(Error::invalid("smoothness needs at least 2×2 pixels"));
    }
    Ok(())
}

/// `weight·(mean|∂x d*|·e^{−|∂x I|} + mean|∂y d*|·e^{−|∂y I|})` with
/// `d* = (1/D)/mean(1/D)`, image gradients averaged over channels.
pub fn tikhonov_regulariser(depth: &DepthMap, img: &Image, weight: f64) -> Result<f64> {
    check_depth_image(depth, img)?;
    if weight == 0.0 {
        return Ok(0.0);
    }
    let (w, h) = (depth.width(), depth.height());
    let inv: Vec<f64> = depth.data().iter().map(|d| 1.0 / d).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    let dn: Vec<f64> = inv.iter().map(|v| v * (1.0 / mean)).collect();
    let (wx, wy) = edge_weights(img);
    let mut sx = 0.0;
    for y in 0..h {
        for x in 0..w - 1 {
            sx += (dn[y * w + x + 1] - dn[y * w + x]).abs() * wx[y * (w - 1) + x];
        }
    }
    let mut sy = 0.0;
    for y in 0..h - 1 {
        for x in 0..w {
            sy += (dn[(y + 1) * w + x] - dn[y * w + x]).abs() * wy[y * w + x];
        }
    }
    Ok(weight * (sx / (h * (w - 1)) as f64 + sy / ((h - 1) * w) as f64))
}

impl Graph {
    fn ssim_terms(&mut self, x: Var, y: Var, kernel: &[f64]) -> (Var, Var) {
        let mx = self.blur_valid(x, kernel);
        let my = self.blur_valid(y, kernel);
        let xx = self.mul(x, x);
        let yy = self.mul(y, y);
        let xy = self.mul(x, y);
        let bxx = self.blur_valid(xx, kernel);
        let byy = self.blur_valid(yy, kernel);
        let bxy = self.blur_valid(xy, kernel);
        let mxx = self.mul(mx, mx);
        let myy = self.mul(my, my);
        let mxy = self.mul(mx, my);
        let vx = self.sub(bxx, mxx);
        let vy = self.sub(byy, myy);
        let cxy = self.sub(bxy, mxy);

        let ln = self.scale(mxy, 2.0);
        let ln = self.add_scalar(ln, SSIM_C1);
        let ld = self.add(mxx, myy);
        let ld = self.add_scalar(ld, SSIM_C1);
        let l = self.div(ln, ld);

        let cn = self.scale(cxy, 2.0);
        let cn = self.add_scalar(cn, SSIM_C2);
        let cd = self.add(vx, vy);
        let cd = self.add_scalar(cd, SSIM_C2);
        let cs = self.div(cn, cd);
        (l, cs)
    }

    /// Graph form of [`ms_ssim_masked`] on C×H×W tensors.
    pub fn ms_ssim(&mut self, x: Var, y: Var, mask: Option<&ValidityMask>, cfg: &LossConfig) -> Result<Var> {
        cfg.validate()?;
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s != self.value(y).shape() {
            return Err(Error::invalid(format!("ms-ssim needs two equal C×H×W tensors, got {s:?}")));
        }
        let masks = pyramid_masks(mask, s[0], s[1], s[2], cfg)?;
        let kernel = cfg.kernel();
        let weights = scale_weights(cfg.scales);
        let (mut x, mut y) = (x, y);
        let mut out: Option<Var> = None;
        for j in 0..cfg.scales {
            let (l, cs) = self.ssim_terms(x, y, &kernel);
            let last = j + 1 == cfg.scales;
            let term = if last {
                let lcs = self.mul(l, cs);
                self.masked_mean(lcs, masks[j].clone())
            } else {
                self.masked_mean(cs, masks[j].clone())
            };
            let term = if cfg.scales == 1 {
                term
            } else {
                let t = self.clamp_min(term, POW_FLOOR);
                self.pow(t, weights[j])
            };
            out = Some(match out {
                None => term,
                Some(acc) => self.mul(acc, term),
            });
            if !last {
                x = self.avg_pool2(x);
                y = self.avg_pool2(y);
            }
        }
        Ok(out.expect("at least one scale"))
    }

    /// Graph form of [`reprojection_loss`] on C×H×W tensors.
    pub fn reprojection_loss(&mut self, target: Var, synth: Var, mask: &ValidityMask, cfg: &LossConfig) -> Result<Var> {
        let s = self.value(target).shape().to_vec();
        if s.len() != 3 || s != self.value(synth).shape() || s[1] != mask.height() || s[2] != mask.width() {
            return Err(Error::invalid("reprojection loss inputs disagree in shape"));
        }
        if mask.count() == 0 {
            return Err(Error::NoValidPixels);
        }
        let diff = self.sub(target, synth);
        let abs = self.abs(diff);
        let l1 = self.masked_mean(abs, mask.data().repeat(s[0]));
        let l1 = self.scale(l1, cfg.beta);
        if cfg.alpha == 0.0 {
            return Ok(l1);
        }
        let ms = self.ms_ssim(target, synth, Some(mask), cfg)?;
        let dis = self.scale(ms, -cfg.alpha);
        let dis = self.add_scalar(dis, cfg.alpha);
        Ok(self.add(dis, l1))
    }

    /// Graph form of [`tikhonov_regulariser`]; `depth` holds H·W values and
    /// the image is a constant.
    pub fn tikhonov(&mut self, depth: Var, img: &Image, weight: f64) -> Result<Var> {
        let (w, h) = (img.width(), img.height());
        if self.value(depth).len() != w * h || w < 2 || h < 2 {
            return Err(Error::invalid("depth and image dimensions differ"));
        }
        let d = self.reshape(depth, &[w * h, 1]);
        let inv = self.recip(d);
        let mean = self.mean(inv);
        let norm = self.recip(mean);
        let dn = self.mul_cols(inv, norm);
        let dn = self.reshape(dn, &[1, h, w]);
        let (wx, wy) = edge_weights(img);
        let gx = self.diff_x(dn);
        let gx = self.abs(gx);
        let ex = self.constant(Tensor::from_vec(&[1, h, w - 1], wx));
        let sx = self.mul(gx, ex);
        let sx = self.mean(sx);
        let gy = self.diff_y(dn);
        let gy = self.abs(gy);
        let ey = self.constant(Tensor::from_vec(&[1, h - 1, w], wy));
        let sy = self.mul(gy, ey);
        let sy = self.mean(sy);
        let s = self.add(sx, sy);
        Ok(self.scale(s, weight))
    }
}
