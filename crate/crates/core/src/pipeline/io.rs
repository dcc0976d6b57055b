//! On-disk formats: binary PPM images, `DPTH` float rasters, TUM
//! trajectories and scene directories built from them.
//!
//! A scene directory holds `scene.txt` (key = value metadata including the
//! seed and intrinsics), `trajectory.txt` (camera-to-world poses),
//! `frames/NNNNNN.ppm` and `depth/NNNNNN.dpth`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{PoseSE3, RotationMatrix};
use crate::warp::{DepthMap, Image, Intrinsics};

use super::scene::{SceneKind, SceneSequence};

/// 8-bit binary PPM; values are rounded from `[0, 1]`.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                let v = img.get(x, y, c.min(img.channels() - 1));
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn token(&mut self) -> Result<(usize, &str)> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::parse(self.pos, "header ends early")),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::parse(start, "header is not text"))?;
        Ok((start, s))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (at, t) = self.token()?;
        t.parse()
            .map_err(|_| Error::parse(at, format!("expected {what}, found {t:?}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let (at, magic) = r.token()?;
    if magic != "P6" {
        return Err(Error::parse(at, format!("expected P6 magic, found {magic:?}")));
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maximum value")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(maxval_at, format!("only 8-bit images are supported, maximum value is {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(0, "image dimensions must be positive"));
    }
    let start = r.pos + 1;
    let need = width * height * 3;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(Error::parse(
            bytes.len(),
            format!("expected {need} bytes of pixel data, found {have}"),
        ));
    }
    let data = bytes[start..start + need].iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::new(width, height, 3, data)
}

/// `DPTH <W> <H>\n` then W·H little-endian f32 values, row-major.
pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = format!("DPTH {} {}\n", d.width(), d.height()).into_bytes();
    for v in d.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(bytes.len(), "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(0, "header is not text"))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 3 || parts[0] != "DPTH" {
        return Err(Error::parse(0, format!("expected \"DPTH <W> <H>\", found {header:?}")));
    }
    let dim = |s: &str, at: usize| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(at, format!("expected a dimension, found {s:?}")))
    };
    let w = dim(parts[1], 5)?;
    let h = dim(parts[2], 6 + parts[1].len())?;
    let start = nl + 1;
    let need = w * h * 4;
    let have = bytes.len() - start;
    if have != need {
        return Err(Error::parse(
            start + have.min(need),
            format!("expected {need} bytes of depth data, found {have}"),
        ));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DepthMap::new(w, h, data)
}

fn quaternion_of(r: &RotationMatrix) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r.matrix()))
}

/// One line per pose: `index tx ty tz qx qy qz qw`.
pub fn format_tum(poses: &[PoseSE3]) -> String {
    let mut s = String::new();
    for (i, p) in poses.iter().enumerate() {
        let q = quaternion_of(&p.rotation);
        let t = p.translation;
        let _ = writeln!(
            s,
            "{i} {:.10} {:.10} {:.10} {:.10} {:.10} {:.10} {:.10}",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

/// Parses TUM lines, skipping blanks and `#` comments; quaternions are
/// normalised. Returns timestamps and poses.
pub fn parse_tum(text: &str) -> Result<(Vec<f64>, Vec<PoseSE3>)> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(at, format!("non-numeric field in {body:?}")))?;
        if vals.len() != 8 {
            return Err(Error::parse(at, format!("expected 8 fields, found {}", vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-12) || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(at, "quaternion has zero length or values are not finite"));
        }
        let r: Matrix3<f64> = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        stamps.push(vals[0]);
        poses.push(PoseSE3::new(
            RotationMatrix::from_matrix_unchecked(r),
            Vector3::new(vals[1], vals[2], vals[3]),
        ));
    }
    Ok((stamps, poses))
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&fs::read(path)?)
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    Ok(fs::write(path, encode_depth(d))?)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<PoseSE3>> {
    Ok(parse_tum(&fs::read_to_string(path)?)?.1)
}

pub fn save_trajectory(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    Ok(fs::write(path, format_tum(poses))?)
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

pub fn save_sequence(dir: &Path, s: &SceneSequence) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("depth"))?;
    let k = &s.intrinsics;
    let meta = format!(
        "kind = {}\nseed = {}\nframes = {}\nwidth = {}\nheight = {}\nfx = {}\nfy = {}\ncx = {}\ncy = {}\n",
        s.kind,
        s.seed,
        s.len(),
        s.width(),
        s.height(),
        k.fx,
        k.fy,
        k.cx,
        k.cy
    );
    fs::write(dir.join("scene.txt"), meta)?;
    save_trajectory(&dir.join("trajectory.txt"), &s.poses)?;
    for (i, (f, d)) in s.frames.iter().zip(&s.depths).enumerate() {
        write_image(&dir.join("frames").join(frame_name(i, "ppm")), f)?;
        write_depth(&dir.join("depth").join(frame_name(i, "dpth")), d)?;
    }
    Ok(())
}

/// Reads a directory written by [`save_sequence`].
pub fn load_sequence(dir: &Path) -> Result<SceneSequence> {
    let meta = fs::read_to_string(dir.join("scene.txt"))?;
    let mut get = std::collections::HashMap::new();
    let mut offset = 0;
    for line in meta.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::parse(at, format!("expected key = value, found {body:?}")))?;
        get.insert(k.trim().to_string(), (at, v.trim().to_string()));
    }
    let field = |k: &str| -> Result<&(usize, String)> {
        get.get(k)
            .ok_or_else(|| Error::parse(meta.len(), format!("scene.txt lacks {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        let (at, v) = field(k)?;
        v.parse()
            .map_err(|_| Error::parse(*at, format!("{k} is not a number: {v:?}")))
    };
    let kind: SceneKind = {
        let (at, v) = field("kind")?;
        v.parse().map_err(|_| Error::parse(*at, format!("unknown scene kind {v:?}")))?
    };
    let count = num("frames")? as usize;
    let intrinsics = Intrinsics::new(num("fx")?, num("fy")?, num("cx")?, num("cy")?)?;
    let poses = read_trajectory(&dir.join("trajectory.txt"))?;
    let mut frames = Vec::with_capacity(count);
    let mut depths = Vec::with_capacity(count);
    for i in 0..count {
        frames.push(read_image(&dir.join("frames").join(frame_name(i, "ppm")))?);
        depths.push(read_depth(&dir.join("depth").join(frame_name(i, "dpth")))?);
    }
    let s = SceneSequence {
        kind,
        seed: num("seed")? as u64,
        frames,
        depths,
        poses,
        intrinsics,
        surface: None,
    };
    s.validate()?;
    Ok(s)
}
