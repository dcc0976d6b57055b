//! Procedural scenes: analytic surfaces with a solid 3-D texture, seen by a
//! camera on a smooth random trajectory.
//!
//! Each frame is rendered by lifting the analytic depth map with
//! [`backproject`], moving the points into the world with
//! [`transform_points`] and evaluating the texture there.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{AxisAngle, PoseSE3};
use crate::warp::{backproject, transform_points, DepthMap, Image, Intrinsics};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// One slanted plane in front of the camera.
    TexturedPlane,
    /// The camera inside a textured sphere.
    SphereRoom,
    /// A slanted back wall meeting a floor.
    TwoPlane,
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textured-plane" => Ok(SceneKind::TexturedPlane),
            "sphere-room" => Ok(SceneKind::SphereRoom),
            "two-plane" => Ok(SceneKind::TwoPlane),
            _ => Err(Error::Config(format!(
                "unknown scene kind {s:?} (expected textured-plane, sphere-room or two-plane)"
            ))),
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SceneKind::TexturedPlane => "textured-plane",
            SceneKind::SphereRoom => "sphere-room",
            SceneKind::TwoPlane => "two-plane",
        })
    }
}

/// `{X : n·X = offset}` with unit `n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// Ray parameter of the hit, if it lies ahead.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let den = self.normal.dot(dir);
        if den.abs() < 1e-12 {
            return None;
        }
        let lambda = (self.offset - self.normal.dot(origin)) / den;
        (lambda > 0.0).then_some(lambda)
    }

    pub fn residual(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Plane(Plane),
    Sphere { center: Vector3<f64>, radius: f64 },
    TwoPlane(Plane, Plane),
}

impl Surface {
    /// First hit of `origin + λ·dir` for λ > 0.
    pub fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Plane(p) => p.hit(origin, dir),
            Surface::Sphere { center, radius } => {
                let o = origin - center;
                let a = dir.norm_squared();
                let b = 2.0 * o.dot(dir);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let far = (-b + disc.sqrt()) / (2.0 * a);
                let near = (-b - disc.sqrt()) / (2.0 * a);
                [near, far].into_iter().find(|&l| l > 0.0)
            }
            Surface::TwoPlane(p, q) => match (p.hit(origin, dir), q.hit(origin, dir)) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            },
        }
    }

    /// Distance of `x` from the surface along its defining equation; zero on it.
    pub fn residual(&self, x: &Vector3<f64>) -> f64 {
        match self {
            Surface::Plane(p) => p.residual(x),
            Surface::Sphere { center, radius } => (x - center).norm() - radius,
            Surface::TwoPlane(p, q) => p.residual(x).abs().min(q.residual(x).abs()),
        }
    }
}

/// Sum of plane waves over world position, one phase set per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SolidTexture {
    pub waves: Vec<(Vector3<f64>, f64, [f64; 3])>,
}

impl SolidTexture {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = 10;
        let waves = (0..n)
            .map(|_| {
                let dir = loop {
                    let v = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                    if v.norm() > 0.1 {
                        break v.normalize();
                    }
                };
                let wavelength = rng.random_range(0.25..0.9);
                let amp = rng.random_range(0.3..1.0) * 0.45 / n as f64 * 2.0;
                let phases = [
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                ];
                (dir * (2.0 * PI / wavelength), amp, phases)
            })
            .collect();
        Self { waves }
    }

    pub fn eval(&self, x: &Vector3<f64>, channel: usize) -> f64 {
        0.5 + self
            .waves
            .iter()
            .map(|(k, a, ph)| a * (k.dot(x) + ph[channel % 3]).sin())
            .sum::<f64>()
    }
}

/// Frames, ground-truth depth and camera-to-world poses of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub kind: SceneKind,
    pub seed: u64,
    pub frames: Vec<Image>,
    pub depths: Vec<DepthMap>,
    pub poses: Vec<PoseSE3>,
    pub intrinsics: Intrinsics,
    /// Present for generated scenes.
    pub surface: Option<Surface>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frame_size().0
    }

    pub fn height(&self) -> usize {
        self.frame_size().1
    }

    fn frame_size(&self) -> (usize, usize) {
        self.frames.first().map(|f| (f.width(), f.height())).unwrap_or((0, 0))
    }

    /// `T_i = P_i⁻¹·P_{i+1}`: the camera motion from frame i to frame i+1,
    /// in frame i's coordinates.
    pub fn relative_poses(&self) -> Vec<PoseSE3> {
        self.poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 || self.depths.len() != n || self.poses.len() != n {
            return Err(Error::invalid(format!(
                "sequence has {} frames, {} depth maps and {} poses",
                n,
                self.depths.len(),
                self.poses.len()
            )));
        }
        let (w, h) = self.frame_size();
        for (f, d) in self.frames.iter().zip(&self.depths) {
            if f.width() != w || f.height() != h || d.width() != w || d.height() != h {
                return Err(Error::invalid("frames and depth maps differ in size"));
            }
        }
        for t in self.relative_poses() {
            if !t.translation.iter().all(|v| v.is_finite()) || !t.rotation.matrix().iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("non-finite pose delta"));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_SIZE: usize = 64;
pub const DEFAULT_FRAMES: usize = 60;

/// [`generate_scene_sized`] at 64×64 with 60 frames.
pub fn generate_scene(seed: u64, kind: SceneKind) -> SceneSequence {
    generate_scene_sized(seed, kind, DEFAULT_SIZE, DEFAULT_SIZE, DEFAULT_FRAMES)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn make_surface<R: Rng + ?Sized>(kind: SceneKind, rng: &mut R) -> Surface {
    let slanted = |rng: &mut R, distance: f64| {
        let n = Vector3::new(rng.random_range(0.25..0.4), rng.random_range(-0.25..0.25), -1.0).normalize();
        Plane {
            normal: n,
            offset: n.dot(&Vector3::new(0.0, 0.0, distance)),
        }
    };
    match kind {
        SceneKind::TexturedPlane => Surface::Plane(slanted(rng, 2.0)),
        SceneKind::SphereRoom => Surface::Sphere {
            center: Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.3),
            radius: rng.random_range(2.4..2.8),
        },
        SceneKind::TwoPlane => {
            let wall = slanted(rng, 2.5);
            // The camera y axis points down, so the floor lies at positive y.
            let floor_n = Vector3::new(0.0, 1.0, rng.random_range(-0.1..0.1)).normalize();
            let floor = Plane {
                normal: floor_n,
                offset: rng.random_range(0.6..0.8),
            };
            Surface::TwoPlane(wall, floor)
        }
    }
}

/// Lateral drift at constant speed plus a slow sinusoidal sway in height,
/// depth and orientation, centred on the middle frame.
fn make_trajectory<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Vec<PoseSE3> {
    let speed = rng.random_range(0.03..0.045) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let vel = Vector3::new(speed, rng.random_range(-0.005..0.005), rng.random_range(-0.005..0.005));
    let sway = Vector3::new(0.0, rng.random_range(0.05..0.1), rng.random_range(0.05..0.1));
    let turn = Vector3::new(rng.random_range(0.02..0.04), rng.random_range(0.02..0.04), rng.random_range(0.0..0.02));
    let omega = 2.0 * PI / rng.random_range(35.0..50.0);
    let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let mid = (frames as f64 - 1.0) / 2.0;
    (0..frames)
        .map(|i| {
            let s = i as f64 - mid;
            let a = omega * i as f64;
            let pos = vel * s
                + Vector3::new(0.0, sway.y * (a + phase[0]).sin(), sway.z * (a + phase[1]).sin());
            let rot = AxisAngle::new(
                turn.x * (a + phase[1]).sin(),
                turn.y * (a + phase[0]).cos(),
                turn.z * (a + phase[0] + phase[1]).sin(),
            );
            PoseSE3::from_axis_angle(rot, pos)
        })
        .collect()
}

/// Ground-truth depth of every pixel of a camera at `pose` (camera to
/// world) looking at `surface`.
pub fn analytic_depth(surface: &Surface, pose: &PoseSE3, k: &Intrinsics, width: usize, height: usize) -> DepthMap {
    DepthMap::from_fn(width, height, |x, y| {
        let dir = pose.rotation.matrix() * k.ray(x as f64, y as f64);
        surface.hit(&pose.translation, &dir).unwrap_or(f64::INFINITY)
    })
}

/// Lifts the depth map, moves it into the world and samples the texture.
pub fn render(texture: &SolidTexture, depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> Image {
    let world = transform_points(&backproject(depth, k), pose);
    let mut data = Vec::with_capacity(world.points.len() * 3);
    for (p, ok) in world.points.iter().zip(&world.valid) {
        for c in 0..3 {
            data.push(if *ok { texture.eval(p, c) } else { 0.0 });
        }
    }
    Image::new(depth.width(), depth.height(), 3, data).expect("sizes agree by construction")
}

/// Deterministic per `(seed, kind, size)`. The focal length equals the
/// image width.
pub fn generate_scene_sized(seed: u64, kind: SceneKind, width: usize, height: usize, frames: usize) -> SceneSequence {
    let k = Intrinsics::new(width as f64, width as f64, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
        .expect("positive focal length");
    let surface = make_surface(kind, &mut stream(seed, 1));
    let texture = SolidTexture::random(&mut stream(seed, 2));
    let poses = make_trajectory(frames, &mut stream(seed, 3));
    let depths: Vec<DepthMap> = poses.iter().map(|p| analytic_depth(&surface, p, &k, width, height)).collect();
    let images = depths.iter().zip(&poses).map(|(d, p)| render(&texture, d, p, &k)).collect();
    SceneSequence {
        kind,
        seed,
        frames: images,
        depths,
        poses,
        intrinsics: k,
        surface: Some(surface),
    }
}
