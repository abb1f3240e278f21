//! Procedurally rendered talking-head avatar with closed-form ground truth.
//!
//! The face is an ellipse whose placement is driven by head pose (yaw shifts
//! it horizontally and foreshortens its width, pitch shifts it vertically,
//! roll rotates it in-plane). The mouth is an ellipse whose height is
//! proportional to the aperture. Landmarks come from the same placement used
//! for drawing, and [`extract_pose`] / [`extract_landmarks`] invert the
//! placement from pixels alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const POSE_LIMIT_DEG: f64 = 45.0;
pub const MIN_IMAGE_SIZE: usize = 32;

/// Horizontal face-centre travel at |yaw| = 45°, as a fraction of width.
const YAW_SHIFT: f64 = 0.2;
/// Vertical face-centre travel at |pitch| = 45°, as a fraction of height.
const PITCH_SHIFT: f64 = 0.15;
const EYE_U: f64 = 0.42;
const EYE_V: f64 = -0.28;
const EYE_RU: f64 = 0.16;
const EYE_RV: f64 = 0.10;
const MOUTH_V: f64 = 0.45;
const MOUTH_HALF_WIDTH: f64 = 0.38;
const MOUTH_MAX_HALF_HEIGHT: f64 = 0.16;
const SUPERSAMPLE: usize = 4;

pub const LANDMARK_NAMES: [&str; 7] = [
    "eye_left",
    "eye_right",
    "face_center",
    "mouth_bottom",
    "mouth_left",
    "mouth_right",
    "mouth_top",
];

/// Head pose in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseVector {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl PoseVector {
    pub const FRONTAL: PoseVector = PoseVector {
        roll: 0.0,
        pitch: 0.0,
        yaw: 0.0,
    };

    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in [("roll", self.roll), ("pitch", self.pitch), ("yaw", self.yaw)] {
            if !v.is_finite() || v.abs() > POSE_LIMIT_DEG {
                return Err(Error::invalid(format!(
                    "{axis} {v} outside [-{POSE_LIMIT_DEG}, {POSE_LIMIT_DEG}] degrees"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn rgb(height: usize, width: usize) -> Self {
        Self {
            channels: 3,
            height,
            width,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn num_values(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Colours (RGB in `[0, 1]`) and proportions fixed by an identity seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Identity {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub eye: [f64; 3],
    pub mouth: [f64; 3],
    /// Face semi-axes as fractions of width and height.
    pub face_rx: f64,
    pub face_ry: f64,
}

impl Identity {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d3a_7f00_c0ff_ee00);
        let mut jitter = |base: [f64; 3]| base.map(|c| (c + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0));
        let background = jitter([0.78, 0.86, 0.92]);
        let skin = jitter([0.86, 0.64, 0.50]);
        let eye = jitter([0.14, 0.11, 0.12]);
        let mouth = jitter([0.56, 0.10, 0.16]);
        let face_rx = 0.26 * (1.0 + rng.random_range(-0.05..0.05));
        let face_ry = 0.34 * (1.0 + rng.random_range(-0.05..0.05));
        Self {
            background,
            skin,
            eye,
            mouth,
            face_rx,
            face_ry,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvatarParams {
    pub aperture: f64,
    pub pose: PoseVector,
    pub identity_seed: u64,
}

impl AvatarParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.aperture) {
            return Err(Error::invalid(format!("aperture {} outside [0, 1]", self.aperture)));
        }
        self.pose.validate()
    }
}

/// Named 2-D points in pixel coordinates (x right, y down, pixel centres at +0.5).
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: BTreeMap<String, [f64; 2]>,
}

impl LandmarkSet {
    pub fn get(&self, name: &str) -> Option<[f64; 2]> {
        self.points.get(name).copied()
    }

    pub fn within(&self, geometry: Geometry) -> bool {
        self.points.values().all(|&[x, y]| {
            (0.0..=geometry.width as f64).contains(&x) && (0.0..=geometry.height as f64).contains(&y)
        })
    }
}

/// Closed-form placement of the face in pixel space.
#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    rx: f64,
    ry: f64,
    mouth_hw: f64,
    mouth_hh: f64,
}

impl Placement {
    fn new(params: &AvatarParams, identity: &Identity, geometry: Geometry) -> Self {
        let (w, h) = (geometry.width as f64, geometry.height as f64);
        let p = params.pose;
        let theta = p.roll.to_radians();
        let rx = identity.face_rx * w * p.yaw.to_radians().cos();
        let ry = identity.face_ry * h;
        Self {
            cx: w / 2.0 + p.yaw / POSE_LIMIT_DEG * YAW_SHIFT * w,
            cy: h / 2.0 + p.pitch / POSE_LIMIT_DEG * PITCH_SHIFT * h,
            cos: theta.cos(),
            sin: theta.sin(),
            rx,
            ry,
            mouth_hw: MOUTH_HALF_WIDTH * rx,
            mouth_hh: params.aperture * MOUTH_MAX_HALF_HEIGHT * ry,
        }
    }

    fn to_image(&self, u: f64, v: f64) -> [f64; 2] {
        [
            self.cx + u * self.cos - v * self.sin,
            self.cy + u * self.sin + v * self.cos,
        ]
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }

    fn colour_at(&self, x: f64, y: f64, id: &Identity) -> [f64; 3] {
        let (u, v) = self.to_local(x, y);
        let in_ellipse = |du: f64, dv: f64, a: f64, b: f64| a > 0.0 && b > 0.0 && (du / a).powi(2) + (dv / b).powi(2) <= 1.0;
        if !in_ellipse(u, v, self.rx, self.ry) {
            return id.background;
        }
        if in_ellipse(u, v - MOUTH_V * self.ry, self.mouth_hw, self.mouth_hh) {
            return id.mouth;
        }
        let (eu, ev) = (EYE_U * self.rx, EYE_V * self.ry);
        let (ea, eb) = (EYE_RU * self.rx, EYE_RV * self.ry);
        if in_ellipse(u - eu, v - ev, ea, eb) || in_ellipse(u + eu, v - ev, ea, eb) {
            return id.eye;
        }
        id.skin
    }

    fn landmarks(&self) -> LandmarkSet {
        let my = MOUTH_V * self.ry;
        let (eu, ev) = (EYE_U * self.rx, EYE_V * self.ry);
        let pts = [
            ("eye_left", self.to_image(-eu, ev)),
            ("eye_right", self.to_image(eu, ev)),
            ("face_center", [self.cx, self.cy]),
            ("mouth_bottom", self.to_image(0.0, my + self.mouth_hh)),
            ("mouth_left", self.to_image(-self.mouth_hw, my)),
            ("mouth_right", self.to_image(self.mouth_hw, my)),
            ("mouth_top", self.to_image(0.0, my - self.mouth_hh)),
        ];
        LandmarkSet {
            points: pts.into_iter().map(|(n, p)| (n.to_string(), p)).collect(),
        }
    }
}

fn check_geometry(geometry: Geometry) -> Result<()> {
    if geometry.channels != 3 || geometry.height < MIN_IMAGE_SIZE || geometry.width < MIN_IMAGE_SIZE {
        return Err(Error::invalid(format!(
            "avatar needs 3 channels and at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE} pixels, got {geometry:?}"
        )));
    }
    Ok(())
}

/// Ground-truth landmarks for `params` without rendering.
pub fn avatar_landmarks(params: &AvatarParams, geometry: Geometry) -> Result<LandmarkSet> {
    params.validate()?;
    check_geometry(geometry)?;
    let identity = Identity::from_seed(params.identity_seed);
    Ok(Placement::new(params, &identity, geometry).landmarks())
}

/// Renders a `[3, height, width]` image in `[-1, 1]` plus its landmarks.
pub fn render_avatar<T: Scalar>(params: &AvatarParams, geometry: Geometry) -> Result<(Tensor<T>, LandmarkSet)> {
    params.validate()?;
    check_geometry(geometry)?;
    let identity = Identity::from_seed(params.identity_seed);
    let place = Placement::new(params, &identity, geometry);
    let (h, w) = (geometry.height, geometry.width);
    let mut data = vec![T::zero(); 3 * h * w];
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let c = place.colour_at(x, y, &identity);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                data[(k * h + py) * w + px] = T::lit(2.0 * acc[k] / n - 1.0);
            }
        }
    }
    Ok((Tensor::from_vec(&geometry.shape(), data)?, place.landmarks()))
}

fn pixel_rgb<T: Scalar>(image: &Tensor<T>, x: usize, y: usize) -> [f64; 3] {
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    [0, 1, 2].map(|k| (d[(k * h + y) * w + x].as_f64() + 1.0) / 2.0)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Face-region moments recovered from pixels.
#[derive(Clone, Copy, Debug)]
struct FaceMoments {
    cx: f64,
    cy: f64,
    theta: f64,
    /// Semi-axes implied by the second moments (`2 * sqrt(eigenvalue)`).
    minor: f64,
    major: f64,
}

fn face_moments<T: Scalar>(image: &Tensor<T>, identity: &Identity) -> Result<FaceMoments> {
    let (h, w) = (image.dim(1), image.dim(2));
    let to_skin = sub3(identity.skin, identity.background);
    let norm = dot3(to_skin, to_skin).sqrt();
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    let mut weights = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = sub3(pixel_rgb(image, x, y), identity.background);
            let wgt = (dot3(d, d).sqrt() / norm).min(1.0);
            weights[y * w + x] = wgt;
            m0 += wgt;
            mx += wgt * (x as f64 + 0.5);
            my += wgt * (y as f64 + 0.5);
        }
    }
    if m0 < 1.0 {
        return Err(Error::invalid("no face pixels found"));
    }
    let (cx, cy) = (mx / m0, my / m0);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let wgt = weights[y * w + x];
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            m20 += wgt * dx * dx;
            m02 += wgt * dy * dy;
            m11 += wgt * dx * dy;
        }
    }
    let (m20, m02, m11) = (m20 / m0, m02 / m0, m11 / m0);
    // Major axis is the face's vertical axis; its tilt from image-vertical is the roll.
    let theta = 0.5 * (-2.0 * m11).atan2(m02 - m20);
    let tr = m20 + m02;
    let disc = ((m20 - m02).powi(2) + 4.0 * m11 * m11).sqrt();
    let (l_big, l_small) = ((tr + disc) / 2.0, ((tr - disc) / 2.0).max(0.0));
    Ok(FaceMoments {
        cx,
        cy,
        theta,
        minor: 2.0 * l_small.sqrt(),
        major: 2.0 * l_big.sqrt(),
    })
}

/// Recovers head pose from a rendered (or generated) avatar image by
/// inverting the closed-form face placement.
pub fn extract_pose<T: Scalar>(image: &Tensor<T>, identity: &Identity) -> Result<PoseVector> {
    let (h, w) = (image.dim(1) as f64, image.dim(2) as f64);
    let m = face_moments(image, identity)?;
    Ok(PoseVector {
        roll: m.theta.to_degrees(),
        pitch: (m.cy - h / 2.0) / (PITCH_SHIFT * h) * POSE_LIMIT_DEG,
        yaw: (m.cx - w / 2.0) / (YAW_SHIFT * w) * POSE_LIMIT_DEG,
    })
}

/// Recovers landmarks from pixels: face centre and orientation from the face
/// mask moments, eyes and mouth from the centroid and extent of their colour
/// masks in the face-aligned frame.
pub fn extract_landmarks<T: Scalar>(image: &Tensor<T>, identity: &Identity) -> Result<LandmarkSet> {
    let (h, w) = (image.dim(1), image.dim(2));
    let m = face_moments(image, identity)?;
    let place = Placement {
        cx: m.cx,
        cy: m.cy,
        cos: m.theta.cos(),
        sin: m.theta.sin(),
        rx: m.minor,
        ry: m.major,
        mouth_hw: MOUTH_HALF_WIDTH * m.minor,
        mouth_hh: 0.0,
    };
    let to_mouth = sub3(identity.mouth, identity.skin);
    let to_eye = sub3(identity.eye, identity.skin);
    let mut mouth = [0.0f64; 6]; // m0, su, sv, suu, svv, unused
    let mut eyes = [[0.0f64; 3]; 2]; // per side: m0, su, sv
    for y in 0..h {
        for x in 0..w {
            let (u, v) = place.to_local(x as f64 + 0.5, y as f64 + 0.5);
            if (u / place.rx).powi(2) + (v / place.ry).powi(2) > 0.85 {
                continue;
            }
            let d = sub3(pixel_rgb(image, x, y), identity.skin);
            if v > 0.1 * place.ry && u.abs() < 0.75 * place.rx {
                let wgt = (dot3(d, to_mouth) / dot3(to_mouth, to_mouth)).clamp(0.0, 1.0);
                mouth[0] += wgt;
                mouth[1] += wgt * u;
                mouth[2] += wgt * v;
                mouth[3] += wgt * u * u;
                mouth[4] += wgt * v * v;
            } else if v < 0.0 {
                let wgt = (dot3(d, to_eye) / dot3(to_eye, to_eye)).clamp(0.0, 1.0);
                let side = usize::from(u > 0.0);
                eyes[side][0] += wgt;
                eyes[side][1] += wgt * u;
                eyes[side][2] += wgt * v;
            }
        }
    }
    let mut points = BTreeMap::new();
    points.insert("face_center".to_string(), [m.cx, m.cy]);
    for (side, name) in [(0, "eye_left"), (1, "eye_right")] {
        let e = eyes[side];
        let local = if e[0] > 1e-3 {
            (e[1] / e[0], e[2] / e[0])
        } else {
            let s = if side == 0 { -1.0 } else { 1.0 };
            (s * EYE_U * place.rx, EYE_V * place.ry)
        };
        points.insert(name.to_string(), place.to_image(local.0, local.1));
    }
    let (mu, mv, half_w, half_h) = if mouth[0] > 0.25 {
        let mu = mouth[1] / mouth[0];
        let mv = mouth[2] / mouth[0];
        let var_u = (mouth[3] / mouth[0] - mu * mu).max(0.0);
        let var_v = (mouth[4] / mouth[0] - mv * mv).max(0.0);
        (mu, mv, 2.0 * var_u.sqrt(), 2.0 * var_v.sqrt())
    } else {
        (0.0, MOUTH_V * place.ry, place.mouth_hw, 0.0)
    };
    points.insert("mouth_left".to_string(), place.to_image(mu - half_w, mv));
    points.insert("mouth_right".to_string(), place.to_image(mu + half_w, mv));
    points.insert("mouth_top".to_string(), place.to_image(mu, mv - half_h));
    points.insert("mouth_bottom".to_string(), place.to_image(mu, mv + half_h));
    Ok(LandmarkSet { points })
}
