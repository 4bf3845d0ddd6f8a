//! Procedural scenes with known generating factors.
//!
//! A head is one large ellipsoid with an ellipsoidal nose and two dark eye
//! patches; a chair is a handful of boxes. Images are orthographic renders
//! with Lambertian shading under a directional light, background 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Factor;
use crate::tensor::{Scalar, Tensor};

pub const AZIMUTH_RANGE: (f64, f64) = (-90.0, 90.0);
pub const ELEVATION_RANGE: (f64, f64) = (-30.0, 30.0);
pub const LIGHT_RANGE: (f64, f64) = (-90.0, 90.0);
pub const INTRINSIC_DIM: usize = 4;

/// Fixed viewing conditions for chairs, which only vary azimuth and shape.
pub const CHAIR_ELEVATION: f64 = 15.0;
pub const CHAIR_LIGHT_AZIMUTH: f64 = 30.0;

const AMBIENT: f64 = 0.2;
/// Distance of the ray origins from the scene center.
const CAMERA_DISTANCE: f64 = 4.0;
/// Rays per pixel along each axis.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    #[default]
    Head,
    Chair,
}

impl ObjectKind {
    pub fn tag(self) -> u8 {
        match self {
            ObjectKind::Head => 0,
            ObjectKind::Chair => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ObjectKind::Head),
            1 => Some(ObjectKind::Chair),
            _ => None,
        }
    }

    /// Factors a batch of this object may vary.
    pub fn factors(self) -> &'static [Factor] {
        match self {
            ObjectKind::Head => &Factor::ALL,
            ObjectKind::Chair => &[Factor::Azimuth, Factor::Intrinsic],
        }
    }
}

/// Generating parameters of one image. Angles are in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub azimuth: f64,
    pub elevation: f64,
    pub light_azimuth: f64,
    /// Shape coefficients in `[-1, 1]`.
    ///
    /// Head: width, nose length, eye spacing, albedo.
    /// Chair: seat width, back height, leg length, arms (present when > 0).
    pub intrinsic: Vec<f64>,
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

impl SceneParams {
    /// Frontal view, frontal light, average shape.
    pub fn neutral() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            light_azimuth: 0.0,
            intrinsic: vec![0.0; INTRINSIC_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("azimuth", self.azimuth, AZIMUTH_RANGE),
            ("elevation", self.elevation, ELEVATION_RANGE),
            ("light azimuth", self.light_azimuth, LIGHT_RANGE),
        ];
        for (name, v, range) in checks {
            if !in_range(v, range) {
                return Err(Error::Domain(format!(
                    "{name} {v} outside [{}, {}]",
                    range.0, range.1
                )));
            }
        }
        if self.intrinsic.len() != INTRINSIC_DIM {
            return Err(Error::Domain(format!(
                "expected {INTRINSIC_DIM} intrinsic coefficients, got {}",
                self.intrinsic.len()
            )));
        }
        if let Some(v) = self.intrinsic.iter().find(|v| !in_range(**v, (-1.0, 1.0))) {
            return Err(Error::Domain(format!("intrinsic coefficient {v} outside [-1, 1]")));
        }
        Ok(())
    }

    /// Value of an extrinsic factor.
    pub fn factor_value(&self, factor: Factor) -> Option<f64> {
        match factor {
            Factor::Azimuth => Some(self.azimuth),
            Factor::Elevation => Some(self.elevation),
            Factor::LightAzimuth => Some(self.light_azimuth),
            Factor::Intrinsic => None,
        }
    }

    /// Whether `self` and `other` agree on every field except those of `factor`.
    pub fn differs_only_in(&self, other: &SceneParams, factor: Factor) -> bool {
        (factor == Factor::Azimuth || self.azimuth == other.azimuth)
            && (factor == Factor::Elevation || self.elevation == other.elevation)
            && (factor == Factor::LightAzimuth || self.light_azimuth == other.light_azimuth)
            && (factor == Factor::Intrinsic || self.intrinsic == other.intrinsic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Vec3 {
    x: f64,
    y: f64,
    z: f64,
}

const fn v3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    fn add(self, o: Vec3) -> Vec3 {
        v3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
    fn sub(self, o: Vec3) -> Vec3 {
        v3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
    fn scale(self, s: f64) -> Vec3 {
        v3(self.x * s, self.y * s, self.z * s)
    }
    fn div(self, o: Vec3) -> Vec3 {
        v3(self.x / o.x, self.y / o.y, self.z / o.z)
    }
    fn normalized(self) -> Vec3 {
        self.scale(1.0 / self.dot(self).sqrt())
    }
}

struct Ray {
    origin: Vec3,
    dir: Vec3,
}

/// Nearest hit: distance, outward normal, albedo.
type Hit = (f64, Vec3, f64);

struct Ellipsoid {
    center: Vec3,
    axes: Vec3,
}

impl Ellipsoid {
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let o = ray.origin.sub(self.center).div(self.axes);
        let d = ray.dir.div(self.axes);
        let a = d.dot(d);
        let b = o.dot(d);
        let c = o.dot(o) - 1.0;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / a;
        if t <= 0.0 {
            return None;
        }
        let p = ray.origin.add(ray.dir.scale(t)).sub(self.center);
        let ax2 = v3(
            self.axes.x * self.axes.x,
            self.axes.y * self.axes.y,
            self.axes.z * self.axes.z,
        );
        Some((t, p.div(ax2).normalized()))
    }
}

struct Cuboid {
    center: Vec3,
    half: Vec3,
}

impl Cuboid {
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let o = ray.origin.sub(self.center);
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut normal = v3(0.0, 0.0, 0.0);
        let axes = [
            (o.x, ray.dir.x, self.half.x, v3(1.0, 0.0, 0.0)),
            (o.y, ray.dir.y, self.half.y, v3(0.0, 1.0, 0.0)),
            (o.z, ray.dir.z, self.half.z, v3(0.0, 0.0, 1.0)),
        ];
        for (oc, dc, h, axis) in axes {
            if dc == 0.0 {
                if oc.abs() > h {
                    return None;
                }
                continue;
            }
            let t1 = (-h - oc) / dc;
            let t2 = (h - oc) / dc;
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                // entering through the face whose outward normal opposes the ray
                normal = if dc > 0.0 { axis.scale(-1.0) } else { axis };
            }
            t_far = t_far.min(hi);
        }
        (t_near <= t_far && t_near > 0.0).then_some((t_near, normal))
    }
}

fn closer(best: Option<Hit>, candidate: Option<Hit>) -> Option<Hit> {
    match (best, candidate) {
        (Some(b), Some(c)) => Some(if c.0 < b.0 { c } else { b }),
        (b, c) => b.or(c),
    }
}

struct HeadModel {
    head: Ellipsoid,
    nose: Ellipsoid,
    eye_x: f64,
    albedo: f64,
}

const EYE_Y: f64 = 0.18;
const EYE_RADIUS: f64 = 0.1;
const EYE_ALBEDO: f64 = 0.5;
// the back of the head is darker, so turning shows it on one side
const HAIR_Z: f64 = -0.1;
const HAIR_Y: f64 = 0.45;
const HAIR_ALBEDO: f64 = 0.2;

impl HeadModel {
    fn new(intrinsic: &[f64]) -> Self {
        let head_axes = v3(0.55 + 0.08 * intrinsic[0], 0.75, 0.6);
        let nose_len = 0.2 + 0.08 * intrinsic[1];
        Self {
            head: Ellipsoid {
                center: v3(0.0, 0.0, 0.0),
                axes: head_axes,
            },
            nose: Ellipsoid {
                center: v3(0.0, -0.08, head_axes.z - 0.04),
                axes: v3(0.12, 0.16, nose_len),
            },
            eye_x: 0.22 + 0.05 * intrinsic[2],
            albedo: 0.75 + 0.2 * intrinsic[3],
        }
    }

    fn trace(&self, ray: &Ray) -> Option<Hit> {
        let head = self.head.intersect(ray).map(|(t, n)| {
            let p = ray.origin.add(ray.dir.scale(t));
            let ex = p.x.abs() - self.eye_x;
            let ey = p.y - EYE_Y;
            let on_eye = p.z > 0.0 && ex * ex + ey * ey < EYE_RADIUS * EYE_RADIUS;
            let albedo = if p.z < HAIR_Z || p.y > HAIR_Y {
                self.albedo * HAIR_ALBEDO
            } else if on_eye {
                self.albedo * EYE_ALBEDO
            } else {
                self.albedo
            };
            (t, n, albedo)
        });
        let nose = self.nose.intersect(ray).map(|(t, n)| (t, n, self.albedo));
        closer(head, nose)
    }
}

struct ChairModel {
    parts: Vec<Cuboid>,
}

impl ChairModel {
    fn new(intrinsic: &[f64]) -> Self {
        let seat_w = 0.42 + 0.1 * intrinsic[0];
        let back_h = 0.25 + 0.08 * intrinsic[1];
        let leg_h = 0.22 + 0.08 * intrinsic[2];
        let seat_y = -0.1;
        let mut parts = vec![
            Cuboid {
                center: v3(0.0, seat_y, 0.0),
                half: v3(seat_w, 0.06, 0.4),
            },
            Cuboid {
                center: v3(0.0, seat_y + 0.06 + back_h, -0.35),
                half: v3(seat_w, back_h, 0.05),
            },
        ];
        for &sx in &[-1.0, 1.0] {
            for &sz in &[-1.0, 1.0] {
                parts.push(Cuboid {
                    center: v3(sx * (seat_w - 0.05), seat_y - 0.06 - leg_h, sz * 0.33),
                    half: v3(0.05, leg_h, 0.05),
                });
            }
        }
        if intrinsic[3] > 0.0 {
            for &sx in &[-1.0, 1.0] {
                parts.push(Cuboid {
                    center: v3(sx * seat_w, seat_y + 0.28, 0.0),
                    half: v3(0.04, 0.03, 0.36),
                });
            }
        }
        Self { parts }
    }

    fn trace(&self, ray: &Ray) -> Option<Hit> {
        self.parts.iter().fold(None, |best, part| {
            closer(best, part.intersect(ray).map(|(t, n)| (t, n, 0.8)))
        })
    }
}

/// Renders a `[1, res, res]` grayscale image in `[0, 1]`.
///
/// The camera orbits the object: positive azimuth moves it to the viewer's
/// right, positive elevation looks down from above. The light stays with the
/// viewer: light azimuth is measured from the viewing direction, level with
/// the object, so turning the object does not move the lamp.
pub fn render_object(kind: ObjectKind, params: &SceneParams, resolution: usize) -> Result<Tensor<f32>> {
    params.validate()?;
    if resolution == 0 {
        return Err(Error::Domain("resolution must be positive".into()));
    }
    let (az, el, la) = (
        params.azimuth.to_radians(),
        params.elevation.to_radians(),
        params.light_azimuth.to_radians(),
    );
    let (saz, caz) = az.sin_cos();
    let (sel, cel) = el.sin_cos();
    let to_camera = v3(cel * saz, sel, cel * caz);
    let right = v3(caz, 0.0, -saz);
    let up = v3(-sel * saz, cel, -sel * caz);
    let light = right.scale(la.sin()).add(v3(saz, 0.0, caz).scale(la.cos()));
    let dir = to_camera.scale(-1.0);

    let head;
    let chair;
    let trace: &dyn Fn(&Ray) -> Option<Hit> = match kind {
        ObjectKind::Head => {
            head = HeadModel::new(&params.intrinsic);
            &|r| head.trace(r)
        }
        ObjectKind::Chair => {
            chair = ChairModel::new(&params.intrinsic);
            &|r| chair.trace(r)
        }
    };

    // SUPERSAMPLE x SUPERSAMPLE rays per pixel, averaged; sub-pixel
    // coordinates are exact integer ratios so mirrored rays are exactly negated
    let n = (resolution * SUPERSAMPLE) as i64;
    let shade = |u: f64, v: f64| {
        let origin = to_camera
            .scale(CAMERA_DISTANCE)
            .add(right.scale(u))
            .add(up.scale(v));
        match trace(&Ray { origin, dir }) {
            Some((_, normal, albedo)) => {
                let lambert = normal.dot(light).max(0.0);
                (albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)).clamp(0.0, 1.0)
            }
            None => 0.0,
        }
    };
    let k = SUPERSAMPLE as i64;
    let mut data = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution as i64 {
        for j in 0..resolution as i64 {
            let mut sum = 0.0;
            for si in 0..k {
                let v = (n - 2 * (i * k + si) - 1) as f64 / n as f64;
                for sj in 0..k {
                    let u = (2 * (j * k + sj) + 1 - n) as f64 / n as f64;
                    sum += shade(u, v);
                }
            }
            data.push((sum / (k * k) as f64) as f32);
        }
    }
    Tensor::new(&[1, resolution, resolution], data)
}

/// Renders a head scene.
pub fn render(params: &SceneParams, resolution: usize) -> Result<Tensor<f32>> {
    render_object(ObjectKind::Head, params, resolution)
}

/// Mini-batch in which exactly one factor varies.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformBatch {
    pub images: Vec<Tensor<f32>>,
    pub params: Vec<SceneParams>,
    pub active: Factor,
}

impl TransformBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Checks the single-varying-factor invariant and image/param pairing.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() < 2 || self.images.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "batch needs at least two images with matching params ({} images, {} params)",
                self.images.len(),
                self.params.len()
            )));
        }
        let first = &self.params[0];
        if let Some(bad) = self.params.iter().position(|p| !first.differs_only_in(p, self.active)) {
            return Err(Error::Contract(format!(
                "example {bad} varies a factor other than {}",
                self.active
            )));
        }
        Ok(())
    }

    /// Images stacked into an `[N,1,H,W]` tensor.
    pub fn stacked<T: Scalar>(&self) -> Result<Tensor<T>> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let mut shape = vec![self.images.len()];
        shape.extend(first.shape());
        let mut data = Vec::with_capacity(first.len() * self.images.len());
        for img in &self.images {
            img.ensure_shape(first.shape(), "batch image")?;
            data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(&shape, data)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

fn draw_intrinsic<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    (0..INTRINSIC_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Draws a full parameter set for `kind`.
pub fn random_params<R: Rng + ?Sized>(rng: &mut R, kind: ObjectKind) -> SceneParams {
    match kind {
        ObjectKind::Head => SceneParams {
            azimuth: uniform(rng, AZIMUTH_RANGE),
            elevation: uniform(rng, ELEVATION_RANGE),
            light_azimuth: uniform(rng, LIGHT_RANGE),
            intrinsic: draw_intrinsic(rng),
        },
        ObjectKind::Chair => SceneParams {
            azimuth: uniform(rng, AZIMUTH_RANGE),
            elevation: CHAIR_ELEVATION,
            light_azimuth: CHAIR_LIGHT_AZIMUTH,
            intrinsic: draw_intrinsic(rng),
        },
    }
}

/// Redraws only the fields of `factor`.
pub fn redraw_factor<R: Rng + ?Sized>(rng: &mut R, base: &SceneParams, factor: Factor) -> SceneParams {
    let mut p = base.clone();
    match factor {
        Factor::Azimuth => p.azimuth = uniform(rng, AZIMUTH_RANGE),
        Factor::Elevation => p.elevation = uniform(rng, ELEVATION_RANGE),
        Factor::LightAzimuth => p.light_azimuth = uniform(rng, LIGHT_RANGE),
        Factor::Intrinsic => p.intrinsic = draw_intrinsic(rng),
    }
    p
}

/// A single-factor batch: inactive fields drawn once, the active factor drawn
/// independently for every example.
pub fn make_batch<R: Rng + ?Sized>(
    rng: &mut R,
    kind: ObjectKind,
    active: Factor,
    batch_size: usize,
    resolution: usize,
) -> Result<TransformBatch> {
    if batch_size < 2 {
        return Err(Error::Contract(format!("batch size {batch_size} is below 2")));
    }
    if !kind.factors().contains(&active) {
        return Err(Error::config(format!("{kind:?} scenes do not vary {active}")));
    }
    let base = random_params(rng, kind);
    let params: Vec<SceneParams> = (0..batch_size).map(|_| redraw_factor(rng, &base, active)).collect();
    let images = params
        .iter()
        .map(|p| render_object(kind, p, resolution))
        .collect::<Result<_>>()?;
    Ok(TransformBatch {
        images,
        params,
        active,
    })
}

/// Intensity-weighted centroid `(x, y)` of a `[1,H,W]` image in pixel units.
pub fn intensity_centroid(image: &Tensor<f32>) -> (f64, f64) {
    let (_, h, w) = image.chw().expect("image tensor");
    let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = image.data()[y * w + x] as f64;
            sx += v * x as f64;
            sy += v * y as f64;
            total += v;
        }
    }
    if total == 0.0 {
        return ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    }
    (sx / total, sy / total)
}
