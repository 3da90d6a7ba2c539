//! Ray-cast synthetic RGB-D scenes.
//!
//! A pinhole camera at the origin looks down +z (x right, y down). Depth is
//! the z coordinate of the first hit, so a fronto-parallel background plane
//! at `d_max` closes every scene. Surfaces are flat coloured and lit by one
//! directional light, so colour edges coincide with depth edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DepthSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub primitives: usize,
    pub d_min: f32,
    pub d_max: f32,
    /// Horizontal field of view in degrees.
    pub fov_deg: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { seed: 0, height: 48, width: 64, primitives: 6, d_min: 1.0, d_max: 10.0, fov_deg: 60.0 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.height == 0 || self.width == 0 {
            return Err(DataError::Spec(format!("resolution {}x{} must be positive", self.height, self.width)));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(DataError::Spec(format!("need 0 < d_min < d_max, got [{}, {}]", self.d_min, self.d_max)));
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) {
            return Err(DataError::Spec(format!("fov {} outside (1, 170) degrees", self.fov_deg)));
        }
        Ok(())
    }
}

type V3 = [f32; 3];

fn dot(a: V3, b: V3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone)]
enum Surface {
    Plane { point: V3, normal: V3 },
    Sphere { center: V3, radius: f32 },
    Cuboid { lo: V3, hi: V3 },
}

#[derive(Debug, Clone)]
struct Primitive {
    surface: Surface,
    color: V3,
}

impl Primitive {
    /// Ray parameter and surface normal of the nearest hit along `dir`
    /// (a ray from the origin with `dir.z == 1`, so `t` is z-depth).
    fn hit(&self, dir: V3) -> Option<(f32, V3)> {
        match &self.surface {
            Surface::Plane { point, normal } => {
                let den = dot(dir, *normal);
                if den.abs() < 1e-6 {
                    return None;
                }
                let t = dot(*point, *normal) / den;
                (t > 0.0).then_some((t, *normal))
            }
            Surface::Sphere { center, radius } => {
                let a = dot(dir, dir);
                let b = -2.0 * dot(dir, *center);
                let c = dot(*center, *center) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 0.0 {
                    return None;
                }
                let p = [dir[0] * t, dir[1] * t, dir[2] * t];
                Some((t, normalize(sub(p, *center))))
            }
            Surface::Cuboid { lo, hi } => {
                let (mut t0, mut t1) = (0.0f32, f32::INFINITY);
                let mut axis = 0;
                for i in 0..3 {
                    if dir[i].abs() < 1e-9 {
                        if 0.0 < lo[i] || 0.0 > hi[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = (lo[i] / dir[i], hi[i] / dir[i]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis = i;
                    }
                    t1 = t1.min(b);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -dir[axis].signum();
                Some((t0, n))
            }
        }
    }
}

const LIGHT: V3 = [0.32, -0.55, -0.77];

fn random_color(rng: &mut ChaCha8Rng) -> V3 {
    [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)]
}

fn random_primitive(rng: &mut ChaCha8Rng, spec: &SceneSpec, tan_x: f32, tan_y: f32) -> Primitive {
    let (near, far) = (spec.d_min, spec.d_max);
    let color = random_color(rng);
    let surface = match rng.random_range(0..3) {
        0 => {
            // Floor, ceiling or side wall, slightly tilted.
            let (axis, sign) = (rng.random_range(0..2usize), if rng.random_bool(0.5) { 1.0 } else { -1.0 });
            let offset = rng.random_range(0.6..1.6);
            let mut normal = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), rng.random_range(-0.2..0.05)];
            normal[axis] = -sign;
            let mut point = [0.0, 0.0, 0.0];
            point[axis] = sign * offset;
            Surface::Plane { point, normal: normalize(normal) }
        }
        kind => {
            let z = rng.random_range(near..far);
            let reach_x = z * tan_x;
            let reach_y = z * tan_y;
            let size = rng.random_range(0.08..0.3) * reach_x;
            let size = size.min((z - near) * 0.9).max(1e-3);
            let cx = rng.random_range(-0.8..0.8) * reach_x;
            let cy = rng.random_range(-0.8..0.8) * reach_y;
            if kind == 1 {
                Surface::Sphere { center: [cx, cy, z], radius: size }
            } else {
                let half = [size * rng.random_range(0.5..1.5), size * rng.random_range(0.5..1.5), size];
                Surface::Cuboid { lo: [cx - half[0], cy - half[1], z - half[2]], hi: [cx + half[0], cy + half[1], z + half[2]] }
            }
        }
    };
    Primitive { surface, color }
}

/// Render one scene. Zero primitives leave only the background plane.
pub fn generate_scene(spec: &SceneSpec) -> Result<DepthSample, DataError> {
    Ok(render(spec)?.0)
}

/// The sample plus, per pixel, the index of the visible primitive
/// (`primitives` for the background).
fn render(spec: &SceneSpec) -> Result<(DepthSample, Vec<usize>), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let tan_x = (spec.fov_deg.to_radians() / 2.0).tan();
    let focal = w as f32 / (2.0 * tan_x);
    let tan_y = h as f32 / (2.0 * focal);
    let background = random_color(&mut rng);
    let prims: Vec<Primitive> = (0..spec.primitives).map(|_| random_primitive(&mut rng, spec, tan_x, tan_y)).collect();
    let light = normalize(LIGHT);

    let mut image = Tensor::zeros([1, 3, h, w]);
    let mut depth = Tensor::zeros([1, 1, h, w]);
    let mut ids = vec![prims.len(); h * w];
    for y in 0..h {
        for x in 0..w {
            let dir = [(x as f32 + 0.5 - w as f32 / 2.0) / focal, (y as f32 + 0.5 - h as f32 / 2.0) / focal, 1.0];
            let mut best = (spec.d_max, [0.0, 0.0, -1.0], background);
            for (i, p) in prims.iter().enumerate() {
                if let Some((t, n)) = p.hit(dir) {
                    if t >= spec.d_min && t < best.0 {
                        best = (t, n, p.color);
                        ids[y * w + x] = i;
                    }
                }
            }
            let (t, n, color) = best;
            let shade = 0.35 + 0.65 * dot(n, light).abs();
            for (c, v) in color.iter().enumerate() {
                image.set(0, c, y, x, (v * shade).clamp(0.0, 1.0));
            }
            depth.set(0, 0, y, x, t);
        }
    }
    Ok((DepthSample { image, depth, d_max: spec.d_max }, ids))
}

/// `count` scenes with seeds `base.seed, base.seed + 1, ...`.
pub fn generate_dataset(base: &SceneSpec, count: usize) -> Result<Vec<DepthSample>, DataError> {
    (0..count as u64)
        .map(|i| generate_scene(&SceneSpec { seed: base.seed.wrapping_add(i), ..base.clone() }))
        .collect()
}
