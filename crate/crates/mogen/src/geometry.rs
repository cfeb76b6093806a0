//! Object geometry as unions of analytic primitives with exact signed
//! distances, basis point sets, body sphere proxies, and penetration
//! measurement.

use crate::error::{Error, Result};
use crate::math::{m_apply, m_transpose, v_norm, v_sub, Mat3, Vec3};
use crate::pose::{
    forward_kinematics, integrate_root, MotionClip, Skeleton, JOINT_COUNT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A solid primitive. Boxes carry an orientation as a unit quaternion
/// (w, x, y, z); points are rotated into the box frame for the distance
/// query.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3, #[serde(default = "quat_identity")] orientation: [f64; 4] },
}

fn quat_identity() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Quaternion for a yaw rotation about Z.
pub fn yaw_quat(theta: f64) -> [f64; 4] {
    [(theta / 2.0).cos(), 0.0, 0.0, (theta / 2.0).sin()]
}

impl Primitive {
    /// Exact signed distance: negative inside, zero on the surface.
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => v_norm(v_sub(p, *center)) - radius,
            Primitive::Box { center, half_extents, orientation } => {
                let rot = quat_to_matrix(*orientation);
                let local = m_apply(&m_transpose(&rot), v_sub(p, *center));
                let q = [
                    local[0].abs() - half_extents[0],
                    local[1].abs() - half_extents[1],
                    local[2].abs() - half_extents[2],
                ];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                v_norm(outside) + inside
            }
        }
    }

    /// Signed distance and its spatial gradient. At non-smooth loci
    /// (edges, the medial axis) a subgradient is returned.
    pub fn sdf_grad(&self, p: Vec3) -> (f64, Vec3) {
        match self {
            Primitive::Sphere { center, radius } => {
                let d = v_sub(p, *center);
                let n = v_norm(d);
                if n < 1e-12 {
                    (-radius, [0.0, 0.0, 1.0])
                } else {
                    (n - radius, [d[0] / n, d[1] / n, d[2] / n])
                }
            }
            Primitive::Box { center, half_extents, orientation } => {
                let rot = quat_to_matrix(*orientation);
                let local = m_apply(&m_transpose(&rot), v_sub(p, *center));
                let q = [
                    local[0].abs() - half_extents[0],
                    local[1].abs() - half_extents[1],
                    local[2].abs() - half_extents[2],
                ];
                let mut g_local = [0.0; 3];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                let out_norm = v_norm(outside);
                if out_norm > 0.0 {
                    for k in 0..3 {
                        if q[k] > 0.0 {
                            g_local[k] = local[k].signum() * q[k] / out_norm;
                        }
                    }
                } else {
                    // inside: descend along the axis closest to a face
                    let mut best = 0;
                    for k in 1..3 {
                        if q[k] > q[best] {
                            best = k;
                        }
                    }
                    g_local[best] = local[best].signum();
                }
                let sdf = out_norm + q[0].max(q[1]).max(q[2]).min(0.0);
                (sdf, m_apply(&rot, g_local))
            }
        }
    }

    /// Center and radius of a bounding sphere.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        match self {
            Primitive::Sphere { center, radius } => (*center, *radius),
            Primitive::Box { center, half_extents, .. } => (*center, v_norm(*half_extents)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("primitive radii and half-extents must be positive".into()))
        }
    }
}

/// A rigid object: the min-union of solid primitives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectGeometry {
    pub primitives: Vec<Primitive>,
}

impl ObjectGeometry {
    pub fn new(primitives: Vec<Primitive>) -> Result<ObjectGeometry> {
        if primitives.is_empty() {
            return Err(Error::Config("object needs at least one primitive".into()));
        }
        for p in &primitives {
            p.validate()?;
        }
        Ok(ObjectGeometry { primitives })
    }

    /// Signed distance of the union: min over primitives.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|pr| pr.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Signed distance and gradient of the union (gradient of the
    /// nearest primitive).
    pub fn sdf_grad(&self, p: Vec3) -> (f64, Vec3) {
        let mut best = (f64::INFINITY, [0.0, 0.0, 1.0]);
        for pr in &self.primitives {
            let (d, g) = pr.sdf_grad(p);
            if d < best.0 {
                best = (d, g);
            }
        }
        best
    }

    /// Bounding sphere enclosing all primitive bounding spheres.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let spheres: Vec<(Vec3, f64)> = self.primitives.iter().map(|p| p.bounding_sphere()).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (c, r) in &spheres {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k] - r);
                hi[k] = hi[k].max(c[k] + r);
            }
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
        let radius = spheres
            .iter()
            .map(|(c, r)| v_norm(v_sub(*c, center)) + r)
            .fold(0.0, f64::max);
        (center, radius)
    }

    /// Uniformly scale every primitive about the object's bounding-sphere
    /// center by `factor`.
    pub fn grown(&self, factor: f64) -> ObjectGeometry {
        let (center, _) = self.bounding_sphere();
        let primitives = self
            .primitives
            .iter()
            .map(|p| match p {
                Primitive::Sphere { center: c, radius } => Primitive::Sphere {
                    center: scale_about(*c, center, factor),
                    radius: radius * factor,
                },
                Primitive::Box { center: c, half_extents, orientation } => Primitive::Box {
                    center: scale_about(*c, center, factor),
                    half_extents: [
                        half_extents[0] * factor,
                        half_extents[1] * factor,
                        half_extents[2] * factor,
                    ],
                    orientation: *orientation,
                },
            })
            .collect();
        ObjectGeometry { primitives }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("object serializes")
    }

    pub fn from_toml(s: &str) -> Result<ObjectGeometry> {
        let obj: ObjectGeometry =
            toml::from_str(s).map_err(|e| Error::Format(format!("object file: {e}")))?;
        ObjectGeometry::new(obj.primitives)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<ObjectGeometry> {
        let s = std::fs::read_to_string(path)?;
        ObjectGeometry::from_toml(&s)
    }
}

fn scale_about(p: Vec3, center: Vec3, factor: f64) -> Vec3 {
    [
        center[0] + (p[0] - center[0]) * factor,
        center[1] + (p[1] - center[1]) * factor,
        center[2] + (p[2] - center[2]) * factor,
    ]
}

/// A fixed set of basis points inside a canonical ball, used to encode
/// object geometry and body proximity as distance features.
#[derive(Debug, Clone)]
pub struct BasisPointSet {
    pub points: Vec<Vec3>,
    pub seed: u64,
    pub radius: f64,
}

/// Deterministic uniform-in-ball sample of `n_bps` basis points.
pub fn bps_generate(seed: u64, n_bps: usize, radius: f64) -> BasisPointSet {
    assert!(n_bps > 0 && radius > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_bps);
    while points.len() < n_bps {
        let p = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ];
        if v_norm(p) <= 1.0 {
            points.push([p[0] * radius, p[1] * radius, p[2] * radius]);
        }
    }
    BasisPointSet { points, seed, radius }
}

impl BasisPointSet {
    /// Basis points translated and scaled onto the object's bounding
    /// sphere.
    pub fn anchored_to(&self, obj: &ObjectGeometry) -> Vec<Vec3> {
        let (center, rho) = obj.bounding_sphere();
        let s = rho / self.radius;
        self.points
            .iter()
            .map(|p| [center[0] + p[0] * s, center[1] + p[1] * s, center[2] + p[2] * s])
            .collect()
    }
}

/// Unsigned distance from each anchored basis point to the object surface.
pub fn bps_object_features(bps: &BasisPointSet, obj: &ObjectGeometry) -> Vec<f64> {
    bps.anchored_to(obj).iter().map(|p| obj.sdf(*p).abs()).collect()
}

/// Minimum Euclidean distance from each anchored basis point to any of
/// the 22 joints.
pub fn bps_interaction_features(
    anchored: &[Vec3],
    joints: &[Vec3; JOINT_COUNT],
) -> Vec<f64> {
    anchored
        .iter()
        .map(|p| {
            joints
                .iter()
                .map(|j| v_norm(v_sub(*p, *j)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Sphere proxies standing in for body volume, one or more per joint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxySphere {
    pub joint: usize,
    pub local_offset: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyProxy {
    pub spheres: Vec<ProxySphere>,
}

impl BodyProxy {
    /// One sphere per joint: radius 0.10 m on the torso chain
    /// (pelvis/spine), 0.06 m elsewhere.
    pub fn default_human() -> BodyProxy {
        let torso = [0usize, 3, 6, 9];
        let spheres = (0..JOINT_COUNT)
            .map(|j| ProxySphere {
                joint: j,
                local_offset: [0.0; 3],
                radius: if torso.contains(&j) { 0.10 } else { 0.06 },
            })
            .collect();
        BodyProxy { spheres }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.spheres {
            if s.radius <= 0.0 || s.joint >= JOINT_COUNT {
                return Err(Error::Config(format!(
                    "bad proxy sphere: joint {}, radius {}",
                    s.joint, s.radius
                )));
            }
        }
        Ok(())
    }

    /// World-space centers for one FK result.
    pub fn centers(
        &self,
        cache: &crate::pose::FkCache,
    ) -> Vec<Vec3> {
        self.spheres
            .iter()
            .map(|s| {
                let base = cache.positions[s.joint];
                let off = m_apply(&cache.world_rots[s.joint], s.local_offset);
                [base[0] + off[0], base[1] + off[1], base[2] + off[2]]
            })
            .collect()
    }
}

/// Whether any proxy sphere center of `frame_joints` lies strictly inside
/// the object, and the depths of those that do.
///
/// Convention: a proxy counts as penetrating iff sdf(center) < 0; its
/// depth is |sdf(center)|. The sphere radius plays no role in the depth,
/// only in the collision training penalty.
fn frame_penetrations(
    centers: &[Vec3],
    obj: &ObjectGeometry,
) -> Vec<f64> {
    centers
        .iter()
        .filter_map(|c| {
            let s = obj.sdf(*c);
            if s < 0.0 {
                Some(-s)
            } else {
                None
            }
        })
        .collect()
}

/// Mean penetration depth over all penetrating proxy points across all
/// frames; 0 when nothing penetrates.
pub fn penetration_value(
    clip: &MotionClip,
    skeleton: &Skeleton,
    proxy: &BodyProxy,
    obj: &ObjectGeometry,
) -> Result<f64> {
    let (total, count, _) = penetration_scan(clip, skeleton, proxy, obj)?;
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Fraction of frames with at least one penetrating proxy point.
pub fn penetration_ratio(
    clip: &MotionClip,
    skeleton: &Skeleton,
    proxy: &BodyProxy,
    obj: &ObjectGeometry,
) -> Result<f64> {
    let (_, _, frames_hit) = penetration_scan(clip, skeleton, proxy, obj)?;
    if clip.is_empty() {
        return Ok(0.0);
    }
    Ok(frames_hit as f64 / clip.len() as f64)
}

fn penetration_scan(
    clip: &MotionClip,
    skeleton: &Skeleton,
    proxy: &BodyProxy,
    obj: &ObjectGeometry,
) -> Result<(f64, usize, usize)> {
    if clip.normalized {
        return Err(Error::NormalizedInput);
    }
    let roots = integrate_root(clip, [0.0; 3])?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut frames_hit = 0usize;
    for (frame, root) in clip.frames.iter().zip(roots) {
        let cache = crate::pose::forward_kinematics_cached(frame, skeleton, root)?;
        let centers = proxy.centers(&cache);
        let depths = frame_penetrations(&centers, obj);
        if !depths.is_empty() {
            frames_hit += 1;
            count += depths.len();
            total += depths.iter().sum::<f64>();
        }
    }
    Ok((total, count, frames_hit))
}

/// World positions of every joint for every frame of a denormalized clip.
pub fn clip_joint_positions(
    clip: &MotionClip,
    skeleton: &Skeleton,
) -> Result<Vec<[Vec3; JOINT_COUNT]>> {
    if clip.normalized {
        return Err(Error::NormalizedInput);
    }
    let roots = integrate_root(clip, [0.0; 3])?;
    clip.frames
        .iter()
        .zip(roots)
        .map(|(f, r)| forward_kinematics(f, skeleton, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::PoseFrame;
    use rand::Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    fn unit_box() -> Primitive {
        Primitive::Box {
            center: [0.0; 3],
            half_extents: [0.5, 0.5, 0.5],
            orientation: quat_identity(),
        }
    }

    #[test]
    fn sdf_analytic_cases() {
        let b = unit_box();
        assert_close(b.sdf([0.0; 3]), -0.5, 1e-15, "box center");
        assert_close(b.sdf([1.5, 0.0, 0.0]), 1.0, 1e-15, "box face distance");
        assert_close(b.sdf([0.5, 0.0, 0.0]), 0.0, 1e-15, "box surface");
        // corner region uses the Euclidean distance to the corner
        assert_close(b.sdf([1.5, 1.5, 0.0]), 2.0f64.sqrt(), 1e-12, "box corner");

        let s = Primitive::Sphere { center: [0.0; 3], radius: 1.0 };
        assert_close(s.sdf([0.0, 0.0, 2.0]), 1.0, 1e-15, "sphere outside");
        assert_close(s.sdf([0.0; 3]), -1.0, 1e-15, "sphere center");
    }

    #[test]
    fn union_takes_pointwise_min() {
        let s1 = Primitive::Sphere { center: [-2.0, 0.0, 0.0], radius: 1.0 };
        let s2 = Primitive::Sphere { center: [2.0, 0.0, 0.0], radius: 0.5 };
        let obj = ObjectGeometry::new(vec![s1.clone(), s2.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            ];
            let d = obj.sdf(p);
            let d1 = s1.sdf(p);
            let d2 = s2.sdf(p);
            assert_close(d, d1.min(d2), 1e-15, "min union");
            assert!(d <= d1 + 1e-15 && d <= d2 + 1e-15);
        }
        // point midway between them
        let p = [0.0, 0.0, 0.0];
        assert_close(obj.sdf(p), (2.0f64 - 1.0).min(2.0 - 0.5), 1e-15, "between spheres");
    }

    #[test]
    fn rotated_box_sdf() {
        // 45-degree yaw: the +x axis now pierces an edge of the box
        let b = Primitive::Box {
            center: [0.0; 3],
            half_extents: [0.5, 0.5, 0.5],
            orientation: yaw_quat(std::f64::consts::FRAC_PI_4),
        };
        // corner distance along x: corner at sqrt(2)*0.5 from center
        let corner = 0.5 * 2.0f64.sqrt();
        assert_close(b.sdf([2.0, 0.0, 0.0]), 2.0 - corner, 1e-12, "rotated corner");
        assert_close(b.sdf([0.0; 3]), -0.5, 1e-12, "rotated center");
    }

    #[test]
    fn sdf_grad_matches_finite_differences() {
        let obj = ObjectGeometry::new(vec![
            Primitive::Sphere { center: [0.4, -0.2, 0.7], radius: 0.6 },
            Primitive::Box {
                center: [-0.8, 0.5, 0.0],
                half_extents: [0.4, 0.3, 0.5],
                orientation: yaw_quat(0.4),
            },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let p = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            // skip points near non-smooth loci: gradient magnitude of the
            // finite difference should be 1 for a clean comparison
            let (_, g) = obj.sdf_grad(p);
            let mut fd = [0.0; 3];
            for k in 0..3 {
                let mut pp = p;
                pp[k] += h;
                let mut pm = p;
                pm[k] -= h;
                fd[k] = (obj.sdf(pp) - obj.sdf(pm)) / (2.0 * h);
            }
            if (v_norm(fd) - 1.0).abs() > 1e-4 {
                continue;
            }
            for k in 0..3 {
                assert_close(g[k], fd[k], 1e-5, "sdf grad");
            }
            checked += 1;
        }
    }

    #[test]
    fn bps_deterministic_and_in_ball() {
        let a = bps_generate(7, 256, 1.0);
        let b = bps_generate(7, 256, 1.0);
        assert_eq!(a.points, b.points, "same seed gives identical points");
        for p in &a.points {
            assert!(v_norm(*p) <= 1.0 + 1e-12);
        }
        let c = bps_generate(8, 256, 1.0);
        assert_ne!(a.points, c.points, "different seed gives different points");
    }

    #[test]
    fn bps_empirical_mean_near_origin() {
        let n = 4096;
        let radius = 2.0;
        let bps = bps_generate(3, n, radius);
        let mut mean = [0.0; 3];
        for p in &bps.points {
            for k in 0..3 {
                mean[k] += p[k];
            }
        }
        let bound = 5.0 / (n as f64).sqrt() * radius;
        for k in 0..3 {
            assert!(
                (mean[k] / n as f64).abs() < bound,
                "mean component {k} exceeds Monte-Carlo bound"
            );
        }
    }

    #[test]
    fn bps_object_feature_cases() {
        let obj = ObjectGeometry::new(vec![unit_box()]).unwrap();
        // a basis point at the object's bounding-sphere center maps to the
        // box center: unsigned distance 0.5
        let bps = BasisPointSet { points: vec![[0.0; 3], [0.5, 0.0, 0.0]], seed: 0, radius: 1.0 };
        let feats = bps_object_features(&bps, &obj);
        assert_close(feats[0], 0.5, 1e-12, "center feature");
        // second point is scaled by rho = |(0.5,0.5,0.5)| onto the sphere;
        // its feature is |sdf| there
        let (c, rho) = obj.bounding_sphere();
        let p = [c[0] + 0.5 * rho, c[1], c[2]];
        assert_close(feats[1], obj.sdf(p).abs(), 1e-12, "scaled feature");
        assert!(feats.iter().all(|f| *f >= 0.0));
    }

    #[test]
    fn bps_interaction_feature_cases() {
        let mut joints = [[5.0, 5.0, 5.0]; JOINT_COUNT];
        joints[3] = [0.0, 0.0, 0.0];
        let anchored = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]];
        let feats = bps_interaction_features(&anchored, &joints);
        assert_close(feats[0], 0.0, 1e-15, "coincident joint");
        assert_close(feats[1], 3.0, 1e-12, "single joint distance");

        // random configuration equals the exhaustive 22-way minimum
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut joints = [[0.0; 3]; JOINT_COUNT];
        for j in joints.iter_mut() {
            for k in 0..3 {
                j[k] = rng.gen_range(-1.0..1.0);
            }
        }
        let pts: Vec<Vec3> = (0..50)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let feats = bps_interaction_features(&pts, &joints);
        for (p, f) in pts.iter().zip(feats) {
            let mut best = f64::INFINITY;
            for j in &joints {
                best = best.min(v_norm(v_sub(*p, *j)));
            }
            assert_close(f, best, 1e-12, "brute force min");
        }
    }

    #[test]
    fn bps_object_features_vs_surface_sampling_oracle() {
        let obj = ObjectGeometry::new(vec![
            Primitive::Box {
                center: [0.1, -0.2, 0.3],
                half_extents: [0.5, 0.35, 0.25],
                orientation: yaw_quat(0.3),
            },
            Primitive::Sphere { center: [0.9, 0.2, 0.3], radius: 0.3 },
        ])
        .unwrap();
        let bps = bps_generate(9, 64, 1.0);
        let feats = bps_object_features(&bps, &obj);
        let anchored = bps.anchored_to(&obj);

        // dense surface sampling oracle
        let n_samples = 100_000;
        let samples = sample_union_surface(&obj, n_samples, 12345);
        let area = union_surface_area_upper_bound(&obj);
        let resolution = (area / samples.len() as f64).sqrt();
        for (p, f) in anchored.iter().zip(feats) {
            let mut best = f64::INFINITY;
            for s in &samples {
                best = best.min(v_norm(v_sub(*p, *s)));
            }
            assert!(
                (f - best).abs() < 2.0 * resolution,
                "feature {f} vs sampled {best}, resolution {resolution}"
            );
        }
    }

    /// Area-weighted random points on the union surface (points strictly
    /// inside another primitive are rejected).
    fn sample_union_surface(obj: &ObjectGeometry, n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let areas: Vec<f64> = obj.primitives.iter().map(primitive_area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut pick = rng.gen_range(0.0..total);
            let mut idx = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            let p = sample_primitive_surface(&obj.primitives[idx], &mut rng);
            if obj.sdf(p) > -1e-9 {
                out.push(p);
            }
        }
        out
    }

    fn primitive_area(p: &Primitive) -> f64 {
        match p {
            Primitive::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Primitive::Box { half_extents: h, .. } => {
                8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
            }
        }
    }

    fn union_surface_area_upper_bound(obj: &ObjectGeometry) -> f64 {
        obj.primitives.iter().map(primitive_area).sum()
    }

    fn sample_primitive_surface(p: &Primitive, rng: &mut ChaCha8Rng) -> Vec3 {
        match p {
            Primitive::Sphere { center, radius } => {
                let mut d;
                loop {
                    d = [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ];
                    let n = v_norm(d);
                    if n > 1e-6 && n <= 1.0 {
                        d = [d[0] / n, d[1] / n, d[2] / n];
                        break;
                    }
                }
                [
                    center[0] + d[0] * radius,
                    center[1] + d[1] * radius,
                    center[2] + d[2] * radius,
                ]
            }
            Primitive::Box { center, half_extents: h, orientation } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total = 2.0 * (areas[0] + areas[1] + areas[2]);
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 0;
                let mut sign = 1.0;
                for k in 0..3 {
                    for s in [1.0, -1.0] {
                        if pick < areas[k] {
                            axis = k;
                            sign = s;
                            pick = f64::INFINITY;
                            break;
                        }
                        pick -= areas[k];
                    }
                    if pick == f64::INFINITY {
                        break;
                    }
                }
                let mut local = [
                    rng.gen_range(-h[0]..h[0]),
                    rng.gen_range(-h[1]..h[1]),
                    rng.gen_range(-h[2]..h[2]),
                ];
                local[axis] = sign * h[axis];
                let rot = quat_to_matrix(*orientation);
                let world = m_apply(&rot, local);
                [center[0] + world[0], center[1] + world[1], center[2] + world[2]]
            }
        }
    }

    fn static_clip(pelvis: Vec3, n: usize) -> MotionClip {
        let mut frames = vec![PoseFrame::rest(); n];
        frames[0].delta_trans = pelvis;
        MotionClip::new(frames, 20.0).unwrap()
    }

    #[test]
    fn penetration_metrics_cases() {
        let sk = Skeleton::default_human();
        let proxy = BodyProxy::default_human();
        proxy.validate().unwrap();
        let obj = ObjectGeometry::new(vec![Primitive::Box {
            center: [5.0, 0.0, 0.5],
            half_extents: [0.5, 0.5, 0.5],
            orientation: quat_identity(),
        }])
        .unwrap();

        // motion a meter and more away from the object never penetrates
        let clip = static_clip([0.0, 0.0, 1.0], 10);
        assert_eq!(penetration_value(&clip, &sk, &proxy, &obj).unwrap(), 0.0);
        assert_eq!(penetration_ratio(&clip, &sk, &proxy, &obj).unwrap(), 0.0);

        // pelvis proxy centered in the box: depth is |sdf(center)| = 0.5
        let single = ObjectGeometry::new(vec![Primitive::Box {
            center: [0.0, 0.0, 1.0],
            half_extents: [0.5, 0.5, 0.5],
            orientation: quat_identity(),
        }])
        .unwrap();
        let proxy_one = BodyProxy {
            spheres: vec![ProxySphere { joint: 0, local_offset: [0.0; 3], radius: 0.10 }],
        };
        let clip = static_clip([0.0, 0.0, 1.0], 1);
        let v = penetration_value(&clip, &sk, &proxy_one, &single).unwrap();
        assert_close(v, 0.5, 1e-12, "box-center depth");
        assert_close(
            penetration_ratio(&clip, &sk, &proxy_one, &single).unwrap(),
            1.0,
            1e-15,
            "all frames penetrate",
        );

        // constructed 3-of-10 frames intersecting
        let mut frames = vec![PoseFrame::rest(); 10];
        frames[0].delta_trans = [0.0, 0.0, 5.0]; // far away
        frames[4].delta_trans = [0.0, 0.0, -4.0]; // frames 4..6 at z=1 (inside)
        frames[7].delta_trans = [0.0, 0.0, 4.0]; // back out
        let clip = MotionClip::new(frames, 20.0).unwrap();
        let r = penetration_ratio(&clip, &sk, &proxy_one, &single).unwrap();
        assert_close(r, 0.3, 1e-15, "3 of 10 frames");
    }

    #[test]
    fn penetration_monotone_under_growth_and_value_ratio_link() {
        let sk = Skeleton::default_human();
        let proxy = BodyProxy::default_human();
        let obj = ObjectGeometry::new(vec![Primitive::Box {
            center: [0.6, 0.0, 0.6],
            half_extents: [0.3, 0.3, 0.3],
            orientation: quat_identity(),
        }])
        .unwrap();
        // walk the pelvis through the region near the box
        let mut frames = vec![PoseFrame::rest(); 20];
        frames[0].delta_trans = [-0.4, 0.0, 1.0];
        for f in frames.iter_mut().skip(1) {
            f.delta_trans = [0.1, 0.0, 0.0];
        }
        let clip = MotionClip::new(frames, 20.0).unwrap();
        let mut prev = 0.0;
        for factor in [0.6, 0.8, 1.0, 1.3, 1.7] {
            let grown = obj.grown(factor);
            let r = penetration_ratio(&clip, &sk, &proxy, &grown).unwrap();
            assert!(r >= prev - 1e-15, "ratio decreased when object grew");
            assert!((0.0..=1.0).contains(&r));
            prev = r;
            let v = penetration_value(&clip, &sk, &proxy, &grown).unwrap();
            assert_eq!(v == 0.0, r == 0.0, "value and ratio vanish together");
        }
        assert!(prev > 0.0, "largest object should be penetrated");
    }

    #[test]
    fn object_toml_round_trip() {
        let obj = ObjectGeometry::new(vec![
            Primitive::Sphere { center: [1.0, 2.0, 3.0], radius: 0.4 },
            Primitive::Box {
                center: [0.0, 0.0, 0.5],
                half_extents: [0.3, 0.2, 0.1],
                orientation: yaw_quat(0.7),
            },
        ])
        .unwrap();
        let s = obj.to_toml();
        let back = ObjectGeometry::from_toml(&s).unwrap();
        assert_eq!(obj.primitives.len(), back.primitives.len());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let p = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            assert_close(obj.sdf(p), back.sdf(p), 1e-12, "round-trip sdf");
        }
        // invalid object rejected
        assert!(ObjectGeometry::new(vec![]).is_err());
        assert!(ObjectGeometry::new(vec![Primitive::Sphere { center: [0.0; 3], radius: -1.0 }])
            .is_err());
    }
}
