//! Tait-Bryan angles, unit quaternions and the rotation distance used by
//! retrieval metrics.

use std::f64::consts::FRAC_PI_2;
use std::ops::Mul;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|q| = 1` for inputs to operations that need unit
/// quaternions.
pub const UNIT_TOLERANCE: f64 = 1e-4;

/// Extrinsic X-Y-Z rotation angles in radians, each in `[−π/2, π/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaitBryanAngles {
    rx: f64,
    ry: f64,
    rz: f64,
}

impl TaitBryanAngles {
    pub fn new(rx: f64, ry: f64, rz: f64) -> Result<Self> {
        // f32 round trips may overshoot the bound by one ulp
        let limit = FRAC_PI_2 + 1e-6;
        for (axis, v) in [("x", rx), ("y", ry), ("z", rz)] {
            if !v.is_finite() || v.abs() > limit {
                return Err(Error::Parameter(format!(
                    "rotation {axis} = {v} outside [-pi/2, pi/2]"
                )));
            }
        }
        Ok(Self { rx, ry, rz })
    }

    pub fn zero() -> Self {
        Self {
            rx: 0.0,
            ry: 0.0,
            rz: 0.0,
        }
    }

    pub fn rx(&self) -> f64 {
        self.rx
    }

    pub fn ry(&self) -> f64 {
        self.ry
    }

    pub fn rz(&self) -> f64 {
        self.rz
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.rx, self.ry, self.rz]
    }
}

/// Quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` about a unit `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, axis[0] * s, axis[1] * s, axis[2] * s)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Multiplicative inverse; the conjugate for unit quaternions.
    pub fn inverse(&self) -> Self {
        let n2 = self.dot(self);
        let c = self.conjugate();
        Self::new(c.w / n2, c.x / n2, c.y / n2, c.z / n2)
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Representative with `w ≥ 0` (ties broken on the first nonzero
    /// imaginary component).
    pub fn canonical(&self) -> Self {
        let first = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|v| *v != 0.0)
            .unwrap_or(0.0);
        if first < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    fn require_unit(&self, op: &str) -> Result<()> {
        if self.is_unit() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{op} needs a unit quaternion, |q| = {}",
                self.norm()
            )))
        }
    }

    /// Row-major 3×3 rotation matrix of a unit quaternion.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Self { w, x, y, z } = *self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.to_matrix();
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn to_f32(&self) -> [f32; 4] {
        [self.w as f32, self.x as f32, self.y as f32, self.z as f32]
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, r: Quaternion) -> Quaternion {
        let l = self;
        Quaternion::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

/// Unit quaternion of the extrinsic X, then Y, then Z rotation, with `w ≥ 0`.
pub fn tait_bryan_to_quaternion(angles: &TaitBryanAngles) -> Result<Quaternion> {
    let a = TaitBryanAngles::new(angles.rx, angles.ry, angles.rz)?;
    let qx = Quaternion::from_axis_angle([1.0, 0.0, 0.0], a.rx);
    let qy = Quaternion::from_axis_angle([0.0, 1.0, 0.0], a.ry);
    let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], a.rz);
    // extrinsic rotations compose right to left: R = Rz·Ry·Rx
    Ok((qz * qy * qx).normalized().canonical())
}

/// `q_b ⊗ q_a⁻¹`: the rotation carrying view `a` to view `b`.
pub fn relative_rotation(q_a: &Quaternion, q_b: &Quaternion) -> Result<Quaternion> {
    q_a.require_unit("relative_rotation")?;
    q_b.require_unit("relative_rotation")?;
    Ok((*q_b * q_a.conjugate()).normalized())
}

/// `1 − ⟨q1, q2⟩²`, in `[0, 1]` and invariant to the sign of either input.
pub fn rotation_distance(q1: &Quaternion, q2: &Quaternion) -> Result<f64> {
    q1.require_unit("rotation_distance")?;
    q2.require_unit("rotation_distance")?;
    let d = q1.normalized().dot(&q2.normalized());
    Ok((1.0 - d * d).clamp(0.0, 1.0))
}

/// Uniform per-axis angles in `[−π/2, π/2]` with their quaternion.
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> (TaitBryanAngles, Quaternion) {
    let mut draw = || rng.gen_range(-FRAC_PI_2..=FRAC_PI_2);
    let angles = TaitBryanAngles {
        rx: draw(),
        ry: draw(),
        rz: draw(),
    };
    let q = tait_bryan_to_quaternion(&angles).expect("sampled angles are in range");
    (angles, q)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    type Mat = [[f64; 3]; 3];

    fn matmul(a: &Mat, b: &Mat) -> Mat {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    fn rx(t: f64) -> Mat {
        let (s, c) = t.sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }

    fn ry(t: f64) -> Mat {
        let (s, c) = t.sin_cos();
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    }

    fn rz(t: f64) -> Mat {
        let (s, c) = t.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    /// Shepperd's matrix-to-quaternion conversion.
    fn matrix_to_quaternion(m: &Mat) -> Quaternion {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        q.normalized().canonical()
    }

    fn same_rotation(a: &Quaternion, b: &Quaternion, tol: f64) -> bool {
        (a.dot(b).abs() - 1.0).abs() < tol
    }

    #[test]
    fn identity_angles_give_identity() {
        assert_eq!(
            tait_bryan_to_quaternion(&TaitBryanAngles::zero()).unwrap(),
            Quaternion::IDENTITY
        );
    }

    #[test]
    fn quarter_turn_about_x() {
        let a = TaitBryanAngles::new(FRAC_PI_2, 0.0, 0.0).unwrap();
        let q = tait_bryan_to_quaternion(&a).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q.w - h).abs() < 1e-6 && (q.x - h).abs() < 1e-6);
        assert!(q.y.abs() < 1e-6 && q.z.abs() < 1e-6);
        let oracle = matrix_to_quaternion(&rx(FRAC_PI_2));
        assert!(same_rotation(&q, &oracle, 1e-9));
    }

    #[test]
    fn out_of_range_angles_are_rejected() {
        assert!(TaitBryanAngles::new(2.0, 0.0, 0.0).is_err());
        assert!(TaitBryanAngles::new(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn matches_matrix_pipeline_and_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (a, q) = sample_rotation(&mut rng);
            assert!((q.norm() - 1.0).abs() < 1e-6);
            assert!(q.w >= 0.0);
            let m = matmul(&rz(a.rz()), &matmul(&ry(a.ry()), &rx(a.rx())));
            let oracle = matrix_to_quaternion(&m);
            let diff = q
                .canonical()
                .as_array()
                .iter()
                .zip(oracle.as_array())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            // canonical forms agree unless w is ~0, where either sign is valid
            assert!(diff < 1e-5 || same_rotation(&q, &oracle, 1e-9));
            let qm = q.to_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((qm[i][j] - m[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn relative_rotation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (_, qa) = sample_rotation(&mut rng);
            let (_, qb) = sample_rotation(&mut rng);
            let same = relative_rotation(&qa, &qa).unwrap();
            assert!(same_rotation(&same, &Quaternion::IDENTITY, 1e-12));
            let rel = relative_rotation(&qa, &qb).unwrap();
            let back = rel * qa;
            assert!(same_rotation(&back, &qb, 1e-10));
            let arr = back.as_array();
            let diff = arr
                .iter()
                .zip(qb.as_array())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-5);
        }
        assert!(
            relative_rotation(&Quaternion::new(2.0, 0.0, 0.0, 0.0), &Quaternion::IDENTITY).is_err()
        );
    }

    #[test]
    fn relative_rotation_composes_like_matrices() {
        let qa =
            tait_bryan_to_quaternion(&TaitBryanAngles::new(FRAC_PI_2, 0.0, 0.0).unwrap()).unwrap();
        let qb =
            tait_bryan_to_quaternion(&TaitBryanAngles::new(0.0, 0.0, FRAC_PI_2).unwrap()).unwrap();
        let rel = relative_rotation(&qa, &qb).unwrap();
        // R_rel = R_b · R_aᵀ
        let ra = rx(FRAC_PI_2);
        let rat = [
            [ra[0][0], ra[1][0], ra[2][0]],
            [ra[0][1], ra[1][1], ra[2][1]],
            [ra[0][2], ra[1][2], ra[2][2]],
        ];
        let want = matmul(&rz(FRAC_PI_2), &rat);
        let got = rel.to_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((got[i][j] - want[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_distance_examples() {
        let q = Quaternion::new(0.5, 0.5, 0.5, 0.5);
        assert!(rotation_distance(&q, &q).unwrap().abs() < 1e-12);
        assert!(rotation_distance(&q, &q.neg()).unwrap().abs() < 1e-12);
        let i = Quaternion::new(0.0, 1.0, 0.0, 0.0);
        assert_eq!(rotation_distance(&Quaternion::IDENTITY, &i).unwrap(), 1.0);
        assert!(rotation_distance(&Quaternion::new(0.5, 0.0, 0.0, 0.0), &q).is_err());
    }

    #[test]
    fn sampling_is_reproducible_bounded_and_centred() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let mut sums = [0.0; 3];
        let n = 10_000;
        for _ in 0..n {
            let (x, _) = sample_rotation(&mut a);
            let (y, _) = sample_rotation(&mut b);
            assert_eq!(x, y);
            for (s, v) in sums.iter_mut().zip(x.as_array()) {
                assert!((-FRAC_PI_2..=FRAC_PI_2).contains(&v));
                *s += v;
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.05);
        }
    }

    fn unit() -> impl Strategy<Value = Quaternion> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("nonzero", |(w, x, y, z)| {
                w * w + x * x + y * y + z * z > 1e-3
            })
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalized())
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_bounded_and_sign_invariant(a in unit(), b in unit()) {
            let d = rotation_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - rotation_distance(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((d - rotation_distance(&a.neg(), &b).unwrap()).abs() < 1e-12);
            prop_assert!(rotation_distance(&a, &a.neg()).unwrap() < 1e-6);
        }

        #[test]
        fn multiplication_is_associative(a in unit(), b in unit(), c in unit()) {
            let l = (a * b) * c;
            let r = a * (b * c);
            for (x, y) in l.as_array().iter().zip(r.as_array()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
