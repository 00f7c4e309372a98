mod common;

use common::{max_rel, random_camera, random_pose, rng};
use proptest::prelude::*;
use setpose::geometry::{hflip_uvd, mpjpe, uvd_to_xyz, xyz_to_uvd, HandSide, JointSet3D, JointSetUVD, NUM_JOINTS};

fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        m
    };
    mul(mul(rz, ry), rx)
}

fn apply(m: &[[f64; 3]; 3], t: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let mut o = t;
    for i in 0..3 {
        for k in 0..3 {
            o[i] += m[i][k] * p[k];
        }
    }
    o
}

fn local_pose() -> impl Strategy<Value = JointSet3D<f64>> {
    prop::array::uniform21((-200.0..200.0f64, -200.0..200.0f64, -200.0..200.0f64))
        .prop_map(|a| JointSet3D::new(a.map(|(x, y, z)| [x, y, z + 1000.0])).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn xyz_uvd_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r);
        let xyz = random_pose(&mut r);
        let uvd = xyz_to_uvd(&xyz, &cam).unwrap();
        let back = uvd_to_xyz(&uvd, &cam).unwrap();
        prop_assert!(max_rel(back.joints(), xyz.joints()) < 1e-9);
        let again = xyz_to_uvd(&back, &cam).unwrap();
        prop_assert!(max_rel(again.joints(), uvd.joints()) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn depth_scaling_is_homogeneous(seed in any::<u64>(), e in -6i32..6, k in 0.01..100.0f64) {
        let mut r = rng(seed);
        let cam = random_camera(&mut r);
        let uvd = xyz_to_uvd(&random_pose(&mut r), &cam).unwrap();
        let base = uvd_to_xyz(&uvd, &cam).unwrap();
        // A power of two scales every product and quotient exactly.
        let p2 = 2f64.powi(e);
        let scaled = uvd_to_xyz(&uvd.with_depth_scaled(p2).unwrap(), &cam).unwrap();
        for (a, b) in scaled.joints().iter().zip(base.joints()) {
            for i in 0..3 {
                prop_assert_eq!(a[i], b[i] * p2);
            }
        }
        let scaled = uvd_to_xyz(&uvd.with_depth_scaled(k).unwrap(), &cam).unwrap();
        for (a, b) in scaled.joints().iter().zip(base.joints()) {
            for i in 0..3 {
                prop_assert!((a[i] - b[i] * k).abs() <= 4.0 * f64::EPSILON * (b[i] * k).abs());
            }
        }
    }

    #[test]
    fn mpjpe_is_a_symmetric_distance(a in local_pose(), b in local_pose()) {
        let ab = mpjpe(&a, &b);
        prop_assert_eq!(ab, mpjpe(&b, &a));
        prop_assert!(ab > 0.0);
        prop_assert_eq!(mpjpe(&a, &a), 0.0);
    }

    #[test]
    fn mpjpe_is_rigid_invariant(
        a in local_pose(),
        b in local_pose(),
        angles in (-3.2..3.2f64, -3.2..3.2f64, -3.2..3.2f64),
        t in (-500.0..500.0f64, -500.0..500.0f64, 0.0..500.0f64),
    ) {
        let m = rotation(angles.0, angles.1, angles.2);
        // Rotate about the local origin at z = 1000, then move well in front of the camera.
        let shift = [t.0, t.1, t.2 + 2000.0];
        let tf = |p: &JointSet3D<f64>| p.map(|q| apply(&m, shift, [q[0], q[1], q[2] - 1000.0])).unwrap();
        let before = mpjpe(&a, &b);
        let after = mpjpe(&tf(&a), &tf(&b));
        prop_assert!((before - after).abs() <= 1e-9 * before);
    }

    #[test]
    fn hflip_is_an_involution(
        j in prop::array::uniform21((0.0..640.0f64, 0.0..480.0f64, 100.0..2000.0f64)),
        left in any::<bool>(),
        w in 16.0..4096.0f64,
    ) {
        let pose = JointSetUVD::new(j.map(|(u, v, d)| [u, v, d])).unwrap();
        let side = if left { HandSide::Left } else { HandSide::Right };
        let (once, s1) = hflip_uvd(&pose, side, w);
        let (twice, s2) = hflip_uvd(&once, s1, w);
        prop_assert_eq!(s1, side.flipped());
        prop_assert_eq!(s2, side);
        for ((a, b), c) in once.joints().iter().zip(pose.joints()).zip(twice.joints()) {
            prop_assert_eq!(a[0], w - b[0]);
            prop_assert_eq!((a[1], a[2]), (b[1], b[2]));
            prop_assert_eq!((c[1], c[2]), (b[1], b[2]));
            prop_assert!((c[0] - b[0]).abs() <= 1e-12 * w);
        }
    }
}

#[test]
fn metric_worked_examples() {
    let gt = JointSet3D::new(std::array::from_fn(|i| [i as f64, 2.0 * i as f64, 500.0 + i as f64])).unwrap();
    let shifted = |d: [f64; 3]| gt.map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).unwrap();
    assert_eq!(mpjpe(&shifted([3.0, 4.0, 0.0]), &gt), 5.0);
    assert_eq!(mpjpe(&shifted([0.0, 0.0, 10.0]), &gt), 10.0);
    let mut one = *gt.joints();
    one[NUM_JOINTS - 1][2] += 21.0;
    assert_eq!(mpjpe(&JointSet3D::new(one).unwrap(), &gt), 1.0);
}

#[test]
fn nonpositive_depth_rejected() {
    let mut j = [[0.0, 0.0, 500.0]; NUM_JOINTS];
    j[3][2] = 0.0;
    assert!(JointSet3D::new(j).is_err());
    assert!(JointSetUVD::new(j).is_err());
    j[3][2] = f64::NAN;
    assert!(JointSet3D::new(j).is_err());
}
