//! Property-based tests over the geometry and metric layers.

use proptest::prelude::*;
use tempose_core::data;
use tempose_core::geom::{
    project_center, quat_to_rotmat, recover_translation, transform_points, BoundingBox,
    CameraIntrinsics, ObjectModel, Pose, Quaternion,
};
use tempose_core::metrics::{accuracy_curve, add, add_s, auc};

fn quat_strategy() -> impl Strategy<Value = Quaternion> {
    (
        -1.0f64..1.0,
        -1.0f64..1.0,
        -1.0f64..1.0,
        -1.0f64..1.0,
    )
        .prop_filter_map("quaternion norm too small", |(w, x, y, z)| {
            let q = Quaternion::new(w, x, y, z);
            (q.norm() > 0.3).then_some(q)
        })
}

fn unit_quat_strategy() -> impl Strategy<Value = Quaternion> {
    quat_strategy().prop_map(|q| q.normalized().unwrap())
}

fn translation_strategy() -> impl Strategy<Value = [f64; 3]> {
    (-0.5f64..0.5, -0.5f64..0.5, 0.3f64..3.0).prop_map(|(x, y, z)| [x, y, z])
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (unit_quat_strategy(), translation_strategy()).prop_map(|(q, t)| Pose::new(q, t))
}

fn test_model() -> ObjectModel {
    let points = (0..8)
        .map(|i| {
            let a = i as f64 * std::f64::consts::PI / 4.0;
            [0.05 * a.cos(), 0.05 * a.sin(), 0.02 * (i as f64 - 3.5)]
        })
        .collect();
    ObjectModel::new(1, "octad".to_string(), points, false).unwrap()
}

proptest! {
    /// q and -q encode the same rotation.
    #[test]
    fn rotation_double_cover(q in quat_strategy()) {
        let a = quat_to_rotmat(&q).unwrap();
        let b = quat_to_rotmat(&q.neg()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((a[i][j] - b[i][j]).abs() < 1e-12);
            }
        }
    }

    /// Projecting a translation and recovering it with the true depth is the
    /// identity.
    #[test]
    fn projection_roundtrip(
        t in translation_strategy(),
        f_x in 100.0f64..1000.0,
        f_y in 100.0f64..1000.0,
    ) {
        let k = CameraIntrinsics::new(f_x, f_y, 320.0, 240.0).unwrap();
        let c = project_center(&t, &k).unwrap();
        let back = recover_translation(&c, &[0.0, 0.0], t[2], &k).unwrap();
        for i in 0..3 {
            prop_assert!((back[i] - t[i]).abs() < 1e-9, "{:?} vs {:?}", back, t);
        }
    }

    /// Rigid transforms preserve pairwise distances.
    #[test]
    fn transform_preserves_distances(
        pose in pose_strategy(),
        a in prop::array::uniform3(-0.2f64..0.2),
        b in prop::array::uniform3(-0.2f64..0.2),
    ) {
        let moved = transform_points(&pose, &[a, b]).unwrap();
        let before = dist(&a, &b);
        let after = dist(&moved[0], &moved[1]);
        prop_assert!((before - after).abs() < 1e-9);
    }

    /// Slerp hits both endpoints (up to sign).
    #[test]
    fn slerp_endpoints(a in unit_quat_strategy(), b in unit_quat_strategy()) {
        prop_assert!(quat_gap(&a, &a.slerp(&b, 0.0)) < 1e-9);
        prop_assert!(quat_gap(&b, &a.slerp(&b, 1.0)) < 1e-9);
    }

    /// Accuracy curves are monotone in the threshold and AUC stays in
    /// [0, 100].
    #[test]
    fn accuracy_curve_monotone(errors in prop::collection::vec(0.0f64..0.3, 1..50)) {
        let curve = accuracy_curve(&errors, 0.1, 200).unwrap();
        for w in curve.accuracy.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        let a = auc(&curve);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    /// Bbox jitter only grows the box, never moves its center.
    #[test]
    fn jitter_grows_box_in_place(
        c_x in -100.0f64..100.0,
        c_y in -100.0f64..100.0,
        w in 1.0f64..50.0,
        h in 1.0f64..50.0,
        seed in 0u64..1000,
    ) {
        use rand_chacha::rand_core::SeedableRng;
        let b = BoundingBox::new(c_x, c_y, w, h).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let j = data::jitter_bbox(&b, &mut rng);
        prop_assert_eq!(j.c_x, b.c_x);
        prop_assert_eq!(j.c_y, b.c_y);
        prop_assert!(j.width >= b.width && j.width <= b.width * (1.0 + data::MAX_JITTER) + 1e-12);
        prop_assert!(j.height >= b.height && j.height <= b.height * (1.0 + data::MAX_JITTER) + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Nearest-neighbour matching can only shrink the error: ADD-S <= ADD.
    #[test]
    fn add_s_never_exceeds_add(est in pose_strategy(), gt in pose_strategy()) {
        let model = test_model();
        let a = add(&est, &gt, &model).unwrap();
        let s = add_s(&est, &gt, &model).unwrap();
        prop_assert!(s <= a + 1e-12, "add_s {} > add {}", s, a);
    }
}

/// Component-wise distance between quaternions, folded over the double
/// cover. Better conditioned near zero than the acos-based angle.
fn quat_gap(a: &Quaternion, b: &Quaternion) -> f64 {
    let d = |s: f64| -> f64 {
        ((a.w - s * b.w).powi(2)
            + (a.x - s * b.x).powi(2)
            + (a.y - s * b.y).powi(2)
            + (a.z - s * b.z).powi(2))
        .sqrt()
    };
    d(1.0).min(d(-1.0))
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
