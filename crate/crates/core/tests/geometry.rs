use hydraview::geometry::*;
use proptest::prelude::*;

const TORSO: TorsoJoints = TorsoJoints {
    left_shoulder: 0,
    right_shoulder: 1,
    right_hip: 2,
    left_hip: 3,
};

/// Torso in the z = 0 plane around the rig target, chest toward +z (camera 0),
/// plus a hand reaching forward and one held out to the side.
fn facing_camera0() -> SkeletonWindow3D<f64> {
    let joints = vec![
        [-0.2, 1.4, 0.0],
        [0.2, 1.4, 0.0],
        [0.15, 0.9, 0.0],
        [-0.15, 0.9, 0.0],
        [0.0, 1.15, 0.35],
        [0.7, 1.2, 0.0],
    ];
    SkeletonWindow3D::new(1, joints.len(), joints).unwrap()
}

fn random_window(frames: usize, joints: usize) -> impl Strategy<Value = SkeletonWindow3D<f64>> {
    prop::collection::vec((-0.6f64..0.6, 0.4f64..1.8, -0.6f64..0.6), frames * joints).prop_map(move |v| {
        let pos = v.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        SkeletonWindow3D::new(frames, joints, pos).unwrap()
    })
}

#[test]
fn render_views_examples() {
    let w = facing_camera0();
    let cams = make_virtual_cameras::<f64>(&RigConfig::default()).unwrap();
    let views = render_views(&w, &cams, &TORSO, 0.0).unwrap();
    assert_eq!(views.len(), 12);
    for (v, pw) in views.iter().enumerate() {
        assert_eq!((pw.frames, pw.joints, pw.view), (1, 6, v));
        assert_eq!(pw.coords.len(), 6);
    }
    // the forward hand is seen from the front and hidden from behind
    assert!(views[0].visible[4]);
    assert!(!views[6].visible[4]);
    assert_eq!(views[6].coords[4], [0.0, 0.0]);
    // torso joints are never self-occluded
    assert!(views.iter().all(|pw| pw.visible[..4].iter().all(|&v| v)));

    let one = render_views(&w, &cams[..1], &TORSO, 0.0).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0], views[0]);

    let bad = TorsoJoints { left_hip: 9, ..TORSO };
    assert!(render_views(&w, &cams, &bad, 0.0).is_err());
}

#[test]
fn occlusion_against_intersection_oracle() {
    // plane z = 0 over the unit square, camera on the +z axis
    let plane = fit_torso_plane(&[[-0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.5, -0.5, 0.0], [-0.5, -0.5, 0.0]]).unwrap();
    let cam = [0.0, 0.0, 5.0];
    // oracle: s = z_c / (z_c - z_j), hit = c + s (j - c)
    let hit_x = |j: [f64; 3]| {
        let s = cam[2] / (cam[2] - j[2]);
        cam[0] + s * (j[0] - cam[0])
    };
    assert!(segment_hits_torso(cam, [0.0, 0.0, -1.0], &plane, 0.0));
    assert!(hit_x([0.0, 0.0, -1.0]).abs() < 1e-12);
    assert!(!segment_hits_torso(cam, [0.0, 0.0, 2.0], &plane, 0.0));
    let far = [10.0, 0.0, -1.0];
    assert!((hit_x(far) - 25.0 / 3.0).abs() < 1e-12);
    assert!(!segment_hits_torso(cam, far, &plane, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rig_is_circularly_symmetric(w in random_window(2, 7)) {
        let cams = make_virtual_cameras::<f64>(&RigConfig::default()).unwrap();
        let rotated = w.map_positions(|p| rotate_about_vertical(p, 30f64.to_radians()));
        let a = render_views(&w, &cams, &TORSO, 0.0).unwrap();
        let b = render_views(&rotated, &cams, &TORSO, 0.0).unwrap();
        for i in 0..12 {
            let (pa, pb) = (&a[i], &b[(i + 1) % 12]);
            prop_assert_eq!(&pa.visible, &pb.visible, "view {}", i);
            for (ca, cb) in pa.coords.iter().zip(&pb.coords) {
                prop_assert!((ca[0] - cb[0]).abs() < 1e-9 && (ca[1] - cb[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn visibility_is_monotone_in_margin(w in random_window(2, 9), m0 in 0.0f64..0.3, dm in 0.0f64..0.3) {
        let cams = make_virtual_cameras::<f64>(&RigConfig::default()).unwrap();
        let lo = render_views(&w, &cams, &TORSO, m0).unwrap();
        let hi = render_views(&w, &cams, &TORSO, m0 + dm).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            for (va, vb) in a.visible.iter().zip(&b.visible) {
                prop_assert!(*va || !*vb, "occluded joint became visible with a wider margin");
            }
        }
    }

    #[test]
    fn back_projection_inverts_projection(w in random_window(1, 8), view in 0usize..12) {
        let cam = &make_virtual_cameras::<f64>(&RigConfig::default()).unwrap()[view];
        for f in 0..w.frames {
            for j in 0..w.joints {
                let p = w.joint(f, j);
                let Some(uv) = cam.project(p) else { continue };
                let depth = cam.to_camera(p)[2];
                let back = cam.back_project(uv, depth);
                for d in 0..3 {
                    prop_assert!((back[d] - p[d]).abs() < 1e-9);
                }
            }
        }
    }
}
