use nalgebra::{Rotation3, Vector3};
use poifusion_core::geometry::{
    bev_iou, box_corners, project_bev, project_camera, ring_rig, visible_views, BevGrid, Box3D, CameraModel,
};
use poifusion_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simple_camera() -> CameraModel {
    CameraModel {
        intrinsics: [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]],
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
        image_size: (100, 100),
    }
}

fn grid(x_min: f64, voxel: f64, d: u32) -> BevGrid {
    BevGrid { x_min, y_min: x_min, x_max: -x_min, y_max: -x_min, voxel_x: voxel, voxel_y: voxel, downsample: d }
}

/// Corners from a rotation-matrix transform of the canonical local corners.
fn oracle_corners(b: &Box3D) -> Vec<[f64; 3]> {
    let yaw = b.sin.atan2(b.cos);
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let mut out = Vec::new();
    for sz in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sx in [-1.0, 1.0] {
                let local = Vector3::new(sx * b.l / 2.0, sy * b.w / 2.0, sz * b.h / 2.0);
                let p = r * local + Vector3::new(b.x, b.y, b.z);
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    out
}

#[test]
fn corners_match_rotation_oracle_at_thirty_degrees() {
    let s30 = 30f64.to_radians();
    let b = Box3D::from_array([1.0, 2.0, 3.0, 2.0, 4.0, 6.0, s30.sin(), s30.cos()]);
    let c = box_corners(&b).unwrap();
    for (a, o) in c.iter().zip(oracle_corners(&b)) {
        for k in 0..3 {
            assert!((a[k] - o[k]).abs() < 1e-12, "{a:?} vs {o:?}");
        }
    }
}

#[test]
fn corners_match_rotation_oracle_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let yaw = rng.random_range(-3.2..3.2);
        let b = Box3D::new(
            [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0)],
            [rng.random_range(0.3..3.0), rng.random_range(0.3..8.0), rng.random_range(0.3..4.0)],
            yaw,
        );
        for (a, o) in box_corners(&b).unwrap().iter().zip(oracle_corners(&b)) {
            for k in 0..3 {
                assert!((a[k] - o[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn corners_reject_degenerate_boxes() {
    let zero_heading = Box3D::from_array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    assert!(matches!(box_corners(&zero_heading), Err(Error::DegenerateHeading)));
    let flat = Box3D::from_array([0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(box_corners(&flat).is_err());
}

#[test]
fn bev_projection_examples() {
    let g = grid(-54.0, 0.075, 8);
    assert_eq!(project_bev([-54.0, -54.0, 0.0], &g), (0.0, 0.0));
    let (m, _) = project_bev([0.0, 0.0, 0.0], &g);
    assert!((m - 90.0).abs() < 1e-9, "{m}");
    let (m, n) = project_bev([-54.0 + 0.6, -54.0, 0.0], &g);
    assert!((m - 1.0).abs() < 1e-12 && n == 0.0);
}

#[test]
fn bev_extents_need_whole_cells() {
    let desk = grid(-14.4, 0.075, 8);
    assert_eq!(desk.extents().unwrap(), (48, 48));
    let odd = BevGrid { x_max: -14.4 + 0.61, ..desk };
    assert!(matches!(odd.validate(), Err(Error::Config(_))));
}

#[test]
fn bev_round_trip() {
    let g = grid(-14.4, 0.075, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (x, y) = (rng.random_range(-14.4..14.4), rng.random_range(-14.4..14.4));
        let (m, n) = g.project([x, y, 0.7]);
        let (bx, by) = g.unproject(m, n);
        assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
    }
}

#[test]
fn pinhole_examples() {
    let cam = simple_camera();
    let p = project_camera([0.0, 0.0, 10.0], &cam).unwrap();
    assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 10.0));
    let p = project_camera([1.0, 0.0, 10.0], &cam).unwrap();
    assert!((p.u - 60.0).abs() < 1e-12 && (p.v - 50.0).abs() < 1e-12);
    assert!(project_camera([0.0, 0.0, -5.0], &cam).is_none());
    // outside the image
    assert!(project_camera([10.0, 0.0, 10.0], &cam).is_none());
}

#[test]
fn projection_round_trip_through_depth() {
    let rig = ring_rig(2, 110.0, 160, 96, [0.0, 0.0, 1.6]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for _ in 0..2000 {
        let p = [rng.random_range(-14.0..14.0), rng.random_range(-14.0..14.0), rng.random_range(0.0..3.0)];
        for cam in &rig {
            let Some(pr) = cam.project(p) else { continue };
            // back-project the pixel at the recovered depth
            let k = &cam.intrinsics;
            let q = [(pr.u - k[0][2]) * pr.depth / k[0][0], (pr.v - k[1][2]) * pr.depth / k[1][1], pr.depth];
            let t = [q[0] - cam.translation[0], q[1] - cam.translation[1], q[2] - cam.translation[2]];
            let r = &cam.rotation;
            let back: Vec<f64> = (0..3).map(|j| (0..3).map(|i| r[i][j] * t[i]).sum()).collect();
            for k in 0..3 {
                assert!((back[k] - p[k]).abs() < 1e-9);
            }
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn ring_rig_cameras_are_valid() {
    for cam in ring_rig(6, 70.0, 160, 96, [0.0, 0.0, 1.6]) {
        cam.validate().unwrap();
    }
}

#[test]
fn view_visibility() {
    let rig = ring_rig(2, 110.0, 160, 96, [0.0, 0.0, 1.6]);
    assert_eq!(visible_views([10.0, 0.0, 0.0], &rig), vec![0]);
    assert_eq!(visible_views([-10.0, 0.0, 0.0], &rig), vec![1]);
    // straight up is behind every camera
    assert!(visible_views([0.0, 0.0, 50.0], &rig).is_empty());
    let four = ring_rig(4, 120.0, 160, 96, [0.0, 0.0, 1.6]);
    assert_eq!(visible_views([10.0, 10.0, 1.6], &four), vec![0, 1]);
}

#[test]
fn bev_iou_cases() {
    let a = Box3D::new([0.0; 3], [2.0, 4.0, 1.0], 0.3);
    assert!((bev_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let far = Box3D::new([10.0, 0.0, 0.0], [2.0, 4.0, 1.0], 0.3);
    assert_eq!(bev_iou(&a, &far).unwrap(), 0.0);
    // axis-aligned half overlap: intersection 2·2 = 4, union 8 + 8 − 4 = 12
    let p = Box3D::new([0.0; 3], [2.0, 4.0, 1.0], 0.0);
    let q = Box3D::new([2.0, 0.0, 0.0], [2.0, 4.0, 1.0], 0.0);
    assert!((bev_iou(&p, &q).unwrap() - 4.0 / 12.0).abs() < 1e-12);
}
