use adicurb::annotator::{detect_curbs_3d, generate_training_pair, AnnotatorConfig, DetectionWarning};
use adicurb::beam_classify::Side;
use adicurb::kitti_io::{load_calibration, read_velodyne_with, RawPoint, RingAssignment};
use adicurb::projection::Projector;
use adicurb::synth::{generate_scene, write_scene, GroundTruthCurb, Scene, SceneSpec, Surface};

fn gt(scene: &Scene, side: Side) -> &GroundTruthCurb {
    scene.curbs.iter().find(|c| c.side == side).expect("ground truth for side")
}

fn fraction_near(points: &[RawPoint], curb: &GroundTruthCurb, tol: f64) -> f64 {
    let near = points
        .iter()
        .filter(|p| (f64::from(p.y) - curb.lateral_at(f64::from(p.x))).abs() <= tol)
        .count();
    near as f64 / points.len() as f64
}

fn rms(points: &[RawPoint], curb: &GroundTruthCurb) -> f64 {
    let ss: f64 = points
        .iter()
        .map(|p| (f64::from(p.y) - curb.lateral_at(f64::from(p.x))).powi(2))
        .sum();
    (ss / points.len() as f64).sqrt()
}

#[test]
fn straight_scene_points_hug_the_curbs() {
    let scene = generate_scene(&SceneSpec::default()).unwrap();
    let det = detect_curbs_3d(&scene.cloud, &AnnotatorConfig::default()).unwrap();
    assert!(det.left.len() >= 10 && det.right.len() >= 10, "{} / {}", det.left.len(), det.right.len());
    for (points, side) in [(&det.left, Side::Left), (&det.right, Side::Right)] {
        let f = fraction_near(points, gt(&scene, side), 0.3);
        assert!(f >= 0.9, "{side:?}: {f}");
    }
    // the parked car sits right next to the curb but must not leak in
    for &i in det.left_indices.iter().chain(&det.right_indices) {
        assert!(!matches!(scene.surfaces[i], Surface::Obstacle(_)), "point {i} is on the car");
    }
}

#[test]
fn curved_scene_rms_is_small() {
    let mut spec = SceneSpec { seed: 3, ..Default::default() };
    spec.left_profile.quadratic = 0.002;
    spec.right_profile.quadratic = 0.002;
    let scene = generate_scene(&spec).unwrap();
    let det = detect_curbs_3d(&scene.cloud, &AnnotatorConfig::default()).unwrap();
    for (points, side) in [(&det.left, Side::Left), (&det.right, Side::Right)] {
        assert!(!points.is_empty(), "{side:?} empty");
        let e = rms(points, gt(&scene, side));
        assert!(e <= 0.15, "{side:?}: rms {e}");
    }
}

#[test]
fn flat_plane_has_no_curbs() {
    let spec = SceneSpec { curbs: false, obstacles: vec![], ..Default::default() };
    let scene = generate_scene(&spec).unwrap();
    let det = detect_curbs_3d(&scene.cloud, &AnnotatorConfig::default()).unwrap();
    assert!(det.left.is_empty() && det.right.is_empty());
    assert!(det.warnings.contains(&DetectionWarning::EmptyLeft));
    assert!(det.warnings.contains(&DetectionWarning::EmptyRight));
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

#[test]
fn label_pixels_follow_projected_ground_truth() {
    let spec = SceneSpec::default();
    let scene = generate_scene(&spec).unwrap();
    let cfg = AnnotatorConfig::default();
    let pair = generate_training_pair(&scene.cloud, &scene.calibration, &cfg).unwrap();
    let projector = Projector::new(&scene.calibration);

    // The detected points lie on the foot and top edges of the face, which
    // sit several pixels off a single mid-face polyline up close. So the
    // oracle is the projected face: polylines stacked from foot to top,
    // split wherever a vertex leaves the view or is hidden.
    let mut segments = Vec::new();
    for curb in &scene.curbs {
        for k in 0..=8 {
            let dz = spec.curb_height * (f64::from(k) / 8.0 - 0.5);
            let mut prev: Option<(f64, f64)> = None;
            for (i, v) in curb.polyline.iter().enumerate() {
                let cur = projector
                    .project_xyz([v[0], v[1], v[2] + dz])
                    .filter(|s| curb.is_camera_visible(i) && s.u > -50.0 && s.u < 1300.0)
                    .map(|s| (s.u, s.v));
                if let (Some(a), Some(b)) = (prev, cur) {
                    segments.push((a, b));
                }
                prev = cur;
            }
        }
    }
    assert!(!segments.is_empty());

    let mut total = 0usize;
    let mut near = 0usize;
    for y in 0..pair.label.height {
        for x in 0..pair.label.width {
            if pair.label.get(x, y) == 0 {
                continue;
            }
            total += 1;
            let p = (x as f64, y as f64);
            if segments.iter().any(|&(a, b)| segment_distance(p, a, b) <= 3.0) {
                near += 1;
            }
        }
    }
    assert!(total > 0);
    let f = near as f64 / total as f64;
    assert!(f >= 0.95, "{near}/{total} = {f}");
}

#[test]
fn label_pixels_sit_on_high_adi() {
    let scene = generate_scene(&SceneSpec::default()).unwrap();
    // A raw ADI is as sparse as the sweep: a dilated label disk mostly
    // covers empty pixels. Filling columns makes the image dense enough for
    // a per-pixel comparison.
    let mut cfg = AnnotatorConfig::default();
    cfg.adi.vertical_fill = true;
    cfg.adi.fill_max_rows = 32;
    let pair = generate_training_pair(&scene.cloud, &scene.calibration, &cfg).unwrap();
    let mut sorted = pair.adi.values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];

    let (mut total, mut above) = (0usize, 0usize);
    let (mut on, mut off, mut off_n) = (0.0, 0.0, 0usize);
    for (i, &v) in pair.adi.values.iter().enumerate() {
        if pair.label.values[i] != 0 {
            total += 1;
            above += usize::from(v > median);
            on += v;
        } else if v > 0.0 {
            off += v;
            off_n += 1;
        }
    }
    let f = above as f64 / total as f64;
    assert!(f >= 0.8, "{above}/{total} = {f} (median {median})");
    let (on, off) = (on / total as f64, off / off_n as f64);
    // walls and the car are steep too, so only ask for a clear margin
    assert!(on > 1.2 * off, "labels {on} vs rest {off}");
}

#[test]
fn training_pair_is_deterministic() {
    let scene = generate_scene(&SceneSpec { seed: 7, ..Default::default() }).unwrap();
    let cfg = AnnotatorConfig::default();
    let a = generate_training_pair(&scene.cloud, &scene.calibration, &cfg).unwrap();
    let b = generate_training_pair(&scene.cloud, &scene.calibration, &cfg).unwrap();
    assert_eq!(a.adi.values, b.adi.values);
    assert_eq!(a.label, b.label);
    assert_eq!(a.detection.left_indices, b.detection.left_indices);
    assert_eq!(a.detection.right_indices, b.detection.right_indices);
}

#[test]
fn disk_round_trip_gives_the_same_detection() {
    let scene = generate_scene(&SceneSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), "000000", &scene).unwrap();

    let frame = read_velodyne_with(
        &dir.path().join("velodyne/000000.bin"),
        64,
        RingAssignment::ScanOrder,
    )
    .unwrap();
    assert_eq!(frame.cloud.len(), scene.cloud.len());
    for (a, b) in frame.cloud.points.iter().zip(&scene.cloud.points) {
        assert!(a.bit_eq(b));
    }
    let calib = load_calibration(&dir.path().join("calib/000000.txt")).unwrap();
    let from_disk = detect_curbs_3d(&frame.cloud, &AnnotatorConfig::default()).unwrap();
    let in_memory = detect_curbs_3d(&scene.cloud, &AnnotatorConfig::default()).unwrap();
    assert_eq!(from_disk.left_indices, in_memory.left_indices);
    assert_eq!(from_disk.right_indices, in_memory.right_indices);
    assert_eq!(calib.image_width, scene.calibration.image_width);
}

