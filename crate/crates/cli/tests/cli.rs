use std::path::{Path, PathBuf};
use std::process::Command;

use adicurb::evaluation::{match_with_tolerance, micro_average};
use adicurb::postprocess::{read_mask_png, BevGrid};
use adicurb_cli::run;
use serde_json::Value;

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn count_files(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == ext)).count())
        .unwrap_or(0)
}

/// A sparse scene spec so batch tests stay fast.
fn small_spec(dir: &Path, seed: u64) -> PathBuf {
    let p = dir.join(format!("spec{seed}.toml"));
    std::fs::write(&p, format!("rings = 16\nazimuth_resolution = 0.0174533\nseed = {seed}\n")).unwrap();
    p
}

fn synth(out: &Path, frames: u64, extra: &[&str]) -> i32 {
    let mut args: Vec<String> = vec!["adicurb".into(), "synth".into(), "--out".into(), s(out), "--frames".into(), frames.to_string()];
    args.extend(extra.iter().map(|e| e.to_string()));
    run(args)
}

#[test]
fn default_synth_frame_feeds_adi_without_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(synth(&ds, 1, &[]), 0);
    for sub in ["velodyne/000000.bin", "calib/000000.txt", "ground_truth/000000.json", "gt_bev/000000.png", "run.json"] {
        assert!(ds.join(sub).is_file(), "{sub}");
    }
    let out = tmp.path().join("adi");
    assert_eq!(run(["adicurb", "adi", "--input", &s(&ds), "--out", &s(&out)]), 0);
    let png = image::open(out.join("adi/000000.png")).unwrap();
    assert_eq!((png.width(), png.height()), (1242, 375));
    let dump = adicurb::adi::read_f32_dump(&out.join("adi_f32/000000.bin")).unwrap();
    assert_eq!((dump.width, dump.height), (1242, 375));
    let run_json = read_json(&out.join("run.json"));
    assert_eq!(run_json["command"], "adi");
    assert_eq!(run_json["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn adi_single_file_and_explicit_calib() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let spec = small_spec(tmp.path(), 3);
    assert_eq!(synth(&ds, 1, &["--spec", &s(&spec)]), 0);
    let out = tmp.path().join("out");
    let code = run([
        "adicurb",
        "adi",
        "--input",
        &s(&ds.join("velodyne/000000.bin")),
        "--calib",
        &s(&ds.join("calib/000000.txt")),
        "--out",
        &s(&out),
    ]);
    assert_eq!(code, 0);
    assert!(out.join("adi_f32/000000.bin").is_file());
}

#[test]
fn adi_missing_calib_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let spec = small_spec(tmp.path(), 1);
    assert_eq!(synth(&ds, 1, &["--spec", &s(&spec)]), 0);
    std::fs::remove_dir_all(ds.join("calib")).unwrap();
    assert_eq!(run(["adicurb", "adi", "--input", &s(&ds), "--out", &s(&tmp.path().join("o"))]), 2);
    let bogus = tmp.path().join("nope.txt");
    assert_eq!(
        run(["adicurb", "adi", "--input", &s(&ds), "--calib", &s(&bogus), "--out", &s(&tmp.path().join("o2"))]),
        2
    );
}

#[test]
fn adi_empty_dir_reports_zero_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("empty");
    std::fs::create_dir_all(&input).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(["adicurb", "adi", "--input", &s(&input), "--out", &s(&out)]), 0);
    assert_eq!(read_json(&out.join("summary.json"))["frames_total"], 0);
    assert_eq!(read_json(&out.join("run.json"))["frames"], 0);
}

#[test]
fn adi_batch_output_count_matches_input() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let spec = small_spec(tmp.path(), 0);
    assert_eq!(synth(&ds, 100, &["--spec", &s(&spec)]), 0);
    let out = tmp.path().join("out");
    assert_eq!(run(["adicurb", "adi", "--input", &s(&ds), "--out", &s(&out)]), 0);
    assert_eq!(count_files(&ds.join("velodyne"), "bin"), 100);
    assert_eq!(count_files(&out.join("adi"), "png"), 100);
    assert_eq!(count_files(&out.join("adi_f32"), "bin"), 100);
}

#[test]
fn synth_bytes_follow_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let (s1, s2) = (small_spec(tmp.path(), 1), small_spec(tmp.path(), 2));
    assert_eq!(synth(&a, 1, &["--spec", &s(&s1)]), 0);
    assert_eq!(synth(&b, 1, &["--spec", &s(&s1)]), 0);
    assert_eq!(synth(&c, 1, &["--spec", &s(&s2)]), 0);
    let bytes = |d: &Path| std::fs::read(d.join("velodyne/000000.bin")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn synth_invalid_spec_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "road_width = -1.0\n").unwrap();
    assert_eq!(synth(&tmp.path().join("o"), 1, &["--spec", &s(&bad)]), 2);
    std::fs::write(&bad, "road_widht = 8.0\n").unwrap();
    assert_eq!(synth(&tmp.path().join("o"), 1, &["--spec", &s(&bad)]), 2);
}

#[test]
fn annotate_ten_frames_and_rerun_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(synth(&ds, 10, &[]), 0);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(["adicurb", "annotate", "--dataset", &s(&ds), "--out", &s(&a), "--jobs", "2"]), 0);
    for sub in ["adi", "label"] {
        assert_eq!(count_files(&a.join(sub), "png"), 10);
    }
    assert_eq!(count_files(&a.join("adi_f32"), "bin"), 10);
    assert_eq!(count_files(&a.join("meta"), "json"), 10);
    let summary = read_json(&a.join("summary.json"));
    assert_eq!(summary["frames_ok"], 10);
    assert_eq!(summary["frames_skipped"], 0);
    let adi_stats = &summary["timings_ms"]["adi"];
    assert_eq!(adi_stats["count"], 10);
    assert!(adi_stats["p95_ms"].as_f64().unwrap() >= adi_stats["median_ms"].as_f64().unwrap());

    assert_eq!(run(["adicurb", "annotate", "--dataset", &s(&ds), "--out", &s(&b)]), 0);
    let hash = |d: &Path| read_json(&d.join("run.json"))["config_hash"].clone();
    assert_eq!(hash(&a), hash(&b));
    let meta = read_json(&a.join("meta/000003.json"));
    assert_eq!(meta["config_hash"], hash(&a));

    let c = tmp.path().join("c");
    assert_eq!(
        run(["adicurb", "annotate", "--dataset", &s(&ds), "--out", &s(&c), "--set", "annotator.label.dilation_width=3"]),
        0
    );
    assert_ne!(hash(&a), hash(&c));
}

#[test]
fn annotate_corrupt_frame_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let spec = small_spec(tmp.path(), 4);
    assert_eq!(synth(&ds, 3, &["--spec", &s(&spec)]), 0);
    // 7 bytes is not a whole number of 16-byte records
    std::fs::write(ds.join("velodyne/000001.bin"), [1u8; 7]).unwrap();
    let out = tmp.path().join("lenient");
    assert_eq!(run(["adicurb", "annotate", "--dataset", &s(&ds), "--out", &s(&out)]), 1);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["frames_skipped"], 1);
    assert_eq!(summary["skipped"][0]["frame_id"], "000001");
    assert_eq!(count_files(&out.join("label"), "png"), 2);
    let strict = tmp.path().join("strict");
    assert_ne!(run(["adicurb", "annotate", "--dataset", &s(&ds), "--out", &s(&strict), "--strict"]), 0);
}

#[test]
fn postprocess_emits_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(synth(&ds, 1, &[]), 0);
    let ann = tmp.path().join("ann");
    assert_eq!(run(["adicurb", "annotate", "--dataset", &s(&ds), "--out", &s(&ann)]), 0);
    // an all-zero mask next to the real one
    image::GrayImage::new(1242, 375).save(ann.join("label/000009.png")).unwrap();
    let post = tmp.path().join("post");
    assert_eq!(
        run(["adicurb", "postprocess", "--masks", &s(&ann.join("label")), "--calib", &s(&ds.join("calib/000000.txt")), "--out", &s(&post)]),
        0
    );
    for (sub, ext) in [("bev", "png"), ("candidates", "csv"), ("curves", "json"), ("final", "png")] {
        assert_eq!(count_files(&post.join(sub), ext), 2, "{sub}");
    }
    let curves = read_json(&post.join("curves/000000.json"));
    assert!(!curves.as_array().unwrap().is_empty());
    for key in ["instance", "a", "b", "c", "v_min", "v_max"] {
        assert!(curves[0].get(key).is_some(), "{key}");
    }
    assert_eq!(read_json(&post.join("curves/000009.json")), Value::Array(Vec::new()));
    let bev = image::open(post.join("final/000000.png")).unwrap();
    assert_eq!((bev.width(), bev.height()), (400, 800));
}

#[test]
fn postprocess_malformed_png_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let spec = small_spec(tmp.path(), 5);
    assert_eq!(synth(&ds, 1, &["--spec", &s(&spec)]), 0);
    let masks = tmp.path().join("masks");
    std::fs::create_dir_all(&masks).unwrap();
    std::fs::write(masks.join("000000.png"), b"not a png").unwrap();
    let code = run(["adicurb", "postprocess", "--masks", &s(&masks), "--calib", &s(&ds), "--out", &s(&tmp.path().join("o"))]);
    assert_eq!(code, 2);
}

fn write_mask(path: &Path, cols: &[u32]) {
    let mut img = image::GrayImage::new(400, 800);
    for &c in cols {
        for r in 0..800 {
            img.put_pixel(c, r, image::Luma([255]));
        }
    }
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

#[test]
fn eval_identity_and_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    write_mask(&pred.join("a.png"), &[100, 300]);
    write_mask(&gt.join("a.png"), &[100, 300]);
    let out = tmp.path().join("same");
    assert_eq!(run(["adicurb", "eval", "--pred", &s(&pred), "--gt", &s(&gt), "--out", &s(&out)]), 0);
    let m = read_json(&out.join("metrics.json"));
    for k in ["precision", "recall", "f1"] {
        assert_eq!(m["micro"][k], 1.0);
        assert_eq!(m["macro"][k], 1.0);
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("frame,tp,fp,fn,precision,recall,f1\na,1600,0,0,1,1,1\n"), "{csv}");

    write_mask(&gt.join("a.png"), &[200]);
    let out = tmp.path().join("disjoint");
    assert_eq!(run(["adicurb", "eval", "--pred", &s(&pred), "--gt", &s(&gt), "--out", &s(&out)]), 0);
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["micro"]["f1"], 0.0);
    assert_eq!(m["frames"][0]["tp"], 0);
    assert_eq!(m["frames"][0]["fn"], 800);
}

#[test]
fn eval_missing_gt_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    write_mask(&pred.join("a.png"), &[10]);
    write_mask(&pred.join("b.png"), &[10]);
    write_mask(&gt.join("a.png"), &[10]);
    let out = tmp.path().join("o");
    assert_eq!(run(["adicurb", "eval", "--pred", &s(&pred), "--gt", &s(&gt), "--out", &s(&out)]), 1);
    assert_eq!(read_json(&out.join("metrics.json"))["missing_gt"][0], "b");
    assert_eq!(run(["adicurb", "eval", "--pred", &s(&pred), "--gt", &s(&gt), "--out", &s(&out), "--strict"]), 2);
}

#[test]
fn end_to_end_eval_matches_direct_call() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(synth(&ds, 2, &["--suite"]), 0);
    let (ann, post, ev) = (tmp.path().join("ann"), tmp.path().join("post"), tmp.path().join("eval"));
    assert_eq!(run(["adicurb", "annotate", "--dataset", &s(&ds), "--out", &s(&ann)]), 0);
    assert_eq!(run(["adicurb", "postprocess", "--masks", &s(&ann.join("label")), "--calib", &s(&ds), "--out", &s(&post)]), 0);
    assert_eq!(
        run(["adicurb", "eval", "--pred", &s(&post.join("final")), "--gt", &s(&ds.join("gt_bev")), "--out", &s(&ev)]),
        0
    );
    let counts: Vec<_> = ["000000", "000001"]
        .iter()
        .map(|id| {
            let p = BevGrid::from_image(&read_mask_png(&post.join(format!("final/{id}.png"))).unwrap());
            let g = BevGrid::from_image(&read_mask_png(&ds.join(format!("gt_bev/{id}.png"))).unwrap());
            match_with_tolerance(&p, &g, 2).unwrap()
        })
        .collect();
    let direct = micro_average(&counts);
    let m = read_json(&ev.join("metrics.json"));
    assert_eq!(m["micro"]["f1"].as_f64().unwrap(), direct.f1);
    assert_eq!(m["micro"]["precision"].as_f64().unwrap(), direct.precision);
    assert_eq!(m["frames"][1]["tp"].as_u64().unwrap(), counts[1].tp);
}

#[test]
fn bench_reports_both_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    assert_eq!(run(["adicurb", "bench", "--iterations", "5", "--warmup", "1", "--out", &s(&out)]), 0);
    let report = read_json(&out.join("bench.json"));
    assert!(report["pre"]["median_ms"].as_f64().unwrap() > 0.0);
    assert!(report["post"]["median_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(report["pre"]["count"], 5);
    assert_eq!(report["deterministic"], true);
    assert!(report["points"].as_u64().unwrap() > 100_000);
    assert!(out.join("run.json").is_file());
}

#[test]
fn bench_zero_iterations_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_adicurb")).args(["bench", "--iterations", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to measure"));
}

#[test]
fn config_file_from_environment_and_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[evaluation]\ntolerance = 7\n").unwrap();
    let bin = env!("CARGO_BIN_EXE_adicurb");
    let out = Command::new(bin).arg("config").env("ADICURB_CONFIG", &cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tolerance = 7"));

    std::fs::write(&cfg, "[evaluation]\ntolerence = 7\n").unwrap();
    let out = Command::new(bin).arg("config").env("ADICURB_CONFIG", &cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin).args(["config", "--set", "io.camera=P3"]).env_remove("ADICURB_CONFIG").output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("camera = \"P3\""));
}

#[test]
fn usage_errors_exit_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_adicurb")).args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_adicurb")).args(["--version"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
