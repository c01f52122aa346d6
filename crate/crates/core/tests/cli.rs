mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use common::*;
use overcount::analytics;
use overcount::cli::{
    cmd_count, cmd_eval, cmd_split, cmd_trend, CountArgs, DetectorKind, EvalArgs, RunConfig, Settings, SplitArgs,
    TrendArgs,
};
use overcount::detection::read_detections;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn count_args(dir: &Path, detector: DetectorKind) -> CountArgs {
    CountArgs {
        manifest: dir.join("manifest.csv"),
        locations: None,
        aoi: None,
        detector,
        detections_in: None,
        annotations: Some(dir.join("ann")),
        out_dir: dir.join("out"),
        config: None,
        settings: Settings::default(),
    }
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

const LOT_POLYGON: [(f64, f64); 5] = [(0.0, 0.0), (300.0, 0.0), (300.0, 200.0), (150.0, 320.0), (0.0, 200.0)];

fn aoi_geojson(location_id: &str) -> String {
    let ring: Vec<String> = LOT_POLYGON
        .iter()
        .chain(std::iter::once(&LOT_POLYGON[0]))
        .map(|(x, y)| format!("[{x}, {y}]"))
        .collect();
    format!(
        r#"{{"type": "FeatureCollection", "features": [{{"type": "Feature",
        "properties": {{"name": "lot", "location_id": "{location_id}", "frame": "pixel"}},
        "geometry": {{"type": "Polygon", "coordinates": [[{}]]}}}}]}}"#,
        ring.join(", ")
    )
}

#[test]
fn oracle_counts_equal_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = scatter_centers(&mut rng, 700, 500, 120, 32.0);
    let b = scatter_centers(&mut rng, 512, 512, 60, 32.0);
    write(
        &d.join("manifest.csv"),
        &manifest_text(&[
            SceneSpec {
                scene_id: "a",
                location_id: "1",
                capture_date: "2019-05-01",
                width: 700,
                height: 500,
            },
            SceneSpec {
                scene_id: "b",
                location_id: "2",
                capture_date: "2020-05-01",
                width: 512,
                height: 512,
            },
        ]),
    );
    write(&d.join("ann/a.txt"), &cowc_text(&a));
    write(&d.join("ann/b.txt"), &cowc_text(&b));
    write(&d.join("aoi.geojson"), &aoi_geojson("1"));
    let mut args = count_args(d, DetectorKind::Oracle);
    args.aoi = Some(d.join("aoi.geojson"));

    let out = cmd_count(&args, &RunConfig::default()).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let in_lot = a.iter().filter(|&&c| ref_point_in_polygon(c, &LOT_POLYGON)).count();
    let got: Vec<(&str, &str, usize)> = out
        .records
        .iter()
        .map(|r| (r.scene_id.as_str(), r.aoi_name.as_str(), r.count))
        .collect();
    assert_eq!(got, vec![("a", "lot", in_lot), ("b", "full", b.len())]);

    let on_disk = analytics::parse_counts(fs::File::open(&out.counts_path).unwrap()).unwrap();
    assert_eq!(on_disk, out.records);
    let merged = read_detections(&out.detections_path).unwrap();
    assert_eq!(merged.len(), a.len() + b.len());
    let meta = fs::read_to_string(&out.counts_path).unwrap();
    for key in [
        "# tile_size=256",
        "# tile_stride=192",
        "# nms_iou=0.3",
        "# seed=0",
        "# config_hash=",
    ] {
        assert!(meta.contains(key), "missing {key} in\n{meta}");
    }
}

#[test]
fn empty_manifest_gives_empty_counts() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("manifest.csv"), &manifest_text(&[]));
    let out = cmd_count(&count_args(dir.path(), DetectorKind::Oracle), &RunConfig::default()).unwrap();
    assert!(out.records.is_empty());
    assert!(!out.total_failure());
    assert_eq!(data_lines(&out.counts_path), vec![analytics::COUNTS_HEADER.to_owned()]);
    assert_eq!(fs::read_to_string(&out.detections_path).unwrap(), "");
}

#[test]
fn file_detector_counts_match_pointwise_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("manifest.csv"),
        &manifest_text(&[
            SceneSpec {
                scene_id: "lot_a",
                location_id: "7",
                capture_date: "2019-03-02",
                width: 512,
                height: 512,
            },
            SceneSpec {
                scene_id: "lot_b",
                location_id: "7",
                capture_date: "2020-03-02",
                width: 512,
                height: 512,
            },
        ]),
    );
    write(&d.join("aoi.geojson"), &aoi_geojson("7"));
    let mut args = count_args(d, DetectorKind::File);
    args.detections_in = Some(fixture("bridge_detections.jsonl"));
    args.aoi = Some(d.join("aoi.geojson"));
    let out = cmd_count(&args, &RunConfig::default()).unwrap();

    let records = read_detections(&fixture("bridge_detections.jsonl")).unwrap();
    for scene in ["lot_a", "lot_b"] {
        let boxes: Vec<(Rect, f64)> = records
            .iter()
            .filter(|r| r.scene_id == scene)
            .map(|r| (r.detection.bbox().coords(), r.detection.score()))
            .collect();
        let expected = brute_force_nms(&boxes, 0.3)
            .iter()
            .filter(|(b, _)| ref_point_in_polygon(((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0), &LOT_POLYGON))
            .count();
        let got = out.records.iter().find(|r| r.scene_id == scene).unwrap().count;
        assert_eq!(got, expected, "{scene}");
    }
    assert_eq!(out.records.iter().map(|r| r.count).collect::<Vec<_>>(), vec![6, 2]);
}

#[test]
fn blob_detector_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (img, cars) = parking_lot(&mut rng, 600, 450, 80, 3);
    img.save(d.join("p.png")).unwrap();
    write(
        &d.join("manifest.csv"),
        &manifest_text(&[SceneSpec {
            scene_id: "p",
            location_id: "1",
            capture_date: "2019-01-01",
            width: 600,
            height: 450,
        }]),
    );
    let out = cmd_count(&count_args(d, DetectorKind::Blob), &RunConfig::default()).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.records[0].count, cars.len());
}

#[test]
fn partial_failures_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("manifest.csv"),
        &(manifest_text(&[
            SceneSpec {
                scene_id: "ok",
                location_id: "1",
                capture_date: "2019-01-01",
                width: 256,
                height: 256,
            },
            SceneSpec {
                scene_id: "missing",
                location_id: "1",
                capture_date: "2019-02-01",
                width: 256,
                height: 256,
            },
        ]) + "gray,1,2019-03-01,0.15,256,256,gray.png,true\n")
            .replacen("image_path\n", "image_path,grayscale\n", 1),
    );
    write(&d.join("ann/ok.txt"), "30 30\n100 100\n");
    let out = cmd_count(&count_args(d, DetectorKind::Oracle), &RunConfig::default()).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].count, 2);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].scene_id, "missing");
    assert_eq!(out.skipped.len(), 1);
    assert!(!out.total_failure());
    let text = fs::read_to_string(&out.counts_path).unwrap();
    assert!(text.contains("# errors\n# error missing: "), "{text}");
    assert!(text.contains("# skipped gray: grayscale"), "{text}");

    fs::remove_file(d.join("ann/ok.txt")).unwrap();
    let out = cmd_count(&count_args(d, DetectorKind::Oracle), &RunConfig::default()).unwrap();
    assert!(out.total_failure());
}

fn ten_boxes() -> Vec<(f64, f64)> {
    lattice_centers(10, 512)
}

fn interchange(scene: &str, centers: &[(f64, f64)]) -> String {
    centers
        .iter()
        .map(|(x, y)| {
            format!(
                "{{\"scene_id\": \"{scene}\", \"x_min\": {}, \"y_min\": {}, \"x_max\": {}, \"y_max\": {}, \"score\": 0.9}}\n",
                x - 16.0,
                y - 16.0,
                x + 16.0,
                y + 16.0
            )
        })
        .collect()
}

fn eval_fixture(d: &Path, predictions: &str) -> EvalArgs {
    write(
        &d.join("manifest.csv"),
        &manifest_text(&[
            SceneSpec {
                scene_id: "s1",
                location_id: "1",
                capture_date: "2019-01-01",
                width: 512,
                height: 512,
            },
            SceneSpec {
                scene_id: "s2",
                location_id: "1",
                capture_date: "2019-01-02",
                width: 512,
                height: 512,
            },
            SceneSpec {
                scene_id: "noann",
                location_id: "1",
                capture_date: "2019-01-03",
                width: 512,
                height: 512,
            },
        ]),
    );
    write(&d.join("ann/s1.txt"), &cowc_text(&ten_boxes()));
    write(&d.join("ann/s2.txt"), &cowc_text(&ten_boxes()));
    write(&d.join("pred.jsonl"), predictions);
    EvalArgs {
        manifest: d.join("manifest.csv"),
        locations: None,
        annotations: d.join("ann"),
        detections_in: d.join("pred.jsonl"),
        out_dir: d.join("out"),
        config: None,
        settings: Settings::default(),
    }
}

#[test]
fn eval_one_dropped_one_spurious_per_ten() {
    let dir = tempfile::tempdir().unwrap();
    let mut kept = ten_boxes();
    kept.pop();
    kept.push((400.0, 450.0));
    let preds = interchange("s1", &kept) + &interchange("s2", &kept);
    let out = cmd_eval(&eval_fixture(dir.path(), &preds), &RunConfig::default()).unwrap();
    assert_eq!(out.rows.len(), 2);
    for r in out.rows.iter().chain([&out.aggregate]) {
        assert!((r.prf.precision - 0.9).abs() < 1e-12);
        assert!((r.prf.recall - 0.9).abs() < 1e-12);
    }
    assert_eq!((out.aggregate.tp, out.aggregate.fp, out.aggregate.fn_), (18, 2, 2));
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].scene_id, "noann");
    let lines = data_lines(&out.report_path);
    assert_eq!(lines.len(), 4);
    assert!(
        lines[3].starts_with("ALL,18,2,2,0.900000,0.900000,0.900000,"),
        "{}",
        lines[3]
    );
}

#[test]
fn eval_perfect_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = interchange("s1", &ten_boxes()) + &interchange("s2", &ten_boxes());
    let out = cmd_eval(&eval_fixture(dir.path(), &preds), &RunConfig::default()).unwrap();
    assert!(out.rows.iter().all(|r| r.prf.f1 == 1.0));

    let dir = tempfile::tempdir().unwrap();
    let out = cmd_eval(&eval_fixture(dir.path(), ""), &RunConfig::default()).unwrap();
    assert!(out.rows.iter().all(|r| r.prf.recall == 0.0 && r.fn_ == 10));
}

fn counts_csv(rows: &[(&str, &str, &str, usize)]) -> String {
    let mut s = String::from("scene_id,location_id,capture_date,aoi,count\n");
    for (scene, loc, date, n) in rows {
        s.push_str(&format!("{scene},{loc},{date},full,{n}\n"));
    }
    s
}

fn trend_args(d: &Path, counts: &str, year_a: i32, year_b: i32) -> TrendArgs {
    write(&d.join("counts.csv"), counts);
    TrendArgs {
        counts: d.join("counts.csv"),
        year_a,
        year_b,
        out_dir: d.join("out"),
    }
}

#[test]
fn trend_hundred_to_seventy() {
    let dir = tempfile::tempdir().unwrap();
    let counts = counts_csv(&[
        ("a1", "1", "2019-02-01", 90),
        ("a2", "1", "2019-08-01", 110),
        ("a3", "1", "2020-02-01", 70),
        ("b1", "2", "2019-06-01", 100),
        ("b2", "2", "2020-06-01", 60),
        ("b3", "2", "2020-07-01", 80),
    ]);
    let report = cmd_trend(&trend_args(dir.path(), &counts, 2019, 2020)).unwrap();
    assert!((report.overall_change.unwrap() + 0.30).abs() < 1e-12);
    let csv = data_lines(&dir.path().join("out/trend.csv"));
    assert_eq!(csv[0], analytics::TREND_HEADER);
    assert_eq!(csv.len(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/trend.json")).unwrap()).unwrap();
    assert!((json["overall_change"].as_f64().unwrap() + 0.3).abs() < 1e-12);
    assert_eq!(json["skipped"], serde_json::json!([]));
}

#[test]
fn trend_identical_years_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let counts = counts_csv(&[("a1", "1", "2019-02-01", 90), ("b1", "2", "2019-06-01", 100)]);
    let report = cmd_trend(&trend_args(dir.path(), &counts, 2019, 2019)).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.change_ratio == 0.0));
    assert_eq!(report.overall_change, Some(0.0));
}

#[test]
fn trend_without_overlap_fails() {
    let dir = tempfile::tempdir().unwrap();
    let counts = counts_csv(&[("a1", "1", "2019-02-01", 90), ("b1", "2", "2020-06-01", 100)]);
    assert!(cmd_trend(&trend_args(dir.path(), &counts, 2019, 2020)).is_err());
}

#[test]
fn trend_eight_table_one_locations() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    let ids: Vec<String> = (1..=8).rev().map(|i| i.to_string()).collect();
    for id in &ids {
        rows.push((format!("{id}a"), id.as_str(), "2019-04-01", 40));
        rows.push((format!("{id}b"), id.as_str(), "2020-04-01", 28));
    }
    let refs: Vec<(&str, &str, &str, usize)> = rows.iter().map(|(s, l, d, n)| (s.as_str(), *l, *d, *n)).collect();
    let report = cmd_trend(&trend_args(dir.path(), &counts_csv(&refs), 2019, 2020)).unwrap();
    let order: Vec<&str> = report.rows.iter().map(|r| r.location_id.as_str()).collect();
    assert_eq!(order, ["1", "2", "3", "4", "5", "6", "7", "8"]);
}

#[test]
fn split_writes_both_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scenes: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
    let specs: Vec<SceneSpec> = scenes
        .iter()
        .map(|s| SceneSpec {
            scene_id: s,
            location_id: "1",
            capture_date: "2019-01-01",
            width: 64,
            height: 64,
        })
        .collect();
    write(&d.join("manifest.csv"), &manifest_text(&specs));
    let args = SplitArgs {
        manifest: d.join("manifest.csv"),
        train_fraction: 0.7,
        seed: 3,
        out_dir: d.join("out"),
    };
    assert_eq!(cmd_split(&args).unwrap(), (7, 3));
    assert_eq!(data_lines(&d.join("out/train.csv")).len(), 8);
    assert_eq!(data_lines(&d.join("out/test.csv")).len(), 4);
}

#[test]
fn bridge_fixture_parses() {
    let recs = read_detections(&fixture("bridge_detections.jsonl")).unwrap();
    assert_eq!(recs.len(), 12);
    assert_eq!(recs[0].scene_id, "lot_a");
    assert_eq!(recs[0].detection.bbox().coords(), [12.5, 40.0, 44.5, 72.0]);
    assert_eq!(recs[0].detection.score(), 0.981);
    assert_eq!(recs[11].detection.bbox().coords(), [480.0, 480.0, 511.0, 511.0]);
    assert!(recs.iter().all(|r| r.detection.class_label == "car"));
}

fn binary() -> Process {
    Process::new(env!("CARGO_BIN_EXE_overcount"))
}

fn run_count(d: &Path, extra: &[&str]) -> std::process::Output {
    let mut cmd = binary();
    cmd.arg("count")
        .arg("--manifest")
        .arg(d.join("manifest.csv"))
        .arg("--out-dir")
        .arg(d.join("out"))
        .args(extra);
    cmd.output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = run_count(d, &["--detector", "oracle", "--annotations", "ann"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("manifest.csv"));

    write(&d.join("manifest.csv"), &manifest_text(&[]));
    let no_input = run_count(d, &["--detector", "file"]);
    assert!(!no_input.status.success());
    assert!(String::from_utf8_lossy(&no_input.stderr).contains("--detections-in"));

    let ok = run_count(d, &["--detector", "oracle", "--annotations", "ann"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
}

#[test]
fn binary_reads_config_and_thread_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("manifest.csv"),
        &manifest_text(&[SceneSpec {
            scene_id: "a",
            location_id: "1",
            capture_date: "2019-01-01",
            width: 400,
            height: 300,
        }]),
    );
    write(&d.join("ann/a.txt"), &cowc_text(&lattice_centers(20, 400)));
    write(&d.join("run.toml"), "tile-size = 128\ntile-stride = 96\n");
    let config: PathBuf = d.join("run.toml");
    let out = binary()
        .env("OVERCOUNT_THREADS", "2")
        .args(["count", "--detector", "oracle", "--nms-iou", "0.4"])
        .arg("--manifest")
        .arg(d.join("manifest.csv"))
        .arg("--annotations")
        .arg(d.join("ann"))
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(d.join("out"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(d.join("out/counts.csv")).unwrap();
    assert!(
        text.contains("# tile_size=128\n# tile_stride=96\n# nms_iou=0.4\n"),
        "{text}"
    );
    assert!(text.contains("a,1,2019-01-01,full,20\n"), "{text}");
}
