use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"{
  "bev": {"name": "bev", "kind": "cartesian",
          "grid": {"axes": [{"lo": 0, "hi": 70.4, "bins": 88},
                            {"lo": -40, "hi": 40, "bins": 100},
                            {"lo": -3, "hi": 1, "bins": 8}]}},
  "pvs": [{"name": "ego", "kind": "spherical",
           "grid": {"axes": [{"lo": 0, "hi": 80, "bins": 80},
                             {"lo": -3.141592653589793, "hi": 3.141592653589793, "bins": 180},
                             {"lo": 0, "hi": 3.141592653589793, "bins": 60}],
                    "periodic_theta": true}}],
  "frustum": {"half_angle_h": 0.7068583470577035, "half_angle_v": 0.2617993877991494}
}"#;

const SCENE: &str = r#"{
  "azimuth_start": -0.8, "azimuth_span": 1.6, "azimuth_count": 400,
  "elevations": [-0.3, -0.25, -0.2, -0.15, -0.1, -0.05, 0.0, 0.05],
  "ground_z": -1.73,
  "boxes": [{"center": [20, 0, -0.93], "size": [4, 1.8, 1.6], "yaw": 0.3},
            {"center": [500, 0, -0.93], "size": [4, 1.8, 1.6], "yaw": 0.0}]
}"#;

fn xview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xview")).args(args).output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stats_prints_header_and_one_row_per_populated_bin() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", CONFIG);
    let scene = write(&dir, "scene.json", SCENE);
    let o = xview(&["stats", "--config", s(&cfg), "--scene", s(&scene)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("view,bin_lo,occupied,mean_pts,cv"));
    let rows: Vec<_> = lines.collect();
    assert!(!rows.is_empty());
    for r in &rows {
        let f: Vec<_> = r.split(',').collect();
        assert_eq!(f.len(), 5);
        assert!(f[0] == "bev" || f[0] == "ego");
        assert!(f[2].parse::<usize>().unwrap() > 0);
    }
}

#[test]
fn stats_on_empty_scan_warns_and_succeeds() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", CONFIG);
    let bin = dir.path().join("empty.bin");
    std::fs::write(&bin, b"").unwrap();
    let o = xview(&["stats", "--config", s(&cfg), "--input", s(&bin)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "view,bin_lo,occupied,mean_pts,cv");
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn config_without_perspective_views_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", &CONFIG.replace(r#""pvs": [{"name""#, r#""unused": [{"name""#));
    let scene = write(&dir, "scene.json", SCENE);
    let o = xview(&["stats", "--config", s(&cfg), "--scene", s(&scene)]);
    assert_eq!(o.status.code(), Some(1));

    let mut k0 = CONFIG.split(r#""pvs""#).next().unwrap().to_string();
    k0.push_str(r#""pvs": []}"#);
    let cfg = write(&dir, "k0.json", &k0);
    let o = xview(&["stats", "--config", s(&cfg), "--scene", s(&scene)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pvs"));
}

#[test]
fn coverage_rejects_real_scans_and_counts_boxes() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", CONFIG);
    let scene = write(&dir, "scene.json", SCENE);
    let bin = dir.path().join("scan.bin");
    let o = xview(&["synth", "--scene", s(&scene), "--out", s(&bin)]);
    assert_eq!(o.status.code(), Some(0));
    let o = xview(&["coverage", "--config", s(&cfg), "--input", s(&bin)]);
    assert_eq!(o.status.code(), Some(1));

    let o = xview(&["coverage", "--config", s(&cfg), "--scene", s(&scene), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(text.lines().next(), Some("box,view,points,voxels"));
    assert_eq!(rows.len(), 4);
    let near: Vec<_> = rows.iter().filter(|r| r[0] == "0").collect();
    assert!(near.iter().all(|r| r[2].parse::<usize>().unwrap() > 0 && r[3].parse::<usize>().unwrap() > 0));
    let far: Vec<_> = rows.iter().filter(|r| r[0] == "1").collect();
    assert!(far.iter().all(|r| r[2] == "0" && r[3] == "0"));
}

#[test]
fn fuse_writes_grid_with_config_echo_and_timings() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", CONFIG);
    let scene = write(&dir, "scene.json", SCENE);
    let out = dir.path().join("fused.bin");
    let o = xview(&["fuse", "--config", s(&cfg), "--scene", s(&scene), "--parallel", "3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("mode,filter_ms,aggregate_ms,fuse_ms,total_ms\n"));

    let blob = std::fs::read(&out).unwrap();
    assert_eq!(blob.len(), 88 * 100 * 8 * 12 * 4);
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("fused.bin.json")).unwrap()).unwrap();
    assert_eq!(sidecar["channels"], 12);
    assert_eq!(sidecar["config"]["pvs"][0]["origin"], serde_json::json!([0.0, 0.0, 0.0]));
    assert_eq!(sidecar["config"]["bev"]["grid"]["axes"][0]["bins"], 88);
    assert_eq!(sidecar["provenance"][1]["view"], "ego");

    let o = xview(&["info", "--grid", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("12 channels"));
}

#[test]
fn parallel_flag_is_validated() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "cfg.json", CONFIG);
    let scene = write(&dir, "scene.json", SCENE);
    let out = dir.path().join("fused.bin");
    let o = xview(&["fuse", "--config", s(&cfg), "--scene", s(&scene), "--parallel", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn synth_and_info_agree_on_point_count() {
    let dir = TempDir::new().unwrap();
    let scene = write(&dir, "scene.json", SCENE);
    let bin = dir.path().join("scan.bin");
    let labels = dir.path().join("labels.csv");
    let o = xview(&["synth", "--scene", s(&scene), "--seed", "7", "--out", s(&bin), "--labels", s(&labels)]);
    assert_eq!(o.status.code(), Some(0));
    let n = std::fs::metadata(&bin).unwrap().len() / 16;
    assert!(n > 0);
    let label_rows = std::fs::read_to_string(&labels).unwrap().lines().count() as u64 - 1;
    assert_eq!(label_rows, n);
    let o = xview(&["info", "--input", s(&bin)]);
    assert!(stdout(&o).starts_with(&format!("points: {n}\n")));

    std::fs::write(&bin, [0u8; 17]).unwrap();
    let o = xview(&["info", "--input", s(&bin)]);
    assert_eq!(o.status.code(), Some(1));
}
