use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ggem::data::{synthetic_blobs, write_idx_dataset, BlobSpec};

const HAND: &str = "map,label,token,c0,c1,c2,c3\n\
    0,1,0,1,1,1,1\n0,1,1,3,3,3,3\n0,1,2,1,1,1,1\n0,1,3,3,3,3,3\n";

const SMALL: &str = "epochs = 2\nsynthetic_samples = 24\n";

fn ggem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ggem"))
        .args(args)
        .current_dir(dir)
        .env("GGEM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn descriptor_values(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn pool_hand_example_two_groups() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "hand.csv", HAND);
    let o = ggem(dir.path(), &["pool", "--input", "hand.csv", "--strategy", "ggem", "--groups", "2", "--p", "1,2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = descriptor_values(&stdout(&o));
    let expected = [2.0, 2.0, 5f64.sqrt(), 5f64.sqrt()];
    assert_eq!(rows.len(), 1);
    for (v, e) in rows[0].iter().zip(expected) {
        assert!((v - e).abs() <= 1e-6, "{v} vs {e}");
    }
}

#[test]
fn average_matches_single_group_unit_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{HAND}1,0,0,0.5,2,7,1\n1,0,1,4,2,1,1\n1,0,2,0.25,9,3,1\n1,0,3,1,2,3,1\n");
    write(dir.path(), "maps.csv", &text);
    let avg = ggem(dir.path(), &["pool", "--input", "maps.csv", "--strategy", "average", "--out", "avg.csv"]);
    let g1 = ggem(dir.path(), &["pool", "--input", "maps.csv", "--strategy", "ggem", "--groups", "1", "--p", "1", "--out", "g1.csv"]);
    assert_eq!(avg.status.code(), Some(0), "{}", stderr(&avg));
    assert_eq!(g1.status.code(), Some(0), "{}", stderr(&g1));
    assert!(avg.stdout.is_empty(), "data goes to the file when --out is set");
    let a = std::fs::read_to_string(dir.path().join("avg.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("g1.csv")).unwrap();
    let (a, b) = (descriptor_values(&a), descriptor_values(&b));
    assert_eq!(a.len(), 2);
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn pool_rejects_indivisible_groups() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "hand.csv", HAND);
    let o = ggem(dir.path(), &["pool", "--input", "hand.csv", "--groups", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("D mod G == 0"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.csv", &HAND.replace("0,1,2,1,1,1,1", "0,1,2,1,oops,1,1"));
    let o = ggem(dir.path(), &["pool", "--input", "bad.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.csv:4"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ggem(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(ggem(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ggem(dir.path(), &["pool", "--input", "missing.csv"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_ggem"))
        .args(["pool", "--input", "x"])
        .env("GGEM_THREADS", "many")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = ggem(dir.path(), &["gradcheck", "--out", "gc.json"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gc.json")).unwrap()).unwrap();
    assert_eq!(json["passed"], true);
    let entries = json["entries"].as_array().unwrap();
    assert!(entries.iter().all(|e| e["max_relative_error"].as_f64().unwrap() <= 1e-4));
    assert!(entries.iter().any(|e| e["name"] == "pool.exponents"));

    let bad = ggem(dir.path(), &["gradcheck", "--corrupt-backward"]);
    assert_eq!(bad.status.code(), Some(1));
    let json: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(json["passed"], false);
}

#[test]
fn gradcheck_with_fixed_exponents_omits_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "embed_dim = 16\nheads = 2\nblocks = 2\nimage_size = 8\npatch_size = 2\nmlp_ratio = 2\np_trainable = false\n";
    write(dir.path(), "fixed.cfg", cfg);
    let o = ggem(dir.path(), &["gradcheck", "--config", "fixed.cfg"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = json["entries"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.ends_with(".p") && *n != "pool.exponents"), "{names:?}");
}

#[test]
fn train_is_deterministic_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "small.cfg", SMALL);
    for out in ["a.ggem", "b.ggem"] {
        let o = ggem(dir.path(), &["train", "--config", "small.cfg", "--seed", "3", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.trace.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.trace.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(dir.path().join("a.ggem")).unwrap(),
        std::fs::read(dir.path().join("b.ggem")).unwrap()
    );
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,loss,acc,p_1,p_2,p_3,p_4"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn train_rejects_dataset_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = synthetic_blobs(&BlobSpec {
        samples: 8,
        image_size: 8,
        ..BlobSpec::default()
    })
    .unwrap();
    write_idx_dataset(&blobs, &dir.path().join("img.idx"), &dir.path().join("lbl.idx")).unwrap();
    write(dir.path(), "small.cfg", SMALL);
    let o = ggem(dir.path(), &["train", "--config", "small.cfg", "--dataset", "img.idx", "--labels", "lbl.idx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("image_size"), "{}", stderr(&o));

    write(dir.path(), "two.cfg", "epochs = 1\nimage_size = 8\npatch_size = 2\nclasses = 2\n");
    let o = ggem(dir.path(), &["train", "--config", "two.cfg", "--dataset", "img.idx", "--labels", "lbl.idx"]);
    assert_eq!(o.status.code(), Some(2), "labels reach 2 with only 2 classes");

    let o = ggem(dir.path(), &["train", "--config", "small.cfg", "--dataset", "img.idx"]);
    assert_eq!(o.status.code(), Some(2), "IDX images need labels");
    assert!(!dir.path().join("model.ggem").exists());
}

#[test]
fn train_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let blobs = synthetic_blobs(&BlobSpec {
        samples: 12,
        ..BlobSpec::default()
    })
    .unwrap();
    write_idx_dataset(&blobs, &dir.path().join("img.idx"), &dir.path().join("lbl.idx")).unwrap();
    write(dir.path(), "small.cfg", "epochs = 1\n");
    let o = ggem(dir.path(), &["train", "--config", "small.cfg", "--dataset", "img.idx", "--labels", "lbl.idx", "--out", "m.ggem", "--trace", "t.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("m.ggem").exists());
    assert!(dir.path().join("t.csv").exists());
}

#[test]
fn analyze_selects_blocks() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "small.cfg", SMALL);
    let o = ggem(dir.path(), &["train", "--config", "small.cfg", "--out", "m.ggem"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = ggem(dir.path(), &["analyze", "--checkpoint", "m.ggem", "--config", "small.cfg", "--images", "6", "--out", "last"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("last/analysis.json")).unwrap()).unwrap();
    let blocks = json["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 1);
    assert_eq!(blocks[0]["similarity"]["block"], 1);
    assert_eq!(json["images"], 6);
    let sim = std::fs::read_to_string(dir.path().join("last/head_similarity.csv")).unwrap();
    assert_eq!(sim.lines().count(), 1 + 4);
    for line in sim.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0 + 1e-9).contains(&v), "{line}");
    }
    let dist = std::fs::read_to_string(dir.path().join("last/head_distance.csv")).unwrap();
    let bound = 4.0 * 3.0 * 2f64.sqrt();
    for line in dist.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=bound).contains(&v), "{line}");
    }

    let o = ggem(dir.path(), &["analyze", "--checkpoint", "m.ggem", "--blocks", "all", "--images", "3", "--out", "all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sim = std::fs::read_to_string(dir.path().join("all/head_similarity.csv")).unwrap();
    assert_eq!(sim.lines().count(), 1 + 2 * 4);

    let o = ggem(dir.path(), &["analyze", "--checkpoint", "m.ggem", "--blocks", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("out of range"));
}

#[test]
fn retrieve_self_excludes_and_reports_monotone_recall() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("id,label,d0,d1,d2\n");
    for i in 0..30u64 {
        let label = i % 3;
        let t = i as f64 * 0.37;
        csv.push_str(&format!("{i},{label},{},{},{}\n", label as f64 + t.sin() * 0.8, t.cos(), (t * 1.7).sin()));
    }
    write(dir.path(), "desc.csv", &csv);
    let o = ggem(dir.path(), &["retrieve", "--queries", "desc.csv", "--ks", "1,2,4,8", "--out", "r.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    let recall: Vec<f64> = ["1", "2", "4", "8"].iter().map(|k| json["recall_at_k"][*k].as_f64().unwrap()).collect();
    assert!(recall.windows(2).all(|w| w[0] <= w[1]), "{recall:?}");
    assert!(json["map_score"].as_f64().unwrap().is_finite());
    assert_eq!(json["evaluated"], 30);

    write(dir.path(), "narrow.csv", "id,label,d0\n1,0,1\n2,0,2\n");
    let o = ggem(dir.path(), &["retrieve", "--queries", "desc.csv", "--gallery", "narrow.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ggem(dir.path(), &["retrieve", "--queries", "desc.csv", "--metric", "manhattan"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pool_then_retrieve_from_container() {
    use ggem::io::write_container;
    use ggem::tensor::Tensor;

    let dir = tempfile::tempdir().unwrap();
    let mut tensors = Vec::new();
    for m in 0..6 {
        let class = m % 2;
        let data: Vec<f64> = (0..16 * 4).map(|i| 1.0 + ((i * (m + 3)) % 7) as f64 + 5.0 * ((i % 4 == class) as u8 as f64)).collect();
        tensors.push((format!("map{m}"), Tensor::new(vec![4, 4, 4], data).unwrap()));
    }
    tensors.push(("labels".into(), Tensor::vector(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap()));
    write_container(&dir.path().join("maps.ggem"), &tensors).unwrap();

    let o = ggem(dir.path(), &["pool", "--input", "maps.ggem", "--groups", "2", "--p", "3,4", "--out", "desc.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = ggem(dir.path(), &["retrieve", "--queries", "desc.csv", "--ks", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["evaluated"], 6);
    assert_eq!(json["per_query"].as_array().unwrap().len(), 6);
}
