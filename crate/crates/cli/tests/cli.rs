use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn zsseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = zsseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A generated dataset with its bank and planted encoder.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(count: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let count = count.to_string();
        ok(&["gen-data", "--out", s(&f.data()), "--count", &count, "--seed", "11"]);
        ok(&["build-classifier", "--manifest", s(&f.manifest()), "--out", s(&f.path("bank"))]);
        ok(&[
            "plant-encoder",
            "--manifest",
            s(&f.manifest()),
            "--bank",
            s(&f.bank()),
            "--out",
            s(&f.path("enc")),
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
    fn data(&self) -> PathBuf {
        self.path("data")
    }
    fn manifest(&self) -> PathBuf {
        self.path("data/manifest.txt")
    }
    fn bank(&self) -> PathBuf {
        self.path("bank/bank.bin")
    }
    fn encoder(&self) -> PathBuf {
        self.path("enc/encoder.bin")
    }

    fn infer(&self, out: &str) -> PathBuf {
        let o = self.path(out);
        ok(&[
            "infer",
            "--manifest",
            s(&self.manifest()),
            "--encoder",
            s(&self.encoder()),
            "--bank",
            s(&self.bank()),
            "--out",
            s(&o),
        ]);
        o
    }

    fn eval(&self, pred: &Path, out: &str) -> PathBuf {
        let o = self.path(out);
        ok(&["eval", "--manifest", s(&self.manifest()), "--pred", s(pred), "--out", s(&o)]);
        o
    }
}

fn metrics(path: &Path) -> BTreeMap<String, Option<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,value"));
    lines
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), (v != "NA").then(|| v.parse().unwrap()))
        })
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.snapshot" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn planted_chain_segments_the_benchmark() {
    let f = Fixture::new(12);
    let inf = f.infer("inf");
    let labels = std::fs::read_dir(inf.join("labelmaps")).unwrap().count();
    let conf = std::fs::read_dir(inf.join("confidence")).unwrap().count();
    assert_eq!((labels, conf), (12, 12));
    let head = std::fs::read(inf.join("labelmaps/0000.pgm")).unwrap();
    assert!(head.starts_with(b"P5"));
    let head = std::fs::read(inf.join("confidence/0000.ppm")).unwrap();
    assert!(head.starts_with(b"P6"));

    let m = metrics(&f.eval(&inf.join("labelmaps"), "ev").join("metrics.csv"));
    assert!(m["miou"].unwrap() >= 70.0, "{m:?}");
    assert!(m["miou_u"].is_some());

    // each image on its own
    let manifest = f.manifest();
    for i in 0..12 {
        let one = f.path(&format!("single{i}"));
        std::fs::create_dir_all(one.join("pred")).unwrap();
        let name = format!("{i:04}.pgm");
        std::fs::copy(inf.join("labelmaps").join(&name), one.join("pred").join(&name)).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        let (head, _) = text.split_once("[entries]").unwrap();
        let data = f.data();
        let entry = format!("{}/images/{i:04}.ppm,{}/labels/{name}\n", data.display(), data.display());
        let mpath = one.join("manifest.txt");
        std::fs::write(&mpath, format!("{head}[entries]\n{entry}")).unwrap();
        ok(&["eval", "--manifest", s(&mpath), "--pred", s(&one.join("pred")), "--out", s(&one.join("ev"))]);
        let mi = metrics(&one.join("ev/metrics.csv"))["miou"].unwrap();
        assert!(mi >= 70.0, "image {i}: {mi}");
    }
}

#[test]
fn infer_is_byte_deterministic() {
    let f = Fixture::new(4);
    let a = f.infer("a");
    let b = f.infer("b");
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 8);
    assert_eq!(da, db);
}

#[test]
fn perfect_predictions_score_one_hundred() {
    let f = Fixture::new(12);
    let m = metrics(&f.eval(&f.data().join("labels"), "ev").join("metrics.csv"));
    for key in ["miou", "miou_s", "miou_u", "hiou", "pacc", "macc"] {
        assert_eq!(m[key], Some(100.0), "{key}");
    }
}

#[test]
fn metrics_recompute_from_confusion_matrix() {
    let f = Fixture::new(12);
    let inf = f.infer("inf");
    // perturb a prediction so the matrix has off-diagonal mass
    let p = inf.join("labelmaps/0003.pgm");
    let mut bytes = std::fs::read(&p).unwrap();
    let n = bytes.len();
    for b in &mut bytes[n - 600..] {
        *b = (*b + 1) % 6;
    }
    std::fs::write(&p, bytes).unwrap();
    let ev = f.eval(&inf.join("labelmaps"), "ev");
    let m = metrics(&ev.join("metrics.csv"));

    let text = std::fs::read_to_string(ev.join("cm.csv")).unwrap();
    let rows: Vec<Vec<u64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let k = rows.len();
    let col = |c: usize| rows.iter().map(|r| r[c]).sum::<u64>();
    let row = |c: usize| rows[c].iter().sum::<u64>();
    let iou = |c: usize| {
        let union = row(c) + col(c) - rows[c][c];
        (union > 0).then(|| rows[c][c] as f64 / union as f64)
    };
    let miou_of = |cs: &[usize]| {
        let v: Vec<f64> = cs.iter().filter_map(|&c| iou(c)).collect();
        (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
    };
    let close = |key: &str, want: Option<f64>| {
        let got = m[key];
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() <= 0.05 + 1e-9, "{key}: {g} vs {w}"),
            (None, None) => {}
            _ => panic!("{key}: {got:?} vs {want:?}"),
        }
    };
    let seen = [0, 1, 2, 3];
    let unseen = [4, 5];
    let all: Vec<usize> = (0..k).collect();
    let (ms, mu) = (miou_of(&seen), miou_of(&unseen));
    close("miou_s", ms);
    close("miou_u", mu);
    close("miou", miou_of(&all));
    close("hiou", Some(2.0 * ms.unwrap() * mu.unwrap() / (ms.unwrap() + mu.unwrap())));
    let tp: u64 = (0..k).map(|c| rows[c][c]).sum();
    let total: u64 = (0..k).map(row).sum();
    close("pacc", Some(100.0 * tp as f64 / total as f64));
    let accs: Vec<f64> = (0..k).filter(|&c| row(c) > 0).map(|c| rows[c][c] as f64 / row(c) as f64).collect();
    close("macc", Some(100.0 * accs.iter().sum::<f64>() / accs.len() as f64));
    for c in 0..k {
        close(&format!("iou_{c}"), iou(c).map(|v| 100.0 * v));
    }
}

#[test]
fn corrupt_table_shape_and_clean_row() {
    let f = Fixture::new(4);
    let out = f.path("sweep");
    ok(&[
        "corrupt",
        "--manifest",
        s(&f.manifest()),
        "--encoder",
        s(&f.encoder()),
        "--bank",
        s(&f.bank()),
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 1 + 8);
    assert_eq!(lines[0], "kind,level1,level2,level3,level4,level5");
    assert!(lines.iter().all(|l| l.split(',').count() == 6));

    let clean = metrics(&f.eval(&f.infer("inf").join("labelmaps"), "ev").join("metrics.csv"))["miou"].unwrap();
    let none: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(none[0], "None");
    for v in &none[1..] {
        assert!((v.parse::<f64>().unwrap() - clean).abs() < 1e-9);
    }
}

#[test]
fn report_merges_metric_files() {
    let f = Fixture::new(12);
    let first = f.eval(&f.data().join("labels"), "perfect");
    let second = f.eval(&f.infer("inf").join("labelmaps"), "planted");
    let out = f.path("report");
    ok(&[
        "report",
        s(&first.join("metrics.csv")),
        s(&second.join("metrics.csv")),
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "metric,perfect,planted");
    let miou = lines.iter().find(|l| l.starts_with("miou,")).unwrap();
    assert!(miou.starts_with("miou,100.0,"));
    assert_eq!(lines.len(), 1 + metrics(&first.join("metrics.csv")).len());
}

#[test]
fn exit_codes() {
    let f = Fixture::new(3);
    assert_eq!(code(&zsseg(&["infer", "--bogus"])), 2);
    assert_eq!(code(&zsseg(&["no-such-command"])), 2);

    let empty = f.path("empty.txt");
    let text = std::fs::read_to_string(f.manifest()).unwrap();
    let (head, _) = text.split_once("[entries]").unwrap();
    std::fs::write(&empty, format!("{head}[entries]\n")).unwrap();
    let out = zsseg(&[
        "infer",
        "--manifest",
        s(&empty),
        "--encoder",
        s(&f.encoder()),
        "--bank",
        s(&f.bank()),
        "--out",
        s(&f.path("never")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no images"));

    let pred = f.path("partial");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::copy(f.data().join("labels/0000.pgm"), pred.join("0000.pgm")).unwrap();
    let out = zsseg(&["eval", "--manifest", s(&f.manifest()), "--pred", s(&pred), "--out", s(&f.path("ev"))]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("0001.pgm") && err.contains("0002.pgm"), "{err}");
    assert!(!f.path("ev").exists());

    let bad_file = f.path("bad-encoder.bin");
    std::fs::write(&bad_file, b"not a container").unwrap();
    let out = zsseg(&[
        "infer",
        "--manifest",
        s(&f.manifest()),
        "--encoder",
        s(&bad_file),
        "--bank",
        s(&f.bank()),
        "--out",
        s(&f.path("bad")),
    ]);
    assert_eq!(code(&out), 1);
}

fn train(f: &Fixture, config: &str, extra: &[&str], out: &str) -> Output {
    let cfg = f.path(&format!("{out}.cfg"));
    std::fs::write(&cfg, config).unwrap();
    let (manifest, encoder, bank, o) = (f.manifest(), f.encoder(), f.bank(), f.path(out));
    let mut args = vec![
        "train",
        "--manifest",
        s(&manifest),
        "--encoder",
        s(&encoder),
        "--bank",
        s(&bank),
        "--config",
        s(&cfg),
        "--out",
        s(&o),
    ];
    args.extend_from_slice(extra);
    zsseg(&args)
}

#[test]
fn train_smoke_and_config_errors() {
    let f = Fixture::new(12);
    let out = train(&f, "guided_iters=1\nself_iters=0\n", &[], "smoke");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(f.path("smoke/snapshot.bin").is_file());
    let log = std::fs::read_to_string(f.path("smoke/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let snap = std::fs::read_to_string(f.path("smoke/config.snapshot")).unwrap();
    for key in ["guided_iters=1", "self_iters=0", "lr=", "seed=", "setting="] {
        assert!(snap.contains(key), "{key} missing from {snap}");
    }

    let out = train(&f, "setting=transductive\niters=10\n", &[], "no-split");
    assert_eq!(code(&out), 2);
    assert!(!f.path("no-split").exists());

    let out = train(&f, "setting=transductive\niters=10\n", &["--seen", "0,1,2", "--unseen", "2,3,4,5"], "overlap");
    assert_eq!(code(&out), 2);
    assert!(!f.path("overlap").exists());

    let ran = train(&f, "setting=transductive\niters=10\n", &["--seen", "0,1,2,3"], "trans");
    assert!(ran.status.success(), "{}", String::from_utf8_lossy(&ran.stderr));
}

#[test]
fn default_training_never_ends_below_its_first_probe() {
    let f = Fixture::new(48);
    let out = train(&f, "", &[], "run");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(f.path("run/log.csv")).unwrap();
    let probes: Vec<f64> = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(3).filter(|v| !v.is_empty()).map(|v| v.parse().unwrap()))
        .collect();
    assert!(probes.len() >= 2);
    assert!(probes.last().unwrap() >= probes.first().unwrap(), "{probes:?}");
}
