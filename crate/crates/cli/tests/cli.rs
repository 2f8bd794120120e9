use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn damex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damex")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "
[model]
experts = 2
[data]
preset = domains
train_per_dataset = 200
eval_per_dataset = 100
[train]
steps = 40
optimizer = adam
[mapping]
dataset.0.experts = 0
dataset.1.experts = 1
";

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    p(&path).to_string()
}

/// (dataset, label) pairs of foreground rows.
fn labelled(csv: &str) -> Vec<(usize, usize)> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1] == "1").then(|| (f[0].parse().unwrap(), f[2].parse().unwrap()))
        })
        .collect()
}

#[test]
fn gen_data_divergent_has_disjoint_labels() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("div");
    let o = damex(&["gen-data", "--preset", "divergent", "--seed", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for file in ["train.csv", "eval.csv"] {
        let text = fs::read_to_string(out.join(file)).unwrap();
        assert!(text.starts_with("dataset_id,foreground,label,f0,"));
        let mut sets: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (d, l) in labelled(&text) {
            sets.entry(d).or_default().insert(l);
        }
        assert_eq!(sets.len(), 2);
        assert!(sets[&0].is_disjoint(&sets[&1]));
    }
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(code(&damex(&["gen-data", "--preset", "domains", "--seed", "4", "--out", p(dir)])), 0);
    }
    for file in ["train.csv", "eval.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
    }
}

#[test]
fn gen_data_limited_shots() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("lim");
    let o = damex(&["gen-data", "--preset", "limited", "--seed", "2", "--shots", "100", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let train = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(labelled(&train).iter().filter(|(d, _)| *d == 1).count(), 100);
}

#[test]
fn gen_data_unknown_preset_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = damex(&["gen-data", "--preset", "bogus", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn train_missing_config_names_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.conf");
    let o = damex(&["train", "--config", p(&missing), "--out", p(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.conf"));
}

#[test]
fn train_bad_config_reports_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.conf", "[model]\nexperts = 2\nhidden = lots\n");
    let o = damex(&["train", "--config", &cfg, "--out", p(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_rejected() {
    let o = damex(&["gradcheck", "--nope"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&damex(&[])), 2);
}

#[test]
fn train_writes_outputs_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.conf", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = damex(&["train", "--config", &cfg, "--out", p(dir), "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for file in ["checkpoint.txt", "metrics.csv", "config.resolved"] {
        let x = fs::read(a.join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(file)).unwrap(), "{file}");
    }
    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    let train_section = resolved.split("[train]").nth(1).unwrap();
    assert!(train_section.lines().any(|l| l.trim() == "seed = 7"), "{resolved}");
    assert!(fs::read_to_string(a.join("checkpoint.txt")).unwrap().starts_with("DAMEX-CKPT v1\n"));
}

#[test]
fn nonfinite_loss_exits_3_and_dumps_batch() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "boom.conf", &format!("{SMALL}\ntrain.optimizer = sgd\ntrain.lr = 1e300\n"));
    let out = tmp.path().join("out");
    let o = damex(&["train", "--config", &cfg, "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let dumped = fs::read_dir(&out).unwrap().filter_map(|e| e.ok()).any(|e| {
        e.file_name().to_string_lossy().starts_with("nonfinite_batch_step")
    });
    assert!(dumped);
}

fn trained(tmp: &Path) -> (String, String) {
    let cfg = write_config(tmp, "run.conf", SMALL);
    let out = tmp.join("out");
    let o = damex(&["train", "--config", &cfg, "--out", p(&out), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = tmp.join("data");
    let o = damex(&["gen-data", "--preset", "domains", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&o), 0);
    (p(&out.join("checkpoint.txt")).to_string(), p(&data.join("eval.csv")).to_string())
}

#[test]
fn analyze_writes_csv_and_svg() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data) = trained(tmp.path());
    let svg = tmp.path().join("heat.svg");
    let o = damex(&["analyze", "--checkpoint", &ckpt, "--data", &data, "--heatmap-out", p(&svg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.matches("purity_mean=").count(), 2);
    assert_eq!(text.matches("collapse=").count(), 2);

    let doc_text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&doc_text).expect("well-formed svg");
    let layers: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("layer")).collect();
    assert_eq!(layers.len(), 2);
    for layer in layers {
        let rects = layer.descendants().filter(|n| n.has_tag_name("rect")).count();
        assert_eq!(rects, 2 * 2);
    }

    let csv = fs::read_to_string(tmp.path().join("heat.csv")).unwrap();
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry((f[0].parse().unwrap(), f[1].parse().unwrap())).or_default() += f[3].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 4);
    assert!(sums.values().all(|s| (s - 1.0).abs() <= 1e-9), "{sums:?}");
}

#[test]
fn eval_prints_without_writing() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data) = trained(tmp.path());
    let before = fs::read_dir(tmp.path()).unwrap().count();
    let o = damex(&["eval", "--checkpoint", &ckpt, "--data", &data]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("accuracy d0="));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), before);
}

#[test]
fn analyze_rejects_unmapped_datasets() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, data) = trained(tmp.path());
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    let mut shifted = format!("{}\n", lines.next().unwrap());
    for l in lines {
        let (d, rest) = l.split_once(',').unwrap();
        shifted.push_str(&format!("{},{rest}\n", if d == "1" { "5" } else { d }));
    }
    let bad = tmp.path().join("unmapped.csv");
    fs::write(&bad, shifted).unwrap();
    let o = damex(&["analyze", "--checkpoint", &ckpt, "--data", p(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains('5'), "{}", stderr(&o));
}

#[test]
fn untrained_purity_averages_to_chance() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&damex(&["gen-data", "--preset", "domains", "--seed", "0", "--out", p(&data)])), 0);
    let eval = data.join("eval.csv");
    let cfg = write_config(tmp.path(), "zero.conf", &format!("{SMALL}\ntrain.steps = 0\nmodel.router_init = 1.0\n"));
    let mut per_dataset = [0.0f64; 2];
    let seeds = 40;
    for seed in 0..seeds {
        let out = tmp.path().join(format!("s{seed}"));
        let seed = seed.to_string();
        assert_eq!(code(&damex(&["train", "--config", &cfg, "--out", p(&out), "--seed", &seed])), 0);
        let o = damex(&["analyze", "--checkpoint", p(&out.join("checkpoint.txt")), "--data", p(&eval)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = stdout(&o);
        let layer = text.lines().find(|l| l.starts_with("layer 1:")).unwrap();
        for (d, acc) in per_dataset.iter_mut().enumerate() {
            let key = format!("purity[d{d}]=");
            let v: f64 = layer.split(&key).nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
            *acc += v / seeds as f64;
        }
    }
    for (d, mean) in per_dataset.iter().enumerate() {
        assert!((mean - 0.5).abs() < 0.2, "dataset {d}: mean untrained purity {mean}");
    }
}

#[test]
fn gradcheck_passes_and_reports_eps() {
    let o = damex(&["gradcheck", "--eps", "1e-5"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().next().unwrap().contains("eps=1e-5"), "{text}");
    for name in ["importance", "load", "load_balancing", "damex", "task", "model"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}");
    }
}

#[test]
fn gradcheck_corrupted_gradient_fails_naming_the_loss() {
    let o = damex(&["gradcheck", "--instances", "3", "--corrupt", "load"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("failed for: load"), "{}", stderr(&o));
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let o = damex(&["gradcheck", "--eps", "0.5", "--instances", "1"]);
    assert_eq!(code(&o), 2);
}
