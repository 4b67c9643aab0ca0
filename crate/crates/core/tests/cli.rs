use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use can_reid::data::{export_dataset, import_dataset, read_manifest};
use can_reid::image::read_pnm;
use can_reid::trainer::Checkpoint;

const TINY: &str = "\
dataset.num_identities = 10
dataset.val_identities = 2
dataset.test_identities = 3
dataset.image_height = 16
dataset.image_width = 16
backbone.channels = 4,4
backbone.head_hidden = 6
model.q = 6
model.glimpses = 3
model.steps = 1,3
model.fc_hidden = 6
pretrain.iters = 4
pretrain.batch_size = 6
pretrain.augment = false
train.augment = false
train.iters = 6
train.batch_size = 6
train.identities_per_batch = 3
train.eval_every = 2
train.eta0 = 0.01
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_canreid"));
    c.env_clear();
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn canreid")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "canreid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn gen(&self, name: &str) -> String {
        ok(&["gen", "--config", &self.s("tiny.txt"), "--out", &self.s(name)]);
        self.s(name)
    }

    fn train(&self, name: &str, data: &str, extra: &[&str]) -> String {
        let cfg = self.s("tiny.txt");
        let out = self.s(name);
        let mut args = vec!["train", "--config", &cfg, "--dataset", data, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn gen_default_manifest_matches_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    ok(&["gen", "--out", out.to_str().unwrap()]);
    let rows = read_manifest(&out).unwrap();
    let images = std::fs::read_dir(out.join("images")).unwrap().count();
    assert_eq!(rows.len(), images);
    let train_ids: std::collections::BTreeSet<usize> =
        rows.iter().filter(|r| r.split == "train").map(|r| r.identity).collect();
    assert_eq!(train_ids.len(), 20);
}

#[test]
fn gen_is_deterministic_and_round_trips() {
    let f = Fixture::new();
    let a = f.gen("a");
    let b = f.gen("b");
    assert_eq!(read(Path::new(&a).join("manifest.csv")), read(Path::new(&b).join("manifest.csv")));

    let loaded = import_dataset(Path::new(&a)).unwrap();
    export_dataset(&loaded, &f.path("c")).unwrap();
    let reloaded = import_dataset(&f.path("c")).unwrap();
    assert_eq!(loaded, reloaded);
    assert_eq!(read(Path::new(&a).join("manifest.csv")), read(f.path("c").join("manifest.csv")));
}

#[test]
fn train_writes_a_self_describing_run() {
    let f = Fixture::new();
    let data = f.gen("ds");
    let run = f.train("run", &data, &["--freeze-backbone", "--ablation", "avg_pool"]);
    let run = Path::new(&run);
    for file in [
        "config.txt",
        "run.txt",
        "pretrain_log.csv",
        "train_log.csv",
        "checkpoint.json",
        "report.csv",
        "curve.csv",
        "embeddings.csv",
        "gallery_draws.csv",
    ] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    assert!(read(run.join("run.txt")).contains("regime = non-end-to-end"));
    let config = read(run.join("config.txt"));
    assert!(config.contains("model.ablation = avg_pool"));
    assert!(config.contains("train.freeze_backbone = true"));
    let ckpt = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.regime, "non-end-to-end");
    assert_eq!(ckpt.config_echo, config);
    assert_eq!(read(run.join("train_log.csv")).lines().count(), 1 + 6);
}

#[test]
fn interrupted_run_resumes_with_identical_trace() {
    let f = Fixture::new();
    let data = f.gen("ds");
    let full = f.train("full", &data, &["--skip-pretrain"]);
    let part = f.train("part", &data, &["--skip-pretrain", "--stop-after", "3"]);
    assert_eq!(read(Path::new(&part).join("train_log.csv")).lines().count(), 1 + 3);
    let ckpt = Path::new(&part).join("checkpoint.json").display().to_string();
    let resumed = f.train("resumed", &data, &["--resume", &ckpt]);
    assert_eq!(
        read(Path::new(&full).join("train_log.csv")),
        read(Path::new(&resumed).join("train_log.csv"))
    );
    assert_eq!(
        read(Path::new(&full).join("report.csv")),
        read(Path::new(&resumed).join("report.csv"))
    );
}

fn parse_embeddings(text: &str) -> BTreeMap<String, Vec<(usize, Vec<f64>)>> {
    let mut out: BTreeMap<String, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let values = cols[4].split(' ').map(|v| v.parse().unwrap()).collect();
        out.entry(cols[0].to_string())
            .or_default()
            .push((cols[2].parse().unwrap(), values));
    }
    out
}

fn report_field(text: &str, field: &str) -> f64 {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == field).unwrap();
    row[i].parse().unwrap()
}

/// Rank-1 recomputed from exported embeddings and draws by sorting every
/// drawn gallery entry per query.
fn oracle_rank1(embeddings: &str, draws: &str) -> f64 {
    let e = parse_embeddings(embeddings);
    let (queries, gallery) = (&e["query"], &e["gallery"]);
    let mut by_repeat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for line in draws.lines().skip(1) {
        let (r, j) = line.split_once(',').unwrap();
        by_repeat.entry(r.parse().unwrap()).or_default().push(j.parse().unwrap());
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for chosen in by_repeat.values() {
        let mut hits = 0;
        for (id, q) in queries {
            let mut order: Vec<(f64, usize)> = chosen.iter().map(|&j| (dist(q, &gallery[j].1), j)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if gallery[order[0].1].0 == *id {
                hits += 1;
            }
        }
        total += hits as f64 / queries.len() as f64;
    }
    total / by_repeat.len() as f64
}

#[test]
fn eval_is_repeatable_and_matches_the_oracle() {
    let f = Fixture::new();
    let data = f.gen("ds");
    let run = f.train("run", &data, &["--skip-pretrain"]);
    let ckpt = Path::new(&run).join("checkpoint.json").display().to_string();
    ok(&["eval", "--checkpoint", &ckpt, "--dataset", &data, "--out", &f.s("e1")]);
    ok(&["eval", "--checkpoint", &ckpt, "--dataset", &data, "--out", &f.s("e2")]);
    let r1 = read(f.path("e1").join("report.csv"));
    assert_eq!(r1, read(f.path("e2").join("report.csv")));
    assert_eq!(r1, read(Path::new(&run).join("report.csv")));
    let oracle = oracle_rank1(
        &read(f.path("e1").join("embeddings.csv")),
        &read(f.path("e1").join("gallery_draws.csv")),
    );
    assert!((oracle - report_field(&r1, "rank1")).abs() < 1e-12);

    ok(&["eval", "--checkpoint", &ckpt, "--dataset", &data, "--out", &f.s("s"), "--sanity"]);
    assert_eq!(report_field(&read(f.path("s").join("report.csv")), "rank1"), 1.0);
}

#[test]
fn eval_rejects_mismatched_image_size() {
    let f = Fixture::new();
    let data = f.gen("ds");
    let run = f.train("run", &data, &["--skip-pretrain"]);
    let other = f.s("big");
    ok(&[
        "gen",
        "--config",
        &f.s("tiny.txt"),
        "--set",
        "dataset.image_height=20",
        "--out",
        &other,
    ]);
    let ckpt = Path::new(&run).join("checkpoint.json").display().to_string();
    let out = run_eval(&ckpt, &other, &f.s("e"));
    assert_eq!(out.status.code(), Some(2));
}

fn run_eval(ckpt: &str, data: &str, out: &str) -> Output {
    run(&["eval", "--checkpoint", ckpt, "--dataset", data, "--out", out])
}

#[test]
fn attention_maps_agree_with_raw_weights() {
    let f = Fixture::new();
    let data = f.gen("ds");
    let run = f.train("run", &data, &["--skip-pretrain"]);
    let ckpt = Path::new(&run).join("checkpoint.json").display().to_string();
    let out = f.path("attn");
    ok(&[
        "attn",
        "--checkpoint",
        &ckpt,
        "--dataset",
        &data,
        "--out",
        out.to_str().unwrap(),
        "--limit",
        "2",
    ]);
    let mut maps: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for line in read(out.join("attention.csv")).lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        maps.entry((c[0].to_string(), c[1].parse().unwrap()))
            .or_default()
            .push(c[3].parse().unwrap());
    }
    assert_eq!(maps.len(), 2 * 3);
    for ((image, step), weights) in &maps {
        let k = (weights.len() as f64).sqrt() as usize;
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let raw_top = (0..weights.len()).fold(0, |b, i| if weights[i] > weights[b] { i } else { b });
        let heat = read_pnm(&out.join(format!("{image}_t{step}.pgm"))).unwrap();
        let (h, w) = (heat.shape()[0], heat.shape()[1]);
        let d = heat.data();
        let top = (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b });
        assert_eq!(((top / w) * k / h) * k + (top % w) * k / w, raw_top);
        assert_eq!(d[top], 1.0);
        assert!(out.join(format!("{image}_t{step}_overlay.ppm")).exists());
    }
}

#[test]
fn selfcheck_passes_and_names_injected_fault() {
    let out = ok(&["selfcheck"]);
    assert!(out.contains("pipeline"));
    let bad = run(&["selfcheck", "--inject-fault", "softmax"]);
    assert_eq!(bad.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("softmax"), "{stderr}");
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let f = Fixture::new();
    let bad_key = run(&["gen", "--set", "dataset.nope=1", "--out", &f.s("x")]);
    assert_eq!(bad_key.status.code(), Some(2));
    std::fs::write(f.path("file"), "").unwrap();
    let unwritable = run(&["gen", "--config", &f.s("tiny.txt"), "--out", &f.s("file/sub")]);
    assert_eq!(unwritable.status.code(), Some(3));
    let missing = run(&["eval", "--checkpoint", &f.s("none.json"), "--dataset", &f.s("x"), "--out", &f.s("o")]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn environment_overrides_config_file() {
    let f = Fixture::new();
    let out = bin()
        .args(["gen", "--config", &f.s("tiny.txt"), "--out", &f.s("ds")])
        .env("CANREID_DATASET_TEST_IDENTITIES", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(read(f.path("ds").join("config.txt")).contains("dataset.test_identities = 4"));
}
