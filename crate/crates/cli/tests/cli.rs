use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metatta_core::harness::{parse_result_name, RunSummary};
use metatta_core::model::checkpoint;
use metatta_core::tta::read_result;

const TINY: &str = r#"
[data]
train_size = 120
test_size = 60

[model]
width = 4
kernel = 3
hidden = 8
gn_groups = 2

[stream]
periods = [10]
length = 30

[meta]
epochs = 2
lr_drop_epoch = 1
iterations_per_epoch = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metatta"))
}

/// Writes a config with `seeds` and `out_dir` under `dir` prepended to `body`.
fn config(dir: &Path, name: &str, seeds: &[u64], body: &str) -> PathBuf {
    let out = dir.join(format!("{name}-out"));
    let text = format!("seeds = {seeds:?}\nout_dir = {:?}\n{body}", out.to_str().unwrap());
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn accuracy_from_records(path: &Path) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    let (mut n, mut correct) = (0usize, 0usize);
    for line in text.lines().filter(|l| !l.starts_with("{\"summary\"")) {
        let v: serde_json_value::Value = serde_json_value::from_str(line);
        n += 1;
        correct += (v.get("pred") == v.get("label")) as usize;
    }
    correct as f64 / n as f64
}

/// Minimal JSON field access for flat records, independent of the crate's reader.
mod serde_json_value {
    pub struct Value(Vec<(String, String)>);
    impl Value {
        pub fn get(&self, k: &str) -> Option<&str> {
            self.0.iter().find(|(a, _)| a == k).map(|(_, b)| b.as_str())
        }
    }
    pub fn from_str(line: &str) -> Value {
        let body = line.trim().trim_start_matches('{').trim_end_matches('}');
        Value(
            body.split(',')
                .map(|kv| {
                    let (k, v) = kv.split_once(':').unwrap();
                    (k.trim().trim_matches('"').to_string(), v.trim().to_string())
                })
                .collect(),
        )
    }
}

#[test]
fn missing_dataset_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "bin", &[0], "[data]\nsource = \"binary\"\n");
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.train_path"));
}

#[test]
fn invalid_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = config(dir.path(), "unknown", &[0], "[meta]\nalpah = 0.1\n");
    let o = run(&["train", "--config", p(&unknown)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpah"));

    let overlap = "[domains.source]\nkinds = [\"contrast\"]\n[domains.target]\nextra = [{ kind = \"contrast\", severity = 5 }]\n";
    let o = run(&["train", "--config", p(&config(dir.path(), "overlap", &[0], overlap))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("target"));

    let o = run(&["train", "--config", p(&dir.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
}

#[test]
fn smoke_train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "smoke", &[3], TINY);
    let stdout = ok(&["train", "--config", p(&cfg)]);
    assert!(stdout.contains("sha256"));
    let out = dir.path().join("smoke-out");
    let (spec, params) = checkpoint::load::<f32>(&out.join("seed-3/model-meta.toml")).unwrap();
    let net = metatta_core::model::ConvNet::new(spec).unwrap();
    let x = metatta_core::Tensor::<f32>::zeros(vec![2, 3, 16, 16]);
    let logits = net.logits(&params, &x).unwrap();
    assert_eq!(logits.len(), 2);
    assert!(logits.iter().flatten().all(|v| v.is_finite()));
    assert_eq!(fs::read_to_string(out.join("seed-3/model-meta.log.jsonl")).unwrap().lines().count(), 4);
    assert!(out.join("resolved.toml").exists());
}

#[test]
fn training_is_deterministic_and_resolved_config_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&["train", "--config", p(&config(dir.path(), "a", &[1], TINY))]);
    let b = ok(&["train", "--config", p(&config(dir.path(), "b", &[1], TINY))]);
    let digest = |s: &str| s.split("sha256 ").nth(1).unwrap().trim().to_string();
    assert_eq!(digest(&a), digest(&b));
    let resolved = dir.path().join("a-out/resolved.toml");
    let c = ok(&["train", "--config", p(&resolved), "--out", p(&dir.path().join("c-out"))]);
    assert_eq!(digest(&a), digest(&c));
    assert_eq!(
        fs::read(dir.path().join("a-out/seed-1/model-meta.bin")).unwrap(),
        fs::read(dir.path().join("c-out/seed-1/model-meta.bin")).unwrap()
    );
}

#[test]
fn sub_seeds_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let base = ok(&["train", "--config", p(&config(dir.path(), "base", &[0], TINY))]);
    let other_stream = format!("{TINY}\n[seeding]\nstream = 99\n");
    let s = ok(&["train", "--config", p(&config(dir.path(), "stream", &[0], &other_stream))]);
    assert_eq!(base, s.replace("stream-out", "base-out"));
    let other_init = format!("{TINY}\n[seeding]\ninit = 99\n");
    let i = ok(&["train", "--config", p(&config(dir.path(), "init", &[0], &other_init))]);
    assert_ne!(base, i.replace("init-out", "base-out"));

    let adapt = "[adapt]\nmode = \"no_adapt\"\n";
    for name in ["base", "init"] {
        let cfg = dir.path().join(format!("{name}.toml"));
        let text = fs::read_to_string(&cfg).unwrap();
        fs::write(&cfg, format!("{text}\n{adapt}")).unwrap();
        ok(&["adapt", "--config", p(&cfg)]);
    }
    let stream = |name: &str| fs::read(dir.path().join(format!("{name}-out/streams/seed-0-tp10.bin"))).unwrap();
    assert_eq!(stream("base"), stream("init"));
}

#[test]
fn adapt_writes_per_seed_files_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{TINY}\n[adapt]\nmode = \"no_adapt\"\n");
    let cfg = config(dir.path(), "five", &[0, 1, 2, 3, 4], &body);
    ok(&["train", "--config", p(&cfg)]);
    ok(&["adapt", "--config", p(&cfg)]);
    let out = dir.path().join("five-out");
    let mut accs = Vec::new();
    for s in 0..5 {
        let f = out.join(format!("results/meta_no_adapt__tp10__seed{s}.jsonl"));
        accs.push(accuracy_from_records(&f));
    }
    let mean = accs.iter().sum::<f64>() / 5.0;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let half = 2.7764451051977987 * sd / 5f64.sqrt();
    let text = fs::read_to_string(out.join("summary-meta_no_adapt.json")).unwrap();
    let rows: Vec<RunSummary> = serde_json::from_str(&text).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].mean - mean).abs() < 1e-12);
    assert!((rows[0].half_width.unwrap() - half).abs() < 1e-9);
}

#[test]
fn one_period_spanning_the_stream_populates_one_domain() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY.replace("periods = [10]", "periods = [30]") + "\n[adapt]\nmode = \"no_adapt\"\n";
    let cfg = config(dir.path(), "span", &[0], &body);
    ok(&["train", "--config", p(&cfg)]);
    ok(&["adapt", "--config", p(&cfg)]);
    let (r, summary) = read_result(&dir.path().join("span-out/results/meta_no_adapt__tp30__seed0.jsonl")).unwrap();
    assert_eq!(summary.per_domain.len(), 1);
    assert_eq!(summary.per_domain[0].count, r.records.len());
    assert_eq!(summary.updates, 0);
}

#[test]
fn sweep_is_sorted_and_zero_beta_matches_no_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{TINY}\n[sweep]\nbetas = [0.1, 0.0, 0.001]\n");
    let cfg = config(dir.path(), "sweep", &[0], &body);
    ok(&["train", "--config", p(&cfg)]);
    let stdout = ok(&["sweep-beta", "--config", p(&cfg)]);
    let order: Vec<&str> = stdout.lines().skip(2).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(order, ["0", "0.001", "0.1"]);

    let noad = cfg.with_file_name("noad.toml");
    fs::write(&noad, format!("{}\n[adapt]\nmode = \"no_adapt\"\n", fs::read_to_string(&cfg).unwrap())).unwrap();
    ok(&["adapt", "--config", p(&noad)]);
    let out = dir.path().join("sweep-out");
    let (zero, _) = read_result(&out.join("sweep/results/beta_0__tp10__seed0.jsonl")).unwrap();
    let (none, _) = read_result(&out.join("results/meta_no_adapt__tp10__seed0.jsonl")).unwrap();
    assert_eq!(zero.records, none.records);
}

#[test]
fn ablation_has_five_rows_and_wo_adapt_matches_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "abl", &[0, 1], TINY);
    let stdout = ok(&["ablate", "--config", p(&cfg)]);
    for row in ["full", "wo_adapt", "wo_seq", "support_reuse", "no_extra"] {
        assert!(stdout.lines().any(|l| l.starts_with(row)), "missing {row}:\n{stdout}");
    }
    let out = dir.path().join("abl-out");
    let rows: Vec<RunSummary> = serde_json::from_str(&fs::read_to_string(out.join("ablate/ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);

    let noad = cfg.with_file_name("noad.toml");
    fs::write(&noad, format!("{}\n[adapt]\nmode = \"no_adapt\"\n", fs::read_to_string(&cfg).unwrap())).unwrap();
    let ckpt = out.join("ablate/seed-0/full.toml");
    ok(&["adapt", "--config", p(&noad), "--seed", "0", "--checkpoint", p(&ckpt)]);
    let (a, _) = read_result(&out.join("ablate/results/wo_adapt__tp10__seed0.jsonl")).unwrap();
    let (b, _) = read_result(&out.join("results/meta_no_adapt__tp10__seed0.jsonl")).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn report_regenerates_identically_and_matches_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "rep", &[0, 1], TINY);
    ok(&["train", "--config", p(&cfg)]);
    ok(&["adapt", "--config", p(&cfg)]);
    let out = dir.path().join("rep-out");
    let first = ok(&["report", "--out", p(&out)]);
    let text = fs::read(out.join("report.txt")).unwrap();
    let json = fs::read(out.join("report.json")).unwrap();
    let second = ok(&["report", "--out", p(&out)]);
    assert_eq!(first, second);
    assert_eq!(text, fs::read(out.join("report.txt")).unwrap());
    assert_eq!(json, fs::read(out.join("report.json")).unwrap());

    let mut accs = Vec::new();
    for e in fs::read_dir(out.join("results")).unwrap() {
        let path = e.unwrap().path();
        if parse_result_name(path.file_name().unwrap().to_str().unwrap()).is_some() {
            accs.push(accuracy_from_records(&path));
        }
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let report: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert!((report["rows"][0]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no results"));
}

#[test]
fn gen_data_round_trips_through_binary_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "gen", &[0], TINY);
    let stdout = ok(&["gen-data", "--config", p(&cfg)]);
    let paths: Vec<&str> = stdout.lines().collect();
    let body = format!(
        "{}\n",
        TINY.replace(
            "[data]\ntrain_size = 120\ntest_size = 60",
            &format!("[data]\nsource = \"binary\"\ntrain_path = {:?}\ntest_path = {:?}", paths[0], paths[1])
        )
    );
    let bin_cfg = config(dir.path(), "frombin", &[0], &body);
    ok(&["train", "--config", p(&bin_cfg)]);
    let ds = metatta_core::data::read_binary(Path::new(paths[0])).unwrap();
    assert_eq!(ds.len(), 120);
}
