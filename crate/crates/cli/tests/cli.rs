use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use trav_core::cli_io::checkpoint::{load_checkpoint, save_checkpoint};
use trav_core::cli_io::manifest::{parse_line, MANIFEST_NAME};
use trav_core::reward_model::{ModelConfig, ModelKind, RewardNet};

fn trav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trav"))
        .args(args)
        .env("TRAV_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = trav(args);
    assert!(
        out.status.success(),
        "trav {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn gen(dir: &Path, count: usize, extra: &[&str]) {
    let count = count.to_string();
    let mut args = vec!["gen", "--out", dir.to_str().unwrap(), "--count", &count, "--rows", "8", "--cols", "8", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_split_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 10, &["--split-ratio", "0.7"]);
    let text = fs::read_to_string(data.join(MANIFEST_NAME)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    let train = lines.iter().filter(|l| l.contains("\"split\":\"train\"")).count();
    assert_eq!(train, 7);
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 6, &["--beta", "1.5", "--noise", "0.01"]);
    gen(&b, 6, &["--beta", "1.5", "--noise", "0.01"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn gen_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let out = out.to_str().unwrap();
    assert_eq!(code(&trav(&["gen", "--out", out, "--rows", "0"])), 2);
    assert_eq!(code(&trav(&["gen", "--out", out, "--count", "1"])), 2);
    let file = tmp.path().join("plain");
    fs::write(&file, b"x").unwrap();
    let under_file = file.join("sub");
    let res = trav(&["gen", "--out", under_file.to_str().unwrap(), "--count", "2", "--rows", "4", "--cols", "4"]);
    assert_eq!(code(&res), 2);
    assert!(!res.stderr.is_empty());
}

#[test]
fn zero_iterations_keep_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 4, &[]);
    let out = tmp.path().join("m");
    ok(&["train", "--data", data.to_str().unwrap(), "--iters", "0", "--seed", "11", "--out", out.to_str().unwrap()]);
    let (net, meta) = load_checkpoint(&out.join("model.ckpt")).unwrap();
    let init = RewardNet::init(meta.model, 11).unwrap();
    assert_eq!(net.params().values, init.params().values);
    let report = fs::read_to_string(out.join("train.csv")).unwrap();
    assert_eq!(report.trim(), "iter,nll_proxy,rank_loss,grad_norm,millis");
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 6, &[]);
    let d = data.to_str().unwrap();
    for algo in ["medirl", "tmedirl"] {
        let (a, b) = (tmp.path().join(format!("{algo}a")), tmp.path().join(format!("{algo}b")));
        for out in [&a, &b] {
            ok(&["train", "--data", d, "--algo", algo, "--iters", "15", "--lr", "0.01", "--seed", "2", "--out", out.to_str().unwrap()]);
        }
        for f in ["model.ckpt", "model.json"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{algo} {f}");
        }
    }
}

#[test]
fn tmedirl_needs_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 4, &[]);
    let manifest = data.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest).unwrap();
    let stripped: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let mut e = parse_line(l, i + 1).unwrap();
            e.aec = None;
            serde_json::to_string(&e).unwrap()
        })
        .collect();
    fs::write(&manifest, stripped.join("\n")).unwrap();
    let out = tmp.path().join("m");
    let res = trav(&["train", "--data", data.to_str().unwrap(), "--algo", "tmedirl", "--iters", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    ok(&["train", "--data", data.to_str().unwrap(), "--algo", "medirl", "--iters", "2", "--out", out.to_str().unwrap()]);
}

#[test]
fn numeric_blowup_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 4, &[]);
    let out = tmp.path().join("m");
    let res = trav(&["train", "--data", data.to_str().unwrap(), "--iters", "50", "--lr", "1e308", "--out", out.to_str().unwrap()]);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert_eq!(code(&res), 4, "{stderr}");
    assert!(stderr.contains("sample s0000"), "{stderr}");
}

#[test]
fn eval_reports_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 8, &[]);
    let d = data.to_str().unwrap();
    let m = tmp.path().join("m");
    ok(&["train", "--data", d, "--iters", "5", "--out", m.to_str().unwrap()]);
    let ckpt = m.join("model.ckpt");
    let e = tmp.path().join("e");
    ok(&["eval", "--data", d, "--ckpt", ckpt.to_str().unwrap(), "--out", e.to_str().unwrap()]);
    let csv = fs::read_to_string(e.join("eval.csv")).unwrap();
    assert!(csv.starts_with("nll,hd,rank_acc,mean_aec,spearman\n"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("eval.json")).unwrap()).unwrap();
    for key in ["nll", "hd", "rank_acc", "mean_aec", "spearman"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let nll = json["nll"].as_f64().unwrap();
    assert!(nll > 0.0 && nll.is_finite());

    let all_train = tmp.path().join("t");
    gen(&all_train, 4, &["--split-ratio", "1.0"]);
    let res = trav(&["eval", "--data", all_train.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--out", e.to_str().unwrap()]);
    assert_eq!(code(&res), 5);

    let other = tmp.path().join("o");
    ok(&["gen", "--out", other.to_str().unwrap(), "--count", "4", "--rows", "6", "--cols", "7"]);
    let res = trav(&["eval", "--data", other.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--out", e.to_str().unwrap()]);
    assert_eq!(code(&res), 5);
}

#[test]
fn render_writes_images() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 3, &[]);
    let d = data.to_str().unwrap();
    let m = tmp.path().join("m");
    ok(&["train", "--data", d, "--iters", "3", "--out", m.to_str().unwrap()]);
    let prefix = tmp.path().join("img").join("s0");
    let res = ok(&["render", "--data", d, "--ckpt", m.join("model.ckpt").to_str().unwrap(), "--sample", "s00000", "--out", prefix.to_str().unwrap()]);
    assert!(res.stderr.is_empty(), "{}", String::from_utf8_lossy(&res.stderr));
    for suffix in ["_path.pgm", "_goal.pgm", "_svf.pgm"] {
        let bytes = fs::read(format!("{}{suffix}", prefix.display())).unwrap();
        assert_eq!(&bytes[..11], b"P5\n8 8\n255\n");
        assert_eq!(bytes.len(), 11 + 64);
        assert!(bytes[11..].contains(&0) && bytes[11..].contains(&255), "{suffix}");
    }
    let ppm = fs::read(format!("{}_overlay.ppm", prefix.display())).unwrap();
    assert_eq!(&ppm[..11], b"P6\n8 8\n255\n");
    assert_eq!(ppm.len(), 11 + 3 * 64);
    assert!(ppm[11..].chunks(3).any(|p| p == [0, 255, 255]));

    let missing = trav(&["render", "--data", d, "--ckpt", m.join("model.ckpt").to_str().unwrap(), "--sample", "nope", "--out", prefix.to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn render_constant_map_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, 2, &[]);
    let zero = RewardNet::zeros(ModelConfig::new(ModelKind::Linear, 8, 8, 32)).unwrap();
    let ckpt = tmp.path().join("zero.ckpt");
    save_checkpoint(&ckpt, &zero, 0.95, serde_json::Value::Null).unwrap();
    let prefix = tmp.path().join("z");
    let res = ok(&["render", "--data", data.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--sample", "s00001", "--out", prefix.to_str().unwrap()]);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("path reward map is constant"), "{stderr}");
    let bytes = fs::read(format!("{}_path.pgm", prefix.display())).unwrap();
    assert!(bytes[11..].iter().all(|&b| b == 128));
}
