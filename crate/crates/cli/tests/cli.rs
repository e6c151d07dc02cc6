use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_DATA: &str = "data.n_train = 4\ndata.n_val = 2\ndata.n_test = 2\ndata.height = 32\ndata.width = 32\n";
const TINY_NET: &str = "net.stem_channels = 4\nnet.stem_stride = 2\nnet.stages = 1x4x1,1x8x1\n\
                        net.head_reduce_channels = 8\nnet.rpn_channels = 8\nanchor.sizes = 10\n\
                        rpn.batch = 16\nroi.batch = 8\noptim.epochs = 2\n";

fn psdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psdet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny dataset plus a matching run config under `root`.
fn tiny_setup(root: &Path) -> (PathBuf, PathBuf) {
    let spec = root.join("spec.txt");
    fs::write(&spec, TINY_DATA).unwrap();
    let data = root.join("data");
    let o = psdet(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = root.join("run.txt");
    fs::write(&cfg, format!("{TINY_DATA}{TINY_NET}")).unwrap();
    (data, cfg)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_owned(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_default_counts_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert!(psdet(&["gen-data", "--out", s(&a), "--seed", "3"]).status.success());
    assert!(psdet(&["gen-data", "--out", s(&b), "--seed", "3"]).status.success());
    let images = fs::read_dir(a.join("images")).unwrap().count();
    assert_eq!(images, 225);
    let lines = |f: &str| fs::read_to_string(a.join(f)).unwrap().lines().map(|l| l.split(' ').next().unwrap().to_owned()).collect::<std::collections::BTreeSet<_>>().len();
    assert_eq!(lines("train.txt") + lines("val.txt"), 200);
    assert_eq!(lines("test.txt"), 25);
    assert!(tree(&a) == tree(&b));
}

#[test]
fn gen_data_unwritable_dir_names_path() {
    let t = tempfile::tempdir().unwrap();
    let file = t.path().join("plain");
    fs::write(&file, "x").unwrap();
    let bad = file.join("sub");
    let o = psdet(&["gen-data", "--out", s(&bad)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("ERROR:io:"), "{err}");
    assert!(err.contains(s(&bad)), "{err}");
}

#[test]
fn train_writes_checkpoint_and_eval_matches_metrics() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(t.path());
    let run = t.path().join("run");
    let o = psdet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.psrd", "metrics.txt", "config.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.txt")).unwrap();
    let last = metrics.lines().last().unwrap().split(' ').nth(2).unwrap().to_owned();
    let ckpt = run.join("checkpoint.psrd");
    let o = psdet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4);
    assert_eq!(out.lines().last().unwrap(), format!("mAP {last}"));
}

#[test]
fn train_zero_epochs_and_missing_data() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(t.path());
    let run = t.path().join("run");
    let o = psdet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("checkpoint.psrd").is_file());
    assert_eq!(fs::read_to_string(run.join("metrics.txt")).unwrap(), "");

    let o = psdet(&["train", "--data", s(&t.path().join("nope")), "--out", s(&run)]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("ERROR:io:"), "{}", stderr(&o));
}

#[test]
fn eval_oracle_and_empty_detections() {
    let t = tempfile::tempdir().unwrap();
    let (data, _) = tiny_setup(t.path());
    let gt = fs::read_to_string(data.join("test.txt")).unwrap();
    let dets: String = gt
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            format!("{} {} 1 {} {} {} {}\n", f[0], f[1], f[2], f[3], f[4], f[5])
        })
        .collect();
    let perfect = t.path().join("perfect.txt");
    fs::write(&perfect, dets).unwrap();
    let o = psdet(&["eval", "--detections", s(&perfect), "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).ends_with("mAP 1.0000\n"), "{}", stdout(&o));

    let empty = t.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let o = psdet(&["eval", "--detections", s(&empty), "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).ends_with("mAP 0.0000\n"));
}

#[test]
fn detect_overlay_and_format_errors() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(t.path());
    let run = t.path().join("run");
    assert!(psdet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--epochs", "0"]).status.success());
    let strict = t.path().join("strict.txt");
    fs::write(&strict, format!("{TINY_DATA}{TINY_NET}detect.score_thresh = 1\n")).unwrap();
    let image = data.join("images/img00000.ppm");
    let out = t.path().join("out.ppm");
    let ckpt = run.join("checkpoint.psrd");
    let o = psdet(&["detect", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&out), "--config", s(&strict)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&image).unwrap());
    assert_eq!(stdout(&o), "");

    let bogus = t.path().join("bogus.ppm");
    fs::write(&bogus, "P3\n1 1\n255\n0 0 0\n").unwrap();
    let o = psdet(&["detect", "--checkpoint", s(&ckpt), "--image", s(&bogus), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("ERROR:format:"), "{}", stderr(&o));

    let wide = t.path().join("wide.txt");
    fs::write(&wide, format!("{TINY_DATA}{TINY_NET}ps.k = 5\n")).unwrap();
    let o = psdet(&["detect", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&out), "--config", s(&wide)]);
    assert!(stderr(&o).starts_with("ERROR:config:"), "{}", stderr(&o));
}

#[test]
fn gradcheck_filter_and_corrupt_fixture() {
    let o = psdet(&["gradcheck", "--layers", "ps_roi_pool"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| l.contains("max_rel_err")).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("ps_roi_pool") && rows[0].contains("PASS"));

    let o = psdet(&["gradcheck", "--layers", "fixture_corrupt_adjoint", "--instances", "2"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).starts_with("ERROR:gradcheck:"));

    let o = psdet(&["gradcheck", "--layers", "conv3d"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("ERROR:config:"));
}

#[test]
fn ablate_k_sweep_rows_and_repeatability() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(t.path());
    let run = |dir: &str| {
        let o = psdet(&["ablate", "--config", s(&cfg), "--data", s(&data), "--sweep", "k=1,3,7", "--out", s(&t.path().join(dir)), "--epochs", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(t.path().join(dir).join("table.txt")).unwrap()
    };
    let a = run("a");
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("variant") && lines[0].ends_with("mAP"));
    for (row, k) in lines[1..].iter().zip(["k=1", "k=3", "k=7"]) {
        assert!(row.starts_with(k));
        assert_eq!(row.rsplit(' ').next().unwrap().split('.').nth(1).map(str::len), Some(4));
    }
    assert_eq!(a, run("b"));
}

#[test]
fn usage_errors_are_prefixed() {
    let o = psdet(&["train"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("ERROR:usage:"), "{}", stderr(&o));
    let o = psdet(&["eval", "--data", "x"]);
    assert!(stderr(&o).starts_with("ERROR:usage:"));
}
