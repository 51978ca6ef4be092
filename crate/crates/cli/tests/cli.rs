use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaintune::checkpoint::Checkpoint;

fn gaintune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaintune"))
        .args(args)
        .output()
        .expect("spawn gaintune")
}

fn ok(args: &[&str]) -> Output {
    let out = gaintune(args);
    assert!(
        out.status.success(),
        "gaintune {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

const TINY: &str = "\
[arch]
preset = dncnn-s
depth = 3
width = 4

[pretrain]
epochs = 2
patches_per_epoch = 16
batch_size = 8
patch_size = 16
sigma255 = 0..30

[adapt]
steps = 3
patches_per_step = 4
patch_size = 16
batch_size = 2
";

#[test]
fn gen_pc_writes_count_images_and_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["gen-pc", "--count", "3", "--size", "32", "--seed", "5", "--out", s(out)]);
    }
    assert_eq!(entries(&a), ["manifest.txt", "pc_0000.pgm", "pc_0001.pgm", "pc_0002.pgm"]);
    for name in ["pc_0000.pgm", "pc_0001.pgm", "pc_0002.pgm"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let head = fs::read(a.join("pc_0000.pgm")).unwrap();
    assert!(head.starts_with(b"P5\n32 32\n65535\n"));
}

#[test]
fn gen_pc_zero_shapes_gives_constant_images() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-pc", "--count", "2", "--size", "16", "--shapes", "0..0", "--out", s(dir.path())]);
    let img = gaintune::imageio::load_pgm(dir.path().join("pc_0001.pgm")).unwrap();
    let first = img.pixels()[0];
    assert!(img.pixels().iter().all(|&v| v == first));
}

#[test]
fn invalid_config_key_exits_2_with_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "[pretrain]\nepochs = 3\nlearning_rate = 0.1\n").unwrap();
    let out = gaintune(&["pretrain", "--config", s(&conf), "--data", s(dir.path()), "--out", "unused.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 3"), "{err}");
}

#[test]
fn sure_without_sigma_exits_2() {
    let out = gaintune(&["adapt", "--ckpt", "missing.ckpt", "--noisy", "missing.raw", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("σ"));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("y.raw");
    gaintune::imageio::save_rawf64(&gaintune::tensor::Tensor::zeros([1, 1, 16, 16]), &raw).unwrap();
    let out = gaintune(&[
        "adapt", "--ckpt", "does-not-exist.ckpt", "--noisy", s(&raw), "--sigma255", "25", "--out",
        s(&dir.path().join("o.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_config_defaults() {
    let out = ok(&["pretrain", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["[adapt]", "probes_per_eval = 1", "patches_per_step = 256", "lr_drop_after = 20"] {
        assert!(text.contains(key), "missing {key}");
    }
}

/// Counts of recorded noise levels in five equal bins over `lo..hi`.
fn sigma_histogram(manifest: &str, lo: f64, hi: f64) -> [usize; 5] {
    let mut bins = [0; 5];
    for line in manifest.lines().filter(|l| l.starts_with("sigma255.")) {
        let v: f64 = line.split(" = ").nth(1).unwrap().parse().unwrap();
        assert!((lo..=hi).contains(&v));
        bins[(((v - lo) / (hi - lo) * 5.0) as usize).min(4)] += 1;
    }
    bins
}

#[test]
fn corrupt_range_sigma_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let noisy = dir.path().join("noisy");
    ok(&["gen-pc", "--count", "200", "--size", "16", "--out", s(&clean)]);
    ok(&["corrupt", "--in", s(&clean), "--sigma255", "0..55", "--seed", "3", "--out", s(&noisy)]);
    let bins = sigma_histogram(&fs::read_to_string(noisy.join("manifest.txt")).unwrap(), 0.0, 55.0);
    assert_eq!(bins.iter().sum::<usize>(), 200);
    let chi2: f64 = bins.iter().map(|&c| (c as f64 - 40.0).powi(2) / 40.0).sum();
    // 99th percentile of chi-squared with 4 degrees of freedom
    assert!(chi2 < 13.277, "chi2 {chi2} bins {bins:?}");
}

#[test]
fn corrupt_zero_sigma_reproduces_clean_values() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let noisy = dir.path().join("noisy");
    ok(&["gen-pc", "--count", "1", "--size", "16", "--out", s(&clean)]);
    ok(&["corrupt", "--in", s(&clean), "--sigma255", "0", "--out", s(&noisy)]);
    let c = gaintune::imageio::load_pgm(clean.join("pc_0000.pgm")).unwrap();
    let y = gaintune::imageio::load_rawf64(noisy.join("pc_0000.raw")).unwrap();
    assert_eq!(c.pixels(), y.data());
}

fn manifest_without_timing(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("timing"))
        .collect::<Vec<_>>()
        .join("\n")
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn run() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let p = |name: &str| root.join(name);
        fs::write(p("tiny.conf"), TINY).unwrap();
        ok(&["gen-pc", "--count", "4", "--size", "32", "--seed", "1", "--out", s(&p("train"))]);
        ok(&["gen-pc", "--count", "2", "--size", "32", "--seed", "2", "--out", s(&p("test"))]);
        ok(&["corrupt", "--in", s(&p("test")), "--sigma255", "40", "--seed", "9", "--out", s(&p("noisy"))]);
        ok(&["pretrain", "--config", s(&p("tiny.conf")), "--data", s(&p("train")), "--out", s(&p("ckpt/pre.ckpt"))]);
        for stem in ["pc_0000", "pc_0001"] {
            let noisy = p(&format!("noisy/{stem}.raw"));
            let adapted = p(&format!("adapted/{stem}.ckpt"));
            ok(&[
                "adapt", "--ckpt", s(&p("ckpt/pre.ckpt")), "--noisy", s(&noisy), "--sigma255", "40", "--config",
                s(&p("tiny.conf")), "--clean", s(&p(&format!("test/{stem}.pgm"))), "--out", s(&adapted),
            ]);
            ok(&[
                "denoise", "--ckpt", s(&p("ckpt/pre.ckpt")), "--noisy", s(&noisy), "--out",
                s(&p(&format!("before/{stem}.pgm"))), "--out-raw", s(&p(&format!("before/{stem}.raw"))),
            ]);
            ok(&[
                "denoise", "--ckpt", s(&adapted), "--noisy", s(&noisy), "--out",
                s(&p(&format!("after/{stem}.pgm"))), "--out-raw", s(&p(&format!("after/{stem}.raw"))),
            ]);
        }
        Pipeline { _dir: dir, root }
    }
}

#[test]
fn pipeline_end_to_end() {
    let pl = Pipeline::run();
    let p = |name: &str| pl.root.join(name);

    let pre = fs::read(p("ckpt/pre.ckpt")).unwrap();
    let adapted = fs::read(p("adapted/pc_0000.ckpt")).unwrap();
    assert_eq!(Checkpoint::param_section(&pre).unwrap(), Checkpoint::param_section(&adapted).unwrap());
    assert_ne!(pre, adapted);

    let log = fs::read_to_string(p("adapted/pc_0000.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,lr,psnr,wall_ms"));
    assert_eq!(log.lines().count(), 1 + 3);
    assert!(p("ckpt/pre.ckpt.log.csv").exists());
    assert!(fs::read_to_string(p("ckpt/pre.ckpt.config.txt")).unwrap().contains("depth = 3"));

    let report = p("report/delta.csv");
    let out = ok(&[
        "eval", "--clean", s(&p("test")), "--estimates", s(&p("after")), "--baseline", s(&p("before")), "--out",
        s(&report),
    ]);
    let csv = fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,psnr_before,psnr_after,delta"));
    assert!(lines.next().unwrap().starts_with("pc_0000,"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean"));

    // unmatched stems are rejected
    fs::copy(p("after/pc_0000.raw"), p("after/extra.raw")).unwrap();
    let out = gaintune(&[
        "eval", "--clean", s(&p("test")), "--estimates", s(&p("after")), "--baseline", s(&p("before")), "--out",
        s(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));

    let filt = p("analysis/filter.pgm");
    ok(&[
        "analyze", "filter", "--ckpt", s(&p("ckpt/pre.ckpt")), "--noisy", s(&p("noisy/pc_0000.raw")), "--pixel",
        "10,12", "--out", s(&filt),
    ]);
    assert!(fs::read(&filt).unwrap().starts_with(b"P5\n32 32\n255\n"));
    let out = gaintune(&[
        "analyze", "filter", "--ckpt", s(&p("ckpt/pre.ckpt")), "--noisy", s(&p("noisy/pc_0000.raw")), "--pixel",
        "40,1", "--out", s(&filt),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = ok(&["analyze", "bias", "--ckpt", s(&p("ckpt/pre.ckpt")), "--noisy", s(&p("noisy/pc_0000.raw"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("bias_l2=") && text.contains(" relative="), "{text}");
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = Pipeline::run();
    let b = Pipeline::run();
    for name in [
        "ckpt/pre.ckpt",
        "adapted/pc_0001.ckpt",
        "after/pc_0001.raw",
        "noisy/pc_0000.raw",
        "train/pc_0003.pgm",
    ] {
        assert_eq!(fs::read(a.root.join(name)).unwrap(), fs::read(b.root.join(name)).unwrap(), "{name}");
    }
    let untimed = |root: &Path, name: &str| {
        let text = fs::read_to_string(root.join(name)).unwrap();
        text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>()
    };
    assert_eq!(
        untimed(&a.root, "adapted/pc_0001.ckpt.log.csv"),
        untimed(&b.root, "adapted/pc_0001.ckpt.log.csv")
    );
    let strip = |root: &Path| manifest_without_timing(&root.join("noisy/manifest.txt")).replace(s(root), "");
    assert_eq!(strip(&a.root), strip(&b.root));
}
