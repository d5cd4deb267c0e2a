use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tcmoa_core::data::generate;
use tcmoa_core::ppm::{read_image, write_image};
use tcmoa_core::tcmoa::Task;

const TINY: &str = "\
model.image_size=8
model.patch_size=2
model.dim=8
model.encoder_depth=2
model.decoder_depth=2
model.heads=2
model.window=2
model.tau=2
model.mlp_ratio=2
model.group=2
model.bottleneck=2
train.batch_per_task=1
pretrain.steps=3
pretrain.batch=2
";

fn tcmoa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcmoa")).args(args).env("TCMOA_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tcmoa(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny pretrained and fine-tuned checkpoint plus a source pair.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    x: PathBuf,
    y: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("tiny.cfg");
        fs::write(&cfg, TINY).unwrap();
        ok(&["pretrain", "--config", s(&cfg), "--out", s(&root.join("pre"))]);
        let pre = root.join("pre/pretrained.ckpt");
        ok(&["train", "--checkpoint", s(&pre), "--steps", "2", "--out", s(&root.join("run"))]);
        let pair = generate(Task::Mef, 3, 8);
        let (x, y) = (root.join("x.ppm"), root.join("y.ppm"));
        write_image(&x, &pair.x).unwrap();
        write_image(&y, &pair.y).unwrap();
        Fixture { ckpt: root.join("run/model.ckpt"), root, x, y, _dir: dir }
    })
}

#[test]
fn gen_writes_the_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--task", "mff", "--n", "2", "--seed", "5", "--size", "16", "--out", s(dir.path())]);
    for seed in [5, 6] {
        for part in ["x", "y", "truth"] {
            let img = read_image(dir.path().join(format!("mff/{seed}_{part}.ppm"))).unwrap();
            assert_eq!(img.shape(), &[16, 16, 3]);
        }
    }
}

#[test]
fn train_writes_history_and_checkpoint() {
    let f = fixture();
    let history = fs::read_to_string(f.root.join("run/train_history.tsv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("step\ttotal\tmir\tvif_ssim"));
    assert_eq!(lines[0].split('\t').count(), 3 + 3 * 5);
    let pre = fs::read_to_string(f.root.join("pre/pretrain_history.tsv")).unwrap();
    assert_eq!(pre.lines().count(), 4);
}

#[test]
fn identity_control_matches_plain_fusion_and_sweep_cell() {
    let f = fixture();
    let out = f.root.join("identity");
    fs::create_dir_all(&out).unwrap();
    let a = out.join("a.ppm");
    ok(&["fuse", "--checkpoint", s(&f.ckpt), "--x", s(&f.x), "--y", s(&f.y), "--task", "mef", "--out", s(&a)]);
    let b = out.join("b.ppm");
    ok(&[
        "fuse", "--checkpoint", s(&f.ckpt), "--x", s(&f.x), "--y", s(&f.y), "--task", "mef", "--alpha", "1", "--beta", "0",
        "--out", s(&b),
    ]);
    let sweep = out.join("sweep");
    ok(&["sweep", "--checkpoint", s(&f.ckpt), "--x", s(&f.x), "--y", s(&f.y), "--task", "mef", "--out", s(&sweep)]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes, fs::read(sweep.join("cell_00_00.ppm")).unwrap());

    // the same image straight from the library, without any control
    let state = tcmoa_core::training::checkpoint::load(&f.ckpt).unwrap();
    let (x, y) = (read_image(&f.x).unwrap(), read_image(&f.y).unwrap());
    let plain = state.model.infer(&state.inference_params(), &x, &y, Task::Mef, None).unwrap();
    assert_eq!(tcmoa_core::ppm::encode(&plain.fused).unwrap(), bytes);
}

#[test]
fn sweep_grid_and_index() {
    let f = fixture();
    let dir = f.root.join("grid");
    ok(&[
        "sweep", "--checkpoint", s(&f.ckpt), "--x", s(&f.x), "--y", s(&f.y), "--task", "vif", "--alpha", "0,1.5,3", "--beta",
        "-0.2,0.2", "--out", s(&dir),
    ]);
    let index = fs::read_to_string(dir.join("index.tsv")).unwrap();
    let rows: Vec<&str> = index.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(index.starts_with("file\talpha\tbeta\ten\tpsnr\tsd\tssim\tmi"));
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), 8);
        assert!(dir.join(cols[0]).exists());
    }
}

#[test]
fn stats_reports_and_adapter_maps() {
    let f = fixture();
    let dir = f.root.join("stats");
    let text = ok(&["stats", "--checkpoint", s(&f.ckpt), "--task", "mff", "--n", "2", "--out", s(&dir)]);
    assert!(text.contains("tokens=32"));
    let legend = fs::read_to_string(dir.join("legend.txt")).unwrap();
    assert_eq!(legend.lines().count(), 4);
    let map = read_image(dir.join("adapter_map_0.ppm")).unwrap();
    assert_eq!(map.shape(), &[8, 8, 3]);
}

#[test]
fn metrics_prints_every_field() {
    let f = fixture();
    let text = ok(&["metrics", "--fused", s(&f.x), "--x", s(&f.x), "--y", s(&f.y), "--reference", s(&f.x)]);
    for key in ["en=", "psnr=99.000000", "sd=", "ssim=", "mi="] {
        assert!(text.contains(key), "{key} missing from {text}");
    }
}

#[test]
fn gradcheck_passes_and_catches_a_broken_derivative() {
    let good = tcmoa(&["gradcheck"]);
    let text = String::from_utf8_lossy(&good.stdout);
    assert_eq!(good.status.code(), Some(0), "{text}");
    assert_eq!(text.lines().count(), 3);
    for task in ["vif", "mef", "mff"] {
        assert!(text.contains(task));
    }
    let bad = tcmoa(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("analytic"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let f = fixture();
    // usage
    assert_eq!(tcmoa(&["fuse"]).status.code(), Some(2));
    assert_eq!(tcmoa(&["stats", "--checkpoint", s(&f.ckpt), "--task", "rgb", "--out", "/tmp"]).status.code(), Some(2));
    let cfg = f.root.join("bad.cfg");
    fs::write(&cfg, "model.colour=1\n").unwrap();
    assert_eq!(tcmoa(&["pretrain", "--config", s(&cfg), "--out", s(&f.root)]).status.code(), Some(2));
    // i/o
    let missing = f.root.join("missing.ppm");
    let out = f.root.join("never.ppm");
    let code = |x: &Path| {
        tcmoa(&["fuse", "--checkpoint", s(&f.ckpt), "--x", s(x), "--y", s(&f.y), "--task", "vif", "--out", s(&out)])
            .status
            .code()
    };
    assert_eq!(code(&missing), Some(3));
    let garbage = f.root.join("garbage.ppm");
    fs::write(&garbage, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    assert_eq!(code(&garbage), Some(3));
    // size
    let big = f.root.join("big.ppm");
    write_image(&big, &generate(Task::Vif, 0, 16).x).unwrap();
    assert_eq!(code(&big), Some(4));
    assert!(!out.exists());
}
