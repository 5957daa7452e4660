use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
hidden = 16
heads = 2
enc_layers = 1
patch = 4
width = 16
height = 16

[train]
max_steps = 3
batch_size = 2
workers = 1

[corpus]
n_scenes = 4
n_demos = 4
"#;

const SPARSE: &str = "[corpus.spec]\ndensity = 300.0\ntable_density = 300.0\n";

fn mvp3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvp3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mvp3d")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mvp3d(&[])), 1);
    assert_eq!(code(&mvp3d(&["pretrain", "--out", "x"])), 1);
    assert_eq!(code(&mvp3d(&["gen-corpus", "--out", "x", "--n", "2", "--bogus"])), 1);
    assert_eq!(code(&mvp3d(&["gradcheck", "--preset", "laptop"])), 1);
    assert_eq!(code(&mvp3d(&["--help"])), 0);
}

#[test]
fn bad_config_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = dir.path().join("run");
    let o = mvp3d(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvp3d(&["render", "--scene", s(&dir.path().join("none.ply")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_corpus_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&mvp3d(&["gen-corpus", "--out", s(&data), "--n", "2", "--seed", "5"])), 0);
    for f in ["scene_5.ply", "scene_5.json", "scene_6.ply", "episodes.jsonl", "config.resolved.toml"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let lines = fs::read_to_string(data.join("episodes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let views = dir.path().join("views");
    let o = mvp3d(&["render", "--scene", s(&data.join("scene_5.ply")), "--out", s(&views), "--width", "8", "--height", "8"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(&views).unwrap().count(), 20);
    assert!(views.join("scene_5_top_rgb.ppm").is_file());
    assert!(views.join("scene_5_right_depth.pgm").is_file());
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, format!("{TINY}{SPARSE}")).unwrap();

    let pre = root.join("pre");
    let o = mvp3d(&["pretrain", "--config", s(&cfg), "--out", s(&pre), "--seed", "3", "--loss-masked-only"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["final.ckpt", "metrics.csv", "config.resolved.toml"] {
        assert!(pre.join(f).is_file(), "{f}");
    }
    let resolved = fs::read_to_string(pre.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("loss_masked_only = true"));
    assert!(resolved.contains("seed = 3"));

    let data = root.join("data");
    assert_eq!(code(&mvp3d(&["gen-corpus", "--out", s(&data), "--n", "3", "--seed", "100", "--config", s(&cfg)])), 0);
    let ft_text = format!("{TINY}episodes = \"{}\"\n", s(&data));
    let ft_cfg = root.join("ft.toml");
    fs::write(&ft_cfg, &ft_text).unwrap();

    let ft = root.join("ft");
    let init = pre.join("final.ckpt");
    let o = mvp3d(&["finetune", "--config", s(&ft_cfg), "--init", s(&init), "--out", s(&ft)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("train success"));
    let scratch = root.join("scratch");
    let o = mvp3d(&["finetune", "--config", s(&ft_cfg), "--out", s(&scratch)]);
    assert_eq!(code(&o), 0);
    assert!(scratch.join("final.ckpt").is_file());

    let rec = root.join("rec");
    let o = mvp3d(&["reconstruct", "--ckpt", s(&init), "--scenes", s(&data), "--out", s(&rec)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rec.join("recon.json").is_file());
    assert!(rec.join("scene_100_front.ppm").is_file());

    let ev = root.join("ev");
    let ckpt = ft.join("final.ckpt");
    let o = mvp3d(&["eval", "--ckpt", s(&ckpt), "--episodes", s(&data), "--sweep", "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(ev.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 6);
    assert!(csv.starts_with("perturbation,success_rate,mean_pos_err,n\nnone,"));
    assert!(ev.join("success.json").is_file());

    // A finetune init whose encoder does not match the config is a runtime error.
    let wide = root.join("wide.toml");
    fs::write(&wide, ft_text.replace("hidden = 16", "hidden = 32")).unwrap();
    let o = mvp3d(&["finetune", "--config", s(&wide), "--init", s(&init), "--out", s(&root.join("bad"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hidden"));
}
