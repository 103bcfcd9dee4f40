use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn grin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grin"))
        .args(args)
        .current_dir(dir)
        .env("GRIN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_image(path: &Path, w: u32, h: u32, color: png::ColorType, pixel: impl Fn(u32, u32) -> Vec<u8>) {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path).unwrap()), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut data = Vec::new();
    for y in 0..h {
        for x in 0..w {
            data.extend(pixel(x, y));
        }
    }
    let mut writer = enc.write_header().unwrap();
    writer.write_image_data(&data).unwrap();
}

fn stripes(path: &Path, period: u32) {
    write_image(path, 32, 32, png::ColorType::Rgb, |x, y| {
        let on = ((x + y) / period) % 2 == 0;
        if on {
            vec![220, 40, 30]
        } else {
            vec![20, 60, 200]
        }
    });
}

fn gradient(path: &Path) {
    write_image(path, 32, 32, png::ColorType::Rgb, |x, y| vec![(x * 8) as u8, (y * 8) as u8, 128]);
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let o = grin(
        &["train", "--steps", "2", "--batch", "2", "--size", "16", "--out", "model.ckpt"],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("model.ckpt")
}

#[test]
fn zero_step_training_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = grin(&["train", "--steps", "0", "--out", "init.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("init.ckpt").exists());
    let csv = std::fs::read_to_string(dir.path().join("init.csv")).unwrap();
    assert_eq!(csv, "step,content,style,total\n");
}

#[test]
fn same_seed_gives_identical_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let o = grin(
            &["train", "--steps", "4", "--batch", "2", "--size", "16", "--seed", "7", "--out", name],
            dir.path(),
        );
        assert!(o.status.success());
        std::fs::read(dir.path().join(name).with_extension("csv")).unwrap()
    };
    let (a, b) = (run("a.ckpt"), run("b.ckpt"));
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);
    assert_eq!(
        std::fs::read(dir.path().join("a.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b.ckpt")).unwrap()
    );
}

#[test]
fn stylize_is_deterministic_and_preserves_size() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    gradient(&dir.path().join("c.png"));
    stripes(&dir.path().join("s.png"), 4);
    let run = |out: &str| {
        let o = grin(
            &["stylize", "c.png", "s.png", "--checkpoint", ckpt.to_str().unwrap(), "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("a.png");
    assert_eq!(a, run("b.png"));
    let info = png::Decoder::new(std::io::Cursor::new(a)).read_info().unwrap();
    assert_eq!((info.info().width, info.info().height), (32, 32));
}

#[test]
fn stylize_resizes_odd_images() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    write_image(&dir.path().join("c.png"), 36, 30, png::ColorType::Rgb, |x, _| vec![x as u8 * 7, 0, 90]);
    stripes(&dir.path().join("s.png"), 3);
    let o = grin(
        &["stylize", "c.png", "s.png", "--checkpoint", ckpt.to_str().unwrap(), "--out", "o.png"],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("resized to 40x32"));
}

#[test]
fn grayscale_and_alpha_images_are_read() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    write_image(&dir.path().join("g.png"), 16, 16, png::ColorType::Grayscale, |x, y| vec![((x ^ y) * 16) as u8]);
    write_image(&dir.path().join("a.png"), 16, 16, png::ColorType::Rgba, |x, _| vec![x as u8 * 10, 50, 70, 255]);
    let o = grin(
        &["stylize", "g.png", "a.png", "--checkpoint", ckpt.to_str().unwrap(), "--out", "o.png"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_or_corrupt_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    gradient(&dir.path().join("c.png"));
    std::fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
    let ck = ckpt.to_str().unwrap();
    for args in [
        vec!["stylize", "c.png", "nope.png", "--checkpoint", ck],
        vec!["stylize", "c.png", "bad.png", "--checkpoint", ck],
        vec!["stylize", "c.png", "c.png", "--checkpoint", "c.png"],
        vec!["train", "--bogus"],
    ] {
        assert_eq!(grin(&args, dir.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn config_file_values_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ok.cfg"), "# small run\nsteps = 2\nbatch = 2\nsize = 16\n").unwrap();
    let o = grin(&["train", "--config", "ok.cfg", "--out", "m.ckpt"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("trained 2 steps"));

    std::fs::write(dir.path().join("bad.cfg"), "steps = 2\nlearning_rate = 0.1\n").unwrap();
    let o = grin(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn stylize_accepts_checkpoint_without_graph_weights() {
    use grin::trainer::{load_checkpoint, save_checkpoint, Checkpoint};
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let full = load_checkpoint(&ckpt).unwrap();
    let thetaless = Checkpoint::new(
        full.params.iter().filter(|p| !p.name.starts_with("graph.")).cloned().collect(),
        full.adam.clone(),
    );
    save_checkpoint(dir.path().join("decoder.ckpt"), &thetaless).unwrap();
    gradient(&dir.path().join("c.png"));
    stripes(&dir.path().join("s.png"), 4);
    let run = |ck: &str, out: &str| {
        let o = grin(&["stylize", "c.png", "s.png", "--checkpoint", ck, "--out", out], dir.path());
        assert!(o.status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(run("model.ckpt", "a.png"), run("decoder.ckpt", "b.png"));
}

#[test]
fn gradcheck_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = grin(&["gradcheck", "--tolerance", "0", "--samples", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gradcheck", "--seed", "2", "--samples", "4"];
    let (a, b) = (grin(&args, dir.path()), grin(&args, dir.path()));
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("model.graph.0.theta"));
}

#[test]
fn inspect_single_image_graph_is_one() {
    let dir = tempfile::tempdir().unwrap();
    stripes(&dir.path().join("s.png"), 4);
    let o = grin(&["inspect-graph", "s.png", "--out", "g.csv"], dir.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let p: f64 = csv
        .lines()
        .find_map(|l| l.strip_prefix("propagation,0,0,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((p - 1.0).abs() < 1e-12, "{csv}");
}

#[test]
fn inspect_duplicated_image_splits_weight_evenly() {
    let dir = tempfile::tempdir().unwrap();
    stripes(&dir.path().join("s.png"), 4);
    let o = grin(&["inspect-graph", "s.png", "s.png", "--out", "g.csv"], dir.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let p: Vec<f64> = csv
        .lines()
        .filter(|l| l.starts_with("propagation,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(p.len(), 4);
    assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-12), "{p:?}");
}

#[test]
fn inspect_synthetic_clusters_group_together() {
    let dir = tempfile::tempdir().unwrap();
    let o = grin(&["inspect-graph", "--seed", "3", "--out", "g.csv"], dir.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let p = |i: usize, j: usize| -> f64 {
        let key = format!("propagation,{i},{j},");
        csv.lines().find_map(|l| l.strip_prefix(key.as_str())).unwrap().parse().unwrap()
    };
    let within = (p(0, 1) + p(2, 3)) / 2.0;
    let cross = (p(0, 2) + p(0, 3) + p(1, 2) + p(1, 3)) / 4.0;
    assert!(within > cross, "within {within} cross {cross}");
    assert!(stdout(&o).contains("propagation"));
}

#[test]
fn mismatched_style_sizes_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    stripes(&dir.path().join("a.png"), 4);
    write_image(&dir.path().join("b.png"), 16, 16, png::ColorType::Rgb, |_, _| vec![1, 2, 3]);
    assert_eq!(grin(&["inspect-graph", "a.png", "b.png"], dir.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_3_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = grin(
        &["train", "--steps", "20", "--batch", "2", "--size", "16", "--lr", "1e100", "--out", "d.ckpt"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
