use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepssm::io::{read_pgm, read_pts, read_ssm, write_reg};
use deepssm::train::{init_regressor, TrainConfig, TrainSample};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deepssm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("d{n}_{seed}"));
    ok(&["synth", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&out)]);
    out
}

fn manifest_outputs(path: &Path) -> Vec<(String, String)> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| (o["path"].as_str().unwrap().to_string(), o["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn synth_writes_samples_manifest_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), 6, 7);
    for ext in [".pgm", ".mask.pgm", ".pts", ".lmk"] {
        assert!(a.join(format!("0005{ext}")).exists());
    }
    assert_eq!(fs::read_to_string(a.join("manifest.tsv")).unwrap().lines().count(), 7);
    let first = manifest_outputs(&a.join("synth.manifest.json"));
    assert_eq!(first.len(), 6 * 4 + 1);
    // recorded hashes match the files on disk
    for (path, hash) in &first {
        assert_eq!(&deepssm_cli_hash(&fs::read(path).unwrap()), hash);
    }
    ok(&["synth", "--n", "6", "--seed", "7", "--out", p(&a)]);
    assert_eq!(manifest_outputs(&a.join("synth.manifest.json")), first);
}

fn deepssm_cli_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn synth_rejects_zero_size_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--n", "0", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--n"));
    let o = run(&["synth", "--n", "3", "--width", "0", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--width"));
    let o = run(&["synth", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["synth", "--n", "x", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn build_model_reports_variance_and_rejects_oversized_beta() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), 50, 3);
    let m = tmp.path().join("m.ssm");
    let out = ok(&["build-model", "--data", p(&d), "--beta-dim", "10", "--out", p(&m)]);
    assert!(out.contains("retained variance"));
    let model = read_ssm(&fs::read_to_string(&m).unwrap()).unwrap();
    assert_eq!((model.point_count(), model.beta_dim()), (88, 10));
    assert!(tmp.path().join("m.ssm.manifest.json").exists());
    let o = run(&["build-model", "--data", p(&d), "--beta-dim", "50", "--out", p(&m)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn build_model_excludes_corrupt_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), 12, 5);
    fs::write(d.join("0003.mask.pgm"), b"P5 64 64 255\n\x00\x01").unwrap();
    let m = tmp.path().join("m.ssm");
    let out = ok(&["build-model", "--data", p(&d), "--beta-dim", "5", "--out", p(&m)]);
    assert!(out.contains("excluded 0003"), "{out}");
    assert!(out.contains("shapes used: 11"));
}

#[test]
fn train_writes_report_with_stage_marker_and_delta_zero_matches_stage1_only() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), 30, 9);
    let m = tmp.path().join("m.ssm");
    ok(&["build-model", "--data", p(&d), "--beta-dim", "8", "--out", p(&m)]);
    let common = ["--max-epochs", "3", "--stage2-epochs", "2", "--hidden", "16", "--downsample", "4"];
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--data", p(&d), "--model", p(&m), "--out", p(out)];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        ok(&args)
    };
    let r = tmp.path().join("r.reg");
    let out = train(&r, &[]);
    assert!(out.contains("val_dice"));
    let report = fs::read_to_string(tmp.path().join("r.reg.report.tsv")).unwrap();
    assert!(report.starts_with("epoch\tstage\ttrain_point\tval_point\tval_dice"));
    assert!(report.contains("# stage-boundary"));
    let r0 = tmp.path().join("r0.reg");
    let r1 = tmp.path().join("r1.reg");
    train(&r0, &["--delta", "0"]);
    train(&r1, &["--stage1-only"]);
    assert_eq!(fs::read(&r0).unwrap(), fs::read(&r1).unwrap());
    // thread count does not change the result
    let r2 = tmp.path().join("r2.reg");
    let mut args = vec!["--threads", "2", "train", "--data", p(&d), "--model", p(&m), "--out", p(&r2)];
    args.extend_from_slice(&common);
    ok(&args);
    assert_eq!(fs::read(&r).unwrap(), fs::read(&r2).unwrap());
}

#[test]
fn fit_recovers_generator_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), 40, 11);
    let m = tmp.path().join("m.ssm");
    ok(&["build-model", "--data", p(&d), "--beta-dim", "12", "--out", p(&m)]);
    let test = tmp.path().join("test");
    ok(&["synth", "--n", "3", "--seed", "500", "--out", p(&test)]);
    let out_dir = tmp.path().join("fit");
    let out = ok(&["fit", "--model", p(&m), "--masks", p(&test), "--out", p(&out_dir)]);
    let mean: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("mean dice "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(mean >= 0.95, "{out}");
    assert!(read_pts(&fs::read_to_string(out_dir.join("0000.pts")).unwrap()).is_ok());
}

#[test]
fn predict_with_untrained_regressor_gives_one_shape_and_missing_model_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), 20, 13);
    let m = tmp.path().join("m.ssm");
    ok(&["build-model", "--data", p(&d), "--beta-dim", "6", "--out", p(&m)]);
    let model = read_ssm(&fs::read_to_string(&m).unwrap()).unwrap();
    let samples: Vec<TrainSample> = deepssm::synthgen::generate(
        &deepssm::synthgen::GenConfig { seed: 13, ..Default::default() },
        20,
    )
    .unwrap()
    .into_iter()
    .map(|s| TrainSample { image: s.image, points: s.points, mask: s.mask })
    .collect();
    let reg = init_regressor(&model, &samples, &TrainConfig { hidden: vec![8], ..Default::default() }).unwrap();
    let r = tmp.path().join("untrained.reg");
    fs::write(&r, write_reg(&reg)).unwrap();
    let out = tmp.path().join("pred");
    ok(&["predict", "--model", p(&m), "--reg", p(&r), "--images", p(&d), "--out", p(&out)]);
    let a = fs::read_to_string(out.join("0000.pts")).unwrap();
    for i in 1..20 {
        assert_eq!(fs::read_to_string(out.join(format!("{i:04}.pts"))).unwrap(), a);
    }
    let pc = read_pts(&a).unwrap();
    // mean shape, unrotated
    let mean = model.mean();
    let sim = deepssm::geometry::estimate_similarity(mean.points(), pc.points()).unwrap();
    assert!(sim.rotation.abs() < 1e-9);
    assert!(pc.rmsd(&deepssm::geometry::apply_affine(&deepssm::geometry::similarity_to_affine(&sim), mean).unwrap()).unwrap() < 1e-9);

    let o = run(&["predict", "--model", p(&tmp.path().join("nope.ssm")), "--reg", p(&r), "--images", p(&d), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["fit", "--model", p(&tmp.path().join("nope.ssm")), "--masks", p(&d), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn predict_refinement_keeps_single_component() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), 20, 17);
    let m = tmp.path().join("m.ssm");
    ok(&["build-model", "--data", p(&d), "--beta-dim", "6", "--out", p(&m)]);
    let r = tmp.path().join("r.reg");
    ok(&["train", "--data", p(&d), "--model", p(&m), "--out", p(&r), "--max-epochs", "2", "--stage1-only", "--hidden", "8", "--downsample", "4"]);
    let out = tmp.path().join("pred");
    ok(&["predict", "--model", p(&m), "--reg", p(&r), "--images", p(&d), "--out", p(&out), "--refine-iters", "30"]);
    for i in 0..20 {
        let g = read_pgm(&fs::read(out.join(format!("{i:04}.mask.pgm"))).unwrap()).unwrap();
        let mask = g.to_mask(1.0).unwrap();
        assert_eq!(deepssm::metrics::connected_components(&mask), 1);
    }
}

fn write_mask(path: &Path, w: usize, h: usize, on: &[(usize, usize)]) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    let mut px = vec![0u8; w * h];
    for &(c, r) in on {
        px[r * w + c] = 255;
    }
    bytes.extend(px);
    fs::write(path, bytes).unwrap();
}

fn eval_summary(report: &str) -> Vec<(String, f64)> {
    report
        .lines()
        .skip_while(|l| !l.starts_with("metric"))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_identity_toy_means_and_spacing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), 4, 21);
    let out = ok(&["eval", "--pred", p(&d), "--gt", p(&d)]);
    let s = eval_summary(&out);
    assert_eq!(s[0], ("dice".into(), 1.0));
    assert_eq!(s[1], ("hd_mm".into(), 0.0));
    assert_eq!(s[2], ("cc".into(), 1.0));

    // two toy samples: a 2x2 block vs itself shifted by one column, and an
    // exact match
    let gt = tmp.path().join("gt");
    let pr = tmp.path().join("pr");
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pr).unwrap();
    write_mask(&gt.join("a.mask.pgm"), 6, 6, &[(1, 1), (2, 1), (1, 2), (2, 2)]);
    write_mask(&pr.join("a.mask.pgm"), 6, 6, &[(2, 1), (3, 1), (2, 2), (3, 2)]);
    write_mask(&gt.join("b.mask.pgm"), 6, 6, &[(4, 4)]);
    write_mask(&pr.join("b.mask.pgm"), 6, 6, &[(4, 4)]);
    let report = tmp.path().join("e.tsv");
    ok(&["eval", "--pred", p(&pr), "--gt", p(&gt), "--out", p(&report)]);
    let s = eval_summary(&fs::read_to_string(&report).unwrap());
    // dice: (0.5 + 1) / 2; hd: (1 + 0) / 2
    assert!((s[0].1 - 0.75).abs() < 1e-6);
    assert!((s[1].1 - 0.5).abs() < 1e-6);
    assert!(tmp.path().join("e.tsv.manifest.json").exists());
    let out2 = ok(&["eval", "--pred", p(&pr), "--gt", p(&gt), "--spacing", "2.0"]);
    assert!((eval_summary(&out2)[1].1 - 1.0).abs() < 1e-6);

    // missing prediction is a data error
    fs::remove_file(pr.join("b.mask.pgm")).unwrap();
    assert_eq!(run(&["eval", "--pred", p(&pr), "--gt", p(&gt)]).status.code(), Some(3));
}

#[test]
fn eval_plot_data_and_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    // config supplies defaults, flags override them
    let cfg = tmp.path().join("synth.cfg");
    fs::write(&cfg, "n = 3\nseed = 4\nwidth = 48\n").unwrap();
    let d = tmp.path().join("d");
    ok(&["--config", p(&cfg), "synth", "--out", p(&d), "--width", "40"]);
    let g = read_pgm(&fs::read(d.join("0000.pgm")).unwrap()).unwrap();
    assert_eq!((g.width, g.height), (40, 64));
    assert!(d.join("0002.pgm").exists() && !d.join("0003.pgm").exists());
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "n = many\n").unwrap();
    assert_eq!(run(&["--config", p(&bad), "synth", "--out", p(&d)]).status.code(), Some(2));

    let plot = tmp.path().join("plot");
    let tr = tmp.path().join("r.tsv");
    fs::write(&tr, "epoch\tstage\ttrain_point\tval_point\tval_dice\n1\t1\t2\t3\t0.5\n# stage-boundary after epoch 1\n2\t2\t1\t2\t0.6\n").unwrap();
    ok(&["eval", "--pred", p(&d), "--gt", p(&d), "--plot-data", p(&plot), "--train-report", p(&tr)]);
    assert_eq!(fs::read_to_string(plot.join("metrics_curve.tsv")).unwrap().lines().count(), 4);
    let loss = fs::read_to_string(plot.join("loss_curve.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(plot.join("eval.manifest.json").exists());
}
