use std::path::Path;

use deepssm::alignment::{build_quadruples, DEFAULT_MIN_DICE};
use deepssm::io::{
    read_reg, read_ssm, write_image_pgm, write_lmk, write_manifest, write_mask_pgm, write_pts, write_reg, write_ssm,
    ManifestRow,
};
use deepssm::metrics::{dice, evaluate, hausdorff_mm, EvalReport};
use deepssm::raster::{build_faces, rasterize_hard, Canvas, FaceList};
use deepssm::ssm::{fit_pdm, ShapeModel, DEFAULT_BETA_DIM};
use deepssm::synthgen::{generate, generate_from_model, GenConfig};
use deepssm::train::{
    fit_single, train_regressor, validation_split, AugmentConfig, FitConfig, RegressorModel, TrainConfig, TrainSample,
};
use deepssm::{BinaryMask, Image, PointCloud};

use crate::data::{list_ids, load_dataset, load_image, load_mask, manifest_spacing, MASK_SUFFIX};
use crate::error::{CliError, CliResult, Context};
use crate::run::{manifest_for_file, manifest_in_dir, Run};
use crate::{BuildModelArgs, EvalArgs, FitArgs, PredictArgs, SynthArgs, TrainArgs};

fn load_model(run: &mut Run, path: &Path) -> CliResult<(ShapeModel, FaceList)> {
    let text = run.read_text(path, true)?;
    let model = read_ssm(&text).map_err(|e| CliError::usage(format!("model {}: {e}", path.display())))?;
    let faces = build_faces(model.point_count()).ctx("model")?;
    Ok((model, faces))
}

fn render(pc: &PointCloud, faces: &FaceList, w: usize, h: usize, spacing: f64) -> CliResult<BinaryMask> {
    Ok(rasterize_hard(pc, faces, Canvas::new(w, h, spacing)).ctx("render")?.threshold(0.5))
}

fn write_prediction(run: &mut Run, out: &Path, id: &str, pc: &PointCloud, mask: &BinaryMask) -> CliResult<()> {
    run.write(&out.join(format!("{id}.pts")), write_pts(pc).as_bytes())?;
    run.write(&out.join(format!("{id}{MASK_SUFFIX}")), &write_mask_pgm(mask))
}

pub fn synth(a: &SynthArgs, config: Option<&Path>) -> CliResult<()> {
    let mut run = Run::new("synth", config)?;
    let n: usize = run.required("n", a.n)?;
    if n == 0 {
        return Err(CliError::usage("invalid --n: must be positive"));
    }
    let d = GenConfig::default();
    let mut cfg = GenConfig {
        width: run.setting("width", a.width, d.width)?,
        height: run.setting("height", a.height, d.height)?,
        t: run.setting("t", a.t, d.t)?,
        spacing_mm: run.setting("spacing", a.spacing, d.spacing_mm)?,
        noise_sigma: run.setting("noise-sigma", a.noise_sigma, d.noise_sigma)?,
        seed: run.setting("seed", a.seed, d.seed)?,
        ..d
    };
    run.set_seed(cfg.seed);
    let samples = match &a.from_model {
        None => generate(&cfg, n).ctx("synth")?,
        Some(p) => {
            let (model, faces) = load_model(&mut run, p)?;
            cfg.t = model.point_count();
            generate_from_model(&model, &faces, &cfg, n).ctx("synth")?
        }
    };
    let digits = (n - 1).to_string().len().max(4);
    let mut rows = Vec::with_capacity(n);
    for s in &samples {
        let id = format!("{:0digits$}", s.index);
        run.write(&a.out.join(format!("{id}.pgm")), &write_image_pgm(&s.image))?;
        run.write(&a.out.join(format!("{id}{MASK_SUFFIX}")), &write_mask_pgm(&s.mask))?;
        run.write(&a.out.join(format!("{id}.pts")), write_pts(&s.points).as_bytes())?;
        run.write(&a.out.join(format!("{id}.lmk")), write_lmk(&s.landmarks).as_bytes())?;
        rows.push(ManifestRow {
            id,
            seed: s.seed,
            theta_gt: s.theta_gt,
            beta_gt: s.beta_gt.as_ref().map(|b| b.beta.clone()),
            spacing_mm: cfg.spacing_mm,
        });
    }
    run.write(&a.out.join(crate::data::MANIFEST_NAME), write_manifest(&rows).as_bytes())?;
    println!("wrote {n} samples to {}", a.out.display());
    run.finish(&manifest_in_dir(&a.out, "synth"))
}

pub fn build_model(a: &BuildModelArgs, config: Option<&Path>) -> CliResult<()> {
    let mut run = Run::new("build-model", config)?;
    let t = run.setting("t", a.t, 88)?;
    let beta_dim = run.setting("beta-dim", a.beta_dim, DEFAULT_BETA_DIM)?;
    let min_dice = run.setting("min-dice", a.min_dice, DEFAULT_MIN_DICE)?;
    let (samples, mut excluded) = load_dataset(&mut run, &a.data, None)?;
    let set = build_quadruples(&samples, t, min_dice).ctx("build-model")?;
    excluded.extend(set.excluded);
    let canon: Vec<PointCloud> = set.quadruples.iter().map(|q| q.p_canonical.clone()).collect();
    let model = fit_pdm(&canon, beta_dim).ctx("build-model")?;
    run.write(&a.out, write_ssm(&model).as_bytes())?;
    println!("shapes used: {}", canon.len());
    println!("retained variance: {:.6}", model.retained_variance());
    for e in &excluded {
        println!("excluded {}: {}", e.image_id, e.reason);
    }
    run.finish(&manifest_for_file(&a.out))
}

fn parse_hidden(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(CliError::usage(format!("invalid --hidden: `{t}` is not a positive integer"))),
        })
        .collect()
}

pub fn train(a: &TrainArgs, config: Option<&Path>) -> CliResult<()> {
    let mut run = Run::new("train", config)?;
    let (model, faces) = load_model(&mut run, &a.model)?;
    let d = TrainConfig::default();
    let hidden = run.setting("hidden", a.hidden.clone(), "256,64".to_string())?;
    let cfg = TrainConfig {
        lr: run.setting("lr", a.lr, d.lr)?,
        delta: run.setting("delta", a.delta, d.delta)?,
        tau: run.setting("tau", a.tau, d.tau)?,
        seed: run.setting("seed", a.seed, d.seed)?,
        batch_size: run.setting("batch-size", a.batch_size, d.batch_size)?,
        hidden: parse_hidden(&hidden)?,
        downsample: run.setting("downsample", a.downsample, d.downsample)?,
        val_fraction: run.setting("val-fraction", a.val_fraction, d.val_fraction)?,
        patience: run.setting("patience", a.patience, d.patience)?,
        stage1_max_epochs: run.setting("max-epochs", a.max_epochs, d.stage1_max_epochs)?,
        stage2_epochs: run.setting("stage2-epochs", a.stage2_epochs, d.stage2_epochs)?,
        stage1_only: run.setting("stage1-only", a.stage1_only.then_some(true), false)?,
        augment: if run.setting("no-augment", a.no_augment.then_some(true), false)? {
            AugmentConfig::none()
        } else {
            AugmentConfig::default()
        },
    };
    cfg.validate().ctx("train")?;
    run.set_seed(cfg.seed);
    let min_dice = run.setting("min-dice", a.min_dice, DEFAULT_MIN_DICE)?;
    let (samples, excluded) = load_dataset(&mut run, &a.data, None)?;
    let set = build_quadruples(&samples, model.point_count(), min_dice).ctx("train")?;
    for e in excluded.iter().chain(&set.excluded) {
        println!("excluded {}: {}", e.image_id, e.reason);
    }
    let data: Vec<TrainSample> = set
        .quadruples
        .into_iter()
        .map(|q| TrainSample { image: q.image, points: q.p_image, mask: q.mask })
        .collect();
    let (reg, report) = train_regressor(&data, &model, &faces, &cfg).ctx("train")?;
    let val = validation_split(&data, cfg.val_fraction).ctx("train")?;
    let mut hd = 0.0;
    for s in val {
        let pc = reg.predict_points(&s.image, &model).ctx("train")?;
        let m = render(&pc, &faces, s.mask.width(), s.mask.height(), s.mask.spacing_mm())?;
        hd += hausdorff_mm(&m, &s.mask).ctx("train")?;
    }
    run.write(&a.out, write_reg(&reg).as_bytes())?;
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".report.tsv");
        s.into()
    });
    run.write(&report_path, report.to_tsv().as_bytes())?;
    println!(
        "train {} val {} stage1 best epoch {} epochs {}",
        report.train_count,
        report.val_count,
        report.stage1_best_epoch,
        report.records.len()
    );
    println!(
        "val_point {:.4} val_dice {:.4} val_hd_mm {:.4}",
        report.final_val_point,
        report.final_val_dice,
        hd / val.len() as f64
    );
    run.finish(&manifest_for_file(&a.out))
}

fn spacing_for(flag: Option<f64>, manifest: &std::collections::BTreeMap<String, f64>, id: &str) -> f64 {
    flag.or(manifest.get(id).copied()).unwrap_or(1.0)
}

pub fn fit(a: &FitArgs, config: Option<&Path>) -> CliResult<()> {
    let mut run = Run::new("fit", config)?;
    let (model, faces) = load_model(&mut run, &a.model)?;
    let d = FitConfig::fitting();
    let cfg = FitConfig {
        max_iters: run.setting("iters", a.iters, d.max_iters)?,
        lr: run.setting("lr", a.lr, d.lr)?,
        tau: run.setting("tau", a.tau, d.tau)?,
        ..d
    };
    cfg.validate().ctx("fit")?;
    let spacing = manifest_spacing(&mut run, &a.masks)?;
    let ids = list_ids(&a.masks, MASK_SUFFIX, &[])?;
    if ids.is_empty() {
        return Err(CliError::data(format!("no `*{MASK_SUFFIX}` files in {}", a.masks.display())));
    }
    let mut total = 0.0;
    for id in &ids {
        let sp = spacing_for(a.spacing, &spacing, id);
        let target = load_mask(&mut run, &a.masks.join(format!("{id}{MASK_SUFFIX}")), sp)?;
        let r = fit_single(&model, &faces, &target, None, &cfg).ctx(id)?;
        let mask = render(&r.points, &faces, target.width(), target.height(), sp)?;
        let dsc = dice(&mask, &target).ctx(id)?;
        total += dsc;
        println!("{id}\tdice {dsc:.4}");
        write_prediction(&mut run, &a.out, id, &r.points, &mask)?;
    }
    println!("mean dice {:.4} over {} masks", total / ids.len() as f64, ids.len());
    run.finish(&manifest_in_dir(&a.out, "fit"))
}

/// Foreground estimate of an image by Otsu's threshold on a 256-bin
/// histogram of `[0, 1]` intensities.
pub fn otsu_mask(image: &Image, spacing: f64) -> BinaryMask {
    let mut hist = [0usize; 256];
    for v in image.data() {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let n = image.data().len() as f64;
    let total: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut s0, mut best, mut thr) = (0.0, 0.0, -1.0, 0usize);
    for (i, c) in hist.iter().enumerate() {
        w0 += *c as f64;
        s0 += i as f64 * *c as f64;
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = s0 / w0;
        let m1 = (total - s0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            thr = i;
        }
    }
    BinaryMask::from_fn(image.width(), image.height(), spacing, |c, r| {
        (image.get(c, r).clamp(0.0, 1.0) * 255.0).round() as usize > thr
    })
}

pub fn predict(a: &PredictArgs, config: Option<&Path>) -> CliResult<()> {
    let mut run = Run::new("predict", config)?;
    let (model, faces) = load_model(&mut run, &a.model)?;
    let text = run.read_text(&a.reg, true)?;
    let reg: RegressorModel =
        read_reg(&text).map_err(|e| CliError::usage(format!("regressor {}: {e}", a.reg.display())))?;
    if reg.beta_dim() != model.beta_dim() {
        return Err(CliError::usage(format!(
            "regressor predicts {} modes but the model has {}",
            reg.beta_dim(),
            model.beta_dim()
        )));
    }
    let refine = run.setting("refine-iters", a.refine_iters, 0)?;
    let spacing = manifest_spacing(&mut run, &a.images)?;
    let ids = list_ids(&a.images, ".pgm", &[MASK_SUFFIX])?;
    if ids.is_empty() {
        return Err(CliError::data(format!("no images in {}", a.images.display())));
    }
    for id in &ids {
        let sp = spacing_for(a.spacing, &spacing, id);
        let image = load_image(&mut run, &a.images.join(format!("{id}.pgm")))?;
        let (theta, beta) = reg
            .predict_params(&image)
            .map_err(|e| CliError::data(format!("{id}: image does not match the regressor input: {e}")))?;
        let mut points = deepssm::ssm::synthesize(&model, &theta, &beta).ctx(id)?;
        if refine > 0 {
            let target = otsu_mask(&image, sp);
            if !target.is_empty() {
                let cfg = FitConfig { max_iters: refine, ..FitConfig::fitting() };
                points = fit_single(&model, &faces, &target, Some((theta, beta)), &cfg).ctx(id)?.points;
            }
        }
        let mask = render(&points, &faces, image.width(), image.height(), sp)?;
        write_prediction(&mut run, &a.out, id, &points, &mask)?;
    }
    println!("predicted {} images into {}", ids.len(), a.out.display());
    run.finish(&manifest_in_dir(&a.out, "predict"))
}

pub fn eval(a: &EvalArgs, config: Option<&Path>) -> CliResult<()> {
    let mut run = Run::new("eval", config)?;
    let spacing = manifest_spacing(&mut run, &a.gt)?;
    let flag = run.optional("spacing", a.spacing)?;
    let ids = list_ids(&a.gt, MASK_SUFFIX, &[])?;
    if ids.is_empty() {
        return Err(CliError::data(format!("no `*{MASK_SUFFIX}` files in {}", a.gt.display())));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in &ids {
        let sp = spacing_for(flag, &spacing, id);
        if !(sp.is_finite() && sp > 0.0) {
            return Err(CliError::usage("invalid --spacing: must be positive"));
        }
        let g = load_mask(&mut run, &a.gt.join(format!("{id}{MASK_SUFFIX}")), sp)?;
        let p = load_mask(&mut run, &a.pred.join(format!("{id}{MASK_SUFFIX}")), sp)?;
        let r = evaluate(&[p], &[g], sp).ctx(id)?;
        samples.push(r.samples[0]);
    }
    let report = EvalReport::from_samples(samples);
    let tsv = report.to_tsv(&ids);
    let mut wrote = false;
    match &a.out {
        Some(p) => {
            run.write(p, tsv.as_bytes())?;
            wrote = true;
        }
        None => print!("{tsv}"),
    }
    eprintln!(
        "dice {:.4} ± {:.4}  hd_mm {:.4} ± {:.4}  cc {:.4}",
        report.dice.mean, report.dice.sd, report.hd_mm.mean, report.hd_mm.sd, report.cc.mean
    );
    if let Some(dir) = &a.plot_data {
        let mut s = String::from("index\tid\tdice\thd_mm\tcc\n");
        for (i, (id, m)) in ids.iter().zip(&report.samples).enumerate() {
            s += &format!("{i}\t{id}\t{:.6}\t{:.6}\t{}\n", m.dice, m.hd_mm, m.cc);
        }
        run.write(&dir.join("metrics_curve.tsv"), s.as_bytes())?;
        if let Some(tr) = &a.train_report {
            let text = run.read_text(tr, true)?;
            let curve: String = text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .map(|l| format!("{l}\n"))
                .collect();
            run.write(&dir.join("loss_curve.tsv"), curve.as_bytes())?;
        }
        wrote = true;
    }
    if wrote {
        let path = match (&a.out, &a.plot_data) {
            (Some(p), _) => manifest_for_file(p),
            (None, Some(d)) => manifest_in_dir(d, "eval"),
            (None, None) => unreachable!(),
        };
        run.finish(&path)?;
    }
    Ok(())
}
