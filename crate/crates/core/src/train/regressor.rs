//! Feed-forward parameter regressor: downsampled image → `(θ, β)`, trained
//! with the two-stage schedule (point loss to a validation plateau, then
//! point + δ·mask loss).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{estimate_similarity, similarity_to_affine, AffineParams, PointCloud, SimilarityParams};
use crate::losses::{point_loss, total_loss, RasterConfig};
use crate::mask::{BinaryMask, Image};
use crate::metrics::dice;
use crate::raster::{rasterize_hard, Canvas, FaceList};
use crate::ssm::{synthesize, synthesize_backward, DeformParams, ShapeModel};
use crate::train::adam::Adam;
use crate::train::augment::{AugmentConfig, Augmentation};

/// How an image becomes the network input: average-pooled by `factor`, then
/// `(v - offset) * gain`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputSpec {
    pub width: usize,
    pub height: usize,
    pub factor: usize,
    pub offset: f64,
    pub gain: f64,
}

impl InputSpec {
    pub fn len(&self) -> usize {
        (self.width / self.factor) * (self.height / self.factor)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::DimensionMismatch {
                expected: self.width * self.height,
                got: image.width() * image.height(),
            });
        }
        Ok(image
            .downsample(self.factor)
            .data()
            .iter()
            .map(|v| (v - self.offset) * self.gain)
            .collect())
    }
}

/// Multilayer perceptron with ReLU hidden layers and a linear head whose
/// output `z` maps to parameters as `out_offset + out_scale ⊙ z`: six affine
/// entries followed by `β^d` deformation coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    pub input: InputSpec,
    sizes: Vec<usize>,
    params: Vec<f64>,
    out_offset: Vec<f64>,
    out_scale: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Cache {
    /// `acts[0]` is the input; `acts[l]` the post-ReLU output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl RegressorModel {
    /// He-initialised hidden layers; the head starts at zero so every image
    /// initially maps to `out_offset`.
    pub fn new(
        input: InputSpec,
        hidden: &[usize],
        out_offset: Vec<f64>,
        out_scale: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if input.factor == 0 || input.is_empty() {
            return Err(Error::param("downsample", "input has no pixels"));
        }
        Error::check_len(out_offset.len(), out_scale.len())?;
        if out_offset.len() < 6 {
            return Err(Error::param("output", "needs at least the six affine entries"));
        }
        if hidden.contains(&0) {
            return Err(Error::param("hidden", "layer sizes must be positive"));
        }
        let mut sizes = vec![input.len()];
        sizes.extend_from_slice(hidden);
        sizes.push(out_offset.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(&sizes));
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if l == last {
                params.extend(std::iter::repeat_n(0.0, fan_in * fan_out + fan_out));
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sigma");
                params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
                params.extend(std::iter::repeat_n(0.0, fan_out));
            }
        }
        Ok(Self {
            input,
            sizes,
            params,
            out_offset,
            out_scale,
        })
    }

    pub fn from_parts(
        input: InputSpec,
        sizes: Vec<usize>,
        params: Vec<f64>,
        out_offset: Vec<f64>,
        out_scale: Vec<f64>,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param("layers", "need at least input and output sizes, all positive"));
        }
        Error::check_len(input.len(), sizes[0])?;
        Error::check_len(param_count(&sizes), params.len())?;
        let out = *sizes.last().unwrap();
        Error::check_len(out, out_offset.len())?;
        Error::check_len(out, out_scale.len())?;
        if out < 6 {
            return Err(Error::param("layers", "output must hold the six affine entries"));
        }
        if params.iter().chain(&out_offset).chain(&out_scale).any(|v| !v.is_finite()) {
            return Err(Error::param("weights", "non-finite value"));
        }
        Ok(Self {
            input,
            sizes,
            params,
            out_offset,
            out_scale,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn out_offset(&self) -> &[f64] {
        &self.out_offset
    }

    pub fn out_scale(&self) -> &[f64] {
        &self.out_scale
    }

    pub fn beta_dim(&self) -> usize {
        self.out_offset.len() - 6
    }

    /// `(weights, biases)` of layer `l`; weights are `out x in` row-major.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = layer_offset(&self.sizes, l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (&self.params[off..off + i * o], &self.params[off + i * o..off + i * o + o])
    }

    fn forward_cached(&self, x: Vec<f64>) -> (Vec<f64>, Cache) {
        let nl = self.sizes.len() - 1;
        let mut acts = vec![x];
        for l in 0..nl {
            let (w, b) = self.layer(l);
            let inp = &acts[l];
            let n_in = inp.len();
            let mut out: Vec<f64> = b.to_vec();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
                *o += row.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < nl {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        let z = acts.pop().unwrap();
        (z, Cache { acts })
    }

    /// Adds `∂L/∂params` for one sample to `grad` given `∂L/∂z`.
    fn backward(&self, cache: &Cache, grad_z: &[f64], grad: &mut [f64]) {
        let nl = self.sizes.len() - 1;
        let mut delta = grad_z.to_vec();
        for l in (0..nl).rev() {
            let off = layer_offset(&self.sizes, l);
            let inp = &cache.acts[l];
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (g, x) in row.iter_mut().zip(inp) {
                        *g += d * x;
                    }
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *p += d * wv;
                        }
                    }
                }
                // ReLU derivative: post-activation is zero where inactive
                for (p, a) in prev.iter_mut().zip(inp) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    fn decode(&self, z: &[f64]) -> (AffineParams, DeformParams) {
        let v: Vec<f64> = z
            .iter()
            .zip(&self.out_offset)
            .zip(&self.out_scale)
            .map(|((z, o), s)| o + s * z)
            .collect();
        let mut th = [0.0; 6];
        th.copy_from_slice(&v[..6]);
        (AffineParams::new(th), DeformParams::new(v[6..].to_vec()))
    }

    /// Predicted `(θ, β)`; `β` is unclamped (synthesis clamps it).
    pub fn predict_params(&self, image: &Image) -> Result<(AffineParams, DeformParams)> {
        let (z, _) = self.forward_cached(self.input.features(image)?);
        Ok(self.decode(&z))
    }

    pub fn predict_points(&self, image: &Image, model: &ShapeModel) -> Result<PointCloud> {
        Error::check_len(model.beta_dim(), self.beta_dim())?;
        let (theta, beta) = self.predict_params(image)?;
        synthesize(model, &theta, &beta)
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn layer_offset(sizes: &[usize], l: usize) -> usize {
    param_count(&sizes[..=l])
}

/// Training example: image with its ground-truth cloud and mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Image,
    pub points: PointCloud,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub delta: f64,
    pub tau: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub downsample: usize,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,
    /// Stage 1 ends after this many epochs without a new best validation
    /// point loss.
    pub patience: usize,
    pub stage1_max_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_only: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            delta: crate::losses::DEFAULT_DELTA,
            tau: 0.5,
            seed: 0,
            batch_size: 32,
            hidden: vec![256, 64],
            downsample: 2,
            val_fraction: 0.2,
            patience: 10,
            stage1_max_epochs: 200,
            stage2_epochs: 40,
            stage1_only: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::param("delta", "must be finite and >= 0"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if self.downsample == 0 {
            return Err(Error::param("downsample", "must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::param("val_fraction", "must lie in (0, 1)"));
        }
        if self.stage1_max_epochs == 0 {
            return Err(Error::param("stage1_max_epochs", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub train_point: f64,
    pub train_mask: f64,
    pub val_point: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) of the selected stage-1 weights.
    pub stage1_best_epoch: usize,
    /// Validation metrics of the returned model.
    pub final_val_point: f64,
    pub final_val_dice: f64,
    pub train_count: usize,
    pub val_count: usize,
}

impl TrainReport {
    /// `epoch stage train_point val_point val_dice` records with a marker line
    /// where stage 2 begins.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tstage\ttrain_point\tval_point\tval_dice\n");
        let mut last_stage = 1;
        for r in &self.records {
            if r.stage != last_stage {
                s.push_str(&format!("# stage-boundary after epoch {}\n", r.epoch - 1));
                last_stage = r.stage;
            }
            s.push_str(&format!(
                "{}\t{}\t{:.16e}\t{:.16e}\t{:.16e}\n",
                r.epoch, r.stage, r.train_point, r.val_point, r.val_dice
            ));
        }
        s
    }
}

/// Validation metrics of a regressor on held-out samples.
pub fn validate_regressor(
    reg: &RegressorModel,
    model: &ShapeModel,
    faces: &FaceList,
    samples: &[TrainSample],
) -> Result<(f64, f64)> {
    let per: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let pc = reg.predict_points(&s.image, model)?;
            let pl = point_loss(&pc, &s.points)?.value;
            let canvas = Canvas::new(s.mask.width(), s.mask.height(), s.mask.spacing_mm());
            let d = dice(&rasterize_hard(&pc, faces, canvas)?.threshold(0.5), &s.mask)?;
            Ok((pl, d))
        })
        .collect();
    let mut sp = 0.0;
    let mut sd = 0.0;
    for r in per {
        let (p, d) = r?;
        sp += p;
        sd += d;
    }
    let n = samples.len().max(1) as f64;
    Ok((sp / n, sd / n))
}

/// Loss and parameter gradient of one (augmented) sample.
fn sample_gradient(
    reg: &RegressorModel,
    model: &ShapeModel,
    faces: &FaceList,
    s: &TrainSample,
    aug: &Augmentation,
    delta: f64,
    tau: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let (w, h) = (s.image.width(), s.image.height());
    let image = aug.apply_image(&s.image);
    let gt_points = aug.apply_points(&s.points, w, h);
    let gt_mask = if delta > 0.0 { aug.apply_mask(&s.mask) } else { s.mask.clone() };
    let (z, cache) = reg.forward_cached(reg.input.features(&image)?);
    let (theta, beta) = reg.decode(&z);
    let pred = synthesize(model, &theta, &beta)?;
    let raster = RasterConfig {
        canvas: Canvas::new(w, h, s.mask.spacing_mm()),
        tau,
    };
    let loss = total_loss(&pred, &gt_points, &gt_mask, faces, &raster, delta)?;
    let pg = synthesize_backward(model, &theta, &beta, &loss.grad_points)?;
    let grad_z: Vec<f64> = pg
        .theta
        .iter()
        .chain(&pg.beta)
        .zip(&reg.out_scale)
        .map(|(g, s)| g * s)
        .collect();
    let mut grad = vec![0.0; reg.params.len()];
    reg.backward(&cache, &grad_z, &mut grad);
    if !loss.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite loss or gradient in training".into()));
    }
    Ok((loss.point, loss.mask, grad))
}

/// Mean placement of the ground-truth clouds, as an unrotated similarity of
/// the model mean: the head's initial prediction.
fn mean_placement(model: &ShapeModel, samples: &[TrainSample]) -> Result<SimilarityParams> {
    let mut scale = 0.0;
    let mut tx = 0.0;
    let mut ty = 0.0;
    for s in samples {
        let sim = estimate_similarity(model.mean().points(), s.points.points())?;
        scale += sim.scale;
        tx += sim.translation.x;
        ty += sim.translation.y;
    }
    let n = samples.len() as f64;
    Ok(SimilarityParams {
        scale: scale / n,
        rotation: 0.0,
        translation: crate::geometry::Point2::new(tx / n, ty / n),
    })
}

/// Untrained regressor whose prediction is the model mean at the dataset's
/// mean placement for every image.
pub fn init_regressor(
    model: &ShapeModel,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<RegressorModel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InsufficientData("empty dataset".into()))?;
    let place = mean_placement(model, samples)?;
    let theta0 = similarity_to_affine(&place);
    let mut offset = theta0.theta.to_vec();
    offset.extend(std::iter::repeat_n(0.0, model.beta_dim()));
    let mut scale = vec![place.scale; 6];
    scale.extend(model.eigenvalues().iter().map(|l| l.max(0.0).sqrt()));
    let input = InputSpec {
        width: first.image.width(),
        height: first.image.height(),
        factor: cfg.downsample,
        offset: 0.5,
        gain: 4.0,
    };
    RegressorModel::new(input, &cfg.hidden, offset, scale, cfg.seed)
}

struct Split<'a> {
    train: &'a [TrainSample],
    val: &'a [TrainSample],
}

fn split(dataset: &[TrainSample], frac: f64) -> Result<Split<'_>> {
    let n = dataset.len();
    let nv = ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} samples; need at least 2")));
    }
    Ok(Split {
        train: &dataset[..n - nv],
        val: &dataset[n - nv..],
    })
}

/// One epoch of mini-batch Adam; returns mean train point and mask loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    reg: &mut RegressorModel,
    adam: &mut Adam,
    model: &ShapeModel,
    faces: &FaceList,
    train: &[TrainSample],
    cfg: &TrainConfig,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let (mut sp, mut sm) = (0.0, 0.0);
    for batch in order.chunks(cfg.batch_size) {
        let augs: Vec<Augmentation> = batch
            .iter()
            .map(|&i| Augmentation::draw(&cfg.augment, train[i].image.width(), train[i].image.height(), rng))
            .collect();
        let reg_ref = &*reg;
        let results: Vec<Result<(f64, f64, Vec<f64>)>> = batch
            .par_iter()
            .zip(augs.par_iter())
            .map(|(&i, aug)| sample_gradient(reg_ref, model, faces, &train[i], aug, delta, cfg.tau))
            .collect();
        let mut grad = vec![0.0; reg.params.len()];
        for r in results {
            let (p, m, g) = r?;
            sp += p;
            sm += m;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        adam.step(&mut reg.params, &grad);
    }
    let n = train.len() as f64;
    Ok((sp / n, sm / n))
}

/// Two-stage training. Stage 1 minimises the point loss until the
/// validation point loss has not improved for `patience` epochs and keeps
/// the best weights. Stage 2 (skipped when `stage1_only` or `delta == 0`)
/// fine-tunes on `L_point + δ L_mask` for `stage2_epochs` and keeps the
/// weights with the best validation objective. The last `val_fraction` of
/// the dataset is the validation split.
pub fn train_regressor(
    dataset: &[TrainSample],
    model: &ShapeModel,
    faces: &FaceList,
    cfg: &TrainConfig,
) -> Result<(RegressorModel, TrainReport)> {
    cfg.validate()?;
    faces.check_cloud(model.mean())?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::InsufficientData("empty dataset".into()))?;
    for s in dataset {
        if s.image.width() != first.image.width() || s.image.height() != first.image.height() {
            return Err(Error::param("dataset", "images differ in size"));
        }
        if s.mask.width() != s.image.width() || s.mask.height() != s.image.height() {
            return Err(Error::param("dataset", "mask and image differ in size"));
        }
        Error::check_len(model.point_count(), s.points.len())?;
    }
    let sp = split(dataset, cfg.val_fraction)?;
    let mut reg = init_regressor(model, sp.train, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut adam = Adam::new(reg.params.len(), cfg.lr);
    let mut records = Vec::new();

    // stage 1
    let mut best = (f64::INFINITY, reg.params.clone(), 0usize, 0.0);
    let mut since = 0;
    for epoch in 1..=cfg.stage1_max_epochs {
        let (tp, tm) = run_epoch(&mut reg, &mut adam, model, faces, sp.train, cfg, 0.0, &mut rng)?;
        let (vp, vd) = validate_regressor(&reg, model, faces, sp.val)?;
        records.push(EpochRecord { epoch, stage: 1, train_point: tp, train_mask: tm, val_point: vp, val_dice: vd });
        if vp < best.0 {
            best = (vp, reg.params.clone(), epoch, vd);
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    reg.params = best.1;
    let stage1_best_epoch = best.2;
    let (mut final_vp, mut final_vd) = (best.0, best.3);

    // stage 2
    if !cfg.stage1_only && cfg.delta > 0.0 {
        let val_objective = |reg: &RegressorModel| -> Result<(f64, f64, f64)> {
            let per: Vec<Result<(f64, f64, f64)>> = sp
                .val
                .par_iter()
                .map(|s| {
                    let (theta, beta) = reg.predict_params(&s.image)?;
                    let pc = synthesize(model, &theta, &beta)?;
                    let raster = RasterConfig {
                        canvas: Canvas::new(s.mask.width(), s.mask.height(), s.mask.spacing_mm()),
                        tau: cfg.tau,
                    };
                    let l = total_loss(&pc, &s.points, &s.mask, faces, &raster, cfg.delta)?;
                    let d = dice(&rasterize_hard(&pc, faces, raster.canvas)?.threshold(0.5), &s.mask)?;
                    Ok((l.value, l.point, d))
                })
                .collect();
            let mut acc = (0.0, 0.0, 0.0);
            for r in per {
                let (a, b, c) = r?;
                acc = (acc.0 + a, acc.1 + b, acc.2 + c);
            }
            let n = sp.val.len() as f64;
            Ok((acc.0 / n, acc.1 / n, acc.2 / n))
        };
        let start = records.len();
        let (v0, _, _) = val_objective(&reg)?;
        let mut best2 = (v0, reg.params.clone(), final_vp, final_vd);
        for k in 1..=cfg.stage2_epochs {
            let (tp, tm) = run_epoch(&mut reg, &mut adam, model, faces, sp.train, cfg, cfg.delta, &mut rng)?;
            let (vo, vp, vd) = val_objective(&reg)?;
            records.push(EpochRecord { epoch: start + k, stage: 2, train_point: tp, train_mask: tm, val_point: vp, val_dice: vd });
            if vo < best2.0 {
                best2 = (vo, reg.params.clone(), vp, vd);
            }
        }
        reg.params = best2.1;
        final_vp = best2.2;
        final_vd = best2.3;
    }

    let report = TrainReport {
        records,
        stage1_best_epoch,
        final_val_point: final_vp,
        final_val_dice: final_vd,
        train_count: sp.train.len(),
        val_count: sp.val.len(),
    };
    Ok((reg, report))
}

/// Splits a dataset the way [`train_regressor`] does and returns the
/// validation part.
pub fn validation_split(dataset: &[TrainSample], val_fraction: f64) -> Result<&[TrainSample]> {
    Ok(split(dataset, val_fraction)?.val)
}

/// Random draw helper for tests and tools: `n` distinct indices.
pub fn sample_indices(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{build_quadruples, RawSample, DEFAULT_MIN_DICE};
    use crate::raster::build_faces;
    use crate::ssm::fit_pdm;
    use crate::synthgen::{generate, GenConfig};

    fn setup(n: usize) -> (ShapeModel, FaceList, Vec<TrainSample>) {
        let raw: Vec<RawSample> = generate(&GenConfig { seed: 77, ..Default::default() }, n)
            .unwrap()
            .into_iter()
            .map(|s| RawSample { id: s.index.to_string(), image: s.image, mask: s.mask, landmarks: s.landmarks })
            .collect();
        let set = build_quadruples(&raw, 88, DEFAULT_MIN_DICE).unwrap();
        let canon: Vec<PointCloud> = set.quadruples.iter().map(|q| q.p_canonical.clone()).collect();
        let model = fit_pdm(&canon, 8.min(canon.len() - 1)).unwrap();
        let data = set
            .quadruples
            .into_iter()
            .map(|q| TrainSample { image: q.image, points: q.p_image, mask: q.mask })
            .collect();
        (model, build_faces(88).unwrap(), data)
    }

    #[test]
    fn untrained_regressor_predicts_mean_placement() {
        let (model, _, data) = setup(12);
        let cfg = TrainConfig::default();
        let reg = init_regressor(&model, &data, &cfg).unwrap();
        let p0 = reg.predict_points(&data[0].image, &model).unwrap();
        let p1 = reg.predict_points(&data[5].image, &model).unwrap();
        assert_eq!(p0, p1);
        let (theta, beta) = reg.predict_params(&data[3].image).unwrap();
        assert!(beta.beta.iter().all(|b| *b == 0.0));
        assert!(theta.theta[1].abs() < 1e-12 && theta.theta[3].abs() < 1e-12);
        assert!((theta.theta[0] - theta.theta[4]).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (model, faces, data) = setup(12);
        let cfg = TrainConfig { hidden: vec![16, 8], downsample: 4, ..Default::default() };
        let mut reg = init_regressor(&model, &data, &cfg).unwrap();
        // give the head non-zero weights so every layer receives gradient
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = layer_offset(reg.sizes(), reg.sizes().len() - 2);
        for p in reg.params_mut()[head..].iter_mut() {
            *p = rng.random_range(-0.05..0.05);
        }
        let aug = Augmentation::identity();
        let s = &data[0];
        let (_, _, g) = sample_gradient(&reg, &model, &faces, s, &aug, 0.5, 0.5).unwrap();
        let loss = |reg: &RegressorModel| {
            let (z, _) = reg.forward_cached(reg.input.features(&s.image).unwrap());
            let (theta, beta) = reg.decode(&z);
            let pred = synthesize(&model, &theta, &beta).unwrap();
            let raster = RasterConfig { canvas: Canvas::new(64, 64, 1.0), tau: 0.5 };
            total_loss(&pred, &s.points, &s.mask, &faces, &raster, 0.5).unwrap().value
        };
        let picks = sample_indices(reg.params().len(), 400, &mut rng);
        let mut checked = 0;
        let mut bad = 0;
        for &k in &picks {
            if g[k].abs() < 1e-6 {
                continue;
            }
            let h = 1e-4;
            let mut r2 = reg.clone();
            r2.params_mut()[k] += h;
            let up = loss(&r2);
            r2.params_mut()[k] -= 2.0 * h;
            let down = loss(&r2);
            let fd = (up - down) / (2.0 * h);
            if (fd - g[k]).abs() > 1e-2 * g[k].abs().max(fd.abs()) {
                bad += 1;
            }
            checked += 1;
            if checked == 20 {
                break;
            }
        }
        assert_eq!(checked, 20);
        assert_eq!(bad, 0);
    }

    #[test]
    fn short_training_is_deterministic_and_reports_stages() {
        let (model, faces, data) = setup(20);
        let cfg = TrainConfig {
            hidden: vec![16],
            downsample: 4,
            stage1_max_epochs: 3,
            stage2_epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let (r1, rep1) = train_regressor(&data, &model, &faces, &cfg).unwrap();
        let (r2, rep2) = train_regressor(&data, &model, &faces, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(rep1.to_tsv(), rep2.to_tsv());
        assert!(rep1.to_tsv().contains("# stage-boundary"));
        assert_eq!(rep1.records.iter().filter(|r| r.stage == 2).count(), 2);
    }

    #[test]
    fn inconsistent_sizes_rejected() {
        let (model, faces, mut data) = setup(6);
        data[1].image = Image::zeros(32, 32);
        assert!(train_regressor(&data, &model, &faces, &TrainConfig::default()).is_err());
    }
}
