//! Per-image fitting of `(θ, β)` through the differentiable pipeline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{estimate_similarity, similarity_to_affine, AffineParams, Point2, PointCloud, SimilarityParams};
use crate::losses::{point_loss, rendered_mask_loss, RasterConfig};
use crate::mask::BinaryMask;
use crate::metrics::dice;
use crate::raster::{rasterize_hard, Canvas, FaceList};
use crate::ssm::{clamp_beta, synthesize, synthesize_backward, synthesize_jacobian, DeformParams, ShapeModel};
use crate::train::adam::Adam;

/// Optimiser settings shared by the fitting routines.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub delta: f64,
    /// Soft-rasterizer temperature in pixels.
    pub tau: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Weight of `‖θ - θ_init‖²` in mask-only fitting.
    pub theta_reg: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            delta: crate::losses::DEFAULT_DELTA,
            tau: 0.5,
            max_iters: 300,
            seed: 0,
            batch_size: 32,
            theta_reg: 1e-6,
        }
    }
}

impl FitConfig {
    /// Settings for single-image fitting, where parameters are normalised
    /// (θ in units of the initial scale, β in standard deviations) and a
    /// larger step is appropriate.
    pub fn fitting() -> Self {
        Self {
            lr: 0.03,
            tau: 0.3,
            max_iters: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be positive"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::param("delta", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.theta_reg.is_finite() && self.theta_reg >= 0.0) {
            return Err(Error::param("theta_reg", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub point: f64,
    pub mask: f64,
    pub total: f64,
    /// Rasterizer temperature of the mask term; 0 when there is none.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: AffineParams,
    /// Inside the clamp box.
    pub beta: DeformParams,
    /// `synthesize(model, theta, beta)`.
    pub points: PointCloud,
    pub loss_trace: Vec<TraceEntry>,
}

/// Area, centroid and central second moments of a region.
#[derive(Debug, Clone, Copy)]
struct Moments {
    area: f64,
    centroid: Point2,
    cov: [f64; 3],
}

impl Moments {
    fn principal_angle(&self) -> f64 {
        let [xx, xy, yy] = self.cov;
        0.5 * (2.0 * xy).atan2(xx - yy)
    }
}

fn mask_moments(mask: &BinaryMask) -> Moments {
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(c, r) {
                n += 1.0;
                sx += c as f64 + 0.5;
                sy += r as f64 + 0.5;
            }
        }
    }
    let centroid = Point2::new(sx / n, sy / n);
    let mut cov = [0.0; 3];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(c, r) {
                let d = Point2::new(c as f64 + 0.5, r as f64 + 0.5) - centroid;
                cov[0] += d.x * d.x;
                cov[1] += d.x * d.y;
                cov[2] += d.y * d.y;
            }
        }
    }
    Moments {
        area: n,
        centroid,
        cov: cov.map(|v| v / n),
    }
}

/// Exact moments of the union of the strip triangles.
fn cloud_moments(pc: &PointCloud, faces: &FaceList) -> Moments {
    let p = pc.points();
    let (mut area, mut sx, mut sy) = (0.0, 0.0, 0.0);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for f in faces.faces() {
        let (a, b, c) = (p[f[0]], p[f[1]], p[f[2]]);
        let ar = 0.5 * (b - a).cross(c - a).abs();
        area += ar;
        sx += ar * (a.x + b.x + c.x) / 3.0;
        sy += ar * (a.y + b.y + c.y) / 3.0;
        sxx += ar / 6.0 * (a.x * a.x + b.x * b.x + c.x * c.x + a.x * b.x + a.x * c.x + b.x * c.x);
        syy += ar / 6.0 * (a.y * a.y + b.y * b.y + c.y * c.y + a.y * b.y + a.y * c.y + b.y * c.y);
        sxy += ar / 12.0
            * (2.0 * (a.x * a.y + b.x * b.y + c.x * c.y) + a.x * b.y + b.x * a.y + a.x * c.y + c.x * a.y + b.x * c.y + c.x * b.y);
    }
    let centroid = Point2::new(sx / area, sy / area);
    Moments {
        area,
        centroid,
        cov: [
            sxx / area - centroid.x * centroid.x,
            sxy / area - centroid.x * centroid.y,
            syy / area - centroid.y * centroid.y,
        ],
    }
}

fn hard_dice(pc: &PointCloud, faces: &FaceList, target: &BinaryMask) -> Result<f64> {
    let canvas = Canvas::new(target.width(), target.height(), target.spacing_mm());
    dice(&rasterize_hard(pc, faces, canvas)?.threshold(0.5), target)
}

/// Similarity placing the model mean on the mask: centroids matched, scale
/// from the area ratio, rotation from the principal axes. The axis sign and
/// the unrotated pose are tried and the best hard Dice wins.
pub fn initial_placement(model: &ShapeModel, faces: &FaceList, target: &BinaryMask) -> Result<AffineParams> {
    if target.is_empty() {
        return Err(Error::param("target_mask", "mask is empty"));
    }
    let mm = cloud_moments(model.mean(), faces);
    if !(mm.area > 0.0) {
        return Err(Error::DegenerateConfiguration("model mean has zero area".into()));
    }
    let tm = mask_moments(target);
    let scale = (tm.area / mm.area).sqrt();
    let phi = tm.principal_angle() - mm.principal_angle();
    let mut best: Option<(f64, AffineParams)> = None;
    let half_pi = std::f64::consts::FRAC_PI_2;
    for rotation in [0.0, phi, phi + std::f64::consts::PI, phi + half_pi, phi - half_pi] {
        let (s, c) = rotation.sin_cos();
        let rc = Point2::new(c * mm.centroid.x - s * mm.centroid.y, s * mm.centroid.x + c * mm.centroid.y);
        let sim = SimilarityParams {
            scale,
            rotation,
            translation: tm.centroid - rc * scale,
        };
        let theta = similarity_to_affine(&sim);
        let pc = crate::geometry::apply_affine(&theta, model.mean())?;
        let d = hard_dice(&pc, faces, target)?;
        if best.as_ref().is_none_or(|(bd, _)| d > *bd) {
            best = Some((d, theta));
        }
    }
    Ok(best.expect("candidates are non-empty").1)
}

/// Parameter vector used by the optimiser: θ divided by the initial scale,
/// β divided by `√λ`.
struct Encoding {
    scale: f64,
    sigma: Vec<f64>,
}

impl Encoding {
    fn encode(&self, theta: &AffineParams, beta: &DeformParams) -> Vec<f64> {
        let mut x: Vec<f64> = theta.theta.iter().map(|t| t / self.scale).collect();
        x.extend(beta.beta.iter().zip(&self.sigma).map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 }));
        x
    }

    fn decode(&self, x: &[f64]) -> (AffineParams, DeformParams) {
        let mut th = [0.0; 6];
        for (t, v) in th.iter_mut().zip(x) {
            *t = v * self.scale;
        }
        let beta = x[6..].iter().zip(&self.sigma).map(|(v, s)| v * s).collect();
        (AffineParams::new(th), DeformParams::new(beta))
    }

    fn project(&self, x: &mut [f64]) {
        for (v, s) in x[6..].iter_mut().zip(&self.sigma) {
            *v = if *s > 0.0 { v.clamp(-crate::ssm::CLAMP_SIGMAS, crate::ssm::CLAMP_SIGMAS) } else { 0.0 };
        }
    }
}

struct Eval {
    mask: f64,
    total: f64,
    grad: Vec<f64>,
    points: PointCloud,
}

/// Temperatures visited by [`fit_single`]: `tau`, halved down to
/// [`MIN_FIT_TAU`].
fn tau_schedule(tau: f64) -> Vec<f64> {
    let mut v = vec![tau];
    while v.len() < 4 && v[v.len() - 1] * 0.5 >= MIN_FIT_TAU {
        v.push(v[v.len() - 1] * 0.5);
    }
    v
}

/// Smallest temperature used by the coarse-to-fine schedule of
/// [`fit_single`].
pub const MIN_FIT_TAU: f64 = 0.05;

/// Mask-only fit of `(θ, β)` to a binary mask by Adam on the soft-Dice loss
/// plus `theta_reg · ‖θ - θ_init‖²`. A step that increases the loss is
/// rejected and the step size halved, so the trace is non-increasing at each
/// temperature. The temperature starts at `cfg.tau` and is halved up to three
/// times while staying at or above [`MIN_FIT_TAU`], splitting the iteration budget evenly. The
/// returned parameters are the accepted iterate with the best hard Dice.
pub fn fit_single(
    model: &ShapeModel,
    faces: &FaceList,
    target: &BinaryMask,
    init: Option<(AffineParams, DeformParams)>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    faces.check_cloud(model.mean())?;
    if target.is_empty() {
        return Err(Error::param("target_mask", "mask is empty"));
    }
    let (theta0, beta0) = match init {
        Some((t, b)) => (t, clamp_beta(model, &b)?),
        None => (initial_placement(model, faces, target)?, DeformParams::zeros(model.beta_dim())),
    };
    let enc = Encoding {
        scale: theta0.det().abs().sqrt().max(1e-6),
        sigma: model.eigenvalues().iter().map(|l| l.max(0.0).sqrt()).collect(),
    };
    let canvas = Canvas::new(target.width(), target.height(), target.spacing_mm());
    let eval = |x: &[f64], tau: f64| -> Result<Eval> {
        let raster = RasterConfig { canvas, tau };
        let (theta, beta) = enc.decode(x);
        let points = synthesize(model, &theta, &beta)?;
        let ml = rendered_mask_loss(&points, target, faces, &raster)?;
        let pg = synthesize_backward(model, &theta, &beta, &ml.grad_points)?;
        let mut reg = 0.0;
        let mut grad = Vec::with_capacity(x.len());
        for k in 0..6 {
            let d = theta.theta[k] - theta0.theta[k];
            reg += cfg.theta_reg * d * d;
            grad.push((pg.theta[k] + 2.0 * cfg.theta_reg * d) * enc.scale);
        }
        grad.extend(pg.beta.iter().zip(&enc.sigma).map(|(g, s)| g * s));
        if !ml.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite loss or gradient during fitting".into()));
        }
        Ok(Eval {
            mask: ml.value,
            total: ml.value + reg,
            grad,
            points,
        })
    };

    let mut x = enc.encode(&theta0, &beta0);
    enc.project(&mut x);
    let taus = tau_schedule(cfg.tau);
    let mut cur = eval(&x, taus[0])?;
    let mut trace = vec![TraceEntry { iteration: 0, point: 0.0, mask: cur.mask, total: cur.total, tau: taus[0] }];
    let mut best = (hard_dice(&cur.points, faces, target)?, x.clone());
    let mut it = 0;
    for (k, &tau) in taus.iter().enumerate() {
        if k > 0 {
            cur = eval(&x, tau)?;
        }
        let budget = (k + 1) * cfg.max_iters / taus.len();
        let mut adam = Adam::new(x.len(), cfg.lr);
        while it < budget {
            it += 1;
            let mut cand = x.clone();
            adam.step(&mut cand, &cur.grad);
            enc.project(&mut cand);
            let next = eval(&cand, tau)?;
            if next.total <= cur.total {
                x = cand;
                cur = next;
                adam.lr = (adam.lr * 1.1).min(cfg.lr);
                let d = hard_dice(&cur.points, faces, target)?;
                if d >= best.0 {
                    best = (d, x.clone());
                }
            } else {
                adam.lr *= 0.5;
            }
            trace.push(TraceEntry { iteration: it, point: 0.0, mask: cur.mask, total: cur.total, tau });
            if adam.lr < cfg.lr * 1e-4 {
                break;
            }
        }
    }
    let (theta, beta) = enc.decode(&best.1);
    let points = synthesize(model, &theta, &beta)?;
    Ok(FitResult { theta, beta, points, loss_trace: trace })
}

/// Least-squares fit of `(θ, β)` to target points by damped Gauss-Newton on
/// the analytic Jacobian of [`synthesize`]; `β` is projected into the clamp
/// box after every step.
pub fn fit_to_points(model: &ShapeModel, target: &PointCloud, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    Error::check_len(model.point_count(), target.len())?;
    let sim = estimate_similarity(model.mean().points(), target.points())?;
    let mut theta = similarity_to_affine(&sim);
    let mut beta = DeformParams::zeros(model.beta_dim());
    let tflat = target.to_flat();
    let residual = |theta: &AffineParams, beta: &DeformParams| -> Result<(Vec<f64>, f64)> {
        let p = synthesize(model, theta, beta)?;
        let r: Vec<f64> = p.to_flat().iter().zip(&tflat).map(|(a, b)| a - b).collect();
        let rmse = (r.iter().map(|v| v * v).sum::<f64>() / model.point_count() as f64).sqrt();
        Ok((r, rmse))
    };
    let (mut r, mut rmse) = residual(&theta, &beta)?;
    let mut trace = vec![TraceEntry { iteration: 0, point: rmse, mask: 0.0, total: rmse, tau: 0.0 }];
    let mut damping = 1e-6;
    let np = 6 + model.beta_dim();
    for it in 1..=cfg.max_iters {
        let cols = synthesize_jacobian(model, &theta, &beta)?;
        let l = r.len();
        let j = DMatrix::from_fn(l, np, |i, k| cols[k][i]);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * DVector::from_column_slice(&r);
        let mut improved = false;
        while damping < 1e12 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += damping * (jtj[(k, k)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                damping *= 10.0;
                continue;
            };
            let mut th = theta;
            for k in 0..6 {
                th.theta[k] += step[k];
            }
            let b = DeformParams::new((0..model.beta_dim()).map(|k| beta.beta[k] + step[6 + k]).collect());
            let b = clamp_beta(model, &b)?;
            let (r2, rmse2) = residual(&th, &b)?;
            if rmse2 <= rmse {
                improved = rmse - rmse2 > 1e-15 * rmse.max(1.0);
                theta = th;
                beta = b;
                r = r2;
                rmse = rmse2;
                damping = (damping * 0.3).max(1e-12);
                break;
            }
            damping *= 10.0;
        }
        trace.push(TraceEntry { iteration: it, point: rmse, mask: 0.0, total: rmse, tau: 0.0 });
        if !improved {
            break;
        }
    }
    let points = synthesize(model, &theta, &beta)?;
    // report against the exact loss definition
    if let Some(last) = trace.last_mut() {
        last.point = point_loss(&points, target)?.value;
        last.total = last.point;
    }
    Ok(FitResult { theta, beta, points, loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_affine;
    use crate::raster::build_faces;
    use crate::ssm::fit_pdm;
    use crate::synthgen::{generate, generate_from_model, GenConfig};
    use crate::geometry::invert_affine;

    fn model(beta_dim: usize) -> ShapeModel {
        let samples = generate(&GenConfig { seed: 31, ..Default::default() }, 40).unwrap();
        let clouds: Vec<PointCloud> = samples
            .iter()
            .map(|s| {
                let local = apply_affine(&invert_affine(&s.theta_gt).unwrap(), &s.points).unwrap();
                let (c, r) = (local.centroid(), local.rms_radius());
                local.map(|p| (p - c) * (1.0 / r)).unwrap()
            })
            .collect();
        fit_pdm(&clouds, beta_dim).unwrap()
    }

    #[test]
    fn fit_to_points_recovers_mean_and_samples() {
        let m = model(39);
        let cfg = FitConfig { max_iters: 50, ..Default::default() };
        let r = fit_to_points(&m, m.mean(), &cfg).unwrap();
        assert!(r.loss_trace.last().unwrap().point < 1e-3);
        for (a, b) in r.theta.theta.iter().zip(AffineParams::identity().theta) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(r.beta.beta.iter().all(|b| b.abs() < 1e-3));
        let faces = build_faces(88).unwrap();
        let samples = generate_from_model(&m, &faces, &GenConfig { seed: 4, ..Default::default() }, 5).unwrap();
        for s in &samples {
            let r = fit_to_points(&m, &s.points, &cfg).unwrap();
            assert!(point_loss(&r.points, &s.points).unwrap().value < 0.1);
        }
    }

    #[test]
    fn fit_to_points_residual_matches_orthogonal_component() {
        let m = model(10);
        // a direction orthogonal to everything the model can express to first order
        let mean = m.mean().to_flat();
        let t = m.point_count();
        // affine tangent columns and the retained modes
        let basis = synthesize_jacobian(&m, &AffineParams::identity(), &DeformParams::zeros(10)).unwrap();
        let mut v: Vec<f64> = (0..2 * t).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.01).collect();
        for _ in 0..3 {
            for b in &basis {
                let nb: f64 = b.iter().map(|x| x * x).sum();
                let d: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / nb;
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= d * bi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = PointCloud::from_flat(&mean.iter().zip(&v).map(|(a, b)| a + b).collect::<Vec<_>>()).unwrap();
        let r = fit_to_points(&m, &target, &FitConfig::default()).unwrap();
        let got = point_loss(&r.points, &target).unwrap().value;
        let want = norm / (t as f64).sqrt();
        assert!((got - want).abs() < 0.02 * want, "{got} vs {want}");
    }

    #[test]
    fn fit_single_from_ground_truth_does_not_degrade() {
        let m = model(10);
        let faces = build_faces(88).unwrap();
        let s = &generate_from_model(&m, &faces, &GenConfig { seed: 8, ..Default::default() }, 1).unwrap()[0];
        let init = (s.theta_gt, s.beta_gt.clone().unwrap());
        let cfg = FitConfig { max_iters: 60, ..FitConfig::fitting() };
        let r = fit_single(&m, &faces, &s.mask, Some(init), &cfg).unwrap();
        assert!(r.loss_trace.windows(2).all(|w| w[1].tau != w[0].tau || w[1].total <= w[0].total));
        assert!(r.loss_trace.last().unwrap().tau < cfg.tau);
        let d0 = hard_dice(&s.points, &faces, &s.mask).unwrap();
        let d1 = hard_dice(&r.points, &faces, &s.mask).unwrap();
        assert!(d1 >= d0);
    }

    #[test]
    fn fit_single_recovers_model_sample() {
        let m = model(10);
        let faces = build_faces(88).unwrap();
        let samples = generate_from_model(&m, &faces, &GenConfig { seed: 9, ..Default::default() }, 3).unwrap();
        for s in &samples {
            let r = fit_single(&m, &faces, &s.mask, None, &FitConfig::fitting()).unwrap();
            let d = hard_dice(&r.points, &faces, &s.mask).unwrap();
            assert!(d >= 0.97, "dice {d}");
            let bounds = m.clamp_bounds();
            assert!(r.beta.beta.iter().zip(&bounds).all(|(b, l)| b.abs() <= l + 1e-12));
            assert!(synthesize(&m, &r.theta, &r.beta).unwrap().rmsd(&r.points).unwrap() < 1e-12);
        }
    }

    #[test]
    fn fit_single_rejects_empty_target() {
        let m = model(5);
        let faces = build_faces(88).unwrap();
        let empty = BinaryMask::zeros(64, 64, 1.0);
        assert!(fit_single(&m, &faces, &empty, None, &FitConfig::fitting()).is_err());
    }
}
