//! PCA point-distribution model and shape synthesis.
//!
//! A shape is synthesised as `P = θ (P_m + β C_β)`: deformation coefficients
//! `β` add principal modes to the mean in the canonical domain, and the 2x3
//! affine `θ` places the result in the image.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{apply_affine, AffineParams, Point2, PointCloud};

/// Default number of retained modes (capped by `K - 1`).
pub const DEFAULT_BETA_DIM: usize = 30;

/// Half-width of the clamp box, in standard deviations of each mode.
pub const CLAMP_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformParams {
    pub beta: Vec<f64>,
}

impl DeformParams {
    pub fn zeros(n: usize) -> Self {
        Self { beta: vec![0.0; n] }
    }

    pub fn new(beta: Vec<f64>) -> Self {
        Self { beta }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    mean: PointCloud,
    /// `beta_dim` rows of length `2T`, interleaved `x, y` per point.
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

impl ShapeModel {
    /// Assembles a model from stored parts, checking shapes and orthonormality.
    pub fn from_parts(
        mean: PointCloud,
        components: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
        total_variance: f64,
    ) -> Result<Self> {
        let l = 2 * mean.len();
        Error::check_len(components.len(), eigenvalues.len())?;
        if components.is_empty() {
            return Err(Error::param("beta_dim", "must be >= 1"));
        }
        for row in &components {
            Error::check_len(l, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("components", "non-finite entry"));
            }
        }
        if eigenvalues.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param("eigenvalues", "must be finite and >= 0"));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::param("eigenvalues", "must be sorted descending"));
        }
        let model = Self {
            mean,
            components,
            eigenvalues,
            total_variance,
        };
        if model.orthonormality_residual() > 1e-6 {
            return Err(Error::param("components", "rows are not orthonormal"));
        }
        Ok(model)
    }

    pub fn point_count(&self) -> usize {
        self.mean.len()
    }

    pub fn shape_dim(&self) -> usize {
        2 * self.mean.len()
    }

    pub fn beta_dim(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &PointCloud {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// `Σ_{j ≤ β^d} λ_j / total`. Returns 1 for a model with no variance.
    pub fn retained_variance(&self) -> f64 {
        let kept: f64 = self.eigenvalues.iter().sum();
        if self.total_variance > 0.0 {
            (kept / self.total_variance).min(1.0)
        } else {
            1.0
        }
    }

    /// Largest deviation of `C Cᵀ` from the identity.
    pub fn orthonormality_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate().skip(i) {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    /// Per-mode clamp half-widths `3√λ_j`.
    pub fn clamp_bounds(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|l| CLAMP_SIGMAS * l.sqrt())
            .collect()
    }

    fn check_beta(&self, beta: &DeformParams) -> Result<()> {
        Error::check_len(self.beta_dim(), beta.len())?;
        if beta.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("beta", "non-finite coefficient"));
        }
        Ok(())
    }
}

/// Fits the mean (population average) and the top `beta_dim` eigenvectors of
/// the `1/K` sample covariance of canonical-domain shapes.
pub fn fit_pdm(canonical_shapes: &[PointCloud], beta_dim: usize) -> Result<ShapeModel> {
    let k = canonical_shapes.len();
    if k < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 shapes, got {k}"
        )));
    }
    let t = canonical_shapes[0].len();
    for s in canonical_shapes {
        Error::check_len(t, s.len())?;
    }
    let l = 2 * t;
    let max_dim = l.min(k - 1);
    if beta_dim == 0 || beta_dim > max_dim {
        return Err(Error::param(
            "beta_dim",
            format!("must lie in 1..={max_dim}, got {beta_dim}"),
        ));
    }

    let flats: Vec<Vec<f64>> = canonical_shapes.iter().map(|s| s.to_flat()).collect();
    let mut mean = vec![0.0; l];
    for f in &flats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);

    let centered = DMatrix::from_fn(k, l, |i, j| flats[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / k as f64;
    let trace = cov.trace();
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(beta_dim);
    let mut eigenvalues = Vec::with_capacity(beta_dim);
    for &j in order.iter().take(beta_dim) {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        // sign: the largest-magnitude entry is positive
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[j].max(0.0));
    }

    Ok(ShapeModel {
        mean: PointCloud::from_flat(&mean)?,
        components,
        eigenvalues,
        total_variance: trace.max(0.0),
    })
}

/// Canonical shape `P_m + β C_β` (no clamping).
pub fn deform(model: &ShapeModel, beta: &DeformParams) -> Result<PointCloud> {
    model.check_beta(beta)?;
    let mut flat = model.mean.to_flat();
    for (b, row) in beta.beta.iter().zip(&model.components) {
        if *b == 0.0 {
            continue;
        }
        for (f, c) in flat.iter_mut().zip(row) {
            *f += b * c;
        }
    }
    PointCloud::from_flat(&flat)
}

/// Clips each `β_j` to `[-3√λ_j, 3√λ_j]`.
pub fn clamp_beta(model: &ShapeModel, beta: &DeformParams) -> Result<DeformParams> {
    model.check_beta(beta)?;
    Ok(DeformParams::new(
        beta.beta
            .iter()
            .zip(model.clamp_bounds())
            .map(|(b, lim)| b.clamp(-lim, lim))
            .collect(),
    ))
}

/// `θ (P_m + clamp(β) C_β)`.
pub fn synthesize(
    model: &ShapeModel,
    theta: &AffineParams,
    beta: &DeformParams,
) -> Result<PointCloud> {
    let clamped = clamp_beta(model, beta)?;
    apply_affine(theta, &deform(model, &clamped)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub beta: DeformParams,
    /// Euclidean norm of the part of `shape - mean` outside the retained modes.
    pub residual: f64,
}

/// `β_j = ⟨shape - mean, C_j⟩`.
pub fn project(model: &ShapeModel, canonical_shape: &PointCloud) -> Result<Projection> {
    Error::check_len(model.point_count(), canonical_shape.len())?;
    let diff: Vec<f64> = canonical_shape
        .to_flat()
        .iter()
        .zip(model.mean.to_flat())
        .map(|(s, m)| s - m)
        .collect();
    let beta: Vec<f64> = model
        .components
        .iter()
        .map(|row| row.iter().zip(&diff).map(|(c, d)| c * d).sum())
        .collect();
    let mut rest = diff;
    for (b, row) in beta.iter().zip(&model.components) {
        for (r, c) in rest.iter_mut().zip(row) {
            *r -= b * c;
        }
    }
    Ok(Projection {
        beta: DeformParams::new(beta),
        residual: rest.iter().map(|r| r * r).sum::<f64>().sqrt(),
    })
}

/// Gradient of a scalar loss with respect to `(θ, β)` given its gradient with
/// respect to the synthesised points.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub theta: [f64; 6],
    pub beta: Vec<f64>,
}

/// Chain rule through [`synthesize`]. The clamp is treated as straight-through:
/// the canonical shape uses the clamped `β`, and `∂L/∂β` is passed back as if
/// the clamp were the identity.
pub fn synthesize_backward(
    model: &ShapeModel,
    theta: &AffineParams,
    beta: &DeformParams,
    grad_points: &[Point2],
) -> Result<ParamGrad> {
    Error::check_len(model.point_count(), grad_points.len())?;
    let canon = deform(model, &clamp_beta(model, beta)?)?;
    let mut gt = [0.0; 6];
    for (c, g) in canon.points().iter().zip(grad_points) {
        gt[0] += g.x * c.x;
        gt[1] += g.x * c.y;
        gt[2] += g.x;
        gt[3] += g.y * c.x;
        gt[4] += g.y * c.y;
        gt[5] += g.y;
    }
    // ∂L/∂P^c = Aᵀ ∂L/∂P
    let t = &theta.theta;
    let gc: Vec<f64> = grad_points
        .iter()
        .flat_map(|g| [t[0] * g.x + t[3] * g.y, t[1] * g.x + t[4] * g.y])
        .collect();
    let gb = model
        .components
        .iter()
        .map(|row| row.iter().zip(&gc).map(|(c, g)| c * g).sum())
        .collect();
    Ok(ParamGrad { theta: gt, beta: gb })
}

/// Dense Jacobian `∂P/∂(θ, β)` of the flat `2T` point vector, one column per
/// parameter (6 affine entries then `β^d` modes), stored column-major.
pub fn synthesize_jacobian(
    model: &ShapeModel,
    theta: &AffineParams,
    beta: &DeformParams,
) -> Result<Vec<Vec<f64>>> {
    let canon = deform(model, &clamp_beta(model, beta)?)?;
    let l = model.shape_dim();
    let mut cols = vec![vec![0.0; l]; 6 + model.beta_dim()];
    for (i, c) in canon.points().iter().enumerate() {
        cols[0][2 * i] = c.x;
        cols[1][2 * i] = c.y;
        cols[2][2 * i] = 1.0;
        cols[3][2 * i + 1] = c.x;
        cols[4][2 * i + 1] = c.y;
        cols[5][2 * i + 1] = 1.0;
    }
    let t = &theta.theta;
    for (j, row) in model.components.iter().enumerate() {
        let col = &mut cols[6 + j];
        for i in 0..model.point_count() {
            let (cx, cy) = (row[2 * i], row[2 * i + 1]);
            col[2 * i] = t[0] * cx + t[1] * cy;
            col[2 * i + 1] = t[3] * cx + t[4] * cy;
        }
    }
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base_shape() -> Vec<f64> {
        (0..8)
            .flat_map(|i| {
                let a = i as f64 * 0.7;
                [a.cos() * (1.0 + 0.1 * i as f64), a.sin()]
            })
            .collect()
    }

    fn random_shapes(rng: &mut ChaCha8Rng, k: usize) -> Vec<PointCloud> {
        let base = base_shape();
        (0..k)
            .map(|_| {
                let f: Vec<f64> = base.iter().map(|b| b + rng.random_range(-0.1..0.1)).collect();
                PointCloud::from_flat(&f).unwrap()
            })
            .collect()
    }

    #[test]
    fn two_sample_analytic_pca() {
        // mean ± v: covariance = v vᵀ, single eigenvalue |v|², eigenvector v/|v|.
        let base = base_shape();
        let v: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.05).collect();
        let plus: Vec<f64> = base.iter().zip(&v).map(|(b, d)| b + d).collect();
        let minus: Vec<f64> = base.iter().zip(&v).map(|(b, d)| b - d).collect();
        let shapes = [PointCloud::from_flat(&plus).unwrap(), PointCloud::from_flat(&minus).unwrap()];
        let m = fit_pdm(&shapes, 1).unwrap();
        let vn2: f64 = v.iter().map(|x| x * x).sum();
        assert!((m.eigenvalues()[0] - vn2).abs() < 1e-12);
        assert!((m.total_variance() - vn2).abs() < 1e-12);
        let dot: f64 = m.components()[0].iter().zip(&v).map(|(c, x)| c * x).sum();
        assert!((dot.abs() - vn2.sqrt()).abs() < 1e-10);
        for (a, b) in m.mean().to_flat().iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_shapes_have_zero_variance() {
        let s = PointCloud::from_flat(&base_shape()).unwrap();
        let m = fit_pdm(&[s.clone(), s.clone(), s.clone()], 2).unwrap();
        assert!(m.eigenvalues().iter().all(|&l| l.abs() < 1e-20));
        let out = synthesize(&m, &AffineParams::identity(), &DeformParams::new(vec![0.3, -0.2])).unwrap();
        assert!(out.rmsd(&s).unwrap() < 1e-12);
    }

    #[test]
    fn beta_dim_range_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shapes = random_shapes(&mut rng, 5);
        assert!(fit_pdm(&shapes, 0).is_err());
        assert!(fit_pdm(&shapes, 5).is_err());
        assert!(fit_pdm(&shapes, 4).is_ok());
        assert!(fit_pdm(&shapes[..1], 1).is_err());
    }

    #[test]
    fn model_invariants_and_full_rank_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shapes = random_shapes(&mut rng, 10);
        let m = fit_pdm(&shapes, 9).unwrap();
        assert!(m.orthonormality_residual() < 1e-9);
        assert!(m.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        let sum: f64 = m.eigenvalues().iter().sum();
        assert!((sum - m.total_variance()).abs() <= 1e-6 * m.total_variance());
        for s in &shapes {
            let p = project(&m, s).unwrap();
            let r = deform(&m, &p.beta).unwrap();
            let err = r
                .to_flat()
                .iter()
                .zip(s.to_flat())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9);
        }
    }

    #[test]
    fn deform_and_clamp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = fit_pdm(&random_shapes(&mut rng, 6), 3).unwrap();
        assert_eq!(deform(&m, &DeformParams::zeros(3)).unwrap(), *m.mean());
        assert!(deform(&m, &DeformParams::zeros(2)).is_err());

        let s = 0.05;
        let d = deform(&m, &DeformParams::new(vec![s, 0.0, 0.0])).unwrap();
        for ((a, b), c) in d.to_flat().iter().zip(m.mean().to_flat()).zip(&m.components()[0]) {
            assert!((a - b - s * c).abs() < 1e-12);
        }

        let b1 = DeformParams::new(vec![0.01, -0.02, 0.03]);
        let b2 = DeformParams::new(vec![-0.04, 0.05, 0.01]);
        let sum = DeformParams::new(b1.beta.iter().zip(&b2.beta).map(|(a, b)| a + b).collect());
        let lhs: Vec<f64> = deform(&m, &b1)
            .unwrap()
            .to_flat()
            .iter()
            .zip(deform(&m, &b2).unwrap().to_flat())
            .zip(m.mean().to_flat())
            .map(|((a, b), c)| a + b - c)
            .collect();
        for (a, b) in lhs.iter().zip(deform(&m, &sum).unwrap().to_flat()) {
            assert!((a - b).abs() < 1e-9);
        }

        let sq: Vec<f64> = m.eigenvalues().iter().map(|l| l.sqrt()).collect();
        let wild = DeformParams::new(vec![5.0 * sq[0], -5.0 * sq[1], 0.5 * sq[2]]);
        let c = clamp_beta(&m, &wild).unwrap();
        assert!((c.beta[0] - 3.0 * sq[0]).abs() < 1e-15);
        assert!((c.beta[1] + 3.0 * sq[1]).abs() < 1e-15);
        assert_eq!(c.beta[2], wild.beta[2]);
    }

    #[test]
    fn zero_variance_mode_clamps_to_zero() {
        let mean = PointCloud::from_flat(&base_shape()).unwrap();
        let mut row = vec![0.0; 16];
        row[0] = 1.0;
        let m = ShapeModel::from_parts(mean, vec![row], vec![0.0], 0.0).unwrap();
        assert_eq!(clamp_beta(&m, &DeformParams::new(vec![0.7])).unwrap().beta, vec![0.0]);
    }

    #[test]
    fn synthesize_matches_pointwise_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = fit_pdm(&random_shapes(&mut rng, 8), 4).unwrap();
        for _ in 0..10 {
            let theta = AffineParams::new(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
            let beta = DeformParams::new(
                m.eigenvalues().iter().map(|l| rng.random_range(-2.0..2.0) * l.sqrt()).collect(),
            );
            let out = synthesize(&m, &theta, &beta).unwrap();
            for (i, p) in out.points().iter().enumerate() {
                let mut cx = m.mean().points()[i].x;
                let mut cy = m.mean().points()[i].y;
                for (j, b) in beta.beta.iter().enumerate() {
                    cx += b * m.components()[j][2 * i];
                    cy += b * m.components()[j][2 * i + 1];
                }
                let t = theta.theta;
                let x = t[0] * cx + t[1] * cy + t[2];
                let y = t[3] * cx + t[4] * cy + t[5];
                assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12);
            }
        }
        let shifted = synthesize(&m, &AffineParams::translation(2.0, -1.0), &DeformParams::zeros(4)).unwrap();
        for (a, b) in shifted.points().iter().zip(m.mean().points()) {
            assert!((*a - *b - Point2::new(2.0, -1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = fit_pdm(&random_shapes(&mut rng, 8), 4).unwrap();
        let p = project(&m, m.mean()).unwrap();
        assert!(p.beta.beta.iter().all(|b| b.abs() < 1e-15));
        let truth = DeformParams::new(m.eigenvalues().iter().map(|l| 1.5 * l.sqrt()).collect());
        let back = project(&m, &deform(&m, &truth).unwrap()).unwrap();
        for (a, b) in back.beta.beta.iter().zip(&truth.beta) {
            assert!((a - b).abs() < 1e-9);
        }
        // orthogonal complement: build a direction orthogonal to every component
        let mut v: Vec<f64> = (0..16).map(|i| (i as f64 * 1.3).sin()).collect();
        for row in m.components() {
            let d: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(row).for_each(|(x, r)| *x -= d * r);
        }
        let shape: Vec<f64> = m.mean().to_flat().iter().zip(&v).map(|(a, b)| a + b).collect();
        let p = project(&m, &PointCloud::from_flat(&shape).unwrap()).unwrap();
        assert!(p.beta.beta.iter().all(|b| b.abs() < 1e-12));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((p.residual - norm).abs() < 1e-12);
    }

    #[test]
    fn analytic_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = fit_pdm(&random_shapes(&mut rng, 8), 4).unwrap();
        let theta = AffineParams::new([1.3, -0.4, 5.0, 0.6, 0.9, -2.0]);
        let beta = DeformParams::new(m.eigenvalues().iter().map(|l| 0.7 * l.sqrt()).collect());
        let jac = synthesize_jacobian(&m, &theta, &beta).unwrap();
        let h = 1e-5;
        let eval = |th: [f64; 6], b: Vec<f64>| {
            synthesize(&m, &AffineParams::new(th), &DeformParams::new(b)).unwrap().to_flat()
        };
        for p in 0..6 + 4 {
            let (mut tp, mut tm) = (theta.theta, theta.theta);
            let (mut bp, mut bm) = (beta.beta.clone(), beta.beta.clone());
            if p < 6 {
                tp[p] += h;
                tm[p] -= h;
            } else {
                bp[p - 6] += h;
                bm[p - 6] -= h;
            }
            let (fp, fm) = (eval(tp, bp), eval(tm, bm));
            for i in 0..16 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let an = jac[p][i];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "param {p} coord {i}: {fd} vs {an}");
            }
        }
        // backward agrees with Jᵀ g
        let g: Vec<Point2> = (0..8).map(|i| Point2::new(i as f64 * 0.1, 1.0 - i as f64 * 0.2)).collect();
        let pg = synthesize_backward(&m, &theta, &beta, &g).unwrap();
        let gf: Vec<f64> = g.iter().flat_map(|p| [p.x, p.y]).collect();
        for p in 0..10 {
            let want: f64 = jac[p].iter().zip(&gf).map(|(a, b)| a * b).sum();
            let got = if p < 6 { pg.theta[p] } else { pg.beta[p - 6] };
            assert!((want - got).abs() < 1e-12);
        }
    }
}
