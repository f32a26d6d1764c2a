//! Point clouds, 2x3 affine warps and closed-form similarity estimation.
//!
//! A [`PointCloud`] stores `T` ordered boundary points: the inner chain
//! (indices `0..T/2`) followed by the outer chain (`T/2..T`). Point `i` of
//! the inner chain corresponds to point `i + T/2` of the outer chain.

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// Continuous pixel coordinate. Pixel `(col, row)` covers
/// `[col, col+1] x [row, row+1]`, so its center sits at `(col+0.5, row+0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        self + (o - self) * t
    }

    pub fn midpoint(self, o: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + o.x), 0.5 * (self.y + o.y))
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Ordered two-chain boundary representation of a ring-like shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point2>,
}

impl PointCloud {
    /// Smallest admissible point count.
    pub const MIN_POINTS: usize = 6;

    pub fn new(points: Vec<Point2>) -> Result<Self> {
        let t = points.len();
        if t < Self::MIN_POINTS || t % 2 != 0 {
            return Err(Error::InvalidPointCloud(format!(
                "point count {t} must be even and >= {}",
                Self::MIN_POINTS
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidPointCloud(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from an inner and an outer chain of equal length.
    pub fn from_chains(inner: &[Point2], outer: &[Point2]) -> Result<Self> {
        Error::check_len(inner.len(), outer.len())?;
        let mut pts = Vec::with_capacity(inner.len() * 2);
        pts.extend_from_slice(inner);
        pts.extend_from_slice(outer);
        Self::new(pts)
    }

    /// Interleaved `x0 y0 x1 y1 ...` layout of length `2T`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::InvalidPointCloud("odd coordinate count".into()));
        }
        Self::new(
            flat.chunks_exact(2)
                .map(|c| Point2::new(c[0], c[1]))
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn inner_count(&self) -> usize {
        self.points.len() / 2
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn inner(&self) -> &[Point2] {
        &self.points[..self.inner_count()]
    }

    pub fn outer(&self) -> &[Point2] {
        &self.points[self.inner_count()..]
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }

    pub fn centroid(&self) -> Point2 {
        centroid(&self.points)
    }

    /// Root-mean-square distance of the points from their centroid.
    pub fn rms_radius(&self) -> f64 {
        let c = self.centroid();
        (self.points.iter().map(|p| (*p - c).norm_sq()).sum::<f64>() / self.len() as f64).sqrt()
    }

    /// Signed area of the ring polygon (inner chain forward, outer chain
    /// backward). Positive means counter-clockwise in the stored x/y frame.
    pub fn ring_signed_area(&self) -> f64 {
        let ring: Vec<Point2> = self
            .inner()
            .iter()
            .chain(self.outer().iter().rev())
            .copied()
            .collect();
        polygon_signed_area(&ring)
    }

    /// Root-mean-square point distance to another cloud of the same size.
    pub fn rmsd(&self, other: &PointCloud) -> Result<f64> {
        Error::check_len(self.len(), other.len())?;
        let s: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (*a - *b).norm_sq())
            .sum();
        Ok((s / self.len() as f64).sqrt())
    }

    /// Reverses the order inside each chain, keeping the inner-first layout.
    pub fn reversed_chains(&self) -> PointCloud {
        let n = self.inner_count();
        let mut pts: Vec<Point2> = self.points[..n].iter().rev().copied().collect();
        pts.extend(self.points[n..].iter().rev());
        PointCloud { points: pts }
    }

    pub fn map(&self, mut f: impl FnMut(Point2) -> Point2) -> Result<PointCloud> {
        PointCloud::new(self.points.iter().map(|p| f(*p)).collect())
    }
}

pub fn centroid(points: &[Point2]) -> Point2 {
    let n = points.len().max(1) as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point2::new(sx / n, sy / n)
}

/// Shoelace signed area of a closed polygon.
pub fn polygon_signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| poly[i].cross(poly[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

/// 2x3 affine matrix `[a b tx; c d ty]` mapping `(x, y)` to
/// `(a x + b y + tx, c x + d y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub theta: [f64; 6],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const fn new(theta: [f64; 6]) -> Self {
        Self { theta }
    }

    pub const fn identity() -> Self {
        Self::new([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        Self::new([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Determinant of the 2x2 linear part.
    pub fn det(&self) -> f64 {
        let t = &self.theta;
        t[0] * t[4] - t[1] * t[3]
    }

    pub fn apply_point(&self, p: Point2) -> Point2 {
        let t = &self.theta;
        Point2::new(
            t[0] * p.x + t[1] * p.y + t[2],
            t[3] * p.x + t[4] * p.y + t[5],
        )
    }

    /// Applies only the linear part (no translation).
    pub fn apply_vector(&self, v: Point2) -> Point2 {
        let t = &self.theta;
        Point2::new(t[0] * v.x + t[1] * v.y, t[3] * v.x + t[4] * v.y)
    }

    /// Returns `self ∘ first`, i.e. `first` is applied before `self`.
    pub fn compose(&self, first: &AffineParams) -> AffineParams {
        let a = &self.theta;
        let b = &first.theta;
        AffineParams::new([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }
}

/// Smallest |det| accepted by [`invert_affine`].
pub const DEGENERATE_DET: f64 = 1e-12;

pub fn apply_affine(theta: &AffineParams, pc: &PointCloud) -> Result<PointCloud> {
    if !theta.is_finite() {
        return Err(Error::InvalidPointCloud("non-finite affine parameters".into()));
    }
    pc.map(|p| theta.apply_point(p))
}

pub fn invert_affine(theta: &AffineParams) -> Result<AffineParams> {
    let det = theta.det();
    if !det.is_finite() || det.abs() <= DEGENERATE_DET {
        return Err(Error::DegenerateAffine(det));
    }
    let t = &theta.theta;
    let (a, b, c, d) = (t[4] / det, -t[1] / det, -t[3] / det, t[0] / det);
    Ok(AffineParams::new([
        a,
        b,
        -(a * t[2] + b * t[5]),
        c,
        d,
        -(c * t[2] + d * t[5]),
    ]))
}

/// Proper similarity: `x -> scale * R(rotation) * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityParams {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Point2,
}

impl SimilarityParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: Point2::default(),
        }
    }

    pub fn apply_point(&self, p: Point2) -> Point2 {
        similarity_to_affine(self).apply_point(p)
    }
}

pub fn similarity_to_affine(sp: &SimilarityParams) -> AffineParams {
    let (s, c) = sp.rotation.sin_cos();
    AffineParams::new([
        sp.scale * c,
        -sp.scale * s,
        sp.translation.x,
        sp.scale * s,
        sp.scale * c,
        sp.translation.y,
    ])
}

/// Least-squares similarity taking `src` onto `dst` (no reflection).
///
/// Closed form: with both sets centered, `a = Σ s·d`, `b = Σ s×d`; the
/// rotation is `atan2(b, a)` and the scale `hypot(a, b) / Σ|s|²`.
pub fn estimate_similarity(src: &[Point2], dst: &[Point2]) -> Result<SimilarityParams> {
    Error::check_len(src.len(), dst.len())?;
    if src.len() < 2 {
        return Err(Error::DegenerateConfiguration(
            "need at least 2 point pairs".into(),
        ));
    }
    if src.iter().chain(dst).any(|p| !p.is_finite()) {
        return Err(Error::DegenerateConfiguration("non-finite point".into()));
    }
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut var_src = 0.0;
    let mut var_dst = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let s = *s - cs;
        let d = *d - cd;
        var_src += s.norm_sq();
        var_dst += d.norm_sq();
        a += s.dot(d);
        b += s.cross(d);
    }
    let spread = src.iter().chain(dst).map(|p| p.x.abs().max(p.y.abs())).fold(1.0, f64::max);
    let eps = 1e-24 * spread * spread * src.len() as f64;
    if var_src <= eps {
        return Err(Error::DegenerateConfiguration(
            "all source points coincide".into(),
        ));
    }
    if var_dst <= eps {
        return Err(Error::DegenerateConfiguration(
            "all destination points coincide".into(),
        ));
    }
    let rotation = b.atan2(a);
    let scale = a.hypot(b) / var_src;
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::DegenerateConfiguration(
            "no positive-scale similarity exists".into(),
        ));
    }
    let (sn, cn) = rotation.sin_cos();
    let rc = Point2::new(cn * cs.x - sn * cs.y, sn * cs.x + cn * cs.y) * scale;
    Ok(SimilarityParams {
        scale,
        rotation,
        translation: cd - rc,
    })
}
