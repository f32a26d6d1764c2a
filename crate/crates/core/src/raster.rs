//! Ring triangulation and 2D rasterization.
//!
//! [`build_faces`] produces the two triangle strips joining the inner and
//! outer chains of a [`PointCloud`]. [`rasterize_hard`] is an exact
//! pixel-centre coverage test used as an oracle; [`rasterize_soft`] and
//! [`rasterize_soft_backward`] are the differentiable renderer.
//!
//! Soft coverage of one triangle at a pixel centre `p` is a logistic of the
//! signed distance `d(p)` to the triangle boundary (positive inside),
//! renormalised so that it reaches exactly 0 at `d = -6τ` and exactly 1 at
//! `d = 6τ`. Triangles are combined as a probabilistic union
//! `m = 1 - Π (1 - c_f)`, which keeps the mask in `[0, 1]` where strips
//! overlap.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point2, PointCloud};
use crate::mask::RasterMask;

/// Output grid geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub spacing_mm: f64,
}

impl Canvas {
    pub fn new(width: usize, height: usize, spacing_mm: f64) -> Self {
        Self {
            width,
            height,
            spacing_mm,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    fn center(col: usize, row: usize) -> Point2 {
        Point2::new(col as f64 + 0.5, row as f64 + 0.5)
    }
}

/// Soft coverage saturates at `±SATURATION * tau`.
pub const SATURATION: f64 = 6.0;

/// Triangle vertex-index triples over a `T`-point cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceList {
    faces: Vec<[usize; 3]>,
    point_count: usize,
}

impl FaceList {
    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.point_count
    }

    pub(crate) fn check_cloud(&self, pc: &PointCloud) -> Result<()> {
        Error::check_len(self.point_count, pc.len())
    }
}

/// Two strips: `{i, i+1, n+i}` and `{n+i, n+i+1, i+1}` for `i in 0..n-1`
/// with `n = T/2`, giving `T - 2` faces.
pub fn build_faces(t: usize) -> Result<FaceList> {
    if t < PointCloud::MIN_POINTS || t % 2 != 0 {
        return Err(Error::param(
            "t",
            format!("must be even and >= {}, got {t}", PointCloud::MIN_POINTS),
        ));
    }
    let n = t / 2;
    let mut faces = Vec::with_capacity(t - 2);
    faces.extend((0..n - 1).map(|i| [i, i + 1, n + i]));
    faces.extend((0..n - 1).map(|i| [n + i, n + i + 1, i + 1]));
    Ok(FaceList {
        faces,
        point_count: t,
    })
}

const AREA_EPS: f64 = 1e-12;

/// A face with vertices reordered to positive orientation.
#[derive(Debug, Clone, Copy)]
struct Tri {
    idx: [usize; 3],
    v: [Point2; 3],
    lo: Point2,
    hi: Point2,
}

fn oriented_tris(pc: &PointCloud, faces: &FaceList, margin: f64) -> Vec<Tri> {
    let pts = pc.points();
    faces
        .faces
        .iter()
        .filter_map(|&[i, j, k]| {
            let (a, mut b, mut c) = (pts[i], pts[j], pts[k]);
            let mut idx = [i, j, k];
            let area2 = (b - a).cross(c - a);
            if area2.abs() <= AREA_EPS {
                return None;
            }
            if area2 < 0.0 {
                std::mem::swap(&mut b, &mut c);
                idx.swap(1, 2);
            }
            let lo = Point2::new(a.x.min(b.x).min(c.x) - margin, a.y.min(b.y).min(c.y) - margin);
            let hi = Point2::new(a.x.max(b.x).max(c.x) + margin, a.y.max(b.y).max(c.y) + margin);
            Some(Tri {
                idx,
                v: [a, b, c],
                lo,
                hi,
            })
        })
        .collect()
}

impl Tri {
    fn may_touch(&self, p: Point2) -> bool {
        p.x >= self.lo.x && p.x <= self.hi.x && p.y >= self.lo.y && p.y <= self.hi.y
    }
}

/// Edge function evaluated with canonically ordered endpoints so that the
/// two triangles sharing an edge see exactly opposite values.
fn edge_fn(p0: Point2, p1: Point2, p: Point2) -> f64 {
    if (p0.x, p0.y) <= (p1.x, p1.y) {
        (p1 - p0).cross(p - p0)
    } else {
        -((p0 - p1).cross(p - p1))
    }
}

/// Exactly one of the two directions of an edge owns pixels lying on it.
fn owns_edge(p0: Point2, p1: Point2) -> bool {
    let d = p1 - p0;
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

fn hard_inside(t: &Tri, p: Point2) -> bool {
    (0..3).all(|e| {
        let (p0, p1) = (t.v[e], t.v[(e + 1) % 3]);
        let w = edge_fn(p0, p1, p);
        w > 0.0 || (w == 0.0 && owns_edge(p0, p1))
    })
}

/// Pixel-centre point-in-triangle coverage; pixels on shared edges belong to
/// exactly one triangle. Zero-area faces cover nothing.
pub fn rasterize_hard(pc: &PointCloud, faces: &FaceList, canvas: Canvas) -> Result<RasterMask> {
    faces.check_cloud(pc)?;
    let tris = oriented_tris(pc, faces, 0.0);
    let w = canvas.width;
    let data: Vec<f64> = (0..canvas.pixel_count())
        .map(|i| {
            let p = Canvas::center(i % w, i / w);
            let hit = tris.iter().any(|t| t.may_touch(p) && hard_inside(t, p));
            f64::from(u8::from(hit))
        })
        .collect();
    Ok(RasterMask::from_parts(w, canvas.height, data, canvas.spacing_mm))
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Saturated logistic coverage and its derivative with respect to `x = d/τ`.
fn coverage(x: f64) -> (f64, f64) {
    if x <= -SATURATION {
        return (0.0, 0.0);
    }
    if x >= SATURATION {
        return (1.0, 0.0);
    }
    let lo = logistic(-SATURATION);
    let span = 1.0 - 2.0 * lo;
    let s = logistic(x);
    (((s - lo) / span).clamp(0.0, 1.0), s * (1.0 - s) / span)
}

/// Signed distance from `p` to the triangle boundary and its gradient with
/// respect to the three (reordered) vertices.
fn signed_distance(t: &Tri, p: Point2) -> (f64, [Point2; 3]) {
    let inside = (0..3).all(|e| (t.v[(e + 1) % 3] - t.v[e]).cross(p - t.v[e]) >= 0.0);
    let mut best = (f64::INFINITY, 0usize, 0.0, Point2::default());
    for e in 0..3 {
        let (a, b) = (t.v[e], t.v[(e + 1) % 3]);
        let ab = b - a;
        let s = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
        let q = a + ab * s;
        let dist = (p - q).norm();
        if dist < best.0 {
            best = (dist, e, s, p - q);
        }
    }
    let (dist, e, s, diff) = best;
    let sign = if inside { 1.0 } else { -1.0 };
    // Unit inward direction: the signed distance grows as p moves along it.
    let inward = if dist > 0.0 {
        diff * (sign / dist)
    } else {
        let ab = t.v[(e + 1) % 3] - t.v[e];
        Point2::new(-ab.y, ab.x) * (1.0 / ab.norm())
    };
    let mut grad = [Point2::default(); 3];
    grad[e] = inward * -(1.0 - s);
    grad[(e + 1) % 3] = inward * -s;
    (sign * dist, grad)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::param("tau", format!("must be positive, got {tau}")))
    }
}

struct PixelTerm {
    tri: usize,
    cov: f64,
    dcov: f64,
    grad: [Point2; 3],
}

fn pixel_terms(tris: &[Tri], p: Point2, tau: f64, with_grad: bool, out: &mut Vec<PixelTerm>) {
    out.clear();
    for (k, t) in tris.iter().enumerate() {
        if !t.may_touch(p) {
            continue;
        }
        let (d, grad) = signed_distance(t, p);
        let (cov, dcov) = coverage(d / tau);
        if cov > 0.0 {
            out.push(PixelTerm {
                tri: k,
                cov,
                dcov: if with_grad { dcov / tau } else { 0.0 },
                grad,
            });
        }
    }
}

fn union(terms: &[PixelTerm]) -> f64 {
    1.0 - terms.iter().map(|t| 1.0 - t.cov).product::<f64>()
}

/// Differentiable coverage mask, `m = 1 - Π_f (1 - c_f(p))`.
pub fn rasterize_soft(
    pc: &PointCloud,
    faces: &FaceList,
    canvas: Canvas,
    tau: f64,
) -> Result<RasterMask> {
    check_tau(tau)?;
    faces.check_cloud(pc)?;
    let tris = oriented_tris(pc, faces, SATURATION * tau);
    let w = canvas.width;
    let data: Vec<f64> = (0..canvas.height)
        .into_par_iter()
        .flat_map_iter(|row| {
            let mut terms = Vec::new();
            let tris = &tris;
            (0..w)
                .map(move |col| {
                    pixel_terms(tris, Canvas::center(col, row), tau, false, &mut terms);
                    union(&terms)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(RasterMask::from_parts(w, canvas.height, data, canvas.spacing_mm))
}

/// Vertex gradient of `Σ_p upstream[p] * m(p)`.
///
/// Per-row partial sums are reduced in row order, so the result does not
/// depend on the thread count.
pub fn rasterize_soft_backward(
    pc: &PointCloud,
    faces: &FaceList,
    canvas: Canvas,
    tau: f64,
    upstream: &[f64],
) -> Result<Vec<Point2>> {
    check_tau(tau)?;
    faces.check_cloud(pc)?;
    Error::check_len(canvas.pixel_count(), upstream.len())?;
    let tris = oriented_tris(pc, faces, SATURATION * tau);
    let n = pc.len();
    let w = canvas.width;
    let partials: Vec<Vec<Point2>> = (0..canvas.height)
        .into_par_iter()
        .map(|row| {
            let mut grad = vec![Point2::default(); n];
            let mut terms = Vec::new();
            let mut others = Vec::new();
            for col in 0..w {
                let g = upstream[row * w + col];
                if g == 0.0 {
                    continue;
                }
                pixel_terms(&tris, Canvas::center(col, row), tau, true, &mut terms);
                if terms.is_empty() {
                    continue;
                }
                // others[k] = Π_{j≠k} (1 - c_j) via prefix/suffix products
                others.clear();
                others.resize(terms.len(), 1.0);
                let mut acc = 1.0;
                for (k, t) in terms.iter().enumerate() {
                    others[k] = acc;
                    acc *= 1.0 - t.cov;
                }
                acc = 1.0;
                for (k, t) in terms.iter().enumerate().rev() {
                    others[k] *= acc;
                    acc *= 1.0 - t.cov;
                }
                for (t, &o) in terms.iter().zip(&others) {
                    if t.dcov == 0.0 {
                        continue;
                    }
                    let scale = g * o * t.dcov;
                    let tri = &tris[t.tri];
                    for v in 0..3 {
                        let gv = &mut grad[tri.idx[v]];
                        *gv = *gv + t.grad[v] * scale;
                    }
                }
            }
            grad
        })
        .collect();
    let mut total = vec![Point2::default(); n];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t = *t + p;
        }
    }
    Ok(total)
}
