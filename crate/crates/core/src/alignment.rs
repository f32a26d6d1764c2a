//! Point-cloud generation from masks: boundary tracing, landmark-anchored
//! splitting into inner/outer chains, arc-length resampling, and
//! Generalized Procrustes Analysis into the canonical domain.

use crate::error::{Error, Result};
use crate::geometry::{
    centroid, estimate_similarity, similarity_to_affine, Point2, PointCloud, SimilarityParams,
};
use crate::mask::{BinaryMask, Image};
use crate::metrics::{connected_components, dice, hole_count};
use crate::raster::{build_faces, rasterize_hard, Canvas};

/// One apex and two basal landmarks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkTriple {
    pub apex: Point2,
    pub basal_a: Point2,
    pub basal_b: Point2,
}

impl LandmarkTriple {
    pub fn swapped(&self) -> Self {
        Self {
            apex: self.apex,
            basal_a: self.basal_b,
            basal_b: self.basal_a,
        }
    }
}

/// Traces the boundary of a single simply connected foreground region along
/// pixel edges. Vertices are integer pixel corners, one per unit step, with
/// positive shoelace area in the x/y frame. Diagonally touching pixels are
/// joined (8-connectivity).
pub fn extract_contour(mask: &BinaryMask) -> Result<Vec<Point2>> {
    let cc = connected_components(mask);
    if cc != 1 {
        return Err(Error::NotSimplyConnected(format!(
            "{cc} foreground components"
        )));
    }
    let holes = hole_count(mask);
    if holes != 0 {
        return Err(Error::NotSimplyConnected(format!("{holes} holes")));
    }

    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let fg = |c: i64, r: i64| mask.get_signed(c as isize, r as isize);
    // Directed edges keyed by start vertex; at most two leave any vertex.
    let stride = w + 1;
    let key = |x: i64, y: i64| (y * stride + x) as usize;
    let mut out_edges: Vec<[Option<(i64, i64)>; 2]> = vec![[None; 2]; ((w + 1) * (h + 1)) as usize];
    let mut edge_count = 0usize;
    let mut push = |from: (i64, i64), to: (i64, i64)| {
        let slot = &mut out_edges[key(from.0, from.1)];
        if slot[0].is_none() {
            slot[0] = Some(to);
        } else {
            slot[1] = Some(to);
        }
        edge_count += 1;
    };
    for r in 0..h {
        for c in 0..w {
            if !fg(c, r) {
                continue;
            }
            if !fg(c, r - 1) {
                push((c, r), (c + 1, r));
            }
            if !fg(c + 1, r) {
                push((c + 1, r), (c + 1, r + 1));
            }
            if !fg(c, r + 1) {
                push((c + 1, r + 1), (c, r + 1));
            }
            if !fg(c - 1, r) {
                push((c, r + 1), (c, r));
            }
        }
    }

    // Start at the first vertex in row-major order that has an outgoing edge.
    let start = (0..(w + 1) * (h + 1))
        .find(|&i| out_edges[i as usize][0].is_some())
        .map(|i| (i % stride, i / stride))
        .ok_or_else(|| Error::NotSimplyConnected("empty mask".into()))?;
    let first = out_edges[key(start.0, start.1)][0].unwrap();

    let mut contour = vec![Point2::new(start.0 as f64, start.1 as f64)];
    let mut prev = start;
    let mut cur = first;
    let mut used = 1usize;
    while cur != start || used == 0 {
        contour.push(Point2::new(cur.0 as f64, cur.1 as f64));
        let slot = out_edges[key(cur.0, cur.1)];
        let next = match slot {
            [Some(a), None] => a,
            [Some(a), Some(b)] => {
                // pinch vertex: take the clockwise turn to stay on the same
                // 8-connected region
                let din = (cur.0 - prev.0, cur.1 - prev.1);
                let da = (a.0 - cur.0, a.1 - cur.1);
                if din.0 * da.1 - din.1 * da.0 < 0 {
                    a
                } else {
                    b
                }
            }
            _ => return Err(Error::NotSimplyConnected("open boundary".into())),
        };
        prev = cur;
        cur = next;
        used += 1;
        if used > edge_count {
            return Err(Error::NotSimplyConnected("boundary does not close".into()));
        }
    }
    if used != edge_count {
        return Err(Error::NotSimplyConnected(format!(
            "boundary has {} loops",
            if used < edge_count { "several" } else { "inconsistent" }
        )));
    }
    Ok(contour)
}

/// Closed polyline with cumulative arc length.
struct ClosedCurve {
    pts: Vec<Point2>,
    /// `cum[i]` = arc length from vertex 0 to vertex i; `cum[n]` = total.
    cum: Vec<f64>,
}

impl ClosedCurve {
    fn new(pts: Vec<Point2>) -> Self {
        let n = pts.len();
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for i in 0..n {
            let d = pts[i].dist(pts[(i + 1) % n]);
            cum.push(cum[i] + d);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        self.cum[self.pts.len()]
    }

    fn wrap(&self, s: f64) -> f64 {
        s.rem_euclid(self.length())
    }

    fn at(&self, s: f64) -> Point2 {
        let s = self.wrap(s);
        let n = self.pts.len();
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i - 1,
        };
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        self.pts[i].lerp(self.pts[(i + 1) % n], t)
    }

    /// Arc parameter of the closest point on the curve.
    fn project(&self, q: Point2) -> (f64, f64) {
        let n = self.pts.len();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..n {
            let (a, b) = (self.pts[i], self.pts[(i + 1) % n]);
            let ab = b - a;
            let l2 = ab.norm_sq();
            let t = if l2 > 0.0 { ((q - a).dot(ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
            let d = q.dist(a + ab * t);
            if d < best.0 {
                best = (d, self.cum[i] + t * (self.cum[i + 1] - self.cum[i]));
            }
        }
        (best.1, best.0)
    }
}

const SMOOTHING_ROUNDS: usize = 4;

/// Rounds of edge-midpoint corner cutting; turns pixel staircases into
/// curves whose arc length tracks the underlying boundary.
fn smooth_closed(pts: &[Point2], rounds: usize) -> Vec<Point2> {
    let mut cur = pts.to_vec();
    for _ in 0..rounds {
        let n = cur.len();
        cur = (0..n).map(|i| cur[i].midpoint(cur[(i + 1) % n])).collect();
    }
    cur
}

/// A directed stretch of a closed curve: `start + dir * u` for `u in [0, len]`.
struct Piece<'a> {
    curve: &'a ClosedCurve,
    start: f64,
    dir: f64,
    len: f64,
}

impl Piece<'_> {
    fn at(&self, u: f64) -> Point2 {
        self.curve.at(self.start + self.dir * u)
    }
}

/// Maximum deviation of a basal cap from a straight segment.
const CAP_TOLERANCE: f64 = 1.0;
/// Corner position relative to the first out-of-tolerance step, in units of
/// the tolerance.
const CAP_BACKOFF: f64 = 0.8;
const CAP_STEP: f64 = 0.1;
const CAP_SAMPLE: f64 = 0.25;

/// Half-length of the straight cap joining the chains at one basal end.
/// `arm_a(u)` and `arm_b(u)` walk away from the projected landmark on either
/// side. The cap is the longest symmetric stretch that stays within
/// [`CAP_TOLERANCE`] of its chord; past the corners the walls bend away and
/// the deviation grows roughly linearly.
fn cap_half_length(arm_a: impl Fn(f64) -> Point2, arm_b: impl Fn(f64) -> Point2, limit: f64) -> f64 {
    let mut u = CAP_STEP;
    while u < limit {
        let (p, q) = (arm_a(u), arm_b(u));
        let d = q - p;
        let len = d.norm();
        if len > 0.0 {
            let samples = (u / CAP_SAMPLE).ceil() as usize;
            let dev = (0..=samples)
                .flat_map(|k| {
                    let v = u * k as f64 / samples as f64;
                    [arm_a(v), arm_b(v)]
                })
                .map(|x| (x - p).cross(d).abs() / len)
                .fold(0.0, f64::max);
            if dev > CAP_TOLERANCE {
                return (u - CAP_BACKOFF * CAP_TOLERANCE).max(0.0);
            }
        }
        u += CAP_STEP;
    }
    0.0
}

fn resample(piece: &Piece, u0: f64, u1: f64, n: usize) -> Vec<Point2> {
    (0..n)
        .map(|k| piece.at(u0 + (u1 - u0) * k as f64 / (n - 1) as f64))
        .collect()
}

/// Splits a closed contour at the two basal landmarks and resamples each
/// side to `T/2` arc-length-uniform points.
///
/// The side not containing the apex is the inner chain. Both chains run
/// from the `basal_a` end to the `basal_b` end, so index 0 is the inner
/// point at `basal_a`. The straight basal caps joining the chains are
/// trimmed off before resampling.
pub fn split_and_resample(
    contour: &[Point2],
    landmarks: &LandmarkTriple,
    t: usize,
) -> Result<PointCloud> {
    if t < PointCloud::MIN_POINTS || t % 2 != 0 {
        return Err(Error::param("t", format!("must be even and >= 6, got {t}")));
    }
    if contour.len() < 3 {
        return Err(Error::DegenerateSplit("contour has fewer than 3 vertices".into()));
    }
    let curve = ClosedCurve::new(smooth_closed(contour, SMOOTHING_ROUNDS));
    let total = curve.length();
    let (sa, _) = curve.project(landmarks.basal_a);
    let (sb, _) = curve.project(landmarks.basal_b);
    let (sx, _) = curve.project(landmarks.apex);
    let fwd = (sb - sa).rem_euclid(total);
    if fwd < 1e-6 || total - fwd < 1e-6 {
        return Err(Error::DegenerateSplit(
            "basal landmarks project to the same contour location".into(),
        ));
    }
    let apex_fwd = (sx - sa).rem_euclid(total) < fwd;
    let forward = Piece {
        curve: &curve,
        start: sa,
        dir: 1.0,
        len: fwd,
    };
    let backward = Piece {
        curve: &curve,
        start: sa,
        dir: -1.0,
        len: total - fwd,
    };
    let (inner, outer) = if apex_fwd {
        (backward, forward)
    } else {
        (forward, backward)
    };
    let limit = 0.45 * inner.len.min(outer.len);
    let cap_a = cap_half_length(|u| inner.at(u), |u| outer.at(u), limit);
    let cap_b = cap_half_length(
        |u| inner.at(inner.len - u),
        |u| outer.at(outer.len - u),
        limit,
    );
    let n = t / 2;
    let chain = |piece: &Piece| {
        let u1 = (piece.len - cap_b).max(cap_a);
        resample(piece, cap_a, u1, n)
    };
    PointCloud::from_chains(&chain(&inner), &chain(&outer))
}

/// Result of Generalized Procrustes Analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct GpaResult {
    /// Average of the aligned shapes.
    pub mean: PointCloud,
    /// Canonical-domain shapes.
    pub aligned: Vec<PointCloud>,
    /// Similarity taking each input shape onto its aligned version.
    pub transforms: Vec<SimilarityParams>,
    pub iterations: usize,
}

pub const GPA_TOLERANCE: f64 = 1e-8;
pub const GPA_MAX_ITERS: usize = 100;

fn basal_axis(pc: &PointCloud) -> Point2 {
    let n = pc.inner_count();
    let p = pc.points();
    let a = p[0].midpoint(p[n]);
    let b = p[n - 1].midpoint(p[2 * n - 1]);
    b - a
}

fn rotate(pts: &[Point2], angle: f64) -> Vec<Point2> {
    let (s, c) = angle.sin_cos();
    pts.iter()
        .map(|p| Point2::new(c * p.x - s * p.y, s * p.x + c * p.y))
        .collect()
}

/// Centroid 0, RMS radius 1.
fn normalize(pts: &[Point2]) -> Result<Vec<Point2>> {
    let c = centroid(pts);
    let centered: Vec<Point2> = pts.iter().map(|p| *p - c).collect();
    let rms = (centered.iter().map(|p| p.norm_sq()).sum::<f64>() / pts.len() as f64).sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return Err(Error::DegenerateConfiguration("shape has zero extent".into()));
    }
    Ok(centered.iter().map(|p| *p * (1.0 / rms)).collect())
}

fn average(shapes: &[Vec<Point2>]) -> Vec<Point2> {
    let k = shapes.len() as f64;
    let mut out = vec![Point2::default(); shapes[0].len()];
    for s in shapes {
        for (o, p) in out.iter_mut().zip(s) {
            *o = *o + *p;
        }
    }
    out.iter().map(|p| *p * (1.0 / k)).collect()
}

/// Iterative GPA. The gauge is fixed by the first shape: centroid at the
/// origin, unit RMS radius, basal axis (`basal_a` end to `basal_b` end)
/// along `+x`. Every intermediate mean is renormalised and rotated back onto
/// that reference.
pub fn gpa(shapes: &[PointCloud]) -> Result<GpaResult> {
    if shapes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "GPA needs at least 2 shapes, got {}",
            shapes.len()
        )));
    }
    let t = shapes[0].len();
    for s in shapes {
        Error::check_len(t, s.len())?;
    }
    let axis = basal_axis(&shapes[0]);
    let reference = rotate(&normalize(shapes[0].points())?, -axis.y.atan2(axis.x));

    let align_all = |target: &[Point2]| -> Result<(Vec<Vec<Point2>>, Vec<SimilarityParams>)> {
        let mut aligned = Vec::with_capacity(shapes.len());
        let mut transforms = Vec::with_capacity(shapes.len());
        for s in shapes {
            let sim = estimate_similarity(s.points(), target)?;
            let a = similarity_to_affine(&sim);
            aligned.push(s.points().iter().map(|p| a.apply_point(*p)).collect());
            transforms.push(sim);
        }
        Ok((aligned, transforms))
    };

    let mut mean = reference.clone();
    let mut iterations = 0;
    while iterations < GPA_MAX_ITERS {
        iterations += 1;
        let (aligned, _) = align_all(&mean)?;
        let next = normalize(&average(&aligned))?;
        let back = estimate_similarity(&next, &reference)?;
        let next = rotate(&next, back.rotation);
        let movement = (next
            .iter()
            .zip(&mean)
            .map(|(a, b)| (*a - *b).norm_sq())
            .sum::<f64>()
            / t as f64)
            .sqrt();
        mean = next;
        if movement < GPA_TOLERANCE {
            break;
        }
    }
    let (aligned, transforms) = align_all(&mean)?;
    let mean = PointCloud::new(average(&aligned))?;
    let aligned = aligned
        .into_iter()
        .map(PointCloud::new)
        .collect::<Result<Vec<_>>>()?;
    Ok(GpaResult {
        mean,
        aligned,
        transforms,
        iterations,
    })
}

/// Input to [`build_quadruples`].
#[derive(Debug, Clone)]
pub struct RawSample {
    pub id: String,
    pub image: Image,
    pub mask: BinaryMask,
    pub landmarks: LandmarkTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceQuadruple {
    pub image_id: String,
    pub image: Image,
    pub mask: BinaryMask,
    /// Image-domain cloud.
    pub p_image: PointCloud,
    /// Canonical-domain cloud.
    pub p_canonical: PointCloud,
    /// Similarity mapping `p_image` onto `p_canonical`.
    pub to_canonical: SimilarityParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct QuadrupleSet {
    pub quadruples: Vec<CorrespondenceQuadruple>,
    pub mean: PointCloud,
    pub excluded: Vec<Exclusion>,
}

/// Samples whose resampled cloud renders below this Dice are dropped.
pub const DEFAULT_MIN_DICE: f64 = 0.90;

/// Resamples one mask into an image-domain point cloud and reports the Dice
/// of its hard render against the mask.
pub fn mask_to_cloud(mask: &BinaryMask, landmarks: &LandmarkTriple, t: usize) -> Result<(PointCloud, f64)> {
    let contour = extract_contour(mask)?;
    let pc = split_and_resample(&contour, landmarks, t)?;
    let faces = build_faces(t)?;
    let canvas = Canvas::new(mask.width(), mask.height(), mask.spacing_mm());
    let render = rasterize_hard(&pc, &faces, canvas)?.threshold(0.5);
    let d = dice(&render, mask)?;
    Ok((pc, d))
}

/// Builds image-domain and canonical-domain clouds for every usable sample.
pub fn build_quadruples(samples: &[RawSample], t: usize, min_dice: f64) -> Result<QuadrupleSet> {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for s in samples {
        match mask_to_cloud(&s.mask, &s.landmarks, t) {
            Ok((pc, d)) if d >= min_dice => kept.push((s, pc)),
            Ok((_, d)) => excluded.push(Exclusion {
                image_id: s.id.clone(),
                reason: format!("resampled cloud renders to Dice {d:.4} < {min_dice}"),
            }),
            Err(e) => excluded.push(Exclusion {
                image_id: s.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    if kept.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} usable samples after exclusion",
            kept.len()
        )));
    }
    let clouds: Vec<PointCloud> = kept.iter().map(|(_, pc)| pc.clone()).collect();
    let g = gpa(&clouds)?;
    let quadruples = kept
        .into_iter()
        .zip(g.aligned)
        .zip(g.transforms)
        .map(|(((s, pc), canon), sim)| CorrespondenceQuadruple {
            image_id: s.id.clone(),
            image: s.image.clone(),
            mask: s.mask.clone(),
            p_image: pc,
            p_canonical: canon,
            to_canonical: sim,
        })
        .collect();
    Ok(QuadrupleSet {
        quadruples,
        mean: g.mean,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_affine, polygon_signed_area};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pixel_contour() {
        let m = BinaryMask::from_fn(3, 3, 1.0, |c, r| c == 1 && r == 1);
        let c = extract_contour(&m).unwrap();
        assert_eq!(
            c,
            vec![
                Point2::new(1.0, 1.0),
                Point2::new(2.0, 1.0),
                Point2::new(2.0, 2.0),
                Point2::new(1.0, 2.0)
            ]
        );
        assert!(polygon_signed_area(&c) > 0.0);
    }

    #[test]
    fn rectangle_contour_has_perimeter_vertices() {
        let m = BinaryMask::from_fn(14, 8, 1.0, |c, r| (2..12).contains(&c) && (2..6).contains(&r));
        let c = extract_contour(&m).unwrap();
        assert_eq!(c.len(), 2 * (10 + 4));
        assert_eq!(polygon_signed_area(&c), 40.0);
    }

    #[test]
    fn contour_rejects_bad_topology() {
        let two = BinaryMask::from_fn(5, 5, 1.0, |c, r| (c, r) == (0, 0) || (c, r) == (3, 3));
        assert!(matches!(extract_contour(&two), Err(Error::NotSimplyConnected(_))));
        let holed = BinaryMask::from_fn(5, 5, 1.0, |c, r| {
            (1..=3).contains(&c) && (1..=3).contains(&r) && (c, r) != (2, 2)
        });
        assert!(matches!(extract_contour(&holed), Err(Error::NotSimplyConnected(_))));
    }

    #[test]
    fn contour_through_diagonal_pinch() {
        let m = BinaryMask::from_fn(4, 4, 1.0, |c, r| (c, r) == (1, 1) || (c, r) == (2, 2));
        let c = extract_contour(&m).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(polygon_signed_area(&c), 2.0);
    }

    /// Thick U: two vertical bars joined by a bottom bar, opening upward.
    fn u_mask() -> (BinaryMask, LandmarkTriple) {
        let m = BinaryMask::from_fn(30, 30, 1.0, |c, r| {
            let left = (5..10).contains(&c) && (5..25).contains(&r);
            let right = (20..25).contains(&c) && (5..25).contains(&r);
            let bottom = (5..25).contains(&c) && (20..25).contains(&r);
            left || right || bottom
        });
        let lm = LandmarkTriple {
            apex: Point2::new(15.0, 25.0),
            basal_a: Point2::new(7.5, 5.0),
            basal_b: Point2::new(22.5, 5.0),
        };
        (m, lm)
    }

    #[test]
    fn split_identifies_inner_chain_and_orientation() {
        let (m, lm) = u_mask();
        let c = extract_contour(&m).unwrap();
        let pc = split_and_resample(&c, &lm, 8).unwrap();
        let inner = pc.inner();
        let outer = pc.outer();
        // Inner corners near (10,5)/(20,5); outer near (5,5)/(25,5).
        assert!(inner[0].dist(Point2::new(10.0, 5.0)) < 1.0, "{:?}", inner[0]);
        assert!(inner[3].dist(Point2::new(20.0, 5.0)) < 1.0, "{:?}", inner[3]);
        assert!(outer[0].dist(Point2::new(5.0, 5.0)) < 1.0, "{:?}", outer[0]);
        assert!(outer[3].dist(Point2::new(25.0, 5.0)) < 1.0, "{:?}", outer[3]);
        // analytic arc-length positions on the inner arc: (10,5)->(10,20)->(20,20)->(20,5), length 40
        let analytic = |s: f64| {
            if s <= 15.0 {
                Point2::new(10.0, 5.0 + s)
            } else if s <= 25.0 {
                Point2::new(10.0 + s - 15.0, 20.0)
            } else {
                Point2::new(20.0, 20.0 - (s - 25.0))
            }
        };
        for (k, p) in inner.iter().enumerate() {
            let want = analytic(40.0 * k as f64 / 3.0);
            assert!(p.dist(want) < 1.0, "inner {k}: {p:?} vs {want:?}");
        }
        let outer_analytic = |s: f64| {
            if s <= 20.0 {
                Point2::new(5.0, 5.0 + s)
            } else if s <= 40.0 {
                Point2::new(5.0 + s - 20.0, 25.0)
            } else {
                Point2::new(25.0, 25.0 - (s - 40.0))
            }
        };
        for (k, p) in outer.iter().enumerate() {
            let want = outer_analytic(60.0 * k as f64 / 3.0);
            assert!(p.dist(want) < 1.0, "outer {k}: {p:?} vs {want:?}");
        }
    }

    #[test]
    fn swapped_basal_landmarks_reverse_chains() {
        let (m, lm) = u_mask();
        let c = extract_contour(&m).unwrap();
        let a = split_and_resample(&c, &lm, 20).unwrap();
        let b = split_and_resample(&c, &lm.swapped(), 20).unwrap();
        assert!(a.reversed_chains().rmsd(&b).unwrap() < 1e-9);
    }

    #[test]
    fn coincident_basal_projections_rejected() {
        let (m, mut lm) = u_mask();
        lm.basal_b = lm.basal_a;
        let c = extract_contour(&m).unwrap();
        assert!(matches!(split_and_resample(&c, &lm, 8), Err(Error::DegenerateSplit(_))));
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> SimilarityParams {
        SimilarityParams {
            scale: rng.random_range(0.5..3.0),
            rotation: rng.random_range(-3.0..3.0),
            translation: Point2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)),
        }
    }

    fn base_ring() -> PointCloud {
        let n = 10;
        let inner: Vec<Point2> = (0..n)
            .map(|i| {
                let a = 0.3 + 2.5 * i as f64 / (n - 1) as f64;
                Point2::new(a.cos() * 2.0, a.sin() * 2.0 + 0.1 * i as f64)
            })
            .collect();
        let outer: Vec<Point2> = (0..n)
            .map(|i| {
                let a = 0.3 + 2.5 * i as f64 / (n - 1) as f64;
                Point2::new(a.cos() * 3.0, a.sin() * 3.2)
            })
            .collect();
        PointCloud::from_chains(&inner, &outer).unwrap()
    }

    #[test]
    fn gpa_recovers_common_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = base_ring();
        let shapes: Vec<PointCloud> = (0..6)
            .map(|_| apply_affine(&similarity_to_affine(&random_similarity(&mut rng)), &base).unwrap())
            .collect();
        let g = gpa(&shapes).unwrap();
        for a in &g.aligned {
            for b in &g.aligned {
                assert!(a.rmsd(b).unwrap() < 1e-6);
            }
        }
        // mean equals the base shape up to a similarity
        let sim = estimate_similarity(base.points(), g.mean.points()).unwrap();
        let mapped = apply_affine(&similarity_to_affine(&sim), &base).unwrap();
        assert!(mapped.rmsd(&g.mean).unwrap() < 1e-6);
        assert!(g.mean.centroid().norm() < 1e-9);
        assert!((g.mean.rms_radius() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gpa_two_shapes_mean_is_midpoint() {
        let base = base_ring();
        let other = base.map(|p| Point2::new(p.x * 1.1 + 0.2 * p.y, p.y)).unwrap();
        let g = gpa(&[base, other]).unwrap();
        let mid: Vec<Point2> = g.aligned[0]
            .points()
            .iter()
            .zip(g.aligned[1].points())
            .map(|(a, b)| a.midpoint(*b))
            .collect();
        assert!(PointCloud::new(mid).unwrap().rmsd(&g.mean).unwrap() < 1e-12);
    }

    #[test]
    fn gpa_repeated_shape_gives_identical_copies() {
        let base = base_ring();
        let g = gpa(&[base.clone(), base]).unwrap();
        assert!(g.aligned[0].rmsd(&g.aligned[1]).unwrap() < 1e-12);
    }

    #[test]
    fn gpa_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = base_ring();
        let shapes: Vec<PointCloud> = (0..5)
            .map(|_| {
                let noisy = base
                    .map(|p| p + Point2::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
                    .unwrap();
                apply_affine(&similarity_to_affine(&random_similarity(&mut rng)), &noisy).unwrap()
            })
            .collect();
        let common = similarity_to_affine(&random_similarity(&mut rng));
        let moved: Vec<PointCloud> = shapes.iter().map(|s| apply_affine(&common, s).unwrap()).collect();
        let g1 = gpa(&shapes).unwrap();
        let g2 = gpa(&moved).unwrap();
        for (a, b) in g1.aligned.iter().zip(&g2.aligned) {
            assert!(a.rmsd(b).unwrap() < 1e-6);
        }
    }

    #[test]
    fn quadruples_report_exclusions() {
        let (m, lm) = u_mask();
        let img = Image::zeros(30, 30);
        let shifted = BinaryMask::from_fn(30, 30, 1.0, |c, r| r >= 1 && m.get(c, r - 1));
        let lm2 = LandmarkTriple {
            apex: lm.apex + Point2::new(0.0, 1.0),
            basal_a: lm.basal_a + Point2::new(0.0, 1.0),
            basal_b: lm.basal_b + Point2::new(0.0, 1.0),
        };
        let broken = BinaryMask::from_fn(30, 30, 1.0, |c, r| (c, r) == (1, 1) || (c, r) == (9, 9));
        let samples = vec![
            RawSample { id: "a".into(), image: img.clone(), mask: m.clone(), landmarks: lm },
            RawSample { id: "b".into(), image: img.clone(), mask: shifted, landmarks: lm2 },
            RawSample { id: "c".into(), image: img, mask: broken, landmarks: lm },
        ];
        let set = build_quadruples(&samples, 40, DEFAULT_MIN_DICE).unwrap();
        assert_eq!(set.quadruples.len(), 2);
        assert_eq!(set.excluded.len(), 1);
        assert_eq!(set.excluded[0].image_id, "c");
        assert!(set.excluded[0].reason.contains("not simply connected"));
        assert!(build_quadruples(&samples[2..], 40, DEFAULT_MIN_DICE).is_err());
    }
}
