//! Synthetic U-ring ("myocardium-like") dataset generator with exact ground
//! truth: images, masks, landmarks, point clouds and warp parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::alignment::LandmarkTriple;
use crate::error::{Error, Result};
use crate::geometry::{
    similarity_to_affine, AffineParams, Point2, PointCloud, SimilarityParams,
};
use crate::mask::{BinaryMask, Image};
use crate::metrics::{connected_components, hole_count};
use crate::raster::{build_faces, rasterize_hard, Canvas, FaceList};
use crate::ssm::{synthesize, DeformParams, ShapeModel};

/// Generator settings. Lengths given as fractions are relative to
/// `min(width, height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub t: usize,
    pub spacing_mm: f64,
    /// Angular extent of the centreline arc, centred on the apex direction.
    pub arc_span_deg: f64,
    /// Horizontal centreline radius.
    pub base_radius: (f64, f64),
    /// Vertical-to-horizontal radius ratio.
    pub aspect: (f64, f64),
    pub thickness: (f64, f64),
    /// Relative amplitude of each smooth wall-thickness variation.
    pub thickness_variation: f64,
    /// Number of low-frequency radial modes (orders 2, 3, ...).
    pub deform_modes: usize,
    /// Maximum relative radial amplitude per mode.
    pub deform_amplitude: f64,
    pub scale: (f64, f64),
    pub rotation_deg: f64,
    /// Maximum translation as a fraction of the image size.
    pub translation_frac: f64,
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels applied to the foreground.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            t: 88,
            spacing_mm: 1.0,
            arc_span_deg: 220.0,
            base_radius: (0.16, 0.21),
            aspect: (1.15, 1.4),
            thickness: (0.08, 0.11),
            thickness_variation: 0.15,
            deform_modes: 2,
            deform_amplitude: 0.06,
            scale: (0.8, 1.2),
            rotation_deg: 25.0,
            translation_frac: 0.1,
            noise_sigma: 0.05,
            blur_sigma: 0.8,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// No shape randomness, no placement jitter, no noise.
    pub fn deterministic(mut self) -> Self {
        let mid = |r: (f64, f64)| (0.5 * (r.0 + r.1), 0.5 * (r.0 + r.1));
        self.base_radius = mid(self.base_radius);
        self.aspect = mid(self.aspect);
        self.thickness = mid(self.thickness);
        self.thickness_variation = 0.0;
        self.deform_amplitude = 0.0;
        self.scale = (1.0, 1.0);
        self.rotation_deg = 0.0;
        self.translation_frac = 0.0;
        self.noise_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 {
            return Err(Error::param("width", format!("must be >= 8, got {}", self.width)));
        }
        if self.height < 8 {
            return Err(Error::param("height", format!("must be >= 8, got {}", self.height)));
        }
        if self.t < PointCloud::MIN_POINTS || self.t % 2 != 0 {
            return Err(Error::param("t", format!("must be even and >= 6, got {}", self.t)));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::param("spacing", "must be positive"));
        }
        if !(self.arc_span_deg > 0.0 && self.arc_span_deg < 360.0) {
            return Err(Error::param("arc_span_deg", "must lie in (0, 360)"));
        }
        for (name, r) in [
            ("base_radius", self.base_radius),
            ("aspect", self.aspect),
            ("thickness", self.thickness),
            ("scale", self.scale),
        ] {
            if !(r.0.is_finite() && r.1.is_finite() && r.0 > 0.0 && r.0 <= r.1) {
                return Err(Error::param(name, format!("range ({}, {}) must be positive and ordered", r.0, r.1)));
            }
        }
        for (name, v) in [
            ("thickness_variation", self.thickness_variation),
            ("deform_amplitude", self.deform_amplitude),
            ("rotation_deg", self.rotation_deg),
            ("translation_frac", self.translation_frac),
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, "must be finite and >= 0"));
            }
        }
        if self.thickness_variation >= 1.0 || self.deform_amplitude >= 0.5 {
            return Err(Error::param("deform_amplitude", "variation too large"));
        }
        Ok(())
    }

    fn size(&self) -> f64 {
        self.width.min(self.height) as f64
    }

    fn centre(&self) -> Point2 {
        Point2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height, self.spacing_mm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub seed: u64,
    pub image: Image,
    pub mask: BinaryMask,
    pub points: PointCloud,
    pub landmarks: LandmarkTriple,
    /// Placement of the sample: maps the un-jittered ring (or, for model
    /// samples, the canonical shape) into the image.
    pub theta_gt: AffineParams,
    pub beta_gt: Option<DeformParams>,
}

/// Shape parameters of one un-jittered ring.
#[derive(Debug, Clone)]
struct RingShape {
    rx: f64,
    ry: f64,
    thickness: f64,
    thick_coef: [f64; 2],
    radial: Vec<(f64, f64)>,
}

const DENSE: usize = 2000;

impl RingShape {
    fn draw(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.size();
        let rx = rng.random_range(cfg.base_radius.0..=cfg.base_radius.1) * s;
        let ry = rx * rng.random_range(cfg.aspect.0..=cfg.aspect.1);
        let thickness = rng.random_range(cfg.thickness.0..=cfg.thickness.1) * s;
        let tv = cfg.thickness_variation;
        let thick_coef = [rng.random_range(-tv..=tv), rng.random_range(-tv..=tv)];
        let a = cfg.deform_amplitude;
        let radial = (0..cfg.deform_modes)
            .map(|_| {
                (
                    rng.random_range(-a..=a),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Self {
            rx,
            ry,
            thickness,
            thick_coef,
            radial,
        }
    }

    /// Dense inner and outer walls, origin at the ellipse centre, apex up (-y).
    fn walls(&self, span: f64) -> (Vec<Point2>, Vec<Point2>) {
        let half = span / 2.0;
        let mut inner = Vec::with_capacity(DENSE);
        let mut outer = Vec::with_capacity(DENSE);
        for k in 0..DENSE {
            let u = k as f64 / (DENSE - 1) as f64;
            let phi = -half + span * u;
            let radial: f64 = self
                .radial
                .iter()
                .enumerate()
                .map(|(m, (amp, phase))| amp * ((m + 2) as f64 * phi + phase).cos())
                .sum();
            let (s, c) = phi.sin_cos();
            let centre = Point2::new(self.rx * s, -self.ry * c) * (1.0 + radial);
            let normal = Point2::new(self.ry * s, -self.rx * c);
            let normal = normal * (1.0 / normal.norm());
            let w = self.thickness
                * (1.0
                    + self.thick_coef[0] * (std::f64::consts::PI * u).sin()
                    + self.thick_coef[1] * (std::f64::consts::TAU * u).sin());
            inner.push(centre - normal * (w / 2.0));
            outer.push(centre + normal * (w / 2.0));
        }
        (inner, outer)
    }
}

fn arc_lengths(pts: &[Point2]) -> Vec<f64> {
    let mut cum = vec![0.0];
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + w[0].dist(w[1]));
    }
    cum
}

fn point_at(pts: &[Point2], cum: &[f64], s: f64) -> Point2 {
    let i = match cum.binary_search_by(|c| c.total_cmp(&s)) {
        Ok(i) => i.min(pts.len() - 2),
        Err(i) => (i.max(1) - 1).min(pts.len() - 2),
    };
    let seg = cum[i + 1] - cum[i];
    let t = if seg > 0.0 { ((s - cum[i]) / seg).clamp(0.0, 1.0) } else { 0.0 };
    pts[i].lerp(pts[i + 1], t)
}

/// Uniform arc-length resampling of an open polyline, endpoints included.
fn resample_open(pts: &[Point2], n: usize) -> Vec<Point2> {
    let cum = arc_lengths(pts);
    let total = *cum.last().unwrap();
    (0..n)
        .map(|k| point_at(pts, &cum, total * k as f64 / (n - 1) as f64))
        .collect()
}

/// Ring in its local frame, centred so that its bounding box centre is the
/// origin; returns the cloud and the analytic apex.
fn base_cloud(shape: &RingShape, cfg: &GenConfig) -> Result<PointCloud> {
    let (inner, outer) = shape.walls(cfg.arc_span_deg.to_radians());
    let n = cfg.t / 2;
    let inner = resample_open(&inner, n);
    let outer = resample_open(&outer, n);
    let pc = PointCloud::from_chains(&inner, &outer)?;
    let (mut lo, mut hi) = (Point2::new(f64::INFINITY, f64::INFINITY), Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in pc.points() {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let mid = lo.midpoint(hi);
    pc.map(|p| p - mid)
}

/// Apex = arc-length midpoint of the outer chain; basal points midway
/// between corresponding chain endpoints.
pub fn landmarks_of(pc: &PointCloud) -> LandmarkTriple {
    let inner = pc.inner();
    let outer = pc.outer();
    let n = inner.len();
    let cum = arc_lengths(outer);
    LandmarkTriple {
        apex: point_at(outer, &cum, cum[n - 1] / 2.0),
        basal_a: inner[0].midpoint(outer[0]),
        basal_b: inner[n - 1].midpoint(outer[n - 1]),
    }
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn point_segment_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_sq();
    let t = if l2 > 0.0 { ((p - a).dot(ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    p.dist(a + ab * t)
}

/// Why a drawn ring was rejected, if it was.
fn ring_defect(pc: &PointCloud, faces: &FaceList, cfg: &GenConfig) -> Option<&'static str> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    if pc.points().iter().any(|p| p.x < 1.0 || p.y < 1.0 || p.x > w - 1.0 || p.y > h - 1.0) {
        return Some("out of bounds");
    }
    let pts = pc.points();
    let sign = |f: &[usize; 3]| (pts[f[1]] - pts[f[0]]).cross(pts[f[2]] - pts[f[0]]);
    // the two strips of the face pattern wind in opposite directions
    let half = faces.len() / 2;
    let s0 = sign(&faces.faces()[0]);
    if faces
        .faces()
        .iter()
        .enumerate()
        .any(|(k, f)| sign(f) * s0 * if k < half { 1.0 } else { -1.0 } <= 0.0)
    {
        return Some("inconsistent face orientation");
    }
    // boundary polygon: inner forward, outer backward
    let n = pc.inner_count();
    let mut ring: Vec<Point2> = pc.inner().to_vec();
    ring.extend(pc.outer().iter().rev());
    let m = ring.len();
    for i in 0..m {
        for j in i + 2..m {
            if i == 0 && j == m - 1 {
                continue;
            }
            if segments_cross(ring[i], ring[(i + 1) % m], ring[j], ring[(j + 1) % m]) {
                return Some("self-intersecting");
            }
        }
    }
    let inner = pc.inner();
    let outer = pc.outer();
    for p in inner {
        let d = outer.windows(2).map(|s| point_segment_dist(*p, s[0], s[1])).fold(f64::INFINITY, f64::min);
        if d <= 2.0 {
            return Some("wall too thin");
        }
    }
    let _ = n;
    None
}

fn render_mask(pc: &PointCloud, faces: &FaceList, cfg: &GenConfig) -> Result<BinaryMask> {
    Ok(rasterize_hard(pc, faces, cfg.canvas())?.threshold(0.5))
}

fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let o = ki as isize - r;
                    let (xx, yy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        s += k * src[yy as usize * w + xx as usize];
                    }
                }
                out[y * w + x] = s;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

const FG_INTENSITY: f64 = 0.7;
const BG_INTENSITY: f64 = 0.3;
const TEXTURE_AMPLITUDE: f64 = 0.04;

fn render_image(mask: &BinaryMask, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (w, h) = (mask.width(), mask.height());
    let fg: Vec<f64> = mask.data().iter().map(|&v| f64::from(v)).collect();
    let soft = gaussian_blur(&fg, w, h, cfg.blur_sigma);
    let fx = rng.random_range(0.03..0.12);
    let fy = rng.random_range(0.03..0.12);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::param("noise_sigma", e.to_string()))?;
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let bg = BG_INTENSITY
                + TEXTURE_AMPLITUDE
                    * (std::f64::consts::TAU * (fx * c as f64 + fy * r as f64) + phase).sin();
            let a = soft[r * w + c];
            let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((a * FG_INTENSITY + (1.0 - a) * bg + n).clamp(0.0, 1.0));
        }
    }
    Image::new(w, h, data)
}

const MAX_REJECTIONS: usize = 100;

fn jitter(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> SimilarityParams {
    let rot = cfg.rotation_deg.to_radians();
    let tr = cfg.translation_frac * cfg.size();
    SimilarityParams {
        scale: rng.random_range(cfg.scale.0..=cfg.scale.1),
        rotation: if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 },
        translation: Point2::new(
            if tr > 0.0 { rng.random_range(-tr..=tr) } else { 0.0 },
            if tr > 0.0 { rng.random_range(-tr..=tr) } else { 0.0 },
        ),
    }
}

/// Places a local-frame shape at the image centre after the jitter.
fn placement(cfg: &GenConfig, j: &SimilarityParams, base_scale: f64) -> AffineParams {
    similarity_to_affine(&SimilarityParams {
        scale: j.scale * base_scale,
        rotation: j.rotation,
        translation: cfg.centre() + j.translation,
    })
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

/// Draws until a valid ring is found, then renders mask and image.
fn draw_sample(
    cfg: &GenConfig,
    faces: &FaceList,
    index: usize,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> Result<(PointCloud, AffineParams, Option<DeformParams>)>,
) -> Result<SyntheticSample> {
    let seed = sample_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = "";
    for _ in 0..=MAX_REJECTIONS {
        let (points, theta, beta) = propose(&mut rng)?;
        if let Some(defect) = ring_defect(&points, faces, cfg) {
            last = defect;
            continue;
        }
        let mask = render_mask(&points, faces, cfg)?;
        if connected_components(&mask) != 1 || hole_count(&mask) != 0 {
            last = "mask not simply connected";
            continue;
        }
        let image = render_image(&mask, cfg, &mut rng)?;
        return Ok(SyntheticSample {
            index,
            seed,
            image,
            mask,
            landmarks: landmarks_of(&points),
            points,
            theta_gt: theta,
            beta_gt: beta,
        });
    }
    Err(Error::InfeasibleConfig(format!(
        "sample {index}: more than {MAX_REJECTIONS} consecutive rejections (last: {last})"
    )))
}

fn collect_ordered(results: Vec<Result<SyntheticSample>>) -> Result<Vec<SyntheticSample>> {
    results.into_iter().collect()
}

/// `n` independent U-ring samples; sample `i` uses seed `cfg.seed + i`.
pub fn generate(cfg: &GenConfig, n: usize) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let faces = build_faces(cfg.t)?;
    let results = (0..n)
        .into_par_iter()
        .map(|i| {
            draw_sample(cfg, &faces, i, |rng| {
                let shape = RingShape::draw(cfg, rng);
                let local = base_cloud(&shape, cfg)?;
                let theta = placement(cfg, &jitter(cfg, rng), 1.0);
                Ok((crate::geometry::apply_affine(&theta, &local)?, theta, None))
            })
        })
        .collect();
    collect_ordered(results)
}

/// RMS radius of the un-jittered ring with mid-range parameters; the image
/// scale at which canonical (unit RMS radius) shapes are placed.
pub fn nominal_scale(cfg: &GenConfig) -> Result<f64> {
    let d = cfg.clone().deterministic();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = RingShape::draw(&d, &mut rng);
    Ok(base_cloud(&shape, &d)?.rms_radius())
}

/// Samples drawn from a shape model: `β_j ~ U(-2√λ_j, 2√λ_j)`, placement
/// jittered around the image centre at [`nominal_scale`].
pub fn generate_from_model(
    model: &ShapeModel,
    faces: &FaceList,
    cfg: &GenConfig,
    n: usize,
) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    faces.check_cloud(model.mean())?;
    let mut cfg = cfg.clone();
    cfg.t = model.point_count();
    let cfg = &cfg;
    let base_scale = nominal_scale(cfg)?;
    let results = (0..n)
        .into_par_iter()
        .map(|i| {
            draw_sample(cfg, faces, i, |rng| {
                let beta = DeformParams::new(
                    model
                        .eigenvalues()
                        .iter()
                        .map(|l| {
                            let b = 2.0 * l.max(0.0).sqrt();
                            if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 }
                        })
                        .collect(),
                );
                let theta = placement(cfg, &jitter(cfg, rng), base_scale);
                Ok((synthesize(model, &theta, &beta)?, theta, Some(beta)))
            })
        })
        .collect();
    collect_ordered(results)
}
