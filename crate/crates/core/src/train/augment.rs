//! Geometric augmentation applied identically to images, masks and point
//! clouds.

use rand::Rng;

use crate::geometry::{apply_affine, invert_affine, AffineParams, Point2, PointCloud};
use crate::mask::{BinaryMask, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub p_flip_lr: f64,
    pub p_flip_ud: f64,
    pub rotation_deg: f64,
    /// Maximum translation as a fraction of the image size.
    pub translation_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip_lr: 0.5,
            p_flip_ud: 0.0,
            rotation_deg: 30.0,
            translation_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            p_flip_lr: 0.0,
            p_flip_ud: 0.0,
            rotation_deg: 0.0,
            translation_frac: 0.0,
        }
    }
}

/// One drawn transform: flips about the image centre, then rotation about
/// the image centre, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip_lr: bool,
    pub flip_ud: bool,
    pub rotation: f64,
    pub translation: Point2,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            flip_lr: false,
            flip_ud: false,
            rotation: 0.0,
            translation: Point2::default(),
        }
    }

    pub fn draw(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let flip_lr = cfg.p_flip_lr > 0.0 && rng.random_bool(cfg.p_flip_lr.min(1.0));
        let flip_ud = cfg.p_flip_ud > 0.0 && rng.random_bool(cfg.p_flip_ud.min(1.0));
        let rot = cfg.rotation_deg.to_radians();
        let rotation = if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 };
        let (tx, ty) = (cfg.translation_frac * width as f64, cfg.translation_frac * height as f64);
        let translation = Point2::new(
            if tx > 0.0 { rng.random_range(-tx..=tx) } else { 0.0 },
            if ty > 0.0 { rng.random_range(-ty..=ty) } else { 0.0 },
        );
        Self {
            flip_lr,
            flip_ud,
            rotation,
            translation,
        }
    }

    /// Forward map on continuous pixel coordinates of a `width x height` image.
    pub fn affine(&self, width: usize, height: usize) -> AffineParams {
        let c = Point2::new(width as f64 / 2.0, height as f64 / 2.0);
        let fx = if self.flip_lr { -1.0 } else { 1.0 };
        let fy = if self.flip_ud { -1.0 } else { 1.0 };
        let (s, co) = self.rotation.sin_cos();
        // p' = R F (p - c) + c + t
        let a = [co * fx, -s * fy, s * fx, co * fy];
        let lin = |v: Point2| Point2::new(a[0] * v.x + a[1] * v.y, a[2] * v.x + a[3] * v.y);
        let off = c + self.translation - lin(c);
        AffineParams::new([a[0], a[1], off.x, a[2], a[3], off.y])
    }

    fn mirrors(&self) -> bool {
        self.flip_lr != self.flip_ud
    }

    /// Maps the points; a mirroring transform also reverses each chain so the
    /// cloud keeps its orientation convention.
    pub fn apply_points(&self, points: &PointCloud, width: usize, height: usize) -> PointCloud {
        let moved = apply_affine(&self.affine(width, height), points)
            .expect("finite affine keeps the cloud finite");
        if self.mirrors() {
            moved.reversed_chains()
        } else {
            moved
        }
    }

    /// Bilinear resample with zero fill.
    pub fn apply_image(&self, image: &Image) -> Image {
        let (w, h) = (image.width(), image.height());
        let inv = invert_affine(&self.affine(w, h)).expect("rigid map is invertible");
        let mut out = Image::zeros(w, h);
        for r in 0..h {
            for c in 0..w {
                let q = inv.apply_point(Point2::new(c as f64 + 0.5, r as f64 + 0.5));
                out.set(c, r, image.sample_bilinear(q.x, q.y));
            }
        }
        out
    }

    /// Nearest-neighbour resample with background fill.
    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = (mask.width(), mask.height());
        let inv = invert_affine(&self.affine(w, h)).expect("rigid map is invertible");
        BinaryMask::from_fn(w, h, mask.spacing_mm(), |c, r| {
            let q = inv.apply_point(Point2::new(c as f64 + 0.5, r as f64 + 0.5));
            mask.get_signed(q.x.floor() as isize, q.y.floor() as isize)
        })
    }
}

/// Draws one augmentation and applies it to an image and its point cloud.
pub fn augment_sample(
    image: &Image,
    points: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Image, PointCloud) {
    let aug = Augmentation::draw(cfg, image.width(), image.height(), rng);
    (
        aug.apply_image(image),
        aug.apply_points(points, image.width(), image.height()),
    )
}
