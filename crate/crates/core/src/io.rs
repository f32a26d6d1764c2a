//! Text and PGM file formats: point clouds (`.pts`), landmarks (`.lmk`),
//! shape models (`.ssm`), regressors (`.reg`), soft masks (`.fmask`), binary
//! and ASCII PGM, dataset manifests and `key = value` config files.
//!
//! Writers print reals in shortest round-trip scientific notation, so every
//! value reads back bit-exactly. Parsers never panic; malformed input yields
//! [`Error::Parse`] with a 1-based line number (0 for binary PGM payloads).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::alignment::LandmarkTriple;
use crate::error::{Error, Result};
use crate::geometry::{AffineParams, Point2, PointCloud};
use crate::mask::{BinaryMask, Image, RasterMask};
use crate::ssm::ShapeModel;
use crate::train::regressor::{InputSpec, RegressorModel};

/// Upper bound on element counts accepted by the parsers.
pub const MAX_ELEMENTS: usize = 1 << 26;

/// Whitespace tokens with their 1-based line numbers; `#` starts a comment.
struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| {
                let l = l.split('#').next().unwrap_or("");
                l.split_whitespace().map(move |t| (i + 1, t))
            })
            .collect();
        Self { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .or(self.items.last())
            .map_or(1, |(l, _)| *l)
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let t = self
            .items
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::parse(self.line(), format!("unexpected end of input, expected {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn word(&mut self, expect: &str) -> Result<()> {
        let (l, t) = self.next(expect)?;
        if t == expect {
            Ok(())
        } else {
            Err(Error::parse(l, format!("expected `{expect}`, found `{t}`")))
        }
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let (l, t) = self.next(what)?;
        t.parse()
            .map_err(|_| Error::parse(l, format!("{what}: `{t}` is not a non-negative integer")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let (l, t) = self.next(what)?;
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::parse(l, format!("{what}: `{t}` is not a finite number"))),
        }
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        check_count(n, self.line())?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn finish(&self) -> Result<()> {
        match self.items.get(self.pos) {
            None => Ok(()),
            Some((l, t)) => Err(Error::parse(*l, format!("trailing content `{t}`"))),
        }
    }
}

fn check_count(n: usize, line: usize) -> Result<()> {
    if n > MAX_ELEMENTS {
        Err(Error::parse(line, format!("element count {n} exceeds the limit {MAX_ELEMENTS}")))
    } else {
        Ok(())
    }
}

fn dims(a: usize, b: usize, line: usize) -> Result<usize> {
    let n = a
        .checked_mul(b)
        .ok_or_else(|| Error::parse(line, "dimensions overflow"))?;
    check_count(n, line)?;
    Ok(n)
}

fn push_row(out: &mut String, values: &[f64]) {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

// ---------------------------------------------------------------- .pts

pub fn write_pts(pc: &PointCloud) -> String {
    let mut s = format!("{} {}\n", pc.len(), pc.inner_count());
    for p in pc.points() {
        let _ = writeln!(s, "{:e} {:e}", p.x, p.y);
    }
    s
}

pub fn read_pts(text: &str) -> Result<PointCloud> {
    let mut tk = Tokens::new(text);
    let t = tk.usize("point count")?;
    let line = tk.line();
    let inner = tk.usize("inner count")?;
    check_count(t, line)?;
    if t % 2 != 0 || inner.checked_mul(2) != Some(t) {
        return Err(Error::parse(line, format!("inner count {inner} must be half of {t}")));
    }
    let flat = tk.f64s(2 * t, "coordinate")?;
    tk.finish()?;
    PointCloud::from_flat(&flat).map_err(|e| Error::parse(line, e.to_string()))
}

// ---------------------------------------------------------------- .lmk

pub fn write_lmk(lm: &LandmarkTriple) -> String {
    let mut s = String::new();
    for p in [lm.apex, lm.basal_a, lm.basal_b] {
        let _ = writeln!(s, "{:e} {:e}", p.x, p.y);
    }
    s
}

pub fn read_lmk(text: &str) -> Result<LandmarkTriple> {
    let mut tk = Tokens::new(text);
    let v = tk.f64s(6, "landmark coordinate")?;
    tk.finish()?;
    Ok(LandmarkTriple {
        apex: Point2::new(v[0], v[1]),
        basal_a: Point2::new(v[2], v[3]),
        basal_b: Point2::new(v[4], v[5]),
    })
}

// ---------------------------------------------------------------- .ssm

/// `SSM1 T beta_dim`, mean (`2T`), eigenvalues (`beta_dim`), components
/// (`beta_dim` rows of `2T`).
pub fn write_ssm(model: &ShapeModel) -> String {
    let mut s = format!("SSM1 {} {}\n", model.point_count(), model.beta_dim());
    push_row(&mut s, &model.mean().to_flat());
    push_row(&mut s, model.eigenvalues());
    for row in model.components() {
        push_row(&mut s, row);
    }
    s
}

/// Reads a model; its total variance is taken to be the sum of the stored
/// eigenvalues since the format does not record discarded modes.
pub fn read_ssm(text: &str) -> Result<ShapeModel> {
    let mut tk = Tokens::new(text);
    tk.word("SSM1")?;
    let line = tk.line();
    let t = tk.usize("T")?;
    let k = tk.usize("beta_dim")?;
    let l = dims(2, t, line)?;
    dims(k, l, line)?;
    let mean = tk.f64s(l, "mean")?;
    let eig = tk.f64s(k, "eigenvalue")?;
    let mut comps = Vec::with_capacity(k);
    for _ in 0..k {
        comps.push(tk.f64s(l, "component")?);
    }
    tk.finish()?;
    let mean = PointCloud::from_flat(&mean).map_err(|e| Error::parse(line, e.to_string()))?;
    let total = eig.iter().sum();
    ShapeModel::from_parts(mean, comps, eig, total).map_err(|e| Error::parse(line, e.to_string()))
}

// ---------------------------------------------------------------- .reg

/// `REG1`, `layers n0 .. nk`, `input width height factor offset gain`,
/// `out_offset ..`, `out_scale ..`, then per layer the weight rows
/// (`out x in`, one row per line) followed by the bias line.
pub fn write_reg(reg: &RegressorModel) -> String {
    let mut s = String::from("REG1\nlayers");
    for n in reg.sizes() {
        let _ = write!(s, " {n}");
    }
    let i = reg.input;
    let _ = writeln!(s, "\ninput {} {} {} {:e} {:e}", i.width, i.height, i.factor, i.offset, i.gain);
    s.push_str("out_offset ");
    push_row(&mut s, reg.out_offset());
    s.push_str("out_scale ");
    push_row(&mut s, reg.out_scale());
    for l in 0..reg.sizes().len() - 1 {
        let (w, b) = reg.layer(l);
        for row in w.chunks_exact(reg.sizes()[l]) {
            push_row(&mut s, row);
        }
        push_row(&mut s, b);
    }
    s
}

pub fn read_reg(text: &str) -> Result<RegressorModel> {
    let mut tk = Tokens::new(text);
    tk.word("REG1")?;
    tk.word("layers")?;
    let line = tk.line();
    let mut sizes = Vec::new();
    while tk.items.get(tk.pos).is_some_and(|(l, _)| *l == line) {
        sizes.push(tk.usize("layer size")?);
        check_count(sizes.len(), line)?;
    }
    if sizes.len() < 2 {
        return Err(Error::parse(line, "need at least two layer sizes"));
    }
    let mut total = 0usize;
    for w in sizes.windows(2) {
        let n = dims(w[0], w[1], line)?
            .checked_add(w[1])
            .ok_or_else(|| Error::parse(line, "dimensions overflow"))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::parse(line, "dimensions overflow"))?;
        check_count(total, line)?;
    }
    tk.word("input")?;
    let line_in = tk.line();
    let input = InputSpec {
        width: tk.usize("width")?,
        height: tk.usize("height")?,
        factor: tk.usize("factor")?,
        offset: tk.f64("offset")?,
        gain: tk.f64("gain")?,
    };
    if input.factor == 0 {
        return Err(Error::parse(line_in, "downsample factor must be positive"));
    }
    dims(input.width, input.height, line_in)?;
    let out = *sizes.last().unwrap();
    tk.word("out_offset")?;
    let out_offset = tk.f64s(out, "output offset")?;
    tk.word("out_scale")?;
    let out_scale = tk.f64s(out, "output scale")?;
    let params = tk.f64s(total, "weight")?;
    tk.finish()?;
    RegressorModel::from_parts(input, sizes, params, out_offset, out_scale)
        .map_err(|e| Error::parse(line, e.to_string()))
}

// ---------------------------------------------------------------- .fmask

/// `width height spacing` then row-major values, one image row per line.
pub fn write_fmask(m: &RasterMask) -> String {
    let mut s = format!("{} {} {:e}\n", m.width(), m.height(), m.spacing_mm());
    for row in m.data().chunks(m.width().max(1)) {
        push_row(&mut s, row);
    }
    s
}

pub fn read_fmask(text: &str) -> Result<RasterMask> {
    let mut tk = Tokens::new(text);
    let line = tk.line();
    let w = tk.usize("width")?;
    let h = tk.usize("height")?;
    let spacing = tk.f64("spacing")?;
    let n = dims(w, h, line)?;
    let data = tk.f64s(n, "value")?;
    tk.finish()?;
    RasterMask::new(w, h, data, spacing).map_err(|e| Error::parse(line, e.to_string()))
}

// ---------------------------------------------------------------- PGM

/// Decoded greyscale raster with its declared maximum value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Pgm {
    /// Values scaled to `[0, 1]`.
    pub fn to_image(&self) -> Image {
        let m = f64::from(self.maxval);
        Image::new(self.width, self.height, self.data.iter().map(|v| f64::from(*v) / m).collect())
            .expect("sizes agree by construction")
    }

    /// Foreground where the value is at least half of `maxval`.
    pub fn to_mask(&self, spacing_mm: f64) -> Result<BinaryMask> {
        let half = u32::from(self.maxval).div_ceil(2);
        let data = self.data.iter().map(|v| u8::from(u32::from(*v) >= half)).collect();
        BinaryMask::new(self.width, self.height, data, spacing_mm)
    }
}

/// Reads binary (P5, 8- or 16-bit) or ASCII (P2) PGM.
pub fn read_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let mut line = 1;
    let header = |pos: &mut usize, line: &mut usize| -> Result<String> {
        // skip whitespace and comments
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while let Some(&c) = bytes.get(*pos) {
                        *pos += 1;
                        if c == b'\n' {
                            *line += 1;
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => {
                    if *c == b'\n' {
                        *line += 1;
                    }
                    *pos += 1;
                }
                _ => break,
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace() && *c != b'#') {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::parse(*line, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = header(&mut pos, &mut line)?;
    if magic != "P5" && magic != "P2" {
        return Err(Error::parse(line, format!("unsupported magic `{magic}`")));
    }
    let num = |what: &str, pos: &mut usize, line: &mut usize| -> Result<usize> {
        let t = header(pos, line)?;
        t.parse()
            .map_err(|_| Error::parse(*line, format!("{what}: `{t}` is not a non-negative integer")))
    };
    let width = num("width", &mut pos, &mut line)?;
    let height = num("height", &mut pos, &mut line)?;
    let maxval = num("maxval", &mut pos, &mut line)?;
    if !(1..=65535).contains(&maxval) {
        return Err(Error::parse(line, format!("maxval {maxval} outside 1..=65535")));
    }
    let maxval = maxval as u16;
    let n = dims(width, height, line)?;
    let data = if magic == "P5" {
        // exactly one whitespace byte separates the header from the payload
        if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
            return Err(Error::parse(line, "missing separator before PGM payload"));
        }
        pos += 1;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let payload = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::parse(0, format!("PGM payload truncated: need {need} bytes")))?;
        if bytes.len() > pos + need {
            return Err(Error::parse(0, "trailing bytes after PGM payload"));
        }
        let data: Vec<u16> = if wide {
            payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            payload.iter().map(|&b| u16::from(b)).collect()
        };
        data
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| Error::parse(line, "P2 payload is not text"))?;
        let mut tk = Tokens::new(text);
        let mut data = Vec::with_capacity(n.min(text.len()));
        for _ in 0..n {
            let l = tk.line() + line - 1;
            let v = tk.usize("pixel").map_err(|_| Error::parse(l, "bad or missing pixel value"))?;
            data.push(v as u16);
            if v > usize::from(maxval) {
                return Err(Error::parse(l, format!("pixel {v} exceeds maxval {maxval}")));
            }
        }
        tk.finish()?;
        data
    };
    if data.iter().any(|v| *v > maxval) {
        return Err(Error::parse(0, format!("pixel value exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        data,
    })
}

fn write_p5(width: usize, height: usize, data: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data);
    out
}

/// 8-bit P5 with values `round(255 v)` of `v` clamped to `[0, 1]`.
pub fn write_image_pgm(image: &Image) -> Vec<u8> {
    write_p5(
        image.width(),
        image.height(),
        image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    )
}

/// 8-bit P5 with 255 for foreground.
pub fn write_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    write_p5(mask.width(), mask.height(), mask.data().iter().map(|v| if *v != 0 { 255 } else { 0 }))
}

/// 8-bit P5 rendering of a soft mask, rounded.
pub fn write_raster_pgm(mask: &RasterMask) -> Vec<u8> {
    write_p5(
        mask.width(),
        mask.height(),
        mask.data().iter().map(|v| (v * 255.0).round() as u8),
    )
}

// ---------------------------------------------------------------- manifest.tsv

/// One row of a synthetic dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub theta_gt: AffineParams,
    pub beta_gt: Option<Vec<f64>>,
    pub spacing_mm: f64,
}

pub const MANIFEST_HEADER: &str = "id\tseed\ttheta_gt\tbeta_gt\tspacing";

fn join_csv(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

/// Tab-separated; `theta_gt` and `beta_gt` are comma-separated lists and a
/// missing `beta_gt` is written as `-`.
pub fn write_manifest(rows: &[ManifestRow]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        let beta = r.beta_gt.as_deref().map_or_else(|| "-".to_string(), join_csv);
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:e}",
            r.id,
            r.seed,
            join_csv(&r.theta_gt.theta),
            beta,
            r.spacing_mm
        );
    }
    s
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
        _ => return Err(Error::parse(1, "missing manifest header")),
    }
    let csv = |field: &str, line: usize| -> Result<Vec<f64>> {
        field
            .split(',')
            .map(|t| match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(line, format!("`{t}` is not a finite number"))),
            })
            .collect()
    };
    let mut rows = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = l.trim_end_matches('\r').split('\t').collect();
        if f.len() != 5 {
            return Err(Error::parse(line, format!("expected 5 fields, found {}", f.len())));
        }
        if f[0].is_empty() || f[0].contains(['/', '\\']) || f[0] == "." || f[0] == ".." {
            return Err(Error::parse(line, format!("invalid id `{}`", f[0])));
        }
        let seed = f[1]
            .parse()
            .map_err(|_| Error::parse(line, format!("seed `{}` is not an integer", f[1])))?;
        let th = csv(f[2], line)?;
        let theta: [f64; 6] = th
            .try_into()
            .map_err(|_| Error::parse(line, "theta_gt needs 6 values"))?;
        let beta_gt = if f[3] == "-" { None } else { Some(csv(f[3], line)?) };
        let spacing_mm = match f[4].parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => v,
            _ => return Err(Error::parse(line, format!("spacing `{}` must be a positive number", f[4]))),
        };
        rows.push(ManifestRow {
            id: f[0].to_string(),
            seed,
            theta_gt: AffineParams::new(theta),
            beta_gt,
            spacing_mm,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- config

/// `key = value` lines; blank lines and `#` comments are ignored and a
/// repeated key is an error.
pub fn read_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        let l = l.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::parse(line, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::parse(line, format!("invalid key `{k}`")));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::parse(line, format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

/// Parses one config entry, naming the key on failure.
pub fn config_value<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &'static str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::param(key, format!("cannot parse `{v}`")))
        })
        .transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{build_faces, rasterize_soft, Canvas};
    use crate::ssm::fit_pdm;
    use crate::synthgen::{generate, GenConfig};
    use crate::train::regressor::{init_regressor, TrainConfig, TrainSample};

    fn samples(n: usize) -> Vec<crate::synthgen::SyntheticSample> {
        generate(&GenConfig { seed: 4, ..Default::default() }, n).unwrap()
    }

    #[test]
    fn pts_round_trip_is_exact() {
        let s = &samples(1)[0];
        let back = read_pts(&write_pts(&s.points)).unwrap();
        assert_eq!(back, s.points);
    }

    #[test]
    fn pts_rejects_malformed() {
        assert!(read_pts("").is_err());
        assert!(read_pts("6 2\n0 0\n").is_err());
        assert!(read_pts("4 2\n0 0\n1 0\n1 1\n0 nan\n").is_err());
        let e = read_pts("4 2\n0 0\n1 0\n1 1\n0 1\n9\n").unwrap_err();
        assert_eq!(e, Error::parse(6, "trailing content `9`"));
    }

    #[test]
    fn lmk_round_trip_is_exact() {
        let s = &samples(1)[0];
        assert_eq!(read_lmk(&write_lmk(&s.landmarks)).unwrap(), s.landmarks);
        assert!(read_lmk("1 2\n3 4\n5").is_err());
    }

    #[test]
    fn ssm_round_trip_is_exact() {
        let canon: Vec<PointCloud> = samples(12)
            .iter()
            .map(|s| {
                let c = s.points.centroid();
                let r = s.points.rms_radius();
                s.points.map(|p| (p - c) * (1.0 / r)).unwrap()
            })
            .collect();
        let m = fit_pdm(&canon, 11).unwrap();
        let back = read_ssm(&write_ssm(&m)).unwrap();
        assert_eq!(back.mean(), m.mean());
        assert_eq!(back.components(), m.components());
        assert_eq!(back.eigenvalues(), m.eigenvalues());
        assert!(read_ssm("SSM1 4 1\n0 0").is_err());
        assert!(read_ssm("SSM2 4 1").is_err());
    }

    #[test]
    fn reg_round_trip_is_exact() {
        let gen = samples(10);
        let canon: Vec<PointCloud> = gen
            .iter()
            .map(|s| {
                let c = s.points.centroid();
                s.points.map(|p| p - c).unwrap()
            })
            .collect();
        let m = fit_pdm(&canon, 4).unwrap();
        let data: Vec<TrainSample> = gen
            .into_iter()
            .map(|s| TrainSample { image: s.image, points: s.points, mask: s.mask })
            .collect();
        let cfg = TrainConfig { hidden: vec![5, 3], downsample: 8, ..Default::default() };
        let reg = init_regressor(&m, &data, &cfg).unwrap();
        let back = read_reg(&write_reg(&reg)).unwrap();
        assert_eq!(back, reg);
        let text = write_reg(&reg);
        let cut = &text[..text.len() - 10];
        assert!(read_reg(cut).is_err());
    }

    #[test]
    fn fmask_round_trip_is_exact() {
        let s = &samples(1)[0];
        let soft = rasterize_soft(&s.points, &build_faces(88).unwrap(), Canvas::new(64, 64, 1.5), 0.5).unwrap();
        assert_eq!(read_fmask(&write_fmask(&soft)).unwrap(), soft);
        assert!(read_fmask("2 1 1\n0.5 1.5\n").is_err());
    }

    #[test]
    fn pgm_round_trips() {
        let s = &samples(1)[0];
        let m = read_pgm(&write_mask_pgm(&s.mask)).unwrap().to_mask(1.0).unwrap();
        assert_eq!(m, s.mask);
        let img = read_pgm(&write_image_pgm(&s.image)).unwrap().to_image();
        for (a, b) in img.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_reads_p2_16bit_and_comments() {
        let p2 = b"P2\n# comment\n3 2\n# another\n10\n0 5 10\n10 5 0\n";
        let g = read_pgm(p2).unwrap();
        assert_eq!((g.width, g.height, g.maxval), (3, 2, 10));
        assert_eq!(g.data, vec![0, 5, 10, 10, 5, 0]);
        let m = g.to_mask(1.0).unwrap();
        assert_eq!(m.data(), &[0, 1, 1, 1, 1, 0]);
        let mut p5 = b"P5 2 1 1000\n".to_vec();
        p5.extend([0x03, 0xE8, 0x00, 0x01]);
        assert_eq!(read_pgm(&p5).unwrap().data, vec![1000, 1]);
    }

    #[test]
    fn pgm_rejects_malformed() {
        assert!(read_pgm(b"").is_err());
        assert!(read_pgm(b"P6 1 1 255\n\x00\x00\x00").is_err());
        assert!(read_pgm(b"P5 2 2 255\n\x00").is_err());
        assert!(read_pgm(b"P5 1 1 255\n\x00\x00").is_err());
        assert!(read_pgm(b"P5 99999999 99999999 255\n").is_err());
        assert!(read_pgm(b"P2 1 1 5\n6\n").is_err());
        assert!(read_pgm(b"P5 1 1 0\n\x00").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let rows = vec![
            ManifestRow {
                id: "0000".into(),
                seed: 7,
                theta_gt: AffineParams::new([1.0, 0.1, 3.0, -0.1, 1.0, 4.5]),
                beta_gt: None,
                spacing_mm: 1.0,
            },
            ManifestRow {
                id: "0001".into(),
                seed: 8,
                theta_gt: AffineParams::identity(),
                beta_gt: Some(vec![0.25, -1e-17]),
                spacing_mm: 0.7,
            },
        ];
        assert_eq!(read_manifest(&write_manifest(&rows)).unwrap(), rows);
        assert!(read_manifest("id\tseed\n").is_err());
        let bad = format!("{MANIFEST_HEADER}\n../x\t1\t1,0,0,0,1,0\t-\t1\n");
        assert!(read_manifest(&bad).is_err());
    }

    #[test]
    fn config_parsing() {
        let c = read_config("# c\nseed = 7\n lr=0.01 # trailing\n\n").unwrap();
        assert_eq!(c.get("seed").unwrap(), "7");
        assert_eq!(c.get("lr").unwrap(), "0.01");
        assert_eq!(config_value::<u64>(&c, "seed").unwrap(), Some(7));
        assert!(config_value::<u64>(&c, "lr").is_err());
        assert!(read_config("a = 1\na = 2\n").is_err());
        assert!(read_config("novalue\n").is_err());
    }
}
