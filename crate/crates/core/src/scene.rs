//! Procedural face-like scenes with a segmented ground-truth factor vector.
//!
//! Four segments of four factors each drive four layers painted back to
//! front: `background` (base RGB and a vertical falloff), `face` (ellipse
//! center-y, size and two tone factors), `eyes` (horizontal spread, height,
//! radius, iris tone) and `mouth` (bar width, height, thickness, tone). Each
//! layer is composited with a smoothstep edge one pixel wide, and a layer only
//! touches pixels where its coverage is nonzero, so changing one segment can
//! only change pixels in that segment's [`segment_region`] before or after the
//! change.

use std::ops::Range;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::io::{BinReader, BinWriter};
use crate::nn::Rng;

pub const DATASET_MAGIC: &[u8; 4] = b"LLDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
}

pub const SEGMENT_NAMES: [&str; 4] = ["background", "face", "eyes", "mouth"];

impl Default for SceneSpec {
    fn default() -> Self {
        Self::with_size(32, 32)
    }
}

impl SceneSpec {
    /// The standard four-segment layout at a custom resolution.
    pub fn with_size(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            segments: SEGMENT_NAMES
                .iter()
                .map(|n| Segment {
                    name: (*n).to_string(),
                    dim: 4,
                })
                .collect(),
        }
    }

    pub fn factor_dim(&self) -> usize {
        self.segments.iter().map(|s| s.dim).sum()
    }

    /// Number of image values `height · width · 3`.
    pub fn n(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn segment_range(&self, name: &str) -> Option<Range<usize>> {
        let mut start = 0;
        for s in &self.segments {
            if s.name == name {
                return Some(start..start + s.dim);
            }
            start += s.dim;
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidInput("scene size must be nonzero".into()));
        }
        if self.segments.is_empty() || self.segments.iter().any(|s| s.dim == 0) {
            return Err(Error::InvalidInput("every segment needs a nonzero dim".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if self.segments[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::InvalidInput(format!("duplicate segment `{}`", s.name)));
            }
        }
        Ok(())
    }

    /// Whether [`render_scene`] understands this layout.
    pub fn is_renderable(&self) -> bool {
        self.segments.len() == 4
            && self
                .segments
                .iter()
                .zip(SEGMENT_NAMES)
                .all(|(s, n)| s.name == n && s.dim == 4)
    }
}

/// Ground-truth scene factors, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorVector(pub Vec<f64>);

impl FactorVector {
    pub fn new(values: Vec<f64>, spec: &SceneSpec) -> Result<Self> {
        let f = Self(values);
        f.validate(spec)?;
        Ok(f)
    }

    pub fn validate(&self, spec: &SceneSpec) -> Result<()> {
        if self.0.len() != spec.factor_dim() {
            return Err(Error::dims("factor vector", spec.factor_dim(), self.0.len()));
        }
        if let Some((i, v)) = self.0.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("factor {i} = {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major `height × width × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::dims("image buffer", height * width * 3, pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Same as [`Image::new`] but clamps values into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Copies the rectangle `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidInput(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            out.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Image::new(h, w, out)
    }

    /// Places images left to right, padding shorter ones with white.
    pub fn hstack(images: &[&Image]) -> Result<Image> {
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width: usize = images.iter().map(|i| i.width).sum();
        let mut out = vec![1.0; height * width * 3];
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..img.width {
                    let src = (y * img.width + x) * 3;
                    let dst = (y * width + x0 + x) * 3;
                    out[dst..dst + 3].copy_from_slice(&img.pixels[src..src + 3]);
                }
            }
            x0 += img.width;
        }
        Image::new(height, width, out)
    }

    /// 8-bit values `round(255 · v)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (255.0 * v).round() as u8).collect()
    }

    /// Writes an 8-bit PNG, optionally upscaled by pixel replication.
    pub fn save_png(&self, path: &Path, scale: usize) -> Result<()> {
        let scale = scale.max(1);
        let raw = self.to_rgb8();
        let (w, h) = (self.width * scale, self.height * scale);
        let mut buf = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let i = ((y / scale) * self.width + x / scale) * 3;
                buf.extend_from_slice(&raw[i..i + 3]);
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer_with_format(path, &buf, w as u32, h as u32, image::ColorType::Rgb8, image::ImageFormat::Png)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

pub fn sample_factors(rng: &mut Rng, spec: &SceneSpec) -> FactorVector {
    FactorVector((0..spec.factor_dim()).map(|_| rng.uniform()).collect())
}

#[inline]
fn coverage(signed_dist: f64) -> f64 {
    let t = (0.5 - signed_dist).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Geometry and colours decoded from a factor vector, in pixel units.
struct Layout {
    bg_color: [f64; 3],
    bg_falloff: f64,
    face_center: (f64, f64),
    face_axes: (f64, f64),
    face_color: [f64; 3],
    eye_centers: [(f64, f64); 2],
    eye_radius: f64,
    eye_color: [f64; 3],
    mouth_center: (f64, f64),
    mouth_half: (f64, f64),
    mouth_color: [f64; 3],
}

impl Layout {
    fn new(f: &[f64], spec: &SceneSpec) -> Self {
        // geometry authored on a 32×32 grid
        let sx = spec.width as f64 / 32.0;
        let sy = spec.height as f64 / 32.0;
        let s = sx.min(sy);
        let (b, fa, e, m) = (&f[0..4], &f[4..8], &f[8..12], &f[12..16]);

        let ax = (8.0 + 4.0 * fa[1]) * sx;
        let eye_sep = (4.0 + 4.0 * e[0]) * sx;
        let eye_y = (9.0 + 5.0 * e[1]) * sy;
        Self {
            bg_color: [0.15 + 0.7 * b[0], 0.15 + 0.7 * b[1], 0.15 + 0.7 * b[2]],
            bg_falloff: b[3],
            face_center: (16.0 * sx, (13.0 + 5.0 * fa[0]) * sy),
            face_axes: (ax, 1.2 * ax * sy / sx),
            face_color: [0.35 + 0.55 * fa[2], 0.25 + 0.5 * fa[3], 0.2 + 0.15 * (fa[2] + fa[3])],
            eye_centers: [(16.0 * sx - eye_sep, eye_y), (16.0 * sx + eye_sep, eye_y)],
            eye_radius: (1.5 + 1.5 * e[2]) * s,
            eye_color: [0.08, 0.12 + 0.5 * e[3], 0.25 + 0.6 * e[3]],
            mouth_center: (16.0 * sx, (21.0 + 4.0 * m[1]) * sy),
            mouth_half: ((3.0 + 4.0 * m[0]) * sx, (0.75 + 1.0 * m[2]) * sy),
            mouth_color: [0.45 + 0.5 * m[3], 0.08, 0.12 + 0.25 * m[3]],
        }
    }

    fn face_alpha(&self, px: f64, py: f64) -> f64 {
        let (cx, cy) = self.face_center;
        let (ax, ay) = self.face_axes;
        let (dx, dy) = (px - cx, py - cy);
        let rho = ((dx / ax).powi(2) + (dy / ay).powi(2)).sqrt();
        coverage((rho - 1.0) * (ax * ay).sqrt())
    }

    fn eye_alpha(&self, px: f64, py: f64) -> f64 {
        self.eye_centers
            .iter()
            .map(|&(cx, cy)| coverage(((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - self.eye_radius))
            .fold(0.0, f64::max)
    }

    fn mouth_alpha(&self, px: f64, py: f64) -> f64 {
        let (cx, cy) = self.mouth_center;
        let (hw, ht) = self.mouth_half;
        let qx = (px - cx).abs() - hw;
        let qy = (py - cy).abs() - ht;
        let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
        coverage(outside + qx.max(qy).min(0.0))
    }
}

fn pixel_center(y: usize, x: usize) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

fn check_renderable(factors: &FactorVector, spec: &SceneSpec) -> Result<()> {
    if !spec.is_renderable() {
        return Err(Error::InvalidInput(
            "renderer needs the background/face/eyes/mouth layout with 4 factors each".into(),
        ));
    }
    factors.validate(spec)
}

/// Deterministically renders the scene described by `factors`.
pub fn render_scene(factors: &FactorVector, spec: &SceneSpec) -> Result<Image> {
    check_renderable(factors, spec)?;
    let lay = Layout::new(&factors.0, spec);
    let mut pixels = Vec::with_capacity(spec.n());
    let lerp = |under: [f64; 3], over: [f64; 3], a: f64| -> [f64; 3] {
        if a == 0.0 {
            under
        } else {
            [
                under[0] + a * (over[0] - under[0]),
                under[1] + a * (over[1] - under[1]),
                under[2] + a * (over[2] - under[2]),
            ]
        }
    };
    for y in 0..spec.height {
        let ty = if spec.height > 1 {
            y as f64 / (spec.height - 1) as f64
        } else {
            0.0
        };
        let shade = 1.0 - 0.6 * lay.bg_falloff * ty;
        let bg = lay.bg_color.map(|c| c * shade);
        for x in 0..spec.width {
            let (px, py) = pixel_center(y, x);
            let mut c = lerp(bg, lay.face_color, lay.face_alpha(px, py));
            c = lerp(c, lay.eye_color, lay.eye_alpha(px, py));
            c = lerp(c, lay.mouth_color, lay.mouth_alpha(px, py));
            pixels.extend(c.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Image::new(spec.height, spec.width, pixels)
}

/// Pixels (row-major, `height × width`) that segment `name` can influence
/// for these factors: where its layer has nonzero coverage and is not fully
/// hidden by a layer painted above it.
pub fn segment_region(factors: &FactorVector, spec: &SceneSpec, name: &str) -> Result<Vec<bool>> {
    check_renderable(factors, spec)?;
    let lay = Layout::new(&factors.0, spec);
    let mut mask = Vec::with_capacity(spec.height * spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = pixel_center(y, x);
            let (fa, ea, ma) = (lay.face_alpha(px, py), lay.eye_alpha(px, py), lay.mouth_alpha(px, py));
            let visible = match name {
                "background" => fa < 1.0 && ea < 1.0 && ma < 1.0,
                "face" => fa > 0.0 && ea < 1.0 && ma < 1.0,
                "eyes" => ea > 0.0 && ma < 1.0,
                "mouth" => ma > 0.0,
                other => return Err(Error::InvalidInput(format!("unknown segment `{other}`"))),
            };
            mask.push(visible);
        }
    }
    Ok(mask)
}

/// Factor/image pairs generated from a single seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub samples: Vec<(FactorVector, Image)>,
}

pub fn make_dataset(count: usize, seed: u64, spec: &SceneSpec) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidInput("dataset count must be positive".into()));
    }
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let samples = (0..count)
        .map(|_| {
            let f = sample_factors(&mut rng, spec);
            let img = render_scene(&f, spec)?;
            Ok((f, img))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

pub(crate) fn write_spec<W: std::io::Write>(w: &mut BinWriter<W>, spec: &SceneSpec) -> Result<()> {
    w.u32(spec.height as u32)?;
    w.u32(spec.width as u32)?;
    w.u32(spec.segments.len() as u32)?;
    for s in &spec.segments {
        w.str(&s.name)?;
        w.u32(s.dim as u32)?;
    }
    Ok(())
}

pub(crate) fn read_spec<R: std::io::Read>(r: &mut BinReader<R>) -> Result<SceneSpec> {
    let height = r.dim("height")?;
    let width = r.dim("width")?;
    let count = r.dim("segment count")?;
    let mut segments = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = r.str()?;
        let dim = r.dim("segment dim")?;
        segments.push(Segment { name, dim });
    }
    let spec = SceneSpec {
        height,
        width,
        segments,
    };
    spec.validate().map_err(|e| r.format_error(e.to_string()))?;
    Ok(spec)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `count × factor_dim` matrix of factors.
    pub fn factor_matrix(&self) -> Array2<f64> {
        let d = self.spec.factor_dim();
        Array2::from_shape_fn((self.len(), d), |(i, j)| self.samples[i].0 .0[j])
    }

    /// `count × n` matrix of pixel values.
    pub fn image_matrix(&self) -> Array2<f64> {
        let n = self.spec.n();
        let mut flat = Vec::with_capacity(self.len() * n);
        for (_, img) in &self.samples {
            flat.extend_from_slice(img.pixels());
        }
        Array2::from_shape_vec((self.len(), n), flat).expect("images match spec")
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.samples.iter().map(|(_, img)| img)
    }

    /// Checks that every stored image is bit-identical to a fresh render.
    pub fn verify(&self) -> Result<()> {
        for (i, (f, img)) in self.samples.iter().enumerate() {
            if &render_scene(f, &self.spec)? != img {
                return Err(Error::InvalidInput(format!("sample {i} does not match its render")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path)?;
        w.header(DATASET_MAGIC, DATASET_VERSION)?;
        w.u32(self.len() as u32)?;
        write_spec(&mut w, &self.spec)?;
        w.u64(self.seed)?;
        for (f, img) in &self.samples {
            w.f64s(f.0.iter())?;
            w.f64s(img.pixels().iter())?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BinReader::open(path)?;
        r.header(DATASET_MAGIC, DATASET_VERSION)?;
        let count = r.dim("sample count")?;
        let spec = read_spec(&mut r)?;
        let seed = r.u64()?;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let f = FactorVector(r.f64s(spec.factor_dim())?);
            f.validate(&spec)
                .map_err(|e| r.format_error(format!("sample {i}: {e}")))?;
            let img = Image::new(spec.height, spec.width, r.f64s(spec.n())?)
                .map_err(|e| r.format_error(format!("sample {i}: {e}")))?;
            samples.push((f, img));
        }
        r.expect_end()?;
        Ok(Dataset { spec, seed, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn default_dims() {
        let s = spec();
        assert_eq!(s.factor_dim(), 16);
        assert_eq!(s.n(), 3072);
        assert_eq!(s.segment_range("eyes"), Some(8..12));
        assert_eq!(s.segment_range("nose"), None);
    }

    #[test]
    fn sample_factors_is_seeded() {
        let a = sample_factors(&mut Rng::new(7), &spec());
        let b = sample_factors(&mut Rng::new(7), &spec());
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 16);
        assert!(a.validate(&spec()).is_ok());
    }

    #[test]
    fn factor_means_near_half() {
        let mut rng = Rng::new(11);
        let s = spec();
        let mut sums = [0.0; 16];
        for _ in 0..10_000 {
            for (acc, v) in sums.iter_mut().zip(sample_factors(&mut rng, &s).0) {
                *acc += v;
            }
        }
        for m in sums.iter().map(|v| v / 10_000.0) {
            assert!((0.45..=0.55).contains(&m), "{m}");
        }
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let f = sample_factors(&mut Rng::new(1), &spec());
        let a = render_scene(&f, &spec()).unwrap();
        let b = render_scene(&f, &spec()).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn extremes_differ_broadly() {
        let s = spec();
        let lo = render_scene(&FactorVector(vec![0.0; 16]), &s).unwrap();
        let hi = render_scene(&FactorVector(vec![1.0; 16]), &s).unwrap();
        let changed = (0..32 * 32)
            .filter(|&p| (0..3).any(|c| lo.pixels()[p * 3 + c] != hi.pixels()[p * 3 + c]))
            .count();
        assert!(changed as f64 > 0.1 * 1024.0, "{changed}");
    }

    #[test]
    fn out_of_range_factors_rejected() {
        let mut v = vec![0.5; 16];
        v[3] = 1.2;
        assert!(render_scene(&FactorVector(v), &spec()).is_err());
        assert!(render_scene(&FactorVector(vec![0.5; 15]), &spec()).is_err());
    }

    #[test]
    fn eye_perturbation_stays_inside_eye_discs() {
        // Independent geometry: disc centers and radii recomputed from the
        // documented mapping, plus the half-pixel soft edge.
        let disc_mask = |f: &[f64]| -> Vec<bool> {
            let sep = 4.0 + 4.0 * f[8];
            let ey = 9.0 + 5.0 * f[9];
            let r = 1.5 + 1.5 * f[10];
            (0..1024)
                .map(|p| {
                    let (x, y) = ((p % 32) as f64 + 0.5, (p / 32) as f64 + 0.5);
                    [16.0 - sep, 16.0 + sep]
                        .iter()
                        .any(|cx| ((x - cx).powi(2) + (y - ey).powi(2)).sqrt() < r + 0.5)
                })
                .collect()
        };
        let s = spec();
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let a = sample_factors(&mut rng, &s);
            let mut b = a.clone();
            for v in &mut b.0[8..12] {
                *v = rng.uniform();
            }
            let ia = render_scene(&a, &s).unwrap();
            let ib = render_scene(&b, &s).unwrap();
            let (ma, mb) = (disc_mask(&a.0), disc_mask(&b.0));
            for p in 0..1024 {
                let differs = (0..3).any(|c| ia.pixels()[p * 3 + c] != ib.pixels()[p * 3 + c]);
                if differs {
                    assert!(ma[p] || mb[p], "pixel {p} changed outside the eye discs");
                }
            }
        }
    }

    #[test]
    fn dataset_requires_samples() {
        assert!(make_dataset(0, 1, &spec()).is_err());
    }

    #[test]
    fn dataset_verifies() {
        let ds = make_dataset(5, 3, &spec()).unwrap();
        ds.verify().unwrap();
        assert_eq!(ds.image_matrix().dim(), (5, 3072));
    }

    #[test]
    fn crop_and_stack() {
        let f = sample_factors(&mut Rng::new(2), &spec());
        let img = render_scene(&f, &spec()).unwrap();
        let c = img.crop(4, 6, 8, 10).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(4, 6));
        assert_eq!(c.pixel(7, 9), img.pixel(11, 15));
        assert!(img.crop(30, 0, 4, 4).is_err());
        let s = Image::hstack(&[&img, &c]).unwrap();
        assert_eq!((s.height(), s.width()), (32, 42));
        assert_eq!(s.pixel(5, 33), c.pixel(5, 1));
        assert_eq!(s.pixel(20, 33), [1.0; 3]);
    }
}
