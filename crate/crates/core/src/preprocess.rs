//! Image ingestion and preprocessing.
//!
//! Images are `[3, H, W]` tensors holding display values in `[0, 255]`.
//! The pipeline resizes, then applies a Gaussian and a median filter (in a
//! configurable order). Dataset-level per-channel statistics support the
//! z-score map and its inverse; training consumes the affine model range
//! `x / 127.5 - 1` so data matches the generator's tanh output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Guard against division by a vanishing channel deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

fn dims<T: Element>(img: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::shape(op, other, &[3, 0, 0])),
    }
}

/// Symmetric reflection (`c b a | a b c | c b a`) of any index into
/// `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Element>(img: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = dims(img, "resize_bilinear")?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    if (th, tw) == (h, w) {
        return Ok(img.detached());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(th, h);
    let xs = axis(tw, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new([c, th, tw], out)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = max(1, ceil(3 sigma))`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let r = ((3.0 * sigma).ceil() as usize).max(1) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable per-channel Gaussian blur with reflect padding.
pub fn gaussian_filter<T: Element>(img: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (c, h, w) = dims(img, "gaussian_filter")?;
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                tmp[row + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * src[row + reflect(x as isize + i as isize - r, w)].as_f64())
                    .sum();
            }
        }
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * tmp[(ch * h + reflect(y as isize + i as isize - r, h)) * w + x])
                    .sum();
                out.push(T::from_f64_lossy(v));
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Per-channel sliding-window median over an odd square window with
/// reflect padding.
pub fn median_filter<T: Element>(img: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims(img, "median_filter")?;
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("median window must be odd and positive, got {window}")));
    }
    if window == 1 {
        return Ok(img.detached());
    }
    let r = (window / 2) as isize;
    let src = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    let mut buf = Vec::with_capacity(window * window);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                buf.clear();
                for dy in -r..=r {
                    let yy = reflect(y + dy, h);
                    for dx in -r..=r {
                        buf.push(plane[yy * w + reflect(x + dx, w)]);
                    }
                }
                let mid = buf.len() / 2;
                let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite pixels"));
                out.push(*m);
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stats serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(format!("channel stats: {e}")))?;
        if s.std.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("channel stats: negative deviation".into()));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Statistics over every pixel of every image, accumulated in `f64` in a
/// fixed order. Accepts single images `[3, H, W]` or batches `[n, 3, H, W]`.
pub fn channel_stats<T: Element>(images: &[&Tensor<T>]) -> Result<ChannelStats> {
    let planes = || {
        images.iter().flat_map(|img| {
            let s = img.shape();
            let per = s[s.len() - 2] * s[s.len() - 1];
            img.data().chunks_exact(per).enumerate().map(|(i, p)| (i % 3, p))
        })
    };
    if images.is_empty() {
        return Err(Error::invalid("channel_stats of an empty set"));
    }
    for img in images {
        let s = img.shape();
        if !(s.len() == 3 || s.len() == 4) || s[s.len() - 3] != 3 {
            return Err(Error::shape("channel_stats", s, &[3, 0, 0]));
        }
    }
    let mut sum = [0.0f64; 3];
    let mut count = [0usize; 3];
    for (c, p) in planes() {
        sum[c] += p.iter().map(|v| v.as_f64()).sum::<f64>();
        count[c] += p.len();
    }
    let mean = [0, 1, 2].map(|c| sum[c] / count[c] as f64);
    let mut sq = [0.0f64; 3];
    for (c, p) in planes() {
        sq[c] += p.iter().map(|v| (v.as_f64() - mean[c]).powi(2)).sum::<f64>();
    }
    let std = [0, 1, 2].map(|c| (sq[c] / count[c] as f64).sqrt());
    Ok(ChannelStats { mean, std })
}

fn per_channel<T: Element>(img: &Tensor<T>, f: impl Fn(usize, f64) -> f64) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() < 3 || s[s.len() - 3] != 3 {
        return Err(Error::shape("per-channel map", s, &[3, 0, 0]));
    }
    let per = s[s.len() - 2] * s[s.len() - 1];
    let data = img
        .data()
        .chunks_exact(per)
        .enumerate()
        .flat_map(|(i, p)| p.iter().map(move |&v| (i % 3, v)))
        .map(|(c, v)| T::from_f64_lossy(f(c, v.as_f64())))
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// `z = (x - mean_c) / max(std_c, 1e-6)`.
pub fn normalize_zscore<T: Element>(img: &Tensor<T>, stats: &ChannelStats) -> Result<Tensor<T>> {
    per_channel(img, |c, v| (v - stats.mean[c]) / stats.std[c].max(SIGMA_FLOOR))
}

/// Inverse of [`normalize_zscore`].
pub fn denormalize_zscore<T: Element>(img: &Tensor<T>, stats: &ChannelStats) -> Result<Tensor<T>> {
    per_channel(img, |c, v| v * stats.std[c].max(SIGMA_FLOOR) + stats.mean[c])
}

/// `[0, 255] -> [-1, 1]`, `x / 127.5 - 1`.
pub fn to_model_range<T: Element>(img: &Tensor<T>) -> Tensor<T> {
    let k = T::from_f64_lossy(127.5);
    img.map(|v| v / k - T::one())
}

/// `[-1, 1] -> {0, ..., 255}`: `(x + 1) * 127.5`, rounded half up and
/// clamped.
pub fn from_model_range<T: Element>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| T::from_f64_lossy(model_to_pixel(v.as_f64()) as f64))
}

pub fn model_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Reads any PNG or JPEG as `[3, H, W]` in `[0, 255]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Quantizes a `[3, H, W]` display-range image to 8-bit RGB.
pub fn to_rgb8<T: Element>(img: &Tensor<T>) -> Result<image::RgbImage> {
    let (c, h, w) = dims(img, "to_rgb8")?;
    if c != 3 {
        return Err(Error::shape("to_rgb8", img.shape(), &[3, h, w]));
    }
    let d = img.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            raw.push((d[ch * h * w + i].as_f64() + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

pub fn save_png<T: Element>(img: &Tensor<T>, path: &Path) -> Result<()> {
    to_rgb8(img)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Splits a `[n, ...]` batch into its samples.
pub fn unstack<T: Element>(batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let s = batch.shape();
    if s.len() < 2 {
        return Err(Error::invalid("unstack needs a batch axis"));
    }
    let per: usize = s[1..].iter().product();
    batch
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(s[1..].to_vec(), c.to_vec()))
        .collect()
}

pub fn stack<T: Element>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let refs: Vec<Tensor<T>> = images
        .iter()
        .map(|i| {
            let mut shape = vec![1];
            shape.extend_from_slice(i.shape());
            i.reshape(shape)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = refs.iter().collect();
    Tensor::concat_batch(&refs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterOrder {
    #[default]
    GaussianThenMedian,
    MedianThenGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Output side length.
    pub size: usize,
    pub gaussian_sigma: f64,
    pub median_window: usize,
    pub order: FilterOrder,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            size: 256,
            gaussian_sigma: 0.001,
            median_window: 3,
            order: FilterOrder::GaussianThenMedian,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("size must be positive".into()));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config(format!("gaussian_sigma must be positive, got {}", self.gaussian_sigma)));
        }
        if self.median_window % 2 == 0 {
            return Err(Error::Config(format!("median_window must be odd, got {}", self.median_window)));
        }
        Ok(())
    }
}

/// Resize followed by both noise filters. No augmentation of any kind.
pub fn preprocess_image<T: Element>(img: &Tensor<T>, cfg: &PipelineConfig) -> Result<Tensor<T>> {
    let resized = resize_bilinear(img, (cfg.size, cfg.size))?;
    match cfg.order {
        FilterOrder::GaussianThenMedian => {
            median_filter(&gaussian_filter(&resized, cfg.gaussian_sigma)?, cfg.median_window)
        }
        FilterOrder::MedianThenGaussian => {
            gaussian_filter(&median_filter(&resized, cfg.median_window)?, cfg.gaussian_sigma)
        }
    }
}

/// PNG and JPEG files directly inside `dir`, sorted by file name.
pub fn scan_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Seeded shuffle of a sorted listing, optionally truncated to `count`.
pub fn sample_paths(mut paths: Vec<PathBuf>, count: Option<usize>, seed: u64) -> Vec<PathBuf> {
    paths.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if let Some(n) = count {
        paths.truncate(n);
    }
    paths
}

/// Images that loaded, plus per-file failures.
#[derive(Debug, Default)]
pub struct LoadedSet {
    pub images: Vec<Tensor<f32>>,
    pub paths: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, String)>,
}

/// Loads and preprocesses every listed file, collecting failures instead
/// of stopping at the first one.
pub fn load_processed(paths: &[PathBuf], cfg: &PipelineConfig) -> LoadedSet {
    let mut set = LoadedSet::default();
    for p in paths {
        match load_image(p).and_then(|img| preprocess_image(&img, cfg)) {
            Ok(img) => {
                set.images.push(img);
                set.paths.push(p.clone());
            }
            Err(e) => set.failures.push((p.clone(), e.to_string())),
        }
    }
    set
}

/// Recipe for a deterministic synthetic painting set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub palette: Vec<[u8; 3]>,
    pub background: [u8; 3],
    pub size: usize,
    pub count: usize,
    /// Inclusive range of shapes per image.
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            palette: vec![[200, 30, 30], [20, 20, 20]],
            background: [255, 255, 255],
            size: 32,
            count: 2000,
            min_shapes: 2,
            max_shapes: 5,
            seed: 0,
        }
    }
}

/// Draws `count` images of axis-aligned rectangles and thick straight
/// strokes in palette colors on the background, without antialiasing.
/// Returns `[count, 3, size, size]` in `[0, 255]`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Tensor<f32>> {
    if spec.palette.is_empty() || spec.size < 2 || spec.count == 0 || spec.min_shapes > spec.max_shapes {
        return Err(Error::invalid(
            "synthetic spec needs a palette, size >= 2, count >= 1 and min_shapes <= max_shapes",
        ));
    }
    let s = spec.size;
    let plane = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.count * 3 * plane);
    let mut canvas = vec![[0u8; 3]; plane];
    for _ in 0..spec.count {
        canvas.fill(spec.background);
        let shapes = rng.gen_range(spec.min_shapes..=spec.max_shapes);
        for _ in 0..shapes {
            let color = spec.palette[rng.gen_range(0..spec.palette.len())];
            if rng.gen_bool(0.5) {
                let (x0, x1) = ordered(rng.gen_range(0..s), rng.gen_range(0..s));
                let (y0, y1) = ordered(rng.gen_range(0..s), rng.gen_range(0..s));
                for y in y0..=y1 {
                    canvas[y * s + x0..=y * s + x1].fill(color);
                }
            } else {
                let sf = s as f64;
                let (ax, ay) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
                let (bx, by) = (rng.gen_range(0.0..sf), rng.gen_range(0.0..sf));
                let half = rng.gen_range(0.5..(sf / 8.0).max(1.0));
                paint_segment(&mut canvas, s, (ax, ay), (bx, by), half, color);
            }
        }
        for c in 0..3 {
            data.extend(canvas.iter().map(|px| px[c] as f32));
        }
    }
    Tensor::new([spec.count, 3, s, s], data)
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Colors every pixel whose center lies within `half` of the segment.
fn paint_segment(canvas: &mut [[u8; 3]], s: usize, a: (f64, f64), b: (f64, f64), half: f64, color: [u8; 3]) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if cx * cx + cy * cy <= half * half {
                canvas[y * s + x] = color;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut d = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(c, y, x));
                }
            }
        }
        Tensor::new([3, h, w], d).unwrap()
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..6).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 2, 1, 0]);
        assert!((-5..5).all(|i| reflect(i, 1) == 0));
    }

    #[test]
    fn resize_cases() {
        let c = img(512, 512, |_, _, _| 77.0);
        let r = resize_bilinear(&c, (256, 256)).unwrap();
        assert_eq!(r.shape(), &[3, 256, 256]);
        assert!(r.data().iter().all(|&v| (v - 77.0).abs() < 1e-12));
        let x = img(5, 7, |c, y, x| (c * 100 + y * 7 + x) as f64);
        assert_eq!(resize_bilinear(&x, (5, 7)).unwrap(), x);
        let board = img(2, 2, |_, y, x| if (x + y) % 2 == 0 { 0.0 } else { 255.0 });
        let up = resize_bilinear(&board, (3, 3)).unwrap();
        assert!((up.data()[4] - 127.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_cases() {
        let x = img(9, 11, |c, y, x| ((c * 31 + y * 17 + x * 5) % 256) as f64);
        let near_delta = gaussian_filter(&x, 0.001).unwrap();
        for (a, b) in near_delta.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((near_delta.mean() - x.mean()).abs() < 1e-6);
        let k = gaussian_kernel(1.3).unwrap();
        assert_eq!(k.len(), 2 * 4 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let flat = img(6, 6, |_, _, _| 42.0);
        let blurred = gaussian_filter(&flat, 2.0).unwrap();
        assert!(blurred.data().iter().all(|&v| (v - 42.0).abs() < 1e-9));
        assert!(gaussian_filter(&x, 0.0).is_err());
    }

    #[test]
    fn median_cases() {
        let x = img(6, 5, |c, y, x| (c + y * x) as f64);
        assert_eq!(median_filter(&x, 1).unwrap(), x);
        assert!(median_filter(&x, 2).is_err());
        let salt = img(5, 5, |_, y, x| if (y, x) == (2, 2) { 255.0 } else { 0.0 });
        let clean = median_filter(&salt, 3).unwrap();
        assert!(clean.data().iter().all(|&v| v == 0.0));
        let flat = img(4, 4, |_, _, _| 9.0);
        assert_eq!(median_filter(&flat, 5).unwrap(), flat);
    }

    #[test]
    fn stats_cases() {
        let zero = img(3, 3, |_, _, _| 0.0);
        let s = channel_stats(&[&zero]).unwrap();
        assert_eq!(s.mean, [0.0; 3]);
        assert_eq!(s.std, [0.0; 3]);
        let two = img(2, 2, |_, y, _| if y == 0 { 0.0 } else { 255.0 });
        let s = channel_stats(&[&two]).unwrap();
        for c in 0..3 {
            assert!((s.mean[c] - 127.5).abs() < 1e-12);
            assert!((s.std[c] - 127.5).abs() < 1e-12);
        }
        let z = normalize_zscore(&img(1, 1, |_, _, _| 255.0), &s).unwrap();
        assert!(z.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(channel_stats::<f64>(&[]).is_err());
        let constant = normalize_zscore(&img(2, 2, |_, _, _| 3.0), &channel_stats(&[&img(2, 2, |_, _, _| 3.0)]).unwrap()).unwrap();
        assert!(constant.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_toml_round_trip() {
        let s = ChannelStats {
            mean: [1.0 / 3.0, 127.5, 0.1],
            std: [2.0f64.sqrt(), 0.0, 1e-9],
        };
        assert_eq!(ChannelStats::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn model_range_endpoints() {
        let t = Tensor::<f64>::new([3], vec![-1.0, 1.0, 0.0]).unwrap();
        assert_eq!(from_model_range(&t).data(), &[0.0, 255.0, 128.0]);
        assert_eq!(model_to_pixel(-3.0), 0);
        assert_eq!(model_to_pixel(3.0), 255);
    }

    #[test]
    fn synthetic_palette_and_seed() {
        let spec = SyntheticSpec {
            palette: vec![[255, 0, 0], [0, 0, 0]],
            count: 50,
            ..Default::default()
        };
        let a = make_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, make_synthetic_dataset(&spec).unwrap());
        assert_eq!(a.shape(), &[50, 3, 32, 32]);
        let allowed = [[255.0, 0.0, 0.0], [0.0, 0.0, 0.0], [255.0, 255.0, 255.0]];
        for im in unstack(&a).unwrap() {
            let d = im.data();
            for i in 0..32 * 32 {
                let px = [d[i], d[1024 + i], d[2048 + i]];
                assert!(allowed.contains(&px), "{px:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn model_range_round_trip(px in 0u8..=255) {
            let t = Tensor::<f32>::new([1], vec![px as f32]).unwrap();
            let back = from_model_range(&to_model_range(&t));
            prop_assert_eq!(back.data()[0], px as f32);
        }

        #[test]
        fn zscore_is_invertible(vals in proptest::collection::vec(0.0f64..255.0, 12)) {
            let x = Tensor::new([3, 2, 2], vals).unwrap();
            let s = channel_stats(&[&x]).unwrap();
            let back = denormalize_zscore(&normalize_zscore(&x, &s).unwrap(), &s).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn gaussian_preserves_mean(vals in proptest::collection::vec(0.0f64..255.0, 3 * 16), sigma in 0.3f64..3.0) {
            // a unit-sum kernel makes every output a convex combination
            let x = Tensor::new([3, 4, 4], vals).unwrap();
            let y = gaussian_filter(&x, sigma).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y.data().iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        }

        #[test]
        fn stats_ignore_order(vals in proptest::collection::vec(0.0f64..255.0, 3 * 4 * 3)) {
            let imgs: Vec<Tensor<f64>> = vals.chunks(12).map(|c| Tensor::new([3, 2, 2], c.to_vec()).unwrap()).collect();
            let fwd: Vec<&Tensor<f64>> = imgs.iter().collect();
            let rev: Vec<&Tensor<f64>> = imgs.iter().rev().collect();
            let a = channel_stats(&fwd).unwrap();
            let b = channel_stats(&rev).unwrap();
            for c in 0..3 {
                prop_assert!((a.mean[c] - b.mean[c]).abs() < 1e-9);
                prop_assert!((a.std[c] - b.std[c]).abs() < 1e-9);
            }
        }
    }
}
