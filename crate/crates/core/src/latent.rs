//! Latent-space exploration: parallelogram combinations of three codes,
//! seeded random walks, and grid rendering through a generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{generator_forward, Model, LATENT_DIM};
use crate::preprocess::{from_model_range, save_png, unstack};
use crate::tensor::Tensor;
use crate::train::sample_noise;

/// Pixels of white between grid tiles.
pub const GRID_SEPARATOR: usize = 2;
const WHITE: f32 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    /// `v2 + v3 - v1`
    MinusV1,
    /// `v1 - v2 + v3`
    MinusV2,
    /// `v1 + v2 - v3`
    MinusV3,
}

/// Signed sum of three equally wide codes.
pub fn combine(v1: &[f64], v2: &[f64], v3: &[f64], mode: CombineMode) -> Result<Vec<f64>> {
    if v1.len() != v2.len() || v2.len() != v3.len() {
        return Err(Error::shape("combine", &[v1.len(), v2.len()], &[v3.len()]));
    }
    let f = match mode {
        CombineMode::MinusV1 => |a: f64, b: f64, c: f64| b + c - a,
        CombineMode::MinusV3 => |a: f64, b: f64, c: f64| a + b - c,
        CombineMode::MinusV2 => |a: f64, b: f64, c: f64| a - b + c,
    };
    Ok(v1.iter().zip(v2).zip(v3).map(|((&a, &b), &c)| f(a, b, c)).collect())
}

/// `steps + 1` points starting at `start`, each the previous plus
/// `step_scale * u` with `u` i.i.d. `Uniform(-1, 1)` per component.
pub fn random_walk(start: &[f64], steps: usize, step_scale: f64, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::invalid("random walk needs at least one step"));
    }
    if !(step_scale >= 0.0 && step_scale.is_finite()) {
        return Err(Error::invalid(format!("step scale must be non-negative, got {step_scale}")));
    }
    let mut points = Vec::with_capacity(steps + 1);
    points.push(start.to_vec());
    for _ in 0..steps {
        let next = points
            .last()
            .expect("walk is non-empty")
            .iter()
            .map(|&v| v + step_scale * rng.gen_range(-1.0..1.0))
            .collect();
        points.push(next);
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WalkMode {
    Combine(CombineMode),
    Random,
}

impl WalkMode {
    pub fn anchor_count(self) -> usize {
        match self {
            WalkMode::Combine(_) => 3,
            WalkMode::Random => 1,
        }
    }
}

impl FromStr for WalkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus-v1" => Ok(WalkMode::Combine(CombineMode::MinusV1)),
            "minus-v3" => Ok(WalkMode::Combine(CombineMode::MinusV3)),
            "minus-v2" => Ok(WalkMode::Combine(CombineMode::MinusV2)),
            "random" => Ok(WalkMode::Random),
            other => Err(Error::invalid(format!(
                "unknown walk mode {other:?}, expected minus-v1, minus-v2, minus-v3 or random"
            ))),
        }
    }
}

impl fmt::Display for WalkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WalkMode::Combine(CombineMode::MinusV1) => "minus-v1",
            WalkMode::Combine(CombineMode::MinusV3) => "minus-v3",
            WalkMode::Combine(CombineMode::MinusV2) => "minus-v2",
            WalkMode::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkPlan {
    pub mode: WalkMode,
    pub anchors: Vec<Vec<f64>>,
    pub steps: usize,
    pub step_scale: f64,
    pub seed: u64,
}

impl WalkPlan {
    /// Plan whose anchors are drawn like generator inputs from stream 0 of
    /// the seed. Walk steps use stream 1, so they do not depend on how the
    /// anchors were obtained.
    pub fn seeded(mode: WalkMode, steps: usize, step_scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = sample_noise::<f64>(mode.anchor_count(), LATENT_DIM, &mut rng)?;
        let anchors = z.data().chunks_exact(LATENT_DIM).map(<[f64]>::to_vec).collect();
        let plan = Self {
            mode,
            anchors,
            steps,
            step_scale,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.mode.anchor_count();
        if self.anchors.len() != want {
            return Err(Error::invalid(format!(
                "{} needs {want} anchors, got {}",
                self.mode,
                self.anchors.len()
            )));
        }
        if let Some(a) = self.anchors.iter().find(|a| a.len() != LATENT_DIM) {
            return Err(Error::shape("walk anchor", &[a.len()], &[LATENT_DIM]));
        }
        if self.mode == WalkMode::Random && (self.steps == 0 || !(self.step_scale > 0.0)) {
            return Err(Error::invalid("random walk needs steps >= 1 and step_scale > 0"));
        }
        Ok(())
    }

    /// Combine modes yield `[v1, v2, v3, v]`; a random walk yields its
    /// `steps + 1` points.
    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        match self.mode {
            WalkMode::Combine(m) => {
                let v = combine(&self.anchors[0], &self.anchors[1], &self.anchors[2], m)?;
                let mut pts = self.anchors.clone();
                pts.push(v);
                Ok(pts)
            }
            WalkMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(1);
                random_walk(&self.anchors[0], self.steps, self.step_scale, &mut rng)
            }
        }
    }
}

/// Reads codes from text, one per line, values separated by commas or
/// whitespace. Lines may carry a leading index column as in a walk manifest.
pub fn parse_anchors(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            let values = match fields.len() {
                LATENT_DIM => &fields[..],
                n if n == LATENT_DIM + 1 => &fields[1..],
                n => {
                    return Err(Error::invalid(format!(
                        "anchor line {}: expected {LATENT_DIM} values, got {n}",
                        i + 1
                    )))
                }
            };
            values
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("anchor line {}: {e}", i + 1)))
                })
                .collect()
        })
        .collect()
}

/// Decodes codes through the generator (evaluation mode) into display
/// images.
pub fn decode_points(gen: &Model<f32>, points: &[Vec<f64>]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(32) {
        let flat: Vec<f32> = chunk.iter().flatten().map(|&v| v as f32).collect();
        let z = Tensor::new([chunk.len(), LATENT_DIM], flat)?;
        let images = generator_forward(gen, &z)?;
        out.extend(unstack(&from_model_range(&images))?);
    }
    Ok(out)
}

/// Columns used for `n` tiles: `ceil(sqrt(n))`.
pub fn grid_columns(n: usize) -> usize {
    (1..=n).find(|c| c * c >= n).unwrap_or(1)
}

/// Top-left pixel of tile `index` in a row-major grid.
pub fn tile_origin(index: usize, cols: usize, tile: (usize, usize)) -> (usize, usize) {
    let (r, c) = (index / cols, index % cols);
    (r * (tile.0 + GRID_SEPARATOR), c * (tile.1 + GRID_SEPARATOR))
}

/// Tiles equally sized `[3, H, W]` images row-major with white separators
/// and no outer border. Unused cells stay white.
pub fn tile_grid(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty grid"))?;
    let (h, w) = match first.shape() {
        &[3, h, w] => (h, w),
        other => return Err(Error::shape("tile_grid", other, &[3, 0, 0])),
    };
    let cols = grid_columns(images.len());
    let rows = images.len().div_ceil(cols);
    let gh = rows * h + (rows - 1) * GRID_SEPARATOR;
    let gw = cols * w + (cols - 1) * GRID_SEPARATOR;
    let mut grid = vec![WHITE; 3 * gh * gw];
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape("tile_grid", img.shape(), first.shape()));
        }
        let (oy, ox) = tile_origin(i, cols, (h, w));
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let at = (c * gh + oy + y) * gw + ox;
                grid[at..at + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new([3, gh, gw], grid)
}

/// One line per tile: index, then the code's components.
pub fn manifest_text(points: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for (i, p) in points.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in p {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct WalkOutput {
    pub grid: PathBuf,
    pub tiles: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub points: Vec<Vec<f64>>,
}

/// Writes `grid.png`, `point_NNNNN.png` per code and `manifest.csv` into
/// `out_dir`.
pub fn render_walk(gen: &Model<f32>, plan: &WalkPlan, out_dir: &Path) -> Result<WalkOutput> {
    let points = plan.points()?;
    let images = decode_points(gen, &points)?;
    fs::create_dir_all(out_dir)?;
    let mut tiles = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let p = out_dir.join(format!("point_{i:05}.png"));
        save_png(img, &p)?;
        tiles.push(p);
    }
    let grid = out_dir.join("grid.png");
    save_png(&tile_grid(&images)?, &grid)?;
    let manifest = out_dir.join("manifest.csv");
    fs::write(&manifest, manifest_text(&points))?;
    Ok(WalkOutput {
        grid,
        tiles,
        manifest,
        points,
    })
}
