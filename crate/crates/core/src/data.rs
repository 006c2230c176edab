//! Deterministic synthetic scene generation.
//!
//! Scenes are small RGB rasters with axis-aligned filled rectangles over a
//! mid-gray background plus seeded noise. The fill color is a deterministic
//! function of the class, so the raster carries enough signal for the
//! bilinear feature crop to distinguish classes and locations.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Box;
use crate::math;

/// A ground-truth object: a box plus an exact one-hot class label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: Box,
    pub class_onehot: Vec<f64>,
}

impl GroundTruth {
    pub fn new(bbox: Box, class_index: usize, num_classes: usize) -> Self {
        let mut class_onehot = vec![0.0; num_classes];
        class_onehot[class_index] = 1.0;
        Self { bbox, class_onehot }
    }

    /// Index of the single 1.0 entry, or `None` if the vector is not
    /// exactly one-hot.
    pub fn class_index(&self) -> Option<usize> {
        let mut idx = None;
        for (i, &v) in self.class_onehot.iter().enumerate() {
            if v == 1.0 {
                if idx.is_some() {
                    return None;
                }
                idx = Some(i);
            } else if v != 0.0 {
                return None;
            }
        }
        idx
    }
}

/// Row-major H×W×3 grid of reals in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub raster: Raster,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub allow_overlap: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 4,
            max_objects: 6,
            min_size: 0.12,
            allow_overlap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenError {
    RasterTooSmall,
    TooFewClasses,
    InfeasiblePlacement,
}

impl fmt::Display for GenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenError::RasterTooSmall => write!(f, "raster must be at least 8x8"),
            GenError::TooFewClasses => write!(f, "need at least 2 classes"),
            GenError::InfeasiblePlacement => {
                write!(f, "min_size too large to place max_objects rectangles")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GenError {}

const BACKGROUND: f64 = 0.5;
const NOISE_SIGMA: f64 = 0.02;
const MAX_SIZE: f64 = 0.45;

/// Fill color for a class: a saturated hue, deterministic in (class, C).
/// Hues are spread over the wheel so distinct classes stay L2-separable
/// from each other and from the gray background.
pub fn class_color(class_index: usize, num_classes: usize) -> [f64; 3] {
    let hue = (class_index as f64 + 0.5) / num_classes as f64 * 6.0;
    let seg = hue as usize % 6;
    let frac = hue - math::floor(hue);
    match seg {
        0 => [1.0, frac, 0.0],
        1 => [1.0 - frac, 1.0, 0.0],
        2 => [0.0, 1.0, frac],
        3 => [0.0, 1.0 - frac, 1.0],
        4 => [frac, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - frac],
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes two uniforms per call.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    math::sqrt(-2.0 * math::ln(u1)) * libm::cos(2.0 * math::PI * u2)
}

/// Generates `n_scenes` synthetic scenes, bit-identical for a given seed.
pub fn generate(seed: u64, n_scenes: usize, cfg: &GenConfig) -> Result<Vec<Scene>, GenError> {
    if cfg.height < 8 || cfg.width < 8 {
        return Err(GenError::RasterTooSmall);
    }
    if cfg.num_classes < 2 {
        return Err(GenError::TooFewClasses);
    }
    if cfg.min_size > 1.0
        || (!cfg.allow_overlap && cfg.max_objects as f64 * cfg.min_size * cfg.min_size > 0.5)
    {
        return Err(GenError::InfeasiblePlacement);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_size = MAX_SIZE.max(cfg.min_size);
    let mut scenes = Vec::with_capacity(n_scenes);
    for id in 0..n_scenes {
        let n_objects = if cfg.max_objects == 0 {
            0
        } else {
            rng.gen_range(0..=cfg.max_objects)
        };
        let mut gts: Vec<GroundTruth> = Vec::new();
        for _ in 0..n_objects {
            // rejection-sample a placement; give up quietly after enough tries
            let mut placed = None;
            for _ in 0..1000 {
                let w = rng.gen_range(cfg.min_size..=max_size);
                let h = rng.gen_range(cfg.min_size..=max_size);
                let l = rng.gen_range(0.0..=(1.0 - w));
                let t = rng.gen_range(0.0..=(1.0 - h));
                let candidate = Box::new(l, t, l + w, t + h).expect("generated box is valid");
                if cfg.allow_overlap
                    || gts
                        .iter()
                        .all(|g| crate::geometry::iou(&g.bbox, &candidate) == 0.0)
                {
                    placed = Some(candidate);
                    break;
                }
            }
            let class = rng.gen_range(0..cfg.num_classes);
            if let Some(bbox) = placed {
                gts.push(GroundTruth::new(bbox, class, cfg.num_classes));
            }
        }

        let mut raster = Raster::filled(cfg.height, cfg.width, BACKGROUND);
        for gt in &gts {
            let color = class_color(gt.class_index().unwrap(), cfg.num_classes);
            let [l, t, r, b] = gt.bbox.coords();
            for y in 0..cfg.height {
                let cy = (y as f64 + 0.5) / cfg.height as f64;
                if cy < t || cy > b {
                    continue;
                }
                for x in 0..cfg.width {
                    let cx = (x as f64 + 0.5) / cfg.width as f64;
                    if cx < l || cx > r {
                        continue;
                    }
                    for c in 0..3 {
                        raster.set(y, x, c, color[c]);
                    }
                }
            }
        }
        for v in &mut raster.data {
            *v = (*v + NOISE_SIGMA * gaussian(&mut rng)).clamp(0.0, 1.0);
        }

        scenes.push(Scene {
            id: id as u64,
            raster,
            gts,
        });
    }
    Ok(scenes)
}
