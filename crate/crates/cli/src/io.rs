//! File formats: scene datasets as JSON lines (`drmm-scene/1`), weights as
//! versioned JSON with reals stored as decimal strings (`drmm-weights/1`),
//! predictions as JSON lines (`drmm-pred/1`), and plain CSV tables.
//!
//! All writers are deterministic: identical inputs produce byte-identical
//! files.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use drmm_core::data::{GroundTruth, Raster, Scene};
use drmm_core::geometry::Box;
use drmm_core::inference::Prediction;
use drmm_core::model::{ModelConfig, Weights};

pub const SCENE_SCHEMA: &str = "drmm-scene/1";
pub const WEIGHTS_SCHEMA: &str = "drmm-weights/1";
pub const PRED_SCHEMA: &str = "drmm-pred/1";

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    /// Parse or validation failure; `line` is 1-based where applicable.
    Format { line: Option<usize>, msg: String },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "{e}"),
            IoError::Format { line: Some(l), msg } => write!(f, "line {l}: {msg}"),
            IoError::Format { line: None, msg } => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

fn format_err(line: Option<usize>, msg: impl Into<String>) -> IoError {
    IoError::Format {
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------- scenes

#[derive(Serialize, Deserialize)]
struct SceneLine {
    schema: String,
    id: u64,
    classes: usize,
    height: usize,
    width: usize,
    raster: Vec<f64>,
    gts: Vec<GtLine>,
}

#[derive(Serialize, Deserialize)]
struct GtLine {
    bbox: [f64; 4],
    class: usize,
}

/// A loaded dataset: the scenes plus the class count they were generated
/// with.
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub num_classes: usize,
}

pub fn save_scenes(path: &Path, scenes: &[Scene], num_classes: usize) -> Result<(), IoError> {
    let mut out = Vec::new();
    for scene in scenes {
        let line = SceneLine {
            schema: SCENE_SCHEMA.to_string(),
            id: scene.id,
            classes: num_classes,
            height: scene.raster.height,
            width: scene.raster.width,
            raster: scene.raster.data.clone(),
            gts: scene
                .gts
                .iter()
                .map(|g| GtLine {
                    bbox: g.bbox.coords(),
                    class: g.class_index().expect("generated GTs are one-hot"),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| format_err(None, e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a whole dataset; any malformed line fails the entire load with
/// its 1-based line number.
pub fn load_scenes(path: &Path) -> Result<Dataset, IoError> {
    let text = fs::read_to_string(path)?;
    let mut scenes = Vec::new();
    let mut num_classes = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = Some(i + 1);
        if raw.trim().is_empty() {
            continue;
        }
        let line: SceneLine =
            serde_json::from_str(raw).map_err(|e| format_err(lineno, e.to_string()))?;
        if line.schema != SCENE_SCHEMA {
            return Err(format_err(
                lineno,
                format!("unsupported schema `{}`", line.schema),
            ));
        }
        if line.raster.len() != line.height * line.width * 3 {
            return Err(format_err(
                lineno,
                format!(
                    "raster has {} values, expected {}",
                    line.raster.len(),
                    line.height * line.width * 3
                ),
            ));
        }
        match num_classes {
            None => num_classes = Some(line.classes),
            Some(c) if c != line.classes => {
                return Err(format_err(lineno, "inconsistent class count"));
            }
            _ => {}
        }
        let mut gts = Vec::with_capacity(line.gts.len());
        for g in &line.gts {
            if g.class >= line.classes {
                return Err(format_err(
                    lineno,
                    format!("class {} out of range (classes = {})", g.class, line.classes),
                ));
            }
            let [l, t, r, b] = g.bbox;
            let bbox = Box::new(l, t, r, b)
                .map_err(|e| format_err(lineno, format!("bad bbox: {e}")))?;
            gts.push(GroundTruth::new(bbox, g.class, line.classes));
        }
        scenes.push(Scene {
            id: line.id,
            raster: Raster {
                height: line.height,
                width: line.width,
                data: line.raster,
            },
            gts,
        });
    }
    let num_classes = num_classes.ok_or_else(|| format_err(None, "dataset file is empty"))?;
    Ok(Dataset {
        scenes,
        num_classes,
    })
}

// --------------------------------------------------------------- weights

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    schema: String,
    config: ConfigJson,
    /// `[name, [decimal strings]]` pairs in a fixed order.
    arrays: Vec<(String, Vec<String>)>,
}

#[derive(Serialize, Deserialize)]
struct ConfigJson {
    num_stages: usize,
    num_proposals: usize,
    num_classes: usize,
    hidden_sizes: Vec<usize>,
    out_size: usize,
    topk_ratio: String,
    seed: u64,
}

/// Shortest decimal string that parses back to the exact same double.
fn real_to_string(v: f64) -> String {
    format!("{v}")
}

fn real_from_string(s: &str) -> Result<f64, IoError> {
    s.parse::<f64>()
        .map_err(|_| format_err(None, format!("bad real `{s}`")))
}

pub fn save_weights(path: &Path, cfg: &ModelConfig, weights: &Weights) -> Result<(), IoError> {
    let file = WeightsFile {
        schema: WEIGHTS_SCHEMA.to_string(),
        config: ConfigJson {
            num_stages: cfg.num_stages,
            num_proposals: cfg.num_proposals,
            num_classes: cfg.num_classes,
            hidden_sizes: cfg.hidden_sizes.clone(),
            out_size: cfg.out_size,
            topk_ratio: real_to_string(cfg.topk_ratio),
            seed: cfg.seed,
        },
        arrays: weights
            .to_named_arrays()
            .into_iter()
            .map(|(name, vals)| (name, vals.iter().map(|&v| real_to_string(v)).collect()))
            .collect(),
    };
    let json =
        serde_json::to_string_pretty(&file).map_err(|e| format_err(None, e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, Weights), IoError> {
    let text = fs::read_to_string(path)?;
    let file: WeightsFile =
        serde_json::from_str(&text).map_err(|e| format_err(None, e.to_string()))?;
    if file.schema != WEIGHTS_SCHEMA {
        return Err(format_err(
            None,
            format!("unsupported schema `{}`", file.schema),
        ));
    }
    let cfg = ModelConfig {
        num_stages: file.config.num_stages,
        num_proposals: file.config.num_proposals,
        num_classes: file.config.num_classes,
        hidden_sizes: file.config.hidden_sizes.clone(),
        out_size: file.config.out_size,
        topk_ratio: real_from_string(&file.config.topk_ratio)?,
        seed: file.config.seed,
    };
    cfg.validate()
        .map_err(|e| format_err(None, e.to_string()))?;
    let mut arrays = Vec::with_capacity(file.arrays.len());
    for (name, vals) in &file.arrays {
        let mut parsed = Vec::with_capacity(vals.len());
        for v in vals {
            parsed.push(real_from_string(v)?);
        }
        arrays.push((name.clone(), parsed));
    }
    let template = Weights::init(&cfg);
    let weights = Weights::from_named_arrays(&template, &arrays)
        .map_err(|e| format_err(None, e))?;
    Ok((cfg, weights))
}

// ------------------------------------------------------------ predictions

#[derive(Serialize, Deserialize)]
struct PredLine {
    schema: String,
    scene_id: u64,
    preds: Vec<PredJson>,
}

#[derive(Serialize, Deserialize)]
struct PredJson {
    bbox: [f64; 4],
    class: usize,
    score: f64,
}

pub fn save_predictions(
    path: &Path,
    scene_ids: &[u64],
    preds_by_scene: &[Vec<Prediction>],
) -> Result<(), IoError> {
    let mut out = Vec::new();
    for (id, preds) in scene_ids.iter().zip(preds_by_scene) {
        let line = PredLine {
            schema: PRED_SCHEMA.to_string(),
            scene_id: *id,
            preds: preds
                .iter()
                .map(|p| PredJson {
                    bbox: p.bbox.coords(),
                    class: p.class_index,
                    score: p.score,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| format_err(None, e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ------------------------------------------------------------------- csv

/// Writes a CSV with a header row; every cell is already a string.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), IoError> {
    let mut out = Vec::new();
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cell(v: f64) -> String {
    format!("{v}")
}
