//! Run configuration: defaults, then an optional `key = value` file, then
//! command-line flags. Everything is validated before any work starts.

use std::path::Path;
use std::str::FromStr;

use omc_core::association::{EmbeddingMode, PipelineConfig, TrackerConfig};
use omc_core::detection::{BarParams, DecodeMode, DEFAULT_IOU_THR, DEFAULT_SCORE_THR};
use omc_core::fusion::FusionConfig;
use omc_core::recheck::DEFAULT_RADIUS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum RefineMode {
    #[default]
    Bypass,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum DecodeArg {
    Sigmoid,
    #[default]
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum EmbeddingArg {
    First,
    Last,
    #[default]
    Updated,
}

/// Every tunable of the tracking pipeline, in user-facing units.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epsilon: f32,
    pub radius: usize,
    pub disable_shrink: bool,
    pub hscale: f32,
    pub k: u32,
    pub alpha: f32,
    pub stride: f32,
    pub score_thr: f32,
    pub nms_iou_thr: f32,
    pub emb_match_thr: f32,
    pub iou_match_thr: f32,
    pub decode: DecodeArg,
    pub refine: RefineMode,
    pub disable_recheck: bool,
    pub embedding_mode: EmbeddingArg,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tracker = TrackerConfig::default();
        Self {
            epsilon: FusionConfig::default().epsilon(),
            radius: DEFAULT_RADIUS,
            disable_shrink: false,
            hscale: BarParams::default().h_scale(),
            k: tracker.retention,
            alpha: tracker.alpha,
            stride: 8.0,
            score_thr: DEFAULT_SCORE_THR,
            nms_iou_thr: DEFAULT_IOU_THR,
            emb_match_thr: tracker.emb_match_thr,
            iou_match_thr: tracker.iou_match_thr,
            decode: DecodeArg::Bar,
            refine: RefineMode::Bypass,
            disable_recheck: false,
            embedding_mode: EmbeddingArg::Updated,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {reason}")]
    File { path: String, line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value {value:?} for {key}"))
}

fn parse_enum<T: clap::ValueEnum>(key: &str, value: &str) -> Result<T, String> {
    T::from_str(value, true).map_err(|_| format!("bad value {value:?} for {key}"))
}

impl RunConfig {
    /// Sets one field from its config-file key. Keys use the long flag
    /// names, with `-` or `_` accepted interchangeably.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key.replace('-', "_").as_str() {
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "radius" => {
                if value.eq_ignore_ascii_case("inf") || value.eq_ignore_ascii_case("none") {
                    self.disable_shrink = true;
                } else {
                    self.radius = parse_value(key, value)?;
                }
            }
            "disable_shrink" => self.disable_shrink = parse_value(key, value)?,
            "hscale" => self.hscale = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "stride" => self.stride = parse_value(key, value)?,
            "score_thr" => self.score_thr = parse_value(key, value)?,
            "nms_iou_thr" => self.nms_iou_thr = parse_value(key, value)?,
            "emb_match_thr" => self.emb_match_thr = parse_value(key, value)?,
            "iou_match_thr" => self.iou_match_thr = parse_value(key, value)?,
            "decode" => self.decode = parse_enum(key, value)?,
            "refine" => self.refine = parse_enum(key, value)?,
            "disable_recheck" => self.disable_recheck = parse_value(key, value)?,
            "embedding_mode" => self.embedding_mode = parse_enum(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key = value` file. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| ConfigError::File {
                path: origin.to_string(),
                line: i + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail("expected key = value".into()))?;
            self.set(key.trim(), value.trim()).map_err(fail)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, ConfigError> {
        let invalid = |e: omc_core::Error| ConfigError::Invalid(e.to_string());
        let cfg = PipelineConfig {
            tracker: TrackerConfig {
                retention: self.k,
                alpha: self.alpha,
                emb_match_thr: self.emb_match_thr,
                iou_match_thr: self.iou_match_thr,
                embedding_mode: match self.embedding_mode {
                    EmbeddingArg::First => EmbeddingMode::First,
                    EmbeddingArg::Last => EmbeddingMode::Last,
                    EmbeddingArg::Updated => EmbeddingMode::Updated,
                },
            },
            decode: match self.decode {
                DecodeArg::Bar => DecodeMode::Bar,
                DecodeArg::Sigmoid => DecodeMode::Sigmoid,
            },
            bar: BarParams::new(self.hscale).map_err(invalid)?,
            score_thr: self.score_thr,
            nms_iou_thr: self.nms_iou_thr,
            radius: (!self.disable_shrink).then_some(self.radius),
            fusion: FusionConfig::new(self.epsilon).map_err(invalid)?,
            recheck: !self.disable_recheck,
            stride: self.stride,
        };
        cfg.validate().map_err(invalid)?;
        Ok(cfg)
    }
}

/// Pipeline flags shared by the commands that run the tracker. Unset flags
/// leave the config-file or default value alone.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct PipelineArgs {
    /// Flat `key = value` file applied before the flags below.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Fusion threshold on the targetness score [default: 0.5, the published setting].
    #[arg(long)]
    pub epsilon: Option<f32>,
    /// Shrinking radius in cells [default: 3, the published setting].
    #[arg(long)]
    pub radius: Option<usize>,
    /// Offset scale h of boundary-aware decoding [default: 10, the published setting].
    #[arg(long)]
    pub hscale: Option<f32>,
    /// Frames a tracklet survives without a match [default: 30, the published setting].
    #[arg(long)]
    pub k: Option<u32>,
    /// Embedding moving-average momentum [default: 0.9].
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Pixels per feature-map cell [default: 8].
    #[arg(long)]
    pub stride: Option<f32>,
    /// Foreground score threshold [default: 0.5].
    #[arg(long)]
    pub score_thr: Option<f32>,
    /// NMS overlap threshold [default: 0.45].
    #[arg(long)]
    pub nms_iou_thr: Option<f32>,
    /// Cosine threshold of the embedding association stage [default: 0.6].
    #[arg(long)]
    pub emb_match_thr: Option<f32>,
    /// IOU threshold of the fallback association stage [default: 0.5].
    #[arg(long)]
    pub iou_match_thr: Option<f32>,
    /// Box offset decoding [default: bar].
    #[arg(long, value_enum)]
    pub decode: Option<DecodeArg>,
    /// Response refinement; `learned` needs --weights [default: bypass].
    #[arg(long, value_enum)]
    pub refine: Option<RefineMode>,
    /// Skip propagation and fusion; detections come from the detector alone.
    #[arg(long)]
    pub disable_recheck: bool,
    /// Sum whole response maps instead of shrinking them.
    #[arg(long)]
    pub disable_shrink: bool,
    /// Tracklet embedding update rule [default: updated].
    #[arg(long, value_enum)]
    pub embedding_mode: Option<EmbeddingArg>,
}

impl PipelineArgs {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        take!(
            epsilon,
            radius,
            hscale,
            k,
            alpha,
            stride,
            score_thr,
            nms_iou_thr,
            emb_match_thr,
            iou_match_thr,
            decode,
            refine,
            embedding_mode
        );
        cfg.disable_recheck |= self.disable_recheck;
        cfg.disable_shrink |= self.disable_shrink;
        cfg.pipeline()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_pipeline_defaults() {
        assert_eq!(RunConfig::default().pipeline().unwrap(), PipelineConfig::default());
    }

    #[test]
    fn file_then_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# tuned\nepsilon = 0.7\nradius=inf\ndecode = sigmoid\n", "t").unwrap();
        assert_eq!(cfg.epsilon, 0.7);
        assert!(cfg.disable_shrink);
        assert_eq!(cfg.decode, DecodeArg::Sigmoid);
        assert_eq!(cfg.pipeline().unwrap().radius, None);
    }

    #[test]
    fn bad_lines_report_position() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("k = 3\nbogus = 1\n", "c.txt").unwrap_err();
        assert_eq!(err.to_string(), "c.txt:2: unknown key \"bogus\"");
        assert!(cfg.apply_text("epsilon 0.3", "c").is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let cfg = RunConfig { epsilon: 1.5, ..RunConfig::default() };
        assert!(cfg.pipeline().is_err());
        let cfg = RunConfig { alpha: 1.5, ..RunConfig::default() };
        assert!(cfg.pipeline().is_err());
        let cfg = RunConfig { hscale: 0.0, ..RunConfig::default() };
        assert!(cfg.pipeline().is_err());
    }
}
