use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::absvr::AbsvrParams;
use crate::error::{Error, Result};
use crate::grounding::{GcaParams, GroundingBox, MaskStrategy, PatchGrid};
use crate::sfc::SfcParams;

/// JSON of the bundled two-subject, 20-frame scenario.
pub const DEFAULT_STORY_JSON: &str = include_str!("../../configs/default_story.json");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub grid: PatchGrid,
    pub d_model: usize,
    pub heads: usize,
}

impl LayerSpec {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }
}

/// A subject's grounding: one box for every frame, or one box per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub boxes: Vec<GroundingBox>,
    pub ip_tokens: usize,
}

impl SubjectSpec {
    pub fn box_at(&self, frame: usize) -> GroundingBox {
        if self.boxes.len() == 1 {
            self.boxes[0]
        } else {
            self.boxes[frame]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSpec {
    /// Embedding width `D`.
    pub dim: usize,
    /// Text tokens contributed by each frame.
    pub per_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryConfig {
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub layers: Vec<LayerSpec>,
    pub subjects: Vec<SubjectSpec>,
    pub tokens: TokenSpec,
    #[serde(default)]
    pub gca: GcaParams,
    #[serde(default)]
    pub absvr: AbsvrParams,
    #[serde(default)]
    pub sfc: SfcParams,
    #[serde(default = "default_strategy")]
    pub strategy: MaskStrategy,
    #[serde(default = "default_subject_factor")]
    pub subject_factor: f64,
    #[serde(default = "default_n_dummy")]
    pub n_dummy: usize,
}

fn default_steps() -> usize {
    30
}

fn default_strategy() -> MaskStrategy {
    MaskStrategy::Gca
}

fn default_subject_factor() -> f64 {
    0.6
}

fn default_n_dummy() -> usize {
    1
}

impl Default for StoryConfig {
    fn default() -> Self {
        Self::from_json(DEFAULT_STORY_JSON).expect("bundled story config is valid")
    }
}

impl StoryConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("story config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reports every offending field at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        if self.frames == 0 {
            bad.push("frames: must be >= 1".into());
        }
        if self.steps == 0 {
            bad.push("steps: must be >= 1".into());
        }
        if self.layers.is_empty() {
            bad.push("layers: need at least one layer".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.heads == 0 || l.d_model == 0 || l.d_model % l.heads != 0 {
                bad.push(format!(
                    "layers[{i}]: d_model {} must be a positive multiple of heads {}",
                    l.d_model, l.heads
                ));
            }
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.boxes.len() != 1 && s.boxes.len() != self.frames {
                bad.push(format!(
                    "subjects[{i}].boxes: {} boxes, need 1 or one per frame ({})",
                    s.boxes.len(),
                    self.frames
                ));
            }
            if s.ip_tokens == 0 {
                bad.push(format!("subjects[{i}].ip_tokens: must be >= 1"));
            }
        }
        if self.tokens.dim == 0 {
            bad.push("tokens.dim: must be >= 1".into());
        }
        if self.tokens.per_frame == 0 {
            bad.push("tokens.per_frame: must be >= 1".into());
        }
        if !(self.subject_factor >= 0.0 && self.subject_factor.is_finite()) {
            bad.push("subject_factor: must be finite and >= 0".into());
        }
        for (name, r) in [
            ("gca", self.gca.validate()),
            ("absvr", self.absvr.validate()),
            ("sfc", self.sfc.validate()),
        ] {
            if let Err(e) = r {
                bad.push(format!("{name}: {e}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("\n")))
        }
    }

    /// Text tokens seen by every attention call: all frames' blocks.
    pub fn text_tokens(&self) -> usize {
        self.frames * self.tokens.per_frame
    }

    /// Layer whose grid has the most patches (first on ties).
    pub fn top_layer(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.grid.len() > self.layers[best].grid.len() {
                best = i;
            }
        }
        best
    }

    pub fn boxes_at(&self, frame: usize) -> Vec<GroundingBox> {
        self.subjects.iter().map(|s| s.box_at(frame)).collect()
    }
}
