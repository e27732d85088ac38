//! Deterministic frame-loop simulator.
//!
//! Each frame reshapes the story's token blocks with action-boost SVR, then
//! runs `steps` denoising steps over every configured layer. A layer call is
//! one [`gca_forward`] whose text branch goes through the forgetting cache,
//! followed by background context mixing on low-resolution layers and a
//! residual update of that layer's hidden state. Hidden states are freshly
//! drawn at the start of each frame; only the cache carries across frames.

mod ablation;
mod config;
mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use ablation::{ablation_csv, ablation_matrix, AblationRow, ABLATION_HEADER};
pub use config::{LayerSpec, StoryConfig, SubjectSpec, TokenSpec, DEFAULT_STORY_JSON};
pub use synth::{frame_tokens, initial_hidden, subject_ip_tokens, synth_story, SynthStory};

use crate::absvr::{absvr_apply, spectral_report, FrameSegments, SpectralReport};
use crate::error::{Error, Result};
use crate::gca::{
    gca_forward, AttentionConfig, EncoderStates, ForwardOptions, LayerWeights, PlainTextAttention,
    TextAttention,
};
use crate::grounding::{box_footprint, mask_variant, GroundingBox, PatchGrid, SubjectMask};
use crate::io::{write_file, write_pgm};
use crate::numkernel::Matrix;
use crate::sfc::{background_mask, CacheKey, CachedTextAttention, SfcCache};

pub const STATS_HEADER: &str = "frame,layer,step,mask_cov,entropy,history_mass,occupancy,k,knees,ms";

/// Measurements of one layer call.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub layer: usize,
    pub step: usize,
    /// Mean subject-mask value, averaged over subjects.
    pub mask_cov: f64,
    pub entropy: f64,
    pub history_mass: f64,
    /// Rows stored for this `(layer, step)` after the call.
    pub occupancy: usize,
    /// Mean IP-subject attention over patches outside every box footprint.
    pub out_of_box_mass: f64,
    /// Mean over patches of `sum_{i<j} min(M_i, M_j)`.
    pub co_activation: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub mask_cov: f64,
    pub entropy: f64,
    pub history_mass: f64,
    pub occupancy: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub frame: usize,
    /// Rank kept by the spectral step.
    pub k: usize,
    pub knees: Vec<usize>,
    pub spectrum: SpectralReport,
    /// One record per `(step, layer)`, step-major.
    pub records: Vec<StepRecord>,
    /// Top-layer subject masks of the final step.
    pub masks: Vec<SubjectMask>,
    pub ms: f64,
}

impl FrameStats {
    /// Step means for one layer; occupancy is the last step's.
    pub fn layer_summary(&self, layer: usize) -> Option<LayerSummary> {
        let recs: Vec<&StepRecord> = self.records.iter().filter(|r| r.layer == layer).collect();
        let last = recs.last()?;
        let n = recs.len() as f64;
        let mean = |f: fn(&StepRecord) -> f64| recs.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(LayerSummary {
            mask_cov: mean(|r| r.mask_cov),
            entropy: mean(|r| r.entropy),
            history_mass: mean(|r| r.history_mass),
            occupancy: last.occupancy,
        })
    }

    /// Appends this frame's rows; `timing = false` writes `0` for `ms`.
    pub fn write_csv_rows(&self, out: &mut String, timing: bool) {
        let knees = self
            .knees
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        for r in &self.records {
            let ms = if timing { r.ms } else { 0.0 };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.frame,
                r.layer,
                r.step,
                r.mask_cov,
                r.entropy,
                r.history_mass,
                r.occupancy,
                self.k,
                knees,
                ms
            );
        }
    }
}

pub fn stats_csv(frames: &[FrameStats], timing: bool) -> String {
    let mut s = format!("{STATS_HEADER}\n");
    for f in frames {
        f.write_csv_rows(&mut s, timing);
    }
    s
}

/// Runs a story frame by frame, holding the cache between frames.
#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: StoryConfig,
    story: SynthStory,
    weights: Vec<LayerWeights>,
    cache: SfcCache,
    hidden: Vec<Matrix>,
    next_frame: usize,
    bypass_cache: bool,
}

impl Simulator {
    pub fn new(cfg: StoryConfig) -> Result<Self> {
        cfg.validate()?;
        let story = synth_story(&cfg);
        let weights = cfg
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                LayerWeights::seeded(cfg.seed, l as u64, spec.d_model, cfg.tokens.dim, spec.d_model)
            })
            .collect();
        let hidden = (0..cfg.layers.len()).map(|l| initial_hidden(&cfg, 0, l)).collect();
        Ok(Self {
            cfg,
            story,
            weights,
            cache: SfcCache::new(),
            hidden,
            next_frame: 0,
            bypass_cache: false,
        })
    }

    /// Same run with the text branch never touching the cache.
    pub fn without_cache(cfg: StoryConfig) -> Result<Self> {
        let mut sim = Self::new(cfg)?;
        sim.bypass_cache = true;
        Ok(sim)
    }

    pub fn config(&self) -> &StoryConfig {
        &self.cfg
    }

    pub fn story(&self) -> &SynthStory {
        &self.story
    }

    pub fn weights(&self, layer: usize) -> &LayerWeights {
        &self.weights[layer]
    }

    pub fn cache(&self) -> &SfcCache {
        &self.cache
    }

    /// Hidden state of `layer` after the most recent frame.
    pub fn hidden(&self, layer: usize) -> &Matrix {
        &self.hidden[layer]
    }

    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    /// Text tokens of `frame` after spectral reshaping (`T x D`) and the
    /// express block's spectrum.
    pub fn frame_text(&self, frame: usize) -> Result<(Matrix, SpectralReport)> {
        let mut seg = FrameSegments::new(self.story.blocks.clone(), frame)?;
        let report = if self.cfg.absvr.enabled {
            absvr_apply(&mut seg, &self.cfg.absvr)?
        } else {
            spectral_report(seg.express(), &self.cfg.absvr)?
        };
        Ok((seg.concat().transpose(), report))
    }

    fn attention_config(&self, layer: usize, frame: usize) -> AttentionConfig {
        let spec = &self.cfg.layers[layer];
        let mut a = AttentionConfig::new(
            spec.heads,
            spec.head_dim(),
            spec.grid,
            self.cfg.subjects.iter().map(|s| s.ip_tokens).collect(),
        );
        let per = self.cfg.tokens.per_frame;
        a.text_tokens = self.cfg.text_tokens();
        a.n_dummy = self.cfg.n_dummy;
        a.subject_factor = self.cfg.subject_factor;
        a.strategy = self.cfg.strategy;
        a.subject_token_indices = Some((frame * per..(frame + 1) * per).collect());
        a
    }

    /// Runs the next frame; frames must be run in order.
    pub fn run_frame(&mut self, frame: usize) -> Result<FrameStats> {
        if frame != self.next_frame || frame >= self.cfg.frames {
            return Err(Error::InvalidInput(format!(
                "frame {frame} requested, next runnable frame is {} of {}",
                self.next_frame, self.cfg.frames
            )));
        }
        let started = Instant::now();
        let cfg = self.cfg.clone();
        let (text, spectrum) = self.frame_text(frame)?;
        let states = EncoderStates::new(text, self.story.ip.clone())?;
        let boxes = cfg.boxes_at(frame);

        let top = cfg.layers[cfg.top_layer()].grid;
        let bg_masks = mask_variant(cfg.strategy, &boxes, top, &cfg.gca, None)?;
        let background = background_mask(&bg_masks, top, None)?;

        let attn: Vec<AttentionConfig> =
            (0..cfg.layers.len()).map(|l| self.attention_config(l, frame)).collect();
        let outside: Vec<Vec<usize>> = cfg
            .layers
            .iter()
            .map(|l| outside_patches(&boxes, l.grid))
            .collect();
        let n_ip: usize = cfg.subjects.iter().map(|s| s.ip_tokens).sum();
        let mut hidden: Vec<Matrix> =
            (0..cfg.layers.len()).map(|l| initial_hidden(&cfg, frame, l)).collect();
        let mut records = Vec::with_capacity(cfg.steps * cfg.layers.len());
        let mut final_masks = Vec::new();

        for step in 0..cfg.steps {
            for (layer, spec) in cfg.layers.iter().enumerate() {
                let t0 = Instant::now();
                let mut plain = PlainTextAttention;
                let mut cached = CachedTextAttention {
                    cache: &mut self.cache,
                    params: &cfg.sfc,
                    key: CacheKey::conditional(layer, step),
                    frame,
                };
                let text_attn: &mut dyn TextAttention<f64> =
                    if self.bypass_cache { &mut plain } else { &mut cached };
                let out = gca_forward(
                    &hidden[layer],
                    &states,
                    &boxes,
                    &attn[layer],
                    &cfg.gca,
                    &self.weights[layer],
                    ForwardOptions { step, strength_override: None },
                    text_attn,
                )?;
                let update = if self.bypass_cache {
                    out.update
                } else {
                    self.cache
                        .mix_context(layer, step, &out.update, spec.grid, &background, top, &cfg.sfc)?
                };
                hidden[layer] = hidden[layer].add(&update)?;

                let occupancy = if self.bypass_cache { 0 } else { self.cache.occupancy(layer, step) };
                records.push(StepRecord {
                    layer,
                    step,
                    mask_cov: mean(out.masks.iter().map(SubjectMask::mean)),
                    entropy: out.entropy,
                    history_mass: out.history_mass,
                    occupancy,
                    out_of_box_mass: out_of_box_mass(&out.ip_weights, n_ip, &outside[layer]),
                    co_activation: co_activation(&out.masks),
                    ms: t0.elapsed().as_secs_f64() * 1e3,
                });
                if layer == cfg.top_layer() && step + 1 == cfg.steps {
                    final_masks = out.masks;
                }
            }
        }

        self.hidden = hidden;
        self.next_frame += 1;
        Ok(FrameStats {
            frame,
            k: spectrum.k,
            knees: spectrum.knees.clone(),
            spectrum,
            records,
            masks: final_masks,
            ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Patches covered by no box footprint.
pub fn outside_patches(boxes: &[GroundingBox], grid: PatchGrid) -> Vec<usize> {
    let mut inside = vec![false; grid.len()];
    for b in boxes {
        for p in box_footprint(b, grid) {
            inside[p] = true;
        }
    }
    (0..grid.len()).filter(|&p| !inside[p]).collect()
}

/// Mean over `patches` of the attention on the first `n_ip` columns.
pub fn out_of_box_mass(ip_weights: &Matrix, n_ip: usize, patches: &[usize]) -> f64 {
    mean(patches.iter().map(|&p| ip_weights.row(p)[..n_ip].iter().sum()))
}

/// Mean over patches of the pairwise overlap `sum_{i<j} min(M_i, M_j)`.
pub fn co_activation(masks: &[SubjectMask]) -> f64 {
    let Some(first) = masks.first() else {
        return 0.0;
    };
    mean((0..first.values.len()).map(|p| {
        let mut s = 0.0;
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                s += masks[i].values[p].min(masks[j].values[p]);
            }
        }
        s
    }))
}

/// Output of [`run_story`].
#[derive(Clone, Debug, PartialEq)]
pub struct StoryRun {
    pub frames: Vec<FrameStats>,
    pub stats_csv: String,
    pub trace_csv: String,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<PathBuf>,
}

/// Runs every frame. With `out`, writes `stats.csv`, `cache_trace.csv`,
/// `masks/frame_FFF_subject_S.pgm` and `spectrum/frame_FFF.csv` there.
pub fn run_story(cfg: &StoryConfig, out: Option<&Path>, timing: bool) -> Result<StoryRun> {
    let mut sim = Simulator::new(cfg.clone())?;
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        frames.push(sim.run_frame(f)?);
    }
    let stats = stats_csv(&frames, timing);
    let trace = sim.cache().trace_csv();
    let mut artifacts = Vec::new();
    if let Some(dir) = out {
        let top = cfg.layers[cfg.top_layer()].grid;
        let mut emit = |rel: PathBuf, bytes: &[u8]| -> Result<()> {
            write_file(&dir.join(&rel), bytes)?;
            artifacts.push(rel);
            Ok(())
        };
        emit("stats.csv".into(), stats.as_bytes())?;
        emit("cache_trace.csv".into(), trace.as_bytes())?;
        for fs in &frames {
            emit(
                PathBuf::from(format!("spectrum/frame_{:03}.csv", fs.frame)),
                fs.spectrum.to_csv().as_bytes(),
            )?;
        }
        for fs in &frames {
            for (i, m) in fs.masks.iter().enumerate() {
                let rel = PathBuf::from(format!("masks/frame_{:03}_subject_{i}.pgm", fs.frame));
                write_pgm(&dir.join(&rel), &m.values, top)?;
                artifacts.push(rel);
            }
        }
    }
    Ok(StoryRun { frames, stats_csv: stats, trace_csv: trace, artifacts })
}
