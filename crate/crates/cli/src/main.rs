//! `narrative-attn`: masks, spectra, action-boost SVR and story simulation.
//!
//! Exit status: 0 on success, 2 for usage or validation errors (including
//! unreadable inputs), 1 for anything else.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use narrative_attn::absvr::{absvr_apply, segment_frames, spectral_report, AbsvrParams};
use narrative_attn::grounding::{
    mask_variant, overlap_fractions, radii_from_strength, GcaParams, MaskStrategy, PatchGrid,
};
use narrative_attn::io::{matrix_to_csv, read_boxes_json, read_matrix_csv, write_file, write_pgm};
use narrative_attn::pipeline::{ablation_csv, ablation_matrix, run_story, StoryConfig};
use narrative_attn::Error;

#[derive(Parser, Debug)]
#[command(name = "narrative-attn", version, about = "Attention controls for multi-frame story generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render subject masks for a box list as PGM images.
    Mask(MaskArgs),
    /// Singular-value spectrum, kept rank and knees of a matrix.
    Spectrum(SpectrumArgs),
    /// Apply action-boost SVR to a token matrix split into frame blocks.
    Svr(SvrArgs),
    /// Run a story and write stats, masks, spectra and the cache trace.
    Simulate(SimulateArgs),
    /// Compare mask strategies on one story.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// JSON list of `{"x1","y1","x2","y2"}` boxes.
    boxes: PathBuf,
    #[arg(long, default_value = "64x64")]
    grid: PatchGrid,
    #[arg(long, default_value = "gca")]
    strategy: MaskStrategy,
    /// Influence strength used for every subject.
    #[arg(long, default_value_t = 0.5)]
    strength: f64,
    /// Mask parameter override, e.g. `rho=1.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    /// Matrix CSV (`rows,cols` header).
    input: PathBuf,
    #[arg(long, default_value_t = 0.85)]
    tau: f64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SvrArgs {
    /// Token matrix CSV, one column per token.
    input: PathBuf,
    /// Column indices where a new frame block starts, e.g. `4,8`.
    #[arg(long, value_delimiter = ',')]
    boundaries: Vec<usize>,
    /// Block to express.
    #[arg(long, default_value_t = 0)]
    current: usize,
    #[arg(long)]
    tau: Option<f64>,
    /// Parameter override, e.g. `gain_exp=1.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StoryArgs {
    /// Story config JSON; the bundled default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "NARRATIVE_ATTN_SEED")]
    seed: Option<u64>,
    /// Grid of the highest-resolution layer.
    #[arg(long)]
    grid: Option<PatchGrid>,
    #[arg(long)]
    tau: Option<f64>,
    /// Config override by dotted path, e.g. `sfc.k_h=64` or `frames=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    story: StoryArgs,
    #[arg(long)]
    strategy: Option<MaskStrategy>,
    /// Write 0 in the `ms` column so replays are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    story: StoryArgs,
    #[arg(long, value_delimiter = ',', default_value = "unmasked,box-binary,xor-split,static-two-stage,single-stage,gca")]
    strategies: Vec<MaskStrategy>,
}

enum Failure {
    Usage(String),
    Internal(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Internal(e.into())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Input read failures are the caller's fault, so they exit with 2.
fn input<T>(r: narrative_attn::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Svr(a) => cmd_svr(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Applies `key=value` pairs to a serialized value. Keys are dotted paths
/// that must already exist; values parse as JSON, falling back to a string.
fn apply_overrides(target: &mut Value, overrides: &[String]) -> CliResult {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override `{item}` is not KEY=VALUE")))?;
        let mut slot = &mut *target;
        for part in path.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Failure::Usage(format!("unknown config field `{path}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    Ok(())
}

fn overridden<T>(base: &T, overrides: &[String]) -> CliResult<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(base).map_err(|e| Failure::Internal(e.into()))?;
    apply_overrides(&mut v, overrides)?;
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("invalid override: {e}")))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => Ok(write_file(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_mask(a: MaskArgs) -> CliResult {
    let boxes = input(read_boxes_json(&a.boxes))?;
    let params: GcaParams = overridden(&GcaParams::default(), &a.overrides)?;
    params.validate()?;
    let strengths = vec![a.strength; boxes.len()];
    let masks = mask_variant(a.strategy, &boxes, a.grid, &params, Some(&strengths))?;
    let overlaps = overlap_fractions(&boxes);

    let mut composite = vec![0.0f64; a.grid.len()];
    for (i, (m, b)) in masks.iter().zip(&boxes).enumerate() {
        write_pgm(&a.out.join(format!("subject_{i}.pgm")), &m.values, a.grid)?;
        for (c, &v) in composite.iter_mut().zip(&m.values) {
            *c = c.max(v);
        }
        let r = radii_from_strength(a.strength, b, &params, overlaps[i])?;
        let [c0, c1] = m.centers;
        println!(
            "subject {i}: centers ({:.4}, {:.4}) ({:.4}, {:.4}); inner {:.4} outer {:.4}; overlap {:.4}",
            c0.0, c0.1, c1.0, c1.1, r.inner, r.outer, overlaps[i]
        );
    }
    write_pgm(&a.out.join("composite.pgm"), &composite, a.grid)?;
    Ok(())
}

fn cmd_spectrum(a: SpectrumArgs) -> CliResult {
    let x = input(read_matrix_csv::<f64>(&a.input))?;
    let params = AbsvrParams { tau: a.tau, ..Default::default() };
    let report = spectral_report(&x, &params)?;
    emit(a.out.as_deref(), &report.to_csv())?;
    eprintln!("k = {}, knees = {:?}", report.k, report.knees);
    Ok(())
}

fn cmd_svr(a: SvrArgs) -> CliResult {
    let x = input(read_matrix_csv::<f64>(&a.input))?;
    let mut params: AbsvrParams = overridden(&AbsvrParams::default(), &a.overrides)?;
    if let Some(t) = a.tau {
        params.tau = t;
    }
    let mut seg = segment_frames(&x, &a.boundaries, a.current)?;
    let report = absvr_apply(&mut seg, &params)?;
    emit(a.out.as_deref(), &matrix_to_csv(&seg.concat()))?;
    eprintln!("k = {}", report.k);
    Ok(())
}

fn story_config(a: &StoryArgs) -> CliResult<StoryConfig> {
    let mut cfg = match &a.config {
        Some(p) => input(StoryConfig::load(p))?,
        None => StoryConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.grid {
        let top = cfg.top_layer();
        cfg.layers[top].grid = g;
    }
    if let Some(t) = a.tau {
        cfg.absvr.tau = t;
    }
    let cfg: StoryConfig = overridden(&cfg, &a.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let mut cfg = story_config(&a.story)?;
    if let Some(s) = a.strategy {
        cfg.strategy = s;
    }
    let run = run_story(&cfg, Some(&a.story.out), !a.no_timing)?;
    let last = run.frames.last().ok_or_else(|| Failure::Internal(anyhow!("no frames ran")))?;
    let mut summary = String::new();
    for l in 0..cfg.layers.len() {
        if let Some(s) = last.layer_summary(l) {
            let _ = writeln!(
                summary,
                "layer {l} ({}): mask_cov {:.4} entropy {:.4} history_mass {:.4} occupancy {}",
                cfg.layers[l].grid, s.mask_cov, s.entropy, s.history_mass, s.occupancy
            );
        }
    }
    print!("{summary}");
    println!(
        "{} frames x {} steps, {} artifacts in {}",
        cfg.frames,
        cfg.steps,
        run.artifacts.len(),
        a.story.out.display()
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let cfg = story_config(&a.story)?;
    let rows = ablation_matrix(&cfg, &a.strategies)?;
    let csv = ablation_csv(&rows);
    write_file(&a.story.out.join("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
