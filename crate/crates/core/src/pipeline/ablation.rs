use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grounding::MaskStrategy;

use super::config::StoryConfig;
use super::{run_story, StepRecord};

pub const ABLATION_HEADER: &str = "strategy,out_of_box_mass,co_activation,mask_cov,history_mass";

/// Story-wide means for one mask strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: MaskStrategy,
    pub out_of_box_mass: f64,
    pub co_activation: f64,
    pub mask_cov: f64,
    pub history_mass: f64,
}

/// Runs the story once per strategy with everything else (seed included)
/// shared.
pub fn ablation_matrix(cfg: &StoryConfig, strategies: &[MaskStrategy]) -> Result<Vec<AblationRow>> {
    if strategies.len() < 2 {
        return Err(Error::Config(format!(
            "ablation needs at least 2 strategies, got {}",
            strategies.len()
        )));
    }
    strategies
        .iter()
        .map(|&strategy| {
            let mut c = cfg.clone();
            c.strategy = strategy;
            let run = run_story(&c, None, false)?;
            let recs: Vec<&StepRecord> = run.frames.iter().flat_map(|f| &f.records).collect();
            let n = recs.len().max(1) as f64;
            let avg = |f: fn(&StepRecord) -> f64| recs.iter().map(|r| f(r)).sum::<f64>() / n;
            Ok(AblationRow {
                strategy,
                out_of_box_mass: avg(|r| r.out_of_box_mass),
                co_activation: avg(|r| r.co_activation),
                mask_cov: avg(|r| r.mask_cov),
                history_mass: avg(|r| r.history_mass),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.strategy, r.out_of_box_mass, r.co_activation, r.mask_cov, r.history_mass
        );
    }
    s
}
