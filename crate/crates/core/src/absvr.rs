//! Action-boost singular value reweighting on frame token embeddings.
//!
//! Token blocks are oriented features x tokens (`D x T`). For the current
//! ("express") frame a thin SVD gives the spectrum; the kept rank `k` is the
//! smallest rank whose cumulative energy reaches `tau`. The express block is
//! rebuilt from its top-`k` triplets with a gentle gain, and every other
//! ("suppress") block is notch-projected onto the orthogonal complement of the
//! express trunk `P_k = U_k U_kᵀ` and attenuated.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numkernel::{thin_svd, top_k_indices, Matrix, SvdResult, DEFAULT_SVD_TOL};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbsvrParams<T = f64> {
    /// Cumulative energy threshold in `(0, 1]`.
    pub tau: T,
    /// Gain on the kept singular values of the express block (>= 1).
    pub gain_exp: T,
    /// Gain on the notched suppress blocks (in `[0, 1]`).
    pub gain_sup: T,
    /// Total energy at or below this selects rank 0.
    pub zero_energy_epsilon: T,
    /// When false the simulator passes embeddings through untouched.
    pub enabled: bool,
}

impl<T: Scalar> Default for AbsvrParams<T> {
    fn default() -> Self {
        Self {
            tau: T::lit(0.85),
            gain_exp: T::lit(1.1),
            gain_sup: T::lit(0.9),
            zero_energy_epsilon: T::lit(1e-12),
            enabled: true,
        }
    }
}

impl<T: Scalar> AbsvrParams<T> {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tau > T::zero() && self.tau <= T::one()) {
            bad.push("need tau in (0, 1]");
        }
        if !(self.gain_exp >= T::one()) {
            bad.push("need gain_exp >= 1");
        }
        if !(self.gain_sup >= T::zero() && self.gain_sup <= T::one()) {
            bad.push("need gain_sup in [0, 1]");
        }
        if !(self.zero_energy_epsilon >= T::zero()) {
            bad.push("need zero_energy_epsilon >= 0");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("absvr params: {}", bad.join("; "))))
        }
    }
}

/// Ordered frame blocks of one story prompt; `current` is the express block.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSegments<T = f64> {
    pub frames: Vec<Matrix<T>>,
    pub current: usize,
}

impl<T: Scalar> FrameSegments<T> {
    pub fn new(frames: Vec<Matrix<T>>, current: usize) -> Result<Self> {
        if current >= frames.len() {
            return Err(Error::InvalidInput(format!(
                "current frame {current} of {}",
                frames.len()
            )));
        }
        let d = frames[0].rows();
        if let Some(f) = frames.iter().position(|b| b.rows() != d) {
            return Err(dim_err!(
                "frame {f} has feature dimension {}, frame 0 has {d}",
                frames[f].rows()
            ));
        }
        Ok(Self { frames, current })
    }

    pub fn express(&self) -> &Matrix<T> {
        &self.frames[self.current]
    }

    /// All blocks side by side (`D x sum T_f`).
    pub fn concat(&self) -> Matrix<T> {
        Matrix::hstack(&self.frames).expect("blocks share the feature dimension")
    }
}

/// Splits the columns of `tokens` at `boundaries` (strictly increasing,
/// each in `1..T`).
pub fn segment_frames<T: Scalar>(
    tokens: &Matrix<T>,
    boundaries: &[usize],
    current: usize,
) -> Result<FrameSegments<T>> {
    let t = tokens.cols();
    let mut prev = 0;
    for &b in boundaries {
        if b <= prev || b >= t {
            return Err(Error::InvalidInput(format!(
                "boundary {b} not strictly increasing within 1..{t}"
            )));
        }
        prev = b;
    }
    let edges: Vec<usize> = std::iter::once(0)
        .chain(boundaries.iter().copied())
        .chain(std::iter::once(t))
        .collect();
    let frames = edges
        .windows(2)
        .map(|w| tokens.column_range(w[0]..w[1]))
        .collect();
    FrameSegments::new(frames, current)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralReport<T = f64> {
    pub sigma: Vec<T>,
    /// `E(r)` for `r = 1..=m`, stored at index `r - 1`.
    pub cumulative_energy: Vec<T>,
    pub k: usize,
    pub knees: Vec<usize>,
}

impl<T: Scalar> SpectralReport<T> {
    pub fn from_sigma(sigma: Vec<T>, tau: T, eps: T) -> Result<Self> {
        let k = select_rank(&sigma, tau, eps)?;
        Ok(Self {
            cumulative_energy: cumulative_energy(&sigma),
            knees: detect_knees(&sigma),
            sigma,
            k,
        })
    }

    /// CSV with columns `i,sigma,energy_cum,is_knee,k_selected`; `i` is
    /// 0-based, `energy_cum` is `E(i + 1)`, `k_selected` repeats `k`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,sigma,energy_cum,is_knee,k_selected\n");
        for (i, (sig, e)) in self.sigma.iter().zip(&self.cumulative_energy).enumerate() {
            let knee = u8::from(self.knees.contains(&i));
            let _ = writeln!(s, "{i},{sig},{e},{knee},{}", self.k);
        }
        s
    }
}

/// Spectrum, kept rank and knees of a single block.
pub fn spectral_report<T: Scalar>(x: &Matrix<T>, params: &AbsvrParams<T>) -> Result<SpectralReport<T>> {
    params.validate()?;
    let svd = thin_svd(x, T::lit(DEFAULT_SVD_TOL))?;
    SpectralReport::from_sigma(svd.sigma, params.tau, params.zero_energy_epsilon)
}

/// `E(r) = Σ_{i<=r} σ_i² / Σ σ_i²`; all zeros when the total is zero.
pub fn cumulative_energy<T: Scalar>(sigma: &[T]) -> Vec<T> {
    let mut acc = T::zero();
    let partial: Vec<T> = sigma
        .iter()
        .map(|&s| {
            acc += s * s;
            acc
        })
        .collect();
    let total = acc;
    if total > T::zero() {
        partial.into_iter().map(|e| e / total).collect()
    } else {
        vec![T::zero(); sigma.len()]
    }
}

/// Smallest `r` with `E(r) >= tau`; 0 when the total energy is `<= eps`.
pub fn select_rank<T: Scalar>(sigma: &[T], tau: T, eps: T) -> Result<usize> {
    if !(tau > T::zero() && tau <= T::one()) {
        return Err(Error::Config(format!("tau {tau} outside (0, 1]")));
    }
    let total: T = sigma.iter().map(|&s| s * s).sum();
    if total <= eps {
        return Ok(0);
    }
    let energy = cumulative_energy(sigma);
    Ok(energy
        .iter()
        .position(|&e| e >= tau)
        .map_or(sigma.len(), |i| i + 1))
}

/// `P_k = U_k U_kᵀ` (`D x D`).
pub fn trunk_projector<T: Scalar>(svd: &SvdResult<T>, k: usize) -> Result<Matrix<T>> {
    let m = svd.sigma.len();
    if k > m {
        return Err(Error::InvalidParameter(format!("rank {k} > {m}")));
    }
    let uk = svd.u.column_range(0..k);
    uk.matmul_t(&uk)
}

/// `(I - P_k) X` computed as `X - U_k (U_kᵀ X)`.
fn notch<T: Scalar>(uk: &Matrix<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if uk.cols() == 0 {
        return Ok(x.clone());
    }
    let coeff = uk.t_matmul(x)?;
    x.sub(&uk.matmul(&coeff)?)
}

/// Reshapes `segments` in place and returns the express block's spectrum.
pub fn absvr_apply<T: Scalar>(
    segments: &mut FrameSegments<T>,
    params: &AbsvrParams<T>,
) -> Result<SpectralReport<T>> {
    params.validate()?;
    let d = segments.express().rows();
    if let Some(f) = segments.frames.iter().position(|b| b.rows() != d) {
        return Err(dim_err!(
            "frame {f} has feature dimension {}, express block has {d}",
            segments.frames[f].rows()
        ));
    }
    if segments.express().is_empty() {
        return Err(Error::InvalidInput("empty express block".into()));
    }
    let svd = thin_svd(segments.express(), T::lit(DEFAULT_SVD_TOL))?;
    let report = SpectralReport::from_sigma(svd.sigma.clone(), params.tau, params.zero_energy_epsilon)?;
    let k = report.k;
    let uk = svd.u.column_range(0..k);

    let mut us = uk.clone();
    for r in 0..us.rows() {
        for (x, &s) in us.row_mut(r).iter_mut().zip(&svd.sigma[..k]) {
            *x *= params.gain_exp * s;
        }
    }
    let vk = Matrix::from_fn(k, svd.vt.cols(), |r, c| svd.vt.get(r, c));
    let express = us.matmul(&vk)?;

    let current = segments.current;
    for (f, block) in segments.frames.iter_mut().enumerate() {
        if f == current {
            *block = express.clone();
        } else {
            *block = notch(&uk, block)?.scale(params.gain_sup);
        }
    }
    Ok(report)
}

/// Baseline reweighting without projection: uniform gains only.
pub fn plain_svr<T: Scalar>(
    express: &Matrix<T>,
    suppress: &[Matrix<T>],
    gain_up: T,
    gain_down: T,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    if !(gain_up > T::zero() && gain_down > T::zero()) {
        return Err(Error::InvalidParameter("svr gains must be positive".into()));
    }
    Ok((
        express.scale(gain_up),
        suppress.iter().map(|b| b.scale(gain_down)).collect(),
    ))
}

/// Indices of the three largest drops `σ_i² - σ_{i+1}²`, ascending.
pub fn detect_knees<T: Scalar>(sigma: &[T]) -> Vec<usize> {
    if sigma.len() < 2 {
        return Vec::new();
    }
    let drops: Vec<T> = sigma.windows(2).map(|w| w[0] * w[0] - w[1] * w[1]).collect();
    top_k_indices(&drops, 3)
}

/// Semantic emphasis bands for choosing `tau`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Emphasis {
    /// Identity / core shape.
    Identity,
    /// Actions / interactions.
    Actions,
    /// Background continuity.
    Background,
    /// Style tone, lighting.
    Style,
    /// Fine details, textures.
    Details,
}

/// Recommended cumulative-energy threshold for an emphasis band.
pub fn band_recommendation(emphasis: Emphasis) -> f64 {
    match emphasis {
        Emphasis::Identity => 0.60,
        Emphasis::Actions => 0.80,
        Emphasis::Background => 0.90,
        Emphasis::Style => 0.93,
        Emphasis::Details => 0.98,
    }
}
