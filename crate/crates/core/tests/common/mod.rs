//! Independent oracles and property checks shared by the integration tests
//! and the acceptance runner. Each check takes its case count so the topic
//! tests can run a quick pass while the runner uses the full sizes.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use narrative_attn::absvr::{
    absvr_apply, band_recommendation, detect_knees, select_rank, spectral_report, trunk_projector,
    AbsvrParams, Emphasis, FrameSegments,
};
use narrative_attn::grounding::{
    assemble_bias, gaussian_field, mask_variant, radii_from_strength, ColumnOwner, GcaParams,
    GroundingBox, MaskStrategy, PatchGrid, SubjectMask,
};
use narrative_attn::numkernel::{thin_svd, Matrix, DEFAULT_SVD_TOL};
use narrative_attn::pipeline::{
    ablation_matrix, initial_hidden, run_story, LayerSpec, Simulator, StoryConfig, TokenSpec,
};
use narrative_attn::rng::SplitMix64;
use narrative_attn::sfc::{cap_cache, concat_attend, CacheKey, CapPolicy, KvEntry, SfcCache, SfcParams};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub mod tol {
    pub const SYMMETRY: f64 = 1e-10;
    pub const IDEMPOTENCE: f64 = 1e-9;
    pub const TRACE: f64 = 1e-9;
    pub const NOTCH_REL: f64 = 1e-8;
    pub const SVD_RECON_REL: f64 = 1e-8;
    pub const SVD_ORTHO: f64 = 1e-9;
    pub const GAUSSIAN: f64 = 1e-12;
    pub const BASE_RADIUS: f64 = 1e-12;
    pub const L_MAX: usize = 512;
    pub const CHI_SQUARE_P: f64 = 0.01;
    pub const REDUCTION: f64 = 1e-10;
    pub const WALL_SECS: u64 = 120;
    pub const ABLATION_BETAS: [f64; 5] = [1.0, 2.0, 4.0, 6.0, 8.0];
}

/// `Ok(detail)` on pass, `Err(reason)` on the first failure.
pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

pub fn range(rng: &mut SplitMix64, lo: usize, hi_inclusive: usize) -> usize {
    lo + rng.below((hi_inclusive - lo + 1) as u64) as usize
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Small integers, so every dot product is exact in any summation order.
pub fn integer(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.below(7) as f64 - 3.0)
}

/// Rank at most `rank`.
pub fn low_rank(rows: usize, cols: usize, rank: usize, rng: &mut SplitMix64) -> Matrix {
    gaussian(rows, rank, rng).matmul(&gaussian(rank, cols, rng)).unwrap()
}

// ---------------------------------------------------------------- oracles

/// Triple-loop `a b`.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

pub fn max_abs(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn identity_error(g: &Matrix) -> f64 {
    max_abs(g, &Matrix::from_fn(g.rows(), g.cols(), |i, j| f64::from(u8::from(i == j))))
}

pub fn bits_equal(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// First `r` with `sum_{i<r} σ_i² / sum σ_i² >= tau`, each prefix summed afresh.
pub fn brute_rank(sigma: &[f64], tau: f64, eps: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total <= eps {
        return 0;
    }
    for r in 1..=sigma.len() {
        let e: f64 = sigma[..r].iter().map(|s| s * s).sum::<f64>() / total;
        if e >= tau {
            return r;
        }
    }
    sigma.len()
}

/// Row-wise softmax written out longhand.
fn naive_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for x in row.iter_mut() {
            *x = (*x - m).exp() / z;
        }
    }
    out
}

/// Multi-head `softmax(Q_h K_hᵀ / sqrt(d_h)) V_h`, heads side by side.
pub fn reference_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Matrix {
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let (qh, kh, vh) = (q.column_range(cols.clone()), k.column_range(cols.clone()), v.column_range(cols));
        let alpha = naive_softmax_rows(&naive_matmul(&qh, &kh.transpose()).scale(scale));
        out.set_column_block(h * dh, &naive_matmul(&alpha, &vh)).unwrap();
    }
    out
}

/// Replays top-k selection, append and FIFO capping on plain row lists.
#[derive(Default)]
pub struct FifoOracle {
    rows: BTreeMap<(usize, usize), Vec<(u64, Vec<f64>, Vec<f64>)>>,
    next: u64,
}

impl FifoOracle {
    pub fn push(&mut self, slot: (usize, usize), q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, k_h: usize, l_max: usize) {
        let hist = self.rows.entry(slot).or_default();
        let dh = q.cols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let score = |key: &[f64]| {
            let mut best = f64::NEG_INFINITY;
            for h in 0..heads {
                for p in 0..q.rows() {
                    let d: f64 = (h * dh..(h + 1) * dh).map(|c| q.get(p, c) * key[c]).sum();
                    best = best.max(d * scale);
                }
            }
            best
        };
        let scores: Vec<f64> = hist.iter().map(|(_, key, _)| score(key)).collect();
        let mut order: Vec<usize> = (0..hist.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        order.truncate(k_h);
        order.sort_unstable();
        let mut kept: Vec<_> = order.into_iter().map(|i| hist[i].clone()).collect();
        for r in 0..k.rows() {
            kept.push((self.next, k.row(r).to_vec(), v.row(r).to_vec()));
            self.next += 1;
        }
        if kept.len() > l_max {
            kept.drain(..kept.len() - l_max);
        }
        *hist = kept;
    }

    pub fn matches(&self, cache: &SfcCache) -> Result<(), String> {
        for (&(layer, step), rows) in &self.rows {
            let e = cache.history(layer, step).ok_or("missing cache slot")?;
            let arrival: Vec<u64> = rows.iter().map(|r| r.0).collect();
            ensure(e.arrival == arrival, || format!("arrivals {:?} vs oracle {arrival:?}", e.arrival))?;
            for (i, (_, key, val)) in rows.iter().enumerate() {
                ensure(e.k.row(i) == key.as_slice() && e.v.row(i) == val.as_slice(), || {
                    format!("row {i} of slot ({layer}, {step}) differs from oracle")
                })?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- checks

pub fn rank_selection(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0001);
    let taus = [0.6, 0.8, 0.85, 0.9, 0.93, 0.98, 1.0];
    for case in 0..cases {
        let m = range(&mut rng, 1, 77);
        let quantize = rng.below(3) == 0;
        let mut sigma: Vec<f64> = (0..m)
            .map(|_| {
                let s = uniform(&mut rng, 0.0, 10.0);
                if quantize {
                    s.round()
                } else {
                    s
                }
            })
            .collect();
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tau = if rng.below(2) == 0 { taus[rng.below(7) as usize] } else { 1.0 - rng.next_f64() };
        let got = lib(select_rank(&sigma, tau, 1e-12))?;
        let want = brute_rank(&sigma, tau, 1e-12);
        ensure(got == want, || format!("case {case}: k {got} vs brute force {want} (tau {tau}, sigma {sigma:?})"))?;
    }
    let k = lib(select_rank(&[2.0, 1.0, 1.0], 0.85, 1e-12))?;
    ensure(k == 3, || format!("[2,1,1] at tau 0.85 gave {k}"))?;
    Ok(format!("{cases} spectra match brute force; [2,1,1] -> 3"))
}

pub fn projector_suite(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0002);
    let (mut sym, mut idem, mut tr, mut notch) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..cases {
        let d = range(&mut rng, 1, 64);
        let t = range(&mut rng, 1, 77);
        let ts = range(&mut rng, 1, 77);
        let x = if rng.below(4) == 0 {
            low_rank(d, t, range(&mut rng, 1, d.min(t)), &mut rng)
        } else {
            gaussian(d, t, &mut rng)
        };
        let sup = gaussian(d, ts, &mut rng);
        let params = AbsvrParams { tau: 1.0 - rng.next_f64(), ..Default::default() };
        let svd = lib(thin_svd(&x, DEFAULT_SVD_TOL))?;
        let k = lib(select_rank(&svd.sigma, params.tau, params.zero_energy_epsilon))?;
        let p = lib(trunk_projector(&svd, k))?;

        let s = max_abs(&p, &p.transpose());
        let i = max_abs(&naive_matmul(&p, &p), &p);
        let trace_err = (p.trace() - k as f64).abs();
        let mut seg = lib(FrameSegments::new(vec![x.clone(), sup.clone()], 0))?;
        let report = lib(absvr_apply(&mut seg, &params))?;
        ensure(report.k == k, || format!("case {case}: applied rank {} vs {k}", report.k))?;
        let leak = frobenius(&naive_matmul(&p, &seg.frames[1])) / frobenius(&sup);

        ensure(s <= tol::SYMMETRY, || format!("case {case}: asymmetry {s:e}"))?;
        ensure(i <= tol::IDEMPOTENCE, || format!("case {case}: idempotence error {i:e}"))?;
        ensure(trace_err <= tol::TRACE, || format!("case {case}: trace error {trace_err:e}"))?;
        ensure(leak <= tol::NOTCH_REL, || format!("case {case}: notch leak {leak:e}"))?;
        sym = sym.max(s);
        idem = idem.max(i);
        tr = tr.max(trace_err);
        notch = notch.max(leak);
    }
    Ok(format!(
        "{cases} cases; worst symmetry {sym:.1e}, idempotence {idem:.1e}, trace {tr:.1e}, notch {notch:.1e}"
    ))
}

pub fn svd_suite(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0003);
    let (mut recon, mut ortho) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let r = range(&mut rng, 1, 64);
        let c = range(&mut rng, 1, 77);
        let mut x = match rng.below(4) {
            0 => low_rank(r, c, range(&mut rng, 1, r.min(c)), &mut rng),
            _ => gaussian(r, c, &mut rng),
        };
        if rng.below(5) == 0 {
            x = x.scale(10f64.powi(range(&mut rng, 0, 12) as i32 - 6));
        }
        let a = lib(thin_svd(&x, DEFAULT_SVD_TOL))?;
        let b = lib(thin_svd(&x, DEFAULT_SVD_TOL))?;
        ensure(bits_equal(&a.u, &b.u) && bits_equal(&a.vt, &b.vt) && a.sigma == b.sigma, || {
            format!("case {case}: repeated decomposition differs")
        })?;
        ensure(a.sigma.windows(2).all(|w| w[0] >= w[1]) && a.sigma.iter().all(|&s| s >= 0.0), || {
            format!("case {case}: spectrum not sorted and non-negative")
        })?;
        for j in 0..a.u.cols() {
            let col = a.u.column(j);
            let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            ensure(lead >= 0.0, || format!("case {case}: column {j} of U leads negative"))?;
        }
        let mut us = a.u.clone();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&a.sigma) {
                *v *= s;
            }
        }
        let rel = frobenius(&naive_matmul(&us, &a.vt).sub(&x).unwrap()) / frobenius(&x).max(f64::MIN_POSITIVE);
        let o = identity_error(&naive_matmul(&a.u.transpose(), &a.u))
            .max(identity_error(&naive_matmul(&a.vt, &a.vt.transpose())));
        ensure(rel <= tol::SVD_RECON_REL, || format!("case {case}: reconstruction {rel:e}"))?;
        ensure(o <= tol::SVD_ORTHO, || format!("case {case}: orthonormality {o:e}"))?;
        recon = recon.max(rel);
        ortho = ortho.max(o);
    }
    Ok(format!("{cases} matrices; worst reconstruction {recon:.1e}, orthonormality {ortho:.1e}, repeat runs bit-equal"))
}

fn random_box(rng: &mut SplitMix64) -> GroundingBox {
    let x1 = uniform(rng, 0.0, 0.8);
    let y1 = uniform(rng, 0.0, 0.8);
    let x2 = uniform(rng, x1 + 0.05, 1.0);
    let y2 = uniform(rng, y1 + 0.05, 1.0);
    GroundingBox::new(x1, y1, x2, y2).unwrap()
}

/// Values along a ray of patches leaving `start` must never increase.
fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

fn axis_rays_decay(field: &[f64], grid: PatchGrid, (mx, my): (f64, f64)) -> bool {
    let (w, h) = grid.dims();
    let cx = |i: usize| (i as f64 + 0.5) / w as f64;
    let cy = |j: usize| (j as f64 + 0.5) / h as f64;
    for j in 0..h {
        let row: Vec<f64> = (0..w).map(|i| field[j * w + i]).collect();
        let right: Vec<f64> = (0..w).filter(|&i| cx(i) >= mx).map(|i| row[i]).collect();
        let left: Vec<f64> = (0..w).rev().filter(|&i| cx(i) <= mx).map(|i| row[i]).collect();
        if !non_increasing(&right) || !non_increasing(&left) {
            return false;
        }
    }
    for i in 0..w {
        let col: Vec<f64> = (0..h).map(|j| field[j * w + i]).collect();
        let down: Vec<f64> = (0..h).filter(|&j| cy(j) >= my).map(|j| col[j]).collect();
        let up: Vec<f64> = (0..h).rev().filter(|&j| cy(j) <= my).map(|j| col[j]).collect();
        if !non_increasing(&down) || !non_increasing(&up) {
            return false;
        }
    }
    true
}

pub fn gca_analytics(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0004);
    let mut worst_gauss = 0.0f64;
    for case in 0..cases {
        let grid = PatchGrid::new(range(&mut rng, 4, 64), range(&mut rng, 4, 64)).unwrap();
        let (w, h) = grid.dims();

        // One axis-scale from a patch-centred mean, along x and along y.
        let (i0, j0) = (range(&mut rng, 0, w / 2 - 1), range(&mut rng, 0, h / 2 - 1));
        let (di, dj) = (range(&mut rng, 1, w / 2), range(&mut rng, 1, h / 2));
        let mu = grid.center::<f64>(j0 * w + i0);
        let sx = grid.center::<f64>(j0 * w + i0 + di).0 - mu.0;
        let sy = grid.center::<f64>((j0 + dj) * w + i0).1 - mu.1;
        let g = lib(gaussian_field(mu, sx, sy, grid))?;
        let target = (-0.5f64).exp();
        let err = (g[j0 * w + i0 + di] - target).abs().max((g[(j0 + dj) * w + i0] - target).abs());
        ensure(err <= tol::GAUSSIAN, || format!("case {case}: one-scale value off by {err:e}"))?;
        ensure(g[j0 * w + i0] == 1.0, || format!("case {case}: centre value {}", g[j0 * w + i0]))?;
        worst_gauss = worst_gauss.max(err);

        let free_mu = (rng.next_f64(), rng.next_f64());
        let f = lib(gaussian_field(free_mu, uniform(&mut rng, 0.02, 0.6), uniform(&mut rng, 0.02, 0.6), grid))?;
        ensure(axis_rays_decay(&f, grid, free_mu), || format!("case {case}: field grows along an axis ray"))?;

        let n = range(&mut rng, 1, 3);
        let boxes: Vec<GroundingBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let strengths: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let params = GcaParams::default();
        for s in [
            MaskStrategy::Unmasked,
            MaskStrategy::BoxBinary,
            MaskStrategy::StaticTwoStage,
            MaskStrategy::SingleStage,
            MaskStrategy::Gca,
        ] {
            let masks = lib(mask_variant(s, &boxes, grid, &params, Some(&strengths)))?;
            for (i, m) in masks.iter().enumerate() {
                ensure(m.peak() == 1.0, || format!("case {case}: {s} subject {i} peaks at {}", m.peak()))?;
            }
            if s == MaskStrategy::SingleStage {
                for (m, b) in masks.iter().zip(&boxes) {
                    ensure(axis_rays_decay(&m.values, grid, b.centroid()), || {
                        format!("case {case}: single-stage mask grows along an axis ray")
                    })?;
                }
            }
        }

        let masks = lib(mask_variant(MaskStrategy::Gca, &boxes, grid, &params, Some(&strengths)))?;
        let mut spans = Vec::new();
        let mut start = 0;
        for _ in 0..n {
            let len = range(&mut rng, 1, 4);
            spans.push(start..start + len);
            start += len + rng.below(2) as usize;
        }
        let n_dummy = range(&mut rng, 0, 3);
        let beta = uniform(&mut rng, 0.5, 10.0);
        let bias = lib(assemble_bias(&masks, &spans, n_dummy, beta))?;
        ensure(bias.n_dummy() == n_dummy, || format!("case {case}: {} dummy columns", bias.n_dummy()))?;
        for (j, o) in bias.owners.iter().enumerate() {
            if *o == ColumnOwner::Dummy {
                ensure((0..bias.matrix.rows()).all(|p| bias.matrix.get(p, j) == 0.0), || {
                    format!("case {case}: dummy column {j} carries bias")
                })?;
            }
        }

        let b = random_box(&mut rng);
        let lo = uniform(&mut rng, 0.01, 0.5);
        let p = GcaParams { sigma_min: lo, sigma_max: uniform(&mut rng, lo, 1.0), ..GcaParams::default() };
        let m = (b.x2 - b.x1).min(b.y2 - b.y1);
        let at0 = lib(radii_from_strength(0.0, &b, &p, 0.0))?.inner;
        let at1 = lib(radii_from_strength(1.0, &b, &p, 0.0))?.inner;
        ensure(at0 == p.sigma_min * m && at1 == p.sigma_max * m, || {
            format!("case {case}: endpoints {at0} / {at1} vs {} / {}", p.sigma_min * m, p.sigma_max * m)
        })?;
        let mid = lib(radii_from_strength(0.5, &b, &GcaParams::default(), 0.0))?.inner;
        ensure((mid - 0.35 * m).abs() <= tol::BASE_RADIUS * m, || {
            format!("case {case}: p = 0.5 radius {mid} vs {}", 0.35 * m)
        })?;
    }
    Ok(format!(
        "{cases} cases; worst one-scale error {worst_gauss:.1e}; peaks 1; rays decay; dummy bias 0; endpoints exact"
    ))
}

fn random_sfc(rng: &mut SplitMix64) -> SfcParams {
    SfcParams {
        k_h: range(rng, 1, 600),
        l_max: tol::L_MAX,
        policy: if rng.below(2) == 0 { CapPolicy::Fifo } else { CapPolicy::Reservoir },
        seed: rng.next_u64(),
        ..SfcParams::default()
    }
}

/// Random accumulate sequences, checking the capacity bound after every call.
pub fn sfc_occupancy(sequences: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0005);
    let mut peak = 0;
    for seq in 0..sequences {
        let params = random_sfc(&mut rng);
        let heads = range(&mut rng, 1, 2);
        let width = 2 * heads;
        let mut cache = SfcCache::new();
        for frame in 0..range(&mut rng, 1, 10) {
            let slot = (rng.below(2) as usize, rng.below(2) as usize);
            let rows = range(&mut rng, 1, 200);
            let q = gaussian(range(&mut rng, 1, 4), width, &mut rng);
            let k = gaussian(rows, width, &mut rng);
            let v = gaussian(rows, width, &mut rng);
            let key = CacheKey::conditional(slot.0, slot.1);
            let acc = lib(cache.kv_accumulate(key, frame, &q, &k, &v, heads, &params))?;
            let occ = cache.occupancy(slot.0, slot.1);
            let want = (acc.history_rows + rows).min(params.l_max);
            ensure(occ <= params.l_max && occ == want && acc.rows_after == occ, || {
                format!("sequence {seq}: occupancy {occ}, expected {want}")
            })?;
            ensure(acc.history_rows <= params.k_h.min(acc.rows_before), || {
                format!("sequence {seq}: selected {} of {}", acc.history_rows, acc.rows_before)
            })?;
            peak = peak.max(occ);
        }
    }
    Ok(format!("{sequences} sequences, peak occupancy {peak} <= {}", tol::L_MAX))
}

pub fn sfc_fifo_oracle(sequences: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0006);
    for seq in 0..sequences {
        let params = SfcParams {
            k_h: range(&mut rng, 1, 40),
            l_max: range(&mut rng, 1, 60),
            ..SfcParams::default()
        };
        let heads = range(&mut rng, 1, 2);
        let mut cache = SfcCache::new();
        let mut oracle = FifoOracle::default();
        for frame in 0..range(&mut rng, 1, 8) {
            let slot = (rng.below(2) as usize, 0);
            let rows = range(&mut rng, 1, 30);
            let q = integer(range(&mut rng, 1, 3), 2 * heads, &mut rng);
            let k = integer(rows, 2 * heads, &mut rng);
            let v = gaussian(rows, 2 * heads, &mut rng);
            lib(cache.kv_accumulate(CacheKey::conditional(slot.0, slot.1), frame, &q, &k, &v, heads, &params))?;
            oracle.push(slot, &q, &k, &v, heads, params.k_h, params.l_max);
            oracle.matches(&cache).map_err(|e| format!("sequence {seq}, frame {frame}: {e}"))?;
        }
    }
    Ok(format!("{sequences} sequences match the FIFO replay"))
}

pub fn reservoir_uniformity(trials: usize, n: usize, keep: usize) -> Check {
    let mut counts = vec![0u64; n];
    let entry: KvEntry = KvEntry::new(Matrix::zeros(n, 1), Matrix::zeros(n, 1), (0..n as u64).collect()).unwrap();
    for t in 0..trials {
        let mut rng = SplitMix64::for_stream(0x5EED_0007, &[t as u64]);
        let kept = cap_cache(entry.clone(), keep, CapPolicy::Reservoir, &mut rng);
        ensure(kept.len() == keep, || format!("trial {t}: kept {}", kept.len()))?;
        ensure(kept.arrival.windows(2).all(|w| w[0] < w[1]), || format!("trial {t}: not in arrival order"))?;
        for &a in &kept.arrival {
            counts[a as usize] += 1;
        }
    }
    let expected = trials as f64 * keep as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    ensure(p > tol::CHI_SQUARE_P, || format!("chi-square {chi2:.1} on {} dof, p = {p:.4}", n - 1))?;
    Ok(format!("{trials} trials of {n}->{keep}: chi-square {chi2:.1}, p = {p:.3}"))
}

pub fn forgetting_bias(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0008);
    let mut worst = f64::INFINITY;
    for case in 0..cases {
        let d = range(&mut rng, 1, 16);
        let (p, lh, lc) = (range(&mut rng, 1, 12), range(&mut rng, 1, 20), range(&mut rng, 1, 20));
        let q = gaussian(p, d, &mut rng);
        let (kh, vh) = (gaussian(lh, d, &mut rng), gaussian(lh, 3, &mut rng));
        let (k, v) = (gaussian(lc, d, &mut rng), gaussian(lc, 3, &mut rng));
        let with = lib(concat_attend(&q, &kh, &vh, &k, &v, -0.1))?;
        let without = lib(concat_attend(&q, &kh, &vh, &k, &v, 0.0))?;
        let (a, b): (f64, f64) = (with.history_mass.iter().sum(), without.history_mass.iter().sum());
        ensure(a < b, || format!("case {case}: history mass {a} with bias vs {b} without"))?;
        worst = worst.min(b - a);
    }
    Ok(format!("{cases} cases; smallest mass reduction {worst:.2e}"))
}

pub fn unconditional_is_read_only(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_0009);
    for case in 0..cases {
        let params = SfcParams { k_h: range(&mut rng, 1, 50), l_max: range(&mut rng, 1, 80), ..SfcParams::default() };
        let mut cache = SfcCache::new();
        for frame in 0..range(&mut rng, 1, 4) {
            let (q, k, v) = (gaussian(3, 4, &mut rng), gaussian(20, 4, &mut rng), gaussian(20, 4, &mut rng));
            lib(cache.kv_accumulate(CacheKey::conditional(0, frame % 2), frame, &q, &k, &v, 2, &params))?;
        }
        let before = cache.digest();
        for step in 0..3 {
            let (q, k, v) = (gaussian(3, 4, &mut rng), gaussian(20, 4, &mut rng), gaussian(20, 4, &mut rng));
            let acc = lib(cache.kv_accumulate(CacheKey::unconditional(0, step), 9, &q, &k, &v, 2, &params))?;
            ensure(!acc.wrote && acc.rows_after == acc.rows_before, || format!("case {case}: unconditional call wrote"))?;
        }
        ensure(cache.digest() == before, || format!("case {case}: digest changed"))?;
    }
    Ok(format!("{cases} cases; digest unchanged"))
}

/// Background on a `2w x 2h` grid, context on `w x h`: destination cell
/// `(x, y)` samples source `(2x, 2y)`.
pub fn context_mixing(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_000A);
    let mut untouched = 0usize;
    for case in 0..cases {
        let (w, h) = (range(&mut rng, 2, 16), range(&mut rng, 2, 16));
        let grid = PatchGrid::new(w, h).unwrap();
        let bg_grid = PatchGrid::new(2 * w, 2 * h).unwrap();
        let background: Vec<f64> =
            (0..bg_grid.len()).map(|_| if rng.below(2) == 0 { 0.0 } else { rng.next_f64() }).collect();
        let params = SfcParams { alpha: uniform(&mut rng, 0.1, 1.0), ..SfcParams::default() };
        let cols = range(&mut rng, 1, 8);
        let c0 = gaussian(grid.len(), cols, &mut rng);
        let c1 = gaussian(grid.len(), cols, &mut rng);

        let mut cache = SfcCache::new();
        let first = lib(cache.mix_context(1, 0, &c0, grid, &background, bg_grid, &params))?;
        ensure(bits_equal(&first, &c0), || format!("case {case}: mixed with no stored context"))?;
        let mixed = lib(cache.mix_context(1, 0, &c1, grid, &background, bg_grid, &params))?;
        let stored = cache.context(1, 0).ok_or("no stored context")?;
        ensure(bits_equal(&stored.c_bar, &c1), || format!("case {case}: stored entry is not the pre-mix context"))?;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let m = background[(2 * y) * (2 * w) + 2 * x];
                if m == 0.0 {
                    untouched += 1;
                    ensure(mixed.row(p).iter().zip(c1.row(p)).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                        format!("case {case}: patch {p} changed under a zero background")
                    })?;
                } else {
                    let wgt = params.alpha * m;
                    for (j, &got) in mixed.row(p).iter().enumerate() {
                        let want = (1.0 - wgt) * c1.get(p, j) + wgt * c0.get(p, j);
                        ensure((got - want).abs() <= 1e-14, || format!("case {case}: patch {p} mixes to {got}, want {want}"))?;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} cases; {untouched} zero-background patches bit-identical; stored entries are pre-mix"))
}

pub fn sfc_suite(scale: usize) -> Check {
    let parts = [
        sfc_occupancy(10 * scale)?,
        sfc_fifo_oracle(scale)?,
        reservoir_uniformity(10 * scale, 1000, 100)?,
        forgetting_bias(scale)?,
        unconditional_is_read_only(scale / 10)?,
        context_mixing(scale / 10)?,
    ];
    Ok(parts.join("; "))
}

/// Config where the pipeline must collapse to plain cross-attention.
pub fn reduction_config(mut cfg: StoryConfig, frames: usize, absvr_enabled: bool) -> StoryConfig {
    cfg.frames = frames;
    cfg.strategy = MaskStrategy::Unmasked;
    cfg.absvr.tau = 1.0;
    cfg.absvr.gain_exp = 1.0;
    cfg.absvr.gain_sup = 1.0;
    cfg.absvr.enabled = absvr_enabled;
    cfg.sfc.accumulate = false;
    cfg
}

/// Runs the simulator frame by frame against a longhand replay of every
/// layer call; returns the worst hidden-state difference.
pub fn reduction(cfg: &StoryConfig) -> Result<f64, String> {
    let mut sim = lib(Simulator::new(cfg.clone()))?;
    let story = sim.story().clone();
    let text = Matrix::hstack(&story.blocks).unwrap().transpose();
    let ip_ext = Matrix::vstack(&story.ip, &Matrix::zeros(cfg.n_dummy, cfg.tokens.dim)).unwrap();
    let mut worst = 0.0f64;
    for frame in 0..cfg.frames {
        let stats = lib(sim.run_frame(frame))?;
        ensure(stats.records.iter().all(|r| r.history_mass == 0.0 && r.occupancy == 0), || {
            format!("frame {frame}: history reached the text branch")
        })?;
        for (layer, spec) in cfg.layers.iter().enumerate() {
            let w = sim.weights(layer).clone();
            let (k, v) = (naive_matmul(&text, &w.wk), naive_matmul(&text, &w.wv));
            let (k_ip, v_ip) = (naive_matmul(&ip_ext, &w.wk_ip), naive_matmul(&ip_ext, &w.wv_ip));
            let mut h = initial_hidden(cfg, frame, layer);
            for _ in 0..cfg.steps {
                let q = naive_matmul(&h, &w.wq);
                let text_out = reference_attention(&q, &k, &v, spec.heads);
                let ip_out = reference_attention(&q, &k_ip, &v_ip, spec.heads);
                h = h.add(&text_out.add(&ip_out.scale(cfg.subject_factor)).unwrap()).unwrap();
            }
            worst = worst.max(max_abs(&h, sim.hidden(layer)));
        }
    }
    ensure(worst <= tol::REDUCTION, || format!("max abs diff {worst:e}"))?;
    Ok(worst)
}

pub fn reduction_suite(base: &StoryConfig, frames_disabled: usize) -> Check {
    let single = reduction(&reduction_config(base.clone(), 1, true))?;
    let multi = reduction(&reduction_config(base.clone(), frames_disabled, false))?;
    Ok(format!(
        "single frame with reshaping: {single:.1e}; {frames_disabled} frames with reshaping off: {multi:.1e}"
    ))
}

fn read_tree(root: &Path, rels: &[std::path::PathBuf]) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    rels.iter().map(|r| (r.clone(), std::fs::read(root.join(r)).unwrap())).collect()
}

/// Two runs into separate directories; artifacts must match byte for byte.
pub fn determinism(cfg: &StoryConfig, limit: Duration) -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut times = Vec::new();
    let mut runs = Vec::new();
    for d in &dirs {
        let t0 = Instant::now();
        let run = lib(run_story(cfg, Some(d.path()), false))?;
        times.push(t0.elapsed());
        runs.push(read_tree(d.path(), &run.artifacts));
    }
    ensure(!runs[0].is_empty(), || "no artifacts written".into())?;
    ensure(runs[0] == runs[1], || {
        let bad = runs[0].iter().zip(&runs[1]).find(|(a, b)| a != b).map(|(a, _)| a.0.display().to_string());
        format!("artifacts differ: {bad:?}")
    })?;
    for (i, t) in times.iter().enumerate() {
        ensure(*t <= limit, || format!("run {i} took {:.1} s", t.as_secs_f64()))?;
    }
    Ok(format!(
        "{} artifacts identical; runs took {:.1} s and {:.1} s",
        runs[0].len(),
        times[0].as_secs_f64(),
        times[1].as_secs_f64()
    ))
}

/// Two 3-frame layers on a 32x32 top grid with the bundled boxes.
pub fn ablation_config() -> StoryConfig {
    let mut c = StoryConfig::default();
    c.frames = 3;
    c.steps = 6;
    c.layers = vec![
        LayerSpec { grid: PatchGrid::new(32, 32).unwrap(), d_model: 32, heads: 2 },
        LayerSpec { grid: PatchGrid::new(16, 16).unwrap(), d_model: 32, heads: 2 },
    ];
    c.tokens = TokenSpec { dim: 32, per_frame: 6 };
    c
}

pub fn ablation(base: &StoryConfig) -> Check {
    let strategies = [MaskStrategy::Unmasked, MaskStrategy::XorSplit, MaskStrategy::Gca];
    let mut detail = Vec::new();
    for beta in tol::ABLATION_BETAS {
        let mut cfg = base.clone();
        cfg.gca.bias_scale = beta;
        let rows = lib(ablation_matrix(&cfg, &strategies))?;
        let (plain, xor, gca) = (&rows[0], &rows[1], &rows[2]);
        ensure(xor.co_activation == 0.0, || format!("beta {beta}: XorSplit co-activation {}", xor.co_activation))?;
        ensure(gca.out_of_box_mass < plain.out_of_box_mass, || {
            format!("beta {beta}: Gca out-of-box {} vs zero-bias {}", gca.out_of_box_mass, plain.out_of_box_mass)
        })?;
        detail.push(format!("b={beta}: {:.4}<{:.4}", gca.out_of_box_mass, plain.out_of_box_mass));
    }
    Ok(format!("XorSplit co-activation 0; Gca out-of-box mass {}", detail.join(", ")))
}

/// Three descending plateaus over a low floor, each level lightly jittered.
pub fn planted_plateaus(rng: &mut SplitMix64) -> (Vec<f64>, Vec<usize>) {
    let a = uniform(rng, 5.0, 10.0);
    let b = a * uniform(rng, 0.2, 0.5);
    let c = b * uniform(rng, 0.2, 0.5);
    let floor = c * uniform(rng, 0.0, 0.1);
    let mut sigma = Vec::new();
    let mut knees = Vec::new();
    for level in [a, b, c, floor] {
        let n = range(rng, 1, 10);
        for i in 0..n {
            sigma.push(level * (1.0 - 1e-6 * i as f64));
        }
        knees.push(sigma.len() - 1);
    }
    knees.pop();
    (sigma, knees)
}

pub fn knees_and_bands(cases: usize) -> Check {
    let mut rng = SplitMix64::new(0x5EED_000B);
    for case in 0..cases {
        let (sigma, want) = planted_plateaus(&mut rng);
        let got = detect_knees(&sigma);
        ensure(got == want, || format!("case {case}: knees {got:?}, planted {want:?}"))?;
        if case % 10 == 0 {
            // Same spectrum planted in a matrix with random singular vectors.
            let m = sigma.len();
            let u = lib(thin_svd(&gaussian(m + 5, m, &mut rng), DEFAULT_SVD_TOL))?.u;
            let v = lib(thin_svd(&gaussian(m + 3, m, &mut rng), DEFAULT_SVD_TOL))?.u;
            let x = naive_matmul(&naive_matmul(&u, &Matrix::from_diag(&sigma)), &v.transpose());
            let report = lib(spectral_report(&x, &AbsvrParams::default()))?;
            ensure(report.knees == want, || format!("case {case}: matrix knees {:?}, planted {want:?}", report.knees))?;
        }
    }
    let bands = [
        (Emphasis::Identity, 0.60),
        (Emphasis::Actions, 0.80),
        (Emphasis::Background, 0.90),
        (Emphasis::Style, 0.93),
        (Emphasis::Details, 0.98),
    ];
    for (e, t) in bands {
        ensure(band_recommendation(e) == t, || format!("{e:?} -> {}", band_recommendation(e)))?;
    }
    Ok(format!("{cases} planted spectra recovered; bands 0.60/0.80/0.90/0.93/0.98"))
}

/// Masks on the current grid for the bundled boxes.
pub fn bundled_masks(strategy: MaskStrategy, grid: PatchGrid) -> Vec<SubjectMask> {
    let cfg = StoryConfig::default();
    mask_variant(strategy, &cfg.boxes_at(0), grid, &cfg.gca, None).unwrap()
}
