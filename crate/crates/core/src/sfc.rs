//! Selective forgetting cache.
//!
//! Keys and values of the text branch are kept per `(layer, step)` across
//! frames. A new call scores the stored rows against its queries, keeps the
//! best `k_h`, attends over `[history; current]` with a constant logit offset
//! `delta_h` on the history columns, and stores the concatenation back, capped
//! at `l_max` rows by FIFO or reservoir sampling. Unconditional calls read but
//! never write.
//!
//! A second store keeps each layer's unmixed attention output so the next
//! frame can blend it into background positions of low-resolution layers.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::gca::{
    attend_logits, head_width, multi_head_attention, scaled_logits, TextAttention, TextAttentionOutput,
};
use crate::grounding::{PatchGrid, SubjectMask};
use crate::numkernel::{nn_resize, top_k_indices, Matrix};
use crate::rng::{role, SplitMix64};
use crate::scalar::{clip01, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Conditional,
    Unconditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub layer: usize,
    pub step: usize,
    pub branch: Branch,
}

impl CacheKey {
    pub fn conditional(layer: usize, step: usize) -> Self {
        Self { layer, step, branch: Branch::Conditional }
    }

    pub fn unconditional(layer: usize, step: usize) -> Self {
        Self { layer, step, branch: Branch::Unconditional }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapPolicy {
    /// Keep the most recent rows.
    Fifo,
    /// Uniform random subset of all rows.
    Reservoir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfcParams<T = f64> {
    pub k_h: usize,
    pub delta_h: T,
    pub l_max: usize,
    pub policy: CapPolicy,
    pub alpha: T,
    pub mix_patch_threshold: usize,
    /// Master switch: off disables both history and context mixing.
    pub accumulate: bool,
    pub seed: u64,
}

impl<T: Scalar> Default for SfcParams<T> {
    fn default() -> Self {
        Self {
            k_h: 128,
            delta_h: T::lit(-0.1),
            l_max: 512,
            policy: CapPolicy::Fifo,
            alpha: T::lit(0.6),
            mix_patch_threshold: 1024,
            accumulate: true,
            seed: 0,
        }
    }
}

impl<T: Scalar> SfcParams<T> {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k_h == 0 {
            bad.push("k_h must be >= 1");
        }
        if self.l_max == 0 {
            bad.push("l_max must be >= 1");
        }
        if !self.delta_h.is_finite() {
            bad.push("delta_h must be finite");
        }
        if !(T::zero() <= self.alpha && self.alpha <= T::one()) {
            bad.push("alpha must lie in [0, 1]");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Stored key/value rows with their arrival counters (strictly increasing).
#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry<T = f64> {
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub arrival: Vec<u64>,
}

impl<T: Scalar> KvEntry<T> {
    pub fn new(k: Matrix<T>, v: Matrix<T>, arrival: Vec<u64>) -> Result<Self> {
        if k.rows() != v.rows() || k.rows() != arrival.len() {
            return Err(dim_err!(
                "{} key rows, {} value rows, {} arrival counters",
                k.rows(),
                v.rows(),
                arrival.len()
            ));
        }
        Ok(Self { k, v, arrival })
    }

    pub fn len(&self) -> usize {
        self.arrival.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrival.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            k: self.k.select_rows(idx),
            v: self.v.select_rows(idx),
            arrival: idx.iter().map(|&i| self.arrival[i]).collect(),
        }
    }

    fn append(&self, other: &Self) -> Result<Self> {
        let mut arrival = self.arrival.clone();
        arrival.extend_from_slice(&other.arrival);
        Ok(Self {
            k: Matrix::vstack(&self.k, &other.k)?,
            v: Matrix::vstack(&self.v, &other.v)?,
            arrival,
        })
    }
}

/// History rows whose best score `max_p q_p·k_t / sqrt(d)` is among the top
/// `k_h`, ascending. No forgetting bias enters the score.
pub fn topk_history<T: Scalar>(q: &Matrix<T>, k_hist: &Matrix<T>, k_h: usize) -> Result<Vec<usize>> {
    topk_history_heads(q, k_hist, 1, k_h)
}

/// Multi-head form of [`topk_history`]: the score also maximizes over heads,
/// giving one index set shared by all heads.
pub fn topk_history_heads<T: Scalar>(
    q: &Matrix<T>,
    k_hist: &Matrix<T>,
    heads: usize,
    k_h: usize,
) -> Result<Vec<usize>> {
    if k_hist.rows() == 0 {
        return Ok(Vec::new());
    }
    if q.cols() != k_hist.cols() {
        return Err(dim_err!("query width {} vs key width {}", q.cols(), k_hist.cols()));
    }
    let dh = head_width(q.cols(), heads)?;
    let scale = T::from_usize_lossy(dh).sqrt().recip();
    let mut scores = vec![T::neg_infinity(); k_hist.rows()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let kt = k_hist.column_range(cols.clone()).transpose();
        let qh = q.column_range(cols);
        for r0 in (0..qh.rows()).step_by(256) {
            let s = qh.row_range(r0..(r0 + 256).min(qh.rows())).matmul(&kt)?;
            for p in 0..s.rows() {
                for (best, &x) in scores.iter_mut().zip(s.row(p)) {
                    *best = best.max(x * scale);
                }
            }
        }
    }
    Ok(top_k_indices(&scores, k_h))
}

/// `Q K_hᵀ / sqrt(d) + delta_h`.
pub fn history_logits<T: Scalar>(q: &Matrix<T>, k_hist: &Matrix<T>, delta_h: T) -> Result<Matrix<T>> {
    let scale = T::from_usize_lossy(q.cols()).sqrt().recip();
    Ok(q.matmul_t(k_hist)?.map(|x| x * scale + delta_h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcatAttention<T = f64> {
    pub hidden: Matrix<T>,
    /// Full weights, history columns first.
    pub weights: Matrix<T>,
    /// Per-query weight on the history columns.
    pub history_mass: Vec<T>,
    /// Mean row entropy of `weights` in nats.
    pub entropy: T,
}

/// One softmax over `[history | current]` logits, output `α [V_h; V]`.
pub fn concat_attend<T: Scalar>(
    q: &Matrix<T>,
    k_hist: &Matrix<T>,
    v_hist: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    delta_h: T,
) -> Result<ConcatAttention<T>> {
    if k_hist.rows() != v_hist.rows() || k.rows() != v.rows() {
        return Err(dim_err!(
            "keys/values {}/{} history, {}/{} current",
            k_hist.rows(),
            v_hist.rows(),
            k.rows(),
            v.rows()
        ));
    }
    if k.cols() != q.cols() || (k_hist.rows() > 0 && k_hist.cols() != q.cols()) {
        return Err(dim_err!("query width {} vs key widths", q.cols()));
    }
    if k_hist.rows() > 0 && v_hist.cols() != v.cols() {
        return Err(dim_err!("value widths {} vs {}", v_hist.cols(), v.cols()));
    }
    let current = scaled_logits(q, k)?;
    if k_hist.rows() == 0 {
        let out = attend_logits(&current, v)?;
        return Ok(ConcatAttention {
            hidden: out.hidden,
            weights: out.weights,
            history_mass: vec![T::zero(); q.rows()],
            entropy: out.entropy,
        });
    }
    let logits = Matrix::hstack(&[history_logits(q, k_hist, delta_h)?, current])?;
    let out = attend_logits(&logits, &Matrix::vstack(v_hist, v)?)?;
    let l = k_hist.rows();
    let history_mass = (0..out.weights.rows())
        .map(|p| out.weights.row(p)[..l].iter().copied().sum())
        .collect();
    Ok(ConcatAttention {
        hidden: out.hidden,
        weights: out.weights,
        history_mass,
        entropy: out.entropy,
    })
}

/// Shrinks `entry` to at most `l_max` rows, preserving arrival order.
///
/// Reservoir sampling runs Algorithm R over the rows in arrival order, drawing
/// from `rng`.
pub fn cap_cache<T: Scalar>(
    entry: KvEntry<T>,
    l_max: usize,
    policy: CapPolicy,
    rng: &mut SplitMix64,
) -> KvEntry<T> {
    let n = entry.len();
    if n <= l_max {
        return entry;
    }
    let mut keep: Vec<usize> = match policy {
        CapPolicy::Fifo => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| std::cmp::Reverse(entry.arrival[i]));
            order.truncate(l_max);
            order
        }
        CapPolicy::Reservoir => {
            let mut res: Vec<usize> = (0..l_max).collect();
            for i in l_max..n {
                let j = rng.below(i as u64 + 1) as usize;
                if j < l_max {
                    res[j] = i;
                }
            }
            res
        }
    };
    keep.sort_by_key(|&i| entry.arrival[i]);
    entry.select(&keep)
}

/// Unmixed attention output of one layer call.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEntry<T = f64> {
    pub c_bar: Matrix<T>,
    pub grid: PatchGrid,
}

/// Blends the previous frame's output into background positions:
/// `C ⊙ (1 - αM) + C_prev ⊙ αM`, with `M` the background mask resized to
/// `grid`. Rows with `αM = 0` are copied bit for bit. The returned entry
/// always holds the unmixed `c`.
pub fn context_mix<T: Scalar>(
    c: &Matrix<T>,
    grid: PatchGrid,
    prev: Option<&ContextEntry<T>>,
    background: &[T],
    background_grid: PatchGrid,
    alpha: T,
    patch_threshold: usize,
) -> Result<(Matrix<T>, ContextEntry<T>)> {
    if !(T::zero() <= alpha && alpha <= T::one()) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    if c.rows() != grid.len() {
        return Err(dim_err!("{} rows for a {grid} grid", c.rows()));
    }
    if background.len() != background_grid.len() {
        return Err(dim_err!(
            "{} background values for a {background_grid} grid",
            background.len()
        ));
    }
    let entry = ContextEntry { c_bar: c.clone(), grid };
    let prev = match prev {
        Some(p) if grid.len() <= patch_threshold => p,
        _ => return Ok((c.clone(), entry)),
    };
    if prev.grid != grid || prev.c_bar.shape() != c.shape() {
        return Err(dim_err!(
            "cached context {:?} on {} vs {:?} on {grid}",
            prev.c_bar.shape(),
            prev.grid,
            c.shape()
        ));
    }
    let m = nn_resize(background, background_grid.dims(), grid.dims())?;
    let mut out = c.clone();
    for (p, &mp) in m.iter().enumerate() {
        let w = alpha * mp;
        if w == T::zero() {
            continue;
        }
        let keep = T::one() - w;
        for (o, &old) in out.row_mut(p).iter_mut().zip(prev.c_bar.row(p)) {
            *o = *o * keep + old * w;
        }
    }
    Ok((out, entry))
}

/// `clip(1 - max_i M_i)` per patch, optionally binarized (`>= threshold`).
/// No masks means everything is background.
pub fn background_mask<T: Scalar>(
    masks: &[SubjectMask<T>],
    grid: PatchGrid,
    threshold: Option<T>,
) -> Result<Vec<T>> {
    if let Some(m) = masks.iter().find(|m| m.grid != grid || m.values.len() != grid.len()) {
        return Err(dim_err!("mask on {} in a {grid} background", m.grid));
    }
    Ok((0..grid.len())
        .map(|p| {
            let top = masks.iter().map(|m| m.values[p]).fold(T::zero(), T::max);
            let b = clip01(T::one() - top);
            match threshold {
                Some(t) if b >= t => T::one(),
                Some(_) => T::zero(),
                None => b,
            }
        })
        .collect())
}

/// Outcome of [`SfcCache::kv_accumulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulation<T = f64> {
    /// `[K_h'; K]` before capping.
    pub k_cat: Matrix<T>,
    pub v_cat: Matrix<T>,
    /// Leading history rows in `k_cat`.
    pub history_rows: usize,
    pub rows_before: usize,
    pub rows_after: usize,
    pub wrote: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow<T = f64> {
    pub frame: usize,
    pub layer: usize,
    pub step: usize,
    pub rows_before: usize,
    pub rows_selected: usize,
    pub rows_after: usize,
    pub history_mass_mean: T,
    pub wrote: bool,
}

pub const TRACE_HEADER: &str = "frame,layer,step,rows_before,rows_selected,rows_after,history_mass_mean,wrote";

/// Key/value history plus context store for one generation session.
#[derive(Clone, Debug, Default)]
pub struct SfcCache<T = f64> {
    kv: BTreeMap<(usize, usize), KvEntry<T>>,
    contexts: BTreeMap<(usize, usize), ContextEntry<T>>,
    next_arrival: u64,
    trace: Vec<TraceRow<T>>,
}

impl<T: Scalar> SfcCache<T> {
    pub fn new() -> Self {
        Self {
            kv: BTreeMap::new(),
            contexts: BTreeMap::new(),
            next_arrival: 0,
            trace: Vec::new(),
        }
    }

    /// Stored history for `(layer, step)`.
    pub fn history(&self, layer: usize, step: usize) -> Option<&KvEntry<T>> {
        self.kv.get(&(layer, step))
    }

    pub fn occupancy(&self, layer: usize, step: usize) -> usize {
        self.history(layer, step).map_or(0, KvEntry::len)
    }

    pub fn context(&self, layer: usize, step: usize) -> Option<&ContextEntry<T>> {
        self.contexts.get(&(layer, step))
    }

    pub fn trace(&self) -> &[TraceRow<T>] {
        &self.trace
    }

    pub fn record(&mut self, row: TraceRow<T>) {
        self.trace.push(row);
    }

    /// Forms `[K_h'; K]`, `[V_h'; V]` from the conditional history of `key`
    /// and, for conditional calls, stores the capped concatenation back.
    /// Reservoir draws come from the stream `(seed, RESERVOIR, layer, frame)`.
    #[allow(clippy::too_many_arguments)]
    pub fn kv_accumulate(
        &mut self,
        key: CacheKey,
        frame: usize,
        q: &Matrix<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        heads: usize,
        params: &SfcParams<T>,
    ) -> Result<Accumulation<T>> {
        params.validate()?;
        if k.rows() != v.rows() {
            return Err(dim_err!("{} keys vs {} values", k.rows(), v.rows()));
        }
        let slot = (key.layer, key.step);
        let rows_before = self.occupancy(key.layer, key.step);
        if !params.accumulate {
            return Ok(Accumulation {
                k_cat: k.clone(),
                v_cat: v.clone(),
                history_rows: 0,
                rows_before,
                rows_after: rows_before,
                wrote: false,
            });
        }
        let selected = match self.kv.get(&slot) {
            Some(h) => {
                if h.k.cols() != k.cols() || h.v.cols() != v.cols() {
                    return Err(dim_err!(
                        "history width {}/{} vs current {}/{}",
                        h.k.cols(),
                        h.v.cols(),
                        k.cols(),
                        v.cols()
                    ));
                }
                h.select(&topk_history_heads(q, &h.k, heads, params.k_h)?)
            }
            None => KvEntry {
                k: Matrix::zeros(0, k.cols()),
                v: Matrix::zeros(0, v.cols()),
                arrival: Vec::new(),
            },
        };
        let history_rows = selected.len();
        let current = KvEntry {
            k: k.clone(),
            v: v.clone(),
            arrival: (self.next_arrival..self.next_arrival + k.rows() as u64).collect(),
        };
        let cat = selected.append(&current)?;
        let (k_cat, v_cat) = (cat.k.clone(), cat.v.clone());
        let wrote = key.branch == Branch::Conditional;
        let rows_after = if wrote {
            self.next_arrival += k.rows() as u64;
            let mut rng = SplitMix64::for_stream(
                params.seed,
                &[role::RESERVOIR, key.layer as u64, frame as u64],
            );
            let capped = cap_cache(cat, params.l_max, params.policy, &mut rng);
            let n = capped.len();
            self.kv.insert(slot, capped);
            n
        } else {
            rows_before
        };
        Ok(Accumulation { k_cat, v_cat, history_rows, rows_before, rows_after, wrote })
    }

    /// [`context_mix`] against the entry stored for `(layer, step)`, storing
    /// the unmixed `c` in its place.
    #[allow(clippy::too_many_arguments)]
    pub fn mix_context(
        &mut self,
        layer: usize,
        step: usize,
        c: &Matrix<T>,
        grid: PatchGrid,
        background: &[T],
        background_grid: PatchGrid,
        params: &SfcParams<T>,
    ) -> Result<Matrix<T>> {
        if !params.accumulate {
            return Ok(c.clone());
        }
        let (mixed, entry) = context_mix(
            c,
            grid,
            self.contexts.get(&(layer, step)),
            background,
            background_grid,
            params.alpha,
            params.mix_patch_threshold,
        )?;
        self.contexts.insert((layer, step), entry);
        Ok(mixed)
    }

    /// Hash of all stored rows, counters and contexts (not the trace).
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let bits = |m: &Matrix<T>, h: &mut DefaultHasher| {
            m.shape().hash(h);
            for x in m.as_slice() {
                x.as_f64().to_bits().hash(h);
            }
        };
        self.next_arrival.hash(&mut h);
        for (key, e) in &self.kv {
            key.hash(&mut h);
            e.arrival.hash(&mut h);
            bits(&e.k, &mut h);
            bits(&e.v, &mut h);
        }
        for (key, c) in &self.contexts {
            key.hash(&mut h);
            c.grid.dims().hash(&mut h);
            bits(&c.c_bar, &mut h);
        }
        h.finish()
    }

    pub fn trace_csv(&self) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for r in &self.trace {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.frame,
                r.layer,
                r.step,
                r.rows_before,
                r.rows_selected,
                r.rows_after,
                r.history_mass_mean,
                u8::from(r.wrote)
            );
        }
        s
    }
}

/// Text-branch attention routed through an [`SfcCache`].
pub struct CachedTextAttention<'a, T: Scalar = f64> {
    pub cache: &'a mut SfcCache<T>,
    pub params: &'a SfcParams<T>,
    pub key: CacheKey,
    pub frame: usize,
}

impl<T: Scalar> TextAttention<T> for CachedTextAttention<'_, T> {
    fn attend(
        &mut self,
        q: &Matrix<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        heads: usize,
    ) -> Result<TextAttentionOutput<T>> {
        let acc = self
            .cache
            .kv_accumulate(self.key, self.frame, q, k, v, heads, self.params)?;
        let mut trace = TraceRow {
            frame: self.frame,
            layer: self.key.layer,
            step: self.key.step,
            rows_before: acc.rows_before,
            rows_selected: acc.history_rows,
            rows_after: acc.rows_after,
            history_mass_mean: T::zero(),
            wrote: acc.wrote,
        };
        let hist: Vec<usize> = (0..acc.history_rows).collect();
        let out = multi_head_attention(
            q,
            &acc.k_cat.select_rows(&hist),
            &acc.v_cat.select_rows(&hist),
            k,
            v,
            heads,
            self.params.delta_h,
        )?;
        trace.history_mass_mean = out.history_mass;
        self.cache.record(trace);
        Ok(out)
    }
}
