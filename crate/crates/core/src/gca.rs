//! Two-branch cross-attention with a Gaussian-centred IP branch.
//!
//! Encoder states are split into text tokens and image-prompt (IP) tokens. The
//! text branch is plain scaled dot-product attention; its attention maps give
//! each subject an influence strength `p` (mean attention over the subject's
//! box footprint), which sets the radii of the subject masks. The masks become
//! an additive logit bias on the IP branch, whose output is scaled by the
//! subject factor and added to the text output.
//!
//! The text branch is pluggable through [`TextAttention`] so the selective
//! forgetting cache can wrap it.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grounding::{
    assemble_bias, box_footprint, mask_variant, AttentionBias, GcaParams, GroundingBox,
    MaskStrategy, PatchGrid, SubjectMask,
};
use crate::numkernel::{row_softmax, row_softmax_entropy, Matrix};
use crate::rng::{role, SplitMix64};
use crate::scalar::{clip01, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig<T = f64> {
    pub heads: usize,
    pub head_dim: usize,
    pub grid: PatchGrid,
    pub text_tokens: usize,
    /// IP token count of each subject, in subject order.
    pub ip_tokens: Vec<usize>,
    pub n_dummy: usize,
    /// Weight of the IP branch in the residual update.
    pub subject_factor: T,
    pub strategy: MaskStrategy,
    /// Restricts influence strength to these text tokens; all when `None`.
    pub subject_token_indices: Option<Vec<usize>>,
}

impl<T: Scalar> AttentionConfig<T> {
    pub fn new(heads: usize, head_dim: usize, grid: PatchGrid, ip_tokens: Vec<usize>) -> Self {
        Self {
            heads,
            head_dim,
            grid,
            text_tokens: 77,
            ip_tokens,
            n_dummy: 1,
            subject_factor: T::lit(0.6),
            strategy: MaskStrategy::Gca,
            subject_token_indices: None,
        }
    }

    /// Width of the merged-head projections.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn patches(&self) -> usize {
        self.grid.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.text_tokens == 0 || self.ip_tokens.contains(&0) {
            return Err(Error::Config(
                "heads, head_dim, text_tokens and every ip token count must be >= 1".into(),
            ));
        }
        if !(self.subject_factor >= T::zero()) {
            return Err(Error::Config("subject_factor must be >= 0".into()));
        }
        if let Some(idx) = &self.subject_token_indices {
            if idx.is_empty() || idx.iter().any(|&i| i >= self.text_tokens) {
                return Err(Error::Config(format!(
                    "subject token indices {idx:?} outside 0..{}",
                    self.text_tokens
                )));
            }
        }
        Ok(())
    }
}

/// Conditioning tokens, text and IP, in the encoder width.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates<T = f64> {
    pub text: Matrix<T>,
    pub ip: Matrix<T>,
}

impl<T: Scalar> EncoderStates<T> {
    pub fn new(text: Matrix<T>, ip: Matrix<T>) -> Result<Self> {
        if text.cols() != ip.cols() {
            return Err(dim_err!(
                "text width {} vs ip width {}",
                text.cols(),
                ip.cols()
            ));
        }
        Ok(Self { text, ip })
    }

    /// Splits concatenated `[text; ip]` rows after `text_tokens` rows.
    pub fn split(encoder: &Matrix<T>, text_tokens: usize) -> Result<Self> {
        if text_tokens > encoder.rows() {
            return Err(dim_err!(
                "{text_tokens} text tokens in {} encoder rows",
                encoder.rows()
            ));
        }
        let text: Vec<usize> = (0..text_tokens).collect();
        let ip: Vec<usize> = (text_tokens..encoder.rows()).collect();
        Self::new(encoder.select_rows(&text), encoder.select_rows(&ip))
    }

    pub fn width(&self) -> usize {
        self.text.cols()
    }
}

/// Fixed projections standing in for learned attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f64> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wk_ip: Matrix<T>,
    pub wv_ip: Matrix<T>,
}

impl<T: Scalar> LayerWeights<T> {
    /// Standard normal entries scaled by `1/sqrt(fan_in)`, drawn from the
    /// stream `(seed, WEIGHTS, layer)` in the order q, k, v, k_ip, v_ip.
    pub fn seeded(seed: u64, layer: u64, d_model: usize, d_enc: usize, inner: usize) -> Self {
        let mut rng = SplitMix64::for_stream(seed, &[role::WEIGHTS, layer]);
        let mut draw = |fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_fn(fan_in, inner, |_, _| T::lit(rng.normal() * s))
        };
        Self {
            wq: draw(d_model),
            wk: draw(d_enc),
            wv: draw(d_enc),
            wk_ip: draw(d_enc),
            wv_ip: draw(d_enc),
        }
    }
}

/// `α = softmax(Q Kᵀ / sqrt(d))`, `H = α V`.
pub fn text_branch<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if k.rows() != v.rows() {
        return Err(dim_err!("{} keys vs {} values", k.rows(), v.rows()));
    }
    let out = attend_logits(&scaled_logits(q, k)?, v)?;
    Ok((out.hidden, out.weights))
}

pub(crate) fn scaled_logits<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<T>> {
    let scale = T::from_usize_lossy(q.cols()).sqrt().recip();
    Ok(q.matmul_t(k)?.scale(scale))
}

pub(crate) struct HeadOutput<T> {
    pub hidden: Matrix<T>,
    pub weights: Matrix<T>,
    /// Mean row entropy of `weights`.
    pub entropy: T,
}

/// Row softmax of `logits`, then `α V`.
pub(crate) fn attend_logits<T: Scalar>(logits: &Matrix<T>, v: &Matrix<T>) -> Result<HeadOutput<T>> {
    let (weights, entropy) = row_softmax_entropy(logits)?;
    let n = T::from_usize_lossy(entropy.len().max(1));
    Ok(HeadOutput {
        hidden: weights.matmul(v)?,
        entropy: entropy.into_iter().sum::<T>() / n,
        weights,
    })
}

/// Mean of `alpha` over the region's patches and the given (or all) tokens,
/// clipped to `[0, 1]`.
pub fn influence_strength<T: Scalar>(
    alpha: &Matrix<T>,
    region: &[usize],
    tokens: Option<&[usize]>,
) -> Result<T> {
    if region.is_empty() {
        return Err(Error::InvalidInput("empty subject region".into()));
    }
    if let Some(&p) = region.iter().find(|&&p| p >= alpha.rows()) {
        return Err(dim_err!("region patch {p} outside {} rows", alpha.rows()));
    }
    let mut sum = T::zero();
    let count = match tokens {
        None => {
            for &p in region {
                sum += alpha.row(p).iter().copied().sum::<T>();
            }
            region.len() * alpha.cols()
        }
        Some(toks) => {
            if let Some(&t) = toks.iter().find(|&&t| t >= alpha.cols()) {
                return Err(dim_err!("token {t} outside {} columns", alpha.cols()));
            }
            for &p in region {
                let row = alpha.row(p);
                sum += toks.iter().map(|&t| row[t]).sum::<T>();
            }
            region.len() * toks.len()
        }
    };
    if count == 0 {
        return Err(Error::InvalidInput("no tokens to average".into()));
    }
    Ok(clip01(sum / T::from_usize_lossy(count)))
}

/// IP-branch weights `softmax(Q K_ipᵀ / sqrt(d) + B)`.
pub fn ip_attention_weights<T: Scalar>(
    q: &Matrix<T>,
    k_ip: &Matrix<T>,
    bias: &AttentionBias<T>,
) -> Result<Matrix<T>> {
    if bias.matrix.shape() != (q.rows(), k_ip.rows()) {
        return Err(dim_err!(
            "bias {:?} for {} queries x {} ip keys",
            bias.matrix.shape(),
            q.rows(),
            k_ip.rows()
        ));
    }
    let scale = T::from_usize_lossy(q.cols()).sqrt().recip();
    let logits = q.matmul_t(k_ip)?.scale(scale).add(&bias.matrix)?;
    row_softmax(&logits)
}

/// `H_ip = softmax(Q K_ipᵀ / sqrt(d) + B) V_ip`.
pub fn ip_branch<T: Scalar>(
    q: &Matrix<T>,
    k_ip: &Matrix<T>,
    v_ip: &Matrix<T>,
    bias: &AttentionBias<T>,
) -> Result<Matrix<T>> {
    if k_ip.rows() != v_ip.rows() {
        return Err(dim_err!("{} ip keys vs {} values", k_ip.rows(), v_ip.rows()));
    }
    ip_attention_weights(q, k_ip, bias)?.matmul(v_ip)
}

/// Result of one text-branch call over all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TextAttentionOutput<T = f64> {
    /// Merged-head output, `P x heads*head_dim`.
    pub hidden: Matrix<T>,
    /// Head-averaged weights on the current text tokens, `P x T_t`.
    pub current_weights: Matrix<T>,
    /// Mean row entropy (nats) of the full attention distributions.
    pub entropy: T,
    /// Mean per-query attention mass on cached history columns.
    pub history_mass: T,
}

/// Text-branch attention over merged-head `q`, `k`, `v`.
pub trait TextAttention<T: Scalar> {
    fn attend(
        &mut self,
        q: &Matrix<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        heads: usize,
    ) -> Result<TextAttentionOutput<T>>;
}

/// Uncached scaled dot-product attention per head.
#[derive(Clone, Copy, Debug, Default)]
pub struct PlainTextAttention;

impl<T: Scalar> TextAttention<T> for PlainTextAttention {
    fn attend(
        &mut self,
        q: &Matrix<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        heads: usize,
    ) -> Result<TextAttentionOutput<T>> {
        let empty = Matrix::zeros(0, k.cols());
        let empty_v = Matrix::zeros(0, v.cols());
        multi_head_attention(q, &empty, &empty_v, k, v, heads, T::zero())
    }
}

/// Query rows per block in [`multi_head_attention`]; keeps the logits of one
/// block cache-resident.
const ROW_BLOCK: usize = 256;

/// Per-head attention of `q` over `[k_hist; k]`, history logits offset by
/// `delta`, heads merged by column blocks. Each output entry is computed
/// exactly as by [`text_branch`] on the concatenated logits.
pub(crate) fn multi_head_attention<T: Scalar>(
    q: &Matrix<T>,
    k_hist: &Matrix<T>,
    v_hist: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    delta: T,
) -> Result<TextAttentionOutput<T>> {
    let dh = head_width(q.cols(), heads)?;
    let dv = head_width(v.cols(), heads)?;
    if k.cols() != q.cols() || k_hist.cols() != q.cols() || v_hist.cols() != v.cols() {
        return Err(dim_err!(
            "widths q {} k {}/{} v {}/{}",
            q.cols(),
            k_hist.cols(),
            k.cols(),
            v_hist.cols(),
            v.cols()
        ));
    }
    if k.rows() != v.rows() || k_hist.rows() != v_hist.rows() {
        return Err(dim_err!("key and value counts differ"));
    }
    let (p, lh, t) = (q.rows(), k_hist.rows(), k.rows());
    let scale = T::from_usize_lossy(dh).sqrt().recip();
    let inv_heads = T::from_usize_lossy(heads).recip();
    let mut hidden = Matrix::zeros(p, v.cols());
    let mut current = Matrix::zeros(p, t);
    let mut entropy = T::zero();
    let mut mass = T::zero();
    for h in 0..heads {
        let kc = h * dh..(h + 1) * dh;
        let vc = h * dv..(h + 1) * dv;
        let kt = Matrix::vstack(&k_hist.column_range(kc.clone()), &k.column_range(kc.clone()))?.transpose();
        let vv = Matrix::vstack(&v_hist.column_range(vc.clone()), &v.column_range(vc))?;
        let qh = q.column_range(kc);
        let mut head_entropy = T::zero();
        for r0 in (0..p).step_by(ROW_BLOCK) {
            let r1 = (r0 + ROW_BLOCK).min(p);
            let mut logits = qh.row_range(r0..r1).matmul(&kt)?.scale(scale);
            if lh > 0 {
                for r in 0..logits.rows() {
                    logits.row_mut(r)[..lh].iter_mut().for_each(|x| *x += delta);
                }
            }
            let (w, ent) = row_softmax_entropy(&logits)?;
            let out = w.matmul(&vv)?;
            head_entropy += ent.into_iter().sum::<T>();
            for r in 0..w.rows() {
                let wr = w.row(r);
                mass += wr[..lh].iter().copied().sum::<T>() * inv_heads;
                for (c, &x) in current.row_mut(r0 + r).iter_mut().zip(&wr[lh..]) {
                    *c += x * inv_heads;
                }
                hidden.row_mut(r0 + r)[h * dv..(h + 1) * dv].copy_from_slice(out.row(r));
            }
        }
        entropy += head_entropy / T::from_usize_lossy(p.max(1)) * inv_heads;
    }
    Ok(TextAttentionOutput {
        hidden,
        current_weights: current,
        entropy,
        history_mass: mass / T::from_usize_lossy(p.max(1)),
    })
}

pub(crate) fn head_width(inner: usize, heads: usize) -> Result<usize> {
    if heads == 0 || inner % heads != 0 {
        return Err(dim_err!("width {inner} not divisible into {heads} heads"));
    }
    Ok(inner / heads)
}

/// Mean over rows of `-Σ a ln a`, with `0 ln 0 = 0`.
pub fn mean_row_entropy<T: Scalar>(alpha: &Matrix<T>) -> T {
    if alpha.rows() == 0 {
        return T::zero();
    }
    let total: T = (0..alpha.rows())
        .map(|r| {
            alpha
                .row(r)
                .iter()
                .filter(|&&a| a > T::zero())
                .map(|&a| -a * a.ln())
                .sum::<T>()
        })
        .sum();
    total / T::from_usize_lossy(alpha.rows())
}

/// Per-call options for [`gca_forward`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions<T = f64> {
    /// Denoising step; step 0 is the centre-initialized stage (`p = 0.5`).
    pub step: usize,
    /// Forces every subject's influence strength.
    pub strength_override: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcaOutput<T = f64> {
    /// `hidden + update`.
    pub hidden: Matrix<T>,
    /// `H_text + subject_factor * H_ip`.
    pub update: Matrix<T>,
    /// Head-averaged text weights on the current tokens.
    pub text_weights: Matrix<T>,
    /// Head-averaged IP-branch weights, `P x (N_ip + n_dummy)`.
    pub ip_weights: Matrix<T>,
    pub masks: Vec<SubjectMask<T>>,
    pub strengths: Vec<T>,
    pub bias: AttentionBias<T>,
    pub entropy: T,
    pub history_mass: T,
}

/// One cross-attention layer call.
///
/// `hidden` is `P x d_model` with `d_model = heads * head_dim`; `subjects`
/// holds one box per subject, and subject `i` owns the next
/// `cfg.ip_tokens[i]` IP rows.
#[allow(clippy::too_many_arguments)]
pub fn gca_forward<T: Scalar>(
    hidden: &Matrix<T>,
    states: &EncoderStates<T>,
    subjects: &[GroundingBox<T>],
    cfg: &AttentionConfig<T>,
    params: &GcaParams<T>,
    weights: &LayerWeights<T>,
    opts: ForwardOptions<T>,
    text_attention: &mut dyn TextAttention<T>,
) -> Result<GcaOutput<T>> {
    cfg.validate()?;
    params.validate()?;
    let inner = cfg.inner_dim();
    if hidden.shape() != (cfg.patches(), inner) {
        return Err(dim_err!(
            "hidden {:?}, expected {}x{inner}",
            hidden.shape(),
            cfg.patches()
        ));
    }
    if cfg.ip_tokens.len() != subjects.len() {
        return Err(dim_err!(
            "{} subjects but {} ip token counts",
            subjects.len(),
            cfg.ip_tokens.len()
        ));
    }
    let n_ip: usize = cfg.ip_tokens.iter().sum();
    if states.ip.rows() != n_ip {
        return Err(dim_err!("{} ip rows, expected {n_ip}", states.ip.rows()));
    }
    if states.text.rows() != cfg.text_tokens {
        return Err(dim_err!(
            "{} text rows, config says {}",
            states.text.rows(),
            cfg.text_tokens
        ));
    }

    let q = hidden.matmul(&weights.wq)?;
    let k_text = states.text.matmul(&weights.wk)?;
    let v_text = states.text.matmul(&weights.wv)?;
    let text = text_attention.attend(&q, &k_text, &v_text, cfg.heads)?;

    let strengths: Vec<T> = if let Some(p) = opts.strength_override {
        vec![p; subjects.len()]
    } else if opts.step == 0 {
        vec![T::lit(0.5); subjects.len()]
    } else {
        subjects
            .iter()
            .map(|b| {
                influence_strength(
                    &text.current_weights,
                    &box_footprint(b, cfg.grid),
                    cfg.subject_token_indices.as_deref(),
                )
            })
            .collect::<Result<_>>()?
    };
    let masks = mask_variant(cfg.strategy, subjects, cfg.grid, params, Some(&strengths))?;
    let spans: Vec<_> = cfg
        .ip_tokens
        .iter()
        .scan(0, |start, &n| {
            *start += n;
            Some(*start - n..*start)
        })
        .collect();
    let bias = assemble_bias(&masks, &spans, cfg.n_dummy, params.bias_scale)?;

    // Dummy tokens are zero rows, so their keys and values are exactly zero.
    let ip_ext = Matrix::vstack(&states.ip, &Matrix::zeros(cfg.n_dummy, states.width()))?;
    let k_ip = ip_ext.matmul(&weights.wk_ip)?;
    let v_ip = ip_ext.matmul(&weights.wv_ip)?;

    let dh = cfg.head_dim;
    let mut h_ip = Matrix::zeros(q.rows(), inner);
    let mut ip_weights = Matrix::zeros(q.rows(), k_ip.rows());
    let inv_heads = T::from_usize_lossy(cfg.heads).recip();
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        let alpha = ip_attention_weights(&q.column_range(cols.clone()), &k_ip.column_range(cols.clone()), &bias)?;
        h_ip.set_column_block(h * dh, &alpha.matmul(&v_ip.column_range(cols))?)?;
        ip_weights = ip_weights.add_scaled(&alpha, inv_heads)?;
    }

    let update = text.hidden.add_scaled(&h_ip, cfg.subject_factor)?;
    Ok(GcaOutput {
        hidden: hidden.add(&update)?,
        update,
        text_weights: text.current_weights,
        ip_weights,
        masks,
        strengths,
        bias,
        entropy: text.entropy,
        history_mass: text.history_mass,
    })
}
