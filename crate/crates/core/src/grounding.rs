//! Patch grids, grounding boxes and the subject masks derived from them.
//!
//! A subject mask is built from two centroids obtained by halving the box
//! along its longer side. Around each centroid an inner and an outer
//! anisotropic Gaussian are evaluated over the whole grid (not truncated at the
//! box), fused linearly, combined across the two centroids by a per-patch
//! maximum and normalized so that the peak is exactly 1. Masks become additive
//! logit biases `beta * (M - 1)` on the image-prompt columns they own.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_with::{DeserializeFromStr, SerializeDisplay};

use crate::error::{dim_err, Error, Result};
use crate::numkernel::Matrix;
use crate::scalar::{clip01, Scalar};

/// Row-major patch lattice; serialized as `"WxH"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, SerializeDisplay, DeserializeFromStr)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(dim_err!("patch grid {width}x{height}"));
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Normalized centre of patch `p` (row-major).
    #[inline]
    pub fn center<T: Scalar>(&self, p: usize) -> (T, T) {
        let (x, y) = (p % self.width, p / self.width);
        (
            (T::from_usize_lossy(x) + T::lit(0.5)) / T::from_usize_lossy(self.width),
            (T::from_usize_lossy(y) + T::lit(0.5)) / T::from_usize_lossy(self.height),
        )
    }
}

impl fmt::Display for PatchGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for PatchGrid {
    type Err = Error;

    /// Parses `WxH`.
    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Parse(format!("grid `{s}` is not WxH")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("grid `{s}`: {e}")))
        };
        PatchGrid::new(parse(w)?, parse(h)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawBox<T>",
    bound(deserialize = "T: Scalar + Deserialize<'de>", serialize = "T: Serialize")
)]
pub struct GroundingBox<T = f64> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> TryFrom<RawBox<T>> for GroundingBox<T> {
    type Error = Error;
    fn try_from(r: RawBox<T>) -> Result<Self> {
        GroundingBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl<T: Scalar> GroundingBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let ok = |a: T, b: T| T::zero() <= a && a < b && b <= T::one();
        if !(ok(x1, x2) && ok(y1, y2)) {
            return Err(Error::InvalidInput(format!(
                "grounding box ({x1}, {y1}, {x2}, {y2}) needs 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn short_side(&self) -> T {
        self.width().min(self.height())
    }

    pub fn centroid(&self) -> (T, T) {
        let half = T::lit(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn contains(&self, (x, y): (T, T)) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    /// Centroids of the two halves from splitting at the midpoint of the
    /// longer side; squares split along x.
    pub fn split_centers(&self) -> [(T, T); 2] {
        let (w, h) = (self.width(), self.height());
        let (cx, cy) = self.centroid();
        let q = T::lit(0.25);
        if w >= h {
            [(self.x1 + q * w, cy), (self.x2 - q * w, cy)]
        } else {
            [(cx, self.y1 + q * h), (cx, self.y2 - q * h)]
        }
    }
}

/// Free-function form of [`GroundingBox::split_centers`].
pub fn split_box_centers<T: Scalar>(bx: &GroundingBox<T>) -> [(T, T); 2] {
    bx.split_centers()
}

/// Mask construction parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcaParams<T = f64> {
    /// Base inner radius as a fraction of the short side.
    pub r1: T,
    /// Base outer radius as a fraction of the short side.
    pub r2: T,
    pub sigma_min: T,
    pub sigma_max: T,
    /// Outer / inner radius ratio.
    pub rho: T,
    /// Weight of the inner Gaussian in the linear fusion.
    pub fuse_weight: T,
    /// Logit suppression at mask value 0.
    pub bias_scale: T,
    /// How strongly overlap with other boxes shrinks the outer radius.
    pub overlap_damping: T,
}

impl<T: Scalar> Default for GcaParams<T> {
    fn default() -> Self {
        Self {
            r1: T::lit(0.35),
            r2: T::lit(0.70),
            sigma_min: T::lit(0.20),
            sigma_max: T::lit(0.50),
            rho: T::lit(2.0),
            fuse_weight: T::lit(0.5),
            bias_scale: T::lit(6.0),
            overlap_damping: T::lit(0.5),
        }
    }
}

impl<T: Scalar> GcaParams<T> {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.sigma_min > T::zero() && self.sigma_min <= self.sigma_max) {
            bad.push("need 0 < sigma_min <= sigma_max");
        }
        if !(self.rho > T::one()) {
            bad.push("need rho > 1");
        }
        if !(self.r1 < self.r2) {
            bad.push("need r1 < r2");
        }
        if !(T::zero() <= self.fuse_weight && self.fuse_weight <= T::one()) {
            bad.push("need fuse_weight in [0, 1]");
        }
        if !(self.bias_scale > T::zero()) {
            bad.push("need bias_scale > 0");
        }
        if !(T::zero() <= self.overlap_damping && self.overlap_damping <= T::one()) {
            bad.push("need overlap_damping in [0, 1]");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("gca params: {}", bad.join("; "))))
        }
    }
}

/// Per-axis Gaussian scales for one subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Radii<T = f64> {
    pub inner: T,
    pub outer: T,
    pub inner_xy: (T, T),
    pub outer_xy: (T, T),
}

/// Maps influence strength `p` to inner/outer radii for `bx`.
///
/// `s_in = (sigma_min (1 - p) + sigma_max p) * m` with `p` clipped and `m` the
/// short side, `s_out = rho * s_in * (1 - overlap_damping * overlap)`, and each
/// scalar radius is stretched per axis by `side / m`.
pub fn radii_from_strength<T: Scalar>(
    p: T,
    bx: &GroundingBox<T>,
    params: &GcaParams<T>,
    overlap: T,
) -> Result<Radii<T>> {
    if !(T::zero() <= overlap && overlap <= T::one()) {
        return Err(Error::InvalidInput(format!("overlap {overlap} outside [0, 1]")));
    }
    let m = bx.short_side();
    let p = clip01(p);
    let inner = (params.sigma_min * (T::one() - p) + params.sigma_max * p) * m;
    let outer = params.rho * inner * (T::one() - params.overlap_damping * overlap);
    let (ax, ay) = (bx.width() / m, bx.height() / m);
    Ok(Radii {
        inner,
        outer,
        inner_xy: (inner * ax, inner * ay),
        outer_xy: (outer * ax, outer * ay),
    })
}

/// Anisotropic Gaussian `exp(-0.5 [(x-mx)²/sx² + (y-my)²/sy²])` at every
/// patch centre.
pub fn gaussian_field<T: Scalar>(
    (mx, my): (T, T),
    sx: T,
    sy: T,
    grid: PatchGrid,
) -> Result<Vec<T>> {
    if !(sx > T::zero() && sy > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "gaussian scales ({sx}, {sy}) must be positive"
        )));
    }
    let half = T::lit(0.5);
    Ok((0..grid.len())
        .map(|p| {
            let (x, y) = grid.center::<T>(p);
            let dx = (x - mx) / sx;
            let dy = (y - my) / sy;
            (-half * (dx * dx + dy * dy)).exp()
        })
        .collect())
}

/// Zero-width limit of [`gaussian_field`]: 1 at a patch centre equal to the
/// mean, 0 elsewhere.
fn point_field<T: Scalar>(mu: (T, T), grid: PatchGrid) -> Vec<T> {
    (0..grid.len())
        .map(|p| if grid.center::<T>(p) == mu { T::one() } else { T::zero() })
        .collect()
}

fn field_or_point<T: Scalar>(mu: (T, T), (sx, sy): (T, T), grid: PatchGrid) -> Result<Vec<T>> {
    if sx == T::zero() || sy == T::zero() {
        Ok(point_field(mu, grid))
    } else {
        gaussian_field(mu, sx, sy, grid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMask<T = f64> {
    pub values: Vec<T>,
    pub centers: [(T, T); 2],
    pub grid: PatchGrid,
}

impl<T: Scalar> SubjectMask<T> {
    pub fn peak(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::from_usize_lossy(self.values.len())
    }

    /// Divides by the global maximum; an identically-zero field is left as is.
    fn normalized(mut self) -> Self {
        let peak = self.peak();
        if peak > T::zero() {
            for v in &mut self.values {
                *v = *v / peak;
            }
        }
        self
    }

    fn filled(grid: PatchGrid, value: T, centers: [(T, T); 2]) -> Self {
        Self {
            values: vec![value; grid.len()],
            centers,
            grid,
        }
    }
}

/// Two-centroid fused Gaussian mask for one subject.
pub fn build_subject_mask<T: Scalar>(
    bx: &GroundingBox<T>,
    grid: PatchGrid,
    params: &GcaParams<T>,
    p: T,
    overlap: T,
) -> Result<SubjectMask<T>> {
    let radii = radii_from_strength(p, bx, params, overlap)?;
    let centers = bx.split_centers();
    let lam = params.fuse_weight;
    let mut values = vec![T::zero(); grid.len()];
    for &mu in &centers {
        let g_in = field_or_point(mu, radii.inner_xy, grid)?;
        let g_out = field_or_point(mu, radii.outer_xy, grid)?;
        for ((v, &a), &b) in values.iter_mut().zip(&g_in).zip(&g_out) {
            *v = v.max(lam * a + (T::one() - lam) * b);
        }
    }
    Ok(SubjectMask {
        values,
        centers,
        grid,
    }
    .normalized())
}

/// Patches whose column lies in `[floor(x1 W), ceil(x2 W))` and row in
/// `[floor(y1 H), ceil(y2 H))`, clamped to the grid. Row-major, ascending.
pub fn box_footprint<T: Scalar>(bx: &GroundingBox<T>, grid: PatchGrid) -> Vec<usize> {
    let (xs, ys) = footprint_ranges(bx, grid);
    ys.flat_map(|y| xs.clone().map(move |x| y * grid.width + x))
        .collect()
}

fn footprint_ranges<T: Scalar>(bx: &GroundingBox<T>, grid: PatchGrid) -> (Range<usize>, Range<usize>) {
    // Snap products that land within rounding noise of an integer.
    fn edge(v: f64, up: bool) -> f64 {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else if up {
            v.ceil()
        } else {
            v.floor()
        }
    }
    let span = |a: T, b: T, n: usize| {
        let nf = n as f64;
        let lo = edge(a.as_f64() * nf, false).clamp(0.0, nf) as usize;
        let hi = edge(b.as_f64() * nf, true).clamp(0.0, nf) as usize;
        lo..hi.max(lo)
    };
    (
        span(bx.x1, bx.x2, grid.width),
        span(bx.y1, bx.y2, grid.height),
    )
}

/// Fraction of each box's area covered by the union of the other boxes.
pub fn overlap_fractions<T: Scalar>(boxes: &[GroundingBox<T>]) -> Vec<T> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, bx)| {
            let clipped: Vec<GroundingBox<T>> = boxes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(_, o)| bx.intersection(o))
                .collect();
            if clipped.is_empty() {
                return T::zero();
            }
            // Coordinate compression over the clipped rectangles.
            let mut xs: Vec<T> = clipped.iter().flat_map(|b| [b.x1, b.x2]).collect();
            let mut ys: Vec<T> = clipped.iter().flat_map(|b| [b.y1, b.y2]).collect();
            let cmp = |a: &T, b: &T| a.partial_cmp(b).unwrap();
            xs.sort_by(cmp);
            xs.dedup();
            ys.sort_by(cmp);
            ys.dedup();
            let half = T::lit(0.5);
            let mut covered = T::zero();
            for wx in xs.windows(2) {
                for wy in ys.windows(2) {
                    let mid = ((wx[0] + wx[1]) * half, (wy[0] + wy[1]) * half);
                    if clipped.iter().any(|b| b.contains(mid)) {
                        covered += (wx[1] - wx[0]) * (wy[1] - wy[0]);
                    }
                }
            }
            clip01(covered / bx.area())
        })
        .collect()
}

/// Mask construction strategies, from hard geometric baselines to the full
/// attention-guided anisotropic mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, SerializeDisplay, DeserializeFromStr)]
pub enum MaskStrategy {
    /// All-ones mask; the IP branch runs without bias.
    Unmasked,
    /// 1 on the box footprint, 0 elsewhere.
    BoxBinary,
    /// Box footprints with every multiply-covered patch zeroed for all subjects.
    XorSplit,
    /// Two-centroid anisotropic mask with the strength pinned at 0.5.
    StaticTwoStage,
    /// One isotropic Gaussian at the box centroid, attention-driven radius.
    SingleStage,
    /// Two-centroid anisotropic mask with attention-driven radii.
    Gca,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 6] = [
        MaskStrategy::Unmasked,
        MaskStrategy::BoxBinary,
        MaskStrategy::XorSplit,
        MaskStrategy::StaticTwoStage,
        MaskStrategy::SingleStage,
        MaskStrategy::Gca,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::Unmasked => "Unmasked",
            MaskStrategy::BoxBinary => "BoxBinary",
            MaskStrategy::XorSplit => "XorSplit",
            MaskStrategy::StaticTwoStage => "StaticTwoStage",
            MaskStrategy::SingleStage => "SingleStage",
            MaskStrategy::Gca => "Gca",
        }
    }

    /// Whether the strategy consumes attention-derived strengths.
    pub fn uses_strength(&self) -> bool {
        matches!(self, MaskStrategy::SingleStage | MaskStrategy::Gca)
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are ignored (`box-binary`, `BoxBinary`).
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .or(match key.as_str() {
                "none" | "zerobias" => Some(MaskStrategy::Unmasked),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown mask strategy `{s}`")))
    }
}

/// Builds one mask per box with the given strategy.
///
/// `strengths` are per-subject influence strengths; `None` means the
/// centre-initialized stage (`p = 0.5`). Strategies that ignore attention
/// ignore them.
pub fn mask_variant<T: Scalar>(
    strategy: MaskStrategy,
    boxes: &[GroundingBox<T>],
    grid: PatchGrid,
    params: &GcaParams<T>,
    strengths: Option<&[T]>,
) -> Result<Vec<SubjectMask<T>>> {
    if let Some(s) = strengths {
        if s.len() != boxes.len() {
            return Err(dim_err!("{} strengths for {} boxes", s.len(), boxes.len()));
        }
    }
    let half = T::lit(0.5);
    let strength = |i: usize| strengths.map_or(half, |s| s[i]);
    let overlaps = overlap_fractions(boxes);

    match strategy {
        MaskStrategy::Unmasked => Ok(boxes
            .iter()
            .map(|b| SubjectMask::filled(grid, T::one(), b.split_centers()))
            .collect()),
        MaskStrategy::BoxBinary | MaskStrategy::XorSplit => {
            let mut masks: Vec<SubjectMask<T>> = boxes
                .iter()
                .map(|b| {
                    let mut m = SubjectMask::filled(grid, T::zero(), b.split_centers());
                    for p in box_footprint(b, grid) {
                        m.values[p] = T::one();
                    }
                    m
                })
                .collect();
            if strategy == MaskStrategy::XorSplit {
                for p in 0..grid.len() {
                    let count = masks.iter().filter(|m| m.values[p] > T::zero()).count();
                    if count >= 2 {
                        for m in &mut masks {
                            m.values[p] = T::zero();
                        }
                    }
                }
            }
            Ok(masks)
        }
        MaskStrategy::StaticTwoStage => boxes
            .iter()
            .zip(&overlaps)
            .map(|(b, &ov)| build_subject_mask(b, grid, params, half, ov))
            .collect(),
        MaskStrategy::Gca => boxes
            .iter()
            .zip(&overlaps)
            .enumerate()
            .map(|(i, (b, &ov))| build_subject_mask(b, grid, params, strength(i), ov))
            .collect(),
        MaskStrategy::SingleStage => boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let r = radii_from_strength(strength(i), b, params, T::zero())?;
                let c = b.centroid();
                let values = field_or_point(c, (r.inner, r.inner), grid)?;
                Ok(SubjectMask {
                    values,
                    centers: [c, c],
                    grid,
                }
                .normalized())
            })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnOwner {
    Subject(usize),
    Dummy,
    /// IP column inside no declared span; carries zero bias.
    Unowned,
}

/// Additive logit bias on the IP branch, shared by every head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias<T = f64> {
    pub matrix: Matrix<T>,
    pub owners: Vec<ColumnOwner>,
}

impl<T: Scalar> AttentionBias<T> {
    pub fn zeros(patches: usize, owners: Vec<ColumnOwner>) -> Self {
        Self {
            matrix: Matrix::zeros(patches, owners.len()),
            owners,
        }
    }

    pub fn n_dummy(&self) -> usize {
        self.owners.iter().filter(|o| **o == ColumnOwner::Dummy).count()
    }
}

/// Column `j` owned by subject `i` gets `beta * (M_i(p) - 1)`; dummy columns,
/// appended after the IP columns, get 0.
pub fn assemble_bias<T: Scalar>(
    masks: &[SubjectMask<T>],
    ip_spans: &[Range<usize>],
    n_dummy: usize,
    beta: T,
) -> Result<AttentionBias<T>> {
    if !(beta > T::zero()) {
        return Err(Error::InvalidParameter(format!("bias scale {beta} <= 0")));
    }
    if masks.len() != ip_spans.len() {
        return Err(Error::Config(format!(
            "{} masks for {} ip spans",
            masks.len(),
            ip_spans.len()
        )));
    }
    let patches = masks.first().map_or(0, |m| m.values.len());
    if masks.iter().any(|m| m.values.len() != patches) {
        return Err(dim_err!("subject masks on different grids"));
    }
    let n_ip = ip_spans.iter().map(|s| s.end).max().unwrap_or(0);
    let mut owners = vec![ColumnOwner::Unowned; n_ip];
    for (i, span) in ip_spans.iter().enumerate() {
        for j in span.clone() {
            if owners[j] != ColumnOwner::Unowned {
                return Err(Error::Config(format!(
                    "ip column {j} claimed by more than one subject"
                )));
            }
            owners[j] = ColumnOwner::Subject(i);
        }
    }
    owners.extend(std::iter::repeat(ColumnOwner::Dummy).take(n_dummy));

    let cols = owners.len();
    let mut bias = Matrix::zeros(patches, cols);
    for p in 0..patches {
        let row = bias.row_mut(p);
        for (j, owner) in owners.iter().enumerate() {
            if let ColumnOwner::Subject(i) = owner {
                row[j] = beta * (masks[*i].values[p] - T::one());
            }
        }
    }
    Ok(AttentionBias {
        matrix: bias,
        owners,
    })
}
