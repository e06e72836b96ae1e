//! Jump kernels on `Z^d`, finite volumes, and single-random-walk analytics.
//!
//! The walk analytics live here because they are pure functions of the
//! kernel: n-step return probabilities, the Green's function `G` (expected
//! origin hits, counting the start), the escape probability `1/G`, and the
//! probability `q` that a lone particle falls asleep at the origin,
//!
//! ```text
//!     q = sum_{n >= 0} lambda_s * lambda_j^n * P(S_n = 0).
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArwError, Result};
use crate::parallel::{self, domain};
use crate::randomness::SleepRegime;
use crate::report::{EstimateReport, ReportMeta};

/// Coordinates must satisfy `|c| < 2^20` per axis so packed site hashing
/// stays collision-free in practice.
pub const MAX_COORD: i64 = 1 << 20;

// ---------------------------------------------------------------------------
// Params
// ---------------------------------------------------------------------------

/// Sleep rate `lambda` with the normalized sleep and jump rates
/// `lambda_s = lambda / (1 + lambda)` and `lambda_j = 1 - lambda_s`.
///
/// `lambda_j` is computed as `1 - lambda_s` so the two sum to one exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    lambda: f64,
    lambda_s: f64,
    lambda_j: f64,
}

impl Params {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(ArwError::InvalidArgument(format!(
                "sleep rate must be positive and finite, got {lambda}"
            )));
        }
        let lambda_s = lambda / (1.0 + lambda);
        Ok(Params {
            lambda,
            lambda_s,
            lambda_j: 1.0 - lambda_s,
        })
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn lambda_s(&self) -> f64 {
        self.lambda_s
    }

    #[inline]
    pub fn lambda_j(&self) -> f64 {
        self.lambda_j
    }
}

// ---------------------------------------------------------------------------
// JumpKernel
// ---------------------------------------------------------------------------

/// One support atom of a jump kernel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SupportAtom {
    pub offset: Vec<i64>,
    pub prob: f64,
}

/// Translation-invariant jump distribution on `Z^d` with finite support.
///
/// The support is kept in canonical (lexicographic) offset order so
/// inverse-CDF sampling is deterministic and identical across machines.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "KernelFile", into = "KernelFile")]
pub struct JumpKernel {
    dim: usize,
    support: Vec<SupportAtom>,
    /// Exclusive cumulative sums of `prob`, same order as `support`.
    #[serde(skip)]
    cum: Vec<f64>,
}

/// On-disk representation: `{"dim": d, "support": [{"offset": [...], "prob": p}, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct KernelFile {
    dim: usize,
    support: Vec<SupportAtom>,
}

impl TryFrom<KernelFile> for JumpKernel {
    type Error = ArwError;
    fn try_from(f: KernelFile) -> Result<Self> {
        JumpKernel::new(f.dim, f.support)
    }
}

impl From<JumpKernel> for KernelFile {
    fn from(k: JumpKernel) -> Self {
        KernelFile {
            dim: k.dim,
            support: k.support,
        }
    }
}

impl JumpKernel {
    /// Validate and canonicalize a kernel. Probabilities must sum to 1
    /// within `1e-12`, offsets must be distinct, nonzero, and of length
    /// `dim`.
    pub fn new(dim: usize, mut support: Vec<SupportAtom>) -> Result<Self> {
        if dim == 0 {
            return Err(ArwError::InvalidDimension("dimension must be >= 1".into()));
        }
        if support.is_empty() {
            return Err(ArwError::InvalidKernel("empty support".into()));
        }
        for atom in &support {
            if atom.offset.len() != dim {
                return Err(ArwError::InvalidKernel(format!(
                    "offset {:?} has length {} but dim = {dim}",
                    atom.offset,
                    atom.offset.len()
                )));
            }
            if atom.offset.iter().all(|&c| c == 0) {
                return Err(ArwError::InvalidKernel("zero offset is excluded".into()));
            }
            if !(atom.prob > 0.0 && atom.prob <= 1.0) {
                return Err(ArwError::InvalidKernel(format!(
                    "probability {} outside (0, 1]",
                    atom.prob
                )));
            }
            if atom.offset.iter().any(|c| c.abs() >= MAX_COORD) {
                return Err(ArwError::InvalidKernel("offset outside addressable range".into()));
            }
        }
        support.sort_by(|a, b| a.offset.cmp(&b.offset));
        for w in support.windows(2) {
            if w[0].offset == w[1].offset {
                return Err(ArwError::InvalidKernel(format!(
                    "duplicate offset {:?}",
                    w[0].offset
                )));
            }
        }
        let total: f64 = support.iter().map(|a| a.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ArwError::InvalidKernel(format!(
                "probabilities sum to {total}, expected 1 within 1e-12"
            )));
        }
        let mut cum = Vec::with_capacity(support.len());
        let mut acc = 0.0;
        for atom in &support {
            cum.push(acc);
            acc += atom.prob;
        }
        Ok(JumpKernel { dim, support, cum })
    }

    /// Simple symmetric random walk: offsets `±e_i`, each with probability
    /// `1/(2 dim)`.
    pub fn ssrw(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ArwError::InvalidDimension("dimension must be >= 1".into()));
        }
        let p = 1.0 / (2.0 * dim as f64);
        let mut support = Vec::with_capacity(2 * dim);
        for axis in 0..dim {
            for sign in [-1i64, 1] {
                let mut offset = vec![0i64; dim];
                offset[axis] = sign;
                support.push(SupportAtom { offset, prob: p });
            }
        }
        JumpKernel::new(dim, support)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| ArwError::InvalidKernel(format!("malformed kernel JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("kernel serializes")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn support(&self) -> &[SupportAtom] {
        &self.support
    }

    /// Inverse-CDF lookup: maps `v` uniform on `[0,1)` to a support index.
    #[inline]
    pub fn offset_index_by_cdf(&self, v: f64) -> usize {
        // Support sizes are small (2d for SSRW); a forward scan beats a
        // binary search and is branch-predictable.
        let mut idx = self.support.len() - 1;
        for i in 1..self.cum.len() {
            if v < self.cum[i] {
                idx = i - 1;
                break;
            }
        }
        idx
    }

    #[inline]
    pub fn offset(&self, index: usize) -> &[i64] {
        &self.support[index].offset
    }

    /// Largest `|offset|_inf` over the support; bounds the reachable box.
    pub fn max_offset_norm(&self) -> i64 {
        self.support
            .iter()
            .flat_map(|a| a.offset.iter().map(|c| c.abs()))
            .max()
            .unwrap_or(0)
    }

    /// True when every support offset moves along exactly one axis; such
    /// kernels factor into per-axis walks mixed by a multinomial.
    pub fn is_axis_aligned(&self) -> bool {
        self.support
            .iter()
            .all(|a| a.offset.iter().filter(|&&c| c != 0).count() == 1)
    }

    /// True for the exact `ssrw(1)` kernel; gambler's-ruin solves require it.
    pub fn is_ssrw_d1(&self) -> bool {
        self.dim == 1
            && self.support.len() == 2
            && self.support[0].offset == [-1]
            && self.support[1].offset == [1]
            && (self.support[0].prob - 0.5).abs() < 1e-15
            && (self.support[1].prob - 0.5).abs() < 1e-15
    }

    /// Short human-readable tag used in reports.
    pub fn describe(&self) -> String {
        let uniform = self
            .support
            .iter()
            .all(|a| (a.prob - self.support[0].prob).abs() < 1e-15);
        let is_ssrw = uniform
            && self.support.len() == 2 * self.dim
            && self.is_axis_aligned()
            && self
                .support
                .iter()
                .all(|a| a.offset.iter().map(|c| c.abs()).sum::<i64>() == 1);
        if is_ssrw {
            format!("ssrw(d={})", self.dim)
        } else {
            format!("custom(d={}, support={})", self.dim, self.support.len())
        }
    }
}

/// Constructs the SSRW kernel, the instance used throughout the experiments.
pub fn make_ssrw_kernel(dim: usize) -> Result<JumpKernel> {
    JumpKernel::ssrw(dim)
}

// ---------------------------------------------------------------------------
// Volume
// ---------------------------------------------------------------------------

/// Finite subset of `Z^d` containing the origin, over which stabilization
/// runs with killing at the complement.
///
/// Boxes are stored as per-axis radii with dense row-major indexing, so site
/// lookups in the toppling hot loop are O(1). Explicit site sets fall back
/// to a hash lookup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "VolumeFile", into = "VolumeFile")]
pub struct Volume {
    dim: usize,
    shape: VolumeShape,
    /// Site coordinates in index order (lexicographic).
    coords: Vec<i64>, // flattened, dim entries per site
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum VolumeShape {
    Box { radii: Vec<i64>, strides: Vec<usize> },
    Explicit { index: std::collections::HashMap<Vec<i64>, usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeFile {
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(rename = "box")]
    box_radii: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sites: Option<Vec<Vec<i64>>>,
}

impl TryFrom<VolumeFile> for Volume {
    type Error = ArwError;
    fn try_from(f: VolumeFile) -> Result<Self> {
        match (f.box_radii, f.sites) {
            (Some(radii), None) => Volume::box_radii(f.dim, radii),
            (None, Some(sites)) => Volume::explicit(f.dim, sites),
            _ => Err(ArwError::InvalidVolume(
                "volume needs exactly one of \"box\" or \"sites\"".into(),
            )),
        }
    }
}

impl From<Volume> for VolumeFile {
    fn from(v: Volume) -> Self {
        match &v.shape {
            VolumeShape::Box { radii, .. } => VolumeFile {
                dim: v.dim,
                box_radii: Some(radii.clone()),
                sites: None,
            },
            VolumeShape::Explicit { .. } => VolumeFile {
                dim: v.dim,
                box_radii: None,
                sites: Some(v.sites().map(|s| s.to_vec()).collect()),
            },
        }
    }
}

impl Volume {
    /// Centered box `B_r = {x : |x_i| <= r}` with the same radius per axis.
    pub fn centered_box(dim: usize, r: i64) -> Result<Self> {
        Volume::box_radii(dim, vec![r; dim])
    }

    /// Centered box with per-axis radii.
    pub fn box_radii(dim: usize, radii: Vec<i64>) -> Result<Self> {
        if dim == 0 || radii.len() != dim {
            return Err(ArwError::InvalidVolume(format!(
                "need {dim} radii, got {}",
                radii.len()
            )));
        }
        if radii.iter().any(|&r| r < 0 || r >= MAX_COORD) {
            return Err(ArwError::InvalidVolume("radius out of range".into()));
        }
        let mut len: usize = 1;
        for &r in &radii {
            let side = (2 * r + 1) as usize;
            len = len
                .checked_mul(side)
                .ok_or_else(|| ArwError::ResourceLimit("volume too large".into()))?;
        }
        if len > (1 << 28) {
            return Err(ArwError::ResourceLimit(format!("volume has {len} sites")));
        }
        // Row-major strides: index order equals lexicographic coordinate order.
        let mut strides = vec![0usize; dim];
        let mut acc = 1usize;
        for axis in (0..dim).rev() {
            strides[axis] = acc;
            acc *= (2 * radii[axis] + 1) as usize;
        }
        let mut coords = Vec::with_capacity(len * dim);
        let mut site = radii.iter().map(|&r| -r).collect::<Vec<i64>>();
        'gen: loop {
            coords.extend_from_slice(&site);
            // odometer increment, last axis fastest
            let mut axis = dim;
            loop {
                if axis == 0 {
                    break 'gen;
                }
                axis -= 1;
                if site[axis] < radii[axis] {
                    site[axis] += 1;
                    for a in axis + 1..dim {
                        site[a] = -radii[a];
                    }
                    break;
                }
            }
        }
        debug_assert_eq!(coords.len(), len * dim);
        Ok(Volume {
            dim,
            shape: VolumeShape::Box { radii, strides },
            coords,
            len,
        })
    }

    /// Explicit finite site set; must contain the origin.
    pub fn explicit(dim: usize, mut sites: Vec<Vec<i64>>) -> Result<Self> {
        if dim == 0 {
            return Err(ArwError::InvalidVolume("dimension must be >= 1".into()));
        }
        sites.sort();
        sites.dedup();
        if sites.iter().any(|s| s.len() != dim) {
            return Err(ArwError::InvalidVolume("site arity mismatch".into()));
        }
        if sites
            .iter()
            .any(|s| s.iter().any(|&c| c.abs() >= MAX_COORD))
        {
            return Err(ArwError::InvalidVolume("site outside addressable range".into()));
        }
        if !sites.iter().any(|s| s.iter().all(|&c| c == 0)) {
            return Err(ArwError::InvalidVolume("volume must contain the origin".into()));
        }
        let mut index = std::collections::HashMap::with_capacity(sites.len());
        let mut coords = Vec::with_capacity(sites.len() * dim);
        for (i, s) in sites.iter().enumerate() {
            index.insert(s.clone(), i);
            coords.extend_from_slice(s);
        }
        let len = sites.len();
        Ok(Volume {
            dim,
            shape: VolumeShape::Explicit { index },
            coords,
            len,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0 // never: every volume contains the origin
    }

    /// Dense index of a site, or `None` when outside the volume.
    #[inline]
    pub fn index_of(&self, site: &[i64]) -> Option<usize> {
        match &self.shape {
            VolumeShape::Box { radii, strides } => {
                let mut idx = 0usize;
                for axis in 0..self.dim {
                    let c = site[axis];
                    if c < -radii[axis] || c > radii[axis] {
                        return None;
                    }
                    idx += (c + radii[axis]) as usize * strides[axis];
                }
                Some(idx)
            }
            VolumeShape::Explicit { index } => index.get(site).copied(),
        }
    }

    /// Coordinates of the site at a dense index.
    #[inline]
    pub fn site(&self, index: usize) -> &[i64] {
        &self.coords[index * self.dim..(index + 1) * self.dim]
    }

    /// Index of the origin.
    pub fn origin_index(&self) -> usize {
        self.index_of(&vec![0; self.dim]).expect("origin is in the volume")
    }

    /// Sites in index (lexicographic) order.
    pub fn sites(&self) -> impl Iterator<Item = &[i64]> + '_ {
        (0..self.len).map(move |i| self.site(i))
    }

    /// Whether the centered box of radius `r` fits inside this volume.
    pub fn contains_ball(&self, r: i64) -> bool {
        match &self.shape {
            VolumeShape::Box { radii, .. } => radii.iter().all(|&ra| ra >= r),
            VolumeShape::Explicit { index } => {
                let mut site = vec![-r; self.dim];
                loop {
                    if !index.contains_key(&site) {
                        return false;
                    }
                    let mut axis = self.dim;
                    loop {
                        if axis == 0 {
                            return true;
                        }
                        axis -= 1;
                        if site[axis] < r {
                            site[axis] += 1;
                            for a in axis + 1..self.dim {
                                site[a] = -r;
                            }
                            break;
                        } else if axis == 0 {
                            return true;
                        }
                    }
                }
            }
        }
    }

    /// `|x|_inf` of the site at `index`.
    #[inline]
    pub fn inf_norm(&self, index: usize) -> i64 {
        self.site(index).iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    /// Radii and row-major strides for box volumes; the toppling hot loop
    /// uses them to turn jumps into constant index deltas.
    pub(crate) fn box_geometry(&self) -> Option<(&[i64], &[usize])> {
        match &self.shape {
            VolumeShape::Box { radii, strides } => Some((radii, strides)),
            VolumeShape::Explicit { .. } => None,
        }
    }

    pub fn describe(&self) -> String {
        match &self.shape {
            VolumeShape::Box { radii, .. } => {
                if radii.windows(2).all(|w| w[0] == w[1]) {
                    format!("box(d={}, r={})", self.dim, radii[0])
                } else {
                    format!("box(d={}, radii={:?})", self.dim, radii)
                }
            }
            VolumeShape::Explicit { .. } => format!("explicit(d={}, n={})", self.dim, self.len),
        }
    }
}

// ---------------------------------------------------------------------------
// Return probabilities
// ---------------------------------------------------------------------------

/// Default budget on convolution array cells (two buffers of this many f64s).
pub const CONVOLUTION_CELL_BUDGET: usize = 1 << 23;

/// Exact n-step return probability `P(S_n = 0)` by iterated convolution of
/// the kernel over the reachable box of radius `n * max_offset_norm`.
pub fn return_probability(kernel: &JumpKernel, n: u64) -> Result<f64> {
    let probs = return_probability_prefix_convolution(kernel, n, CONVOLUTION_CELL_BUDGET)?;
    Ok(probs[n as usize])
}

/// `P(S_m = 0)` for all `m <= n` via one running convolution.
fn return_probability_prefix_convolution(
    kernel: &JumpKernel,
    n: u64,
    cell_budget: usize,
) -> Result<Vec<f64>> {
    let d = kernel.dim();
    let reach = kernel.max_offset_norm() * n as i64;
    let side = (2 * reach + 1) as usize;
    let cells = side.checked_pow(d as u32).filter(|&c| c <= cell_budget);
    let Some(cells) = cells else {
        // Report the largest n the budget admits, to guide the caller.
        let mut feasible = 0u64;
        loop {
            let r = kernel.max_offset_norm() * (feasible + 1) as i64;
            let s = (2 * r + 1) as usize;
            match s.checked_pow(d as u32) {
                Some(c) if c <= cell_budget => feasible += 1,
                _ => break,
            }
        }
        return Err(ArwError::ResourceLimit(format!(
            "convolution array for n = {n} exceeds the cell budget; largest feasible n is {feasible}"
        )));
    };

    let mut strides = vec![0usize; d];
    let mut acc = 1usize;
    for axis in (0..d).rev() {
        strides[axis] = acc;
        acc *= side;
    }
    let center: usize = strides.iter().map(|s| s * reach as usize).sum();
    let deltas: Vec<(isize, f64)> = kernel
        .support()
        .iter()
        .map(|a| {
            let mut delta = 0isize;
            for axis in 0..d {
                delta += a.offset[axis] as isize * strides[axis] as isize;
            }
            (delta, a.prob)
        })
        .collect();

    let mut cur = vec![0.0f64; cells];
    let mut next = vec![0.0f64; cells];
    cur[center] = 1.0;
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(1.0);
    // The walk starts at the center and takes at most n steps, so it never
    // reaches the array edge and the offset arithmetic cannot wrap.
    for _step in 0..n {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (i, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for &(delta, p) in &deltas {
                let j = (i as isize + delta) as usize;
                next[j] += mass * p;
            }
        }
        std::mem::swap(&mut cur, &mut next);
        out.push(cur[center]);
    }
    Ok(out)
}

/// `P(S_m = 0)` for all `m <= n`, choosing the fastest exact route: the
/// multinomial axis factorization for axis-aligned kernels, otherwise the
/// running convolution.
pub fn return_probability_prefix(kernel: &JumpKernel, n: u64) -> Result<Vec<f64>> {
    if kernel.is_axis_aligned() && kernel.dim() > 1 {
        return_probability_prefix_factorized(kernel, n)
    } else {
        return_probability_prefix_convolution(kernel, n, CONVOLUTION_CELL_BUDGET)
    }
}

/// Axis factorization: condition on how many of the `n` steps each axis
/// takes (multinomial with the per-axis masses), then multiply the per-axis
/// one-dimensional return probabilities.
fn return_probability_prefix_factorized(kernel: &JumpKernel, n: u64) -> Result<Vec<f64>> {
    let d = kernel.dim();
    let n = n as usize;

    // Per-axis masses and conditional 1d kernels.
    let mut axis_mass = vec![0.0f64; d];
    let mut axis_atoms: Vec<Vec<SupportAtom>> = vec![Vec::new(); d];
    for atom in kernel.support() {
        let axis = atom.offset.iter().position(|&c| c != 0).expect("axis-aligned");
        axis_mass[axis] += atom.prob;
        axis_atoms[axis].push(SupportAtom {
            offset: vec![atom.offset[axis]],
            prob: atom.prob,
        });
    }
    let mut axis_returns: Vec<Vec<f64>> = Vec::with_capacity(d);
    for (axis, mut atoms) in axis_atoms.into_iter().enumerate() {
        if axis_mass[axis] == 0.0 {
            return Err(ArwError::InvalidKernel("axis with zero mass".into()));
        }
        for a in &mut atoms {
            a.prob /= axis_mass[axis];
        }
        // Renormalized atoms can drift off the 1e-12 validation bound only
        // by float error; rescale exactly.
        let total: f64 = atoms.iter().map(|a| a.prob).sum();
        for a in &mut atoms {
            a.prob /= total;
        }
        let k1 = JumpKernel::new(1, atoms)?;
        axis_returns.push(return_probability_prefix_convolution(
            &k1,
            n as u64,
            CONVOLUTION_CELL_BUDGET,
        )?);
    }

    let mut log_fact = vec![0.0f64; n + 1];
    for i in 1..=n {
        log_fact[i] = log_fact[i - 1] + (i as f64).ln();
    }
    let log_mass: Vec<f64> = axis_mass.iter().map(|w| w.ln()).collect();

    let mut out = vec![0.0f64; n + 1];
    out[0] = 1.0;
    match d {
        2 => {
            for m in 1..=n {
                let mut total = 0.0;
                for n1 in 0..=m {
                    let r1 = axis_returns[0][n1];
                    let r2 = axis_returns[1][m - n1];
                    if r1 == 0.0 || r2 == 0.0 {
                        continue;
                    }
                    let lw = log_fact[m] - log_fact[n1] - log_fact[m - n1]
                        + n1 as f64 * log_mass[0]
                        + (m - n1) as f64 * log_mass[1];
                    if lw < -80.0 {
                        continue;
                    }
                    total += lw.exp() * r1 * r2;
                }
                out[m] = total;
            }
        }
        3 => {
            for m in 1..=n {
                let mut total = 0.0;
                for n1 in 0..=m {
                    let r1 = axis_returns[0][n1];
                    if r1 == 0.0 {
                        continue;
                    }
                    let base = log_fact[m] - log_fact[n1] + n1 as f64 * log_mass[0];
                    for n2 in 0..=(m - n1) {
                        let n3 = m - n1 - n2;
                        let r2 = axis_returns[1][n2];
                        let r3 = axis_returns[2][n3];
                        if r2 == 0.0 || r3 == 0.0 {
                            continue;
                        }
                        let lw = base - log_fact[n2] - log_fact[n3]
                            + n2 as f64 * log_mass[1]
                            + n3 as f64 * log_mass[2];
                        if lw < -80.0 {
                            continue;
                        }
                        total += lw.exp() * r1 * r2 * r3;
                    }
                }
                out[m] = total;
            }
        }
        _ => {
            // Dimensions beyond 3 are outside the experiments; fall back.
            return return_probability_prefix_convolution(kernel, n as u64, CONVOLUTION_CELL_BUDGET);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Green's function
// ---------------------------------------------------------------------------

/// Green's function estimate, or a divergence flag for recurrent kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GreenEstimate {
    Finite(f64),
    Divergent,
}

/// Result of a Green's-function computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WalkAnalytics {
    pub green: GreenEstimate,
    /// `1 / G` when finite, `0` when divergent (recurrent walk).
    pub escape_prob: f64,
    pub truncation_n: u64,
    /// Combined bound: 4x tail standard error plus the horizon truncation
    /// bound. Zero for the divergent classification.
    pub error_bound: f64,
}

/// Tunables for [`green_function_with`].
#[derive(Debug, Clone, Copy)]
pub struct GreenOptions {
    /// Step horizon for the Monte Carlo tail walks.
    pub tail_horizon: u64,
    /// Partial sums above this, still decaying slowly, classify as divergent.
    pub divergence_threshold: f64,
    /// Fitted per-term decay exponent at or below this is treated as a
    /// non-summable tail.
    pub decay_exponent_cutoff: f64,
}

impl Default for GreenOptions {
    fn default() -> Self {
        GreenOptions {
            tail_horizon: 20_000,
            divergence_threshold: 50.0,
            decay_exponent_cutoff: 1.1,
        }
    }
}

/// `G ~= sum_{n<=N} P(S_n = 0)` plus a Monte Carlo estimate of the tail.
///
/// Recurrent kernels are classified `Divergent` by inspecting the decay of
/// the exact prefix terms (and a hard threshold on the partial sum) rather
/// than attempting a symbolic recurrence test.
pub fn green_function(
    kernel: &JumpKernel,
    truncation_n: u64,
    mc_tail_samples: u64,
    seed: u64,
) -> Result<WalkAnalytics> {
    green_function_with(kernel, truncation_n, mc_tail_samples, seed, GreenOptions::default())
}

pub fn green_function_with(
    kernel: &JumpKernel,
    truncation_n: u64,
    mc_tail_samples: u64,
    seed: u64,
    opts: GreenOptions,
) -> Result<WalkAnalytics> {
    // truncation_n = 0 degenerates to the n = 0 term plus the tail estimate;
    // no decay data exists then, so divergence cannot be detected.
    let terms = return_probability_prefix(kernel, truncation_n)?;
    let partial: f64 = terms.iter().sum();

    let (alpha, scale) = fitted_decay(&terms);
    let summable = match alpha {
        Some(a) => a > opts.decay_exponent_cutoff,
        // No measurable tail at all (e.g. drift kernels where every
        // positive-n term vanishes): the series is effectively finite.
        None => true,
    };
    if !summable || partial > opts.divergence_threshold {
        return Ok(WalkAnalytics {
            green: GreenEstimate::Divergent,
            escape_prob: 0.0,
            truncation_n,
            error_bound: 0.0,
        });
    }

    // Monte Carlo tail: expected number of origin returns in steps
    // (truncation_n, horizon], averaged over independent walks.
    let horizon = opts.tail_horizon.max(truncation_n + 1);
    let counts: Vec<u32> = parallel::replica_map(mc_tail_samples, |rep| {
        let mut rng = ChaCha8Rng::seed_from_u64(parallel::derive_seed(seed, domain::WALK, 0, rep));
        let mut pos = vec![0i64; kernel.dim()];
        let mut hits = 0u32;
        for step in 1..=horizon {
            let v: f64 = rng.random();
            let off = kernel.offset(kernel.offset_index_by_cdf(v));
            for (p, o) in pos.iter_mut().zip(off) {
                *p += o;
            }
            if step > truncation_n && pos.iter().all(|&c| c == 0) {
                hits += 1;
            }
        }
        hits
    });
    let n = mc_tail_samples.max(1) as f64;
    let mean_tail = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean_tail).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let tail_se = (var / n).sqrt();

    // Remainder beyond the horizon, bounded by the fitted power law with a
    // safety factor of 2.
    let horizon_bound = match (alpha, scale) {
        (Some(a), Some(c)) if a > 1.0 => {
            2.0 * c * (horizon as f64).powf(1.0 - a) / (a - 1.0)
        }
        _ => 0.0,
    };

    let g = partial + mean_tail;
    Ok(WalkAnalytics {
        green: GreenEstimate::Finite(g),
        escape_prob: 1.0 / g,
        truncation_n,
        error_bound: 4.0 * tail_se + horizon_bound,
    })
}

/// Least-squares fit of `P(S_n = 0) ~= c * n^(-alpha)` over the trailing
/// half of the nonzero terms. Returns `(alpha, c)`; `None` when fewer than
/// four usable terms exist.
fn fitted_decay(terms: &[f64]) -> (Option<f64>, Option<f64>) {
    let pts: Vec<(f64, f64)> = terms
        .iter()
        .enumerate()
        .skip(terms.len() / 2)
        .filter(|(n, &p)| *n > 0 && p > 1e-280)
        .map(|(n, &p)| ((n as f64).ln(), p.ln()))
        .collect();
    if pts.len() < 4 {
        return (None, None);
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (Some(-slope), Some(intercept.exp()))
}

// ---------------------------------------------------------------------------
// Sleep-at-origin probability q
// ---------------------------------------------------------------------------

/// Truncated series for `q` with its reported truncation bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QEstimate {
    pub value: f64,
    /// `lambda_j^(N+1) / lambda_s`, a geometric bound on the dropped tail.
    pub truncation_error: f64,
}

/// Probability a single particle started at the origin falls asleep there:
/// the series `sum_{n<=N} lambda_s lambda_j^n P(S_n = 0)`.
pub fn single_particle_q(kernel: &JumpKernel, params: &Params, truncation_n: u64) -> Result<QEstimate> {
    let terms = return_probability_prefix(kernel, truncation_n)?;
    let ls = params.lambda_s();
    let lj = params.lambda_j();
    let mut value = 0.0;
    let mut weight = ls;
    for &p in &terms {
        value += weight * p;
        weight *= lj;
    }
    Ok(QEstimate {
        value,
        truncation_error: lj.powi(truncation_n as i32 + 1) / ls,
    })
}

// ---------------------------------------------------------------------------
// Escape-before-return Monte Carlo
// ---------------------------------------------------------------------------

/// Options for [`escape_before_return_mc`].
#[derive(Debug, Clone, Copy)]
pub struct EscapeOptions {
    /// Step horizon used when no finite volume bounds the excursion.
    pub horizon: u64,
}

impl Default for EscapeOptions {
    fn default() -> Self {
        EscapeOptions { horizon: 100_000 }
    }
}

/// Fraction of single-particle excursions from the origin that fall asleep
/// or exit the volume before re-entering the origin.
///
/// The excursion starts with a forced jump out of the origin (offset drawn
/// from the kernel), then consumes instructions: sleep ends the excursion as
/// an escape, a jump moves the particle, arrival at the origin ends it as a
/// return. `volume = None` estimates the infinite-volume escape probability
/// with a step horizon; unresolved excursions count as escapes and the
/// horizon bias bound `lambda_j^horizon` is reported in the metadata.
pub fn escape_before_return_mc(
    kernel: &JumpKernel,
    regime: &SleepRegime,
    volume: Option<&Volume>,
    replicas: u64,
    seed: u64,
) -> Result<EstimateReport> {
    escape_before_return_mc_with(kernel, regime, volume, replicas, seed, EscapeOptions::default())
}

pub fn escape_before_return_mc_with(
    kernel: &JumpKernel,
    regime: &SleepRegime,
    volume: Option<&Volume>,
    replicas: u64,
    seed: u64,
    opts: EscapeOptions,
) -> Result<EstimateReport> {
    if replicas == 0 {
        return Err(ArwError::InvalidArgument("replicas must be >= 1".into()));
    }
    if let Some(v) = volume {
        if v.dim() != kernel.dim() {
            return Err(ArwError::InvalidArgument("volume/kernel dimension mismatch".into()));
        }
    }
    let ls = regime.lambda_s();
    let escapes: Vec<bool> = parallel::replica_map(replicas, |rep| {
        let mut rng = ChaCha8Rng::seed_from_u64(parallel::derive_seed(seed, domain::WALK, 1, rep));
        // Forced jump-out: offset law conditioned on jumping.
        let v0: f64 = rng.random();
        let mut pos = kernel.offset(kernel.offset_index_by_cdf(v0)).to_vec();
        if let Some(vol) = volume {
            if vol.index_of(&pos).is_none() {
                return true; // left the volume on the jump-out
            }
        }
        for _ in 0..opts.horizon {
            let u: f64 = rng.random();
            if u < ls {
                return true; // fell asleep away from the origin
            }
            let v = if ls < 1.0 { (u - ls) / (1.0 - ls) } else { u };
            let off = kernel.offset(kernel.offset_index_by_cdf(v));
            for (p, o) in pos.iter_mut().zip(off) {
                *p += o;
            }
            if pos.iter().all(|&c| c == 0) {
                return false; // returned to the origin
            }
            if let Some(vol) = volume {
                if vol.index_of(&pos).is_none() {
                    return true; // exited the volume
                }
            }
        }
        true // unresolved at the horizon; counted as escape, bias reported
    });
    let successes = escapes.iter().filter(|&&e| e).count() as u64;
    let lj = regime.lambda_j();
    let meta = ReportMeta {
        lambda: regime.lambda(),
        regime: regime.degenerate_name(),
        kernel: Some(kernel.describe()),
        volume: Some(volume.map_or_else(|| "all".into(), |v| v.describe())),
        bias_bound: if volume.is_none() {
            Some(lj.powf(opts.horizon as f64).min(1.0))
        } else {
            None
        },
        ..ReportMeta::default()
    };
    Ok(EstimateReport::proportion(successes, replicas, seed, meta))
}

/// Shared handle used across the engine; kernels are immutable.
pub type KernelRef = Arc<JumpKernel>;
