//! Orthonormal dictionaries over the parameter space.
//!
//! A [`Dictionary`] is an orthogonal `d × d` matrix `V = [v_1 … v_d]`, used as
//! an operator and never materialized except in tests:
//!
//! - `forward`: coefficients to parameters, `w = V a`;
//! - `adjoint`: parameters to coefficients, `a = Vᵀ w`.
//!
//! Training over `Span(D')` for a subset `D'` keeps only the coefficients in an
//! [`ActiveSet`] and pins the rest to zero.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, dct2_apply, dct_matrix, random_orthogonal, DenseMatrix, OrthonormalBlock};
use crate::nn::{Network, ParamKind, ParamLayout};
use crate::{rng, Error, Result};

/// Largest dimension for which a single dense random rotation is built.
pub const GLOBAL_ROTATION_MAX_DIM: usize = 5_000;

/// Largest dimension [`Dictionary::materialize`] will expand.
pub const MATERIALIZE_MAX_DIM: usize = 4_096;

/// Choice of the shared basis `U` of a bottleneck dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisKind {
    Identity,
    /// One orthonormal 2-D DCT-II basis per input channel.
    Dct,
    /// Haar-random rotation.
    Random { seed: u64 },
}

/// An orthonormal basis of `R^n` stored in its cheapest exact form.
#[derive(Clone, Debug, PartialEq)]
pub enum SharedBasis {
    Identity(usize),
    Dense(OrthonormalBlock),
    /// Separable per-channel DCT; `c` is the 1-D DCT-II matrix of size `side`.
    Dct {
        channels: usize,
        side: usize,
        c: DenseMatrix,
    },
}

impl SharedBasis {
    pub fn dct(channels: usize, side: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("DCT basis needs at least one channel"));
        }
        Ok(SharedBasis::Dct {
            channels,
            side,
            c: dct_matrix(side)?,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            SharedBasis::Identity(n) => *n,
            SharedBasis::Dense(b) => b.dim(),
            SharedBasis::Dct { channels, side, .. } => channels * side * side,
        }
    }

    fn forward_into(&self, a: &[f64], out: &mut [f64]) {
        match self {
            SharedBasis::Identity(_) => out.copy_from_slice(a),
            SharedBasis::Dense(b) => b.forward_into(a, out),
            SharedBasis::Dct { side, c, .. } => {
                let plane = side * side;
                for (src, dst) in a.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
                    dct2_apply(c, src, dst, true);
                }
            }
        }
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        match self {
            SharedBasis::Identity(_) => out.copy_from_slice(w),
            SharedBasis::Dense(b) => b.adjoint_into(w, out),
            SharedBasis::Dct { side, c, .. } => {
                let plane = side * side;
                for (src, dst) in w.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
                    dct2_apply(c, src, dst, false);
                }
            }
        }
    }

    /// Column `l` of the basis matrix.
    pub fn column(&self, l: usize) -> Vec<f64> {
        let n = self.dim();
        let mut e = vec![0.0; n];
        e[l] = 1.0;
        let mut out = vec![0.0; n];
        self.forward_into(&e, &mut out);
        out
    }

    pub fn materialize(&self) -> DenseMatrix {
        let n = self.dim();
        let mut m = DenseMatrix::zeros(n, n);
        for l in 0..n {
            for (r, v) in self.column(l).into_iter().enumerate() {
                m.set(r, l, v);
            }
        }
        m
    }
}

/// Dense-layer bottleneck: `d_out` copies of one shared basis `U` on the
/// diagonal of the layer's weight block, identity everywhere else.
///
/// Unit `k`'s incoming weights are `U c_k`, i.e. `W = U C` with `W` laid out
/// `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub layer: usize,
    pub weight_offset: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub u_kind: BasisKind,
    pub u: SharedBasis,
}

impl Bottleneck {
    /// Global index range of the factored weight segment.
    pub fn target_range(&self) -> Range<usize> {
        self.weight_offset..self.weight_offset + self.d_in * self.d_out
    }

    /// Global indices of group `l`: the `l`-th basis column in every unit.
    pub fn group_indices(&self, l: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d_out).map(move |k| self.weight_offset + k * self.d_in + l)
    }

    /// `Σ_k a_{k·d_in + l}²` for every group `l`.
    pub fn group_energies(&self, coefficients: &[f64]) -> Vec<f64> {
        let mut energy = vec![0.0; self.d_in];
        let block = &coefficients[self.target_range()];
        for unit in block.chunks_exact(self.d_in) {
            for (e, a) in energy.iter_mut().zip(unit) {
                *e += a * a;
            }
        }
        energy
    }

    /// Groups that are fully active. Fails if any group is partially active.
    pub fn surviving_groups(&self, active: &ActiveSet) -> Result<Vec<usize>> {
        let mask = active.mask();
        let mut groups = Vec::new();
        for l in 0..self.d_in {
            let on = self.group_indices(l).filter(|&i| mask[i]).count();
            if on == self.d_out {
                groups.push(l);
            } else if on != 0 {
                return Err(Error::InvalidState(format!(
                    "group {l} is partially active ({on} of {} units)",
                    self.d_out
                )));
            }
        }
        Ok(groups)
    }

    /// Active set keeping every parameter outside the target block and the
    /// listed groups inside it.
    pub fn active_from_groups(&self, dim: usize, groups: &[usize]) -> Result<ActiveSet> {
        let target = self.target_range();
        let mut keep = vec![false; self.d_in];
        for &l in groups {
            if l >= self.d_in {
                return Err(Error::invalid(format!("group {l} out of range {}", self.d_in)));
            }
            keep[l] = true;
        }
        let indices = (0..dim).filter(|&i| !target.contains(&i) || keep[(i - target.start) % self.d_in]);
        ActiveSet::from_indices(dim, indices)
    }

    fn forward_into(&self, a: &[f64], out: &mut [f64]) {
        let t = self.target_range();
        out[..t.start].copy_from_slice(&a[..t.start]);
        out[t.end..].copy_from_slice(&a[t.end..]);
        for (src, dst) in a[t.clone()].chunks_exact(self.d_in).zip(out[t].chunks_exact_mut(self.d_in)) {
            self.u.forward_into(src, dst);
        }
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        let t = self.target_range();
        out[..t.start].copy_from_slice(&w[..t.start]);
        out[t.end..].copy_from_slice(&w[t.end..]);
        for (src, dst) in w[t.clone()].chunks_exact(self.d_in).zip(out[t].chunks_exact_mut(self.d_in)) {
            self.u.adjoint_into(src, dst);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictBlock {
    pub range: Range<usize>,
    pub dict: Dictionary,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DictionaryKind {
    Canonical,
    Dense(OrthonormalBlock),
    BlockDiagonal(Vec<DictBlock>),
    Bottleneck(Bottleneck),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    dim: usize,
    kind: DictionaryKind,
}

/// Per-segment block choice for [`make_block_diagonal`].
#[derive(Clone, Debug, PartialEq)]
pub enum BlockSpec {
    Identity,
    Random { seed: u64 },
    Explicit(OrthonormalBlock),
}

impl Dictionary {
    pub fn canonical(dim: usize) -> Self {
        Self {
            dim,
            kind: DictionaryKind::Canonical,
        }
    }

    pub fn dense(block: OrthonormalBlock) -> Self {
        Self {
            dim: block.dim(),
            kind: DictionaryKind::Dense(block),
        }
    }

    /// One dense Haar-random rotation of all of `R^d`.
    pub fn global_random(dim: usize, seed: u64) -> Result<Self> {
        if dim > GLOBAL_ROTATION_MAX_DIM {
            return Err(Error::invalid(format!(
                "a global rotation of dimension {dim} exceeds the limit of {GLOBAL_ROTATION_MAX_DIM}; use a per-layer rotation"
            )));
        }
        Ok(Self::dense(random_orthogonal(dim, seed)?))
    }

    /// Independent random rotation per layer (weights and bias together).
    ///
    /// Layers larger than `max_block` are cut into blocks of whole units, and
    /// units larger than `max_block` into fixed-size pieces.
    pub fn per_layer_random(layout: &ParamLayout, seed: u64, max_block: usize) -> Result<Self> {
        if max_block == 0 {
            return Err(Error::invalid("max_block must be positive"));
        }
        let mut ranges: Vec<Range<usize>> = Vec::new();
        let segs = layout.segments();
        let mut i = 0;
        while i < segs.len() {
            let layer = segs[i].layer;
            let start = segs[i].offset;
            let mut end = start;
            let mut cuts = Vec::new();
            while i < segs.len() && segs[i].layer == layer {
                let s = &segs[i];
                let row = s.row_len().max(1);
                for r in 0..s.len() / row {
                    cuts.push(s.offset + r * row);
                }
                end = s.range().end;
                i += 1;
            }
            cuts.push(end);
            // greedily merge rows into blocks no larger than max_block
            let mut block_start = start;
            let mut prev = start;
            for &cut in cuts.iter().skip(1) {
                if cut - block_start > max_block && prev > block_start {
                    ranges.push(block_start..prev);
                    block_start = prev;
                }
                while cut - block_start > max_block {
                    ranges.push(block_start..block_start + max_block);
                    block_start += max_block;
                }
                prev = cut;
            }
            if prev > block_start {
                ranges.push(block_start..prev);
            }
        }
        let blocks = ranges
            .into_iter()
            .enumerate()
            .map(|(k, range)| {
                let block = random_orthogonal(range.len(), rng::derive(seed, k as u64))?;
                Ok(DictBlock {
                    range,
                    dict: Dictionary::dense(block),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: layout.len(),
            kind: DictionaryKind::BlockDiagonal(blocks),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &DictionaryKind {
        &self.kind
    }

    pub fn bottleneck(&self) -> Option<&Bottleneck> {
        match &self.kind {
            DictionaryKind::Bottleneck(b) => Some(b),
            _ => None,
        }
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::invalid(format!(
                "{what} has length {len}, dictionary has dimension {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// `out = V a`.
    pub fn forward_into(&self, a: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len("coefficient vector", a.len())?;
        self.check_len("output buffer", out.len())?;
        self.forward_unchecked(a, out);
        Ok(())
    }

    /// `out = Vᵀ w`.
    pub fn adjoint_into(&self, w: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len("parameter vector", w.len())?;
        self.check_len("output buffer", out.len())?;
        self.adjoint_unchecked(w, out);
        Ok(())
    }

    fn forward_unchecked(&self, a: &[f64], out: &mut [f64]) {
        match &self.kind {
            DictionaryKind::Canonical => out.copy_from_slice(a),
            DictionaryKind::Dense(b) => b.forward_into(a, out),
            DictionaryKind::BlockDiagonal(blocks) => {
                for blk in blocks {
                    blk.dict.forward_unchecked(&a[blk.range.clone()], &mut out[blk.range.clone()]);
                }
            }
            DictionaryKind::Bottleneck(b) => b.forward_into(a, out),
        }
    }

    fn adjoint_unchecked(&self, w: &[f64], out: &mut [f64]) {
        match &self.kind {
            DictionaryKind::Canonical => out.copy_from_slice(w),
            DictionaryKind::Dense(b) => b.adjoint_into(w, out),
            DictionaryKind::BlockDiagonal(blocks) => {
                for blk in blocks {
                    blk.dict.adjoint_unchecked(&w[blk.range.clone()], &mut out[blk.range.clone()]);
                }
            }
            DictionaryKind::Bottleneck(b) => b.adjoint_into(w, out),
        }
    }

    /// `a = Vᵀ w`.
    pub fn to_coefficients(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.adjoint_into(w, &mut out)?;
        Ok(out)
    }

    /// `w = Σ a_i v_i`.
    pub fn from_coefficients(&self, a: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.forward_into(a, &mut out)?;
        Ok(out)
    }

    fn check_active(&self, active: &ActiveSet) -> Result<()> {
        if active.dim() != self.dim {
            return Err(Error::invalid(format!(
                "active set over {} elements, dictionary has {}",
                active.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Orthogonal projection onto `Span{v_i : i ∈ active}`.
    pub fn project(&self, active: &ActiveSet, w: &[f64]) -> Result<Vec<f64>> {
        self.check_active(active)?;
        let mut a = self.to_coefficients(w)?;
        active.mask_coefficients(&mut a);
        self.from_coefficients(&a)
    }

    /// `‖w − P w‖²`, where `P` projects onto the span of `active_next`.
    pub fn residual(&self, active_next: &ActiveSet, w: &[f64]) -> Result<f64> {
        let p = self.project(active_next, w)?;
        Ok(w.iter().zip(&p).map(|(x, y)| (x - y) * (x - y)).sum())
    }

    /// The same quantity as [`Dictionary::residual`], computed as the energy
    /// of the dropped coefficients.
    pub fn dropped_energy(&self, active_next: &ActiveSet, w: &[f64]) -> Result<f64> {
        self.check_active(active_next)?;
        let a = self.to_coefficients(w)?;
        let mask = active_next.mask();
        Ok(a.iter().zip(&mask).filter(|(_, &m)| !m).map(|(v, _)| v * v).sum())
    }

    /// Dense `d × d` matrix whose columns are the dictionary elements.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        if self.dim > MATERIALIZE_MAX_DIM {
            return Err(Error::invalid(format!(
                "refusing to materialize a {0}x{0} dictionary",
                self.dim
            )));
        }
        let mut m = DenseMatrix::zeros(self.dim, self.dim);
        let mut e = vec![0.0; self.dim];
        let mut col = vec![0.0; self.dim];
        for j in 0..self.dim {
            e[j] = 1.0;
            self.forward_unchecked(&e, &mut col);
            e[j] = 0.0;
            for (r, &v) in col.iter().enumerate() {
                m.set(r, j, v);
            }
        }
        Ok(m)
    }
}

/// Block-diagonal dictionary aligned with the parameter layout.
///
/// `blocks` must partition `[0, d)` and every cut must fall on a segment
/// boundary or a unit (row) boundary inside a segment.
pub fn make_block_diagonal(layout: &ParamLayout, blocks: Vec<(Range<usize>, BlockSpec)>) -> Result<Dictionary> {
    let mut blocks = blocks;
    blocks.sort_by_key(|(r, _)| r.start);
    let mut next = 0;
    let mut out = Vec::with_capacity(blocks.len());
    for (k, (range, spec)) in blocks.into_iter().enumerate() {
        if range.start != next || range.end <= range.start {
            return Err(Error::invalid(format!(
                "block {range:?} does not continue the partition at {next}"
            )));
        }
        if !layout.is_boundary(range.start) || !layout.is_boundary(range.end) {
            return Err(Error::invalid(format!(
                "block {range:?} does not align with layer or unit boundaries"
            )));
        }
        let n = range.len();
        let dict = match spec {
            BlockSpec::Identity => Dictionary::canonical(n),
            BlockSpec::Random { seed } => Dictionary::dense(random_orthogonal(n, rng::derive(seed, k as u64))?),
            BlockSpec::Explicit(b) => {
                if b.dim() != n {
                    return Err(Error::invalid(format!(
                        "block {range:?} needs dimension {n}, got {}",
                        b.dim()
                    )));
                }
                Dictionary::dense(b)
            }
        };
        next = range.end;
        out.push(DictBlock { range, dict });
    }
    if next != layout.len() {
        return Err(Error::invalid(format!(
            "blocks cover [0, {next}) but the layout has {} parameters",
            layout.len()
        )));
    }
    Ok(Dictionary {
        dim: layout.len(),
        kind: DictionaryKind::BlockDiagonal(out),
    })
}

/// Bottleneck dictionary on dense layer `layer` of `net`.
pub fn make_bottleneck(net: &Network, layer: usize, u_kind: BasisKind) -> Result<Dictionary> {
    let info = net.dense_info(layer)?;
    let u = match u_kind {
        BasisKind::Identity => SharedBasis::Identity(info.d_in),
        BasisKind::Random { seed } => SharedBasis::Dense(random_orthogonal(info.d_in, seed)?),
        BasisKind::Dct => {
            let img = info.image.ok_or_else(|| {
                Error::invalid(format!("layer {layer} does not read an image, cannot use a DCT basis"))
            })?;
            if img.height != img.width || img.len() != info.d_in {
                return Err(Error::invalid(format!(
                    "DCT basis needs square channels, layer {layer} reads {}x{}x{}",
                    img.height, img.width, img.channels
                )));
            }
            SharedBasis::dct(img.channels, img.height)?
        }
    };
    debug_assert_eq!(
        net.layout().segment(layer, ParamKind::Weight).map(|s| s.offset),
        Some(info.weight_offset)
    );
    Ok(Dictionary {
        dim: net.param_count(),
        kind: DictionaryKind::Bottleneck(Bottleneck {
            layer,
            weight_offset: info.weight_offset,
            d_in: info.d_in,
            d_out: info.d_out,
            u_kind,
            u,
        }),
    })
}

/// Low-rank form `W = U′ C′` of a pruned bottleneck layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    pub layer: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Surviving basis columns `l`, ascending.
    pub surviving: Vec<usize>,
    /// `d_in × m`.
    pub u_prime: DenseMatrix,
    /// `m × d_out`.
    pub c_prime: DenseMatrix,
}

impl Factorization {
    pub fn m(&self) -> usize {
        self.surviving.len()
    }

    /// `W = U′ C′` as a `d_in × d_out` matrix.
    pub fn reconstruct(&self) -> DenseMatrix {
        if self.m() == 0 {
            return DenseMatrix::zeros(self.d_in, self.d_out);
        }
        self.u_prime
            .matmul(&self.c_prime)
            .expect("factor shapes agree by construction")
    }

    /// Pre-activations without bias, `xᵀ U′ C′`, for one input.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = linalg::matvec_transpose(&self.u_prime, x)?;
        if self.m() == 0 {
            return Ok(vec![0.0; self.d_out]);
        }
        linalg::matvec_transpose(&self.c_prime, &z)
    }
}

/// Splits the bottleneck layer of `P_active w` into `U′` and `C′`.
pub fn factorize(dict: &Dictionary, active: &ActiveSet, w: &[f64]) -> Result<Factorization> {
    let b = dict
        .bottleneck()
        .ok_or_else(|| Error::invalid("factorize needs a bottleneck dictionary"))?;
    dict.check_active(active)?;
    let surviving = b.surviving_groups(active)?;
    let a = dict.to_coefficients(w)?;
    let m = surviving.len();
    let mut u_prime = DenseMatrix::zeros(b.d_in, m);
    let mut c_prime = DenseMatrix::zeros(m, b.d_out);
    for (r, &l) in surviving.iter().enumerate() {
        for (i, v) in b.u.column(l).into_iter().enumerate() {
            u_prime.set(i, r, v);
        }
        for k in 0..b.d_out {
            c_prime.set(r, k, a[b.weight_offset + k * b.d_in + l]);
        }
    }
    Ok(Factorization {
        layer: b.layer,
        d_in: b.d_in,
        d_out: b.d_out,
        surviving,
        u_prime,
        c_prime,
    })
}

/// The surviving subset `D_t` of dictionary elements, as sorted indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    dim: usize,
    active: Vec<usize>,
}

impl ActiveSet {
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            active: (0..dim).collect(),
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            active: Vec::new(),
        }
    }

    pub fn from_indices(dim: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut active: Vec<usize> = indices.into_iter().collect();
        active.sort_unstable();
        active.dedup();
        if let Some(&last) = active.last() {
            if last >= dim {
                return Err(Error::invalid(format!("index {last} is outside [0, {dim})")));
            }
        }
        Ok(Self { dim, active })
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            dim: mask.len(),
            active: mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.active
    }

    pub fn contains(&self, i: usize) -> bool {
        self.active.binary_search(&i).is_ok()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.dim];
        for &i in &self.active {
            m[i] = true;
        }
        m
    }

    /// Number of active indices inside `range`.
    pub fn count_in(&self, range: Range<usize>) -> usize {
        let lo = self.active.partition_point(|&i| i < range.start);
        let hi = self.active.partition_point(|&i| i < range.end);
        hi - lo
    }

    pub fn is_subset_of(&self, other: &ActiveSet) -> bool {
        self.dim == other.dim && self.active.iter().all(|&i| other.contains(i))
    }

    /// Zeroes every inactive coefficient in place.
    pub fn mask_coefficients(&self, a: &mut [f64]) {
        let mut next = self.active.iter().peekable();
        for (i, v) in a.iter_mut().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
            } else {
                *v = 0.0;
            }
        }
    }

    /// `dim=<d>` header followed by one decimal index per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(12 + self.active.len() * 7);
        let _ = writeln!(s, "dim={}", self.dim);
        for i in &self.active {
            let _ = writeln!(s, "{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let dim = header
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::invalid(format!("active set header `{header}` is not `dim=<d>`")))?;
        let mut indices = Vec::new();
        let mut prev: Option<usize> = None;
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let i: usize = line
                .parse()
                .map_err(|_| Error::invalid(format!("line {}: `{line}` is not an index", n + 2)))?;
            if prev.is_some_and(|p| p >= i) {
                return Err(Error::invalid(format!("line {}: indices must be strictly increasing", n + 2)));
            }
            prev = Some(i);
            indices.push(i);
        }
        Self::from_indices(dim, indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InputShape, NetworkSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_net() -> Network {
        Network::new(NetworkSpec::mlp(InputShape::new(2, 2, 1), &[3], 2)).unwrap()
    }

    fn rvec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn canonical_and_rotation_coefficients() {
        let c = Dictionary::canonical(3);
        assert_eq!(c.to_coefficients(&[3.0, -1.0, 4.0]).unwrap(), vec![3.0, -1.0, 4.0]);

        // 90° rotation: columns (0,1) and (−1,0); Qᵀ(1,0) = (0,−1)
        let q = OrthonormalBlock::new(DenseMatrix::new(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap()).unwrap();
        let d = Dictionary::dense(q.clone());
        assert_eq!(d.to_coefficients(&[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
        assert_eq!(d.from_coefficients(&[1.0, 0.0]).unwrap(), q.matrix().column(0));
        assert_eq!(d.from_coefficients(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(d.to_coefficients(&[1.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        let c = Dictionary::canonical(3);
        let w = [3.0, -1.0, 4.0];
        let keep = ActiveSet::from_indices(3, [0, 2]).unwrap();
        assert_eq!(c.project(&keep, &w).unwrap(), vec![3.0, 0.0, 4.0]);
        assert_eq!(c.project(&ActiveSet::full(3), &w).unwrap(), w.to_vec());
        assert_eq!(c.project(&ActiveSet::empty(3), &w).unwrap(), vec![0.0; 3]);
        assert_eq!(c.residual(&keep, &w).unwrap(), 1.0);
        assert_eq!(c.residual(&ActiveSet::full(3), &w).unwrap(), 0.0);
        assert!(c.project(&ActiveSet::full(4), &w).is_err());
    }

    #[test]
    fn residual_matches_dropped_coefficients_for_dense_dictionary() {
        let d = Dictionary::global_random(9, 4).unwrap();
        let w = rvec(9, 1);
        let keep = ActiveSet::from_indices(9, [0, 3, 4, 8]).unwrap();
        let a = d.to_coefficients(&w).unwrap();
        let explicit: f64 = [1, 2, 5, 6, 7].iter().map(|&i| a[i] * a[i]).sum();
        assert!((d.residual(&keep, &w).unwrap() - explicit).abs() <= 1e-12);
    }

    #[test]
    fn block_diagonal_of_identities_is_canonical() {
        let net = small_net();
        let layout = net.layout();
        let blocks = layout.segments().iter().map(|s| (s.range(), BlockSpec::Identity)).collect();
        let d = make_block_diagonal(layout, blocks).unwrap();
        let w = rvec(net.param_count(), 2);
        assert_eq!(d.to_coefficients(&w).unwrap(), w);
        assert_eq!(d.from_coefficients(&w).unwrap(), w);
    }

    #[test]
    fn layer_blocks_are_local() {
        let net = small_net();
        let layout = net.layout();
        let first = layout.segment(1, ParamKind::Weight).unwrap().offset..layout.segment(1, ParamKind::Bias).unwrap().range().end;
        let rest = first.end..layout.len();
        let d = make_block_diagonal(layout, vec![(first.clone(), BlockSpec::Random { seed: 3 }), (rest.clone(), BlockSpec::Identity)]).unwrap();
        let a = rvec(layout.len(), 5);
        let w = d.from_coefficients(&a).unwrap();
        let mut a2 = a.clone();
        for v in &mut a2[first.clone()] {
            *v += 0.75;
        }
        let w2 = d.from_coefficients(&a2).unwrap();
        assert_eq!(w[rest.clone()], w2[rest]);
        assert_ne!(w[first.clone()], w2[first]);
    }

    #[test]
    fn unit_level_blocks_touch_only_their_unit() {
        let net = small_net();
        let layout = net.layout();
        let wseg = layout.segment(1, ParamKind::Weight).unwrap().clone();
        let d_in = wseg.row_len();
        let mut blocks: Vec<(Range<usize>, BlockSpec)> = (0..3)
            .map(|k| (wseg.offset + k * d_in..wseg.offset + (k + 1) * d_in, BlockSpec::Random { seed: 10 }))
            .collect();
        blocks.push((wseg.range().end..layout.len(), BlockSpec::Identity));
        let d = make_block_diagonal(layout, blocks).unwrap();
        let a = rvec(layout.len(), 6);
        let w = d.from_coefficients(&a).unwrap();
        let mut a2 = a.clone();
        a2[wseg.offset + d_in + 1] += 1.0; // unit 1
        let w2 = d.from_coefficients(&a2).unwrap();
        for i in 0..layout.len() {
            let in_unit1 = (wseg.offset + d_in..wseg.offset + 2 * d_in).contains(&i);
            if !in_unit1 {
                assert_eq!(w[i].to_bits(), w2[i].to_bits(), "index {i}");
            }
        }
        // misaligned cut
        let bad = vec![(0..1, BlockSpec::Identity), (1..layout.len(), BlockSpec::Identity)];
        assert!(make_block_diagonal(layout, bad).is_err());
        let gap = vec![(0..wseg.range().end, BlockSpec::Identity)];
        assert!(make_block_diagonal(layout, gap).is_err());
    }

    #[test]
    fn bottleneck_identity_is_identity_map() {
        let net = small_net();
        let d = make_bottleneck(&net, 1, BasisKind::Identity).unwrap();
        let w = rvec(net.param_count(), 7);
        assert_eq!(d.to_coefficients(&w).unwrap(), w);
        assert!(make_bottleneck(&net, 2, BasisKind::Identity).is_err());
        assert!(make_bottleneck(&net, 0, BasisKind::Identity).is_err());
    }

    #[test]
    fn bottleneck_big_block_repeats_shared_basis() {
        let net = Network::new(NetworkSpec::mlp(InputShape::new(1, 4, 1), &[3], 2)).unwrap();
        let d = make_bottleneck(&net, 1, BasisKind::Random { seed: 2 }).unwrap();
        let b = d.bottleneck().unwrap();
        let u = b.u.materialize();
        let m = d.materialize().unwrap();
        assert!(linalg::verify_orthonormal(&m, 1e-10));
        let off = b.weight_offset;
        for r in 0..12 {
            for c in 0..12 {
                let want = if r / 4 == c / 4 { u.get(r % 4, c % 4) } else { 0.0 };
                assert_eq!(m.get(off + r, off + c), want);
            }
        }
        for i in 12..net.param_count() {
            assert_eq!(m.get(i, i), 1.0);
        }
    }

    #[test]
    fn bottleneck_dct_on_cifar_mlp() {
        let net = Network::new(NetworkSpec::mlp(InputShape::new(32, 32, 3), &[300, 100], 10)).unwrap();
        let d = make_bottleneck(&net, 1, BasisKind::Dct).unwrap();
        let b = d.bottleneck().unwrap();
        assert_eq!(b.u.dim(), 3072);
        assert_eq!((b.d_in, b.d_out), (3072, 300));
        // block-diagonal per channel: column in channel 1 vanishes on channels 0 and 2
        let col = b.u.column(1024 + 37);
        assert!(col[..1024].iter().chain(&col[2048..]).all(|&v| v == 0.0));
        assert!(col[1024..2048].iter().any(|&v| v != 0.0));
        // non-square channels are rejected
        let rect = Network::new(NetworkSpec::mlp(InputShape::new(2, 3, 1), &[3], 2)).unwrap();
        assert!(make_bottleneck(&rect, 1, BasisKind::Dct).is_err());
        // dense layer that reads another dense layer has no image geometry
        assert!(make_bottleneck(&net, 3, BasisKind::Dct).is_err());
    }

    #[test]
    fn per_layer_random_respects_block_cap() {
        let net = Network::new(NetworkSpec::mlp(InputShape::new(1, 10, 1), &[6], 3)).unwrap();
        let d = Dictionary::per_layer_random(net.layout(), 1, 25).unwrap();
        let DictionaryKind::BlockDiagonal(blocks) = d.kind() else { panic!() };
        let mut next = 0;
        for b in blocks {
            assert_eq!(b.range.start, next);
            assert!(b.range.len() <= 25);
            next = b.range.end;
        }
        assert_eq!(next, net.param_count());
        assert!(linalg::verify_orthonormal(&d.materialize().unwrap(), 1e-10));
    }

    #[test]
    fn factorize_identity_zeroes_pruned_rows() {
        let net = Network::new(NetworkSpec::mlp(InputShape::new(1, 5, 1), &[3], 2)).unwrap();
        let d = make_bottleneck(&net, 1, BasisKind::Identity).unwrap();
        let b = d.bottleneck().unwrap().clone();
        let w = rvec(net.param_count(), 8);
        let active = b.active_from_groups(d.dim(), &[1, 3]).unwrap();
        let f = factorize(&d, &active, &w).unwrap();
        assert_eq!(f.m(), 2);
        let wm = f.reconstruct();
        for i in 0..5 {
            let zero_row = (0..3).all(|k| wm.get(i, k) == 0.0);
            assert_eq!(zero_row, i != 1 && i != 3);
        }
        // partially active group
        let mut bad = active.indices().to_vec();
        bad.push(b.weight_offset);
        let bad = ActiveSet::from_indices(d.dim(), bad).unwrap();
        assert!(matches!(factorize(&d, &bad, &w), Err(Error::InvalidState(_))));
    }

    #[test]
    fn factorize_matches_dense_projection_oracle() {
        let net = Network::new(NetworkSpec::mlp(InputShape::new(1, 6, 1), &[4], 2)).unwrap();
        let d = make_bottleneck(&net, 1, BasisKind::Random { seed: 4 }).unwrap();
        let b = d.bottleneck().unwrap().clone();
        let w = rvec(net.param_count(), 9);
        // oracle: materialized V, mask coefficients, rebuild
        let v = d.materialize().unwrap();
        let active = b.active_from_groups(d.dim(), &[0, 4]).unwrap();
        let mut a = linalg::matvec_transpose(&v, &w).unwrap();
        active.mask_coefficients(&mut a);
        let projected = linalg::matvec(&v, &a).unwrap();
        let f = factorize(&d, &active, &w).unwrap();
        let wm = f.reconstruct();
        for k in 0..4 {
            for i in 0..6 {
                assert!((wm.get(i, k) - projected[b.weight_offset + k * 6 + i]).abs() <= 1e-6);
            }
        }
        // full rank case reproduces the layer
        let full = factorize(&d, &ActiveSet::full(d.dim()), &w).unwrap();
        let wm = full.reconstruct();
        for k in 0..4 {
            for i in 0..6 {
                assert!((wm.get(i, k) - w[b.weight_offset + k * 6 + i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn active_set_text_round_trip_and_errors() {
        let s = ActiveSet::from_indices(10, [7, 1, 3]).unwrap();
        assert_eq!(s.to_text(), "dim=10\n1\n3\n7\n");
        assert_eq!(ActiveSet::from_text(&s.to_text()).unwrap(), s);
        assert!(ActiveSet::from_text("dims=3\n").is_err());
        assert!(ActiveSet::from_text("dim=3\n2\n1\n").is_err());
        assert!(ActiveSet::from_text("dim=3\n3\n").is_err());
        assert!(ActiveSet::from_indices(3, [3]).is_err());
        assert_eq!(s.count_in(2..8), 2);
    }

    fn all_kinds() -> Vec<Dictionary> {
        let net = Network::new(NetworkSpec::mlp(InputShape::new(2, 2, 2), &[5], 3)).unwrap();
        let layout = net.layout();
        vec![
            Dictionary::canonical(net.param_count()),
            Dictionary::global_random(net.param_count(), 1).unwrap(),
            Dictionary::per_layer_random(layout, 2, 16).unwrap(),
            make_bottleneck(&net, 1, BasisKind::Identity).unwrap(),
            make_bottleneck(&net, 1, BasisKind::Dct).unwrap(),
            make_bottleneck(&net, 1, BasisKind::Random { seed: 3 }).unwrap(),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_and_isometry(seed in any::<u64>()) {
            for d in all_kinds() {
                let w = rvec(d.dim(), seed);
                let a = d.to_coefficients(&w).unwrap();
                let back = d.from_coefficients(&a).unwrap();
                for (x, y) in w.iter().zip(&back) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
                prop_assert!((linalg::norm_sq(&a).sqrt() - linalg::norm_sq(&w).sqrt()).abs() <= 1e-6);
            }
        }
    }
}
