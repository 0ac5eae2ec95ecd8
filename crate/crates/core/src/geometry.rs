//! Convolution index arithmetic.
//!
//! A convolution reads, for output position `q` and filter position `p`, the
//! input position
//!
//! ```text
//! f_q(p)_d = s * q_d - h * (p_d - ceil(P_d / 2))
//! ```
//!
//! per spatial dimension `d`, with stride `s` and dilation `h`. Positions are
//! 1-based in the public API. Under [`Padding::Same`] lookups outside the input
//! hit zero padding; under [`Padding::Valid`] the map is shifted so that every
//! output position reads only in-bounds inputs.
//!
//! Internally everything is flattened row-major with 0-based indices, and a
//! [`TapTable`] caches the lookups for every `(q, p)`.

use crate::error::{Error, Result};

/// Spatial size of a `D`-dimensional tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Extent(Vec<usize>);

impl Extent {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Geometry("extent must have at least one dimension".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("extent {dims:?} has a zero dimension")));
        }
        Ok(Extent(dims))
    }

    /// The all-ones extent of rank `rank`.
    pub fn unit(rank: usize) -> Self {
        Extent(vec![1; rank.max(1)])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Number of positions, `|F|`.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flat index of 0-based coordinates.
    pub fn flat(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.rank());
        coords
            .iter()
            .zip(&self.0)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    /// Flat index of signed 0-based coordinates, or `None` when outside.
    pub fn flat_signed(&self, coords: &[i64]) -> Option<usize> {
        let mut acc = 0usize;
        for (&c, &d) in coords.iter().zip(&self.0) {
            if c < 0 || c as usize >= d {
                return None;
            }
            acc = acc * d + c as usize;
        }
        Some(acc)
    }

    /// 0-based coordinates of a flat index.
    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.rank()];
        for (slot, &d) in out.iter_mut().zip(&self.0).rev() {
            *slot = flat % d;
            flat /= d;
        }
        out
    }

    /// Coordinates of every position, in flat order.
    pub fn all_coords(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|i| self.coords(i)).collect()
    }

    /// Flat index of `flat - delta` (coordinate-wise), if it stays inside.
    pub fn shifted(&self, flat: usize, delta: &[i64]) -> Option<usize> {
        let c = self.coords(flat);
        let moved: Vec<i64> = c.iter().zip(delta).map(|(&a, &b)| a as i64 - b).collect();
        self.flat_signed(&moved)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding; the output has `ceil(F / s)` positions per dimension.
    Same,
    /// No padding; the output only covers fully in-bounds patches.
    Valid,
}

/// Result of a single patch lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchIndex {
    /// 1-based input position.
    Inside(Vec<usize>),
    Padding,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    patch: Extent,
    stride: usize,
    dilation: usize,
    input: Extent,
    padding: Padding,
}

impl ConvGeometry {
    pub fn new(
        patch: Extent,
        stride: usize,
        dilation: usize,
        input: Extent,
        padding: Padding,
    ) -> Result<Self> {
        if patch.rank() != input.rank() {
            return Err(Error::Geometry(format!(
                "patch rank {} does not match input rank {}",
                patch.rank(),
                input.rank()
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Geometry("stride and dilation must be positive".into()));
        }
        let geom = ConvGeometry {
            patch,
            stride,
            dilation,
            input,
            padding,
        };
        geom.output_extent()?;
        Ok(geom)
    }

    /// Stride-1, `Same`-padded convolution with square patch `size` in every
    /// dimension.
    pub fn same(input: Extent, size: usize, stride: usize) -> Result<Self> {
        let patch = Extent::new(vec![size; input.rank()])?;
        Self::new(patch, stride, 1, input, Padding::Same)
    }

    /// A filter spanning the whole input, producing a single output position.
    pub fn collapse(input: Extent) -> Self {
        ConvGeometry {
            patch: input.clone(),
            stride: 1,
            dilation: 1,
            input,
            padding: Padding::Valid,
        }
    }

    /// Non-overlapping windows, stride equal to the window.
    pub fn pooling(input: Extent, window: &Extent) -> Result<Self> {
        if window.rank() != input.rank() {
            return Err(Error::Geometry("window rank does not match input".into()));
        }
        if window.dims().iter().any(|&w| w != window.dims()[0]) {
            return Err(Error::Geometry(
                "pooling windows must be equal in every dimension".into(),
            ));
        }
        if input.dims().iter().zip(window.dims()).any(|(f, w)| f % w != 0) {
            return Err(Error::Geometry(format!(
                "window {:?} does not divide extent {:?}",
                window.dims(),
                input.dims()
            )));
        }
        Self::new(window.clone(), window.dims()[0], 1, input, Padding::Valid)
    }

    pub fn patch(&self) -> &Extent {
        &self.patch
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn input_extent(&self) -> &Extent {
        &self.input
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn rank(&self) -> usize {
        self.input.rank()
    }

    pub fn output_extent(&self) -> Result<Extent> {
        let s = self.stride as i64;
        let h = self.dilation as i64;
        let dims = self
            .input
            .dims()
            .iter()
            .zip(self.patch.dims())
            .map(|(&f, &p)| {
                let (f, p) = (f as i64, p as i64);
                match self.padding {
                    Padding::Same => (f + s - 1) / s,
                    Padding::Valid => {
                        let span = f - h * (p - 1) - 1;
                        if span < 0 {
                            0
                        } else {
                            span / s + 1
                        }
                    }
                }
            })
            .collect::<Vec<_>>();
        if dims.iter().any(|&d| d <= 0) {
            return Err(Error::Geometry(format!(
                "non-positive output extent {dims:?} for input {:?}, patch {:?}",
                self.input.dims(),
                self.patch.dims()
            )));
        }
        Extent::new(dims.into_iter().map(|d| d as usize).collect::<Vec<_>>())
    }

    /// Offset added under `Valid` so that output position 1 reads from input
    /// position 1 at the far end of the patch.
    fn shift(&self, d: usize) -> i64 {
        match self.padding {
            Padding::Same => 0,
            Padding::Valid => {
                let p = self.patch.dims()[d] as i64;
                1 - self.stride as i64 + self.dilation as i64 * (p - (p + 1) / 2)
            }
        }
    }

    /// 1-based coordinate read along dimension `d`; may fall outside the input.
    fn raw_coordinate(&self, d: usize, q: i64, p: i64) -> i64 {
        let half = (self.patch.dims()[d] as i64 + 1) / 2;
        self.stride as i64 * q - self.dilation as i64 * (p - half) + self.shift(d)
    }

    /// The patch function, 1-based. `q` ranges over the output extent and `p`
    /// over the patch.
    pub fn patch_index(&self, q: &[usize], p: &[usize]) -> Result<PatchIndex> {
        let out = self.output_extent()?;
        if q.len() != self.rank() || p.len() != self.rank() {
            return Err(Error::Shape("index rank does not match geometry".into()));
        }
        for d in 0..self.rank() {
            if q[d] == 0 || q[d] > out.dims()[d] || p[d] == 0 || p[d] > self.patch.dims()[d] {
                return Err(Error::Shape(format!(
                    "index q={q:?}, p={p:?} out of range for output {:?} and patch {:?}",
                    out.dims(),
                    self.patch.dims()
                )));
            }
        }
        let coords: Vec<i64> = (0..self.rank())
            .map(|d| self.raw_coordinate(d, q[d] as i64, p[d] as i64))
            .collect();
        let inside = coords
            .iter()
            .zip(self.input.dims())
            .all(|(&c, &f)| c >= 1 && c <= f as i64);
        if inside {
            Ok(PatchIndex::Inside(coords.iter().map(|&c| c as usize).collect()))
        } else if self.padding == Padding::Valid {
            Err(Error::ValidOutOfRange {
                index: coords,
                extent: self.input.dims().to_vec(),
            })
        } else {
            Ok(PatchIndex::Padding)
        }
    }

    /// Precomputes every lookup of the patch function.
    pub fn taps(&self) -> Result<TapTable> {
        let out = self.output_extent()?;
        let n_out = out.len();
        let n_patch = self.patch.len();
        let patch_coords = self.patch.all_coords();
        let mut idx = vec![TapTable::PADDING; n_out * n_patch];
        let mut coords = vec![0i64; self.rank()];
        for q in 0..n_out {
            let qc = out.coords(q);
            for (p, pc) in patch_coords.iter().enumerate() {
                for d in 0..self.rank() {
                    coords[d] = self.raw_coordinate(d, qc[d] as i64 + 1, pc[d] as i64 + 1) - 1;
                }
                match self.input.flat_signed(&coords) {
                    Some(i) => idx[q * n_patch + p] = i,
                    None if self.padding == Padding::Valid => {
                        return Err(Error::ValidOutOfRange {
                            index: coords.iter().map(|c| c + 1).collect(),
                            extent: self.input.dims().to_vec(),
                        })
                    }
                    None => {}
                }
            }
        }
        Ok(TapTable {
            n_out,
            n_patch,
            idx,
        })
    }
}

/// Dense table of flattened patch lookups: `get(q, p)` is the 0-based flat
/// input index read by output `q` at filter position `p`, or `None` for a
/// padded read.
#[derive(Debug, Clone)]
pub struct TapTable {
    n_out: usize,
    n_patch: usize,
    idx: Vec<usize>,
}

impl TapTable {
    const PADDING: usize = usize::MAX;

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_patch(&self) -> usize {
        self.n_patch
    }

    pub fn get(&self, q: usize, p: usize) -> Option<usize> {
        let i = self.idx[q * self.n_patch + p];
        (i != Self::PADDING).then_some(i)
    }

    /// In-bounds `(p, input)` pairs for output `q`, in patch order.
    pub fn valid(&self, q: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.idx[q * self.n_patch..(q + 1) * self.n_patch]
            .iter()
            .enumerate()
            .filter(|(_, &i)| i != Self::PADDING)
            .map(|(p, &i)| (p, i))
    }

    pub(crate) fn row(&self, q: usize) -> &[usize] {
        &self.idx[q * self.n_patch..(q + 1) * self.n_patch]
    }

    pub(crate) fn is_padding(i: usize) -> bool {
        i == Self::PADDING
    }
}
