//! Second-moment tensors over pairs of spatial positions.
//!
//! For an input pair `(X, X')` the kernel recursion carries the tensor
//! `S[q, q'] = E[a_q(X) a_q'(X')]` for every layer. It is stored either in full
//! (`|F|^2` entries) or as a band of diagonals `S[q, q - delta]` for a fixed set
//! of offsets, which is all that layers with independent weights ever read.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::Extent;
use crate::image::Image;

/// Signed coordinate difference `q - q'` between two positions.
pub type Offset = Vec<i64>;

pub fn zero_offset(rank: usize) -> Offset {
    vec![0; rank]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Representation {
    Full,
    /// Sorted, deduplicated offsets.
    Band(Vec<Offset>),
}

impl Representation {
    pub fn band(mut offsets: Vec<Offset>) -> Self {
        offsets.sort();
        offsets.dedup();
        Representation::Band(offsets)
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Representation::Full)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    /// Row-major `|F| x |F|`.
    Full(Vec<f64>),
    /// `values[k][q] = S[q, q - offsets[k]]`, zero where `q - offsets[k]`
    /// leaves the extent.
    Band {
        offsets: Vec<Offset>,
        slots: HashMap<Offset, usize>,
        values: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    extent: Extent,
    storage: Storage,
}

impl SecondMoment {
    pub fn full(extent: Extent, values: Vec<f64>) -> Result<Self> {
        let n = extent.len();
        if values.len() != n * n {
            return Err(Error::Shape(format!(
                "full moment over {n} positions needs {} entries, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(SecondMoment {
            extent,
            storage: Storage::Full(values),
        })
    }

    pub fn band(extent: Extent, offsets: Vec<Offset>, values: Vec<Vec<f64>>) -> Result<Self> {
        if offsets.len() != values.len() {
            return Err(Error::Shape("one value row per offset required".into()));
        }
        if let Some(bad) = offsets.iter().find(|o| o.len() != extent.rank()) {
            return Err(Error::Shape(format!("offset {bad:?} has the wrong rank")));
        }
        if values.iter().any(|v| v.len() != extent.len()) {
            return Err(Error::Shape("band rows must cover the extent".into()));
        }
        let slots = offsets
            .iter()
            .enumerate()
            .map(|(k, o)| (o.clone(), k))
            .collect();
        Ok(SecondMoment {
            extent,
            storage: Storage::Band {
                offsets,
                slots,
                values,
            },
        })
    }

    pub fn extent(&self) -> &Extent {
        &self.extent
    }

    pub fn representation(&self) -> Representation {
        match &self.storage {
            Storage::Full(_) => Representation::Full,
            Storage::Band { offsets, .. } => Representation::Band(offsets.clone()),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self.storage, Storage::Full(_))
    }

    /// Number of stored floats.
    pub fn stored_entries(&self) -> usize {
        match &self.storage {
            Storage::Full(v) => v.len(),
            Storage::Band { values, .. } => values.iter().map(Vec::len).sum(),
        }
    }

    pub fn as_full(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::Full(v) => Some(v),
            Storage::Band { .. } => None,
        }
    }

    pub fn offsets(&self) -> Option<&[Offset]> {
        match &self.storage {
            Storage::Full(_) => None,
            Storage::Band { offsets, .. } => Some(offsets),
        }
    }

    /// Band row for `offset`, indexed by the first position.
    pub fn band_row(&self, offset: &[i64]) -> Option<&[f64]> {
        match &self.storage {
            Storage::Full(_) => None,
            Storage::Band { slots, values, .. } => slots.get(offset).map(|&k| values[k].as_slice()),
        }
    }

    /// Entry `S[q, q2]` (flat, 0-based), or `None` when not stored.
    pub fn get(&self, q: usize, q2: usize) -> Option<f64> {
        let n = self.extent.len();
        match &self.storage {
            Storage::Full(v) => Some(v[q * n + q2]),
            Storage::Band { slots, values, .. } => {
                let a = self.extent.coords(q);
                let b = self.extent.coords(q2);
                let delta: Offset = a.iter().zip(&b).map(|(&x, &y)| x as i64 - y as i64).collect();
                slots.get(&delta).map(|&k| values[k][q])
            }
        }
    }

    /// `S[q, q]` for every position.
    pub fn diagonal(&self) -> Result<Vec<f64>> {
        let n = self.extent.len();
        match &self.storage {
            Storage::Full(v) => Ok((0..n).map(|q| v[q * n + q]).collect()),
            Storage::Band { .. } => {
                let zero = zero_offset(self.extent.rank());
                self.band_row(&zero)
                    .map(<[f64]>::to_vec)
                    .ok_or(Error::MissingOffset(zero))
            }
        }
    }

    /// The single entry of a moment over a one-position extent.
    pub fn scalar(&self) -> Result<f64> {
        if self.extent.len() != 1 {
            return Err(Error::Shape(format!(
                "moment over {:?} is not a scalar",
                self.extent.dims()
            )));
        }
        self.get(0, 0)
            .ok_or_else(|| Error::MissingOffset(zero_offset(self.extent.rank())))
    }

    /// Restricts to the given diagonals.
    pub fn to_band(&self, offsets: &[Offset]) -> Result<SecondMoment> {
        let partners = offsets
            .iter()
            .map(|o| partner_table(&self.extent, o))
            .collect::<Vec<_>>();
        let n = self.extent.len();
        let values = match &self.storage {
            Storage::Full(v) => partners
                .iter()
                .map(|table| {
                    table
                        .iter()
                        .enumerate()
                        .map(|(q, q2)| q2.map_or(0.0, |q2| v[q * n + q2]))
                        .collect()
                })
                .collect(),
            Storage::Band { .. } => offsets
                .iter()
                .map(|o| {
                    self.band_row(o)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::MissingOffset(o.clone()))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        SecondMoment::band(self.extent.clone(), offsets.to_vec(), values)
    }

    /// Converts to the requested representation.
    pub fn to_representation(&self, repr: &Representation) -> Result<SecondMoment> {
        match (repr, &self.storage) {
            (Representation::Full, Storage::Full(_)) => Ok(self.clone()),
            (Representation::Full, Storage::Band { .. }) => Err(Error::Shape(
                "cannot widen a banded moment to a full one".into(),
            )),
            (Representation::Band(offsets), _) => {
                if self.offsets() == Some(offsets.as_slice()) {
                    Ok(self.clone())
                } else {
                    self.to_band(offsets)
                }
            }
        }
    }
}

/// For each position `q`, the flat index of `q - offset` if it is inside.
pub(crate) fn partner_table(extent: &Extent, offset: &[i64]) -> Vec<Option<usize>> {
    (0..extent.len()).map(|q| extent.shifted(q, offset)).collect()
}

/// A cross moment together with the variances `S_qq(X, X)` and
/// `S_qq(X', X')` needed by the nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMomentPair {
    pub cross: SecondMoment,
    pub self_x: Vec<f64>,
    pub self_x2: Vec<f64>,
}

impl SecondMomentPair {
    pub fn new(cross: SecondMoment, self_x: Vec<f64>, self_x2: Vec<f64>) -> Result<Self> {
        let n = cross.extent().len();
        if self_x.len() != n || self_x2.len() != n {
            return Err(Error::Shape("self variances must cover the extent".into()));
        }
        Ok(SecondMomentPair {
            cross,
            self_x,
            self_x2,
        })
    }

    /// Checks non-negative variances and `|S[q, q']| <= sqrt(S_x[q] S_x2[q'])`
    /// up to `slack`. Returns the first violating position pair.
    pub fn check_invariants(&self, slack: f64) -> std::result::Result<(), (usize, usize)> {
        let n = self.cross.extent().len();
        for q in 0..n {
            if self.self_x[q] < 0.0 || self.self_x2[q] < 0.0 {
                return Err((q, q));
            }
        }
        for q in 0..n {
            for q2 in 0..n {
                if let Some(c) = self.cross.get(q, q2) {
                    if c.abs() > (self.self_x[q] * self.self_x2[q2]).sqrt() + slack {
                        return Err((q, q2));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Inner products of the inputs over channels, scaled by `1 / C`:
/// `S[q, q'] = (1 / C) sum_c x[c, q] x2[c, q']`.
pub fn input_moment(x: &Image, x2: &Image, repr: &Representation) -> Result<SecondMoment> {
    if !x.same_shape(x2) {
        return Err(Error::Shape(format!(
            "input shapes differ: {} x {:?} vs {} x {:?}",
            x.channels(),
            x.extent().dims(),
            x2.channels(),
            x2.extent().dims()
        )));
    }
    let extent = x.extent().clone();
    let n = extent.len();
    let scale = 1.0 / x.channels() as f64;
    match repr {
        Representation::Full => {
            let mut v = vec![0.0; n * n];
            for c in 0..x.channels() {
                let a = x.channel(c);
                let b = x2.channel(c);
                for q in 0..n {
                    let aq = a[q];
                    for (slot, &bq) in v[q * n..(q + 1) * n].iter_mut().zip(b) {
                        *slot += aq * bq;
                    }
                }
            }
            v.iter_mut().for_each(|e| *e *= scale);
            SecondMoment::full(extent, v)
        }
        Representation::Band(offsets) => {
            let values = offsets
                .iter()
                .map(|o| {
                    partner_table(&extent, o)
                        .iter()
                        .enumerate()
                        .map(|(q, q2)| match q2 {
                            Some(q2) => {
                                scale
                                    * (0..x.channels())
                                        .map(|c| x.get(c, q) * x2.get(c, *q2))
                                        .sum::<f64>()
                            }
                            None => 0.0,
                        })
                        .collect()
                })
                .collect();
            SecondMoment::band(extent, offsets.clone(), values)
        }
    }
}

/// Full cross moment plus self variances for an input pair.
pub fn input_moment_pair(x: &Image, x2: &Image) -> Result<SecondMomentPair> {
    let cross = input_moment(x, x2, &Representation::Full)?;
    let diag = |im: &Image| -> Vec<f64> {
        let scale = 1.0 / im.channels() as f64;
        (0..im.extent().len())
            .map(|q| scale * (0..im.channels()).map(|c| im.get(c, q).powi(2)).sum::<f64>())
            .collect()
    };
    SecondMomentPair::new(cross, diag(x), diag(x2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ext(d: &[usize]) -> Extent {
        Extent::new(d.to_vec()).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, c: usize, e: &Extent) -> Image {
        Image::new(c, e.clone(), (0..c * e.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn all_ones_input() {
        let e = ext(&[2, 2]);
        let x = Image::new(1, e.clone(), vec![1.0; 4]).unwrap();
        let m = input_moment(&x, &x, &Representation::Full).unwrap();
        assert!(m.as_full().unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn orthogonal_channels_give_zero() {
        let e = ext(&[3]);
        let x = Image::new(2, e.clone(), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let x2 = Image::new(2, e, vec![0.0, 0.0, 0.0, 4.0, 5.0, 6.0]).unwrap();
        let m = input_moment(&x, &x2, &Representation::Full).unwrap();
        assert!(m.as_full().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = ext(&[3, 4]);
        let x = random_image(&mut rng, 3, &e);
        let x2 = random_image(&mut rng, 3, &e);
        let m = input_moment(&x, &x2, &Representation::Full).unwrap();
        let n = e.len();
        for q in 0..n {
            for q2 in 0..n {
                let mut s = 0.0;
                for c in 0..3 {
                    s += x.data()[c * n + q] * x2.data()[c * n + q2];
                }
                assert!((m.get(q, q2).unwrap() - s / 3.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn band_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = ext(&[4, 3]);
        let x = random_image(&mut rng, 2, &e);
        let x2 = random_image(&mut rng, 2, &e);
        let offsets = vec![vec![0, 0], vec![1, -1], vec![-2, 0]];
        let full = input_moment(&x, &x2, &Representation::Full).unwrap();
        let band = input_moment(&x, &x2, &Representation::band(offsets.clone())).unwrap();
        assert_eq!(full.to_band(band.offsets().unwrap()).unwrap(), band);
        assert_eq!(band.stored_entries(), 3 * 12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Image::zeros(1, ext(&[3]));
        let x2 = Image::zeros(2, ext(&[3]));
        assert!(matches!(
            input_moment(&x, &x2, &Representation::Full),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pair_satisfies_cauchy_schwarz() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = ext(&[5]);
        let pair = input_moment_pair(&random_image(&mut rng, 3, &e), &random_image(&mut rng, 3, &e)).unwrap();
        assert!(pair.check_invariants(1e-12).is_ok());
    }
}
