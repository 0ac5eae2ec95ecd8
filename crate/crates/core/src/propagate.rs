//! One step of the kernel recursion per layer type.
//!
//! A convolution with weight covariance `W` maps a moment `V` to
//!
//! ```text
//! S'[q, q'] = sum_{p, p'} W[p, p'] V[f_q(p), f_q'(p')]
//! ```
//!
//! with padded reads contributing zero. When `W` is diagonal both reads move
//! together, `f_q(p) - f_q'(p) = s (q - q')`, so output diagonal `delta` only
//! touches input diagonal `s * delta`; [`conv_propagate_diag`] exploits that.

use rayon::prelude::*;

use crate::covariance::WeightCovariance;
use crate::error::{Error, Result};
use crate::geometry::{ConvGeometry, Extent, TapTable};
use crate::moment::{partner_table, Offset, SecondMoment, SecondMomentPair};
use crate::relu::relu_expectation;

fn check_conv_inputs(v: &SecondMoment, cov: &WeightCovariance, geom: &ConvGeometry) -> Result<()> {
    if v.extent() != geom.input_extent() {
        return Err(Error::Shape(format!(
            "moment extent {:?} does not match convolution input {:?}",
            v.extent().dims(),
            geom.input_extent().dims()
        )));
    }
    if cov.patch() != geom.patch() {
        return Err(Error::Shape(format!(
            "covariance patch {:?} does not match convolution patch {:?}",
            cov.patch().dims(),
            geom.patch().dims()
        )));
    }
    Ok(())
}

/// Convolution step on a full moment. Output is full.
pub fn conv_propagate(
    v: &SecondMoment,
    cov: &WeightCovariance,
    geom: &ConvGeometry,
) -> Result<SecondMoment> {
    let taps = geom.taps()?;
    conv_propagate_with_taps(v, cov, geom, &taps)
}

pub(crate) fn conv_propagate_with_taps(
    v: &SecondMoment,
    cov: &WeightCovariance,
    geom: &ConvGeometry,
    taps: &TapTable,
) -> Result<SecondMoment> {
    check_conv_inputs(v, cov, geom)?;
    let input = v
        .as_full()
        .ok_or_else(|| Error::Shape("conv_propagate needs a full moment".into()))?;
    let n_in = geom.input_extent().len();
    let n_out = taps.n_out();
    let n_patch = taps.n_patch();
    let mut out = vec![0.0; n_out * n_out];
    let w = cov.entries();

    if cov.is_diagonal() {
        let diag = cov.diagonal();
        // For each patch position, the (output, input) pairs it reads. Rows
        // of the input are then streamed once per tap.
        let columns: Vec<Vec<(usize, usize)>> = (0..n_patch)
            .map(|p| (0..n_out).filter_map(|q| taps.get(q, p).map(|i| (q, i))).collect())
            .collect();
        out.par_chunks_mut(n_out).enumerate().for_each(|(q, row)| {
            for (p, &i) in taps.row(q).iter().enumerate() {
                if TapTable::is_padding(i) || diag[p] == 0.0 {
                    continue;
                }
                let (d, vrow) = (diag[p], &input[i * n_in..(i + 1) * n_in]);
                for &(q2, j) in &columns[p] {
                    row[q2] += d * vrow[j];
                }
            }
        });
    } else {
        let valid: Vec<Vec<(usize, usize)>> = (0..n_out).map(|q| taps.valid(q).collect()).collect();
        out.par_chunks_mut(n_out).enumerate().for_each(|(q, row)| {
            for (q2, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &(p, i) in &valid[q] {
                    let wrow = &w[p * n_patch..(p + 1) * n_patch];
                    let vrow = &input[i * n_in..(i + 1) * n_in];
                    for &(p2, j) in &valid[q2] {
                        acc += wrow[p2] * vrow[j];
                    }
                }
                *slot = acc;
            }
        });
    }
    SecondMoment::full(geom.output_extent()?, out)
}

/// Convolution step for a diagonal covariance, computing only the output
/// diagonals in `needed`. Reads input diagonal `stride * delta` for each
/// needed `delta`; the input may be banded or full.
pub fn conv_propagate_diag(
    v: &SecondMoment,
    cov: &WeightCovariance,
    geom: &ConvGeometry,
    needed: &[Offset],
) -> Result<SecondMoment> {
    let taps = geom.taps()?;
    conv_propagate_diag_with_taps(v, cov, geom, needed, &taps)
}

pub(crate) fn conv_propagate_diag_with_taps(
    v: &SecondMoment,
    cov: &WeightCovariance,
    geom: &ConvGeometry,
    needed: &[Offset],
    taps: &TapTable,
) -> Result<SecondMoment> {
    check_conv_inputs(v, cov, geom)?;
    if !cov.is_diagonal() {
        return Err(Error::NotDiagonal);
    }
    let out_extent = geom.output_extent()?;
    if let Some(bad) = needed.iter().find(|o| o.len() != out_extent.rank()) {
        return Err(Error::Shape(format!("offset {bad:?} has the wrong rank")));
    }
    let diag = cov.diagonal();
    let n_in = geom.input_extent().len();
    let n_out = out_extent.len();
    let n_patch = taps.n_patch();
    let stride = geom.stride() as i64;

    let values = needed
        .iter()
        .map(|delta| {
            let input_offset: Offset = delta.iter().map(|d| d * stride).collect();
            // Entry `i` of the source row holds V[i, i - stride * delta].
            let source: Vec<f64> = match v.as_full() {
                Some(full) => partner_table(v.extent(), &input_offset)
                    .iter()
                    .enumerate()
                    .map(|(i, j)| j.map_or(0.0, |j| full[i * n_in + j]))
                    .collect(),
                None => v
                    .band_row(&input_offset)
                    .ok_or_else(|| Error::MissingOffset(input_offset.clone()))?
                    .to_vec(),
            };
            let partners = partner_table(&out_extent, delta);
            let row: Vec<f64> = (0..n_out)
                .map(|q| {
                    let Some(q2) = partners[q] else { return 0.0 };
                    let a = taps.row(q);
                    let b = taps.row(q2);
                    let mut acc = 0.0;
                    for p in 0..n_patch {
                        if !TapTable::is_padding(a[p]) && !TapTable::is_padding(b[p]) {
                            acc += diag[p] * source[a[p]];
                        }
                    }
                    acc
                })
                .collect();
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    SecondMoment::band(out_extent, needed.to_vec(), values)
}

/// Elementwise balanced-ReLU expectation:
/// `V[q, q'] = F(S_x[q], S_x2[q'], S[q, q'])`.
pub fn relu_moment(pair: &SecondMomentPair) -> Result<SecondMoment> {
    let extent = pair.cross.extent().clone();
    let n = extent.len();
    let (sx, sx2) = (&pair.self_x, &pair.self_x2);
    if let Some(full) = pair.cross.as_full() {
        let mut out = vec![0.0; n * n];
        out.par_chunks_mut(n).enumerate().for_each(|(q, row)| {
            for (q2, slot) in row.iter_mut().enumerate() {
                *slot = relu_expectation(sx[q], sx2[q2], full[q * n + q2]);
            }
        });
        return SecondMoment::full(extent, out);
    }
    let offsets = pair.cross.offsets().expect("banded moment").to_vec();
    let values = offsets
        .iter()
        .map(|o| {
            let row = pair.cross.band_row(o).expect("stored offset");
            partner_table(&extent, o)
                .iter()
                .enumerate()
                .map(|(q, q2)| q2.map_or(0.0, |q2| relu_expectation(sx[q], sx2[q2], row[q])))
                .collect()
        })
        .collect();
    SecondMoment::band(extent, offsets, values)
}

/// Deterministic average pooling over non-overlapping windows:
/// `S'[q, q'] = |w|^-2 sum_{p in win(q), p' in win(q')} S[p, p']`.
pub fn meanpool_propagate(v: &SecondMoment, window: &Extent) -> Result<SecondMoment> {
    let extent = v.extent();
    if window.rank() != extent.rank() {
        return Err(Error::Shape("window rank does not match extent".into()));
    }
    if extent.dims().iter().zip(window.dims()).any(|(f, w)| f % w != 0) {
        return Err(Error::Geometry(format!(
            "window {:?} does not divide extent {:?}",
            window.dims(),
            extent.dims()
        )));
    }
    let input = v
        .as_full()
        .ok_or_else(|| Error::Shape("mean pooling needs a full moment".into()))?;
    let out_extent = Extent::new(
        extent
            .dims()
            .iter()
            .zip(window.dims())
            .map(|(f, w)| f / w)
            .collect::<Vec<_>>(),
    )?;
    let n_in = extent.len();
    let n_out = out_extent.len();
    let offsets = window.all_coords();
    let members: Vec<Vec<usize>> = (0..n_out)
        .map(|q| {
            let qc = out_extent.coords(q);
            offsets
                .iter()
                .map(|k| {
                    let c: Vec<usize> = qc
                        .iter()
                        .zip(k)
                        .zip(window.dims())
                        .map(|((&q, &k), &w)| q * w + k)
                        .collect();
                    extent.flat(&c)
                })
                .collect()
        })
        .collect();
    let norm = 1.0 / (window.len() as f64).powi(2);
    let mut out = vec![0.0; n_out * n_out];
    out.par_chunks_mut(n_out).enumerate().for_each(|(q, row)| {
        for (q2, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &i in &members[q] {
                for &j in &members[q2] {
                    acc += input[i * n_in + j];
                }
            }
            *slot = norm * acc;
        }
    });
    SecondMoment::full(out_extent, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovKind;
    use crate::geometry::{Padding, PatchIndex};
    use crate::moment::{input_moment, Representation};
    use crate::image::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ext(d: &[usize]) -> Extent {
        Extent::new(d.to_vec()).unwrap()
    }

    fn random_full(rng: &mut ChaCha8Rng, e: &Extent) -> SecondMoment {
        let n = e.len();
        SecondMoment::full(e.clone(), (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct quadruple loop over (q, q', p, p') through the public patch function.
    fn brute_force_conv(v: &SecondMoment, cov: &WeightCovariance, g: &ConvGeometry) -> Vec<f64> {
        let out = g.output_extent().unwrap();
        let ins = g.input_extent();
        let ps = g.patch().all_coords();
        let one = |c: &[usize]| c.iter().map(|x| x + 1).collect::<Vec<_>>();
        let mut res = vec![0.0; out.len() * out.len()];
        for q in 0..out.len() {
            for q2 in 0..out.len() {
                let mut acc = 0.0;
                for (pa, pc) in ps.iter().enumerate() {
                    for (pb, pc2) in ps.iter().enumerate() {
                        let a = g.patch_index(&one(&out.coords(q)), &one(pc)).unwrap();
                        let b = g.patch_index(&one(&out.coords(q2)), &one(pc2)).unwrap();
                        if let (PatchIndex::Inside(a), PatchIndex::Inside(b)) = (a, b) {
                            let zero = |c: Vec<usize>| c.iter().map(|x| x - 1).collect::<Vec<_>>();
                            let i = ins.flat(&zero(a));
                            let j = ins.flat(&zero(b));
                            acc += cov.get(pa, pb) * v.get(i, j).unwrap();
                        }
                    }
                }
                res[q * out.len() + q2] = acc;
            }
        }
        res
    }

    #[test]
    fn unit_patch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = ext(&[5]);
        let v = random_full(&mut rng, &e);
        let g = ConvGeometry::same(e.clone(), 1, 1).unwrap();
        let cov = WeightCovariance::build(CovKind::independent(), &ext(&[1])).unwrap();
        assert_eq!(conv_propagate(&v, &cov, &g).unwrap(), v);
    }

    #[test]
    fn collapse_with_ones_sums_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = ext(&[3, 2]);
        let v = random_full(&mut rng, &e);
        let g = ConvGeometry::collapse(e.clone());
        let cov = WeightCovariance::build(CovKind::MeanPool, &e).unwrap();
        let s = conv_propagate(&v, &cov, &g).unwrap().scalar().unwrap();
        let expected: f64 = v.as_full().unwrap().iter().sum();
        assert!((s - expected).abs() < 1e-13);
    }

    #[test]
    fn matern_1d_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = ext(&[5]);
        let v = random_full(&mut rng, &e);
        let g = ConvGeometry::same(e, 3, 1).unwrap();
        let cov = WeightCovariance::build(CovKind::matern32(2.0), &ext(&[3])).unwrap();
        let fast = conv_propagate(&v, &cov, &g).unwrap();
        let slow = brute_force_conv(&v, &cov, &g);
        let diff = fast.as_full().unwrap().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-13, "{diff}");
    }

    #[test]
    fn strided_dilated_2d_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = ext(&[6, 5]);
        let v = random_full(&mut rng, &e);
        for (padding, stride, dilation) in [(Padding::Same, 2, 1), (Padding::Same, 1, 2), (Padding::Valid, 2, 1)] {
            let g = ConvGeometry::new(ext(&[3, 2]), stride, dilation, e.clone(), padding).unwrap();
            for kind in [CovKind::matern32(1.5), CovKind::Independent { variance: 0.7 }] {
                let cov = WeightCovariance::build(kind, g.patch()).unwrap();
                let fast = conv_propagate(&v, &cov, &g).unwrap();
                let slow = brute_force_conv(&v, &cov, &g);
                let diff = fast.as_full().unwrap().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-13);
            }
        }
    }

    #[test]
    fn diag_unit_patch_copies_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = ext(&[4]);
        let v = random_full(&mut rng, &e);
        let g = ConvGeometry::same(e.clone(), 1, 1).unwrap();
        let cov = WeightCovariance::build(CovKind::independent(), &ext(&[1])).unwrap();
        let out = conv_propagate_diag(&v, &cov, &g, &[vec![0]]).unwrap();
        assert_eq!(out.diagonal().unwrap(), v.diagonal().unwrap());
    }

    #[test]
    fn diag_stride_two_reads_doubled_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = ext(&[8]);
        let v = random_full(&mut rng, &e);
        let g = ConvGeometry::same(e, 1, 2).unwrap();
        let cov = WeightCovariance::build(CovKind::independent(), &ext(&[1])).unwrap();
        // Only offset 2 stored: output offset 1 must succeed, output offset 0 must not.
        let band = v.to_band(&[vec![2]]).unwrap();
        let out = conv_propagate_diag(&band, &cov, &g, &[vec![1]]).unwrap();
        // Output q = 2 (1-based) reads input 4; its partner q - 1 reads input 2.
        assert_eq!(out.get(1, 0).unwrap(), v.get(3, 1).unwrap());
        assert!(matches!(
            conv_propagate_diag(&band, &cov, &g, &[vec![0]]),
            Err(Error::MissingOffset(o)) if o == vec![0]
        ));
    }

    #[test]
    fn diag_rejects_correlated_covariance() {
        let e = ext(&[4]);
        let v = SecondMoment::full(e.clone(), vec![0.0; 16]).unwrap();
        let g = ConvGeometry::same(e, 3, 1).unwrap();
        let cov = WeightCovariance::build(CovKind::matern32(1.0), &ext(&[3])).unwrap();
        assert!(matches!(conv_propagate_diag(&v, &cov, &g, &[vec![0]]), Err(Error::NotDiagonal)));
    }

    #[test]
    fn diag_band_matches_full_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = ext(&[7, 6]);
        let v = random_full(&mut rng, &e);
        let g = ConvGeometry::new(ext(&[3, 3]), 2, 1, e, Padding::Same).unwrap();
        let cov = WeightCovariance::build(CovKind::Independent { variance: 1.3 }, g.patch()).unwrap();
        let needed = vec![vec![0, 0], vec![1, 0], vec![-1, 2]];
        let input_band: Vec<Offset> = needed.iter().map(|o| o.iter().map(|d| 2 * d).collect()).collect();
        let band = conv_propagate_diag(&v.to_band(&input_band).unwrap(), &cov, &g, &needed).unwrap();
        let full = conv_propagate(&v, &cov, &g).unwrap();
        let expected = full.to_band(&needed).unwrap();
        for o in &needed {
            let diff = band.band_row(o).unwrap().iter().zip(expected.band_row(o).unwrap()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn meanpool_constant() {
        let e = ext(&[4, 4]);
        let v = SecondMoment::full(e, vec![2.5; 256]).unwrap();
        let out = meanpool_propagate(&v, &ext(&[2, 2])).unwrap();
        assert_eq!(out.extent().dims(), &[2, 2]);
        assert!(out.as_full().unwrap().iter().all(|&x| (x - 2.5).abs() < 1e-15));
    }

    #[test]
    fn meanpool_matches_scaled_ones_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = ext(&[6, 4]);
        let v = random_full(&mut rng, &e);
        let w = ext(&[2, 2]);
        let pooled = meanpool_propagate(&v, &w).unwrap();
        let g = ConvGeometry::pooling(e, &w).unwrap();
        let cov = WeightCovariance::build(CovKind::MeanPool, &w)
            .unwrap()
            .scaled(WeightCovariance::mean_pool_normalizer(&w));
        let conv = conv_propagate(&v, &cov, &g).unwrap();
        let diff = pooled.as_full().unwrap().iter().zip(conv.as_full().unwrap()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-13);
    }

    #[test]
    fn meanpool_global_window_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = ext(&[3, 3]);
        let v = random_full(&mut rng, &e);
        let s = meanpool_propagate(&v, &e).unwrap().scalar().unwrap();
        let mean = v.as_full().unwrap().iter().sum::<f64>() / 81.0;
        assert!((s - mean).abs() < 1e-15);
        assert!(meanpool_propagate(&v, &ext(&[2, 3])).is_err());
    }

    #[test]
    fn relu_keeps_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let e = ext(&[5]);
        let x = Image::new(2, e.clone(), (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s = input_moment(&x, &x, &Representation::Full).unwrap();
        let d = s.diagonal().unwrap();
        let pair = SecondMomentPair::new(s, d.clone(), d.clone()).unwrap();
        let v = relu_moment(&pair).unwrap();
        for (a, b) in v.diagonal().unwrap().iter().zip(&d) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }
}
