//! Kernel matrices over datasets.

use rayon::prelude::*;

use crate::arch::{plan_with_final, ArchitectureSpec, Layer};
use crate::covariance::{CovKind, WeightCovariance};
use crate::error::{Error, Result};
use crate::geometry::{ConvGeometry, TapTable};
use crate::image::Image;
use crate::moment::{input_moment, zero_offset, Representation, SecondMoment, SecondMomentPair};
use crate::propagate::{
    conv_propagate_diag_with_taps, conv_propagate_with_taps, meanpool_propagate, relu_moment,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GramMeta {
    pub arch_id: String,
    pub dataset_digest: u64,
    /// Lengthscale of the readout covariance, if it has one.
    pub lengthscale: Option<f64>,
}

impl GramMeta {
    pub fn new(arch_id: impl Into<String>) -> Self {
        GramMeta {
            arch_id: arch_id.into(),
            dataset_digest: 0,
            lengthscale: None,
        }
    }
}

/// Symmetric `n x n` kernel matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    entries: Vec<f64>,
    pub meta: GramMeta,
}

impl GramMatrix {
    /// Requires exact symmetry.
    pub fn new(n: usize, entries: Vec<f64>, meta: GramMeta) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Shape(format!(
                "{n} x {n} matrix needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if entries[i * n + j].to_bits() != entries[j * n + i].to_bits() {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        Ok(GramMatrix { n, entries, meta })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let m = nalgebra::DMatrix::from_row_slice(self.n, self.n, &self.entries);
        m.symmetric_eigenvalues().min()
    }

    /// `min eig >= -1e-8 * trace / n`.
    pub fn is_psd(&self) -> bool {
        self.n == 0 || self.min_eigenvalue() >= -1e-8 * self.trace() / self.n as f64
    }

    /// Principal submatrix on `indices`, in the given order.
    pub fn principal_submatrix(&self, indices: &[usize]) -> GramMatrix {
        let m = indices.len();
        let mut entries = Vec::with_capacity(m * m);
        for &i in indices {
            for &j in indices {
                entries.push(self.get(i, j));
            }
        }
        GramMatrix {
            n: m,
            entries,
            meta: self.meta.clone(),
        }
    }

    /// Rows `rows`, columns `cols`, row-major.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| cols.iter().map(move |&j| self.get(i, j)))
            .collect()
    }
}

/// Storage high-water mark over one pair pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PropagationStats {
    /// Largest number of floats held by a single moment tensor.
    pub peak_stored_entries: usize,
    pub stages: usize,
}

impl PropagationStats {
    fn record(&mut self, m: &SecondMoment) {
        self.peak_stored_entries = self.peak_stored_entries.max(m.stored_entries());
        self.stages += 1;
    }
}

/// Per-input quantities reused by every pair it takes part in.
#[derive(Debug, Clone)]
pub struct SelfTrace {
    /// `S_qq(X, X)` entering each ReLU, in layer order.
    pub relu_diagonals: Vec<Vec<f64>>,
    /// `K(X, X)` for each readout covariance.
    pub values: Vec<f64>,
}

enum Variances<'a> {
    /// Same input on both sides; read the diagonal off the moment itself.
    Own(&'a mut Vec<Vec<f64>>),
    Traces(&'a SelfTrace, &'a SelfTrace),
}

/// Evaluates the kernel of one architecture, optionally for several readout
/// covariances at once. The part of the network before the readout is run
/// once per pair and contracted with each readout.
pub struct KernelEvaluator {
    arch: ArchitectureSpec,
    plan: Vec<Representation>,
    taps: Vec<Option<TapTable>>,
    finals: Vec<WeightCovariance>,
    collapse: ConvGeometry,
    collapse_taps: TapTable,
}

impl KernelEvaluator {
    pub fn new(arch: &ArchitectureSpec) -> Result<Self> {
        Self::with_finals(arch, vec![arch.final_covariance().clone()])
    }

    /// Uses `finals` in place of the architecture's own readout covariance.
    pub fn with_finals(arch: &ArchitectureSpec, finals: Vec<WeightCovariance>) -> Result<Self> {
        if finals.is_empty() {
            return Err(Error::Parameter("at least one readout covariance is required".into()));
        }
        let collapse = arch.collapse_geometry();
        for f in &finals {
            if f.patch() != collapse.patch() {
                return Err(Error::Architecture(format!(
                    "readout covariance over {:?} does not cover the extent {:?}",
                    f.patch().dims(),
                    collapse.patch().dims()
                )));
            }
        }
        let correlated = finals.iter().any(|f| !f.is_diagonal());
        let plan = plan_with_final(arch, correlated);
        let taps = arch
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv { geom, .. } => geom.taps().map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let collapse_taps = collapse.taps()?;
        Ok(KernelEvaluator {
            arch: arch.clone(),
            plan,
            taps,
            finals,
            collapse,
            collapse_taps,
        })
    }

    pub fn plan(&self) -> &[Representation] {
        &self.plan
    }

    pub fn finals(&self) -> &[WeightCovariance] {
        &self.finals
    }

    fn prefix(
        &self,
        x: &Image,
        x2: &Image,
        mut variances: Variances<'_>,
        stats: &mut PropagationStats,
    ) -> Result<SecondMoment> {
        let mut v = input_moment(x, x2, &self.plan[0])?;
        stats.record(&v);
        let n = self.arch.layers().len();
        let mut relu_index = 0;
        for (k, layer) in self.arch.layers()[..n - 1].iter().enumerate() {
            v = match layer {
                Layer::Conv { geom, cov } => {
                    let taps = self.taps[k].as_ref().expect("conv taps");
                    match &self.plan[k + 1] {
                        Representation::Full => conv_propagate_with_taps(&v, cov, geom, taps)?,
                        Representation::Band(off) if cov.is_diagonal() => {
                            conv_propagate_diag_with_taps(&v, cov, geom, off, taps)?
                        }
                        Representation::Band(off) => {
                            conv_propagate_with_taps(&v, cov, geom, taps)?.to_band(off)?
                        }
                    }
                }
                Layer::Relu => {
                    let (a, b) = match &mut variances {
                        Variances::Own(store) => {
                            let d = v.diagonal()?;
                            store.push(d.clone());
                            (d.clone(), d)
                        }
                        Variances::Traces(s, t) => (
                            s.relu_diagonals[relu_index].clone(),
                            t.relu_diagonals[relu_index].clone(),
                        ),
                    };
                    relu_index += 1;
                    relu_moment(&SecondMomentPair::new(v, a, b)?)?
                }
                Layer::MeanPool { window } => meanpool_propagate(&v, window)?,
                Layer::CollapseOutput { .. } => unreachable!("collapse is last"),
            };
            stats.record(&v);
        }
        Ok(v)
    }

    fn readouts(&self, v: &SecondMoment, stats: &mut PropagationStats) -> Result<Vec<f64>> {
        let zero = [zero_offset(v.extent().rank())];
        self.finals
            .iter()
            .map(|cov| {
                let out = if v.is_full() {
                    conv_propagate_with_taps(v, cov, &self.collapse, &self.collapse_taps)?
                } else {
                    conv_propagate_diag_with_taps(v, cov, &self.collapse, &zero, &self.collapse_taps)?
                };
                stats.record(&out);
                out.scalar()
            })
            .collect()
    }

    pub fn self_trace(&self, x: &Image) -> Result<SelfTrace> {
        let mut relu_diagonals = Vec::with_capacity(self.arch.relu_count());
        let mut stats = PropagationStats::default();
        let v = self.prefix(x, x, Variances::Own(&mut relu_diagonals), &mut stats)?;
        let values = self.readouts(&v, &mut stats)?;
        Ok(SelfTrace {
            relu_diagonals,
            values,
        })
    }

    /// `K(X, X')` for each readout, given both inputs' self traces.
    pub fn pair_with_stats(
        &self,
        x: &Image,
        x2: &Image,
        tx: &SelfTrace,
        tx2: &SelfTrace,
    ) -> Result<(Vec<f64>, PropagationStats)> {
        let mut stats = PropagationStats::default();
        let v = self.prefix(x, x2, Variances::Traces(tx, tx2), &mut stats)?;
        let values = self.readouts(&v, &mut stats)?;
        Ok((values, stats))
    }

    pub fn pair(&self, x: &Image, x2: &Image) -> Result<Vec<f64>> {
        let tx = self.self_trace(x)?;
        let tx2 = self.self_trace(x2)?;
        Ok(self.pair_with_stats(x, x2, &tx, &tx2)?.0)
    }

    fn traces(&self, data: &[Image]) -> Result<Vec<SelfTrace>> {
        data.par_iter()
            .enumerate()
            .map(|(i, x)| {
                self.self_trace(x).map_err(|e| Error::Pair {
                    i,
                    j: i,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// One Gram matrix per readout covariance. Only the upper triangle is
    /// evaluated; the diagonal comes from the self traces.
    pub fn gram(&self, data: &[Image]) -> Result<Vec<GramMatrix>> {
        check_homogeneous(data)?;
        let n = data.len();
        let traces = self.traces(data)?;
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        let values = pairs
            .par_iter()
            .map(|&(i, j)| {
                self.pair_with_stats(&data[i], &data[j], &traces[i], &traces[j])
                    .map(|(v, _)| v)
                    .map_err(|e| Error::Pair {
                        i,
                        j,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let k = self.finals.len();
        let mut mats = vec![vec![0.0; n * n]; k];
        for (i, t) in traces.iter().enumerate() {
            for (m, &v) in mats.iter_mut().zip(&t.values) {
                m[i * n + i] = v;
            }
        }
        for (&(i, j), vals) in pairs.iter().zip(&values) {
            for (m, &v) in mats.iter_mut().zip(vals) {
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        mats.into_iter()
            .zip(&self.finals)
            .map(|(entries, cov)| {
                let meta = GramMeta {
                    arch_id: self.arch.id().to_string(),
                    dataset_digest: 0,
                    lengthscale: lengthscale_of(cov),
                };
                GramMatrix::new(n, entries, meta)
            })
            .collect()
    }

    /// `K(a_i, b_j)` as an `|a| x |b|` row-major matrix, first readout only.
    pub fn cross(&self, a: &[Image], b: &[Image]) -> Result<Vec<f64>> {
        let ta = self.traces(a)?;
        let tb = self.traces(b)?;
        let idx: Vec<(usize, usize)> = (0..a.len())
            .flat_map(|i| (0..b.len()).map(move |j| (i, j)))
            .collect();
        idx.par_iter()
            .map(|&(i, j)| {
                self.pair_with_stats(&a[i], &b[j], &ta[i], &tb[j])
                    .map(|(v, _)| v[0])
                    .map_err(|e| Error::Pair {
                        i,
                        j,
                        source: Box::new(e),
                    })
            })
            .collect()
    }
}

fn lengthscale_of(cov: &WeightCovariance) -> Option<f64> {
    match cov.kind() {
        CovKind::Matern32 { lengthscale } | CovKind::Exponential { lengthscale } => Some(*lengthscale),
        _ => None,
    }
}

fn check_homogeneous(data: &[Image]) -> Result<()> {
    if let Some(first) = data.first() {
        if let Some(k) = data.iter().position(|x| !x.same_shape(first)) {
            return Err(Error::Shape(format!("input {k} differs in shape from input 0")));
        }
    }
    Ok(())
}

/// Kernel matrix of `data` under `arch`.
pub fn gram_matrix(data: &[Image], arch: &ArchitectureSpec) -> Result<GramMatrix> {
    Ok(KernelEvaluator::new(arch)?.gram(data)?.remove(0))
}

/// Kernel matrices for several readout covariances sharing everything before
/// the readout.
pub fn gram_matrices(
    data: &[Image],
    arch: &ArchitectureSpec,
    finals: &[WeightCovariance],
) -> Result<Vec<GramMatrix>> {
    KernelEvaluator::with_finals(arch, finals.to_vec())?.gram(data)
}

/// `K(X, X')` for a single pair.
pub fn pair_kernel(x: &Image, x2: &Image, arch: &ArchitectureSpec) -> Result<f64> {
    Ok(KernelEvaluator::new(arch)?.pair(x, x2)?[0])
}
