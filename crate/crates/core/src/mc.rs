//! Finite-width networks with correlated filters, sampled to check the
//! infinite-width kernel empirically.
//!
//! Filters are drawn as `W[:, :, p] = sum_s R[p, s] U[:, :, s]` with `R R' = Sigma`
//! and `U` i.i.d. `N(0, 1 / c_in)`, which gives every channel pair the spatial
//! covariance `Sigma / c_in`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::arch::{ArchitectureSpec, Layer};
use crate::covariance::{CovSqrtFactor, WeightCovariance};
use crate::error::{Error, Result};
use crate::geometry::{ConvGeometry, TapTable};
use crate::gram::GramMatrix;
use crate::image::Image;
use crate::relu::{balanced_relu, relu_expectation_with, ArccosArgument};

/// Samples handled by one task; partial sums are merged in block order.
const BLOCK: usize = 64;

/// Convolution filters stored `[p][out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    c_out: usize,
    c_in: usize,
    n_patch: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(c_out: usize, c_in: usize, n_patch: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c_out * c_in * n_patch {
            return Err(Error::Shape(format!(
                "{c_out} x {c_in} x {n_patch} filters need {} values, got {}",
                c_out * c_in * n_patch,
                data.len()
            )));
        }
        Ok(FilterBank {
            c_out,
            c_in,
            n_patch,
            data,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, n_patch: usize) -> Self {
        FilterBank {
            c_out,
            c_in,
            n_patch,
            data: vec![0.0; c_out * c_in * n_patch],
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn n_patch(&self) -> usize {
        self.n_patch
    }

    pub fn get(&self, o: usize, i: usize, p: usize) -> f64 {
        self.data[(p * self.c_out + o) * self.c_in + i]
    }

    pub fn set(&mut self, o: usize, i: usize, p: usize, value: f64) {
        self.data[(p * self.c_out + o) * self.c_in + i] = value;
    }
}

/// One filter bank with covariance `cov / c_in` over positions.
pub fn sample_weights<R: Rng + ?Sized>(
    cov: &WeightCovariance,
    factor: &CovSqrtFactor,
    c_out: usize,
    c_in: usize,
    rng: &mut R,
) -> FilterBank {
    let mut bank = FilterBank::zeros(c_out, c_in, cov.size());
    sample_weights_into(cov, factor, rng, &mut bank);
    bank
}

/// Overwrites `bank` with a fresh draw, reusing its storage.
pub fn sample_weights_into<R: Rng + ?Sized>(
    cov: &WeightCovariance,
    factor: &CovSqrtFactor,
    rng: &mut R,
    bank: &mut FilterBank,
) {
    sample_with_scratch(cov, factor, rng, bank, &mut Vec::new());
}

fn sample_with_scratch<R: Rng + ?Sized>(
    cov: &WeightCovariance,
    factor: &CovSqrtFactor,
    rng: &mut R,
    bank: &mut FilterBank,
    scratch: &mut Vec<f64>,
) {
    let n_patch = cov.size();
    debug_assert_eq!(factor.size(), n_patch);
    debug_assert_eq!(bank.n_patch, n_patch);
    let per = bank.c_out * bank.c_in;
    let scale = 1.0 / (bank.c_in as f64).sqrt();
    let data = &mut bank.data;
    if cov.is_diagonal() {
        let diag = cov.diagonal();
        for (p, chunk) in data.chunks_mut(per).enumerate() {
            let sd = diag[p].sqrt() * scale;
            for w in chunk {
                let z: f64 = rng.sample(StandardNormal);
                *w = sd * z;
            }
        }
    } else {
        scratch.resize(per, 0.0);
        for s in 0..n_patch {
            for u in scratch.iter_mut() {
                *u = rng.sample(StandardNormal);
            }
            for (p, chunk) in data.chunks_mut(per).enumerate() {
                let r = scale * factor.get(p, s);
                if s == 0 {
                    chunk.iter_mut().zip(scratch.iter()).for_each(|(w, &u)| *w = r * u);
                } else {
                    chunk.iter_mut().zip(scratch.iter()).for_each(|(w, &u)| *w += r * u);
                }
            }
        }
    }
}

/// Filters for every weighted layer of a [`FiniteNet`], plus sampling scratch.
#[derive(Debug, Clone)]
pub struct WeightSet {
    banks: Vec<Option<FilterBank>>,
    scratch: Vec<f64>,
}

impl WeightSet {
    /// One slot per layer; `None` for layers without weights.
    pub fn banks(&self) -> &[Option<FilterBank>] {
        &self.banks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNetConfig {
    pub arch: ArchitectureSpec,
    /// Width of every hidden layer.
    pub channels: usize,
    /// Width of the readout. Each output channel is one draw of the network
    /// function, so more of them lower the variance of the estimates.
    pub out_channels: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl FiniteNetConfig {
    pub fn new(arch: ArchitectureSpec, channels: usize, n_samples: usize, seed: u64) -> Self {
        FiniteNetConfig {
            arch,
            channels,
            out_channels: channels,
            n_samples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.out_channels < 2 {
            return Err(Error::Parameter(
                "need at least one hidden channel and two output channels".into(),
            ));
        }
        if self.n_samples < 2 {
            return Err(Error::Parameter("need at least two samples".into()));
        }
        Ok(())
    }
}

/// Everything about a finite network that does not depend on the draw.
#[derive(Debug, Clone)]
pub struct FiniteNet {
    arch: ArchitectureSpec,
    input_channels: usize,
    channels: usize,
    out_channels: usize,
    /// Per layer: geometry, taps and covariance factor for weighted layers.
    stages: Vec<Option<(ConvGeometry, TapTable, WeightCovariance, CovSqrtFactor)>>,
}

impl FiniteNet {
    pub fn new(
        arch: &ArchitectureSpec,
        input_channels: usize,
        channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let stages = arch
            .layers()
            .iter()
            .map(|l| -> Result<_> {
                Ok(match l {
                    Layer::Conv { geom, cov } => {
                        Some((geom.clone(), geom.taps()?, cov.clone(), cov.sqrt_factor()?))
                    }
                    Layer::CollapseOutput { cov } => {
                        let geom = arch.collapse_geometry();
                        Some((geom.clone(), geom.taps()?, cov.clone(), cov.sqrt_factor()?))
                    }
                    _ => None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FiniteNet {
            arch: arch.clone(),
            input_channels,
            channels,
            out_channels,
            stages,
        })
    }

    /// Draws all filters from `seed`, one independent stream per layer.
    pub fn sample(&self, seed: u64, sample: u64) -> WeightSet {
        let mut w = self.empty_weights();
        self.sample_into(seed, sample, &mut w);
        w
    }

    /// Zeroed filter banks of the right shapes.
    pub fn empty_weights(&self) -> WeightSet {
        let mut c_in = self.input_channels;
        let last = self.stages.len() - 1;
        let banks = self
            .stages
            .iter()
            .enumerate()
            .map(|(k, stage)| {
                stage.as_ref().map(|(_, taps, _, _)| {
                    let c_out = if k == last { self.out_channels } else { self.channels };
                    let bank = FilterBank::zeros(c_out, c_in, taps.n_patch());
                    c_in = c_out;
                    bank
                })
            })
            .collect();
        WeightSet {
            banks,
            scratch: Vec::new(),
        }
    }

    /// As [`FiniteNet::sample`], into existing storage.
    pub fn sample_into(&self, seed: u64, sample: u64, w: &mut WeightSet) {
        for (k, (stage, bank)) in self.stages.iter().zip(w.banks.iter_mut()).enumerate() {
            if let (Some((_, _, cov, factor)), Some(bank)) = (stage, bank) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((sample << 8) | k as u64);
                sample_with_scratch(cov, factor, &mut rng, bank, &mut w.scratch);
            }
        }
    }

    /// Output channels of the network for input `x`.
    pub fn forward(&self, weights: &[Option<FilterBank>], x: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_batch(weights, std::slice::from_ref(x))?.remove(0))
    }

    /// Output channels for every input, sharing one set of filters.
    pub fn forward_batch(&self, weights: &[Option<FilterBank>], xs: &[Image]) -> Result<Vec<Vec<f64>>> {
        if xs
            .iter()
            .any(|x| x.channels() != self.input_channels || x.extent() != self.arch.input_extent())
        {
            return Err(Error::Shape("input does not match the network".into()));
        }
        if weights.len() != self.stages.len() {
            return Err(Error::Shape("one weight slot per layer required".into()));
        }
        // Activations are stored `[input][position][channel]`.
        let batch = xs.len();
        let mut n = self.arch.input_extent().len();
        let mut channels = self.input_channels;
        let mut act = vec![0.0; batch * n * channels];
        for (b, x) in xs.iter().enumerate() {
            for q in 0..n {
                for ch in 0..channels {
                    act[(b * n + q) * channels + ch] = x.get(ch, q);
                }
            }
        }
        let mut extent = self.arch.input_extent().clone();
        for (k, layer) in self.arch.layers().iter().enumerate() {
            match layer {
                Layer::Relu => act.iter_mut().for_each(|a| *a = balanced_relu(*a)),
                Layer::MeanPool { window } => {
                    let geom = ConvGeometry::pooling(extent.clone(), window)?;
                    let taps = geom.taps()?;
                    let inv = 1.0 / window.len() as f64;
                    let n_out = taps.n_out();
                    let mut out = vec![0.0; batch * n_out * channels];
                    for b in 0..batch {
                        for q in 0..n_out {
                            let dst = &mut out[(b * n_out + q) * channels..][..channels];
                            for (_, i) in taps.valid(q) {
                                dst.iter_mut()
                                    .zip(&act[(b * n + i) * channels..][..channels])
                                    .for_each(|(d, s)| *d += inv * s);
                            }
                        }
                    }
                    act = out;
                    extent = geom.output_extent()?;
                    n = extent.len();
                }
                Layer::Conv { .. } | Layer::CollapseOutput { .. } => {
                    let (geom, taps, _, _) = self.stages[k].as_ref().expect("weighted layer");
                    let bank = weights[k]
                        .as_ref()
                        .ok_or_else(|| Error::Shape(format!("missing weights for layer {k}")))?;
                    if bank.c_in() != channels || bank.n_patch() != taps.n_patch() {
                        return Err(Error::Shape(format!("weights of layer {k} do not fit")));
                    }
                    act = conv_forward(&act, batch, n, channels, taps, bank);
                    channels = bank.c_out();
                    extent = geom.output_extent()?;
                    n = extent.len();
                }
            }
        }
        Ok(act.chunks(n * channels).map(<[f64]>::to_vec).collect())
    }
}

/// For each filter position `p`, gathers the rows read by `p` and adds
/// `rows x W_p` into the output with one matrix product.
fn conv_forward(
    act: &[f64],
    batch: usize,
    n_in: usize,
    c_in: usize,
    taps: &TapTable,
    bank: &FilterBank,
) -> Vec<f64> {
    let c_out = bank.c_out();
    let n_out = taps.n_out();
    let rows = batch * n_out;
    let mut out = vec![0.0; rows * c_out];
    let mut gathered = vec![0.0; rows * c_in];
    for p in 0..taps.n_patch() {
        let mut any = false;
        for b in 0..batch {
            for q in 0..n_out {
                let dst = &mut gathered[(b * n_out + q) * c_in..][..c_in];
                match taps.get(q, p) {
                    Some(i) => {
                        dst.copy_from_slice(&act[(b * n_in + i) * c_in..][..c_in]);
                        any = true;
                    }
                    None => dst.fill(0.0),
                }
            }
        }
        if !any {
            continue;
        }
        let w = &bank.data[p * c_out * c_in..(p + 1) * c_out * c_in];
        // out[r, o] += sum_i gathered[r, i] * w[o, i]
        unsafe {
            matrixmultiply::dgemm(
                rows,
                c_in,
                c_out,
                1.0,
                gathered.as_ptr(),
                c_in as isize,
                1,
                w.as_ptr(),
                1,
                c_in as isize,
                1.0,
                out.as_mut_ptr(),
                c_out as isize,
                1,
            );
        }
    }
    out
}

/// Forward pass of a single finite network given its filters, one bank per
/// weighted layer (conv and readout) in order.
pub fn finite_forward(arch: &ArchitectureSpec, banks: &[FilterBank], x: &Image) -> Result<Vec<f64>> {
    let weighted = arch
        .layers()
        .iter()
        .filter(|l| matches!(l, Layer::Conv { .. } | Layer::CollapseOutput { .. }))
        .count();
    if banks.len() != weighted {
        return Err(Error::Shape(format!(
            "{weighted} weighted layers, {} filter banks",
            banks.len()
        )));
    }
    let hidden = banks.first().map_or(1, FilterBank::c_out);
    let out = banks.last().map_or(1, FilterBank::c_out);
    let net = FiniteNet::new(arch, x.channels(), hidden, out)?;
    let mut it = banks.iter();
    let slots: Vec<Option<FilterBank>> = arch
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv { .. } | Layer::CollapseOutput { .. } => it.next().cloned(),
            _ => None,
        })
        .collect();
    net.forward(&slots, x)
}

/// Monte-Carlo estimates over `n` inputs, all `n x n` row-major except the
/// means.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoment {
    pub n_inputs: usize,
    pub samples: usize,
    /// Output mean per input, averaged over output channels.
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// `E[f_i(X_k) f_i(X_l)]`, averaged over output channels `i`.
    pub cov: Vec<f64>,
    pub cov_se: Vec<f64>,
    /// `E[f_i(X_k) f_j(X_l)]` over distinct output channels `i != j`.
    pub cross_channel: Vec<f64>,
    pub cross_channel_se: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Sums {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Sums {
    fn new(len: usize) -> Self {
        Sums {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    fn add(&mut self, values: &[f64]) {
        for ((s, q), &v) in self.first.iter_mut().zip(&mut self.second).zip(values) {
            *s += v;
            *q += v * v;
        }
    }

    fn merge(&mut self, other: &Sums) {
        self.first.iter_mut().zip(&other.first).for_each(|(a, b)| *a += b);
        self.second.iter_mut().zip(&other.second).for_each(|(a, b)| *a += b);
    }

    fn finish(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        let mf = m as f64;
        self.first
            .iter()
            .zip(&self.second)
            .map(|(&s, &q)| {
                let mean = s / mf;
                let var = ((q - s * mean) / (mf - 1.0)).max(0.0);
                (mean, (var / mf).sqrt())
            })
            .unzip()
    }
}

/// Runs `cfg.n_samples` independent networks on every input.
pub fn empirical_kernel(cfg: &FiniteNetConfig, inputs: &[Image]) -> Result<EmpiricalMoment> {
    cfg.validate()?;
    let first = inputs
        .first()
        .ok_or_else(|| Error::Parameter("no inputs".into()))?;
    let net = FiniteNet::new(&cfg.arch, first.channels(), cfg.channels, cfg.out_channels)?;
    let n = inputs.len();
    let o = cfg.out_channels;
    let blocks: Vec<(usize, usize)> = (0..cfg.n_samples)
        .step_by(BLOCK)
        .map(|s| (s, (s + BLOCK).min(cfg.n_samples)))
        .collect();
    let partials = blocks
        .par_iter()
        .map(|&(start, end)| -> Result<[Sums; 3]> {
            let mut sums = [Sums::new(n), Sums::new(n * n), Sums::new(n * n)];
            let mut per_sample = [vec![0.0; n], vec![0.0; n * n], vec![0.0; n * n]];
            let mut w = net.empty_weights();
            for s in start..end {
                net.sample_into(cfg.seed, s as u64, &mut w);
                let outs = net.forward_batch(w.banks(), inputs)?;
                let totals: Vec<f64> = outs.iter().map(|f| f.iter().sum()).collect();
                for k in 0..n {
                    per_sample[0][k] = totals[k] / o as f64;
                    for l in 0..n {
                        let same: f64 = outs[k].iter().zip(&outs[l]).map(|(a, b)| a * b).sum();
                        per_sample[1][k * n + l] = same / o as f64;
                        per_sample[2][k * n + l] =
                            (totals[k] * totals[l] - same) / (o * (o - 1)) as f64;
                    }
                }
                for (acc, v) in sums.iter_mut().zip(&per_sample) {
                    acc.add(v);
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = [Sums::new(n), Sums::new(n * n), Sums::new(n * n)];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let m = cfg.n_samples;
    let (mean, mean_se) = total[0].finish(m);
    let (cov, cov_se) = total[1].finish(m);
    let (cross_channel, cross_channel_se) = total[2].finish(m);
    Ok(EmpiricalMoment {
        n_inputs: n,
        samples: m,
        mean,
        mean_se,
        cov,
        cov_se,
        cross_channel,
        cross_channel_se,
    })
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
}

impl McEstimate {
    /// Distance from `target` in standard errors.
    pub fn z(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.se
    }
}

/// Sample average of `phi(u) phi(v)` for `(u, v)` Gaussian with variances
/// `a`, `b` and covariance `c`.
pub fn mc_relu_expectation<R: Rng + ?Sized>(
    a: f64,
    b: f64,
    c: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if !(a >= 0.0 && b >= 0.0) || c * c > a * b * (1.0 + 1e-12) {
        return Err(Error::NotPsd {
            min_eigenvalue: 0.5 * (a + b - ((a - b).powi(2) + 4.0 * c * c).sqrt()),
            tolerance: 0.0,
        });
    }
    if n_samples < 2 {
        return Err(Error::Parameter("need at least two samples".into()));
    }
    let sa = a.sqrt();
    let (lift, rest) = if a > 0.0 {
        (c / sa, (b - c * c / a).max(0.0).sqrt())
    } else {
        (0.0, b.sqrt())
    };
    let mut sums = Sums::new(1);
    for _ in 0..n_samples {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let u = sa * z1;
        let v = lift * z1 + rest * z2;
        sums.add(&[balanced_relu(u) * balanced_relu(v)]);
    }
    let (m, s) = sums.finish(n_samples);
    Ok(McEstimate { value: m[0], se: s[0] })
}

/// Closed form under the chosen arccosine argument, for side-by-side checks.
pub fn analytic_relu_expectation(a: f64, b: f64, c: f64, arg: ArccosArgument) -> f64 {
    relu_expectation_with(a, b, c, arg)
}

/// One entry of an empirical-versus-analytic comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryCheck {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub empirical: f64,
    pub se: f64,
    /// Allowed deviation, `max(z * se, rel * |analytic|)`.
    pub band: f64,
}

impl EntryCheck {
    pub fn deviation(&self) -> f64 {
        (self.empirical - self.analytic).abs()
    }

    pub fn passes(&self) -> bool {
        self.deviation() <= self.band
    }
}

/// Compares every covariance entry with the analytic kernel.
pub fn compare_with_kernel(em: &EmpiricalMoment, gram: &GramMatrix, z: f64, rel: f64) -> Vec<EntryCheck> {
    let n = em.n_inputs;
    (0..n)
        .flat_map(|r| (0..n).map(move |c| (r, c)))
        .map(|(r, c)| {
            let analytic = gram.get(r, c);
            let se = em.cov_se[r * n + c];
            EntryCheck {
                row: r,
                col: c,
                analytic,
                empirical: em.cov[r * n + c],
                se,
                band: (z * se).max(rel * analytic.abs()),
            }
        })
        .collect()
}
