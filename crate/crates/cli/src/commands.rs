use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use convgp::data_io::{read_labels, write_labels, write_results};
use convgp::gp::{out_of_fold_predictions, predict_classes};
use convgp::mc::compare_with_kernel;
use convgp::registry::lengthscale_target;
use convgp::{
    build_architecture, cv_accuracy, empirical_kernel, gram_matrices, gram_matrix,
    load_cifar10_subset, load_kernel, save_kernel, ArchOptions, ArchitectureSpec, CovKind, CvConfig,
    FiniteNetConfig, GramMatrix, Image, ImageDataset, LengthscaleTarget, SweepRecord, WeightCovariance,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Options;

pub const DEFAULT_CACHE_DIR: &str = "kernels";
pub const DEFAULT_MC_CHANNELS: usize = 256;
pub const DEFAULT_MC_OUT_CHANNELS: usize = 16;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
/// Inputs for `mc-verify` without `--data`, taken as consecutive pairs.
pub const DEFAULT_MC_INPUTS: usize = 6;
pub const MC_INPUT_CHANNELS: usize = 3;
pub const MC_Z: f64 = 3.0;
pub const MC_RELATIVE: f64 = 0.02;

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
    Verification(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Io(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    /// Output piped into a reader that stopped early, e.g. `head`.
    pub fn is_broken_pipe(&self) -> bool {
        self.error()
            .downcast_ref::<std::io::Error>()
            .is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Io(e) | Failure::Verification(e) => e,
        }
    }
}

impl From<convgp::Error> for Failure {
    fn from(e: convgp::Error) -> Self {
        if e.is_io() {
            Failure::Io(e.into())
        } else {
            Failure::Config(e.into())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config(msg: impl std::fmt::Display) -> Failure {
    Failure::Config(anyhow!("{msg}"))
}

fn io_context<T>(r: convgp::Result<T>, what: impl FnOnce() -> String) -> Outcome<T> {
    r.map_err(|e| {
        let io = e.is_io();
        let e = anyhow::Error::from(e).context(what());
        if io {
            Failure::Io(e)
        } else {
            Failure::Config(e)
        }
    })
}

/// Resolves the config file, sets up the thread pool and runs `f`.
pub fn run(opts: Options, f: fn(&Options) -> Outcome) -> Outcome {
    let opts = opts.resolve().map_err(|e| {
        if e.downcast_ref::<std::io::Error>().is_some() {
            Failure::Io(e)
        } else {
            Failure::Config(e)
        }
    })?;
    if let Some(t) = opts.threads {
        if t == 0 {
            return Err(config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Config(e.into()))?;
    }
    f(&opts)
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Outcome<&'a T> {
    v.as_ref().ok_or_else(|| config(format!("--{flag} is required")))
}

fn require_file(path: &Path, flag: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Io(anyhow!("--{flag}: {} does not exist", path.display())))
    }
}

fn arch_options(o: &Options, lengthscale: Option<f64>) -> ArchOptions {
    ArchOptions {
        lengthscale,
        filter: o.filter,
        depth: o.depth,
        ..Default::default()
    }
}

/// Architecture id plus any overrides, used in file names and kernel headers.
pub fn arch_label(o: &Options) -> Outcome<String> {
    let id = require(&o.arch, "arch")?;
    lengthscale_target(id)?;
    let mut label = id.clone();
    if let Some(d) = o.depth {
        label.push_str(&format!("+d{d}"));
    }
    if let Some(f) = o.filter {
        label.push_str(&format!("+f{f}"));
    }
    Ok(label)
}

fn lengthscales(o: &Options) -> Outcome<Vec<Option<f64>>> {
    if o.lengthscale.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(config("lengthscales must be positive and finite"));
    }
    if o.lengthscale.is_empty() {
        Ok(vec![None])
    } else {
        Ok(o.lengthscale.iter().map(|&l| Some(l)).collect())
    }
}

fn load_dataset(o: &Options) -> Outcome<ImageDataset> {
    let path = require(&o.data, "data")?;
    let n = *require(&o.n, "n")?;
    require_file(path, "data")?;
    let seed = o.seed.unwrap_or(0);
    io_context(load_cifar10_subset(path, n, seed), || {
        format!("loading {n} images from {}", path.display())
    })
}

fn cache_dir(o: &Options) -> PathBuf {
    o.cache_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

fn stem(label: &str, ds: &ImageDataset) -> String {
    format!("{label}-n{}-s{}", ds.len(), ds.seed)
}

pub fn kernel_path(dir: &Path, label: &str, ds: &ImageDataset, lengthscale: Option<f64>) -> PathBuf {
    let l = lengthscale.map_or_else(|| "pool".to_string(), |l| format!("l{l:e}"));
    dir.join(format!("{}-{l}.ckrn", stem(label, ds)))
}

pub fn labels_path(dir: &Path, label: &str, ds: &ImageDataset) -> PathBuf {
    dir.join(format!("{}.labels", stem(label, ds)))
}

fn same_lengthscale(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
        (None, None) => true,
        _ => false,
    }
}

fn try_cached(path: &Path, label: &str, ds: &ImageDataset, l: Option<f64>) -> Option<GramMatrix> {
    let g = load_kernel(path, Some(ds.digest)).ok()?;
    let m = &g.meta;
    (m.arch_id == label && same_lengthscale(m.lengthscale, l) && g.n() == ds.len()).then_some(g)
}

fn compute(label: &str, o: &Options, ds: &ImageDataset, ls: &[Option<f64>]) -> Outcome<Vec<GramMatrix>> {
    let id = require(&o.arch, "arch")?;
    let mut grams = match lengthscale_target(id)? {
        LengthscaleTarget::Readout => {
            let arch = build_architecture(id, &arch_options(o, None))?;
            let patch = arch.collapse_geometry().patch().clone();
            let finals = ls
                .iter()
                .map(|l| WeightCovariance::build(l.map_or(CovKind::MeanPool, CovKind::matern32), &patch))
                .collect::<convgp::Result<Vec<_>>>()?;
            gram_matrices(&ds.images, &arch, &finals)?
        }
        LengthscaleTarget::Hidden => ls
            .iter()
            .map(|&l| gram_matrix(&ds.images, &build_architecture(id, &arch_options(o, l))?))
            .collect::<convgp::Result<Vec<_>>>()?,
    };
    for (g, &l) in grams.iter_mut().zip(ls) {
        let m = &mut g.meta;
        m.arch_id = label.to_string();
        m.dataset_digest = ds.digest;
        m.lengthscale = l;
    }
    Ok(grams)
}

/// Loads every kernel that is cached and computes the rest in one pass.
fn kernels(o: &Options, ds: &ImageDataset) -> Outcome<Vec<GramMatrix>> {
    let label = arch_label(o)?;
    let ls = lengthscales(o)?;
    let dir = cache_dir(o);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::Io)?;
    let mut out: Vec<Option<GramMatrix>> = ls
        .iter()
        .map(|&l| try_cached(&kernel_path(&dir, &label, ds, l), &label, ds, l))
        .collect();
    for (g, l) in out.iter().zip(&ls) {
        if g.is_some() {
            eprintln!("loaded cached kernel for lengthscale {}", fmt_l(*l));
        }
    }
    let missing: Vec<usize> = (0..ls.len()).filter(|&i| out[i].is_none()).collect();
    if !missing.is_empty() {
        let todo: Vec<Option<f64>> = missing.iter().map(|&i| ls[i]).collect();
        let fresh = compute(&label, o, ds, &todo)?;
        for (&i, g) in missing.iter().zip(fresh) {
            let path = kernel_path(&dir, &label, ds, ls[i]);
            io_context(save_kernel(&g, &path), || format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
            out[i] = Some(g);
        }
    }
    let labels: Vec<Option<usize>> = ds.labels.iter().map(|&l| Some(l)).collect();
    let lp = labels_path(&dir, &label, ds);
    io_context(write_labels(&labels, &lp), || format!("writing {}", lp.display()))?;
    Ok(out.into_iter().map(Option::unwrap).collect())
}

fn fmt_l(l: Option<f64>) -> String {
    l.map_or_else(|| "none".to_string(), |l| l.to_string())
}

pub fn kernel(o: &Options) -> Outcome {
    let ds = load_dataset(o)?;
    for g in kernels(o, &ds)? {
        println!(
            "{}\tn={}\tlengthscale={}\ttrace={:e}\tmin_eig={:e}",
            g.meta.arch_id,
            g.n(),
            fmt_l(g.meta.lengthscale),
            g.trace(),
            g.min_eigenvalue()
        );
    }
    Ok(())
}

fn sigma_grid(o: &Options, g: &GramMatrix) -> Option<Vec<f64>> {
    if o.sigma_grid.is_empty() {
        return None;
    }
    let scale = g.trace() / g.n() as f64;
    Some(o.sigma_grid.iter().map(|s| s * scale).collect())
}

fn cv_config(o: &Options, g: &GramMatrix) -> Outcome<CvConfig> {
    if o.sigma_grid.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(config("sigma grid values must be non-negative and finite"));
    }
    let mut c = CvConfig {
        sigma_grid: sigma_grid(o, g),
        seed: o.seed.unwrap_or(0),
        ..Default::default()
    };
    if let Some(f) = o.folds {
        c.folds = f;
    }
    Ok(c)
}

pub fn sweep(o: &Options) -> Outcome {
    let out = require(&o.out, "out")?.clone();
    let ds = load_dataset(o)?;
    let label = arch_label(o)?;
    let mut records = Vec::new();
    for g in kernels(o, &ds)? {
        let result = cv_accuracy(&g, &ds.labels, &cv_config(o, &g)?)?;
        println!(
            "lengthscale={}\tsigma={:e}\taccuracy={:.4} +- {:.4}",
            fmt_l(g.meta.lengthscale),
            result.best_sigma,
            result.best_accuracy,
            result.stderr[result.best_index]
        );
        records.push(SweepRecord {
            arch_id: label.clone(),
            n: g.n(),
            lengthscale: g.meta.lengthscale,
            result,
        });
    }
    let file = fs::File::create(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::Io)?;
    io_context(write_results(&records, file), || format!("writing {}", out.display()))?;
    Ok(())
}

fn synthetic_inputs(arch: &ArchitectureSpec, count: usize, seed: u64) -> convgp::Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = arch.input_extent().clone();
    (0..count)
        .map(|_| {
            let data = (0..MC_INPUT_CHANNELS * extent.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Image::new(MC_INPUT_CHANNELS, extent.clone(), data)
        })
        .collect()
}

pub fn mc_verify(o: &Options) -> Outcome {
    let id = require(&o.arch, "arch")?;
    if o.lengthscale.len() > 1 {
        return Err(config("mc-verify takes at most one lengthscale"));
    }
    let arch = build_architecture(id, &arch_options(o, o.lengthscale.first().copied()))?;
    let seed = o.seed.unwrap_or(0);
    let inputs = match &o.data {
        Some(_) => load_dataset(o)?.images,
        None => synthetic_inputs(&arch, o.n.unwrap_or(DEFAULT_MC_INPUTS), seed)?,
    };
    if inputs.len() < 2 || inputs.len() % 2 != 0 {
        return Err(config("mc-verify needs an even number of inputs, taken as pairs"));
    }
    let mut cfg = FiniteNetConfig::new(
        arch.clone(),
        o.channels.unwrap_or(DEFAULT_MC_CHANNELS),
        o.samples.unwrap_or(DEFAULT_MC_SAMPLES),
        seed,
    );
    cfg.out_channels = o.out_channels.unwrap_or(DEFAULT_MC_OUT_CHANNELS);
    let gram = gram_matrix(&inputs, &arch)?;
    let em = empirical_kernel(&cfg, &inputs)?;
    let n = inputs.len();
    let in_pair = |r: usize, c: usize| r / 2 == c / 2 && r <= c;
    let checks: Vec<_> = compare_with_kernel(&em, &gram, MC_Z, MC_RELATIVE)
        .into_iter()
        .filter(|c| in_pair(c.row, c.col))
        .collect();
    let mut failed = 0;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "entry\tanalytic\tempirical\tse\tdeviation\tband\tstatus")?;
    for c in &checks {
        let ok = c.passes();
        failed += usize::from(!ok);
        writeln!(
            stdout,
            "cov({},{})\t{:.6e}\t{:.6e}\t{:.2e}\t{:.2e}\t{:.2e}\t{}",
            c.row,
            c.col,
            c.analytic,
            c.empirical,
            c.se,
            c.deviation(),
            c.band,
            if ok { "ok" } else { "FAIL" }
        )?;
    }
    for r in 0..n {
        for c in r..n {
            if !in_pair(r, c) {
                continue;
            }
            let (v, se) = (em.cross_channel[r * n + c], em.cross_channel_se[r * n + c]);
            let ok = v.abs() <= MC_Z * se;
            failed += usize::from(!ok);
            writeln!(
                stdout,
                "cross({r},{c})\t{:.6e}\t{v:.6e}\t{se:.2e}\t{:.2e}\t{:.2e}\t{}",
                0.0,
                v.abs(),
                MC_Z * se,
                if ok { "ok" } else { "FAIL" }
            )?;
        }
    }
    writeln!(
        stdout,
        "{} samples, width {}, {} of {} checks outside band",
        em.samples,
        cfg.channels,
        failed,
        checks.len() + 3 * n / 2
    )?;
    if failed > 0 {
        return Err(Failure::Verification(anyhow!("{failed} entries outside their band")));
    }
    Ok(())
}

pub fn predict(o: &Options) -> Outcome {
    let kpath = require(&o.kernel, "kernel")?;
    let lpath = require(&o.labels, "labels")?;
    require_file(kpath, "kernel")?;
    require_file(lpath, "labels")?;
    let g = load_kernel(kpath, None)
        .with_context(|| format!("reading {}", kpath.display()))
        .map_err(Failure::Io)?;
    let labels = io_context(read_labels(lpath), || format!("reading {}", lpath.display()))?;
    if labels.len() != g.n() {
        return Err(config(format!(
            "{} labels for a kernel over {} inputs",
            labels.len(),
            g.n()
        )));
    }
    let train: Vec<usize> = (0..g.n()).filter(|&i| labels[i].is_some()).collect();
    let test: Vec<usize> = (0..g.n()).filter(|&i| labels[i].is_none()).collect();
    if train.is_empty() {
        return Err(config("no labelled inputs to train on"));
    }
    let known: Vec<usize> = train.iter().map(|&i| labels[i].unwrap()).collect();
    let sub = g.principal_submatrix(&train);
    let cfg = cv_config(o, &sub)?;
    let sigma = match cfg.sigma_grid.as_deref() {
        Some([s]) => *s,
        _ => {
            let r = cv_accuracy(&sub, &known, &cfg)?;
            eprintln!("chose sigma {:e} (cv accuracy {:.4})", r.best_sigma, r.best_accuracy);
            r.best_sigma
        }
    };
    // Labelled points are scored out of fold when the folds divide them,
    // otherwise in sample.
    let mut predicted = vec![0; g.n()];
    let own: Vec<usize> = (0..train.len()).collect();
    let fitted = if train.len() >= cfg.folds && train.len() % cfg.folds == 0 {
        out_of_fold_predictions(&sub, &known, &cfg, sigma)?
    } else {
        predict_classes(&sub, &known, &own, &own, sigma, cfg.classes, cfg.shift)?
    };
    for (&i, p) in train.iter().zip(fitted) {
        predicted[i] = p;
    }
    let filled: Vec<usize> = labels.iter().map(|l| l.unwrap_or(0)).collect();
    for (&i, p) in test.iter().zip(predict_classes(&g, &filled, &train, &test, sigma, cfg.classes, cfg.shift)?) {
        predicted[i] = p;
    }
    let mut w: Box<dyn Write> = match &o.out {
        Some(p) => Box::new(
            fs::File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map_err(Failure::Io)?,
        ),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(w, "index,label,predicted")?;
    for (i, p) in predicted.iter().enumerate() {
        let l = labels[i].map_or_else(|| "?".to_string(), |l| l.to_string());
        writeln!(w, "{i},{l},{p}")?;
    }
    w.flush()?;
    Ok(())
}
