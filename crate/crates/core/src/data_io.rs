//! CIFAR-10 ingestion, kernel files and result tables.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Extent;
use crate::gp::CvResult;
use crate::gram::{GramMatrix, GramMeta};
use crate::image::Image;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

pub const KERNEL_MAGIC: [u8; 4] = *b"CKRN";
pub const KERNEL_VERSION: u32 = 1;

/// Raw CIFAR-10 records in file order.
#[derive(Debug, Clone)]
pub struct CifarRecords {
    bytes: Vec<u8>,
}

impl CifarRecords {
    /// Parses concatenated `label, R plane, G plane, B plane` records.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Truncated(format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            )));
        }
        let recs = CifarRecords { bytes };
        for i in 0..recs.len() {
            let l = recs.label(i);
            if l >= CIFAR_CLASSES {
                return Err(Error::Label {
                    label: l,
                    classes: CIFAR_CLASSES,
                });
            }
        }
        Ok(recs)
    }

    /// Reads a single batch file, or every training batch in a directory.
    ///
    /// In a directory, `data_batch_*.bin` files are used if present and all
    /// `*.bin` files otherwise, in name order.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_file() {
            return Self::from_bytes(fs::read(path)?);
        }
        let mut all: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        all.sort();
        let train: Vec<PathBuf> = all
            .iter()
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_"))
            })
            .cloned()
            .collect();
        let files = if train.is_empty() { all } else { train };
        if files.is_empty() {
            return Err(Error::NoBatches(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        for f in files {
            let before = bytes.len();
            File::open(&f)?.read_to_end(&mut bytes)?;
            if (bytes.len() - before) % CIFAR_RECORD_BYTES != 0 {
                return Err(Error::Truncated(format!("{} has a partial record", f.display())));
            }
        }
        Self::from_bytes(bytes)
    }

    pub fn len(&self) -> usize {
        self.bytes.len() / CIFAR_RECORD_BYTES
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.bytes[i * CIFAR_RECORD_BYTES] as usize
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.bytes[i * CIFAR_RECORD_BYTES + 1..(i + 1) * CIFAR_RECORD_BYTES]
    }

    /// Record `i` as a `3 x 32 x 32` image scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Image {
        let data = self.pixels(i).iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(3, Extent::new(vec![CIFAR_SIDE, CIFAR_SIDE]).unwrap(), data).unwrap()
    }
}

/// A labelled subset with its provenance.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    /// Record index of each image in the source, increasing.
    pub indices: Vec<usize>,
    pub seed: u64,
    pub digest: u64,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Digest of an ordered index set and the seed that drew it.
pub fn dataset_digest(indices: &[usize], seed: u64) -> u64 {
    let mut bytes = Vec::with_capacity(8 * (indices.len() + 1));
    for &i in indices {
        bytes.extend_from_slice(&(i as u64).to_le_bytes());
    }
    bytes.extend_from_slice(&seed.to_le_bytes());
    fnv1a64(&bytes)
}

/// Seeded draw of `size / 10` records from every class.
pub fn balanced_subset(records: &CifarRecords, size: usize, seed: u64) -> Result<ImageDataset> {
    if size == 0 || size % CIFAR_CLASSES != 0 {
        return Err(Error::Parameter(format!(
            "subset size {size} is not a positive multiple of {CIFAR_CLASSES}"
        )));
    }
    let per = size / CIFAR_CLASSES;
    let mut by_class = vec![Vec::new(); CIFAR_CLASSES];
    for i in 0..records.len() {
        by_class[records.label(i)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(size);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < per {
            return Err(Error::InsufficientRecords {
                class,
                available: members.len(),
                needed: per,
            });
        }
        members.shuffle(&mut rng);
        indices.extend_from_slice(&members[..per]);
    }
    indices.sort_unstable();
    Ok(ImageDataset {
        images: indices.iter().map(|&i| records.image(i)).collect(),
        labels: indices.iter().map(|&i| records.label(i)).collect(),
        digest: dataset_digest(&indices, seed),
        indices,
        seed,
    })
}

pub fn load_cifar10_subset(path: &Path, size: usize, seed: u64) -> Result<ImageDataset> {
    balanced_subset(&CifarRecords::open(path)?, size, seed)
}

fn put_u16(w: &mut impl Write, v: u16) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

/// Writes the header and the upper triangle, row by row.
pub fn write_kernel(gram: &GramMatrix, w: &mut impl Write) -> Result<()> {
    let id = gram.meta.arch_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::Parameter("architecture id longer than 65535 bytes".into()))?;
    let n = u32::try_from(gram.n()).map_err(|_| Error::Parameter("kernel too large".into()))?;
    w.write_all(&KERNEL_MAGIC)?;
    put_u32(w, KERNEL_VERSION)?;
    put_u32(w, n)?;
    put_u16(w, id_len)?;
    w.write_all(id)?;
    put_u64(w, gram.meta.lengthscale.unwrap_or(f64::NAN).to_bits())?;
    put_u64(w, gram.meta.dataset_digest)?;
    for i in 0..gram.n() {
        for j in i..gram.n() {
            put_u64(w, gram.get(i, j).to_bits())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated(format!("file ends inside the {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a kernel file. With `expected_digest`, a file for a different
/// subset is rejected.
pub fn read_kernel(bytes: &[u8], expected_digest: Option<u64>) -> Result<GramMatrix> {
    let mut c = Cursor { bytes, at: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != KERNEL_MAGIC {
        return Err(Error::Magic(magic));
    }
    let version = c.u32("version")?;
    if version != KERNEL_VERSION {
        return Err(Error::Version(version));
    }
    let n = c.u32("size")? as usize;
    let id_len = c.u16("architecture id")? as usize;
    let arch_id = String::from_utf8(c.take(id_len, "architecture id")?.to_vec())
        .map_err(|_| Error::Parameter("architecture id is not UTF-8".into()))?;
    let l = f64::from_bits(c.u64("lengthscale")?);
    let digest = c.u64("digest")?;
    if let Some(expected) = expected_digest {
        if digest != expected {
            return Err(Error::Digest {
                found: digest,
                expected,
            });
        }
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = f64::from_bits(c.u64("payload")?);
            entries[i * n + j] = v;
            entries[j * n + i] = v;
        }
    }
    if c.at != bytes.len() {
        return Err(Error::Shape(format!(
            "{} unexpected bytes after the payload",
            bytes.len() - c.at
        )));
    }
    let meta = GramMeta {
        arch_id,
        dataset_digest: digest,
        lengthscale: (!l.is_nan()).then_some(l),
    };
    GramMatrix::new(n, entries, meta)
}

pub fn save_kernel(gram: &GramMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_kernel(gram, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_kernel(path: &Path, expected_digest: Option<u64>) -> Result<GramMatrix> {
    read_kernel(&fs::read(path)?, expected_digest)
}

/// One half of a kernel dataset.
#[derive(Debug, Clone)]
pub struct KernelHalf {
    pub gram: GramMatrix,
    pub labels: Vec<usize>,
    /// Positions in the parent kernel.
    pub indices: Vec<usize>,
}

/// Splits a kernel dataset into two disjoint halves by sending alternate
/// members of each class to alternate halves. Each half's kernel is the
/// principal submatrix on its points.
pub fn halve_kernel_dataset(gram: &GramMatrix, labels: &[usize]) -> Result<[KernelHalf; 2]> {
    let n = gram.n();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} kernel rows", labels.len())));
    }
    if n % 2 != 0 {
        return Err(Error::Parameter(format!("cannot halve {n} points")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![0usize; classes];
    let mut sides: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        sides[seen[l] % 2].push(i);
        seen[l] += 1;
    }
    if let Some(c) = seen.iter().position(|&k| k % 2 != 0) {
        return Err(Error::Parameter(format!(
            "class {c} has an odd number of points and cannot be split evenly"
        )));
    }
    Ok(sides.map(|indices| KernelHalf {
        gram: gram.principal_submatrix(&indices),
        labels: indices.iter().map(|&i| labels[i]).collect(),
        indices,
    }))
}

/// Cross-validation outcome for one readout lengthscale.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub arch_id: String,
    pub n: usize,
    pub lengthscale: Option<f64>,
    pub result: CvResult,
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "arch_id",
    "n",
    "lengthscale",
    "sigma",
    "fold",
    "accuracy",
    "mean_accuracy",
    "stderr",
];

/// Marker in the `fold` column of the per-lengthscale summary rows.
pub const SUMMARY_FOLD: &str = "best";

fn fmt_lengthscale(l: Option<f64>) -> String {
    l.map_or_else(String::new, |l| l.to_string())
}

/// Writes one row per (lengthscale, sigma, fold) followed by one summary row
/// per lengthscale at its best sigma.
pub fn write_results<W: Write>(records: &[SweepRecord], w: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Parameter("no results to export".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULT_COLUMNS)?;
    for rec in records {
        let r = &rec.result;
        for (s, sigma) in r.sigma_grid.iter().enumerate() {
            for (f, acc) in r.fold_accuracy[s].iter().enumerate() {
                out.write_record([
                    rec.arch_id.clone(),
                    rec.n.to_string(),
                    fmt_lengthscale(rec.lengthscale),
                    sigma.to_string(),
                    f.to_string(),
                    acc.to_string(),
                    r.mean_accuracy[s].to_string(),
                    r.stderr[s].to_string(),
                ])?;
            }
        }
    }
    for rec in records {
        let r = &rec.result;
        out.write_record([
            rec.arch_id.clone(),
            rec.n.to_string(),
            fmt_lengthscale(rec.lengthscale),
            r.best_sigma.to_string(),
            SUMMARY_FOLD.to_string(),
            r.best_accuracy.to_string(),
            r.best_accuracy.to_string(),
            r.stderr[r.best_index].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_results(records: &[SweepRecord], path: &Path) -> Result<()> {
    write_results(records, File::create(path)?)
}

/// One label per line; `?` marks a point without a label.
pub fn write_labels(labels: &[Option<usize>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels {
        match l {
            Some(l) => writeln!(w, "{l}")?,
            None => writeln!(w, "?")?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<Option<usize>>> {
    fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            if l == "?" {
                Ok(None)
            } else {
                l.parse()
                    .map(Some)
                    .map_err(|_| Error::Parameter(format!("bad label '{l}'")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn parses_hand_built_records() {
        let mut bytes = record(3, |i| (i / 1024) as u8 * 100);
        bytes.extend(record(7, |i| if i == 0 { 255 } else { 0 }));
        let recs = CifarRecords::from_bytes(bytes).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs.label(0), recs.label(1)), (3, 7));
        let img = recs.image(0);
        assert_eq!(img.get(0, 5), 0.0);
        assert_eq!(img.get(1, 5), 100.0 / 255.0);
        assert_eq!(img.get(2, 1023), 200.0 / 255.0);
        assert_eq!(recs.image(1).get(0, 0), 1.0);
    }

    #[test]
    fn rejects_partial_record() {
        let mut bytes = record(1, |_| 0);
        bytes.pop();
        assert!(matches!(CifarRecords::from_bytes(bytes), Err(Error::Truncated(_))));
        assert!(matches!(
            CifarRecords::from_bytes(record(10, |_| 0)),
            Err(Error::Label { label: 10, .. })
        ));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn halves_are_balanced() {
        let labels = vec![0, 1, 0, 1, 2, 2];
        let g = GramMatrix::new(6, (0..36).map(|v| ((v / 6) * (v % 6)) as f64).collect(), GramMeta::new("t")).unwrap();
        let [a, b] = halve_kernel_dataset(&g, &labels).unwrap();
        assert_eq!(a.indices, vec![0, 1, 4]);
        assert_eq!(b.indices, vec![2, 3, 5]);
        assert_eq!(a.gram.get(2, 1), g.get(4, 1));
        assert!(halve_kernel_dataset(&g.principal_submatrix(&[0, 1, 2, 3]), &[0, 0, 0, 1]).is_err());
    }
}
