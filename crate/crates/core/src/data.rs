//! Datasets: IDX and CSV ingestion, synthetic generators, splitting.
//!
//! Class labels are stored 0-based (`0..C`).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EllaError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Labels(Vec<usize>),
    Real(Vec<Vec<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Real(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Target<'_> {
        match self {
            Targets::Labels(l) => Target::Class(l[i]),
            Targets::Real(r) => Target::Real(&r[i]),
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Real(r) => Targets::Real(idx.iter().map(|&i| r[i].clone()).collect()),
        }
    }
}

/// Borrowed view of a single target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target<'a> {
    Class(usize),
    Real(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub input_shape: Vec<usize>,
    pub targets: Targets,
    pub num_outputs: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        input_shape: Vec<usize>,
        targets: Targets,
        num_outputs: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(EllaError::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let width: usize = input_shape.iter().product();
        if let Some(i) = inputs.iter().position(|x| x.len() != width) {
            return Err(EllaError::Shape(format!(
                "input {i} has {} entries, shape {input_shape:?} needs {width}",
                inputs[i].len()
            )));
        }
        match &targets {
            Targets::Labels(labels) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= num_outputs) {
                    return Err(EllaError::OutOfRange {
                        what: "class label",
                        index: bad,
                        len: num_outputs,
                    });
                }
            }
            Targets::Real(rows) => {
                if rows.iter().any(|r| r.len() != num_outputs) {
                    return Err(EllaError::Shape(format!(
                        "regression targets must have {num_outputs} entries"
                    )));
                }
            }
        }
        Ok(Self {
            inputs,
            input_shape,
            targets,
            num_outputs,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn target(&self, i: usize) -> Target<'_> {
        self.targets.get(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Real(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            input_shape: self.input_shape.clone(),
            targets: self.targets.select(idx),
            num_outputs: self.num_outputs,
            provenance: self.provenance.clone(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.input_shape != other.input_shape || self.num_outputs != other.num_outputs {
            return Err(EllaError::Shape("cannot concatenate incompatible datasets".into()));
        }
        let targets = match (&self.targets, &other.targets) {
            (Targets::Labels(a), Targets::Labels(b)) => Targets::Labels([a.clone(), b.clone()].concat()),
            (Targets::Real(a), Targets::Real(b)) => Targets::Real([a.clone(), b.clone()].concat()),
            _ => return Err(EllaError::Shape("mixed target kinds".into())),
        };
        Ok(Dataset {
            inputs: [self.inputs.clone(), other.inputs.clone()].concat(),
            input_shape: self.input_shape.clone(),
            targets,
            num_outputs: self.num_outputs,
            provenance: self.provenance.clone(),
        })
    }
}

/// Generator settings for `y = sin 2x + ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineConfig {
    pub low: f64,
    pub high: f64,
    /// Variance of ε.
    pub noise_var: f64,
}

impl Default for SineConfig {
    fn default() -> Self {
        Self {
            low: -2.0,
            high: 2.0,
            noise_var: 0.2,
        }
    }
}

pub fn gen_sine_regression(n: usize, seed: u64) -> Dataset {
    gen_sine_regression_with(n, seed, SineConfig::default())
}

pub fn gen_sine_regression_with(n: usize, seed: u64, cfg: SineConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = cfg.noise_var.sqrt();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(cfg.low..cfg.high);
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * std;
        inputs.push(vec![x]);
        targets.push(vec![(2.0 * x).sin() + eps]);
    }
    Dataset {
        inputs,
        input_shape: vec![1],
        targets: Targets::Real(targets),
        num_outputs: 1,
        provenance: format!(
            "sine(n={n}, seed={seed}, x~U[{}, {}], noise_var={})",
            cfg.low, cfg.high, cfg.noise_var
        ),
    }
}

/// Two interleaved half circles in the plane with isotropic Gaussian noise;
/// labels 0 and 1 alternate so the classes stay balanced.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        inputs.push(vec![x + normal.sample(&mut rng), y + normal.sample(&mut rng)]);
        labels.push(class);
    }
    Dataset {
        inputs,
        input_shape: vec![2],
        targets: Targets::Labels(labels),
        num_outputs: 2,
        provenance: format!("two-moons(n={n}, noise={noise}, seed={seed})"),
    }
}

/// Additive Gaussian pixel noise, clamped back to `[0, 1]`.
pub fn corrupt_gaussian(ds: &Dataset, std: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    for x in &mut out.inputs {
        for v in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v + std * z).clamp(0.0, 1.0);
        }
    }
    out.provenance = format!("{} + gaussian-noise(std={std}, seed={seed})", ds.provenance);
    out
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| EllaError::Format(format!("{what}: truncated header")))
}

/// Decode an IDX image/label pair (optionally gzip-compressed). Pixels are
/// scaled to `[0, 1]` by dividing by 255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(EllaError::Format(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let lmagic = be_u32(labels, 0, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(EllaError::Format(format!(
            "labels: bad magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let nl = be_u32(labels, 4, "labels")? as usize;
    if nl != n {
        return Err(EllaError::Format(format!("{n} images but {nl} labels")));
    }
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() != n * pixels {
        return Err(EllaError::Format(format!(
            "images: expected {} pixel bytes, found {}",
            n * pixels,
            body.len()
        )));
    }
    let lbody = &labels[8..];
    if lbody.len() != n {
        return Err(EllaError::Format(format!(
            "labels: expected {n} bytes, found {}",
            lbody.len()
        )));
    }
    let inputs = body
        .chunks_exact(pixels.max(1))
        .take(n)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = lbody.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(
        inputs,
        vec![1, rows, cols],
        Targets::Labels(labels),
        classes,
        "idx(pixels/255)",
    )
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = read_maybe_gz(images.as_ref())?;
    let lab = read_maybe_gz(labels.as_ref())?;
    let mut ds = parse_idx(&img, &lab)?;
    ds.provenance = format!("idx({}, pixels/255)", images.as_ref().display());
    Ok(ds)
}

/// CSV with a header row. The trailing `num_targets` columns are targets;
/// with `classes = Some(C)` a single trailing column holds 0-based labels.
pub fn load_csv(path: impl AsRef<Path>, num_targets: usize, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let width = reader.headers()?.len();
    let tcols = if classes.is_some() { 1 } else { num_targets };
    if tcols == 0 || width <= tcols {
        return Err(EllaError::Format(format!(
            "csv has {width} columns, need at least {} (features + targets)",
            tcols + 1
        )));
    }
    let mut inputs = Vec::new();
    let mut reals = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| EllaError::Format(format!("csv row {}: {e}", line + 2)))?;
        if vals.len() != width {
            return Err(EllaError::Format(format!("csv row {} has {} fields", line + 2, vals.len())));
        }
        let (x, t) = vals.split_at(width - tcols);
        inputs.push(x.to_vec());
        if classes.is_some() {
            if t[0] < 0.0 || t[0].fract() != 0.0 {
                return Err(EllaError::Format(format!("csv row {}: label {} is not a class index", line + 2, t[0])));
            }
            labels.push(t[0] as usize);
        } else {
            reals.push(t.to_vec());
        }
    }
    let (targets, c) = match classes {
        Some(c) => (Targets::Labels(labels), c),
        None => (Targets::Real(reals), tcols),
    };
    Dataset::new(
        inputs,
        vec![width - tcols],
        targets,
        c,
        format!("csv({})", path.as_ref().display()),
    )
}

/// `n` items drawn without replacement.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(EllaError::InvalidArgument(format!(
            "cannot draw {n} items from a dataset of {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(ds.select(&idx))
}

/// Disjoint pieces of a random permutation. Fractions must be nonnegative
/// and sum to 1; the last piece absorbs rounding.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(EllaError::InvalidArgument(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let sizes: Vec<usize> = fractions.iter().map(|f| (f * ds.len() as f64).floor() as usize).collect();
    split_sizes(ds, &sizes[..sizes.len() - 1], seed)
}

/// Disjoint pieces with the given sizes; a final piece holds the remainder.
pub fn split_sizes(ds: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<Dataset>> {
    let used: usize = sizes.iter().sum();
    if used > ds.len() {
        return Err(EllaError::InvalidArgument(format!(
            "split sizes {sizes:?} exceed dataset size {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut start = 0;
    for &s in sizes {
        out.push(ds.select(&idx[start..start + s]));
        start += s;
    }
    out.push(ds.select(&idx[start..]));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(n: u32, rows: u32, cols: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, n] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_single_pixel() {
        let (img, lab) = idx_pair(1, 1, 1, &[255], &[7]);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.inputs, vec![vec![1.0]]);
        assert_eq!(ds.input_shape, vec![1, 1, 1]);
        assert_eq!(ds.labels().unwrap(), &[7]);
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = idx_pair(2, 1, 1, &[1, 2], &[0, 1]);
        assert!(parse_idx(&img[..img.len() - 1], &lab).is_err());
        let mut bad = img.clone();
        bad[3] = 0x02;
        assert!(matches!(parse_idx(&bad, &lab), Err(EllaError::Format(m)) if m.contains("magic")));
        let (_, lab1) = idx_pair(1, 1, 1, &[1], &[0]);
        assert!(parse_idx(&img, &lab1).is_err());
    }

    #[test]
    fn sine_generator() {
        assert!(gen_sine_regression(0, 1).is_empty());
        assert_eq!(gen_sine_regression(20, 3), gen_sine_regression(20, 3));
        assert_ne!(gen_sine_regression(20, 3), gen_sine_regression(20, 4));
        let ds = gen_sine_regression(100, 5);
        assert!(ds.inputs.iter().all(|x| (-2.0..2.0).contains(&x[0])));
    }

    #[test]
    fn subsample_full_is_permutation() {
        let ds = gen_two_moons(30, 0.1, 0);
        let sub = subsample(&ds, 30, 1).unwrap();
        let mut a: Vec<String> = ds.inputs.iter().map(|x| format!("{x:?}")).collect();
        let mut b: Vec<String> = sub.inputs.iter().map(|x| format!("{x:?}")).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(subsample(&ds, 31, 1).is_err());
    }

    #[test]
    fn split_disjoint_and_complete() {
        let ds = gen_sine_regression(101, 2);
        let parts = split(&ds, &[0.5, 0.25, 0.25], 8).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 101);
        let key = |x: &Vec<f64>| x[0].to_bits();
        let mut all: Vec<u64> = parts.iter().flat_map(|p| p.inputs.iter().map(key)).collect();
        all.sort();
        let mut orig: Vec<u64> = ds.inputs.iter().map(key).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert!(split(&ds, &[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![vec![0.0]], vec![1], Targets::Labels(vec![3]), 2, "").is_err());
        assert!(Dataset::new(vec![vec![0.0]], vec![2], Targets::Labels(vec![0]), 2, "").is_err());
        assert!(Dataset::new(vec![], vec![1], Targets::Labels(vec![0]), 2, "").is_err());
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,b,label\n0.5,1.0,1\n-1,2,0\n").unwrap();
        let ds = load_csv(&path, 1, Some(2)).unwrap();
        assert_eq!(ds.inputs, vec![vec![0.5, 1.0], vec![-1.0, 2.0]]);
        assert_eq!(ds.labels().unwrap(), &[1, 0]);
        let reg = load_csv(&path, 1, None).unwrap();
        assert_eq!(reg.target(0), Target::Real(&[1.0]));
    }
}
