//! Dataset ingestion (IDX image files), binarization and normalization,
//! synthetic separable data, and metrics persistence.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::numerics::{flat_norm, flat_scale, Matrix, RngStream};
use crate::trainer::{IterRecord, RunMetrics};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    IdxFile,
    Synthetic,
    Xor,
}

/// Labeled binary-classification samples.
///
/// The single validation chokepoint enforces labels strictly in {+1, -1} and,
/// for idx-file and synthetic data, the unit-ball input contract
/// `||x|| <= 1 + 1e-12`. XOR data lives on the hypercube `{-1, +1}^d` by
/// definition and is exempt from the unit-ball bound.
#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<f64>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<f64>, provenance: Provenance) -> Result<Self, Error> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Dataset("labels must be +1 or -1".into()));
        }
        if !inputs.is_finite() {
            return Err(Error::Dataset("inputs contain non-finite values".into()));
        }
        if provenance != Provenance::Xor {
            for i in 0..inputs.rows() {
                let norm = flat_norm(inputs.row(i));
                if norm > 1.0 + 1e-12 {
                    return Err(Error::Dataset(format!("input {i} has norm {norm} > 1")));
                }
            }
        }
        Ok(Dataset { inputs, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// First `count` rows of a deterministic shuffle.
    pub fn subsample(&self, rng: &mut RngStream, count: usize) -> Result<Dataset, Error> {
        if count > self.len() {
            return Err(Error::Dataset(format!(
                "cannot subsample {count} from {} samples",
                self.len()
            )));
        }
        let idx = shuffled_indices(rng, self.len());
        self.take(&idx[..count])
    }

    /// Split into (train, test) by a deterministic shuffle.
    pub fn split(&self, rng: &mut RngStream, test_fraction: f64) -> Result<(Dataset, Dataset), Error> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Dataset("test_fraction must be in [0, 1)".into()));
        }
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let idx = shuffled_indices(rng, self.len());
        let test = self.take(&idx[..n_test])?;
        let train = self.take(&idx[n_test..])?;
        Ok((train, test))
    }

    fn take(&self, idx: &[usize]) -> Result<Dataset, Error> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(Matrix::from_vec(idx.len(), d, data), labels, self.provenance)
    }
}

fn shuffled_indices(rng: &mut RngStream, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates on the counter stream.
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw IDX payload: unnormalized pixel bytes and digit labels 0-9.
#[derive(Clone, Debug)]
pub struct RawIdx {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// count * rows * cols pixel bytes, row-major per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

struct BeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BeReader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32, Error> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::IdxTruncated(what.to_string()));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn tail(&self, want: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.bytes.len() - self.pos < want {
            return Err(Error::IdxTruncated(what.to_string()));
        }
        Ok(&self.bytes[self.pos..self.pos + want])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Parse an IDX image/label file pair (the files are big-endian by format).
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<RawIdx, Error> {
    let img_bytes = read_file(image_path)?;
    let mut r = BeReader { bytes: &img_bytes, pos: 0 };
    let magic = r.u32("image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxMagic { expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let count = r.u32("image count")? as usize;
    let rows = r.u32("image rows")? as usize;
    let cols = r.u32("image cols")? as usize;
    let pixels = r.tail(count * rows * cols, "image pixels")?.to_vec();

    let lbl_bytes = read_file(label_path)?;
    let mut r = BeReader { bytes: &lbl_bytes, pos: 0 };
    let magic = r.u32("label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::IdxMagic { expected: IDX_LABEL_MAGIC, found: magic });
    }
    let label_count = r.u32("label count")? as usize;
    let labels = r.tail(label_count, "label bytes")?.to_vec();

    if label_count != count {
        return Err(Error::IdxCountMismatch { images: count, labels: label_count });
    }
    Ok(RawIdx { count, rows, cols, pixels, labels })
}

/// Binary label mapping applied to digit labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRule {
    /// Even digits map to +1, odd to -1. Uses every sample.
    EvenOdd,
    /// Keep only the two classes; first maps to +1, second to -1.
    ClassPair(u8, u8),
}

/// Map raw IDX images to a [`Dataset`]: pixels scaled to [0, 1], then each
/// input vector scaled by `1 / max(1, ||x||)` so the unit-ball contract holds,
/// while all-zero and already-small images pass through unchanged.
pub fn binarize_normalize(raw: &RawIdx, rule: LabelRule) -> Result<Dataset, Error> {
    let d = raw.rows * raw.cols;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..raw.count {
        let y = match rule {
            LabelRule::EvenOdd => {
                if raw.labels[i] % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            LabelRule::ClassPair(a, b) => {
                if raw.labels[i] == a {
                    1.0
                } else if raw.labels[i] == b {
                    -1.0
                } else {
                    continue;
                }
            }
        };
        let mut x: Vec<f64> = raw.pixels[i * d..(i + 1) * d].iter().map(|&p| p as f64 / 255.0).collect();
        let norm = flat_norm(&x);
        if norm > 1.0 {
            flat_scale(&mut x, 1.0 / norm);
        }
        data.extend_from_slice(&x);
        labels.push(y);
    }
    if let LabelRule::ClassPair(a, b) = rule {
        let pos = labels.iter().filter(|&&y| y == 1.0).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::Dataset(format!("class pair ({a}, {b}) has an absent class")));
        }
    }
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, d, data), labels, Provenance::IdxFile)
}

/// Two Gaussian clusters at +/-mu with `||mu|| = margin`, labeled by cluster
/// and projected to the unit ball. The within-cluster spread is kept at
/// `margin / 8` so the raw inputs stay linearly separable with a margin
/// bounded away from zero.
pub fn synth_ntk_separable(seed: u64, d: usize, n: usize, margin: f64) -> Result<Dataset, Error> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::Config("margin target must be in (0, 1)".into()));
    }
    if d == 0 || n == 0 {
        return Err(Error::Config("synth_ntk_separable needs d, n >= 1".into()));
    }
    let mut dir_rng = RngStream::new(seed, 0);
    let mut mu: Vec<f64> = (0..d).map(|_| dir_rng.next_gaussian()).collect();
    let nm = flat_norm(&mu);
    flat_scale(&mut mu, margin / nm);

    let noise_sd = margin / (8.0 * (d as f64).sqrt());
    let mut rng = RngStream::new(seed, 1);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        let mut x: Vec<f64> = mu.iter().map(|&m| y * m + noise_sd * rng.next_gaussian()).collect();
        let norm = flat_norm(&x);
        if norm > 1.0 {
            flat_scale(&mut x, 1.0 / norm);
        }
        data.extend_from_slice(&x);
        labels.push(y);
    }
    Dataset::new(Matrix::from_vec(n, d, data), labels, Provenance::Synthetic)
}

const METRICS_HEADER: &str =
    "iter,train_loss,test_loss,gen_gap,dist_from_init,grad_norm,cum_train_loss,eta,descent_violation";

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        // 17 significant digits: lossless for f64.
        format!("{v:.16e}")
    }
}

/// Write run metrics as CSV, one row per logged iterate.
pub fn write_metrics_csv(metrics: &RunMetrics, path: &Path) -> Result<(), Error> {
    let mut out = String::with_capacity(64 * (metrics.records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in &metrics.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            fmt_f64(r.train_loss),
            fmt_f64(r.test_loss),
            fmt_f64(r.gen_gap),
            fmt_f64(r.dist_from_init),
            fmt_f64(r.grad_norm),
            fmt_f64(r.cum_train_loss),
            fmt_f64(r.eta),
            u8::from(r.descent_violation),
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, Error> {
    tok.parse::<f64>().map_err(|_| Error::Csv(format!("bad float '{tok}' on line {line}")))
}

pub fn read_metrics_csv(path: &Path) -> Result<RunMetrics, Error> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Csv("empty metrics file".into()))?
        .map_err(|e| Error::io(path, e))?;
    if header.trim() != METRICS_HEADER {
        return Err(Error::Csv(format!("unexpected header '{header}'")));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 9 {
            return Err(Error::Csv(format!("expected 9 columns on line {}", lineno + 2)));
        }
        records.push(IterRecord {
            iter: toks[0]
                .parse()
                .map_err(|_| Error::Csv(format!("bad iter '{}' on line {}", toks[0], lineno + 2)))?,
            train_loss: parse_f64(toks[1], lineno + 2)?,
            test_loss: parse_f64(toks[2], lineno + 2)?,
            gen_gap: parse_f64(toks[3], lineno + 2)?,
            dist_from_init: parse_f64(toks[4], lineno + 2)?,
            grad_norm: parse_f64(toks[5], lineno + 2)?,
            cum_train_loss: parse_f64(toks[6], lineno + 2)?,
            eta: parse_f64(toks[7], lineno + 2)?,
            descent_violation: toks[8].trim() == "1",
        });
    }
    Ok(RunMetrics { records })
}
