//! Synthetic datasets, the frozen feature extractor, stratified splits and
//! embedding-file I/O.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassId, HasLabel, LabeledExample};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{Rng, Stream};
use crate::scalar::all_finite;

/// Which space an example's vector lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    /// Raw input, to be mapped by an extractor.
    Raw,
    /// Precomputed embedding, already in feature space.
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub input: Vec<f64>,
    pub space: Space,
    pub label: ClassId,
}

impl RawExample {
    pub fn new(input: Vec<f64>, space: Space, label: impl Into<ClassId>) -> Result<Self> {
        if !all_finite(&input) {
            return Err(Error::NonFinite("example input"));
        }
        Ok(Self {
            input,
            space,
            label: label.into(),
        })
    }
}

impl HasLabel for RawExample {
    fn label(&self) -> &ClassId {
        &self.label
    }
}

/// Fixed map from inputs to features.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenExtractor {
    /// Features are the input vector.
    Identity,
    /// `relu(M^T x)` with `M` of shape `input_dim x feature_dim`.
    Dense { weights: Matrix<f64> },
    /// Embedding-space examples pass through unchanged.
    Passthrough,
}

impl FrozenExtractor {
    /// Dense layer with `N(0, 1/input_dim)` weights from the extractor stream of `seed`.
    pub fn random_dense(input_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument("extractor dimensions must be positive".into()));
        }
        let mut rng = Rng::for_stream(seed, Stream::Extractor);
        let std_dev = 1.0 / (input_dim as f64).sqrt();
        let weights = Matrix::from_fn(input_dim, feature_dim, |_, _| rng.normal(0.0, std_dev));
        Ok(Self::Dense { weights })
    }

    /// Output dimension for inputs of `input_dim`.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Self::Dense { weights } => weights.cols(),
            _ => input_dim,
        }
    }

    pub fn extract(&self, raw: &RawExample) -> Result<LabeledExample<f64>> {
        let features = match (self, raw.space) {
            (Self::Identity, _) => raw.input.clone(),
            (Self::Passthrough, Space::Embedding) => raw.input.clone(),
            (Self::Passthrough, Space::Raw) => {
                return Err(Error::InvalidArgument(
                    "passthrough extractor needs embedding-space examples".into(),
                ))
            }
            (Self::Dense { .. }, Space::Embedding) => {
                return Err(Error::InvalidArgument(
                    "dense extractor needs raw-space examples".into(),
                ))
            }
            (Self::Dense { weights }, Space::Raw) => {
                let mut z = weights.transpose_matvec(&raw.input)?;
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                z
            }
        };
        LabeledExample::new(features, raw.label.clone())
    }

    pub fn extract_all(&self, raw: &[RawExample]) -> Result<Vec<LabeledExample<f64>>> {
        raw.iter().map(|r| self.extract(r)).collect()
    }

    /// FNV-1a hash over the mode and weight bits; constant while the extractor is frozen.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        match self {
            Self::Identity => eat(b"identity"),
            Self::Passthrough => eat(b"passthrough"),
            Self::Dense { weights } => {
                eat(b"dense");
                eat(&(weights.rows() as u64).to_le_bytes());
                eat(&(weights.cols() as u64).to_le_bytes());
                for w in weights.as_slice() {
                    eat(&w.to_bits().to_le_bytes());
                }
            }
        }
        h
    }
}

/// Appends a constant 1 feature, emulating a bias term.
pub fn append_bias_feature(examples: &mut [LabeledExample<f64>]) {
    for e in examples {
        e.features.push(1.0);
    }
}

/// Isotropic Gaussian clusters with unit within-class deviation.
///
/// Class means sit on random directions at radius `separation`, redrawn until
/// every pair is at least `separation` apart. Each point is redrawn until it
/// is closer to its own mean than to any other, so the set is separable by
/// construction; nearest-mean classification over the empirical means is
/// then checked before returning. Labels are `c0`, `c1`, ...
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<Vec<RawExample>> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument("per_class and dim must be positive".into()));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument("separation must be positive".into()));
    }
    let means = place_means(classes, dim, separation, rng);
    let mut out = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        let label = ClassId::new(format!("c{c}"));
        for _ in 0..per_class {
            let x = loop {
                let x: Vec<f64> = mean.iter().map(|&m| rng.normal(m, 1.0)).collect();
                if nearest(&means, &x) == c {
                    break x;
                }
            };
            out.push(RawExample::new(x, Space::Raw, label.clone())?);
        }
    }
    let accuracy = nearest_mean_accuracy(&out);
    if accuracy < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "generated clusters are not separable (nearest-mean accuracy {accuracy})"
        )));
    }
    Ok(out)
}

fn place_means(classes: usize, dim: usize, separation: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut radius = separation;
    loop {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
        let mut attempts = 0;
        while means.len() < classes && attempts < 1000 {
            attempts += 1;
            let mut u: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v *= radius / norm);
            if means.iter().all(|m| distance2(m, &u) >= separation * separation) {
                means.push(u);
            }
        }
        if means.len() == classes {
            return means;
        }
        radius *= 1.25;
    }
}

fn distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(means: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, m) in means.iter().enumerate() {
        let d = distance2(m, x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Accuracy of classifying each example by the closest empirical class mean.
pub fn nearest_mean_accuracy(data: &[RawExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut order: Vec<ClassId> = Vec::new();
    let mut sums: HashMap<ClassId, (Vec<f64>, usize)> = HashMap::new();
    for e in data {
        let entry = sums.entry(e.label.clone()).or_insert_with(|| {
            order.push(e.label.clone());
            (vec![0.0; e.input.len()], 0)
        });
        entry.0.iter_mut().zip(&e.input).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    let means: Vec<Vec<f64>> = order
        .iter()
        .map(|c| {
            let (s, n) = &sums[c];
            s.iter().map(|v| v / *n as f64).collect()
        })
        .collect();
    let correct = data
        .iter()
        .filter(|e| order[nearest(&means, &e.input)] == e.label)
        .count();
    correct as f64 / data.len() as f64
}

/// Train/validation/test fractions and the shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train,
            validation,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(Error::InvalidArgument("split fractions must lie in [0, 1]".into()));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.9,
            validation: 0.05,
            test: 0.05,
            seed: 0,
        }
    }
}

/// Per-class split sizes by largest remainder, so each deviates from its
/// exact share by less than one example. Splits with a positive fraction get
/// at least one example.
fn allocate(n: usize, fractions: [f64; 3]) -> Option<[usize; 3]> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>().min(n);
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle().take(3 * n.max(1)) {
        if rest == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            rest -= 1;
        }
    }
    let mandatory = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < mandatory {
        return None;
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    Some(sizes)
}

/// Stratified split. Each class is shuffled with the split seed and cut by
/// [`SplitSpec`]; every output keeps the dataset's original order.
pub fn split<E: Clone + HasLabel>(dataset: &[E], spec: &SplitSpec) -> Result<(Vec<E>, Vec<E>, Vec<E>)> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut order: Vec<&ClassId> = Vec::new();
    let mut members: HashMap<&ClassId, Vec<usize>> = HashMap::new();
    for (i, e) in dataset.iter().enumerate() {
        members
            .entry(e.label())
            .or_insert_with(|| {
                order.push(e.label());
                Vec::new()
            })
            .push(i);
    }
    let fractions = [spec.train, spec.validation, spec.test];
    let mandatory = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut rng = Rng::for_stream(spec.seed, Stream::Split);
    let mut assignment = vec![0u8; dataset.len()];
    for class in order {
        let mut idx = members[class].clone();
        let sizes = allocate(idx.len(), fractions).ok_or_else(|| Error::ClassTooSmall {
            class: class.to_string(),
            available: idx.len(),
            required: mandatory,
        })?;
        rng.shuffle(&mut idx);
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = if pos < sizes[0] {
                0
            } else if pos < sizes[0] + sizes[1] {
                1
            } else {
                2
            };
        }
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (e, &a) in dataset.iter().zip(&assignment) {
        match a {
            0 => train.push(e.clone()),
            1 => val.push(e.clone()),
            _ => test.push(e.clone()),
        }
    }
    Ok((train, val, test))
}

/// On-disk embedding formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    /// Comma-separated with header `label,f0,...,f{h-1}`.
    Csv,
    /// One `{"label": ..., "features": [...]}` object per line.
    JsonLines,
}

impl EmbeddingFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "jsonl" | "ndjson" => Some(Self::JsonLines),
            _ => None,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "csv" => Ok(Self::Csv),
            "jsonl" | "json-lines" => Ok(Self::JsonLines),
            other => Err(Error::InvalidArgument(format!("unknown embedding format `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    label: String,
    features: Vec<f64>,
}

/// Reads embedding-space examples. Every record must have the same width.
pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<Vec<RawExample>> {
    let file = File::open(path)?;
    let out = match format {
        EmbeddingFormat::Csv => read_csv(BufReader::new(file))?,
        EmbeddingFormat::JsonLines => read_jsonl(BufReader::new(file))?,
    };
    if out.is_empty() {
        return Err(Error::Empty("embedding file"));
    }
    Ok(out)
}

fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<RawExample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::Empty("embedding file")),
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    if header.get(0).map(str::trim) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `label`".into(),
        });
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "header declares no feature columns".into(),
        });
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name.trim() != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column `f{i}`, found `{name}`"),
            });
        }
    }
    let mut out = Vec::new();
    for (n, record) in records.enumerate() {
        let line = n + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        if record.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 1, record.len()),
            });
        }
        let label = record.get(0).unwrap_or_default().to_owned();
        let features = record
            .iter()
            .skip(1)
            .map(|f| parse_feature(f, line))
            .collect::<Result<Vec<f64>>>()?;
        out.push(
            RawExample::new(features, Space::Embedding, label).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

fn csv_error(err: csv::Error, line: usize) -> Error {
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

fn parse_feature(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("non-numeric feature `{field}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite feature `{field}`"),
        });
    }
    Ok(v)
}

fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(rec.features.len());
        if rec.features.len() != expected || expected == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {expected} features, found {}", rec.features.len()),
            });
        }
        out.push(
            RawExample::new(rec.features, Space::Embedding, rec.label).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Writes examples in `format`; values use shortest round-trip formatting.
pub fn write_embeddings(path: &Path, examples: &[RawExample], format: EmbeddingFormat) -> Result<()> {
    let dim = examples
        .first()
        .map(|e| e.input.len())
        .ok_or(Error::Empty("examples"))?;
    if let Some(bad) = examples.iter().find(|e| e.input.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.input.len(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        EmbeddingFormat::Csv => {
            if examples.iter().any(|e| e.label.as_str().contains([',', '"', '\n'])) {
                return Err(Error::InvalidArgument(
                    "labels may not contain commas, quotes or newlines".into(),
                ));
            }
            write!(w, "label")?;
            for i in 0..dim {
                write!(w, ",f{i}")?;
            }
            writeln!(w)?;
            for e in examples {
                write!(w, "{}", e.label)?;
                for v in &e.input {
                    write!(w, ",{v:?}")?;
                }
                writeln!(w)?;
            }
        }
        EmbeddingFormat::JsonLines => {
            for e in examples {
                let rec = JsonRecord {
                    label: e.label.to_string(),
                    features: e.input.clone(),
                };
                serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
