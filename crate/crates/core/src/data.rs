//! Synthetic partial-domain toy data, CSV ingestion and paired batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::rng::{RngStreams, STREAM_DATA};
use crate::tensor::Tensor;
use crate::theory::OracleContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Target = 0,
    Source = 1,
}

impl Domain {
    pub fn label(self) -> f64 {
        match self {
            Domain::Target => 0.0,
            Domain::Source => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Option<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Result<Tensor> {
        self.features_of(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn features_of(&self, idx: &[usize]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            values.extend_from_slice(&self.samples[i].x);
        }
        Ok(Tensor::matrix(idx.len(), self.dim, values)?)
    }

    /// Labels of every sample; fails if any sample is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| s.y.ok_or_else(|| Error::Invalid(format!("sample {i} has no label"))))
            .collect()
    }

    /// Copy with labels removed, as the unlabeled target domain is seen in training.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            dim: self.dim,
            samples: self
                .samples
                .iter()
                .map(|s| Sample { y: None, ..s.clone() })
                .collect(),
        }
    }
}

/// Geometry of the toy problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_source_classes: usize,
    pub shared_classes: Vec<usize>,
    pub samples_per_class: usize,
    /// Class means; `None` places them evenly on a circle of radius
    /// [`DEFAULT_RADIUS`] in the first two coordinates, in class order.
    #[serde(default)]
    pub cluster_means: Option<Vec<Vec<f64>>>,
    pub cluster_std: f64,
    /// Rotation (radians) of the target class means in the first two coordinates.
    pub target_rotation: f64,
    pub target_translation: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub const DEFAULT_RADIUS: f64 = 2.0;

/// The default five-class layout: points on a circle of radius 1.8 at these
/// angles (degrees), one per class. Every shared class sits next to an
/// outlier class in the direction the target shift carries it, and no two
/// shared classes drift into each other.
pub const DEFAULT_LAYOUT_RADIUS: f64 = 1.8;
pub const DEFAULT_LAYOUT_DEGREES: [f64; 5] = [210.0, 354.0, 138.0, 66.0, 282.0];

pub fn default_layout() -> Vec<Vec<f64>> {
    DEFAULT_LAYOUT_DEGREES
        .iter()
        .map(|d| {
            let (s, c) = d.to_radians().sin_cos();
            vec![DEFAULT_LAYOUT_RADIUS * c, DEFAULT_LAYOUT_RADIUS * s]
        })
        .collect()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            num_source_classes: 5,
            shared_classes: vec![0, 1, 2],
            samples_per_class: 100,
            cluster_means: Some(default_layout()),
            cluster_std: 0.35,
            target_rotation: 0.3,
            target_translation: vec![0.5, 0.5],
            seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return invalid("synthetic data needs at least 2 dimensions");
        }
        if self.num_source_classes == 0 || self.samples_per_class == 0 {
            return invalid("class count and samples per class must be positive");
        }
        if self.shared_classes.is_empty() {
            return invalid("shared class set is empty");
        }
        let mut seen = vec![false; self.num_source_classes];
        for &c in &self.shared_classes {
            if c >= self.num_source_classes {
                return invalid(format!(
                    "shared class {c} not among {} source classes",
                    self.num_source_classes
                ));
            }
            if std::mem::replace(&mut seen[c], true) {
                return invalid(format!("shared class {c} listed twice"));
            }
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return invalid("cluster_std must be finite and nonnegative");
        }
        if self.target_translation.len() != self.dim {
            return invalid("target_translation length must equal dim");
        }
        if let Some(means) = &self.cluster_means {
            if means.len() != self.num_source_classes || means.iter().any(|m| m.len() != self.dim) {
                return invalid("cluster_means must hold one dim-length point per class");
            }
        }
        Ok(())
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.cluster_means {
            return m.clone();
        }
        let k = self.num_source_classes as f64;
        (0..self.num_source_classes)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k;
                let mut p = vec![0.0; self.dim];
                p[0] = DEFAULT_RADIUS * angle.cos();
                p[1] = DEFAULT_RADIUS * angle.sin();
                p
            })
            .collect()
    }

    /// Spec with generated means and the seed written out explicitly.
    pub fn resolved(&self, fallback_seed: u64) -> Self {
        Self {
            cluster_means: Some(self.means()),
            seed: Some(self.seed.unwrap_or(fallback_seed)),
            ..self.clone()
        }
    }

    /// Where the target cluster of class `c` is centered.
    pub fn target_mean(&self, c: usize) -> Vec<f64> {
        let m = &self.means()[c];
        let (s, co) = self.target_rotation.sin_cos();
        let mut out = m.clone();
        out[0] = co * m[0] - s * m[1];
        out[1] = s * m[0] + co * m[1];
        out.iter_mut()
            .zip(&self.target_translation)
            .for_each(|(o, t)| *o += t);
        out
    }
}

/// Labeled source, unlabeled target, and the oracle holding target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub source: Dataset,
    pub target: Dataset,
    pub oracle: OracleContext,
}

pub fn generate_toy(spec: &SyntheticSpec, fallback_seed: u64) -> Result<ToyData> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(fallback_seed);
    let mut rng = RngStreams::new(seed).stream(STREAM_DATA);
    let means = spec.means();
    let normal = Normal::new(0.0, spec.cluster_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let draw = |center: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        center.iter().map(|c| c + normal.sample(rng)).collect()
    };
    let mut source = Vec::with_capacity(spec.num_source_classes * spec.samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            source.push(Sample {
                x: draw(mean, &mut rng),
                y: Some(c),
                domain: Domain::Source,
            });
        }
    }
    let mut target = Vec::new();
    let mut labels = Vec::new();
    for &c in &spec.shared_classes {
        let center = spec.target_mean(c);
        for _ in 0..spec.samples_per_class {
            target.push(Sample {
                x: draw(&center, &mut rng),
                y: None,
                domain: Domain::Target,
            });
            labels.push(c);
        }
    }
    Ok(ToyData {
        source: Dataset {
            dim: spec.dim,
            samples: source,
        },
        target: Dataset {
            dim: spec.dim,
            samples: target,
        },
        oracle: OracleContext::new(spec.shared_classes.clone(), labels),
    })
}

/// Sidecar describing a CSV dataset pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_source_classes: usize,
    /// Oracle evaluation only.
    #[serde(default)]
    pub shared_classes: Option<Vec<usize>>,
}

impl DatasetMeta {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `x0,...,x{d-1},y,domain` with shortest round-trip decimal reals.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    for j in 0..data.dim {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("y,domain\n");
    for s in &data.samples {
        for v in &s.x {
            out.push_str(&format!("{v},"));
        }
        if let Some(y) = s.y {
            out.push_str(&y.to_string());
        }
        out.push_str(&format!(",{}\n", s.domain as u8));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let name = path.display().to_string();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let fmt = |msg: String| Error::Format {
        path: name.clone(),
        msg,
    };
    if cols.len() < 3 || cols[cols.len() - 2] != "y" || cols[cols.len() - 1] != "domain" {
        return Err(fmt("header must be x0,...,x{d-1},y,domain".into()));
    }
    let dim = cols.len() - 2;
    for (j, c) in cols[..dim].iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(fmt(format!("column {j} is '{c}', expected 'x{j}'")));
        }
    }
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |msg: String| Error::Parse {
            path: name.clone(),
            line,
            msg,
        };
        if record.len() != dim + 2 {
            return Err(fmt(format!(
                "line {line}: {} fields, header has {}",
                record.len(),
                dim + 2
            )));
        }
        let x = record
            .iter()
            .take(dim)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse(format!("bad real '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let yf = &record[dim];
        let y = if yf.is_empty() {
            None
        } else {
            Some(yf.parse::<usize>().map_err(|_| parse(format!("bad label '{yf}'")))?)
        };
        let domain = match &record[dim + 1] {
            "0" => Domain::Target,
            "1" => Domain::Source,
            other => return Err(parse(format!("domain must be 0 or 1, got '{other}'"))),
        };
        if domain == Domain::Source && y.is_none() {
            return Err(parse("source rows must be labeled".into()));
        }
        samples.push(Sample { x, y, domain });
    }
    Ok(Dataset { dim, samples })
}

/// Index pairs for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One epoch of equal-sized source/target batches. The larger domain is
/// covered by a shuffled pass (the last batch topped up from the front of
/// the same permutation); the smaller domain is drawn from concatenated
/// fresh permutations.
#[derive(Debug)]
pub struct BatchIterator {
    batches: std::vec::IntoIter<Batch>,
}

impl BatchIterator {
    pub fn new<R: Rng>(n_source: usize, n_target: usize, batch_size: usize, rng: &mut R) -> Result<Self> {
        if n_source == 0 || n_target == 0 {
            return invalid("cannot batch an empty dataset");
        }
        if batch_size == 0 || batch_size > n_source.min(n_target) {
            return invalid(format!(
                "batch size {batch_size} must be in 1..={}",
                n_source.min(n_target)
            ));
        }
        let large = n_source.max(n_target);
        let small = n_source.min(n_target);
        let steps = large.div_ceil(batch_size);
        let mut main: Vec<usize> = (0..large).collect();
        main.shuffle(rng);
        let mut main_stream = main.clone();
        main_stream.extend_from_slice(&main[..steps * batch_size - large]);
        let mut other_stream = Vec::with_capacity(steps * batch_size);
        while other_stream.len() < steps * batch_size {
            let mut perm: Vec<usize> = (0..small).collect();
            perm.shuffle(rng);
            other_stream.extend(perm);
        }
        other_stream.truncate(steps * batch_size);
        let source_is_large = n_source >= n_target;
        let batches = (0..steps)
            .map(|s| {
                let a = main_stream[s * batch_size..(s + 1) * batch_size].to_vec();
                let b = other_stream[s * batch_size..(s + 1) * batch_size].to_vec();
                if source_is_large {
                    Batch { source: a, target: b }
                } else {
                    Batch { source: b, target: a }
                }
            })
            .collect::<Vec<_>>();
        Ok(Self {
            batches: batches.into_iter(),
        })
    }
}

impl Iterator for BatchIterator {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.batches.next()
    }
}

impl ExactSizeIterator for BatchIterator {
    fn len(&self) -> usize {
        self.batches.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_layout() {
        let d = generate_toy(&SyntheticSpec::default(), 0).unwrap();
        assert_eq!(d.source.len(), 500);
        assert_eq!(d.target.len(), 300);
        let classes: HashSet<usize> = d.source.labels().unwrap().into_iter().collect();
        assert_eq!(classes, (0..5).collect());
        let tclasses: HashSet<usize> = d.oracle.target_labels.iter().copied().collect();
        assert_eq!(tclasses, [0, 1, 2].into_iter().collect());
        assert!(d.target.samples.iter().all(|s| s.y.is_none()));
        assert!(d.source.samples.iter().all(|s| s.domain == Domain::Source));
    }

    #[test]
    fn zero_noise_zero_shift_hits_means() {
        let spec = SyntheticSpec {
            cluster_std: 0.0,
            target_rotation: 0.0,
            target_translation: vec![0.0, 0.0],
            ..SyntheticSpec::default()
        };
        let d = generate_toy(&spec, 3).unwrap();
        let means = spec.means();
        for (s, &c) in d.target.samples.iter().zip(&d.oracle.target_labels) {
            assert_eq!(s.x, means[c]);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_toy(&spec, 9).unwrap(), generate_toy(&spec, 9).unwrap());
        assert_ne!(generate_toy(&spec, 9).unwrap(), generate_toy(&spec, 10).unwrap());
    }

    #[test]
    fn invalid_class_sets_rejected() {
        for shared in [vec![], vec![5], vec![0, 0]] {
            let spec = SyntheticSpec {
                shared_classes: shared,
                ..SyntheticSpec::default()
            };
            assert!(generate_toy(&spec, 0).is_err());
        }
    }

    #[test]
    fn cluster_means_within_three_standard_errors() {
        let spec = SyntheticSpec {
            samples_per_class: 400,
            ..SyntheticSpec::default()
        };
        let d = generate_toy(&spec, 1).unwrap();
        let n = spec.samples_per_class as f64;
        let tol = 3.0 * spec.cluster_std / n.sqrt();
        for (c, mean) in spec.means().iter().enumerate() {
            for (j, &mu) in mean.iter().enumerate().take(2) {
                let m: f64 = d
                    .source
                    .samples
                    .iter()
                    .filter(|s| s.y == Some(c))
                    .map(|s| s.x[j])
                    .sum::<f64>()
                    / n;
                assert!((m - mu).abs() < tol, "class {c} dim {j}: {m} vs {mu}");
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_toy(&SyntheticSpec::default(), 4).unwrap();
        let p = dir.path().join("s.csv");
        write_csv(&p, &d.source).unwrap();
        assert_eq!(load_csv(&p).unwrap(), d.source);
        let p = dir.path().join("t.csv");
        write_csv(&p, &d.target).unwrap();
        assert_eq!(load_csv(&p).unwrap(), d.target);
    }

    #[test]
    fn csv_parsing_examples_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "x0,x1,y,domain\n0.5,-1,2,1\n3,4,,0\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples[0].y, Some(2));
        assert_eq!(d.samples[1].y, None);
        assert_eq!(d.samples[1].domain, Domain::Target);

        fs::write(&p, "x0,x1,y,domain\n0.5,-1,2,1\n3,abc,,0\n").unwrap();
        match load_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "x0,x1,y,domain\n0.5,2,1\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Format { .. })));
        fs::write(&p, "a,b,y,domain\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn full_batch_epoch() {
        let mut rng = RngStreams::new(0).stream("shuffle");
        let batches: Vec<Batch> = BatchIterator::new(10, 10, 10, &mut rng).unwrap().collect();
        assert_eq!(batches.len(), 1);
        let s: HashSet<usize> = batches[0].source.iter().copied().collect();
        let t: HashSet<usize> = batches[0].target.iter().copied().collect();
        assert_eq!(s.len(), 10);
        assert_eq!(t.len(), 10);
    }

    #[test]
    fn batches_are_deterministic_and_cover_larger_domain() {
        let run = || {
            let mut rng = RngStreams::new(5).stream("shuffle");
            let mut all = Vec::new();
            for _ in 0..2 {
                all.extend(BatchIterator::new(50, 30, 8, &mut rng).unwrap());
            }
            all
        };
        let a = run();
        assert_eq!(a, run());
        let first_epoch = &a[..50usize.div_ceil(8)];
        let covered: HashSet<usize> = first_epoch.iter().flat_map(|b| b.source.clone()).collect();
        assert_eq!(covered.len(), 50);
        assert!(first_epoch.iter().all(|b| b.source.len() == 8 && b.target.len() == 8));
        assert!(first_epoch.iter().flat_map(|b| &b.target).all(|&i| i < 30));
    }

    #[test]
    fn batch_errors() {
        let mut rng = RngStreams::new(0).stream("shuffle");
        assert!(BatchIterator::new(0, 10, 1, &mut rng).is_err());
        assert!(BatchIterator::new(10, 5, 6, &mut rng).is_err());
    }
}
