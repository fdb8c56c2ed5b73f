//! Datasets, splits, file formats and the planted-subnetwork generator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::architecture::{prune, Architecture, PrunedNet};
use crate::error::{DataError, Error, Result};
use crate::rng;
use crate::space::{SearchSpaceSpec, SliceId, SliceLayout};
use crate::supernet::{InitConfig, SuperNet};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_shape: [usize; 3],
    num_classes: usize,
    /// Row-major `[len, C, H, W]`.
    inputs: Vec<f64>,
    labels: Vec<usize>,
    /// Stable example ids; splits keep them, so disjointness is checkable.
    ids: Vec<usize>,
    split: Split,
    provenance: String,
}

impl Dataset {
    pub fn new(
        input_shape: [usize; 3],
        num_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let width: usize = input_shape.iter().product();
        if width == 0 || num_classes == 0 {
            return Err(DataError::Invalid(format!(
                "input shape {input_shape:?} with {num_classes} classes"
            ))
            .into());
        }
        if inputs.len() != labels.len() * width {
            return Err(DataError::Invalid(format!(
                "{} input values for {} examples of width {width}",
                inputs.len(),
                labels.len()
            ))
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOverflow {
                label,
                classes: num_classes,
                index,
            }
            .into());
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("non-finite input value in example {}", i / width)).into());
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            input_shape,
            num_classes,
            inputs,
            labels,
            ids,
            split: Split::Full,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    fn width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.inputs[i * w..(i + 1) * w]
    }

    /// Inputs and labels of the listed examples as a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(DataError::Empty.into());
        }
        let mut data = Vec::with_capacity(indices.len() * self.width());
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let [c, h, w] = self.input_shape;
        let x = Tensor::new(vec![indices.len(), c, h, w], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn all(&self) -> Result<(Tensor, Vec<usize>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    fn subset(&self, indices: &[usize], split: Split) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.width());
        for &i in indices {
            inputs.extend_from_slice(self.example(i));
        }
        Self {
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            split,
            provenance: self.provenance.clone(),
        }
    }

    /// Fraction of examples carrying the most common label.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        *counts.iter().max().expect("classes > 0") as f64 / self.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub has_header: bool,
}

/// Flat-vector inputs, last column the class label.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .from_path(path)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    let width: usize = schema.input_shape.iter().product();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::BadRow {
            row,
            message: e.to_string(),
        })?;
        if record.len() != width + 1 {
            return Err(DataError::BadRow {
                row,
                message: format!("{} fields, expected {}", record.len(), width + 1),
            }
            .into());
        }
        for field in record.iter().take(width) {
            let v: f64 = field.trim().parse().map_err(|_| DataError::BadRow {
                row,
                message: format!("{field:?} is not a number"),
            })?;
            inputs.push(v);
        }
        let raw = record[width].trim();
        let label: usize = raw.parse().map_err(|_| DataError::BadRow {
            row,
            message: format!("label {raw:?} is not a class index"),
        })?;
        if label >= schema.num_classes {
            return Err(DataError::LabelOverflow {
                label,
                classes: schema.num_classes,
                index: row,
            }
            .into());
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::Empty.into());
    }
    Dataset::new(
        schema.input_shape,
        schema.num_classes,
        inputs,
        labels,
        format!("csv:{}", path.display()),
    )
}

pub fn write_csv(dataset: &Dataset, path: &Path, header: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    let width = dataset.width();
    let csv_err = |e: csv::Error| Error::from(DataError::Invalid(e.to_string()));
    if header {
        let mut names: Vec<String> = (0..width).map(|i| format!("x{i}")).collect();
        names.push("label".into());
        w.write_record(&names).map_err(csv_err)?;
    }
    for i in 0..dataset.len() {
        let mut fields: Vec<String> = dataset.example(i).iter().map(|v| v.to_string()).collect();
        fields.push(dataset.labels[i].to_string());
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const IDX_U8: u8 = 0x08;

fn idx_header(bytes: &[u8], what: &str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(DataError::MalformedHeader(format!("{what}: file shorter than the magic number")).into());
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::MalformedHeader(format!("{what}: magic must start with two zero bytes")).into());
    }
    if bytes[2] != IDX_U8 {
        return Err(DataError::MalformedHeader(format!(
            "{what}: element type 0x{:02x} is not unsigned byte",
            bytes[2]
        ))
        .into());
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(DataError::MalformedHeader(format!("{what}: header declares {ndim} dims but is cut short")).into());
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(DataError::MalformedHeader(format!("{what}: zero dimension in {dims:?}")).into());
    }
    let expected: usize = dims.iter().product();
    let found = bytes.len() - header;
    if found < expected {
        return Err(DataError::TruncatedPayload { expected, found }.into());
    }
    Ok((dims, header))
}

/// IDX image/label pair: `[N, H, W]` or `[N, C, H, W]` u8 images scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (dims, ih) = idx_header(&img, "images")?;
    let input_shape = match dims[..] {
        [_, h, w] => [1, h, w],
        [_, c, h, w] => [c, h, w],
        _ => {
            return Err(DataError::MalformedHeader(format!("images: expected 3 or 4 dims, got {}", dims.len())).into())
        }
    };
    let (ldims, lh) = idx_header(&lab, "labels")?;
    if ldims.len() != 1 {
        return Err(DataError::MalformedHeader(format!("labels: expected 1 dim, got {}", ldims.len())).into());
    }
    if ldims[0] != dims[0] {
        return Err(DataError::MalformedHeader(format!(
            "{} images but {} labels",
            dims[0], ldims[0]
        ))
        .into());
    }
    let n = dims[0];
    let width: usize = input_shape.iter().product();
    let inputs = img[ih..ih + n * width].iter().map(|&b| b as f64 / 255.0).collect();
    let mut out = Vec::with_capacity(n);
    for (index, &b) in lab[lh..lh + n].iter().enumerate() {
        let label = b as usize;
        if label >= num_classes {
            return Err(DataError::LabelOverflow {
                label,
                classes: num_classes,
                index,
            }
            .into());
        }
        out.push(label);
    }
    Dataset::new(input_shape, num_classes, inputs, out, format!("idx:{}", images.display()))
}

/// Writes `pixels` (u8, `[N, C, H, W]` flattened) and labels in IDX form.
pub fn write_idx(images: &Path, labels: &Path, dims: &[usize], pixels: &[u8], label_bytes: &[u8]) -> Result<()> {
    let mut img = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = vec![0, 0, IDX_U8, 1];
    lab.extend_from_slice(&(label_bytes.len() as u32).to_be_bytes());
    lab.extend_from_slice(label_bytes);
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

/// Deterministic shuffled partition into train, validation and test.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")).into());
    }
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, &mut rng::stream(seed, "data/split", 0));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let parts = [
        (&order[..n_train], Split::Train, fractions[0]),
        (&order[n_train..n_train + n_val], Split::Val, fractions[1]),
        (&order[n_train + n_val..], Split::Test, fractions[2]),
    ];
    for (idx, which, f) in &parts {
        if *f > 0.0 && idx.is_empty() {
            return Err(DataError::EmptySplit(which.name()).into());
        }
    }
    Ok((
        dataset.subset(parts[0].0, Split::Train),
        dataset.subset(parts[1].0, Split::Val),
        dataset.subset(parts[2].0, Split::Test),
    ))
}

/// A dataset labelled by a hidden sub-network of a teacher super-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub space: SearchSpaceSpec,
    /// Active slices of the planted architecture.
    pub planted: Vec<SliceId>,
    pub teacher_seed: u64,
    /// Probability that a label is replaced by a different class.
    pub noise: f64,
    pub examples: usize,
    #[serde(default = "default_teacher_gain")]
    pub teacher_gain: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_teacher_gain() -> f64 {
    InitConfig::default().weight_gain
}

fn default_retries() -> u32 {
    8
}

impl PlantedSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.space.violations().into_iter().map(|s| format!("planted.space: {s}")).collect();
        if !(0.0..1.0).contains(&self.noise) {
            v.push(format!("planted.noise must lie in [0, 1), got {}", self.noise));
        }
        if self.examples == 0 {
            v.push("planted.examples must be positive".into());
        }
        if v.is_empty() {
            match self.architecture() {
                Ok(a) if !a.has_path() => v.push("planted architecture has a layer with no active slice".into()),
                Err(e) => v.push(format!("planted architecture: {e}")),
                Ok(_) => {}
            }
        }
        v
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let layout = SliceLayout::new(&self.space);
        let mut bits = vec![false; layout.num_slices()];
        for id in &self.planted {
            let i = layout
                .index_of(*id)
                .ok_or_else(|| Error::InvalidArgument(format!("slice {id:?} is not in the search space")))?;
            bits[i] = true;
        }
        Architecture::new(&layout, bits)
    }
}

/// Teacher for one seed with its standard-normal inputs. The head bias is
/// centred on those inputs so classes come out roughly balanced.
fn teacher_for_seed(spec: &PlantedSpec, arch: &Architecture, seed: u64) -> Result<(PrunedNet, Tensor)> {
    let [c, h, w] = spec.space.input_shape;
    let classes = spec.space.num_classes;
    let init = InitConfig {
        weight_gain: spec.teacher_gain,
        ..InitConfig::default()
    };
    let mut teacher = SuperNet::build(&spec.space, seed, &init)?;
    let mut s = rng::stream(seed, "data/inputs", 0);
    let inputs = (0..spec.examples * c * h * w).map(|_| rng::standard_normal(&mut s)).collect();
    let x = Tensor::new(vec![spec.examples, c, h, w], inputs)?;
    let raw = prune(&teacher, arch)?.forward(&x)?;
    let mut centre = vec![0.0; classes];
    for row in raw.data().chunks(classes) {
        for (m, v) in centre.iter_mut().zip(row) {
            *m -= v / spec.examples as f64;
        }
    }
    teacher.head_mut().1.data_mut().copy_from_slice(&centre);
    Ok((prune(&teacher, arch)?, x))
}

/// Labels are the teacher's argmax, then flipped to a uniformly chosen other
/// class with probability `noise`. A teacher that assigns a single class is
/// replaced by the next seed.
pub fn generate_planted(spec: &PlantedSpec) -> Result<Dataset> {
    let bad = spec.violations();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    let arch = spec.architecture()?;
    let classes = spec.space.num_classes;
    for attempt in 0..=spec.max_retries {
        let seed = spec.teacher_seed.wrapping_add(attempt as u64);
        let (teacher, x) = teacher_for_seed(spec, &arch, seed)?;
        let mut labels = kernels::argmax_rows(&teacher.forward(&x)?);
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let mut noise = rng::stream(seed, "data/label_noise", 0);
        for l in labels.iter_mut() {
            if rng::open_uniform(&mut noise) < spec.noise {
                let shift = 1 + (rng::open_uniform(&mut noise) * (classes - 1) as f64) as usize;
                *l = (*l + shift.min(classes - 1)) % classes;
            }
        }
        return Dataset::new(
            spec.space.input_shape,
            classes,
            x.into_data(),
            labels,
            format!("planted:teacher_seed={seed}"),
        );
    }
    Err(DataError::Invalid(format!(
        "teacher produced a single class for {} consecutive seeds",
        spec.max_retries + 1
    ))
    .into())
}

/// The pruned teacher behind a dataset made by [`generate_planted`].
pub fn planted_teacher(spec: &PlantedSpec, dataset: &Dataset) -> Result<PrunedNet> {
    let seed: u64 = dataset
        .provenance()
        .strip_prefix("planted:teacher_seed=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidArgument("dataset was not generated from a planted spec".into()))?;
    Ok(teacher_for_seed(spec, &spec.architecture()?, seed)?.0)
}
