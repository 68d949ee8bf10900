//! Desk-scale training of a multi-branch linear hash model on synthetic
//! identity-labelled features.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codes::{read_f64, read_u32, read_u64, BinaryCode, CodeBank};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::losses::total_objective;

const MODEL_MAGIC: &[u8; 4] = b"DMIM";
const MODEL_VERSION: u8 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"DMIF";
const FEATURE_VERSION: u8 = 1;

pub const DATASET_CSV: &str = "dataset.csv";
pub const FEATURES_BIN: &str = "features.bin";

/// Named random sub-streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batching = 3,
    TestData = 4,
    Queries = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub samples: usize,
    pub identities: usize,
    pub cameras: usize,
    pub branches: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-sample noise.
    pub spread: f64,
    /// Standard deviation of the per-camera offset.
    pub camera_shift: f64,
    /// Standard deviation of identity centroids.
    pub centroid_scale: f64,
    pub seed: u64,
    pub split: Split,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            samples: 4000,
            identities: 50,
            cameras: 4,
            branches: 3,
            feature_dim: 32,
            spread: 0.8,
            camera_shift: 0.5,
            centroid_scale: 1.0,
            seed: 7,
            split: Split::Train,
        }
    }
}

/// Identity-labelled samples with one feature vector per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub branches: usize,
    pub feature_dim: usize,
    /// `features[i][b]` is the branch-`b` feature of sample `i`.
    pub features: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<u32>,
    pub cameras: Vec<u32>,
}

/// Samples are assigned round-robin to identities; the `t`-th sample of an
/// identity is seen by camera `(t + label) mod cameras`.
pub fn generate(params: &DatasetParams) -> Result<SyntheticDataset> {
    let p = params;
    if p.identities < 2 || p.samples < 2 * p.identities {
        return Err(Error::param(format!(
            "need at least 2 identities and 2 samples per identity (n = {}, C = {})",
            p.samples, p.identities
        )));
    }
    if p.cameras < 2 || p.branches == 0 || p.feature_dim == 0 {
        return Err(Error::param(
            "need at least 2 cameras, 1 branch and 1 feature dimension",
        ));
    }
    if !(p.spread >= 0.0 && p.camera_shift >= 0.0 && p.centroid_scale >= 0.0) {
        return Err(Error::param("noise scales must be non-negative"));
    }
    let stream = match p.split {
        Split::Train => Stream::Data,
        Split::Test => Stream::TestData,
    };
    let mut rng = stream_rng(p.seed, stream);
    let gaussian = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..p.feature_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let centroids: Vec<Vec<Vec<f64>>> = (0..p.identities)
        .map(|_| (0..p.branches).map(|_| gaussian(p.centroid_scale, &mut rng)).collect())
        .collect();
    let offsets: Vec<Vec<Vec<f64>>> = (0..p.cameras)
        .map(|_| (0..p.branches).map(|_| gaussian(p.camera_shift, &mut rng)).collect())
        .collect();

    let mut features = Vec::with_capacity(p.samples);
    let mut labels = Vec::with_capacity(p.samples);
    let mut cameras = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let label = i % p.identities;
        let camera = (i / p.identities + label) % p.cameras;
        let row = (0..p.branches)
            .map(|b| {
                let noise = gaussian(p.spread, &mut rng);
                centroids[label][b]
                    .iter()
                    .zip(&offsets[camera][b])
                    .zip(noise)
                    .map(|((c, o), e)| c + o + e)
                    .collect()
            })
            .collect();
        features.push(row);
        labels.push(label as u32);
        cameras.push(camera as u32);
    }
    Ok(SyntheticDataset {
        branches: p.branches,
        feature_dim: p.feature_dim,
        features,
        labels,
        cameras,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarRow {
    id: usize,
    label: u32,
    camera: u32,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn identities(&self) -> usize {
        self.labels.iter().max().map_or(0, |&l| l as usize + 1)
    }

    /// Sample indices grouped by label.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.identities()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l as usize].push(i);
        }
        groups
    }

    /// Writes `dataset.csv` (`id,label,camera`) and `features.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
        let csv_path = dir.join(DATASET_CSV);
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::from(e).at(&csv_path))?;
        for (id, (&label, &camera)) in self.labels.iter().zip(&self.cameras).enumerate() {
            w.serialize(SidecarRow { id, label, camera })?;
        }
        w.flush()?;

        let bin_path = dir.join(FEATURES_BIN);
        let f = File::create(&bin_path).map_err(|e| Error::from(e).at(&bin_path))?;
        self.write_features(BufWriter::new(f)).map_err(|e| e.at(&bin_path))
    }

    fn write_features<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&[FEATURE_VERSION])?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.branches as u32).to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        for v in self.features.iter().flatten().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let csv_path = dir.join(DATASET_CSV);
        let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| Error::from(e).at(&csv_path))?;
        let mut labels = Vec::new();
        let mut cameras = Vec::new();
        for (expected, row) in rdr.deserialize::<SidecarRow>().enumerate() {
            let row = row.map_err(|e| Error::from(e).at(&csv_path))?;
            if row.id != expected {
                return Err(
                    Error::format("dataset sidecar", format!("row {expected} has id {}", row.id)).at(&csv_path),
                );
            }
            labels.push(row.label);
            cameras.push(row.camera);
        }

        let bin_path = dir.join(FEATURES_BIN);
        let f = File::open(&bin_path).map_err(|e| Error::from(e).at(&bin_path))?;
        let (branches, feature_dim, features) = read_features(BufReader::new(f)).map_err(|e| e.at(&bin_path))?;
        if features.len() != labels.len() {
            return Err(Error::format(
                "dataset",
                format!("{} feature rows but {} sidecar rows", features.len(), labels.len()),
            )
            .at(dir));
        }
        Ok(SyntheticDataset {
            branches,
            feature_dim,
            features,
            labels,
            cameras,
        })
    }
}

#[allow(clippy::type_complexity)]
fn read_features<R: Read>(mut r: R) -> Result<(usize, usize, Vec<Vec<Vec<f64>>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format("feature matrix", "bad magic"));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != FEATURE_VERSION {
        return Err(Error::format(
            "feature matrix",
            format!("unsupported version {}", version[0]),
        ));
    }
    let n = read_u64(&mut r)? as usize;
    let branches = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    if branches == 0 || dim == 0 {
        return Err(Error::format("feature matrix", "zero branch count or dimension"));
    }
    let mut features = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let row = (0..branches)
            .map(|_| (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        features.push(row);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("feature matrix", "trailing bytes"));
    }
    Ok((branches, dim, features))
}

/// A mini-batch of raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<u32>,
    pub cameras: Vec<u32>,
    /// Dataset indices the samples were drawn from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_indices(ds: &SyntheticDataset, indices: Vec<usize>) -> Self {
        Batch {
            features: indices.iter().map(|&i| ds.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| ds.labels[i]).collect(),
            cameras: indices.iter().map(|&i| ds.cameras[i]).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `identities` distinct identities with `per_identity` samples each; samples
/// are drawn without replacement when the identity has enough of them.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    ds: &SyntheticDataset,
    identities: usize,
    per_identity: usize,
    rng: &mut R,
) -> Result<Batch> {
    let groups = ds.by_identity();
    if identities == 0 || per_identity == 0 {
        return Err(Error::param("P and K must be positive"));
    }
    if identities > groups.len() {
        return Err(Error::param(format!(
            "cannot draw {identities} identities from {}",
            groups.len()
        )));
    }
    let mut indices = Vec::with_capacity(identities * per_identity);
    for id in index::sample(rng, groups.len(), identities) {
        let pool = &groups[id];
        if pool.len() >= per_identity {
            indices.extend(
                index::sample(rng, pool.len(), per_identity)
                    .into_iter()
                    .map(|j| pool[j]),
            );
        } else {
            indices.extend((0..per_identity).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }
    Ok(Batch::from_indices(ds, indices))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Triplet margin.
    pub alpha: f64,
    /// Classification weight.
    pub beta: f64,
    /// SAMI weight.
    pub gamma: f64,
    /// Table count `m` used for SAMI keys.
    pub tables: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 1.0,
            beta: 2.0,
            gamma: 0.5,
            tables: 4,
        }
    }
}

/// Trainable parameters: one hash projection and one classifier head per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub projections: Vec<Linear>,
    pub classifiers: Vec<Linear>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Linear>| v.iter().map(|l| Linear::zeros(l.outputs, l.inputs)).collect();
        Params {
            projections: z(&self.projections),
            classifiers: z(&self.classifiers),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.projections
            .iter()
            .chain(&self.classifiers)
            .flat_map(Linear::params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.projections
            .iter_mut()
            .chain(&mut self.classifiers)
            .flat_map(Linear::params_mut)
    }

    pub fn count(&self) -> usize {
        self.iter().count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.count(), "parameter vector length");
        self.iter_mut().zip(values).for_each(|(p, v)| *p = *v);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashModel {
    pub params: Params,
    pub hyper: HyperParams,
}

impl HashModel {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation from the init stream.
    pub fn init(
        branches: usize,
        feature_dim: usize,
        code_bits_per_branch: usize,
        classes: usize,
        hyper: HyperParams,
        seed: u64,
    ) -> Result<Self> {
        if branches == 0 || feature_dim == 0 || code_bits_per_branch == 0 || classes < 2 {
            return Err(Error::param("model dimensions must be positive and classes >= 2"));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let projections = (0..branches)
            .map(|_| Linear::uniform(code_bits_per_branch, feature_dim, &mut rng))
            .collect();
        let classifiers = (0..branches)
            .map(|_| Linear::uniform(classes, feature_dim, &mut rng))
            .collect();
        Ok(HashModel {
            params: Params {
                projections,
                classifiers,
            },
            hyper,
        })
    }

    pub fn branches(&self) -> usize {
        self.params.projections.len()
    }

    pub fn code_bits_per_branch(&self) -> usize {
        self.params.projections[0].outputs
    }

    pub fn code_bits(&self) -> usize {
        self.branches() * self.code_bits_per_branch()
    }

    pub fn feature_dim(&self) -> usize {
        self.params.projections[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.params.classifiers[0].outputs
    }

    /// Pre-activation hash outputs, one vector per branch.
    pub fn activations(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if features.len() != self.branches() {
            return Err(Error::Dimension(format!(
                "{} branch features for a {}-branch model",
                features.len(),
                self.branches()
            )));
        }
        features
            .iter()
            .zip(&self.params.projections)
            .map(|(f, p)| p.forward(f))
            .collect()
    }

    /// `tanh` of the activations.
    pub fn relaxed(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .activations(features)?
            .into_iter()
            .map(|v| v.into_iter().map(f64::tanh).collect())
            .collect())
    }

    /// `sign` of the activations as the full code `[d; g; h]`.
    pub fn encode_sample(&self, features: &[Vec<f64>]) -> Result<BinaryCode> {
        BinaryCode::from_signs(&self.activations(features)?.concat())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&[MODEL_VERSION])?;
        for dim in [
            self.branches(),
            self.code_bits_per_branch(),
            self.feature_dim(),
            self.classes(),
            self.hyper.tables,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in [self.hyper.alpha, self.hyper.beta, self.hyper.gamma] {
            w.write_all(&v.to_le_bytes())?;
        }
        for b in 0..self.branches() {
            for layer in [&self.params.projections[b], &self.params.classifiers[b]] {
                for v in layer.params() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::format("model", "bad magic"));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != MODEL_VERSION {
            return Err(Error::format("model", format!("unsupported version {}", version[0])));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let [branches, bits, dim, classes, tables] = dims;
        if branches == 0 || bits == 0 || dim == 0 || classes == 0 || tables == 0 {
            return Err(Error::format("model", "zero dimension in header"));
        }
        let hyper = HyperParams {
            alpha: read_f64(&mut r)?,
            beta: read_f64(&mut r)?,
            gamma: read_f64(&mut r)?,
            tables,
        };
        let mut projections = Vec::with_capacity(branches);
        let mut classifiers = Vec::with_capacity(branches);
        for _ in 0..branches {
            for (outputs, dst) in [(bits, &mut projections), (classes, &mut classifiers)] {
                let mut layer = Linear::zeros(outputs, dim);
                for p in layer.params_mut() {
                    *p = read_f64(&mut r)?;
                }
                dst.push(layer);
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("model", "trailing bytes"));
        }
        Ok(HashModel {
            params: Params {
                projections,
                classifiers,
            },
            hyper,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::from(e).at(path))?;
        self.write_to(BufWriter::new(f)).map_err(|e| e.at(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::from(e).at(path))?;
        Self::read_from(BufReader::new(f)).map_err(|e| e.at(path))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Identities per batch (P).
    pub identities_per_batch: usize,
    /// Samples per identity (K).
    pub samples_per_identity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 160,
            learning_rate: 4e-4,
            weight_decay: 5e-4,
            identities_per_batch: 16,
            samples_per_identity: 4,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Short, high-step-size schedule for desk-scale runs.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            ..TrainConfig::default()
        }
    }

    /// Step size for a 0-based epoch: decayed tenfold at `T/2` and `3T/4`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = [self.epochs / 2, 3 * self.epochs / 4]
            .iter()
            .filter(|&&m| m > 0 && epoch >= m)
            .count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }

    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.samples_per_identity
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub triplet: f64,
    pub classification: f64,
    pub sami: f64,
}

/// One SGD step with decoupled weight decay on weights (not biases).
pub fn sgd_step(params: &mut Params, grads: &Params, lr: f64, weight_decay: f64) {
    let layers = params.projections.iter_mut().chain(&mut params.classifiers);
    let grad_layers = grads.projections.iter().chain(&grads.classifiers);
    for (layer, g) in layers.zip(grad_layers) {
        for (w, gw) in layer.weight.iter_mut().zip(&g.weight) {
            *w -= lr * (gw + weight_decay * *w);
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
}

/// Runs `T` epochs of `ceil(n / N)` PK-sampled steps each.
pub fn train(ds: &SyntheticDataset, mut model: HashModel, config: &TrainConfig) -> Result<(HashModel, Vec<EpochLoss>)> {
    if config.epochs == 0 || config.batch_size() < 2 {
        return Err(Error::param(
            "need at least one epoch and a batch of two or more samples",
        ));
    }
    if config.learning_rate.is_nan()
        || config.learning_rate <= 0.0
        || config.weight_decay.is_nan()
        || config.weight_decay < 0.0
    {
        return Err(Error::param(
            "learning rate must be positive and weight decay non-negative",
        ));
    }
    if ds.branches != model.branches() || ds.feature_dim != model.feature_dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} x {} features, model expects {} x {}",
            ds.branches,
            ds.feature_dim,
            model.branches(),
            model.feature_dim()
        )));
    }
    if ds.identities() > model.classes() {
        return Err(Error::Dimension(format!(
            "dataset has {} identities, classifier has {} classes",
            ds.identities(),
            model.classes()
        )));
    }
    let mut rng = stream_rng(config.seed, Stream::Batching);
    let steps = ds.len().div_ceil(config.batch_size());
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut acc = [0.0; 4];
        for step in 0..steps {
            let batch = sample_pk_batch(ds, config.identities_per_batch, config.samples_per_identity, &mut rng)?;
            let obj = total_objective(&batch, &model)?;
            if !obj.value.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, step {step} (triplet {}, classification {}, sami {}, lr {lr})",
                    obj.triplet, obj.classification, obj.sami
                )));
            }
            for (a, v) in acc
                .iter_mut()
                .zip([obj.value, obj.triplet, obj.classification, obj.sami])
            {
                *a += v / steps as f64;
            }
            sgd_step(&mut model.params, &obj.grads, lr, config.weight_decay);
        }
        trace.push(EpochLoss {
            epoch,
            learning_rate: lr,
            total: acc[0],
            triplet: acc[1],
            classification: acc[2],
            sami: acc[3],
        });
    }
    Ok((model, trace))
}

/// Codes for a dataset together with the labels, cameras and pre-hash
/// features needed for evaluation and re-ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBank {
    pub bank: CodeBank,
    pub labels: Vec<u32>,
    pub cameras: Vec<u32>,
    /// Per-sample branch features concatenated in branch order.
    pub features: Vec<Vec<f64>>,
}

pub fn encode(model: &HashModel, ds: &SyntheticDataset) -> Result<LabeledBank> {
    let mut bank = CodeBank::new(model.code_bits())?;
    for row in &ds.features {
        bank.push(&model.encode_sample(row)?)?;
    }
    Ok(LabeledBank {
        bank,
        labels: ds.labels.clone(),
        cameras: ds.cameras.clone(),
        features: ds.features.iter().map(|row| row.concat()).collect(),
    })
}

impl LabeledBank {
    /// Pairs an existing bank with the dataset it was encoded from.
    pub fn attach(bank: CodeBank, ds: &SyntheticDataset) -> Result<Self> {
        if bank.len() != ds.len() {
            return Err(Error::Dimension(format!(
                "bank holds {} codes but the dataset has {} samples",
                bank.len(),
                ds.len()
            )));
        }
        Ok(LabeledBank {
            bank,
            labels: ds.labels.clone(),
            cameras: ds.cameras.clone(),
            features: ds.features.iter().map(|row| row.concat()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> DatasetParams {
        DatasetParams {
            samples: 120,
            identities: 10,
            cameras: 3,
            branches: 3,
            feature_dim: 6,
            ..DatasetParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_params()).unwrap();
        let b = generate(&small_params()).unwrap();
        assert_eq!(a, b);
        let other = generate(&DatasetParams {
            split: Split::Test,
            ..small_params()
        })
        .unwrap();
        assert_ne!(a.features, other.features);
    }

    #[test]
    fn noiseless_identities_collapse() {
        let ds = generate(&DatasetParams {
            spread: 0.0,
            camera_shift: 0.0,
            ..small_params()
        })
        .unwrap();
        for group in ds.by_identity() {
            assert!(group.iter().all(|&i| ds.features[i] == ds.features[group[0]]));
        }
    }

    #[test]
    fn balanced_labels_and_camera_coverage() {
        let ds = generate(&DatasetParams {
            samples: 800,
            identities: 20,
            ..small_params()
        })
        .unwrap();
        let mut hist = vec![0; 20];
        for &l in &ds.labels {
            hist[l as usize] += 1;
        }
        assert_eq!(hist, vec![40; 20]);
        for group in ds.by_identity() {
            let cams: std::collections::BTreeSet<u32> = group.iter().map(|&i| ds.cameras[i]).collect();
            assert!(cams.len() >= 2);
        }
    }

    #[test]
    fn generation_rejects_bad_params() {
        assert!(generate(&DatasetParams {
            samples: 15,
            ..small_params()
        })
        .is_err());
        assert!(generate(&DatasetParams {
            identities: 1,
            ..small_params()
        })
        .is_err());
        assert!(generate(&DatasetParams {
            cameras: 1,
            ..small_params()
        })
        .is_err());
    }

    #[test]
    fn pk_batches() {
        let ds = generate(&DatasetParams {
            samples: 1000,
            identities: 20,
            ..small_params()
        })
        .unwrap();
        let mut rng = stream_rng(1, Stream::Batching);
        let batch = sample_pk_batch(&ds, 16, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 64);
        let mut counts = std::collections::BTreeMap::new();
        for &l in &batch.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&c| c == 4));
        for chunk in batch.indices.chunks(4) {
            let distinct: std::collections::BTreeSet<_> = chunk.iter().collect();
            assert_eq!(distinct.len(), 4);
        }

        let seq = |seed| {
            let mut rng = stream_rng(seed, Stream::Batching);
            (0..5)
                .map(|_| sample_pk_batch(&ds, 4, 3, &mut rng).unwrap().indices)
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert!(sample_pk_batch(&ds, 21, 2, &mut rng).is_err());

        // identities with fewer than K samples are drawn with replacement
        let batch = sample_pk_batch(&ds, 2, 80, &mut rng).unwrap();
        assert_eq!(batch.len(), 160);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..8).map(|e| cfg.learning_rate_at(e)).collect();
        assert_eq!(lrs[..4], [1.0; 4]);
        assert!((lrs[4] - 0.1).abs() < 1e-15 && (lrs[5] - 0.1).abs() < 1e-15);
        assert!((lrs[6] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn model_file_roundtrip() {
        let model = HashModel::init(3, 5, 4, 7, HyperParams::default(), 3).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DMIM");
        assert_eq!(buf.len(), 5 + 5 * 4 + 3 * 8 + 8 * model.params.count());
        assert_eq!(HashModel::read_from(&buf[..]).unwrap(), model);
        assert!(HashModel::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn dataset_files_roundtrip() {
        let ds = generate(&small_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(SyntheticDataset::load(dir.path()).unwrap(), ds);
        let header = std::fs::read_to_string(dir.path().join(DATASET_CSV)).unwrap();
        assert!(header.starts_with("id,label,camera\n0,0,0\n"));
    }

    #[test]
    fn encode_uses_sign_of_activation() {
        let ds = generate(&small_params()).unwrap();
        let model = HashModel::init(3, 6, 8, 10, HyperParams::default(), 1).unwrap();
        let bank = encode(&model, &ds).unwrap();
        assert_eq!(bank.bank.bits(), 24);
        for (i, row) in ds.features.iter().enumerate() {
            let act = model.activations(row).unwrap().concat();
            let relaxed = model.relaxed(row).unwrap().concat();
            let code = bank.bank.get(i);
            for (j, (a, u)) in act.iter().zip(&relaxed).enumerate() {
                assert_eq!(code.bit(j), *a >= 0.0);
                assert_eq!(code.bit(j), *u >= 0.0);
            }
        }
        assert_eq!(encode(&model, &ds).unwrap(), bank);
    }
}
