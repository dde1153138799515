//! Synthetic paired volume and attribute data with a planted signal.
//!
//! Positive subjects carry a brighter Gaussian blob, slightly displaced, and
//! shifted `apoe4`, `ptau181` and `fdg` distributions. Task B is task A with
//! additive perturbations; zero perturbations give identical distributions.
//!
//! Every sample draws from its own ChaCha stream keyed by
//! `(seed, task, index)`, so samples can be generated in any order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribute::{
    parse_tabular_csv, write_tabular_csv, AttributeRecord, AttributeSchema, AttributeValue, TabularRow,
};
use crate::error::{Error, Result};
use crate::model::Sample;
use crate::visual::{decode_volume, Volume};

pub const DATASET_FORMAT: &str = "vapf-synth-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    A,
    B,
}

impl Task {
    pub fn dir_name(self) -> &'static str {
        match self {
            Task::A => "task_A",
            Task::B => "task_B",
        }
    }

    fn id(self) -> u64 {
        match self {
            Task::A => 0,
            Task::B => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    /// Mean blob amplitude for labels 0 and 1.
    pub amplitude: [f64; 2],
    pub amplitude_std: f64,
    /// Blob centre per label, as fractions of each volume extent.
    pub center: [[f64; 3]; 2],
    /// Per-axis centre jitter in voxels.
    pub center_jitter: f64,
    /// Blob width in voxels.
    pub sigma: f64,
    pub noise_std: f64,
    /// Multiplier on the label-dependent attribute shifts.
    pub tabular_effect: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            amplitude: [1.0, 1.5],
            amplitude_std: 0.4,
            center: [[0.4, 0.5, 0.5], [0.6, 0.5, 0.5]],
            center_jitter: 3.0,
            sigma: 3.0,
            noise_std: 0.1,
            tabular_effect: 1.0,
        }
    }
}

/// Additive changes that turn task A into task B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    pub amplitude: [f64; 2],
    pub center: [f64; 3],
    pub sigma: f64,
    pub tabular_effect: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            amplitude: [0.1, 0.0],
            center: [0.0, 0.05, 0.0],
            sigma: 0.5,
            tabular_effect: -0.2,
        }
    }
}

impl Perturbation {
    pub fn zero() -> Self {
        Self {
            amplitude: [0.0; 2],
            center: [0.0; 3],
            sigma: 0.0,
            tabular_effect: 0.0,
        }
    }
}

impl TaskParams {
    pub fn perturbed(&self, p: &Perturbation) -> Self {
        let mut out = *self;
        for y in 0..2 {
            out.amplitude[y] += p.amplitude[y];
            for a in 0..3 {
                out.center[y][a] += p.center[a];
            }
        }
        out.sigma += p.sigma;
        out.tabular_effect += p.tabular_effect;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn fractions(&self) -> [f64; 3] {
        let n = self.total() as f64;
        [self.train as f64 / n, self.val as f64 / n, self.test as f64 / n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub volume: [usize; 3],
    pub counts: SplitCounts,
    pub task_a: TaskParams,
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            volume: [32, 32, 32],
            counts: SplitCounts {
                train: 256,
                val: 64,
                test: 64,
            },
            task_a: TaskParams::default(),
            perturbation: Perturbation::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn params(&self, task: Task) -> TaskParams {
        match task {
            Task::A => self.task_a,
            Task::B => self.task_a.perturbed(&self.perturbation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume.contains(&0) {
            return Err(Error::Config("synth volume extents must be positive".into()));
        }
        let n = self.counts.total();
        if n < 2 || n % 2 != 0 {
            return Err(Error::Config(format!("synth sample count must be even and >= 2, got {n}")));
        }
        for task in [Task::A, Task::B] {
            let p = self.params(task);
            let finite = [p.amplitude_std, p.center_jitter, p.sigma, p.noise_std, p.tabular_effect]
                .iter()
                .chain(&p.amplitude)
                .chain(p.center.iter().flatten())
                .all(|v| v.is_finite());
            if !finite || p.amplitude_std < 0.0 || p.center_jitter < 0.0 || p.noise_std < 0.0 || p.sigma <= 0.0 {
                return Err(Error::Config(format!("synth parameters for {task:?} are invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Borrows the train, val and test subsets of `samples`.
    pub fn select<'a, T>(&self, samples: &'a [T]) -> [Vec<&'a T>; 3] {
        [&self.train, &self.val, &self.test].map(|idx| idx.iter().map(|&i| &samples[i]).collect())
    }

    pub fn name_of(&self, index: usize) -> Option<&'static str> {
        if self.train.contains(&index) {
            Some("train")
        } else if self.val.contains(&index) {
            Some("val")
        } else if self.test.contains(&index) {
            Some("test")
        } else {
            None
        }
    }
}

/// Stratified, seeded train/val/test split. Each class is shuffled and cut
/// by rounding its fraction counts; the test split takes the remainder.
pub fn split(labels: &[u8], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = idx.len();
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = (fractions[1] * n as f64).round() as usize;
        let wanted = fractions.iter().filter(|&&f| f > 0.0).count();
        if n < wanted || n_train + n_val > n {
            return Err(Error::Config(format!(
                "class {class} has {n} samples, too few to stratify into {fractions:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5eed_0000 + class as u64);
        idx.shuffle(&mut rng);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub rows: Vec<TabularRow>,
    pub volumes: Vec<Volume>,
    pub splits: Splits,
}

impl TaskData {
    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Encodes every subject for the model.
    pub fn samples(&self, schema: &AttributeSchema) -> Result<Vec<Sample>> {
        self.rows
            .iter()
            .zip(&self.volumes)
            .map(|(row, vol)| {
                Ok(Sample {
                    volume: vol.clone(),
                    record: schema.encode(&row.record)?,
                    label: row.label,
                })
            })
            .collect()
    }
}

fn sample_rng(seed: u64, task: Task, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((task.id() << 32) | stream);
    rng
}

fn balanced_labels(n: usize, seed: u64, task: Task) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
    labels.shuffle(&mut sample_rng(seed, task, u32::MAX as u64));
    labels
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn attributes<R: Rng>(rng: &mut R, label: u8, effect: f64) -> AttributeRecord {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut z = || -> f64 { std_normal.sample(rng) };
    let y = label as f64 * effect;
    let age = round3((73.0 + 7.0 * z()).clamp(55.0, 95.0));
    let gender = usize::from(z() > 0.0);
    let education = (15.0 + 3.0 * z()).round().clamp(6.0, 20.0);
    let carrier = z() + 0.8 * y;
    let apoe4 = if carrier < 0.6 {
        0
    } else if carrier < 1.6 {
        1
    } else {
        2
    };
    let ptau = round3((20.0 + 8.0 * y + 8.0 * z()).clamp(5.0, 60.0));
    let ttau = round3((300.0 + 80.0 * z()).clamp(80.0, 600.0));
    let fdg = round3((1.25 - 0.08 * y + 0.12 * z()).clamp(0.8, 1.6));
    use AttributeValue::*;
    AttributeRecord {
        values: vec![
            Number(age),
            Level(gender),
            Number(education),
            Level(apoe4),
            Number(ptau),
            Number(ttau),
            Number(fdg),
        ],
    }
}

fn volume<R: Rng>(rng: &mut R, dims: [usize; 3], label: u8, p: &TaskParams) -> Volume {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let y = label as usize;
    let amplitude = p.amplitude[y] + p.amplitude_std * std_normal.sample(rng);
    let center: [f64; 3] =
        std::array::from_fn(|a| p.center[y][a] * dims[a] as f64 + p.center_jitter * std_normal.sample(rng));
    let inv = 1.0 / (2.0 * p.sigma * p.sigma);
    let [d, h, w] = dims;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let dz = z as f64 - center[0];
        for yy in 0..h {
            let dy = yy as f64 - center[1];
            for x in 0..w {
                let dx = x as f64 - center[2];
                let blob = amplitude * (-(dz * dz + dy * dy + dx * dx) * inv).exp();
                data.push((blob + p.noise_std * std_normal.sample(rng)) as f32);
            }
        }
    }
    Volume { dims, data }
}

/// Generates one task in memory.
pub fn generate_task(cfg: &SynthConfig, task: Task) -> Result<TaskData> {
    cfg.validate()?;
    let n = cfg.counts.total();
    let params = cfg.params(task);
    let labels = balanced_labels(n, cfg.seed, task);
    let mut rows = Vec::with_capacity(n);
    let mut volumes = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = sample_rng(cfg.seed, task, i as u64);
        rows.push(TabularRow {
            record: attributes(&mut rng, label, params.tabular_effect),
            label,
        });
        volumes.push(volume(&mut rng, cfg.volume, label, &params));
    }
    let splits = split(&labels, cfg.counts.fractions(), cfg.seed)?;
    Ok(TaskData {
        task,
        rows,
        volumes,
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub samples: usize,
    pub positives: usize,
    /// sha256 of every file under the task directory, keyed by file name.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: SynthConfig,
    pub tasks: BTreeMap<String, TaskManifest>,
    /// sha256 over the schema and every task file digest.
    pub checksum: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha_hex(bytes))
}

fn labels_csv(data: &TaskData) -> String {
    let mut out = String::from("index,label,split\n");
    for (i, row) in data.rows.iter().enumerate() {
        let split = data.splits.name_of(i).expect("every index is in a split");
        out.push_str(&format!("{i},{},{split}\n", row.label));
    }
    out
}

/// Writes both tasks, `schema.json` and `manifest.json` under `out`.
pub fn write_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let schema = AttributeSchema::clinical_default();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let schema_json = schema.to_json();
    let mut digest = Sha256::new();
    digest.update(write_file(&out.join("schema.json"), schema_json.as_bytes())?);
    let mut tasks = BTreeMap::new();
    for task in [Task::A, Task::B] {
        let data = generate_task(cfg, task)?;
        let dir = out.join(task.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files = BTreeMap::new();
        for (i, vol) in data.volumes.iter().enumerate() {
            let name = format!("vol_{i:05}.f32");
            files.insert(name.clone(), write_file(&dir.join(&name), &vol.payload())?);
            let name = format!("header_{i:05}.txt");
            files.insert(name.clone(), write_file(&dir.join(&name), vol.header_text().as_bytes())?);
        }
        let tab = write_tabular_csv(&data.rows, &schema);
        files.insert("tabular.csv".into(), write_file(&dir.join("tabular.csv"), tab.as_bytes())?);
        files.insert(
            "labels.csv".into(),
            write_file(&dir.join("labels.csv"), labels_csv(&data).as_bytes())?,
        );
        for (name, hash) in &files {
            digest.update(format!("{}/{name}:{hash}\n", task.dir_name()));
        }
        tasks.insert(
            task.dir_name().to_string(),
            TaskManifest {
                samples: data.rows.len(),
                positives: data.rows.iter().filter(|r| r.label == 1).count(),
                files,
            },
        );
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        config: cfg.clone(),
        tasks,
        checksum: hex::encode(digest.finalize()),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&out.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let bytes = read(&root.join("manifest.json"))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Input(format!("manifest.json: {e}")))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Input(format!("unsupported dataset format `{}`", m.format)));
    }
    Ok(m)
}

pub fn read_schema(root: &Path) -> Result<AttributeSchema> {
    let bytes = read(&root.join("schema.json"))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Input("schema.json is not UTF-8".into()))?;
    AttributeSchema::from_json(&text)
}

fn parse_labels_csv(bytes: &[u8], n: usize) -> Result<(Vec<u8>, Splits)> {
    let mut reader = csv::Reader::from_reader(bytes);
    let headers = reader.headers().map_err(|e| Error::Input(format!("labels.csv: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != ["index", "label", "split"] {
        return Err(Error::Input("labels.csv header must be `index,label,split`".into()));
    }
    let mut labels = Vec::with_capacity(n);
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("labels.csv row {}: {e}", line + 1)))?;
        let bad = || Error::Input(format!("labels.csv row {} is malformed", line + 1));
        let index: usize = rec[0].parse().map_err(|_| bad())?;
        if index != line {
            return Err(bad());
        }
        labels.push(match &rec[1] {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad()),
        });
        match &rec[2] {
            "train" => splits.train.push(index),
            "val" => splits.val.push(index),
            "test" => splits.test.push(index),
            _ => return Err(bad()),
        }
    }
    if labels.len() != n {
        return Err(Error::Input(format!("labels.csv has {} rows, expected {n}", labels.len())));
    }
    Ok((labels, splits))
}

/// Loads one task, checking every file against the manifest digests.
pub fn load_task(root: &Path, task: Task, schema: &AttributeSchema) -> Result<TaskData> {
    let manifest = read_manifest(root)?;
    let entry = manifest
        .tasks
        .get(task.dir_name())
        .ok_or_else(|| Error::Input(format!("manifest has no {}", task.dir_name())))?;
    let dir = root.join(task.dir_name());
    let checked = |name: &str| -> Result<Vec<u8>> {
        let bytes = read(&dir.join(name))?;
        match entry.files.get(name) {
            Some(h) if *h == sha_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Input(format!("{}/{name} does not match manifest", task.dir_name()))),
            None => Err(Error::Input(format!("{}/{name} is not in the manifest", task.dir_name()))),
        }
    };
    let n = entry.samples;
    let rows = parse_tabular_csv(&checked("tabular.csv")?, schema)?;
    let (labels, splits) = parse_labels_csv(&checked("labels.csv")?, n)?;
    if rows.len() != n || rows.iter().zip(&labels).any(|(r, &l)| r.label != l) {
        return Err(Error::Input("tabular.csv and labels.csv disagree".into()));
    }
    let mut volumes = Vec::with_capacity(n);
    for i in 0..n {
        let header = checked(&format!("header_{i:05}.txt"))?;
        let header = String::from_utf8(header).map_err(|_| Error::Input(format!("header_{i:05}.txt is not UTF-8")))?;
        volumes.push(decode_volume(&header, &checked(&format!("vol_{i:05}.f32"))?)?);
    }
    Ok(TaskData {
        task,
        rows,
        volumes,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            volume: [8, 8, 8],
            counts: SplitCounts {
                train: 12,
                val: 4,
                test: 4,
            },
            ..SynthConfig::default()
        }
    }

    #[test]
    fn split_arithmetic_and_coverage() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let s = split(&labels, [0.6, 0.2, 0.2], 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        let pos = |v: &[usize]| v.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!((pos(&s.train), pos(&s.val), pos(&s.test)), (30, 10, 10));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split(&labels, [0.6, 0.2, 0.2], 4).unwrap(), s);
        assert_ne!(split(&labels, [0.6, 0.2, 0.2], 5).unwrap(), s);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split(&[0, 1], [0.5, 0.5, 0.1], 0).is_err());
        assert!(split(&[0, 0, 0, 1], [0.4, 0.3, 0.3], 0).is_err());
    }

    #[test]
    fn class_counts_and_determinism() {
        let cfg = small();
        let a = generate_task(&cfg, Task::A).unwrap();
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 10);
        assert_eq!(generate_task(&cfg, Task::A).unwrap(), a);
        assert_ne!(generate_task(&cfg, Task::B).unwrap().volumes, a.volumes);
    }

    #[test]
    fn zero_perturbation_keeps_task_params() {
        let cfg = SynthConfig {
            perturbation: Perturbation::zero(),
            ..small()
        };
        assert_eq!(cfg.params(Task::A), cfg.params(Task::B));
    }

    #[test]
    fn disk_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m1 = write_dataset(&cfg, dir.path()).unwrap();
        let m2 = write_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m1, m2);
        let schema = read_schema(dir.path()).unwrap();
        let loaded = load_task(dir.path(), Task::B, &schema).unwrap();
        let fresh = generate_task(&cfg, Task::B).unwrap();
        assert_eq!(loaded.splits, fresh.splits);
        assert_eq!(loaded.volumes, fresh.volumes);
        assert_eq!(loaded.labels(), fresh.labels());
        std::fs::write(dir.path().join("task_B/vol_00003.f32"), vec![0u8; 8 * 8 * 8 * 4]).unwrap();
        assert!(load_task(dir.path(), Task::B, &schema).is_err());
    }
}
