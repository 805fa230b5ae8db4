//! On-disk layout of a pipeline run and typed load/save of every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use condadapt_core::adapter::{Adapter, AdapterArch};
use condadapt_core::classifier::{ClassifierArch, ConditionClassifier};
use condadapt_core::gan::{GanArch, GanModel};
use condadapt_core::memory::{AdapterRecord, Memory, Provenance};
use condadapt_core::orchestrator::NoveltyPolicy;
use condadapt_core::params::hex;
use condadapt_core::tasks::{PseudoEntry, PseudoGroundTruth, TaskArch, TaskNet, Tasks};
use condadapt_core::world::{Sample, Split};
use condadapt_core::{ParamSet, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{load_container, save_container, write_atomic};
use crate::error::{Error, Result};

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }

    pub fn dataset(&self, condition: &str, split: Split) -> PathBuf {
        self.root.join(format!("data/{condition}/{}.adpt", split.name()))
    }

    pub fn task(&self, name: &str) -> PathBuf {
        self.root.join(format!("models/{name}.adpt"))
    }

    pub fn pseudo(&self, split: Split) -> PathBuf {
        self.root.join(format!("pseudo/{}.adpt", split.name()))
    }

    pub fn gan(&self, condition: &str) -> PathBuf {
        self.root.join(format!("models/gan/{condition}.adpt"))
    }

    pub fn generated(&self, condition: &str, split: Split) -> PathBuf {
        self.root.join(format!("generated/{condition}/{}.adpt", split.name()))
    }

    pub fn adapter(&self, condition: &str) -> PathBuf {
        self.root.join(format!("models/adapters/{condition}.adpt"))
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("models/classifier.adpt")
    }

    pub fn memory(&self) -> PathBuf {
        self.root.join("memory")
    }

    pub fn online_memory(&self) -> PathBuf {
        self.root.join("online/memory")
    }

    pub fn policy(&self) -> PathBuf {
        self.root.join("memory/policy.json")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

/// Fails with the command that produces `path` when it does not exist.
pub fn require(path: &Path, artifact: &str, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            artifact: artifact.into(),
            path: path.to_path_buf(),
            command,
        })
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, artifact: &str, command: &'static str) -> Result<T> {
    require(path, artifact, command)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut bytes, r).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

fn meta_field<T: DeserializeOwned>(path: &Path, meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::artifact(path, format!("metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::artifact(path, format!("metadata `{key}`: {e}")))
}

fn load(path: &Path, artifact: &str, command: &'static str) -> Result<(ParamSet, Value)> {
    require(path, artifact, command)?;
    load_container(path)
}

fn take(path: &Path, p: &ParamSet, name: &str) -> Result<Tensor> {
    p.get(name)
        .cloned()
        .map_err(|_| Error::artifact(path, format!("no tensor `{name}`")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    condition: String,
    condition_id: u32,
    split: Split,
    place_ids: Vec<u32>,
}

/// Images as `N x 3 x H x W`, masks as `N x H x W` class indices.
pub fn save_dataset(path: &Path, condition: &str, condition_id: u32, split: Split, samples: &[Sample]) -> Result<()> {
    let mut p = ParamSet::new();
    if let Some(first) = samples.first() {
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        p.insert("images", Tensor::stack(&images)?);
        let masks = samples.iter().flat_map(|s| s.mask.iter().map(|&m| f32::from(m))).collect();
        p.insert("masks", Tensor::new(&[samples.len(), first.height(), first.width()], masks)?);
    }
    let meta = DatasetMeta {
        condition: condition.into(),
        condition_id,
        split,
        place_ids: samples.iter().map(|s| s.place_id).collect(),
    };
    save_container(path, &p, &serde_json::to_value(meta).expect("plain data"))
}

pub fn load_dataset(path: &Path, command: &'static str) -> Result<Vec<Sample>> {
    let (p, meta) = load(path, "dataset", command)?;
    let meta: DatasetMeta =
        serde_json::from_value(meta).map_err(|e| Error::artifact(path, format!("dataset metadata: {e}")))?;
    if meta.place_ids.is_empty() {
        return Ok(Vec::new());
    }
    let images = take(path, &p, "images")?;
    let masks = take(path, &p, "masks")?;
    let n = meta.place_ids.len();
    if images.shape().first() != Some(&n) || masks.shape().first() != Some(&n) {
        return Err(Error::artifact(path, "sample count disagrees with the stored tensors"));
    }
    let plane = masks.numel() / n;
    meta.place_ids
        .iter()
        .enumerate()
        .map(|(i, &place_id)| {
            let mask = masks.data()[i * plane..(i + 1) * plane]
                .iter()
                .map(|&v| {
                    if (0.0..256.0).contains(&v) && v.fract() == 0.0 {
                        Ok(v as u8)
                    } else {
                        Err(Error::artifact(path, format!("mask value {v} is not a class index")))
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            Ok(Sample {
                image: images.unstack(i)?,
                mask,
                place_id,
                condition_id: meta.condition_id,
            })
        })
        .collect()
}

pub fn save_task(path: &Path, net: &TaskNet) -> Result<()> {
    let meta = json!({ "arch": net.arch, "frozen_hash": hex(&net.frozen_hash()) });
    save_container(path, net.params(), &meta)
}

/// Loads a task network and checks it against the hash recorded when it was
/// frozen.
pub fn load_task(path: &Path) -> Result<TaskNet> {
    let (p, meta) = load(path, "task network", "train-tasks")?;
    let arch: TaskArch = meta_field(path, &meta, "arch")?;
    let recorded: String = meta_field(path, &meta, "frozen_hash")?;
    let net = TaskNet::freeze(arch, p);
    let found = hex(&net.frozen_hash());
    if found != recorded {
        return Err(condadapt_core::Error::FrozenModified {
            name: format!("{:?}", net.kind()),
            expected: recorded,
            found,
        }
        .into());
    }
    Ok(net)
}

pub fn load_tasks(layout: &Layout) -> Result<Tasks> {
    Ok(Tasks {
        segmentation: load_task(&layout.task("segmentation"))?,
        retrieval: load_task(&layout.task("retrieval"))?,
    })
}

pub fn task_hashes(tasks: &Tasks) -> [String; 2] {
    tasks.hashes().map(|h| hex(&h))
}

pub fn save_pseudo(path: &Path, pseudo: &PseudoGroundTruth, height: usize, width: usize) -> Result<()> {
    let n = pseudo.len();
    let dim = pseudo.entries.first().map_or(0, |e| e.descriptor.len());
    let mut p = ParamSet::new();
    let labels = pseudo.entries.iter().flat_map(|e| e.labels.iter().map(|&l| f32::from(l))).collect();
    p.insert("labels", Tensor::new(&[n, height, width], labels)?);
    let desc = pseudo.entries.iter().flat_map(|e| e.descriptor.iter().copied()).collect();
    p.insert("descriptors", Tensor::new(&[n, dim], desc)?);
    save_container(path, &p, &json!({ "frames": n }))
}

pub fn load_pseudo(path: &Path) -> Result<PseudoGroundTruth> {
    let (p, _) = load(path, "approximated ground truth", "pseudo-gt")?;
    let labels = take(path, &p, "labels")?;
    let desc = take(path, &p, "descriptors")?;
    let n = labels.shape()[0];
    if desc.shape()[0] != n {
        return Err(Error::artifact(path, "label and descriptor counts differ"));
    }
    let (plane, dim) = (labels.numel() / n.max(1), desc.numel() / n.max(1));
    Ok(PseudoGroundTruth {
        entries: (0..n)
            .map(|i| PseudoEntry {
                labels: labels.data()[i * plane..(i + 1) * plane].iter().map(|&v| v as u8).collect(),
                descriptor: desc.data()[i * dim..(i + 1) * dim].to_vec(),
            })
            .collect(),
    })
}

pub fn save_gan(path: &Path, name: &str, model: &GanModel) -> Result<()> {
    let meta = json!({
        "arch": model.arch,
        "condition_id": model.generators.condition_id,
        "condition": name,
    });
    save_container(path, &model.to_params(), &meta)
}

pub fn load_gan(path: &Path) -> Result<GanModel> {
    let (p, meta) = load(path, "translation model", "train-gan")?;
    let arch: GanArch = meta_field(path, &meta, "arch")?;
    let id: u32 = meta_field(path, &meta, "condition_id")?;
    Ok(GanModel::from_params(arch, id, &p)?)
}

pub fn save_adapter(path: &Path, name: &str, adapter: &Adapter) -> Result<()> {
    let meta = json!({
        "arch": adapter.arch,
        "condition_id": adapter.condition_id,
        "condition": name,
    });
    save_container(path, &adapter.params, &meta)
}

pub fn load_adapter(path: &Path) -> Result<Adapter> {
    let (params, meta) = load(path, "input adapter", "train-adapters")?;
    Ok(Adapter {
        arch: meta_field::<AdapterArch>(path, &meta, "arch")?,
        condition_id: meta_field(path, &meta, "condition_id")?,
        params,
    })
}

pub fn save_classifier(path: &Path, clf: &ConditionClassifier) -> Result<()> {
    save_container(path, &clf.params, &json!({ "arch": clf.arch }))
}

pub fn load_classifier(path: &Path) -> Result<ConditionClassifier> {
    let (params, meta) = load(path, "condition classifier", "train-classifier")?;
    Ok(ConditionClassifier {
        arch: meta_field::<ClassifierArch>(path, &meta, "arch")?,
        params,
    })
}

/// One line of the memory manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub condition_id: u32,
    pub name: String,
    pub file: String,
    pub has_generators: bool,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryManifest {
    pub records: Vec<ManifestRecord>,
}

/// Writes one container per record, then publishes the manifest.
pub fn save_memory(dir: &Path, memory: &Memory) -> Result<()> {
    let mut records = Vec::with_capacity(memory.len());
    for r in memory.iter() {
        let file = format!("{:03}_{}.adpt", r.condition_id, r.name);
        let mut p = r.adapter.params.prefixed("adapter.");
        p.insert("descriptor", Tensor::new(&[r.descriptor.len()], r.descriptor.clone())?);
        let mut meta = json!({
            "condition_id": r.condition_id,
            "condition": r.name,
            "adapter_arch": r.adapter.arch,
        });
        if let Some(g) = &r.generators {
            p.merge(g.to_params().prefixed("gan."));
            meta["gan_arch"] = json!(g.arch);
        }
        save_container(&dir.join(&file), &p, &meta)?;
        records.push(ManifestRecord {
            condition_id: r.condition_id,
            name: r.name.clone(),
            file,
            has_generators: r.generators.is_some(),
            provenance: r.provenance.clone(),
        });
    }
    write_json(&dir.join("manifest.json"), &MemoryManifest { records })
}

pub fn load_memory(dir: &Path, command: &'static str) -> Result<Memory> {
    let manifest_path = dir.join("manifest.json");
    let manifest: MemoryManifest = read_json(&manifest_path, "memory manifest", command)?;
    let mut memory = Memory::new();
    for m in manifest.records {
        let path = dir.join(&m.file);
        let (p, meta) = load(&path, "memory record", command)?;
        let adapter = Adapter {
            arch: meta_field(&path, &meta, "adapter_arch")?,
            condition_id: m.condition_id,
            params: p.strip_prefix("adapter."),
        };
        let generators = if m.has_generators {
            let arch: GanArch = meta_field(&path, &meta, "gan_arch")?;
            Some(GanModel::from_params(arch, m.condition_id, &p.strip_prefix("gan."))?)
        } else {
            None
        };
        memory.store(AdapterRecord {
            condition_id: m.condition_id,
            name: m.name,
            descriptor: take(&path, &p, "descriptor")?.into_data(),
            adapter,
            generators,
            provenance: m.provenance,
        })?;
    }
    Ok(memory)
}

/// Novelty threshold with the statistics it was derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub policy: NoveltyPolicy,
    pub calibration_distances: usize,
    pub distance_mean: f64,
    pub distance_std: f64,
    pub distance_max: f64,
}
