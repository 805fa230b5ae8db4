//! Pipeline stages. Each stage reads its inputs from the output directory and
//! writes its artifacts back there, so stages can run as separate commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use condadapt_core::adapter::{identity_error, pretrain_identity, train_adapter, Adapter};
use condadapt_core::classifier::{average_descriptor, train_classifier, ConditionClassifier};
use condadapt_core::config::{PipelineConfig, Stage, TauPolicy};
use condadapt_core::gan::{analytic_gap, generate_condition_sequence, train_pair, Identity};
use condadapt_core::memory::{AdapterRecord, Memory, Origin, Provenance};
use condadapt_core::metrics::{euclidean, evaluate_retrieval, PrPoint, RetrievalResult};
use condadapt_core::orchestrator::{detect_novelty, FrameBuffer, Novelty, NoveltyPolicy, OnlineContext, Orchestrator};
use condadapt_core::params::hex;
use condadapt_core::tasks::{compute_pseudo_gt, seg_miou, train_retrieval, train_segmentation, Tasks, TrainReport};
use condadapt_core::world::{build_split, ConditionSpec, Sample, Split, WorldConfig};
use condadapt_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{self, Layout, PolicyFile};

pub const COMMANDS: [&str; 10] = [
    "gen-data",
    "train-tasks",
    "pseudo-gt",
    "train-gan",
    "train-adapters",
    "train-classifier",
    "build-memory",
    "evaluate",
    "online-run",
    "report",
];

pub const NO_ADAPTER: &str = "no_adapter";
pub const ADAPTER: &str = "adapter";
pub const SELECTED: &str = "selected";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub path: String,
    pub index: usize,
    pub place_id: u32,
    pub condition_id: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub world: WorldConfig,
    pub conditions: Vec<ConditionSpec>,
    pub held_out: u32,
    pub samples: Vec<ManifestSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TasksReport {
    pub segmentation: TrainReport,
    pub retrieval: TrainReport,
    pub hashes: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanReport {
    pub condition: String,
    pub condition_id: u32,
    pub steps: usize,
    /// Mean absolute difference between translated reference frames and
    /// the closed-form condition.
    pub analytic_gap: f64,
    /// The same difference for untranslated frames.
    pub identity_gap: f64,
    pub task_hashes_before: [String; 2],
    pub task_hashes_after: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSummary {
    pub condition: String,
    pub condition_id: u32,
    pub epochs_run: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptersReport {
    pub identity_steps: usize,
    pub identity_final_loss: f64,
    pub identity_test_error: f64,
    pub adapters: Vec<AdapterSummary>,
    pub task_hashes_before: [String; 2],
    pub task_hashes_after: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStageReport {
    pub labels: Vec<u32>,
    pub epoch_loss: Vec<f64>,
    /// Accuracy on generated validation frames.
    pub val_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub miou: f64,
    pub auc: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Condition name, then method.
    pub conditions: BTreeMap<String, BTreeMap<String, Score>>,
    /// Mean over the initial non-reference conditions, per method.
    pub mean_initial: BTreeMap<String, Score>,
    pub classifier_accuracy: f64,
    pub task_hashes: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedHash {
    pub condition_id: u32,
    pub adapter: String,
    pub generators: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub condition: String,
    pub stream_frames: usize,
    pub tau: f64,
    pub reference_probe: Novelty,
    pub first_verdict: Option<Novelty>,
    pub learned_id: Option<u32>,
    pub verdict_after: Novelty,
    pub records_before: usize,
    pub records_after: usize,
    pub raw: Score,
    pub adapted: Option<Score>,
    pub seeds_before: Vec<SeedHash>,
    pub seeds_after: Vec<SeedHash>,
    pub task_hashes_before: [String; 2],
    pub task_hashes_after: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct FrameRow {
    frame: usize,
    chosen: u32,
    verdict: Option<&'static str>,
    distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct TableRow {
    condition: String,
    method: String,
    miou: f64,
    auc: f64,
    top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

fn progress(stage: &str, start: Instant, detail: impl AsRef<str>) {
    eprintln!("[{stage} {:>7.1}s] {}", start.elapsed().as_secs_f64(), detail.as_ref());
}

fn images(samples: &[Sample]) -> Vec<&Tensor> {
    samples.iter().map(|s| &s.image).collect()
}

fn masks(samples: &[Sample]) -> Vec<&[u8]> {
    samples.iter().map(|s| s.mask.as_slice()).collect()
}

fn places(samples: &[Sample]) -> Vec<u32> {
    samples.iter().map(|s| s.place_id).collect()
}

fn seed_hashes(memory: &Memory) -> Vec<SeedHash> {
    memory
        .iter()
        .map(|r| SeedHash {
            condition_id: r.condition_id,
            adapter: r.adapter.params.hash_hex(),
            generators: r.generators.as_ref().map(|g| g.to_params().hash_hex()),
        })
        .collect()
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config.output_dir);
        Ok(Pipeline { config, layout })
    }

    fn specs(&self) -> Result<(ConditionSpec, Vec<ConditionSpec>, ConditionSpec)> {
        let (initial, held) = self.config.conditions()?;
        Ok((ConditionSpec::reference(), initial, held))
    }

    fn real(&self, spec: &ConditionSpec, split: Split) -> Result<Vec<Sample>> {
        store::load_dataset(&self.layout.dataset(&spec.name, split), "gen-data")
    }

    fn reference(&self, split: Split) -> Result<Vec<Sample>> {
        self.real(&ConditionSpec::reference(), split)
    }

    fn generated(&self, spec: &ConditionSpec, split: Split) -> Result<Vec<Sample>> {
        store::load_dataset(&self.layout.generated(&spec.name, split), "train-gan")
    }

    fn load_tasks(&self) -> Result<Tasks> {
        store::load_tasks(&self.layout)
    }

    fn reload_hashes(&self) -> Result<[String; 2]> {
        Ok(store::task_hashes(&self.load_tasks()?))
    }

    fn stage_rng(&self, stage: Stage) -> Rng {
        Rng::new(self.config.stage_seed(stage))
    }

    /// Renders every condition split and writes the dataset manifest.
    pub fn gen_data(&self) -> Result<()> {
        let start = Instant::now();
        store::write_json(&self.layout.config(), &self.config)?;
        let (reference, initial, held) = self.specs()?;
        let route = self.config.route();
        let mut all = vec![reference];
        all.extend(initial);
        all.push(held.clone());
        let mut rows = Vec::new();
        for spec in &all {
            let splits: &[Split] = if spec.id == held.id {
                &[Split::Val, Split::Test]
            } else {
                &Split::ALL
            };
            for &split in splits {
                let samples = build_split(&route, spec, split, &self.config.splits, &self.config.world)?;
                let path = self.layout.dataset(&spec.name, split);
                store::save_dataset(&path, &spec.name, spec.id, split, &samples)?;
                let rel = format!("data/{}/{}.adpt", spec.name, split.name());
                rows.extend(samples.iter().enumerate().map(|(index, s)| ManifestSample {
                    path: rel.clone(),
                    index,
                    place_id: s.place_id,
                    condition_id: s.condition_id,
                    split,
                }));
            }
            progress("gen-data", start, &spec.name);
        }
        store::write_json(
            &self.layout.data_manifest(),
            &DataManifest {
                world: self.config.world.clone(),
                conditions: all,
                held_out: held.id,
                samples: rows,
            },
        )
    }

    /// Trains and freezes both task networks on reference frames.
    pub fn train_tasks(&self) -> Result<()> {
        let start = Instant::now();
        let train = self.reference(Split::Train)?;
        let test = self.reference(Split::Test)?;
        let (seg, seg_report) =
            train_segmentation(&train, &test, &self.config.tasks, &mut self.stage_rng(Stage::Segmentation))?;
        progress("train-tasks", start, format!("segmentation test mIOU {:.4}", seg_report.test_metric));
        let (db, queries) = test.split_at(test.len() / 2);
        let (ret, ret_report) = train_retrieval(
            &train,
            queries,
            db,
            self.config.world.places as usize,
            &self.config.tasks,
            &mut self.stage_rng(Stage::Retrieval),
        )?;
        progress("train-tasks", start, format!("retrieval test top-1 {:.4}", ret_report.test_metric));
        store::save_task(&self.layout.task("segmentation"), &seg)?;
        store::save_task(&self.layout.task("retrieval"), &ret)?;
        let tasks = Tasks {
            segmentation: seg,
            retrieval: ret,
        };
        store::write_json(
            &self.layout.report("tasks.json"),
            &TasksReport {
                segmentation: seg_report,
                retrieval: ret_report,
                hashes: store::task_hashes(&tasks),
            },
        )
    }

    /// Frozen-task labels and descriptors for the reference train and
    /// validation frames.
    pub fn pseudo_gt(&self) -> Result<()> {
        let tasks = self.load_tasks()?;
        let (h, w) = (self.config.world.height, self.config.world.width);
        for split in [Split::Train, Split::Val] {
            let pseudo = compute_pseudo_gt(&self.reference(split)?, &tasks)?;
            store::save_pseudo(&self.layout.pseudo(split), &pseudo, h, w)?;
        }
        Ok(())
    }

    /// Trains translation models for every initial condition, or only for
    /// `only`, and renders the generated condition sequences.
    pub fn train_gan(&self, only: Option<u32>) -> Result<()> {
        let start = Instant::now();
        let before = self.reload_hashes()?;
        let (_, initial, _) = self.specs()?;
        let targets: Vec<ConditionSpec> = match only {
            None => initial,
            Some(id) => {
                let spec = initial.into_iter().find(|c| c.id == id).ok_or_else(|| {
                    condadapt_core::Error::Config(format!("condition {id} is not an initial condition"))
                })?;
                vec![spec]
            }
        };
        let ref_train = self.reference(Split::Train)?;
        let ref_val = self.reference(Split::Val)?;
        for spec in &targets {
            let cond = self.real(spec, Split::Train)?;
            let (model, history) = train_pair(
                &images(&ref_train),
                &images(&cond),
                self.config.gan_arch,
                spec.id,
                &self.config.gan,
                self.config.stage_seed(Stage::Gan(spec.id)),
            )?;
            store::save_gan(&self.layout.gan(&spec.name), &spec.name, &model)?;
            store::write_csv(&self.layout.report(&format!("gan/{}_loss.csv", spec.name)), &history)?;
            let translator = model.forward_translator();
            for (split, reference) in [(Split::Train, &ref_train), (Split::Val, &ref_val)] {
                let generated = generate_condition_sequence(&translator, reference, spec.id)?;
                store::save_dataset(&self.layout.generated(&spec.name, split), &spec.name, spec.id, split, &generated)?;
            }
            let layout_seed = self.config.world.layout_seed;
            let report = GanReport {
                condition: spec.name.clone(),
                condition_id: spec.id,
                steps: history.len(),
                analytic_gap: analytic_gap(&translator, &ref_val, spec, layout_seed)?,
                identity_gap: analytic_gap(&Identity, &ref_val, spec, layout_seed)?,
                task_hashes_before: before.clone(),
                task_hashes_after: self.reload_hashes()?,
            };
            progress(
                "train-gan",
                start,
                format!("{}: gap {:.4} (untranslated {:.4})", spec.name, report.analytic_gap, report.identity_gap),
            );
            store::write_json(&self.layout.report(&format!("gan/{}.json", spec.name)), &report)?;
        }
        Ok(())
    }

    /// Pretrains the identity adapter, then one adapter per initial
    /// condition on its generated sequence.
    pub fn train_adapters(&self) -> Result<()> {
        let start = Instant::now();
        let tasks = self.load_tasks()?;
        let before = store::task_hashes(&tasks);
        let (reference, initial, _) = self.specs()?;
        let ref_train = self.reference(Split::Train)?;
        let ref_test = self.reference(Split::Test)?;
        let pseudo_train = store::load_pseudo(&self.layout.pseudo(Split::Train))?;
        let pseudo_val = store::load_pseudo(&self.layout.pseudo(Split::Val))?;

        let (identity, losses) = pretrain_identity(
            &images(&ref_train),
            self.config.adapter_arch,
            &self.config.identity,
            &mut self.stage_rng(Stage::Identity),
        )?;
        let tail = &losses[losses.len().saturating_sub(50)..];
        let identity_final_loss = tail.iter().map(|&l| f64::from(l)).sum::<f64>() / tail.len().max(1) as f64;
        let identity_test_error = identity_error(&identity, &images(&ref_test))?;
        store::save_adapter(&self.layout.adapter(&reference.name), &reference.name, &identity)?;
        progress("train-adapters", start, format!("identity error {identity_test_error:.4}"));

        let mut adapters = Vec::new();
        for spec in &initial {
            let train = self.generated(spec, Split::Train)?;
            let val = self.generated(spec, Split::Val)?;
            let (adapter, epochs) = train_adapter(
                spec.id,
                &train,
                &pseudo_train,
                &val,
                &pseudo_val,
                &identity,
                &tasks,
                &self.config.weighting,
                &self.config.adapter,
                &mut self.stage_rng(Stage::Adapter(spec.id)),
            )?;
            store::save_adapter(&self.layout.adapter(&spec.name), &spec.name, &adapter)?;
            store::write_csv(&self.layout.report(&format!("adapters/{}_epochs.csv", spec.name)), &epochs)?;
            let best = epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
            progress("train-adapters", start, format!("{}: best validation loss {best:.4}", spec.name));
            adapters.push(AdapterSummary {
                condition: spec.name.clone(),
                condition_id: spec.id,
                epochs_run: epochs.len().saturating_sub(1),
                initial_val_loss: epochs.first().map_or(f64::NAN, |e| e.val_loss),
                best_val_loss: best,
            });
        }
        tasks.verify()?;
        store::write_json(
            &self.layout.report("adapters/summary.json"),
            &AdaptersReport {
                identity_steps: losses.len(),
                identity_final_loss,
                identity_test_error,
                adapters,
                task_hashes_before: before,
                task_hashes_after: self.reload_hashes()?,
            },
        )
    }

    /// Trains the condition classifier on reference frames and the generated
    /// condition sequences.
    pub fn train_classifier(&self) -> Result<()> {
        let start = Instant::now();
        let (_, initial, _) = self.specs()?;
        let mut labels = vec![condadapt_core::world::REFERENCE_ID];
        let mut train = self.reference(Split::Train)?;
        let mut val = self.reference(Split::Val)?;
        for spec in &initial {
            labels.push(spec.id);
            train.extend(self.generated(spec, Split::Train)?);
            val.extend(self.generated(spec, Split::Val)?);
        }
        let train: Vec<&Sample> = train.iter().collect();
        let val: Vec<&Sample> = val.iter().collect();
        let (clf, report) = train_classifier(
            labels.clone(),
            &train,
            &val,
            &self.config.classifier,
            &mut self.stage_rng(Stage::Classifier),
        )?;
        progress("train-classifier", start, format!("validation accuracy {:.4}", report.val_accuracy));
        store::save_classifier(&self.layout.classifier(), &clf)?;
        store::write_json(
            &self.layout.report("classifier.json"),
            &ClassifierStageReport {
                labels,
                epoch_loss: report.epoch_loss,
                val_accuracy: report.val_accuracy,
            },
        )
    }

    /// Stores one record per known condition and calibrates the novelty
    /// threshold on distances between validation windows of the same
    /// condition.
    pub fn build_memory(&self) -> Result<()> {
        let clf = store::load_classifier(&self.layout.classifier())?;
        let (reference, initial, _) = self.specs()?;
        let window = self.config.online.buffer;
        let stride = self.config.online.window_stride;
        let mut memory = Memory::new();
        let mut distances = Vec::new();
        for (t, spec) in std::iter::once(&reference).chain(&initial).enumerate() {
            let val = self.real(spec, Split::Val)?;
            let descriptors = clf.extract_descriptor(&images(&val))?;
            let centroid = average_descriptor(&descriptors)?;
            if descriptors.len() < window {
                return Err(condadapt_core::Error::Config(format!(
                    "{} validation frames cannot fill a buffer of {window}",
                    spec.name
                ))
                .into());
            }
            let windows = (0..=descriptors.len() - window)
                .step_by(stride)
                .map(|s| average_descriptor(&descriptors[s..s + window]))
                .collect::<condadapt_core::Result<Vec<_>>>()?;
            for (i, a) in windows.iter().enumerate() {
                distances.extend(windows[i + 1..].iter().map(|b| euclidean(a, b)));
            }
            let generators = if spec.id == reference.id {
                None
            } else {
                Some(store::load_gan(&self.layout.gan(&spec.name))?)
            };
            memory.store(AdapterRecord {
                condition_id: spec.id,
                name: spec.name.clone(),
                descriptor: centroid,
                adapter: store::load_adapter(&self.layout.adapter(&spec.name))?,
                generators,
                provenance: Provenance {
                    origin: Origin::Offline,
                    parent: None,
                    timestamp: t as u64,
                },
            })?;
        }
        let policy = match self.config.online.tau {
            TauPolicy::Calibrated => NoveltyPolicy::calibrate(&distances, window)?,
            TauPolicy::Fixed { tau } => NoveltyPolicy::new(tau, window)?,
        };
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let std = (distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n).sqrt();
        store::save_memory(&self.layout.memory(), &memory)?;
        store::write_json(
            &self.layout.policy(),
            &PolicyFile {
                policy,
                calibration_distances: distances.len(),
                distance_mean: mean,
                distance_std: std,
                distance_max: distances.iter().copied().fold(0.0, f64::max),
            },
        )
    }

    fn load_memory(&self) -> Result<Memory> {
        store::load_memory(&self.layout.memory(), "build-memory")
    }

    fn score(
        &self,
        tasks: &Tasks,
        adapted: &[&Tensor],
        test: &[Sample],
        db: &[Vec<f32>],
        db_places: &[u32],
    ) -> Result<(Score, RetrievalResult)> {
        let miou = seg_miou(&tasks.segmentation, adapted, &masks(test))?;
        let half = test.len() / 2;
        let queries = tasks.retrieval.describe(&adapted[half..])?;
        let r = evaluate_retrieval(&queries, &places(&test[half..]), db, db_places)?;
        Ok((
            Score {
                miou,
                auc: r.auc,
                top1: r.top1,
            },
            r,
        ))
    }

    fn reference_db(&self, tasks: &Tasks) -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
        let ref_test = self.reference(Split::Test)?;
        let db = &ref_test[..ref_test.len() / 2];
        Ok((tasks.retrieval.describe(&images(db))?, places(db)))
    }

    /// Per-condition task scores without adapters, with the condition's own
    /// adapter and with the classifier-selected adapter, plus the confusion
    /// matrix of the classifier on real test frames.
    pub fn evaluate(&self) -> Result<()> {
        let start = Instant::now();
        let tasks = self.load_tasks()?;
        let memory = self.load_memory()?;
        let clf = store::load_classifier(&self.layout.classifier())?;
        let (reference, initial, held) = self.specs()?;
        let (db, db_places) = self.reference_db(&tasks)?;

        let mut conditions = BTreeMap::new();
        let mut rows = Vec::new();
        let mut known_test = Vec::new();
        let all: Vec<&ConditionSpec> = std::iter::once(&reference).chain(&initial).chain([&held]).collect();
        for spec in all {
            let test = self.real(spec, Split::Test)?;
            let raw = images(&test);
            let mut methods: Vec<(&str, Vec<Tensor>)> = Vec::new();
            if let Ok(record) = memory.query_by_index(spec.id) {
                methods.push((ADAPTER, record.adapter.adapt(&raw)?));
            }
            methods.push((SELECTED, adapt_selected(&clf, &memory, &raw)?));
            let mut scores = BTreeMap::new();
            let (score, curve) = self.score(&tasks, &raw, &test, &db, &db_places)?;
            write_pr(&self.layout.report(&format!("pr/{}_{NO_ADAPTER}.csv", spec.name)), &curve.curve)?;
            scores.insert(NO_ADAPTER.to_string(), score);
            for (method, adapted) in &methods {
                let refs: Vec<&Tensor> = adapted.iter().collect();
                let (score, curve) = self.score(&tasks, &refs, &test, &db, &db_places)?;
                write_pr(&self.layout.report(&format!("pr/{}_{method}.csv", spec.name)), &curve.curve)?;
                scores.insert(method.to_string(), score);
            }
            for (method, s) in &scores {
                rows.push(TableRow {
                    condition: spec.name.clone(),
                    method: method.clone(),
                    miou: s.miou,
                    auc: s.auc,
                    top1: s.top1,
                });
            }
            progress(
                "evaluate",
                start,
                format!(
                    "{}: mIOU {}",
                    spec.name,
                    scores.iter().map(|(m, s)| format!("{m} {:.4}", s.miou)).collect::<Vec<_>>().join(", ")
                ),
            );
            conditions.insert(spec.name.clone(), scores);
            if spec.id != held.id {
                known_test.extend(test);
            }
        }

        let mut mean_initial = BTreeMap::new();
        for method in [NO_ADAPTER, ADAPTER, SELECTED] {
            let picked: Vec<Score> = initial.iter().map(|c| conditions[&c.name][method]).collect();
            let n = picked.len() as f64;
            mean_initial.insert(
                method.to_string(),
                Score {
                    miou: picked.iter().map(|s| s.miou).sum::<f64>() / n,
                    auc: picked.iter().map(|s| s.auc).sum::<f64>() / n,
                    top1: picked.iter().map(|s| s.top1).sum::<f64>() / n,
                },
            );
        }

        let confusion = clf.confusion_matrix(&known_test)?;
        let names: BTreeMap<u32, &str> = std::iter::once(&reference)
            .chain(&initial)
            .map(|c| (c.id, c.name.as_str()))
            .collect();
        let mut table = vec![std::iter::once("true\\predicted".to_string())
            .chain(confusion.labels.iter().map(|l| names[l].to_string()))
            .collect::<Vec<_>>()];
        for (l, row) in confusion.labels.iter().zip(&confusion.counts) {
            table.push(std::iter::once(names[l].to_string()).chain(row.iter().map(u64::to_string)).collect());
        }
        store::write_csv(&self.layout.report("confusion.csv"), &table)?;
        store::write_csv(&self.layout.report("table_conditions.csv"), &rows)?;
        tasks.verify()?;
        let metrics = Metrics {
            conditions,
            mean_initial,
            classifier_accuracy: confusion.accuracy(),
            task_hashes: store::task_hashes(&tasks),
        };
        progress("evaluate", start, format!("classifier accuracy {:.4}", metrics.classifier_accuracy));
        store::write_json(&self.layout.report("metrics.json"), &metrics)
    }

    /// Streams the held-out condition through the orchestrator, which may
    /// learn it online, and scores the result.
    pub fn online_run(&self) -> Result<()> {
        let start = Instant::now();
        let cfg = &self.config;
        let tasks = self.load_tasks()?;
        let task_hashes_before = store::task_hashes(&tasks);
        let memory = self.load_memory()?;
        let clf = store::load_classifier(&self.layout.classifier())?;
        let policy: PolicyFile = store::read_json(&self.layout.policy(), "novelty policy", "build-memory")?;
        let policy = policy.policy;
        let (_, _, held) = self.specs()?;
        let ref_train = self.reference(Split::Train)?;
        let ref_val = self.reference(Split::Val)?;
        let pseudo_train = store::load_pseudo(&self.layout.pseudo(Split::Train))?;
        let pseudo_val = store::load_pseudo(&self.layout.pseudo(Split::Val))?;
        let stream = self.real(&held, Split::Val)?;
        let test = self.real(&held, Split::Test)?;

        let mut probe = FrameBuffer::new(cfg.online.buffer)?;
        for s in ref_val.iter().take(cfg.online.buffer) {
            probe.push(s.image.clone());
        }
        let (reference_probe, _) = detect_novelty(&probe, &clf, &memory, &policy)?;
        let seeds_before = seed_hashes(&memory);
        let records_before = memory.len();

        let ctx = OnlineContext {
            reference_train: &ref_train,
            pseudo_train: &pseudo_train,
            reference_val: &ref_val,
            pseudo_val: &pseudo_val,
            gan: &cfg.gan,
            adapter: &cfg.online_adapter,
            weighting: &cfg.weighting,
            id_floor: cfg.initial_conditions as u32,
            seed: cfg.stage_seed(Stage::Online),
        };
        let mut orch = Orchestrator::new(clf, tasks, memory, cfg.online.buffer, policy)?;
        let mut first_verdict = None;
        let mut learned_id = None;
        let mut frames = Vec::with_capacity(stream.len());
        for (i, s) in stream.iter().enumerate() {
            let out = orch.process_frame(s.image.clone(), Some(&ctx))?;
            if first_verdict.is_none() {
                first_verdict = out.novelty;
            }
            if let Some(id) = out.learned {
                progress("online-run", start, format!("learned condition {id} at frame {i}"));
                learned_id = Some(id);
            }
            frames.push(FrameRow {
                frame: i,
                chosen: out.chosen,
                verdict: out.novelty.map(|n| if n.is_novel() { "novel" } else { "known" }),
                distance: out.novelty.map(|n| n.distance()),
            });
        }
        let (verdict_after, _) = orch.detect_novelty()?;

        let (db, db_places) = self.reference_db(&orch.tasks)?;
        let (raw, _) = self.score(&orch.tasks, &images(&test), &test, &db, &db_places)?;
        let adapted = match learned_id {
            Some(id) => {
                let out = orch.memory.query_by_index(id)?.adapter.adapt(&images(&test))?;
                let refs: Vec<&Tensor> = out.iter().collect();
                let (score, curve) = self.score(&orch.tasks, &refs, &test, &db, &db_places)?;
                write_pr(&self.layout.report(&format!("pr/{}_online.csv", held.name)), &curve.curve)?;
                Some(score)
            }
            None => None,
        };
        orch.tasks.verify()?;
        let seeds_after: Vec<SeedHash> = seed_hashes(&orch.memory)
            .into_iter()
            .filter(|s| seeds_before.iter().any(|b| b.condition_id == s.condition_id))
            .collect();
        store::save_memory(&self.layout.online_memory(), &orch.memory)?;
        store::write_jsonl(&self.layout.report("events.jsonl"), orch.events())?;
        store::write_csv(&self.layout.report("online_frames.csv"), &frames)?;
        let report = OnlineReport {
            condition: held.name.clone(),
            stream_frames: stream.len(),
            tau: orch.policy.tau,
            reference_probe,
            first_verdict,
            learned_id,
            verdict_after,
            records_before,
            records_after: orch.memory.len(),
            raw,
            adapted,
            seeds_before,
            seeds_after,
            task_hashes_before,
            task_hashes_after: store::task_hashes(&orch.tasks),
        };
        progress(
            "online-run",
            start,
            format!(
                "mIOU raw {:.4}, adapted {}",
                report.raw.miou,
                report.adapted.map_or("n/a".into(), |s| format!("{:.4}", s.miou))
            ),
        );
        store::write_json(&self.layout.report("online.json"), &report)
    }

    /// Collects the stage reports into one summary and lists every output
    /// file with its digest.
    pub fn report(&self) -> Result<()> {
        let metrics: Value = store::read_json(&self.layout.report("metrics.json"), "metrics", "evaluate")?;
        let online: Value = store::read_json(&self.layout.report("online.json"), "online report", "online-run")?;
        let tasks: TasksReport = store::read_json(&self.layout.report("tasks.json"), "task report", "train-tasks")?;
        let classifier: Value =
            store::read_json(&self.layout.report("classifier.json"), "classifier report", "train-classifier")?;
        let adapters: Value =
            store::read_json(&self.layout.report("adapters/summary.json"), "adapter report", "train-adapters")?;
        let policy: Value = store::read_json(&self.layout.policy(), "novelty policy", "build-memory")?;
        let (_, initial, _) = self.specs()?;
        let mut gans = serde_json::Map::new();
        for spec in &initial {
            let r: Value =
                store::read_json(&self.layout.report(&format!("gan/{}.json", spec.name)), "GAN report", "train-gan")?;
            gans.insert(spec.name.clone(), r);
        }
        let summary = json!({
            "tasks": {
                "segmentation_test_miou": tasks.segmentation.test_metric,
                "retrieval_test_top1": tasks.retrieval.test_metric,
                "hashes": tasks.hashes,
            },
            "gan": gans,
            "adapters": adapters,
            "classifier": classifier,
            "policy": policy,
            "metrics": metrics,
            "online": online,
        });
        store::write_json(&self.layout.report("summary.json"), &summary)?;
        let files = list_files(self.layout.root(), &self.layout.manifest())?;
        store::write_json(&self.layout.manifest(), &json!({ "files": files }))
    }

    /// Runs one command by name.
    pub fn run(&self, command: &str, condition: Option<u32>) -> Result<()> {
        match command {
            "gen-data" => self.gen_data(),
            "train-tasks" => self.train_tasks(),
            "pseudo-gt" => self.pseudo_gt(),
            "train-gan" => self.train_gan(condition),
            "train-adapters" => self.train_adapters(),
            "train-classifier" => self.train_classifier(),
            "build-memory" => self.build_memory(),
            "evaluate" => self.evaluate(),
            "online-run" => self.online_run(),
            "report" => self.report(),
            other => Err(condadapt_core::Error::Config(format!("unknown command `{other}`")).into()),
        }
    }

    /// Every command in order.
    pub fn run_all(&self) -> Result<()> {
        for c in COMMANDS {
            let start = Instant::now();
            self.run(c, None)?;
            progress(c, start, "done");
        }
        Ok(())
    }
}

/// Adapts each frame with the adapter of the condition the classifier picks.
fn adapt_selected(clf: &ConditionClassifier, memory: &Memory, raw: &[&Tensor]) -> Result<Vec<Tensor>> {
    let picks = clf.predict(raw)?;
    let mut out: Vec<Option<Tensor>> = vec![None; raw.len()];
    let mut ids = picks.clone();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let adapter: &Adapter = &memory.query_by_index(id)?.adapter;
        let idx: Vec<usize> = (0..raw.len()).filter(|&i| picks[i] == id).collect();
        let batch: Vec<&Tensor> = idx.iter().map(|&i| raw[i]).collect();
        for (i, t) in idx.into_iter().zip(adapter.adapt(&batch)?) {
            out[i] = Some(t);
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every frame adapted")).collect())
}

fn write_pr(path: &Path, curve: &[PrPoint]) -> Result<()> {
    store::write_csv(path, curve)
}

fn list_files(root: &Path, exclude: &Path) -> Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else if path != exclude {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let rel = path.strip_prefix(root).expect("under root");
                out.push(FileEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    sha256: hex(&Sha256::digest(&bytes)),
                });
            }
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Loads a pipeline configuration file.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
