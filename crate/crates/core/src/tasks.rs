//! Frozen task networks and approximated ground truth.
//!
//! Both networks are trained once on reference renders and then frozen: a
//! [`TaskNet`] records the hash of its parameters at construction and every
//! consumer can call [`TaskNet::verify`] to prove they were never touched.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::{evaluate_retrieval, IouAccumulator, RetrievalResult};
use crate::nn::{epoch_batches, infer, Conv, Dense};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Bound;
use crate::world::{Sample, NUM_CLASSES};
use crate::{Error, ParamSet, Result, Rng, Tape, Tensor, Var};

const INFER_BATCH: usize = 32;
const HEAD_SCALE: f32 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Retrieval,
}

/// Architecture of a task network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskArch {
    /// Three 3x3 convolutions and a 1x1 class head at full resolution.
    Segmentation { width: usize },
    /// Three stride-2 convolutions, a linear layer to an L2-normalized
    /// descriptor and a place-classification head used only in training.
    Retrieval {
        width: usize,
        dim: usize,
        places: usize,
        height: usize,
        image_width: usize,
    },
}

impl TaskArch {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskArch::Segmentation { .. } => TaskKind::Segmentation,
            TaskArch::Retrieval { .. } => TaskKind::Retrieval,
        }
    }

    fn seg_layers(width: usize) -> ([Conv; 3], Conv) {
        (
            [
                Conv::new("c1", 3, width, 3, 1, 1),
                Conv::new("c2", width, width, 3, 1, 1),
                Conv::new("c3", width, width, 3, 1, 1),
            ],
            Conv::new("head", width, NUM_CLASSES, 1, 1, 0),
        )
    }

    fn ret_layers(width: usize, dim: usize, places: usize, h: usize, w: usize) -> ([Conv; 3], Dense, Dense) {
        let (fh, fw) = (h.div_ceil(8), w.div_ceil(8));
        (
            [
                Conv::new("c1", 3, width, 3, 2, 1),
                Conv::new("c2", width, 2 * width, 3, 2, 1),
                Conv::new("c3", 2 * width, 2 * width, 3, 2, 1),
            ],
            Dense::new("fc", 2 * width * fh * fw, dim),
            Dense::new("head", dim, places),
        )
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        match *self {
            TaskArch::Segmentation { width } => {
                let (convs, head) = Self::seg_layers(width);
                for c in &convs {
                    c.init(&mut p, rng);
                }
                head.init(&mut p, rng);
            }
            TaskArch::Retrieval { width, dim, places, height, image_width } => {
                let (convs, fc, head) = Self::ret_layers(width, dim, places, height, image_width);
                for c in &convs {
                    c.init(&mut p, rng);
                }
                fc.init(&mut p, rng);
                head.init(&mut p, rng);
            }
        }
        p
    }

    /// Segmentation logits, `N x C x H x W`.
    pub fn seg_logits(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let TaskArch::Segmentation { width } = *self else {
            return Err(Error::contract("segmentation forward on a retrieval network"));
        };
        let (convs, head) = Self::seg_layers(width);
        let mut h = tape.affine(x, 2.0, -1.0)?;
        for c in &convs {
            h = c.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        head.forward(tape, p, h)
    }

    /// Unit-norm retrieval descriptors, `N x dim`.
    pub fn descriptor(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let TaskArch::Retrieval { width, dim, places, height, image_width } = *self else {
            return Err(Error::contract("retrieval forward on a segmentation network"));
        };
        let (convs, fc, _) = Self::ret_layers(width, dim, places, height, image_width);
        let mut h = tape.affine(x, 2.0, -1.0)?;
        for c in &convs {
            h = c.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        let n = tape.shape(h)[0];
        let flat = tape.value(h).numel() / n;
        let h = tape.reshape(h, &[n, flat])?;
        let d = fc.forward(tape, p, h)?;
        tape.l2_normalize(d)
    }

    fn place_logits(&self, tape: &mut Tape, p: &Bound, descriptor: Var) -> Result<Var> {
        let TaskArch::Retrieval { width, dim, places, height, image_width } = *self else {
            return Err(Error::contract("place head on a segmentation network"));
        };
        let (_, _, head) = Self::ret_layers(width, dim, places, height, image_width);
        let scaled = tape.scale(descriptor, HEAD_SCALE)?;
        head.forward(tape, p, scaled)
    }
}

/// A task network whose parameters are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskNet {
    pub arch: TaskArch,
    params: ParamSet,
    hash: [u8; 32],
}

impl TaskNet {
    pub fn freeze(arch: TaskArch, params: ParamSet) -> Self {
        let hash = params.content_hash();
        TaskNet { arch, params, hash }
    }

    pub fn kind(&self) -> TaskKind {
        self.arch.kind()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn frozen_hash(&self) -> [u8; 32] {
        self.hash
    }

    /// Fails when the parameters no longer hash to the frozen value.
    pub fn verify(&self) -> Result<()> {
        let found = self.params.content_hash();
        if found != self.hash {
            return Err(Error::FrozenModified {
                name: format!("{:?}", self.kind()),
                expected: crate::params::hex(&self.hash),
                found: crate::params::hex(&found),
            });
        }
        Ok(())
    }

    /// Binds the frozen parameters as constants of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        tape.bind(&self.params, false)
    }

    /// Per-pixel argmax class maps.
    pub fn segment(&self, images: &[&Tensor]) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let batch = Tensor::stack(chunk)?;
            infer(&self.params, |tape, p| {
                let x = tape.constant(batch);
                let logits = self.arch.seg_logits(tape, p, x)?;
                out.extend(argmax_maps(tape.value(logits))?);
                Ok(())
            })?;
        }
        Ok(out)
    }

    pub fn describe(&self, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let batch = Tensor::stack(chunk)?;
            infer(&self.params, |tape, p| {
                let x = tape.constant(batch);
                let d = self.arch.descriptor(tape, p, x)?;
                let dim = tape.shape(d)[1];
                out.extend(tape.value(d).data().chunks(dim).map(<[f32]>::to_vec));
                Ok(())
            })?;
        }
        Ok(out)
    }
}

/// Argmax over channels of `N x C x H x W` logits; ties go to the lower class.
pub fn argmax_maps(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let data = logits.data();
    Ok((0..n)
        .map(|s| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if data[(s * c + k) * plane + p] > data[(s * c + best) * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seg_width: usize,
    pub seg_epochs: usize,
    pub seg_target_miou: f64,
    pub ret_width: usize,
    pub ret_dim: usize,
    pub ret_epochs: usize,
    pub ret_target_top1: f64,
    pub batch: usize,
    pub optimizer: AdamConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seg_width: 16,
            seg_epochs: 12,
            seg_target_miou: 0.85,
            ret_width: 16,
            ret_dim: 32,
            ret_epochs: 30,
            ret_target_top1: 0.9,
            batch: 8,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub train_metric: f64,
    pub test_metric: f64,
}

/// mIOU of `net` over a dataset, with masks as ground truth.
pub fn seg_miou(net: &TaskNet, images: &[&Tensor], masks: &[&[u8]]) -> Result<f64> {
    let preds = net.segment(images)?;
    let mut acc = IouAccumulator::new(NUM_CLASSES);
    for (p, g) in preds.iter().zip(masks) {
        acc.add(p, g)?;
    }
    Ok(acc.miou())
}

pub fn sample_miou(net: &TaskNet, samples: &[Sample]) -> Result<f64> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();
    seg_miou(net, &images, &masks)
}

/// Retrieval evaluation of `net` with `db` as the database.
pub fn sample_retrieval(net: &TaskNet, queries: &[Sample], db: &[Sample]) -> Result<RetrievalResult> {
    let q: Vec<&Tensor> = queries.iter().map(|s| &s.image).collect();
    let d: Vec<&Tensor> = db.iter().map(|s| &s.image).collect();
    evaluate_retrieval(
        &net.describe(&q)?,
        &queries.iter().map(|s| s.place_id).collect::<Vec<_>>(),
        &net.describe(&d)?,
        &db.iter().map(|s| s.place_id).collect::<Vec<_>>(),
    )
}

/// Trains the segmentation network on exact masks and freezes it.
pub fn train_segmentation(
    train: &[Sample],
    test: &[Sample],
    cfg: &TaskConfig,
    rng: &mut Rng,
) -> Result<(TaskNet, TrainReport)> {
    if train.is_empty() {
        return Err(Error::contract("segmentation training set is empty"));
    }
    let arch = TaskArch::Segmentation { width: cfg.seg_width };
    let mut params = arch.init(&mut rng.split(1));
    let mut adam = AdamState::new(cfg.optimizer);
    let mut order = rng.split(2);
    let mut epoch_loss = Vec::with_capacity(cfg.seg_epochs);
    for _ in 0..cfg.seg_epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch, &mut order);
        for idx in &batches {
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = idx
                .iter()
                .flat_map(|&i| train[i].mask.iter().map(|&m| m as usize))
                .collect();
            let mut tape = Tape::new();
            let p = tape.bind(&params, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let logits = arch.seg_logits(&mut tape, &p, x)?;
            let flat = tape.channels_last(logits)?;
            let loss = tape.softmax_cross_entropy(flat, &labels)?;
            total += f64::from(tape.value(loss).item());
            let mut grads = tape.backward(loss)?;
            adam.step(&mut params, &p.collect(&mut grads))?;
        }
        epoch_loss.push(total / batches.len() as f64);
    }
    let net = TaskNet::freeze(arch, params);
    let report = TrainReport {
        epoch_loss,
        train_metric: sample_miou(&net, train)?,
        test_metric: sample_miou(&net, test)?,
    };
    if report.test_metric < cfg.seg_target_miou {
        return Err(Error::Config(format!(
            "segmentation reached test mIOU {:.4} < target {:.2} after {} epochs (final loss {:.4}); raise seg_epochs or seg_width",
            report.test_metric,
            cfg.seg_target_miou,
            cfg.seg_epochs,
            report.epoch_loss.last().copied().unwrap_or(f64::NAN)
        )));
    }
    Ok((net, report))
}

/// Trains the retrieval network by place classification and freezes it.
/// `queries` and `db` are reference test frames used for the acceptance
/// check on top-1 retrieval accuracy.
pub fn train_retrieval(
    train: &[Sample],
    queries: &[Sample],
    db: &[Sample],
    places: usize,
    cfg: &TaskConfig,
    rng: &mut Rng,
) -> Result<(TaskNet, TrainReport)> {
    let Some(first) = train.first() else {
        return Err(Error::contract("retrieval training set is empty"));
    };
    let arch = TaskArch::Retrieval {
        width: cfg.ret_width,
        dim: cfg.ret_dim,
        places,
        height: first.height(),
        image_width: first.width(),
    };
    let mut params = arch.init(&mut rng.split(1));
    let mut adam = AdamState::new(cfg.optimizer);
    let mut order = rng.split(2);
    let mut epoch_loss = Vec::with_capacity(cfg.ret_epochs);
    for _ in 0..cfg.ret_epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch, &mut order);
        for idx in &batches {
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].place_id as usize).collect();
            let mut tape = Tape::new();
            let p = tape.bind(&params, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let d = arch.descriptor(&mut tape, &p, x)?;
            let logits = arch.place_logits(&mut tape, &p, d)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            total += f64::from(tape.value(loss).item());
            let mut grads = tape.backward(loss)?;
            adam.step(&mut params, &p.collect(&mut grads))?;
        }
        epoch_loss.push(total / batches.len() as f64);
    }
    let net = TaskNet::freeze(arch, params);
    let train_top1 = sample_retrieval(&net, train, train)?.top1;
    let test = sample_retrieval(&net, queries, db)?;
    if test.top1 < cfg.ret_target_top1 {
        return Err(Error::Config(format!(
            "retrieval reached test top-1 {:.4} < target {:.2} after {} epochs (final loss {:.4}); raise ret_epochs or ret_width",
            test.top1,
            cfg.ret_target_top1,
            cfg.ret_epochs,
            epoch_loss.last().copied().unwrap_or(f64::NAN)
        )));
    }
    Ok((
        net,
        TrainReport {
            epoch_loss,
            train_metric: train_top1,
            test_metric: test.top1,
        },
    ))
}

/// The pair of frozen task networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Tasks {
    pub segmentation: TaskNet,
    pub retrieval: TaskNet,
}

impl Tasks {
    pub fn verify(&self) -> Result<()> {
        self.segmentation.verify()?;
        self.retrieval.verify()
    }

    pub fn hashes(&self) -> [[u8; 32]; 2] {
        [self.segmentation.frozen_hash(), self.retrieval.frozen_hash()]
    }
}

/// Frozen-task outputs on one reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoEntry {
    pub labels: Vec<u8>,
    pub descriptor: Vec<f32>,
}

/// Approximated ground truth, aligned index by index with the reference
/// sequence it was computed on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoGroundTruth {
    pub entries: Vec<PseudoEntry>,
}

impl PseudoGroundTruth {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> Result<&PseudoEntry> {
        self.entries
            .get(index)
            .ok_or_else(|| Error::contract(format!("no approximated ground truth for frame {index}")))
    }
}

/// Runs both frozen tasks over reference frames.
pub fn compute_pseudo_gt(reference: &[Sample], tasks: &Tasks) -> Result<PseudoGroundTruth> {
    if let Some(s) = reference.iter().find(|s| s.condition_id != crate::world::REFERENCE_ID) {
        return Err(Error::contract(format!(
            "approximated ground truth needs reference frames, got condition {}",
            s.condition_id
        )));
    }
    let images: Vec<&Tensor> = reference.iter().map(|s| &s.image).collect();
    let labels = tasks.segmentation.segment(&images)?;
    let descriptors = tasks.retrieval.describe(&images)?;
    Ok(PseudoGroundTruth {
        entries: labels
            .into_iter()
            .zip(descriptors)
            .map(|(labels, descriptor)| PseudoEntry { labels, descriptor })
            .collect(),
    })
}
