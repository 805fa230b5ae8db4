//! Condition classifier and its 128-d condition descriptor.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::ConfusionMatrix;
use crate::nn::{epoch_batches, infer, Conv, Dense};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Bound;
use crate::tape::softmax;
use crate::world::Sample;
use crate::{Error, ParamSet, Result, Rng, Tape, Tensor, Var};

pub const DESCRIPTOR_LEN: usize = 128;
const INFER_BATCH: usize = 32;

/// Four stride-2 convolutions and three fully connected layers; the second
/// fully connected layer's activations are the descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub widths: [usize; 4],
    pub height: usize,
    pub width: usize,
    /// Condition id of every output.
    pub labels: Vec<u32>,
}

struct Layers {
    convs: [Conv; 4],
    fc1: Dense,
    fc2: Dense,
    out: Dense,
}

impl ClassifierArch {
    fn layers(&self) -> Layers {
        let [a, b, c, d] = self.widths;
        let (fh, fw) = (self.height.div_ceil(16), self.width.div_ceil(16));
        Layers {
            convs: [
                Conv::new("c1", 3, a, 3, 2, 1),
                Conv::new("c2", a, b, 3, 2, 1),
                Conv::new("c3", b, c, 3, 2, 1),
                Conv::new("c4", c, d, 3, 2, 1),
            ],
            fc1: Dense::new("fc1", d * fh * fw, DESCRIPTOR_LEN),
            fc2: Dense::new("fc2", DESCRIPTOR_LEN, DESCRIPTOR_LEN),
            out: Dense::new("out", DESCRIPTOR_LEN, self.labels.len()),
        }
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let l = self.layers();
        let mut p = ParamSet::new();
        for c in &l.convs {
            c.init(&mut p, rng);
        }
        l.fc1.init(&mut p, rng);
        l.fc2.init(&mut p, rng);
        l.out.init(&mut p, rng);
        p
    }

    /// Descriptor (`N x 128`) and logits (`N x K`).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let l = self.layers();
        let mut h = tape.affine(x, 2.0, -1.0)?;
        for c in &l.convs {
            h = c.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        let n = tape.shape(h)[0];
        let flat = tape.value(h).numel() / n;
        let h = tape.reshape(h, &[n, flat])?;
        let h = l.fc1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = l.fc2.forward(tape, p, h)?;
        let descriptor = tape.relu(h)?;
        let logits = l.out.forward(tape, p, descriptor)?;
        Ok((descriptor, logits))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionClassifier {
    pub arch: ClassifierArch,
    pub params: ParamSet,
}

/// Output of one forward pass over a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Classified {
    pub descriptors: Vec<Vec<f32>>,
    pub logits: Vec<Vec<f32>>,
}

impl ConditionClassifier {
    pub fn run(&self, images: &[&Tensor]) -> Result<Classified> {
        let k = self.arch.labels.len();
        let mut out = Classified {
            descriptors: Vec::with_capacity(images.len()),
            logits: Vec::with_capacity(images.len()),
        };
        for chunk in images.chunks(INFER_BATCH) {
            let batch = Tensor::stack(chunk)?;
            infer(&self.params, |tape, p| {
                let x = tape.constant(batch);
                let (d, l) = self.arch.forward(tape, p, x)?;
                out.descriptors
                    .extend(tape.value(d).data().chunks(DESCRIPTOR_LEN).map(<[f32]>::to_vec));
                out.logits.extend(tape.value(l).data().chunks(k).map(<[f32]>::to_vec));
                Ok(())
            })?;
        }
        Ok(out)
    }

    /// Distribution over the classifier's conditions for every image.
    pub fn classify(&self, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
        let k = self.arch.labels.len();
        Ok(self
            .run(images)?
            .logits
            .iter()
            .map(|l| softmax(l, k))
            .collect())
    }

    /// Condition id of the most probable output; ties go to the first label.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<u32>> {
        Ok(self
            .run(images)?
            .logits
            .iter()
            .map(|l| self.arch.labels[argmax(l)])
            .collect())
    }

    pub fn extract_descriptor(&self, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
        Ok(self.run(images)?.descriptors)
    }

    pub fn confusion_matrix(&self, test: &[Sample]) -> Result<ConfusionMatrix> {
        let images: Vec<&Tensor> = test.iter().map(|s| &s.image).collect();
        let mut m = ConfusionMatrix::new(self.arch.labels.clone());
        for (s, p) in test.iter().zip(self.predict(&images)?) {
            m.add(s.condition_id, p)?;
        }
        Ok(m)
    }
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Elementwise mean of descriptors.
pub fn average_descriptor(descriptors: &[Vec<f32>]) -> Result<Vec<f32>> {
    let Some(first) = descriptors.first() else {
        return Err(Error::contract("cannot average an empty set of descriptors"));
    };
    let mut acc = alloc::vec![0.0f64; first.len()];
    for d in descriptors {
        if d.len() != acc.len() {
            return Err(Error::dim("average_descriptor", format!("{} vs {}", d.len(), acc.len())));
        }
        for (a, &v) in acc.iter_mut().zip(d) {
            *a += f64::from(v);
        }
    }
    let n = descriptors.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub widths: [usize; 4],
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            widths: [8, 16, 32, 32],
            epochs: 4,
            batch: 16,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: f64,
}

/// Trains on samples labeled by their `condition_id`. `labels` fixes the
/// output order; every training sample must carry one of them.
pub fn train_classifier(
    labels: Vec<u32>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<(ConditionClassifier, ClassifierReport)> {
    let Some(first) = train.first() else {
        return Err(Error::contract("classifier training set is empty"));
    };
    let index = |s: &Sample| {
        labels
            .iter()
            .position(|&l| l == s.condition_id)
            .ok_or_else(|| Error::contract(format!("condition {} has no classifier output", s.condition_id)))
    };
    let targets = train.iter().map(|s| index(s)).collect::<Result<Vec<_>>>()?;
    let arch = ClassifierArch {
        widths: cfg.widths,
        height: first.height(),
        width: first.width(),
        labels,
    };
    let mut params = arch.init(&mut rng.split(1));
    let mut adam = AdamState::new(cfg.optimizer);
    let mut order = rng.split(2);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch, &mut order);
        let mut total = 0.0;
        for idx in &batches {
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let t: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let p = tape.bind(&params, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let (_, logits) = arch.forward(&mut tape, &p, x)?;
            let loss = tape.softmax_cross_entropy(logits, &t)?;
            total += f64::from(tape.value(loss).item());
            let mut grads = tape.backward(loss)?;
            adam.step(&mut params, &p.collect(&mut grads))?;
        }
        epoch_loss.push(total / batches.len() as f64);
    }
    let clf = ConditionClassifier { arch, params };
    let val_accuracy = if val.is_empty() {
        f64::NAN
    } else {
        let owned: Vec<Sample> = val.iter().map(|&s| s.clone()).collect();
        clf.confusion_matrix(&owned)?.accuracy()
    };
    Ok((clf, ClassifierReport { epoch_loss, val_accuracy }))
}
