//! Input adapters: encoder-decoders that pre-process condition images so
//! the frozen tasks behave as they do on reference images.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::{conv_norm_act, epoch_batches, infer, Conv, ConvT, Norm, ResBlock};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Bound;
use crate::tape::Activation;
use crate::tasks::{PseudoEntry, PseudoGroundTruth, Tasks};
use crate::world::Sample;
use crate::{Error, ParamSet, Result, Rng, Tape, Tensor, Var};

const INFER_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterArch {
    /// Channels of the three encoder stages.
    pub widths: [usize; 3],
    pub n_res: usize,
}

impl Default for AdapterArch {
    fn default() -> Self {
        AdapterArch {
            widths: [8, 16, 32],
            n_res: 2,
        }
    }
}

struct Layers {
    down: [(Conv, Norm); 3],
    res: Vec<ResBlock>,
    up: [(ConvT, Norm); 3],
    head: Conv,
}

impl AdapterArch {
    fn layers(&self) -> Layers {
        let [w1, w2, w3] = self.widths;
        Layers {
            down: [
                (Conv::new("e1", 3, w1, 4, 2, 1), Norm::new("e1n", w1)),
                (Conv::new("e2", w1, w2, 4, 2, 1), Norm::new("e2n", w2)),
                (Conv::new("e3", w2, w3, 4, 2, 1), Norm::new("e3n", w3)),
            ],
            res: (0..self.n_res).map(|i| ResBlock::new(&format!("r{i}"), w3)).collect(),
            // Decoder inputs are the previous stage concatenated with the
            // matching encoder output.
            up: [
                (ConvT::new("d3", w3, w2, 4, 2, 1), Norm::new("d3n", w2)),
                (ConvT::new("d2", 2 * w2, w1, 4, 2, 1), Norm::new("d2n", w1)),
                (ConvT::new("d1", 2 * w1, w1, 4, 2, 1), Norm::new("d1n", w1)),
            ],
            head: Conv::new("head", w1 + 3, 3, 3, 1, 1),
        }
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let l = self.layers();
        let mut p = ParamSet::new();
        for (c, n) in &l.down {
            c.init(&mut p, rng);
            n.init(&mut p);
        }
        for r in &l.res {
            r.init(&mut p, rng);
        }
        for (c, n) in &l.up {
            c.init(&mut p, rng);
            n.init(&mut p);
        }
        l.head.init(&mut p, rng);
        p
    }

    /// `N x 3 x H x W` in, same shape out, values in `(0, 1)`. H and W must
    /// be multiples of 8.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let &[_, _, h, w] = tape.shape(x) else {
            return Err(Error::dim("adapt", format!("expected NCHW input, got {:?}", tape.shape(x))));
        };
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::dim("adapt", format!("image {h}x{w} is not a multiple of 8")));
        }
        let l = self.layers();
        let centred = tape.affine(x, 2.0, -1.0)?;
        let e1 = conv_norm_act(tape, p, &l.down[0].0, &l.down[0].1, Activation::LeakyRelu(0.2), centred)?;
        let e2 = conv_norm_act(tape, p, &l.down[1].0, &l.down[1].1, Activation::LeakyRelu(0.2), e1)?;
        let mut h = conv_norm_act(tape, p, &l.down[2].0, &l.down[2].1, Activation::LeakyRelu(0.2), e2)?;
        for r in &l.res {
            h = r.forward(tape, p, h)?;
        }
        let mut skip = [e2, e1, centred].into_iter();
        for (c, n) in &l.up {
            h = c.forward(tape, p, h)?;
            h = n.forward(tape, p, h)?;
            h = tape.relu(h)?;
            h = tape.concat_channels(h, skip.next().expect("three skips"))?;
        }
        let h = l.head.forward(tape, p, h)?;
        tape.activation(h, Activation::Sigmoid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub arch: AdapterArch,
    pub condition_id: u32,
    pub params: ParamSet,
}

impl Adapter {
    pub fn init(arch: AdapterArch, condition_id: u32, rng: &mut Rng) -> Adapter {
        Adapter {
            arch,
            condition_id,
            params: arch.init(rng),
        }
    }

    pub fn adapt(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let batch = Tensor::stack(chunk)?;
            let y = infer(&self.params, |tape, p| {
                let x = tape.constant(batch);
                let y = self.arch.forward(tape, p, x)?;
                Ok(tape.value(y).clone())
            })?;
            for i in 0..chunk.len() {
                out.push(y.unstack(i)?);
            }
        }
        Ok(out)
    }

    /// Adapted copies of `samples` with mask, place and condition kept.
    pub fn adapt_samples(&self, samples: &[Sample]) -> Result<Vec<Sample>> {
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        Ok(samples
            .iter()
            .zip(self.adapt(&images)?)
            .map(|(s, image)| Sample { image, ..s.clone() })
            .collect())
    }
}

/// Non-negative weights of the task terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeighting {
    pub segmentation: f32,
    pub retrieval: f32,
}

impl Default for TaskWeighting {
    fn default() -> Self {
        TaskWeighting {
            segmentation: 1.0,
            retrieval: 10.0,
        }
    }
}

impl TaskWeighting {
    pub fn validate(&self) -> Result<()> {
        let (s, r) = (self.segmentation, self.retrieval);
        if !(s >= 0.0 && r >= 0.0) || (s == 0.0 && r == 0.0) {
            return Err(Error::Config(format!("task weights must be non-negative with one positive, got ({s}, {r})")));
        }
        Ok(())
    }
}

/// `alpha_seg * CE(seg(adapted), labels) + alpha_ret * |ret(adapted) - d|^2`,
/// averaged over the batch. `seg` and `ret` are the task parameters bound on
/// `tape`; a term with zero weight is not evaluated at all.
pub fn task_supervision_loss(
    tape: &mut Tape,
    adapted: Var,
    targets: &[&PseudoEntry],
    tasks: &Tasks,
    seg: &Bound,
    ret: &Bound,
    weighting: &TaskWeighting,
) -> Result<Var> {
    weighting.validate()?;
    let n = tape.shape(adapted)[0];
    if targets.len() != n {
        return Err(Error::contract(format!("{} targets for a batch of {n}", targets.len())));
    }
    let mut terms = Vec::new();
    if weighting.segmentation > 0.0 {
        let logits = tasks.segmentation.arch.seg_logits(tape, seg, adapted)?;
        let flat = tape.channels_last(logits)?;
        let labels: Vec<usize> = targets
            .iter()
            .flat_map(|t| t.labels.iter().map(|&l| l as usize))
            .collect();
        let ce = tape.softmax_cross_entropy(flat, &labels)?;
        terms.push(tape.scale(ce, weighting.segmentation)?);
    }
    if weighting.retrieval > 0.0 {
        let d = tasks.retrieval.arch.descriptor(tape, ret, adapted)?;
        let dim = tape.shape(d)[1];
        let target: Vec<f32> = targets.iter().flat_map(|t| t.descriptor.iter().copied()).collect();
        let target = tape.constant(Tensor::new(&[n, dim], target)?);
        let mse = tape.mse(d, target)?;
        terms.push(tape.scale(mse, weighting.retrieval * dim as f32)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBudget {
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub optimizer: AdamConfig,
}

impl Default for AdapterBudget {
    fn default() -> Self {
        AdapterBudget {
            epochs: 6,
            batch: 8,
            patience: 2,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Mean task loss of `adapter` over a dataset; frames are matched to
/// `pseudo` by index.
pub fn validation_loss(
    adapter: &Adapter,
    samples: &[Sample],
    pseudo: &PseudoGroundTruth,
    tasks: &Tasks,
    weighting: &TaskWeighting,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("validation set is empty"));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(INFER_BATCH) {
        let mut tape = Tape::new();
        let p = tape.bind(&adapter.params, false);
        let seg = tasks.segmentation.bind(&mut tape);
        let ret = tasks.retrieval.bind(&mut tape);
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &samples[i].image).collect();
        let targets = chunk.iter().map(|&i| pseudo.entry(i)).collect::<Result<Vec<_>>>()?;
        let x = tape.constant(Tensor::stack(&images)?);
        let y = adapter.arch.forward(&mut tape, &p, x)?;
        let l = task_supervision_loss(&mut tape, y, &targets, tasks, &seg, &ret, weighting)?;
        total += f64::from(tape.value(l).item()) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains a clone of `seed` on generated frames through the frozen tasks.
///
/// `train[i]` is supervised by `train_pseudo.entry(i)`, likewise for the
/// validation pair. Validation loss is measured before training and after
/// every epoch; training stops once it has not improved for
/// `budget.patience` evaluations and the best parameters are returned.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    condition_id: u32,
    train: &[Sample],
    train_pseudo: &PseudoGroundTruth,
    val: &[Sample],
    val_pseudo: &PseudoGroundTruth,
    seed: &Adapter,
    tasks: &Tasks,
    weighting: &TaskWeighting,
    budget: &AdapterBudget,
    rng: &mut Rng,
) -> Result<(Adapter, Vec<EpochRecord>)> {
    tasks.verify()?;
    weighting.validate()?;
    if train.is_empty() {
        return Err(Error::contract("adapter training set is empty"));
    }
    let mut adapter = Adapter {
        condition_id,
        ..seed.clone()
    };
    let mut best = (validation_loss(&adapter, val, val_pseudo, tasks, weighting)?, adapter.params.clone());
    let mut curve = alloc::vec![EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_loss: best.0,
    }];
    let mut adam = AdamState::new(budget.optimizer);
    let mut stale = 0;
    for epoch in 1..=budget.epochs {
        let batches = epoch_batches(train.len(), budget.batch, rng);
        let mut total = 0.0;
        for idx in &batches {
            let mut tape = Tape::new();
            let p = tape.bind(&adapter.params, true);
            let seg = tasks.segmentation.bind(&mut tape);
            let ret = tasks.retrieval.bind(&mut tape);
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let targets = idx.iter().map(|&i| train_pseudo.entry(i)).collect::<Result<Vec<_>>>()?;
            let x = tape.constant(Tensor::stack(&images)?);
            let y = adapter.arch.forward(&mut tape, &p, x)?;
            let loss = task_supervision_loss(&mut tape, y, &targets, tasks, &seg, &ret, weighting)?;
            total += f64::from(tape.value(loss).item());
            let mut grads = tape.backward(loss)?;
            adam.step(&mut adapter.params, &p.collect(&mut grads))?;
        }
        let val_loss = validation_loss(&adapter, val, val_pseudo, tasks, weighting)?;
        curve.push(EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, adapter.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= budget.patience {
                break;
            }
        }
    }
    tasks.verify()?;
    adapter.params = best.1;
    Ok((adapter, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityBudget {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
}

impl Default for IdentityBudget {
    fn default() -> Self {
        IdentityBudget {
            steps: 1500,
            batch: 8,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// Trains an adapter to reproduce its input; the result seeds every
/// condition adapter.
pub fn pretrain_identity(
    reference: &[&Tensor],
    arch: AdapterArch,
    budget: &IdentityBudget,
    rng: &mut Rng,
) -> Result<(Adapter, Vec<f32>)> {
    let mut adapter = Adapter::init(arch, crate::world::REFERENCE_ID, &mut rng.split(1));
    if budget.steps == 0 {
        return Ok((adapter, Vec::new()));
    }
    if reference.is_empty() {
        return Err(Error::contract("identity pretraining needs reference images"));
    }
    let mut adam = AdamState::new(budget.optimizer);
    let mut order = rng.split(2);
    let mut batches = Vec::new();
    let mut losses = Vec::with_capacity(budget.steps);
    for _ in 0..budget.steps {
        if batches.is_empty() {
            batches = epoch_batches(reference.len(), budget.batch, &mut order);
            batches.reverse();
        }
        let idx = batches.pop().expect("non-empty epoch");
        let images: Vec<&Tensor> = idx.iter().map(|&i| reference[i]).collect();
        let mut tape = Tape::new();
        let p = tape.bind(&adapter.params, true);
        let x = tape.constant(Tensor::stack(&images)?);
        let y = arch.forward(&mut tape, &p, x)?;
        let loss = tape.l1_loss(y, x)?;
        losses.push(tape.value(loss).item());
        let mut grads = tape.backward(loss)?;
        adam.step(&mut adapter.params, &p.collect(&mut grads))?;
    }
    Ok((adapter, losses))
}

/// Mean absolute difference between adapted and original images.
pub fn identity_error(adapter: &Adapter, images: &[&Tensor]) -> Result<f64> {
    let out = adapter.adapt(images)?;
    let mut total = 0.0;
    for (o, i) in out.iter().zip(images) {
        total += f64::from(o.mean_abs_diff(i)?);
    }
    Ok(total / images.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{TaskArch, TaskNet};

    fn tiny_tasks() -> Tasks {
        let seg = TaskArch::Segmentation { width: 4 };
        let ret = TaskArch::Retrieval {
            width: 4,
            dim: 8,
            places: 3,
            height: 16,
            image_width: 16,
        };
        Tasks {
            segmentation: TaskNet::freeze(seg, seg.init(&mut Rng::new(1))),
            retrieval: TaskNet::freeze(ret, ret.init(&mut Rng::new(2))),
        }
    }

    fn random_image(rng: &mut Rng) -> Tensor {
        Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn small_arch() -> AdapterArch {
        AdapterArch {
            widths: [4, 4, 8],
            n_res: 1,
        }
    }

    #[test]
    fn output_shape_range_and_determinism() {
        let mut rng = Rng::new(3);
        let a = Adapter::init(small_arch(), 1, &mut rng);
        let img = random_image(&mut rng);
        let out = a.adapt(&[&img]).unwrap();
        assert_eq!(out[0].shape(), img.shape());
        assert!(out[0].data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert_eq!(a.adapt(&[&img]).unwrap(), out);
    }

    #[test]
    fn odd_sizes_are_rejected() {
        let a = Adapter::init(small_arch(), 1, &mut Rng::new(3));
        assert!(a.adapt(&[&Tensor::zeros(&[3, 12, 12])]).is_err());
    }

    #[test]
    fn zero_budget_returns_initialization() {
        let (a, losses) = pretrain_identity(&[], small_arch(), &IdentityBudget { steps: 0, ..Default::default() }, &mut Rng::new(4)).unwrap();
        assert!(losses.is_empty());
        assert_eq!(a.params, small_arch().init(&mut Rng::new(4).split(1)));
    }

    fn loss_with(w: TaskWeighting, trainable_tasks: bool) -> (f32, bool, bool) {
        let tasks = tiny_tasks();
        let mut rng = Rng::new(5);
        let img = random_image(&mut rng);
        let entry = crate::tasks::compute_pseudo_gt(
            &[Sample {
                image: img.clone(),
                mask: alloc::vec![0; 256],
                place_id: 0,
                condition_id: 0,
            }],
            &tasks,
        )
        .unwrap()
        .entries
        .remove(0);
        let mut tape = Tape::new();
        let seg = tape.bind(tasks.segmentation.params(), trainable_tasks);
        let ret = tape.bind(tasks.retrieval.params(), trainable_tasks);
        let x = tape.constant(Tensor::stack(&[&img]).unwrap());
        let l = task_supervision_loss(&mut tape, x, &[&entry], &tasks, &seg, &ret, &w).unwrap();
        let mut g = tape.backward(l).unwrap();
        let seg_nonzero = seg.collect(&mut g).values().flatten().any(|&v| v != 0.0);
        let ret_nonzero = ret.collect(&mut g).values().flatten().any(|&v| v != 0.0);
        (tape.value(l).item(), seg_nonzero, ret_nonzero)
    }

    #[test]
    fn retrieval_term_vanishes_on_the_reference_image() {
        let (l, _, _) = loss_with(TaskWeighting { segmentation: 0.0, retrieval: 1.0 }, false);
        assert_eq!(l, 0.0);
        let (seg_only, _, _) = loss_with(TaskWeighting { segmentation: 1.0, retrieval: 0.0 }, false);
        assert!(seg_only >= 0.0);
    }

    #[test]
    fn retrieval_only_weighting_leaves_seg_gradients_zero() {
        let (_, seg, _) = loss_with(TaskWeighting { segmentation: 0.0, retrieval: 1.0 }, true);
        assert!(!seg);
        let (_, seg, _) = loss_with(TaskWeighting { segmentation: 1.0, retrieval: 1.0 }, true);
        assert!(seg);
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let (l1, _, _) = loss_with(TaskWeighting { segmentation: 1.0, retrieval: 10.0 }, false);
        let (l2, _, _) = loss_with(TaskWeighting { segmentation: 2.0, retrieval: 20.0 }, false);
        assert!((l2 - 2.0 * l1).abs() <= 1e-6 * l2.abs().max(1.0));
    }

    #[test]
    fn invalid_weighting() {
        assert!(TaskWeighting { segmentation: 0.0, retrieval: 0.0 }.validate().is_err());
        assert!(TaskWeighting { segmentation: -1.0, retrieval: 1.0 }.validate().is_err());
    }

    #[test]
    fn training_keeps_seed_and_tasks_and_best_validation() {
        let tasks = tiny_tasks();
        let mut rng = Rng::new(6);
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                image: random_image(&mut rng),
                mask: alloc::vec![0; 256],
                place_id: i % 3,
                condition_id: 0,
            })
            .collect();
        let pseudo = crate::tasks::compute_pseudo_gt(&samples, &tasks).unwrap();
        let seed = Adapter::init(small_arch(), 0, &mut rng);
        let before = seed.clone();
        let hashes = tasks.hashes();
        let budget = AdapterBudget {
            epochs: 3,
            batch: 2,
            ..Default::default()
        };
        let (trained, curve) = train_adapter(
            2,
            &samples,
            &pseudo,
            &samples,
            &pseudo,
            &seed,
            &tasks,
            &TaskWeighting::default(),
            &budget,
            &mut rng,
        )
        .unwrap();
        assert!(seed.params.bit_eq(&before.params));
        assert_eq!(tasks.hashes(), hashes);
        assert_eq!(trained.condition_id, 2);
        let final_val = validation_loss(&trained, &samples, &pseudo, &tasks, &TaskWeighting::default()).unwrap();
        assert!(final_val <= curve[0].val_loss);
    }
}
