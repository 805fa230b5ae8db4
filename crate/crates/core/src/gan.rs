//! Least-squares cycle-consistent translation between the reference
//! condition (domain A) and one target condition (domain B).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::{infer, Conv, ConvT, Norm, ResBlock};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Bound;
use crate::tape::Activation;
use crate::world::{apply_condition_image, noise_seed, ConditionSpec, Sample};
use crate::{Error, ParamSet, Result, Rng, Tape, Tensor, Var};

const INFER_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanHyper {
    pub lambda_rec: f32,
    pub lambda_adv: f32,
    /// Generator/discriminator update pairs of offline training.
    pub steps: usize,
    /// Update pairs of an online fine-tuning episode.
    pub finetune_steps: usize,
    pub batch: usize,
    pub pool_size: usize,
    /// Learning rate decays linearly to zero over this final fraction of steps.
    pub decay_fraction: f32,
    pub optimizer: AdamConfig,
}

impl Default for GanHyper {
    fn default() -> Self {
        GanHyper {
            lambda_rec: 10.0,
            lambda_adv: 1.0,
            steps: 2000,
            finetune_steps: 600,
            batch: 1,
            pool_size: 50,
            decay_fraction: 0.5,
            optimizer: AdamConfig {
                lr: 2e-4,
                beta1: 0.5,
                ..AdamConfig::default()
            },
        }
    }
}

/// Generator and discriminator widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanArch {
    pub ngf: usize,
    pub ndf: usize,
    pub n_res: usize,
}

impl Default for GanArch {
    fn default() -> Self {
        GanArch { ngf: 8, ndf: 8, n_res: 2 }
    }
}

impl GanArch {
    pub fn init_generator(&self, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let g = Generator::layers(self);
        g.stem.init(&mut p, rng);
        g.stem_norm.init(&mut p);
        for (c, n) in &g.down {
            c.init(&mut p, rng);
            n.init(&mut p);
        }
        for r in &g.res {
            r.init(&mut p, rng);
        }
        for (c, n) in &g.up {
            c.init(&mut p, rng);
            n.init(&mut p);
        }
        g.head.init(&mut p, rng);
        p
    }

    pub fn init_discriminator(&self, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let d = Discriminator::layers(self);
        for (i, c) in d.convs.iter().enumerate() {
            c.init(&mut p, rng);
            if let Some(n) = &d.norms[i] {
                n.init(&mut p);
            }
        }
        d.score.init(&mut p, rng);
        p
    }

    /// Maps an `N x 3 x H x W` batch in `[0, 1]` to the other domain.
    pub fn generate(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let g = Generator::layers(self);
        let h = tape.affine(x, 2.0, -1.0)?;
        let mut h = crate::nn::conv_norm_act(tape, p, &g.stem, &g.stem_norm, Activation::Relu, h)?;
        for (c, n) in &g.down {
            h = crate::nn::conv_norm_act(tape, p, c, n, Activation::Relu, h)?;
        }
        for r in &g.res {
            h = r.forward(tape, p, h)?;
        }
        for (c, n) in &g.up {
            h = c.forward(tape, p, h)?;
            h = n.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        let h = g.head.forward(tape, p, h)?;
        let h = tape.activation(h, Activation::Tanh)?;
        tape.affine(h, 0.5, 0.5)
    }

    /// Patch realness scores, `N x 1 x H/8 x W/8`.
    pub fn discriminate(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let d = Discriminator::layers(self);
        let mut h = tape.affine(x, 2.0, -1.0)?;
        for (c, n) in d.convs.iter().zip(&d.norms) {
            h = c.forward(tape, p, h)?;
            if let Some(n) = n {
                h = n.forward(tape, p, h)?;
            }
            h = tape.activation(h, Activation::LeakyRelu(0.2))?;
        }
        d.score.forward(tape, p, h)
    }
}

struct Generator {
    stem: Conv,
    stem_norm: Norm,
    down: Vec<(Conv, Norm)>,
    res: Vec<ResBlock>,
    up: Vec<(ConvT, Norm)>,
    head: Conv,
}

impl Generator {
    fn layers(a: &GanArch) -> Generator {
        let f = a.ngf;
        Generator {
            stem: Conv::new("stem", 3, f, 3, 1, 1),
            stem_norm: Norm::new("stem_n", f),
            down: alloc::vec![
                (Conv::new("d1", f, 2 * f, 4, 2, 1), Norm::new("d1n", 2 * f)),
                (Conv::new("d2", 2 * f, 4 * f, 4, 2, 1), Norm::new("d2n", 4 * f)),
            ],
            res: (0..a.n_res).map(|i| ResBlock::new(&format!("r{i}"), 4 * f)).collect(),
            up: alloc::vec![
                (ConvT::new("u1", 4 * f, 2 * f, 4, 2, 1), Norm::new("u1n", 2 * f)),
                (ConvT::new("u2", 2 * f, f, 4, 2, 1), Norm::new("u2n", f)),
            ],
            head: Conv::new("head", f, 3, 3, 1, 1),
        }
    }
}

struct Discriminator {
    convs: Vec<Conv>,
    norms: Vec<Option<Norm>>,
    score: Conv,
}

impl Discriminator {
    fn layers(a: &GanArch) -> Discriminator {
        let f = a.ndf;
        Discriminator {
            convs: alloc::vec![
                Conv::new("c1", 3, f, 4, 2, 1),
                Conv::new("c2", f, 2 * f, 4, 2, 1),
                Conv::new("c3", 2 * f, 4 * f, 4, 2, 1),
            ],
            norms: alloc::vec![None, Some(Norm::new("n2", 2 * f)), Some(Norm::new("n3", 4 * f))],
            score: Conv::new("score", 4 * f, 1, 3, 1, 1),
        }
    }
}

/// `mean((scores - 1)^2)`: the generator wants every patch judged real.
pub fn generator_adversarial_loss(tape: &mut Tape, scores: Var) -> Result<Var> {
    tape.squared_error(scores, 1.0)
}

/// `mean((real - 1)^2) + mean(fake^2)`.
pub fn discriminator_loss(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let r = tape.squared_error(real, 1.0)?;
    let f = tape.squared_error(fake, 0.0)?;
    tape.add(r, f)
}

/// Mean absolute difference between an image and its round trip.
pub fn cycle_loss(tape: &mut Tape, input: Var, reconstructed: Var) -> Result<Var> {
    tape.l1_loss(input, reconstructed)
}

/// `lambda_rec * rec + lambda_adv * adv`.
pub fn generator_objective(tape: &mut Tape, rec: Var, adv: Var, hyper: &GanHyper) -> Result<Var> {
    let r = tape.scale(rec, hyper.lambda_rec)?;
    let a = tape.scale(adv, hyper.lambda_adv)?;
    tape.add(r, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorPair {
    pub condition_id: u32,
    /// Reference to condition.
    pub g_ab: ParamSet,
    /// Condition to reference.
    pub g_ba: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorPair {
    pub d_a: ParamSet,
    pub d_b: ParamSet,
}

/// Both directions of one translation plus the discriminators needed to
/// keep training it.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub arch: GanArch,
    pub generators: GeneratorPair,
    pub discriminators: DiscriminatorPair,
}

impl GanModel {
    pub fn init(arch: GanArch, condition_id: u32, rng: &mut Rng) -> GanModel {
        GanModel {
            arch,
            generators: GeneratorPair {
                condition_id,
                g_ab: arch.init_generator(&mut rng.split(1)),
                g_ba: arch.init_generator(&mut rng.split(2)),
            },
            discriminators: DiscriminatorPair {
                d_a: arch.init_discriminator(&mut rng.split(3)),
                d_b: arch.init_discriminator(&mut rng.split(4)),
            },
        }
    }

    /// The reference-to-condition direction as a [`Translator`].
    pub fn forward_translator(&self) -> BoundGenerator<'_> {
        BoundGenerator {
            arch: self.arch,
            params: &self.generators.g_ab,
        }
    }

    /// Generators under `ab.`/`ba.`, discriminators under `a.`/`b.`.
    pub fn to_params(&self) -> ParamSet {
        let mut p = self.generators.g_ab.prefixed("ab.");
        p.merge(self.generators.g_ba.prefixed("ba."));
        p.merge(self.discriminators.d_a.prefixed("a."));
        p.merge(self.discriminators.d_b.prefixed("b."));
        p
    }

    pub fn from_params(arch: GanArch, condition_id: u32, p: &ParamSet) -> Result<GanModel> {
        let model = GanModel {
            arch,
            generators: GeneratorPair {
                condition_id,
                g_ab: p.strip_prefix("ab."),
                g_ba: p.strip_prefix("ba."),
            },
            discriminators: DiscriminatorPair {
                d_a: p.strip_prefix("a."),
                d_b: p.strip_prefix("b."),
            },
        };
        let reference = GanModel::init(arch, condition_id, &mut Rng::new(0));
        for (name, t) in reference.to_params().iter() {
            if model.to_params().get(name)?.shape() != t.shape() {
                return Err(Error::dim("gan", format!("parameter `{name}` has the wrong shape")));
            }
        }
        if model.to_params().len() != reference.to_params().len() {
            return Err(Error::Config("translation checkpoint has unexpected parameters".into()));
        }
        Ok(model)
    }
}

/// Maps image batches from one appearance to another.
pub trait Translator {
    fn translate(&self, images: &[&Tensor]) -> Result<Vec<Tensor>>;
}

/// A generator bound to its parameters.
pub struct BoundGenerator<'a> {
    pub arch: GanArch,
    pub params: &'a ParamSet,
}

impl Translator for BoundGenerator<'_> {
    fn translate(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let batch = Tensor::stack(chunk)?;
            let y = infer(self.params, |tape, p| {
                let x = tape.constant(batch);
                let y = self.arch.generate(tape, p, x)?;
                Ok(tape.value(y).clone())
            })?;
            for i in 0..chunk.len() {
                out.push(y.unstack(i)?);
            }
        }
        Ok(out)
    }
}

/// Leaves images untouched.
pub struct Identity;

impl Translator for Identity {
    fn translate(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        Ok(images.iter().map(|&t| t.clone()).collect())
    }
}

/// History of generated images fed to the discriminators.
#[derive(Clone, Debug)]
pub struct ImagePool {
    capacity: usize,
    images: VecDeque<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            images: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stores `image` and returns what the discriminator should see: the
    /// image itself while the pool fills, afterwards with probability one half
    /// a stored image that `image` replaces.
    pub fn query(&mut self, image: Tensor, rng: &mut Rng) -> Tensor {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push_back(image.clone());
            return image;
        }
        if rng.uniform() < 0.5 {
            let i = rng.below(self.capacity);
            core::mem::replace(&mut self.images[i], image)
        } else {
            image
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_gen: f32,
    pub l_disc: f32,
    pub l_rec: f32,
    pub l_adv: f32,
}

struct Trainer<'a> {
    arch: GanArch,
    hyper: &'a GanHyper,
    gen: ParamSet,
    disc: ParamSet,
    gen_adam: AdamState,
    disc_adam: AdamState,
    pool_a: ImagePool,
    pool_b: ImagePool,
    rng: Rng,
}

impl Trainer<'_> {
    fn step(&mut self, a: Tensor, b: Tensor, step: usize) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let g = tape.bind(&self.gen, true);
        let d = tape.bind(&self.disc, false);
        let (g_ab, g_ba) = (g.scoped("ab."), g.scoped("ba."));
        let (d_a, d_b) = (d.scoped("a."), d.scoped("b."));
        let real_a = tape.constant(a);
        let real_b = tape.constant(b);
        let fake_b = self.arch.generate(&mut tape, &g_ab, real_a)?;
        let rec_a = self.arch.generate(&mut tape, &g_ba, fake_b)?;
        let fake_a = self.arch.generate(&mut tape, &g_ba, real_b)?;
        let rec_b = self.arch.generate(&mut tape, &g_ab, fake_a)?;
        let score_b = self.arch.discriminate(&mut tape, &d_b, fake_b)?;
        let score_a = self.arch.discriminate(&mut tape, &d_a, fake_a)?;
        let adv_b = generator_adversarial_loss(&mut tape, score_b)?;
        let adv_a = generator_adversarial_loss(&mut tape, score_a)?;
        let adv = tape.add(adv_b, adv_a)?;
        let rec_la = cycle_loss(&mut tape, real_a, rec_a)?;
        let rec_lb = cycle_loss(&mut tape, real_b, rec_b)?;
        let rec = tape.add(rec_la, rec_lb)?;
        let total = generator_objective(&mut tape, rec, adv, self.hyper)?;
        let mut grads = tape.backward(total)?;
        self.gen_adam.step(&mut self.gen, &g.collect(&mut grads))?;

        let fake_b = self.pool_b.query(tape.value(fake_b).clone(), &mut self.rng);
        let fake_a = self.pool_a.query(tape.value(fake_a).clone(), &mut self.rng);
        let (real_a, real_b) = (tape.value(real_a).clone(), tape.value(real_b).clone());
        let (l_rec, l_adv, l_gen) = (
            tape.value(rec).item(),
            tape.value(adv).item(),
            tape.value(total).item(),
        );

        let mut tape = Tape::new();
        let d = tape.bind(&self.disc, true);
        let (d_a, d_b) = (d.scoped("a."), d.scoped("b."));
        let mut terms = [None, None];
        for (slot, (p, real, fake)) in [(&d_a, real_a, fake_a), (&d_b, real_b, fake_b)].into_iter().enumerate() {
            let r = tape.constant(real);
            let f = tape.constant(fake);
            let sr = self.arch.discriminate(&mut tape, p, r)?;
            let sf = self.arch.discriminate(&mut tape, p, f)?;
            terms[slot] = Some(discriminator_loss(&mut tape, sr, sf)?);
        }
        let l_disc = tape.add(terms[0].unwrap(), terms[1].unwrap())?;
        let mut grads = tape.backward(l_disc)?;
        self.disc_adam.step(&mut self.disc, &d.collect(&mut grads))?;
        Ok(LossRecord {
            step,
            l_gen,
            l_disc: tape.value(l_disc).item(),
            l_rec,
            l_adv,
        })
    }
}

fn stack_batch(set: &[&Tensor], order: &[usize], cursor: &mut usize, batch: usize) -> Result<Tensor> {
    let picked: Vec<&Tensor> = (0..batch)
        .map(|_| {
            let t = set[order[*cursor % order.len()]];
            *cursor += 1;
            t
        })
        .collect();
    Tensor::stack(&picked)
}

fn run_training(
    model: &GanModel,
    ref_set: &[&Tensor],
    cond_set: &[&Tensor],
    hyper: &GanHyper,
    steps: usize,
    seed: u64,
) -> Result<(GanModel, Vec<LossRecord>)> {
    if ref_set.is_empty() || cond_set.is_empty() {
        return Err(Error::contract("translation training needs images from both domains"));
    }
    let root = Rng::new(seed);
    let mut trainer = Trainer {
        arch: model.arch,
        hyper,
        gen: {
            let mut p = model.generators.g_ab.prefixed("ab.");
            p.merge(model.generators.g_ba.prefixed("ba."));
            p
        },
        disc: {
            let mut p = model.discriminators.d_a.prefixed("a.");
            p.merge(model.discriminators.d_b.prefixed("b."));
            p
        },
        gen_adam: AdamState::new(hyper.optimizer),
        disc_adam: AdamState::new(hyper.optimizer),
        pool_a: ImagePool::new(hyper.pool_size),
        pool_b: ImagePool::new(hyper.pool_size),
        rng: root.split(10),
    };
    // The two domains are drawn through independent permutations so no
    // aligned pair is ever presented.
    let mut order_rng = [root.split(11), root.split(12)];
    let mut orders = [
        (0..ref_set.len()).collect::<Vec<_>>(),
        (0..cond_set.len()).collect::<Vec<_>>(),
    ];
    let mut cursors = [0usize, 0usize];
    let batch = hyper.batch.max(1);
    let decay_start = ((1.0 - hyper.decay_fraction.clamp(0.0, 1.0)) * steps as f32) as usize;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        for k in 0..2 {
            if cursors[k].is_multiple_of(orders[k].len()) {
                order_rng[k].shuffle(&mut orders[k]);
            }
        }
        let a = stack_batch(ref_set, &orders[0], &mut cursors[0], batch)?;
        let b = stack_batch(cond_set, &orders[1], &mut cursors[1], batch)?;
        if step >= decay_start {
            let frac = (steps - step) as f64 / (steps - decay_start).max(1) as f64;
            trainer.gen_adam.config.lr = hyper.optimizer.lr * frac;
            trainer.disc_adam.config.lr = hyper.optimizer.lr * frac;
        }
        let record = trainer.step(a, b, step).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: diagnostic(op, &history, &trainer.gen, &trainer.disc),
            },
            other => other,
        })?;
        history.push(record);
    }
    let mut out = model.clone();
    out.generators.g_ab = trainer.gen.strip_prefix("ab.");
    out.generators.g_ba = trainer.gen.strip_prefix("ba.");
    out.discriminators.d_a = trainer.disc.strip_prefix("a.");
    out.discriminators.d_b = trainer.disc.strip_prefix("b.");
    Ok((out, history))
}

fn diagnostic(op: &str, history: &[LossRecord], gen: &ParamSet, disc: &ParamSet) -> String {
    let tail: Vec<String> = history
        .iter()
        .rev()
        .take(5)
        .map(|r| format!("step {}: gen {} disc {} rec {} adv {}", r.step, r.l_gen, r.l_disc, r.l_rec, r.l_adv))
        .collect();
    let max_abs = |p: &ParamSet| {
        p.iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
            .fold(0.0f32, f32::max)
    };
    format!(
        "non-finite value in {op}; max |generator weight| {}, max |discriminator weight| {}; last losses [{}]",
        max_abs(gen),
        max_abs(disc),
        tail.join("; ")
    )
}

/// Trains a fresh translation model between unpaired reference and
/// condition images.
pub fn train_pair(
    ref_set: &[&Tensor],
    cond_set: &[&Tensor],
    arch: GanArch,
    condition_id: u32,
    hyper: &GanHyper,
    seed: u64,
) -> Result<(GanModel, Vec<LossRecord>)> {
    let init = GanModel::init(arch, condition_id, &mut Rng::new(seed).split(0));
    run_training(&init, ref_set, cond_set, hyper, hyper.steps, seed)
}

/// Clones `seed` and keeps training it towards the buffered condition
/// images for `hyper.finetune_steps` steps. `seed` itself is never modified.
pub fn finetune_pair(
    seed: &GanModel,
    buffer: &[&Tensor],
    ref_set: &[&Tensor],
    condition_id: u32,
    hyper: &GanHyper,
    rng_seed: u64,
) -> Result<(GanModel, Vec<LossRecord>)> {
    if buffer.is_empty() {
        return Err(Error::contract("fine-tuning needs a non-empty frame buffer"));
    }
    let (mut model, history) = run_training(seed, ref_set, buffer, hyper, hyper.finetune_steps, rng_seed)?;
    model.generators.condition_id = condition_id;
    Ok((model, history))
}

/// Translates every reference sample, keeping its mask and place id.
pub fn generate_condition_sequence(
    translator: &dyn Translator,
    reference: &[Sample],
    condition_id: u32,
) -> Result<Vec<Sample>> {
    let images: Vec<&Tensor> = reference.iter().map(|s| &s.image).collect();
    let translated = translator.translate(&images)?;
    Ok(reference
        .iter()
        .zip(translated)
        .map(|(s, image)| Sample {
            image,
            mask: s.mask.clone(),
            place_id: s.place_id,
            condition_id,
        })
        .collect())
}

/// Mean absolute difference between translated reference frames and the
/// closed-form condition applied to the same frames.
pub fn analytic_gap(
    translator: &dyn Translator,
    reference: &[Sample],
    spec: &ConditionSpec,
    layout_seed: u64,
) -> Result<f64> {
    let images: Vec<&Tensor> = reference.iter().map(|s| &s.image).collect();
    let translated = translator.translate(&images)?;
    let mut total = 0.0;
    for (i, (s, t)) in reference.iter().zip(&translated).enumerate() {
        let target = apply_condition_image(&s.image, spec, noise_seed(layout_seed, spec.id, s.place_id, i as u64))?;
        total += f64::from(t.mean_abs_diff(&target)?);
    }
    Ok(total / reference.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f32 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    fn scores(v: f32) -> Tensor {
        Tensor::full(&[2, 1, 3, 3], v)
    }

    #[test]
    fn adversarial_loss_closed_forms() {
        for (s, want) in [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)] {
            let got = loss_of(|t| {
                let x = t.constant(scores(s));
                generator_adversarial_loss(t, x)
            });
            assert_eq!(got, want);
        }
    }

    #[test]
    fn discriminator_loss_closed_forms() {
        for (r, f, want) in [(1.0, 0.0, 0.0), (0.0, 1.0, 2.0), (0.5, 0.5, 0.5)] {
            let got = loss_of(|t| {
                let real = t.constant(scores(r));
                let fake = t.constant(scores(f));
                discriminator_loss(t, real, fake)
            });
            assert_eq!(got, want);
        }
    }

    #[test]
    fn objective_arithmetic() {
        let hyper = GanHyper::default();
        let got = loss_of(|t| {
            let rec = t.constant(Tensor::scalar(0.2));
            let adv = t.constant(Tensor::scalar(0.5));
            generator_objective(t, rec, adv, &hyper)
        });
        assert!((got - 2.5).abs() < 1e-6);
        let zero = loss_of(|t| {
            let rec = t.constant(Tensor::scalar(0.0));
            let adv = t.constant(Tensor::scalar(0.0));
            generator_objective(t, rec, adv, &hyper)
        });
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn zero_adversarial_weight_blocks_adv_gradient() {
        let hyper = GanHyper {
            lambda_adv: 0.0,
            ..GanHyper::default()
        };
        let mut tape = Tape::new();
        let rec = tape.leaf(Tensor::scalar(0.3), true);
        let adv = tape.leaf(Tensor::scalar(0.7), true);
        let obj = generator_objective(&mut tape, rec, adv, &hyper).unwrap();
        let g = tape.backward(obj).unwrap();
        assert_eq!(g.wrt(adv).item(), 0.0);
        assert_eq!(g.wrt(rec).item(), 10.0);
    }

    #[test]
    fn cycle_loss_is_l1() {
        let got = loss_of(|t| {
            let a = t.constant(Tensor::full(&[1, 3, 2, 2], 1.0));
            let b = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
            cycle_loss(t, a, b)
        });
        assert_eq!(got, 1.0);
    }

    #[test]
    fn shapes_and_range() {
        let arch = GanArch::default();
        let model = GanModel::init(arch, 1, &mut Rng::new(1));
        let img = Tensor::full(&[3, 16, 16], 0.4);
        let out = model.forward_translator().translate(&[&img]).unwrap();
        assert_eq!(out[0].shape(), &[3, 16, 16]);
        assert!(out[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        let s = infer(&model.discriminators.d_a, |t, p| {
            let x = t.constant(Tensor::full(&[1, 3, 16, 16], 0.4));
            let y = arch.discriminate(t, p, x)?;
            Ok(t.shape(y).to_vec())
        })
        .unwrap();
        assert_eq!(s, vec![1, 1, 2, 2]);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let arch = GanArch::default();
        let hyper = GanHyper {
            steps: 0,
            ..GanHyper::default()
        };
        let img = Tensor::full(&[3, 16, 16], 0.4);
        let (m, hist) = train_pair(&[&img], &[&img], arch, 1, &hyper, 5).unwrap();
        assert!(hist.is_empty());
        assert_eq!(m, GanModel::init(arch, 1, &mut Rng::new(5).split(0)));
    }

    #[test]
    fn short_training_is_reproducible_and_finetune_clones() {
        let arch = GanArch { ngf: 4, ndf: 4, n_res: 1 };
        let hyper = GanHyper {
            steps: 20,
            finetune_steps: 3,
            pool_size: 4,
            ..GanHyper::default()
        };
        let mut rng = Rng::new(9);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.uniform()).collect()).unwrap())
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let (m1, h1) = train_pair(&refs[..2], &refs[2..], arch, 1, &hyper, 3).unwrap();
        let (_, h2) = train_pair(&refs[..2], &refs[2..], arch, 1, &hyper, 3).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 20);

        let before = m1.clone();
        let (tuned, _) = finetune_pair(&m1, &refs[2..3], &refs[..2], 7, &hyper, 4).unwrap();
        assert!(m1.to_params().bit_eq(&before.to_params()));
        assert!(!tuned.to_params().bit_eq(&m1.to_params()));
        assert_eq!(tuned.generators.condition_id, 7);

        let zero = GanHyper {
            finetune_steps: 0,
            ..hyper.clone()
        };
        let (same, _) = finetune_pair(&m1, &refs[2..3], &refs[..2], 7, &zero, 4).unwrap();
        assert!(same.to_params().bit_eq(&m1.to_params()));
        assert!(finetune_pair(&m1, &[], &refs[..2], 7, &hyper, 4).is_err());
    }

    #[test]
    fn identity_sequence_preserves_everything() {
        let s = crate::world::render_scene(0, 1, 0, &crate::world::WorldConfig::default()).unwrap();
        let out = generate_condition_sequence(&Identity, &[s.clone(), s.clone()], 3).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].image, s.image);
        assert_eq!(out[0].mask, s.mask);
        assert_eq!(out[0].place_id, s.place_id);
        assert_eq!(out[0].condition_id, 3);
    }

    #[test]
    fn pool_returns_input_while_filling() {
        let mut pool = ImagePool::new(2);
        let mut rng = Rng::new(1);
        let a = Tensor::scalar(1.0);
        assert_eq!(pool.query(a.clone(), &mut rng), a);
        assert_eq!(pool.len(), 1);
        let mut zero = ImagePool::new(0);
        assert_eq!(zero.query(a.clone(), &mut rng), a);
        assert!(zero.is_empty());
    }
}
