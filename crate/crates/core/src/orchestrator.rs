//! Runtime adapter selection and the online learning episode.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::{train_adapter, AdapterBudget, TaskWeighting};
use crate::classifier::{average_descriptor, ConditionClassifier};
use crate::gan::{finetune_pair, generate_condition_sequence, GanHyper};
use crate::memory::{AdapterRecord, Memory, Origin, Provenance};
use crate::tasks::{PseudoGroundTruth, Tasks};
use crate::world::Sample;
use crate::{Error, Result, Rng, Tensor};

/// The `capacity` most recent frames, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    capacity: usize,
    frames: VecDeque<Tensor>,
}

impl FrameBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("frame buffer capacity must be positive".into()));
        }
        Ok(FrameBuffer {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    /// Appends `frame`, evicting the oldest one when full.
    pub fn push(&mut self, frame: Tensor) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.frames.len() == self.capacity
    }

    pub fn frames(&self) -> Vec<&Tensor> {
        self.frames.iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyPolicy {
    /// A buffer is novel when its averaged descriptor is farther than this
    /// from every stored descriptor.
    pub tau: f64,
    pub min_fill: usize,
}

impl NoveltyPolicy {
    pub fn new(tau: f64, min_fill: usize) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("novelty threshold must be positive, got {tau}")));
        }
        if min_fill == 0 {
            return Err(Error::Config("novelty test needs at least one buffered frame".into()));
        }
        Ok(NoveltyPolicy { tau, min_fill })
    }

    /// `tau = mean + 3 * std` of within-condition distances.
    pub fn calibrate(distances: &[f64], min_fill: usize) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::Config("threshold calibration needs at least one distance".into()));
        }
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        NoveltyPolicy::new(mean + 3.0 * libm::sqrt(var), min_fill)
    }

    pub fn decide(&self, nearest: u32, distance: f64) -> Novelty {
        if distance > self.tau {
            Novelty::Novel { nearest, distance }
        } else {
            Novelty::Known { id: nearest, distance }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Novelty {
    Known { id: u32, distance: f64 },
    Novel { nearest: u32, distance: f64 },
}

impl Novelty {
    pub fn is_novel(&self) -> bool {
        matches!(self, Novelty::Novel { .. })
    }

    pub fn distance(&self) -> f64 {
        match *self {
            Novelty::Known { distance, .. } | Novelty::Novel { distance, .. } => distance,
        }
    }
}

/// Averaged descriptor of the buffer and its novelty verdict.
pub fn detect_novelty(
    buffer: &FrameBuffer,
    classifier: &ConditionClassifier,
    memory: &Memory,
    policy: &NoveltyPolicy,
) -> Result<(Novelty, Vec<f32>)> {
    if buffer.len() < policy.min_fill {
        return Err(Error::contract(format!(
            "novelty test needs {} buffered frames, have {}",
            policy.min_fill,
            buffer.len()
        )));
    }
    let descriptor = average_descriptor(&classifier.extract_descriptor(&buffer.frames())?)?;
    let (record, distance) = memory.query_by_descriptor(&descriptor)?;
    Ok((policy.decide(record.condition_id, distance), descriptor))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum OnlineState {
    Monitoring,
    Adapting { new_id: u32 },
    /// A new record has just been published.
    Ready { new_id: u32 },
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Logical clock; strictly increasing.
    pub timestamp: u64,
    pub state: OnlineState,
    pub action: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nearest: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<u32>,
}

/// Everything an online episode needs besides the orchestrator itself.
pub struct OnlineContext<'a> {
    pub reference_train: &'a [Sample],
    pub pseudo_train: &'a PseudoGroundTruth,
    pub reference_val: &'a [Sample],
    pub pseudo_val: &'a PseudoGroundTruth,
    pub gan: &'a GanHyper,
    pub adapter: &'a AdapterBudget,
    pub weighting: &'a TaskWeighting,
    /// Ids of learned conditions start above this value.
    pub id_floor: u32,
    pub seed: u64,
}

/// Result of serving one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutcome {
    pub chosen: u32,
    pub adapted: Tensor,
    pub novelty: Option<Novelty>,
    pub learned: Option<u32>,
}

pub struct Orchestrator {
    pub classifier: ConditionClassifier,
    pub tasks: Tasks,
    pub memory: Memory,
    pub buffer: FrameBuffer,
    pub policy: NoveltyPolicy,
    state: OnlineState,
    clock: u64,
    frames_seen: u64,
    events: Vec<Event>,
}

impl Orchestrator {
    pub fn new(
        classifier: ConditionClassifier,
        tasks: Tasks,
        memory: Memory,
        capacity: usize,
        policy: NoveltyPolicy,
    ) -> Result<Self> {
        Ok(Orchestrator {
            classifier,
            tasks,
            memory,
            buffer: FrameBuffer::new(capacity)?,
            policy,
            state: OnlineState::Monitoring,
            clock: 0,
            frames_seen: 0,
            events: Vec::new(),
        })
    }

    pub fn state(&self) -> OnlineState {
        self.state
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    fn log(&mut self, action: &str, distance: Option<f64>, nearest: Option<u32>, chosen: Option<u32>) {
        self.clock += 1;
        self.events.push(Event {
            timestamp: self.clock,
            state: self.state,
            action: action.into(),
            frame: self.frames_seen.checked_sub(1),
            distance,
            nearest,
            chosen,
        });
    }

    fn transition(&mut self, to: OnlineState) {
        self.state = to;
        self.log("transition", None, None, None);
    }

    /// Classifies `image` and returns the adapter record of the winning
    /// condition.
    pub fn select_adapter(&self, image: &Tensor) -> Result<&AdapterRecord> {
        let id = self.classifier.predict(&[image])?[0];
        self.memory.query_by_index(id)
    }

    pub fn push_frame(&mut self, image: Tensor) {
        self.buffer.push(image);
        self.frames_seen += 1;
    }

    pub fn detect_novelty(&self) -> Result<(Novelty, Vec<f32>)> {
        detect_novelty(&self.buffer, &self.classifier, &self.memory, &self.policy)
    }

    /// Buffers `image`, picks one adapter for it and applies it. Once the
    /// buffer is full the buffer descriptor addresses the memory directly;
    /// a novel buffer starts an online episode when `online` is given.
    pub fn process_frame(&mut self, image: Tensor, online: Option<&OnlineContext>) -> Result<FrameOutcome> {
        self.push_frame(image.clone());
        let mut novelty = None;
        let mut learned = None;
        let chosen = if self.buffer.len() >= self.policy.min_fill {
            let (verdict, _) = self.detect_novelty()?;
            novelty = Some(verdict);
            match verdict {
                Novelty::Known { id, distance } => {
                    self.log("known", Some(distance), Some(id), Some(id));
                    id
                }
                Novelty::Novel { nearest, distance } => {
                    self.log("novel", Some(distance), Some(nearest), None);
                    match (online, self.state) {
                        (Some(ctx), OnlineState::Monitoring) => {
                            let id = self.run_online_adaptation(ctx)?;
                            learned = Some(id);
                            id
                        }
                        _ => nearest,
                    }
                }
            }
        } else {
            let id = self.select_adapter(&image)?.condition_id;
            self.log("classified", None, None, Some(id));
            id
        };
        let record = self.memory.query_by_index(chosen)?;
        let adapted = record.adapter.adapt(&[&image])?.remove(0);
        Ok(FrameOutcome {
            chosen,
            adapted,
            novelty,
            learned,
        })
    }

    /// Learns a new condition from the buffered frames and publishes it.
    /// On failure the memory is left untouched and monitoring resumes.
    pub fn run_online_adaptation(&mut self, ctx: &OnlineContext) -> Result<u32> {
        if self.state != OnlineState::Monitoring {
            return Err(Error::contract("an online episode is already running"));
        }
        let new_id = self.memory.next_id(ctx.id_floor);
        self.transition(OnlineState::Adapting { new_id });
        match self.learn(new_id, ctx) {
            Ok(record) => {
                self.memory.store(record)?;
                self.transition(OnlineState::Ready { new_id });
                self.transition(OnlineState::Monitoring);
                Ok(new_id)
            }
            Err(e) => {
                self.state = OnlineState::Monitoring;
                self.log("rollback", None, None, None);
                Err(e)
            }
        }
    }

    fn learn(&mut self, new_id: u32, ctx: &OnlineContext) -> Result<AdapterRecord> {
        self.tasks.verify()?;
        let (_, descriptor) = self.detect_novelty()?;
        let rng = Rng::new(ctx.seed).split(u64::from(new_id));

        let (gan_seed, gan_distance) = self.memory.nearest_with_generators(&descriptor)?;
        let gan_parent = gan_seed.condition_id;
        let seed_gan = gan_seed.generators.as_ref().expect("filtered on generators");
        let reference: Vec<&Tensor> = ctx.reference_train.iter().map(|s| &s.image).collect();
        let buffered = self.buffer.frames();
        let (tuned, _) = finetune_pair(seed_gan, &buffered, &reference, new_id, ctx.gan, rng.split(1).seed())?;
        self.log("generators_tuned", Some(gan_distance), Some(gan_parent), None);

        let translator = tuned.forward_translator();
        let train = generate_condition_sequence(&translator, ctx.reference_train, new_id)?;
        let val = generate_condition_sequence(&translator, ctx.reference_val, new_id)?;

        let (adapter_seed, adapter_distance) = self.memory.query_by_descriptor(&descriptor)?;
        let adapter_parent = adapter_seed.condition_id;
        let seed_adapter = adapter_seed.adapter.clone();
        let (adapter, _) = train_adapter(
            new_id,
            &train,
            ctx.pseudo_train,
            &val,
            ctx.pseudo_val,
            &seed_adapter,
            &self.tasks,
            ctx.weighting,
            ctx.adapter,
            &mut rng.split(2),
        )?;
        self.log("adapter_trained", Some(adapter_distance), Some(adapter_parent), None);
        self.tasks.verify()?;
        Ok(AdapterRecord {
            condition_id: new_id,
            name: format!("online_{new_id}"),
            descriptor,
            adapter,
            generators: Some(tuned),
            provenance: Provenance {
                origin: Origin::Online,
                parent: Some(gan_parent),
                timestamp: self.clock,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_is_fifo() {
        let mut b = FrameBuffer::new(3).unwrap();
        b.push(Tensor::scalar(0.0));
        assert_eq!(b.len(), 1);
        for i in 1..4 {
            b.push(Tensor::scalar(i as f32));
        }
        assert_eq!(b.len(), 3);
        let values: Vec<f32> = b.frames().iter().map(|t| t.item()).collect();
        assert_eq!(values, alloc::vec![1.0, 2.0, 3.0]);
        assert!(FrameBuffer::new(0).is_err());
    }

    #[test]
    fn threshold_boundary_is_known() {
        let p = NoveltyPolicy::new(0.5, 1).unwrap();
        assert_eq!(p.decide(2, 0.5), Novelty::Known { id: 2, distance: 0.5 });
        assert!(p.decide(2, 0.5000001).is_novel());
        assert!(NoveltyPolicy::new(0.0, 1).is_err());
    }

    #[test]
    fn calibration_is_mean_plus_three_std() {
        let p = NoveltyPolicy::calibrate(&[1.0, 3.0], 4).unwrap();
        assert!((p.tau - 5.0).abs() < 1e-12);
        assert_eq!(p.min_fill, 4);
        assert!(NoveltyPolicy::calibrate(&[], 4).is_err());
    }
}
