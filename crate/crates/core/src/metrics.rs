//! Segmentation and retrieval metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean intersection-over-union over the classes present in `gt`.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<f64> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.miou())
}

/// Dataset-level mIOU: intersections and unions are summed over every map
/// before the per-class ratio is taken.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    num_classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    present: Vec<bool>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        IouAccumulator {
            num_classes,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            present: vec![false; num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim("miou", format!("prediction {} vs ground truth {}", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::contract(format!(
                    "class id {} outside 0..{}",
                    p.max(g),
                    self.num_classes
                )));
            }
            self.present[g] = true;
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from the ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| self.present[c].then(|| self.intersection[c] as f64 / self.union[c] as f64))
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Nearest-neighbour outcome of one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub query: usize,
    pub db_index: usize,
    pub distance: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub matches: Vec<Match>,
    pub curve: Vec<PrPoint>,
    pub auc: f64,
    pub top1: f64,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    libm::sqrt(squared_distance(a, b))
}

/// Precision-recall curve of matches swept over an acceptance threshold on
/// the match distance. Every query has a true counterpart in the database,
/// so recall is measured against the number of queries. The curve starts at
/// recall 0 with precision 1 and contains one point per distinct distance.
pub fn pr_curve(matches: &[Match]) -> Vec<PrPoint> {
    let mut sorted: Vec<&Match> = matches.iter().collect();
    sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.query.cmp(&b.query)));
    let total = matches.len() as f64;
    let mut curve = vec![PrPoint {
        threshold: 0.0,
        precision: 1.0,
        recall: 0.0,
    }];
    let (mut accepted, mut correct) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let d = sorted[i].distance;
        while i < sorted.len() && sorted[i].distance == d {
            accepted += 1;
            correct += usize::from(sorted[i].correct);
            i += 1;
        }
        curve.push(PrPoint {
            threshold: d,
            precision: correct as f64 / accepted as f64,
            recall: correct as f64 / total,
        });
    }
    curve
}

/// Trapezoidal area under precision as a function of recall.
pub fn auc(curve: &[PrPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * (w[0].precision + w[1].precision) / 2.0)
        .sum()
}

/// Matches every query descriptor against its nearest database descriptor
/// (ties go to the lowest database index); a match is correct when the
/// place ids agree.
pub fn evaluate_retrieval(
    queries: &[Vec<f32>],
    query_places: &[u32],
    db: &[Vec<f32>],
    db_places: &[u32],
) -> Result<RetrievalResult> {
    if queries.len() != query_places.len() || db.len() != db_places.len() {
        return Err(Error::dim("evaluate_retrieval", "descriptor and place counts differ"));
    }
    if db.is_empty() || queries.is_empty() {
        return Err(Error::contract("retrieval needs a non-empty query set and database"));
    }
    let mut matches = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut best = (0usize, f64::INFINITY);
        for (di, d) in db.iter().enumerate() {
            if d.len() != q.len() {
                return Err(Error::dim("evaluate_retrieval", format!("descriptor {} vs {}", q.len(), d.len())));
            }
            let dist = squared_distance(q, d);
            if dist < best.1 {
                best = (di, dist);
            }
        }
        matches.push(Match {
            query: qi,
            db_index: best.0,
            distance: libm::sqrt(best.1),
            correct: db_places[best.0] == query_places[qi],
        });
    }
    let curve = pr_curve(&matches);
    let top1 = matches.iter().filter(|m| m.correct).count() as f64 / matches.len() as f64;
    Ok(RetrievalResult {
        auc: auc(&curve),
        curve,
        matches,
        top1,
    })
}

/// Square confusion matrix, rows are true labels and columns predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<u32>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<u32>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, label: u32) -> Result<usize> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::contract(format!("label {label} not in confusion matrix")))
    }

    pub fn add(&mut self, truth: u32, predicted: u32) -> Result<()> {
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        match self.total() {
            0 => 0.0,
            t => trace as f64 / t as f64,
        }
    }
}
