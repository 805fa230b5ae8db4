//! Closed-form loss values and counting/integration oracles for the metrics.
//! Each function returns one message per failed identity.

use condadapt_core::gan::{cycle_loss, discriminator_loss, generator_adversarial_loss, generator_objective, GanHyper};
use condadapt_core::metrics::{auc, evaluate_retrieval, miou, pr_curve, ConfusionMatrix, IouAccumulator, Match, PrPoint};
use condadapt_core::{Rng, Tape, Tensor, Var};

fn scalar_of(f: impl FnOnce(&mut Tape) -> condadapt_core::Result<Var>) -> f32 {
    let mut tape = Tape::new();
    let v = f(&mut tape).expect("loss evaluates");
    tape.value(v).item()
}

fn full(v: f32) -> Tensor {
    Tensor::full(&[2, 1, 3, 3], v)
}

fn expect(failures: &mut Vec<String>, what: &str, got: f64, want: f64, tol: f64) {
    if (got - want).abs() > tol || got.is_nan() {
        failures.push(format!("{what}: got {got}, expected {want}"));
    }
}

pub fn loss_identity_failures() -> Vec<String> {
    let mut f = Vec::new();
    for (d, want) in [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)] {
        let got = scalar_of(|t| {
            let s = t.constant(full(d));
            generator_adversarial_loss(t, s)
        });
        expect(&mut f, &format!("generator LSGAN loss at D={d}"), got.into(), want, 0.0);
    }
    for (real, fake, want) in [(1.0, 0.0, 0.0), (0.0, 1.0, 2.0), (0.5, 0.5, 0.5)] {
        let got = scalar_of(|t| {
            let r = t.constant(full(real));
            let k = t.constant(full(fake));
            discriminator_loss(t, r, k)
        });
        expect(&mut f, &format!("discriminator loss at real={real} fake={fake}"), got.into(), want, 0.0);
    }
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.3, -0.7, 0.1, 0.9]).unwrap();
    for (a, b, want, what) in [
        (x.clone(), x.clone(), 0.0, "cycle loss of identical images"),
        (Tensor::full(&[1, 3, 2, 2], 1.0), Tensor::zeros(&[1, 3, 2, 2]), 1.0, "cycle loss of ones vs zeros"),
    ] {
        let got = scalar_of(|t| {
            let a = t.constant(a);
            let b = t.constant(b);
            cycle_loss(t, a, b)
        });
        expect(&mut f, what, got.into(), want, 0.0);
    }
    let got = scalar_of(|t| {
        let l = t.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        t.softmax_cross_entropy(l, &[0])
    });
    expect(&mut f, "cross-entropy of uniform logits", got.into(), std::f64::consts::LN_2, 1e-6);
    for (a, c, want) in [(0.7, 0.7, 0.0), (0.0, 1.0, 1.0), (0.5, 1.0, 0.25)] {
        let got = scalar_of(|t| {
            let v = t.constant(full(a));
            t.squared_error(v, c)
        });
        expect(&mut f, &format!("squared error of {a} against {c}"), got.into(), want, 0.0);
    }
    let hyper = GanHyper::default();
    for (rec, adv, want) in [(0.2, 0.5, 2.5), (0.0, 0.0, 0.0)] {
        let got = scalar_of(|t| {
            let r = t.constant(Tensor::scalar(rec));
            let a = t.constant(Tensor::scalar(adv));
            generator_objective(t, r, a, &hyper)
        });
        expect(&mut f, &format!("generator objective with L_rec={rec} L_adv={adv}"), got.into(), want, 0.0);
    }
    f
}

/// Per-class intersection and union by visiting every pixel.
pub fn miou_oracle(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        if !gt.contains(&c) {
            continue;
        }
        let mut inter = 0u64;
        let mut union = 0u64;
        for i in 0..gt.len() {
            let (p, g) = (pred[i] == c, gt[i] == c);
            inter += u64::from(p && g);
            union += u64::from(p || g);
        }
        ious.push(inter as f64 / union as f64);
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Precision and recall at every distinct distance, by re-counting all
/// matches for each threshold.
pub fn pr_oracle(matches: &[Match]) -> Vec<PrPoint> {
    let mut thresholds: Vec<f64> = matches.iter().map(|m| m.distance).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut out = vec![PrPoint {
        threshold: 0.0,
        precision: 1.0,
        recall: 0.0,
    }];
    for t in thresholds {
        let accepted: Vec<&Match> = matches.iter().filter(|m| m.distance <= t).collect();
        let correct = accepted.iter().filter(|m| m.correct).count();
        out.push(PrPoint {
            threshold: t,
            precision: correct as f64 / accepted.len() as f64,
            recall: correct as f64 / matches.len() as f64,
        });
    }
    out
}

fn m(query: usize, distance: f64, correct: bool) -> Match {
    Match {
        query,
        db_index: 0,
        distance,
        correct,
    }
}

pub fn metric_oracle_failures() -> Vec<String> {
    let mut f = Vec::new();

    let gt: Vec<u8> = vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 1];
    let pred: Vec<u8> = vec![0, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 1, 1];
    // Class 0: 7 shared pixels, 10 in the union. Class 1: 6 shared, 9 in the union.
    let hand = (7.0 / 10.0 + 6.0 / 9.0) / 2.0;
    let got = miou(&pred, &gt, 2).unwrap();
    expect(&mut f, "4x4 two-class mIOU vs pixel count", got, miou_oracle(&pred, &gt, 2), 0.0);
    expect(&mut f, "4x4 two-class mIOU vs hand count", got, hand, 1e-15);
    expect(&mut f, "mIOU of identical maps", miou(&gt, &gt, 2).unwrap(), 1.0, 0.0);
    expect(&mut f, "mIOU of disjoint maps", miou(&[1; 16], &[0; 16], 2).unwrap(), 0.0, 0.0);
    let mut rng = Rng::new(31);
    for case in 0..20 {
        let n = 1 + rng.below(64);
        let p: Vec<u8> = (0..n).map(|_| rng.below(5) as u8).collect();
        let g: Vec<u8> = (0..n).map(|_| rng.below(5) as u8).collect();
        expect(&mut f, &format!("random mIOU case {case}"), miou(&p, &g, 5).unwrap(), miou_oracle(&p, &g, 5), 0.0);
    }
    let mut acc = IouAccumulator::new(3);
    acc.add(&[0, 1], &[0, 0]).unwrap();
    acc.add(&[2, 2], &[2, 1]).unwrap();
    // Pooled over both maps: class 0 1/2, class 1 0/2, class 2 1/2.
    expect(&mut f, "dataset-pooled mIOU", acc.miou(), 1.0 / 3.0, 1e-15);
    expect(
        &mut f,
        "dataset-pooled mIOU vs concatenated oracle",
        acc.miou(),
        miou_oracle(&[0, 1, 2, 2], &[0, 0, 2, 1], 3),
        0.0,
    );

    // Correct at 1, wrong at 2, correct at 3: points (0,1) (1/3,1) (1/3,1/2) (2/3,2/3).
    let three = [m(0, 1.0, true), m(1, 2.0, false), m(2, 3.0, true)];
    let curve = pr_curve(&three);
    if curve != pr_oracle(&three) {
        f.push(format!("3-point PR curve differs from the threshold sweep: {curve:?}"));
    }
    expect(&mut f, "3-point trapezoid AUC", auc(&curve), 19.0 / 36.0, 1e-15);
    for case in 0..20 {
        let n = 1 + rng.below(40);
        let ms: Vec<Match> = (0..n)
            .map(|q| m(q, f64::from(rng.below(6) as u32) * 0.5, rng.uniform() < 0.5))
            .collect();
        let oracle = pr_oracle(&ms);
        if pr_curve(&ms) != oracle {
            f.push(format!("random PR case {case} differs from the threshold sweep"));
        }
        let area: f64 = oracle
            .windows(2)
            .map(|w| (w[1].recall - w[0].recall) * (w[1].precision + w[0].precision) * 0.5)
            .sum();
        expect(&mut f, &format!("random AUC case {case}"), auc(&pr_curve(&ms)), area, 0.0);
    }

    let descriptors: Vec<Vec<f32>> = (0..32).map(|i| vec![i as f32, (i * i) as f32 * 0.1]).collect();
    let places: Vec<u32> = (0..32).collect();
    let r = evaluate_retrieval(&descriptors, &places, &descriptors, &places).unwrap();
    expect(&mut f, "self-match AUC", r.auc, 1.0, 0.0);
    let mut chance = 0.0;
    for seed in 0..10 {
        let mut rng = Rng::new(500 + seed);
        let mut random = |n: usize| -> Vec<Vec<f32>> { (0..n).map(|_| (0..16).map(|_| rng.normal()).collect()).collect() };
        let (q, d) = (random(64), random(64));
        let qp: Vec<u32> = (0..64).map(|i| i % 32).collect();
        chance += evaluate_retrieval(&q, &qp, &d, &qp).unwrap().auc / 10.0;
    }
    if chance >= 0.2 {
        f.push(format!("random-descriptor AUC {chance} not below 0.2"));
    }

    let mut cm = ConfusionMatrix::new(vec![0, 3, 5]);
    let pairs = [(0, 0), (0, 3), (3, 3), (5, 5), (5, 5), (5, 0), (3, 3)];
    for (t, p) in pairs {
        cm.add(t, p).unwrap();
    }
    let agree = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    expect(&mut f, "confusion accuracy vs counting", cm.accuracy(), agree / pairs.len() as f64, 0.0);
    f
}
