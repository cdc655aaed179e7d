//! Straight-loop reference implementations.

use ezvsl::micl::MatchStrategy;
use ezvsl::synth::BBox;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `cells[c]` is the `d`-vector at location `c`.
pub fn match_score(audio: &[f64], cells: &[Vec<f64>], strategy: MatchStrategy) -> f64 {
    match strategy {
        MatchStrategy::MaxOfSim => cells.iter().map(|c| cos(audio, c)).fold(f64::MIN, f64::max),
        MatchStrategy::AvgOfSim => cells.iter().map(|c| cos(audio, c)).sum::<f64>() / cells.len() as f64,
        MatchStrategy::SimOfMaxpool => {
            let pooled: Vec<f64> = (0..audio.len())
                .map(|j| cells.iter().map(|c| c[j]).fold(f64::MIN, f64::max))
                .collect();
            cos(audio, &pooled)
        }
    }
}

/// `(a2v, v2a)` where `s[k][i]` scores audio `k` against bag `i`.
pub fn micl(bags: &[Vec<Vec<f64>>], audio: &[Vec<f64>], tau: f64, strategy: MatchStrategy) -> (f64, f64) {
    let b = bags.len();
    let s: Vec<Vec<f64>> = audio
        .iter()
        .map(|a| bags.iter().map(|bag| match_score(a, bag, strategy)).collect())
        .collect();
    let (mut a2v, mut v2a) = (0.0, 0.0);
    for i in 0..b {
        let row: f64 = (0..b).map(|k| (s[i][k] / tau).exp()).sum();
        let col: f64 = (0..b).map(|k| (s[k][i] / tau).exp()).sum();
        let own = (s[i][i] / tau).exp();
        a2v -= (own / row).ln();
        v2a -= (own / col).ln();
    }
    (a2v / b as f64, v2a / b as f64)
}

fn covers(b: &BBox, x: usize, y: usize) -> bool {
    x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h
}

/// Majority vote per pixel.
pub fn consensus(boxes: &[BBox], h: usize, w: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let votes = boxes.iter().filter(|b| covers(b, x, y)).count();
            out.push(2 * votes >= boxes.len());
        }
    }
    out
}

pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let pc = pred.iter().filter(|p| **p).count();
    let gc = gt.iter().filter(|g| **g).count();
    inter as f64 / (pc + gc - inter) as f64
}

pub fn ciou(ious: &[f64], delta: f64) -> f64 {
    let mut hits = 0;
    for &v in ious {
        if v >= delta {
            hits += 1;
        }
    }
    hits as f64 / ious.len() as f64
}

pub fn auc(ious: &[f64]) -> f64 {
    let mut total = 0usize;
    for i in 1..20 {
        total += ious.iter().filter(|&&v| v >= i as f64 / 20.0).count();
    }
    total as f64 / (19 * ious.len()) as f64
}

use ezvsl::metrics::{self, Mask};
use ezvsl::micl::{micl_loss_a2v, micl_loss_v2a, Batch};
use ezvsl::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random batch of `b` bags on an `h × w` grid with `d` channels, returned
/// both as library tensors and as nested vectors.
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    b: usize,
    d: usize,
    h: usize,
    w: usize,
) -> (Batch, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let bag_data: Vec<f64> = (0..b * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let audio_data: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bags = (0..b)
        .map(|k| {
            (0..h * w)
                .map(|c| (0..d).map(|j| bag_data[(k * d + j) * h * w + c]).collect())
                .collect()
        })
        .collect();
    let audio = audio_data.chunks(d).map(|c| c.to_vec()).collect();
    let batch = Batch::new(
        Tensor::new(vec![b, d, h, w], bag_data).unwrap(),
        Tensor::new(vec![b, d], audio_data).unwrap(),
    )
    .unwrap();
    (batch, bags, audio)
}

/// Largest absolute gap between the library losses and [`micl`] over
/// `cases` random batches with `B <= 4`, `d <= 3` per strategy.
pub fn loss_gap(cases: usize, seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let b = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let tau = rng.random_range(0.05..1.0);
        let (batch, bags, audio) = random_batch(&mut rng, b, d, h, w);
        for strategy in MatchStrategy::ALL {
            let (a2v, v2a) = micl(&bags, &audio, tau, strategy);
            let la = micl_loss_a2v(&batch, tau, strategy).unwrap();
            let lv = micl_loss_v2a(&batch, tau, strategy).unwrap();
            worst = worst.max((la - a2v).abs()).max((lv - v2a).abs());
        }
    }
    worst
}

pub fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BBox {
    let bw = rng.random_range(1..=w);
    let bh = rng.random_range(1..=h);
    BBox {
        x: rng.random_range(0..=w - bw),
        y: rng.random_range(0..=h - bh),
        w: bw,
        h: bh,
    }
}

/// Number of disagreements between the library metrics and the counting
/// oracles over `cases` random cases.
pub fn metric_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = super::rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let n = rng.random_range(1..=5);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, h, w)).collect();
        let gt = consensus(&boxes, h, w);
        let Ok(lib_gt) = metrics::build_consensus(&boxes, h, w) else {
            bad += usize::from(gt.iter().any(|&g| g));
            continue;
        };
        if lib_gt.mask().bits != gt {
            bad += 1;
            continue;
        }
        let pred: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        let lib = metrics::iou(&Mask::new(h, w, pred.clone()).unwrap(), &lib_gt).unwrap();
        if lib != iou(&pred, &gt) {
            bad += 1;
        }
        let m = rng.random_range(1..=30);
        let ious: Vec<f64> = (0..m)
            .map(|_| {
                if rng.random_bool(0.3) {
                    rng.random_range(0..=20) as f64 / 20.0
                } else {
                    rng.random_range(0.0..=1.0)
                }
            })
            .collect();
        let delta = rng.random_range(0.0..=1.0);
        if metrics::ciou_at(&ious, delta).unwrap() != ciou(&ious, delta)
            || metrics::ciou_at(&ious, 0.5).unwrap() != ciou(&ious, 0.5)
            || (metrics::auc(&ious).unwrap() - auc(&ious)).abs() > 1e-12
        {
            bad += 1;
        }
    }
    bad
}
