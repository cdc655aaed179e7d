//! Mask IoU, consensus masks and success-rate metrics.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::localize::{normalize_map, upsample_map, LocalizationMap, MapSource};
use crate::synth::{derive_seed, BBox, Sample};
use crate::tensor::Tensor;

/// Default binarization threshold for normalized maps.
pub const DEFAULT_THETA: f64 = 0.5;

/// IoU thresholds of the success curve: `0.05, 0.10, ..., 0.95`.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_box(b: &BBox, height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        for y in b.y..(b.y + b.h).min(height) {
            for x in b.x..(b.x + b.w).min(width) {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Ground-truth region; never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusMask(Mask);

impl ConsensusMask {
    pub fn new(mask: Mask) -> Result<Self> {
        if mask.count() == 0 {
            return Err(Error::InvalidArgument("consensus mask is empty".into()));
        }
        Ok(Self(mask))
    }

    pub fn mask(&self) -> &Mask {
        &self.0
    }
}

/// Pixels covered by at least `ceil(n / 2)` of the `n` boxes.
pub fn build_consensus(boxes: &[BBox], height: usize, width: usize) -> Result<ConsensusMask> {
    if boxes.is_empty() {
        return Err(Error::InvalidArgument(
            "consensus needs at least one box".into(),
        ));
    }
    let need = boxes.len().div_ceil(2);
    let mut votes = vec![0usize; height * width];
    for b in boxes {
        for (v, on) in votes.iter_mut().zip(Mask::from_box(b, height, width).bits) {
            *v += usize::from(on);
        }
    }
    ConsensusMask::new(Mask::new(
        height,
        width,
        votes.into_iter().map(|v| v >= need).collect(),
    )?)
}

/// Pixels with value `>= theta`.
pub fn binarize(map: &LocalizationMap, theta: f64) -> Result<Mask> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {theta} outside (0, 1)"
        )));
    }
    if map.degenerate {
        return Ok(Mask::empty(map.height(), map.width()));
    }
    Mask::new(
        map.height(),
        map.width(),
        map.values().iter().map(|&v| v >= theta).collect(),
    )
}

pub fn iou(pred: &Mask, gt: &ConsensusMask) -> Result<f64> {
    let gt = gt.mask();
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "iou",
            format!(
                "{}x{} vs {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(inter as f64 / union as f64)
}

/// Fraction of IoUs `>= delta`.
pub fn ciou_at(ious: &[f64], delta: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Empty("no evaluated samples".into()));
    }
    Ok(ious.iter().filter(|&&v| v >= delta).count() as f64 / ious.len() as f64)
}

/// Mean success rate over [`auc_thresholds`].
pub fn auc(ious: &[f64]) -> Result<f64> {
    let ts = auc_thresholds();
    let mut total = 0.0;
    for t in &ts {
        total += ciou_at(ious, *t)?;
    }
    Ok(total / ts.len() as f64)
}

/// Anything that turns a sample into a normalized localization map.
pub trait Predictor {
    fn predict(&self, index: usize, sample: &Sample) -> Result<LocalizationMap>;
}

impl<F: Fn(usize, &Sample) -> Result<LocalizationMap>> Predictor for F {
    fn predict(&self, index: usize, sample: &Sample) -> Result<LocalizationMap> {
        self(index, sample)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `(sample id, IoU)` in evaluation order.
    pub per_sample: Vec<(usize, f64)>,
    /// `(sample id, error)` for samples that could not be scored.
    pub skipped: Vec<(usize, String)>,
    pub ciou: f64,
    pub auc: f64,
    pub theta: f64,
    /// Settings echoed into the outputs, e.g. `("alpha", "0.4")`.
    pub echo: Vec<(String, String)>,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn ious(&self) -> Vec<f64> {
        self.per_sample.iter().map(|p| p.1).collect()
    }

    pub fn n(&self) -> usize {
        self.per_sample.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,iou\n");
        for (id, v) in &self.per_sample {
            let _ = writeln!(s, "{id},{v}");
        }
        let _ = writeln!(s, "ciou_0.5,{}", self.ciou);
        let _ = writeln!(s, "auc,{}", self.auc);
        let _ = writeln!(s, "n,{}", self.n());
        let _ = writeln!(s, "skipped,{}", self.skipped.len());
        let _ = writeln!(s, "theta,{}", self.theta);
        for (k, v) in &self.echo {
            let _ = writeln!(s, "{k},{v}");
        }
        let _ = writeln!(s, "config_hash,{}", self.config_hash);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<14} {:>9.2}%", "CIoU@0.5", 100.0 * self.ciou);
        let _ = writeln!(s, "{:<14} {:>9.2}%", "AUC", 100.0 * self.auc);
        let _ = writeln!(s, "{:<14} {:>10}", "samples", self.n());
        let _ = writeln!(s, "{:<14} {:>10}", "skipped", self.skipped.len());
        let _ = writeln!(s, "{:<14} {:>10}", "theta", self.theta);
        for (k, v) in &self.echo {
            let _ = writeln!(s, "{k:<14} {v:>10}");
        }
        s
    }
}

/// How ground-truth boxes are derived per sample: the true box alone, or
/// `annotators` copies each shifted by up to `jitter` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub annotators: usize,
    pub jitter: usize,
    pub seed: u64,
}

impl Default for Annotation {
    fn default() -> Self {
        Self {
            annotators: 1,
            jitter: 0,
            seed: 0,
        }
    }
}

impl Annotation {
    pub fn boxes(&self, sample: &Sample) -> Vec<BBox> {
        let b = sample.gt_box;
        if self.annotators <= 1 {
            return vec![b];
        }
        let size = sample.img_size() as i64;
        let j = self.jitter as i64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xa770, sample.id as u64));
        (0..self.annotators)
            .map(|_| {
                let mut d = || rng.random_range(-j..=j);
                let x0 = (b.x as i64 + d()).clamp(0, size - 1);
                let y0 = (b.y as i64 + d()).clamp(0, size - 1);
                let x1 = ((b.x + b.w) as i64 + d()).clamp(x0 + 1, size);
                let y1 = ((b.y + b.h) as i64 + d()).clamp(y0 + 1, size);
                BBox {
                    x: x0 as usize,
                    y: y0 as usize,
                    w: (x1 - x0) as usize,
                    h: (y1 - y0) as usize,
                }
            })
            .collect()
    }
}

/// IoU of one predicted map against the consensus of `boxes`.
pub fn score_sample(map: &LocalizationMap, boxes: &[BBox], size: usize, theta: f64) -> Result<f64> {
    let up = upsample_map(map, size, size)?;
    let gt = build_consensus(boxes, size, size)?;
    iou(&binarize(&up, theta)?, &gt)
}

/// Upsample, binarize and score every sample; failing samples are skipped
/// and listed in the report.
pub fn evaluate(
    samples: &[Sample],
    predictor: &dyn Predictor,
    theta: f64,
) -> Result<MetricsReport> {
    evaluate_annotated(samples, predictor, theta, &Annotation::default())
}

pub fn evaluate_annotated(
    samples: &[Sample],
    predictor: &dyn Predictor,
    theta: f64,
    annotation: &Annotation,
) -> Result<MetricsReport> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {theta} outside (0, 1)"
        )));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let scored = predictor
            .predict(i, s)
            .and_then(|m| score_sample(&m, &annotation.boxes(s), s.img_size(), theta));
        match scored {
            Ok(v) => per_sample.push((s.id, v)),
            Err(e) => {
                log::warn!("sample {}: {e}", s.id);
                skipped.push((s.id, e.to_string()));
            }
        }
    }
    let ious: Vec<f64> = per_sample.iter().map(|p| p.1).collect();
    Ok(MetricsReport {
        ciou: ciou_at(&ious, 0.5)?,
        auc: auc(&ious)?,
        per_sample,
        skipped,
        theta,
        echo: Vec::new(),
        config_hash: String::new(),
    })
}

/// Predictor whose map is the exact consensus indicator at image size.
pub fn oracle_predictor(annotation: Annotation) -> impl Predictor {
    move |_: usize, s: &Sample| {
        let size = s.img_size();
        let gt = build_consensus(&annotation.boxes(s), size, size)?;
        let v = gt
            .mask()
            .bits
            .iter()
            .map(|&b| f64::from(u8::from(b)))
            .collect();
        let m = LocalizationMap::new(Tensor::new(vec![size, size], v)?, MapSource::Fused)?;
        Ok(normalize_map(&m))
    }
}

/// Mean and standard deviation of CIoU@0.5 of uniform random `grid × grid`
/// maps over `runs` repetitions.
pub fn random_baseline(
    samples: &[Sample],
    grid: usize,
    runs: usize,
    theta: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if runs == 0 {
        return Err(Error::InvalidArgument(
            "random baseline needs at least one run".into(),
        ));
    }
    let mut scores = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a4d, r as u64));
        let maps: Vec<LocalizationMap> = samples
            .iter()
            .map(|_| {
                let v = (0..grid * grid).map(|_| rng.random::<f64>()).collect();
                let m = LocalizationMap::new(Tensor::new(vec![grid, grid], v)?, MapSource::Fused)?;
                Ok(normalize_map(&m))
            })
            .collect::<Result<_>>()?;
        let p = |i: usize, _: &Sample| Ok(maps[i].clone());
        scores.push(evaluate(samples, &p, theta)?.ciou);
    }
    let mean = scores.iter().sum::<f64>() / runs as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (runs.max(2) - 1) as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(x: usize, y: usize, w: usize, h: usize) -> BBox {
        BBox { x, y, w, h }
    }

    #[test]
    fn oracle_scores_one() {
        let world = crate::synth::WorldConfig::default();
        let set = crate::synth::generate_set("o", 4, 20, &[0, 1, 2, 3], &world).unwrap();
        for annotators in [1, 3] {
            let a = Annotation {
                annotators,
                jitter: 2,
                seed: 5,
            };
            let r = evaluate_annotated(&set.samples, &oracle_predictor(a), 0.5, &a).unwrap();
            assert_eq!(r.ciou, 1.0);
            assert_eq!(r.auc, 1.0);
        }
    }

    #[test]
    fn jittered_annotations_stay_close() {
        let world = crate::synth::WorldConfig::default();
        let set = crate::synth::generate_set("j", 6, 10, &[0, 1], &world).unwrap();
        let a = Annotation {
            annotators: 3,
            jitter: 2,
            seed: 1,
        };
        for s in &set.samples {
            let boxes = a.boxes(s);
            assert_eq!(boxes.len(), 3);
            assert_eq!(boxes, a.boxes(s));
            for b in boxes {
                assert!(b.inside(64, 64));
                assert!(b.x.abs_diff(s.gt_box.x) <= 2 && b.y.abs_diff(s.gt_box.y) <= 2);
            }
        }
    }

    #[test]
    fn single_box_consensus_is_indicator() {
        let b = bx(2, 1, 3, 2);
        let c = build_consensus(&[b], 6, 6).unwrap();
        assert_eq!(c.mask(), &Mask::from_box(&b, 6, 6));
        assert_eq!(c.mask().count(), 6);
        let three = build_consensus(&[b, b, b], 6, 6).unwrap();
        assert_eq!(three, c);
        assert!(build_consensus(&[], 6, 6).is_err());
    }

    #[test]
    fn iou_cases() {
        let gt = build_consensus(&[bx(0, 0, 4, 4)], 8, 8).unwrap();
        assert_eq!(iou(gt.mask(), &gt).unwrap(), 1.0);
        assert_eq!(
            iou(&Mask::from_box(&bx(4, 4, 4, 4), 8, 8), &gt).unwrap(),
            0.0
        );
        assert_eq!(
            iou(&Mask::from_box(&bx(0, 0, 4, 2), 8, 8), &gt).unwrap(),
            0.5
        );
        assert_eq!(iou(&Mask::empty(8, 8), &gt).unwrap(), 0.0);
        assert!(iou(&Mask::empty(4, 8), &gt).is_err());
    }

    #[test]
    fn ciou_and_auc_cases() {
        assert_eq!(ciou_at(&[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(ciou_at(&[0.6, 0.4], 0.5).unwrap(), 0.5);
        assert_eq!(auc(&[1.0; 3]).unwrap(), 1.0);
        assert_eq!(auc(&[0.0; 3]).unwrap(), 0.0);
        // 19 hits for 1.0, 10 for 0.5 (0.05..=0.5), none for 0.0
        assert!((auc(&[1.0, 0.5, 0.0]).unwrap() - (19.0 + 10.0) / 57.0).abs() < 1e-15);
        assert!(ciou_at(&[], 0.5).is_err());
        assert!(auc(&[]).is_err());
    }

    #[test]
    fn binarize_cases() {
        let b = bx(1, 1, 2, 2);
        let ind = Mask::from_box(&b, 4, 4);
        let v: Vec<f64> = ind.bits.iter().map(|&x| f64::from(u8::from(x))).collect();
        let m = normalize_map(
            &LocalizationMap::new(Tensor::new(vec![4, 4], v).unwrap(), MapSource::Avl).unwrap(),
        );
        assert_eq!(binarize(&m, 0.5).unwrap(), ind);
        let zero =
            normalize_map(&LocalizationMap::new(Tensor::zeros(&[4, 4]), MapSource::Avl).unwrap());
        assert_eq!(binarize(&zero, 0.5).unwrap().count(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let rm = LocalizationMap::new(
            Tensor::new(vec![4, 4], r.clone()).unwrap(),
            MapSource::Fused,
        )
        .unwrap();
        let got = binarize(&rm, 0.3).unwrap();
        for (i, v) in r.iter().enumerate() {
            assert_eq!(got.bits[i], *v >= 0.3);
        }
        assert!(binarize(&rm, 1.0).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(any::<bool>(), h * w),
                prop::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded((a, b) in mask_strategy()) {
            prop_assume!(a.count() > 0 && b.count() > 0);
            let ab = iou(&a, &ConsensusMask::new(b.clone()).unwrap()).unwrap();
            let ba = iou(&b, &ConsensusMask::new(a.clone()).unwrap()).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
            let disjoint = a.bits.iter().zip(&b.bits).all(|(x, y)| !(x & y));
            prop_assert_eq!(ab == 0.0, disjoint);
        }

        #[test]
        fn success_curve_is_monotone(ious in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let ts = auc_thresholds();
            let curve: Vec<f64> = ts.iter().map(|&t| ciou_at(&ious, t).unwrap()).collect();
            prop_assert!(curve.windows(2).all(|w| w[1] <= w[0]));
            let a = auc(&ious).unwrap();
            prop_assert!(a <= 1.0 && a >= curve[18]);
            prop_assert_eq!(curve[9], ciou_at(&ious, 0.5).unwrap());
        }
    }
}
