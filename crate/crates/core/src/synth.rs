//! The shape-tone world: images of coloured glyphs where exactly one glyph
//! "sounds" a class-specific pure tone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{StftParams, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

pub const GLYPHS: [Glyph; 6] = [
    Glyph::Circle,
    Glyph::Square,
    Glyph::Triangle,
    Glyph::Cross,
    Glyph::Diamond,
    Glyph::Ring,
];

const PALETTE: [[f64; 3]; 8] = [
    [0.95, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.90],
    [0.15, 0.85, 0.90],
    [0.98, 0.55, 0.10],
    [0.92, 0.92, 0.92],
];

impl Glyph {
    /// Whether the normalized point `(u, v)` in `[0, 1]^2` lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        let (dx, dy) = (u - 0.5, v - 0.5);
        let r = (dx * dx + dy * dy).sqrt();
        match self {
            Glyph::Circle => r <= 0.5,
            Glyph::Square => true,
            Glyph::Triangle => dx.abs() <= v / 2.0,
            Glyph::Cross => dx.abs() <= 1.0 / 6.0 || dy.abs() <= 1.0 / 6.0,
            Glyph::Diamond => dx.abs() + dy.abs() <= 0.5,
            Glyph::Ring => (0.28..=0.5).contains(&r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClass {
    pub id: usize,
    pub glyph: Glyph,
    pub color: [f64; 3],
    /// STFT bin the class tone sits on.
    pub tone_bin: usize,
    pub tone_frequency: f64,
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Knobs of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub img_size: usize,
    pub min_shape: usize,
    pub max_shape: usize,
    pub max_shapes: usize,
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub stft: StftParams,
    pub tone_base_bin: usize,
    pub tone_bin_spacing: usize,
    pub tone_amplitude: f64,
    pub audio_noise: f64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    /// Maximum allowed intersection over the smaller box between shapes.
    pub max_overlap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            img_size: 64,
            min_shape: 16,
            max_shape: 24,
            max_shapes: 3,
            sample_rate: 8000,
            clip_seconds: 1.0,
            stft: StftParams {
                n_fft: 128,
                hop: 64,
            },
            tone_base_bin: 4,
            tone_bin_spacing: 3,
            tone_amplitude: 0.5,
            audio_noise: 0.1,
            background_level: 0.12,
            texture_amplitude: 0.06,
            max_overlap: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn classes(&self) -> Result<Vec<ShapeClass>> {
        let k = self.n_classes;
        if k > GLYPHS.len() * PALETTE.len() / 2 {
            return Err(Error::InvalidArgument(format!(
                "at most 24 classes, got {k}"
            )));
        }
        let top_bin = self.tone_base_bin + self.tone_bin_spacing * k.saturating_sub(1);
        if self.tone_base_bin == 0 || self.tone_bin_spacing == 0 || top_bin >= self.stft.bins() {
            return Err(Error::InvalidArgument(format!(
                "tone bins {}..={top_bin} do not fit {} frequency bins",
                self.tone_base_bin,
                self.stft.bins()
            )));
        }
        let bin_hz = self.sample_rate as f64 / self.stft.n_fft as f64;
        Ok((0..k)
            .map(|id| {
                let tone_bin = self.tone_base_bin + self.tone_bin_spacing * id;
                ShapeClass {
                    id,
                    glyph: GLYPHS[id % GLYPHS.len()],
                    color: PALETTE[id % PALETTE.len()],
                    tone_bin,
                    tone_frequency: tone_bin as f64 * bin_hz,
                }
            })
            .collect())
    }

    pub fn n_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Per pixel, `0` for background or `class + 1` of the topmost shape.
    pub mask: Vec<u8>,
    pub audio: Waveform,
    pub sounding_class: usize,
    pub gt_box: BBox,
    pub distractor_boxes: Vec<BBox>,
    pub distractor_classes: Vec<usize>,
}

impl Sample {
    pub fn img_size(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Mix a dataset seed with a stream tag and an index into a sample seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z =
        seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn place_boxes(rng: &mut ChaCha8Rng, cfg: &WorldConfig, n: usize) -> Option<Vec<BBox>> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..100 {
            let s = rng.random_range(cfg.min_shape..=cfg.max_shape);
            let b = BBox {
                x: rng.random_range(0..=cfg.img_size - s),
                y: rng.random_range(0..=cfg.img_size - s),
                w: s,
                h: s,
            };
            let ok = boxes.iter().all(|o| {
                o.intersection(&b) as f64 <= cfg.max_overlap * o.area().min(b.area()) as f64
            });
            if ok {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(boxes)
}

/// One sample. The sounding class is drawn uniformly from `pool`, the
/// distractors from the rest of `pool` without replacement.
pub fn generate_sample(
    seed: u64,
    id: usize,
    classes: &[ShapeClass],
    pool: &[usize],
    n_shapes: usize,
    cfg: &WorldConfig,
) -> Result<Sample> {
    if n_shapes == 0 {
        return Err(Error::InvalidArgument(
            "a sample needs at least one shape".into(),
        ));
    }
    if pool.is_empty() {
        return Err(Error::Empty("class pool".into()));
    }
    if cfg.min_shape == 0 || cfg.min_shape > cfg.max_shape || cfg.max_shape > cfg.img_size {
        return Err(Error::InvalidArgument(format!(
            "shape sizes {}..={} do not fit a {}px image",
            cfg.min_shape, cfg.max_shape, cfg.img_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_shapes = n_shapes.min(pool.len());
    let mut order = pool.to_vec();
    order.shuffle(&mut rng);
    let picked = &order[..n_shapes];

    let mut want = n_shapes;
    let boxes = loop {
        if let Some(b) = place_boxes(&mut rng, cfg, want) {
            break b;
        }
        log::warn!("sample {id}: could not place {want} shapes, retrying with fewer");
        want -= 1;
    };
    // last-drawn shape sounds so that nothing occludes it
    let drawn: Vec<usize> = picked[..boxes.len()].iter().rev().cloned().collect();
    let sounding = *drawn.last().unwrap();

    let size = cfg.img_size;
    let mut image = vec![0.0; 3 * size * size];
    for p in 0..size * size {
        let t = cfg.texture_amplitude * (2.0 * rng.random::<f64>() - 1.0);
        for c in 0..3 {
            image[c * size * size + p] = cfg.background_level + t;
        }
    }
    let mut mask = vec![0u8; size * size];
    for (b, &cls) in boxes.iter().zip(&drawn) {
        let class = &classes[cls];
        for py in b.y..b.y + b.h {
            for px in b.x..b.x + b.w {
                let u = (px - b.x) as f64 / b.w as f64 + 0.5 / b.w as f64;
                let v = (py - b.y) as f64 / b.h as f64 + 0.5 / b.h as f64;
                if class.glyph.contains(u, v) {
                    let p = py * size + px;
                    let jitter = cfg.texture_amplitude * 0.5 * (2.0 * rng.random::<f64>() - 1.0);
                    for c in 0..3 {
                        image[c * size * size + p] = class.color[c] + jitter;
                    }
                    mask[p] = (cls + 1) as u8;
                }
            }
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }

    let tone = &classes[sounding];
    let n = cfg.n_samples();
    let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
    let w = 2.0 * std::f64::consts::PI * tone.tone_frequency / cfg.sample_rate as f64;
    let noise = Normal::new(0.0, cfg.audio_noise.max(0.0)).expect("valid sigma");
    let samples = (0..n)
        .map(|i| {
            let s = cfg.tone_amplitude * (w * i as f64 + phase).sin();
            if cfg.audio_noise > 0.0 {
                s + noise.sample(&mut rng)
            } else {
                s
            }
        })
        .collect();

    let k = boxes.len();
    Ok(Sample {
        id,
        image: Tensor::new(vec![3, size, size], image)?,
        mask,
        audio: Waveform::new(samples, cfg.sample_rate),
        sounding_class: sounding,
        gt_box: boxes[k - 1],
        distractor_boxes: boxes[..k - 1].to_vec(),
        distractor_classes: drawn[..k - 1].to_vec(),
    })
}

/// An in-memory split of the dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub name: String,
    pub seed: u64,
    pub classes: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples per sounding class, indexed by class id.
    pub fn class_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for s in &self.samples {
            h[s.sounding_class] += 1;
        }
        h
    }
}

fn split_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// `n` samples whose sounding classes come from `pool`; 1 to `max_shapes`
/// shapes per image, uniformly.
pub fn generate_set(
    name: &str,
    seed: u64,
    n: usize,
    pool: &[usize],
    cfg: &WorldConfig,
) -> Result<Split> {
    let classes = cfg.classes()?;
    if let Some(&bad) = pool.iter().find(|&&c| c >= classes.len()) {
        return Err(Error::InvalidArgument(format!("class {bad} out of range")));
    }
    let tag = split_tag(name);
    let samples = (0..n)
        .map(|i| {
            let s = derive_seed(seed, tag, i as u64);
            let shapes = 1 + (derive_seed(s, 1, 0) % cfg.max_shapes.max(1) as u64) as usize;
            generate_sample(s, i, &classes, pool, shapes, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        name: name.to_string(),
        seed,
        classes: pool.to_vec(),
        samples,
    })
}

/// Train, heard-class test and unheard-class test splits.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub heard: Vec<usize>,
    pub unheard: Vec<usize>,
    pub train: Split,
    pub test_heard: Split,
    pub test_unheard: Split,
}

/// Partition the classes into heard and unheard sets (seeded) and generate
/// the three splits. Every split draws all of its shapes from its own class
/// set, so unheard classes never appear in training images.
pub fn generate_split(
    seed: u64,
    n_train: usize,
    n_test: usize,
    heard_fraction: f64,
    cfg: &WorldConfig,
) -> Result<SplitSet> {
    if !(heard_fraction > 0.0 && heard_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "heard_fraction {heard_fraction} outside (0, 1)"
        )));
    }
    let (heard, unheard) = partition_classes(seed, cfg.n_classes, heard_fraction)?;
    Ok(SplitSet {
        train: generate_set("train", seed, n_train, &heard, cfg)?,
        test_heard: generate_set("test_heard", seed, n_test, &heard, cfg)?,
        test_unheard: generate_set("test_unheard", seed, n_test, &unheard, cfg)?,
        heard,
        unheard,
    })
}

pub fn partition_classes(
    seed: u64,
    n_classes: usize,
    heard_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_heard = (n_classes as f64 * heard_fraction).round() as usize;
    if n_heard < 2 || n_classes - n_heard.min(n_classes) < 2 {
        return Err(Error::InvalidArgument(format!(
            "{n_classes} classes at heard fraction {heard_fraction} leave fewer than 2 per split"
        )));
    }
    let mut ids: Vec<usize> = (0..n_classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        split_tag("classes"),
        0,
    )));
    let mut heard = ids[..n_heard].to_vec();
    let mut unheard = ids[n_heard..].to_vec();
    heard.sort_unstable();
    unheard.sort_unstable();
    Ok((heard, unheard))
}

/// Supervision for one feature-grid cell of the objectness classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLabel {
    Class(usize),
    Background,
    Ignore,
}

/// Per-cell labels on a `grid × grid` partition of the image: a class when
/// it covers at least half the cell, background when shapes cover under a
/// tenth of it, ignored otherwise.
pub fn cell_labels(sample: &Sample, grid: usize) -> Vec<CellLabel> {
    let size = sample.img_size();
    let cell = size / grid;
    let mut out = Vec::with_capacity(grid * grid);
    let mut counts = [0usize; 256];
    for gy in 0..grid {
        for gx in 0..grid {
            counts.fill(0);
            for py in gy * cell..(gy + 1) * cell {
                for px in gx * cell..(gx + 1) * cell {
                    counts[sample.mask[py * size + px] as usize] += 1;
                }
            }
            let total = cell * cell;
            let (best, &n) = counts[1..]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            out.push(if 2 * n >= total {
                CellLabel::Class(best)
            } else if 10 * (total - counts[0]) < total {
                CellLabel::Background
            } else {
                CellLabel::Ignore
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::stft_log_magnitude;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn single_shape_clean_tone() {
        let c = WorldConfig {
            audio_noise: 0.0,
            ..cfg()
        };
        let classes = c.classes().unwrap();
        let s = generate_sample(5, 0, &classes, &[0, 1, 2], 1, &c).unwrap();
        assert!(s.distractor_boxes.is_empty());
        let tone = classes[s.sounding_class].tone_frequency;
        let n = s.audio.samples().len();
        assert_eq!(n, 8000);
        // a noiseless sinusoid satisfies x[i+1] + x[i-1] = 2 cos(w) x[i]
        let a = s.audio.samples();
        let w = 2.0 * std::f64::consts::PI * tone / 8000.0;
        for i in 1..n - 1 {
            assert!((a[i + 1] + a[i - 1] - 2.0 * w.cos() * a[i]).abs() < 1e-9);
        }
        assert!(a.iter().all(|v| v.abs() <= 0.5 + 1e-12));
        // a pure tone: peak bin is the class bin in every frame
        let spec = stft_log_magnitude(&s.audio, 128, 64).unwrap();
        assert!(spec
            .peak_bins()
            .iter()
            .all(|&b| b == classes[s.sounding_class].tone_bin));
        // the mask of the only shape lies in its box
        for (p, &m) in s.mask.iter().enumerate() {
            if m != 0 {
                assert!(s.gt_box.contains(p % 64, p / 64));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let c = cfg();
        let classes = c.classes().unwrap();
        let a = generate_sample(77, 0, &classes, &[0, 1, 2, 3], 3, &c).unwrap();
        let b = generate_sample(77, 0, &classes, &[0, 1, 2, 3], 3, &c).unwrap();
        assert_eq!(a, b);
        let c2 = generate_sample(78, 0, &classes, &[0, 1, 2, 3], 3, &c).unwrap();
        assert_ne!(a.image, c2.image);
    }

    #[test]
    fn sample_invariants_hold() {
        let c = cfg();
        let split = generate_set("check", 11, 200, &(0..8).collect::<Vec<_>>(), &c).unwrap();
        let classes = c.classes().unwrap();
        for s in &split.samples {
            assert!(s.gt_box.inside(64, 64));
            let gl = (
                classes[s.sounding_class].glyph,
                classes[s.sounding_class].color,
            );
            for &d in &s.distractor_classes {
                assert_ne!((classes[d].glyph, classes[d].color), gl);
            }
            let id = (s.sounding_class + 1) as u8;
            let inside = s
                .mask
                .iter()
                .enumerate()
                .filter(|(p, &m)| m == id && s.gt_box.contains(p % 64, p / 64))
                .count();
            let total = s.mask.iter().filter(|&&m| m == id).count();
            assert!(total > 0 && inside as f64 >= 0.8 * total as f64);
            let mut all = s.distractor_boxes.clone();
            all.push(s.gt_box);
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    let lim = 0.3 * all[i].area().min(all[j].area()) as f64;
                    assert!(all[i].intersection(&all[j]) as f64 <= lim);
                }
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn tones_identify_classes() {
        let c = cfg();
        let split = generate_set("tones", 4, 60, &(0..8).collect::<Vec<_>>(), &c).unwrap();
        let classes = c.classes().unwrap();
        for s in &split.samples {
            let spec = stft_log_magnitude(&s.audio, 128, 64).unwrap();
            let peaks = spec.peak_bins();
            let mode = peaks
                .iter()
                .filter(|&&b| b == classes[s.sounding_class].tone_bin)
                .count();
            assert!(mode as f64 > 0.95 * peaks.len() as f64);
        }
    }

    #[test]
    fn class_distribution_is_uniform() {
        // Multinomial check: every class count within 3 sigma of N/K.
        let c = cfg();
        let split = generate_set("uniform", 21, 1000, &(0..8).collect::<Vec<_>>(), &c).unwrap();
        let h = split.class_histogram(8);
        let (n, p) = (1000.0, 1.0 / 8.0);
        let sigma = (n * p * (1.0 - p) as f64).sqrt();
        for &count in &h {
            assert!((count as f64 - n * p).abs() <= 3.0 * sigma, "{h:?}");
        }
    }

    #[test]
    fn split_partitions_classes() {
        let c = WorldConfig::default();
        let set = generate_split(3, 40, 20, 0.5, &c).unwrap();
        assert_eq!(set.heard.len(), 4);
        assert_eq!(set.unheard.len(), 4);
        assert!(set.heard.iter().all(|h| !set.unheard.contains(h)));
        for s in &set.train.samples {
            assert!(set.heard.contains(&s.sounding_class));
            assert!(s.distractor_classes.iter().all(|d| set.heard.contains(d)));
        }
        for s in &set.test_unheard.samples {
            assert!(set.unheard.contains(&s.sounding_class));
        }
        let h = set.train.class_histogram(8);
        assert_eq!(h.iter().sum::<usize>(), 40);
        for (cls, &n) in h.iter().enumerate() {
            let expect = set
                .train
                .samples
                .iter()
                .filter(|s| s.sounding_class == cls)
                .count();
            assert_eq!(n, expect);
        }
        assert!(generate_split(3, 4, 4, 0.1, &c).is_err());
        assert!(generate_split(3, 4, 4, 1.0, &c).is_err());
    }

    #[test]
    fn cell_labels_follow_masks() {
        let c = WorldConfig {
            min_shape: 24,
            max_shape: 24,
            ..cfg()
        };
        let classes = c.classes().unwrap();
        let s = generate_sample(8, 0, &classes, &[1], 1, &c).unwrap();
        let labels = cell_labels(&s, 8);
        let n_class = labels.iter().filter(|l| **l == CellLabel::Class(1)).count();
        assert!(n_class >= 4);
        let corner = labels
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let (gx, gy) = (i % 8, i / 8);
                let cell = BBox {
                    x: gx * 8,
                    y: gy * 8,
                    w: 8,
                    h: 8,
                };
                cell.intersection(&s.gt_box) == 0
            })
            .all(|(_, l)| *l == CellLabel::Background);
        assert!(corner);
    }
}
