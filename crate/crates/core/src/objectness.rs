//! Audio-free objectness pretraining of the visual trunk.
//!
//! The classifier predicts the shape class of every feature-grid cell. Cells
//! mostly covered by one shape carry its class; empty cells carry a uniform
//! target over all classes; mixed cells are ignored.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::{collect_grads, image_batch, Module, ObjectnessModel};
use crate::optim::Adam;
use crate::synth::{cell_labels, derive_seed, CellLabel, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Control run: each training image gets a random class for all its shapes.
    pub shuffle_labels: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_loss: f64,
    /// Mean loss per epoch.
    pub curve: Vec<f64>,
}

/// Row-major `[cells, K]` target weights and the number of supervised cells.
fn targets(
    samples: &[&Sample],
    grid: usize,
    k: usize,
    relabel: Option<&[usize]>,
) -> (Tensor, usize) {
    let mut w = vec![0.0; samples.len() * grid * grid * k];
    let mut n = 0;
    for (s, sample) in samples.iter().enumerate() {
        for (c, label) in cell_labels(sample, grid).into_iter().enumerate() {
            let row = &mut w[(s * grid * grid + c) * k..][..k];
            match label {
                CellLabel::Class(cls) => {
                    let cls = relabel.map_or(cls, |r| r[s]);
                    row[cls] = 1.0;
                    n += 1;
                }
                CellLabel::Background => {
                    row.fill(1.0 / k as f64);
                    n += 1;
                }
                CellLabel::Ignore => {}
            }
        }
    }
    (
        Tensor::new(vec![samples.len() * grid * grid, k], w).unwrap(),
        n,
    )
}

fn batch_loss(
    model: &ObjectnessModel,
    samples: &[&Sample],
    relabel: Option<&[usize]>,
    trainable: bool,
) -> Result<Option<(f64, Vec<Option<Tensor>>)>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, trainable);
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let x = g.constant(image_batch(&images)?);
    let (fm, logp) = model.forward(&mut g, &vars, x)?;
    let grid = g.shape(fm)[2];
    if grid != g.shape(fm)[3] || samples[0].img_size() % grid != 0 {
        return Err(Error::shape(
            "objectness",
            format!("grid {:?}", &g.shape(fm)[2..]),
        ));
    }
    let (w, n) = targets(samples, grid, model.n_classes(), relabel);
    if n == 0 {
        return Ok(None);
    }
    let w = g.constant(w);
    let prod = g.mul(logp, w)?;
    let s = g.sum(prod);
    let loss = g.scale(s, -1.0 / n as f64);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "objectness loss".into(),
        });
    }
    if !trainable {
        return Ok(Some((value, Vec::new())));
    }
    let mut grads = g.backward(loss)?;
    Ok(Some((value, collect_grads(&mut grads, &vars))))
}

/// Mean per-cell cross-entropy over `samples` without updating the model.
pub fn objectness_loss(
    model: &ObjectnessModel,
    samples: &[Sample],
    batch_size: usize,
) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let (mut total, mut batches) = (0.0, 0usize);
    for chunk in refs.chunks(batch_size.max(1)) {
        if let Some((l, _)) = batch_loss(model, chunk, None, false)? {
            total += l;
            batches += 1;
        }
    }
    if batches == 0 {
        return Err(Error::Empty("objectness evaluation set".into()));
    }
    Ok(total / batches as f64)
}

/// Train the per-location shape classifier with Adam.
pub fn pretrain_objectness(
    model: &mut ObjectnessModel,
    samples: &[Sample],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    if samples.is_empty() {
        return Err(Error::Empty("objectness training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let k = model.n_classes();
    let relabel: Option<Vec<usize>> = config.shuffle_labels.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1abe1, 0));
        samples.iter().map(|_| rng.random_range(0..k)).collect()
    });
    let initial_loss = objectness_loss(model, samples, config.batch_size)?;
    let mut adam = Adam::new(config.lr, 0.9, 0.999);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            0x0b1,
            epoch as u64,
        )));
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let rl: Option<Vec<usize>> = relabel
                .as_ref()
                .map(|r| idx.iter().map(|&i| r[i]).collect());
            if let Some((l, grads)) = batch_loss(model, &batch, rl.as_deref(), true)? {
                adam.step(model, &grads);
                total += l;
                batches += 1;
            }
        }
        let mean = total / batches.max(1) as f64;
        log::info!("objectness epoch {epoch}: loss {mean:.4}");
        on_epoch(epoch, mean);
        curve.push(mean);
    }
    Ok(PretrainReport {
        initial_loss,
        curve,
    })
}

/// Fraction of class-labelled cells whose argmax posterior is the true class.
pub fn objectness_accuracy(model: &ObjectnessModel, samples: &[Sample]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for s in samples {
        let (_, post) = model.objectness_forward(&s.image)?;
        let (k, grid) = (post.shape()[0], post.shape()[1]);
        let hw = grid * grid;
        for (c, label) in cell_labels(s, grid).into_iter().enumerate() {
            if let CellLabel::Class(cls) = label {
                let best = (0..k)
                    .max_by(|&a, &b| {
                        post.data()[a * hw + c]
                            .total_cmp(&post.data()[b * hw + c])
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                hit += usize::from(best == cls);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("no class-labelled cells".into()));
    }
    Ok(hit as f64 / n as f64)
}
