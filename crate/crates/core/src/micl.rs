//! Multiple-instance contrastive learning.
//!
//! Every image is a bag of projected location features. A clip is scored
//! against a bag by a [`MatchStrategy`]; with the default `MaxOfSim` that is
//! the cosine similarity of its best-matching location. The symmetric
//! objective is the sum of two softmax cross-entropies over the in-batch
//! score matrix: audio against all bags (`a2v`) and each bag against all
//! audio clips (`v2a`). Denominators include the positive term.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{stft_log_magnitude, Spectrogram};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{collect_grads, image_batch, spectrogram_batch, AvModel, Module};
use crate::optim::Adam;
use crate::synth::{derive_seed, Sample};
use crate::tensor::Tensor;

/// How a clip embedding is scored against a bag of location embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchStrategy {
    /// Max over locations of the cosine similarity.
    MaxOfSim,
    /// Mean over locations of the cosine similarity.
    AvgOfSim,
    /// Cosine similarity against the per-channel spatial max of the bag.
    SimOfMaxpool,
}

impl MatchStrategy {
    pub const ALL: [MatchStrategy; 3] = [
        MatchStrategy::MaxOfSim,
        MatchStrategy::AvgOfSim,
        MatchStrategy::SimOfMaxpool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatchStrategy::MaxOfSim => "max_of_sim",
            MatchStrategy::AvgOfSim => "avg_of_sim",
            MatchStrategy::SimOfMaxpool => "sim_of_maxpool",
        }
    }
}

impl fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown matching strategy `{s}`")))
    }
}

/// Score matrix `[B_audio, B_bag]` from audio `[B_a, d]` and bag rows
/// `[B_v·HW, d]` (bag `k` occupies rows `k·HW .. (k+1)·HW`).
pub fn match_matrix(
    g: &mut Graph,
    audio: Var,
    rows: Var,
    bags: usize,
    hw: usize,
    strategy: MatchStrategy,
) -> Result<Var> {
    let n_audio = g.shape(audio)[0];
    let d = g.shape(audio)[1];
    if g.shape(rows) != [bags * hw, d] {
        return Err(Error::shape(
            "match",
            format!("bag rows {:?} vs {bags} bags of {hw} x {d}", g.shape(rows)),
        ));
    }
    let m = match strategy {
        MatchStrategy::MaxOfSim | MatchStrategy::AvgOfSim => {
            let s = g.cosine(audio, rows)?;
            let s = g.reshape(s, &[n_audio, bags, hw])?;
            if strategy == MatchStrategy::MaxOfSim {
                g.max_last(s)
            } else {
                g.mean_last(s)
            }
        }
        MatchStrategy::SimOfMaxpool => {
            let r = g.reshape(rows, &[bags, hw, d])?;
            let t = g.transpose_last2(r)?;
            let pooled = g.max_last(t);
            g.cosine(audio, pooled)?
        }
    };
    let m = g.reshape(m, &[n_audio, bags])?;
    if let Some(i) = g.value(m).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("match score of batch index {}", i / bags),
        });
    }
    Ok(m)
}

pub struct MiclLosses {
    pub a2v: Var,
    pub v2a: Var,
    pub total: Var,
}

/// `mean_i −log softmax_k(s_ik / τ)[i]` over the rows of a square matrix.
fn row_contrastive(g: &mut Graph, scores: Var, tau: f64) -> Result<Var> {
    let b = g.shape(scores)[0];
    let logits = g.scale(scores, 1.0 / tau);
    let ls = g.log_softmax_last(logits);
    let mut eye = Tensor::zeros(&[b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = 1.0;
    }
    let eye = g.constant(eye);
    let diag = g.mul(ls, eye)?;
    let s = g.sum(diag);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// Both directional losses from `m[k, i] = match(audio_k, bag_i)`.
pub fn micl_losses(g: &mut Graph, m: Var, tau: f64) -> Result<MiclLosses> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {tau} must be > 0"
        )));
    }
    let s = g.shape(m);
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(
            "micl",
            format!("score matrix {s:?} is not square"),
        ));
    }
    // a2v row i: audio i against every bag k
    let a2v = row_contrastive(g, m, tau)?;
    // v2a row i: bag i against every audio k, i.e. column i of m
    let mt = g.transpose_last2(m)?;
    let v2a = row_contrastive(g, mt, tau)?;
    let total = g.add(a2v, v2a)?;
    Ok(MiclLosses { a2v, v2a, total })
}

/// Projected bags `[B, d, H, W]` and projected audio `[B, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub bags: Tensor,
    pub audio: Tensor,
}

impl Batch {
    pub fn new(bags: Tensor, audio: Tensor) -> Result<Self> {
        let (b, a) = (bags.shape(), audio.shape());
        if b.len() != 4 || a.len() != 2 || b[0] != a[0] || b[1] != a[1] {
            return Err(Error::shape("batch", format!("bags {b:?} vs audio {a:?}")));
        }
        Ok(Self { bags, audio })
    }

    pub fn size(&self) -> usize {
        self.audio.shape()[0]
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<(Var, Var, usize, Var)> {
        let s = self.bags.shape();
        let hw = s[2] * s[3];
        let bags = g.leaf(self.bags.clone(), trainable);
        let audio = g.leaf(self.audio.clone(), trainable);
        let cl = g.channels_last(bags)?;
        let rows = g.reshape(cl, &[s[0] * hw, s[1]])?;
        Ok((bags, audio, hw, rows))
    }
}

/// Score of one clip `a_hat` (`[d]`) against one bag (`[d, H, W]`).
pub fn match_score(a_hat: &Tensor, bag: &Tensor, strategy: MatchStrategy) -> Result<f64> {
    if bag.ndim() != 3 || a_hat.len() != bag.shape()[0] {
        return Err(Error::shape(
            "match_score",
            format!("audio {:?} vs bag {:?}", a_hat.shape(), bag.shape()),
        ));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(bag.shape());
    let batch = Batch::new(
        bag.clone().reshape(&shape)?,
        a_hat.clone().reshape(&[1, a_hat.len()])?,
    )?;
    let mut g = Graph::new();
    let (_, audio, hw, rows) = batch.bind(&mut g, false)?;
    let m = match_matrix(&mut g, audio, rows, 1, hw, strategy)?;
    Ok(g.value(m).item())
}

/// Loss values and gradients w.r.t. the batch embeddings.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub a2v: f64,
    pub v2a: f64,
    pub total: f64,
    pub grad_bags: Tensor,
    pub grad_audio: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    A2v,
    V2a,
    Both,
}

fn eval_batch(
    batch: &Batch,
    tau: f64,
    strategy: MatchStrategy,
    dir: Direction,
) -> Result<LossEval> {
    let mut g = Graph::new();
    let (bags, audio, hw, rows) = batch.bind(&mut g, true)?;
    let m = match_matrix(&mut g, audio, rows, batch.size(), hw, strategy)?;
    let l = micl_losses(&mut g, m, tau)?;
    let target = match dir {
        Direction::A2v => l.a2v,
        Direction::V2a => l.v2a,
        Direction::Both => l.total,
    };
    let (a2v, v2a, total) = (
        g.value(l.a2v).item(),
        g.value(l.v2a).item(),
        g.value(l.total).item(),
    );
    let mut grads = g.backward(target)?;
    Ok(LossEval {
        a2v,
        v2a,
        total,
        grad_bags: grads
            .take(bags)
            .unwrap_or_else(|| Tensor::zeros(batch.bags.shape())),
        grad_audio: grads
            .take(audio)
            .unwrap_or_else(|| Tensor::zeros(batch.audio.shape())),
    })
}

pub fn micl_loss_a2v(batch: &Batch, tau: f64, strategy: MatchStrategy) -> Result<f64> {
    Ok(eval_batch(batch, tau, strategy, Direction::A2v)?.a2v)
}

pub fn micl_loss_v2a(batch: &Batch, tau: f64, strategy: MatchStrategy) -> Result<f64> {
    Ok(eval_batch(batch, tau, strategy, Direction::V2a)?.v2a)
}

pub fn micl_loss(batch: &Batch, tau: f64, strategy: MatchStrategy) -> Result<f64> {
    Ok(eval_batch(batch, tau, strategy, Direction::Both)?.total)
}

/// Symmetric loss with gradients w.r.t. `batch.bags` and `batch.audio`.
pub fn micl_loss_with_grads(batch: &Batch, tau: f64, strategy: MatchStrategy) -> Result<LossEval> {
    eval_batch(batch, tau, strategy, Direction::Both)
}

/// Optimization settings of the contrastive stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub strategy: MatchStrategy,
    pub seed: u64,
    /// Control run: pair every image with the audio of another sample.
    pub permute_audio: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 30,
            strategy: MatchStrategy::MaxOfSim,
            seed: 0,
            permute_audio: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub a2v: f64,
    pub v2a: f64,
    pub total: f64,
}

/// Loss curve as CSV: `epoch,mean_loss_a2v,mean_loss_v2a,mean_total`.
pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss_a2v,mean_loss_v2a,mean_total\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.a2v, e.v2a, e.total));
    }
    s
}

pub fn spectrogram_of(sample: &Sample, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    stft_log_magnitude(&sample.audio, n_fft, hop)
}

/// Batch tensors for `idx`, with audio taken from `audio_idx`.
pub fn assemble(
    samples: &[Sample],
    idx: &[usize],
    audio_idx: &[usize],
    n_fft: usize,
    hop: usize,
) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].image).collect();
    let specs = audio_idx
        .iter()
        .map(|&i| spectrogram_of(&samples[i], n_fft, hop))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Spectrogram> = specs.iter().collect();
    Ok((image_batch(&images)?, spectrogram_batch(&refs)?))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        0x5eed,
        epoch as u64,
    )));
    order
}

/// Fixed derangement-like pairing used by the permuted-audio control.
pub fn audio_permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xa0d1, 0)));
    p
}

/// Train `model` in place with Adam on the symmetric contrastive loss.
/// On a non-finite loss the parameters are rolled back to the end of the
/// last complete epoch and [`Error::Diverged`] is returned.
pub fn train(
    config: &TrainConfig,
    samples: &[Sample],
    model: &mut AvModel,
    stft: (usize, usize),
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    if samples.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if !(config.tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {} must be > 0",
            config.tau
        )));
    }
    let n = samples.len();
    let audio_of: Vec<usize> = if config.permute_audio {
        audio_permutation(config.seed, n)
    } else {
        (0..n).collect()
    };
    let mut adam = Adam::new(config.lr, config.beta1, config.beta2);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut last_good = model.clone();
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, n);
        let (mut sa, mut sv, mut st, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let aidx: Vec<usize> = idx.iter().map(|&i| audio_of[i]).collect();
            let (images, specs) = assemble(samples, idx, &aidx, stft.0, stft.1)?;
            let mut g = Graph::new();
            let vars = model.bind_all(&mut g, true);
            let x = g.constant(images);
            let s = g.constant(specs);
            let vis = model.forward_visual(&mut g, &vars, x)?;
            let aud = model.forward_audio(&mut g, &vars, s)?;
            let hw = vis.grid.0 * vis.grid.1;
            let m = match match_matrix(&mut g, aud, vis.rows, vis.batch, hw, config.strategy) {
                Ok(m) => m,
                Err(Error::NonFinite { .. }) => {
                    *model = last_good;
                    return Err(Error::Diverged { epoch, step });
                }
                Err(e) => return Err(e),
            };
            let l = micl_losses(&mut g, m, config.tau)?;
            let total = g.value(l.total).item();
            if !total.is_finite() {
                *model = last_good;
                return Err(Error::Diverged { epoch, step });
            }
            sa += g.value(l.a2v).item();
            sv += g.value(l.v2a).item();
            st += total;
            batches += 1;
            let mut grads = g.backward(l.total)?;
            let grads = collect_grads(&mut grads, &vars.all);
            adam.step(model, &grads);
        }
        let row = EpochLoss {
            epoch,
            a2v: sa / batches as f64,
            v2a: sv / batches as f64,
            total: st / batches as f64,
        };
        let finite = model.named_params("").iter().all(|(_, t)| t.all_finite());
        if !finite {
            *model = last_good;
            return Err(Error::Diverged {
                epoch,
                step: batches,
            });
        }
        on_epoch(&row);
        curve.push(row);
        last_good = model.clone();
    }
    Ok(curve)
}

/// Mean 1-based rank of the true clip among the in-batch clips for each
/// image, scored by `strategy`. Chance level is `(B + 1) / 2`.
pub fn mean_true_rank(
    model: &AvModel,
    samples: &[Sample],
    batch_size: usize,
    strategy: MatchStrategy,
    stft: (usize, usize),
) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size) {
        let (images, specs) = assemble(samples, chunk, chunk, stft.0, stft.1)?;
        let mut g = Graph::new();
        let vars = model.bind_all(&mut g, false);
        let x = g.constant(images);
        let s = g.constant(specs);
        let vis = model.forward_visual(&mut g, &vars, x)?;
        let aud = model.forward_audio(&mut g, &vars, s)?;
        let hw = vis.grid.0 * vis.grid.1;
        let m = match_matrix(&mut g, aud, vis.rows, vis.batch, hw, strategy)?;
        let b = chunk.len();
        let mv = g.value(m).data();
        for i in 0..b {
            let own = mv[i * b + i];
            let better = (0..b).filter(|&k| k != i && mv[k * b + i] > own).count();
            total += (better + 1) as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bag_from(cells: &[Vec<f64>], h: usize, w: usize) -> Tensor {
        let d = cells[0].len();
        let mut data = vec![0.0; d * h * w];
        for (p, c) in cells.iter().enumerate() {
            for (ch, v) in c.iter().enumerate() {
                data[ch * h * w + p] = *v;
            }
        }
        Tensor::new(vec![d, h, w], data).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in MatchStrategy::ALL {
            assert_eq!(s.as_str().parse::<MatchStrategy>().unwrap(), s);
        }
        assert!("mean".parse::<MatchStrategy>().is_err());
    }

    #[test]
    fn all_cells_equal_audio_score_one() {
        let a = vec![0.3, -1.0, 2.0];
        let bag = bag_from(&vec![a.clone(); 6], 2, 3);
        for s in MatchStrategy::ALL {
            let v = match_score(&Tensor::from_vec(a.clone()), &bag, s).unwrap();
            assert!((v - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn one_hot_bag_scores() {
        let a = vec![1.0, 0.0, 0.0];
        let mut cells = vec![vec![0.0, 1.0, 0.0]; 9];
        cells[4] = a.clone();
        let bag = bag_from(&cells, 3, 3);
        let at = Tensor::from_vec(a);
        assert!((match_score(&at, &bag, MatchStrategy::MaxOfSim).unwrap() - 1.0).abs() < 1e-12);
        assert!(
            (match_score(&at, &bag, MatchStrategy::AvgOfSim).unwrap() - 1.0 / 9.0).abs() < 1e-12
        );
    }

    #[test]
    fn strategies_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (d, h, w) = (4, 3, 2);
            let cells: Vec<Vec<f64>> = (0..h * w)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bag = bag_from(&cells, h, w);
            let sims: Vec<f64> = cells.iter().map(|c| cos(c, &a)).collect();
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let avg = sims.iter().sum::<f64>() / sims.len() as f64;
            let pooled: Vec<f64> = (0..d)
                .map(|ch| {
                    cells
                        .iter()
                        .map(|c| c[ch])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let at = Tensor::from_vec(a.clone());
            let got = |s| match_score(&at, &bag, s).unwrap();
            assert!((got(MatchStrategy::MaxOfSim) - max).abs() < 1e-12);
            assert!((got(MatchStrategy::AvgOfSim) - avg).abs() < 1e-12);
            assert!((got(MatchStrategy::SimOfMaxpool) - cos(&pooled, &a)).abs() < 1e-12);
        }
    }

    fn batch_of(bags: &[Vec<Vec<f64>>], audio: &[Vec<f64>], h: usize, w: usize) -> Batch {
        let t: Vec<Tensor> = bags.iter().map(|b| bag_from(b, h, w)).collect();
        let refs: Vec<&Tensor> = t.iter().collect();
        let d = audio[0].len();
        Batch::new(
            Tensor::stack(&refs).unwrap(),
            Tensor::new(vec![audio.len(), d], audio.concat()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_sample_loss_is_zero() {
        let b = batch_of(
            &[vec![vec![1.0, 2.0], vec![0.5, -1.0]]],
            &[vec![1.0, 0.0]],
            1,
            2,
        );
        for s in MatchStrategy::ALL {
            assert_eq!(micl_loss_a2v(&b, 0.07, s).unwrap(), 0.0);
            assert_eq!(micl_loss_v2a(&b, 0.07, s).unwrap(), 0.0);
            assert_eq!(micl_loss(&b, 0.07, s).unwrap(), 0.0);
        }
    }

    #[test]
    fn indistinguishable_pair_gives_log2() {
        // identical bags: s_11 = s_12
        let bag = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = batch_of(&[bag.clone(), bag], &[vec![1.0, 0.2], vec![0.3, 1.0]], 1, 2);
        let l = micl_loss_a2v(&b, 0.5, MatchStrategy::MaxOfSim).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_audio_gives_log_b() {
        let bags: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|i| vec![vec![1.0, i as f64], vec![-(i as f64), 1.0]])
            .collect();
        let audio = vec![vec![0.4, 0.9]; 3];
        let b = batch_of(&bags, &audio, 2, 1);
        let l = micl_loss_v2a(&b, 0.1, MatchStrategy::MaxOfSim).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_is_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bags: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                (0..4)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let audio: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b = batch_of(&bags, &audio, 2, 2);
        for s in MatchStrategy::ALL {
            let e = micl_loss_with_grads(&b, 0.2, s).unwrap();
            assert_eq!(e.total, e.a2v + e.v2a);
            assert_eq!(micl_loss(&b, 0.2, s).unwrap(), e.total);
        }
    }

    #[test]
    fn bad_inputs_are_errors() {
        let b = batch_of(&[vec![vec![1.0, 2.0]]], &[vec![1.0, 0.0]], 1, 1);
        assert!(micl_loss(&b, 0.0, MatchStrategy::MaxOfSim).is_err());
        let nan = batch_of(
            &[vec![vec![f64::NAN, 2.0]], vec![vec![1.0, 1.0]]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            1,
            1,
        );
        match micl_loss(&nan, 0.1, MatchStrategy::MaxOfSim) {
            Err(Error::NonFinite { context }) => assert!(context.contains("batch index")),
            other => panic!("{other:?}"),
        }
        assert!(Batch::new(Tensor::zeros(&[2, 3, 1, 1]), Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn curve_csv_header() {
        let csv = loss_curve_csv(&[EpochLoss {
            epoch: 0,
            a2v: 1.5,
            v2a: 0.5,
            total: 2.0,
        }]);
        assert_eq!(
            csv,
            "epoch,mean_loss_a2v,mean_loss_v2a,mean_total\n0,1.5,0.5,2\n"
        );
    }
}
