//! Per-sample map computation for trained models.

use crate::audio::{stft_log_magnitude, StftParams};
use crate::error::{Error, Result};
use crate::localize::{
    avl_map, fuse, normalize_map, ogl_cls_map, ogl_l1_map, LocalizationMap, MapSource, ObjectPrior,
};
use crate::metrics::Predictor;
use crate::models::{AvModel, ObjectnessModel};
use crate::synth::Sample;

/// Unnormalized grid maps of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMaps {
    pub avl: LocalizationMap,
    pub ogl_l1: LocalizationMap,
    pub ogl_cls: LocalizationMap,
}

pub fn raw_maps(
    model: &AvModel,
    objectness: &ObjectnessModel,
    sample: &Sample,
    stft: StftParams,
) -> Result<RawMaps> {
    let spec = stft_log_magnitude(&sample.audio, stft.n_fft, stft.hop)?;
    let a_hat = model.encode_audio(&spec)?;
    let v_hat = model.encode_visual(&sample.image)?;
    let (features, posteriors) = objectness.objectness_forward(&sample.image)?;
    Ok(RawMaps {
        avl: avl_map(&a_hat, &v_hat)?,
        ogl_l1: ogl_l1_map(&features)?,
        ogl_cls: ogl_cls_map(&posteriors)?,
    })
}

/// Maps of every sample; failures are kept per sample.
pub fn raw_maps_all(
    model: &AvModel,
    objectness: &ObjectnessModel,
    samples: &[Sample],
    stft: StftParams,
) -> Vec<Result<RawMaps>> {
    samples
        .iter()
        .map(|s| raw_maps(model, objectness, s, stft))
        .collect()
}

/// Normalized map of the requested kind.
pub fn select_map(
    raw: &RawMaps,
    source: MapSource,
    prior: ObjectPrior,
    alpha: f64,
) -> Result<LocalizationMap> {
    match source {
        MapSource::Avl => Ok(normalize_map(&raw.avl)),
        MapSource::OglL1 => Ok(normalize_map(&raw.ogl_l1)),
        MapSource::OglCls => Ok(normalize_map(&raw.ogl_cls)),
        MapSource::Fused => {
            let obj = match prior {
                ObjectPrior::L1 => &raw.ogl_l1,
                ObjectPrior::Cls => &raw.ogl_cls,
            };
            fuse(&normalize_map(&raw.avl), &normalize_map(obj), alpha)
        }
    }
}

/// Reads maps from a precomputed cache, so one forward pass serves many
/// settings of `alpha` and `source`.
pub struct CachedPredictor<'a> {
    pub cache: &'a [Result<RawMaps>],
    pub source: MapSource,
    pub prior: ObjectPrior,
    pub alpha: f64,
}

impl Predictor for CachedPredictor<'_> {
    fn predict(&self, index: usize, _: &Sample) -> Result<LocalizationMap> {
        match &self.cache[index] {
            Ok(raw) => select_map(raw, self.source, self.prior, self.alpha),
            Err(e) => Err(Error::Sample {
                index,
                detail: e.to_string(),
            }),
        }
    }
}
