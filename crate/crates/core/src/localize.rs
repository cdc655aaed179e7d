//! Localization maps: audio-visual similarity, object priors and their fusion.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::cosine_sim;
use crate::tensor::Tensor;

/// Default weight of the audio-visual map in [`fuse`].
pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapSource {
    Avl,
    OglCls,
    OglL1,
    Fused,
}

impl MapSource {
    pub fn as_str(self) -> &'static str {
        match self {
            MapSource::Avl => "avl",
            MapSource::OglCls => "ogl-cls",
            MapSource::OglL1 => "ogl-l1",
            MapSource::Fused => "fused",
        }
    }
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            MapSource::Avl,
            MapSource::OglCls,
            MapSource::OglL1,
            MapSource::Fused,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown map source `{s}`")))
    }
}

/// Which object prior feeds the fused map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectPrior {
    Cls,
    L1,
}

impl ObjectPrior {
    pub fn source(self) -> MapSource {
        match self {
            ObjectPrior::Cls => MapSource::OglCls,
            ObjectPrior::L1 => MapSource::OglL1,
        }
    }
}

impl FromStr for ObjectPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "ogl-cls" => Ok(ObjectPrior::Cls),
            "l1" | "ogl-l1" => Ok(ObjectPrior::L1),
            _ => Err(Error::InvalidArgument(format!(
                "unknown object prior `{s}`"
            ))),
        }
    }
}

impl fmt::Display for ObjectPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.source().as_str())
    }
}

/// A `[H, W]` score grid with provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub grid: Tensor,
    pub source: MapSource,
    pub normalized: bool,
    /// Set when normalization met a constant map.
    pub degenerate: bool,
}

impl LocalizationMap {
    pub fn new(grid: Tensor, source: MapSource) -> Result<Self> {
        if grid.ndim() != 2 {
            return Err(Error::shape(
                "map",
                format!("expected [H, W], got {:?}", grid.shape()),
            ));
        }
        Ok(Self {
            grid,
            source,
            normalized: false,
            degenerate: false,
        })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.grid.data()
    }
}

/// Per-cell cosine similarity of `v_hat` (`[d, H, W]`) with `a_hat` (`[d]`).
pub fn avl_map(a_hat: &Tensor, v_hat: &Tensor) -> Result<LocalizationMap> {
    if v_hat.ndim() != 3 || v_hat.shape()[0] != a_hat.len() {
        return Err(Error::shape(
            "avl_map",
            format!("audio {:?} vs visual {:?}", a_hat.shape(), v_hat.shape()),
        ));
    }
    let (d, h, w) = (v_hat.shape()[0], v_hat.shape()[1], v_hat.shape()[2]);
    let hw = h * w;
    let mut cell = vec![0.0; d];
    let mut out = Vec::with_capacity(hw);
    for p in 0..hw {
        for (c, v) in cell.iter_mut().enumerate() {
            *v = v_hat.data()[c * hw + p];
        }
        out.push(cosine_sim(&cell, a_hat.data())?);
    }
    LocalizationMap::new(Tensor::new(vec![h, w], out)?, MapSource::Avl)
}

fn per_cell(x: &Tensor, op: &'static str, f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape(
            op,
            format!("expected [C, H, W], got {:?}", x.shape()),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut cell = vec![0.0; c];
    let mut out = Vec::with_capacity(hw);
    for p in 0..hw {
        for (ch, v) in cell.iter_mut().enumerate() {
            *v = x.data()[ch * hw + p];
        }
        out.push(f(&cell));
    }
    Tensor::new(vec![h, w], out)
}

/// Max class posterior per cell of `[K, H, W]` posteriors.
pub fn ogl_cls_map(posteriors: &Tensor) -> Result<LocalizationMap> {
    let g = per_cell(posteriors, "ogl_cls_map", |c| {
        c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    })?;
    LocalizationMap::new(g, MapSource::OglCls)
}

/// L1 norm per cell of `[C, H, W]` features.
pub fn ogl_l1_map(features: &Tensor) -> Result<LocalizationMap> {
    let g = per_cell(features, "ogl_l1_map", |c| c.iter().map(|v| v.abs()).sum())?;
    LocalizationMap::new(g, MapSource::OglL1)
}

/// Min-max normalization into `[0, 1]`. A constant map becomes all zeros
/// and is flagged `degenerate`.
pub fn normalize_map(m: &LocalizationMap) -> LocalizationMap {
    let v = m.values();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let degenerate = !(range > 0.0) || !range.is_finite();
    let grid = if degenerate {
        Tensor::zeros(m.grid.shape())
    } else {
        m.grid.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
    };
    LocalizationMap {
        grid,
        source: m.source,
        normalized: true,
        degenerate,
    }
}

/// `alpha · avl + (1 − alpha) · obj` per cell, not re-normalized.
pub fn fuse(avl: &LocalizationMap, obj: &LocalizationMap, alpha: f64) -> Result<LocalizationMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    if avl.grid.shape() != obj.grid.shape() {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", avl.grid.shape(), obj.grid.shape()),
        ));
    }
    if !avl.normalized || !obj.normalized {
        return Err(Error::InvalidArgument(
            "fuse expects normalized maps".into(),
        ));
    }
    let data = avl
        .values()
        .iter()
        .zip(obj.values())
        .map(|(a, o)| alpha * a + (1.0 - alpha) * o)
        .collect();
    Ok(LocalizationMap {
        grid: Tensor::new(avl.grid.shape().to_vec(), data)?,
        source: MapSource::Fused,
        normalized: true,
        degenerate: avl.degenerate && obj.degenerate,
    })
}

/// Source coordinate and blend weight along one axis, with cell centres at
/// `(i + 0.5) / n` and edge clamping.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `[target_h, target_w]`.
pub fn upsample_map(
    m: &LocalizationMap,
    target_h: usize,
    target_w: usize,
) -> Result<LocalizationMap> {
    let (h, w) = (m.height(), m.width());
    if target_h < h || target_w < w {
        return Err(Error::InvalidArgument(format!(
            "target {target_h}x{target_w} is smaller than the {h}x{w} grid"
        )));
    }
    let ys = axis_taps(h, target_h);
    let xs = axis_taps(w, target_w);
    let v = m.values();
    let mut out = Vec::with_capacity(target_h * target_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
            let bot = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(LocalizationMap {
        grid: Tensor::new(vec![target_h, target_w], out)?,
        ..m.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, v: Vec<f64>) -> LocalizationMap {
        LocalizationMap::new(Tensor::new(vec![h, w], v).unwrap(), MapSource::Avl).unwrap()
    }

    fn chw(cells: &[Vec<f64>], h: usize, w: usize) -> Tensor {
        let d = cells[0].len();
        let mut out = vec![0.0; d * h * w];
        for (p, c) in cells.iter().enumerate() {
            for (ch, v) in c.iter().enumerate() {
                out[ch * h * w + p] = *v;
            }
        }
        Tensor::new(vec![d, h, w], out).unwrap()
    }

    #[test]
    fn avl_of_copies_is_one() {
        let a = vec![0.2, -0.7, 1.1];
        let m = avl_map(&Tensor::from_vec(a.clone()), &chw(&vec![a; 6], 2, 3)).unwrap();
        assert!(m.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn avl_unique_argmax() {
        let a = vec![1.0, 2.0];
        let mut cells = vec![vec![-1.0, -2.0]; 4];
        cells[2] = a.clone();
        let m = avl_map(&Tensor::from_vec(a), &chw(&cells, 2, 2)).unwrap();
        let best: Vec<usize> = (0..4).filter(|&i| m.values()[i] > 0.5).collect();
        assert_eq!(best, vec![2]);
    }

    #[test]
    fn avl_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = avl_map(&Tensor::from_vec(a.clone()), &chw(&cells, 3, 4)).unwrap();
        for (p, c) in cells.iter().enumerate() {
            let dot: f64 = c.iter().zip(&a).map(|(x, y)| x * y).sum();
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt()
                * a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((m.values()[p] - dot / n).abs() < 1e-12);
        }
        assert_eq!(m.source, MapSource::Avl);
    }

    #[test]
    fn cls_map_cases() {
        let k = 4;
        let uniform = chw(&vec![vec![0.25; k]; 6], 2, 3);
        assert!(ogl_cls_map(&uniform)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.25));
        let mut oh = vec![vec![0.0; k]; 6];
        for (i, c) in oh.iter_mut().enumerate() {
            c[i % k] = 1.0;
        }
        assert!(ogl_cls_map(&chw(&oh, 2, 3))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rnd: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let r: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let m = ogl_cls_map(&chw(&rnd, 3, 2)).unwrap();
        for (p, c) in rnd.iter().enumerate() {
            assert_eq!(m.values()[p], c.iter().cloned().fold(0.0, f64::max));
        }
    }

    #[test]
    fn l1_map_cases() {
        assert!(ogl_l1_map(&Tensor::zeros(&[3, 2, 2]))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let single = Tensor::new(vec![1, 2, 2], vec![-1.0, 2.0, -3.5, 0.0]).unwrap();
        assert_eq!(ogl_l1_map(&single).unwrap().values(), &[1.0, 2.0, 3.5, 0.0]);
        let f = chw(&[vec![1.0, -2.0], vec![0.5, 0.25]], 1, 2);
        assert_eq!(ogl_l1_map(&f).unwrap().values(), &[3.0, 0.75]);
    }

    #[test]
    fn normalize_cases() {
        let n = normalize_map(&map(1, 3, vec![0.0, 5.0, 10.0]));
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
        assert!(n.normalized && !n.degenerate);
        let c = normalize_map(&map(2, 2, vec![3.0; 4]));
        assert!(c.degenerate && c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_cases() {
        let a = normalize_map(&map(1, 3, vec![0.0, 1.0, 2.0]));
        let mut b = normalize_map(&map(1, 3, vec![4.0, 0.0, 2.0]));
        b.source = MapSource::OglL1;
        assert_eq!(fuse(&a, &b, 1.0).unwrap().values(), a.values());
        assert_eq!(fuse(&a, &b, 0.0).unwrap().values(), b.values());
        let f = fuse(&a, &b, DEFAULT_ALPHA).unwrap();
        assert_eq!(f.source, MapSource::Fused);
        for i in 0..3 {
            assert_eq!(f.values()[i], 0.4 * a.values()[i] + 0.6 * b.values()[i]);
        }
        assert!(fuse(&a, &b, 1.5).is_err());
        assert!(fuse(&a, &normalize_map(&map(3, 1, vec![0.0, 1.0, 2.0])), 0.5).is_err());
        assert!(fuse(&map(1, 3, vec![0.0; 3]), &b, 0.5).is_err());
    }

    #[test]
    fn upsample_identity_and_constant() {
        let m = map(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(upsample_map(&m, 2, 3).unwrap().grid, m.grid);
        let c = upsample_map(&map(3, 3, vec![0.7; 9]), 12, 9).unwrap();
        assert!(c.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(upsample_map(&m, 1, 3).is_err());
    }

    #[test]
    fn upsample_2x2_to_4x4_by_hand() {
        // output centres map to source coords -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped index)
        let m = map(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let u = upsample_map(&m, 4, 4).unwrap();
        let row = |y0: f64| -> Vec<f64> { vec![y0, y0 + 0.25, y0 + 0.75, y0 + 1.0] };
        let expect: Vec<f64> = [0.0, 0.5, 1.5, 2.0].iter().flat_map(|&y| row(y)).collect();
        for (a, b) in u.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", u.values());
        }
    }

    proptest! {
        #[test]
        fn normalize_range_and_idempotence(v in prop::collection::vec(-50.0f64..50.0, 2..30)) {
            let n = v.len();
            let m = normalize_map(&map(1, n, v.clone()));
            prop_assert!(m.values().iter().all(|x| (0.0..=1.0).contains(x)));
            if !m.degenerate {
                let lo = m.values().iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = m.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(lo, 0.0);
                prop_assert_eq!(hi, 1.0);
                let am = |x: &[f64]| (0..x.len()).max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a))).unwrap();
                prop_assert_eq!(am(&v), am(m.values()));
                let again = normalize_map(&m);
                for (a, b) in again.values().iter().zip(m.values()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn fuse_of_equal_maps_is_identity(v in prop::collection::vec(0.0f64..1.0, 4), alpha in 0.0f64..=1.0) {
            let m = normalize_map(&map(2, 2, v));
            let f = fuse(&m, &m, alpha).unwrap();
            for (a, b) in f.values().iter().zip(m.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn fuse_is_linear_in_alpha(a in prop::collection::vec(0.0f64..1.0, 4),
                                    b in prop::collection::vec(0.0f64..1.0, 4),
                                    lo in 0.0f64..0.5, hi in 0.5f64..=1.0) {
            let (ma, mb) = (normalize_map(&map(2, 2, a)), normalize_map(&map(2, 2, b)));
            let f_lo = fuse(&ma, &mb, lo).unwrap();
            let f_hi = fuse(&ma, &mb, hi).unwrap();
            for i in 0..4 {
                let (x, y) = (mb.values()[i], ma.values()[i]);
                let d_lo = (f_lo.values()[i] - x).abs();
                let d_hi = (f_hi.values()[i] - x).abs();
                prop_assert!(d_hi + 1e-12 >= d_lo);
                prop_assert!((f_hi.values()[i] - (hi * y + (1.0 - hi) * x)).abs() < 1e-12);
            }
        }
    }
}
