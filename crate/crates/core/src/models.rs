//! Visual encoder, audio encoder, shared-space projections and the
//! objectness network.
//!
//! Parameters live in plain [`Tensor`]s. To run a differentiable forward
//! pass a model is first bound to a [`Graph`] with [`Module::bind`], which
//! inserts every parameter as a leaf in a fixed order; the gradients come
//! back in that same order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::Spectrogram;
use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::format::TensorFile;
use crate::tensor::Tensor;

/// Anything that owns named parameters.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Insert every parameter into `g` as a leaf, in visiting order.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::new();
        self.visit("", &mut |_, t| vars.push(g.leaf(t.clone(), trainable)));
        vars
    }
}

/// Append every parameter of `module` to `file` under `prefix`.
pub fn export_params<M: Module + ?Sized>(module: &M, prefix: &str, file: &mut TensorFile) -> Result<()> {
    for (name, t) in module.named_params(prefix) {
        file.push(name, t.clone())?;
    }
    Ok(())
}

/// Overwrite every parameter of `module` with the entry of the same name.
pub fn import_params<M: Module + ?Sized>(module: &mut M, prefix: &str, file: &TensorFile) -> Result<()> {
    let mut result = Ok(());
    module.visit_mut(prefix, &mut |name, t| {
        if result.is_err() {
            return;
        }
        result = match file.require(&name) {
            Ok(src) if src.shape() == t.shape() => {
                t.data_mut().copy_from_slice(src.data());
                Ok(())
            }
            Ok(src) => Err(Error::shape(
                "checkpoint",
                format!("`{name}` is {:?} in the file, model expects {:?}", src.shape(), t.shape()),
            )),
            Err(e) => Err(e),
        };
    });
    result
}

/// Gradients of the leaves returned by [`Module::bind`], in order.
pub fn collect_grads(grads: &mut Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[K, C, kh, kw]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[D_out, D_in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![d_out, d_in], w).expect("linear shape"),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn visit_named<'a>(
        &'a self,
        prefix: &str,
        w: &str,
        b: &str,
        f: &mut dyn FnMut(String, &'a Tensor),
    ) {
        f(join(prefix, w), &self.weight);
        f(join(prefix, b), &self.bias);
    }

    fn visit_named_mut(
        &mut self,
        prefix: &str,
        w: &str,
        b: &str,
        f: &mut dyn FnMut(String, &mut Tensor),
    ) {
        f(join(prefix, w), &mut self.weight);
        f(join(prefix, b), &mut self.bias);
    }
}

/// 3×3 conv + ReLU blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
}

impl ConvStack {
    /// Kaiming-normal weights, zero biases.
    pub fn init(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        channels: &[usize],
        strides: &[usize],
    ) -> Result<Self> {
        if channels.is_empty() || channels.len() != strides.len() {
            return Err(Error::Config(format!(
                "{} channel widths vs {} strides",
                channels.len(),
                strides.len()
            )));
        }
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (&c_out, &stride) in channels.iter().zip(strides) {
            let fan_in = c_in * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("sigma");
            let w = (0..c_out * fan_in).map(|_| normal.sample(rng)).collect();
            layers.push(Conv {
                weight: Tensor::new(vec![c_out, c_in, 3, 3], w)?,
                bias: Tensor::zeros(&[c_out]),
                stride,
                padding: 1,
            });
            c_in = c_out;
        }
        Ok(Self { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape()[0]).unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    /// Output spatial size for an `h × w` input.
    pub fn out_size(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for l in &self.layers {
            h = (h + 2 * l.padding - 3) / l.stride + 1;
            w = (w + 2 * l.padding - 3) / l.stride + 1;
        }
        (h, w)
    }

    /// `vars` holds `[w1, b1, w2, b2, ...]` as bound by [`Module::bind`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            let y = g.conv2d(x, vars[2 * i], vars[2 * i + 1], l.stride, l.padding)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    fn n_vars(&self) -> usize {
        2 * self.layers.len()
    }
}

impl Module for ConvStack {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(join(prefix, &format!("conv{}.weight", i + 1)), &l.weight);
            f(join(prefix, &format!("conv{}.bias", i + 1)), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(
                join(prefix, &format!("conv{}.weight", i + 1)),
                &mut l.weight,
            );
            f(join(prefix, &format!("conv{}.bias", i + 1)), &mut l.bias);
        }
    }
}

/// Architecture knobs shared by all networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub img_size: usize,
    pub visual_channels: Vec<usize>,
    pub visual_strides: Vec<usize>,
    pub audio_channels: Vec<usize>,
    pub audio_strides: Vec<usize>,
    /// Shared embedding dimension.
    pub dim: usize,
    pub n_classes: usize,
    /// Spectrogram shape `[F, T]`.
    pub spec_shape: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_size: 64,
            visual_channels: vec![16, 32, 64, 64],
            visual_strides: vec![2, 2, 2, 1],
            audio_channels: vec![8, 16, 32, 64],
            audio_strides: vec![2, 2, 2, 2],
            dim: 64,
            n_classes: 8,
            spec_shape: [65, 124],
        }
    }
}

/// Localized visual features `[C_v, H, W]`; no pooling anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub trunk: ConvStack,
}

/// Conv stack over the standardized spectrogram with global average
/// pooling at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub trunk: ConvStack,
}

/// Linear maps of both modalities into the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub visual: Linear,
    pub audio: Linear,
}

/// Same trunk as the visual encoder plus a per-location classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessModel {
    pub trunk: ConvStack,
    pub head: Linear,
}

impl Module for VisualEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.trunk.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.trunk.visit_mut(prefix, f)
    }
}

impl Module for AudioEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.trunk.visit(prefix, f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.trunk.visit_mut(prefix, f)
    }
}

impl Module for ProjectionHeads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.visual.visit_named(prefix, "U_v", "b_v", f);
        self.audio.visit_named(prefix, "U_a", "b_a", f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.visual.visit_named_mut(prefix, "U_v", "b_v", f);
        self.audio.visit_named_mut(prefix, "U_a", "b_a", f);
    }
}

impl Module for ObjectnessModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.trunk.visit(prefix, f);
        self.head.visit_named(prefix, "head.weight", "head.bias", f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.trunk.visit_mut(prefix, f);
        self.head
            .visit_named_mut(prefix, "head.weight", "head.bias", f);
    }
}

/// Stack `[3, H, W]` images into a `[B, 3, H, W]` batch.
pub fn image_batch(images: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(images)
}

/// Per-clip standardized spectrograms stacked into `[B, 1, F, T]`.
pub fn spectrogram_batch(specs: &[&Spectrogram]) -> Result<Tensor> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Empty("spectrogram batch".into()))?;
    let (f, t) = (first.n_freq(), first.n_frames());
    let mut data = Vec::with_capacity(specs.len() * f * t);
    for s in specs {
        if s.bins.shape() != [f, t] {
            return Err(Error::shape(
                "spectrogram batch",
                format!("{:?} vs [{f}, {t}]", s.bins.shape()),
            ));
        }
        let x = s.bins.data();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let sd = var.sqrt().max(1e-6);
        data.extend(x.iter().map(|v| (v - mean) / sd));
    }
    Tensor::new(vec![specs.len(), 1, f, t], data)
}

impl VisualEncoder {
    /// `[B, 3, H, W]` → `[B, C_v, H', W']`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: Var) -> Result<Var> {
        self.trunk.forward(g, vars, images)
    }

    pub fn feature_map(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(single(image)?);
        let y = self.forward(&mut g, &vars, x)?;
        let s = g.shape(y)[1..].to_vec();
        g.value(y).clone().reshape(&s)
    }
}

impl AudioEncoder {
    /// `[B, 1, F, T]` → last conv map `[B, C, h, w]`.
    pub fn feature_map_graph(&self, g: &mut Graph, vars: &[Var], specs: Var) -> Result<Var> {
        self.trunk.forward(g, vars, specs)
    }

    /// `[B, 1, F, T]` → globally pooled `[B, D_a]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], specs: Var) -> Result<Var> {
        let fm = self.feature_map_graph(g, vars, specs)?;
        let s = g.shape(fm).to_vec();
        let flat = g.reshape(fm, &[s[0], s[1], s[2] * s[3]])?;
        Ok(g.mean_last(flat))
    }

    /// Last conv map `[C, h, w]` of a single clip, before pooling.
    pub fn feature_map(&self, spec: &Spectrogram) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(spectrogram_batch(&[spec])?);
        let y = self.feature_map_graph(&mut g, &vars, x)?;
        let s = g.shape(y)[1..].to_vec();
        g.value(y).clone().reshape(&s)
    }
}

fn single(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.clone().reshape(&shape)
}

/// Audio-visual model: both encoders and the projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AvModel {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub heads: ProjectionHeads,
}

impl Module for AvModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.visual.visit(&join(prefix, "visual"), f);
        self.audio.visit(&join(prefix, "audio"), f);
        self.heads.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.visual.visit_mut(&join(prefix, "visual"), f);
        self.audio.visit_mut(&join(prefix, "audio"), f);
        self.heads.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Vars of an [`AvModel`] bound to one graph.
pub struct AvVars {
    pub all: Vec<Var>,
    visual: std::ops::Range<usize>,
    audio: std::ops::Range<usize>,
    heads: std::ops::Range<usize>,
}

/// Projected visual rows `[B·H·W, d]` (row `b·HW + y·W + x`) and the grid.
pub struct VisualOut {
    pub rows: Var,
    pub batch: usize,
    pub grid: (usize, usize),
}

impl AvModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = VisualEncoder {
            trunk: ConvStack::init(&mut rng, 3, &config.visual_channels, &config.visual_strides)?,
        };
        let audio = AudioEncoder {
            trunk: ConvStack::init(&mut rng, 1, &config.audio_channels, &config.audio_strides)?,
        };
        let heads = ProjectionHeads {
            visual: Linear::init(&mut rng, visual.trunk.out_channels(), config.dim),
            audio: Linear::init(&mut rng, audio.trunk.out_channels(), config.dim),
        };
        let model = Self {
            config: config.clone(),
            visual,
            audio,
            heads,
        };
        let (h, w) = model.grid();
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "visual grid {h}x{w} is smaller than 2x2"
            )));
        }
        Ok(model)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.visual
            .trunk
            .out_size(self.config.img_size, self.config.img_size)
    }

    pub fn bind_all(&self, g: &mut Graph, trainable: bool) -> AvVars {
        let all = self.bind(g, trainable);
        let nv = self.visual.trunk.n_vars();
        let na = self.audio.trunk.n_vars();
        AvVars {
            visual: 0..nv,
            audio: nv..nv + na,
            heads: nv + na..all.len(),
            all,
        }
    }

    fn check_images(&self, g: &Graph, images: Var) -> Result<()> {
        let s = g.shape(images);
        let n = self.config.img_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::shape(
                "encode_visual",
                format!("expected [B, 3, {n}, {n}], got {s:?}"),
            ));
        }
        Ok(())
    }

    /// Visual features projected per location.
    pub fn forward_visual(&self, g: &mut Graph, vars: &AvVars, images: Var) -> Result<VisualOut> {
        self.check_images(g, images)?;
        let fm = self
            .visual
            .forward(g, &vars.all[vars.visual.clone()], images)?;
        let s = g.shape(fm).to_vec();
        let cl = g.channels_last(fm)?;
        let rows = g.reshape(cl, &[s[0] * s[2] * s[3], s[1]])?;
        let h = &vars.all[vars.heads.clone()];
        let proj = g.linear(rows, h[0], h[1])?;
        Ok(VisualOut {
            rows: proj,
            batch: s[0],
            grid: (s[2], s[3]),
        })
    }

    /// Global audio embedding projected into the shared space, `[B, d]`.
    pub fn forward_audio(&self, g: &mut Graph, vars: &AvVars, specs: Var) -> Result<Var> {
        let s = g.shape(specs);
        let [f, t] = self.config.spec_shape;
        if s.len() != 4 || s[1] != 1 || s[2] != f || s[3] != t {
            return Err(Error::shape(
                "encode_audio",
                format!("expected [B, 1, {f}, {t}], got {s:?}"),
            ));
        }
        let pooled = self
            .audio
            .forward(g, &vars.all[vars.audio.clone()], specs)?;
        let h = &vars.all[vars.heads.clone()];
        g.linear(pooled, h[2], h[3])
    }

    /// Projected localized features `[d, H, W]` of one image.
    pub fn encode_visual(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_all(&mut g, false);
        let x = g.constant(single(image)?);
        let out = self.forward_visual(&mut g, &vars, x)?;
        rows_to_grid(g.value(out.rows), out.grid)
    }

    /// Projected global audio embedding `[d]` of one clip.
    pub fn encode_audio(&self, spec: &Spectrogram) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_all(&mut g, false);
        let x = g.constant(spectrogram_batch(&[spec])?);
        let a = self.forward_audio(&mut g, &vars, x)?;
        Ok(Tensor::from_vec(g.value(a).data().to_vec()))
    }

    /// Copy the objectness trunk into the visual encoder.
    pub fn init_visual_from(&mut self, obj: &ObjectnessModel) -> Result<()> {
        if obj.trunk.layers.len() != self.visual.trunk.layers.len()
            || obj
                .trunk
                .layers
                .iter()
                .zip(&self.visual.trunk.layers)
                .any(|(a, b)| a.weight.shape() != b.weight.shape() || a.stride != b.stride)
        {
            return Err(Error::Config(
                "objectness trunk and visual encoder architectures differ".into(),
            ));
        }
        self.visual.trunk = obj.trunk.clone();
        Ok(())
    }
}

/// `[H·W, d]` rows of one image → `[d, H, W]`.
pub fn rows_to_grid(rows: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let d = *rows.shape().last().unwrap();
    if rows.len() != h * w * d {
        return Err(Error::shape(
            "rows_to_grid",
            format!("{:?} vs {h}x{w}", rows.shape()),
        ));
    }
    let src = rows.data();
    let mut out = vec![0.0; rows.len()];
    for p in 0..h * w {
        for c in 0..d {
            out[c * h * w + p] = src[p * d + c];
        }
    }
    Tensor::new(vec![d, h, w], out)
}

impl ObjectnessModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = ConvStack::init(&mut rng, 3, &config.visual_channels, &config.visual_strides)?;
        let head = Linear::init(&mut rng, trunk.out_channels(), config.n_classes);
        Ok(Self { trunk, head })
    }

    pub fn n_classes(&self) -> usize {
        self.head.d_out()
    }

    /// Trunk features `[B, C, H, W]` and per-location log-posteriors
    /// `[B·H·W, K]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: Var) -> Result<(Var, Var)> {
        let nt = self.trunk.n_vars();
        let fm = self.trunk.forward(g, &vars[..nt], images)?;
        let s = g.shape(fm).to_vec();
        let cl = g.channels_last(fm)?;
        let rows = g.reshape(cl, &[s[0] * s[2] * s[3], s[1]])?;
        let logits = g.linear(rows, vars[nt], vars[nt + 1])?;
        Ok((fm, g.log_softmax_last(logits)))
    }

    /// Feature map `[C, H, W]` and class posteriors `[K, H, W]` of one image.
    pub fn objectness_forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(single(image)?);
        let (fm, logp) = self.forward(&mut g, &vars, x)?;
        let s = g.shape(fm)[1..].to_vec();
        let features = g.value(fm).clone().reshape(&s)?;
        let post = g.value(logp).map(f64::exp);
        let posteriors = rows_to_grid(&post, (s[1], s[2]))?;
        Ok((features, posteriors))
    }
}
