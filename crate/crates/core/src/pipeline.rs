//! On-disk workflow: dataset generation, pretraining, training, evaluation,
//! sweeps and single-sample map dumps. All paths live under one work
//! directory.
//!
//! ```text
//! data/<split>.tsv         id, image path, wav path, class, box x,y,w,h
//! data/<split>.meta        name, seed, n, classes
//! data/<split>/<id>.ezvl   entries `image` [3,H,W], `mask` [H,W], `distractors` [n,5]
//! data/<split>/<id>.wav    16-bit mono PCM
//! checkpoints/objectness.ezvl
//! checkpoints/model.ezvl
//! reports/*.csv, *.txt, *.cfg
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::audio::{read_wav, write_wav};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Config, VisualInit};
use crate::error::{Error, Result};
use crate::format::{encode_pgm, TensorFile};
use crate::inference::{raw_maps, raw_maps_all, select_map, CachedPredictor};
use crate::localize::{upsample_map, MapSource};
use crate::metrics::{
    evaluate_annotated, oracle_predictor, random_baseline, Annotation, MetricsReport,
};
use crate::micl::{loss_curve_csv, mean_true_rank, train, EpochLoss};
use crate::models::{AvModel, ObjectnessModel};
use crate::objectness::{objectness_accuracy, pretrain_objectness, PretrainReport};
use crate::synth::{generate_set, generate_split, BBox, Sample, Split};
use crate::tensor::Tensor;

pub const SPLITS: [&str; 5] = ["train", "test_heard", "test_unheard", "objects", "objects_val"];

/// Paths inside a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data().join(format!("{split}.tsv"))
    }

    pub fn objectness_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("objectness.ezvl")
    }

    pub fn model_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("model.ezvl")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Write `text` and the resolved config next to it (`<path>.cfg`).
fn write_with_config(path: &Path, text: &str, config: &Config) -> Result<()> {
    write(path, text)?;
    let mut cfg = path.as_os_str().to_owned();
    cfg.push(".cfg");
    write(Path::new(&cfg), config.to_text())
}

fn sample_file(sample: &Sample) -> Result<TensorFile> {
    let mut f = TensorFile::new();
    f.push("image", sample.image.clone())?;
    let n = sample.img_size();
    let mask = sample.mask.iter().map(|&m| m as f64).collect();
    f.push("mask", Tensor::new(vec![n, n], mask)?)?;
    if !sample.distractor_boxes.is_empty() {
        let rows: Vec<f64> = sample
            .distractor_classes
            .iter()
            .zip(&sample.distractor_boxes)
            .flat_map(|(&c, b)| [c, b.x, b.y, b.w, b.h].map(|v| v as f64))
            .collect();
        f.push("distractors", Tensor::new(vec![sample.distractor_boxes.len(), 5], rows)?)?;
    }
    Ok(f)
}

fn write_split(dir: &Path, split: &Split) -> Result<()> {
    let mut manifest = String::new();
    for s in &split.samples {
        let image = format!("{}/{:06}.ezvl", split.name, s.id);
        let wav = format!("{}/{:06}.wav", split.name, s.id);
        write(&dir.join(&image), sample_file(s)?.encode())?;
        write_wav(&dir.join(&wav), &s.audio)?;
        let b = s.gt_box;
        let _ = writeln!(
            manifest,
            "{}\t{image}\t{wav}\t{}\t{},{},{},{}",
            s.id, s.sounding_class, b.x, b.y, b.w, b.h
        );
    }
    write(&dir.join(format!("{}.tsv", split.name)), manifest)?;
    let classes: Vec<String> = split.classes.iter().map(|c| c.to_string()).collect();
    let meta = format!(
        "name = {}\nseed = {}\nn = {}\nclasses = {}\n",
        split.name,
        split.seed,
        split.samples.len(),
        classes.join(",")
    );
    write(&dir.join(format!("{}.meta", split.name)), meta)
}

/// Generated splits, in memory.
pub fn build_dataset(config: &Config) -> Result<Vec<Split>> {
    let world = config.world();
    let seed = config.derived_seed("data");
    let set = generate_split(seed, config.n_train, config.n_test, config.heard_fraction, &world)?;
    let all: Vec<usize> = (0..config.n_classes).collect();
    let objects = generate_set("objects", seed, config.n_objects, &all, &world)?;
    let objects_val = generate_set("objects_val", seed, config.n_test, &all, &world)?;
    Ok(vec![set.train, set.test_heard, set.test_unheard, objects, objects_val])
}

/// Write every split under `data/`. A non-empty `data/` is an error unless
/// `force` is set, in which case it is replaced.
pub fn cmd_generate(wd: &Workdir, config: &Config, force: bool) -> Result<Vec<Split>> {
    let dir = wd.data();
    let non_empty = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let splits = build_dataset(config)?;
    for s in &splits {
        log::info!("writing split {} ({} samples)", s.name, s.samples.len());
        write_split(&dir, s)?;
    }
    write(&dir.join("dataset.cfg"), config.to_text())?;
    Ok(splits)
}

fn parse_box(text: &str) -> Option<BBox> {
    let v: Vec<usize> = text.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    match v[..] {
        [x, y, w, h] => Some(BBox { x, y, w, h }),
        _ => None,
    }
}

fn load_sample(dir: &Path, line: &str, manifest: &Path) -> Result<Sample> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 5 {
        return Err(malformed(manifest, format!("expected 5 columns: `{line}`")));
    }
    let id = cols[0].parse().map_err(|_| malformed(manifest, format!("bad id `{}`", cols[0])))?;
    let class = cols[3].parse().map_err(|_| malformed(manifest, format!("bad class `{}`", cols[3])))?;
    let gt_box = parse_box(cols[4]).ok_or_else(|| malformed(manifest, format!("bad box `{}`", cols[4])))?;
    let image_path = dir.join(cols[1]);
    let file = TensorFile::load(&image_path)?;
    let image = file.require("image")?.clone();
    if image.ndim() != 3 || image.shape()[0] != 3 || image.shape()[1] != image.shape()[2] {
        return Err(malformed(&image_path, format!("image shape {:?}", image.shape())));
    }
    let mask = file.require("mask")?.data().iter().map(|&v| v as u8).collect();
    let (mut distractor_boxes, mut distractor_classes) = (Vec::new(), Vec::new());
    if let Some(d) = file.get("distractors") {
        for r in d.data().chunks(5) {
            distractor_classes.push(r[0] as usize);
            distractor_boxes.push(BBox {
                x: r[1] as usize,
                y: r[2] as usize,
                w: r[3] as usize,
                h: r[4] as usize,
            });
        }
    }
    Ok(Sample {
        id,
        image,
        mask,
        audio: read_wav(&dir.join(cols[2]))?,
        sounding_class: class,
        gt_box,
        distractor_boxes,
        distractor_classes,
    })
}

pub fn load_split(wd: &Workdir, name: &str) -> Result<Split> {
    let dir = wd.data();
    let manifest = wd.manifest(name);
    let text = read_text(&manifest)?;
    let meta_path = dir.join(format!("{name}.meta"));
    let meta = read_text(&meta_path)?;
    let mut seed = 0;
    let mut classes = Vec::new();
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "seed" => seed = v.trim().parse().map_err(|_| malformed(&meta_path, "bad seed"))?,
                "classes" => {
                    classes = v
                        .trim()
                        .split(',')
                        .filter(|c| !c.is_empty())
                        .map(|c| c.parse().map_err(|_| malformed(&meta_path, "bad class list")))
                        .collect::<Result<_>>()?
                }
                _ => {}
            }
        }
    }
    let samples = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| load_sample(&dir, l, &manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        name: name.to_string(),
        seed,
        classes,
        samples,
    })
}

fn require_samples(split: &Split) -> Result<()> {
    if split.samples.is_empty() {
        return Err(Error::Empty(format!("split `{}`", split.name)));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: ObjectnessModel,
    pub report: PretrainReport,
    pub held_out_accuracy: f64,
}

/// Pretrain objectness on the `objects` split and report held-out accuracy.
pub fn run_pretrain(config: &Config, objects: &Split, held_out: &Split) -> Result<PretrainOutcome> {
    require_samples(objects)?;
    let mut model = ObjectnessModel::init(&config.model(), config.derived_seed("objectness-init"))?;
    let report = pretrain_objectness(&mut model, &objects.samples, &config.pretrain(), |_, _| {})?;
    let held_out_accuracy = objectness_accuracy(&model, &held_out.samples)?;
    Ok(PretrainOutcome {
        model,
        report,
        held_out_accuracy,
    })
}

pub fn cmd_pretrain(wd: &Workdir, config: &Config) -> Result<PretrainOutcome> {
    let objects = load_split(wd, "objects")?;
    let held_out = load_split(wd, "objects_val")?;
    let out = run_pretrain(config, &objects, &held_out)?;
    save_checkpoint(
        &wd.objectness_checkpoint(),
        &Checkpoint {
            model: None,
            objectness: Some(out.model.clone()),
            config_hash: config.hash_bytes(),
        },
    )?;
    let mut csv = String::from("epoch,mean_loss\n");
    let _ = writeln!(csv, "init,{}", out.report.initial_loss);
    for (e, l) in out.report.curve.iter().enumerate() {
        let _ = writeln!(csv, "{e},{l}");
    }
    let _ = writeln!(csv, "held_out_accuracy,{}", out.held_out_accuracy);
    write_with_config(&wd.report("objectness_curve.csv"), &csv, config)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AvModel,
    pub curve: Vec<EpochLoss>,
}

/// Initialize from `objectness` when configured and run contrastive training.
/// On divergence the partially trained model is returned with the error.
pub fn run_train(
    config: &Config,
    train_split: &Split,
    objectness: Option<&ObjectnessModel>,
) -> std::result::Result<TrainOutcome, (Error, Option<AvModel>)> {
    let inner = || -> Result<AvModel> {
        require_samples(train_split)?;
        let mut model = AvModel::init(&config.model(), config.derived_seed("model-init"))?;
        if config.visual_init == VisualInit::Objectness {
            let obj = objectness.ok_or_else(|| {
                Error::InvalidArgument("visual_init = objectness needs a pretrained objectness model".into())
            })?;
            model.init_visual_from(obj)?;
        }
        Ok(model)
    };
    let mut model = inner().map_err(|e| (e, None))?;
    let stft = (config.n_fft, config.hop);
    match train(&config.train(), &train_split.samples, &mut model, stft, |e| {
        log::info!("epoch {}: a2v {:.4} v2a {:.4} total {:.4}", e.epoch, e.a2v, e.v2a, e.total)
    }) {
        Ok(curve) => Ok(TrainOutcome { model, curve }),
        Err(e) => Err((e, Some(model))),
    }
}

fn objectness_for(wd: &Workdir, config: &Config) -> Result<Option<ObjectnessModel>> {
    let path = wd.objectness_checkpoint();
    if !path.exists() {
        return Ok(None);
    }
    Ok(load_checkpoint(&path, &config.model())?.objectness)
}

/// Train into `run_dir`: `model.ezvl`, `train_curve.csv` and its config.
pub fn train_into(wd: &Workdir, config: &Config, ckpt_path: &Path, curve_path: &Path) -> Result<TrainOutcome> {
    let train_split = load_split(wd, "train")?;
    let objectness = objectness_for(wd, config)?;
    if config.visual_init == VisualInit::Objectness && objectness.is_none() {
        return Err(Error::Io {
            path: wd.objectness_checkpoint(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run pretrain-objectness first"),
        });
    }
    let save = |model: &AvModel| {
        save_checkpoint(
            ckpt_path,
            &Checkpoint {
                model: Some(model.clone()),
                objectness: objectness.clone(),
                config_hash: config.hash_bytes(),
            },
        )
    };
    match run_train(config, &train_split, objectness.as_ref()) {
        Ok(out) => {
            save(&out.model)?;
            write_with_config(curve_path, &loss_curve_csv(&out.curve), config)?;
            Ok(out)
        }
        Err((e, model)) => {
            if let Some(m) = model {
                log::error!("{e}; keeping the last good parameters in {}", ckpt_path.display());
                save(&m)?;
            }
            Err(e)
        }
    }
}

pub fn cmd_train(wd: &Workdir, config: &Config) -> Result<TrainOutcome> {
    train_into(wd, config, &wd.model_checkpoint(), &wd.report("train_curve.csv"))
}

/// Load a trained checkpoint, warning when its config hash differs.
pub fn load_trained(path: &Path, config: &Config) -> Result<(AvModel, ObjectnessModel)> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let ck = load_checkpoint(path, &config.model())?;
    if ck.config_hash != config.hash_bytes() {
        log::warn!(
            "checkpoint {} was trained with config hash {}, current config hashes to {}",
            path.display(),
            ck.hash_hex(),
            config.hash_hex()
        );
    }
    let model = ck.model.ok_or_else(|| Error::MissingEntry("visual.*".into()))?;
    let obj = ck.objectness.ok_or_else(|| Error::MissingEntry("objectness.*".into()))?;
    Ok((model, obj))
}

pub fn annotation(config: &Config) -> Annotation {
    Annotation {
        annotators: config.annotators,
        jitter: config.box_jitter,
        seed: config.derived_seed("annotation"),
    }
}

/// Evaluate `source` maps of a trained model on `split`.
pub fn evaluate_model(
    config: &Config,
    model: &AvModel,
    objectness: &ObjectnessModel,
    split: &Split,
) -> Result<MetricsReport> {
    let cache = raw_maps_all(model, objectness, &split.samples, config.stft());
    evaluate_cached(config, &cache, split, config.map_source, config.alpha)
}

pub fn evaluate_cached(
    config: &Config,
    cache: &[Result<crate::inference::RawMaps>],
    split: &Split,
    source: MapSource,
    alpha: f64,
) -> Result<MetricsReport> {
    let p = CachedPredictor {
        cache,
        source,
        prior: config.object_prior,
        alpha,
    };
    let mut r = evaluate_annotated(&split.samples, &p, config.theta, &annotation(config))?;
    r.echo = vec![
        ("split".into(), split.name.clone()),
        ("map_source".into(), source.to_string()),
        ("object_prior".into(), config.object_prior.to_string()),
        ("alpha".into(), alpha.to_string()),
        ("strategy".into(), config.strategy.to_string()),
    ];
    r.config_hash = config.hash_hex();
    Ok(r)
}

pub fn cmd_evaluate(wd: &Workdir, config: &Config, split: &str) -> Result<MetricsReport> {
    let (model, obj) = load_trained(&wd.model_checkpoint(), config)?;
    let data = load_split(wd, split)?;
    require_samples(&data)?;
    let report = evaluate_model(config, &model, &obj, &data)?;
    let stem = format!("eval_{split}_{}", config.map_source);
    write_with_config(&wd.report(&format!("{stem}.csv")), &report.to_csv(), config)?;
    write(&wd.report(&format!("{stem}.txt")), report.to_table())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    pub random_mean: f64,
    pub random_sd: f64,
    pub oracle: f64,
}

/// Random-map Monte Carlo and oracle-predictor CIoU@0.5 on `split`.
pub fn baselines(config: &Config, split: &Split, grid: usize) -> Result<Baselines> {
    let a = annotation(config);
    let (random_mean, random_sd) = random_baseline(
        &split.samples,
        grid,
        config.baseline_runs,
        config.theta,
        config.derived_seed("random-baseline"),
    )?;
    let oracle = evaluate_annotated(&split.samples, &oracle_predictor(a), config.theta, &a)?.ciou;
    Ok(Baselines {
        random_mean,
        random_sd,
        oracle,
    })
}

pub fn cmd_baselines(wd: &Workdir, config: &Config, split: &str) -> Result<Baselines> {
    let data = load_split(wd, split)?;
    require_samples(&data)?;
    let grid = AvModel::init(&config.model(), 0)?.grid().0;
    let b = baselines(config, &data, grid)?;
    let csv = format!(
        "baseline,ciou_0.5\nrandom_mean,{}\nrandom_sd,{}\noracle,{}\nruns,{}\n",
        b.random_mean, b.random_sd, b.oracle, config.baseline_runs
    );
    write_with_config(&wd.report(&format!("baselines_{split}.csv")), &csv, config)?;
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Dim,
    Tau,
    Strategy,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "dim" => Ok(SweepAxis::Dim),
            "tau" => Ok(SweepAxis::Tau),
            "strategy" => Ok(SweepAxis::Strategy),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis `{s}`"))),
        }
    }
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Dim => "dim",
            SweepAxis::Tau => "tau",
            SweepAxis::Strategy => "strategy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub ciou: f64,
    pub auc: f64,
    pub n: usize,
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,ciou_0.5,auc,n\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", axis.key(), r.value, r.ciou, r.auc, r.n);
    }
    s
}

/// One evaluation per value. `alpha` reuses the trained checkpoint; the
/// other axes train a fresh model per value under `runs/`.
pub fn cmd_sweep(wd: &Workdir, config: &Config, axis: SweepAxis, values: &[String], split: &str) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = config.clone();
        c.set(axis.key(), v)?;
        c.validate()?;
        configs.push(c);
    }
    let data = load_split(wd, split)?;
    require_samples(&data)?;
    let mut rows = Vec::new();
    if axis == SweepAxis::Alpha {
        let (model, obj) = load_trained(&wd.model_checkpoint(), config)?;
        let cache = raw_maps_all(&model, &obj, &data.samples, config.stft());
        for (v, c) in values.iter().zip(&configs) {
            let r = evaluate_cached(c, &cache, &data, MapSource::Fused, c.alpha)?;
            rows.push(SweepRow { value: v.clone(), ciou: r.ciou, auc: r.auc, n: r.n() });
        }
    } else {
        for (v, c) in values.iter().zip(&configs) {
            let run = wd.root.join("runs").join(format!("{}-{v}", axis.key()));
            let ckpt = run.join("model.ezvl");
            train_into(wd, c, &ckpt, &run.join("train_curve.csv"))?;
            let (model, obj) = load_trained(&ckpt, c)?;
            let r = evaluate_model(c, &model, &obj, &data)?;
            write_with_config(&run.join(format!("eval_{split}.csv")), &r.to_csv(), c)?;
            rows.push(SweepRow { value: v.clone(), ciou: r.ciou, auc: r.auc, n: r.n() });
        }
    }
    write_with_config(
        &wd.report(&format!("sweep_{}_{split}.csv", axis.key())),
        &sweep_csv(axis, &rows),
        config,
    )?;
    Ok(rows)
}

/// Maps of one sample: a tensor file with the normalized grid maps and the
/// upsampled map of `config.map_source`, plus a PGM rendering of the latter.
pub fn cmd_localize(wd: &Workdir, config: &Config, split: &str, index: usize, out: &Path) -> Result<PathBuf> {
    let (model, obj) = load_trained(&wd.model_checkpoint(), config)?;
    let data = load_split(wd, split)?;
    let sample = data.samples.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!("split `{split}` has {} samples, index {index}", data.samples.len()))
    })?;
    let raw = raw_maps(&model, &obj, sample, config.stft())?;
    let mut f = TensorFile::new();
    for src in [MapSource::Avl, MapSource::OglL1, MapSource::OglCls, MapSource::Fused] {
        f.push(src.as_str(), select_map(&raw, src, config.object_prior, config.alpha)?.grid)?;
    }
    let chosen = select_map(&raw, config.map_source, config.object_prior, config.alpha)?;
    let n = sample.img_size();
    let up = upsample_map(&chosen, n, n)?;
    f.push("upsampled", up.grid.clone())?;
    let b = sample.gt_box;
    f.push("gt_box", Tensor::from_vec(vec![b.x as f64, b.y as f64, b.w as f64, b.h as f64]))?;
    let out = wd.root.join(out);
    let ezvl = out.with_extension("ezvl");
    write(&ezvl, f.encode())?;
    write(&out.with_extension("pgm"), encode_pgm(&up.grid)?)?;
    Ok(ezvl)
}

/// Mean in-batch rank of the true clip on `split` for the trained model.
pub fn true_rank(config: &Config, model: &AvModel, split: &Split) -> Result<f64> {
    mean_true_rank(model, &split.samples, config.batch_size, config.strategy, (config.n_fft, config.hop))
}
