//! Teacher training and student distillation loops.

use std::time::Instant;

use anyhow::{Context, Result};
use drd_core::adversarial::{
    alternating_step, Batch, CriticSide, Discriminator, StepConfig, StepOutcome, StudentSide,
};
use drd_core::data::{
    generate_synthetic, images_to_tensor, load_dataset, tile_raster, Dataset, DatasetLayout, PadMode, Sample, TileSpec,
};
use drd_core::distill::{LossBreakdown, LossToggles};
use drd_core::models::{build_model, model_report, FeatureProjection, FlopConvention, ModelReport, ModelSpec, SegModel};
use drd_nn::optim::{poly_lr, Adam, AdamConfig, Sgd, SgdConfig};
use drd_nn::ParamStore;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig, OptimizerConfig};
use crate::evaluate::{evaluate_model, EvalReport};

/// Independent random streams derived from the experiment seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    TeacherInit = 1,
    StudentInit = 2,
    ProjectionInit = 3,
    CriticInit = 4,
    CriticNoise = 5,
    TeacherData = 6,
    StudentData = 7,
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r.next_u64()
}

pub struct Data {
    pub train: Dataset,
    pub val: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => {
            let d = generate_synthetic(spec)?;
            Ok(Data { train: d.train, val: d.val })
        }
        DatasetSource::Folder {
            root,
            num_classes,
            ignore_index,
        } => Ok(Data {
            train: load_dataset(&root.join("train"), DatasetLayout::FolderPairs, *num_classes, *ignore_index)
                .with_context(|| format!("training split under {}", root.display()))?,
            val: load_dataset(&root.join("val"), DatasetLayout::FolderPairs, *num_classes, *ignore_index)
                .with_context(|| format!("validation split under {}", root.display()))?,
        }),
    }
}

/// Cuts training rasters into non-overlapping tiles of the configured size.
pub fn training_tiles(ds: &Dataset, tile: &TileSpec) -> Result<Vec<Sample>> {
    let spec = TileSpec::new(tile.tile_h, tile.tile_w, tile.tile_h, tile.tile_w, PadMode::Reflect)?;
    let mut out = Vec::new();
    for s in ds.samples() {
        if (s.image.dim().1, s.image.dim().2) == (tile.tile_h, tile.tile_w) {
            out.push(s.clone());
            continue;
        }
        for t in tile_raster(&s.image, &s.labels, &spec)? {
            if t.labels.ignored_count() == t.labels.height() * t.labels.width() {
                continue;
            }
            out.push(Sample {
                name: format!("{}_{}_{}", s.name, t.origin.0, t.origin.1),
                image: t.image,
                labels: t.labels,
            });
        }
    }
    anyhow::ensure!(!out.is_empty(), "no training tiles");
    Ok(out)
}

struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    augment: bool,
}

impl Sampler {
    fn new(n: usize, seed: u64, augment: bool) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            augment,
        }
    }

    fn batch(&mut self, samples: &[Sample], size: usize) -> Result<Batch> {
        let mut chosen = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let s = &samples[self.order[self.pos]];
            self.pos += 1;
            chosen.push(if self.augment {
                let (h, v) = (self.rng.gen::<bool>(), self.rng.gen::<bool>());
                s.flipped(h, v)
            } else {
                s.clone()
            });
        }
        let images: Vec<_> = chosen.iter().map(|s| &s.image).collect();
        Ok(Batch {
            images: images_to_tensor(&images)?,
            labels: chosen.iter().map(|s| s.labels.clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub l_d: f64,
    pub gp: f64,
    pub lr: f64,
}

impl LossRow {
    pub const HEADER: [&'static str; 10] = ["step", "l_ce", "l_p", "l_adv", "l_s", "l_c", "total", "l_d", "gp", "lr"];

    pub fn fields(&self) -> Vec<String> {
        let mut f = self.losses.csv_row(self.step);
        f.extend([self.l_d, self.gp, self.lr].map(|v| format!("{v:.8e}")));
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub step: usize,
    pub miou: f64,
    pub mean_f1: f64,
    pub oa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Teacher,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub kind: RunKind,
    pub config: ExperimentConfig,
    pub losses: Vec<LossRow>,
    pub snapshots: Vec<MetricSnapshot>,
    pub final_metrics: EvalReport,
    pub report: ModelReport,
    /// Excluded from reproducibility comparisons.
    pub wall_clock_secs: f64,
}

pub struct TrainOutcome {
    pub model: SegModel,
    pub projection: Option<FeatureProjection>,
    pub discriminator: Option<Discriminator>,
    pub record: RunRecord,
}

/// A failed run: the error and the parameters from before the failing step.
pub struct Aborted {
    pub error: anyhow::Error,
    pub last_good: ParamStore,
}

impl std::fmt::Debug for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for Aborted {}

fn sgd(o: &OptimizerConfig, store: &ParamStore) -> Sgd {
    Sgd::new(
        SgdConfig {
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
        },
        store,
    )
}

fn snapshot(step: usize, model: &mut SegModel, data: &Data, cfg: &ExperimentConfig) -> Result<(MetricSnapshot, EvalReport)> {
    let r = evaluate_model(model, &data.val, &cfg.tile, false)?;
    Ok((
        MetricSnapshot {
            step,
            miou: r.miou,
            mean_f1: r.mean_f1,
            oa: r.oa,
        },
        r,
    ))
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    cfg: &ExperimentConfig,
    data: &Data,
    kind: RunKind,
    spec: &ModelSpec,
    optim: &OptimizerConfig,
    init_stream: Stream,
    data_stream: Stream,
    iters: usize,
    toggles: LossToggles,
    mut teacher: Option<&mut SegModel>,
) -> std::result::Result<TrainOutcome, Aborted> {
    let start = Instant::now();
    let fail = |e: anyhow::Error, store: ParamStore| Aborted { error: e, last_good: store };
    let mut model = build_model(spec, stream_seed(cfg.seed, init_stream)).map_err(|e| fail(e.into(), ParamStore::new()))?;
    let mut opt = sgd(optim, model.store());

    let mut projection = match (&teacher, toggles.any_relation()) {
        (Some(t), true) if t.tap_channels() != model.tap_channels() => Some(FeatureProjection::new(
            model.tap_channels(),
            t.tap_channels(),
            stream_seed(cfg.seed, Stream::ProjectionInit),
        )),
        _ => None,
    };
    let mut proj_opt = projection.as_ref().map(|p| sgd(optim, p.store()));

    let bands = data.train.samples().first().map(|s| s.image.dim().0).unwrap_or(3);
    let mut critic = if toggles.use_adv {
        let d = Discriminator::new(
            &cfg.adversarial.spec(),
            bands + cfg.num_classes(),
            stream_seed(cfg.seed, Stream::CriticInit),
        )
        .map_err(|e| fail(e.into(), model.store().clone()))?;
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.adversarial.lr,
                ..AdamConfig::default()
            },
            d.store(),
        );
        Some((d, adam, ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::CriticNoise))))
    } else {
        None
    };

    let samples = training_tiles(&data.train, &cfg.tile).map_err(|e| fail(e, model.store().clone()))?;
    let mut sampler = Sampler::new(samples.len(), stream_seed(cfg.seed, data_stream), cfg.schedule.augment);
    let step_cfg = StepConfig {
        weights: cfg.weights,
        toggles,
        gp_weight: cfg.adversarial.gp_weight,
        relation_max_side: cfg.relation_max_side,
    };

    let mut losses = Vec::with_capacity(iters);
    let mut snapshots = Vec::new();
    for step in 0..iters {
        let last_good = model.store().clone();
        let lr = poly_lr(optim.lr, step, iters, cfg.schedule.poly_power);
        let batch = sampler
            .batch(&samples, cfg.schedule.batch_size)
            .map_err(|e| fail(e, last_good.clone()))?;
        let student = StudentSide {
            model: &mut model,
            optimizer: &mut opt,
            projection: projection.as_mut().zip(proj_opt.as_mut()),
            lr,
        };
        let critic_side = critic.as_mut().map(|(d, adam, rng)| CriticSide {
            discriminator: d,
            optimizer: adam,
            rng,
        });
        let out: StepOutcome = alternating_step(step, &batch, teacher.as_deref_mut(), student, critic_side, &step_cfg)
            .map_err(|e| fail(e.into(), last_good.clone()))?;
        if model.store().params().iter().any(|p| !p.value.all_finite()) {
            let e = drd_core::Error::Diverged {
                step,
                message: "parameters became non-finite".into(),
            };
            return Err(fail(e.into(), last_good));
        }
        losses.push(LossRow {
            step,
            losses: out.losses,
            l_d: out.l_d,
            gp: out.gradient_penalty,
            lr,
        });
        if cfg.schedule.eval_every > 0 && (step + 1) % cfg.schedule.eval_every == 0 && step + 1 < iters {
            let (s, _) = snapshot(step + 1, &mut model, data, cfg).map_err(|e| fail(e, model.store().clone()))?;
            snapshots.push(s);
        }
    }
    let (s, final_metrics) = snapshot(iters, &mut model, data, cfg).map_err(|e| fail(e, model.store().clone()))?;
    snapshots.push(s);
    let (h, w) = (cfg.tile.tile_h, cfg.tile.tile_w);
    let report = model_report(&mut model, h, w, FlopConvention::Macs).map_err(|e| fail(e.into(), model.store().clone()))?;
    Ok(TrainOutcome {
        model,
        projection,
        discriminator: critic.map(|(d, _, _)| d),
        record: RunRecord {
            name: cfg.name.clone(),
            kind,
            config: cfg.clone(),
            losses,
            snapshots,
            final_metrics,
            report,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// Cross-entropy training of the teacher network.
pub fn train_teacher(cfg: &ExperimentConfig, data: &Data) -> std::result::Result<TrainOutcome, Aborted> {
    train_loop(
        cfg,
        data,
        RunKind::Teacher,
        &cfg.teacher,
        cfg.teacher_optimizer(),
        Stream::TeacherInit,
        Stream::TeacherData,
        cfg.schedule.teacher_iters,
        LossToggles::NONE,
        None,
    )
}

/// Student training against a frozen teacher with the configured loss terms.
pub fn distill(
    cfg: &ExperimentConfig,
    data: &Data,
    teacher: &mut SegModel,
) -> std::result::Result<TrainOutcome, Aborted> {
    teacher.store_mut().set_frozen(true);
    let out = train_loop(
        cfg,
        data,
        RunKind::Distill,
        &cfg.student,
        &cfg.optimizer,
        Stream::StudentInit,
        Stream::StudentData,
        cfg.schedule.iters,
        cfg.toggles,
        Some(teacher),
    );
    teacher.store_mut().set_frozen(false);
    out
}

/// Plain cross-entropy training of the student architecture, sharing the
/// student's random streams; the reference point for distillation.
pub fn train_student_baseline(cfg: &ExperimentConfig, data: &Data) -> std::result::Result<TrainOutcome, Aborted> {
    train_loop(
        cfg,
        data,
        RunKind::Distill,
        &cfg.student,
        &cfg.optimizer,
        Stream::StudentInit,
        Stream::StudentData,
        cfg.schedule.iters,
        LossToggles::NONE,
        None,
    )
}
