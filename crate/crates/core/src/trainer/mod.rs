//! Training loop, loss wiring per variant, checkpoints and checkpoint
//! evaluation.

pub mod checkpoint;
pub mod config;
pub mod schedule;
pub mod sgd;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_path, Checkpoint, Manifest};
pub use config::{DataConfig, LossSection, ModelSection, SamplerSection, TrainConfig};
pub use schedule::{Milestone, TrainSchedule};
pub use sgd::Sgd;

use crate::data::{augment, epoch_batches, make_synthetic, stream_seed, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{cmc_map, distance_matrix, extract_embeddings, EvalProtocol, Meta, MetricsReport, RankingResult};
use crate::losses::{
    batch_hard_triplet, mse_supervision, softmax_loss, sum_scalars, total_loss, LossParts, LossValues, MseConfig,
    Reduction, TripletBatchSpec,
};
use crate::network::{CgpnModel, ModelConfig, ModelOutput, Role};
use crate::variant::{Variant, VariantConfig};

/// Stream tag for augmentation randomness, kept apart from the sampler's.
const AUGMENT_STREAM: u64 = 0xA5;

/// Subdirectories of a run's output directory.
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";
pub const GRID_DIR: &str = "grids";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Look up the dataset described by the config.
pub fn open_dataset(data: &DataConfig) -> Result<Dataset> {
    match (&data.root, &data.synthetic) {
        (Some(root), None) => {
            if !root.is_dir() {
                return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
            }
            Dataset::open(root)
        }
        (None, Some(spec)) => make_synthetic(spec),
        _ => Err(Error::Config("set exactly one of data.root and data.synthetic".into())),
    }
}

/// Loss terms of one forward pass, wired for the model's variant.
///
/// Softmax covers every feature head. The triplet term covers the global
/// features (the local ones for a model without globals, or in addition
/// when `triplet_on_locals` is set) and reads pooled features. The MSE term
/// exists only for supervised global parts.
pub fn compute_losses(
    out: &ModelOutput,
    vconfig: &VariantConfig,
    labels: &[u32],
    spec: &TripletBatchSpec,
    options: &LossSection,
) -> Result<LossParts> {
    if out.logits.is_empty() {
        return Err(Error::InvalidArgument("losses need a training-mode forward pass".into()));
    }
    let softmax = out
        .logits
        .iter()
        .map(|l| softmax_loss(l, labels, Reduction::Mean))
        .collect::<Result<Vec<_>>>()?;
    let triplet = out
        .bundle
        .census
        .iter()
        .zip(&out.pooled)
        .filter(|(f, _)| match f.role {
            Role::Global => true,
            Role::Local => options.triplet_on_locals || !vconfig.has_global,
        })
        .map(|(_, p)| batch_hard_triplet(p, labels, spec, Reduction::Mean))
        .collect::<Result<Vec<_>>>()?;
    let mse = if vconfig.mse_enabled() {
        supervision_mse(out, options.mse_per_element)?
    } else {
        None
    };
    Ok(LossParts {
        softmax: sum_scalars(&softmax)?,
        triplet: sum_scalars(&triplet)?,
        mse,
    })
}

/// Batch-mean distance between the global features and their part targets,
/// or `None` for a model without global parts. Computed whether or not the
/// variant trains on it.
pub fn supervision_mse(out: &ModelOutput, per_element: bool) -> Result<Option<Tensor>> {
    if out.supervision.is_empty() {
        return Ok(None);
    }
    let globals: Vec<Vec<Tensor>> = out.supervision.iter().map(|s| vec![s.f_g1.clone(), s.f_g2.clone()]).collect();
    let targets: Vec<Vec<Tensor>> = out.supervision.iter().map(|s| vec![s.f_gl1.clone(), s.f_gl2.clone()]).collect();
    let mse = mse_supervision(&globals, &targets, &MseConfig::default(), Reduction::Mean)?;
    if per_element {
        let len = globals[0][0].dims().last().copied().unwrap_or(1);
        Ok(Some((mse / len as f64)?))
    } else {
        Ok(Some(mse))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// One-based index of the step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossValues,
}

/// First line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub variant: Variant,
    pub mse_enabled: bool,
    pub features: usize,
    pub embedding_dim: usize,
    pub seed: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    model: CgpnModel,
    sgd: Sgd,
    class_ids: Vec<i64>,
    class_of: BTreeMap<i64, u32>,
    step: usize,
    epoch: usize,
    batch_in_epoch: usize,
    plan: Option<Vec<Vec<usize>>>,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let dataset = open_dataset(&config.data)?;
        Self::with_dataset(config, dataset)
    }

    /// Start a fresh run on an already loaded dataset.
    pub fn with_dataset(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let class_ids = dataset.index.train_ids();
        let spec = config.triplet_spec();
        if class_ids.len() < spec.p {
            return Err(Error::Dataset(format!(
                "{} train identities cannot fill P = {} identities per batch",
                class_ids.len(),
                spec.p
            )));
        }
        let mut model_cfg = ModelConfig::new(config.variant, config.model.backbone(), class_ids.len());
        model_cfg.reduced_dim = config.model.reduced_dim;
        model_cfg.heads = config.model.heads;
        let model = match &config.model.pretrained {
            Some(path) => CgpnModel::with_pretrained(model_cfg, config.seed, path)?,
            None => CgpnModel::new(model_cfg, config.seed)?,
        };
        let sgd = Sgd::new(config.schedule.momentum, config.schedule.weight_decay);
        let class_of = class_ids.iter().enumerate().map(|(i, &p)| (p, i as u32)).collect();
        Ok(Self {
            config,
            dataset,
            model,
            sgd,
            class_ids,
            class_of,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            plan: None,
            log: None,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(config: TrainConfig, dataset: Dataset, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        ckpt.check_census(path)?;
        let mut t = Self::with_dataset(config, dataset)?;
        let m = &ckpt.manifest;
        if m.model != *t.model.config() {
            return Err(Error::Compatibility(format!(
                "{} was written for a different model ({} with {} classes, {} features); the config asks for {} with {} classes, {} features",
                path.display(),
                m.variant,
                m.model.num_classes,
                m.census.len(),
                t.config.variant,
                t.model.config().num_classes,
                t.model.census().len()
            )));
        }
        if m.class_ids != t.class_ids {
            return Err(Error::Compatibility(format!(
                "{}: train identities differ from the checkpoint's",
                path.display()
            )));
        }
        checkpoint::load_params(&t.model, &ckpt.params, path)?;
        t.sgd.set_buffers(ckpt.momentum);
        t.step = m.step;
        t.epoch = m.epoch;
        t.batch_in_epoch = m.batch_in_epoch;
        Ok(t)
    }

    pub fn model(&self) -> &CgpnModel {
        &self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.sgd
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn class_ids(&self) -> &[i64] {
        &self.class_ids
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            variant: self.config.variant,
            model: self.model.config().clone(),
            census: self.model.census().to_vec(),
            step: self.step,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            seed: self.config.seed,
            class_ids: self.class_ids.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint {
            manifest: self.manifest(),
            params: self.model.store().snapshot()?,
            momentum: self.sgd.buffers().clone(),
        }
        .write(path)
    }

    fn finished(&self) -> bool {
        self.epoch >= self.config.schedule.epochs || self.config.schedule.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Record indices of the next batch, advancing the epoch when needed.
    fn next_batch(&mut self) -> Result<Option<Vec<usize>>> {
        loop {
            if self.finished() {
                return Ok(None);
            }
            if self.plan.is_none() {
                let plan = epoch_batches(&self.dataset.index, &self.config.triplet_spec(), self.config.seed, self.epoch)?;
                if plan.is_empty() {
                    return Err(Error::Dataset("an epoch yields no complete P x K batch".into()));
                }
                self.plan = Some(plan);
            }
            let plan = self.plan.as_ref().unwrap();
            if let Some(batch) = plan.get(self.batch_in_epoch) {
                return Ok(Some(batch.clone()));
            }
            self.plan = None;
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
    }

    /// Augmented images and class labels of a batch.
    pub fn load_batch(&self, batch: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let mut images = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for (slot, &i) in batch.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                self.config.seed,
                &[AUGMENT_STREAM, self.step as u64, slot as u64],
            ));
            images.push(augment(&self.dataset.image(i)?, true, &mut rng)?);
            let pid = self.dataset.index.records()[i].person_id;
            labels.push(self.class_of[&pid]);
        }
        Ok((Tensor::stack(&images, 0)?, labels))
    }

    /// Run one optimizer step. `None` once the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        let Some(batch) = self.next_batch()? else {
            return Ok(None);
        };
        let lr = self.config.schedule.lr_at(self.epoch)?;
        let (images, labels) = self.load_batch(&batch)?;
        let out = self.model.forward(&images, true)?;
        let parts = compute_losses(
            &out,
            self.model.variant_config(),
            &labels,
            &self.config.triplet_spec(),
            &self.config.loss,
        )?;
        let total = total_loss(&parts)?;
        let losses = LossValues::from_parts(&parts, &total)?;
        if !losses.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("{losses:?}"),
            });
        }
        let grads = total.backward()?;
        self.sgd.step(self.model.store(), &grads, lr)?;
        self.step += 1;
        self.batch_in_epoch += 1;
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            losses,
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(Some(record))
    }

    pub fn log_header(&self) -> LogHeader {
        LogHeader {
            variant: self.config.variant,
            mse_enabled: self.model.variant_config().mse_enabled(),
            features: self.model.census().len(),
            embedding_dim: self.model.embedding_dim(),
            seed: self.config.seed,
            batch_size: self.config.triplet_spec().batch_size(),
        }
    }

    fn open_log(&mut self) -> Result<()> {
        let dir = &self.config.output_dir;
        for sub in [CHECKPOINT_DIR, REPORT_DIR, GRID_DIR] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let path = dir.join(LOG_FILE);
        let fresh = self.step == 0;
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        if fresh {
            let header = serde_json::json!({ "header": self.log_header() });
            writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
        }
        self.log = Some(w);
        Ok(())
    }

    /// Train to the end of the schedule (or `max_steps`), logging every step
    /// and checkpointing every `checkpoint_every` epochs and at the end.
    pub fn run(&mut self) -> Result<TrainSummary> {
        self.open_log()?;
        let out_dir = self.config.output_dir.clone();
        let every = self.config.checkpoint_every;
        let mut records = Vec::new();
        let mut checkpoints = Vec::new();
        log::info!(
            "training {} ({} features, {} trainable values) from step {}",
            self.config.variant,
            self.model.census().len(),
            self.model.store().num_trainable_elements(),
            self.step
        );
        while let Some(rec) = self.step()? {
            if rec.step % 10 == 1 {
                log::info!("step {} epoch {} lr {:.1e} loss {:.4}", rec.step, rec.epoch, rec.lr, rec.losses.total);
            }
            records.push(rec);
            let epoch_done = self.plan.as_ref().is_some_and(|p| self.batch_in_epoch == p.len());
            if epoch_done && every > 0 && (self.epoch + 1).is_multiple_of(every) && !self.finished_after_epoch() {
                let path = checkpoint_path(&out_dir, &format!("epoch_{:04}", self.epoch + 1));
                self.save(&path)?;
                checkpoints.push(path);
            }
        }
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        let final_checkpoint = checkpoint_path(&out_dir, "final");
        self.save(&final_checkpoint)?;
        checkpoints.push(final_checkpoint.clone());
        Ok(TrainSummary {
            records,
            checkpoints,
            final_checkpoint,
        })
    }

    fn finished_after_epoch(&self) -> bool {
        self.epoch + 1 >= self.config.schedule.epochs
    }
}

/// Which records play query and gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    #[default]
    QueryGallery,
    /// Train images against themselves, for overfitting checks.
    TrainAsBoth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub protocol: EvalProtocol,
    pub split: EvalSplit,
    pub l2_normalize: bool,
    pub batch_size: usize,
    /// Fail unless the checkpoint holds this variant.
    pub expect_variant: Option<Variant>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: EvalProtocol::default(),
            split: EvalSplit::QueryGallery,
            l2_normalize: false,
            batch_size: 16,
            expect_variant: None,
        }
    }
}

/// Query/gallery record indices and metadata for a split choice.
pub fn eval_sets(dataset: &Dataset, split: EvalSplit) -> (Vec<usize>, Vec<usize>) {
    match split {
        EvalSplit::QueryGallery => (dataset.index.split_indices(Split::Query), dataset.index.split_indices(Split::Gallery)),
        EvalSplit::TrainAsBoth => {
            let t = dataset.index.split_indices(Split::Train);
            (t.clone(), t)
        }
    }
}

pub fn metas(dataset: &Dataset, indices: &[usize]) -> Vec<Meta> {
    indices.iter().map(|&i| Meta::from(&dataset.index.records()[i])).collect()
}

/// Everything computed when a model is evaluated.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    pub query_meta: Vec<Meta>,
    pub gallery_meta: Vec<Meta>,
    pub distances: ndarray::Array2<f64>,
    pub ranking: RankingResult,
    pub report: MetricsReport,
}

pub fn evaluate_model(model: &CgpnModel, dataset: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let (query, gallery) = eval_sets(dataset, opts.split);
    let q = extract_embeddings(model, dataset, &query, opts.batch_size)?;
    let g = if opts.split == EvalSplit::TrainAsBoth {
        q.clone()
    } else {
        extract_embeddings(model, dataset, &gallery, opts.batch_size)?
    };
    let distances = distance_matrix(q.view(), g.view(), opts.l2_normalize)?;
    let query_meta = metas(dataset, &query);
    let gallery_meta = metas(dataset, &gallery);
    let ranking = cmc_map(&distances, &query_meta, &gallery_meta, &opts.protocol)?;
    let report = MetricsReport::new(&ranking, model.embedding_dim());
    Ok(Evaluation {
        query,
        gallery,
        query_meta,
        gallery_meta,
        distances,
        ranking,
        report,
    })
}

/// Load a checkpoint and score it on `dataset`.
pub fn evaluate_checkpoint(path: &Path, dataset: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let model = load_model(path, opts.expect_variant)?;
    evaluate_model(&model, dataset, opts)
}

/// Restore a model from a checkpoint, optionally checking its variant.
pub fn load_model(path: &Path, expect_variant: Option<Variant>) -> Result<CgpnModel> {
    let ckpt = Checkpoint::read(path)?;
    if let Some(v) = expect_variant {
        if v != ckpt.manifest.variant {
            let mut wanted = ckpt.manifest.model.clone();
            wanted.variant = v;
            let n = crate::network::feature_census(&wanted).map(|c| c.len()).unwrap_or(0);
            return Err(Error::Compatibility(format!(
                "{} holds {} ({} features), expected {} ({} features)",
                path.display(),
                ckpt.manifest.variant,
                ckpt.manifest.census.len(),
                v,
                n
            )));
        }
    }
    ckpt.restore(path)
}
