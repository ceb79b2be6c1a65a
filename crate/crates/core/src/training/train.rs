use super::augment::{apply_affine, AffineParams};
use super::losses::Extractor;
use super::model::{Model, ModelShape};
use super::params::AdamW;
use super::TrainConfig;
use crate::autodiff::Tape;
use crate::backbone::{write_bundle, MultiViewSample};
use crate::container::{Container, Dtype};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::lifting::SamplingTable;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub const CHECKPOINT_FORMAT: &str = "keyvol-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_FILE: &str = "config.json";

/// Loss terms of one sample in one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTerms {
    pub index: usize,
    /// Per view.
    pub vgg: Vec<f64>,
    /// Per view.
    pub mask: Vec<f64>,
    pub total: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean of the per-sample totals.
    pub loss: f64,
    pub samples: Vec<SampleTerms>,
    pub grad_norm: f64,
    pub wall_time: f64,
}

impl StepRecord {
    pub fn mean_mask(&self) -> f64 {
        let all: Vec<f64> = self.samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn mean_vgg(&self) -> f64 {
        let all: Vec<f64> = self.samples.iter().flat_map(|s| s.vgg.iter().copied()).collect();
        all.iter().sum::<f64>() / all.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    adam_step: u64,
    shape: ModelShape,
    extractor_seed: u64,
    last_loss: Option<f64>,
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
    pub extractor_seed: u64,
    pub last_loss: Option<f64>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_FORMAT, CHECKPOINT_VERSION);
        for (i, p) in self.model.store.iter().enumerate() {
            c.insert(&format!("param/{}", p.name), Dtype::F64, &p.value)?;
            c.insert(&format!("adam_m/{}", p.name), Dtype::F64, &self.optimizer.m[i])?;
            c.insert(&format!("adam_v/{}", p.name), Dtype::F64, &self.optimizer.v[i])?;
        }
        let meta = CheckpointMeta {
            step: self.step,
            adam_step: self.optimizer.step,
            shape: self.model.shape.clone(),
            extractor_seed: self.extractor_seed,
            last_loss: self.last_loss,
        };
        c.set_metadata(serde_json::to_value(meta).expect("checkpoint metadata serializes"));
        let config = serde_json::to_string_pretty(&self.model.config).expect("config serializes");
        c.put_file(CONFIG_FILE, config.into_bytes());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.check_format(CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        let meta: CheckpointMeta = serde_json::from_value(c.metadata().clone())
            .map_err(|e| Error::invalid("checkpoint metadata", e.to_string()))?;
        let config = TrainConfig::from_json(
            std::str::from_utf8(c.file(CONFIG_FILE)?).map_err(|e| Error::invalid(CONFIG_FILE, e.to_string()))?,
        )?;
        let mut model = Model::new(&config, meta.shape)?;
        let mut optimizer = AdamW::new(&model.store, &config);
        optimizer.step = meta.adam_step;
        for i in 0..model.store.len() {
            let p = model.store.get(i);
            let (name, shape) = (p.name.clone(), p.value.shape().to_vec());
            *model.store.value_mut(i) = c.get_shaped(&format!("param/{name}"), &shape)?;
            optimizer.m[i] = c.get_shaped(&format!("adam_m/{name}"), &shape)?;
            optimizer.v[i] = c.get_shaped(&format!("adam_v/{name}"), &shape)?;
        }
        Ok(Self {
            model,
            optimizer,
            step: meta.step,
            extractor_seed: meta.extractor_seed,
            last_loss: meta.last_loss,
        })
    }

    /// Save as a single tar archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_container()?.write_tar(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_tar(path)?)
    }
}

/// Sampling tables keyed by camera rig.
#[derive(Default)]
pub struct TableCache {
    entries: Vec<(CameraRig, Arc<SamplingTable>)>,
}

impl TableCache {
    pub fn get(&mut self, rig: &CameraRig, model: &Model) -> Arc<SamplingTable> {
        if let Some((_, t)) = self.entries.iter().find(|(r, _)| r == rig) {
            return Arc::clone(t);
        }
        let t = Arc::new(SamplingTable::new(rig, &model.grid()));
        self.entries.push((rig.clone(), Arc::clone(&t)));
        t
    }
}

pub struct Trainer {
    pub checkpoint: Checkpoint,
    extractor: Extractor,
    samples: Vec<MultiViewSample>,
    tables: TableCache,
    /// Where a failing batch is written.
    pub dump_dir: Option<PathBuf>,
}

fn prepare(samples: &[MultiViewSample], config: &TrainConfig) -> Result<Vec<MultiViewSample>> {
    if samples.is_empty() {
        return Err(Error::invalid("dataset", "no training samples"));
    }
    samples
        .iter()
        .map(|s| {
            if s.views() < config.views {
                return Err(Error::Config(format!(
                    "config asks for {} views, sample has {}",
                    config.views,
                    s.views()
                )));
            }
            s.features()?;
            s.truncated(config.views)
        })
        .collect()
}

impl Trainer {
    pub fn new(config: &TrainConfig, samples: &[MultiViewSample]) -> Result<Self> {
        config.validate()?;
        let samples = prepare(samples, config)?;
        let shape = ModelShape::of(&samples[0])?;
        let model = Model::new(config, shape)?;
        let optimizer = AdamW::new(&model.store, config);
        let extractor_seed = rng::derive_seed(config.seed, &[rng::tag::EXTRACTOR]);
        Ok(Self {
            checkpoint: Checkpoint {
                model,
                optimizer,
                step: 0,
                extractor_seed,
                last_loss: None,
            },
            extractor: Extractor::random(extractor_seed),
            samples,
            tables: TableCache::default(),
            dump_dir: None,
        })
    }

    pub fn resume(checkpoint: Checkpoint, samples: &[MultiViewSample]) -> Result<Self> {
        let samples = prepare(samples, &checkpoint.model.config)?;
        checkpoint.model.shape.check(&samples[0])?;
        Ok(Self {
            extractor: Extractor::random(checkpoint.extractor_seed),
            checkpoint,
            samples,
            tables: TableCache::default(),
            dump_dir: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.checkpoint.model
    }

    pub fn step_count(&self) -> u64 {
        self.checkpoint.step
    }

    /// One optimizer step on a batch drawn from the step's own random
    /// stream.
    pub fn step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.checkpoint.step + 1;
        let cfg = self.checkpoint.model.config.clone();
        let mut r = rng::stream(cfg.seed, &[rng::tag::STEP, step]);
        let batch: Vec<(usize, AffineParams)> = (0..cfg.batch_size)
            .map(|_| {
                let i = r.random_range(0..self.samples.len());
                let (h, w) = self.samples[i].image_size();
                (i, AffineParams::sample(&mut r, &cfg.augment, (h, w)))
            })
            .collect();

        let model = &self.checkpoint.model;
        let mut grads: Vec<Tensor> = model.store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let mut terms = Vec::with_capacity(batch.len());
        let inv_b = 1.0 / batch.len() as f64;
        for &(i, aug) in &batch {
            let sample = &self.samples[i];
            let (h, w) = sample.image_size();
            let input = Tensor::new([3, h, w], sample.images.slab(0).to_vec());
            let appearance = apply_affine(&input, &aug);
            let table = self.tables.get(&sample.rig, model);
            let mut tape = Tape::new();
            let vars = model.store.bind(&mut tape, true);
            let fwd = model.loss_forward(&mut tape, &vars, sample, &table, &appearance, &self.extractor)?;
            let total = tape.value(fwd.total).item();
            let vgg: Vec<f64> = fwd.views.iter().map(|v| tape.value(v.vgg).item()).collect();
            let mask: Vec<f64> = fwd.views.iter().map(|v| tape.value(v.mask).item()).collect();
            if !total.is_finite() {
                return Err(self.non_finite("loss", step, &batch));
            }
            let g = tape.backward(fwd.total);
            for (acc, gi) in grads.iter_mut().zip(model.store.gradients(&g, &vars)) {
                acc.axpy(inv_b, &gi);
            }
            terms.push(SampleTerms {
                index: i,
                vgg,
                mask,
                total,
            });
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(self.non_finite("gradient", step, &batch));
        }
        let ck = &mut self.checkpoint;
        let grad_norm = ck.optimizer.update(&mut ck.model.store, &mut grads);
        let loss = terms.iter().map(|t| t.total).sum::<f64>() * inv_b;
        ck.step = step;
        ck.last_loss = Some(loss);
        Ok(StepRecord {
            step,
            loss,
            samples: terms,
            grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    fn non_finite(&self, what: &str, step: u64, batch: &[(usize, AffineParams)]) -> Error {
        let dump = self.dump_dir.as_ref().map(|d| d.join(format!("nonfinite_step_{step:06}")));
        if let Some(dir) = &dump {
            for (b, &(i, aug)) in batch.iter().enumerate() {
                let _ = write_bundle(&self.samples[i], &dir.join(format!("batch_{b}_sample_{i}")));
                let _ = std::fs::write(
                    dir.join(format!("batch_{b}_augment.json")),
                    format!(
                        "{{\"rotation_deg\": {}, \"translation\": [{}, {}], \"scale\": {}}}\n",
                        aug.rotation_deg, aug.translation[0], aug.translation[1], aug.scale
                    ),
                );
            }
        }
        Error::NonFinite {
            what: what.into(),
            step,
            dump,
        }
    }

    /// Train until `last_step`, writing one JSON line per step to `log` and
    /// a checkpoint every `checkpoint_every` steps into `checkpoint_dir`.
    pub fn run(
        &mut self,
        last_step: u64,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        while self.checkpoint.step < last_step {
            let rec = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
            let every = self.checkpoint.model.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && rec.step % every == 0 {
                    self.checkpoint.save(&dir.join(format!("step_{:06}.tar", rec.step)))?;
                }
            }
            if rec.step % 100 == 0 {
                log::info!("step {} loss {:.5} mask {:.5}", rec.step, rec.loss, rec.mean_mask());
            }
            on_step(&rec);
        }
        Ok(())
    }
}

/// Forward-only keypoint prediction, `[N, 3]`.
pub fn predict_keypoints(model: &Model, sample: &MultiViewSample, tables: &mut TableCache) -> Result<Tensor> {
    let k = model.config.views.min(sample.views());
    let sample = sample.truncated(k)?;
    let table = tables.get(&sample.rig, model);
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape, false);
    let kp = model.keypoints_forward(&mut tape, &vars, &sample, &table)?;
    Ok(tape.value(kp).clone())
}
