//! Optimisation loop, learning-rate schedule, checkpointing and inference.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{snapshot, Checkpoint};
use crate::config::Config;
use crate::data::{augment, load_dataset, Batch, DatasetSpec, Sample};
use crate::error::{io as io_err, Error, Result};
use crate::graph::{apply_buffer_updates, Graph, Mode};
use crate::io;
use crate::model::Model;
use crate::ops::resize_bilinear;
use crate::params::{rng_from_seed, ParamGroup, ParamKind, ParamStore};
use crate::supervision::total_loss;
use crate::synthetic;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Adam with bias correction and no weight decay. Moments are kept for
/// trainable parameters only, indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = |store: &ParamStore<f32>| {
            store
                .entries()
                .map(|(_, e)| (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape())))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// One update. Parameters without a gradient keep their value but still
    /// see their moments decay.
    pub fn update(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &crate::graph::Gradients<f32>,
        lr_encoder: f64,
        lr_decoder: f64,
    ) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable().map(|(id, e)| (id, e.group)).collect();
        for (id, group) in ids {
            let lr = match group {
                ParamGroup::Encoder => lr_encoder,
                ParamGroup::Decoder => lr_decoder,
            };
            let i = id.index();
            let (m, v) = (
                self.m[i].as_mut().expect("trainable moment"),
                self.v[i].as_mut().expect("trainable moment"),
            );
            let g = grads.param(id);
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| g.data()[j] as f64);
                let mj = b1 * m.data()[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v.data()[j] as f64 + (1.0 - b2) * gj * gj;
                m.data_mut()[j] = mj as f32;
                v.data_mut()[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                w[j] = (w[j] as f64 - update) as f32;
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based index of the completed epoch.
    pub epoch: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    /// Batch mean of the total objective.
    pub loss_total: f64,
    /// Batch means of the individual terms.
    pub loss_terms: BTreeMap<String, f64>,
    /// Mean absolute error of the final saliency during the training passes.
    pub train_mae: f64,
}

/// Loads the configured training set (synthetic shapes or a dataset root).
pub fn load_training_data(cfg: &Config) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    if d.synthetic > 0 {
        return synthetic::shapes(d.synthetic, d.height, d.width, cfg.train.seed, d.contour_kernel);
    }
    if d.root.as_os_str().is_empty() {
        return Err(Error::Config("set data.root or data.synthetic".into()));
    }
    let mut spec = DatasetSpec::from_root(&d.root);
    spec.resize_to = (d.height, d.width);
    spec.augment = d.augment;
    spec.contour_kernel = d.contour_kernel;
    load_dataset(&spec)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order of a zero-based epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(mix(seed, epoch as u64, u64::MAX)));
    order
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::initialise(&config.model, config.train.seed)?;
        let adam = Adam::new(&store);
        Ok(Self {
            config,
            model,
            store,
            adam,
            epoch: 0,
        })
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::<f32>::load(path)?;
        let (model, mut store) = Model::new(&ck.config.model, ck.config.train.seed)?;
        ck.restore_params(&mut store, path)?;
        let mut adam = Adam::new(&store);
        adam.step = ck.step;
        for (id, e) in store.trainable() {
            let missing = || Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing optimiser state for {}", e.name),
            };
            adam.m[id.index()] = Some(ck.adam_m.get(&e.name).cloned().ok_or_else(missing)?);
            adam.v[id.index()] = Some(ck.adam_v.get(&e.name).cloned().ok_or_else(missing)?);
        }
        Ok(Self {
            config: ck.config,
            model,
            store,
            adam,
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for (id, e) in self.store.trainable() {
            adam_m.insert(e.name.clone(), self.adam.m[id.index()].clone().expect("moment"));
            adam_v.insert(e.name.clone(), self.adam.v[id.index()].clone().expect("moment"));
        }
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.adam.step,
            params: snapshot(&self.store),
            adam_m,
            adam_v,
        }
    }

    /// Forward, backward and one optimiser update on a batch. Returns the
    /// objective, its terms and the batch MAE of the final saliency.
    pub fn step(&mut self, batch: &Batch, lrs: (f64, f64)) -> Result<(f64, BTreeMap<String, f64>, f64)> {
        let (value, terms, mae, grads, updates) = {
            let g = Graph::new(&self.store, Mode::Train);
            let x = g.input(batch.images.clone());
            let out = self.model.forward(&g, &x)?;
            let sup = total_loss(
                &g,
                &out,
                &batch.saliency,
                Some(&batch.contour),
                &self.config.model,
                &self.config.loss,
            )?;
            let value = sup.value();
            if !value.is_finite() || sup.terms.values().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: 0,
                    ids: batch.ids.clone(),
                });
            }
            let prob = g.sigmoid(&out.final_sal);
            let mae = crate::metrics::mae(prob.value().data(), batch.saliency.data())?;
            let grads = g.backward(&sup.total)?;
            (value, sup.terms, mae, grads, g.take_buffer_updates())
        };
        apply_buffer_updates(&mut self.store, updates);
        self.adam.update(&mut self.store, &grads, lrs.0, lrs.1);
        Ok((value, terms, mae))
    }

    /// Runs the next epoch over `data`.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let t = &self.config.train;
        let (seed, bs, do_aug) = (t.seed, t.batch_size, self.config.data.augment);
        let lrs = t.learning_rates(self.epoch);
        let order = epoch_order(seed, self.epoch, data.len());
        let mut total = 0.0;
        let mut mae = 0.0;
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let batches: Vec<&[usize]> = order.chunks(bs).collect();
        for (b, idx) in batches.iter().enumerate() {
            let samples: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if do_aug {
                        augment(&data[i], mix(seed, self.epoch as u64, i as u64))
                    } else {
                        data[i].clone()
                    }
                })
                .collect();
            let batch = Batch::from_samples(&samples)?;
            let (v, t, m) = self.step(&batch, lrs).map_err(|e| match e {
                Error::NonFiniteLoss { epoch, ids, .. } => Error::NonFiniteLoss { epoch, batch: b, ids },
                other => other,
            })?;
            total += v;
            mae += m;
            for (k, v) in t {
                *terms.entry(k).or_insert(0.0) += v;
            }
        }
        let n = batches.len() as f64;
        terms.values_mut().for_each(|v| *v /= n);
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            lr_encoder: lrs.0,
            lr_decoder: lrs.1,
            loss_total: total / n,
            loss_terms: terms,
            train_mae: mae / n,
        })
    }

    /// Trains until `train.epochs` epochs are complete. With `out_dir`, the
    /// checkpoint is rewritten and a log line appended after every epoch.
    pub fn run(
        &mut self,
        data: &[Sample],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        self.run_until(self.config.train.epochs, data, out_dir, &mut on_epoch)
    }

    pub fn run_until(
        &mut self,
        epochs: usize,
        data: &[Sample],
        out_dir: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            if self.epoch == 0 {
                let log = dir.join(LOG_FILE);
                std::fs::write(&log, b"").map_err(|e| io_err(&log, e))?;
            }
        }
        let mut logs = Vec::new();
        while self.epoch < epochs {
            let log = self.train_epoch(data)?;
            if let Some(dir) = out_dir {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                append_log(&dir.join(LOG_FILE), &log)?;
            }
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let line = serde_json::to_string(log).expect("log serialises");
    writeln!(f, "{line}").map_err(|e| io_err(path, e))
}

/// A trained model ready for prediction.
pub struct Predictor {
    pub config: Config,
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Predictor {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let ck = Checkpoint::<f32>::load(checkpoint)?;
        let (model, mut store) = Model::new(&ck.config.model, ck.config.train.seed)?;
        ck.restore_params(&mut store, checkpoint)?;
        Ok(Self {
            config: ck.config,
            model,
            store,
        })
    }

    /// Saliency and contour probabilities for an image of any size: resized to
    /// the model resolution, predicted, and resized back.
    pub fn predict_image(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let [_, _, h, w] = image.shape();
        let (mh, mw) = (self.config.data.height, self.config.data.width);
        let input = resize_bilinear(image, mh, mw)?;
        let (sal, ctr) = self.model.predict(&self.store, &input)?;
        Ok((resize_bilinear(&sal, h, w)?, resize_bilinear(&ctr, h, w)?))
    }

    /// Writes `<out>/<stem>.png` (and `<out>/<stem>_contour.png`) for an image
    /// file or every image in a directory.
    pub fn infer_path(&self, input: &Path, out_dir: &Path, contours: bool) -> Result<Vec<PathBuf>> {
        let inputs = if input.is_dir() {
            io::list_files(input, crate::data::IMAGE_EXTENSIONS)?
        } else {
            vec![input.to_path_buf()]
        };
        std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let mut written = Vec::new();
        for path in inputs {
            let image = io::read_rgb(&path)?;
            let (sal, ctr) = self.predict_image(&image)?;
            let stem = io::stem(&path);
            let out = out_dir.join(format!("{stem}.png"));
            io::write_gray_png(&out, &sal)?;
            written.push(out);
            if contours {
                let out = out_dir.join(format!("{stem}_contour.png"));
                io::write_gray_png(&out, &ctr)?;
                written.push(out);
            }
        }
        Ok(written)
    }
}
