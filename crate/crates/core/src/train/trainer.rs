//! The training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{build_encoder, fuse, ClipEncoder, ClipFeature};
use crate::data::{Dataset, GtHeatmap, Sample};
use crate::error::{Error, Result};
use crate::losses::{batch_objective, SampleOutputs};
use crate::model::{OutputGrads, PoseModel, TrainTrace};
use crate::prompt::{sample_prompt, Prompt};

use super::checkpoint::{meta_for, Checkpoint, RngState};
use super::config::{PromptPolicy, TrainConfig};
use super::eval::{evaluate_model, EvalReport};
use super::optim::{adam_step, AdamState};

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub heat: f64,
    pub pose: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PoseModel,
    pub log: Vec<LossRecord>,
    /// Validation EPE after each completed epoch.
    pub val_history: Vec<EvalReport>,
    pub best_val_epe: Option<f64>,
    pub checkpoint: Checkpoint,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: PoseModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    encoder: Box<dyn ClipEncoder>,
    image_features: Vec<Option<ClipFeature>>,
    epoch: usize,
    step: u64,
    best_val: Option<f64>,
    out_dir: Option<PathBuf>,
    log: Vec<LossRecord>,
    val_history: Vec<EvalReport>,
}

impl Trainer {
    /// Fresh run. Artifacts go to `config.checkpoint_dir` when `write` is set.
    pub fn new(cfg: TrainConfig, write: bool) -> Result<Self> {
        cfg.validate()?;
        let encoder = build_encoder(&cfg.clip)?;
        Self::with_encoder(cfg, encoder, write)
    }

    pub fn with_encoder(cfg: TrainConfig, encoder: Box<dyn ClipEncoder>, write: bool) -> Result<Self> {
        cfg.validate()?;
        let model = PoseModel::new(cfg.arch.clone(), cfg.seed)?;
        let adam = AdamState::new(model.params.len());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e5f_726e);
        let out_dir = write.then(|| cfg.checkpoint_dir.clone());
        Ok(Self {
            cfg,
            model,
            adam,
            rng,
            encoder,
            image_features: Vec::new(),
            epoch: 0,
            step: 0,
            best_val: None,
            out_dir,
            log: Vec::new(),
            val_history: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by a previous run. `cfg` must
    /// describe the same architecture; its epoch count may be larger.
    pub fn resume(cfg: TrainConfig, checkpoint: &Checkpoint, write: bool) -> Result<Self> {
        let mut t = Self::new(cfg, write)?;
        let fingerprint = t.model.net.layout().fingerprint();
        if checkpoint.meta.arch_fingerprint != fingerprint {
            return Err(Error::Checkpoint("checkpoint architecture differs from the config".into()));
        }
        let state = checkpoint.resume_state()?;
        let rng = checkpoint.meta.rng.ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state".into()))?;
        t.model.params = state.params;
        t.adam = state.adam;
        t.rng = ChaCha8Rng::from_seed(rng.seed);
        t.rng.set_stream(rng.stream);
        t.rng.set_word_pos(rng.word_pos);
        t.epoch = checkpoint.meta.epoch;
        t.step = checkpoint.meta.step;
        t.best_val = checkpoint.meta.val_epe_mm;
        if let Some(dir) = &t.out_dir {
            truncate_log(&dir.join(LOG_FILE), t.step)?;
        }
        Ok(t)
    }

    pub fn model(&self) -> &PoseModel {
        &self.model
    }

    pub fn encoder(&self) -> &dyn ClipEncoder {
        self.encoder.as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    fn image_feature(&mut self, idx: usize, sample: &Sample) -> Result<ClipFeature> {
        if self.image_features.len() <= idx {
            self.image_features.resize(idx + 1, None);
        }
        if let Some(f) = &self.image_features[idx] {
            return Ok(f.clone());
        }
        let f = self.encoder.encode_image(&sample.image)?;
        self.image_features[idx] = Some(f.clone());
        Ok(f)
    }

    fn draw_prompt(&mut self) -> Prompt {
        sample_prompt(self.rng.gen())
    }

    /// One optimizer update on the given dataset indices.
    pub fn train_step(
        &mut self,
        data: &Dataset,
        batch: &[usize],
        shared_prompt: Option<&Prompt>,
    ) -> Result<LossRecord> {
        let samples = batch.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?;
        let sigma = self.cfg.heatmap_sigma;
        let gts = samples.iter().map(|s| s.gt_heatmap(sigma)).collect::<Result<Vec<GtHeatmap>>>()?;

        let clip: Vec<Option<ClipFeature>> = if self.cfg.uses_branch2() {
            let batch_prompt = match (self.cfg.prompt_policy, shared_prompt) {
                (PromptPolicy::PerSample, _) => None,
                (_, Some(p)) => Some(p.clone()),
                (_, None) => Some(self.draw_prompt()),
            };
            let mut out = Vec::with_capacity(batch.len());
            for (&i, s) in batch.iter().zip(&samples) {
                let prompt = match &batch_prompt {
                    Some(p) => p.clone(),
                    None => self.draw_prompt(),
                };
                let img = self.image_feature(i, s)?;
                let txt = self.encoder.encode_text(&prompt.text)?;
                out.push(Some(fuse(&img, &txt, self.cfg.clip.fusion())?));
            }
            out
        } else {
            vec![None; batch.len()]
        };

        let net = &self.model.net;
        let params = &self.model.params;
        let traces = samples
            .par_iter()
            .zip(clip.par_iter())
            .map(|(s, c)| net.forward_train(params, &s.image, c.as_ref()))
            .collect::<Result<Vec<TrainTrace>>>()?;
        let gt_poses: Vec<Vec<f64>> = samples.iter().map(|s| s.joints3d.flat()).collect();
        let outputs: Vec<SampleOutputs> = traces
            .iter()
            .zip(&gts)
            .zip(&gt_poses)
            .map(|((t, g), gp)| SampleOutputs {
                heatmap: t.heatmap(),
                gt_heatmap: g.heatmap.values(),
                visible: &g.visible,
                pose: &t.pose,
                gt_pose: gp,
                encodings: t.encodings.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
            })
            .collect();
        let loss = batch_objective(&outputs, &self.cfg.loss)?;
        let record =
            LossRecord { step: self.step + 1, heat: loss.heat, pose: loss.pose, con: loss.con, total: loss.total };
        if !loss.total.is_finite() {
            return Err(self.halt(batch, &record, "loss"));
        }

        let n = params.len();
        let chunk = self.cfg.grad_chunk;
        let has_enc = !loss.plain_grads.is_empty();
        let partial: Vec<Vec<f64>> = (0..traces.len())
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|ids| {
                let mut g = vec![0.0; n];
                for &k in ids {
                    let d = OutputGrads {
                        heatmap: loss.heatmap_grads[k].clone(),
                        pose: loss.pose_grads[k].clone(),
                        plain: has_enc.then(|| loss.plain_grads[k].clone()),
                        fused: has_enc.then(|| loss.fused_grads[k].clone()),
                    };
                    net.backward_train(params, &traces[k], &d, &mut g);
                }
                g
            })
            .collect();
        let mut grads = vec![0.0; n];
        for g in &partial {
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(self.halt(batch, &record, "gradient"));
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam, &self.cfg.adam())?;
        self.step += 1;
        self.log.push(record);
        if let Some(dir) = &self.out_dir {
            append_log(&dir.join(LOG_FILE), &record)?;
        }
        Ok(record)
    }

    /// Writes a diagnostic snapshot of the pre-update state and returns the
    /// error that stops training.
    fn halt(&self, batch: &[usize], record: &LossRecord, what: &str) -> Error {
        let mut msg = format!("non-finite {what} at step {}: {record:?}", record.step);
        if let Some(dir) = &self.out_dir {
            let base = dir.join(format!("nonfinite_step{}", record.step));
            let ck = Checkpoint::from_model(&self.model, self.meta(), Some(&self.adam));
            let info = serde_json::json!({ "step": record.step, "batch": batch, "loss": record, "what": what });
            let saved = fs::create_dir_all(dir)
                .map_err(Error::from)
                .and_then(|_| ck.save(&base.with_extension("ckpt")))
                .and_then(|_| fs::write(base.with_extension("json"), info.to_string()).map_err(Error::from));
            match saved {
                Ok(()) => msg.push_str(&format!("; snapshot written to {}", base.display())),
                Err(e) => msg.push_str(&format!("; snapshot failed: {e}")),
            }
        }
        Error::NonFinite(msg)
    }

    fn meta(&self) -> super::checkpoint::CheckpointMeta {
        let mut meta = meta_for(&self.model);
        meta.train_config = Some(self.cfg.clone());
        meta.epoch = self.epoch;
        meta.step = self.step;
        meta.adam_t = self.adam.t;
        meta.rng = Some(RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        });
        meta.val_epe_mm = self.best_val;
        meta.clip_checksum = Some(self.encoder.checksum());
        meta
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.meta(), Some(&self.adam))
    }

    fn min_batch(&self) -> usize {
        if self.cfg.uses_branch2() {
            2
        } else {
            1
        }
    }

    fn steps_exhausted(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m as u64)
    }

    /// Runs one epoch: a seeded shuffle, then one update per batch.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let epoch_prompt =
            (self.cfg.uses_branch2() && self.cfg.prompt_policy == PromptPolicy::PerEpoch).then(|| self.draw_prompt());
        for batch in order.chunks(self.cfg.batch_size) {
            if batch.len() < self.min_batch() {
                continue;
            }
            if self.steps_exhausted() {
                break;
            }
            self.train_step(data, batch, epoch_prompt.as_ref())?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until the configured epoch count, evaluating on `val` and
    /// writing checkpoints after every epoch.
    pub fn run(mut self, data: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training dataset is empty".into()));
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir)?;
            let log = dir.join(LOG_FILE);
            if self.step == 0 || !log.exists() {
                File::create(&log)?.write_all(b"step,heat,pose,con,total\n")?;
            }
        }
        while self.epoch < self.cfg.epochs && !self.steps_exhausted() {
            self.run_epoch(data)?;
            let mut improved = false;
            if let Some(val) = val.filter(|v| !v.is_empty()) {
                let report = evaluate_model(&self.model, val)?;
                log::info!("epoch {} step {} val EPE {:.3} mm", self.epoch, self.step, report.epe_mm);
                if self.best_val.map_or(true, |b| report.epe_mm < b) {
                    self.best_val = Some(report.epe_mm);
                    improved = true;
                }
                self.val_history.push(report);
            } else if let Some(last) = self.log.last() {
                log::info!("epoch {} step {} loss {:.6}", self.epoch, self.step, last.total);
            }
            if let Some(dir) = self.out_dir.clone() {
                let ck = self.checkpoint();
                ck.save(&dir.join(LAST_CHECKPOINT))?;
                Checkpoint::from_model(&self.model, ck.meta.clone(), None)
                    .save(&dir.join(format!("epoch_{:03}.ckpt", self.epoch)))?;
                if improved {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        let checkpoint = self.checkpoint();
        Ok(TrainOutcome {
            model: self.model,
            log: self.log,
            val_history: self.val_history,
            best_val_epe: self.best_val,
            checkpoint,
        })
    }
}

fn append_log(path: &Path, r: &LossRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{},{},{},{},{}", r.step, r.heat, r.pose, r.con, r.total)?;
    Ok(())
}

/// Drops log rows written after the checkpoint a run resumes from.
fn truncate_log(path: &Path, last_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || step.is_some_and(|s| s <= last_step) {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Trains from scratch on `data`, writing artifacts to the configured
/// checkpoint directory.
pub fn train(cfg: &TrainConfig, data: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome> {
    Trainer::new(cfg.clone(), true)?.run(data, val)
}

/// Reads a loss log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
