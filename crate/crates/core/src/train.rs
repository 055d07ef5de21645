//! Seeded training loop: per-clip augmentation, optional distillation from
//! fused teacher logits, a quantization-aware tail and JSONL metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{adir, freq_mask, freq_mixstyle, sample_rng, time_roll, DirBank};
use crate::config::RunConfig;
use crate::dataset::{assert_trainable, evaluate, load_tau_metadata, ClipRecord, EvalReport, Split, SyntheticSpec};
use crate::distill::{check_teacher_agreement, fused_batch, kd_loss, one_hot, FusionMode, FusionParams, TeacherLogits};
use crate::dsp::wav::read_wav;
use crate::dsp::{FeatureExtractor, Waveform};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, FlexiNet, Mode};
use crate::quant::container::{save_model, Model};
use crate::quant::QatState;
use crate::tensor::{FeatureMap, Tape, Tensor};

/// Labelled audio held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<ClipRecord>,
    pub waves: Vec<Waveform>,
}

impl Corpus {
    pub fn synthetic(spec: &SyntheticSpec) -> Self {
        let (records, waves) = spec.generate().into_iter().map(|c| (c.record, c.waveform)).unzip();
        Self { records, waves }
    }

    /// Reads a TAU-layout metadata file and every clip it lists.
    pub fn from_metadata(meta: &Path) -> Result<Self> {
        let records = load_tau_metadata(meta, Split::Train)?;
        let waves = records
            .iter()
            .map(|r| {
                let p = r
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Input(format!("clip '{}' has no audio path", r.clip_id)))?;
                read_wav(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records, waves })
    }

    /// The corpus a run config points at.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data.corpus {
            Some(meta) => Self::from_metadata(meta),
            None => Ok(Self::synthetic(&cfg.data.synthetic)),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Log-mel maps of every clip, in record order.
    pub fn features(&self, extractor: &FeatureExtractor) -> Result<Vec<FeatureMap>> {
        self.waves.iter().map(|w| extractor.log_mel(w)).collect()
    }
}

/// Per-clip fused teacher logits used as distillation targets.
#[derive(Clone, Debug, Default)]
pub struct TeacherTargets {
    rows: BTreeMap<String, Vec<f32>>,
}

impl TeacherTargets {
    pub fn from_fused(logits: &TeacherLogits, params: &FusionParams, records: &[&ClipRecord]) -> Result<Self> {
        let ids: Vec<&str> = records.iter().map(|r| r.clip_id.as_str()).collect();
        logits.require(&ids)?;
        let labels: Vec<usize> = records.iter().map(|r| r.scene).collect();
        check_teacher_agreement(logits, &ids, &labels);
        let fused = fused_batch(logits, &ids, params)?;
        let c = logits.num_classes();
        let rows = ids
            .iter()
            .zip(fused.data().chunks(c))
            .map(|(id, row)| (id.to_string(), row.to_vec()))
            .collect();
        Ok(Self { rows })
    }

    /// Targets per the run config's distillation section, or `None` when
    /// distillation is off.
    pub fn from_config(cfg: &RunConfig, records: &[&ClipRecord]) -> Result<Option<Self>> {
        let d = &cfg.distill;
        let params = match d.fusion {
            FusionMode::None => return Ok(None),
            _ => {
                let path = d.logits.as_ref().ok_or_else(|| Error::config("distill.logits is not set"))?;
                let logits = TeacherLogits::load(path)?;
                if let Some(k) = d.teachers {
                    if k != logits.k() {
                        return Err(Error::config(format!(
                            "distill.teachers is {k} but {} holds {} teachers",
                            path.display(),
                            logits.k()
                        )));
                    }
                }
                let params = match (d.fusion, &d.fusion_params) {
                    (FusionMode::Fitted, Some(p)) => FusionParams::load(p)?,
                    (FusionMode::Fitted, None) => {
                        return Err(Error::config("distill.fusion = \"fitted\" requires distill.fusion_params"))
                    }
                    _ => FusionParams::uniform(logits.k(), logits.num_classes()),
                };
                (logits, params)
            }
        };
        Self::from_fused(&params.0, &params.1, records).map(Some)
    }

    fn batch(&self, records: &[&ClipRecord]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        for r in records {
            let row = self
                .rows
                .get(&r.clip_id)
                .ok_or_else(|| Error::Input(format!("no teacher logits for clip '{}'", r.clip_id)))?;
            data.extend_from_slice(row);
        }
        let c = data.len() / records.len().max(1);
        Tensor::new(vec![records.len(), c], data)
    }
}

/// Adam with decoupled weight decay on conv and head weights.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(net: &FlexiNet<f32>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, net: &mut FlexiNet<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let decay = if p.name.ends_with(".weight") {
                (1.0 - lr * self.weight_decay) as f32
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w = *w * decay - step_size * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `peak` at step 0 to zero at `total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Summary of one epoch, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub label_loss: f64,
    pub kd_loss: Option<f64>,
    pub train_acc: f64,
    pub qat: bool,
    pub observers_frozen: bool,
    /// Clips convolved with a device response this epoch.
    pub adir_clips: usize,
    pub seconds: f64,
}

/// Per-step losses, kept for step-for-step comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: f64,
    pub label_loss: f64,
}

pub struct TrainOutcome {
    pub net: FlexiNet<f32>,
    pub qat: Option<QatState>,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn model(&self) -> Model {
        Model::Float {
            net: self.net.clone(),
            observers: self.qat.clone(),
        }
    }
}

/// Epoch indices at which fake quantization starts and observers freeze.
pub fn qat_schedule(cfg: &RunConfig) -> Option<(usize, usize)> {
    if !cfg.quant.enable {
        return None;
    }
    let e = cfg.train.epochs;
    let start = ((cfg.quant.start_fraction * e as f64).floor() as usize).min(e - 1);
    let freeze = ((cfg.quant.freeze_fraction * e as f64).floor() as usize).max(start + 1);
    Some((start, freeze))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains a fresh network on the training split of `corpus`.
///
/// `features` are the cached log-mel maps of every record; clips chosen
/// for impulse-response augmentation are re-extracted from their
/// convolved audio. When `out_dir` is set the resolved config, one JSON
/// line per epoch and the checkpoints are written there.
pub fn train(
    cfg: &RunConfig,
    corpus: &Corpus,
    features: &[FeatureMap],
    teacher: Option<&TeacherTargets>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.len() != corpus.records.len() {
        return Err(Error::Input(format!(
            "{} feature maps for {} records",
            features.len(),
            corpus.records.len()
        )));
    }
    let train_idx = corpus.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Input("the corpus has no training clips".into()));
    }
    let t = &cfg.train;
    let aug = &cfg.augment;
    let extractor = FeatureExtractor::new(&cfg.features)?;
    let bank = if aug.adir.enabled && aug.adir.p > 0.0 {
        DirBank::from_config(&aug.adir, t.seed)?
    } else {
        DirBank::synthetic(t.seed)
    };
    let mut net = FlexiNet::build(&cfg.arch, t.seed)?;
    let mut opt = Adam::new(&net, t.weight_decay);
    let schedule = qat_schedule(cfg);
    let mut qat: Option<QatState> = None;

    let mut metrics_file = match out_dir {
        Some(dir) => {
            cfg.write_resolved(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let batches_per_epoch = train_idx.len().div_ceil(t.batch_size);
    let total_steps = batches_per_epoch * t.epochs;
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(t.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut order = train_idx.clone();
    let max_roll = aug.max_roll(cfg.features.frames);

    for epoch in 0..t.epochs {
        let started = Instant::now();
        if let Some((start, freeze)) = schedule {
            if epoch == start {
                info!("epoch {epoch}: quantization-aware training starts");
                qat = Some(QatState::new());
            }
            if epoch == freeze {
                if let Some(q) = qat.as_mut() {
                    info!("epoch {epoch}: activation observers frozen");
                    q.frozen = true;
                }
            }
        }
        let es = epoch_seed(t.seed, epoch);
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(es));
        let (mut loss_sum, mut label_sum, mut kd_sum) = (0.0, 0.0, 0.0);
        let (mut hits, mut adir_clips) = (0usize, 0usize);
        let mut lr = 0.0;

        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let recs: Vec<&ClipRecord> = chunk.iter().map(|&i| &corpus.records[i]).collect();
            assert_trainable(&recs);
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = sample_rng(es, i as u64);
                let wave = &corpus.waves[i];
                let mut x = if aug.adir.enabled {
                    let w = adir(wave, &aug.adir, &bank, &mut rng)?;
                    if w.samples != wave.samples {
                        adir_clips += 1;
                        extractor.log_mel(&w)?
                    } else {
                        features[i].clone()
                    }
                } else {
                    features[i].clone()
                };
                if aug.roll.enabled && max_roll > 0 {
                    x = time_roll(&x, max_roll, &mut rng)?;
                }
                if aug.mask.enabled && aug.mask.max_width > 0 {
                    x = freq_mask(&x, aug.mask.max_width, &mut rng)?;
                }
                items.push(x);
            }
            let refs: Vec<&FeatureMap> = items.iter().collect();
            let mut batch = Tensor::stack(&refs)?;
            if aug.fms.enabled {
                let mut rng = sample_rng(es ^ 0xF4E5_D6C7_B8A9_0001, b as u64);
                batch = freq_mixstyle(&batch, &aug.fms, &mut rng)?;
            }
            let labels: Vec<usize> = recs.iter().map(|r| r.scene).collect();

            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let fwd = net.forward(&mut tape, x, Mode::Train, qat.as_mut())?;
            let (loss, label, kd) = match teacher {
                Some(tt) => {
                    let progress = step as f64 / total_steps.max(1) as f64;
                    let lambda = cfg.distill.kd.lambda_at(progress) as f32;
                    let l = kd_loss(
                        &mut tape,
                        fwd.logits,
                        &labels,
                        &tt.batch(&recs)?,
                        lambda,
                        cfg.distill.kd.temperature as f32,
                    )?;
                    (l.total, l.label, Some(l.kd))
                }
                None => {
                    let hard = one_hot::<f32>(&labels, cfg.arch.num_classes)?;
                    let l = tape.softmax_cross_entropy(fwd.logits, &hard)?;
                    (l, l, None)
                }
            };
            let lv = tape.value(loss).data()[0] as f64;
            let labv = tape.value(label).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Input(format!("loss became {lv} at epoch {epoch}, batch {b}")));
            }
            loss_sum += lv * recs.len() as f64;
            label_sum += labv * recs.len() as f64;
            if let Some(k) = kd {
                kd_sum += tape.value(k).data()[0] as f64 * recs.len() as f64;
            }
            let preds = argmax_rows(tape.value(fwd.logits));
            hits += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();

            let mut grads = tape.backward(loss)?;
            let g: Vec<Option<Tensor<f32>>> = fwd.params.iter().map(|&v| grads.take(v)).collect();
            lr = cosine_lr(t.learning_rate, step, total_steps);
            opt.step(&mut net, &g, lr);
            net.update_running_stats(&fwd.bn_stats);
            steps.push(StepRecord { loss: lv, label_loss: labv });
            step += 1;
        }

        let n = train_idx.len() as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / n,
            label_loss: label_sum / n,
            kd_loss: teacher.map(|_| kd_sum / n),
            train_acc: hits as f64 / n,
            qat: qat.is_some(),
            observers_frozen: qat.as_ref().is_some_and(|q| q.frozen),
            adir_clips,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {:>3}: loss {:.4} acc {:.3} lr {:.2e} ({:.1}s)",
            epoch, m.loss, m.train_acc, m.lr, m.seconds
        );
        if let Some(f) = metrics_file.as_mut() {
            serde_json::to_writer(&mut *f, &m)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        epochs.push(m);
        if let Some(dir) = out_dir {
            if t.checkpoint_every > 0 && (epoch + 1) % t.checkpoint_every == 0 && epoch + 1 < t.epochs {
                let model = Model::Float {
                    net: net.clone(),
                    observers: qat.clone(),
                };
                save_model(&dir.join(format!("checkpoint-{:04}.flxt", epoch + 1)), &model)?;
            }
        }
    }
    if let Some(q) = qat.as_mut() {
        q.frozen = true;
    }
    let outcome = TrainOutcome {
        net,
        qat,
        epochs,
        steps,
    };
    if let Some(dir) = out_dir {
        save_model(&dir.join("model.flxt"), &outcome.model())?;
    }
    Ok(outcome)
}

/// Predicted classes for the given feature maps, `batch` clips at a time.
/// A float model that carries observers runs with fake quantization.
pub fn predict(model: &Model, features: &[&FeatureMap], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(batch.max(1)) {
        let x = Tensor::stack(chunk)?;
        let logits = match model {
            Model::Float {
                net,
                observers: Some(q),
            } => {
                let mut q = q.clone();
                q.frozen = true;
                net.predict_logits(&x, Some(&mut q))?
            }
            m => m.logits(&x)?,
        };
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}

/// Calibrates activation observers of a float network by running the
/// given feature maps through it with fake quantization in the loop.
pub fn calibrate(net: &FlexiNet<f32>, features: &[&FeatureMap], batch: usize) -> Result<QatState> {
    if features.is_empty() {
        return Err(Error::Quant("calibration needs at least one clip".into()));
    }
    let mut q = QatState::new();
    for chunk in features.chunks(batch.max(1)) {
        net.predict_logits(&Tensor::stack(chunk)?, Some(&mut q))?;
    }
    q.frozen = true;
    Ok(q)
}

/// Scores a model on the records at `indices`.
pub fn evaluate_indices(
    model: &Model,
    corpus: &Corpus,
    features: &[FeatureMap],
    indices: &[usize],
) -> Result<EvalReport> {
    let feats: Vec<&FeatureMap> = indices.iter().map(|&i| &features[i]).collect();
    let records: Vec<ClipRecord> = indices.iter().map(|&i| corpus.records[i].clone()).collect();
    let preds = predict(model, &feats, 64)?;
    evaluate(&preds, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn qat_schedule_bounds() {
        let mut c = RunConfig::default();
        assert_eq!(qat_schedule(&c), None);
        c.quant.enable = true;
        c.train.epochs = 20;
        assert_eq!(qat_schedule(&c), Some((15, 18)));
        c.quant.start_fraction = 1.0;
        c.quant.freeze_fraction = 1.0;
        assert_eq!(qat_schedule(&c), Some((19, 20)));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let cfg = crate::model::preset("sm-a").unwrap();
        let mut net = FlexiNet::build(&cfg, 1).unwrap();
        let before = net.params()[0].value.clone();
        let grads: Vec<Option<Tensor<f32>>> = net
            .params()
            .iter()
            .map(|p| Some(Tensor::full(p.value.shape(), 1.0)))
            .collect();
        let mut opt = Adam::new(&net, 0.0);
        opt.step(&mut net, &grads, 0.1);
        let after = &net.params()[0].value;
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((b - a - 0.1).abs() < 1e-4);
        }
    }
}
