//! Criteria that need trained models: 7 (KD loss), 8 (quantization),
//! 9 (desk-scale end-to-end) and 11 (determinism).

use std::cell::OnceCell;
use std::time::Instant;

use rand::Rng;

use flexinet_core::config::RunConfig;
use flexinet_core::dataset::{ClipRecord, EvalReport, Split, SyntheticSpec, SCENES};
use flexinet_core::distill::{
    default_teacher_ensemble, fit_fusion, kd_loss, synthetic_logits, FitOptions, FusionParams, TeacherLogits,
};
use flexinet_core::dsp::FeatureExtractor;
use flexinet_core::model::{preset, FlexiNet, PRESET_NAMES};
use flexinet_core::quant::container::{int8_container, Model};
use flexinet_core::quant::{convert_int8, QuantSpec};
use flexinet_core::train::{calibrate, evaluate_indices, predict, train, Corpus, TeacherTargets, TrainOutcome};
use flexinet_core::{FeatureMap, Tape, Tensor};

use super::common::rng;
use super::{ensure, Outcome};

/// Desk-scale schedule shared by every criterion-9 run.
const DESK: &[&str] = &[
    "train.epochs=10",
    "train.batch_size=32",
    "data.synthetic.test_per_cell=20",
];
/// No residual normalization and no device augmentation.
const BASELINE: &[&str] = &[
    "arch.resnorm=none",
    "augment.fms.enabled=false",
    "augment.adir.enabled=false",
];
/// RN + FMS + ADIR, each at its default setting.
const FULL: &[&str] = &["arch.resnorm=input", "augment.fms.enabled=true", "augment.adir.enabled=true"];
const KD_SEEDS: [u64; 3] = [1, 2, 3];
const TEACHER_SEED: u64 = 11;

fn config(parts: &[&[&str]]) -> RunConfig {
    let overrides: Vec<String> = parts.iter().flat_map(|p| p.iter().map(|s| s.to_string())).collect();
    RunConfig::resolve(None, &overrides, None).expect("acceptance config")
}

struct Desk {
    corpus: Corpus,
    features: Vec<FeatureMap>,
    logits: TeacherLogits,
    build_seconds: f64,
}

struct Run {
    outcome: TrainOutcome,
    report: EvalReport,
    seconds: f64,
}

/// Shared corpora and trained models, built on first use.
pub struct Context {
    desk: OnceCell<Desk>,
    full: OnceCell<Run>,
}

impl Context {
    pub fn new() -> Self {
        Self {
            desk: OnceCell::new(),
            full: OnceCell::new(),
        }
    }

    fn desk(&self) -> &Desk {
        self.desk.get_or_init(|| {
            let started = Instant::now();
            let cfg = config(&[DESK]);
            let corpus = Corpus::from_config(&cfg).expect("desk corpus");
            let fx = FeatureExtractor::new(&cfg.features).expect("extractor");
            let features = corpus.features(&fx).expect("features");
            let logits = teacher_logits(&corpus.records);
            Desk {
                corpus,
                features,
                logits,
                build_seconds: started.elapsed().as_secs_f64(),
            }
        })
    }

    fn run(&self, cfg: &RunConfig, teacher: Option<&TeacherTargets>) -> Run {
        let d = self.desk();
        let started = Instant::now();
        let outcome = train(cfg, &d.corpus, &d.features, teacher, None).expect("training run");
        let seconds = started.elapsed().as_secs_f64();
        let report = evaluate_indices(&outcome.model(), &d.corpus, &d.features, &d.corpus.indices(Split::Test))
            .expect("evaluation");
        Run {
            outcome,
            report,
            seconds,
        }
    }

    fn full(&self) -> &Run {
        self.full.get_or_init(|| self.run(&config(&[DESK, FULL]), None))
    }
}

fn teacher_logits(records: &[ClipRecord]) -> TeacherLogits {
    let clips: Vec<(String, usize)> = records.iter().map(|r| (r.clip_id.clone(), r.scene)).collect();
    let classes: Vec<String> = SCENES.iter().map(|s| s.to_string()).collect();
    synthetic_logits(&default_teacher_ensemble(), &clips, &classes, TEACHER_SEED)
}

fn small_corpus() -> (Corpus, Vec<FeatureMap>) {
    let cfg = RunConfig::default();
    let corpus = Corpus::synthetic(&SyntheticSpec {
        train_per_cell: 2,
        test_per_cell: 1,
        unused_per_cell: 1,
        seed: 3,
    });
    let fx = FeatureExtractor::new(&cfg.features).expect("extractor");
    let features = corpus.features(&fx).expect("features");
    (corpus, features)
}

/// Every augmentation on, with ADIR firing often, on a short schedule.
fn small_config(extra: &[&str]) -> RunConfig {
    config(&[
        &[
            "train.epochs=2",
            "train.batch_size=16",
            "augment.adir.p=0.9",
            "augment.fms.p=0.8",
        ],
        extra,
    ])
}

fn all_bits(net: &FlexiNet<f32>) -> Vec<u32> {
    net.params()
        .iter()
        .chain(net.buffers())
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

// ---------------------------------------------------------------------------
// 7. KD loss

pub fn criterion_7(_ctx: &Context) -> Outcome {
    let (corpus, features) = small_corpus();
    let logits = teacher_logits(&corpus.records);
    let records: Vec<&ClipRecord> = corpus.records.iter().collect();
    let targets = TeacherTargets::from_fused(&logits, &FusionParams::uniform(3, 10), &records).map_err(|e| e.to_string())?;

    let plain = train(&small_config(&[]), &corpus, &features, None, None).map_err(|e| e.to_string())?;
    let kd = train(
        &small_config(&["distill.kd.lambda=1.0", "distill.kd.temperature=3.0"]),
        &corpus,
        &features,
        Some(&targets),
        None,
    )
    .map_err(|e| e.to_string())?;
    ensure(plain.steps.len() == kd.steps.len() && !plain.steps.is_empty(), || {
        format!("step counts differ: {} vs {}", plain.steps.len(), kd.steps.len())
    })?;
    for (i, (a, b)) in plain.steps.iter().zip(&kd.steps).enumerate() {
        ensure(a.loss.to_bits() == b.loss.to_bits(), || {
            format!("step {i}: loss {} (no KD) vs {} (lambda=1)", a.loss, b.loss)
        })?;
    }
    ensure(all_bits(&plain.net) == all_bits(&kd.net), || "final weights differ".into())?;

    // lambda = 0 with the student reproducing the teacher: the KD gradient
    // vanishes.
    let mut g = rng(707);
    let mut worst = 0.0f64;
    for rows in [1usize, 3, 8] {
        for temp in [1.0, 2.0, 4.0] {
            let logits = Tensor::<f64>::from_fn(&[rows, 10], |_| g.gen_range(-4.0..4.0));
            let labels: Vec<usize> = (0..rows).map(|_| g.gen_range(0..10)).collect();
            let mut tape = Tape::<f64>::new();
            let s = tape.param(logits.clone());
            let l = kd_loss(&mut tape, s, &labels, &logits, 0.0, temp).map_err(|e| e.to_string())?;
            let grads = tape.backward(l.total).map_err(|e| e.to_string())?;
            let gmax = grads.get(s).map_or(0.0, |t| t.max_abs());
            worst = worst.max(gmax);
        }
    }
    ensure(worst <= 1e-12, || format!("KD gradient {worst:.2e} with student == teacher"))?;
    Ok(format!(
        "lambda=1 matches no-KD over {} steps bit-for-bit (losses and weights); lambda=0 self-distillation gradient {worst:.1e}",
        plain.steps.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. Quantization

pub fn criterion_8(ctx: &Context) -> Outcome {
    let mut g = rng(808);
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0usize;
    for _ in 0..1000 {
        let a: f32 = g.gen_range(-20.0..5.0);
        let b: f32 = a + g.gen_range(0.01..30.0);
        let spec = if g.gen_bool(0.5) {
            QuantSpec::affine(a, b)
        } else {
            QuantSpec::symmetric(b.abs().max(a.abs()))
        };
        let s = spec.scale as f64;
        let zp = spec.zero_point as f64;
        let (lo, hi) = ((-128.0 - zp) * s, (127.0 - zp) * s);
        for _ in 0..1000 {
            let v = g.gen_range(lo..hi) as f32;
            let q = spec.quantize_value(v);
            let back = (q as f64 - zp) * s;
            let err = (back - v as f64).abs() - 0.5 * s;
            worst = worst.max(err);
            count += 1;
        }
    }
    ensure(worst <= 1e-7, || format!("round-trip error exceeds scale/2 by {worst:.2e}"))?;

    let d = ctx.desk();
    let full = ctx.full();
    let qat_run = ctx.run(&config(&[DESK, FULL, &["quant.enable=true"]]), None);
    let qat = qat_run.outcome.qat.as_ref().ok_or("QAT run produced no observers")?;
    let q = convert_int8(&qat_run.outcome.net, qat).map_err(|e| e.to_string())?;
    let int8 = Model::Int8(q);
    let test = d.corpus.indices(Split::Test);
    let feats: Vec<&FeatureMap> = test.iter().map(|&i| &d.features[i]).collect();
    let p_int8 = predict(&int8, &feats, 64).map_err(|e| e.to_string())?;
    let float = Model::Float {
        net: qat_run.outcome.net.clone(),
        observers: None,
    };
    let p_float = predict(&float, &feats, 64).map_err(|e| e.to_string())?;
    let agree = p_int8.iter().zip(&p_float).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
    let int8_report = evaluate_indices(&int8, &d.corpus, &d.features, &test).map_err(|e| e.to_string())?;
    let drop = 100.0 * (full.report.macro_acc - int8_report.macro_acc);

    let mut sizes = Vec::new();
    let calib: Vec<&FeatureMap> = d.features.iter().take(64).collect();
    for name in PRESET_NAMES {
        let cfg = preset(name).map_err(|e| e.to_string())?;
        let net = if name == "sm-a" {
            qat_run.outcome.net.clone()
        } else {
            FlexiNet::build(&cfg, 5).map_err(|e| e.to_string())?
        };
        let obs = if name == "sm-a" {
            qat.clone()
        } else {
            calibrate(&net, &calib, 32).map_err(|e| e.to_string())?
        };
        let container = int8_container(&convert_int8(&net, &obs).map_err(|e| e.to_string())?);
        let file = container.to_bytes().map_err(|e| e.to_string())?.len();
        let payload = container.payload_bytes();
        let params = net.param_count();
        let dev = (payload as f64 - params as f64) / params as f64;
        ensure(dev.abs() <= 0.10, || {
            format!("{name}: {payload} payload bytes for {params} params ({:+.1}%)", 100.0 * dev)
        })?;
        sizes.push(format!("{name} {payload}B+{}B header/{params}p ({:+.1}%)", file - payload, 100.0 * dev));
    }

    ensure(agree >= 0.95, || format!("int8/float agreement {:.1}%", 100.0 * agree))?;
    ensure(drop <= 5.0, || {
        format!(
            "QAT int8 macro {:.2}% vs float {:.2}%: drop {drop:.2} points",
            100.0 * int8_report.macro_acc,
            100.0 * full.report.macro_acc
        )
    })?;
    Ok(format!(
        "{count} round trips, max error - scale/2 = {worst:.1e}; agreement {:.1}%; float {:.2}% -> int8 QAT {:.2}% (drop {drop:.2}); sizes {}",
        100.0 * agree,
        100.0 * full.report.macro_acc,
        100.0 * int8_report.macro_acc,
        sizes.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 9. Desk-scale end-to-end analogue

pub fn criterion_9(ctx: &Context) -> Outcome {
    let started = Instant::now();
    let d = ctx.desk();
    let baseline = ctx.run(&config(&[DESK, BASELINE]), None);
    let full = ctx.full();
    let unseen = |r: &Run| 100.0 * r.report.unseen_acc.unwrap_or(0.0);
    let gain = unseen(full) - unseen(&baseline);

    let unused = d.corpus.indices(Split::Unused);
    let rows: Vec<&[f32]> = unused
        .iter()
        .map(|&i| d.logits.get(&d.corpus.records[i].clip_id).expect("teacher logits"))
        .collect();
    let labels: Vec<usize> = unused.iter().map(|&i| d.corpus.records[i].scene).collect();
    let fit = fit_fusion(&rows, &labels, d.logits.k(), &FitOptions::default()).map_err(|e| e.to_string())?;
    let records: Vec<&ClipRecord> = d.corpus.records.iter().collect();
    let fused = TeacherTargets::from_fused(&d.logits, &fit.params, &records).map_err(|e| e.to_string())?;
    let averaged = TeacherTargets::from_fused(&d.logits, &FusionParams::uniform(d.logits.k(), 10), &records)
        .map_err(|e| e.to_string())?;
    let (mut acc_fused, mut acc_avg) = (Vec::new(), Vec::new());
    for seed in KD_SEEDS {
        let seed_ov = format!("train.seed={seed}");
        let cfg = config(&[DESK, BASELINE, &[seed_ov.as_str()]]);
        acc_fused.push(100.0 * ctx.run(&cfg, Some(&fused)).report.macro_acc);
        acc_avg.push(100.0 * ctx.run(&cfg, Some(&averaged)).report.macro_acc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (kd_fused, kd_avg) = (mean(&acc_fused), mean(&acc_avg));
    let minutes = (started.elapsed().as_secs_f64() + d.build_seconds) / 60.0;

    let detail = format!(
        "(a) macro {:.2}% [full] / {:.2}% [baseline]; (b) unseen {:.2}% full vs {:.2}% baseline, gain {gain:+.2}; \
         (c) KD fused {kd_fused:.2}% vs averaged {kd_avg:.2}% (fit CE {:.4} vs uniform {:.4}; per seed {:?} / {:?}); \
         {minutes:.1} min (full run {:.0}s)",
        100.0 * full.report.macro_acc,
        100.0 * baseline.report.macro_acc,
        unseen(full),
        unseen(&baseline),
        fit.ce,
        fit.uniform_ce,
        acc_fused.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        acc_avg.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        full.seconds,
    );
    println!("criterion 9 reports:\n[baseline]\n{}\n[full]\n{}", baseline.report.to_text(), full.report.to_text());
    ensure(full.report.macro_acc >= 0.80, || format!("macro accuracy below 80%: {detail}"))?;
    ensure(gain >= 3.0, || format!("unseen-device gain below 3 points: {detail}"))?;
    ensure(kd_fused >= kd_avg - 0.5, || format!("fused KD below averaged - 0.5: {detail}"))?;
    ensure(minutes <= 15.0, || format!("desk-scale runs exceeded 15 min: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 11. Determinism

pub fn criterion_11(_ctx: &Context) -> Outcome {
    let (corpus, features) = small_corpus();
    let cfg = small_config(&["quant.enable=true", "quant.start_fraction=0.5", "quant.freeze_fraction=0.5"]);
    let mut float_bytes = Vec::new();
    let mut int8_bytes = Vec::new();
    for _ in 0..2 {
        let out = train(&cfg, &corpus, &features, None, None).map_err(|e| e.to_string())?;
        float_bytes.push(out.model().to_container().to_bytes().map_err(|e| e.to_string())?);
        let qat = out.qat.as_ref().ok_or("QAT did not run")?;
        let q = convert_int8(&out.net, qat).map_err(|e| e.to_string())?;
        int8_bytes.push(int8_container(&q).to_bytes().map_err(|e| e.to_string())?);
    }
    ensure(float_bytes[0] == float_bytes[1], || "float model files differ between runs".into())?;
    ensure(int8_bytes[0] == int8_bytes[1], || "int8 model files differ between runs".into())?;
    Ok(format!(
        "two runs with QAT and all augmentations: float files ({} B) and int8 files ({} B) identical",
        float_bytes[0].len(),
        int8_bytes[0].len()
    ))
}
