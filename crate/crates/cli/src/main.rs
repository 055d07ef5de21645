use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use flexinet_core::augment::clip_energy;
use flexinet_core::config::RunConfig;
use flexinet_core::dataset::{energy_histogram, Split};
use flexinet_core::distill::{fit_fusion, FusionParams, TeacherLogits};
use flexinet_core::dsp::wav::read_wav;
use flexinet_core::dsp::FeatureExtractor;
use flexinet_core::model::count_params_macs;
use flexinet_core::quant::container::{load_features, load_model, save_features, save_model, Model};
use flexinet_core::quant::convert_int8;
use flexinet_core::train::{calibrate, evaluate_indices, train, Corpus, TeacherTargets};
use flexinet_core::{Error, FeatureMap, Result};

#[derive(Parser, Debug)]
#[command(name = "flexinet", version, about = "Low-complexity acoustic scene classification")]
struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract log-mel features for every WAV in a directory.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
    /// Train a float model (optionally with distillation and QAT).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Fit teacher fusion weights on held-out labelled clips.
    DistillFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        logits: PathBuf,
        /// Tab-separated `clip_id<TAB>scene_label` lines; the corpus's
        /// unused split is used when omitted.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Convert a float model to an int8 container.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Clips to calibrate activation ranges on: one WAV path, feature
        /// file or corpus clip id per line.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Per-device accuracy report of a float or int8 model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write the synthetic multi-device corpus to disk.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Histogram of clip energies over the configured corpus.
    Energy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn setup(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
    cfg.write_resolved(&common.out)?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Features { common, input } => cmd_features(&common, &input),
        Command::Train { common } => cmd_train(&common),
        Command::DistillFit { common, logits, labels } => cmd_distill_fit(&common, &logits, labels.as_deref()),
        Command::Quantize {
            common,
            model,
            calibration,
        } => cmd_quantize(&common, &model, calibration.as_deref()),
        Command::Eval { common, model, split } => cmd_eval(&common, &model, &split),
        Command::Synth { common } => {
            let cfg = setup(&common)?;
            let recs = cfg.data.synthetic.write(&common.out)?;
            println!("wrote {} clips to {}", recs.len(), common.out.display());
            Ok(())
        }
        Command::Energy { common, bins } => {
            let cfg = setup(&common)?;
            let corpus = Corpus::from_config(&cfg)?;
            let energies: Vec<f64> = corpus.waves.iter().map(|w| clip_energy(&w.samples)).collect();
            let h = energy_histogram(&energies, bins)?;
            write_json(&common.out.join("energy.json"), &h)?;
            print!("{}", h.to_text());
            Ok(())
        }
    }
}

fn cmd_features(common: &Common, input: &Path) -> Result<()> {
    let cfg = setup(common)?;
    let fx = FeatureExtractor::new(&cfg.features)?;
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        warn!("no WAV files in {}", input.display());
    }
    let mut failures = Vec::new();
    let mut written = 0usize;
    for path in &wavs {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let result = read_wav(path)
            .and_then(|w| fx.log_mel(&w))
            .and_then(|f| save_features(&common.out.join(format!("{stem}.flxt")), &f, &stem));
        match result {
            Ok(_) => written += 1,
            Err(e) => {
                warn!("{}: {e}", path.display());
                failures.push(json!({ "file": path.display().to_string(), "error": e.to_string() }));
            }
        }
    }
    write_json(&common.out.join("failures.json"), &failures)?;
    println!("extracted {written} of {} clips", wavs.len());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "{} clips failed; see {}",
            failures.len(),
            common.out.join("failures.json").display()
        )))
    }
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = setup(common)?;
    let corpus = Corpus::from_config(&cfg)?;
    let train_recs: Vec<_> = corpus
        .indices(Split::Train)
        .into_iter()
        .map(|i| &corpus.records[i])
        .collect();
    let teacher = TeacherTargets::from_config(&cfg, &train_recs)?;
    let fx = FeatureExtractor::new(&cfg.features)?;
    let feats = corpus.features(&fx)?;
    let outcome = train(&cfg, &corpus, &feats, teacher.as_ref(), Some(&common.out))?;
    let test = corpus.indices(Split::Test);
    if !test.is_empty() {
        let report = evaluate_indices(&outcome.model(), &corpus, &feats, &test)?;
        write_json(&common.out.join("eval.json"), &report)?;
        std::fs::write(common.out.join("eval.txt"), report.to_text())?;
        print!("{}", report.to_text());
    }
    println!("wrote {}", common.out.join("model.flxt").display());
    Ok(())
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg,
        };
        let (id, label) = line
            .split_once(['\t', ','])
            .ok_or_else(|| parse_err("expected clip_id and scene_label".into()))?;
        let label = label.trim();
        let scene = flexinet_core::dataset::scene_index(label)
            .or_else(|| label.parse().ok().filter(|&i: &usize| i < 10))
            .ok_or_else(|| parse_err(format!("unknown scene '{label}'")))?;
        out.insert(id.trim().to_string(), scene);
    }
    Ok(out)
}

fn cmd_distill_fit(common: &Common, logits_path: &Path, labels: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let logits = TeacherLogits::load(logits_path)?;
    if let Some(k) = cfg.distill.teachers {
        if k != logits.k() {
            return Err(Error::Config(format!(
                "distill.teachers is {k} but {} holds {} teachers",
                logits_path.display(),
                logits.k()
            )));
        }
    }
    let labelled: Vec<(String, usize)> = match labels {
        Some(p) => {
            let mut v: Vec<_> = read_labels(p)?.into_iter().collect();
            v.sort();
            v
        }
        None => {
            let corpus = Corpus::from_config(&cfg)?;
            corpus
                .indices(Split::Unused)
                .into_iter()
                .map(|i| (corpus.records[i].clip_id.clone(), corpus.records[i].scene))
                .collect()
        }
    };
    let ids: Vec<&str> = labelled.iter().map(|(id, _)| id.as_str()).collect();
    logits.require(&ids)?;
    let rows: Vec<&[f32]> = ids.iter().map(|id| logits.get(id).unwrap()).collect();
    let ys: Vec<usize> = labelled.iter().map(|(_, y)| *y).collect();
    let fit = fit_fusion(&rows, &ys, logits.k(), &cfg.distill.fit)?;
    let out = common.out.join("fusion.json");
    fit.params.save(&out)?;
    println!(
        "fitted on {} clips: CE {:.5} (uniform {:.5}) after {} iterations",
        ids.len(),
        fit.ce,
        fit.uniform_ce,
        fit.iterations
    );
    println!("alpha {:?}", fit.params.alpha);
    // Reload as a sanity check that the written file round-trips.
    let back = FusionParams::load(&out)?;
    if back != fit.params {
        return Err(Error::Load("fusion parameters did not round-trip".into()));
    }
    Ok(())
}

fn calibration_features(list: &Path, cfg: &RunConfig) -> Result<Vec<FeatureMap>> {
    let text = std::fs::read_to_string(list)
        .map_err(|e| Error::Input(format!("cannot read calibration list {}: {e}", list.display())))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let fx = FeatureExtractor::new(&cfg.features)?;
    let mut corpus: Option<(Corpus, HashMap<String, usize>)> = None;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let p = base.join(line);
        if p.is_file() {
            if p.extension().is_some_and(|x| x == "flxt") {
                out.push(load_features(&p)?);
            } else {
                out.push(fx.log_mel(&read_wav(&p)?)?);
            }
            continue;
        }
        if corpus.is_none() {
            let c = Corpus::from_config(cfg)?;
            let index = c.records.iter().enumerate().map(|(i, r)| (r.clip_id.clone(), i)).collect();
            corpus = Some((c, index));
        }
        let (c, index) = corpus.as_ref().unwrap();
        let i = *index
            .get(line)
            .ok_or_else(|| Error::Input(format!("calibration entry '{line}' is neither a file nor a corpus clip")))?;
        out.push(fx.log_mel(&c.waves[i])?);
    }
    Ok(out)
}

fn cmd_quantize(common: &Common, model_path: &Path, calibration: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let (net, observers) = match load_model(model_path)? {
        Model::Float { net, observers } => (net, observers),
        Model::Int8(_) => return Err(Error::Input(format!("{} is already an int8 model", model_path.display()))),
    };
    let observers = match (calibration, observers) {
        (Some(list), _) => {
            let feats = calibration_features(list, &cfg)?;
            info!("calibrating on {} clips", feats.len());
            let refs: Vec<&FeatureMap> = feats.iter().collect();
            calibrate(&net, &refs, 32)?
        }
        (None, Some(obs)) => obs,
        (None, None) => {
            return Err(Error::Quant(
                "the model has no calibrated observers; pass --calibration <list>".into(),
            ))
        }
    };
    let q = convert_int8(&net, &observers)?;
    let out = common.out.join("model-int8.flxt");
    let bytes = save_model(&out, &Model::Int8(q))?;
    let (params, _) = count_params_macs(net.config())?;
    println!(
        "wrote {} ({bytes} bytes for {params} parameters)",
        out.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, model_path: &Path, split: &str) -> Result<()> {
    let cfg = setup(common)?;
    let split: Split = split.parse()?;
    let model = load_model(model_path)?;
    let mut feat_cfg = cfg.features.clone();
    let (f, t) = model.config().input_size;
    feat_cfg.n_mels = f;
    feat_cfg.frames = t;
    let corpus = Corpus::from_config(&cfg)?;
    let idx = corpus.indices(split);
    if idx.is_empty() {
        return Err(Error::Input(format!("the corpus has no {} clips", split.as_str())));
    }
    let fx = FeatureExtractor::new(&feat_cfg)?;
    let mut feats = vec![FeatureMap::zeros(&[1]); corpus.records.len()];
    for &i in &idx {
        feats[i] = fx.log_mel(&corpus.waves[i])?;
    }
    let report = evaluate_indices(&model, &corpus, &feats, &idx)?;
    write_json(&common.out.join("eval.json"), &report)?;
    std::fs::write(common.out.join("eval.txt"), report.to_text())?;
    print!("{}", report.to_text());
    println!("model: {} ({} clips, split {})", model.kind(), report.clips, split.as_str());
    Ok(())
}
