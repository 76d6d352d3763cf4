use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use efv_core::cache::{read_cache_file, write_cache_file};
use efv_core::checkpoint::{load_checkpoint, save_checkpoint};
use efv_core::config::{EventFormat, RunConfig};
use efv_core::event_io::EventStream;
use efv_core::io_util::write_atomic;
use efv_core::model::{labels, EfvConfig, EfvModel, Mode};
use efv_core::nn::{grad_check, GradCheckOptions, Tape};
use efv_core::representations::{prepare_sample, CellSize, PreprocessConfig, Sample};
use efv_core::synthetic::{fusion_dataset, saccade_digits, FusionConfig, SaccadeConfig};
use efv_core::training::{evaluate, format_log, parse_log, train_epoch, EpochLog, EvalReport, ModelState};
use efv_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::*;
use crate::dataset;
use crate::manifest::RunManifest;
use crate::plot;
use crate::{CliResult, Failure, Status};

pub const CACHE_FILE: &str = "cache.efvc";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Tolerance for gradients that only pass through linear maps and the NLL.
pub const HEAD_TOLERANCE: f64 = 1e-6;

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(|e| Failure::at(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Failure::at(path, Error::io(path, e)))
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::at(p, Error::io(p, e)))?;
            RunConfig::from_toml(&text).map_err(|e| Failure::at(p, e))
        }
    }
}

fn read_cache(path: &Path) -> CliResult<Vec<Sample>> {
    read_cache_file(path).map_err(|e| Failure::at(path, e))
}

/// `<path>.manifest.json`, next to the artifact it describes.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn convert(a: &ConvertArgs) -> CliResult<Status> {
    let from: EventFormat = a.format.into();
    let to = match from {
        EventFormat::Nmnist => EventFormat::Csv,
        EventFormat::Csv => EventFormat::Nmnist,
    };
    let stream = dataset::read_recording(&a.input, from, a.width, a.height)?;
    let bytes = dataset::encode_recording(&stream, to).map_err(|e| Failure::at(&a.input, e))?;
    write_file(&a.output, &bytes)?;
    #[derive(Serialize)]
    struct Out {
        events: usize,
        duration_us: u64,
    }
    print_json(&Out {
        events: stream.len(),
        duration_us: stream.duration(),
    });
    Ok(Status::Success)
}

/// Preprocesses every recording of a dataset directory, in listing order.
pub fn preprocess_dir(dir: &Path, cfg: &RunConfig) -> CliResult<Vec<Sample>> {
    let format = cfg.data.format;
    let listed = dataset::list(dir, format).map_err(|e| Failure::at(dir, e))?;
    if listed.is_empty() {
        return Err(Failure::at(dir, Error::EmptyDataset));
    }
    listed
        .into_iter()
        .map(|(path, label)| {
            let mut stream = dataset::read_recording(&path, format, cfg.data.sensor_width, cfg.data.sensor_height)?;
            if let Some(l) = label {
                stream = stream.with_label(l);
            }
            prepare_sample(&stream, &cfg.representation).map_err(|e| Failure::at(&path, e))
        })
        .collect()
}

pub fn preprocess(a: &PreprocessArgs) -> CliResult<Status> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(f) = a.format {
        cfg.data.format = f.into();
    }
    create_dir(&a.output)?;
    let manifest_file = a.output.join(MANIFEST_FILE);
    let mut manifest =
        RunManifest::new("preprocess", a.seed, cfg.clone(), &[&a.input]).map_err(|e| Failure::at(&a.input, e))?;
    manifest.write(&manifest_file).map_err(|e| Failure::at(&manifest_file, e))?;

    let samples = preprocess_dir(&a.input, &cfg)?;
    let cache = a.output.join(CACHE_FILE);
    write_cache_file(&cache, &samples).map_err(|e| Failure::at(&cache, e))?;
    manifest.finish(&manifest_file, &[&cache]).map_err(|e| Failure::at(&manifest_file, e))?;

    #[derive(Serialize)]
    struct Out<'a> {
        samples: usize,
        events: u64,
        cache: &'a Path,
    }
    print_json(&Out {
        samples: samples.len(),
        events: samples.iter().map(|s| s.event_count).sum(),
        cache: &cache,
    });
    Ok(Status::Success)
}

pub fn train(a: &TrainArgs) -> CliResult<Status> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.train.mode = m.into();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.checkpoint.with_extension("csv"));
    let manifest_file = manifest_path(&a.checkpoint);
    let mut inputs: Vec<&Path> = vec![&a.input];
    if let Some(e) = &a.eval {
        inputs.push(e);
    }
    if a.resume {
        inputs.push(&a.checkpoint);
    }
    let mut manifest = RunManifest::new("train", a.seed, cfg.clone(), &inputs)?;
    manifest.write(&manifest_file).map_err(|e| Failure::at(&manifest_file, e))?;

    let train_set = read_cache(&a.input)?;
    let eval_set = a.eval.as_deref().map(read_cache).transpose()?;
    let train_cfg = cfg.train_config(a.seed);
    let (mut state, mut logs) = if a.resume {
        resume_state(a, &cfg, &metrics)?
    } else {
        (ModelState::new(cfg.model_config(a.seed), &train_cfg)?, Vec::new())
    };
    if state.optimizer.config != train_cfg.optimizer {
        return Err(Failure::at(
            &a.checkpoint,
            Error::InvalidConfig("checkpoint optimizer differs from the configured one".into()),
        ));
    }
    for epoch in state.epochs_done..train_cfg.epochs {
        let mut log = train_epoch(&mut state, &train_set, &train_cfg, epoch).map_err(|e| Failure::at(&a.input, e))?;
        if let (Some(set), Some(path)) = (&eval_set, &a.eval) {
            let started = Instant::now();
            let r = evaluate(&state, set).map_err(|e| Failure::at(path, e))?;
            log.eval_top1 = Some(r.top1);
            log.eval_top5 = Some(r.top5);
            log.seconds += started.elapsed().as_secs_f64();
        }
        eprintln!(
            "epoch {:>3}  lr {:.1e}  loss {:.4}  train {:.3}{}",
            log.epoch,
            log.lr,
            log.train_loss,
            log.train_top1,
            log.eval_top1.map(|v| format!("  eval {v:.3}")).unwrap_or_default()
        );
        logs.push(log);
        write_file(&metrics, format_log(&logs).as_bytes())?;
    }
    save_checkpoint(&state, &a.checkpoint).map_err(|e| Failure::at(&a.checkpoint, e))?;
    manifest
        .finish(&manifest_file, &[&a.checkpoint, &metrics])
        .map_err(|e| Failure::at(&manifest_file, e))?;

    #[derive(Serialize)]
    struct Out<'a> {
        epochs: usize,
        train_top1: f64,
        eval_top1: Option<f64>,
        checkpoint: &'a Path,
        metrics: &'a Path,
    }
    print_json(&Out {
        epochs: logs.len(),
        train_top1: logs.last().map_or(0.0, |l| l.train_top1),
        eval_top1: logs.last().and_then(|l| l.eval_top1),
        checkpoint: &a.checkpoint,
        metrics: &metrics,
    });
    Ok(Status::Success)
}

fn resume_state(a: &TrainArgs, cfg: &RunConfig, metrics: &Path) -> CliResult<(ModelState, Vec<EpochLog>)> {
    let state = load_checkpoint(&a.checkpoint, &cfg.model_config(a.seed), cfg.train.mode)
        .map_err(|e| Failure::at(&a.checkpoint, e))?;
    let text = fs::read_to_string(metrics).map_err(|e| Failure::at(metrics, Error::io(metrics, e)))?;
    let mut logs = parse_log(&text).map_err(|e| Failure::at(metrics, e))?;
    if logs.len() < state.epochs_done {
        return Err(Failure::at(
            metrics,
            Error::FormatMismatch(format!(
                "log has {} epochs, checkpoint {}",
                logs.len(),
                state.epochs_done
            )),
        ));
    }
    logs.truncate(state.epochs_done);
    Ok((state, logs))
}

pub fn eval(a: &EvalArgs) -> CliResult<Status> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.train.mode = m.into();
    }
    // The seed only affects initial values, which the checkpoint overwrites.
    let state =
        load_checkpoint(&a.checkpoint, &cfg.model_config(0), cfg.train.mode).map_err(|e| Failure::at(&a.checkpoint, e))?;
    let data = read_cache(&a.input)?;
    let report: EvalReport = evaluate(&state, &data).map_err(|e| Failure::at(&a.input, e))?;
    let text = serde_json::to_string(&report).expect("report serializes");
    if let Some(out) = &a.output {
        write_file(out, format!("{text}\n").as_bytes())?;
    }
    println!("{text}");
    Ok(Status::Success)
}

/// Small seeded configuration for finite-difference checks:
/// width 32, 4 frames, a 2x2 token grid and 32 voxels.
pub fn gradcheck_config(seed: u64) -> EfvConfig {
    EfvConfig {
        preprocess: PreprocessConfig {
            frames: 4,
            frame_height: 16,
            frame_width: 16,
            cell: CellSize::new(4.0, 4.0, 4.0),
            t_span: 16.0,
            top_k: 32,
        },
        grid: (2, 2),
        width: 32,
        heads: 4,
        st_depth: 1,
        fusion_depth: 1,
        stem_channels: vec![8],
        gmm_hidden: 16,
        gmm_kernels: 2,
        radius: 2.0,
        head_hidden: 16,
        classes: 10,
        seed,
    }
}

pub fn gradcheck_samples(cfg: &EfvConfig, seed: u64) -> efv_core::Result<Vec<Sample>> {
    saccade_digits(2, seed, &SaccadeConfig::default())?
        .iter()
        .map(|s| prepare_sample(s, &cfg.preprocess))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    pub seed: u64,
    pub mode: Mode,
    pub parameters: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub tolerance: f64,
    pub head_max_rel_error: f64,
    pub head_tolerance: f64,
    pub seconds: f64,
    pub passed: bool,
}

pub fn run_gradcheck(seed: u64, mode: Mode, tolerance: f64) -> efv_core::Result<GradcheckOutcome> {
    let started = Instant::now();
    let cfg = gradcheck_config(seed);
    let samples = gradcheck_samples(&cfg, seed)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let (model, mut store) = EfvModel::new::<f64>(cfg.clone(), mode)?;
    let full = grad_check(&mut store, |tape, p| Ok(model.loss(tape, p, &refs)?.0), GradCheckOptions::fine())?;

    let width = cfg.head_input(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f64> = (0..refs.len() * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let targets = labels(&refs, cfg.classes)?;
    let (_, mut head_store) = EfvModel::new::<f64>(cfg.clone(), mode)?;
    let head = grad_check(
        &mut head_store,
        |tape: &mut Tape<f64>, p| {
            let f = tape.constant(features.clone(), &[refs.len(), width]);
            let lp = model.classify_head(tape, p, f)?;
            tape.nll(lp, &targets)
        },
        GradCheckOptions::default(),
    )?;
    let head_err = head
        .params
        .iter()
        .filter(|c| c.name.starts_with("head."))
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let max = full.max_rel_error();
    Ok(GradcheckOutcome {
        seed,
        mode,
        parameters: full.params.len(),
        coords: full.coords_checked(),
        max_rel_error: max,
        worst_param: full.worst().map(|w| w.name.clone()).unwrap_or_default(),
        tolerance,
        head_max_rel_error: head_err,
        head_tolerance: HEAD_TOLERANCE,
        seconds: started.elapsed().as_secs_f64(),
        passed: max < tolerance && head_err < HEAD_TOLERANCE,
    })
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<Status> {
    let outcome = run_gradcheck(a.seed, a.mode.into(), a.tolerance)?;
    print_json(&outcome);
    Ok(if outcome.passed {
        Status::Success
    } else {
        Status::ToleranceExceeded
    })
}

pub fn plot(a: &PlotArgs) -> CliResult<Status> {
    let text = fs::read_to_string(&a.metrics).map_err(|e| Failure::at(&a.metrics, Error::io(&a.metrics, e)))?;
    let logs = parse_log(&text).map_err(|e| Failure::at(&a.metrics, e))?;
    let report: Option<EvalReport> = match &a.input {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::at(p, Error::io(p, e)))?;
            let r: EvalReport = serde_json::from_str(&text)
                .map_err(|e| Failure::at(p, Error::FormatMismatch(format!("evaluation report: {e}"))))?;
            Some(r)
        }
    };
    create_dir(&a.output)?;
    let mut written = vec![a.output.join("curves.csv"), a.output.join("curves.svg")];
    write_file(&written[0], plot::curves_csv(&logs).as_bytes())?;
    write_file(&written[1], plot::curves_svg(&logs).as_bytes())?;
    if let Some(r) = report {
        let (csv, svg) = (a.output.join("confusion.csv"), a.output.join("confusion.svg"));
        write_file(&csv, plot::confusion_csv(&r.confusion).as_bytes())?;
        write_file(&svg, plot::confusion_svg(&r.confusion).as_bytes())?;
        written.extend([csv, svg]);
    }
    print_json(&serde_json::json!({ "epochs": logs.len(), "written": written }));
    Ok(Status::Success)
}

pub fn synth(a: &SynthArgs) -> CliResult<Status> {
    let streams: Vec<EventStream> = match a.kind {
        SynthKind::Digits => saccade_digits(a.count, a.seed, &SaccadeConfig::default())?,
        SynthKind::Fusion => fusion_dataset(a.count, a.seed, &FusionConfig::default())?,
    };
    let written = dataset::save(&a.output, &streams, a.format.into()).map_err(|e| Failure::at(&a.output, e))?;
    print_json(&serde_json::json!({ "recordings": written.len(), "output": a.output }));
    Ok(Status::Success)
}
