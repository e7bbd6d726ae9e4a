//! `gridsight`: file-based gen → train → detect → eval pipeline, plus the
//! throughput bench and an NMS before/after listing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridsight_core::datagen::{
    generate_dataset, read_annotations, write_annotations, LabeledScene, SceneSpec,
};
use gridsight_core::evalmap::{bench_pipeline, map_report, synthetic_frames, EvalConfig};
use gridsight_core::gridcodec::{
    read_detections, read_tensors, shield_mask, write_detections, FrameDetections,
};
use gridsight_core::mining::MiningConfig;
use gridsight_core::model::{
    detect, forward, load_params, load_params_for, save_params, train, TrainConfig,
};
use gridsight_core::{
    Detection, Error, GridConfig, IouVariant, LossConfig, LrSchedule, NmsConfig, CLASS_NAMES,
};

#[derive(Parser, Debug)]
#[command(
    name = "gridsight",
    version,
    about = "Grid/anchor detector numerics: data, training, detection, evaluation"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Grid side.
    #[arg(long, global = true, default_value_t = 9, value_parser = parse_grid_n)]
    grid_n: usize,
    /// Directory for all outputs; default inputs are read from here too.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes into train.jsonl and test.jsonl.
    Gen(GenArgs),
    /// Train the predictor; writes model.bin and loss_history.csv.
    Train(TrainArgs),
    /// Run the model over annotated scenes; writes detections.jsonl.
    Detect(DetectArgs),
    /// Score detections against annotations; writes report.txt and pr_<class>.csv.
    Eval(EvalArgs),
    /// Time decode + NMS per frame; writes bench.txt.
    Bench(BenchArgs),
    /// List detections before and after NMS; writes nms_demo.txt.
    NmsDemo(NmsDemoArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Held-out scenes, drawn from a different seed; 0 skips test.jsonl.
    #[arg(long, default_value_t = 200)]
    test_count: usize,
    #[arg(long, default_value_t = 1)]
    objects_min: usize,
    #[arg(long, default_value_t = 3)]
    objects_max: usize,
    #[arg(long, default_value_t = 0.2)]
    occlusion_rate: f64,
    #[arg(long, default_value_t = 36)]
    feature_resolution: usize,
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
}

#[derive(Args, Debug)]
struct NmsArgs {
    #[arg(long, default_value_t = 0.7)]
    iou_suppress: f64,
    #[arg(long = "lambda", default_value_t = 0.15)]
    lambda_containment: f64,
}

impl NmsArgs {
    fn config(&self) -> Result<NmsConfig, Failure> {
        let cfg = NmsConfig {
            iou_suppress: self.iou_suppress,
            lambda_containment: self.lambda_containment,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IouArg {
    Union,
    Symdiff,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Annotations [default: <out>/train.jsonl]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// `ratio:<negatives per positive>` or `topk:<k>`.
    #[arg(long, default_value = "ratio:3", value_parser = parse_mining)]
    mining: MiningConfig,
    #[arg(long, default_value_t = 0.2)]
    lambda_obj: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_noobj: f64,
    #[arg(long, value_enum, default_value_t = IouArg::Union)]
    iou: IouArg,
    #[arg(long, default_value_t = 0.01)]
    lr_start: f64,
    #[arg(long, default_value_t = 0.001)]
    lr_end: f64,
    #[arg(long, default_value_t = 0.7)]
    competition_iou: f64,
    /// Train shielded (boundary-crossing) anchors too.
    #[arg(long)]
    no_shielding: bool,
    /// Start from a saved model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Keep the hidden layer fixed (fine-tuning).
    #[arg(long)]
    freeze_layer1: bool,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// [default: <out>/model.bin]
    #[arg(long)]
    model: Option<PathBuf>,
    /// [default: <out>/test.jsonl]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Minimum score `confidence × class probability`.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Emit decoded detections without suppression.
    #[arg(long)]
    no_nms: bool,
    #[command(flatten)]
    nms: NmsArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// [default: <out>/detections.jsonl]
    #[arg(long)]
    detections: Option<PathBuf>,
    /// [default: <out>/test.jsonl]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou_match: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Prediction tensors to time; otherwise synthetic frames are generated.
    #[arg(long, conflicts_with = "model")]
    tensors: Option<PathBuf>,
    /// Produce frames by running this model over --data.
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Above-threshold slots per synthetic frame.
    #[arg(long, default_value_t = 50)]
    hot: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[command(flatten)]
    nms: NmsArgs,
}

#[derive(Args, Debug)]
struct NmsDemoArgs {
    /// [default: <out>/detections.jsonl]
    #[arg(long)]
    detections: Option<PathBuf>,
    /// List at most this many frames.
    #[arg(long, default_value_t = 5)]
    limit: usize,
    #[command(flatten)]
    nms: NmsArgs,
}

/// Exit status 1 for bad flags or configuration, 2 for everything that fails at run time.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn parse_grid_n(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (9 | 11 | 13)) => Ok(n),
        _ => Err(format!("grid size must be 9, 11 or 13, got `{s}`")),
    }
}

fn parse_mining(s: &str) -> Result<MiningConfig, String> {
    let (mode, value) = s
        .split_once(':')
        .ok_or_else(|| format!("expected ratio:<n> or topk:<k>, got `{s}`"))?;
    let v: usize = value.parse().map_err(|_| format!("bad count in `{s}`"))?;
    let cfg = match mode {
        "ratio" => MiningConfig::Ratio { neg_per_pos: v },
        "topk" => MiningConfig::TopK { k: v },
        _ => return Err(format!("unknown mining mode `{mode}`")),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn unit_interval(name: &str, v: f64) -> Result<(), Failure> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("--{name} must lie in [0, 1], got {v}")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let grid = GridConfig::new(cli.grid_n)?;
    let out = &cli.out;
    let default = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed, &grid, out),
        Command::Train(a) => cmd_train(a, cli.seed, &grid, &default(&a.data, "train.jsonl"), out),
        Command::Detect(a) => cmd_detect(
            a,
            &grid,
            &default(&a.model, "model.bin"),
            &default(&a.data, "test.jsonl"),
            out,
        ),
        Command::Eval(a) => cmd_eval(
            a,
            &default(&a.detections, "detections.jsonl"),
            &default(&a.data, "test.jsonl"),
            out,
        ),
        Command::Bench(a) => cmd_bench(a, cli.seed, &grid, out),
        Command::NmsDemo(a) => cmd_nms_demo(a, &default(&a.detections, "detections.jsonl"), out),
    }
}

fn create_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn cmd_gen(a: &GenArgs, seed: u64, grid: &GridConfig, out: &Path) -> Result<(), Failure> {
    let spec = SceneSpec {
        objects_min: a.objects_min,
        objects_max: a.objects_max,
        occlusion_rate: a.occlusion_rate,
        feature_resolution: a.feature_resolution,
        jitter: a.jitter,
        grid_n: grid.n(),
        ..SceneSpec::default()
    };
    spec.validate()?;
    if a.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    create_out(out)?;
    let train_set = generate_dataset(&spec, a.count, seed)?;
    write_annotations(&train_set, out.join("train.jsonl"))?;
    println!(
        "wrote {} scenes to {}",
        train_set.len(),
        out.join("train.jsonl").display()
    );
    if a.test_count > 0 {
        let test_set = generate_dataset(&spec, a.test_count, seed.wrapping_add(1))?;
        write_annotations(&test_set, out.join("test.jsonl"))?;
        println!(
            "wrote {} scenes to {}",
            test_set.len(),
            out.join("test.jsonl").display()
        );
    }
    Ok(())
}

fn cmd_train(
    a: &TrainArgs,
    seed: u64,
    grid: &GridConfig,
    data: &Path,
    out: &Path,
) -> Result<(), Failure> {
    unit_interval("competition-iou", a.competition_iou)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        hidden: a.hidden,
        seed,
        shielding: !a.no_shielding,
        competition_iou: a.competition_iou,
        mining: a.mining,
        loss: LossConfig {
            lambda_obj: a.lambda_obj,
            lambda_noobj: a.lambda_noobj,
            iou_variant: match a.iou {
                IouArg::Union => IouVariant::Union,
                IouArg::Symdiff => IouVariant::SymmetricDifference,
            },
            ..LossConfig::default()
        },
        schedule: LrSchedule {
            eta_start: a.lr_start,
            eta_end: a.lr_end,
            total_epochs: a.epochs,
        },
        freeze: [a.freeze_layer1, false],
    };
    cfg.validate()?;
    if a.freeze_layer1 && a.init.is_none() {
        return Err(invalid("--freeze-layer1 needs --init"));
    }
    let scenes = read_annotations(data)?;
    if scenes.is_empty() {
        return Err(Failure::Runtime(format!(
            "{} holds no scenes",
            data.display()
        )));
    }
    let initial = match &a.init {
        Some(p) => Some(load_params_for(p, grid, scenes[0].features.len())?),
        None => None,
    };
    create_out(out)?;
    let (params, history) = train(&scenes, grid, &cfg, initial)?;
    save_params(&params, out.join("model.bin"))?;

    let mut csv =
        String::from("epoch,lr,total,l2_center,sqrt_wh,iou_obj,conf_obj,conf_noobj,class_term\n");
    for (e, h) in history.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            e + 1,
            cfg.schedule.lr_at(e)?,
            h.total,
            h.l2_center,
            h.sqrt_wh,
            h.iou_obj,
            h.conf_obj,
            h.conf_noobj,
            h.class_term
        );
    }
    fs::write(out.join("loss_history.csv"), csv)?;
    let first = history.first().map_or(f64::NAN, |h| h.total);
    let last = history.last().map_or(f64::NAN, |h| h.total);
    println!(
        "trained {} epochs on {} scenes: loss {first:.6} -> {last:.6}",
        cfg.epochs,
        scenes.len()
    );
    Ok(())
}

fn cmd_detect(
    a: &DetectArgs,
    grid: &GridConfig,
    model: &Path,
    data: &Path,
    out: &Path,
) -> Result<(), Failure> {
    unit_interval("threshold", a.threshold)?;
    let nms = a.nms.config()?;
    let scenes = read_annotations(data)?;
    let feature_len = scenes.first().map_or(0, |s| s.features.len());
    let params = if scenes.is_empty() {
        load_params(model)?
    } else {
        load_params_for(model, grid, feature_len)?
    };
    let shield = shield_mask(grid);
    let mut frames = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let dets = if a.no_nms {
            let pred = forward(&params, &s.features)?;
            gridsight_core::gridcodec::decode_masked(&pred, grid, a.threshold, Some(&shield))?
        } else {
            detect(&params, &s.features, a.threshold, &nms, Some(&shield))?
        };
        frames.push(FrameDetections { id: s.id, dets });
    }
    create_out(out)?;
    write_detections(out.join("detections.jsonl"), &frames)?;
    let total: usize = frames.iter().map(|f| f.dets.len()).sum();
    println!("wrote {total} detections for {} frames", frames.len());
    Ok(())
}

/// Detections per annotated scene, in annotation order; unknown ids are an error.
fn align(
    frames: Vec<FrameDetections>,
    scenes: &[LabeledScene],
) -> Result<Vec<Vec<Detection>>, Failure> {
    let mut by_id: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for f in frames {
        by_id.entry(f.id).or_default().extend(f.dets);
    }
    let aligned = scenes
        .iter()
        .map(|s| by_id.remove(&s.id).unwrap_or_default())
        .collect();
    if let Some(id) = by_id.keys().next() {
        return Err(Failure::Runtime(format!(
            "detections for frame {id} have no annotation"
        )));
    }
    Ok(aligned)
}

fn cmd_eval(a: &EvalArgs, dets_path: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    unit_interval("iou-match", a.iou_match)?;
    let scenes = read_annotations(data)?;
    let dets = align(read_detections(dets_path)?, &scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    let report = map_report(
        &dets,
        &gts,
        &EvalConfig {
            iou_match: a.iou_match,
        },
    )?;
    create_out(out)?;
    let text = report.render();
    fs::write(out.join("report.txt"), &text)?;
    report.write_pr_csvs(out)?;
    print!("{text}");
    Ok(())
}

fn cmd_bench(a: &BenchArgs, seed: u64, grid: &GridConfig, out: &Path) -> Result<(), Failure> {
    unit_interval("threshold", a.threshold)?;
    let nms = a.nms.config()?;
    if a.repetitions == 0 || a.frames == 0 {
        return Err(invalid("--frames and --repetitions must be positive"));
    }
    let (frames, source) = if let Some(p) = &a.tensors {
        let t = read_tensors(p)?;
        if let Some(bad) = t.iter().find(|t| t.n() != grid.n()) {
            return Err(Failure::Runtime(format!(
                "{} holds an n={} tensor but --grid-n is {}",
                p.display(),
                bad.n(),
                grid.n()
            )));
        }
        (t, p.display().to_string())
    } else if let (Some(m), Some(d)) = (&a.model, &a.data) {
        let scenes = read_annotations(d)?;
        let params = load_params_for(m, grid, scenes.first().map_or(0, |s| s.features.len()))?;
        let t = scenes
            .iter()
            .take(a.frames)
            .map(|s| forward(&params, &s.features))
            .collect::<Result<Vec<_>, _>>()?;
        (t, m.display().to_string())
    } else {
        (
            synthetic_frames(grid, a.frames, a.hot, seed)?,
            format!("synthetic hot={}", a.hot),
        )
    };
    let report = bench_pipeline(&frames, grid, a.threshold, &nms, None, a.repetitions)?;
    let text = format!("grid_n={}\nsource={source}\n{}", grid.n(), report.render());
    create_out(out)?;
    fs::write(out.join("bench.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn listing(s: &mut String, title: &str, dets: &[Detection]) {
    let _ = writeln!(s, "  {title} ({}):", dets.len());
    for d in dets {
        let _ = writeln!(
            s,
            "    {:<10} score={:.4} cx={:.4} cy={:.4} w={:.4} h={:.4}",
            CLASS_NAMES[d.class_id], d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
        );
    }
}

fn cmd_nms_demo(a: &NmsDemoArgs, dets_path: &Path, out: &Path) -> Result<(), Failure> {
    let nms = a.nms.config()?;
    let frames = read_detections(dets_path)?;
    let mut text = String::new();
    for f in frames.iter().take(a.limit) {
        let after = gridsight_core::nms_scale_synthesis(&f.dets, &nms);
        let _ = writeln!(text, "frame {}", f.id);
        listing(&mut text, "before", &f.dets);
        listing(&mut text, "after", &after);
    }
    create_out(out)?;
    fs::write(out.join("nms_demo.txt"), &text)?;
    print!("{text}");
    Ok(())
}
