use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use clotseg::config::{parse_override, RunConfig, SEED_ENV};
use clotseg::data::{generate_phantom, read_mvol, stream_rng, write_mvol, Volume};
use clotseg::gradsuite;
use clotseg::metrics::{report_csv, score_patient};
use clotseg::model::UpAttLlstm;
use clotseg::postprocess::{pipeline, Connectivity, PostConfig};
use clotseg::train::{resume, resume_transfer, train, Checkpoint, Control};
use clotseg::{Error, Mask};

const PROB_CHANNEL: &str = "prob";

#[derive(Parser, Debug)]
#[command(name = "clotseg", version, about = "Thrombus segmentation on multimodal MRI volumes")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom volumes.
    Synth(SynthArgs),
    /// Train a model on a directory of volumes.
    Train(TrainArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Predict a probability map for one volume.
    Infer(InferArgs),
    /// Clean up a probability map into a binary mask.
    Postprocess(PostArgs),
    /// Finite-difference check of every differentiable layer.
    Gradcheck,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Config file with `synth.*` keys; merged after `--config`.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue an interrupted run from this checkpoint.
    #[arg(long, conflicts_with = "transfer")]
    resume: Option<PathBuf>,
    /// Start from these weights and fine-tune for `train.extra_epochs_on_resume` epochs.
    #[arg(long)]
    transfer: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Probability map output.
    #[arg(long)]
    out: PathBuf,
    /// Also write a binary mask, post-processed when `--post` is given.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long, requires = "mask_out")]
    post: bool,
}

#[derive(Args, Debug)]
struct PostArgs {
    #[arg(long)]
    prob: PathBuf,
    #[arg(long)]
    lesion: Option<PathBuf>,
    #[arg(long)]
    npixels: Option<usize>,
    #[arg(long)]
    ndist: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    big: Option<f64>,
    #[arg(long)]
    connectivity: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Exit status with its message.
enum Failure {
    /// Bad arguments, config or missing inputs.
    Invalid(String),
    /// Anything that fails once the run has started.
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

fn invalid(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

type CliResult<T = ()> = Result<T, Failure>;

fn require(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn overrides(cli: &Cli) -> CliResult<Vec<(String, String)>> {
    cli.set.iter().map(|s| parse_override(s).map_err(invalid)).collect()
}

fn resolve(cli: &Cli, extra_file: Option<&Path>, extra: &[(String, String)]) -> CliResult<RunConfig> {
    let mut file = Vec::new();
    for path in cli.config.as_deref().into_iter().chain(extra_file) {
        require(path, "config file")?;
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        file.extend(clotseg::config::parse_pairs(&text).map_err(invalid)?);
    }
    let mut flags = overrides(cli)?;
    flags.extend_from_slice(extra);
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(&file, &flags, env.as_deref()).map_err(invalid)
}

fn announce(cfg: &RunConfig) {
    eprintln!("# resolved config");
    eprint!("{}", cfg.render());
    eprintln!("# seed = {}", cfg.seed);
}

fn mvol_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| invalid(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mvol"))
        .collect();
    files.sort();
    Ok(files)
}

fn load(path: &Path) -> CliResult<Volume> {
    read_mvol(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult {
    if let Some(s) = &a.spec {
        require(s, "spec file")?;
    }
    let extra: Vec<(String, String)> = a.seed.map(|s| ("seed".to_string(), s.to_string())).into_iter().collect();
    let cfg = resolve(cli, a.spec.as_deref(), &extra)?;
    announce(&cfg);
    fs::create_dir_all(&a.out).map_err(runtime)?;
    for i in 0..a.count {
        let vol = generate_phantom(&cfg.phantom, &mut stream_rng(cfg.seed, i as u64)).map_err(runtime)?;
        let path = a.out.join(format!("phantom_{i:04}.mvol"));
        write_mvol(&vol, &path).map_err(runtime)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn build_model(cfg: &RunConfig) -> CliResult<UpAttLlstm<f32>> {
    UpAttLlstm::new(&cfg.model, cfg.seed).map_err(invalid)
}

fn run_train(cli: &Cli, a: &TrainArgs) -> CliResult {
    require(&a.data, "data directory")?;
    for p in a.resume.iter().chain(&a.transfer) {
        require(p, "checkpoint")?;
    }
    let cfg = resolve(cli, None, &[])?;
    announce(&cfg);
    let files = mvol_files(&a.data)?;
    if files.is_empty() {
        return Err(invalid(format!("no .mvol files in {}", a.data.display())));
    }
    let dataset = files.iter().map(|f| load(f)).collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(runtime)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(a.out.clone());
    let snapshot = cfg.to_pairs();
    let mut model = build_model(&cfg)?;
    let observe = |r: &clotseg::train::EpochReport, _: &UpAttLlstm<f32>| {
        eprintln!("epoch {} loss {:.6} g {}", r.epoch, r.mean_loss, r.g_value);
        Control::Continue
    };
    let outcome = if let Some(p) = &a.resume {
        let ck = Checkpoint::<f32>::load(p).map_err(runtime)?;
        resume(&mut model, &ck, &dataset, &tc, observe)
    } else if let Some(p) = &a.transfer {
        let ck = Checkpoint::<f32>::load(p).map_err(runtime)?;
        resume_transfer(&mut model, &ck, &dataset, &tc, &snapshot, observe)
    } else {
        train(&mut model, &dataset, &tc, &snapshot, observe)
    }
    .map_err(|e| match e {
        Error::Config(_) => invalid(e),
        _ => runtime(e),
    })?;
    outcome.checkpoint.save(a.out.join("final.ckpt")).map_err(runtime)?;
    fs::write(a.out.join("log.csv"), clotseg::train::log_csv(&outcome.log)).map_err(runtime)?;
    println!("{}", a.out.join("final.ckpt").display());
    Ok(())
}

fn prediction_mask(vol: &Volume, threshold: f64) -> CliResult<Mask> {
    if let Some(m) = vol.thrombus().or_else(|| vol.masks.first().map(|(_, m)| m)) {
        return Ok(m.clone());
    }
    vol.channels
        .first()
        .map(|c| c.threshold(threshold as f32))
        .ok_or_else(|| runtime("prediction file has neither a mask nor a channel"))
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult {
    require(&a.pred, "prediction directory")?;
    require(&a.gt, "ground-truth directory")?;
    let cfg = resolve(cli, None, &[])?;
    announce(&cfg);
    let mut scores = Vec::new();
    for gt_path in mvol_files(&a.gt)? {
        let name = gt_path.file_name().expect("listed file");
        let pred_path = a.pred.join(name);
        if !pred_path.exists() {
            return Err(invalid(format!("no prediction for {}", name.to_string_lossy())));
        }
        let gt_vol = load(&gt_path)?;
        let gt = gt_vol
            .thrombus()
            .ok_or_else(|| runtime(format!("{} has no thrombus mask", gt_path.display())))?;
        let pred = prediction_mask(&load(&pred_path)?, cfg.threshold)?;
        let id = gt_path.file_stem().expect("listed file").to_string_lossy().into_owned();
        scores.push(score_patient(id, &pred, gt).map_err(runtime)?);
    }
    if scores.is_empty() {
        return Err(invalid(format!("no .mvol files in {}", a.gt.display())));
    }
    let csv = report_csv(&scores).map_err(runtime)?;
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(runtime)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn infer(cli: &Cli, a: &InferArgs) -> CliResult {
    require(&a.ckpt, "checkpoint")?;
    require(&a.input, "input volume")?;
    let ck = Checkpoint::<f32>::load(&a.ckpt).map_err(runtime)?;
    let flags = overrides(cli)?;
    let env = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(&ck.config, &flags, env.as_deref()).map_err(invalid)?;
    announce(&cfg);
    let mut model = build_model(&cfg)?;
    model.params.load_from(&ck.params).map_err(invalid)?;
    let vol = load(&a.input)?;
    let prob = model.predict_volume(&vol, cfg.stride).map_err(runtime)?;
    let mut out = Volume::single(PROB_CHANNEL, prob.clone());
    out.spacing = vol.spacing;
    write_mvol(&out, &a.out).map_err(runtime)?;
    if let Some(mask_path) = &a.mask_out {
        let mask = if a.post {
            pipeline(&prob, vol.lesion(), &cfg.post, vol.spacing_f64()).map_err(runtime)?
        } else {
            prob.threshold(cfg.threshold as f32)
        };
        let mut mv = Volume::mask_only(clotseg::data::THROMBUS, mask);
        mv.spacing = vol.spacing;
        write_mvol(&mv, mask_path).map_err(runtime)?;
    }
    Ok(())
}

fn postprocess(cli: &Cli, a: &PostArgs) -> CliResult {
    require(&a.prob, "probability map")?;
    if let Some(l) = &a.lesion {
        require(l, "lesion mask")?;
    }
    let cfg = resolve(cli, None, &[])?;
    let post = PostConfig {
        n_pixels: a.npixels.unwrap_or(cfg.post.n_pixels),
        n_dist: a.ndist.unwrap_or(cfg.post.n_dist),
        threshold: a.threshold.unwrap_or(cfg.post.threshold),
        alpha_big: a.big.unwrap_or(cfg.post.alpha_big),
        connectivity: match &a.connectivity {
            Some(c) => Connectivity::parse(c).ok_or_else(|| invalid(format!("connectivity must be 6 or 26, got {c}")))?,
            None => cfg.post.connectivity,
        },
        ..cfg.post.clone()
    };
    post.validate().map_err(invalid)?;
    announce(&cfg);
    let pv = load(&a.prob)?;
    let prob = pv
        .channels
        .first()
        .ok_or_else(|| runtime("probability file has no channel"))?;
    let lesion = match &a.lesion {
        Some(p) => {
            let lv = load(p)?;
            Some(
                lv.lesion()
                    .or_else(|| lv.masks.first().map(|(_, m)| m))
                    .cloned()
                    .ok_or_else(|| runtime(format!("{} has no mask", p.display())))?,
            )
        }
        None => None,
    };
    let mask = pipeline(prob, lesion.as_ref(), &post, pv.spacing_f64()).map_err(runtime)?;
    let mut mv = Volume::mask_only(clotseg::data::THROMBUS, mask);
    mv.spacing = pv.spacing;
    write_mvol(&mv, &a.out).map_err(runtime)
}

fn gradcheck(cli: &Cli) -> CliResult {
    let cfg = resolve(cli, None, &[])?;
    announce(&cfg);
    let results = gradsuite::run_all(cfg.seed).map_err(runtime)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<18} max_rel_error={:.3e} coords={}",
            r.name, r.report.max_rel_error, r.report.coords_checked
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} gradient checks above {:e}", gradsuite::TOLERANCE)));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Postprocess(a) => postprocess(cli, a),
        Command::Gradcheck => gradcheck(cli),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
