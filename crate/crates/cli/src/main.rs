//! Single binary for the full workflow: dataset generation, teacher
//! and critic training, scene generation, evaluation, and the
//! four-config ablation.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error.
//! `COMO_THREADS` caps internal parallelism (default: all cores).

mod prompt;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use como_core::diffusion::{heldout_loss, train_denoiser, TrainConfig, WeightMode};
use como_core::distill::{generate, AblationVariant, GenConfig};
use como_core::metrics::{ablation_report, builtin_prompt_suite, evaluate_scene, MetricsReport};
use como_core::numcore::{CheckMode, Rng};
use como_core::render::load_scene;
use como_core::teachers::{
    critic_slot_accuracy, save_critic, save_denoiser, train_critic, CriticTrainConfig,
    DenoiserNet, LayoutModel, MultiviewModel, TeacherSet,
};
use como_core::world::{make_layout_dataset, make_mv_dataset, read_dataset, Dataset, ScenePrompt};

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<como_core::Error> for CliError {
    fn from(e: como_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "como",
    about = "Controllable multi-object 3D generation from prompts and 2D boxes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the layout and multi-view training datasets.
    GenData(GenDataArgs),
    /// Train the layout teacher, the multi-view teacher, and the critic.
    TrainTeachers(TrainArgs),
    /// Optimize a 3D scene from a prompt and per-entity boxes.
    Generate(GenerateArgs),
    /// Score a scene file against a prompt.
    Eval(EvalArgs),
    /// Run the four-config ablation over a prompt suite.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for layout.ds and multiview.ds.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_layout: usize,
    #[arg(long, default_value_t = 2000)]
    n_mv: usize,
    #[arg(long, default_value_t = 4)]
    views_per_scene: usize,
    #[arg(long, default_value_t = 32)]
    image_res: usize,
    #[arg(long, default_value_t = 32)]
    grid_dim: usize,
    #[arg(long, default_value_t = 11)]
    seed_data: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding layout.ds and multiview.ds.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the .wts checkpoints and loss traces.
    #[arg(long)]
    out: PathBuf,
    /// Which model to train.
    #[arg(long, default_value = "all", value_parser = ["all", "layout", "mv", "critic"])]
    only: String,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4000)]
    critic_steps: usize,
    #[arg(long, default_value_t = 16)]
    critic_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    critic_lr: f64,
    #[arg(long, default_value_t = 0.03)]
    critic_noise: f64,
    #[arg(long, default_value_t = 64)]
    t_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_min: f64,
    #[arg(long, default_value_t = 0.02)]
    beta_max: f64,
    /// Loss weighting: "one-minus-alpha-bar" or "one".
    #[arg(long, default_value = "one-minus-alpha-bar", value_parser = ["one-minus-alpha-bar", "one"])]
    weight_mode: String,
    /// Fraction of records held out for evaluation.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[arg(long, default_value_t = 7)]
    seed_train: u64,
}

#[derive(Args)]
struct GenerateArgs {
    /// Directory with layout.wts, multiview.wts, critic.wts.
    #[arg(long)]
    teachers: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Structured prompt, e.g. "two:sphere:red,one:cube:blue".
    #[arg(long)]
    prompt: Option<String>,
    /// One box per entity as "x0,y0,x1,y1"; order matches the prompt.
    #[arg(long = "box")]
    boxes: Vec<String>,
    /// JSON config (a previous run's config.json reproduces that run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation switch: full, no_lsds, no_mvsds, no_lmsd.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    seed_gen: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    box_seeding: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    /// Scene file (.cvox).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    teachers: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long = "box")]
    boxes: Vec<String>,
    /// Write metrics here as JSON (otherwise print to stdout only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    teachers: PathBuf,
    /// Output directory for ablation.csv.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON prompt suite overriding the built-in one.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Number of seeds per (config, prompt) cell.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 3)]
    seed_gen: u64,
    /// Restrict to a subset of configs (comma-separated names).
    #[arg(long)]
    configs: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
}

/// The fully resolved run description written into every run
/// directory; feeding it back through --config reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSpec {
    prompt: String,
    boxes: Vec<[f64; 4]>,
    #[serde(flatten)]
    gen: GenConfig,
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::TrainTeachers(args) => cmd_train_teachers(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("COMO_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(args: GenDataArgs) -> CliResult {
    if args.n_layout == 0 || args.n_mv == 0 {
        return Err(usage("--n-layout and --n-mv must be positive"));
    }
    if args.views_per_scene < 2 {
        return Err(usage("--views-per-scene must be at least 2"));
    }
    std::fs::create_dir_all(&args.out)?;
    let mut rng = Rng::new(args.seed_data);
    let layout_path = args.out.join("layout.ds");
    let layout = make_layout_dataset(
        &layout_path,
        args.n_layout,
        &mut rng,
        args.image_res,
        args.grid_dim,
    )?;
    println!(
        "wrote {} layout records to {}",
        layout.len(),
        layout_path.display()
    );
    let mv_path = args.out.join("multiview.ds");
    let mv = make_mv_dataset(
        &mv_path,
        args.n_mv,
        &mut rng,
        args.image_res,
        args.grid_dim,
        args.views_per_scene,
    )?;
    println!("wrote {} multi-view records to {}", mv.len(), mv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-teachers

fn write_trace_csv(path: &Path, trace: &[f64]) -> CliResult {
    let mut csv = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn cmd_train_teachers(args: TrainArgs) -> CliResult {
    let weight_mode = match args.weight_mode.as_str() {
        "one" => WeightMode::One,
        _ => WeightMode::OneMinusAlphaBar,
    };
    let schedule = como_core::diffusion::make_schedule(
        args.t_steps,
        args.beta_min,
        args.beta_max,
        weight_mode,
    )?;
    std::fs::create_dir_all(&args.out)?;

    let want = |name: &str| args.only == "all" || args.only == name;
    let train_cfg = TrainConfig {
        steps: args.steps,
        batch: args.batch,
        lr: args.lr,
        check: CheckMode::Fast,
    };

    if want("layout") || want("critic") {
        let Dataset::Layout(records) = read_dataset(&args.data.join("layout.ds"))? else {
            return Err(CliError::Runtime("layout.ds holds the wrong record kind".into()));
        };
        let res = records[0].image.shape()[0];
        let split = records.len() - (records.len() as f64 * args.holdout) as usize;
        let (train, held) = records.split_at(split);

        if want("layout") {
            let mut rng = Rng::new(args.seed_train);
            let mut model = LayoutModel(DenoiserNet::new_layout(args.t_steps, &mut rng));
            let init_loss = heldout_loss(&model, held, &schedule, 4, args.seed_train ^ 0xE7A1);
            let start = std::time::Instant::now();
            let trace = train_denoiser(&mut model, train, &schedule, &train_cfg, &mut rng)?;
            let final_loss = heldout_loss(&model, held, &schedule, 4, args.seed_train ^ 0xE7A1);
            save_denoiser(&args.out.join("layout.wts"), &model.0)?;
            write_trace_csv(&args.out.join("layout_loss.csv"), &trace)?;
            println!(
                "layout teacher: held-out loss {init_loss:.6} -> {final_loss:.6} ({:.1}% reduction) in {:.0}s",
                (1.0 - final_loss / init_loss) * 100.0,
                start.elapsed().as_secs_f64()
            );
        }

        if want("critic") {
            let mut rng = Rng::new(args.seed_train.wrapping_add(2));
            let critic_cfg = CriticTrainConfig {
                steps: args.critic_steps,
                batch: args.critic_batch,
                lr: args.critic_lr,
                noise_aug: args.critic_noise,
            };
            let start = std::time::Instant::now();
            let (critic, trace) = train_critic(train, &critic_cfg, &mut rng)?;
            let acc = critic_slot_accuracy(&critic, held);
            save_critic(&args.out.join("critic.wts"), &critic)?;
            write_trace_csv(&args.out.join("critic_loss.csv"), &trace)?;
            println!(
                "critic: held-out slot-class accuracy {acc:.3} in {:.0}s",
                start.elapsed().as_secs_f64()
            );
        }
        let _ = res;
    }

    if want("mv") {
        let Dataset::Multiview(records) = read_dataset(&args.data.join("multiview.ds"))? else {
            return Err(CliError::Runtime("multiview.ds holds the wrong record kind".into()));
        };
        let res = records[0].ref_image.shape()[0];
        let split = records.len() - (records.len() as f64 * args.holdout) as usize;
        let (train, held) = records.split_at(split);
        let mut rng = Rng::new(args.seed_train.wrapping_add(1));
        let mut model = MultiviewModel(DenoiserNet::new_multiview(args.t_steps, res, &mut rng));
        let init_loss = heldout_loss(&model, held, &schedule, 4, args.seed_train ^ 0xE7A2);
        let start = std::time::Instant::now();
        let trace = train_denoiser(&mut model, train, &schedule, &train_cfg, &mut rng)?;
        let final_loss = heldout_loss(&model, held, &schedule, 4, args.seed_train ^ 0xE7A2);
        save_denoiser(&args.out.join("multiview.wts"), &model.0)?;
        write_trace_csv(&args.out.join("multiview_loss.csv"), &trace)?;
        println!(
            "multi-view teacher: held-out loss {init_loss:.6} -> {final_loss:.6} ({:.1}% reduction) in {:.0}s",
            (1.0 - final_loss / init_loss) * 100.0,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn apply_overrides(cfg: &mut GenConfig, args: &GenerateArgs) -> CliResult {
    if let Some(v) = args.seed_gen {
        cfg.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.box_seeding {
        cfg.box_seeding = v;
    }
    if let Some(name) = &args.ablate {
        let variant = AblationVariant::parse(name)
            .ok_or_else(|| usage(format!("unknown ablation '{name}' (full, no_lsds, no_mvsds, no_lmsd)")))?;
        cfg.apply_ablation(variant);
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let teachers = TeacherSet::load(&args.teachers)?;

    // Resolve config and prompt: flags override --config contents.
    let mut cfg = GenConfig::default();
    let mut prompt_spec: Option<String> = None;
    let mut box_specs: Vec<String> = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        if let Ok(spec) = serde_json::from_str::<RunSpec>(&text) {
            cfg = spec.gen;
            prompt_spec = Some(spec.prompt);
            box_specs = spec
                .boxes
                .iter()
                .map(|b| format!("{},{},{},{}", b[0], b[1], b[2], b[3]))
                .collect();
        } else {
            cfg = serde_json::from_str::<GenConfig>(&text)
                .map_err(|e| usage(format!("cannot parse {}: {e}", path.display())))?;
        }
    }
    if let Some(p) = &args.prompt {
        prompt_spec = Some(p.clone());
    }
    if !args.boxes.is_empty() {
        box_specs = args.boxes.clone();
    }
    apply_overrides(&mut cfg, &args)?;
    cfg.schedule_t = teachers.layout.t_steps;
    if let Some(res) = teachers.multiview.ref_input_res() {
        cfg.render_res = res;
    }

    let prompt_spec = prompt_spec.ok_or_else(|| usage("--prompt is required (or a --config carrying one)"))?;
    let prompt = prompt::parse_prompt(&prompt_spec, &box_specs).map_err(usage)?;

    let start = std::time::Instant::now();
    let out = generate(&prompt, &cfg, &teachers, Some(&args.out))?;
    let report = evaluate_scene(&out.scene, &prompt, &teachers.critic, &cfg.front_camera())?;
    write_metrics(&args.out.join("metrics.json"), &report)?;

    // Supersede the bare config with the full reproducible run spec.
    let spec = RunSpec {
        prompt: prompt_spec,
        boxes: prompt
            .entities
            .iter()
            .map(|e| [e.box2d.x0, e.box2d.y0, e.box2d.x1, e.box2d.y1])
            .collect(),
        gen: cfg,
    };
    let json = serde_json::to_string_pretty(&spec)
        .map_err(|e| CliError::Runtime(format!("config serialization: {e}")))?;
    std::fs::write(args.out.join("config.json"), json)?;

    println!(
        "run complete in {:.0}s: iou {:.3}, count {}/{}, critic {:.3}, consistency {:.3}",
        start.elapsed().as_secs_f64(),
        report.layout_iou,
        report.count_predicted,
        report.count_expected,
        report.critic_score,
        report.view_consistency
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn write_metrics(path: &Path, report: &MetricsReport) -> CliResult {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Runtime(format!("metrics serialization: {e}")))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(args: EvalArgs) -> CliResult {
    let scene = load_scene(&args.scene)?;
    let teachers = TeacherSet::load(&args.teachers)?;
    let prompt = prompt::parse_prompt(&args.prompt, &args.boxes).map_err(usage)?;
    let cfg = GenConfig::default();
    let report = evaluate_scene(&scene, &prompt, &teachers.critic, &cfg.front_camera())?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(format!("metrics serialization: {e}")))?;
    if let Some(out) = &args.out {
        std::fs::write(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Deserialize)]
struct PromptFileEntry {
    id: String,
    prompt: String,
    boxes: Vec<[f64; 4]>,
}

fn load_prompt_suite(path: &Path) -> CliResult<Vec<(String, ScenePrompt)>> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<PromptFileEntry> =
        serde_json::from_str(&text).map_err(|e| usage(format!("bad prompt file: {e}")))?;
    entries
        .into_iter()
        .map(|e| {
            let boxes: Vec<String> = e
                .boxes
                .iter()
                .map(|b| format!("{},{},{},{}", b[0], b[1], b[2], b[3]))
                .collect();
            let prompt = prompt::parse_prompt(&e.prompt, &boxes).map_err(usage)?;
            Ok((e.id, prompt))
        })
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> CliResult {
    let teachers = TeacherSet::load(&args.teachers)?;
    let suite = match &args.prompts {
        Some(path) => load_prompt_suite(path)?,
        None => builtin_prompt_suite(),
    };
    if args.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let mut cfg = GenConfig::default();
    cfg.schedule_t = teachers.layout.t_steps;
    if let Some(res) = teachers.multiview.ref_input_res() {
        cfg.render_res = res;
    }
    if let Some(steps) = args.steps {
        cfg.total_steps = steps;
    }
    let variants: Vec<AblationVariant> = match &args.configs {
        None => AblationVariant::ALL.to_vec(),
        Some(spec) => spec
            .split(',')
            .map(|s| {
                AblationVariant::parse(s.trim())
                    .ok_or_else(|| usage(format!("unknown config '{s}'")))
            })
            .collect::<CliResult<Vec<_>>>()?,
    };
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.seed_gen + i as u64).collect();

    let start = std::time::Instant::now();
    let table = ablation_report(&suite, &cfg, &teachers, &seeds, &variants)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("ablation.csv"), table.csv())?;
    print!("{}", table.table());
    println!(
        "{} cells in {:.0}s; csv in {}",
        table.cells.len(),
        start.elapsed().as_secs_f64(),
        args.out.join("ablation.csv").display()
    );
    Ok(())
}
