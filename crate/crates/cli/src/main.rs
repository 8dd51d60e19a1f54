use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use std::path::{Path, PathBuf};
use wristvs::annotation::{annotate_sequence, write_annotations, AnnotationInput, DiscardPolicy};
use wristvs::bench::{
    format_divergence_report, format_report, run_comparison_with, run_divergence_scenario,
    sample_hemisphere, write_comparison_csv,
};
use wristvs::config::ConfigFile;
use wristvs::geometry::{rot_x, Pose};
use wristvs::pipeline::{parse_event_log, replay_session, PipelineContext};
use wristvs::servo::{simulate_episode, write_trace_csv, ControllerKind};
use wristvs::vision::{shapes, CameraIntrinsics, SceneObject};
use wristvs::wrist::JointState;

/// Simulator and benchmark harness for a camera-in-palm prosthetic wrist.
#[derive(Parser)]
#[command(name = "wristvs", version, about)]
struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed for sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for generated files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Output format for report files.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads for parallel episodes (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Benchmark protocols comparing the two controllers.
    Bench {
        #[command(subcommand)]
        which: BenchCmd,
    },
    /// Single-episode and session simulation.
    Sim {
        #[command(subcommand)]
        which: SimCmd,
    },
    /// Chain camera displacements into per-frame poses and part masks.
    Annotate(AnnotateArgs),
    /// Sample hemisphere viewpoints and write them out.
    GenViewpoints(GenViewpointsArgs),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run both controllers from identical sampled starts and report
    /// convergence and naturalness statistics.
    Compare(CompareArgs),
    /// Two-start divergence scenario: report first-step rotation signs.
    #[command(alias = "fig3")]
    Divergence(SceneArgs),
}

#[derive(Args)]
struct CompareArgs {
    /// Number of sampled starts (episodes per controller).
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct SceneArgs {
    /// Object mesh JSON; the built-in two-part bottle if omitted.
    #[arg(long)]
    object: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SimCmd {
    /// One closed-loop servoing episode from a sampled start.
    Episode(EpisodeArgs),
    /// Replay a trigger-event log through the grasping pipeline.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct EpisodeArgs {
    /// Controller: sibvs or ppibvs.
    #[arg(long, default_value = "ppibvs")]
    controller: String,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// JSON-lines event log: {"t": seconds, "event": "ArmRaised"}.
    #[arg(long)]
    events: PathBuf,
    /// Maximum replay ticks.
    #[arg(long, default_value_t = 2000)]
    max_ticks: u32,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Annotation input JSON (initial pose + displacement chain).
    #[arg(long)]
    input: PathBuf,
    /// Object mesh JSON.
    #[arg(long)]
    object: PathBuf,
    /// Stop the pose chain at the first discarded frame instead of
    /// composing through it.
    #[arg(long)]
    truncate_at_discard: bool,
}

#[derive(Args)]
struct GenViewpointsArgs {
    /// Total number of viewpoints (split evenly over the radius bins).
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[command(flatten)]
    scene: SceneArgs,
}

fn load_scene(args: &SceneArgs) -> Result<SceneObject> {
    match &args.object {
        Some(path) => SceneObject::load_json(path)
            .with_context(|| format!("loading object mesh {}", path.display())),
        None => Ok(shapes::bench_bottle()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker pool")?;
    }
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ConfigFile::default(),
    };
    let params = config.wrist_params()?;
    let cfg = config.controller_config()?;

    match &cli.command {
        Cmd::Bench { which: BenchCmd::Compare(args) } => {
            let scene = load_scene(&args.scene)?;
            let intrinsics = config.intrinsics();
            let mut sampler = config.sampler(scene.centroid_world(), cli.seed);
            if config.sampler_is_default() {
                // desk-scale grasp distances for the comparison protocol
                sampler.radius_range = [0.25, 0.45];
            }
            sampler.radius_bins = 1;
            sampler.points_per_bin = args.n;
            let report = run_comparison_with(&sampler, &scene, &params, &intrinsics, &cfg)?;
            print!("{}", format_report(&report));
            match cli.format {
                Format::Csv => {
                    let mut buf = Vec::new();
                    write_comparison_csv(&mut buf, &report)?;
                    write_file(&cli.out.join("comparison.csv"), &buf)?;
                }
                Format::Json => {
                    write_file(
                        &cli.out.join("comparison.json"),
                        serde_json::to_string_pretty(&report)?.as_bytes(),
                    )?;
                }
            }
        }
        Cmd::Bench { which: BenchCmd::Divergence(scene_args) } => {
            let scene = load_scene(scene_args)?;
            let intrinsics = config.intrinsics();
            let report = run_divergence_scenario(&scene, &params, &intrinsics, &cfg)?;
            print!("{}", format_divergence_report(&report));
            for trace in &report.traces {
                let name = format!(
                    "divergence_{}_{}deg.csv",
                    match trace.controller {
                        ControllerKind::Sibvs => "sibvs",
                        ControllerKind::Ppibvs => "ppibvs",
                    },
                    trace.q0_wfe_deg.round() as i64
                );
                let mut buf = Vec::new();
                write_trace_csv(&mut buf, &trace.result)?;
                write_file(&cli.out.join(name), &buf)?;
            }
            if cli.format == Format::Json {
                write_file(
                    &cli.out.join("divergence.json"),
                    serde_json::to_string_pretty(&report)?.as_bytes(),
                )?;
            }
        }
        Cmd::Sim { which: SimCmd::Episode(args) } => {
            let controller: ControllerKind = args
                .controller
                .parse()
                .map_err(|e: String| anyhow::anyhow!(e))?;
            let scene = load_scene(&args.scene)?;
            let intrinsics = config.intrinsics();
            let mut sampler = config.sampler(scene.centroid_world(), cli.seed);
            sampler.radius_bins = 1;
            sampler.points_per_bin = 1;
            if config.sampler_is_default() {
                sampler.radius_range = [0.25, 0.45];
            }
            let vp = sample_hemisphere(&sampler, &params, &intrinsics)?
                .pop()
                .expect("one viewpoint requested");
            let result = simulate_episode(
                controller,
                &scene,
                &vp.hand_pose,
                &vp.q0,
                &params,
                &intrinsics,
                &cfg,
            )?;
            println!(
                "{}: converged={} iterations={} natural={} final_error={:.5}",
                result.controller,
                result.converged,
                result.iterations,
                result.natural,
                result.final_error_norm
            );
            let mut buf = Vec::new();
            write_trace_csv(&mut buf, &result)?;
            write_file(&cli.out.join("trace.csv"), &buf)?;
            if cli.format == Format::Json {
                write_file(
                    &cli.out.join("episode.json"),
                    serde_json::to_string_pretty(&result)?.as_bytes(),
                )?;
            }
        }
        Cmd::Sim { which: SimCmd::Replay(args) } => {
            let scene = load_scene(&args.scene)?;
            let intrinsics = config.intrinsics();
            let text = std::fs::read_to_string(&args.events)
                .with_context(|| format!("reading {}", args.events.display()))?;
            let events = parse_event_log(&text).context("parsing event log")?;
            // arm held above the object, palm down
            let hand = Pose::new(
                rot_x(std::f64::consts::PI),
                scene.centroid_world() + Vector3::new(0.0, 0.0, 0.35),
            );
            let ctx =
                PipelineContext::new(params, intrinsics, cfg, hand, scene.centroid_world());
            let (records, q_final) =
                replay_session(&events, &scene, &JointState::zero(), &ctx, args.max_ticks)?;
            let mut buf = String::new();
            for r in &records {
                buf.push_str(&serde_json::to_string(r)?);
                buf.push('\n');
            }
            write_file(&cli.out.join("session.jsonl"), buf.as_bytes())?;
            println!(
                "replayed {} ticks; final joints wfe={:.4} wps={:.4} rad",
                records.len(),
                q_final.wfe,
                q_final.wps
            );
        }
        Cmd::Annotate(args) => {
            let input = AnnotationInput::load(&args.input)
                .with_context(|| format!("loading {}", args.input.display()))?;
            let object = SceneObject::load_json(&args.object)
                .with_context(|| format!("loading object mesh {}", args.object.display()))?;
            // annotation output renders at full camera resolution
            let intrinsics = if cli.config.is_some() {
                config.intrinsics()
            } else {
                CameraIntrinsics::default_full()
            };
            let policy = if args.truncate_at_discard {
                DiscardPolicy::TruncateAtDiscard
            } else {
                DiscardPolicy::ComposeThrough
            };
            let annotations = annotate_sequence(&input, &object, &intrinsics, policy)?;
            write_annotations(&annotations, &cli.out)?;
            println!(
                "annotated {} frames into {}",
                annotations.len(),
                cli.out.display()
            );
        }
        Cmd::GenViewpoints(args) => {
            let scene = load_scene(&args.scene)?;
            let intrinsics = config.intrinsics();
            let mut sampler = config.sampler(scene.centroid_world(), cli.seed);
            if args.n % sampler.radius_bins != 0 {
                bail!(
                    "--n {} must be divisible by the {} radius bins",
                    args.n,
                    sampler.radius_bins
                );
            }
            sampler.points_per_bin = args.n / sampler.radius_bins;
            let viewpoints = sample_hemisphere(&sampler, &params, &intrinsics)?;
            match cli.format {
                Format::Json => write_file(
                    &cli.out.join("viewpoints.json"),
                    serde_json::to_string_pretty(&viewpoints)?.as_bytes(),
                )?,
                Format::Csv => {
                    let mut buf = String::from(
                        "index,eye_x,eye_y,eye_z,radius,radius_bin,roll,q0_wfe,q0_wps\n",
                    );
                    for (i, v) in viewpoints.iter().enumerate() {
                        buf.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{}\n",
                            i,
                            v.eye[0],
                            v.eye[1],
                            v.eye[2],
                            v.radius,
                            v.radius_bin,
                            v.roll,
                            v.q0.wfe,
                            v.q0.wps
                        ));
                    }
                    write_file(&cli.out.join("viewpoints.csv"), buf.as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

trait SamplerDefaultExt {
    fn sampler_is_default(&self) -> bool;
}

impl SamplerDefaultExt for ConfigFile {
    fn sampler_is_default(&self) -> bool {
        self.sampler.radius_range.is_none()
    }
}
