//! streampaint: synthesize test clips, inpaint them in any of the four
//! modes, and drive the measurement harnesses from the terminal.
//!
//! Settings resolve in three layers: built-in defaults, then a flat
//! `key = value` config file given with `--config`, then command-line
//! flags. Unknown config keys are rejected so typos fail loudly, and every
//! command echoes its full effective configuration into its output. Exit
//! codes are stable: 0 on success, 2 for usage problems, 3 for bad data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use streampaint_core::metrics::{
    self, series_difference, temporal_curves, BenchReport, TemporalCurves,
};
use streampaint_core::pipeline::{run_refined_clip, Pacing, RefinerConfig};
use streampaint_core::scheduler::{run_clip, Mode, RunOutcome, SchedulerConfig};
use streampaint_core::video::{
    read_rvv, read_rvv_masks, stationary_mask, synth_video, write_rvv, write_rvv_masks, Rect,
    SynthConfig, VideoClip,
};
use streampaint_core::weights::{load_wts, StackConfig, WeightSet};
use streampaint_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "streampaint",
    version,
    about = "Streaming video inpainting engine"
)]
struct Cli {
    /// Flat `key = value` config file; command-line flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a clip and its masks, writing both as RVV files.
    Synth(SynthArgs),
    /// Inpaint a clip in one of the four modes.
    Inpaint(InpaintArgs),
    /// Measure throughput, latency, cost, and quality per mode.
    Bench(BenchArgs),
    /// Measure cost and quality across context sizes.
    Sweep(SweepArgs),
    /// Toggle the refined mode's optional context components.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthFlags {
    /// Frame width in pixels.
    #[arg(long)]
    width: Option<usize>,
    /// Frame height in pixels.
    #[arg(long)]
    height: Option<usize>,
    /// Number of frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Number of moving objects.
    #[arg(long)]
    objects: Option<usize>,
    /// Object speed in pixels per frame.
    #[arg(long)]
    speed: Option<f64>,
}

#[derive(Args)]
struct SchedFlags {
    /// Window radius for the offline and online modes.
    #[arg(long)]
    k: Option<u32>,
    /// Streaming memory span.
    #[arg(long)]
    s: Option<u32>,
    /// Refined memory span.
    #[arg(long)]
    sp: Option<u32>,
    /// Reference sampling rate, streaming side.
    #[arg(long)]
    r: Option<u32>,
    /// Reference sampling rate, refined side.
    #[arg(long)]
    rp: Option<u32>,
    /// Refiner window radius.
    #[arg(long)]
    kr: Option<u32>,
    /// Minimum frames between the stream head and the refiner watermark.
    #[arg(long)]
    lag: Option<u32>,
    /// Refiner window stride (defaults to the window size).
    #[arg(long)]
    stride: Option<u32>,
    /// Refiner pacing: synchronous or free-running.
    #[arg(long)]
    pacing: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output video path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output mask path.
    #[arg(long, value_name = "PATH")]
    masks: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Args)]
struct InpaintArgs {
    /// Inpainting mode: offline, online, memory, or refined.
    #[arg(long)]
    mode: Option<String>,
    /// Input video path.
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    /// Input mask path.
    #[arg(long, value_name = "PATH")]
    masks: Option<PathBuf>,
    /// Output video path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Report path; defaults to the output path plus ".report.txt".
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Seed used for weight initialization when no weight file is given.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight file (WTS1); omitted, weights are seeded deterministically.
    #[arg(long, value_name = "PATH")]
    weights: Option<PathBuf>,
    #[command(flatten)]
    sched: SchedFlags,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated modes to measure.
    #[arg(long)]
    modes: Option<String>,
    /// Seed for the synthesized clip and the weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the report text to this file.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthFlags,
    #[command(flatten)]
    sched: SchedFlags,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated context sizes, strictly increasing.
    #[arg(long)]
    contexts: Option<String>,
    /// Comma-separated modes (online and/or memory).
    #[arg(long)]
    modes: Option<String>,
    /// Seed for the synthesized clip and the weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the table to this file.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Seed for the synthesized clip and the weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the table to this file.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthFlags,
    #[command(flatten)]
    sched: SchedFlags,
}

/// Every key a config file may set. Flags use the same names.
const CONFIG_KEYS: &[&str] = &[
    "mode", "modes", "in", "masks", "out", "report", "k", "s", "sp", "r", "rp", "kr", "lag",
    "stride", "pacing", "seed", "weights", "width", "height", "frames", "objects", "speed",
    "contexts",
];

struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::config(format!(
                        "config line {} is not 'key = value': {raw}",
                        lineno + 1
                    )));
                };
                let key = key.trim();
                if !CONFIG_KEYS.contains(&key) {
                    return Err(Error::config(format!("unknown config key '{key}'")));
                }
                map.insert(key.to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::config(format!("config key '{key}': {e}"))),
        }
    }
}

/// Flag wins over file value wins over default.
fn setting<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.parse(key)?.unwrap_or(default),
    })
}

fn optional<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => Some(v),
        None => file.parse(key)?,
    })
}

fn required<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    optional(flag, file, key)?
        .ok_or_else(|| Error::config(format!("missing required setting '--{key}'")))
}

/// Accumulates the effective configuration for echoing into outputs.
#[derive(Default)]
struct Echo(BTreeMap<String, String>);

impl Echo {
    fn put(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn body(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        parts.join(" ")
    }

    fn line(&self) -> String {
        format!("config\t{}", self.body())
    }
}

fn resolve_synth(
    flags: &SynthFlags,
    file: &FileConfig,
    seed: u64,
    echo: &mut Echo,
) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        width: setting(flags.width, file, "width", d.width)?,
        height: setting(flags.height, file, "height", d.height)?,
        frame_count: setting(flags.frames, file, "frames", d.frame_count)?,
        object_count: setting(flags.objects, file, "objects", d.object_count)?,
        object_speed: setting(flags.speed, file, "speed", d.object_speed)?,
        seed,
        ..d
    };
    echo.put("width", cfg.width);
    echo.put("height", cfg.height);
    echo.put("frames", cfg.frame_count);
    echo.put("objects", cfg.object_count);
    echo.put("speed", cfg.object_speed);
    echo.put("seed", cfg.seed);
    Ok(cfg)
}

fn resolve_sched(
    flags: &SchedFlags,
    file: &FileConfig,
    echo: &mut Echo,
) -> Result<(SchedulerConfig, RefinerConfig)> {
    let ds = SchedulerConfig::default();
    let dr = RefinerConfig::default();
    let sched = SchedulerConfig {
        k: setting(flags.k, file, "k", ds.k)?,
        s: setting(flags.s, file, "s", ds.s)?,
        s_refined: setting(flags.sp, file, "sp", ds.s_refined)?,
        r: setting(flags.r, file, "r", ds.r)?,
        r_refined: setting(flags.rp, file, "rp", ds.r_refined)?,
    };
    let pacing = match optional(flags.pacing.clone(), file, "pacing")? {
        Some(raw) => raw.parse::<Pacing>()?,
        None => dr.pacing,
    };
    let refiner = RefinerConfig {
        k_r: setting(flags.kr, file, "kr", dr.k_r)?,
        lag: setting(flags.lag, file, "lag", dr.lag)?,
        stride: optional(flags.stride, file, "stride")?,
        pacing,
        ..dr
    };
    echo.put("k", sched.k);
    echo.put("s", sched.s);
    echo.put("sp", sched.s_refined);
    echo.put("r", sched.r);
    echo.put("rp", sched.r_refined);
    echo.put("kr", refiner.k_r);
    echo.put("lag", refiner.lag);
    echo.put("stride", refiner.stride());
    echo.put("pacing", refiner.pacing.as_str());
    Ok((sched, refiner))
}

/// Centered box covering roughly a quarter of each axis.
fn default_mask_rect(cfg: &SynthConfig) -> Rect {
    let w = (cfg.width / 4).max(4).min(cfg.width);
    let h = (cfg.height / 4).max(4).min(cfg.height);
    Rect {
        x: (cfg.width - w) / 2,
        y: (cfg.height - h) / 2,
        w,
        h,
    }
}

fn synth_with_masks(cfg: &SynthConfig) -> Result<(VideoClip, VideoClip)> {
    let truth = synth_video(cfg)?;
    let masks = stationary_mask(cfg, default_mask_rect(cfg))?;
    let clip = truth.clone().with_masks(masks)?;
    Ok((truth, clip))
}

fn parse_modes(raw: &str) -> Result<Vec<Mode>> {
    raw.split(',')
        .map(|m| m.trim().parse::<Mode>())
        .collect::<Result<Vec<_>>>()
}

fn load_weights(path: Option<&Path>, seed: u64) -> Result<WeightSet> {
    match path {
        Some(path) => load_wts(path),
        None => WeightSet::seeded(&StackConfig::default(), seed),
    }
}

fn cmd_synth(args: &SynthArgs, file: &FileConfig) -> Result<()> {
    let mut echo = Echo::default();
    let seed = setting(args.seed, file, "seed", SynthConfig::default().seed)?;
    let cfg = resolve_synth(&args.synth, file, seed, &mut echo)?;
    let out = setting(args.out.clone(), file, "out", PathBuf::from("clip.rvv"))?;
    let masks_path = setting(args.masks.clone(), file, "masks", PathBuf::from("masks.rvv"))?;
    echo.put("out", out.display());
    echo.put("masks", masks_path.display());
    let (truth, clip) = synth_with_masks(&cfg)?;
    write_rvv(&truth, &out)?;
    write_rvv_masks(&clip.masks, &masks_path)?;
    println!("{}", echo.line());
    println!(
        "wrote\t{} ({} frames {}x{}) and {}",
        out.display(),
        clip.len(),
        cfg.width,
        cfg.height,
        masks_path.display()
    );
    Ok(())
}

fn run_mode(
    clip: &VideoClip,
    mode: Mode,
    sched: &SchedulerConfig,
    refiner: &RefinerConfig,
    weights: &WeightSet,
) -> Result<RunOutcome> {
    match mode {
        Mode::Refined => Ok(run_refined_clip(clip, sched, refiner, weights)?.run),
        other => run_clip(clip, other, sched, weights),
    }
}

fn cmd_inpaint(args: &InpaintArgs, file: &FileConfig) -> Result<()> {
    let mut echo = Echo::default();
    let mode: Mode = required(args.mode.clone(), file, "mode")?.parse()?;
    let input = required(args.input.clone(), file, "in")?;
    let masks_path: PathBuf = required(args.masks.clone(), file, "masks")?;
    let out = required(args.out.clone(), file, "out")?;
    let report_path = match optional(args.report.clone(), file, "report")? {
        Some(p) => p,
        None => PathBuf::from(format!("{}.report.txt", out.display())),
    };
    let seed = setting(args.seed, file, "seed", 42u64)?;
    let weights_path = optional(args.weights.clone(), file, "weights")?;
    let (sched, refiner) = resolve_sched(&args.sched, file, &mut echo)?;
    echo.put("mode", mode.as_str());
    echo.put("in", input.display());
    echo.put("masks", masks_path.display());
    echo.put("out", out.display());
    echo.put("report", report_path.display());
    echo.put("seed", seed);
    echo.put(
        "weights",
        weights_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "seeded".to_string()),
    );

    let video = read_rvv(&input)?;
    let masks = read_rvv_masks(&masks_path)?;
    let clip = video.with_masks(masks)?;
    let weights = load_weights(weights_path.as_deref(), seed)?;
    let run = run_mode(&clip, mode, &sched, &refiner, &weights)?;
    let rendered = VideoClip::new(run.outputs.clone(), Vec::new(), clip.fps_nominal)?;
    write_rvv(&rendered, &out)?;

    let report = BenchReport::from_run(&run, None, echo.body())?;
    let mut text = report.render_text();
    text.push_str(&report.render_frame_table());
    fs::write(&report_path, &text)?;
    print!("{}", report.render_text());
    println!("wrote\t{} and {}", out.display(), report_path.display());
    Ok(())
}

fn curves_table(mode_curves: &[(Mode, TemporalCurves)]) -> Result<String> {
    let mut s = String::from("frame");
    for (mode, _) in mode_curves {
        let _ = write!(s, "\tpsnr_{m}\tpsnr_smooth_{m}", m = mode.as_str());
    }
    let offline = mode_curves.iter().find(|(m, _)| *m == Mode::Offline);
    let diffs: Vec<(Mode, Vec<f64>)> = match offline {
        Some((_, reference)) => mode_curves
            .iter()
            .filter(|(m, _)| *m != Mode::Offline)
            .map(|(m, c)| {
                series_difference(&c.psnr_smooth, &reference.psnr_smooth).map(|d| (*m, d))
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    for (mode, _) in &diffs {
        let _ = write!(s, "\tpsnr_gap_{}", mode.as_str());
    }
    s.push('\n');
    let frames = mode_curves[0].1.psnr_raw.len();
    for f in 0..frames {
        let _ = write!(s, "{f}");
        for (_, c) in mode_curves {
            let _ = write!(s, "\t{:.4}\t{:.4}", c.psnr_raw[f], c.psnr_smooth[f]);
        }
        for (_, d) in &diffs {
            let _ = write!(s, "\t{:.4}", d[f]);
        }
        s.push('\n');
    }
    Ok(s)
}

fn cmd_bench(args: &BenchArgs, file: &FileConfig) -> Result<()> {
    let mut echo = Echo::default();
    let seed = setting(args.seed, file, "seed", SynthConfig::default().seed)?;
    let synth_cfg = resolve_synth(&args.synth, file, seed, &mut echo)?;
    let (sched, refiner) = resolve_sched(&args.sched, file, &mut echo)?;
    let modes_raw = setting(
        args.modes.clone(),
        file,
        "modes",
        "offline,online,memory,refined".to_string(),
    )?;
    let modes = parse_modes(&modes_raw)?;
    echo.put("modes", &modes_raw);

    let (truth, clip) = synth_with_masks(&synth_cfg)?;
    let weights = WeightSet::seeded(&StackConfig::default(), seed)?;
    let mut text = String::new();
    let _ = writeln!(text, "{}", echo.line());
    let mut mode_curves = Vec::new();
    for mode in &modes {
        let run = run_mode(&clip, *mode, &sched, &refiner, &weights)?;
        let config = metrics::echo_config(*mode, &sched, &refiner);
        let report = BenchReport::from_run(&run, Some(&truth.frames), config)?;
        text.push_str(&report.render_text());
        text.push('\n');
        mode_curves.push((*mode, temporal_curves(&run.outputs, &truth.frames)?));
    }
    text.push_str(&curves_table(&mode_curves)?);
    print!("{text}");
    if let Some(out) = optional(args.out.clone(), file, "out")? {
        fs::write(&out, &text)?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, file: &FileConfig) -> Result<()> {
    let mut echo = Echo::default();
    let seed = setting(args.seed, file, "seed", SynthConfig::default().seed)?;
    let synth_cfg = resolve_synth(&args.synth, file, seed, &mut echo)?;
    let contexts_raw = setting(args.contexts.clone(), file, "contexts", "2,4,8,16".to_string())?;
    let contexts: Vec<u32> = contexts_raw
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<u32>()
                .map_err(|e| Error::config(format!("context size '{}': {e}", c.trim())))
        })
        .collect::<Result<_>>()?;
    let modes_raw = setting(args.modes.clone(), file, "modes", "online,memory".to_string())?;
    let modes = parse_modes(&modes_raw)?;
    echo.put("contexts", &contexts_raw);
    echo.put("modes", &modes_raw);

    let (truth, clip) = synth_with_masks(&synth_cfg)?;
    let weights = WeightSet::seeded(&StackConfig::default(), seed)?;
    let result = metrics::sweep(&clip, &truth.frames, &modes, &contexts, &weights)?;
    let mut text = String::new();
    let _ = writeln!(text, "{}", echo.line());
    text.push_str(&result.render_tsv());
    for mode in &modes {
        if let Some(exp) = result.cost_exponent(*mode) {
            let _ = writeln!(text, "cost_exponent_{}\t{exp:.3}", mode.as_str());
        }
    }
    print!("{text}");
    if let Some(out) = optional(args.out.clone(), file, "out")? {
        fs::write(&out, &text)?;
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, file: &FileConfig) -> Result<()> {
    let mut echo = Echo::default();
    let seed = setting(args.seed, file, "seed", SynthConfig::default().seed)?;
    let synth_cfg = resolve_synth(&args.synth, file, seed, &mut echo)?;
    let (sched, refiner) = resolve_sched(&args.sched, file, &mut echo)?;
    let (truth, clip) = synth_with_masks(&synth_cfg)?;
    let weights = WeightSet::seeded(&StackConfig::default(), seed)?;
    let table = metrics::ablate(&clip, &truth.frames, &sched, &refiner, &weights)?;
    let mut text = String::new();
    let _ = writeln!(text, "{}", echo.line());
    text.push_str(&table.render_tsv());
    print!("{text}");
    if let Some(out) = optional(args.out.clone(), file, "out")? {
        fs::write(&out, &text)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(args) => cmd_synth(args, &file),
        Command::Inpaint(args) => cmd_inpaint(args, &file),
        Command::Bench(args) => cmd_bench(args, &file),
        Command::Sweep(args) => cmd_sweep(args, &file),
        Command::Ablate(args) => cmd_ablate(args, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
