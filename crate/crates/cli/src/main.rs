use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use draft_attention::harness::bench::{bench, write_csv};
use draft_attention::harness::config::{DataMode, Preset, RunConfig};
use draft_attention::harness::run::{run_heads, RunReport};
use draft_attention::harness::synth::{gen_synthetic, validate_inputs, Synthetic};
use draft_attention::harness::verify::{run_bound_suite, BoundSuiteConfig};
use draft_attention::mask::{decode_bitmap, encode_bitmap, MaskExport};
use draft_attention::sparse::dense_masked_attention;
use draft_attention::{
    gen_reorder_index, gen_restore_index, mask_density_stats, permute_rows, read_matrix,
    write_matrix, AttnScale, LatentLayout, Matrix, PoolMode, Precision, Scalar, SelectOn,
};

#[derive(Parser)]
#[command(name = "draftattn", version, about = "Draft-guided block-sparse attention tools")]
struct Cli {
    /// Floating-point precision (single or double).
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// PRNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic Q, K, V matrices.
    Gen(GenArgs),
    /// Run the pipeline on generated or file inputs.
    Run(RunArgs),
    /// Time dense against draft-sparse attention.
    Bench(BenchArgs),
    /// Randomised check of the logit error bounds.
    VerifyBounds(VerifyArgs),
    /// Print the token reordering permutation as JSON.
    Reorder(ReorderArgs),
    /// Mask density statistics as JSON.
    MaskStats(MaskStatsArgs),
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Latent resolution preset (512p or 768p) with 8x16 patches.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    patch_h: Option<usize>,
    #[arg(long)]
    patch_w: Option<usize>,
    /// Head dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// avg or max.
    #[arg(long)]
    pool: Option<PoolMode>,
    /// logits or softmax.
    #[arg(long)]
    select_on: Option<SelectOn>,
    #[arg(long, value_parser = on_off)]
    force_row_keep: Option<bool>,
    /// gaussian or smooth.
    #[arg(long)]
    data_mode: Option<DataMode>,
    /// One mask for all heads, selected on head-averaged draft scores.
    #[arg(long)]
    shared_head_mask: bool,
}

impl ConfigArgs {
    fn resolve(&self, cli: &Cli) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_config_str(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            let (h, w) = p.latent_hw();
            cfg.height = h;
            cfg.width = w;
            cfg.patch_h = Preset::PATCH_H;
            cfg.patch_w = Preset::PATCH_W;
        }
        macro_rules! take {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { cfg.$field = v; })*};
        }
        take!(frames, height, width, patch_h, patch_w, d, heads, sparsity, pool, select_on, force_row_keep, data_mode);
        if self.shared_head_mask {
            cfg.shared_head_mask = true;
        }
        if let Some(p) = cli.precision {
            cfg.precision = p;
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory receiving q.datn, k.datn, v.datn and config.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long, requires_all = ["k", "v"])]
    q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    v: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Output matrix file (DATN).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report destination; `-` for stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Check every head against the dense masked-softmax oracle.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Sparsities to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,0.55,0.75,0.9")]
    sweep: Vec<f64>,
    /// Repetitions per timing (at least 3).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Attach head-0 bound checks to every record.
    #[arg(long)]
    bounds: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Skip grid points with more tokens than this.
    #[arg(long, default_value_t = 512)]
    n_max: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    frames: Vec<usize>,
    /// Patches per frame along the height.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    grid_h: Vec<usize>,
    /// Patches per frame along the width.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    grid_w: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    patch_h: usize,
    #[arg(long, default_value_t = 4)]
    patch_w: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
    d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "gaussian,smooth")]
    modes: Vec<DataMode>,
    /// Sparsities to check; keep ratio is 1 - sparsity.
    #[arg(long, value_delimiter = ',', default_value = "0.9,0.75,0.5")]
    sparsity: Vec<f64>,
    /// Per-record JSON output.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReorderArgs {
    #[arg(long, default_value_t = 1)]
    frames: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    patch_h: usize,
    #[arg(long)]
    patch_w: usize,
}

#[derive(Args)]
struct MaskStatsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    input: InputArgs,
    /// Summarise an existing mask bitmap instead of computing masks.
    #[arg(long, conflicts_with_all = ["q", "k", "v"])]
    bitmap: Option<PathBuf>,
    /// Include the kept coordinates of every mask.
    #[arg(long)]
    export: bool,
    /// Write one bitmap per head (`head<h>.damk`) into this directory.
    #[arg(long)]
    bitmap_dir: Option<PathBuf>,
}

/// Run outcome; `Violation` maps to exit code 1.
enum Status {
    Ok,
    Violation(String),
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if path.as_os_str() == "-" {
        println!("{text}");
    } else {
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn load_inputs<T: Scalar>(cfg: &mut RunConfig, input: &InputArgs) -> Result<Synthetic<T>> {
    let data = match (&input.q, &input.k, &input.v) {
        (Some(q), Some(k), Some(v)) => {
            cfg.data_mode = DataMode::File;
            let load = |p: &PathBuf| -> Result<Matrix<T>> {
                let m = read_matrix(p).with_context(|| format!("reading {}", p.display()))?;
                if m.precision() != cfg.precision {
                    log::info!("{}: converting {} to {}", p.display(), m.precision(), cfg.precision);
                }
                Ok(m.to_matrix())
            };
            Synthetic {
                q: load(q)?,
                k: load(k)?,
                v: load(v)?,
            }
        }
        _ => {
            if cfg.data_mode == DataMode::File {
                bail!("data_mode=file needs --q, --k and --v");
            }
            gen_synthetic(cfg)?
        }
    };
    validate_inputs(cfg, &data)?;
    Ok(data)
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<Status> {
    let cfg = args.cfg.resolve(cli)?;
    if cfg.data_mode == DataMode::File {
        bail!("gen needs a gaussian or smooth data mode");
    }
    fs::create_dir_all(&args.out_dir)?;
    fn write<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
        let data = gen_synthetic::<T>(cfg)?;
        write_matrix(dir.join("q.datn"), &data.q)?;
        write_matrix(dir.join("k.datn"), &data.k)?;
        write_matrix(dir.join("v.datn"), &data.v)?;
        Ok(())
    }
    match cfg.precision {
        Precision::Single => write::<f32>(&cfg, &args.out_dir)?,
        Precision::Double => write::<f64>(&cfg, &args.out_dir)?,
    }
    fs::write(args.out_dir.join("config.txt"), cfg.to_config_string())?;
    log::info!("wrote {} tokens x {} columns to {}", cfg.n(), cfg.heads * cfg.d, args.out_dir.display());
    Ok(Status::Ok)
}

/// Max-abs difference per head against the dense oracle, using the masks the
/// run selected.
fn verify_heads<T: Scalar>(
    cfg: &RunConfig,
    layout: &LatentLayout,
    data: &Synthetic<T>,
    out: &draft_attention::harness::run::RunOutput<T>,
) -> Result<Vec<f64>> {
    let pi = gen_reorder_index(layout);
    let restore = gen_restore_index(&pi)?;
    let scale = AttnScale::for_head_dim(cfg.d);
    let mut errs = Vec::with_capacity(cfg.heads);
    for (h, mask) in out.masks.iter().enumerate() {
        let cols = |m: &Matrix<T>| -> Result<Matrix<T>> {
            Ok(permute_rows(&m.column_block(h * cfg.d, cfg.d)?, &pi)?)
        };
        let dense = dense_masked_attention(
            &cols(&data.q)?,
            &cols(&data.k)?,
            &cols(&data.v)?,
            &mask.lift(layout)?,
            scale,
            None,
        )?;
        let want = permute_rows(&dense, &restore)?;
        errs.push(out.output.column_block(h * cfg.d, cfg.d)?.max_abs_diff(&want)?);
    }
    Ok(errs)
}

fn run_typed<T: Scalar>(mut cfg: RunConfig, args: &RunArgs) -> Result<Status> {
    let data = load_inputs::<T>(&mut cfg, &args.input)?;
    let out = run_heads(&cfg, &data)?;
    if let Some(path) = &args.out {
        write_matrix(path, &out.output)?;
    }
    if let Some(path) = &args.report {
        write_json(path, &RunReport::new(&cfg, &out)?)?;
    }
    if args.verify {
        let layout = cfg
            .layout()
            .context("--verify needs a layout the patch tiles exactly")?;
        let errs = verify_heads(&cfg, &layout, &data, &out)?;
        let tol = match T::PRECISION {
            Precision::Single => 1e-5,
            Precision::Double => 1e-12,
        };
        let worst = errs.iter().copied().fold(0.0, f64::max);
        eprintln!("oracle check: max abs error {worst:.3e} (tolerance {tol:e})");
        if worst > tol {
            return Ok(Status::Violation(format!("oracle mismatch {worst:.3e} > {tol:e}")));
        }
    }
    Ok(Status::Ok)
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<Status> {
    let cfg = args.cfg.resolve(cli)?;
    match cfg.precision {
        Precision::Single => run_typed::<f32>(cfg, args),
        Precision::Double => run_typed::<f64>(cfg, args),
    }
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<Status> {
    let base = args.cfg.resolve(cli)?;
    let grid: Vec<RunConfig> = args
        .sweep
        .iter()
        .map(|&sparsity| RunConfig { sparsity, ..base.clone() })
        .collect();
    for cfg in &grid {
        cfg.validate()?;
    }
    let records = bench(&grid, args.reps, args.bounds)?;
    for r in &records {
        println!(
            "n={} sparsity={:.3} dense={:.4}s sparse={:.4}s speedup={:.2}x predicted={:.2}x{}",
            r.n,
            r.config.sparsity,
            r.dense_seconds,
            r.sparse_seconds,
            r.speedup,
            r.predicted_speedup,
            if r.speedup_warning { " (deviates >3x from FLOPs)" } else { "" }
        );
    }
    if let Some(path) = &args.csv {
        write_csv(&records, path)?;
    }
    if let Some(path) = &args.json {
        write_json(path, &records)?;
    }
    let violated = records
        .iter()
        .filter_map(|r| r.bounds)
        .any(|b| !(b.holds_draft && b.holds_mask));
    Ok(if violated {
        Status::Violation("bound violated on a benchmark input".into())
    } else {
        Status::Ok
    })
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs) -> Result<Status> {
    let cfg = BoundSuiteConfig {
        frames: args.frames.clone(),
        grid_h: args.grid_h.clone(),
        grid_w: args.grid_w.clone(),
        patch_h: args.patch_h,
        patch_w: args.patch_w,
        d: args.d.clone(),
        modes: args.modes.clone(),
        keep_ratios: args.sparsity.iter().map(|s| 1.0 - s).collect(),
        trials: args.trials,
        n_max: args.n_max,
        precision: cli.precision.unwrap_or(Precision::Double),
        seed: cli.seed.unwrap_or(0),
    };
    let (records, summary) = run_bound_suite(&cfg)?;
    println!("{summary}");
    if let Some(path) = &args.json {
        write_json(path, &records)?;
    }
    Ok(if summary.all_hold() {
        Status::Ok
    } else {
        Status::Violation(format!(
            "{} draft-bound, {} mask-bound and {} pointwise violations",
            summary.draft_failures, summary.mask_failures, summary.pointwise_failures
        ))
    })
}

fn cmd_reorder(args: &ReorderArgs) -> Result<Status> {
    let layout = LatentLayout::new(args.frames, args.height, args.width, args.patch_h, args.patch_w)?;
    let pi = gen_reorder_index(&layout);
    let restore = gen_restore_index(&pi)?;
    let json = serde_json::json!({
        "n": layout.n(),
        "region_size": layout.region_size(),
        "regions": layout.regions(),
        "forward": pi.forward(),
        "inverse": restore.forward(),
    });
    println!("{}", serde_json::to_string(&json)?);
    Ok(Status::Ok)
}

fn mask_stats_typed<T: Scalar>(mut cfg: RunConfig, args: &MaskStatsArgs) -> Result<Status> {
    let data = load_inputs::<T>(&mut cfg, &args.input)?;
    let out = run_heads(&cfg, &data)?;
    if let Some(dir) = &args.bitmap_dir {
        fs::create_dir_all(dir)?;
        for (h, m) in out.masks.iter().enumerate() {
            fs::write(dir.join(format!("head{h}.damk")), encode_bitmap(m))?;
        }
    }
    let heads: Vec<_> = out
        .masks
        .iter()
        .map(|m| {
            let mut v = serde_json::json!({ "stats": mask_density_stats(m) });
            if args.export {
                v["mask"] = serde_json::to_value(MaskExport::from(m)).expect("plain data");
            }
            v
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "heads": heads }))?);
    Ok(Status::Ok)
}

fn cmd_mask_stats(cli: &Cli, args: &MaskStatsArgs) -> Result<Status> {
    if let Some(path) = &args.bitmap {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let mask = decode_bitmap(&bytes)?;
        let mut v = serde_json::json!({ "stats": mask_density_stats(&mask) });
        if args.export {
            v["mask"] = serde_json::to_value(MaskExport::from(&mask))?;
        }
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(Status::Ok);
    }
    let cfg = args.cfg.resolve(cli)?;
    match cfg.precision {
        Precision::Single => mask_stats_typed::<f32>(cfg, args),
        Precision::Double => mask_stats_typed::<f64>(cfg, args),
    }
}

fn dispatch(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Run(a) => cmd_run(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::VerifyBounds(a) => cmd_verify(cli, a),
        Command::Reorder(a) => cmd_reorder(a),
        Command::MaskStats(a) => cmd_mask_stats(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Violation(msg)) => {
            eprintln!("violation: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
