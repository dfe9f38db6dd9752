//! `marformer`: dataset synthesis, training, inference, evaluation, cost
//! reports and gradient self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use marformer::complexity::{ablation, estimate_flops, preset_variants, Variant};
use marformer::model::{build_model_with_dtype, gradient_check, load_checkpoint, preset, MarformerConfig};
use marformer::sim::{load_pair, make_dataset, read_manifest, Pair, SimParams, Split};
use marformer::tensor::io::{load_tensor, save_tensor};
use marformer::train::{evaluate, restore_hu, train, TrainConfig, CHECKPOINT_FILE, HU_DATA_RANGE, LOSS_FILE};
use marformer::DType;

const THREADS_ENV: &str = "MARFORMER_THREADS";

#[derive(Parser, Debug)]
#[command(name = "marformer", version, about = "Metal-artifact reduction transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of metal-artifact slice pairs.
    Synth(SynthArgs),
    /// Train a model on a synthetic dataset.
    Train(TrainArgs),
    /// Restore a single MTSR1 slice with a checkpoint.
    Infer(InferArgs),
    /// Report PSNR/SSIM of a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Print analytic parameter and FLOP counts.
    Count(CountArgs),
    /// Compare backward() against finite differences on a small network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    /// Slice extent in pixels; must be a multiple of 8.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 180)]
    angles: usize,
    /// Beam-hardening strength applied to rays through metal.
    #[arg(long, default_value_t = 0.3)]
    beam_hardening: f64,
    /// HU value of inserted metal.
    #[arg(long, default_value_t = 30000.0)]
    metal_hu: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> DType {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model preset: L, B or T.
    #[arg(long, default_value = "T", conflicts_with = "config")]
    preset: String,
    /// TOML model config, instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs (reference setting: 300).
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Batch size (reference setting: 8).
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Peak learning rate of each cosine cycle (reference setting).
    #[arg(long, default_value_t = 1e-3)]
    lr_max: f64,
    /// Final learning rate of each cosine cycle (reference setting).
    #[arg(long, default_value_t = 1e-7)]
    lr_min: f64,
    /// Epochs per cosine cycle before the warm restart (reference setting).
    #[arg(long, default_value_t = 30)]
    restart_period: usize,
    /// Adam β₁ (reference setting).
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    /// Adam β₂ (reference setting).
    #[arg(long, default_value_t = 0.99)]
    beta2: f64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    dtype: Precision,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `[1, H, W]` or `[H, W]` MTSR1 slice in HU.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Metrics CSV path; defaults to `metrics_<split>.csv` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct CostTarget {
    /// L, B, T, or `all`.
    #[arg(long)]
    preset: Option<String>,
    /// table2 (attention ratios), table3a (kernel size) or table3b (expansion).
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    target: CostTarget,
    /// Square input extent for FLOP counting.
    #[arg(long, default_value_t = 400)]
    res: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Fail when the largest relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn init_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().with_context(|| format!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(Some(n))
}

fn print_config(pairs: &[(&str, String)]) {
    eprintln!("[config]");
    for (k, v) in pairs {
        eprintln!("{k} = {v}");
    }
}

fn sim_params(a: &SynthArgs) -> SimParams {
    SimParams { n_angles: a.angles, beam_hardening: a.beam_hardening, metal_hu: a.metal_hu, ..SimParams::default() }
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = sim_params(&a);
    print_config(&[
        ("pairs", a.pairs.to_string()),
        ("size", a.size.to_string()),
        ("seed", a.seed.to_string()),
        ("out", a.out.display().to_string()),
        ("angles", params.n_angles.to_string()),
        ("beam_hardening", params.beam_hardening.to_string()),
        ("metal_hu", params.metal_hu.to_string()),
        ("partial_volume", params.partial_volume.to_string()),
    ]);
    let m = make_dataset(a.pairs, a.size, a.seed, &a.out, &params)?;
    let test = m.split(Split::Test).count();
    println!("wrote {} pairs ({} train, {test} test) to {}", m.rows.len(), m.rows.len() - test, a.out.display());
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<Pair>> {
    let m = read_manifest(dir).with_context(|| format!("reading dataset manifest in {}", dir.display()))?;
    m.split(split).map(|r| load_pair(&m, r).map_err(Into::into)).collect()
}

fn model_config(a: &TrainArgs) -> Result<MarformerConfig> {
    match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(MarformerConfig::from_toml(&text)?)
        }
        None => Ok(preset(&a.preset)?),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let model_cfg = model_config(&a)?;
    let cfg = TrainConfig {
        lr_max: a.lr_max,
        lr_min: a.lr_min,
        beta1: a.beta1,
        beta2: a.beta2,
        restart_period: a.restart_period,
        batch_size: a.batch,
        epochs: a.epochs,
        max_steps: a.max_steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    eprint!("[model]\n{}", model_cfg.to_toml());
    print_config(&[
        ("data", a.data.display().to_string()),
        ("out", a.out.display().to_string()),
        ("dtype", format!("{:?}", a.dtype).to_lowercase()),
        ("epochs", cfg.epochs.to_string()),
        ("batch", cfg.batch_size.to_string()),
        ("max_steps", cfg.max_steps.map_or("none".into(), |s| s.to_string())),
        ("lr_max", cfg.lr_max.to_string()),
        ("lr_min", cfg.lr_min.to_string()),
        ("restart_period", cfg.restart_period.to_string()),
        ("beta1", cfg.beta1.to_string()),
        ("beta2", cfg.beta2.to_string()),
        ("eps", cfg.eps.to_string()),
        ("seed", cfg.seed.to_string()),
    ]);
    let pairs = load_split(&a.data, Split::Train)?;
    if let Some(p) = pairs.first() {
        let s = p.ma.shape();
        model_cfg.check_input_extent(s[s.len() - 2], s[s.len() - 1])?;
    }
    let mut model = build_model_with_dtype(&model_cfg, a.seed, a.dtype.into())?;
    let report = train(&mut model, &pairs, &cfg, Some(&a.out))?;
    let last = report.losses.last().map_or("n/a".to_string(), |r| format!("{:.6}", r.loss));
    println!(
        "trained {} steps on {} pairs; final loss {last}; checkpoint {}; loss curve {}",
        report.steps(),
        pairs.len(),
        a.out.join(CHECKPOINT_FILE).display(),
        a.out.join(LOSS_FILE).display()
    );
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    print_config(&[
        ("ckpt", a.ckpt.display().to_string()),
        ("input", a.input.display().to_string()),
        ("output", a.output.display().to_string()),
    ]);
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let input = load_tensor(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let shaped = match *input.shape() {
        [h, w] => input.reshape(&[1, h, w])?,
        _ => input.clone(),
    };
    let out = restore_hu(&model, &shaped)?.reshape(input.shape())?;
    save_tensor(&a.output, &out)?;
    println!("restored {:?} slice to {}", input.shape(), a.output.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.ckpt.parent().unwrap_or(Path::new(".")).join(format!("metrics_{split}.csv"))
    });
    print_config(&[
        ("ckpt", a.ckpt.display().to_string()),
        ("data", a.data.display().to_string()),
        ("split", split.to_string()),
        ("out", out.display().to_string()),
        ("data_range_hu", HU_DATA_RANGE.to_string()),
    ]);
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let pairs = load_split(&a.data, split)?;
    if pairs.is_empty() {
        bail!("split `{split}` of {} is empty", a.data.display());
    }
    let report = evaluate(&model, &pairs)?;
    report.write_csv(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
    println!(
        "{} images: PSNR {:.2} dB, SSIM {:.4} (data range {HU_DATA_RANGE} HU); wrote {}",
        report.per_image.len(),
        report.mean_psnr(),
        report.mean_ssim(),
        out.display()
    );
    Ok(())
}

struct CostRow {
    label: String,
    params_m: Option<f64>,
    gflops: Option<f64>,
    reported_params_m: Option<f64>,
    reported_gflops: Option<f64>,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.digits$}"))
}

fn count(a: CountArgs) -> Result<()> {
    let (title, variants): (String, Vec<Variant>) = match (&a.target.preset, &a.target.ablation) {
        (Some(p), None) if p.eq_ignore_ascii_case("all") => ("presets".into(), preset_variants()),
        (Some(p), None) => {
            let cfg = preset(p)?;
            let found = preset_variants().into_iter().find(|v| v.config.as_ref() == Some(&cfg));
            (format!("preset {p}"), found.into_iter().collect())
        }
        (None, Some(t)) => (format!("ablation {t}"), ablation(t)?),
        _ => bail!("pass exactly one of --preset or --ablation"),
    };
    print_config(&[
        ("target", title.clone()),
        ("res", a.res.to_string()),
        ("flop_unit", "multiply-accumulate".into()),
    ]);
    let rows = variants
        .iter()
        .map(|v| -> Result<CostRow> {
            let cost = v.config.as_ref().map(|c| estimate_flops(c, a.res, a.res)).transpose()?;
            Ok(CostRow {
                label: v.label.clone(),
                params_m: cost.as_ref().map(|c| c.params_m()),
                gflops: cost.as_ref().map(|c| c.gflops()),
                reported_params_m: v.reported_params_m,
                reported_gflops: v.reported_gflops,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    println!("{title} at {0}x{0}", a.res);
    println!("{:<12} {:>10} {:>10} {:>10} {:>10}", "variant", "params(M)", "reported", "GFLOPs", "reported");
    for r in &rows {
        println!(
            "{:<12} {:>10} {:>10} {:>10} {:>10}",
            r.label,
            fmt_opt(r.params_m, 3),
            fmt_opt(r.reported_params_m, 2),
            fmt_opt(r.gflops, 2),
            fmt_opt(r.reported_gflops, 2)
        );
    }
    if let Some(path) = &a.csv {
        let mut text = String::from("variant,params_m,reported_params_m,gflops,reported_gflops\n");
        for r in &rows {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.label,
                r.params_m.map_or(String::new(), |v| v.to_string()),
                r.reported_params_m.map_or(String::new(), |v| v.to_string()),
                r.gflops.map_or(String::new(), |v| v.to_string()),
                r.reported_gflops.map_or(String::new(), |v| v.to_string())
            ));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    print_config(&[
        ("seed", a.seed.to_string()),
        ("samples", a.samples.to_string()),
        ("tolerance", a.tolerance.to_string()),
        ("network", "width 8, one block and head per level, 16x16, f64".into()),
    ]);
    let report = gradient_check(a.seed, a.samples)?;
    let worst = report.max_rel_error();
    for s in &report.samples {
        println!("{:<36} [{:>5}] analytic {:+.6e} numeric {:+.6e} rel {:.2e}", s.param, s.index, s.analytic, s.numeric, s.rel_error);
    }
    println!("max relative error {worst:.3e} over {} parameters", report.samples.len());
    if !(worst < a.tolerance) {
        bail!("max relative error {worst:.3e} exceeds tolerance {:.1e}", a.tolerance);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = init_threads()? {
        eprintln!("threads = {n}");
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Count(a) => count(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
