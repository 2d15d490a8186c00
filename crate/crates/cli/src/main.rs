use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use shapetensor::curve::{self, Ensemble, Format, Parametrization};
use shapetensor::discrepancy::{Correction, KernelSpec, Verdict};
use shapetensor::manifold::EnsembleModel;
use shapetensor::pipeline::{self, Archetype, MeasureNormalization, PipelineConfig, Registration, WeightScheme};
use shapetensor::synth::{self, EnsembleSpec};
use shapetensor::{Error, Result};

#[derive(Parser)]
#[command(name = "sst", version, about = "Separable shape tensors for ensembles of closed planar curves")]
struct Cli {
    /// Worker threads for per-curve stages (default: all processors).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare two ensembles in undulation and scale.
    Classify(ClassifyArgs),
    /// Generate synthetic ensembles.
    Synth(SynthArgs),
    /// Register curves onto an archetype by cyclic Procrustes.
    Align(AlignArgs),
    /// Rebuild curves from model coordinates at several ranks.
    Reconstruct(ReconstructArgs),
    /// Dump the shape tensor of every curve.
    Decompose(DecomposeArgs),
    /// Print the version.
    Version,
}

/// Flags that override the JSON config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON pipeline configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Landmarks per curve.
    #[arg(long)]
    n: Option<usize>,
    /// Undulation coordinates kept by tangent PCA.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    permutations: Option<usize>,
    /// Order of the norm combining the two factor discrepancies.
    #[arg(long)]
    p_norm: Option<f64>,
    /// Undulation kernel: rbf, rbf:<bandwidth> or linear.
    #[arg(long, value_parser = parse_kernel)]
    kernel_t: Option<KernelSpec>,
    /// Scale kernel: rbf, rbf:<bandwidth> or linear.
    #[arg(long, value_parser = parse_kernel)]
    kernel_l: Option<KernelSpec>,
    /// spectral, left_riemann or midpoint.
    #[arg(long, value_parser = parse_enum::<WeightScheme>)]
    weights: Option<WeightScheme>,
    /// arc_length or affine_arc_length.
    #[arg(long, value_parser = parse_enum::<Parametrization>)]
    parametrization: Option<Parametrization>,
    /// unit_mass or natural.
    #[arg(long, value_parser = parse_enum::<MeasureNormalization>)]
    normalization: Option<MeasureNormalization>,
    /// intrinsic_start, archetype or none.
    #[arg(long, value_parser = parse_enum::<Registration>)]
    registration: Option<Registration>,
    /// none or bonferroni.
    #[arg(long, value_parser = parse_enum::<Correction>)]
    correction: Option<Correction>,
    /// Placeholder: drop curves touching the image border (filters nothing).
    #[arg(long)]
    exclude_border: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    /// First ensemble (.json or .csv).
    a: PathBuf,
    /// Second ensemble (.json or .csv).
    b: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Ensemble spec (JSON). Omit with --four-case.
    spec: Option<PathBuf>,
    /// Emit the eight ensembles of the four truth-table cases.
    #[arg(long, conflicts_with = "spec")]
    four_case: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    input: PathBuf,
    /// circle or first.
    #[arg(long, default_value = "circle", value_parser = parse_enum::<Archetype>)]
    archetype: Archetype,
    /// Resample every curve to this many landmarks first.
    #[arg(long)]
    resample: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ReconstructArgs {
    /// model.json from classify.
    #[arg(long)]
    model: PathBuf,
    /// Coordinate CSV from classify.
    #[arg(long)]
    coords: PathBuf,
    /// Comma separated ranks; none given means nothing to do.
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_kernel(s: &str) -> std::result::Result<KernelSpec, String> {
    match s.split_once(':') {
        None if s == "rbf" => Ok(KernelSpec::rbf_median()),
        None if s == "linear" => Ok(KernelSpec::linear()),
        Some(("rbf", h)) => match h.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(KernelSpec::rbf(h)),
            _ => Err(format!("bad bandwidth {h:?}")),
        },
        _ => Err(format!("unknown kernel {s:?}; expected rbf, rbf:<h> or linear")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::from_json(&fs::read_to_string(p)?)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(seed, n, r, alpha, permutations, p_norm, kernel_t, kernel_l, weights, parametrization, normalization, registration, correction);
        c.exclude_border |= self.exclude_border;
        c.validate()?;
        if c.exclude_border {
            log::warn!("--exclude-border is a placeholder: inputs carry no border information, nothing is filtered");
        }
        Ok(c)
    }
}

fn read(path: &Path) -> Result<Ensemble> {
    curve::read_ensemble(path, Format::from_path(path)?)
}

fn classify(args: &ClassifyArgs, workers: usize) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let a = read(&args.a)?;
    let b = read(&args.b)?;
    let out = pipeline::classify_ensembles(&a, &b, &cfg)?;
    pipeline::write_artifacts(&args.out_dir, &out, workers)?;
    let r = &out.report;
    println!(
        "case {}  verdict {}  pmmd {:.6e}  p_t {:.4}  p_l {:.4}",
        r.case,
        match r.verdict {
            Verdict::Accept => "accept",
            Verdict::Reject => "reject",
        },
        r.pmmd,
        r.undulation_test.p_value,
        r.scale_test.p_value
    );
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out_dir)?;
    let write = |e: &Ensemble| -> Result<()> {
        let path = args.out_dir.join(format!("{}.json", e.id));
        curve::write_ensemble_json(&path, &e.id, &e.curves)?;
        println!("{}", path.display());
        Ok(())
    };
    if args.four_case {
        for (_, a, b) in synth::four_case_suite(args.seed.unwrap_or(0))? {
            write(&a)?;
            write(&b)?;
        }
        return Ok(());
    }
    let path = args
        .spec
        .as_ref()
        .ok_or_else(|| Error::Config("give a spec file or --four-case".into()))?;
    let mut spec = EnsembleSpec::from_json(&fs::read_to_string(path)?)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    write(&synth::generate_ensemble(&spec)?)
}

fn align_cmd(args: &AlignArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let ens = read(&args.input)?;
    let (curves, report) = pipeline::align_curves(&ens, args.archetype, args.resample, &cfg)?;
    fs::create_dir_all(&args.out_dir)?;
    curve::write_ensemble_json(&args.out_dir.join("aligned.json"), &ens.id, &curves)?;
    fs::write(args.out_dir.join("align_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "aligned {} of {} curves  mean residual {:.3e}  max residual {:.3e}  symmetric {}",
        curves.len(),
        ens.curves.len(),
        report.mean_residual,
        report.max_residual,
        report.symmetric_count
    );
    Ok(())
}

fn reconstruct_cmd(args: &ReconstructArgs) -> Result<()> {
    if args.ranks.is_empty() {
        return Ok(());
    }
    let model = EnsembleModel::from_json(&fs::read_to_string(&args.model)?)?;
    let coords = pipeline::read_coords_csv(&args.coords)?;
    let sweep = pipeline::reconstruct_sweep(&model, &coords, &args.ranks)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut table = csv::Writer::from_path(args.out_dir.join("lipschitz_vs_r.csv")).map_err(to_io)?;
    table.write_record(["r", "curve_id", "lipschitz"]).map_err(to_io)?;
    for (r, curves, lambdas) in &sweep {
        let id = format!("reconstruct-r{r}");
        curve::write_ensemble_json(&args.out_dir.join(format!("{id}.json")), &id, curves)?;
        for (c, l) in curves.iter().zip(lambdas) {
            table.write_record([r.to_string(), c.id.clone(), l.to_string()]).map_err(to_io)?;
        }
    }
    table.flush()?;
    Ok(())
}

fn to_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn decompose_cmd(args: &DecomposeArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let ens = read(&args.input)?;
    let (records, excluded) = pipeline::decompose(&ens, &cfg)?;
    let body = serde_json::to_string_pretty(&json!({
        "ensemble_id": ens.id,
        "n": cfg.n,
        "tensors": records,
        "excluded": excluded,
    }))?;
    match &args.out {
        Some(p) => fs::write(p, body)?,
        None => println!("{body}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    match &cli.command {
        Command::Classify(a) => classify(a, workers),
        Command::Synth(a) => synth_cmd(a),
        Command::Align(a) => align_cmd(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::Version => {
            println!("sst {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let body = json!({ "error": { "kind": kind.as_str(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}
