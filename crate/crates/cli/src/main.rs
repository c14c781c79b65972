use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mcaol::harness::{
    abs_bias, make_phantom, nrmse, reconstruct_with, simulate_pair, std_metric, support_region, LearnedPriors, Method, Preset,
    PriorKinds, RunManifest, SweepSpec, ENERGIES_KEV,
};
use mcaol::io::{read_image, read_sinogram, write_image, write_sinogram};
use mcaol::learning::{provenance, TrainConfig};
use mcaol::optimizer::SolverConfig;
use mcaol::physics::mean_counts;
use mcaol::projector::SystemMatrix;
use mcaol::recon::{ChannelData, ReconConfig};
use mcaol::{ChannelPair, Image};

#[derive(Parser)]
#[command(name = "mcaol", version, about = "Dual-energy CT with learned joint-sparsity priors")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a ground-truth image pair (and optionally perturbed training pairs).
    Phantom(PhantomArgs),
    /// Simulate noisy dual-energy sinograms from a ground-truth pair.
    Simulate(SimulateArgs),
    /// Learn filter banks from training pairs.
    Train(TrainArgs),
    /// Reconstruct one replicate.
    Reconstruct(ReconstructArgs),
    /// Run a replicate sweep and write AbsBias/STD curves.
    Sweep(SweepArgs),
    /// AbsBias and STD of a directory of replicate reconstructions.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value = "torso64")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write this many perturbed training pairs.
    #[arg(long, default_value_t = 0)]
    training: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "torso64")]
    preset: String,
    /// Directory holding gt_<keV>kev images.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    #[arg(long)]
    intensity: Option<f64>,
    #[arg(long)]
    background: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
    /// Write the expected counts instead of Poisson draws.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Caol,
    Mcaol,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Directory of <name>_60kev / <name>_120kev images; only train_* pairs are used when present.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 7)]
    filter_size: usize,
    #[arg(long, default_value_t = 49)]
    filters: usize,
    #[arg(long, default_value_t = 3000)]
    max_outer: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    extrapolate: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    Mcaol,
    Caol,
    Tv,
    Jtv,
    None,
    CaolPwls,
}

impl From<Prior> for Method {
    fn from(p: Prior) -> Method {
        match p {
            Prior::Mcaol => Method::Mcaol,
            Prior::Caol => Method::Caol,
            Prior::Tv => Method::Tv,
            Prior::Jtv => Method::Jtv,
            Prior::None => Method::None,
            Prior::CaolPwls => Method::CaolPwls,
        }
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long, value_enum)]
    prior: Prior,
    /// Directory written by `simulate`.
    #[arg(long)]
    sino: PathBuf,
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    /// Directory written by `train` (learned priors only).
    #[arg(long)]
    banks: Option<PathBuf>,
    /// Data-fit weight ρ (learned and prior-free).
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// TV / JTV weight β.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 300)]
    n_outer: usize,
    #[arg(long, default_value_t = 300)]
    inner_iters: usize,
    #[arg(long, default_value_t = 100)]
    init_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
    /// Report NRMSE against gt_<keV>kev images in this directory.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained priors; trained from the config's training section otherwise.
    #[arg(long)]
    banks: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Directory of <name>_60kev / <name>_120kev replicate images.
    #[arg(long)]
    recons: PathBuf,
}

fn stem(dir: &Path, name: &str, kev: f64) -> PathBuf {
    dir.join(format!("{name}_{kev}kev"))
}

fn write_pair(dir: &Path, name: &str, pair: &ChannelPair<Image>, outputs: &mut Vec<String>) -> anyhow::Result<()> {
    for (img, kev) in pair.as_array().into_iter().zip(pair.labels) {
        let s = stem(dir, name, kev);
        write_image(&s, img, Some(kev)).with_context(|| format!("writing {}", s.display()))?;
        outputs.push(s.with_extension("raw").display().to_string());
    }
    Ok(())
}

fn read_pair(dir: &Path, name: &str) -> anyhow::Result<ChannelPair<Image>> {
    let low = read_image(&stem(dir, name, ENERGIES_KEV[0])).with_context(|| format!("reading {name} from {}", dir.display()))?.0;
    let high = read_image(&stem(dir, name, ENERGIES_KEV[1])).with_context(|| format!("reading {name} from {}", dir.display()))?.0;
    let pair = ChannelPair::new(low, high, ENERGIES_KEV);
    pair.validate()?;
    Ok(pair)
}

/// Names `n` with both `<n>_60kev.json` and `<n>_120kev.json` present, sorted.
fn pair_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let suffix = format!("_{}kev.json", ENERGIES_KEV[0]);
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let file = entry?.file_name().to_string_lossy().into_owned();
        if let Some(name) = file.strip_suffix(&suffix) {
            if stem(dir, name, ENERGIES_KEV[1]).with_extension("json").exists() {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn finish(mut manifest: RunManifest, dir: &Path, outputs: Vec<String>) -> anyhow::Result<()> {
    manifest.outputs = outputs;
    manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

fn phantom(args: PhantomArgs, seed: u64) -> anyhow::Result<()> {
    let preset = Preset::by_name(&args.preset)?;
    std::fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    write_pair(&args.out, "gt", &make_phantom(&preset.phantom())?, &mut outputs)?;
    for (l, pair) in preset.training_pairs(args.training, seed)?.iter().enumerate() {
        write_pair(&args.out, &format!("train_{l:03}"), pair, &mut outputs)?;
    }
    let params = json!({ "preset": preset, "training": args.training });
    finish(RunManifest::new("phantom", Some(seed), Some(&args.preset), params), &args.out, outputs)
}

fn simulate(args: SimulateArgs, seed: u64) -> anyhow::Result<()> {
    let mut preset = Preset::by_name(&args.preset)?;
    if let Some(s) = args.intensity {
        preset.intensity = s;
    }
    if let Some(b) = args.background {
        preset.background = b;
    }
    if let Some(v) = args.views {
        preset.views = v;
    }
    preset.replicates = args.replicates;
    let gt = read_pair(&args.gt, "gt")?;
    let a = SystemMatrix::build(&preset.geometry(), gt.low.grid())?;
    let src = preset.source()?;
    std::fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    for r in 0..args.replicates {
        let y = if args.noiseless {
            ChannelPair::new(mean_counts(&a, &gt.low, &src)?, mean_counts(&a, &gt.high, &src)?, gt.labels)
        } else {
            simulate_pair(&a, &gt, &src, seed, r)?
        };
        for (s, kev) in y.as_array().into_iter().zip(gt.labels) {
            let path = stem(&args.out, &format!("y_r{r:03}"), kev);
            write_sinogram(&path, s, Some(kev))?;
            outputs.push(path.with_extension("raw").display().to_string());
        }
    }
    std::fs::write(args.out.join("acquisition.json"), serde_json::to_string_pretty(&preset)?)?;
    let params = json!({ "acquisition": preset, "noiseless": args.noiseless });
    finish(RunManifest::new("simulate", Some(seed), Some(&args.preset), params), &args.out, outputs)
}

fn train(args: TrainArgs, seed: u64) -> anyhow::Result<()> {
    let mut names = pair_names(&args.images)?;
    // a phantom directory also holds the ground truth, which must stay out of training
    if names.iter().any(|n| n.starts_with("train_")) {
        names.retain(|n| n.starts_with("train_"));
    }
    if names.is_empty() {
        bail!("no <name>_60kev / <name>_120kev image pairs in {}", args.images.display());
    }
    let pairs = names.iter().map(|n| read_pair(&args.images, n)).collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        alpha: args.alpha,
        gammas: vec![args.gamma, args.gamma],
        filter_size: args.filter_size,
        filter_count: args.filters,
        max_outer: args.max_outer,
        tol: args.tol,
        extrapolation: args.extrapolate,
        seed,
    };
    let kinds = match args.mode {
        Mode::Caol => PriorKinds { joint: false, single: true },
        Mode::Mcaol => PriorKinds { joint: true, single: false },
    };
    let priors = LearnedPriors::train(&pairs, &cfg, kinds)?;
    let images: Vec<&Image> = pairs.iter().flat_map(|p| [&p.low, &p.high]).collect();
    let tag = provenance(&cfg, &images);
    let outputs = priors.save(&args.out, &tag)?.iter().map(|p| p.display().to_string()).collect();
    let params = json!({ "config": cfg, "training_images": names, "scale": priors.scale, "provenance": tag });
    finish(RunManifest::new("train", Some(seed), None, params), &args.out, outputs)
}

fn reconstruct(args: ReconstructArgs) -> anyhow::Result<()> {
    let acq_path = args.sino.join("acquisition.json");
    let preset: Preset = serde_json::from_str(
        &std::fs::read_to_string(&acq_path).with_context(|| format!("reading {}", acq_path.display()))?,
    )
    .with_context(|| format!("parsing {}", acq_path.display()))?;
    let name = format!("y_r{:03}", args.replicate);
    let low = read_sinogram(&stem(&args.sino, &name, ENERGIES_KEV[0]))?.0;
    let high = read_sinogram(&stem(&args.sino, &name, ENERGIES_KEV[1]))?.0;
    let a = SystemMatrix::build(&preset.geometry(), mcaol::Grid::square(preset.side))?;
    let src = preset.source()?;
    let data = ChannelPair::new(ChannelData::new(&a, &low, &src), ChannelData::new(&a, &high, &src), ENERGIES_KEV);
    let method = Method::from(args.prior);
    let priors = match (&args.banks, method.needs_banks()) {
        (Some(dir), true) => Some(LearnedPriors::load(dir)?),
        (None, true) => bail!("--prior {method} requires --banks"),
        _ => None,
    };
    let cfg = ReconConfig {
        n_outer: args.n_outer,
        init_iters: args.init_iters,
        epsilon: args.epsilon,
        inner: SolverConfig::default().with_max_iter(args.inner_iters),
        ..ReconConfig::default()
    };
    let param = if matches!(method, Method::Tv | Method::Jtv) { args.beta } else { args.rho };
    let out = reconstruct_with(method, param, &data, priors.as_ref(), &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    write_pair(&args.out, "recon", &out, &mut outputs)?;
    let mut params = json!({ "prior": method, "param": param, "replicate": args.replicate, "config": cfg });
    if let Some(dir) = &args.gt {
        let gt = read_pair(dir, "gt")?;
        let errs = [nrmse(&out.low, &gt.low)?, nrmse(&out.high, &gt.high)?];
        println!("nrmse {} {}", errs[0], errs[1]);
        params["nrmse"] = json!(errs);
    }
    finish(RunManifest::new("reconstruct", None, Some(&preset.name), params), &args.out, outputs)
}

fn sweep(args: SweepArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut spec = SweepSpec::from_json(&text).with_context(|| format!("parsing {}", args.config.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let priors = match &args.banks {
        Some(dir) => Some(LearnedPriors::load(dir)?),
        None => spec.train_priors()?,
    };
    let gt = make_phantom(&spec.preset()?.phantom())?;
    let curves = mcaol::harness::run_sweep(&spec, &gt, priors.as_ref())?;
    let outputs = curves.write_csv(&args.out)?.iter().map(|p| p.display().to_string()).collect();
    let params = serde_json::to_value(&spec)?;
    finish(RunManifest::new("sweep", Some(spec.seed), Some(&spec.preset), params), &args.out, outputs)
}

fn metrics(args: MetricsArgs) -> anyhow::Result<()> {
    let gt = read_pair(&args.gt, "gt")?;
    let names = pair_names(&args.recons)?;
    if names.is_empty() {
        bail!("no replicate pairs in {}", args.recons.display());
    }
    let recons = names.iter().map(|n| read_pair(&args.recons, n)).collect::<anyhow::Result<Vec<_>>>()?;
    let region = support_region(&gt.low);
    let mut report = serde_json::Map::new();
    for (e, (truth, kev)) in gt.as_array().into_iter().zip(gt.labels).enumerate() {
        let imgs: Vec<&Image> = recons.iter().map(|p| p.as_array()[e]).collect();
        let std = if imgs.len() < 2 { None } else { Some(std_metric(&imgs, &region)?) };
        report.insert(format!("{kev}kev"), json!({ "absbias": abs_bias(&imgs, truth, &region)?, "std": std }));
    }
    report.insert("replicates".into(), json!(names.len()));
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Phantom(a) => phantom(a, seed),
        Command::Simulate(a) => simulate(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Sweep(a) => sweep(a, cli.seed),
        Command::Metrics(a) => metrics(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
