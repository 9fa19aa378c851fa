use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use autm::flow::{standard_normal_draws, Architecture, FlowModel};
use autm::conditioner::Activation;
use autm::gradcheck;
use autm::invbench::{self, BenchConfig};
use autm::training::{self, load_csv, toy2d_split, Dataset, Split, StopReason, TrainConfig, TrainError};
use autm::universality::{convergence_study, MonotoneTarget};
use autm::{ModelSpec, SolverConfig};

use crate::config::{
    DataSource, GradcheckSection, GridSection, RoundtripSection, RunFile, SampleSection,
    UniversalitySection,
};
use crate::{
    BenchArgs, Cli, CliError, Command, GradcheckArgs, GridArgs, ModelArgs, RoundtripArgs, SampleArgs,
    TrainArgs, UniversalityArgs,
};

const DEFAULT_OUT: &str = "autm-out";

/// Output directory and seed shared by every command.
struct Context {
    out: PathBuf,
    seed: Option<u64>,
    config_file: Option<PathBuf>,
}

impl Context {
    fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
    }

    fn manifest<C: Serialize>(&self, command: &str, seed: u64, config: &C, outputs: &[&str]) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Manifest<'a, C> {
            command: &'a str,
            seed: u64,
            autm_version: &'a str,
            cli_version: &'a str,
            config_file: Option<String>,
            config: &'a C,
            outputs: &'a [&'a str],
        }
        let m = Manifest {
            command,
            seed,
            autm_version: autm::VERSION,
            cli_version: env!("CARGO_PKG_VERSION"),
            config_file: self.config_file.as_ref().map(|p| p.display().to_string()),
            config,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write("manifest.json", &text)
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => RunFile::load(p)?,
        None => RunFile::default(),
    };
    let ctx = Context {
        out: cli
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        seed: cli.seed.or(file.seed),
        config_file: cli.config.clone(),
    };
    fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", ctx.out.display())))?;
    match &cli.command {
        Command::Train(a) => train(&ctx, &file, a),
        Command::DensityGrid(a) => density_grid(&ctx, &file, a),
        Command::Sample(a) => sample(&ctx, &file, a),
        Command::InvertBench(a) => invert_bench(&ctx, &file, a),
        Command::Universality(a) => universality(&ctx, &file, a),
        Command::Gradcheck(a) => gradcheck_cmd(&ctx, &file, a),
        Command::Roundtrip(a) => roundtrip(&ctx, &file, a),
    }
}

fn config_error(problems: Vec<String>) -> Result<(), CliError> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(problems.join("; ")))
    }
}

/// Applies model flags; returns whether `--dim` was given.
fn apply_model_args(spec: &mut ModelSpec, a: &ModelArgs) -> Result<bool, CliError> {
    if let Some(d) = a.dim {
        spec.dim = d;
    }
    if let Some(l) = a.layers {
        spec.layers = l;
    }
    if let Some(h) = &a.hidden {
        spec.hidden = h.clone();
    }
    if let Some(f) = a.family {
        spec.family = f;
    }
    if let Some(s) = a.steps {
        spec.steps = s;
    }
    if let Some(arch) = &a.architecture {
        spec.architecture = match arch.as_str() {
            "coupling" => Architecture::Coupling,
            "autoregressive" => Architecture::Autoregressive,
            other => {
                return Err(CliError::Config(format!(
                    "unknown architecture `{other}` (expected coupling or autoregressive)"
                )))
            }
        };
    }
    if let Some(act) = &a.activation {
        spec.activation = match act.as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => return Err(CliError::Config(format!("unknown activation `{other}` (expected tanh or relu)"))),
        };
    }
    Ok(a.dim.is_some())
}

fn load_model(path: &Path) -> Result<FlowModel, CliError> {
    FlowModel::load(path).map_err(|e| CliError::Io(format!("loading {}: {e}", path.display())))
}

#[derive(Serialize)]
struct TrainRun {
    dataset: DataSource,
    n: usize,
    split: Split,
    data_seed: u64,
    model: ModelSpec,
    train: TrainConfig,
}

fn train(ctx: &Context, file: &RunFile, a: &TrainArgs) -> Result<(), CliError> {
    let mut data = file.data.clone().unwrap_or_default();
    let source = match &a.dataset {
        Some(d) => d.clone(),
        None => data.dataset.parse().map_err(CliError::Config)?,
    };
    data.dataset = source.to_string();
    if let Some(n) = a.n {
        data.n = n;
    }
    let (mut spec, mut dim_given) = file.model_spec()?;
    dim_given |= apply_model_args(&mut spec, &a.model)?;
    let mut cfg = file.train.clone().unwrap_or_default();
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.clip_norm {
        cfg.clip_norm = v;
    }
    if let Some(s) = ctx.seed {
        spec.seed = s;
        cfg.seed = s;
    }
    let data_seed = ctx.seed_or(cfg.seed);

    let mut problems = cfg.problems();
    if let Err(e) = data.split.validate() {
        problems.push(e.to_string());
    }
    if matches!(source, DataSource::Toy(_)) && data.n == 0 {
        problems.push("toy datasets need n >= 1".into());
    }
    config_error(problems)?;

    let dataset: Dataset = match &source {
        DataSource::Toy(t) => toy2d_split(*t, data.n, data_seed, data.split),
        DataSource::Csv(p) => load_csv(p, data.split, data_seed),
    }
    .map_err(|e| CliError::Io(format!("dataset {source}: {e}")))?;

    if !dim_given {
        spec.dim = dataset.dim;
    }
    let mut problems = spec.problems();
    if spec.dim != dataset.dim {
        problems.push(format!(
            "model dim {} does not match the {} columns of {source}",
            spec.dim, dataset.dim
        ));
    }
    config_error(problems)?;

    let model = FlowModel::build(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    ctx.write("init.json", &model.to_json())?;
    let run = TrainRun {
        dataset: source.clone(),
        n: data.n,
        split: data.split,
        data_seed,
        model: spec,
        train: cfg.clone(),
    };
    ctx.manifest("train", data_seed, &run, &["init.json", "model.json", "history.csv"])?;

    let outcome = training::train(model, &dataset, &cfg).map_err(|e| match e {
        TrainError::Config(m) => CliError::Config(m),
        other => CliError::Numerical(other.to_string()),
    })?;
    ctx.write("model.json", &outcome.model.to_json())?;
    ctx.write("history.csv", &outcome.history_csv())?;

    println!(
        "dataset {source}: {} train / {} val / {} test rows, dim {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dataset.dim
    );
    println!("identity-model val NLL {:.6}", training::identity_nll(&dataset.val));
    match outcome.best_epoch.and_then(|e| outcome.history.get(e)) {
        Some(r) => println!("best epoch {} val NLL {:.6}", r.epoch, r.best_val_nll),
        None => println!("no epochs run; model.json equals init.json"),
    }
    if !dataset.test.is_empty() {
        match training::nll(&outcome.model, &dataset.test) {
            Ok(v) => println!("test NLL {v:.6}"),
            Err(e) => println!("test NLL unavailable: {e}"),
        }
    }
    if outcome.rollbacks > 0 {
        println!("divergence rollbacks {}", outcome.rollbacks);
    }
    match outcome.stop {
        StopReason::Completed => Ok(()),
        StopReason::EarlyStopped { epoch } => {
            println!("early stop after epoch {epoch}");
            Ok(())
        }
        StopReason::Failed { epoch, error } => Err(CliError::Numerical(format!(
            "training stopped in epoch {epoch}: {error}; best checkpoint and partial history were written"
        ))),
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Serialize)]
struct GridRun<'a> {
    model: &'a Path,
    grid: GridSection,
}

fn density_grid(ctx: &Context, file: &RunFile, a: &GridArgs) -> Result<(), CliError> {
    let mut grid = file.grid.unwrap_or_default();
    if let Some(v) = a.lo {
        grid.lo = v;
    }
    if let Some(v) = a.hi {
        grid.hi = v;
    }
    if let Some(v) = a.points {
        grid.points = v;
    }
    let mut problems = Vec::new();
    if !(grid.lo < grid.hi) {
        problems.push(format!("grid needs lo < hi, got [{}, {}]", grid.lo, grid.hi));
    }
    if grid.points == 0 {
        problems.push("grid needs at least one point per axis".into());
    }
    config_error(problems)?;
    let model = load_model(&a.model)?;
    if model.dim() != 2 {
        return Err(CliError::Config(format!("density-grid needs a 2-D model, got dim {}", model.dim())));
    }

    let axis = linspace(grid.lo, grid.hi, grid.points);
    let mut csv = String::from("x,y,log_density\n");
    let mut failed = 0usize;
    for &y in &axis {
        for &x in &axis {
            match model.log_density(&[x, y]) {
                Ok(lp) => {
                    let _ = writeln!(csv, "{x},{y},{lp}");
                }
                Err(_) => {
                    failed += 1;
                    let _ = writeln!(csv, "{x},{y},NaN");
                }
            }
        }
    }
    ctx.write("density_grid.csv", &csv)?;
    ctx.manifest(
        "density-grid",
        ctx.seed_or(0),
        &GridRun { model: &a.model, grid },
        &["density_grid.csv"],
    )?;
    println!("{} grid points written", axis.len() * axis.len());
    if failed > 0 {
        eprintln!("warning: {failed} points have no finite pull-back (diverged or outside the model's range) and are written as NaN");
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleRun<'a> {
    model: &'a Path,
    n: usize,
}

fn sample(ctx: &Context, file: &RunFile, a: &SampleArgs) -> Result<(), CliError> {
    let mut sec: SampleSection = file.sample.unwrap_or_default();
    if let Some(n) = a.n {
        sec.n = n;
    }
    let model = load_model(&a.model)?;
    let seed = ctx.seed_or(0);
    let (rows, failed) = model.sample_partial(sec.n, seed);
    let header: Vec<String> = (0..model.dim()).map(|i| format!("x{i}")).collect();
    let mut csv = header.join(",");
    csv.push('\n');
    for r in &rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    ctx.write("samples.csv", &csv)?;
    ctx.manifest("sample", seed, &SampleRun { model: &a.model, n: sec.n }, &["samples.csv"])?;
    println!("{} samples written", rows.len());
    if !failed.is_empty() {
        eprintln!("warning: {} base draws diverged and were dropped", failed.len());
        if rows.is_empty() {
            return Err(CliError::Numerical("every base draw diverged".into()));
        }
    }
    Ok(())
}

fn invert_bench(ctx: &Context, file: &RunFile, a: &BenchArgs) -> Result<(), CliError> {
    let mut cfg: BenchConfig = file.bench.clone().unwrap_or_default();
    let mut problems = Vec::new();
    if let Some(p) = &a.params {
        match p.as_slice() {
            &[pa, pb, pc] => cfg.params = [pa, pb, pc],
            _ => problems.push(format!("--params needs three values a,b,c, got {}", p.len())),
        }
    }
    if let Some(t) = &a.tolerances {
        cfg.tolerances = t.clone();
    }
    if let Some(n) = a.n_inputs {
        cfg.n_inputs = n;
    }
    if let Some(s) = a.steps {
        if s == 0 {
            problems.push("--steps must be positive".into());
        } else {
            cfg.solver = SolverConfig { steps: s, ..cfg.solver };
        }
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if cfg.tolerances.is_empty() || cfg.tolerances.iter().any(|t| !(*t > 0.0)) {
        problems.push("tolerances must be a non-empty list of positive numbers".into());
    }
    if cfg.n_inputs == 0 {
        problems.push("n_inputs must be positive".into());
    }
    if cfg.params.iter().any(|p| !p.is_finite()) {
        problems.push("integrand coefficients must be finite".into());
    }
    if let Err(e) = cfg.refine.validate() {
        problems.push(e);
    }
    config_error(problems)?;

    let report = invbench::run_bench(&cfg);
    ctx.write("bench.csv", &report.to_csv())?;
    ctx.manifest("invert-bench", cfg.seed, &cfg, &["bench.csv"])?;
    println!("{}", report.summary());
    if report.excluded == report.n_inputs {
        return Err(CliError::Numerical("the forward map failed on every input".into()));
    }
    Ok(())
}

fn universality(ctx: &Context, file: &RunFile, a: &UniversalityArgs) -> Result<(), CliError> {
    let mut sec: UniversalitySection = file.universality.clone().unwrap_or_default();
    if let Some(t) = &a.target {
        sec.target = t.clone();
    }
    if let Some(v) = a.alpha {
        sec.alpha = v;
    }
    if let Some(v) = a.beta {
        sec.beta = v;
    }
    if let Some(s) = &a.scales {
        sec.scales = s.clone();
    }
    if let Some(k) = a.kernel {
        sec.kernel = k;
    }
    if let Some(g) = a.grid {
        sec.grid = g;
    }
    let target = match sec.target.as_str() {
        "affine" => MonotoneTarget::affine(sec.alpha, sec.beta).map_err(|e| CliError::Config(e.to_string()))?,
        "softplus_shift" => MonotoneTarget::softplus_shift(),
        "arctan_blend" => MonotoneTarget::arctan_blend(),
        other => {
            return Err(CliError::Config(format!(
                "unknown target `{other}` (expected affine, softplus_shift or arctan_blend)"
            )))
        }
    };
    let study = sec.study();
    sec.picard.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let report = convergence_study(&target, &study).map_err(|e| CliError::Config(e.to_string()))?;
    let csv = report.to_csv();
    ctx.write("universality.csv", &csv)?;
    ctx.manifest("universality", ctx.seed_or(0), &sec, &["universality.csv"])?;
    print!("{csv}");
    println!("{}", report.summary());
    Ok(())
}

fn gradcheck_cmd(ctx: &Context, file: &RunFile, a: &GradcheckArgs) -> Result<(), CliError> {
    let mut sec: GradcheckSection = file.gradcheck.unwrap_or_default();
    if let Some(t) = a.threshold {
        sec.threshold = t;
    }
    config_error(if sec.threshold > 0.0 {
        vec![]
    } else {
        vec![format!("threshold must be positive, got {}", sec.threshold)]
    })?;
    let seed = ctx.seed_or(0);
    let results = gradcheck::run_all(seed);
    let mut csv = String::from("suite,cases,entries,max_rel_error\n");
    let mut worst: f64 = 0.0;
    for r in &results {
        let _ = writeln!(csv, "{},{},{},{:e}", r.name, r.cases, r.entries, r.max_rel_error);
        println!(
            "{:<24} cases {:>4} entries {:>6} max rel error {:.3e}",
            r.name, r.cases, r.entries, r.max_rel_error
        );
        worst = worst.max(r.max_rel_error);
    }
    ctx.write("gradcheck.csv", &csv)?;
    ctx.manifest("gradcheck", seed, &sec, &["gradcheck.csv"])?;
    println!("max relative error {worst:.3e} (threshold {:e})", sec.threshold);
    if worst.is_nan() || worst >= sec.threshold {
        return Err(CliError::Check(format!(
            "max relative error {worst:e} is not below {:e}",
            sec.threshold
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct RoundtripRun {
    model: Option<PathBuf>,
    spec: Option<ModelSpec>,
    roundtrip: RoundtripSection,
}

fn roundtrip(ctx: &Context, file: &RunFile, a: &RoundtripArgs) -> Result<(), CliError> {
    let mut sec: RoundtripSection = file.roundtrip.unwrap_or_default();
    if let Some(n) = a.n {
        sec.n = n;
    }
    if let Some(t) = a.tolerance {
        sec.tolerance = t;
    }
    if let Some(v) = a.perturb {
        sec.perturb = v;
    }
    let seed = ctx.seed_or(0);
    let (model, spec) = match &a.model {
        Some(p) => (load_model(p)?, None),
        None => {
            let (mut spec, _) = file.model_spec()?;
            apply_model_args(&mut spec, &a.spec)?;
            spec.seed = ctx.seed_or(spec.seed);
            config_error(spec.problems())?;
            if !(sec.perturb >= 0.0 && sec.perturb.is_finite()) {
                return Err(CliError::Config(format!("perturb must be non-negative, got {}", sec.perturb)));
            }
            let mut m = FlowModel::build(&spec).map_err(|e| CliError::Config(e.to_string()))?;
            let noise = &standard_normal_draws(1, m.n_params(), spec.seed.wrapping_add(1))[0];
            let params: Vec<f64> = m.params().iter().zip(noise).map(|(p, z)| p + sec.perturb * z).collect();
            m.set_params(&params).map_err(|e| CliError::Config(e.to_string()))?;
            (m, Some(spec))
        }
    };
    config_error(if sec.tolerance > 0.0 {
        vec![]
    } else {
        vec![format!("tolerance must be positive, got {}", sec.tolerance)]
    })?;

    let draws = standard_normal_draws(sec.n, model.dim(), seed);
    let mut csv = String::from("index,max_abs_error\n");
    let (mut worst, mut failures, mut skipped) = (0.0f64, 0usize, 0usize);
    for (i, z) in draws.iter().enumerate() {
        // Draws whose forward trajectory leaves the guard box have no image to invert.
        let Ok((y, _)) = model.forward(z) else {
            skipped += 1;
            continue;
        };
        match model.inverse(&y) {
            Ok(x) => {
                let e = x.iter().zip(z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(e);
                let _ = writeln!(csv, "{i},{e:e}");
            }
            Err(_) => {
                failures += 1;
                let _ = writeln!(csv, "{i},NaN");
            }
        }
    }
    ctx.write("roundtrip.csv", &csv)?;
    ctx.manifest(
        "roundtrip",
        seed,
        &RoundtripRun {
            model: a.model.clone(),
            spec,
            roundtrip: sec,
        },
        &["roundtrip.csv"],
    )?;
    println!(
        "{} draws, max |inverse(forward(z)) - z| = {worst:.3e}, {failures} inverse failures, {skipped} skipped (forward diverged)",
        sec.n
    );
    if skipped == sec.n && sec.n > 0 {
        return Err(CliError::Numerical("every base draw diverged in the forward pass".into()));
    }
    if failures > 0 || worst >= sec.tolerance {
        return Err(CliError::Check(format!(
            "round-trip error {worst:e} with {failures} failures (tolerance {:e})",
            sec.tolerance
        )));
    }
    Ok(())
}
