//! `audit`: command-line front end for latent-space certification.
//!
//! Exit codes: 0 success, 1 negative answer to a yes/no query (verification
//! failed, gate rejected, oracle contradiction), 2 usage or configuration
//! error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use latent_audit::audit::{
    compare_pixel_latent, cross_check, largest_epsilon, largest_epsilon_per_sample, run_unit_test, ComparisonOptions,
    UnitTest, VerificationReport,
};
use latent_audit::data::{parse_row, Space};
use latent_audit::io::{atomic_write, read_json, write_json};
use latent_audit::specsheet::{build_spec_sheet, gate, gate_latent, SheetInputs, SpecSheet, TestSuite};
use latent_audit::train::{train, Optimizer, TrainConfig};
use latent_audit::world::{generate_world, WorldConfig};
use latent_audit::{AuditError, Dataset, Engine, Network, Norm, PerturbationSpec};

#[derive(Parser)]
#[command(name = "audit", version, about = "Certify classifiers against latent-space perturbations")]
struct Cli {
    /// Zero out timestamps so repeated runs produce identical bytes.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for per-sample work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic latent world (decoder, encoder, datasets).
    World(WorldArgs),
    /// Train a classifier head with certified training.
    Train(TrainArgs),
    /// Verify a unit test on a dataset; exits 1 when it fails.
    Verify(VerifyArgs),
    /// Bisect for the largest verifiable radius.
    SearchEps(SearchArgs),
    /// Build a deployment spec-sheet from verification reports.
    SpecSheet(SheetArgs),
    /// Check one input against a spec-sheet; exits 1 on reject.
    Gate(GateArgs),
    /// Cross-check verified samples with random sampling; exits 1 on contradiction.
    Oracle(OracleArgs),
    /// Compare latent and pixel-space radii at a matched verified error.
    ComparePixel(CompareArgs),
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PertArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value = "linf")]
    norm: Norm,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// JSON training config; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    arch: Option<Vec<usize>>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    norm: Option<Norm>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    ramp: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kappa_final: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[command(flatten)]
    pert: PertArgs,
    #[arg(long, default_value = "crown-ibp")]
    engine: Engine,
    #[arg(long, default_value = "latent")]
    test_id: String,
    /// Largest verified error still counted as a pass.
    #[arg(long, default_value_t = 0.0)]
    max_verified_error: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    pert: PertArgs,
    #[arg(long, default_value = "crown-ibp")]
    engine: Engine,
    /// Upper end of the search; defaults to 4 × --nominal-eps.
    #[arg(long)]
    eps_max: Option<f64>,
    #[arg(long)]
    nominal_eps: Option<f64>,
    /// Absolute tolerance; defaults to 1e-3 × eps_max.
    #[arg(long)]
    tol: Option<f64>,
    /// One search per sample instead of one for the whole dataset.
    #[arg(long)]
    per_sample: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SheetArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    tests: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GateArgs {
    /// Required unless --already-latent.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    spec_sheet: PathBuf,
    #[arg(long)]
    test_id: String,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    already_latent: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[command(flatten)]
    pert: PertArgs,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "crown-ibp")]
    engine: Engine,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Pixel-space dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target_verified_error: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    eps_grid: Vec<f64>,
    /// Separate radii for the pixel route; --eps-grid is reused otherwise.
    #[arg(long, value_delimiter = ',')]
    pixel_eps_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    dims: Vec<usize>,
    #[arg(long, default_value = "linf")]
    norm: Norm,
    #[arg(long, default_value = "ibp")]
    engine: Engine,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure tagged with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        let code = match e {
            AuditError::Config(_) | AuditError::Argument(_) | AuditError::UnknownTest(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<Outcome, Failure>;

/// Summary printed on the `RESULT` line plus the yes/no answer, if any.
struct Outcome {
    summary: Value,
    negative: bool,
}

impl Outcome {
    fn ok(summary: Value) -> Self {
        Self {
            summary,
            negative: false,
        }
    }
}

fn load_network(path: &Path) -> Result<Network, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(Network::from_json(&text)?)
}

fn load_dataset(path: &Path, expected: Space) -> Result<Dataset, Failure> {
    let (ds, space) = Dataset::load(path).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })?;
    if space != expected {
        return Err(usage(format!("{}: expected a {expected:?} dataset, found {space:?}", path.display())));
    }
    Ok(ds)
}

fn now(deterministic: bool) -> u64 {
    if deterministic {
        0
    } else {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

fn cmd_world(a: WorldArgs) -> CmdResult {
    let mut cfg: WorldConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let world = generate_world(&cfg)?;
    world.save(&a.out_dir)?;
    println!(
        "world: {} train / {} test samples, reconstruction rms error {:.3e}",
        world.train.len(),
        world.test.len(),
        world.reconstruction_error
    );
    Ok(Outcome::ok(json!({
        "out_dir": a.out_dir,
        "reconstruction_error": world.reconstruction_error,
        "n_train": world.train.len(),
        "n_test": world.test.len(),
    })))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $field:ident) => {
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    set!(a.arch => arch);
    set!(a.epsilon => epsilon_target);
    set!(a.dims => pert_dims);
    set!(a.norm => norm);
    set!(a.epochs => epochs);
    set!(a.warmup => warmup_epochs);
    set!(a.ramp => ramp_epochs);
    set!(a.lr => learning_rate);
    set!(a.kappa_final => kappa_final);
    set!(a.batch => batch_size);
    set!(a.seed => seed);
    match a.optimizer.as_deref() {
        None => {}
        Some("adam") => cfg.optimizer = Optimizer::default(),
        Some("sgd") | Some("sgd-momentum") => cfg.optimizer = Optimizer::SgdMomentum { beta: 0.9 },
        Some(other) => return Err(usage(format!("unknown optimizer `{other}`; expected adam or sgd"))),
    }
    cfg.validate()?;
    let train_set = load_dataset(&a.data, Space::Latent)?;
    let eval_set = load_dataset(&a.eval, Space::Latent)?;
    let (net, history) = train(&cfg, &train_set, &eval_set)?;
    atomic_write(&a.out, net.to_json()?.as_bytes())?;
    atomic_write(&a.history, history.to_csv().as_bytes())?;
    let last = history.last().expect("epochs >= 1");
    println!(
        "trained {} epochs: clean error {:.4}, verified error {:.4} at eps {}",
        cfg.epochs, last.clean_error, last.verified_error, cfg.epsilon_target
    );
    Ok(Outcome::ok(json!({
        "epochs": cfg.epochs,
        "clean_error": last.clean_error,
        "verified_error": last.verified_error,
        "epsilon": cfg.epsilon_target,
    })))
}

fn unit_test(id: &str, pert: &PertArgs, epsilon: f64) -> Result<UnitTest, Failure> {
    let spec = PerturbationSpec::new(pert.dims.clone(), epsilon, pert.norm)?;
    Ok(UnitTest::classification_invariance(id, spec))
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.max_verified_error) {
        return Err(usage("--max-verified-error must lie in [0, 1]"));
    }
    let test = unit_test(&a.test_id, &a.pert, a.epsilon)?;
    let net = load_network(&a.model)?;
    let data = load_dataset(&a.data, Space::Latent)?;
    let report = run_unit_test(&net, &data, &test, None, a.engine)?;
    write_json(&a.out, &report)?;
    let passed = report.verified_error <= a.max_verified_error;
    println!(
        "{}: verified error {:.4} ({} clean errors, {} unverified of {}) at eps {} [{}]",
        report.test_id,
        report.verified_error,
        report.n_clean_errors,
        report.n_unverified,
        report.n_samples,
        report.epsilon,
        if passed { "pass" } else { "fail" }
    );
    Ok(Outcome {
        summary: json!({
            "test_id": report.test_id,
            "epsilon": report.epsilon,
            "engine": report.engine,
            "n": report.n_samples,
            "clean_errors": report.n_clean_errors,
            "unverified": report.n_unverified,
            "verified_error": report.verified_error,
            "passed": passed,
        }),
        negative: !passed,
    })
}

fn cmd_search(a: SearchArgs) -> CmdResult {
    let eps_max = match (a.eps_max, a.nominal_eps) {
        (Some(m), _) => m,
        (None, Some(n)) => latent_audit::audit::default_search_limits(n).0,
        (None, None) => return Err(usage("give --eps-max or --nominal-eps")),
    };
    let tol = a.tol.unwrap_or(1e-3 * eps_max);
    let test = unit_test("search", &a.pert, 0.0)?;
    let net = load_network(&a.model)?;
    let data = load_dataset(&a.data, Space::Latent)?;
    let summary = if a.per_sample {
        let found = largest_epsilon_per_sample(&net, &data, &test, a.engine, tol, eps_max)?;
        let eps: Vec<f64> = found.iter().map(|s| s.epsilon).collect();
        println!(
            "per-sample largest eps: min {:.4}, max {:.4} over {} samples",
            eps.iter().copied().fold(f64::INFINITY, f64::min),
            eps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            eps.len()
        );
        json!({ "eps_max": eps_max, "tol": tol, "per_sample": found })
    } else {
        let s = largest_epsilon(&net, &data, &test, a.engine, tol, eps_max)?;
        if s.unverifiable {
            println!("not verifiable even at eps = 0 (some sample is misclassified)");
        } else {
            println!("largest verified eps: {} ({} bisection steps)", s.epsilon, s.iterations);
        }
        json!({
            "epsilon": s.epsilon,
            "unverifiable": s.unverifiable,
            "iterations": s.iterations,
            "eps_max": eps_max,
            "tol": tol,
        })
    };
    if let Some(out) = &a.out {
        write_json(out, &summary)?;
    }
    Ok(Outcome::ok(summary))
}

fn cmd_sheet(a: SheetArgs, deterministic: bool) -> CmdResult {
    let suite: TestSuite = read_json(&a.tests)?;
    suite.validate()?;
    let model = load_network(&a.model)?;
    let encoder = load_network(&a.encoder)?;
    let train_set = load_dataset(&a.train, Space::Latent)?;
    let reports = a
        .reports
        .iter()
        .map(|p| read_json::<VerificationReport>(p).map_err(Failure::from))
        .collect::<Result<Vec<_>, _>>()?;
    let sheet = build_spec_sheet(&SheetInputs {
        model: &model,
        encoder: &encoder,
        tests: &suite.tests,
        reports: &reports,
        train_set: &train_set,
        threshold: a.threshold,
        created_unix_seconds: now(deterministic),
    })?;
    write_json(&a.out, &sheet)?;
    for e in &sheet.entries {
        match &e.flag {
            Some(flag) => println!("{}: {flag}", e.test_id),
            None => println!(
                "{}: range at eps {} on dims {:?}",
                e.test_id,
                e.operating_epsilon.unwrap_or(0.0),
                e.dims
            ),
        }
    }
    Ok(Outcome::ok(json!({
        "model_id": sheet.model_id,
        "encoder_id": sheet.encoder_id,
        "entries": sheet.entries.len(),
    })))
}

fn cmd_gate(a: GateArgs) -> CmdResult {
    let sheet: SpecSheet = read_json(&a.spec_sheet)?;
    let text = std::fs::read_to_string(&a.input).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", a.input.display()),
    })?;
    let row = parse_row(&text)?;
    let decision = if a.already_latent {
        gate_latent(&sheet, &row, &a.test_id)?
    } else {
        let path = a.encoder.as_ref().ok_or_else(|| usage("--encoder is required unless --already-latent"))?;
        gate(&load_network(path)?, &sheet, &row, &a.test_id)?
    };
    let verdict = if decision.accept { "accept" } else { "reject" };
    println!("{}: {verdict}", decision.test_id);
    Ok(Outcome {
        summary: json!({
            "decision": verdict,
            "test_id": decision.test_id,
            "checks": decision.checks,
        }),
        negative: !decision.accept,
    })
}

fn cmd_oracle(a: OracleArgs) -> CmdResult {
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let test = unit_test("oracle", &a.pert, a.epsilon)?;
    let net = load_network(&a.model)?;
    let data = load_dataset(&a.data, Space::Latent)?;
    let check = cross_check(&net, &data, &test, a.engine, a.samples, a.seed)?;
    if let Some(out) = &a.out {
        write_json(out, &check)?;
    }
    println!(
        "{} verified, {} with sampled counterexamples, {} contradictions",
        check.n_verified,
        check.n_with_counterexample,
        check.contradictions.len()
    );
    Ok(Outcome {
        negative: !check.contradictions.is_empty(),
        summary: serde_json::to_value(&check).map_err(AuditError::from)?,
    })
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let encoder = load_network(&a.encoder)?;
    let model = load_network(&a.model)?;
    let data = load_dataset(&a.data, Space::Pixel)?;
    let opts = ComparisonOptions {
        dims: a.dims,
        norm: a.norm,
        engine: a.engine,
        latent_grid: a.eps_grid,
        pixel_grid: a.pixel_eps_grid,
    };
    let c = compare_pixel_latent(&encoder, &model, &data, a.target_verified_error, &opts)?;
    if let Some(out) = &a.out {
        write_json(out, &c)?;
    }
    println!(
        "at verified error {}: latent eps/z_nom = {:.4}, induced eps/z_nom = {:.4}",
        c.target_verified_error, c.latent_fraction, c.induced_fraction
    );
    Ok(Outcome::ok(json!({
        "target_verified_error": c.target_verified_error,
        "latent_epsilon": c.latent_epsilon,
        "pixel_epsilon": c.pixel_epsilon,
        "induced_latent_epsilon": c.induced_latent_epsilon,
        "z_nom": c.z_nom,
        "latent_fraction": c.latent_fraction,
        "induced_fraction": c.induced_fraction,
    })))
}

fn dispatch(cli: Cli) -> CmdResult {
    let deterministic = cli.deterministic;
    match cli.command {
        Command::World(a) => cmd_world(a),
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::SearchEps(a) => cmd_search(a),
        Command::SpecSheet(a) => cmd_sheet(a, deterministic),
        Command::Gate(a) => cmd_gate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::ComparePixel(a) => cmd_compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = match cli.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(outcome) => {
            println!("RESULT {}", outcome.summary);
            ExitCode::from(u8::from(outcome.negative))
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
