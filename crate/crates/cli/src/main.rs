use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use qcrystal::cluster::{battle_federbush_sum, enumerate_trees, ClusterEngine};
use qcrystal::config::RunConfig;
use qcrystal::covariance::CovarianceKernel;
use qcrystal::estimator::{
    expectation, order_parameter, uniqueness_gap, Backend, GibbsModel, McConfig, OneSitePotential, ScanSetup,
};
use qcrystal::lattice::Boundary;
use qcrystal::oracle::{thermal_correlation, OracleSpec};
use qcrystal::params::{rescale_on, thresholds};
use qcrystal::potential::PotentialParams;
use qcrystal::sampler::{slice_count, BoundaryCondition, Observable};
use qcrystal::verify;
use qcrystal::Error;

/// Euclidean Gibbs measures of a light-mass quantum anharmonic crystal.
#[derive(Parser, Debug)]
#[command(name = "qcrystal", version)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for result files and manifest.json.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Mass, temperature and field thresholds as JSON.
    Thresholds,
    /// Matsubara against closed-form covariance, as CSV.
    Covariance(CovarianceArgs),
    /// Gibbs expectation of one observable.
    Sample(SampleArgs),
    /// Cluster expansion diagnostics.
    Cluster(ClusterArgs),
    /// Exact-diagonalization correlations, as CSV.
    Oracle(OracleArgs),
    /// Boundary-condition gap at the centre of growing chains.
    Uniqueness(UniquenessArgs),
    /// Order parameter over fields and boxes.
    OrderParam(OrderParamArgs),
    /// Invariant suite; `verify potential` checks only the derivative bounds.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Serialize)]
struct CovarianceArgs {
    #[arg(long)]
    n_max: Option<usize>,
    /// Number of equally spaced times in [0, beta_hat).
    #[arg(long, default_value_t = 10)]
    tau_grid: usize,
    #[arg(long)]
    nu: Option<usize>,
    /// Comma separated box sides.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long, value_enum)]
    boundary: Option<BoundaryArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum BoundaryArg {
    Periodic,
    Dirichlet,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    slices_per_unit: Option<usize>,
    /// `reweight` or `mcmc`.
    #[arg(long)]
    backend: Option<String>,
    /// Crank-Nicolson mixing parameter for `mcmc`.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Product of `phi[site,tau,component]` factors.
    #[arg(long, default_value = "phi[0,0,0]*phi[0,0,0]")]
    observable: String,
    /// `periodic`, `zero` or `tempered:FILE` (CSV site,slice,component,value).
    #[arg(long, default_value = "periodic")]
    bc: String,
}

#[derive(Args, Debug, Serialize)]
struct ClusterArgs {
    #[arg(long)]
    order: Option<usize>,
    /// `lowT` or `highT`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value = "phi[0,0,0]*phi[0,0,0]")]
    observable: String,
    #[arg(long, value_enum, default_value = "residuals")]
    check: ClusterCheck,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ClusterCheck {
    Trees,
    Bf,
    NewtonLeibniz,
    Residuals,
}

#[derive(Args, Debug, Serialize)]
struct OracleArgs {
    #[arg(long, default_value_t = 1)]
    sites: usize,
    /// Grid points of the one-site stencil.
    #[arg(long)]
    grid: Option<usize>,
    /// Half-width of the position box.
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long, default_value_t = 10)]
    tau_grid: usize,
    /// Site of the second factor (two sites only).
    #[arg(long, default_value_t = 0)]
    site_b: usize,
}

#[derive(Args, Debug, Serialize)]
struct UniquenessArgs {
    #[arg(long, default_value = "8,16,32")]
    sides: String,
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Evaluation time; omitted means averaged over the time circle.
    #[arg(long)]
    tau0: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct OrderParamArgs {
    #[arg(long, default_value = "-0.1,0,0.1", allow_hyphen_values = true)]
    h_values: String,
    /// Comma separated sides; defaults to the configured box.
    #[arg(long)]
    sides: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    /// `potential` restricts the run to the derivative bounds.
    #[arg(value_parser = ["potential"])]
    target: Option<String>,
    #[arg(long, default_value_t = 10)]
    n_max: usize,
    #[arg(long, default_value_t = 5.0)]
    extent: f64,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Couplings `b_m:delta_m`, comma separated.
    #[arg(long, default_value = "0.1:1,0.5:2,0.9:0.3")]
    couplings: String,
}

/// What a subcommand hands back: a file name, its contents, and whether the
/// run counts as a success.
struct Artifact {
    file: &'static str,
    body: String,
    ok: bool,
}

fn json_artifact<T: Serialize>(file: &'static str, value: &T) -> Artifact {
    Artifact { file, body: serde_json::to_string_pretty(value).expect("serializable") + "\n", ok: true }
}

fn list<T: std::str::FromStr>(what: &'static str, s: &str) -> qcrystal::Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| invalid(what, format!("cannot parse `{}`", x.trim()))))
        .collect()
}

fn invalid(name: &'static str, reason: String) -> Error {
    Error::InvalidParameter { name, reason }
}

fn finite_beta_hat(cfg: &RunConfig, boundary: Boundary) -> qcrystal::Result<(qcrystal::params::RescaledParams, f64)> {
    let r = rescale_on(&cfg.params, boundary)?;
    let b = r.beta_hat.finite().ok_or(Error::InfiniteBeta)?;
    Ok((r, b))
}

fn mc(cfg: &RunConfig, rho: f64) -> McConfig {
    let mut m = McConfig::new(cfg.samples, cfg.seed);
    if cfg.backend == "mcmc" {
        m.backend = Backend::Mcmc { rho };
    }
    m
}

fn run_covariance(cfg: &mut RunConfig, args: &CovarianceArgs) -> qcrystal::Result<Artifact> {
    if let Some(nu) = args.nu {
        cfg.params.nu = nu;
    }
    if let Some(d) = &args.dims {
        cfg.params.dims = list("dims", d)?;
    }
    if let Some(b) = args.boundary {
        cfg.boundary = match b {
            BoundaryArg::Periodic => Boundary::Periodic,
            BoundaryArg::Dirichlet => Boundary::Dirichlet,
        };
    }
    cfg.broadcast();
    let n_max = args.n_max.unwrap_or(cfg.matsubara_cutoff);
    let (r, beta_hat) = finite_beta_hat(cfg, cfg.boundary)?;
    let kern = CovarianceKernel::new(cfg.params.lattice(cfg.boundary)?, cfg.params.a, cfg.params.j, r.beta_hat)?;
    let mut body = String::from("j,tau,G_matsubara,G_closed,abs_diff\n");
    for j in 0..kern.lattice().n_sites() {
        for k in 0..args.tau_grid.max(1) {
            let tau = beta_hat * k as f64 / args.tau_grid.max(1) as f64;
            let gm = kern.covariance_matsubara(0, j, tau, n_max)?;
            let gc = kern.covariance_closed(0, j, tau);
            body += &format!("{j},{tau},{gm:.15e},{gc:.15e},{:.3e}\n", (gm - gc).abs());
        }
    }
    Ok(Artifact { file: "covariance.csv", body, ok: true })
}

fn run_sample(cfg: &mut RunConfig, args: &SampleArgs) -> qcrystal::Result<Artifact> {
    if let Some(n) = args.samples {
        cfg.samples = n;
    }
    if let Some(s) = args.slices_per_unit {
        cfg.slices_per_unit = s;
    }
    if let Some(b) = &args.backend {
        cfg.set("backend", b).map_err(|e| invalid("backend", e))?;
    }
    cfg.boundary = if args.bc == "periodic" { Boundary::Periodic } else { Boundary::Dirichlet };
    cfg.validate()?;
    let p = &cfg.params;
    let (r, beta_hat) = finite_beta_hat(cfg, cfg.boundary)?;
    let kern = CovarianceKernel::new(p.lattice(cfg.boundary)?, p.a, p.j, r.beta_hat)?;
    let slices = slice_count(beta_hat, cfg.slices_per_unit);
    let n_sites = kern.lattice().n_sites();
    let dtau = beta_hat / slices as f64;
    let bc = match args.bc.as_str() {
        "periodic" => BoundaryCondition::Periodic,
        "zero" => BoundaryCondition::Zero,
        other => match other.strip_prefix("tempered:") {
            Some(file) => {
                let text = std::fs::read_to_string(file)?;
                BoundaryCondition::tempered_from_csv(&text, n_sites, slices, p.d, dtau)?
            }
            None => return Err(invalid("bc", format!("expected periodic, zero or tempered:FILE, got `{other}`"))),
        },
    };
    let pot = PotentialParams::new(r.b_m, r.delta_m, p.d)?;
    let model = GibbsModel::new(&kern, slices, OneSitePotential::Standard(pot), r.h_hat.clone(), bc)?;
    let obs = model.bind(&Observable::parse(&args.observable)?)?;
    let res = expectation(&obs, &model, &mc(cfg, args.rho))?;
    Ok(json_artifact("sample.json", &res))
}

fn run_cluster(cfg: &mut RunConfig, args: &ClusterArgs) -> qcrystal::Result<Artifact> {
    if let Some(o) = args.order {
        cfg.order = o;
    }
    if let Some(m) = &args.mode {
        cfg.set("mode", m).map_err(|e| invalid("mode", e))?;
    }
    let order = cfg.order;
    match args.check {
        ClusterCheck::Trees => {
            let trees: Vec<Value> = enumerate_trees(order)?
                .iter()
                .map(|t| json!({ "parent": t.parent, "counts": t.counts(), "degrees": t.degrees() }))
                .collect();
            return Ok(json_artifact("cluster.json", &json!({ "order": order, "count": trees.len(), "trees": trees })));
        }
        ClusterCheck::Bf => {
            let rows = (2..=order.max(2)).map(battle_federbush_sum).collect::<qcrystal::Result<Vec<_>>>()?;
            let ok = rows.iter().all(|r| r.holds);
            return Ok(Artifact { ok, ..json_artifact("cluster.json", &rows) });
        }
        _ => {}
    }
    cfg.validate()?;
    let p = &cfg.params;
    if p.d != 1 {
        return Err(invalid("d", "the cluster engine handles scalar fields only".into()));
    }
    let (r, beta_hat) = finite_beta_hat(cfg, cfg.boundary)?;
    let kern = CovarianceKernel::new(p.lattice(cfg.boundary)?, p.a, p.j, r.beta_hat)?;
    let slices = slice_count(beta_hat, cfg.slices_per_unit);
    let engine = ClusterEngine::new(&kern, slices, r.b_m, r.delta_m, cfg.mode, &Observable::parse(&args.observable)?)?;
    let mcfg = McConfig::new(cfg.samples, cfg.seed);
    if let ClusterCheck::NewtonLeibniz = args.check {
        let rep = engine.newton_leibniz(&mcfg)?;
        let ok = rep.consistent(4.0);
        return Ok(Artifact { ok, ..json_artifact("cluster.json", &rep) });
    }
    let rep = engine.truncated_expansion(order, &mcfg)?;
    Ok(json_artifact("cluster.json", &rep))
}

fn run_oracle(cfg: &RunConfig, args: &OracleArgs) -> qcrystal::Result<Artifact> {
    let p = &cfg.params;
    p.validate()?;
    let r = rescale_on(p, Boundary::Periodic).or_else(|_| rescale_on(p, Boundary::Dirichlet))?;
    let beta_hat = r.beta_hat.finite().ok_or(Error::InfiniteBeta)?;
    let mut spec = match args.sites {
        1 => OracleSpec::single(p.a, r.b_m, r.delta_m),
        2 => OracleSpec::pair(p.a, p.j, r.b_m, r.delta_m),
        n => return Err(invalid("sites", format!("the oracle handles 1 or 2 sites, got {n}"))),
    };
    if let Some(g) = args.grid {
        spec.grid = g;
    }
    if let Some(x) = args.extent {
        spec.extent = x;
    }
    let n = args.tau_grid.max(1);
    let taus: Vec<f64> = (0..n).map(|k| beta_hat * k as f64 / n as f64).collect();
    let vals = thermal_correlation(spec, beta_hat, &taus, 0, args.site_b)?;
    let mut body = String::from("tau,correlation\n");
    for (t, v) in taus.iter().zip(&vals) {
        body += &format!("{t},{:.12e}\n", v.value);
    }
    Ok(Artifact { file: "oracle.csv", body, ok: true })
}

fn run_uniqueness(cfg: &RunConfig, args: &UniquenessArgs) -> qcrystal::Result<Artifact> {
    let setup = ScanSetup { params: cfg.params.clone(), slices_per_unit: cfg.slices_per_unit };
    let d = cfg.params.d;
    let rows = uniqueness_gap(&setup, &vec![args.xi; d], &vec![args.eta; d], &list("sides", &args.sides)?, args.tau0, &mc(cfg, 0.5))?;
    Ok(json_artifact("uniqueness.json", &rows))
}

fn run_order_param(cfg: &RunConfig, args: &OrderParamArgs) -> qcrystal::Result<Artifact> {
    let setup = ScanSetup { params: cfg.params.clone(), slices_per_unit: cfg.slices_per_unit };
    let sides = match &args.sides {
        Some(s) => list("sides", s)?,
        None => vec![cfg.params.dims[0]],
    };
    let mut direction = vec![0.0; cfg.params.d];
    direction[0] = 1.0;
    let table = order_parameter(&setup, &direction, &list("h_values", &args.h_values)?, &sides, &mc(cfg, 0.5))?;
    Ok(json_artifact("order_param.json", &table))
}

fn run_verify(cfg: &RunConfig, args: &VerifyArgs) -> qcrystal::Result<Artifact> {
    let rows = if args.target.is_some() {
        if !(args.step > 0.0 && args.extent > 0.0) {
            return Err(invalid("step", "step and extent must be positive".into()));
        }
        let n = (2.0 * args.extent / args.step).round() as usize;
        let grid: Vec<f64> = (0..=n).map(|i| -args.extent + args.step * i as f64).collect();
        let couplings = args
            .couplings
            .split(',')
            .map(|c| {
                let (b, d) = c.split_once(':').ok_or_else(|| invalid("couplings", format!("expected b_m:delta_m, got `{c}`")))?;
                let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| invalid("couplings", format!("cannot parse `{v}`")));
                Ok((parse(b)?, parse(d)?))
            })
            .collect::<qcrystal::Result<Vec<_>>>()?;
        verify::potential_bounds(args.n_max, &grid, &couplings)
    } else {
        verify::run_all(cfg)
    };
    let ok = rows.iter().all(|r| r.passed);
    Ok(Artifact { file: "verify.txt", body: verify::format_table(&rows), ok })
}

fn load_config(cli: &Cli) -> qcrystal::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    }
    .with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.display().to_string());
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &mut RunConfig) -> qcrystal::Result<Artifact> {
    cfg.validate()?;
    match &cli.command {
        Command::Thresholds => Ok(json_artifact("thresholds.json", &thresholds(&cfg.params, cfg.c)?)),
        Command::Covariance(a) => run_covariance(cfg, a),
        Command::Sample(a) => run_sample(cfg, a),
        Command::Cluster(a) => run_cluster(cfg, a),
        Command::Oracle(a) => run_oracle(cfg, a),
        Command::Uniqueness(a) => run_uniqueness(cfg, a),
        Command::OrderParam(a) => run_order_param(cfg, a),
        Command::Verify(a) => run_verify(cfg, a),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } => "config",
        Error::InvalidParameter { .. } | Error::OddBoxSide { .. } => "invalid_parameter",
        Error::Io(_) => "io",
        Error::OracleNotConverged(_) => "not_converged",
        _ => "runtime",
    }
}

fn write_outputs(dir: &Path, artifact: &Artifact, manifest: &Value) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(artifact.file), &artifact.body)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest).expect("json") + "\n")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // a second initialisation only happens in tests; keep the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let fail = |e: Error| {
        eprintln!("{}", json!({ "error": e.to_string(), "kind": error_kind(&e) }));
        ExitCode::from(2)
    };
    let mut cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let artifact = match dispatch(&cli, &mut cfg) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    print!("{}", artifact.body);
    let manifest = json!({
        "command": cli.command,
        "config": cfg,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "result_file": artifact.file,
        "passed": artifact.ok,
    });
    match cfg.out.as_deref() {
        Some(dir) => {
            if let Err(e) = write_outputs(Path::new(dir), &artifact, &manifest) {
                return fail(e.into());
            }
        }
        None => eprintln!("{manifest}"),
    }
    if artifact.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
