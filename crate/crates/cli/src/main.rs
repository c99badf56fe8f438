//! `lcar`: elicit candidate neighbourhood sequences, fit LCAR/IAR/BYM models,
//! run simulation studies and summarise fits.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use lcar_core::elicitation::{ElicitationOptions, MeanNormaliser};
use lcar_core::model::ModelKind;
use lcar_core::sampler::{AdaptationSettings, PriorSettings, SamplerConfig};
use lcar_core::simgen::{SimScenario, StudyConfig};
use lcar_core::workflow::{
    execute, replay, write_failure_manifest, DiagnoseRequest, ElicitRequest, FitRequest, Request, SimulateRequest,
};
use lcar_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lcar", version, about = "Localised CAR models for areal disease counts")]
struct Cli {
    /// Flat `key = value` file; keys are long flag names, command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Elicit the candidate neighbourhood sequence from prior-period counts.
    Elicit(ElicitArgs),
    /// Fit an LCAR, IAR or BYM model by MCMC.
    Fit(FitArgs),
    /// Generate simulated datasets and score the three models.
    Simulate(SimulateArgs),
    /// Summarise a fit: DIC, Moran's I, relative risks, edges removed.
    Diagnose(DiagnoseArgs),
    /// Re-execute a run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct ElicitArgs {
    /// Edge list CSV with header `from,to` (1-based units).
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// One `unit,observed,expected` CSV per prior period.
    #[arg(long, num_args = 1..)]
    prior: Vec<PathBuf>,
    /// CSV with a `unit` column and covariate columns.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Diagonal constant added to the precision [default: 0.001].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Normaliser of the summed log-SIRs in the regression estimate: units or periods [default: units].
    #[arg(long)]
    normaliser: Option<String>,
    /// Re-estimate the regression and variance for every trial edge.
    #[arg(long)]
    refresh_per_trial: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct SamplerArgs {
    /// Number of parallel chains [default: 3].
    #[arg(long)]
    chains: Option<usize>,
    /// Burn-in iterations [default: 100000].
    #[arg(long)]
    burnin: Option<usize>,
    /// Post-burn-in iterations [default: 50000].
    #[arg(long)]
    keep: Option<usize>,
    /// Store every n-th kept iteration [default: 1].
    #[arg(long)]
    thin: Option<usize>,
    /// Half-width of the candidate proposal window [default: 5].
    #[arg(long)]
    q: Option<usize>,
    /// Diagonal constant added to the precision [default: 0.001].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Master seed [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Prior variance of each regression coefficient [default: 1000].
    #[arg(long)]
    beta_variance: Option<f64>,
    /// Upper limit of the uniform prior on tau2 [default: 1000].
    #[arg(long)]
    tau2_max: Option<f64>,
    /// Upper limit of the uniform prior on sigma2 (BYM) [default: 1000].
    #[arg(long)]
    sigma2_max: Option<f64>,
    /// Disable step-size adaptation during burn-in.
    #[arg(long)]
    no_adapt: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// lcar, iar or bym.
    #[arg(long)]
    model: Option<String>,
    /// CSV with header `unit,observed,expected,cov1,...`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// Directory written by `elicit` (required for lcar).
    #[arg(long)]
    sequence: Option<PathBuf>,
    /// Keep covariates on their original scale.
    #[arg(long)]
    no_standardise: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario such as `M=1,E=50-100`; repeatable. `grid` runs all nine.
    #[arg(long, num_args = 1..)]
    scenario: Vec<String>,
    /// Replicates per scenario [default: 50].
    #[arg(long)]
    replicates: Option<usize>,
    /// Side of the square lattice [default: 8].
    #[arg(long)]
    lattice: Option<usize>,
    /// Centroid CSV `unit,x,y` (with --adjacency replaces the lattice).
    #[arg(long)]
    centroids: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// Template CSV `unit,label` with labels in {-1,0,1}.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Bootstrap resamples for RMSE intervals [default: 1000].
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Models to fit, comma separated [default: iar,bym,lcar].
    #[arg(long)]
    models: Option<String>,
    /// Only write the simulated data.
    #[arg(long)]
    no_fit: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Output directory of a `fit` run.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// Moran's I permutations [default: 10000].
    #[arg(long)]
    permutations: Option<usize>,
    /// Seed for the permutation test [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: RUN/diagnostics].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// New output directory; defaults to the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Values from the config file, looked up by long flag name.
#[derive(Default)]
struct Config(HashMap<String, String>);

impl Config {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: "expected key = value".into(),
            })?;
            map.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Invalid(format!("config value {v:?} for {key} is invalid"))),
        }
    }

    fn pick<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> Result<T, Error> {
        Ok(match cli {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    fn required<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<T, Error> {
        match cli {
            Some(v) => Ok(v),
            None => self
                .get(key)?
                .ok_or_else(|| Error::Invalid(format!("--{key} is required"))),
        }
    }

    fn optional<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>, Error> {
        match cli {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn flag(&self, cli: bool, key: &str) -> Result<bool, Error> {
        Ok(cli || self.get(key)?.unwrap_or(false))
    }

    fn paths(&self, cli: Vec<PathBuf>, key: &str) -> Vec<PathBuf> {
        if !cli.is_empty() {
            return cli;
        }
        self.0
            .get(key)
            .map(|v| v.split_whitespace().map(PathBuf::from).collect())
            .unwrap_or_default()
    }
}

fn sampler_config(a: SamplerArgs, cfg: &Config, base: SamplerConfig) -> Result<SamplerConfig, Error> {
    let adapt = !cfg.flag(a.no_adapt, "no-adapt")?;
    Ok(SamplerConfig {
        n_chains: cfg.pick(a.chains, "chains", base.n_chains)?,
        burn_in: cfg.pick(a.burnin, "burnin", base.burn_in)?,
        keep: cfg.pick(a.keep, "keep", base.keep)?,
        thin: cfg.pick(a.thin, "thin", base.thin)?,
        q: cfg.pick(a.q, "q", base.q)?,
        epsilon: cfg.pick(a.epsilon, "epsilon", base.epsilon)?,
        seed: cfg.pick(a.seed, "seed", base.seed)?,
        priors: PriorSettings {
            beta_variance: cfg.pick(a.beta_variance, "beta-variance", base.priors.beta_variance)?,
            tau2_max: cfg.pick(a.tau2_max, "tau2-max", base.priors.tau2_max)?,
            sigma2_max: cfg.pick(a.sigma2_max, "sigma2-max", base.priors.sigma2_max)?,
        },
        adaptation: AdaptationSettings {
            enabled: adapt,
            ..base.adaptation
        },
        ..base
    })
}

fn build_request(command: Command, cfg: &Config) -> Result<Request, Error> {
    Ok(match command {
        Command::Elicit(a) => {
            let normaliser = match cfg.pick(a.normaliser, "normaliser", "units".to_string())?.as_str() {
                "units" => MeanNormaliser::Units,
                "periods" => MeanNormaliser::Periods,
                other => return Err(Error::Invalid(format!("unknown normaliser {other:?}"))),
            };
            Request::Elicit(ElicitRequest {
                adjacency: cfg.required(a.adjacency, "adjacency")?,
                prior: cfg.paths(a.prior, "prior"),
                covariates: cfg.optional(a.covariates, "covariates")?,
                epsilon: cfg.pick(a.epsilon, "epsilon", 0.001)?,
                options: ElicitationOptions {
                    refresh_per_trial: cfg.flag(a.refresh_per_trial, "refresh-per-trial")?,
                    normaliser,
                },
                out: cfg.required(a.out, "out")?,
            })
        }
        Command::Fit(a) => {
            let model: ModelKind = cfg.required(a.model, "model")?.parse()?;
            Request::Fit(FitRequest {
                model,
                data: cfg.required(a.data, "data")?,
                adjacency: cfg.required(a.adjacency, "adjacency")?,
                sequence: cfg.optional(a.sequence, "sequence")?,
                standardise: !cfg.flag(a.no_standardise, "no-standardise")?,
                sampler: sampler_config(a.sampler, cfg, SamplerConfig::default())?,
                out: cfg.required(a.out, "out")?,
            })
        }
        Command::Simulate(a) => {
            let base = StudyConfig::default();
            let sampler = sampler_config(a.sampler, cfg, base.sampler.clone())?;
            let replicates = cfg.pick(a.replicates, "replicates", 50)?;
            let specs = if a.scenario.is_empty() {
                cfg.0
                    .get("scenario")
                    .map(|v| v.split_whitespace().map(String::from).collect())
                    .unwrap_or_else(|| vec!["grid".to_string()])
            } else {
                a.scenario
            };
            let mut scenarios = Vec::new();
            for spec in specs {
                if spec == "grid" {
                    scenarios.extend(SimScenario::grid(replicates, 0));
                } else {
                    scenarios.push(spec.parse::<SimScenario>()?);
                }
            }
            for (i, s) in scenarios.iter_mut().enumerate() {
                s.n_replicates = replicates;
                s.seed = sampler.seed.wrapping_add(i as u64);
            }
            let models = cfg
                .pick(a.models, "models", "iar,bym,lcar".to_string())?
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<Vec<ModelKind>, _>>()?;
            Request::Simulate(SimulateRequest {
                scenarios,
                lattice: cfg.pick(a.lattice, "lattice", 8)?,
                centroids: cfg.optional(a.centroids, "centroids")?,
                adjacency: cfg.optional(a.adjacency, "adjacency")?,
                template: cfg.optional(a.template, "template")?,
                study: StudyConfig {
                    sampler,
                    models,
                    n_boot: cfg.pick(a.bootstrap, "bootstrap", base.n_boot)?,
                    ..base
                },
                fit: !cfg.flag(a.no_fit, "no-fit")?,
                out: cfg.required(a.out, "out")?,
            })
        }
        Command::Diagnose(a) => {
            let mut req = DiagnoseRequest::new(
                cfg.required(a.run, "run")?,
                cfg.required(a.data, "data")?,
                cfg.required(a.adjacency, "adjacency")?,
            );
            req.permutations = cfg.pick(a.permutations, "permutations", req.permutations)?;
            req.seed = cfg.pick(a.seed, "seed", req.seed)?;
            if let Some(out) = cfg.optional(a.out, "out")? {
                req.out = out;
            }
            Request::Diagnose(req)
        }
        Command::Replay(_) => unreachable!("handled before request construction"),
    })
}

fn exit_code(err: &Error) -> ExitCode {
    if err.is_numerical() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if let Command::Replay(a) = cli.command {
        return match replay(&a.manifest, a.out) {
            Ok(m) => {
                println!("replayed {} into {}", m.command, m.request.out().display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        };
    }
    let req = match build_request(cli.command, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match execute(&req) {
        Ok(m) => {
            println!("{} finished; {} files written to {}", m.command, m.outputs.len(), req.out().display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Err(me) = write_failure_manifest(&req, &e) {
                eprintln!("warning: could not write manifest: {me}");
            }
            exit_code(&e)
        }
    }
}
