use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use clap::Args;

#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// Plain-text `key = value` file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model for the `poles` subcommand (jc|rlm).
    #[arg(long)]
    pub model: Option<String>,
    /// JC coupling ratio Γ/γ (γ = 1 units).
    #[arg(long = "Gamma-over-gamma")]
    pub gamma_ratio: Option<f64>,
    /// JC level energy ε in units of γ.
    #[arg(long)]
    pub eps: Option<f64>,
    /// RLM detuning ε − μ in units of Γ.
    #[arg(long)]
    pub detuning: Option<f64>,
    /// RLM temperature in units of Γ.
    #[arg(long = "T")]
    pub temperature: Option<f64>,
    /// exact | semigroup-ginf | semigroup-k0 | semigroup-ginf-reg | slip |
    /// stationary-iterate | transient-iterate | poles | memexp | gradient
    #[arg(long)]
    pub alg: Option<String>,
    /// Starting superoperator: k0 | ginf | random | file
    #[arg(long)]
    pub start: Option<String>,
    /// Superoperator JSON read when `--start file`.
    #[arg(long = "start-file")]
    pub start_file: Option<PathBuf>,
    /// Number of transient iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// End of the time grid
    #[arg(long)]
    pub tmax: Option<f64>,
    /// Grid nodes including t = 0
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RNG seed for `--start random`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stationary iteration residual tolerance
    #[arg(long)]
    pub tol: Option<f64>,
    /// Stationary iteration cap
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    /// csv | json
    #[arg(long)]
    pub format: Option<String>,
    /// Initial state as four reals ρ00,ρ01,ρ10,ρ11.
    #[arg(long)]
    pub rho0: Option<String>,
    /// Highest order of the gradient expansion.
    #[arg(long)]
    pub order: Option<usize>,
    /// Largest total order k of the coefficient table.
    #[arg(long = "max-k")]
    pub max_k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Jc,
    Rlm,
    Poles,
    Memexp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Model {
    Jc { ratio: f64, eps: f64 },
    Rlm { detuning: f64, temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alg {
    Exact,
    SemigroupGinf,
    SemigroupK0,
    SemigroupGinfReg,
    Slip,
    StationaryIterate,
    TransientIterate,
    Poles,
    Memexp,
    Gradient,
}

const ALGS: [(&str, Alg); 10] = [
    ("exact", Alg::Exact),
    ("semigroup-ginf", Alg::SemigroupGinf),
    ("semigroup-k0", Alg::SemigroupK0),
    ("semigroup-ginf-reg", Alg::SemigroupGinfReg),
    ("slip", Alg::Slip),
    ("stationary-iterate", Alg::StationaryIterate),
    ("transient-iterate", Alg::TransientIterate),
    ("poles", Alg::Poles),
    ("memexp", Alg::Memexp),
    ("gradient", Alg::Gradient),
];

impl fmt::Display for Alg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = ALGS.iter().find(|(_, a)| a == self).map(|(n, _)| *n).unwrap_or("?");
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Start {
    K0,
    Ginf,
    Random,
    File,
}

impl Start {
    pub fn name(self) -> &'static str {
        match self {
            Start::K0 => "k0",
            Start::Ginf => "ginf",
            Start::Random => "random",
            Start::File => "file",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Model,
    pub alg: Alg,
    pub start: Start,
    pub start_file: Option<PathBuf>,
    pub iters: usize,
    pub tmax: f64,
    pub nodes: usize,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tol: f64,
    pub max_iter: usize,
    pub format: Format,
    pub rho0: [f64; 4],
    pub order: usize,
    pub max_k: usize,
}

pub const FIG5_DETUNING: f64 = 2.0 * std::f64::consts::PI;
pub const FIG5_TEMPERATURE: f64 = 0.1 / (2.0 * std::f64::consts::PI);

/// Parses `key = value` lines; blank lines and '#' comments are skipped.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", n + 1))?;
        let key = k.trim().trim_start_matches("--").to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(format!("config line {}: unknown key `{key}`", n + 1));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

const KNOWN_KEYS: [&str; 20] = [
    "model",
    "Gamma-over-gamma",
    "eps",
    "detuning",
    "T",
    "alg",
    "start",
    "start-file",
    "iters",
    "tmax",
    "nodes",
    "out",
    "seed",
    "tol",
    "max-iter",
    "format",
    "rho0",
    "order",
    "max-k",
    "config",
];

fn from_file<T: std::str::FromStr>(file: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, String> {
    file.get(key)
        .map(|v| v.parse::<T>().map_err(|_| format!("config key `{key}`: cannot parse `{v}`")))
        .transpose()
}

/// Overlays command-line flags on the config file contents.
pub fn merge(flags: &Flags, file: &BTreeMap<String, String>) -> Result<Flags, String> {
    macro_rules! pick {
        ($field:ident, $key:literal) => {
            match &flags.$field {
                Some(v) => Some(v.clone()),
                None => from_file(file, $key)?,
            }
        };
    }
    Ok(Flags {
        config: flags.config.clone(),
        model: pick!(model, "model"),
        gamma_ratio: pick!(gamma_ratio, "Gamma-over-gamma"),
        eps: pick!(eps, "eps"),
        detuning: pick!(detuning, "detuning"),
        temperature: pick!(temperature, "T"),
        alg: pick!(alg, "alg"),
        start: pick!(start, "start"),
        start_file: pick!(start_file, "start-file"),
        iters: pick!(iters, "iters"),
        tmax: pick!(tmax, "tmax"),
        nodes: pick!(nodes, "nodes"),
        out: pick!(out, "out"),
        seed: pick!(seed, "seed"),
        tol: pick!(tol, "tol"),
        max_iter: pick!(max_iter, "max-iter"),
        format: pick!(format, "format"),
        rho0: pick!(rho0, "rho0"),
        order: pick!(order, "order"),
        max_k: pick!(max_k, "max-k"),
    })
}

/// Resolves defaults and names; semantic checks are left to [`validate`].
pub fn resolve(cmd: Subcommand, f: &Flags) -> Result<RunConfig, String> {
    let model_name = match cmd {
        Subcommand::Jc => "jc".to_string(),
        Subcommand::Rlm => "rlm".to_string(),
        Subcommand::Poles | Subcommand::Memexp => f.model.clone().unwrap_or_else(|| "jc".into()),
    };
    let model = match model_name.as_str() {
        "jc" => Model::Jc {
            ratio: f.gamma_ratio.unwrap_or(0.495),
            eps: f.eps.unwrap_or(1.0),
        },
        "rlm" => Model::Rlm {
            detuning: f.detuning.unwrap_or(FIG5_DETUNING),
            temperature: f.temperature.unwrap_or(FIG5_TEMPERATURE),
        },
        other => return Err(format!("unknown model `{other}` (expected jc or rlm)")),
    };
    let default_alg = match cmd {
        Subcommand::Poles => "poles",
        Subcommand::Memexp => "memexp",
        _ => "exact",
    };
    let alg_name = f.alg.as_deref().unwrap_or(default_alg);
    let alg = ALGS
        .iter()
        .find(|(n, _)| *n == alg_name)
        .map(|(_, a)| *a)
        .ok_or_else(|| format!("unknown algorithm `{alg_name}`"))?;
    let start = match f.start.as_deref().unwrap_or("k0") {
        "k0" => Start::K0,
        "ginf" => Start::Ginf,
        "random" => Start::Random,
        "file" => Start::File,
        other => return Err(format!("unknown start `{other}` (expected k0, ginf, random or file)")),
    };
    let format = match f.format.as_deref().unwrap_or("csv") {
        "csv" => Format::Csv,
        "json" => Format::Json,
        other => return Err(format!("unknown format `{other}` (expected csv or json)")),
    };
    let rho0 = match &f.rho0 {
        Some(s) => parse_rho0(s)?,
        None => match model {
            Model::Jc { .. } => [0.0, 0.0, 0.0, 1.0],
            Model::Rlm { .. } => [1.0, 0.0, 0.0, 0.0],
        },
    };
    Ok(RunConfig {
        model,
        alg,
        start,
        start_file: f.start_file.clone(),
        iters: f.iters.unwrap_or(1),
        tmax: f.tmax.unwrap_or(10.0),
        nodes: f.nodes.unwrap_or(2000),
        out: f.out.clone(),
        seed: f.seed,
        tol: f.tol.unwrap_or(1e-10),
        max_iter: f.max_iter.unwrap_or(500),
        format,
        rho0,
        order: f.order.unwrap_or(3),
        max_k: f.max_k.unwrap_or(5),
    })
}

fn parse_rho0(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("rho0 `{s}`: expected four comma-separated numbers"))?;
    v.try_into()
        .map_err(|_| format!("rho0 `{s}`: expected four comma-separated numbers"))
}

impl RunConfig {
    /// `key = value` lines in config-file syntax.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        match self.model {
            Model::Jc { ratio, eps } => {
                push("model", "jc".into());
                push("Gamma-over-gamma", ratio.to_string());
                push("eps", eps.to_string());
            }
            Model::Rlm { detuning, temperature } => {
                push("model", "rlm".into());
                push("detuning", detuning.to_string());
                push("T", temperature.to_string());
            }
        }
        push("alg", self.alg.to_string());
        push("start", self.start.name().into());
        if let Some(p) = &self.start_file {
            push("start-file", p.display().to_string());
        }
        push("iters", self.iters.to_string());
        push("tmax", self.tmax.to_string());
        push("nodes", self.nodes.to_string());
        push("tol", self.tol.to_string());
        push("max-iter", self.max_iter.to_string());
        push(
            "format",
            match self.format {
                Format::Csv => "csv".into(),
                Format::Json => "json".into(),
            },
        );
        push("rho0", self.rho0.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        push("order", self.order.to_string());
        push("max-k", self.max_k.to_string());
        push("seed", self.seed.map_or("none".into(), |s| s.to_string()));
        kv
    }

    pub fn units(&self) -> &'static str {
        match self.model {
            Model::Jc { .. } => "gamma = 1 (times in 1/gamma, energies in gamma)",
            Model::Rlm { .. } => "Gamma = 1 (times in 1/Gamma, energies in Gamma)",
        }
    }
}

/// All problems with a configuration; empty when it can run.
pub fn validate(c: &RunConfig) -> Vec<String> {
    let mut d = Vec::new();
    let finite_pos = |x: f64| x.is_finite() && x > 0.0;
    let mut overdamped = None;
    match c.model {
        Model::Jc { ratio, eps } => {
            if !finite_pos(ratio) {
                d.push(format!("Gamma-over-gamma must be positive, got {ratio}"));
            } else {
                overdamped = Some(ratio <= 0.5);
            }
            if !eps.is_finite() {
                d.push("eps must be finite".into());
            }
        }
        Model::Rlm { detuning, temperature } => {
            if !finite_pos(temperature) {
                d.push(format!("T must be positive, got {temperature}"));
            }
            if !detuning.is_finite() {
                d.push("detuning must be finite".into());
            }
        }
    }
    let is_jc = matches!(c.model, Model::Jc { .. });
    if !finite_pos(c.tmax) {
        d.push(format!("tmax must be positive, got {}", c.tmax));
    }
    if c.nodes < 2 {
        d.push(format!("nodes must be at least 2, got {}", c.nodes));
    }
    if !finite_pos(c.tol) {
        d.push(format!("tol must be positive, got {}", c.tol));
    }
    if c.max_iter == 0 {
        d.push("max-iter must be at least 1".into());
    }
    if c.alg == Alg::TransientIterate && c.iters == 0 {
        d.push("iters must be at least 1".into());
    }
    let needs_overdamped = |what: &str, d: &mut Vec<String>| {
        if !is_jc {
            d.push(format!("{what} is only defined for the jc model"));
        } else if overdamped == Some(false) {
            d.push(format!("{what} requires the overdamped regime gamma >= 2 Gamma (Gamma-over-gamma <= 0.5)"));
        }
    };
    match c.alg {
        Alg::SemigroupGinf if is_jc => needs_overdamped("semigroup-ginf", &mut d),
        Alg::Slip => needs_overdamped("slip", &mut d),
        Alg::Gradient if is_jc => needs_overdamped("gradient", &mut d),
        Alg::SemigroupGinfReg => {
            if !is_jc {
                d.push("semigroup-ginf-reg is only defined for the jc model".into());
            } else if overdamped == Some(true) {
                d.push("semigroup-ginf-reg requires the underdamped regime gamma < 2 Gamma (Gamma-over-gamma > 0.5)".into());
            }
        }
        _ => {}
    }
    let uses_start = matches!(c.alg, Alg::StationaryIterate | Alg::TransientIterate);
    if uses_start {
        match c.start {
            Start::Ginf if is_jc && overdamped == Some(false) => {
                d.push("start ginf requires the overdamped regime gamma >= 2 Gamma".into())
            }
            Start::Random if c.seed.is_none() => d.push("start random requires --seed".into()),
            Start::File if c.start_file.is_none() => d.push("start file requires --start-file".into()),
            _ => {}
        }
    }
    if c.format == Format::Json && !matches!(c.alg, Alg::StationaryIterate | Alg::Gradient) {
        d.push(format!("json output is available for stationary-iterate and gradient, not {}", c.alg));
    }
    let trace: f64 = c.rho0[0] + c.rho0[3];
    if c.rho0.iter().any(|x| !x.is_finite())
        || (trace - 1.0).abs() > 1e-12
        || c.rho0[1] != c.rho0[2]
        || c.rho0[0] < 0.0
        || c.rho0[3] < 0.0
    {
        d.push("rho0 must be a real symmetric unit-trace matrix with nonnegative diagonal".into());
    }
    if c.max_k > 8 && c.alg == Alg::Memexp {
        d.push(format!("max-k must be at most 8, got {}", c.max_k));
    }
    d
}
