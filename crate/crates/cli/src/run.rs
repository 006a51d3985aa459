use std::fmt::Write as _;

use qme_core::evolve::solve_timelocal;
use qme_core::fixedpoint::{random_superoperator, random_trace_preserving, KernelSplit};
use qme_core::liouville::{spectral_decompose, OperatorVec, Superoperator};
use qme_core::memexp::{gradient_expansion_stationary, FCoeffTable};
use qme_core::model_jc::*;
use qme_core::model_rlm::*;
use qme_core::spectral::{find_poles, mark_sampled, seed_grid, semigroup_evolution, slippage, write_pole_csv, PoleSearch};
use qme_core::{stationary_iterate, transient_iterate, QmeError, StateTrajectory, SuperopTrajectory, TimeGrid, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Alg, Format, Model, RunConfig, Start};

/// Failure of a run; the variant decides the exit status.
#[derive(Debug)]
pub enum RunError {
    Validation(Vec<String>),
    Numerical(String),
    Io(String),
}

impl From<QmeError> for RunError {
    fn from(e: QmeError) -> Self {
        RunError::Numerical(e.to_string())
    }
}

/// Output text plus an optional failure that still produced a file.
pub struct Output {
    pub text: String,
    pub failure: Option<String>,
}

impl Output {
    fn ok(text: String) -> Self {
        Self { text, failure: None }
    }
}

enum Physics {
    Jc(JcParams),
    Rlm(RlmParams),
}

impl Physics {
    fn of(c: &RunConfig) -> Result<Self, RunError> {
        let bad = |e: QmeError| RunError::Validation(vec![e.to_string()]);
        Ok(match c.model {
            Model::Jc { ratio, eps } => Physics::Jc(JcParams::from_ratio(ratio, eps).map_err(bad)?),
            Model::Rlm { detuning, temperature } => {
                Physics::Rlm(RlmParams::from_detuning(detuning, temperature).map_err(bad)?)
            }
        })
    }

    fn kernel(&self) -> KernelSplit {
        match self {
            Physics::Jc(p) => jc_kernel_split(p),
            Physics::Rlm(p) => rlm_kernel_split(p),
        }
    }

    fn khat(&self, e: C64) -> qme_core::Result<Superoperator> {
        match self {
            Physics::Jc(p) => jc_kernel_hat(e, p),
            Physics::Rlm(p) => rlm_kernel_hat(e, p),
        }
    }

    fn k0(&self) -> qme_core::Result<Superoperator> {
        self.khat(C64::new(0.0, 0.0))
    }

    fn ginf(&self) -> qme_core::Result<Superoperator> {
        match self {
            Physics::Jc(p) => jc_g_infty(p),
            Physics::Rlm(p) => rlm_g_infty(p),
        }
    }

    fn rate(&self) -> f64 {
        match self {
            Physics::Jc(p) => p.gamma,
            Physics::Rlm(p) => p.big_gamma,
        }
    }

    fn propagator(&self, t: f64) -> qme_core::Result<Superoperator> {
        match self {
            Physics::Jc(p) => Ok(jc_propagator(t, p)),
            Physics::Rlm(p) => rlm_propagator(t, p),
        }
    }

    /// Underdamped JC: the coherence blocks of the transient iteration diverge, so the
    /// occupation block is iterated alone.
    fn occupation_only(&self) -> bool {
        matches!(self, Physics::Jc(p) if !p.is_overdamped())
    }
}

/// Header lines shared by every output file.
pub fn header(c: &RunConfig, extra: &[String]) -> String {
    let mut h = String::new();
    let _ = writeln!(h, "# qmefix {} (qme-core {})", env!("CARGO_PKG_VERSION"), qme_core::VERSION);
    let _ = writeln!(h, "# units: {}", c.units());
    for (k, v) in c.describe() {
        let _ = writeln!(h, "# {k} = {v}");
    }
    for line in extra {
        let _ = writeln!(h, "# {line}");
    }
    h
}

fn json_header(c: &RunConfig) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    m.insert("qmefix".into(), env!("CARGO_PKG_VERSION").into());
    m.insert("qme_core".into(), qme_core::VERSION.into());
    m.insert("units".into(), c.units().into());
    for (k, v) in c.describe() {
        m.insert(k, v.into());
    }
    serde_json::Value::Object(m)
}

pub fn run(c: &RunConfig) -> Result<Output, RunError> {
    let physics = Physics::of(c)?;
    match c.alg {
        Alg::Exact => exact(c, &physics),
        Alg::SemigroupGinf | Alg::SemigroupK0 | Alg::SemigroupGinfReg | Alg::Slip => semigroup(c, &physics),
        Alg::TransientIterate => transient(c, &physics),
        Alg::StationaryIterate => stationary(c, &physics),
        Alg::Poles => poles(c, &physics),
        Alg::Memexp => memexp(c),
        Alg::Gradient => gradient(c, &physics),
    }
}

fn rho0(c: &RunConfig) -> OperatorVec {
    OperatorVec::from_real(2, &c.rho0).expect("four entries")
}

fn grid(c: &RunConfig) -> Result<TimeGrid, RunError> {
    TimeGrid::new(c.tmax, c.nodes).map_err(|e| RunError::Validation(vec![e.to_string()]))
}

fn exact_states(physics: &Physics, grid: &TimeGrid, rho: &OperatorVec) -> Result<Vec<OperatorVec>, RunError> {
    grid.times()
        .into_iter()
        .map(|t| Ok(physics.propagator(t)?.apply(rho)))
        .collect()
}

fn semigroup_states(x: &Superoperator, grid: &TimeGrid, rho: &OperatorVec) -> Result<Vec<OperatorVec>, RunError> {
    grid.times()
        .into_iter()
        .map(|t| Ok(semigroup_evolution(x, t)?.apply(rho)))
        .collect()
}

fn exact(c: &RunConfig, physics: &Physics) -> Result<Output, RunError> {
    let grid = grid(c)?;
    let states = exact_states(physics, &grid, &rho0(c))?;
    let traj = StateTrajectory::from_states(grid, states, "exact")?;
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    Ok(Output::ok(header(c, &[]) + &String::from_utf8_lossy(&buf)))
}

struct Curve {
    name: String,
    states: Vec<OperatorVec>,
    coherence: bool,
}

fn curves_csv(grid: &TimeGrid, curves: &[Curve]) -> String {
    let mut s = String::from("t");
    for cv in curves {
        let _ = write!(s, ",occupation_{}", cv.name);
        if cv.coherence {
            let _ = write!(s, ",coherence_re_{}", cv.name);
        }
    }
    s.push('\n');
    for (k, t) in grid.times().into_iter().enumerate() {
        s.push_str(&t.to_string());
        for cv in curves {
            let r = &cv.states[k];
            let _ = write!(s, ",{}", r.entry(1, 1).re);
            if cv.coherence {
                let _ = write!(s, ",{}", r.entry(0, 1).re);
            }
        }
        s.push('\n');
    }
    s
}

fn semigroup(c: &RunConfig, physics: &Physics) -> Result<Output, RunError> {
    let grid = grid(c)?;
    let rho = rho0(c);
    let mut curves = vec![Curve {
        name: "exact".into(),
        states: exact_states(physics, &grid, &rho)?,
        coherence: true,
    }];
    let mut notes = Vec::new();
    let add = |name: &str, x: &Superoperator, curves: &mut Vec<Curve>| -> Result<(), RunError> {
        curves.push(Curve {
            name: name.into(),
            states: semigroup_states(x, &grid, &rho)?,
            coherence: true,
        });
        Ok(())
    };
    match c.alg {
        Alg::SemigroupK0 => add("semigroup_k0", &physics.k0()?, &mut curves)?,
        Alg::SemigroupGinf => add("semigroup_ginf", &physics.ginf()?, &mut curves)?,
        Alg::SemigroupGinfReg => {
            let Physics::Jc(p) = physics else { unreachable!("validated") };
            add("semigroup_ginf_reg", &jc_g_infty_reg(p)?, &mut curves)?;
            add("semigroup_k0", &physics.k0()?, &mut curves)?;
        }
        Alg::Slip => {
            let ginf = physics.ginf()?;
            let s = slippage(&sampled_poles(physics)?)?;
            notes.push(format!("slippage = {}", s.to_json()));
            add("semigroup_ginf", &ginf, &mut curves)?;
            let slipped = s.apply(&rho);
            curves.push(Curve {
                name: "slip".into(),
                states: semigroup_states(&ginf, &grid, &slipped)?,
                coherence: true,
            });
        }
        _ => unreachable!("dispatched by algorithm"),
    }
    Ok(Output::ok(header(c, &notes) + &curves_csv(&grid, &curves)))
}

fn start_superop(c: &RunConfig, physics: &Physics, trace_preserving: bool) -> Result<Superoperator, RunError> {
    Ok(match c.start {
        Start::K0 => physics.k0()?,
        Start::Ginf => physics.ginf()?,
        Start::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed.expect("validated"));
            if trace_preserving {
                random_trace_preserving(2, &mut rng)
            } else {
                random_superoperator(2, &mut rng)
            }
        }
        Start::File => {
            let path = c.start_file.as_ref().expect("validated");
            let text = std::fs::read_to_string(path)
                .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
            let x = Superoperator::from_json(&text).map_err(|e| RunError::Validation(vec![e.to_string()]))?;
            if x.dim() != 2 {
                return Err(RunError::Validation(vec![format!("start file has dim {}, expected 2", x.dim())]));
            }
            x
        }
    })
}

fn occupation_block(x: &Superoperator) -> Superoperator {
    let zero = C64::new(0.0, 0.0);
    jc_structure(x.get(3, 3), zero, zero)
}

fn transient(c: &RunConfig, physics: &Physics) -> Result<Output, RunError> {
    let grid = grid(c)?;
    let rho = rho0(c);
    let x0 = start_superop(c, physics, true)?;
    let mut notes = Vec::new();
    let (kernel, g0) = match physics {
        Physics::Jc(p) if physics.occupation_only() => {
            notes.push("kernel = occupation block (coherence iteration diverges in this regime)".into());
            (jc_occupation_kernel_split(p), occupation_block(&x0))
        }
        _ => (physics.kernel(), x0.clone()),
    };
    let (iterates, report) = transient_iterate(&kernel, &SuperopTrajectory::constant(grid, &g0), c.iters)?;
    notes.push(format!("report = {}", report.to_json()));
    let mut curves = vec![
        Curve {
            name: "exact".into(),
            states: exact_states(physics, &grid, &rho)?,
            coherence: false,
        },
        Curve {
            name: format!("semigroup_{}", c.start.name()),
            states: semigroup_states(&x0, &grid, &rho)?,
            coherence: false,
        },
    ];
    for (n, g) in iterates.iter().enumerate() {
        let traj = solve_timelocal(g, &rho, &grid)?;
        curves.push(Curve {
            name: format!("iter_{}", n + 1),
            states: traj.states().to_vec(),
            coherence: false,
        });
    }
    let failure = (iterates.len() < c.iters).then(|| {
        format!(
            "transient iteration stopped after {} of {} iterations",
            iterates.len(),
            c.iters
        )
    });
    Ok(Output {
        text: header(c, &notes) + &curves_csv(&grid, &curves),
        failure,
    })
}

fn superop_csv(x: &Superoperator) -> String {
    let mut s = String::from("row,col,re,im\n");
    let n = x.size();
    for r in 0..n {
        for col in 0..n {
            let z = x.get(r, col);
            let _ = writeln!(s, "{r},{col},{},{}", z.re, z.im);
        }
    }
    s
}

fn superop_output(c: &RunConfig, x: &Superoperator, notes: Vec<String>, extra_json: Vec<(&str, serde_json::Value)>) -> String {
    match c.format {
        Format::Csv => header(c, &notes) + &superop_csv(x),
        Format::Json => {
            let mut m = serde_json::Map::new();
            m.insert("header".into(), json_header(c));
            let gen: serde_json::Value = serde_json::from_str(&x.to_json()).expect("superoperator JSON");
            m.insert("generator".into(), gen);
            for (k, v) in extra_json {
                m.insert(k.into(), v);
            }
            serde_json::to_string_pretty(&serde_json::Value::Object(m)).expect("serializes") + "\n"
        }
    }
}

fn stationary(c: &RunConfig, physics: &Physics) -> Result<Output, RunError> {
    let x0 = start_superop(c, physics, false)?;
    let (x, report, failure) = match stationary_iterate(&physics.kernel(), &x0, c.tol, c.max_iter) {
        Ok((x, r)) => (x, r, None),
        Err(QmeError::MaxIterExceeded { report, last }) => {
            let why = format!(
                "no convergence after {} iterations (oscillating: {}); last iterate written",
                report.iters, report.oscillating
            );
            (*last, report, Some(why))
        }
        Err(e) => return Err(e.into()),
    };
    let report_json: serde_json::Value = serde_json::from_str(&report.to_json()).expect("report JSON");
    let notes = vec![format!("report = {}", report.to_json())];
    Ok(Output {
        text: superop_output(c, &x, notes, vec![("report", report_json)]),
        failure,
    })
}

fn pole_seeds(physics: &Physics) -> Vec<C64> {
    match physics {
        Physics::Jc(p) => {
            let w = 3.0 * p.eps.abs().max(p.gamma);
            seed_grid(-w, w, -3.0 * p.gamma, 0.0, 21)
        }
        Physics::Rlm(p) => {
            let w = 3.0 * p.detuning().abs().max(p.big_gamma);
            seed_grid(-w, w, -3.0 * p.big_gamma, 0.0, 21)
        }
    }
}

/// Poles flagged against the stationary generator (the regularized one when G(∞)
/// does not exist).
fn sampled_poles(physics: &Physics) -> Result<Vec<qme_core::spectral::PoleRecord>, RunError> {
    let khat = |e| physics.khat(e);
    let mut poles = find_poles(&khat, &pole_seeds(physics), &PoleSearch::new(1e-10, physics.rate()))?;
    let g = match physics {
        Physics::Jc(p) if !p.is_overdamped() => jc_g_infty_reg(p)?,
        _ => physics.ginf()?,
    };
    mark_sampled(&mut poles, &spectral_decompose(&g, 1e-12)?, 1e-6);
    Ok(poles)
}

fn poles(c: &RunConfig, physics: &Physics) -> Result<Output, RunError> {
    let poles = sampled_poles(physics)?;
    let against = match physics {
        Physics::Jc(p) if !p.is_overdamped() => "ginf-reg",
        _ => "ginf",
    };
    let mut buf = Vec::new();
    write_pole_csv(&poles, &mut buf)?;
    let notes = vec![format!("sampled against = {against}")];
    Ok(Output::ok(header(c, &notes) + &String::from_utf8_lossy(&buf)))
}

fn memexp(c: &RunConfig) -> Result<Output, RunError> {
    let table = FCoeffTable::build(c.max_k)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    Ok(Output::ok(header(c, &[]) + &String::from_utf8_lossy(&buf)))
}

fn gradient(c: &RunConfig, physics: &Physics) -> Result<Output, RunError> {
    let khat = |e| physics.khat(e);
    let ginf = physics.ginf()?;
    let mut rows = String::from("order,max_abs_diff_ginf\n");
    let mut last = None;
    for order in 0..=c.order {
        let g = gradient_expansion_stationary(&khat, order, physics.rate())?;
        let _ = writeln!(rows, "{order},{}", g.max_abs_diff(&ginf));
        last = Some(g);
    }
    let g = last.expect("order range is nonempty");
    Ok(Output::ok(match c.format {
        Format::Csv => header(c, &[]) + &rows,
        Format::Json => superop_output(c, &g, Vec::new(), Vec::new()),
    }))
}
