//! `mbfg`: forward and inverse dynamics of planar mechanisms from the command line.
//!
//! Every command reads a mechanism description (the bundled four-bar when
//! `--mech` is omitted), runs one pipeline and prints a one-line summary.
//! Trajectories go to `--out` as CSV; nothing is written when a command fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mbfg::checks;
use mbfg::pipelines::{max_position_violation, max_velocity_violation, InitialState};
use mbfg::reference;
use mbfg::{
    oracle_forward, rmse, run_forward, run_inverse, Error, Field, Formulation, ForwardConfig,
    InverseConfig, Mechanism, NoiseConfig, OracleConfig, Trajectory,
};

#[derive(Parser, Debug)]
#[command(
    name = "mbfg",
    version,
    about = "Planar multibody dynamics as factor-graph optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward dynamics with a fixed-lag smoother, compared against the reference integrator.
    Fd(FdArgs),
    /// Inverse dynamics along the crank reference θ(t) = (π/4)(1 − cos(2πt/5)).
    Id(IdArgs),
    /// Reference integrator only.
    Oracle(OracleArgs),
    /// RMSE between two trajectory files.
    Rmse(RmseArgs),
    /// Compares every factor Jacobian with central differences on random states.
    CheckJacobians(CheckArgs),
}

#[derive(Args, Debug)]
struct MechArgs {
    /// Mechanism JSON file; the bundled four-bar when omitted.
    #[arg(long)]
    mech: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TimeArgs {
    /// Time step, seconds.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Horizon, seconds.
    #[arg(long = "T", default_value_t = 5.0)]
    t_end: f64,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    /// Variance override, e.g. `--noise dynamics=1e-6`. Repeatable.
    #[arg(long = "noise", value_name = "K=V")]
    noise: Vec<String>,
}

#[derive(Args, Debug)]
struct FdArgs {
    #[command(flatten)]
    mech: MechArgs,
    #[command(flatten)]
    time: TimeArgs,
    /// Fixed-lag window length in timesteps.
    #[arg(long = "Nw", default_value_t = 2)]
    window: usize,
    #[arg(long, value_enum, default_value_t = FormulationArg::Dep)]
    formulation: FormulationArg,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IdArgs {
    #[command(flatten)]
    mech: MechArgs,
    /// Time step, seconds.
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    /// Horizon, seconds.
    #[arg(long = "T", default_value_t = 5.0)]
    t_end: f64,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    mech: MechArgs,
    #[command(flatten)]
    time: TimeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RmseArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = FieldArg::Q)]
    field: FieldArg,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    mech: MechArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormulationArg {
    Dep,
    Indep,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FieldArg {
    Q,
    Dq,
    Ddq,
    Force,
}

impl From<FieldArg> for Field {
    fn from(f: FieldArg) -> Field {
        match f {
            FieldArg::Q => Field::Q,
            FieldArg::Dq => Field::Dq,
            FieldArg::Ddq => Field::Ddq,
            FieldArg::Force => Field::Force,
        }
    }
}

/// Exit status 2 for bad input, 1 for a solver that failed on valid input.
#[derive(Debug)]
enum Failure {
    Input(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Solver(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let text = e.to_string();
        match e {
            Error::StepFailed { .. }
            | Error::StageFailed { .. }
            | Error::SolverDiverged(_)
            | Error::ProjectionDiverged(_)
            | Error::PositionProblemDiverged { .. }
            | Error::SingularConfiguration { .. }
            | Error::RankDeficient(_)
            | Error::Factor { .. } => Failure::Solver(text),
            _ => Failure::Input(text),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load(args: &MechArgs) -> Result<Mechanism, Failure> {
    match &args.mech {
        None => Ok(reference::fourbar()),
        Some(path) => reference::load_mechanism(path).map_err(|e| {
            Failure::Input(format!("cannot load mechanism '{}': {e}", path.display()))
        }),
    }
}

fn noise_config(mech: &Mechanism, args: &NoiseArgs) -> Result<NoiseConfig, Failure> {
    let mut noise = NoiseConfig::from_section(mech.def().noise.as_ref())?;
    for item in &args.noise {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("--noise expects K=V, got '{item}'")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Failure::Input(format!("--noise {key}: '{value}' is not a number")))?;
        noise.set(key.trim(), value)?;
    }
    Ok(noise)
}

fn save(out: Option<&Path>, traj: &Trajectory, comments: &[String]) -> Outcome {
    let Some(path) = out else { return Ok(()) };
    // Render first so a formatting failure cannot leave a partial file.
    let text = traj.to_csv_string(comments)?;
    fs::write(path, text)
        .map_err(|e| Failure::Input(format!("cannot write '{}': {e}", path.display())))
}

fn relative_energy_drift(mech: &Mechanism, traj: &Trajectory) -> f64 {
    let Some(first) = traj.rows.first() else {
        return 0.0;
    };
    let e0 = mech.total_energy(&first.q, &first.dq);
    let worst = traj
        .rows
        .iter()
        .map(|r| (mech.total_energy(&r.q, &r.dq) - e0).abs())
        .fold(0.0, f64::max);
    worst / e0.abs().max(f64::MIN_POSITIVE)
}

fn fd(args: &FdArgs) -> Outcome {
    let mech = load(&args.mech)?;
    let mut config = ForwardConfig::for_mechanism(&mech)?;
    config.dt = args.time.dt;
    config.t_end = args.time.t_end;
    config.window = args.window;
    config.formulation = match args.formulation {
        FormulationArg::Dep => Formulation::Dependent,
        FormulationArg::Indep => Formulation::Independent,
    };
    config.noise = noise_config(&mech, &args.noise)?;
    let run = run_forward(&mech, &config)?;
    let traj = &run.trajectory;
    let (q0, dq0) = (traj.rows[0].q.clone(), traj.rows[0].dq.clone());
    let oracle = oracle_forward(
        &mech,
        &q0,
        &dq0,
        &OracleConfig::for_grid(config.dt, config.t_end),
    )?;
    let rmse_q = rmse(traj, &oracle, Field::Q)?;
    let rmse_dq = rmse(traj, &oracle, Field::Dq)?;
    let phi = max_position_violation(&mech, traj);
    let comments = vec![
        format!(
            "fd formulation={:?} dt={} T={} Nw={} noise={:?}",
            config.formulation, config.dt, config.t_end, config.window, config.noise
        ),
        format!(
            "iterations mean={:.3} max={} within5={:.4}",
            run.mean_iterations(),
            run.max_iterations(),
            run.fraction_within(5)
        ),
        format!("rmse_q={rmse_q:e} rmse_dq={rmse_dq:e} max_phi={phi:e}"),
    ];
    save(args.out.as_deref(), traj, &comments)?;
    println!(
        "fd steps={} rmse_q={rmse_q:.6e} rmse_dq={rmse_dq:.6e} max_phi={phi:.3e} max_vel_phi={:.3e} iter_mean={:.3} iter_max={} within5={:.4}",
        traj.len() - 1,
        max_velocity_violation(&mech, traj),
        run.mean_iterations(),
        run.max_iterations(),
        run.fraction_within(5)
    );
    Ok(())
}

fn id(args: &IdArgs) -> Outcome {
    let mech = load(&args.mech)?;
    let mut config = InverseConfig::crank_reference(&mech, args.dt, args.t_end)?;
    config.noise = noise_config(&mech, &args.noise)?;
    let run = run_inverse(&mech, &config)?;
    let traj = &run.trajectory;
    let dof = mech.layout().dof_idxs()[0];
    let tracking = traj
        .rows
        .iter()
        .map(|r| (r.q[dof] - reference::theta_ref(r.t).0).abs())
        .fold(0.0, f64::max);
    let peak = traj
        .rows
        .iter()
        .filter_map(|r| r.force.as_ref())
        .map(|f| {
            config
                .actuated
                .iter()
                .map(|&i| f[i].abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let comments = vec![
        format!(
            "id dt={} T={} actuated={:?} noise={:?}",
            config.dt, args.t_end, config.actuated, config.noise
        ),
        format!("iterations stages={:?}", run.stage_iterations),
        format!("tracking={tracking:e}"),
    ];
    save(args.out.as_deref(), traj, &comments)?;
    println!(
        "id steps={} tracking={tracking:.3e} max_force={peak:.6} max_phi={:.3e} stage_iterations={:?}",
        traj.len() - 1,
        max_position_violation(&mech, traj),
        run.stage_iterations
    );
    Ok(())
}

fn oracle(args: &OracleArgs) -> Outcome {
    let mech = load(&args.mech)?;
    let (q0, dq0) = match ForwardConfig::for_mechanism(&mech)?.initial {
        InitialState::Independent { z0, dz0 } => {
            mbfg::pipelines::consistent_state(&mech, &reference::initial_guess(&mech), &z0, &dz0)?
        }
        InitialState::Dependent { q0, dq0 } => (q0, dq0),
    };
    let config = OracleConfig::for_grid(args.time.dt, args.time.t_end);
    let traj = oracle_forward(&mech, &q0, &dq0, &config)?;
    let phi = max_position_violation(&mech, &traj);
    let drift = relative_energy_drift(&mech, &traj);
    let comments = vec![
        format!(
            "oracle dt={} substep={} T={}",
            args.time.dt, config.dt, args.time.t_end
        ),
        format!("max_phi={phi:e} energy_drift={drift:e}"),
    ];
    save(args.out.as_deref(), &traj, &comments)?;
    println!(
        "oracle steps={} max_phi={phi:.3e} energy_drift={drift:.3e}",
        traj.len() - 1
    );
    Ok(())
}

fn rmse_cmd(args: &RmseArgs) -> Outcome {
    let read = |p: &PathBuf| {
        Trajectory::load_csv(p)
            .map_err(|e| Failure::Input(format!("cannot read '{}': {e}", p.display())))
    };
    let (a, b) = (read(&args.a)?, read(&args.b)?);
    let value = rmse(&a, &b, args.field.into()).map_err(|e| Failure::Input(e.to_string()))?;
    println!("{value:e}");
    Ok(())
}

fn check_jacobians(args: &CheckArgs) -> Outcome {
    let mech = load(&args.mech)?;
    let reports = checks::check_factor_jacobians(&mech, args.trials, args.seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<28} trials={:<5} worst_ratio={:.3e} {}",
            format!("{:?}", r.kind),
            r.trials,
            r.worst_ratio,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        failed += r.failures;
    }
    if failed > 0 {
        return Err(Failure::Solver(format!(
            "{failed} Jacobian checks exceeded tolerance"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fd(a) => fd(a),
        Command::Id(a) => id(a),
        Command::Oracle(a) => oracle(a),
        Command::Rmse(a) => rmse_cmd(a),
        Command::CheckJacobians(a) => check_jacobians(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(msg) | Failure::Solver(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn solver_errors_map_to_exit_one() {
        let e = Error::SolverDiverged("x".into());
        assert_eq!(Failure::from(e).code(), 1);
        let e = Error::Config("x".into());
        assert_eq!(Failure::from(e).code(), 2);
    }

    #[test]
    fn noise_overrides_parse() {
        let mech = reference::fourbar();
        let args = NoiseArgs {
            noise: vec!["dynamics=1e-6".into(), " integrator = 2e-2".into()],
        };
        let noise = noise_config(&mech, &args).unwrap();
        assert_eq!((noise.dynamics, noise.integrator), (1e-6, 2e-2));
        for bad in ["dynamics", "dynamics=abc", "speed=1", "dynamics=-1"] {
            let args = NoiseArgs {
                noise: vec![bad.into()],
            };
            assert_eq!(noise_config(&mech, &args).unwrap_err().code(), 2, "{bad}");
        }
    }
}
