use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use hpcrack::driver::{run_with, RunOutput};
use hpcrack::material::{critical_thresholds, phi1, phi2, MaterialParams};
use hpcrack::scenarios::{
    crack_jump, fmt_num, ligament_extract, write_jump_rows, write_ligament_rows, Mode, ScenarioConfig,
    DEFAULT_TIP_GUARD, JUMP_HEADER, LIGAMENT_HEADER,
};
use hpcrack::vtu::write_vtu;

const LIGAMENT_SAMPLES: usize = 100;
const JUMP_POINTS: [f64; 9] = [0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Parser)]
#[command(name = "hpcrack", version, about = "hp-adaptive static crack solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adaptive solve for one loading mode and one beta.
    Solve {
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        beta: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Solve for several betas and merge the ligament and jump tables.
    SweepBeta {
        #[arg(long, value_delimiter = ',', num_args = 1, required = true, allow_hyphen_values = true)]
        betas: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate the response functions Phi1 and Phi2.
    PlotPhi(PhiArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value = "tensile")]
    mode: Mode,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    p_max: Option<usize>,
    #[arg(long)]
    refine_fraction: Option<f64>,
    #[arg(long)]
    sigma_threshold: Option<f64>,
    #[arg(long)]
    ubar: Option<f64>,
    #[arg(long)]
    vbar: Option<f64>,
    /// Stop once the problem would exceed this many DOFs.
    #[arg(long)]
    max_dofs: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl Common {
    fn config(&self, beta: f64) -> ScenarioConfig {
        let d = ScenarioConfig::default();
        ScenarioConfig {
            mode: self.mode,
            n0: self.n0.unwrap_or(d.n0),
            cycles: self.cycles.unwrap_or(d.cycles),
            p_max: self.p_max.unwrap_or(d.p_max),
            refine_fraction: self.refine_fraction.unwrap_or(d.refine_fraction),
            sigma_threshold: self.sigma_threshold.unwrap_or(d.sigma_threshold),
            u_bar: self.ubar.unwrap_or(d.u_bar),
            v_bar: self.vbar.unwrap_or(d.v_bar),
            max_dofs: self.max_dofs,
            ..d
        }
        .with_beta(beta)
    }
}

#[derive(Args)]
struct PhiArgs {
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    a1: f64,
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    a2: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    a3: f64,
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    e1: f64,
    #[arg(long, default_value_t = 0.4, allow_negative_numbers = true)]
    e2: f64,
    #[arg(long, default_value_t = 2.0)]
    d: f64,
    /// Sampled interval of tr T as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 1, default_values_t = [-20.0, 20.0], allow_hyphen_values = true)]
    range: Vec<f64>,
    #[arg(long, default_value_t = 401)]
    samples: usize,
    #[arg(long, default_value = "phi.csv")]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Runs one configuration, writing `run.csv` and `solution_k.vtu` into `dir`.
fn solve_into(cfg: &ScenarioConfig, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let out = run_with(cfg, |state| {
        let mut w = BufWriter::new(File::create(dir.join(format!("solution_{}.vtu", state.cycle)))?);
        write_vtu(&mut w, state.u, &state.indicators.eta)?;
        w.flush()
    })
    .with_context(|| format!("{} run at beta = {}", cfg.mode, cfg.material.beta))?;
    let mut w = create(&dir.join("run.csv"))?;
    out.record.write_csv(&mut w)?;
    w.flush()?;
    Ok(out)
}

fn field_tables(cfg: &ScenarioConfig, out: &RunOutput, lig: &mut impl Write, jumps: &mut impl Write) -> Result<()> {
    let samples = ligament_extract(&out.solution, &cfg.material, LIGAMENT_SAMPLES, DEFAULT_TIP_GUARD)?;
    write_ligament_rows(lig, &samples, cfg.material.beta, cfg.mode)?;
    let rows = JUMP_POINTS
        .iter()
        .map(|&x| Ok((x, crack_jump(&out.solution, x)?)))
        .collect::<Result<Vec<_>>>()?;
    write_jump_rows(jumps, &rows, cfg.material.beta, cfg.mode)?;
    Ok(())
}

fn solve(beta: f64, common: &Common) -> Result<()> {
    let cfg = common.config(beta);
    let out = solve_into(&cfg, &common.out_dir)?;
    let mut lig = create(&common.out_dir.join("ligament.csv"))?;
    let mut jumps = create(&common.out_dir.join("jumps.csv"))?;
    writeln!(lig, "{LIGAMENT_HEADER}")?;
    writeln!(jumps, "{JUMP_HEADER}")?;
    field_tables(&cfg, &out, &mut lig, &mut jumps)?;
    lig.flush()?;
    jumps.flush()?;
    Ok(())
}

fn sweep(betas: &[f64], common: &Common) -> Result<()> {
    fs::create_dir_all(&common.out_dir)?;
    let mut lig = create(&common.out_dir.join("ligament.csv"))?;
    let mut jumps = create(&common.out_dir.join("jumps.csv"))?;
    writeln!(lig, "{LIGAMENT_HEADER}")?;
    writeln!(jumps, "{JUMP_HEADER}")?;
    for &beta in betas {
        let cfg = common.config(beta);
        let out = solve_into(&cfg, &common.out_dir.join(format!("beta_{beta}")))?;
        field_tables(&cfg, &out, &mut lig, &mut jumps)?;
    }
    lig.flush()?;
    jumps.flush()?;
    Ok(())
}

fn plot_phi(args: &PhiArgs) -> Result<()> {
    let [lo, hi] = [args.range[0], args.range[1]];
    if !(lo < hi) || args.samples < 2 {
        bail!("need lo < hi and at least 2 samples, got range {lo},{hi} samples {}", args.samples);
    }
    let p = MaterialParams::new(args.e1, args.e2, 0.0, args.d)?.with_response_constants(args.a1, args.a2, args.a3);
    let mut w = create(&args.out)?;
    writeln!(w, "tr_t,phi1,phi2")?;
    for i in 0..args.samples {
        let t = lo + (hi - lo) * i as f64 / (args.samples - 1) as f64;
        match (phi1(t, &p), phi2(t, &p)) {
            (Ok(a), Ok(b)) => writeln!(w, "{},{},{}", fmt_num(t), fmt_num(a), fmt_num(b))?,
            _ => log::warn!("skipping tr_t={t}: too close to a pole"),
        }
    }
    w.flush()?;
    let th = critical_thresholds(&p);
    let pole = |v: Option<f64>| v.map_or("none".to_string(), fmt_num);
    let line = format!("t_cr1={},t_cr2={}", pole(th.t_cr1), pole(th.t_cr2));
    fs::write(args.out.with_extension("poles"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::PlotPhi(args) = &cli.command {
        if args.range.len() != 2 {
            Cli::command().error(ErrorKind::WrongNumberOfValues, "--range takes exactly two values lo,hi").exit();
        }
    }
    let res = match &cli.command {
        Command::Solve { beta, common } => solve(*beta, common),
        Command::SweepBeta { betas, common } => sweep(betas, common),
        Command::PlotPhi(args) => plot_phi(args),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
