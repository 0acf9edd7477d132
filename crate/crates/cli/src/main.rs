//! `wpcf`: experiments over the energy-state model from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use wpcf::config::{NetworkConfig, Preset};
use wpcf::eh_stats::{
    fit_harvest, harvested_energy_variance, mc_oracle, mean_harvested_energy, mean_received_power,
    var_received_power,
};
use wpcf::power_alloc::{ccpa, epa, expected_norms, fpc, select_min_ue, Scheme};
use wpcf::rng::stream;
use wpcf::sim::{
    empirical_transitions, initial_energies, network_state, run_trajectory, RunOptions, SimMode, SimReport,
};
use wpcf::socp::{build_problem, newton_step_bound_general, surrogate_gap};

#[derive(Parser, Debug)]
#[command(name = "wpcf", version, about = "Energy-state experiments for wirelessly powered cell-free massive MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config; missing fields take the full-scale defaults.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Gamma)]
    mode: ModeArg,

    #[arg(long, global = true, value_enum, default_value_t = SchemeArg::Opt)]
    scheme: SchemeArg,

    /// Coherence intervals per trajectory.
    #[arg(long, global = true, default_value_t = 100_000)]
    intervals: u64,

    /// Write the per-iteration solver trace.
    #[arg(long, global = true)]
    trace_solver: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one battery trajectory.
    Simulate {
        /// Log every n-th interval to trajectory.csv; 0 disables the log.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Check the closed-form statistics against Monte-Carlo draws.
    ValidateStats {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Solve the optimized allocation for one target UE.
    SolvePa {
        /// Target UE; defaults to the one with the lowest initial battery.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Empirical transition probabilities for several AP counts at fixed total antennas.
    TransitionTable {
        #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 9, 16, 25, 36])]
        aps: Vec<usize>,
    },
    /// Paired trajectories of every scheme on the same seed.
    CompareSchemes,
    /// Newton-step bound of the interior-point method for the configured problem.
    Complexity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Exact,
    Gamma,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Fpc,
    Epa,
    Ccpa,
    Opt,
}

impl From<ModeArg> for SimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => SimMode::Exact,
            ModeArg::Gamma => SimMode::Gamma,
        }
    }
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Fpc => Scheme::Fpc,
            SchemeArg::Epa => Scheme::Epa,
            SchemeArg::Ccpa => Scheme::Ccpa,
            SchemeArg::Opt => Scheme::Opt,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    preset: Option<&'a str>,
    config_sha256: String,
    config: &'a NetworkConfig,
    mode: SimMode,
    scheme: Scheme,
    intervals: u64,
    files: Vec<String>,
}

/// Collects output files so the manifest can list them.
struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Out { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Shortest scientific form that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x:e}")
}

fn config_hash(cfg: &NetworkConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_config(cli: &Cli, fallback: NetworkConfig) -> Result<NetworkConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            NetworkConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(PresetArg::Paper)) => NetworkConfig::preset(Preset::Paper),
        (None, Some(PresetArg::Desk)) => NetworkConfig::preset(Preset::Desk),
        (None, None) => fallback,
    };
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The small scenario used by `validate-stats` when no config is given:
/// two APs of four antennas, three UEs on two pilots.
fn validation_config() -> NetworkConfig {
    NetworkConfig { num_aps: 2, antennas_per_ap: 4, num_ues: 3, samples_per_interval: 20, ..NetworkConfig::default() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns `false` when a validation check failed.
fn run(cli: &Cli) -> Result<bool> {
    let fallback = match cli.command {
        Command::ValidateStats { .. } => validation_config(),
        _ => NetworkConfig::desk(),
    };
    let cfg = load_config(cli, fallback)?;
    let mut out = Out::new(&cli.out)?;
    let (name, ok) = match &cli.command {
        Command::Simulate { log_every } => ("simulate", simulate(cli, &cfg, *log_every, &mut out)?),
        Command::ValidateStats { samples } => ("validate-stats", validate_stats(&cfg, *samples, &mut out)?),
        Command::SolvePa { target } => ("solve-pa", solve_pa(cli, &cfg, *target, &mut out)?),
        Command::TransitionTable { aps } => ("transition-table", transition_table(cli, &cfg, aps, &mut out)?),
        Command::CompareSchemes => ("compare-schemes", compare_schemes(cli, &cfg, &mut out)?),
        Command::Complexity => ("complexity", complexity(cli, &cfg, &mut out)?),
    };
    let manifest = Manifest {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.rng_seed,
        preset: cli.preset.map(|p| match p {
            PresetArg::Paper => "paper",
            PresetArg::Desk => "desk",
        }),
        config_sha256: config_hash(&cfg),
        config: &cfg,
        mode: cli.mode.into(),
        scheme: cli.scheme.into(),
        intervals: cli.intervals,
        files: out.files.clone(),
    };
    let path = out.dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(ok)
}

fn trajectory(cli: &Cli, cfg: &NetworkConfig, scheme: Scheme, log_every: u64) -> Result<SimReport> {
    let opts = RunOptions { scheme, mode: cli.mode.into(), num_intervals: cli.intervals, log_every };
    Ok(run_trajectory(cfg, &opts)?)
}

fn simulate(cli: &Cli, cfg: &NetworkConfig, log_every: u64, out: &mut Out) -> Result<bool> {
    let r = trajectory(cli, cfg, cli.scheme.into(), log_every)?;
    // Per-UE triples need enough intervals; short runs leave the columns empty.
    let triples = r.transition_triples().ok();
    out.csv(
        "summary.csv",
        &["ue", "initial_energy_J", "final_energy_J", "final_state", "harvested_J", "consumed_J", "p_down", "p_stay", "p_up"],
        (0..cfg.num_ues).map(|k| {
            let mut row = vec![
                k.to_string(),
                num(r.initial_energies[k]),
                num(r.final_energies[k]),
                r.final_states[k].to_string(),
                num(r.harvested[k]),
                num(r.consumed[k]),
            ];
            match &triples {
                Some(t) => row.extend([num(t[k].p_down), num(t[k].p_stay), num(t[k].p_up)]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
            row
        }),
    )?;
    out.csv(
        "periods.csv",
        &["start_interval", "target_ue", "min_energy_J", "sum_harvest_J", "target_harvest_J"],
        r.periods.iter().map(|p| {
            vec![
                p.start_interval.to_string(),
                p.target_ue.to_string(),
                num(p.min_energy),
                num(p.sum_harvest),
                num(p.target_harvest),
            ]
        }),
    )?;
    if log_every > 0 {
        out.csv(
            "trajectory.csv",
            &["interval", "ue", "energy_J", "state", "harvested_J", "consumed_J", "scheme", "target_ue"],
            r.log.iter().map(|l| {
                vec![
                    l.interval.to_string(),
                    l.ue.to_string(),
                    num(l.energy_j),
                    l.state.to_string(),
                    num(l.harvested_j),
                    num(l.consumed_j),
                    l.scheme.to_string(),
                    l.target_ue.to_string(),
                ]
            }),
        )?;
    }
    println!(
        "{} intervals, scheme {}, final min energy {:.4e} J, fallbacks {}",
        r.num_intervals,
        r.scheme,
        r.final_min_energy(),
        r.fallbacks
    );
    Ok(true)
}

/// Two-sided Kolmogorov-Smirnov distance between samples and a CDF.
fn ks_distance(mut x: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn validate_stats(cfg: &NetworkConfig, samples: usize, out: &mut Out) -> Result<bool> {
    if samples < 2 {
        bail!("validate-stats needs at least two samples");
    }
    let st = network_state(cfg)?;
    let alloc = fpc(&st, cfg.total_power_w)?;
    let circuit = cfg.circuit();
    let mut rows = Vec::new();
    let mut all_ok = true;
    for k in 0..st.num_ues {
        let mut rng = stream(cfg.rng_seed, 200 + k as u64);
        let o = mc_oracle(k, &alloc, &st, &circuit, samples, &mut rng)?;
        let m = mean_received_power(k, &alloc, &st)?;
        let v = var_received_power(k, &alloc, &st)?;
        let me = mean_harvested_energy(k, &alloc, &st, &circuit)?;
        let ve = harvested_energy_variance(m, v, &circuit);
        let fit = fit_harvest(k, &alloc, &st, &circuit)?;
        let ks = ks_distance(o.energy_samples.clone(), |e| fit.cdf(e));
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        let checks = [
            ("mean_power", m, o.mean_power, rel(m, o.mean_power), 0.01),
            ("var_power", v, o.var_power, rel(v, o.var_power), 0.05),
            ("mean_energy", me, o.mean_energy, rel(me, o.mean_energy), 0.01),
            ("var_energy", ve, o.var_energy, rel(ve, o.var_energy), 0.15),
            ("gamma_ks", f64::NAN, f64::NAN, ks, 0.05),
        ];
        for (name, closed, sampled, err, tol) in checks {
            let ok = err < tol;
            all_ok &= ok;
            println!("{} ue {k} {name}: error {err:.3e} (limit {tol})", if ok { "PASS" } else { "FAIL" });
            rows.push(vec![
                k.to_string(),
                name.to_string(),
                num(closed),
                num(sampled),
                num(err),
                num(tol),
                ok.to_string(),
            ]);
        }
    }
    out.csv("validate_stats.csv", &["ue", "check", "closed_form", "sampled", "error", "limit", "pass"], rows)?;
    Ok(all_ok)
}

fn solve_pa(cli: &Cli, cfg: &NetworkConfig, target: Option<usize>, out: &mut Out) -> Result<bool> {
    let st = network_state(cfg)?;
    let k = match target {
        Some(k) if k < cfg.num_ues => k,
        Some(k) => bail!("target UE {k} out of range (K = {})", cfg.num_ues),
        None => select_min_ue(&initial_energies(cfg, &mut stream(cfg.rng_seed, 1)))?,
    };
    let p = cfg.total_power_w;
    let problem = build_problem(k, &st, p)?;
    let sol = problem.solve(&cfg.solver)?;
    out.csv(
        "allocation.csv",
        &["ue", "ap", "omega_W"],
        (0..st.num_ues).flat_map(|i| {
            let a = &sol.allocation;
            (0..st.num_aps).map(move |l| vec![i.to_string(), l.to_string(), num(a.get(i, l))])
        }),
    )?;
    let others = [
        (Scheme::Fpc, fpc(&st, p)?),
        (Scheme::Epa, epa(k, st.num_ues, st.num_aps, p)?),
        (Scheme::Ccpa, ccpa(k, &expected_norms(&st, k), st.num_ues, p)?),
    ];
    let mut rows: Vec<Vec<String>> =
        others.iter().map(|(s, a)| vec![s.to_string(), num(problem.objective(&a.omega))]).collect();
    rows.push(vec![Scheme::Opt.to_string(), num(sol.objective)]);
    out.csv("objectives.csv", &["scheme", "objective_W"], rows)?;
    let r = &sol.report;
    out.csv(
        "solver.csv",
        &["target_ue", "converged", "iterations", "r_dual", "r_pri", "gap", "t0"],
        [vec![
            k.to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
            num(r.r_dual),
            num(r.r_pri),
            num(r.gap),
            num(r.t0),
        ]],
    )?;
    if cli.trace_solver {
        out.csv(
            "solver_trace.csv",
            &["iter", "t", "gap", "r_dual", "r_pri", "step"],
            r.trace.iter().map(|t| vec![t.iter.to_string(), num(t.t), num(t.gap), num(t.r_dual), num(t.r_pri), num(t.alpha)]),
        )?;
    }
    println!(
        "target UE {k}: objective {:.6e} W, {} iterations, converged {}",
        sol.objective, r.iterations, r.converged
    );
    Ok(true)
}

fn transition_table(cli: &Cli, cfg: &NetworkConfig, aps: &[usize], out: &mut Out) -> Result<bool> {
    // Every AP needs at least one antenna, so the largest AP count sets a floor.
    let total = cfg.total_antenna_count().max(aps.iter().copied().max().unwrap_or(1));
    let mut rows = Vec::new();
    for &l in aps {
        let c = NetworkConfig { num_aps: l, total_antennas: Some(total), ..cfg.clone() };
        c.validate()?;
        let r = trajectory(cli, &c, cli.scheme.into(), 0)?;
        let t = empirical_transitions(&r.pooled_transitions())?;
        println!("L = {l:>2}: p_down {:.5} p_stay {:.5} p_up {:.5}", t.p_down, t.p_stay, t.p_up);
        rows.push(vec![l.to_string(), total.to_string(), num(t.p_down), num(t.p_stay), num(t.p_up)]);
    }
    out.csv("transition_table.csv", &["num_aps", "total_antennas", "p_down", "p_stay", "p_up"], rows)?;
    Ok(true)
}

fn compare_schemes(cli: &Cli, cfg: &NetworkConfig, out: &mut Out) -> Result<bool> {
    let reports: Vec<SimReport> =
        Scheme::ALL.iter().map(|&s| trajectory(cli, cfg, s, 0)).collect::<Result<_>>()?;
    out.csv(
        "compare_schemes.csv",
        &["scheme", "mean_sum_harvest_J", "mean_target_harvest_J", "final_min_energy_J", "fallbacks"],
        reports.iter().map(|r| {
            vec![
                r.scheme.to_string(),
                num(r.mean_sum_harvest()),
                num(r.mean_target_harvest()),
                num(r.final_min_energy()),
                r.fallbacks.to_string(),
            ]
        }),
    )?;
    let series: Vec<Vec<f64>> = reports.iter().map(|r| r.min_energy_series()).collect();
    let period = cfg.pa_period_intervals() as u64;
    let mut header = vec!["interval".to_string()];
    header.extend(reports.iter().map(|r| format!("{}_min_energy_J", r.scheme)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "min_energy.csv",
        &header,
        (0..series[0].len()).map(|q| {
            let mut row = vec![(q as u64 * period).to_string()];
            row.extend(series.iter().map(|s| num(s[q])));
            row
        }),
    )?;
    for r in &reports {
        println!("{:>4}: sum {:.4e} J, min-UE {:.4e} J per period", r.scheme, r.mean_sum_harvest(), r.mean_target_harvest());
    }
    Ok(true)
}

fn complexity(cli: &Cli, cfg: &NetworkConfig, out: &mut Out) -> Result<bool> {
    let st = network_state(cfg)?;
    let k = select_min_ue(&initial_energies(cfg, &mut stream(cfg.rng_seed, 1)))?;
    let problem = build_problem(k, &st, cfg.total_power_w)?;
    let m = problem.unreduced_constraint_count();
    let y0 = problem.initial_iterate();
    let eta0 = surrogate_gap(&problem.constraints(&y0.x), &y0.mu);
    let t0 = m as f64 / eta0;
    let opts = &cfg.solver;
    let rho = opts.rho.unwrap_or(1.0 + 1.0 / (m as f64).sqrt());
    let bound = newton_step_bound_general(m, t0, opts.eps, rho, opts.beta_ls, opts.q_ls)?;
    let sol = problem.solve(opts)?;
    out.csv(
        "complexity.csv",
        &["num_aps", "num_ues", "m", "t0", "eps", "rho", "newton_step_bound", "observed_iterations", "converged"],
        [vec![
            cfg.num_aps.to_string(),
            cfg.num_ues.to_string(),
            m.to_string(),
            num(t0),
            num(opts.eps),
            num(rho),
            num(bound),
            sol.report.iterations.to_string(),
            sol.report.converged.to_string(),
        ]],
    )?;
    if cli.trace_solver {
        out.csv(
            "solver_trace.csv",
            &["iter", "t", "gap", "r_dual", "r_pri", "step"],
            sol.report
                .trace
                .iter()
                .map(|t| vec![t.iter.to_string(), num(t.t), num(t.gap), num(t.r_dual), num(t.r_pri), num(t.alpha)]),
        )?;
    }
    println!("m = {m}, bound {bound:.4e} Newton steps, observed {}", sol.report.iterations);
    Ok(true)
}
