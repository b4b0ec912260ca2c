use clap::{Args, Parser, Subcommand};
use indoor_fusion::error::{FusionError, Result};
use indoor_fusion::factors::jacobian_self_test;
use indoor_fusion::harness::{self, Manifest, ManifestInput, Method, SweepSpec};
use indoor_fusion::simulator::synthesize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fusion", version, about = "Indoor IMU / UWB / ultrasonic fusion harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted scenario key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one estimator on one scenario and report its metrics.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fgo")]
        method: String,
        /// Directory written by `simulate`; its streams replace synthesis.
        #[arg(long)]
        streams: Option<PathBuf>,
    },
    /// Cartesian runs over parameter values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods.
        #[arg(long, default_value = "fgo,ekf,tdoa_only,imu_only")]
        method: String,
        /// Dotted scenario key to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// Number of seeds, counting up from the scenario seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Synthesize and write measurement streams only.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic factor Jacobians with finite differences.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter().map(|s| harness::parse_assignment(s)).collect()
}

fn manifest(command: &str, c: &Common, seeds: Vec<u64>, methods: Vec<Method>, hash: String) -> Result<Manifest> {
    let mut m = Manifest::new(command);
    m.inputs.push(ManifestInput::from_file(&c.scenario)?);
    m.overrides = c.set.clone();
    m.seeds = seeds;
    m.methods = methods;
    m.config_hash = hash;
    Ok(m)
}

fn finish(out_dir: &Path, mut m: Manifest, outputs: Vec<String>) -> Result<()> {
    m.outputs = outputs;
    m.write(out_dir)?;
    eprintln!("wrote {}", out_dir.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, method, streams } => {
            let method: Method = method.parse()?;
            let scn = harness::load_scenario(&common.scenario, &overrides(&common.set)?, common.seed)?;
            let out = match &streams {
                Some(dir) => {
                    let (truth, s) = harness::load_simulation(dir)?;
                    harness::run_on_streams(&scn, method, &truth, &s)?
                }
                None => harness::run(&scn, method)?,
            };
            let r = &out.report;
            println!(
                "{} {} seed={} rmse_3d={:.4} m vertical={:.4} m orientation={:.3} deg drift={:.4} m/min epochs={}/{} timing mean={:.2} ms p95={:.2} ms reception={:.3}",
                r.scenario,
                r.method,
                r.seed,
                r.rmse_3d,
                r.rmse_vertical,
                r.orientation_error_rms,
                r.drift_rate,
                r.epochs,
                r.keyframes,
                r.timing_mean_ms,
                r.timing_p95_ms,
                r.reception_achieved
            );
            if let Some(dir) = &common.out_dir {
                let outputs = harness::write_run(dir, &out)?;
                let mut m = manifest("run", &common, vec![scn.seed], vec![method], r.config_hash.clone())?;
                if let Some(s) = &streams {
                    for f in ["measurements.csv", "truth.csv"] {
                        m.inputs.push(ManifestInput::from_file(&s.join(f))?);
                    }
                }
                finish(dir, m, outputs)?;
            }
        }
        Command::Sweep {
            common,
            method,
            param,
            values,
            seeds,
        } => {
            let methods = method
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<Vec<Method>>>()?;
            let mut base = harness::load_scenario_value(&common.scenario)?;
            for (k, v) in overrides(&common.set)? {
                harness::apply_override(&mut base, &k, &v)?;
            }
            if let Some(seed) = common.seed {
                harness::apply_override(&mut base, "seed", &seed.to_string())?;
            }
            let first = harness::scenario_from_value(base.clone())?;
            let spec = SweepSpec {
                parameter: param,
                values,
                seeds: (first.seed..first.seed + seeds).collect(),
                methods: methods.clone(),
            };
            let result = harness::sweep(&base, &spec)?;
            for c in &result.cells {
                println!(
                    "{}={} {:<9} runs={} rmse={:.4}±{:.4} m drift={:.4} m/min{}",
                    spec.parameter,
                    c.value,
                    c.method.name(),
                    c.runs,
                    c.rmse_mean,
                    c.rmse_std,
                    c.drift_rate_mean,
                    c.improvement_vs_ekf_mean
                        .map(|v| format!(" vs_ekf={:+.1}%", 100.0 * v))
                        .unwrap_or_default()
                );
            }
            if let Some(dir) = &common.out_dir {
                let outputs = harness::write_sweep(dir, &result)?;
                let hash = harness::config_hash(&first, &methods);
                let m = manifest("sweep", &common, spec.seeds.clone(), methods, hash)?;
                finish(dir, m, outputs)?;
            }
        }
        Command::Simulate { common } => {
            let scn = harness::load_scenario(&common.scenario, &overrides(&common.set)?, common.seed)?;
            let (truth, streams) = synthesize(&scn)?;
            println!(
                "{} seed={} imu={} tdoa={} ultrasonic={} floor={} reception={:.3}",
                scn.name,
                scn.seed,
                streams.imu.len(),
                streams.tdoa.len(),
                streams.ultrasonic.len(),
                streams.floors.len(),
                streams.reception_achieved()
            );
            let dir = common
                .out_dir
                .clone()
                .ok_or_else(|| FusionError::Override("simulate needs --out-dir".into()))?;
            let outputs = harness::write_simulation(&dir, &truth, &streams)?;
            let m = manifest("simulate", &common, vec![scn.seed], vec![], harness::config_hash(&scn, &[]))?;
            finish(&dir, m, outputs)?;
        }
        Command::Check { seed, points, tolerance } => {
            let results = jacobian_self_test(seed, points)?;
            let mut ok = true;
            for (kind, err) in results {
                let pass = err < tolerance;
                ok &= pass;
                println!("{:<16} max relative error {:.3e} {}", format!("{kind:?}"), err, if pass { "ok" } else { "FAIL" });
            }
            if !ok {
                return Err(FusionError::Override(format!("Jacobian error above {tolerance:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
