use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use itsbft::report::{json_lines, run_batch, summary_table};
use itsbft::scenario::{load_scenario_file, ScenarioConfig};
use itsbft::simnet::{run_scenario, run_scenario_traced};
use itsbft::topology::{byzantine_capacity, max_disjoint_paths, node_connectivity};

#[derive(Parser)]
#[command(name = "itsbft", about = "Byzantine-tolerant key relay simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its summary row.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Print the full report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run scenario files (or every .toml in a directory) under each seed.
    Batch {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Comma-separated seeds; defaults to each file's own seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        overrides: Overrides,
        /// Also write one JSON report per line to this file.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Run a scenario and print one trace line per event.
    TraceDump {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print connectivity, the fault bound and disjoint paths per demand.
    TopologyCheck { scenario: PathBuf },
}

/// Command-line values that replace fields of the loaded scenario.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    f: Option<usize>,
    #[arg(long)]
    delta_seconds: Option<f64>,
    #[arg(long)]
    cap_bits: Option<u64>,
    #[arg(long)]
    view_limit: Option<u64>,
    #[arg(long)]
    capacity_bits: Option<u64>,
    #[arg(long)]
    omega: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    epsilon_k: Option<f64>,
    #[arg(long)]
    ts_key_len_bits: Option<usize>,
    #[arg(long)]
    name: Option<String>,
}

impl Overrides {
    fn apply(&self, c: &mut ScenarioConfig) -> Result<()> {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.f {
            c.f = v;
        }
        if let Some(v) = self.delta_seconds {
            c.delta_seconds = v;
        }
        if let Some(v) = self.cap_bits {
            c.cap_bits = v;
        }
        if let Some(v) = self.view_limit {
            c.view_limit = v;
        }
        if let Some(v) = self.capacity_bits {
            c.topology.capacity_bits = v;
        }
        if let Some(v) = self.omega {
            c.security.omega = v;
        }
        if let Some(v) = self.epsilon {
            c.security.epsilon = v;
        }
        if let Some(v) = self.epsilon_k {
            c.security.epsilon_k = v;
        }
        if let Some(v) = self.ts_key_len_bits {
            c.security.ts_key_len_bits = v;
        }
        if let Some(v) = &self.name {
            c.name = v.clone();
        }
        c.validate()?;
        Ok(())
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<ScenarioConfig> {
    let mut c = load_scenario_file(path).with_context(|| format!("loading {}", path.display()))?;
    if c.name.is_empty() {
        c.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    overrides.apply(&mut c)?;
    Ok(c)
}

fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "toml"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no scenario files found");
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            scenario,
            overrides,
            json,
        } => {
            let c = load(&scenario, &overrides)?;
            let r = run_scenario(&c)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", summary_table(std::slice::from_ref(&r)));
            }
            Ok(!r.violations.any())
        }
        Command::Batch {
            scenarios,
            seeds,
            overrides,
            jsonl,
        } => {
            let configs = expand(&scenarios)?
                .iter()
                .map(|p| load(p, &overrides))
                .collect::<Result<Vec<_>>>()?;
            let started = std::time::Instant::now();
            let outcome = run_batch(&configs, &seeds);
            print!("{}", outcome.table());
            for (name, seed, e) in &outcome.failures {
                eprintln!("{name} seed {seed}: {e}");
            }
            eprintln!(
                "{} runs in {:.2}s",
                outcome.reports.len() + outcome.failures.len(),
                started.elapsed().as_secs_f64()
            );
            if let Some(path) = jsonl {
                std::fs::write(&path, json_lines(&outcome.reports))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(outcome.reports.iter().all(|r| !r.violations.any()))
        }
        Command::TraceDump {
            scenario,
            overrides,
        } => {
            let c = load(&scenario, &overrides)?;
            let (r, trace) = run_scenario_traced(&c)?;
            for line in trace {
                println!("{line}");
            }
            Ok(!r.violations.any())
        }
        Command::TopologyCheck { scenario } => {
            let c = load(&scenario, &Overrides::default())?;
            let g = c.graph()?;
            println!("nodes {}", g.node_count());
            println!("links {}", g.edges().len());
            println!("connectivity {}", node_connectivity(&g));
            println!("fault bound {}", byzantine_capacity(&g));
            for d in &c.demands {
                let paths = max_disjoint_paths(&g, d.src, d.dst)?;
                println!("demand {}->{}: {} disjoint paths", d.src, d.dst, paths.len());
                for p in &paths.paths {
                    let hops: Vec<String> = p.iter().map(|n| n.to_string()).collect();
                    println!("  {}", hops.join("-"));
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("safety violation recorded");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
