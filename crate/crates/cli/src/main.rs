use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use smcprice_core::experiments::{emit_plot_data, emit_replicates, run_plan};
use smcprice_core::pricing::in_pool;
use smcprice_core::scenario::{apply_override, PilotCache, RunConfig, UnbiasConfig};
use smcprice_core::smc::write_diagnostics;
use smcprice_core::unbiasedness::Verdict;

/// Sequential Monte Carlo pricing of barrier options and TARNs.
#[derive(Parser)]
#[command(name = "smcprice", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Price a knock-out barrier option.
    PriceBarrier(PriceArgs),
    /// Price a target accrual redemption note.
    PriceTarn(PriceArgs),
    /// Fit a pilot target and save it as JSON.
    Pilot(Common),
    /// Run a replicate comparison of several methods and write a CSV table.
    Compare(CompareArgs),
    /// Check that the SMC estimator is unbiased on a toy instance.
    UnbiasTest(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set smc.particles=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Where to write the main output; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Where to write the run manifest; next to the output by default.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct PriceArgs {
    #[command(flatten)]
    common: Common,
    /// `plain_mc`, `smc_monitor`, `smc_weighted` or `smc_weighted:<kind>`.
    #[arg(long)]
    method: Option<String>,
    /// Per-step CSV: step, ess, resampled, log_c_hat.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    replicates: Option<usize>,
    /// Also write every replicate estimate to this CSV.
    #[arg(long)]
    estimates: Option<PathBuf>,
}

impl Common {
    fn overrides(&self, product: Option<&str>) -> Vec<String> {
        let mut all = Vec::new();
        if let Some(p) = product {
            all.push(format!("product.type=\"{p}\""));
        }
        all.extend(self.overrides.iter().cloned());
        if let Some(s) = self.seed {
            all.push(format!("seed={s}"));
        }
        if let Some(n) = self.particles {
            all.push(format!("smc.particles={n}"));
        }
        if let Some(w) = self.workers {
            all.push(format!("workers={w}"));
        }
        all
    }

    fn load(&self, product: Option<&str>) -> Result<RunConfig> {
        let mut table: toml::Table = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        if let (Some(want), Some(have)) = (
            product,
            table
                .get("product")
                .and_then(|p| p.get("type"))
                .and_then(|t| t.as_str()),
        ) {
            if want != have {
                bail!("this command prices a {want}, but the configuration describes a {have}");
            }
        }
        for o in self.overrides(product) {
            apply_override(&mut table, &o)?;
        }
        Ok(RunConfig::from_table(table)?)
    }

    fn manifest_path(&self) -> Option<PathBuf> {
        self.manifest.clone().or_else(|| {
            self.output.as_ref().map(|o| {
                let mut name = o.file_name().unwrap_or_default().to_os_string();
                name.push(".manifest.json");
                o.with_file_name(name)
            })
        })
    }

    fn emit(&self, value: &Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        match &self.output {
            Some(p) => write(p, &text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn write_manifest(&self, command: &str, config: &RunConfig) -> Result<()> {
        self.write_manifest_value(
            command,
            &config.hash(),
            config.seed,
            serde_json::to_value(config)?,
        )
    }

    fn write_manifest_value(
        &self,
        command: &str,
        hash: &str,
        seed: u64,
        config: Value,
    ) -> Result<()> {
        if let Some(p) = self.manifest_path() {
            let m = json!({
                "command": command,
                "config_hash": hash,
                "seed": seed,
                "versions": {
                    "smcprice": env!("CARGO_PKG_VERSION"),
                    "smcprice-core": smcprice_core::VERSION,
                },
                "config": config,
            });
            write(&p, &(serde_json::to_string_pretty(&m)? + "\n"))?;
        }
        Ok(())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn price_cmd(args: &PriceArgs, product: &str, command: &str) -> Result<()> {
    let mut config = args.common.load(Some(product))?;
    if let Some(m) = &args.method {
        config.method = smcprice_core::scenario::parse_method_label(m, config.weighting.kind)?.0;
        if let Some((_, kind)) = m.split_once(':') {
            config.weighting.kind = kind.parse()?;
        }
    }
    let cache = PilotCache::default();
    let req = config.request(&cache)?;
    let result = smcprice_core::price(&req)?;
    if let Some(p) = &args.diagnostics {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_diagnostics(&result.diagnostics, f)?;
    }
    args.common.emit(&json!({
        "estimate": result.estimate,
        "se_hint": result.se_hint,
        "diagnostics_path": args.diagnostics,
        "method": config.method.label(),
        "n_particles": result.n_particles,
        "extinct": result.extinct,
        "log_c_hat": result.log_c_hat,
        "wall_time_s": result.wall_time,
    }))?;
    args.common.write_manifest(command, &config)
}

fn pilot_cmd(args: &Common) -> Result<()> {
    let config = args.load(None)?;
    let pilot = config.fit_pilot()?;
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("pilot.json"));
    pilot.save(&out)?;
    let summary = json!({
        "pilot_path": out,
        "fraction": pilot.qualifying_fraction(),
        "mixture_weights": pilot.mixture_weights(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    args.write_manifest("pilot", &config)
}

fn compare_cmd(args: &CompareArgs) -> Result<()> {
    let mut config = args.common.load(None)?;
    if let Some(r) = args.replicates {
        config
            .plan
            .as_mut()
            .context("missing [plan] section")?
            .replicates = r;
    }
    let (plan, axis) = config.plan()?;
    let cache = PilotCache::default();
    let out = run_plan(&plan, &|si, m| {
        config
            .at_sweep(axis, plan.sweep[si])?
            .request_for(m, &cache)
    })?;
    let table = args
        .common
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("comparison.csv"));
    emit_plot_data(&out.rows, &table)?;
    if let Some(p) = &args.estimates {
        emit_replicates(&out.estimates, p)?;
    }
    for r in &out.rows {
        println!(
            "{:>8} {:<26} mean {:>12.6e} sd {:>10.3e} rel_sd {}",
            r.sweep,
            r.method,
            r.mean,
            r.sd,
            r.rel_sd
                .map(|x| format!("{x:.3}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    let common = Common {
        output: Some(table),
        ..args.common.clone()
    };
    common.write_manifest("compare", &config)
}

fn unbias_cmd(args: &Common) -> Result<Verdict> {
    let mut table: toml::Table = match &args.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?)?,
        None => toml::Table::new(),
    };
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(n) = args.particles {
        apply_override(&mut table, &format!("unbias.particles={n}"))?;
    }
    let seed = match args.seed {
        Some(s) => s,
        None => table
            .get("seed")
            .map(|v| v.clone().try_into::<u64>())
            .transpose()
            .context("seed must be a non-negative integer")?
            .unwrap_or(2024),
    };
    let unbias: UnbiasConfig = match table.remove("unbias") {
        Some(v) => v.try_into().context("bad [unbias] section")?,
        None => UnbiasConfig::default(),
    };
    let report = in_pool(args.workers, || unbias.run(seed))??;
    args.emit(&serde_json::to_value(&report)?)?;
    let value = serde_json::to_value(&unbias)?;
    let hash = smcprice_core::scenario::hash_json(&value);
    args.write_manifest_value("unbias-test", &hash, seed, value)?;
    Ok(report.verdict)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::PriceBarrier(a) => price_cmd(a, "barrier", "price-barrier")?,
        Command::PriceTarn(a) => price_cmd(a, "tarn", "price-tarn")?,
        Command::Pilot(a) => pilot_cmd(a)?,
        Command::Compare(a) => compare_cmd(a)?,
        Command::UnbiasTest(a) => {
            return Ok(match unbias_cmd(a)? {
                Verdict::Pass => ExitCode::SUCCESS,
                Verdict::Fail => ExitCode::from(2),
                Verdict::Inconclusive => ExitCode::from(3),
            })
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
