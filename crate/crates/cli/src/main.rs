use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use canary_audit::harness::bounds::{simulate_bounds, write_bounds_csv, BoundsConfig};
use canary_audit::harness::config::{CanaryType, ExperimentConfig, ProcedureChoice};
use canary_audit::harness::curve::emit_steps_curve;
use canary_audit::harness::pipeline::{
    audit_run, build_partition, collect_outputs, optimize_metagradient, prepare, prepare_with, run_prepared,
    seed_run_from_tape, train_seed, Prepared,
};
use canary_audit::metacanary::{read_canaries, write_canaries};
use canary_audit::tapefile::{read_tape, write_tape};

#[derive(Parser)]
#[command(
    name = "canary-audit",
    version,
    about = "One-run privacy audits of (DP-)SGD with crafted canaries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long = "canary-type")]
    canary_type: Option<CanaryType>,
    #[arg(long)]
    procedure: Option<ProcedureChoice>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize canaries by metagradient descent and save them.
    OptimizeCanaries(Common),
    /// Train one model per seed on D ∪ C_IN and save the tapes.
    Train(Common),
    /// Audit saved tapes (from `train`) and write estimates.
    Audit(Common),
    /// Monte-Carlo soundness check against randomized response.
    SimulateBounds {
        /// Bounds config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        #[arg(long, default_value = "both")]
        procedure: ProcedureChoice,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Canaries, training, audit and report for every seed.
    Pipeline(Common),
    /// Audit checkpoints of non-private runs and write the ε̂ curve.
    StepsCurve {
        #[command(flatten)]
        common: Common,
        /// Audit every this many steps; overrides the config.
        #[arg(long)]
        every: Option<usize>,
    },
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    if let Some(s) = &c.seed {
        cfg.seeds = s.clone();
    }
    if let Some(t) = c.canary_type {
        cfg.audit.canary_type = t;
    }
    if let Some(p) = c.procedure {
        cfg.audit.procedure = p;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok((cfg, out))
}

/// Reuse `canaries.bin` from the output directory when present, so that
/// `train` and `audit` see the same canaries.
fn prepare_reusing(cfg: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    let saved = out.join("canaries.bin");
    if cfg.audit.canary_file.is_none() && saved.exists() {
        let (canaries, prov) = read_canaries(BufReader::new(File::open(&saved)?))?;
        if prov.kind == cfg.audit.canary_type.as_str() {
            return Ok(prepare_with(cfg, build_partition(cfg)?, canaries, prov)?);
        }
        bail!(
            "{} holds {} canaries, config asks for {}",
            saved.display(),
            prov.kind,
            cfg.audit.canary_type
        );
    }
    let prep = prepare(cfg)?;
    write_canaries(BufWriter::new(File::create(&saved)?), &prep.canaries, &prep.provenance)?;
    Ok(prep)
}

fn optimize(c: &Common) -> Result<()> {
    let (mut cfg, out) = load(c)?;
    cfg.audit.canary_type = CanaryType::Metagradient;
    let data = build_partition(&cfg)?;
    let (res, prov) = optimize_metagradient(&cfg, &data)?;
    write_canaries(
        BufWriter::new(File::create(out.join("canaries.bin"))?),
        &res.canaries,
        &prov,
    )?;
    let mut w = BufWriter::new(File::create(out.join("phi.csv"))?);
    writeln!(w, "metastep,phi")?;
    for (i, phi) in res.phi_log.iter().enumerate() {
        writeln!(w, "{i},{phi}")?;
    }
    w.flush()?;
    println!(
        "optimized {} canaries over {} metasteps; phi {} -> {}",
        res.canaries.len(),
        res.phi_log.len(),
        res.phi_log.first().copied().unwrap_or(f64::NAN),
        res.phi_log.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn tape_path(out: &Path, seed: u64) -> PathBuf {
    out.join("tapes").join(format!("seed-{seed}.tape"))
}

fn train(c: &Common) -> Result<()> {
    let (cfg, out) = load(c)?;
    let prep = prepare_reusing(&cfg, &out)?;
    fs::create_dir_all(out.join("tapes"))?;
    for &seed in &cfg.seeds {
        let mut run = train_seed(&cfg, &prep, seed).with_context(|| format!("seed {seed}"))?;
        run.tape.purge_intermediate();
        write_tape(BufWriter::new(File::create(tape_path(&out, seed))?), &run.tape)?;
        println!(
            "seed {seed}: trained {} steps on {} examples",
            run.tape.num_steps(),
            run.train_set.len()
        );
    }
    Ok(())
}

fn audit(c: &Common) -> Result<()> {
    let (cfg, out) = load(c)?;
    let prep = prepare_reusing(&cfg, &out)?;
    let outcomes = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let r = File::open(tape_path(&out, seed))
                .map_err(Into::into)
                .and_then(|f| read_tape(BufReader::new(f)))
                .and_then(|t| seed_run_from_tape(&cfg, &prep, seed, t))
                .and_then(|run| audit_run(&cfg, &prep, run));
            (seed, r)
        })
        .collect();
    let output = collect_outputs(&cfg, &prep, outcomes);
    output.write(&out)?;
    print_summary(&output.report);
    Ok(())
}

fn print_summary(report: &canary_audit::harness::AuditReport) {
    for s in &report.summary {
        let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{}: {} seeds, mean eps {}, median eps {}",
            s.procedure,
            s.n,
            show(s.mean),
            show(s.median)
        );
    }
    for s in &report.seeds {
        if let Some(e) = &s.error {
            println!("seed {} failed: {e}", s.seed);
        }
    }
}

fn pipeline(c: &Common) -> Result<()> {
    let (cfg, out) = load(c)?;
    let prep = prepare(&cfg)?;
    let output = run_prepared(&cfg, &prep);
    output.write(&out)?;
    print_summary(&output.report);
    Ok(())
}

fn steps_curve(c: &Common, every: Option<usize>) -> Result<()> {
    let (cfg, out) = load(c)?;
    let every = match (every, &cfg.curve) {
        (Some(e), _) => e,
        (None, Some(cc)) => cc.every,
        (None, None) => 100,
    };
    let prep = prepare(&cfg)?;
    let curve = emit_steps_curve(&cfg, &prep, every)?;
    let mut w = BufWriter::new(File::create(out.join("curve.csv"))?);
    curve.write_csv(&mut w)?;
    w.flush()?;
    let mut json = serde_json::to_string_pretty(&curve)?;
    json.push('\n');
    fs::write(out.join("curve.json"), json)?;
    println!(
        "{} checkpoints over {} seeds written to {}",
        curve.points.len(),
        curve.seeds.len(),
        out.join("curve.csv").display()
    );
    for (seed, e) in &curve.failures {
        println!("seed {seed} failed: {e}");
    }
    Ok(())
}

fn bounds(config: Option<&Path>, seed: Option<&[u64]>, procedure: ProcedureChoice, out: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            BoundsConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => BoundsConfig::default(),
    };
    let seeds = seed.map(<[u64]>::to_vec).unwrap_or_else(|| vec![cfg.seed]);
    let mut reports = Vec::new();
    for s in seeds {
        cfg.seed = s;
        reports.extend(simulate_bounds(&cfg, &procedure.procedures())?);
    }
    for r in &reports {
        println!(
            "{} eps0={} violation_rate={} mean_eps={:.4}",
            r.config.procedure, r.config.epsilon0, r.violation_rate, r.mean_epsilon
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("bounds.csv"))?);
        write_bounds_csv(&reports, &mut w)?;
        w.flush()?;
        let mut json = serde_json::to_string_pretty(&reports)?;
        json.push('\n');
        fs::write(dir.join("bounds.json"), json)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::OptimizeCanaries(c) => optimize(&c),
        Command::Train(c) => train(&c),
        Command::Audit(c) => audit(&c),
        Command::SimulateBounds {
            config,
            seed,
            procedure,
            out,
        } => bounds(config.as_deref(), seed.as_deref(), procedure, out.as_deref()),
        Command::Pipeline(c) => pipeline(&c),
        Command::StepsCurve { common, every } => steps_curve(&common, every),
    }
}
