use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use v2i_core::comm::ChannelModel;
use v2i_core::idapm::{save_weights, synthetic_batch, train_predictor, TrainOptions};
use v2i_core::loss::{loss_grad, loss_value, LossParams, LossVariant};
use v2i_core::pipeline::{
    report, run, summary_table, sweep, write_sweep_csv, HeatmapSource, MaskPolicy, RunConfig,
};
use v2i_core::ptcm::{relevance_all, Branches};
use v2i_core::scenario::{generate_scenario, load_scenario, save_scenario, Template};

#[derive(Parser, Debug)]
#[command(
    name = "v2i-sim",
    version,
    about = "Selective roadside-to-vehicle feature sharing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scenario file from a template.
    GenScenario {
        #[arg(long, default_value = "occluded-crossing")]
        template: Template,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        agents: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline over a scenario suite and report metrics.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Print the evaluation report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run the pipeline once per threshold and print a CSV row for each.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.01])]
        taus: Vec<f64>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-target relevance for one frame as CSV.
    EvalPtcm {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        #[arg(long)]
        no_trajectory: bool,
        #[arg(long)]
        no_velocity: bool,
    },
    /// Print loss and gradient for (x, gt) pairs.
    EvalLoss {
        /// CSV of `x,gt` rows; `-` reads standard input. Random pairs are drawn when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "rescale-focal")]
        variant: LossVariant,
        /// Number of random pairs when no input is given.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the heatmap predictor on the synthetic batch and save its weights.
    TrainIdapm {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value = "rescale-focal")]
        variant: LossVariant,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-iteration loss as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ScenarioSource {
    /// Scenario file; generated from the template when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "occluded-crossing")]
    template: Template,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    agents: usize,
}

/// Overrides applied on top of the config file (or the defaults).
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML file with `RunConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "scenario")]
    scenarios: Vec<PathBuf>,
    #[arg(long)]
    template: Option<Template>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    bytes_per_cell: Option<u64>,
    #[arg(long)]
    header_bytes: Option<u64>,
    #[arg(long)]
    drop_probability: Option<f64>,
    #[arg(long)]
    channel_seed: Option<u64>,
    #[arg(long)]
    policy: Option<MaskPolicy>,
    #[arg(long)]
    heatmap: Option<HeatmapSource>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    train_iters: Option<usize>,
    #[arg(long)]
    loss_variant: Option<LossVariant>,
    #[arg(long)]
    temporal_window: Option<usize>,
    #[arg(long)]
    visibility_sigma: Option<f64>,
    #[arg(long)]
    no_temporal: bool,
    #[arg(long)]
    no_motion: bool,
    #[arg(long)]
    no_velocity: bool,
    #[arg(long)]
    n_rays: Option<usize>,
    #[arg(long)]
    min_cells: Option<usize>,
    #[arg(long)]
    min_count: Option<u32>,
    #[arg(long)]
    match_iou: Option<f64>,
    #[arg(long)]
    critical_threshold: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if !self.scenarios.is_empty() {
            c.scenarios = self.scenarios;
        }
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        set!(
            template,
            seed,
            count,
            agents,
            tau,
            block_size,
            bytes_per_cell,
            header_bytes,
            policy,
            heatmap,
            train_iters,
            temporal_window,
            visibility_sigma,
            n_rays,
            min_cells,
            min_count,
            match_iou,
            critical_threshold
        );
        if let Some(p) = self.drop_probability {
            c.channel.drop_probability = p;
        }
        if let Some(s) = self.channel_seed {
            c.channel = ChannelModel {
                seed: s,
                ..c.channel
            };
        }
        if let Some(v) = self.loss_variant {
            c.loss.variant = v;
        }
        if self.weights.is_some() {
            c.weights = self.weights;
        }
        if self.out_dir.is_some() {
            c.out_dir = self.out_dir;
        }
        c.no_temporal |= self.no_temporal;
        c.no_motion |= self.no_motion;
        c.no_velocity |= self.no_velocity;
        c.validate()?;
        Ok(c)
    }
}

fn report_violations(violations: &[String]) -> ExitCode {
    if violations.is_empty() {
        return ExitCode::SUCCESS;
    }
    for v in violations {
        eprintln!("invariant violated: {v}");
    }
    ExitCode::from(2)
}

fn cmd_run(args: RunArgs, json: bool) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let out = run(&cfg)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&out.report)?);
    } else {
        print!("{}", summary_table(&cfg, &out.report));
    }
    if let Some(dir) = &cfg.out_dir {
        let files = report(&cfg, &out, dir)?;
        eprintln!("wrote {} files to {}", files.len(), dir.display());
    }
    Ok(report_violations(&out.violations))
}

fn cmd_sweep(args: RunArgs, taus: &[f64], out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let (rows, violations) = sweep(&cfg, taus)?;
    match out {
        Some(path) => {
            let mut buf = Vec::new();
            write_sweep_csv(&mut buf, cfg.policy, &rows)?;
            fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        }
        None => write_sweep_csv(io::stdout().lock(), cfg.policy, &rows)?,
    }
    Ok(report_violations(&violations))
}

fn cmd_eval_ptcm(
    source: ScenarioSource,
    frame: usize,
    no_trajectory: bool,
    no_velocity: bool,
) -> Result<ExitCode> {
    let scenario = match &source.scenario {
        Some(p) => load_scenario(p)?,
        None => generate_scenario(source.template, source.seed, source.agents)?,
    };
    let branches = Branches {
        trajectory: !no_trajectory,
        velocity: !no_velocity,
    };
    let reports = relevance_all(&scenario, frame, &Default::default(), branches)?;
    let mut w = io::stdout().lock();
    writeln!(w, "target_id,T_S,R_S,relevance")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.target_id, r.t_s, r.r_s, r.relevance)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_pairs(reader: impl io::Read) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut pairs = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        let parsed = match (record.len(), record.get(0), record.get(1)) {
            (2, Some(x), Some(g)) => x.parse::<f64>().ok().zip(g.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => pairs.push(p),
            // a non-numeric first record is a header
            None if i == 0 => continue,
            None => bail!(
                "line {line}: expected `x,gt`, got `{}`",
                record.iter().collect::<Vec<_>>().join(",")
            ),
        }
    }
    Ok(pairs)
}

fn cmd_eval_loss(
    input: Option<PathBuf>,
    variant: LossVariant,
    samples: usize,
    seed: u64,
) -> Result<ExitCode> {
    let pairs = match input {
        Some(p) if p.as_os_str() == "-" => parse_pairs(io::stdin().lock())?,
        Some(p) => {
            let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            parse_pairs(f).with_context(|| format!("reading {}", p.display()))?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..samples)
                .map(|_| (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)))
                .collect()
        }
    };
    let params = LossParams::with_variant(variant);
    let mut w = io::stdout().lock();
    writeln!(w, "x,gt,loss,grad")?;
    for (x, gt) in pairs {
        let l = loss_value(x, gt, &params)?;
        let g = loss_grad(x, gt, &params)?;
        writeln!(w, "{x},{gt},{l},{g}")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    seed: u64,
    iters: usize,
    step: f64,
    variant: LossVariant,
    out: &Path,
    trace: Option<PathBuf>,
) -> Result<ExitCode> {
    let batch = synthetic_batch(seed)?;
    let opts = TrainOptions {
        iters,
        step,
        seed,
        ..TrainOptions::default()
    };
    let outcome = train_predictor::<f64>(&batch, &LossParams::with_variant(variant), &opts)?;
    save_weights(&outcome.model, out)?;
    let initial = outcome
        .loss_trace
        .first()
        .copied()
        .unwrap_or(outcome.final_loss);
    println!("initial loss      {initial:.6}");
    println!("final loss        {:.6}", outcome.final_loss);
    println!("gradient check    {:.2e}", outcome.grad_check_max_rel_error);
    println!("weights           {}", out.display());
    if let Some(path) = trace {
        let mut csv = String::from("iteration,loss\n");
        for (i, l) in outcome.loss_trace.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        csv.push_str(&format!(
            "{},{}\n",
            outcome.loss_trace.len(),
            outcome.final_loss
        ));
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenScenario {
            template,
            seed,
            agents,
            out,
        } => generate_scenario(template, seed, agents)
            .and_then(|s| save_scenario(&s, &out))
            .map(|_| ExitCode::SUCCESS)
            .map_err(Into::into),
        Command::Run { run, json } => cmd_run(run, json),
        Command::Sweep { run, taus, out } => cmd_sweep(run, &taus, out),
        Command::EvalPtcm {
            source,
            frame,
            no_trajectory,
            no_velocity,
        } => cmd_eval_ptcm(source, frame, no_trajectory, no_velocity),
        Command::EvalLoss {
            input,
            variant,
            samples,
            seed,
        } => cmd_eval_loss(input, variant, samples, seed),
        Command::TrainIdapm {
            seed,
            iters,
            step,
            variant,
            out,
            trace,
        } => cmd_train(seed, iters, step, variant, &out, trace),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
