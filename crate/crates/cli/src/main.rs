use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use rand::Rng;

use flexpatch::config::RunConfig;
use flexpatch::datagen::{generate_tile, write_tile};
use flexpatch::gradcheck::{run_gradcheck, GradcheckOptions};
use flexpatch::posenc::{build_alibi_bias, paired_demo_grids};
use flexpatch::sampler::{sample_ground_cover, sample_patch_parameters, seeded, BudgetConfig};
use flexpatch::train::{load_registry, overfit_config, train_toy};
use flexpatch::Error;

/// Environment variable that may replace the output directory.
const OUT_ENV: &str = "FLEXPATCH_OUT";

#[derive(Parser, Debug)]
#[command(name = "flexpatch", version, about = "Flexible-patch multi-sensor ViT toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value config file with [run], [model], [budget], [train], [weights] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (also settable through FLEXPATCH_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the rayon pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Finite-difference check of every loss term on a micro model.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Train the desk-scale model on generated tiles.
    TrainToy {
        #[arg(long)]
        steps: Option<usize>,
        /// Repeat one fixed batch.
        #[arg(long)]
        overfit: bool,
    },
    /// Write the ALiBi matrices of a 10 m / 20 m grid pair as CSV.
    DumpAlibi {
        /// Attention heads (defaults to the model's).
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Sample patch plans and write them as long-format CSV.
    BudgetSim {
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        /// Band registry file (one group per line).
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Write synthetic tiles to `<out>/tiles`.
    GenTiles {
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Footprint side in meters; drawn from the budget range when absent.
        #[arg(long)]
        cover: Option<f64>,
    },
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let base = match &cli.cmd {
        Cmd::TrainToy { overfit: true, .. } => overfit_config(0, 200),
        Cmd::BudgetSim { .. } => RunConfig { budget: BudgetConfig::default(), ..RunConfig::default() },
        _ => RunConfig::default(),
    };
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config_err(path, e))?;
            RunConfig::parse_over(&text, &base)?
        }
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
        cfg.out_dir = out;
    }
    match &cli.cmd {
        Cmd::TrainToy { steps, overfit } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            cfg.train.overfit |= overfit;
        }
        Cmd::BudgetSim { registry: Some(r), .. } => cfg.registry = Some(r.clone()),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<(), Error> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("run.ini"), cfg.render())?;
    Ok(())
}

fn gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<Outcome, Error> {
    prepare_out(cfg)?;
    let report = run_gradcheck(&GradcheckOptions { seed: cfg.seed, corrupt })?;
    println!("{report}");
    fs::write(cfg.out_dir.join("gradcheck.txt"), format!("{report}\n"))?;
    Ok(if report.passed() { Outcome::Ok } else { Outcome::VerificationFailed })
}

fn train(cfg: &RunConfig) -> Result<Outcome, Error> {
    let out = train_toy(cfg, &cfg.out_dir)?;
    if let (Some(first), Some(last)) = (out.reports.first(), out.reports.last()) {
        println!(
            "steps {}: total {:.6} -> {:.6} ({:.1}% lower)",
            out.reports.len(),
            first.total,
            last.total,
            100.0 * (1.0 - last.total / first.total)
        );
    }
    println!("losses: {}", out.csv_path.display());
    println!("checkpoint: {}", out.checkpoint_path.display());
    Ok(Outcome::Ok)
}

fn dump_alibi(cfg: &RunConfig, heads: Option<usize>) -> Result<Outcome, Error> {
    prepare_out(cfg)?;
    let bias = build_alibi_bias(&paired_demo_grids(), heads.unwrap_or(cfg.model.heads))?;
    for h in 0..bias.n_heads() {
        let m = bias.head(h);
        let path = cfg.out_dir.join(format!("alibi_head{}.csv", h + 1));
        let mut w = BufWriter::new(File::create(&path)?);
        for i in 0..m.rows() {
            let row: Vec<String> = (0..m.cols()).map(|j| m.at(i, j).to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        println!("{} ({}x{}, slope {})", path.display(), m.rows(), m.cols(), bias.slopes[h]);
    }
    Ok(Outcome::Ok)
}

fn budget_sim(cfg: &RunConfig, draws: usize) -> Result<Outcome, Error> {
    let registry = match &cfg.registry {
        Some(path) => {
            let reg = flexpatch::geometry::BandRegistry::load(path).map_err(|e| config_err(path, e))?;
            if reg.is_empty() {
                return Err(config_err(path, "band registry is empty"));
            }
            reg
        }
        None => load_registry(cfg)?,
    };
    prepare_out(cfg)?;
    let mut rng = seeded(cfg.seed);
    let path = cfg.out_dir.join("budget.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "draw,ground_cover_m,group_id,gsd_m,patch_px,grid_side,tokens,total_tokens")?;
    let (mut max_total, mut p_min, mut p_max) = (0, usize::MAX, 0);
    for d in 0..draws {
        let cover = sample_ground_cover(&cfg.budget, &mut rng);
        let plan = sample_patch_parameters(registry.groups(), cover, &cfg.budget, &mut rng)?;
        max_total = max_total.max(plan.total_tokens);
        for g in &plan.groups {
            p_min = p_min.min(g.patch_px);
            p_max = p_max.max(g.patch_px);
            writeln!(
                w,
                "{d},{cover},{},{},{},{},{},{}",
                g.group_id,
                g.gsd_m,
                g.patch_px,
                g.grid_rows(),
                g.token_count,
                plan.total_tokens
            )?;
        }
    }
    w.flush()?;
    println!("{draws} draws: max total tokens {max_total} (budget {})", cfg.budget.max_tokens);
    if p_max > 0 {
        println!("patch sizes in [{p_min}, {p_max}]");
    }
    println!("plans: {}", path.display());
    Ok(Outcome::Ok)
}

fn gen_tiles(cfg: &RunConfig, count: usize, cover: Option<f64>) -> Result<Outcome, Error> {
    prepare_out(cfg)?;
    let dir = cfg.out_dir.join("tiles");
    fs::create_dir_all(&dir)?;
    let mut rng = seeded(cfg.seed);
    for i in 0..count {
        let side = cover.unwrap_or_else(|| sample_ground_cover(&cfg.budget, &mut rng));
        let tile = generate_tile(rng.random(), side)?;
        let path = dir.join(format!("tile_{i:04}.fxt"));
        write_tile(&path, &tile)?;
        info!("{}: {} m, seed {}", path.display(), tile.footprint_m, tile.seed);
    }
    println!("{count} tiles in {}", dir.display());
    Ok(Outcome::Ok)
}

fn run(cli: &Cli) -> Result<Outcome, Error> {
    let cfg = resolve(cli)?;
    match &cli.cmd {
        Cmd::Gradcheck { corrupt_grad } => gradcheck(&cfg, *corrupt_grad),
        Cmd::TrainToy { .. } => train(&cfg),
        Cmd::DumpAlibi { heads } => dump_alibi(&cfg, *heads),
        Cmd::BudgetSim { draws, .. } => budget_sim(&cfg, *draws),
        Cmd::GenTiles { count, cover } => gen_tiles(&cfg, *count, *cover),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
