use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmcr_core::crr::masked_slic;
use pmcr_core::harness::{
    ablate, evaluate_model, generate_dataset, mean_dice, train, variant_mean, write_metrics, AblationFlags, Dataset, Model,
    SyntheticTaskSpec, TrainConfig,
};
use pmcr_core::io::{read_tensor, write_tensor};
use pmcr_core::pcm::sinkhorn;
use pmcr_core::Tensor;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] pmcr_core::Error),
    #[error("{0}: {1}")]
    Input(PathBuf, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "pmcr", version, about = "Few-shot segmentation with prototype correlation matching and class-relation reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a task spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes metrics.csv, timing.csv and model/ under OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Volumetric evaluation of the novel classes on the test scans.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        chunks: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and score the full model, each single ablation and the baseline.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "ablation_out")]
        out: PathBuf,
    },
    /// Write the default training config and, optionally, the default task spec.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run a single component on files.
    Demo {
        #[command(subcommand)]
        demo: Demo,
    },
}

#[derive(Subcommand)]
enum Demo {
    /// Entropic transport plan; prints the plan as CSV.
    Sinkhorn {
        #[arg(long)]
        cost: PathBuf,
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        v: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        mu: f64,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Also write the plan as a .pmt tensor.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked SLIC over a D×N feature matrix; prints centroids as CSV.
    Slic {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        seeds: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Reads a `.pmt` tensor, or a JSON number array (flat or nested one level).
fn read_array(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        let bad = |m: &str| CliError::Input(path.to_path_buf(), m.to_string());
        let nums = |row: &serde_json::Value| -> Result<Vec<f64>> {
            row.as_array()
                .ok_or_else(|| bad("expected an array"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| bad("expected numbers")))
                .collect()
        };
        let items = v.as_array().ok_or_else(|| bad("expected an array"))?;
        if items.first().is_some_and(|x| x.is_array()) {
            let rows = items.iter().map(nums).collect::<Result<Vec<_>>>()?;
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(bad("ragged rows"));
            }
            Ok(Tensor::new(vec![rows.len(), cols], rows.concat())?)
        } else {
            let data = nums(&v)?;
            Ok(Tensor::new(vec![data.len()], data)?)
        }
    } else {
        Ok(read_tensor(path)?)
    }
}

fn print_matrix(t: &Tensor) {
    for r in 0..t.rows() {
        let line: Vec<String> = t.row(r).iter().map(|x| format!("{x:.9e}")).collect();
        println!("{}", line.join(","));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out, seed } => {
            let spec: SyntheticTaskSpec = serde_json::from_str(&fs::read_to_string(&spec)?)?;
            let ds = generate_dataset(&spec, seed, &out)?;
            println!("wrote {} scans to {}", ds.scans.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let s = train(&cfg, &out)?;
            let tail = &s.rows[s.rows.len().saturating_sub(100)..];
            let loss = tail.iter().map(|r| r.loss_all).sum::<f64>() / tail.len().max(1) as f64;
            println!("trained {} steps ({} skipped); recent mean loss {loss:.5}", s.model.iteration, s.skipped);
        }
        Command::Eval { model, data, chunks, report } => {
            let (m, _) = Model::load(&model)?;
            let ds = Dataset::load(&data)?;
            let rows = evaluate_model(&m, &ds, &ds.spec.novel, chunks)?;
            write_metrics(&report, &rows)?;
            for &c in &ds.spec.novel {
                let mine: Vec<_> = rows.iter().filter(|r| r.class_id == c).cloned().collect();
                println!("class {c}: mean 3D Dice {:.4} over {} scans", mean_dice(&mine), mine.len());
            }
        }
        Command::Ablate { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = Dataset::load(&cfg.data)?;
            let variants = AblationFlags::variants();
            let runs = ablate(&cfg, &ds, &cfg.ablation_seeds, &variants)?;
            fs::create_dir_all(&out)?;
            let mut text = String::from("variant,seed,novel_dice,final_loss\n");
            for r in &runs {
                text.push_str(&format!("{},{},{},{}\n", r.variant, r.seed, r.novel_dice, r.final_loss));
            }
            fs::write(out.join("ablation.csv"), text)?;
            for (name, _) in variants {
                println!("{name:>9}: mean novel Dice {:.4}", variant_mean(&runs, name).unwrap_or(f64::NAN));
            }
        }
        Command::Init { config, spec } => {
            TrainConfig::default().save(&config)?;
            if let Some(p) = spec {
                fs::write(&p, serde_json::to_string_pretty(&SyntheticTaskSpec::default())? + "\n")?;
            }
        }
        Command::Demo { demo: Demo::Sinkhorn { cost, u, v, mu, max_iters, tol, out } } => {
            let m = read_array(&cost)?;
            let (u, v) = (read_array(&u)?, read_array(&v)?);
            let plan = sinkhorn(&m, u.data(), v.data(), mu, max_iters, tol)?;
            print_matrix(&plan.t);
            eprintln!("iterations={} violation={:.3e}", plan.iterations, plan.violation);
            if let Some(p) = out {
                write_tensor(p, &plan.t)?;
            }
        }
        Command::Demo { demo: Demo::Slic { features, seeds, iters, out } } => {
            let x = read_array(&features)?;
            let c = masked_slic(&x, seeds, iters, 0)?;
            print_matrix(&c.centroids);
            if let Some(p) = out {
                write_tensor(p, &c.centroids)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
