//! `msseg`: phantom generation, source training, adaptation, inference,
//! evaluation, adaptation grids and model inspection.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msseg_core::adapt::{adapt, recommend_freeze_for, run_adaptation_grid, GridSpec};
use msseg_core::cascade::{train_cascade, CascadeModel};
use msseg_core::metrics::{evaluate, Reference};
use msseg_core::nifti::{save_mask, save_nifti, Datatype};
use msseg_core::phantom::generate_raw_set;
use msseg_core::volume::{load_case_dir, load_case_set};
use msseg_core::{Case, Error, FreezeMode, Mask, Model, Result};

use config::{parse_freeze, FreezeChoice, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "msseg", version, about = "Cascaded 3D CNN lesion segmentation with FC-layer domain adaptation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "MSSEG_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a phantom case set as `<out>/<case_id>/{flair,t1,brain,lesion}.nii`.
    Phantom {
        #[arg(long)]
        out: Option<PathBuf>,
        /// `reference` or `shifted`; overrides the configured domain.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Trains a cascade from scratch on a case set.
    TrainSource {
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrains the FC layers of a cascade on annotated target cases.
    Adapt {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        cases: Option<PathBuf>,
        /// `fc1_fc2_fc3`, `fc2_fc3`, `fc3` or `auto`.
        #[arg(long)]
        freeze: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes `<out>/<case_id>/{probability,mask}.nii` for one case or a set.
    Infer {
        #[arg(long)]
        model: Option<PathBuf>,
        /// A single case directory.
        #[arg(long, conflicts_with = "cases")]
        case: Option<PathBuf>,
        /// A directory of case directories.
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a cascade on a case set and writes a tab-separated report.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        cases: Option<PathBuf>,
        /// Silver reference: an `infer` output directory holding `<case_id>/mask.nii`.
        /// Without it the cases' own lesion masks are the reference.
        #[arg(long)]
        silver: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapts the source cascade for every freeze mode and training-set size.
    Grid {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the architecture and parameter counts of a cascade file, or of
    /// the canonical network without one.
    Inspect {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

/// `flag`, else the `[data]` entry `key`.
fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("missing --{flag} (or data.{key} in the config)")))
}

fn load_model(path: &Path) -> Result<CascadeModel> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!("{}: model file not found", path.display())));
    }
    CascadeModel::load(path)
}

fn load_cases(path: &Path) -> Result<Vec<Case>> {
    if !path.is_dir() {
        return Err(Error::InvalidArgument(format!("{}: case directory not found", path.display())));
    }
    let cases = load_case_set(path)?;
    log::info!("loaded {} cases from {}", cases.len(), path.display());
    Ok(cases)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn save_model(model: &CascadeModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
    }
    model.save(path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn inspect_model(name: &str, m: &Model<f32>) -> String {
    let mut s = format!("{name}\n");
    for (i, spec) in m.layers().iter().enumerate() {
        let _ = writeln!(s, "  {i:>2}  {:<60} {:>7}", spec.render(), m.layer_param_count(i));
    }
    let _ = writeln!(s, "  {:<20} {:>9}", "freeze mode", "trainable");
    for mode in [FreezeMode::None, FreezeMode::Fc1Fc2Fc3, FreezeMode::Fc2Fc3, FreezeMode::Fc3] {
        let _ = writeln!(s, "  {:<20} {:>9}", mode.name(), m.count_params(Some(mode)).trainable_table);
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    let threads = if cli.global.deterministic { Some(1) } else { cli.global.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    log::info!("seed {}", cfg.seed);
    log::info!("effective config:\n{}", cfg.to_toml().trim_end());
    let data = cfg.data.clone();

    match cli.command {
        Command::Phantom { out, domain, cases } => {
            if let Some(d) = domain {
                cfg.phantom.domain = d;
            }
            if let Some(n) = cases {
                cfg.phantom.cases = n;
            }
            let out = required(out, &data.output, "out", "output")?;
            let domain = cfg.domain()?;
            let raw = generate_raw_set(&cfg.phantom_spec(), &domain, cfg.phantom.cases, cfg.seed)?;
            for r in &raw {
                r.save(&out)?;
            }
            let voxels: usize = raw.iter().map(|r| r.lesion_mask.as_ref().map_or(0, Mask::count)).sum();
            println!("wrote {} {} cases to {} ({voxels} lesion voxels)", raw.len(), domain.id, out.display());
        }
        Command::TrainSource { cases, out } => {
            let cases = load_cases(&required(cases, &data.cases, "cases", "cases")?)?;
            let out = required(out, &data.output, "out", "output")?;
            let (model, h) = train_cascade(&cases, &cfg.cascade_config()?)?;
            save_model(&model, &out)?;
            println!(
                "trained on {} cases: net 1 best validation loss {:.4}, net 2 {:.4}",
                cases.len(),
                h.stage1.best_validation_loss,
                h.stage2.best_validation_loss
            );
        }
        Command::Adapt { model, cases, freeze, out } => {
            let source = load_model(&required(model, &data.model, "model", "model")?)?;
            let cases = load_cases(&required(cases, &data.cases, "cases", "cases")?)?;
            let out = required(out, &data.output, "out", "output")?;
            let choice = match freeze {
                Some(f) => parse_freeze(&f)?,
                None => cfg.freeze_choice()?,
            };
            let mode = match choice {
                FreezeChoice::Fixed(m) => m,
                FreezeChoice::Auto => {
                    let m = recommend_freeze_for(&cases).mode;
                    log::info!("auto freeze: {m} for the target lesion load");
                    m
                }
            };
            let (adapted, report) = adapt(&source, &cases, &cfg.freeze_config(mode), &cfg.train_config())?;
            save_model(&adapted, &out)?;
            println!(
                "adapted with {mode} on {} cases ({:.2} ml lesion load): {} trainable parameters per network",
                cases.len(),
                report.lesion_volume_mm3 / 1000.0,
                report.counts[0].trainable_table
            );
        }
        Command::Infer { model, case, cases, out } => {
            let model = load_model(&required(model, &data.model, "model", "model")?)?;
            let out = required(out, &data.output, "out", "output")?;
            let cases = match case {
                Some(c) => vec![load_case_dir(&c)?],
                None => load_cases(&required(cases, &data.cases, "cases", "cases")?)?,
            };
            for c in &cases {
                let dir = out.join(&c.id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::InvalidArgument(format!("{}: {e}", dir.display())))?;
                let prob = model.infer(c)?;
                let mask = msseg_core::cascade::postprocess(&prob, &model.post)?;
                save_nifti(&prob, dir.join("probability.nii"), Datatype::F32)?;
                save_mask(&mask, dir.join("mask.nii"))?;
                println!("{}: {} lesion voxels", c.id, mask.count());
            }
        }
        Command::Evaluate { model, cases, silver, out } => {
            let model = load_model(&required(model, &data.model, "model", "model")?)?;
            let cases = load_cases(&required(cases, &data.cases, "cases", "cases")?)?;
            let masks = match &silver {
                Some(dir) => Some(
                    cases
                        .iter()
                        .map(|c| msseg_core::nifti::load_mask(dir.join(&c.id).join("mask.nii")))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            let reference = match &masks {
                Some(m) => Reference::Silver(m),
                None => Reference::Expert,
            };
            let report = evaluate(&model, &cases, reference)?;
            if let Some(out) = out.or(data.output) {
                write_text(&out, &report.to_dsv('\t'))?;
                log::info!("wrote {}", out.display());
            }
            print!("{}", report.to_table());
        }
        Command::Grid { model, train, test, out } => {
            let source = load_model(&required(model, &data.model, "model", "model")?)?;
            let train = load_cases(&required(train, &data.train_cases, "train", "train_cases")?)?;
            let test = load_cases(&required(test, &data.test_cases, "test", "test_cases")?)?;
            let grid = GridSpec {
                modes: cfg.grid_modes()?,
                sizes: cfg.grid.sizes.clone(),
                train: cfg.train_config(),
                seed: cfg.seed,
            };
            let report = run_adaptation_grid(&source, &train, &test, &grid)?;
            let table = report.to_dsv('\t');
            if let Some(out) = out.or(data.output) {
                write_text(&out, &table)?;
                log::info!("wrote {}", out.display());
            }
            print!("{table}");
        }
        Command::Inspect { model } => match model.or(data.model) {
            Some(path) => {
                let m = load_model(&path)?;
                print!("{}", inspect_model("net 1", &m.net1));
                print!("{}", inspect_model("net 2", &m.net2));
                println!("postprocess: t_bin {} l_min {} connectivity {}", m.post.t_bin, m.post.l_min, m.post.connectivity.value());
                for (k, v) in &m.provenance {
                    println!("{k} = {v}");
                }
            }
            None => {
                let m = Model::<f32>::canonical(cfg.seed);
                print!("{}", inspect_model("canonical network", &m));
                println!("total parameters {}", m.count_params(None).total);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
