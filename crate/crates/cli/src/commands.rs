//! Subcommand implementations.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::info;
use tubestream::ablation::{ablate, Ablation, AblationRow};
use tubestream::checkpoint::Checkpoint;
use tubestream::engine::write_tube_jsonl;
use tubestream::metrics::{evaluate, Grounder, OracleGrounder};
use tubestream::train::{StepLog, Trainer};
use tubestream::world::{encode_query_tokens, generate_dataset};
use tubestream::{dataset, Episode, Model, RunConfig};

use crate::{CliError, Command, Common};

type Result<T> = std::result::Result<T, CliError>;

/// Overrides relative input paths; never changes what a config computes.
const DATA_DIR_ENV: &str = "TUBESTREAM_DATA_DIR";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common, count, eval_split } => gen(&common, count, eval_split),
        Command::Train { common, data, steps, resume } => train(&common, data, steps, resume),
        Command::Eval { common, checkpoint, data, oracle } => eval(&common, checkpoint, data, oracle),
        Command::Ground { common, checkpoint, data, index, frames } => {
            ground(&common, checkpoint, data, index, frames)
        }
        Command::Ablate { common, variants, seeds, no_sweep } => run_ablation(&common, variants, seeds, no_sweep),
    }
}

/// Config file, then `--set` overrides, then `--seed`.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(key.trim(), value.trim()).map_err(|e| CliError::Config(format!("--set {kv}: {e}")))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        cfg.paths.data_dir = Some(PathBuf::from(dir));
    }
    Ok(cfg)
}

fn resolve(cfg: &RunConfig, path: &Path) -> PathBuf {
    match &cfg.paths.data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn out_path(common: &Common, cfg: &RunConfig, default: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn load_data(cfg: &RunConfig, explicit: Option<PathBuf>, seed: u64, count: usize) -> Result<Vec<Episode>> {
    match explicit.or_else(|| cfg.paths.dataset.clone()) {
        Some(p) => {
            let p = resolve(cfg, &p);
            info!("loading {}", p.display());
            Ok(dataset::load(&p)?)
        }
        None => Ok(generate_dataset(&cfg.world, seed, count)?),
    }
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_add(cfg.eval.seed_offset)
}

fn load_checkpoint(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<Checkpoint> {
    let p = explicit
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| CliError::Config("no checkpoint given (--checkpoint or paths.checkpoint)".into()))?;
    let p = resolve(cfg, &p);
    if !p.exists() {
        return Err(CliError::Io { path: p, source: io::ErrorKind::NotFound.into() });
    }
    Ok(Checkpoint::load(&p)?)
}

fn gen(common: &Common, count: Option<usize>, eval_split: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let (seed, n) = if eval_split {
        (eval_seed(&cfg), count.unwrap_or(cfg.eval.episodes))
    } else {
        (cfg.seed, count.unwrap_or(cfg.train.episodes))
    };
    let episodes = generate_dataset(&cfg.world, seed, n)?;
    let out = out_path(common, &cfg, "episodes.artg");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dataset::save(&out, &episodes).map_err(|e| match e {
        tubestream::Error::Io(source) => CliError::Io { path: out.clone(), source },
        other => other.into(),
    })?;
    info!("wrote {n} episodes to {}", out.display());
    Ok(())
}

fn train(common: &Common, data: Option<PathBuf>, steps: Option<usize>, resume: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let episodes = load_data(&cfg, data, cfg.seed, cfg.train.episodes)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(&resolve(&cfg, &p))?;
            Trainer::resume(&ck, cfg.train.clone(), cfg.loss.clone(), episodes.len(), cfg.seed)?
        }
        None => Trainer::new(Model::new(cfg.model.clone())?, cfg.train.clone(), cfg.loss.clone(), episodes.len(), cfg.seed)?,
    };
    let dir = out_path(common, &cfg, "run");
    create_dir(&dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let ck_path = dir.join("model.ckpt");
    let log_path = dir.join("train_log.csv");
    let mut log = format!("{}\n", StepLog::HEADER);
    let every = cfg.train.checkpoint_every;
    for i in 0..cfg.train.steps {
        let row = trainer.train_step(&episodes)?;
        log.push_str(&row.csv());
        log.push('\n');
        if (i + 1) % 50 == 0 || i + 1 == cfg.train.steps {
            info!("step {} loss {:.4}", row.step, row.loss);
        }
        if every > 0 && (i + 1) % every == 0 {
            trainer.checkpoint().save(&ck_path)?;
            write_file(&log_path, log.as_bytes())?;
        }
    }
    trainer.checkpoint().save(&ck_path)?;
    write_file(&log_path, log.as_bytes())?;
    info!("wrote {} and {}", ck_path.display(), log_path.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, oracle: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let episodes = load_data(&cfg, data, eval_seed(&cfg), cfg.eval.episodes)?;
    let model;
    let (grounder, label): (&dyn Grounder, &str) = if oracle {
        (&OracleGrounder, "oracle")
    } else {
        model = load_checkpoint(&cfg, checkpoint)?.to_model()?;
        (&model, "model")
    };
    let report = evaluate(&episodes, grounder)?;
    print!("{}", report.table(label));
    if let Some(out) = common.out.clone().or_else(|| cfg.paths.out.clone()) {
        write_file(&out, report.to_json().as_bytes())?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

fn ground(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, index: usize, frames: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let episodes = load_data(&cfg, data, eval_seed(&cfg), index + 1)?;
    let ep = episodes
        .get(index)
        .ok_or(tubestream::Error::OutOfRange { index, len: episodes.len() })?;
    let n = frames.unwrap_or(ep.len()).min(ep.len());
    let model = load_checkpoint(&cfg, checkpoint)?.to_model()?;
    // Grounding needs only the query and the frames, never the ground truth.
    let (tokens, mask) = encode_query_tokens(ep, model.config.text_len)?;
    let grids: Vec<&[f64]> = ep.frames[..n].iter().map(|f| f.grid.as_slice()).collect();
    let pred = tubestream::ground(&model, &grids, tokens, mask)?;
    let mut buf = Vec::new();
    write_tube_jsonl(&pred, &mut buf)?;
    match common.out.clone().or_else(|| cfg.paths.out.clone()) {
        Some(out) => write_file(&out, &buf)?,
        None => io::stdout().write_all(&buf).map_err(io_err(Path::new("<stdout>")))?,
    }
    Ok(())
}

fn run_ablation(common: &Common, variants: Option<Vec<String>>, seeds: Option<Vec<u64>>, no_sweep: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let variants = variants.unwrap_or_else(|| cfg.ablate.variants.clone());
    let seeds = match (seeds, common.seed) {
        (Some(s), _) => s,
        (None, Some(s)) => vec![s],
        (None, None) => cfg.ablate.seeds.clone(),
    };
    if seeds.is_empty() || variants.is_empty() {
        return Err(CliError::Config("ablation needs at least one variant and one seed".into()));
    }
    let dir = out_path(common, &cfg, "ablation");
    create_dir(&dir)?;
    let progress = |r: &AblationRow| {
        info!("{} seed {}: m_tIoU {:.3} m_vIoU {:.3}", r.variant, r.seed, r.report.m_tiou, r.report.m_viou);
    };
    let result = ablate(&cfg, &variants, &seeds, progress)?;
    let table = result.table();
    print!("{table}");
    write_file(&dir.join("ablation.txt"), table.as_bytes())?;
    write_file(&dir.join("ablation.json"), to_json(&result).as_bytes())?;

    if !no_sweep && !cfg.ablate.n_s_values.is_empty() {
        let sweep: Vec<String> = cfg.ablate.n_s_values.iter().map(|n| format!("ns-{n}")).collect();
        let result = ablate(&cfg, &sweep, &seeds, progress)?;
        let table = result.table();
        println!("\nN_s sweep\n{table}");
        write_file(&dir.join("ns_sweep.txt"), table.as_bytes())?;
        write_file(&dir.join("ns_sweep.json"), to_json(&result).as_bytes())?;
    }
    Ok(())
}

fn to_json(result: &Ablation) -> String {
    serde_json::to_string_pretty(result).expect("report serialises")
}
