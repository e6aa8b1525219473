//! Command dispatch for the `detailfusion` binary.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage and
//! configuration errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use detailfusion::data::{generate_cir_finetune_set, generate_edit_pretrain_set, DatasetKind, GenerationConfig, TripletDataset};
use detailfusion::encoders::BranchKind;
use detailfusion::model::{Checkpoint, ModelConfig};
use detailfusion::retrieval::{build_dataset_index, retrieve, EvalMode, QueryFeature, QueryFeatures};
use detailfusion::training::{run_spn_phase, run_stage1, run_stage2, run_stage3, StageOutcome, TrainConfig};
use detailfusion::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DETAILFUSION_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "detailfusion", version, about = "Dual-branch composed image retrieval at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset.
    GenerateData {
        #[arg(long, value_parser = ["edit_pretrain", "cir_finetune"])]
        kind: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Generation parameters (TOML); defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: pretrain the detail branch.
    Pretrain(StageArgs),
    /// Stage 2: fine-tune both branches.
    Finetune(StageArgs),
    /// Stage 3: train the compositor on frozen branches.
    TrainCompositor(StageArgs),
    /// Full-gallery fine-tuning after stage 2 or 3.
    Spn(StageArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "compositor", value_parser = ["single", "detail", "global", "score_sum", "compositor"])]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the gallery for one query triplet.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        query_id: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "single", value_parser = ["single", "score_sum", "compositor"])]
        mode: String,
        /// Branch used by `single` mode.
        #[arg(long, default_value = "di", value_parser = ["di", "gm"])]
        branch: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Input checkpoint; stage 1 starts from a fresh model when absent.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's dataset path.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    pub dataset_digests: BTreeMap<String, String>,
    pub checkpoint_digests: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            seed: None,
            config_digest: None,
            dataset_digests: BTreeMap::new(),
            checkpoint_digests: BTreeMap::new(),
            started_unix: now(),
            finished_unix: 0.0,
            artifacts: Vec::new(),
        }
    }

    fn dataset(&mut self, path: &Path, ds: &TripletDataset) -> Result<()> {
        self.dataset_digests.insert(path.display().to_string(), ds.digest()?);
        Ok(())
    }

    fn checkpoint(&mut self, path: &Path, ck: &Checkpoint) {
        self.checkpoint_digests.insert(path.display().to_string(), ck.digest());
    }

    /// Writes `run-<command>.json` into `dir`.
    fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = now();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("run-{}.json", self.command));
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let shown: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &shown) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn run(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::GenerateData {
            kind,
            seed,
            count,
            config,
            out,
        } => {
            let kind: DatasetKind = kind.parse()?;
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    toml::from_str::<GenerationConfig>(&text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?
                }
                None => GenerationConfig::default(),
            };
            let out = out.unwrap_or_else(|| out_root().join(format!("data-{}-{seed}", kind.as_str())));
            let ds = match kind {
                DatasetKind::EditPretrain => generate_edit_pretrain_set(seed, count, &cfg)?,
                DatasetKind::CirFinetune => generate_cir_finetune_set(seed, count, &cfg)?,
            };
            ds.save(&out)?;
            let mut m = RunManifest::new("generate-data", args);
            m.seed = Some(seed);
            m.dataset(&out, &ds)?;
            m.artifacts.push(out.display().to_string());
            let path = m.finish(&out)?;
            println!("wrote {} ({} triplets, {} images); manifest {}", out.display(), ds.triplets().len(), ds.gallery_len(), path.display());
            Ok(())
        }
        Command::Pretrain(a) => stage_command("pretrain", 1, a, args),
        Command::Finetune(a) => stage_command("finetune", 2, a, args),
        Command::TrainCompositor(a) => stage_command("train-compositor", 3, a, args),
        Command::Spn(a) => stage_command("spn", 0, a, args),
        Command::Evaluate {
            checkpoint,
            dataset,
            mode,
            out,
        } => {
            let mode: EvalMode = mode.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = TripletDataset::load(&dataset)?;
            let mut report = detailfusion::retrieval::evaluate(&ck.model, &ds, mode)?;
            report.metadata.insert("checkpoint_digest".into(), ck.digest());
            report.metadata.insert("dataset_digest".into(), ds.digest()?);
            report.metadata.insert("stage".into(), ck.stage.to_string());
            let out = out.unwrap_or_else(|| out_root().join(format!("report-{}.json", mode_name(mode))));
            let dir = parent_dir(&out);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(&out, report.to_json())?;
            let mut m = RunManifest::new("evaluate", args);
            m.seed = Some(ck.init_seed);
            m.dataset(&dataset, &ds)?;
            m.checkpoint(&checkpoint, &ck);
            m.artifacts.push(out.display().to_string());
            m.finish(&dir)?;
            println!("{}", report.summary());
            Ok(())
        }
        Command::Retrieve {
            checkpoint,
            dataset,
            query_id,
            k,
            mode,
            branch,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = TripletDataset::load(&dataset)?;
            if query_id >= ds.triplets().len() {
                return Err(Error::Usage(format!(
                    "query id {query_id} out of range for {} triplets",
                    ds.triplets().len()
                )));
            }
            let index = build_dataset_index(&ck.model, &ds)?;
            let q = QueryFeatures::encode(&ck.model, &ds, &[query_id])?;
            let fused;
            let query = match mode.as_str() {
                "single" => match branch.parse::<BranchKind>()? {
                    BranchKind::Detail => QueryFeature::Single(q.detail[0].cls()),
                    BranchKind::Global => QueryFeature::Single(q.global[0].cls()),
                },
                "score_sum" => QueryFeature::ScoreSum(q.detail[0].cls(), q.global[0].cls()),
                _ => {
                    fused = ck.model.compositor().compose(ck.model.store(), &q.global[0], &q.detail[0])?;
                    QueryFeature::Single(&fused.vector)
                }
            };
            let ranked = retrieve(query_id, query, &index, k)?;
            let mut text = serde_json::to_string_pretty(&ranked)?;
            text.push('\n');
            print!("{text}");
            if let Some(out) = out {
                let dir = parent_dir(&out);
                std::fs::create_dir_all(&dir)?;
                std::fs::write(&out, &text)?;
                let mut m = RunManifest::new("retrieve", args);
                m.seed = Some(ck.init_seed);
                m.dataset(&dataset, &ds)?;
                m.checkpoint(&checkpoint, &ck);
                m.artifacts.push(out.display().to_string());
                m.finish(&dir)?;
            }
            Ok(())
        }
    }
}

fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Detail => "detail",
        EvalMode::Global => "global",
        EvalMode::ScoreSum => "score_sum",
        EvalMode::Compositor => "compositor",
    }
}

/// Runs one training stage; `stage = 0` marks the full-gallery phase.
fn stage_command(name: &str, stage: u8, a: StageArgs, args: &[String]) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if stage == 0 {
        if !cfg.spn {
            return Err(Error::Config("the spn command needs `spn = true` in its config".into()));
        }
    } else if cfg.stage != stage || cfg.spn {
        return Err(Error::Config(format!(
            "`{name}` runs stage {stage} without spn; config has stage = {}, spn = {}",
            cfg.stage, cfg.spn
        )));
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.display().to_string());
    }
    let data_path = PathBuf::from(
        cfg.dataset
            .clone()
            .ok_or_else(|| Error::Config("no dataset given (config `dataset` or --dataset)".into()))?,
    );
    let ds = TripletDataset::load(&data_path)?;
    let input = a.input.or_else(|| cfg.checkpoint_in.clone().map(PathBuf::from));
    let parent = input.as_deref().map(Checkpoint::load).transpose()?;
    let outcome: StageOutcome = match (stage, &parent) {
        (1, p) => {
            let fresh;
            let init = match p {
                Some(c) => c,
                None => {
                    let model = ModelConfig {
                        vision_trainable: cfg.vision_trainable,
                        ..Default::default()
                    };
                    fresh = Checkpoint::initial(model, cfg.compositor(), cfg.seed)?;
                    &fresh
                }
            };
            run_stage1(&cfg, &ds, Some(init))?
        }
        (_, None) => return Err(Error::Usage(format!("`{name}` needs an input checkpoint (--in)"))),
        (2, Some(c)) => run_stage2(&cfg, &ds, c)?,
        (3, Some(c)) => run_stage3(&cfg, &ds, c)?,
        (_, Some(c)) => run_spn_phase(&cfg, &ds, c)?,
    };
    let default_name = match stage {
        0 => format!("spn-stage{}.ckpt", cfg.stage),
        s => format!("stage{s}.ckpt"),
    };
    let out = a
        .out
        .or_else(|| cfg.checkpoint_out.clone().map(PathBuf::from))
        .unwrap_or_else(|| out_root().join(default_name));
    outcome.checkpoint.save(&out)?;
    let trace = cfg
        .loss_trace
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| out.with_extension("loss.csv"));
    outcome.trace.write_csv(&trace)?;

    let mut m = RunManifest::new(name, args);
    m.seed = Some(cfg.seed);
    m.config_digest = Some(cfg.digest());
    m.dataset(&data_path, &ds)?;
    if let (Some(p), Some(c)) = (&input, &parent) {
        m.checkpoint(p, c);
    }
    m.checkpoint(&out, &outcome.checkpoint);
    m.artifacts.push(out.display().to_string());
    m.artifacts.push(trace.display().to_string());
    m.finish(&parent_dir(&out))?;
    let last = outcome.trace.rows.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "{name}: {} steps, final loss {last:.4}; wrote {}",
        outcome.trace.rows.len(),
        out.display()
    );
    if let Some(best) = outcome.best_epoch {
        println!("best validation epoch {best} (recall@1 {:.4})", outcome.validation[best]);
    }
    Ok(())
}
