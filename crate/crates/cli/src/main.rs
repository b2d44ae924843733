use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use maco::config::{RunConfig, SPLITS};
use maco::datagen::{load_split, write_split, ObjectClass, PairedSample};
use maco::encoders::{MacoModel, Vocabulary};
use maco::evaluate::{grounding_eval, probe_eval, zero_shot_eval};
use maco::gradsuite::{run_suite, GRAD_STEP, GRAD_TOLERANCE};
use maco::inference::{export_weight_map, grounding_map, grounding_metrics, write_csv, write_matrix_csv, BoxAnnotation, ClassAuc};
use maco::pgm::{read_pgm, write_pgm16};
use maco::train::{pretrain, Trainer, CHECKPOINT_FILE};
use maco::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "maco", version, about = "Masked contrastive image-report pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArg {
    /// Defaults to the checkpoint inside the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the train, val and test splits under `data.dir`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrains, checkpointing and logging after every epoch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Grounds a phrase in one image, or every object phrase of the test split.
    Ground {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// PGM image; requires `--phrase`.
        #[arg(long, requires = "phrase")]
        image: Option<PathBuf>,
        #[arg(long)]
        phrase: Option<String>,
        /// JSON array of boxes to score the map against.
        #[arg(long, requires = "image")]
        boxes: Option<PathBuf>,
        /// Overrides `grounding.tau_w`.
        #[arg(long)]
        tau_w: Option<f64>,
    },
    /// Per-class zero-shot AUC on the test split.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Linear probe on frozen features, trained on train and scored on test.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Overrides `probe.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Writes the importance head's softmax map; a fresh model without `--checkpoint`.
    DumpWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tau_w: Option<f64>,
    },
    /// Finite-difference checks of every registered op and the full objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

/// A failed check that is neither invalid input nor a numerical abort.
const EXIT_CHECK_FAILED: u8 = 1;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::NonFiniteGradient(_) => 3,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
}

fn load_model(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<(RunConfig, MacoModel)> {
    let t = checkpoint::load(&checkpoint_path(cfg, explicit))?;
    let mut stored = t.config;
    stored.data = cfg.data.clone();
    stored.out_dir = cfg.out_dir.clone();
    stored.grounding = cfg.grounding;
    stored.probe = cfg.probe;
    Ok((stored, t.model))
}

fn split(cfg: &RunConfig, name: &str) -> Result<Vec<PairedSample>> {
    let path = cfg.manifest_path(name);
    if !path.exists() {
        return Err(Error::State(format!(
            "{} not found; run `maco gen-data` first",
            path.display()
        )));
    }
    load_split(&path)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.data.dir)?;
    for name in SPLITS {
        let samples = cfg.generate_split(name)?;
        let manifest = write_split(&cfg.data.dir, name, &samples)?;
        let mut counts = [0usize; 4];
        let mut objects = 0;
        for s in &samples {
            objects += s.objects.len();
            for o in &s.objects {
                counts[o.class.index()] += 1;
            }
        }
        let per_class: Vec<String> = ObjectClass::ALL
            .iter()
            .map(|c| format!("{}={}", c.name(), counts[c.index()]))
            .collect();
        println!(
            "{name}: {} samples, {objects} objects ({}) -> {}",
            samples.len(),
            per_class.join(" "),
            manifest.display()
        );
    }
    Ok(())
}

fn run_pretrain(cfg: RunConfig, resume: bool) -> Result<()> {
    let data = split(&cfg, "train")?;
    create_dir(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ckpt.exists() {
        let t = checkpoint::load(&ckpt)?;
        println!("resuming at epoch {} step {}", t.epoch, t.step);
        t
    } else {
        Trainer::new(cfg.clone())?
    };
    trainer.config.save(&cfg.out_dir.join("config.json"))?;
    let start = std::time::Instant::now();
    let rows = pretrain(&mut trainer, &data, &cfg.out_dir)?;
    if let Some(last) = rows.last() {
        println!(
            "epoch {} step {}: L_total {:.4} (L_pret {:.4}, L_contra {:.4}), tau {:.4}, {:.1}s",
            last.epoch,
            last.step,
            last.l_total,
            last.l_pret,
            last.l_contra,
            last.tau,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn write_map(out: &Path, stem: &str, m: &maco::numerics::Tensor) -> Result<()> {
    let (h, w) = m.as_matrix_dims();
    write_pgm16(&out.join(format!("{stem}.pgm")), h, w, m.data())?;
    write_matrix_csv(&out.join(format!("{stem}.csv")), m)
}

#[derive(Serialize)]
struct AucRow<'a> {
    class: &'a str,
    auc: f64,
}

fn write_auc(path: &Path, auc: &ClassAuc) -> Result<()> {
    let mut rows: Vec<AucRow> = auc.per_class.iter().map(|(c, a)| AucRow { class: c, auc: *a }).collect();
    rows.push(AucRow {
        class: "macro",
        auc: auc.macro_auc,
    });
    for r in &rows {
        println!("{:>8}  {:.4}", r.class, r.auc);
    }
    write_csv(path, &rows)
}

fn ground(
    mut cfg: RunConfig,
    ckpt: &Option<PathBuf>,
    image: Option<PathBuf>,
    phrase: Option<String>,
    boxes: Option<PathBuf>,
    tau_w: Option<f64>,
) -> Result<()> {
    if let Some(t) = tau_w {
        cfg.grounding.tau_w = t;
    }
    cfg.grounding.validate()?;
    let (cfg, model) = load_model(&cfg, ckpt)?;
    create_dir(&cfg.out_dir)?;
    match (image, phrase) {
        (Some(path), Some(phrase)) => {
            let raw = read_pgm(&path)?;
            let img = maco::datagen::normalize_image(&raw, &cfg.augment);
            let map = grounding_map(&model, &img, &phrase, &cfg.grounding)?;
            write_map(&cfg.out_dir, "grounding", &map.scores)?;
            println!("wrote {}", cfg.out_dir.join("grounding.pgm").display());
            if let Some(b) = boxes {
                let text = std::fs::read_to_string(&b).map_err(|source| Error::Io { path: b.clone(), source })?;
                let boxes: Vec<BoxAnnotation> =
                    serde_json::from_str(&text).map_err(|source| Error::Json { path: b.clone(), source })?;
                let row = grounding_metrics(&map, &boxes)?;
                println!("cnr {:.4} miou {:.4} pg {}", row.cnr, row.miou, row.pg);
                write_csv(&cfg.out_dir.join("grounding_metrics.csv"), &[row])?;
            }
        }
        _ => {
            let test = split(&cfg, "test")?;
            let (summary, rows) = grounding_eval(&model, &test, &cfg.augment, &cfg.grounding)?;
            write_csv(&cfg.out_dir.join("grounding_metrics.csv"), &rows)?;
            write_csv(&cfg.out_dir.join("grounding_summary.csv"), &[&summary])?;
            println!(
                "{} phrases: cnr {:.4} miou {:.4} pg {:.4} (random patch {:.4})",
                summary.cases, summary.cnr, summary.miou, summary.pointing_game, summary.random_baseline
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { common } => gen_data(&load_config(&common)?)?,
        Command::Pretrain { common, resume } => run_pretrain(load_config(&common)?, resume)?,
        Command::Ground {
            common,
            ckpt,
            image,
            phrase,
            boxes,
            tau_w,
        } => ground(load_config(&common)?, &ckpt.checkpoint, image, phrase, boxes, tau_w)?,
        Command::Zeroshot { common, ckpt } => {
            let cfg = load_config(&common)?;
            let (cfg, model) = load_model(&cfg, &ckpt.checkpoint)?;
            let auc = zero_shot_eval(&model, &split(&cfg, "test")?, &cfg.augment)?;
            create_dir(&cfg.out_dir)?;
            write_auc(&cfg.out_dir.join("zeroshot_auc.csv"), &auc)?;
        }
        Command::Probe { common, ckpt, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.probe.epochs = e;
            }
            let (cfg, model) = load_model(&cfg, &ckpt.checkpoint)?;
            let auc = probe_eval(&model, &split(&cfg, "train")?, &split(&cfg, "test")?, &cfg.augment, &cfg.probe)?;
            create_dir(&cfg.out_dir)?;
            write_auc(&cfg.out_dir.join("probe_auc.csv"), &auc)?;
        }
        Command::DumpWeights {
            common,
            checkpoint,
            tau_w,
        } => {
            let cfg = load_config(&common)?;
            let (cfg, model) = match &checkpoint {
                Some(_) => load_model(&cfg, &checkpoint)?,
                None => (cfg.clone(), MacoModel::new(cfg.model, Vocabulary::synthetic(), cfg.seed)?),
            };
            let map = export_weight_map(model.importance_weights(), tau_w.unwrap_or(cfg.grounding.tau_w))?;
            create_dir(&cfg.out_dir)?;
            write_map(&cfg.out_dir, "weights", &map.values)?;
            println!("wrote {}×{} weight map to {}", map.side, map.side, cfg.out_dir.join("weights.pgm").display());
        }
        Command::GradCheck { common } => {
            let cfg = load_config(&common)?;
            let cases = run_suite(GRAD_STEP)?;
            let mut failed = 0;
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                failed += !c.passed() as usize;
                println!("{status:>4}  {:<34} {:>6} coords  max rel err {:.2e}", c.name, c.coordinates, c.max_rel_err);
            }
            create_dir(&cfg.out_dir)?;
            write_csv(&cfg.out_dir.join("grad_check.csv"), &cases)?;
            if failed > 0 {
                eprintln!("{failed} of {} checks exceed {GRAD_TOLERANCE:e}", cases.len());
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
