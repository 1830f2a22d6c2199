//! `safe-forge`: runs the curation, conditioning, fine-tuning, generation and
//! evaluation stages over a work directory.
//!
//! Settings come from, in increasing precedence: built-in defaults, the
//! `--config` file, one flag per config key (`--curate-iqa-threshold`), the
//! stage-specific short flags (`curate --iqa-threshold`) and `--set key=value`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Arg, ArgAction, ArgMatches, Command};
use log::info;

use safe_core::config::{PipelineConfig, KEYS};
use safe_core::fixture::write_pipeline_fixture;
use safe_core::pipeline::{Pipeline, Stage};

/// How a stage-specific flag feeds the config.
enum Target {
    Key(&'static str),
    /// Presence sets the key to `true`.
    Switch(&'static str),
    /// `subjects --mode subjects|rewrite`.
    SubjectsMode,
}

struct StageFlag {
    name: &'static str,
    target: Target,
    help: &'static str,
}

const fn key(name: &'static str, k: &'static str, help: &'static str) -> StageFlag {
    StageFlag {
        name,
        target: Target::Key(k),
        help,
    }
}

fn stage_flags(stage: Stage) -> Vec<StageFlag> {
    match stage {
        Stage::Ingest => vec![
            key(
                "manifest",
                "paths.corpus",
                "caption manifest (JSONL) to ingest",
            ),
            key(
                "image-root",
                "paths.image_root",
                "directory image paths resolve against",
            ),
            key(
                "gazetteer",
                "paths.ner_gazetteer",
                "gazetteer for the entity recognizer",
            ),
            key(
                "min-words",
                "ingest.min_words",
                "minimum whitespace-separated words",
            ),
            key(
                "exclude-entities",
                "ingest.excluded_types",
                "comma-separated excluded entity types",
            ),
            key("split", "curate.split", "train,val,test ratios"),
            key("seed", "curate.seed", "split seed"),
        ],
        Stage::Curate => vec![
            key("target", "curate.resolution", "square crop side in pixels"),
            key(
                "iqa-threshold",
                "curate.iqa_threshold",
                "minimum quality score",
            ),
            key(
                "face-confidence",
                "curate.face_confidence",
                "face detector confidence threshold",
            ),
        ],
        Stage::Ground => vec![
            key(
                "kb-snapshot",
                "paths.kb_snapshot",
                "knowledge-base snapshot directory",
            ),
            key(
                "min-similarity",
                "ground.min_similarity",
                "face verification threshold",
            ),
            key(
                "min-samples",
                "ground.min_samples",
                "minimum verified samples per entity",
            ),
        ],
        Stage::Subjects => vec![
            key("llm-id", "models.llm", "language model id"),
            key("template", "llm.family", "structured-json or list-style"),
            StageFlag {
                name: "mode",
                target: Target::SubjectsMode,
                help: "subjects or rewrite",
            },
            key(
                "recorded",
                "paths.llm_recorded",
                "recorded responses (JSONL) for offline runs",
            ),
            key("endpoint", "llm.endpoint", "chat-completions endpoint"),
        ],
        Stage::Condition => vec![
            key("scale-exp", "condition.scale_exp", "subject scale exponent"),
            StageFlag {
                name: "renormalize",
                target: Target::Switch("condition.renormalize"),
                help: "restore row norms",
            },
        ],
        Stage::Train => vec![
            key("lr", "train.learning_rate", "adapter learning rate"),
            key("epochs", "train.epochs", "passes over the train split"),
            key(
                "max-steps",
                "train.max_steps",
                "stop after this many optimizer steps",
            ),
            key("timesteps", "train.timesteps", "diffusion timesteps"),
            key(
                "loss-window",
                "train.loss_window",
                "LO:HI timestep window for the reward loss",
            ),
            key("rank", "train.rank", "adapter rank"),
            key(
                "scale-exp",
                "train.scale_exp",
                "subject scale exponent during training",
            ),
            key("seed", "train.seed", "training seed"),
        ],
        Stage::Generate => vec![
            key(
                "mode",
                "generate.mode",
                "base, conditioned or rewrite-baseline",
            ),
            key(
                "guidance",
                "generate.guidance",
                "classifier-free guidance scale",
            ),
            key("steps", "generate.steps", "sampler steps"),
            key("seeds", "generate.seeds", "comma-separated sampler seeds"),
            key(
                "checkpoint",
                "generate.checkpoint",
                "adapter checkpoint (default: the trained one)",
            ),
            key("scale-exp", "generate.scale_exp", "subject scale exponent"),
        ],
        Stage::Evaluate => vec![
            key(
                "face-crop",
                "eval.face_crop",
                "face crop side for identity scoring",
            ),
            key("label", "eval.label", "report label"),
        ],
    }
}

fn key_flag(k: &str) -> String {
    k.replace(['.', '_'], "-")
}

fn value_flags(cmd: Command, flags: &[StageFlag]) -> Command {
    flags.iter().fold(cmd, |cmd, f| {
        let arg = Arg::new(format!("stage:{}", f.name))
            .long(f.name)
            .help(f.help);
        cmd.arg(match f.target {
            Target::Switch(_) => arg.action(ArgAction::SetTrue),
            _ => arg.value_name("VALUE"),
        })
    })
}

fn cli() -> Command {
    let mut cmd = Command::new("safe-forge")
        .about("Subject-aware conditioning and reward fine-tuning pipeline")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .global(true)
                .value_name("FILE")
                .help("config file"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .global(true)
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override one config key (repeatable, applied last)"),
        )
        .arg(
            Arg::new("verbose")
                .long("verbose")
                .short('v')
                .global(true)
                .action(ArgAction::Count)
                .help("more log output (-v info, -vv debug)"),
        );
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(format!("key:{k}"))
                .long(key_flag(k))
                .global(true)
                .value_name("VALUE")
                .hide(true)
                .help(format!("sets {k}")),
        );
    }
    for stage in Stage::ALL {
        let sub = match stage {
            Stage::Train => Command::new("train-dfe").alias("train"),
            _ => Command::new(stage.name()),
        };
        let sub = sub.about(format!("run the {} stage", stage.name()));
        cmd = cmd.subcommand(value_flags(sub, &stage_flags(stage)));
    }
    cmd.subcommand(
        Command::new("run")
            .about("run several stages in order")
            .arg(
                Arg::new("stages")
                    .long("stages")
                    .value_name("LIST")
                    .value_delimiter(',')
                    .help("comma-separated stages (default: all)"),
            ),
    )
    .subcommand(Command::new("status").about("show which stages are current"))
    .subcommand(Command::new("config").about("print the effective config"))
    .subcommand(
        Command::new("fixture")
            .about("write the twenty-record demo work set")
            .arg(
                Arg::new("dir")
                    .long("dir")
                    .required(true)
                    .value_name("DIR")
                    .value_parser(clap::value_parser!(PathBuf)),
            ),
    )
}

/// Config from file and flags; errors list every rejected setting.
fn resolve_config(
    m: &ArgMatches,
    stage: Option<Stage>,
) -> Result<PipelineConfig, safe_core::Error> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => PipelineConfig::load(p.as_ref())?,
        None => PipelineConfig::default(),
    };
    let mut errs = Vec::new();
    let apply = |cfg: &mut PipelineConfig, errs: &mut Vec<String>, k: &str, v: &str| {
        if let Err(e) = cfg.set(k, v) {
            errs.push(format!("{k}: {e}"));
        }
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(&format!("key:{k}")) {
            apply(&mut cfg, &mut errs, k, v);
        }
    }
    for f in stage.map(stage_flags).unwrap_or_default() {
        let id = format!("stage:{}", f.name);
        match f.target {
            Target::Switch(k) if m.get_flag(&id) => apply(&mut cfg, &mut errs, k, "true"),
            Target::Switch(_) => {}
            Target::Key(k) => {
                if let Some(v) = m.get_one::<String>(&id) {
                    apply(&mut cfg, &mut errs, k, v);
                }
            }
            Target::SubjectsMode => match m.get_one::<String>(&id).map(String::as_str) {
                None => {}
                Some("subjects") => apply(&mut cfg, &mut errs, "llm.rewrite", "false"),
                Some("rewrite") => apply(&mut cfg, &mut errs, "llm.rewrite", "true"),
                Some(other) => errs.push(format!(
                    "--mode: expected subjects or rewrite, got {other:?}"
                )),
            },
        }
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        match kv.split_once('=') {
            Some((k, v)) => apply(&mut cfg, &mut errs, k.trim(), v.trim()),
            None => errs.push(format!("--set {kv:?}: expected KEY=VALUE")),
        }
    }
    if !errs.is_empty() {
        return Err(safe_core::Error::Config(errs));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_reports(reports: &[safe_core::pipeline::StageReport]) -> anyhow::Result<()> {
    for r in reports {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn execute(m: &ArgMatches) -> anyhow::Result<()> {
    let (name, sub) = m.subcommand().context("no command given")?;
    match name {
        "fixture" => {
            let dir = sub.get_one::<PathBuf>("dir").unwrap();
            write_pipeline_fixture(dir)?;
            println!(
                "{}",
                std::path::absolute(dir.join("fixture.conf"))?.display()
            );
        }
        "config" => print!("{}", resolve_config(sub, None)?.emit()),
        "status" => {
            let pipeline = Pipeline::open(resolve_config(sub, None)?)?;
            for stage in Stage::ALL {
                let state = match pipeline.ledger.get(stage) {
                    None => "not-run",
                    Some(_) if pipeline.is_current(stage)? => "current",
                    Some(_) => "stale",
                };
                println!("{:<10} {state}", stage.name());
            }
        }
        "run" => {
            let stages: Vec<Stage> = match sub.get_many::<String>("stages") {
                Some(names) => names.map(|s| s.trim().parse()).collect::<Result<_, _>>()?,
                None => Stage::ALL.to_vec(),
            };
            let mut pipeline = Pipeline::open(resolve_config(sub, None)?)?;
            info!(
                "running {} stages in {}",
                stages.len(),
                pipeline.workspace.root.display()
            );
            print_reports(&pipeline.run(&stages)?)?;
        }
        stage => {
            let stage: Stage = stage.parse()?;
            let mut pipeline = Pipeline::open(resolve_config(sub, Some(stage))?)?;
            print_reports(&[pipeline.run_stage(stage)?])?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let m = cli().get_matches();
    let level = match m.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .downcast_ref::<safe_core::Error>()
                .map_or("error", |e| e.code());
            eprintln!("error [{code}]: {e:#}");
            ExitCode::from(if code == "config_invalid" { 2 } else { 1 })
        }
    }
}
