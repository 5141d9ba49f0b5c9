//! The `ovformer` command line: one pipeline stage per subcommand.
//!
//! Every subcommand reads an optional `--config` file of `key = value` lines and
//! then applies `--<key> <value>` flags on top. On success it prints a single
//! summary line of `key=value` fields; failures go to stderr with exit code 1
//! (usage or configuration), 2 (data, format or i/o) or 3 (numeric).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgGroup, ArgMatches, Command};
use log::{info, warn};

use ovformer::config::{preset_help, Settings};
use ovformer::datasets::{load_dataset, synth_generate, write_dataset};
use ovformer::evaluation::{evaluate, report, EvalReport};
use ovformer::inference::{load_predictions, predict_all, save_predictions};
use ovformer::model::{Checkpoint, Model, StageTag};
use ovformer::textbank::{
    build_table_with, load_descriptions, render_prompt, save_descriptions, select_split, ClassEmbeddingTable,
    SplitSelector, Vocabulary,
};
use ovformer::training::{finetune_stage2, train_stage1, ActiveVocab, Stage, TrainReport};
use ovformer::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Shape { .. } | Error::Data(_) | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("OVFORMER_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id).long(id).value_name("PATH").value_parser(clap::value_parser!(PathBuf)).help(help)
}

fn with_keys(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(path_arg("config", "key = value file applied before flags"))
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .value_parser(clap::value_parser!(PathBuf))
                .default_value(".")
                .help("output directory"),
        )
        .next_help_heading("Config keys")
        .arg(Arg::new("preset").long("preset").value_name("NAME").help(preset_help()));
    for k in Settings::default().keys() {
        let owners: Vec<String> = k.sections.iter().map(|s| s.to_string()).collect();
        cmd = cmd.arg(
            Arg::new(k.key)
                .long(k.key)
                .value_name("V")
                .help(format!("[{}] default: {}", owners.join(","), k.default)),
        );
    }
    cmd
}

pub fn build_cli() -> Command {
    let sub = |name: &'static str, about: &'static str| with_keys(Command::new(name).about(about));
    Command::new("ovformer")
        .about("Open-vocabulary temporal action localization on feature streams")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommand(
            sub("gen", "generate a synthetic dataset with planted actions")
                .arg(path_arg("vocab", "vocabulary file (id, split, name per line)").required(true))
                .arg(path_arg("table", "class embedding table the generator plants").required(true)),
        )
        .subcommand(
            sub("embed", "build a class embedding table from description embeddings")
                .arg(path_arg("vocab", "vocabulary file").required(true))
                .arg(
                    Arg::new("synthetic")
                        .long("synthetic")
                        .action(ArgAction::SetTrue)
                        .help("synthesize seeded description embeddings"),
                )
                .arg(path_arg("descriptions", "description embedding file"))
                .arg(path_arg("sidecar", "description text sidecar for --descriptions"))
                .group(ArgGroup::new("source").args(["synthetic", "descriptions"]).required(true)),
        )
        .subcommand(
            sub("prompt", "print the description prompt for a class name")
                .arg(Arg::new("class").long("class").value_name("NAME").required(true)),
        )
        .subcommand(
            sub("train", "stage one: train on the large-vocabulary dataset")
                .arg(path_arg("data", "dataset manifest").required(true))
                .arg(path_arg("table", "class embedding table").required(true)),
        )
        .subcommand(
            sub("finetune", "stage two: finetune a checkpoint on base classes")
                .arg(path_arg("init", "checkpoint to start from").required(true))
                .arg(path_arg("data", "dataset manifest").required(true))
                .arg(path_arg("table", "class embedding table").required(true)),
        )
        .subcommand(
            sub("predict", "detect actions and write predictions.json")
                .arg(path_arg("checkpoint", "trained checkpoint").required(true))
                .arg(path_arg("data", "dataset manifest").required(true))
                .arg(path_arg("table", "class embedding table covering the dataset vocabulary").required(true))
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_name("base|novel|all")
                        .default_value("all")
                        .help("restrict the classes scored at inference"),
                ),
        )
        .subcommand(
            sub("eval", "score predictions and write eval.json and eval_classes.tsv")
                .arg(path_arg("predictions", "predictions.json").required(true))
                .arg(path_arg("data", "dataset manifest with ground truth").required(true)),
        )
        .subcommand(
            sub("report", "render an evaluation report as text")
                .arg(path_arg("eval", "eval.json").required(true)),
        )
}

/// Runs one invocation and returns the process exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    init_logging();
    let argv: Vec<&str> = argv.iter().map(AsRef::as_ref).collect();
    let matches = match build_cli().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(m: &ArgMatches) -> Result<String> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let settings = settings(sub)?;
    let out = sub.get_one::<PathBuf>("out").expect("has default").clone();
    match name {
        "gen" => cmd_gen(sub, &settings, &out),
        "embed" => cmd_embed(sub, &settings, &out),
        "prompt" => render_prompt(sub.get_one::<String>("class").expect("required")),
        "train" => cmd_train(sub, settings, &out),
        "finetune" => cmd_finetune(sub, settings, &out),
        "predict" => cmd_predict(sub, &settings, &out),
        "eval" => cmd_eval(sub, &settings, &out),
        "report" => cmd_report(sub, &out),
        other => Err(Error::Usage(format!("unknown subcommand {other:?}"))),
    }
}

fn settings(m: &ArgMatches) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        s.apply_file(path)?;
    }
    let mut pairs: Vec<(&str, String)> = Vec::new();
    if let Some(p) = m.get_one::<String>("preset") {
        pairs.push(("preset", p.clone()));
    }
    for k in Settings::default().keys() {
        if let Some(v) = m.get_one::<String>(k.key) {
            pairs.push((k.key, v.clone()));
        }
    }
    s.apply(&pairs).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("flag: {msg}")),
        other => other,
    })?;
    Ok(s)
}

fn path<'a>(m: &'a ArgMatches, id: &str) -> &'a Path {
    m.get_one::<PathBuf>(id).expect("required").as_path()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(settings: &Settings, out: &Path, stem: &str) -> Result<()> {
    let p = out.join(format!("{stem}.config"));
    std::fs::write(&p, settings.to_text()).map_err(|e| Error::io(&p, e))
}

fn cmd_gen(m: &ArgMatches, s: &Settings, out: &Path) -> Result<String> {
    s.synth.validate()?;
    let vocab = Vocabulary::load(path(m, "vocab"))?;
    let table = ClassEmbeddingTable::load(path(m, "table"))?;
    let data = synth_generate(&s.synth, &vocab, &table)?;
    let manifest = write_dataset(&data, out)?;
    write_config(s, out, "gen")?;
    Ok(format!(
        "gen videos={} annotations={} manifest={}",
        data.videos.len(),
        data.annotation_count(),
        manifest.display()
    ))
}

fn cmd_embed(m: &ArgMatches, s: &Settings, out: &Path) -> Result<String> {
    s.text.validate()?;
    let vocab = Vocabulary::load(path(m, "vocab"))?;
    ensure_dir(out)?;
    let sets = if m.get_flag("synthetic") {
        let sets = s.text.encoder.describe_all(&vocab);
        save_descriptions(&sets, &out.join("descriptions.ovtb"), Some(&out.join("descriptions.txt")))?;
        sets
    } else {
        let sidecar = m.get_one::<PathBuf>("sidecar").map(PathBuf::as_path);
        load_descriptions(path(m, "descriptions"), sidecar)?
    };
    let table = build_table_with(&vocab, &sets, s.text.aggregate)?;
    let table_path = out.join("table.ovzl");
    table.save(&table_path)?;
    write_config(s, out, "embed")?;
    Ok(format!("embed classes={} dim={} table={}", table.len(), table.dim(), table_path.display()))
}

fn finish_training(report: &TrainReport, ckpt: &Checkpoint, s: &Settings, out: &Path, stem: &str) -> Result<String> {
    let ckpt_path = out.join(format!("{stem}.ovck"));
    ckpt.save(&ckpt_path)?;
    report.write(out, stem)?;
    write_config(s, out, stem)?;
    info!("{stem}: {} epochs in {:.1}s", report.epochs.len(), report.wall_time_secs);
    let last = report.epochs.last().map_or(f64::NAN, |e| e.total);
    Ok(format!(
        "{stem} epochs={} best_epoch={} final_loss={last:.6} checkpoint={}",
        report.epochs.len(),
        report.best_epoch.map_or_else(|| "none".into(), |e| e.to_string()),
        ckpt_path.display()
    ))
}

fn cmd_train(m: &ArgMatches, mut s: Settings, out: &Path) -> Result<String> {
    s.train.stage = Stage::One;
    s.train.active_vocab = ActiveVocab::Super;
    s.model.validate()?;
    s.train.validate()?;
    let data = load_dataset(path(m, "data"))?;
    let table = ClassEmbeddingTable::load(path(m, "table"))?;
    ensure_dir(out)?;
    let (params, report) = train_stage1(&s.model, &data, &table, &s.train)?;
    let ckpt = Checkpoint { cfg: s.model.clone(), params, seed: s.train.seed, stage: StageTag::StageOne };
    finish_training(&report, &ckpt, &s, out, "stage1")
}

fn cmd_finetune(m: &ArgMatches, mut s: Settings, out: &Path) -> Result<String> {
    s.train.stage = Stage::Two;
    s.train.active_vocab = ActiveVocab::Base;
    s.train.validate()?;
    let init = Checkpoint::load(path(m, "init"))?;
    warn_model_keys(&s, &init);
    let data = load_dataset(path(m, "data"))?;
    let table = ClassEmbeddingTable::load(path(m, "table"))?;
    ensure_dir(out)?;
    let (params, report) = finetune_stage2(&init, &data, &table, &s.train)?;
    let ckpt = Checkpoint { cfg: init.cfg.clone(), params, seed: s.train.seed, stage: StageTag::StageTwo };
    finish_training(&report, &ckpt, &s, out, "stage2")
}

fn warn_model_keys(s: &Settings, ckpt: &Checkpoint) {
    for diff in s.model.mismatches(&ckpt.cfg) {
        warn!("model key ignored, checkpoint wins: {diff}");
    }
}

fn cmd_predict(m: &ArgMatches, s: &Settings, out: &Path) -> Result<String> {
    s.infer.validate()?;
    let split: SplitSelector = m.get_one::<String>("split").expect("has default").parse()?;
    let ckpt = Checkpoint::load(path(m, "checkpoint"))?;
    warn_model_keys(s, &ckpt);
    let data = load_dataset(path(m, "data"))?;
    let mut table = ClassEmbeddingTable::load(path(m, "table"))?;
    if split != SplitSelector::All {
        table = select_split(&table, &data.vocab, split)?.0;
    }
    let model = Model::new(ckpt.cfg.clone())?;
    let preds = predict_all(&model, &ckpt.params, &data.videos, &table, &s.infer)?;
    ensure_dir(out)?;
    let p = out.join("predictions.json");
    save_predictions(&preds, &p)?;
    write_config(s, out, "predict")?;
    let n: usize = preds.iter().map(|v| v.detections.len()).sum();
    Ok(format!("predict videos={} detections={n} predictions={}", preds.len(), p.display()))
}

fn cmd_eval(m: &ArgMatches, s: &Settings, out: &Path) -> Result<String> {
    s.eval.validate()?;
    let preds = load_predictions(path(m, "predictions"))?;
    let data = load_dataset(path(m, "data"))?;
    let r = evaluate(&preds, &data, &s.eval)?;
    ensure_dir(out)?;
    report(&r, out)?;
    Ok(format!("eval {} report={}", r.summary_line(), out.join("eval.json").display()))
}

fn fmt_map(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::from("tIoU\tbase\tnovel\tall\n");
    for (t, row) in r.tiou_grid.iter().zip(&r.map_by_threshold) {
        s.push_str(&format!("{t}\t{}\t{}\t{}\n", fmt_map(row[0]), fmt_map(row[1]), fmt_map(row[2])));
    }
    s.push_str(&format!(
        "mean\t{}\t{}\t{}\n\n",
        fmt_map(r.map_base),
        fmt_map(r.map_novel),
        fmt_map(r.map_all)
    ));
    s.push_str("class\tsplit\tgt\tmean AP\n");
    for c in &r.per_class {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", c.name, c.split, c.num_gt, fmt_map(c.mean_ap())));
    }
    s
}

fn cmd_report(m: &ArgMatches, out: &Path) -> Result<String> {
    let r = EvalReport::load(path(m, "eval"))?;
    ensure_dir(out)?;
    let p = out.join("report.txt");
    std::fs::write(&p, render_report(&r)).map_err(|e| Error::io(&p, e))?;
    Ok(format!("report {} classes={} report={}", r.summary_line(), r.per_class.len(), p.display()))
}
