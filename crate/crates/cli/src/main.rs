//! `diffspan` command-line tool: synthetic data, training, evaluation,
//! inference, sampling sweeps and self-checks.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use diffspan::checkpoint::{self, Checkpoint};
use diffspan::config::{RunConfig, KEYS};
use diffspan::data::{generate_corpus, load_feature_dataset, write_splits, GroundingExample};
use diffspan::eval::{evaluate, evaluate_ablation, predict, Selector};
use diffspan::model::Model;
use diffspan::pipeline::{InferConfig, Trainer};
use log::info;

const SEED_ENV: &str = "DIFFSPAN_SEED";

/// Adds `--config` and one flag per config key, except `skip`.
fn with_config(mut cmd: Command, skip: &[&str]) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value file applied before individual flags"),
    );
    for (key, ty, doc) in KEYS {
        if skip.contains(key) {
            continue;
        }
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name(*ty)
                .help(*doc)
                .help_heading("Config keys"),
        );
    }
    cmd
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("DIR")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn cli() -> Command {
    let split = Arg::new("split")
        .long("split")
        .default_value("test")
        .help("split manifest to read: train, val or test");
    Command::new("diffspan")
        .about("Span grounding by iterative denoising of noisy span proposals")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config(
            Command::new("gen-data")
                .about("Write a synthetic corpus as manifests plus f32 feature files")
                .arg(path_arg("out", "output directory").required(true)),
            &[],
        ))
        .subcommand(with_config(
            Command::new("train")
                .about("Train on <data>/train.jsonl; writes <out>/last and <out>/train_log.jsonl")
                .arg(path_arg("out", "output directory").required(true)),
            &[],
        ))
        .subcommand(with_config(
            Command::new("eval")
                .about("Evaluate a checkpoint on a split; prints the report as JSON")
                .arg(path_arg("ckpt", "checkpoint directory").required(true))
                .arg(split.clone())
                .arg(
                    Arg::new("ablation")
                        .long("ablation")
                        .action(ArgAction::SetTrue)
                        .help("also report random-candidate selection over the same samples"),
                ),
            &[],
        ))
        .subcommand(with_config(
            Command::new("infer")
                .about("Write prediction JSON lines for a split or a single example")
                .arg(path_arg("ckpt", "checkpoint directory").required(true))
                .arg(split.clone())
                .arg(Arg::new("id").long("id").help("only this example"))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("output file instead of standard output"),
                ),
            &[],
        ))
        .subcommand(with_config(
            Command::new("sweep")
                .about("Evaluate over a grid of sampling steps and query counts; prints CSV")
                .arg(path_arg("ckpt", "checkpoint directory").required(true))
                .arg(split)
                .arg(
                    Arg::new("steps")
                        .long("steps")
                        .default_value("1,2,5,10")
                        .help("comma-separated sampling step counts"),
                )
                .arg(
                    Arg::new("queries")
                        .long("queries")
                        .default_value("5")
                        .help("comma-separated query counts"),
                )
                .arg(
                    Arg::new("repeats")
                        .long("repeats")
                        .default_value("1")
                        .value_parser(clap::value_parser!(u64).range(1..))
                        .help("inference seeds averaged per setting"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("output file instead of standard output"),
                ),
            &["steps", "queries"],
        ))
        .subcommand(
            Command::new("selfcheck")
                .about("Run the randomized property suite of the span and schedule math")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                ),
        )
}

/// Layers the config file, the seed environment variable and explicit flags
/// over `base`.
fn resolve_config(mut cfg: RunConfig, m: &ArgMatches, skip: &[&str]) -> Result<RunConfig> {
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)
            .with_context(|| format!("reading config {}", path.display()))?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("seed", &seed)
            .with_context(|| format!("{SEED_ENV}={seed}"))?;
    }
    for (key, _, _) in KEYS {
        if skip.contains(key) {
            continue;
        }
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<GroundingExample>> {
    let manifest = Path::new(&cfg.data).join(format!("{split}.jsonl"));
    let data = load_feature_dataset(&manifest, cfg.model.clips)
        .with_context(|| format!("loading {}", manifest.display()))?;
    if data.is_empty() {
        bail!("{} holds no examples", manifest.display());
    }
    Ok(data)
}

/// Checkpoint plus the configuration it was trained with, overridden by flags.
fn load_checkpoint(m: &ArgMatches, skip: &[&str]) -> Result<(RunConfig, Model)> {
    let dir = m.get_one::<PathBuf>("ckpt").expect("required");
    let ck = checkpoint::load(dir).with_context(|| format!("loading {}", dir.display()))?;
    let saved = RunConfig::from_map(&ck.config)?;
    let cfg = resolve_config(saved, m, skip)?;
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    restore(&ck, &mut model)?;
    Ok((cfg, model))
}

fn restore(ck: &Checkpoint, model: &mut Model) -> Result<()> {
    ck.restore_into(&mut model.params)
        .context("checkpoint does not match the configured model")?;
    Ok(())
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(RunConfig::default(), m, &[])?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let splits = generate_corpus(&cfg.synth, cfg.examples)?;
    write_splits(out, &splits)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    info!(
        "wrote {} train / {} val / {} test examples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn train(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(RunConfig::default(), m, &[])?;
    cfg.validate()?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    fs::create_dir_all(out)?;
    let data = load_split(&cfg, "train")?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    info!(
        "training {} parameters on {} examples for {} epochs",
        model.params.num_scalars(),
        data.len(),
        cfg.train.epochs
    );
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let mut write_err = None;
    let started = Instant::now();
    trainer.fit(&data, &mut |s| {
        if write_err.is_none() {
            let line = serde_json::to_string(s).expect("stats serialize");
            if let Err(e) = writeln!(log, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing train_log.jsonl");
    }
    log.flush()?;
    checkpoint::save_model(
        &out.join("last"),
        &trainer.model,
        &cfg,
        trainer.step(),
        trainer.rng(),
    )?;
    info!(
        "{} steps in {:.1}s; checkpoint at {}",
        trainer.step(),
        started.elapsed().as_secs_f64(),
        out.join("last").display()
    );
    Ok(())
}

fn eval(m: &ArgMatches) -> Result<()> {
    let (cfg, model) = load_checkpoint(m, &[])?;
    let split = m.get_one::<String>("split").expect("defaulted");
    let data = load_split(&cfg, split)?;
    let schedule = cfg.train.schedule()?;
    let json = if m.get_flag("ablation") {
        let (vote, random) = evaluate_ablation(&model, &schedule, &data, &cfg.infer)?;
        serde_json::json!({ "vote": vote, "random": random })
    } else {
        serde_json::to_value(evaluate(&model, &schedule, &data, &cfg.infer, Selector::Vote)?)?
    };
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn infer(m: &ArgMatches) -> Result<()> {
    let (cfg, model) = load_checkpoint(m, &[])?;
    let split = m.get_one::<String>("split").expect("defaulted");
    let mut data = load_split(&cfg, split)?;
    if let Some(id) = m.get_one::<String>("id") {
        data.retain(|e| &e.id == id);
        if data.is_empty() {
            bail!("no example {id:?} in split {split}");
        }
    }
    let schedule = cfg.train.schedule()?;
    let preds = predict(&model, &schedule, &data, &cfg.infer)?;
    let mut out = output(m.get_one::<PathBuf>("out"))?;
    for p in &preds {
        writeln!(out, "{}", serde_json::to_string(&p.record(&cfg.infer))?)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .with_context(|| format!("--{flag}: {s:?} is not a count"))
        })
        .collect::<Result<_>>()?;
    if v.is_empty() {
        bail!("--{flag} is empty");
    }
    Ok(v)
}

fn sweep(m: &ArgMatches) -> Result<()> {
    let (cfg, model) = load_checkpoint(m, &["steps", "queries"])?;
    let split = m.get_one::<String>("split").expect("defaulted");
    let steps = parse_list("steps", m.get_one::<String>("steps").expect("defaulted"))?;
    let queries = parse_list("queries", m.get_one::<String>("queries").expect("defaulted"))?;
    let repeats = *m.get_one::<u64>("repeats").expect("defaulted");
    let data = load_split(&cfg, split)?;
    let schedule = cfg.train.schedule()?;
    let mut out = output(m.get_one::<PathBuf>("out"))?;
    writeln!(out, "steps,queries,r1_03,r1_05,r1_07,mean_iou,examples_per_sec")?;
    for &s in &steps {
        for &q in &queries {
            let mut sums = [0.0; 4];
            let started = Instant::now();
            for r in 0..repeats {
                let icfg = InferConfig {
                    queries: q,
                    steps: s,
                    seed: cfg.infer.seed + r,
                };
                icfg.validate(schedule.steps())?;
                let rep = evaluate(&model, &schedule, &data, &icfg, Selector::Vote)?;
                for (acc, v) in sums.iter_mut().zip([rep.r1_03, rep.r1_05, rep.r1_07, rep.mean_iou]) {
                    *acc += v;
                }
            }
            let secs = started.elapsed().as_secs_f64().max(1e-9);
            let k = repeats as f64;
            writeln!(
                out,
                "{s},{q},{},{},{},{},{}",
                sums[0] / k,
                sums[1] / k,
                sums[2] / k,
                sums[3] / k,
                (data.len() as f64 * k) / secs
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn selfcheck(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let mut failed = 0;
    for r in diffspan::checks::run_all(seed) {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<24} {:>7.2}s  {}", r.name, r.seconds, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} self-check(s) failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m),
        Some(("train", m)) => train(m),
        Some(("eval", m)) => eval(m),
        Some(("infer", m)) => infer(m),
        Some(("sweep", m)) => sweep(m),
        Some(("selfcheck", m)) => selfcheck(m),
        _ => unreachable!("subcommand is required"),
    }
}
