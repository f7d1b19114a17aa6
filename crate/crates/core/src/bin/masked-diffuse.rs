use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use masked_diffuse::config::{Overrides, RunConfig};
use masked_diffuse::corpus::{read_records, Corpus, Split, Vocabulary};
use masked_diffuse::eval::{
    evaluate, run_ablation, targets_from_corpus, EvalContext, Target, Task, TeacherLm,
    TransformerTeacher, UniformTeacher,
};
use masked_diffuse::guidance::{
    train_latent_classifier, ClassifierTask, ControlSpec, LatentClassifier, Sampler,
};
use masked_diffuse::importance::{bucketize, importance};
use masked_diffuse::pipeline::{load_classifier, save_classifier, train_run, Data, SampleRequest, Session};
use masked_diffuse::pos::PosTagger;
use masked_diffuse::strategy::NoiseStrategy;
use masked_diffuse::training::Objective;
use masked_diffuse::{Error, Result};

/// Soft-masked diffusion language model: data preparation, training,
/// controlled sampling, evaluation and ablations.
#[derive(Parser)]
#[command(name = "masked-diffuse", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the vocabulary, corpus statistics and importance dump.
    Prepare {
        /// Training corpus (JSONL with `text` and optional `attributes`).
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a model and write `checkpoint.json`.
    Train(RunArgs),
    /// Train a latent classifier for content or POS guidance.
    TrainClassifier {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `content:<field>` or `pos`.
        #[arg(long)]
        task: String,
    },
    /// Sample sentences, one per line on stdout.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `length=7`, `content=food:japanese` or `pos="DET NOUN VERB"`.
        #[arg(long)]
        control: Option<String>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Print only the MBR choice among the samples.
        #[arg(long)]
        mbr: bool,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the JSON metadata.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Score a checkpoint on a control task and print the report as JSON.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        /// JSONL of `{"control": ..., "length": ...}`; drawn from the
        /// validation split when absent.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Score fluency with a uniform teacher instead of training one.
        #[arg(long)]
        uniform_teacher: bool,
    },
    /// Strategy x objective sweep; writes `ablation.json` and `ablation.txt`.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated strategy keys; all six by default.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<NoiseStrategy>,
        /// Comma-separated objectives; both by default.
        #[arg(long, value_delimiter = ',')]
        objectives: Vec<Objective>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct OutArg {
    /// Output directory; defaults to `$MASKED_DIFFUSE_OUT` or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    valid_data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Diffusion steps `T`.
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    strategy: Option<NoiseStrategy>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    targets_n: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.resolve(&Overrides {
            seed: self.seed,
            out_dir: self.out.out.clone(),
            train_path: self.train_data.clone(),
            valid_path: self.valid_data.clone(),
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            hidden: self.hidden,
            layers: self.layers,
            diffusion_steps: self.diffusion_steps,
            strategy: self.strategy,
            objective: self.objective,
            samples: self.samples,
            lambda: self.lambda,
            k: self.k,
            targets: self.targets_n,
        })
    }
}

fn output_root(out: &OutArg) -> PathBuf {
    RunConfig {
        out_dir: out.out.clone(),
        ..RunConfig::default()
    }
    .output_root()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn cmd_prepare(corpus: &Path, min_count: usize, max_len: usize, out: &Path) -> Result<()> {
    let records = read_records(corpus)?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, min_count)?;
    let c = Corpus::from_records(&records, &vocab, Split::Train, max_len)?;
    write(&out.join("vocab.json"), vocab.to_json()?)?;
    write(&out.join("stats.json"), json(&c.stats())?)?;
    let mut dump = String::new();
    for (i, d) in c.sentences.iter().enumerate() {
        let mut p = importance(d, &c)?;
        p.sentence_id = Some(i);
        let b = bucketize(&p, 3.min(d.len()))?;
        dump.push_str(&serde_json::to_string(&serde_json::json!({
            "profile": p,
            "bucket": b.bucket,
        }))?);
        dump.push('\n');
    }
    write(&out.join("importance.jsonl"), dump)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_train(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let out = cfg.output_root();
    cfg.echo(&out)?;
    let data = Data::load(&cfg.data, false)?;
    let tagger = PosTagger::default();
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let every = cfg.train.checkpoint_every;
    let (_, log, ck) = train_run(&cfg, &data, &tagger, |r, model| {
        writeln!(metrics, "{}", serde_json::to_string(r)?).map_err(|e| io_err(&metrics_path, e))?;
        if every > 0 && r.step % every == 0 {
            masked_diffuse::checkpoint::Checkpoint::capture(
                model,
                &data.vocab,
                cfg.schedule,
                &cfg.train,
                data.train.stats(),
                r.step,
            )
            .save(&out.join(format!("checkpoint-{}.json", r.step)))?;
        }
        Ok(())
    })?;
    let path = out.join("checkpoint.json");
    ck.save(&path)?;
    let first = log.first().map_or(f64::NAN, |r| r.loss);
    let last = log.last().map_or(f64::NAN, |r| r.loss);
    eprintln!("trained {} steps, loss {first:.4} -> {last:.4}", log.len());
    println!("{}", path.display());
    Ok(())
}

fn cmd_train_classifier(run: &RunArgs, checkpoint: &Path, task: &str) -> Result<()> {
    let cfg = run.resolve()?;
    let out = cfg.output_root();
    let task: ClassifierTask = task.parse()?;
    let session = Session::load(checkpoint)?;
    let records = read_records(&cfg.data.train)?;
    let corpus = Corpus::from_records(&records, &session.vocab, Split::Train, session.model.config.max_len)?;
    let planner = masked_diffuse::strategy::MaskPlanner {
        corpus: &corpus,
        ..session.planner()
    };
    let (clf, acc) = train_latent_classifier(
        &session.model,
        &planner,
        &session.schedule,
        &session.tagger,
        &session.vocab,
        &task,
        &cfg.classifier,
    )?;
    let name = match &task {
        ClassifierTask::Content(f) => format!("classifier-content-{f}.json"),
        ClassifierTask::Pos => "classifier-pos.json".to_string(),
    };
    let path = out.join(name);
    save_classifier(&clf, &path)?;
    eprintln!("held-out accuracy {acc:.3}");
    println!("{}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    control: Option<&str>,
    length: Option<usize>,
    samples: usize,
    mbr: bool,
    classifier: Option<&Path>,
    seed: u64,
    config: Option<&Path>,
    meta: Option<&Path>,
) -> Result<()> {
    let session = Session::load(checkpoint)?;
    let guidance = match config {
        Some(p) => RunConfig::load(p)?.guidance,
        None => Default::default(),
    };
    let control: Option<ControlSpec> = control.map(str::parse).transpose()?;
    let clf: Option<LatentClassifier<f32>> = classifier.map(load_classifier).transpose()?;
    let req = SampleRequest {
        control,
        length,
        samples,
        mbr,
        seed,
        guidance,
    };
    let out = session.sample(&req, clf.as_ref())?;
    let mut stdout = std::io::stdout().lock();
    for t in &out.texts {
        writeln!(stdout, "{t}").map_err(|e| io_err(Path::new("<stdout>"), e))?;
    }
    if let Some(p) = meta {
        write(
            p,
            json(&serde_json::json!({
                "request": req,
                "checkpoint": checkpoint,
                "output": out,
            }))?,
        )?;
    }
    Ok(())
}

fn cmd_eval(
    run: &RunArgs,
    checkpoint: &Path,
    task: Task,
    targets: Option<&Path>,
    classifier: Option<&Path>,
    uniform_teacher: bool,
) -> Result<()> {
    let cfg = run.resolve()?;
    let session = Session::load(checkpoint)?;
    let valid = || Corpus::load(&cfg.data.valid, &session.vocab, Split::Validation, session.model.config.max_len);
    let targets: Vec<Target> = match targets {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            raw.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                        path: p.to_path_buf(),
                        line: i + 1,
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?
        }
        None => targets_from_corpus(
            &valid()?,
            &session.vocab,
            &session.tagger,
            task,
            &cfg.data.field,
            cfg.eval.targets,
        )?,
    };
    let clf: Option<LatentClassifier<f32>> = classifier.map(load_classifier).transpose()?;
    if matches!(task, Task::Content | Task::Pos) && clf.is_none() {
        return Err(Error::Config(format!("{task} evaluation needs --classifier")));
    }
    let teacher: Box<dyn TeacherLm> = if uniform_teacher {
        Box::new(UniformTeacher {
            vocab_size: session.vocab.len(),
        })
    } else {
        Box::new(TransformerTeacher::fit(&valid()?, session.model.config.max_len, &cfg.teacher)?)
    };
    let planner = session.planner();
    let sampler = Sampler::new(&session.model, &session.schedule, Some(&planner), cfg.guidance)?;
    let ctx = EvalContext {
        sampler: &sampler,
        classifier: clf.as_ref(),
        vocab: &session.vocab,
        tagger: &session.tagger,
        teacher: teacher.as_ref(),
    };
    let hash = masked_diffuse::eval::config_hash(&(
        &cfg.guidance,
        &cfg.eval,
        &targets,
        &session.checkpoint.vocab_fingerprint,
        session.checkpoint.step,
    ))?;
    let (report, outputs) = evaluate(&ctx, task, &targets, &cfg.eval, hash)?;
    let out = cfg.output_root();
    let texts: Vec<String> = outputs.iter().map(|o| session.vocab.detokenize(&o.ids)).collect();
    write(&out.join(format!("eval-{task}-outputs.txt")), texts.join("\n") + "\n")?;
    let j = json(&report)?;
    write(&out.join(format!("eval-{task}.json")), &j)?;
    println!("{j}");
    Ok(())
}

fn cmd_ablate(run: &RunArgs, strategies: &[NoiseStrategy], objectives: &[Objective], jobs: usize) -> Result<()> {
    let cfg = run.resolve()?;
    let out = cfg.output_root();
    cfg.echo(&out)?;
    let data = Data::load(&cfg.data, true)?;
    let tagger = PosTagger::default();
    let strategies = if strategies.is_empty() { NoiseStrategy::ALL.to_vec() } else { strategies.to_vec() };
    let objectives = if objectives.is_empty() { Objective::ALL.to_vec() } else { objectives.to_vec() };
    let acfg = masked_diffuse::eval::AblationConfig {
        model: cfg.model,
        schedule: cfg.schedule,
        train: cfg.train.clone(),
        guidance: cfg.guidance,
        classifier: cfg.classifier,
        teacher: cfg.teacher,
        eval: cfg.eval,
        field: cfg.data.field.clone(),
        jobs,
    };
    let report = run_ablation(&data.train, data.valid()?, &data.vocab, &tagger, &strategies, &objectives, &acfg)?;
    write(&out.join("ablation.json"), report.to_json()?)?;
    let table = report.to_table();
    write(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prepare {
            corpus,
            min_count,
            max_len,
            out,
        } => cmd_prepare(&corpus, min_count, max_len, &output_root(&out)),
        Cmd::Train(run) => cmd_train(&run),
        Cmd::TrainClassifier { run, checkpoint, task } => cmd_train_classifier(&run, &checkpoint, &task),
        Cmd::Sample {
            checkpoint,
            control,
            length,
            samples,
            mbr,
            classifier,
            seed,
            config,
            meta,
        } => cmd_sample(
            &checkpoint,
            control.as_deref(),
            length,
            samples,
            mbr,
            classifier.as_deref(),
            seed,
            config.as_deref(),
            meta.as_deref(),
        ),
        Cmd::Eval {
            run,
            checkpoint,
            task,
            targets,
            classifier,
            uniform_teacher,
        } => cmd_eval(&run, &checkpoint, task, targets.as_deref(), classifier.as_deref(), uniform_teacher),
        Cmd::Ablate {
            run,
            strategies,
            objectives,
            jobs,
        } => cmd_ablate(&run, &strategies, &objectives, jobs),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("error kind=usage msg={:?}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
