use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use zeronorm_core::corpus::{generate_corpus, LanguageSet, ParallelCorpus, Vocabulary};
use zeronorm_core::eval::{evaluate_directions, paired_bootstrap, Translator};
use zeronorm_core::experiment::{
    load_corpus_dir, prepare_corpus, run_matrix, ExperimentSpec, RunOptions,
};
use zeronorm_core::model::{NormPlacement, Transformer};
use zeronorm_core::probes::{collect_traces, encoder_svcca, eval_llr, train_all_llr, unravel};
use zeronorm_core::report::{
    directions_csv, markdown_table, read_report, write_report, REPORT_FILE,
};
use zeronorm_core::training::{train, TrainConfig, TrainOutputs, CHECKPOINT_FILE};

use crate::{Cli, Command, Global, Placement};

pub fn exit_config() -> ExitCode {
    ExitCode::from(1)
}

pub fn exit_failure() -> ExitCode {
    ExitCode::from(2)
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(zeronorm_core::Error),
    Io(io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => exit_config(),
            CliError::Core(e) if e.is_config() => exit_config(),
            _ => exit_failure(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Core(e) => e.fmt(f),
            CliError::Io(e) => e.fmt(f),
        }
    }
}

impl From<zeronorm_core::Error> for CliError {
    fn from(e: zeronorm_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Reads the config file (or defaults) and applies the command-line overrides.
fn load_spec(g: &Global) -> Result<ExperimentSpec> {
    let mut spec = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<ExperimentSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = g.seed {
        spec.seeds = vec![seed];
        spec.model.seed = seed;
        spec.training.seed = seed;
    }
    if let Some(seed) = g.corpus_seed {
        spec.corpus.seed = seed;
    }
    if let Some(out) = &g.out {
        spec.out = out.clone();
    }
    Ok(spec)
}

fn load_corpus(spec: &ExperimentSpec, data: Option<&Path>) -> Result<ParallelCorpus> {
    match data {
        Some(dir) => Ok(load_corpus_dir(dir)?),
        None => Ok(generate_corpus(&spec.corpus)?),
    }
}

fn load_model(
    spec: &ExperimentSpec,
    checkpoint: Option<&Path>,
    vocab: &Vocabulary,
) -> Result<Transformer> {
    let path = checkpoint.map_or_else(|| spec.out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let model = Transformer::load(&path)?;
    let vocab = vocab.len();
    if model.config().vocab_size != vocab {
        return Err(CliError::Config(format!(
            "{} was trained on a {}-token vocabulary, the corpus has {vocab}",
            path.display(),
            model.config().vocab_size
        )));
    }
    Ok(model)
}

/// Prints `body` and, when `--out` was given, also writes it to `out/name`.
fn emit(g: &Global, name: &str, body: &str) -> Result<()> {
    io::stdout().write_all(body.as_bytes())?;
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    let mut spec = load_spec(g)?;
    match cli.command {
        Command::GenData => {
            let dir = g.out.clone().unwrap_or_else(|| spec.out.join("corpus"));
            let corpus = prepare_corpus(&spec.corpus, &dir)?;
            eprintln!(
                "{} train, {} valid, {} test pairs in {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                dir.display()
            );
        }
        Command::Train => {
            let corpus = generate_corpus(&spec.corpus)?;
            let training = TrainConfig {
                seed: spec.training.seed,
                ..spec.training.clone()
            };
            let echo = |r: &zeronorm_core::training::EpochRecord| {
                println!("{}", serde_json::to_string(r).expect("plain record"));
            };
            let state = train(
                &spec.model,
                &corpus,
                &training,
                &TrainOutputs {
                    dir: Some(&spec.out),
                    echo: Some(&echo),
                    deadline: None,
                },
            )?;
            eprintln!(
                "best validation loss {:.4} at epoch {}; checkpoint {}",
                state.best_valid_loss.unwrap_or(f64::NAN),
                state.best_epoch.unwrap_or(0),
                state
                    .checkpoint
                    .as_deref()
                    .map_or(PathBuf::new(), Path::to_path_buf)
                    .display()
            );
        }
        Command::Translate {
            checkpoint,
            src,
            tgt,
            input,
            pivot,
        } => {
            spec.corpus.validate()?;
            let languages = LanguageSet::synthetic(spec.corpus.languages, spec.corpus.concepts);
            languages.get(&src)?;
            languages.get(&tgt)?;
            let vocab = Vocabulary::new(&languages);
            let model = load_model(&spec, checkpoint.as_deref(), &vocab)?;
            let translator = Translator {
                model: &model,
                vocab: &vocab,
                languages: &languages,
                decode: spec.decode,
            };
            let reader: Box<dyn BufRead> = match &input {
                Some(p) => Box::new(io::BufReader::new(fs::File::open(p)?)),
                None => Box::new(io::stdin().lock()),
            };
            let mut items = Vec::new();
            for line in reader.lines() {
                let tokens: Vec<String> = line?.split_whitespace().map(str::to_string).collect();
                items.push((tokens, src.clone(), tgt.clone()));
            }
            let out = if pivot {
                translator.pivot_translate(&items)?
            } else {
                translator.translate(&items)?
            };
            let mut stdout = io::stdout().lock();
            for hyp in out {
                writeln!(stdout, "{}", hyp.join(" "))?;
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            baseline,
        } => {
            let corpus = load_corpus(&spec, data.as_deref())?;
            let vocab = corpus.vocabulary();
            let model = load_model(&spec, checkpoint.as_deref(), &vocab)?;
            let mut dirs = corpus.languages.supervised_directions();
            dirs.extend(corpus.languages.zero_shot_directions());
            let results = {
                let t = Translator {
                    model: &model,
                    vocab: &vocab,
                    languages: &corpus.languages,
                    decode: spec.decode,
                };
                evaluate_directions(&t, &corpus.test, &dirs)?
            };
            let mut p_values = vec![None; results.len()];
            if let Some(path) = baseline {
                let other = load_model(&spec, Some(&path), &vocab)?;
                let t = Translator {
                    model: &other,
                    vocab: &vocab,
                    languages: &corpus.languages,
                    decode: spec.decode,
                };
                let base = evaluate_directions(&t, &corpus.test, &dirs)?;
                for (i, (a, b)) in results.iter().zip(&base).enumerate() {
                    let refs: Vec<Vec<String>> = corpus
                        .test
                        .iter()
                        .filter(|p| p.src_lang == a.src && p.tgt_lang == a.tgt)
                        .map(|p| p.tgt.clone())
                        .collect();
                    p_values[i] = Some(paired_bootstrap(
                        &a.hypotheses,
                        &b.hypotheses,
                        &refs,
                        spec.analysis.bootstrap_resamples,
                        spec.analysis.bootstrap_seed,
                    )?);
                }
            }
            emit(g, "evaluation.csv", &directions_csv(&results, &p_values))?;
        }
        Command::ProbeLlr { checkpoint, data } => {
            let corpus = load_corpus(&spec, data.as_deref())?;
            let vocab = corpus.vocabulary();
            let model = load_model(&spec, checkpoint.as_deref(), &vocab)?;
            let supervised = corpus.languages.supervised_directions();
            let mut all = supervised.clone();
            all.extend(corpus.languages.zero_shot_directions());
            let extra = spec.decode.extra_len;
            let fit = collect_traces(
                &model,
                &vocab,
                &corpus.languages,
                &corpus.valid,
                &supervised,
                extra,
            )?;
            let probes = train_all_llr(&fit, &spec.probe)?;
            let test =
                collect_traces(&model, &vocab, &corpus.languages, &corpus.test, &all, extra)?;
            emit(g, "llr.csv", &eval_llr(&probes, &test)?.to_csv())?;
        }
        Command::ProbeSvcca { checkpoint, data } => {
            let corpus = load_corpus(&spec, data.as_deref())?;
            let vocab = corpus.vocabulary();
            let model = load_model(&spec, checkpoint.as_deref(), &vocab)?;
            let scores = encoder_svcca(
                &model,
                &vocab,
                &corpus.languages,
                &corpus.test,
                spec.analysis.svcca_sentences,
            )?;
            let mut csv = String::from("layer,svcca\n");
            for (l, s) in scores.iter().enumerate() {
                csv.push_str(&format!("{},{s:.6}\n", l + 1));
            }
            emit(g, "svcca.csv", &csv)?;
        }
        Command::Unravel {
            placement,
            layers,
            ablate,
        } => {
            if let Some(p) = placement {
                spec.model.norm_placement = match p {
                    Placement::Post => NormPlacement::PostNorm,
                    Placement::Pre => NormPlacement::PreNorm,
                    Placement::Swap => NormPlacement::SwapPreNorm,
                    Placement::PreWoEncLast => NormPlacement::PreNormWoEncLast,
                };
            }
            if let Some(l) = layers {
                spec.model.encoder_layers = l;
            }
            if ablate.is_some() {
                spec.model.ablate_sa_residual_at = ablate;
            }
            spec.model.vocab_size = spec.model.vocab_size.max(1);
            spec.model.validate()?;
            emit(g, "unravel.txt", &unravel(&spec.model)?.to_text())?;
        }
        Command::Experiment => {
            let progress = |m: &str| eprintln!("{m}");
            let run = run_matrix(
                &spec,
                RunOptions {
                    jobs: g.jobs,
                    progress: Some(&progress),
                },
            )?;
            print!("{}", markdown_table(&run.report));
            eprintln!(
                "{} cells trained, {} cached, {} failed",
                run.trained,
                run.cached,
                run.report.failures.len()
            );
            if run.failed() {
                return Ok(exit_failure());
            }
        }
        Command::Report => {
            let report = read_report(&spec.out.join(REPORT_FILE))?;
            write_report(&report, &spec.out)?;
            print!("{}", markdown_table(&report));
        }
    }
    Ok(ExitCode::SUCCESS)
}
