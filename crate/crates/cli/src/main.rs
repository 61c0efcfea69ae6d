use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrsteer::attrclf::ClassifierParams;
use attrsteer::evalkit::{bleu, gender_accuracy, m_acc, MetricReport};
use attrsteer::guidance::{GuidanceConfig, GuidanceTrace};
use attrsteer::pipeline::{self, ExperimentConfig, Translator};
use attrsteer::seq2seq::checkpoint::load_model;
use attrsteer::toylang::{language_tag, make_contrastive_testset, read_records, AttributeKind};
use attrsteer::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attrsteer", version, about = "Attribute-controlled translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multilingual base model.
    Train(TrainArgs),
    /// Finetune one specialised checkpoint per attribute label.
    Finetune(TrainArgs),
    /// Train the attribute classifier on the frozen base model.
    TrainClassifier(TrainArgs),
    /// Translate a file of source token ids.
    Translate(TranslateArgs),
    /// Score hypotheses against a contrastive test set.
    Evaluate(EvaluateArgs),
    /// Run the whole experiment matrix.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.run_dir`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Base checkpoint; required by finetune and train-classifier.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src_file: PathBuf,
    /// Target language index.
    #[arg(long)]
    tgt_lang: usize,
    #[arg(long, requires = "attribute")]
    classifier: Option<PathBuf>,
    /// Desired label, by index or name.
    #[arg(long, requires = "classifier")]
    attribute: Option<String>,
    #[arg(long, requires = "classifier")]
    iters: Option<usize>,
    #[arg(long, requires = "classifier")]
    step_size: Option<f64>,
    #[arg(long, requires = "classifier")]
    no_normalize: bool,
    #[arg(long, requires = "classifier")]
    no_persist: bool,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    /// Guidance trace log, one JSON record per step.
    #[arg(long, requires = "classifier")]
    trace: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Macc,
    Gender,
    Bleu,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Tsv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attribute {
    Formality,
    Gender,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    testset: PathBuf,
    #[arg(long, value_enum)]
    attribute: Attribute,
    #[arg(long, value_enum, default_value = "all")]
    metric: Metric,
    /// Label whose references and annotations the hypotheses target.
    #[arg(long, default_value_t = 0)]
    label: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    match ExperimentConfig::load(path) {
        Err(Error::Missing(p)) => Err(Error::Config(format!("config file {} not found", p.display()))),
        other => other?.resolve(),
    }
}

fn require_base(args: &TrainArgs) -> Result<&Path> {
    args.base
        .as_deref()
        .ok_or_else(|| Error::Config("--base is required".into()))
}

fn parse_label(text: &str, num_classes: usize) -> Result<usize> {
    let label = match text.parse::<usize>() {
        Ok(i) => i,
        Err(_) => [AttributeKind::Formality, AttributeKind::Gender]
            .iter()
            .filter(|k| k.num_classes() == num_classes)
            .find_map(|k| k.label_names().iter().position(|n| *n == text))
            .ok_or_else(|| Error::Config(format!("unknown attribute label `{text}`")))?,
    };
    if label >= num_classes {
        return Err(Error::Config(format!("label {label} out of range for {num_classes} classes")));
    }
    Ok(label)
}

fn translate(a: &TranslateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let sources = pipeline::read_id_lines(&a.src_file)?;
    let clf = a.classifier.as_deref().map(ClassifierParams::load).transpose()?;
    let guidance = match &clf {
        Some(clf) => {
            let label = parse_label(a.attribute.as_deref().unwrap_or_default(), clf.num_classes())?;
            let mut g = GuidanceConfig {
                desired_label: label,
                normalize_gradients: !a.no_normalize,
                persist_edits: !a.no_persist,
                ..GuidanceConfig::default()
            };
            if let Some(n) = a.iters {
                g.num_iterations = n;
            }
            if let Some(s) = a.step_size {
                g.step_size = s;
            }
            g.validate(clf.num_classes())?;
            Some((clf, g))
        }
        None => None,
    };
    if a.beam == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let translator = Translator {
        model: &model,
        guidance,
        beam_size: a.beam,
        length_penalty: a.length_penalty,
    };
    let tag = language_tag(a.tgt_lang);
    if tag >= model.config().vocab_size {
        return Err(Error::Config(format!("target language {} not in the model vocabulary", a.tgt_lang)));
    }
    let mut outputs = Vec::with_capacity(sources.len());
    let mut trace = GuidanceTrace::default();
    for src in &sources {
        let (hyp, t) = translator.translate(src, tag)?;
        outputs.push(hyp.tokens);
        trace.steps.extend(t.steps);
    }
    match &a.out {
        Some(path) => pipeline::write_id_lines(path, &outputs)?,
        None => {
            for o in &outputs {
                println!("{}", pipeline::format_ids(o));
            }
        }
    }
    if let Some(path) = &a.trace {
        trace.write(path)?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let kind = match a.attribute {
        Attribute::Formality => AttributeKind::Formality,
        Attribute::Gender => AttributeKind::Gender,
    };
    let hyps = pipeline::read_id_lines(&a.hyp)?;
    let set = make_contrastive_testset(&read_records(&a.testset)?, &kind.test_labels())?;
    if !set.labels.contains(&a.label) {
        return Err(Error::Config(format!("label {} has no references in the test set", a.label)));
    }
    if hyps.len() != set.len() {
        return Err(Error::Data(format!(
            "{} hypotheses for {} test segments",
            hyps.len(),
            set.len()
        )));
    }
    let annotations = set.annotations(a.label);
    let refs: Vec<Vec<usize>> = set.references(a.label).iter().map(|r| r.tokens.clone()).collect();
    let mut reports = Vec::new();
    if matches!(a.metric, Metric::Macc | Metric::All) {
        reports.push(m_acc(&hyps, &annotations)?);
    }
    if matches!(a.metric, Metric::Gender | Metric::All) {
        let (acc, coverage) = gender_accuracy(&hyps, &annotations)?;
        reports.push(acc);
        reports.push(coverage);
    }
    if matches!(a.metric, Metric::Bleu | Metric::All) {
        reports.push(bleu(
            &hyps,
            &refs,
            Some((attrsteer::evalkit::BOOTSTRAP_RESAMPLES, attrsteer::evalkit::BOOTSTRAP_SEED)),
        )?);
    }
    match a.format {
        Format::Tsv => {
            println!("{}", MetricReport::TSV_HEADER);
            for r in &reports {
                println!("{}", r.to_tsv());
            }
        }
        Format::Text => {
            for r in &reports {
                match r.ci {
                    Some((lo, hi)) => println!("{}\t{:.2}\t[{lo:.2}, {hi:.2}]\tn={}", r.metric, r.value, r.count),
                    None => println!("{}\t{:.2}\tn={}", r.metric, r.value, r.count),
                }
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            pipeline::gen_data(&cfg, &out)?;
        }
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            pipeline::train_stage(&cfg, &a.data, &a.out)?;
        }
        Command::Finetune(a) => {
            let cfg = load_config(&a.config)?;
            let base = load_model(require_base(&a)?)?;
            pipeline::finetune_stage(&cfg, &a.data, &base, &a.out)?;
        }
        Command::TrainClassifier(a) => {
            let cfg = load_config(&a.config)?;
            let base = load_model(require_base(&a)?)?;
            let outcome = pipeline::classifier_stage(&cfg, &a.data, &base, &a.out)?;
            eprintln!("classifier dev accuracy {:.3}", outcome.dev_accuracy);
        }
        Command::Translate(a) => translate(&a)?,
        Command::Evaluate(a) => evaluate(&a)?,
        Command::Matrix { config, run_dir } => {
            let cfg = load_config(&config)?;
            let dir = run_dir.unwrap_or_else(|| cfg.run_dir());
            let outcome = pipeline::run_matrix(&cfg, &dir)?;
            print!("{}", outcome.table.to_text());
            for (s, acc) in &outcome.pooling {
                println!("classifier dev accuracy ({s}): {:.1}", 100.0 * acc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
