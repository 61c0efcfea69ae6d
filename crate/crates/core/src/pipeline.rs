//! Experiment configuration and the staged end-to-end pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attrclf::{
    evaluate_classifier, extract_features, train_on_features, ClassifierConfig, ClassifierParams, PoolingStrategy,
};
use crate::evalkit::{bleu, gender_terms, m_acc, MetricReport, ResultRow, ResultsTable};
use crate::guidance::{guided_beam_search, GuidanceConfig, GuidanceTrace};
use crate::seed;
use crate::seq2seq::checkpoint::{load_model, save_model, write_atomic};
use crate::seq2seq::{beam_search, BeamConfig, Hypothesis, ModelConfig, ModelParams, Pair, TokenId};
use crate::toylang::{
    gen_corpus, make_contrastive_testset, read_records, AttributeKind, ContrastiveSet, Corpus, Record, ToyTaskConfig,
    TEST_CONDITIONS,
};
use crate::train::{finetune_attribute, train_base, TrainConfig, TrainResult};
use crate::{Error, Result};

/// Environment variable that relocates relative run directories.
pub const RUN_ROOT_ENV: &str = "ATTRSTEER_RUN_ROOT";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Compared decoding systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "+CG")]
    Cg,
    #[serde(rename = "+FT")]
    Ft,
    #[serde(rename = "+CG+FT")]
    CgFt,
}

impl System {
    pub const ALL: [System; 4] = [System::Base, System::Cg, System::Ft, System::CgFt];

    pub fn name(self) -> &'static str {
        match self {
            System::Base => "base",
            System::Cg => "+CG",
            System::Ft => "+FT",
            System::CgFt => "+CG+FT",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            System::Base => "base",
            System::Cg => "cg",
            System::Ft => "ft",
            System::CgFt => "cg_ft",
        }
    }

    pub fn guided(self) -> bool {
        matches!(self, System::Cg | System::CgFt)
    }

    pub fn finetuned(self) -> bool {
        matches!(self, System::Ft | System::CgFt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub systems: Vec<System>,
    pub conditions: Vec<String>,
    /// Train every pooling strategy under the classifier budget and report
    /// dev accuracies side by side.
    pub pooling_study: bool,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_size: 4,
            length_penalty: 1.0,
            systems: System::ALL.to_vec(),
            conditions: TEST_CONDITIONS.iter().map(|s| s.to_string()).collect(),
            pooling_study: true,
            bootstrap_resamples: crate::evalkit::BOOTSTRAP_RESAMPLES,
            bootstrap_seed: crate::evalkit::BOOTSTRAP_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            run_dir: PathBuf::from("runs/toy"),
        }
    }
}

/// Everything a run needs. Sub-seeds of every stage derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: ToyTaskConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub finetune: TrainConfig,
    pub classifier: ClassifierConfig,
    pub guidance: GuidanceConfig,
    pub evaluation: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            task: ToyTaskConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            finetune: TrainConfig::finetune(),
            classifier: ClassifierConfig::default(),
            guidance: GuidanceConfig::default(),
            evaluation: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Sub-seed kept below 2^63 so it survives a TOML round trip.
fn stage_seed(seed: u64, name: &str) -> u64 {
    seed::sub_seed(seed, name) >> 1
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Replaces `root[key]` with `defaults` overlaid by the user's entries.
fn overlay<T: Serialize>(root: &mut toml::Table, key: &str, defaults: &T) -> Result<()> {
    let mut base = toml::Table::try_from(defaults).map_err(config_err)?;
    if let Some(v) = root.remove(key) {
        let toml::Value::Table(user) = v else {
            return Err(Error::Config(format!("`{key}` must be a table")));
        };
        base.extend(user);
    }
    root.insert(key.to_string(), toml::Value::Table(base));
    Ok(())
}

impl ExperimentConfig {
    /// Parses a TOML document; missing keys take their defaults, unknown
    /// keys are rejected. Finetuning and guidance sections default to their
    /// own recipes rather than the base-training ones.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(config_err)?;
        let kind = match root.get("task").and_then(|t| t.get("attribute")) {
            Some(v) => v.clone().try_into::<AttributeKind>().map_err(config_err)?,
            None => AttributeKind::Formality,
        };
        let d = ExperimentConfig::default();
        overlay(&mut root, "finetune", &d.finetune)?;
        overlay(&mut root, "guidance", &GuidanceConfig::for_attribute(kind, 0))?;
        root.entry("seed").or_insert(toml::Value::Integer(d.seed as i64));
        for (key, value) in [
            ("task", toml::Table::try_from(&d.task)),
            ("model", toml::Table::try_from(&d.model)),
            ("training", toml::Table::try_from(&d.training)),
            ("classifier", toml::Table::try_from(&d.classifier)),
            ("evaluation", toml::Table::try_from(&d.evaluation)),
            ("paths", toml::Table::try_from(&d.paths)),
        ] {
            // an absent section takes its defaults through serde
            if !root.contains_key(key) {
                root.insert(key.into(), toml::Value::Table(value.map_err(config_err)?));
            }
        }
        root.try_into().map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Materialises derived values: stage seeds, task defaults and the
    /// vocabulary size implied by the task.
    pub fn resolve(&self) -> Result<Self> {
        let mut c = self.clone();
        c.task.seed = stage_seed(c.seed, "data");
        c.task.resolve();
        c.task.validate()?;
        c.training.seed = stage_seed(c.seed, "train");
        c.finetune.seed = stage_seed(c.seed, "finetune");
        c.classifier.seed = stage_seed(c.seed, "classifier");
        let vocab = c.task.vocabulary().size();
        if c.model.vocab_size == 0 {
            c.model.vocab_size = vocab;
        } else if c.model.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from the task vocabulary of {vocab}",
                c.model.vocab_size
            )));
        }
        c.model.validate()?;
        c.training.validate()?;
        c.finetune.validate()?;
        c.guidance.validate(c.task.attribute.num_classes())?;
        if c.training.max_updates == 0 {
            return Err(Error::Config("training.max_updates must be at least 1".into()));
        }
        for cond in &c.evaluation.conditions {
            if !TEST_CONDITIONS.contains(&cond.as_str()) {
                return Err(Error::Config(format!(
                    "unknown condition `{cond}`; expected one of {}",
                    TEST_CONDITIONS.join(", ")
                )));
            }
        }
        if c.evaluation.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short content hash naming stage markers.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `paths.run_dir`, placed under `$ATTRSTEER_RUN_ROOT` when relative.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(root) if self.paths.run_dir.is_relative() => PathBuf::from(root).join(&self.paths.run_dir),
            _ => self.paths.run_dir.clone(),
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(RESOLVED_CONFIG), self.to_toml().as_bytes())
    }

    pub fn num_classes(&self) -> usize {
        self.task.attribute.num_classes()
    }
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.tsv"))
}

pub fn load_split(data: &Path, split: &str) -> Result<Vec<Record>> {
    read_records(&split_path(data, split))
}

fn pairs(records: &[Record]) -> Vec<Pair> {
    records.iter().map(Record::pair).collect()
}

fn labelled(records: &[Record]) -> Vec<(Pair, usize)> {
    records.iter().map(|r| (r.pair(), r.label)).collect()
}

/// Generates the corpus into `out` together with the resolved config.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Corpus> {
    let corpus = gen_corpus(&cfg.task)?;
    corpus.write(out)?;
    cfg.write_resolved(out)?;
    Ok(corpus)
}

fn write_log(dir: &Path, result: &TrainResult) -> Result<()> {
    write_atomic(&dir.join("metrics.log"), result.log_lines().as_bytes())
}

/// Base training on `base.train` with early stopping on `base.dev`.
pub fn train_stage(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<ModelParams> {
    let train = pairs(&load_split(data, "base.train")?);
    let dev = pairs(&load_split(data, "base.dev")?);
    let result = train_base(&cfg.model, &train, &dev, &cfg.training)?;
    save_model(out, &result.params)?;
    write_log(out, &result)?;
    cfg.write_resolved(out)?;
    Ok(result.params)
}

pub fn label_dir(out: &Path, label: usize) -> PathBuf {
    out.join(format!("label-{label}"))
}

/// One finetuned checkpoint per attribute label under `out/label-<c>`.
pub fn finetune_stage(cfg: &ExperimentConfig, data: &Path, base: &ModelParams, out: &Path) -> Result<Vec<ModelParams>> {
    let records = load_split(data, "attr.train")?;
    let mut models = Vec::new();
    for label in 0..cfg.num_classes() {
        let subset: Vec<(Pair, usize)> = labelled(&records).into_iter().filter(|(_, l)| *l == label).collect();
        let result = finetune_attribute(base, &subset, label, &cfg.finetune)?;
        let dir = label_dir(out, label);
        save_model(&dir, &result.params)?;
        write_log(&dir, &result)?;
        models.push(result.params);
    }
    cfg.write_resolved(out)?;
    Ok(models)
}

/// Classifier trained on `attr.train` over the frozen base, with dev
/// accuracies per pooling strategy.
#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub params: ClassifierParams,
    pub dev_accuracy: f64,
    pub pooling: Vec<(PoolingStrategy, f64)>,
}

pub const POOLING_REPORT: &str = "pooling.tsv";

pub fn classifier_stage(cfg: &ExperimentConfig, data: &Path, base: &ModelParams, out: &Path) -> Result<ClassifierOutcome> {
    let c = cfg.num_classes();
    let train = extract_features(base, &labelled(&load_split(data, "attr.train")?), c)?;
    let dev = extract_features(base, &labelled(&load_split(data, "attr.dev")?), c)?;
    let strategies: Vec<PoolingStrategy> = if cfg.evaluation.pooling_study {
        PoolingStrategy::ALL.to_vec()
    } else {
        vec![cfg.classifier.pooling]
    };
    let mut chosen = None;
    let mut pooling = Vec::new();
    for s in strategies {
        let ccfg = ClassifierConfig {
            pooling: s,
            ..cfg.classifier.clone()
        };
        let params = train_on_features(&train, c, &ccfg)?;
        let acc = evaluate_classifier(&params, &dev)?;
        pooling.push((s, acc));
        if s == cfg.classifier.pooling {
            chosen = Some((params, acc));
        }
    }
    let (params, dev_accuracy) = chosen.expect("configured strategy trained");
    params.save(out)?;
    let mut report = String::from("pooling\tdev_accuracy\n");
    for (s, a) in &pooling {
        report.push_str(&format!("{s}\t{a}\n"));
    }
    write_atomic(&out.join(POOLING_REPORT), report.as_bytes())?;
    let log = format!("dev_accuracy\t{}\t{dev_accuracy}\n", cfg.classifier.pooling);
    write_atomic(&out.join("metrics.log"), log.as_bytes())?;
    cfg.write_resolved(out)?;
    Ok(ClassifierOutcome {
        params,
        dev_accuracy,
        pooling,
    })
}

fn read_pooling(out: &Path, configured: PoolingStrategy) -> Result<(f64, Vec<(PoolingStrategy, f64)>)> {
    let path = out.join(POOLING_REPORT);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut pooling = Vec::new();
    for line in text.lines().skip(1) {
        let (s, a) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("bad line in {}", path.display())))?;
        let acc = a.parse().map_err(|_| Error::Data(format!("bad accuracy in {}", path.display())))?;
        pooling.push((s.parse()?, acc));
    }
    let dev = pooling
        .iter()
        .find(|(s, _)| *s == configured)
        .map(|(_, a)| *a)
        .ok_or_else(|| Error::Data(format!("{} lacks {configured}", path.display())))?;
    Ok((dev, pooling))
}

/// Beam or guided-beam decoding with fixed settings.
pub struct Translator<'a> {
    pub model: &'a ModelParams,
    pub guidance: Option<(&'a ClassifierParams, GuidanceConfig)>,
    pub beam_size: usize,
    pub length_penalty: f64,
}

impl Translator<'_> {
    pub fn beam_config(&self, src_len: usize) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            ..BeamConfig::for_source(src_len, self.model.config().max_positions)
        }
    }

    pub fn translate(&self, src: &[TokenId], language_tag: TokenId) -> Result<(Hypothesis, GuidanceTrace)> {
        let beam = self.beam_config(src.len());
        match &self.guidance {
            Some((clf, g)) => guided_beam_search(self.model, clf, g, src, language_tag, &beam),
            None => Ok((beam_search(self.model, src, language_tag, &beam)?, GuidanceTrace::default())),
        }
    }
}

pub fn format_ids(ids: &[TokenId]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_ids_line(line: &str) -> Result<Vec<TokenId>> {
    line.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Data(format!("bad token id `{t}`"))))
        .collect()
}

pub fn read_id_lines(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(parse_ids_line).collect()
}

pub fn write_id_lines(path: &Path, lines: &[Vec<TokenId>]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&format_ids(l));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Attribute accuracy for hypotheses of every test label: M-Acc for
/// formality, covered-term accuracy for gender.
pub fn attribute_accuracy(
    kind: AttributeKind,
    set: &ContrastiveSet,
    hyps: &[(usize, Vec<Vec<TokenId>>)],
) -> Result<MetricReport> {
    let mut all_h = Vec::new();
    let mut all_a = Vec::new();
    for (label, h) in hyps {
        all_h.extend(h.iter().cloned());
        all_a.extend(set.annotations(*label));
    }
    match kind {
        AttributeKind::Formality => m_acc(&all_h, &all_a),
        AttributeKind::Gender => {
            let c = gender_terms(&all_h, &all_a)?;
            Ok(MetricReport::new("gender_acc", c.accuracy(), c.covered()))
        }
    }
}

/// BLEU of every label's hypotheses against that label's references.
pub fn label_bleu(set: &ContrastiveSet, hyps: &[(usize, Vec<Vec<TokenId>>)], bootstrap: Option<(usize, u64)>) -> Result<MetricReport> {
    let mut all_h = Vec::new();
    let mut all_r = Vec::new();
    for (label, h) in hyps {
        all_h.extend(h.iter().cloned());
        all_r.extend(set.references(*label).into_iter().map(|r| r.tokens.clone()));
    }
    bleu(&all_h, &all_r, bootstrap)
}

/// Results of a full matrix run.
#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub table: ResultsTable,
    pub classifier_dev_accuracy: f64,
    pub pooling: Vec<(PoolingStrategy, f64)>,
    /// Wall-clock seconds of the stages executed in this invocation.
    pub stage_seconds: Vec<(String, f64)>,
}

struct Stages {
    dir: PathBuf,
    hash: String,
    seconds: Vec<(String, f64)>,
}

impl Stages {
    fn marker(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}-{}.done", self.hash))
    }

    fn done(&self, name: &str) -> bool {
        self.marker(name).exists()
    }

    /// Runs `f` unless its marker exists, then records the marker.
    fn run<T>(&mut self, name: &str, skip: impl FnOnce() -> Result<T>, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        if self.done(name) {
            return skip().map_err(wrap);
        }
        let start = Instant::now();
        let out = f().map_err(wrap)?;
        self.seconds.push((name.to_string(), start.elapsed().as_secs_f64()));
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_atomic(&self.marker(name), b"")?;
        Ok(out)
    }
}

/// Runs generation, training, classifier training, finetuning, decoding
/// and evaluation inside `run_dir`, skipping stages whose markers exist,
/// and writes `results.txt` and `results.tsv`.
pub fn run_matrix(cfg: &ExperimentConfig, run_dir: &Path) -> Result<MatrixOutcome> {
    let cfg = cfg.resolve()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    cfg.write_resolved(run_dir)?;
    let mut st = Stages {
        dir: run_dir.join(".stages"),
        hash: cfg.hash(),
        seconds: Vec::new(),
    };
    let data = run_dir.join("data");
    let base_dir = run_dir.join("base");
    let clf_dir = run_dir.join("classifier");
    let ft_dir = run_dir.join("finetune");
    let hyp_dir = run_dir.join("hyp");
    st.run("gen-data", || Ok(()), || gen_data(&cfg, &data).map(|_| ()))?;
    let base = st.run("train", || load_model(&base_dir), || train_stage(&cfg, &data, &base_dir))?;
    let clf = st.run(
        "train-classifier",
        || {
            let (dev_accuracy, pooling) = read_pooling(&clf_dir, cfg.classifier.pooling)?;
            Ok(ClassifierOutcome {
                params: ClassifierParams::load(&clf_dir)?,
                dev_accuracy,
                pooling,
            })
        },
        || classifier_stage(&cfg, &data, &base, &clf_dir),
    )?;
    let num_classes = cfg.num_classes();
    let ft = st.run(
        "finetune",
        || (0..num_classes).map(|l| load_model(&label_dir(&ft_dir, l))).collect(),
        || finetune_stage(&cfg, &data, &base, &ft_dir),
    )?;
    let labels = cfg.task.attribute.test_labels();
    let mut table = ResultsTable::default();
    for cond in &cfg.evaluation.conditions {
        let records = load_split(&data, &format!("test.{cond}"))?;
        let set = make_contrastive_testset(&records, &labels)?;
        for &system in &cfg.evaluation.systems {
            let dir = hyp_dir.join(system.slug());
            let path = |label: usize| dir.join(format!("{cond}.{label}.txt"));
            st.run(
                &format!("translate-{}-{cond}", system.slug()),
                || Ok(()),
                || {
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let mut shared: Option<Vec<Vec<TokenId>>> = None;
                    for &label in &labels {
                        let translator = Translator {
                            model: if system.finetuned() { &ft[label] } else { &base },
                            guidance: system.guided().then(|| {
                                (
                                    &clf.params,
                                    GuidanceConfig {
                                        desired_label: label,
                                        ..cfg.guidance.clone()
                                    },
                                )
                            }),
                            beam_size: cfg.evaluation.beam_size,
                            length_penalty: cfg.evaluation.length_penalty,
                        };
                        let hyps = match (&shared, system) {
                            (Some(h), System::Base) => h.clone(),
                            _ => set
                                .segments
                                .iter()
                                .map(|s| translator.translate(&s.source, s.language_tag).map(|(h, _)| h.tokens))
                                .collect::<Result<Vec<_>>>()?,
                        };
                        write_id_lines(&path(label), &hyps)?;
                        shared = Some(hyps);
                    }
                    Ok(())
                },
            )?;
            let hyps: Vec<(usize, Vec<Vec<TokenId>>)> = labels
                .iter()
                .map(|&l| read_id_lines(&path(l)).map(|h| (l, h)))
                .collect::<Result<_>>()?;
            let bootstrap = Some((cfg.evaluation.bootstrap_resamples, cfg.evaluation.bootstrap_seed));
            table.rows.push(ResultRow {
                system: system.name().to_string(),
                condition: cond.clone(),
                accuracy: attribute_accuracy(cfg.task.attribute, &set, &hyps)?,
                bleu: label_bleu(&set, &hyps, bootstrap)?,
            });
        }
    }
    write_atomic(&run_dir.join("results.txt"), table.to_text().as_bytes())?;
    write_atomic(&run_dir.join("results.tsv"), table.to_tsv().as_bytes())?;
    Ok(MatrixOutcome {
        table,
        classifier_dev_accuracy: clf.dev_accuracy,
        pooling: clf.pooling,
        stage_seconds: st.seconds,
    })
}
