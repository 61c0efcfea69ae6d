//! Synthetic multilingual parallel corpora with lexical attribute markers.
//!
//! Every sentence is a sequence of abstract concepts. Language `l0` is the
//! attribute-neutral pivot; every target language renders concepts through
//! its own seeded permutation inside a disjoint id block, and renders
//! *markable* concepts as one of two attribute variants (formal/informal or
//! feminine/masculine). The gender task's neutral class keeps the unmarked
//! base form.
//!
//! Record files are UTF-8, one record per line, four tab-separated fields:
//!
//! ```text
//! <source ids> \t <tag id> <target ids> \t <label> \t <annotations>
//! ```
//!
//! Ids are space separated. Annotations are `;`-separated entries of the
//! form `start:end:desired:contrastive`, where `start..end` indexes the
//! target tokens after the tag and each phrase is a `,`-separated id list.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::seq2seq::checkpoint::write_atomic;
use crate::seq2seq::{Pair, TokenId, TokenSeq, EOS};
use crate::{Error, Result};

/// Which attribute the corpus controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Formality,
    Gender,
}

impl AttributeKind {
    pub fn num_classes(self) -> usize {
        match self {
            AttributeKind::Formality => 2,
            AttributeKind::Gender => 3,
        }
    }

    pub fn label_names(self) -> &'static [&'static str] {
        match self {
            AttributeKind::Formality => &["formal", "informal"],
            AttributeKind::Gender => &["feminine", "masculine", "neutral"],
        }
    }

    /// Labels that contrastive test sets cover.
    pub fn test_labels(self) -> Vec<usize> {
        vec![0, 1]
    }

    /// The opposing label used for contrastive phrases.
    pub fn contrastive(self, label: usize) -> usize {
        match (self, label) {
            (AttributeKind::Formality, l) => 1 - l,
            (AttributeKind::Gender, 0) => 1,
            (AttributeKind::Gender, _) => 0,
        }
    }

    /// Variant slot rendered for `label`; `None` keeps the unmarked form.
    fn variant(self, label: usize) -> Option<usize> {
        match (self, label) {
            (AttributeKind::Gender, 2) => None,
            (_, l) => Some(l),
        }
    }
}

/// Text regime: short in-domain sentences or long shifted ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    In,
    Shifted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    /// Pairs over all directions for base training.
    pub base_train: usize,
    pub base_dev: usize,
    /// Attribute-annotated pairs per supervised language per label.
    pub attr_train: usize,
    pub attr_dev: usize,
    /// Test segments per direction (each written once per test label).
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            base_train: 8000,
            base_dev: 200,
            attr_train: 200,
            attr_dev: 50,
            test: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTaskConfig {
    pub seed: u64,
    pub attribute: AttributeKind,
    pub num_target_languages: usize,
    /// Targets `l1..=l{n}` carry attribute data; the rest are zero-shot.
    pub supervised_targets: usize,
    pub content_vocab_size: usize,
    /// Concepts `0..num_markable` have attribute variants.
    pub num_markable: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub shifted_length_min: usize,
    pub shifted_length_max: usize,
    pub marker_density: f64,
    pub shifted_marker_density: f64,
    /// Share of non-markable concepts reserved for the shifted domain.
    pub shifted_content_fraction: f64,
    /// Share of base-training pairs drawn from the shifted domain.
    pub base_shifted_fraction: f64,
    /// Share of base-training pairs with a non-pivot source whose source
    /// side carries the target's attribute variants. Attribute-training
    /// sources are unmarked; non-pivot test sources carry a label drawn
    /// independently of the reference labels.
    pub marked_source_fraction: f64,
    /// Probability that a marked base-training source carries the target's
    /// label rather than its contrastive label.
    pub marked_source_agreement: f64,
    /// Share of base-training pairs between two non-pivot languages. The
    /// rest splits 2:1 between pivot->X and X->pivot.
    pub cross_direction_fraction: f64,
    /// Domain of attribute training data; defaults to `in`.
    pub attr_domain: Option<Domain>,
    /// Domain of test sets; defaults to `in` for formality, `shifted` for gender.
    pub test_domain: Option<Domain>,
    pub sizes: SplitSizes,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            seed: 1,
            attribute: AttributeKind::Formality,
            num_target_languages: 5,
            supervised_targets: 2,
            content_vocab_size: 60,
            num_markable: 12,
            length_min: 3,
            length_max: 9,
            shifted_length_min: 10,
            shifted_length_max: 20,
            marker_density: 0.3,
            shifted_marker_density: 0.15,
            shifted_content_fraction: 0.3,
            base_shifted_fraction: 0.15,
            marked_source_fraction: 1.0,
            marked_source_agreement: 1.0,
            cross_direction_fraction: 0.5,
            attr_domain: None,
            test_domain: None,
            sizes: SplitSizes::default(),
        }
    }
}

impl ToyTaskConfig {
    /// Fills optional fields with their attribute-dependent defaults.
    pub fn resolve(&mut self) {
        self.attr_domain.get_or_insert(Domain::In);
        self.test_domain.get_or_insert(match self.attribute {
            AttributeKind::Formality => Domain::In,
            AttributeKind::Gender => Domain::Shifted,
        });
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_markable == 0 || self.marker_density <= 0.0 || self.shifted_marker_density <= 0.0 {
            return fail("attribute task needs markable concepts and a positive marker density".into());
        }
        if self.num_markable >= self.content_vocab_size {
            return fail("num_markable must be smaller than content_vocab_size".into());
        }
        let plain = self.content_vocab_size - self.num_markable;
        let shifted = self.shifted_plain();
        if shifted == 0 || shifted >= plain {
            return fail("shifted_content_fraction leaves an empty content subset".into());
        }
        if self.length_min < 2 || self.length_min > self.length_max {
            return fail("length range must satisfy 2 <= min <= max".into());
        }
        if self.shifted_length_min < 2 || self.shifted_length_min > self.shifted_length_max {
            return fail("shifted length range must satisfy 2 <= min <= max".into());
        }
        if self.supervised_targets == 0 || self.supervised_targets >= self.num_target_languages {
            return fail("need at least one supervised and one zero-shot target language".into());
        }
        for (name, v) in [
            ("marker_density", self.marker_density),
            ("shifted_marker_density", self.shifted_marker_density),
            ("base_shifted_fraction", self.base_shifted_fraction),
            ("marked_source_fraction", self.marked_source_fraction),
            ("marked_source_agreement", self.marked_source_agreement),
            ("cross_direction_fraction", self.cross_direction_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.sizes.test == 0 || self.sizes.attr_train == 0 {
            return fail("test and attribute split sizes must be positive".into());
        }
        Ok(())
    }

    fn shifted_plain(&self) -> usize {
        let plain = self.content_vocab_size - self.num_markable;
        (plain as f64 * self.shifted_content_fraction).round() as usize
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.num_target_languages + 1, self.content_vocab_size, self.num_markable, self.seed)
    }

    pub fn supervised_languages(&self) -> Vec<usize> {
        (1..=self.supervised_targets).collect()
    }

    pub fn zero_shot_languages(&self) -> Vec<usize> {
        (self.supervised_targets + 1..=self.num_target_languages).collect()
    }
}

/// Fixed id layout: EOS, one tag per language, then one block per language.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    num_languages: usize,
    content: usize,
    markable: usize,
    /// Per-language concept permutation; identity for the pivot.
    perms: Vec<Vec<usize>>,
}

const VARIANTS: usize = 2;

impl Vocabulary {
    pub fn new(num_languages: usize, content: usize, markable: usize, seed: u64) -> Self {
        let mut rng = seed::named_rng(seed, "vocab");
        let perms = (0..num_languages)
            .map(|l| {
                let mut p: Vec<usize> = (0..content).collect();
                if l > 0 {
                    p.shuffle(&mut rng);
                }
                p
            })
            .collect();
        Vocabulary {
            num_languages,
            content,
            markable,
            perms,
        }
    }

    pub fn num_languages(&self) -> usize {
        self.num_languages
    }

    fn block(&self) -> usize {
        self.content + self.markable * VARIANTS
    }

    pub fn size(&self) -> usize {
        1 + self.num_languages + self.num_languages * self.block()
    }

    pub fn tag(&self, lang: usize) -> TokenId {
        language_tag(lang)
    }

    fn block_start(&self, lang: usize) -> usize {
        1 + self.num_languages + lang * self.block()
    }

    /// Surface id of `concept` in `lang`, optionally as an attribute variant.
    pub fn token(&self, lang: usize, concept: usize, variant: Option<usize>) -> TokenId {
        let base = self.block_start(lang);
        match variant {
            Some(v) if concept < self.markable => base + self.content + concept * VARIANTS + v,
            _ => base + self.perms[lang][concept],
        }
    }

    /// Language owning `id`, if it is a content token.
    pub fn language_of(&self, id: TokenId) -> Option<usize> {
        let first = 1 + self.num_languages;
        (id >= first && id < self.size()).then(|| (id - first) / self.block())
    }

    /// Human-readable name for inspection files.
    pub fn render(&self, id: TokenId) -> String {
        if id == EOS {
            return "</s>".into();
        }
        if id <= self.num_languages {
            return format!("<2l{}>", id - 1);
        }
        let Some(lang) = self.language_of(id) else {
            return format!("<unk{id}>");
        };
        let off = id - self.block_start(lang);
        if off < self.content {
            let concept = self.perms[lang].iter().position(|&p| p == off).unwrap_or(off);
            format!("l{lang}:w{concept}")
        } else {
            let k = off - self.content;
            format!("l{lang}:w{}+v{}", k / VARIANTS, k % VARIANTS)
        }
    }
}

/// Tag token of language `lang`; the layout fixes tags right after EOS.
pub fn language_tag(lang: usize) -> TokenId {
    1 + lang
}

/// Contrastive phrase annotation on a target reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub desired: Vec<TokenId>,
    pub contrastive: Vec<TokenId>,
}

impl Annotation {
    /// Exchanges desired and contrastive phrases.
    pub fn swapped(&self) -> Annotation {
        Annotation {
            start: self.start,
            end: self.end,
            desired: self.contrastive.clone(),
            contrastive: self.desired.clone(),
        }
    }
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub source: Vec<TokenId>,
    pub target: TokenSeq,
    pub label: usize,
    pub annotations: Vec<Annotation>,
}

impl Record {
    pub fn pair(&self) -> Pair {
        Pair {
            source: self.source.clone(),
            target: self.target.clone(),
        }
    }
}

fn join_ids(ids: &[TokenId], sep: &str) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

fn parse_ids(s: &str, sep: char) -> Result<Vec<TokenId>> {
    s.split(sep)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Data(format!("bad token id `{t}`"))))
        .collect()
}

pub fn format_record(r: &Record) -> String {
    let ann: Vec<String> = r
        .annotations
        .iter()
        .map(|a| {
            format!(
                "{}:{}:{}:{}",
                a.start,
                a.end,
                join_ids(&a.desired, ","),
                join_ids(&a.contrastive, ",")
            )
        })
        .collect();
    format!(
        "{}\t{}\t{}\t{}",
        join_ids(&r.source, " "),
        join_ids(&r.target.decoder_inputs(), " "),
        r.label,
        ann.join(";")
    )
}

pub fn parse_record(line: &str) -> Result<Record> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [src, tgt, label, ann] = fields[..] else {
        return Err(Error::Data(format!("expected 4 tab-separated fields in `{line}`")));
    };
    let source = parse_ids(src, ' ')?;
    let tgt = parse_ids(tgt, ' ')?;
    let Some((&tag, tokens)) = tgt.split_first() else {
        return Err(Error::Data("empty target field".into()));
    };
    let label = label
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("bad label `{label}`")))?;
    let mut annotations = Vec::new();
    for a in ann.split(';').filter(|a| !a.is_empty()) {
        let parts: Vec<&str> = a.split(':').collect();
        let [s, e, d, c] = parts[..] else {
            return Err(Error::Data(format!("bad annotation `{a}`")));
        };
        let bad = || Error::Data(format!("bad annotation span `{a}`"));
        let start: usize = s.parse().map_err(|_| bad())?;
        let end: usize = e.parse().map_err(|_| bad())?;
        if start >= end || end > tokens.len() {
            return Err(bad());
        }
        annotations.push(Annotation {
            start,
            end,
            desired: parse_ids(d, ',')?,
            contrastive: parse_ids(c, ',')?,
        });
    }
    Ok(Record {
        source,
        target: TokenSeq::new(tag, tokens.to_vec()),
        label,
        annotations,
    })
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_record(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Underlying content of one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Segment {
    concepts: Vec<usize>,
    marked: Vec<bool>,
}

struct Generator<'c> {
    cfg: &'c ToyTaskConfig,
    vocab: Vocabulary,
    rng: seed::Rng,
    seen: HashSet<Vec<usize>>,
}

impl Generator<'_> {
    fn segment(&mut self, domain: Domain) -> Segment {
        let c = self.cfg;
        let plain_start = c.num_markable;
        let shifted_count = c.shifted_plain();
        let split = c.content_vocab_size - shifted_count;
        let (lo, hi, density, pool) = match domain {
            Domain::In => (c.length_min, c.length_max, c.marker_density, plain_start..split),
            Domain::Shifted => (
                c.shifted_length_min,
                c.shifted_length_max,
                c.shifted_marker_density,
                split..c.content_vocab_size,
            ),
        };
        loop {
            let n = self.rng.gen_range(lo..=hi);
            let m = ((density * n as f64).round() as usize).clamp(1, n - 1);
            // never sentence-initial: the first target token is decoded before
            // any history exists
            let mut positions: Vec<usize> = (1..n).collect();
            positions.shuffle(&mut self.rng);
            let mut marked = vec![false; n];
            for &p in &positions[..m] {
                marked[p] = true;
            }
            let concepts: Vec<usize> = marked
                .iter()
                .map(|&mk| {
                    if mk {
                        self.rng.gen_range(0..c.num_markable)
                    } else {
                        self.rng.gen_range(pool.clone())
                    }
                })
                .collect();
            if self.seen.insert(concepts.clone()) {
                return Segment { concepts, marked };
            }
        }
    }

    /// Surface form of `seg`; `label` of `None` keeps every concept unmarked.
    fn render(&self, lang: usize, seg: &Segment, label: Option<usize>) -> Vec<TokenId> {
        let variant = match label {
            Some(l) if lang > 0 => self.cfg.attribute.variant(l),
            _ => None,
        };
        seg.concepts
            .iter()
            .zip(&seg.marked)
            .map(|(&c, &mk)| self.vocab.token(lang, c, if mk { variant } else { None }))
            .collect()
    }

    fn annotations(&self, lang: usize, seg: &Segment, label: usize) -> Vec<Annotation> {
        let kind = self.cfg.attribute;
        let other = kind.contrastive(label);
        seg.marked
            .iter()
            .enumerate()
            .filter(|(_, &mk)| mk)
            .map(|(i, _)| {
                let c = seg.concepts[i];
                Annotation {
                    start: i,
                    end: i + 1,
                    desired: vec![self.vocab.token(lang, c, kind.variant(label))],
                    contrastive: vec![self.vocab.token(lang, c, kind.variant(other))],
                }
            })
            .collect()
    }

    fn record(&self, src_lang: usize, src_label: Option<usize>, tgt_lang: usize, seg: &Segment, label: usize) -> Record {
        Record {
            source: self.render(src_lang, seg, src_label),
            target: TokenSeq::new(self.vocab.tag(tgt_lang), self.render(tgt_lang, seg, Some(label))),
            label,
            annotations: self.annotations(tgt_lang, seg, label),
        }
    }

    fn balanced_labels(&mut self, n: usize, classes: usize) -> Vec<usize> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(&mut self.rng);
        labels
    }

    fn base_split(&mut self, n: usize) -> Vec<Record> {
        let langs = self.cfg.num_target_languages + 1;
        let labels = self.balanced_labels(n, self.cfg.attribute.num_classes());
        let mut out = Vec::with_capacity(n);
        for label in labels {
            let domain = if self.rng.gen::<f64>() < self.cfg.base_shifted_fraction {
                Domain::Shifted
            } else {
                Domain::In
            };
            let seg = self.segment(domain);
            let u: f64 = self.rng.gen();
            let pivot_share = 1.0 - self.cfg.cross_direction_fraction;
            let (src, tgt) = match u {
                u if u < pivot_share * 2.0 / 3.0 => (0, self.rng.gen_range(1..langs)),
                u if u < pivot_share => (self.rng.gen_range(1..langs), 0),
                _ => {
                    let s = self.rng.gen_range(1..langs);
                    let mut t = self.rng.gen_range(1..langs - 1);
                    if t >= s {
                        t += 1;
                    }
                    (s, t)
                }
            };
            let marked = src > 0 && self.rng.gen::<f64>() < self.cfg.marked_source_fraction;
            let src_label = if self.rng.gen::<f64>() < self.cfg.marked_source_agreement {
                label
            } else {
                self.cfg.attribute.contrastive(label)
            };
            out.push(self.record(src, marked.then_some(src_label), tgt, &seg, label));
        }
        out
    }

    fn attr_split(&mut self, per_label: usize) -> Vec<Record> {
        let domain = self.cfg.attr_domain.unwrap_or(Domain::In);
        let classes = self.cfg.attribute.num_classes();
        let mut out = Vec::new();
        for lang in self.cfg.supervised_languages() {
            for label in 0..classes {
                for _ in 0..per_label {
                    let seg = self.segment(domain);
                    out.push(self.record(0, None, lang, &seg, label));
                }
            }
        }
        out.shuffle(&mut self.rng);
        out
    }

    /// Contrastive test records: each segment once per test label, grouped.
    fn test_split(&mut self, directions: &[(usize, usize)]) -> Vec<Record> {
        let domain = self.cfg.test_domain.unwrap_or(Domain::In);
        let labels = self.cfg.attribute.test_labels();
        let mut out = Vec::new();
        for &(src, tgt) in directions {
            // non-pivot sources carry their own label, independent of the
            // requested one
            let src_labels = self.balanced_labels(self.cfg.sizes.test, self.cfg.attribute.num_classes());
            for src_label in src_labels {
                let seg = self.segment(domain);
                let src_label = (src > 0).then_some(src_label);
                for &label in &labels {
                    out.push(self.record(src, src_label, tgt, &seg, label));
                }
            }
        }
        out
    }
}

/// Generated splits keyed by file stem.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub splits: BTreeMap<String, Vec<Record>>,
}

pub const TEST_CONDITIONS: [&str; 4] = ["supervised", "new_target", "new_source", "new_source_target"];

/// One non-pivot source language per target, rotating with the target's
/// rank so that different targets see different sources.
fn new_source_directions(targets: &[usize], num_langs: usize) -> Vec<(usize, usize)> {
    targets
        .iter()
        .enumerate()
        .map(|(rank, &t)| {
            let cands: Vec<usize> = (1..num_langs).filter(|&s| s != t).collect();
            (cands[(rank + 1) % cands.len()], t)
        })
        .collect()
}

pub fn gen_corpus(cfg: &ToyTaskConfig) -> Result<Corpus> {
    let mut cfg = cfg.clone();
    cfg.resolve();
    cfg.validate()?;
    let mut g = Generator {
        vocab: cfg.vocabulary(),
        rng: seed::named_rng(cfg.seed, "corpus"),
        seen: HashSet::new(),
        cfg: &cfg,
    };
    let sup = cfg.supervised_languages();
    let zs = cfg.zero_shot_languages();
    let langs = cfg.num_target_languages + 1;
    let mut splits = BTreeMap::new();
    // test content is drawn first so that training never reuses it
    let pivot = |ts: &[usize]| ts.iter().map(|&t| (0, t)).collect::<Vec<_>>();
    let ns = new_source_directions(&sup, langs);
    let nst = new_source_directions(&zs, langs);
    splits.insert("test.supervised".to_string(), g.test_split(&pivot(&sup)));
    splits.insert("test.new_target".to_string(), g.test_split(&pivot(&zs)));
    splits.insert("test.new_source".to_string(), g.test_split(&ns));
    splits.insert("test.new_source_target".to_string(), g.test_split(&nst));
    splits.insert("attr.dev".to_string(), g.attr_split(cfg.sizes.attr_dev));
    splits.insert("attr.train".to_string(), g.attr_split(cfg.sizes.attr_train));
    splits.insert("base.dev".to_string(), g.base_split(cfg.sizes.base_dev));
    splits.insert("base.train".to_string(), g.base_split(cfg.sizes.base_train));
    Ok(Corpus {
        vocab: g.vocab,
        splits,
    })
}

impl Corpus {
    /// Writes `<split>.tsv` files and `vocab.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, records) in &self.splits {
            write_records(&dir.join(format!("{name}.tsv")), records)?;
        }
        let mut v = String::new();
        for id in 0..self.vocab.size() {
            let _ = writeln!(v, "{id}\t{}", self.vocab.render(id));
        }
        write_atomic(&dir.join("vocab.txt"), v.as_bytes())
    }

    pub fn split(&self, name: &str) -> Result<&[Record]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no split `{name}`")))
    }
}

/// A test segment with one reference and annotation list per label.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSegment {
    pub source: Vec<TokenId>,
    pub language_tag: TokenId,
    pub references: BTreeMap<usize, TokenSeq>,
    pub annotations: BTreeMap<usize, Vec<Annotation>>,
}

/// Segments of a contrastive test file.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSet {
    pub labels: Vec<usize>,
    pub segments: Vec<ContrastiveSegment>,
}

impl ContrastiveSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn references(&self, label: usize) -> Vec<&TokenSeq> {
        self.segments.iter().map(|s| &s.references[&label]).collect()
    }

    pub fn annotations(&self, label: usize) -> Vec<&[Annotation]> {
        self.segments
            .iter()
            .map(|s| s.annotations[&label].as_slice())
            .collect()
    }
}

/// Groups consecutive records sharing source and target language into
/// segments and checks that every label in `labels` is present.
pub fn make_contrastive_testset(records: &[Record], labels: &[usize]) -> Result<ContrastiveSet> {
    let mut segments: Vec<ContrastiveSegment> = Vec::new();
    for r in records {
        let same = segments
            .last()
            .is_some_and(|s| s.source == r.source && s.language_tag == r.target.language_tag && !s.references.contains_key(&r.label));
        if !same {
            segments.push(ContrastiveSegment {
                source: r.source.clone(),
                language_tag: r.target.language_tag,
                references: BTreeMap::new(),
                annotations: BTreeMap::new(),
            });
        }
        let seg = segments.last_mut().expect("just pushed");
        seg.references.insert(r.label, r.target.clone());
        seg.annotations.insert(r.label, r.annotations.clone());
    }
    for (i, s) in segments.iter().enumerate() {
        for l in labels {
            if !s.references.contains_key(l) {
                return Err(Error::Data(format!("segment {i} lacks a reference for label {l}")));
            }
        }
    }
    Ok(ContrastiveSet {
        labels: labels.to_vec(),
        segments,
    })
}
