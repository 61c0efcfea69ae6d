//! Attribute accuracy, gendered-term accuracy and corpus BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::seed;
use crate::seq2seq::TokenId;
use crate::toylang::Annotation;
use crate::{Error, Result};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 12345;

/// One metric value with an optional 95% interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub ci: Option<(f64, f64)>,
    pub count: usize,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64, count: usize) -> Self {
        MetricReport {
            metric: metric.into(),
            value,
            ci: None,
            count,
        }
    }

    pub const TSV_HEADER: &'static str = "metric\tvalue\tci_low\tci_high\tcount";

    /// `metric value ci_low ci_high count`, `-` for a missing interval.
    /// Values use the shortest round-trip representation.
    pub fn to_tsv(&self) -> String {
        let (lo, hi) = match self.ci {
            Some((l, h)) => (l.to_string(), h.to_string()),
            None => ("-".into(), "-".into()),
        };
        format!("{}\t{}\t{}\t{}\t{}", self.metric, self.value, lo, hi, self.count)
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let [metric, value, lo, hi, count] = f[..] else {
            return Err(Error::Data(format!("expected 5 fields in metric line `{line}`")));
        };
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Data(format!("bad number `{s}`"))) };
        let ci = match (lo, hi) {
            ("-", "-") => None,
            _ => Some((num(lo)?, num(hi)?)),
        };
        Ok(MetricReport {
            metric: metric.to_string(),
            value: num(value)?,
            ci,
            count: count.parse().map_err(|_| Error::Data(format!("bad count `{count}`")))?,
        })
    }
}

/// Contiguous occurrence of `phrase` in `hyp`.
pub fn contains_phrase(hyp: &[TokenId], phrase: &[TokenId]) -> bool {
    !phrase.is_empty() && hyp.windows(phrase.len()).any(|w| w == phrase)
}

fn check_counts(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Contract(format!("{hyps} hypotheses for {refs} segments")));
    }
    Ok(())
}

/// A segment matches when every desired phrase occurs and no contrastive
/// phrase does.
pub fn segment_matches(hyp: &[TokenId], annotations: &[Annotation]) -> bool {
    annotations.iter().all(|a| contains_phrase(hyp, &a.desired))
        && !annotations.iter().any(|a| contains_phrase(hyp, &a.contrastive))
}

/// Percentage of matched segments; `annotations[i]` describes the desired
/// label's phrases for segment `i`.
pub fn m_acc(hyps: &[Vec<TokenId>], annotations: &[&[Annotation]]) -> Result<MetricReport> {
    check_counts(hyps.len(), annotations.len())?;
    let hits: Vec<f64> = hyps
        .iter()
        .zip(annotations)
        .map(|(h, a)| if segment_matches(h, a) { 1.0 } else { 0.0 })
        .collect();
    Ok(percent_report("m_acc", &hits))
}

/// Percentage with a bootstrap interval over segments.
fn percent_report(metric: &str, hits: &[f64]) -> MetricReport {
    let n = hits.len();
    let matched: f64 = hits.iter().sum();
    let value = if n == 0 { 0.0 } else { 100.0 * matched / n as f64 };
    let mut r = MetricReport::new(metric, value, n);
    if n > 0 {
        let stat = |idx: &[usize]| 100.0 * idx.iter().map(|&i| hits[i]).sum::<f64>() / idx.len() as f64;
        r.ci = Some(bootstrap_ci(n, value, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED, stat));
    }
    r
}

/// Term-level counts for gendered-term accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TermCounts {
    pub desired: usize,
    pub contrastive: usize,
    pub uncovered: usize,
}

impl TermCounts {
    pub fn add(&mut self, o: TermCounts) {
        self.desired += o.desired;
        self.contrastive += o.contrastive;
        self.uncovered += o.uncovered;
    }

    pub fn covered(&self) -> usize {
        self.desired + self.contrastive
    }

    pub fn total(&self) -> usize {
        self.covered() + self.uncovered
    }

    /// Desired share of covered terms; 0 when nothing is covered.
    pub fn accuracy(&self) -> f64 {
        match self.covered() {
            0 => 0.0,
            c => 100.0 * self.desired as f64 / c as f64,
        }
    }

    pub fn coverage(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => 100.0 * self.covered() as f64 / t as f64,
        }
    }
}

/// Classifies every annotated term of every segment. A term whose desired
/// form occurs counts as desired, otherwise as contrastive when that form
/// occurs, otherwise as uncovered.
pub fn gender_terms(hyps: &[Vec<TokenId>], annotations: &[&[Annotation]]) -> Result<TermCounts> {
    check_counts(hyps.len(), annotations.len())?;
    let mut c = TermCounts::default();
    for (h, anns) in hyps.iter().zip(annotations) {
        for a in anns.iter() {
            if contains_phrase(h, &a.desired) {
                c.desired += 1;
            } else if contains_phrase(h, &a.contrastive) {
                c.contrastive += 1;
            } else {
                c.uncovered += 1;
            }
        }
    }
    Ok(c)
}

/// Gendered-term accuracy for one desired label plus its coverage.
pub fn gender_accuracy(hyps: &[Vec<TokenId>], annotations: &[&[Annotation]]) -> Result<(MetricReport, MetricReport)> {
    let c = gender_terms(hyps, annotations)?;
    Ok((
        MetricReport::new("gender_acc", c.accuracy(), c.covered()),
        MetricReport::new("gender_coverage", c.coverage(), c.total()),
    ))
}

/// Per-class and global gendered-term accuracy; `per_class` holds one
/// `(class name, hypotheses, annotations)` entry per desired label.
pub fn gender_breakdown(per_class: &[(&str, &[Vec<TokenId>], &[&[Annotation]])]) -> Result<Vec<MetricReport>> {
    let mut global = TermCounts::default();
    let mut out = Vec::new();
    for (name, hyps, anns) in per_class {
        let c = gender_terms(hyps, anns)?;
        global.add(c);
        out.push(MetricReport::new(format!("gender_acc_{name}"), c.accuracy(), c.covered()));
    }
    out.push(MetricReport::new("gender_acc_global", global.accuracy(), global.covered()));
    out.push(MetricReport::new("gender_coverage", global.coverage(), global.total()));
    Ok(out)
}

/// Clipped n-gram matches and totals for n = 1..=4 plus lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct BleuStats {
    matches: [usize; 4],
    totals: [usize; 4],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, o: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of the four precisions times the brevity penalty,
    /// in points; any zero precision gives 0.
    fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / 4.0).exp()
    }
}

fn ngram_counts(toks: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

fn segment_stats(hyp: &[TokenId], reference: &[TokenId]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=4 {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    }
    s
}

/// Corpus BLEU in points over pre-tokenised id sequences. With
/// `bootstrap = Some((resamples, seed))` the report carries a percentile
/// interval from segment resampling.
pub fn bleu(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>], bootstrap: Option<(usize, u64)>) -> Result<MetricReport> {
    check_counts(hyps.len(), refs.len())?;
    if hyps.is_empty() {
        return Err(Error::Contract("BLEU of an empty corpus".into()));
    }
    let stats: Vec<BleuStats> = hyps.iter().zip(refs).map(|(h, r)| segment_stats(h, r)).collect();
    let corpus = |idx: &mut dyn Iterator<Item = usize>| {
        let mut total = BleuStats::default();
        for i in idx {
            total.add(&stats[i]);
        }
        total.score()
    };
    let value = corpus(&mut (0..stats.len()));
    let mut r = MetricReport::new("bleu", value, hyps.len());
    if let Some((resamples, seed_)) = bootstrap {
        r.ci = Some(bootstrap_ci(stats.len(), value, resamples, seed_, |idx| {
            corpus(&mut idx.iter().copied())
        }));
    }
    Ok(r)
}

/// 2.5/97.5 percentile interval of `stat` over `resamples` draws of `n`
/// indices with replacement, widened to contain `point`.
pub fn bootstrap_ci(n: usize, point: f64, resamples: usize, seed_: u64, stat: impl Fn(&[usize]) -> f64) -> (f64, f64) {
    if resamples == 0 || n == 0 {
        return (point, point);
    }
    let mut rng = seed::rng(seed_);
    let mut idx = vec![0; n];
    let mut vals: Vec<f64> = (0..resamples)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.gen_range(0..n);
            }
            stat(&idx)
        })
        .collect();
    vals.sort_by(f64::total_cmp);
    let at = |q: f64| vals[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025).min(point), at(0.975).max(point))
}

/// One cell group of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub system: String,
    pub condition: String,
    pub accuracy: MetricReport,
    pub bleu: MetricReport,
}

/// Systems x conditions table of attribute accuracy and BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    fn ordered<'a>(&'a self, key: impl Fn(&'a ResultRow) -> &'a str) -> Vec<&'a str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            let k = key(r);
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    pub fn get(&self, system: &str, condition: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.system == system && r.condition == condition)
    }

    /// `*` best and `+` second-best accuracy within a condition.
    fn mark(&self, row: &ResultRow) -> &'static str {
        let mut vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.condition == row.condition)
            .map(|r| r.accuracy.value)
            .collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        vals.dedup();
        match vals.iter().position(|&v| v == row.accuracy.value) {
            Some(0) => "*",
            Some(1) => "+",
            _ => " ",
        }
    }

    /// Aligned plain-text table: one line per system, an accuracy and a
    /// BLEU column per condition.
    pub fn to_text(&self) -> String {
        let systems = self.ordered(|r| &r.system);
        let conditions = self.ordered(|r| &r.condition);
        let sys_w = systems.iter().map(|s| s.len()).max().unwrap_or(0).max(6);
        let col_w = conditions.iter().map(|c| c.len()).max().unwrap_or(0).max(15);
        let mut s = String::new();
        let _ = write!(s, "{:sys_w$}", "system");
        for c in &conditions {
            let _ = write!(s, " | {c:^col_w$}");
        }
        s.push('\n');
        let _ = write!(s, "{:sys_w$}", "");
        for _ in &conditions {
            let _ = write!(s, " | {:^col_w$}", "acc     bleu");
        }
        s.push('\n');
        for sys in &systems {
            let _ = write!(s, "{sys:sys_w$}");
            for c in &conditions {
                let cell = match self.get(sys, c) {
                    Some(r) => format!("{:6.1}{} {:6.1}", r.accuracy.value, self.mark(r), r.bleu.value),
                    None => "-".to_string(),
                };
                let _ = write!(s, " | {cell:^col_w$}");
            }
            s.push('\n');
        }
        s.push_str("* best, + second best accuracy per condition\n");
        s
    }

    pub const TSV_HEADER: &'static str = "system\tcondition\taccuracy\tacc_ci_low\tacc_ci_high\tbleu\tbleu_ci_low\tbleu_ci_high\tsegments\tmark";

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::TSV_HEADER);
        s.push('\n');
        let ci = |r: &MetricReport| match r.ci {
            Some((l, h)) => (l.to_string(), h.to_string()),
            None => ("-".into(), "-".into()),
        };
        for r in &self.rows {
            let (al, ah) = ci(&r.accuracy);
            let (bl, bh) = ci(&r.bleu);
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{al}\t{ah}\t{}\t{bl}\t{bh}\t{}\t{}",
                r.system,
                r.condition,
                r.accuracy.value,
                r.bleu.value,
                r.accuracy.count,
                self.mark(r).trim()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(pos: usize, desired: TokenId, contrastive: TokenId) -> Annotation {
        Annotation {
            start: pos,
            end: pos + 1,
            desired: vec![desired],
            contrastive: vec![contrastive],
        }
    }

    #[test]
    fn m_acc_hand_corpus() {
        // segment 2 mixes variants and fails; segment 3 lacks its contrastive
        let anns = [
            vec![ann(1, 10, 11)],
            vec![ann(0, 10, 11), ann(2, 20, 21)],
            vec![ann(1, 30, 31)],
        ];
        let refs: Vec<&[Annotation]> = anns.iter().map(Vec::as_slice).collect();
        let hyps = vec![vec![5, 10, 6], vec![10, 7, 21], vec![8, 9]];
        let r = m_acc(&hyps, &refs).unwrap();
        assert!((r.value - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.count, 3);
        let (lo, hi) = r.ci.unwrap();
        assert!(lo <= r.value && r.value <= hi);
    }

    #[test]
    fn m_acc_ignores_tokens_outside_spans_and_checks_counts() {
        let anns = [vec![ann(1, 10, 11)]];
        let refs: Vec<&[Annotation]> = anns.iter().map(Vec::as_slice).collect();
        let a = m_acc(&[vec![1, 10, 2]], &refs).unwrap();
        let b = m_acc(&[vec![7, 10, 9, 9]], &refs).unwrap();
        assert_eq!(a.value, b.value);
        assert!(matches!(m_acc(&[], &refs), Err(Error::Contract(_))));
    }

    #[test]
    fn gender_counts() {
        let anns = [vec![ann(0, 1, 2), ann(1, 3, 4)], vec![ann(0, 5, 6), ann(1, 7, 8)]];
        let refs: Vec<&[Annotation]> = anns.iter().map(Vec::as_slice).collect();
        let hyps = vec![vec![1, 3], vec![5, 8]];
        let (acc, cov) = gender_accuracy(&hyps, &refs).unwrap();
        assert_eq!(acc.value, 75.0);
        assert_eq!(cov.value, 100.0);
        let none = vec![vec![0], vec![0]];
        let (acc, cov) = gender_accuracy(&none, &refs).unwrap();
        assert_eq!((acc.value, acc.count, cov.value), (0.0, 0, 0.0));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert!((bleu(&refs, &refs, None).unwrap().value - 100.0).abs() < 1e-12);
        let other = vec![vec![11, 12, 13, 14, 15], vec![16, 17, 18, 19]];
        assert_eq!(bleu(&other, &refs, None).unwrap().value, 0.0);
        assert!(matches!(bleu(&[], &[], None), Err(Error::Contract(_))));
    }

    #[test]
    fn bleu_closed_form_single_segment() {
        let r = bleu(&[vec![1, 2, 3, 4, 5]], &[vec![1, 2, 3, 4, 6]], None).unwrap();
        let expected = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((r.value - expected).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let r = bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5, 6]], None).unwrap();
        assert!((r.value - 100.0 * (1.0f64 - 1.5).exp()).abs() < 1e-9);
    }

    #[test]
    fn bleu_permutation_invariant_and_bootstrap_deterministic() {
        let refs: Vec<Vec<usize>> = (0..20).map(|i| (i..i + 6).collect()).collect();
        let hyps: Vec<Vec<usize>> = refs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut h = r.clone();
                h[i % 6] = 99;
                h
            })
            .collect();
        let a = bleu(&hyps, &refs, Some((BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED))).unwrap();
        let b = bleu(&hyps, &refs, Some((BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED))).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = a.ci.unwrap();
        assert!(lo <= a.value && a.value <= hi && lo < hi);
        let mut rh = hyps.clone();
        let mut rr = refs.clone();
        rh.reverse();
        rr.reverse();
        assert!((bleu(&rh, &rr, None).unwrap().value - a.value).abs() < 1e-12);
    }

    #[test]
    fn report_tsv_round_trip() {
        let mut r = MetricReport::new("bleu", 66.87403049764218, 12);
        r.ci = Some((0.1 + 0.2, 99.99999999999999));
        assert_eq!(MetricReport::from_tsv(&r.to_tsv()).unwrap(), r);
        let plain = MetricReport::new("m_acc", 100.0 / 3.0, 3);
        assert_eq!(MetricReport::from_tsv(&plain.to_tsv()).unwrap(), plain);
    }

    #[test]
    fn table_marks_best_and_second() {
        let row = |s: &str, acc: f64| ResultRow {
            system: s.into(),
            condition: "supervised".into(),
            accuracy: MetricReport::new("m_acc", acc, 10),
            bleu: MetricReport::new("bleu", 50.0, 10),
        };
        let t = ResultsTable {
            rows: vec![row("base", 50.0), row("+CG", 80.0), row("+FT", 99.0)],
        };
        let tsv = t.to_tsv();
        let marks: Vec<&str> = tsv.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap()).collect();
        assert_eq!(marks, vec!["", "+", "*"]);
        assert_eq!(t.to_text().lines().count(), 2 + 3 + 1);
    }
}
