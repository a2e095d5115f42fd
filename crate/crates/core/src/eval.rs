//! Multilingual WER/CER scoring.
//!
//! Text is normalised with a deliberately small rule set (see
//! [`normalize_text`]), so scores are comparable only with other scores
//! produced by this crate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Language codes accepted by the scorer.
pub const LANGUAGES: [&str; 11] = ["en", "fr", "de", "it", "pt", "es", "ru", "vi", "ja", "ko", "th"];

/// Languages scored by character rather than by word.
pub const CHAR_LANGUAGES: [&str; 3] = ["ja", "ko", "th"];

/// Name written into every report header.
pub const NORMALIZER_NAME: &str = "simplified-v1 (lowercase, punctuation to space, collapse whitespace)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

pub fn unit_for(lang: &str) -> Result<Unit> {
    if CHAR_LANGUAGES.contains(&lang) {
        Ok(Unit::Char)
    } else if LANGUAGES.contains(&lang) {
        Ok(Unit::Word)
    } else {
        Err(Error::UnknownLanguage(lang.to_string()))
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¡' | '¿' | '«' | '»' | '‘' | '’' | '“' | '”' | '„' | '–' | '—' | '…' | '·'
                | '。' | '、' | '，' | '．' | '！' | '？' | '：' | '；' | '「' | '」' | '『' | '』'
                | '（' | '）' | '【' | '】' | '〜' | '・'
        )
}

/// Lowercases, turns ASCII punctuation and a fixed set of common Unicode
/// punctuation marks into spaces, collapses whitespace runs and trims.
pub fn normalize_text(s: &str) -> String {
    let mapped: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimum-edit alignment counts. Among alignments with the fewest edits,
/// the one with the most substitutions wins, so a wrong unit is counted as
/// one substitution rather than a deletion plus an insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // (edits, -substitutions) minimised lexicographically; both are additive.
    let key = |c: &EditCounts| (c.errors(), usize::MAX - c.substitutions);
    let mut prev: Vec<EditCounts> = (0..=m)
        .map(|j| EditCounts {
            insertions: j,
            ..Default::default()
        })
        .collect();
    let mut cur = vec![EditCounts::default(); m + 1];
    for i in 1..=n {
        cur[0] = EditCounts {
            deletions: i,
            ..Default::default()
        };
        for j in 1..=m {
            let mut diag = prev[j - 1];
            if reference[i - 1] != hypothesis[j - 1] {
                diag.substitutions += 1;
            }
            let mut del = prev[j];
            del.deletions += 1;
            let mut ins = cur[j - 1];
            ins.insertions += 1;
            cur[j] = [diag, del, ins].into_iter().min_by_key(key).unwrap();
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Splits normalised text into scoring units.
/// Fraction of reference tokens matched under the best alignment,
/// `(N - S - D) / N`, pooled over all pairs.
pub fn token_accuracy<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for (r, h) in pairs {
        let c = edit_distance(r, h);
        hits += r.len() - c.substitutions - c.deletions;
        total += r.len();
    }
    if total == 0 {
        return Err(Error::Empty("reference tokens"));
    }
    Ok(hits as f64 / total as f64)
}

pub fn tokenize(normalized: &str, unit: Unit) -> Vec<String> {
    match unit {
        Unit::Word => normalized.split_whitespace().map(str::to_string).collect(),
        Unit::Char => normalized
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string())
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub utt_id: String,
    pub lang: String,
    pub reference: String,
    pub hypothesis: String,
    pub unit: Unit,
    #[serde(flatten)]
    pub counts: EditCounts,
    pub ref_len: usize,
}

impl ScoredUtterance {
    /// `(S + D + I) / max(1, ref_len)`.
    pub fn error_rate(&self) -> f64 {
        self.counts.errors() as f64 / self.ref_len.max(1) as f64
    }

    pub fn empty_reference(&self) -> bool {
        self.ref_len == 0
    }
}

pub fn score_utterance(utt_id: &str, reference: &str, hypothesis: &str, lang: &str) -> Result<ScoredUtterance> {
    let unit = unit_for(lang)?;
    let (r, h) = (normalize_text(reference), normalize_text(hypothesis));
    let (ru, hu) = (tokenize(&r, unit), tokenize(&h, unit));
    Ok(ScoredUtterance {
        utt_id: utt_id.to_string(),
        lang: lang.to_string(),
        reference: r,
        hypothesis: h,
        unit,
        counts: edit_distance(&ru, &hu),
        ref_len: ru.len(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub utterances: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub rate: f64,
}

impl RateSummary {
    fn add(&mut self, s: &ScoredUtterance) {
        self.utterances += 1;
        self.substitutions += s.counts.substitutions;
        self.deletions += s.counts.deletions;
        self.insertions += s.counts.insertions;
        self.ref_len += s.ref_len;
    }

    fn finish(&mut self) {
        let errors = self.substitutions + self.deletions + self.insertions;
        self.rate = errors as f64 / self.ref_len.max(1) as f64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangSummary {
    pub unit: Unit,
    #[serde(flatten)]
    pub summary: RateSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalizer: String,
    pub per_lang: BTreeMap<String, LangSummary>,
    /// Pooled over all utterances: summed errors over summed reference length.
    pub overall: RateSummary,
    /// Utterances whose normalised reference was empty (rate uses a length floor of 1).
    pub empty_references: Vec<String>,
}

pub fn aggregate(scored: &[ScoredUtterance]) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::Empty("scored utterance list"));
    }
    let mut per_lang: BTreeMap<String, LangSummary> = BTreeMap::new();
    let mut overall = RateSummary::default();
    let mut empty_references = Vec::new();
    for s in scored {
        per_lang
            .entry(s.lang.clone())
            .or_insert_with(|| LangSummary {
                unit: s.unit,
                summary: RateSummary::default(),
            })
            .summary
            .add(s);
        overall.add(s);
        if s.empty_reference() {
            empty_references.push(s.utt_id.clone());
        }
    }
    per_lang.values_mut().for_each(|l| l.summary.finish());
    overall.finish();
    Ok(EvalReport {
        normalizer: NORMALIZER_NAME.to_string(),
        per_lang,
        overall,
        empty_references,
    })
}

impl EvalReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "normalizer: {}", self.normalizer);
        let _ = writeln!(out, "| lang | unit | utts | ref | S | D | I | rate (%) |");
        let _ = writeln!(out, "|------|------|------|-----|---|---|---|----------|");
        let row = |out: &mut String, name: &str, unit: &str, s: &RateSummary| {
            let _ = writeln!(
                out,
                "| {name} | {unit} | {} | {} | {} | {} | {} | {:.2} |",
                s.utterances,
                s.ref_len,
                s.substitutions,
                s.deletions,
                s.insertions,
                100.0 * s.rate
            );
        };
        for (lang, l) in &self.per_lang {
            let unit = match l.unit {
                Unit::Word => "word",
                Unit::Char => "char",
            };
            row(&mut out, lang, unit, &l.summary);
        }
        row(&mut out, "overall", "-", &self.overall);
        if !self.empty_references.is_empty() {
            let _ = writeln!(
                out,
                "note: {} utterance(s) with empty references scored with a length floor of 1",
                self.empty_references.len()
            );
        }
        out
    }
}

/// One record of the structured scoring input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub utt_id: String,
    pub lang: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "hyp")]
    pub hypothesis: String,
}

pub fn score_records(records: &[TranscriptRecord]) -> Result<Vec<ScoredUtterance>> {
    records
        .iter()
        .map(|r| score_utterance(&r.utt_id, &r.reference, &r.hypothesis, &r.lang))
        .collect()
}

/// Reads `{utt_id, lang, ref, hyp}` records, one JSON object per line.
pub fn read_transcript_records(path: &Path) -> Result<Vec<TranscriptRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format("transcript records", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Reads line-aligned reference, hypothesis and language files.
pub fn read_aligned_transcripts(refs: &Path, hyps: &Path, langs: &Path) -> Result<Vec<TranscriptRecord>> {
    let read = |p: &Path| -> Result<Vec<String>> { Ok(fs::read_to_string(p)?.lines().map(str::to_string).collect()) };
    let (r, h, l) = (read(refs)?, read(hyps)?, read(langs)?);
    if r.len() != h.len() || r.len() != l.len() {
        return Err(Error::format(
            "aligned transcripts",
            format!("{} references, {} hypotheses, {} languages", r.len(), h.len(), l.len()),
        ));
    }
    Ok(r.into_iter()
        .zip(h)
        .zip(l)
        .enumerate()
        .map(|(i, ((reference, hypothesis), lang))| TranscriptRecord {
            utt_id: format!("line{:05}", i + 1),
            lang: lang.trim().to_string(),
            reference,
            hypothesis,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("Hello,  WORLD!"), "hello world");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  ¿Qué tal?  "), "qué tal");
        assert_eq!(normalize_text("こんにちは。世界"), "こんにちは 世界");
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&["a", "b"], &["a", "b"]), EditCounts::default());
        let c = edit_distance(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
        let c = edit_distance(&["a", "b"], &[] as &[&str]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 2, 0));
        let c = edit_distance(&[] as &[&str], &["a"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 0, 1));
        // Same edit count either way; substitutions are preferred.
        let c = edit_distance(&["a", "b"], &["b", "c"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (2, 0, 0));
    }

    #[test]
    fn routing_covers_eleven_languages() {
        let chars: Vec<_> = LANGUAGES.iter().filter(|l| unit_for(l).unwrap() == Unit::Char).collect();
        assert_eq!(chars, [&"ja", &"ko", &"th"]);
        assert!(matches!(unit_for("zh"), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn utterance_scores() {
        for lang in LANGUAGES {
            assert_eq!(score_utterance("u", "ba di", "ba di", lang).unwrap().error_rate(), 0.0);
            assert_eq!(score_utterance("u", "ba di", "", lang).unwrap().error_rate(), 1.0);
        }
        assert_eq!(score_utterance("u", "ab cd", "abcd", "ja").unwrap().error_rate(), 0.0);
        assert_eq!(score_utterance("u", "a b c d", "a b c", "en").unwrap().error_rate(), 0.25);
        let s = score_utterance("u", "!!", "x y", "en").unwrap();
        assert!(s.empty_reference());
        assert_eq!(s.error_rate(), 2.0);
    }

    #[test]
    fn pooled_aggregation() {
        let mk = |lang: &str, errs: usize, len: usize| ScoredUtterance {
            utt_id: format!("{lang}{len}"),
            lang: lang.into(),
            reference: String::new(),
            hypothesis: String::new(),
            unit: unit_for(lang).unwrap(),
            counts: EditCounts {
                substitutions: errs,
                ..Default::default()
            },
            ref_len: len,
        };
        let r = aggregate(&[mk("en", 1, 10), mk("ja", 3, 10)]).unwrap();
        assert!((r.overall.rate - 0.2).abs() < 1e-15);
        let r = aggregate(&[mk("en", 1, 1), mk("fr", 0, 100)]).unwrap();
        let mean = (r.per_lang["en"].summary.rate + r.per_lang["fr"].summary.rate) / 2.0;
        assert!((r.overall.rate - 1.0 / 101.0).abs() < 1e-15);
        assert!((mean - 0.5).abs() < 1e-15);
        let single = aggregate(&[mk("de", 2, 8)]).unwrap();
        assert_eq!(single.overall.rate, 0.25);
        assert!(matches!(aggregate(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn report_table_lists_languages() {
        let s = vec![
            score_utterance("1", "ba di", "ba du", "en").unwrap(),
            score_utterance("2", "badi", "badi", "th").unwrap(),
        ];
        let t = aggregate(&s).unwrap().to_table();
        assert!(t.contains("| en | word | 1 | 2 | 1 | 0 | 0 | 50.00 |"));
        assert!(t.contains("| th | char | 1 | 4 | 0 | 0 | 0 | 0.00 |"));
        assert!(t.contains("| overall | - | 2 | 6 | 1 | 0 | 0 | 16.67 |"));
    }
}
