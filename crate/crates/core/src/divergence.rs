// SPDX-License-Identifier: MIT OR Apache-2.0

//! Top-k next-token KL divergence and token-shift tables.
//!
//! Both distributions are restricted to the reference's `k` most likely
//! token ids and renormalized on that shared support. Candidate tokens that
//! are missing from the candidate table get a floor probability (1e-12 by
//! default) before renormalization. Logarithms are natural.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_FLOOR: f64 = 1e-12;
pub const SUPPORT_RULE: &str =
    "reference top-k token ids; both sides renormalized on that support; missing candidate mass floored at 1e-12";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextTag {
    ReferenceEn,
    MixedUnsteered,
    Steered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token_id: u32,
    pub token_text: String,
    pub logprob: f64,
}

/// Truncated next-token distribution, most likely token first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKDistribution {
    entries: Vec<TokenEntry>,
    context_tag: ContextTag,
}

impl TopKDistribution {
    /// Validates the entries and sorts them by descending probability
    /// (ties by ascending token id).
    pub fn new(mut entries: Vec<TokenEntry>, context_tag: ContextTag) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Distribution("empty distribution".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        let mut mass = 0.0;
        for e in &entries {
            if !e.logprob.is_finite() {
                return Err(Error::Distribution(format!(
                    "token {} has non-finite logprob",
                    e.token_id
                )));
            }
            if e.logprob > 1e-9 {
                return Err(Error::Distribution(format!(
                    "token {} has positive logprob {}",
                    e.token_id, e.logprob
                )));
            }
            if !seen.insert(e.token_id) {
                return Err(Error::Distribution(format!(
                    "duplicate token id {}",
                    e.token_id
                )));
            }
            mass += e.logprob.exp();
        }
        if mass > 1.0 + 1e-6 {
            return Err(Error::Distribution(format!(
                "probabilities sum to {mass} > 1"
            )));
        }
        entries.sort_by(|a, b| {
            b.logprob
                .total_cmp(&a.logprob)
                .then(a.token_id.cmp(&b.token_id))
        });
        Ok(Self {
            entries,
            context_tag,
        })
    }

    /// Builds a distribution from `(token_id, probability)` pairs; token
    /// texts are left empty.
    pub fn from_probs(probs: &[(u32, f64)], context_tag: ContextTag) -> Result<Self> {
        Self::new(
            probs
                .iter()
                .map(|&(token_id, p)| TokenEntry {
                    token_id,
                    token_text: String::new(),
                    logprob: p.ln(),
                })
                .collect(),
            context_tag,
        )
    }

    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn context_tag(&self) -> ContextTag {
        self.context_tag
    }
}

/// KL(reference ‖ candidate) on the reference's top-k support.
pub fn kl_topk(
    reference: &TopKDistribution,
    candidate: &TopKDistribution,
    k: usize,
) -> Result<f64> {
    kl_topk_with_floor(reference, candidate, k, DEFAULT_FLOOR)
}

pub fn kl_topk_with_floor(
    reference: &TopKDistribution,
    candidate: &TopKDistribution,
    k: usize,
    floor: f64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > reference.k() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds reference support of {}",
            reference.k()
        )));
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidArgument("floor must be positive".into()));
    }
    let support = &reference.entries[..k];
    let cand: HashMap<u32, f64> = candidate
        .entries
        .iter()
        .map(|e| (e.token_id, e.logprob))
        .collect();

    let p: Vec<f64> = support.iter().map(|e| e.logprob.exp()).collect();
    let q: Vec<f64> = support
        .iter()
        .map(|e| {
            cand.get(&e.token_id)
                .map_or(floor, |lp| lp.exp().max(floor))
        })
        .collect();
    let p_sum: f64 = p.iter().sum();
    let q_sum: f64 = q.iter().sum();
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            let pn = pi / p_sum;
            if pn == 0.0 {
                0.0
            } else {
                pn * (pn / (qi / q_sum)).ln()
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// One line of a distribution JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRecord {
    #[serde(deserialize_with = "de_sample_id")]
    pub sample_id: String,
    pub context_tag: ContextTag,
    pub k: usize,
    pub entries: Vec<TokenEntry>,
}

fn de_sample_id<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Int(i64),
        Str(String),
    }
    Ok(match Id::deserialize(d)? {
        Id::Int(i) => i.to_string(),
        Id::Str(s) => s,
    })
}

impl DistributionRecord {
    pub fn new(sample_id: impl Into<String>, dist: &TopKDistribution) -> Self {
        Self {
            sample_id: sample_id.into(),
            context_tag: dist.context_tag,
            k: dist.k(),
            entries: dist.entries.clone(),
        }
    }

    pub fn distribution(&self) -> Result<TopKDistribution> {
        if self.k != self.entries.len() {
            return Err(Error::Distribution(format!(
                "sample {}: k = {} but {} entries",
                self.sample_id,
                self.k,
                self.entries.len()
            )));
        }
        TopKDistribution::new(self.entries.clone(), self.context_tag)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Parses JSONL text; blank lines are skipped, errors carry 1-based line numbers.
pub fn parse_jsonl(text: &str) -> Result<Vec<DistributionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DistributionRecord = serde_json::from_str(line).map_err(|e| Error::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.distribution().map_err(|e| Error::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<DistributionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::Line { line, message } => Error::Line {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn to_jsonl(records: &[DistributionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

/// Reference, unsteered and (optionally) steered distributions of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriple {
    pub sample_id: String,
    pub reference: TopKDistribution,
    pub unsteered: TopKDistribution,
    pub steered: Option<TopKDistribution>,
}

/// Groups records by sample id (first-appearance order) and assigns roles by
/// context tag. Every sample needs a reference and a mixed distribution;
/// steered distributions must be present for all samples or none.
pub fn triples_from_tagged(records: &[DistributionRecord]) -> Result<Vec<SampleTriple>> {
    let mut order: Vec<&str> = Vec::new();
    let mut slots: HashMap<&str, [Option<TopKDistribution>; 3]> = HashMap::new();
    for r in records {
        let slot = slots.entry(&r.sample_id).or_insert_with(|| {
            order.push(&r.sample_id);
            [None, None, None]
        });
        let idx = match r.context_tag {
            ContextTag::ReferenceEn => 0,
            ContextTag::MixedUnsteered => 1,
            ContextTag::Steered => 2,
        };
        if slot[idx].is_some() {
            return Err(Error::Distribution(format!(
                "sample {} has two {:?} records",
                r.sample_id, r.context_tag
            )));
        }
        slot[idx] = Some(r.distribution()?);
    }
    let mut triples = Vec::with_capacity(order.len());
    for id in order {
        let [reference, unsteered, steered] = slots.remove(id).expect("ordered ids are present");
        let missing =
            |what: &str| Error::Distribution(format!("sample {id} lacks a {what} record"));
        triples.push(SampleTriple {
            sample_id: id.to_string(),
            reference: reference.ok_or_else(|| missing("reference_en"))?,
            unsteered: unsteered.ok_or_else(|| missing("mixed_unsteered"))?,
            steered,
        });
    }
    check_steered_consistency(&triples)?;
    Ok(triples)
}

/// Pairs records from separate files by sample id, ignoring context tags.
/// Samples follow the reference file's order.
pub fn triples_from_roles(
    reference: &[DistributionRecord],
    unsteered: &[DistributionRecord],
    steered: Option<&[DistributionRecord]>,
) -> Result<Vec<SampleTriple>> {
    let index =
        |records: &[DistributionRecord], role: &str| -> Result<HashMap<String, TopKDistribution>> {
            let mut map = HashMap::new();
            for r in records {
                if map.insert(r.sample_id.clone(), r.distribution()?).is_some() {
                    return Err(Error::Distribution(format!(
                        "{role} file repeats sample {}",
                        r.sample_id
                    )));
                }
            }
            Ok(map)
        };
    let mut unsteered = index(unsteered, "candidate")?;
    let mut steered = steered.map(|s| index(s, "steered")).transpose()?;
    let mut triples = Vec::with_capacity(reference.len());
    let mut seen = std::collections::HashSet::new();
    for r in reference {
        if !seen.insert(r.sample_id.clone()) {
            return Err(Error::Distribution(format!(
                "reference file repeats sample {}",
                r.sample_id
            )));
        }
        let cand = unsteered.remove(&r.sample_id).ok_or_else(|| {
            Error::Distribution(format!("candidate file lacks sample {}", r.sample_id))
        })?;
        let st = match steered.as_mut() {
            Some(map) => Some(map.remove(&r.sample_id).ok_or_else(|| {
                Error::Distribution(format!("steered file lacks sample {}", r.sample_id))
            })?),
            None => None,
        };
        triples.push(SampleTriple {
            sample_id: r.sample_id.clone(),
            reference: r.distribution()?,
            unsteered: cand,
            steered: st,
        });
    }
    Ok(triples)
}

fn check_steered_consistency(triples: &[SampleTriple]) -> Result<()> {
    let with = triples.iter().filter(|t| t.steered.is_some()).count();
    if with != 0 && with != triples.len() {
        return Err(Error::Distribution(format!(
            "{with} of {} samples have steered records",
            triples.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleKl {
    pub sample_id: String,
    pub kl_unsteered: f64,
    pub kl_steered: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLReport {
    pub language_pair: Vec<String>,
    pub strength: Option<f64>,
    pub k: usize,
    pub support_rule: String,
    pub log_base: String,
    pub samples: Vec<SampleKl>,
    pub mean_unsteered: f64,
    pub mean_steered: Option<f64>,
}

impl KLReport {
    pub fn compute(
        triples: &[SampleTriple],
        k: usize,
        language_pair: Vec<String>,
        strength: Option<f64>,
    ) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        check_steered_consistency(triples)?;
        let samples = triples
            .iter()
            .map(|t| {
                let kl_unsteered = kl_topk(&t.reference, &t.unsteered, k)
                    .map_err(|e| Error::Distribution(format!("sample {}: {e}", t.sample_id)))?;
                let kl_steered = t
                    .steered
                    .as_ref()
                    .map(|s| kl_topk(&t.reference, s, k))
                    .transpose()
                    .map_err(|e| Error::Distribution(format!("sample {}: {e}", t.sample_id)))?;
                Ok(SampleKl {
                    sample_id: t.sample_id.clone(),
                    kl_unsteered,
                    kl_steered,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = samples.len() as f64;
        let mean_unsteered = samples.iter().map(|s| s.kl_unsteered).sum::<f64>() / n;
        let mean_steered = samples
            .iter()
            .map(|s| s.kl_steered)
            .sum::<Option<f64>>()
            .map(|total| total / n);
        Ok(Self {
            language_pair,
            strength,
            k,
            support_rule: SUPPORT_RULE.into(),
            log_base: "e".into(),
            samples,
            mean_unsteered,
            mean_steered,
        })
    }

    pub fn pair_label(&self) -> String {
        if self.language_pair.is_empty() {
            "-".into()
        } else {
            self.language_pair.join("-")
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,kl_unsteered,kl_steered\n");
        for s in &self.samples {
            let steered = s.kl_steered.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{}",
                csv_field(&s.sample_id),
                s.kl_unsteered,
                steered
            );
        }
        out
    }

    /// `pair  unsteered → steered`, two decimals.
    pub fn summary_row(&self) -> String {
        match self.mean_steered {
            Some(st) => format!(
                "{}\t{:.2} → {:.2}",
                self.pair_label(),
                self.mean_unsteered,
                st
            ),
            None => format!("{}\t{:.2}", self.pair_label(), self.mean_unsteered),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReduction {
    pub language_pair: String,
    pub unsteered: f64,
    pub steered: f64,
    pub reduction: f64,
    /// Set when the unsteered baseline is zero and the reduction is reported as 0.
    pub zero_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub pairs: Vec<PairReduction>,
    pub macro_average: f64,
}

/// Relative reduction `(before - after) / before` for each pair.
pub fn pair_reduction(language_pair: &str, unsteered: f64, steered: f64) -> PairReduction {
    let zero_baseline = unsteered <= 0.0;
    PairReduction {
        language_pair: language_pair.to_string(),
        unsteered,
        steered,
        reduction: if zero_baseline {
            0.0
        } else {
            (unsteered - steered) / unsteered
        },
        zero_baseline,
    }
}

pub fn summarize_reductions(pairs: Vec<PairReduction>) -> Result<ReductionSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty report".into()));
    }
    let macro_average = pairs.iter().map(|p| p.reduction).sum::<f64>() / pairs.len() as f64;
    Ok(ReductionSummary {
        pairs,
        macro_average,
    })
}

pub fn reduction_summary(reports: &[KLReport]) -> Result<ReductionSummary> {
    let pairs = reports
        .iter()
        .map(|r| {
            let steered = r.mean_steered.ok_or_else(|| {
                Error::InvalidArgument(format!("report {} has no steered values", r.pair_label()))
            })?;
            Ok(pair_reduction(&r.pair_label(), r.mean_unsteered, steered))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_reductions(pairs)
}

/// Top-n token texts of the three contexts, rank by rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenShiftTable {
    pub original: Vec<String>,
    pub unsteered: Vec<String>,
    pub steered: Vec<String>,
}

pub fn token_shift_table(
    reference: &TopKDistribution,
    unsteered: &TopKDistribution,
    steered: &TopKDistribution,
    n: usize,
) -> Result<TokenShiftTable> {
    let smallest = reference.k().min(unsteered.k()).min(steered.k());
    if n == 0 || n > smallest {
        return Err(Error::InvalidArgument(format!(
            "n = {n} outside 1..={smallest}"
        )));
    }
    let top = |d: &TopKDistribution| -> Vec<String> {
        d.entries[..n]
            .iter()
            .map(|e| e.token_text.clone())
            .collect()
    };
    Ok(TokenShiftTable {
        original: top(reference),
        unsteered: top(unsteered),
        steered: top(steered),
    })
}

impl TokenShiftTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,original,unsteered,steered\n");
        for i in 0..self.original.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                i + 1,
                csv_field(&self.original[i]),
                csv_field(&self.unsteered[i]),
                csv_field(&self.steered[i])
            );
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
