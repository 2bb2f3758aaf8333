//! Deductive coding of participant messages against the stigma codebook.
//!
//! Each message is classified with a lettered multiple-choice prompt
//! (codebook constraints first, then context), sampled five times at
//! temperature 0, and resolved by plurality vote. The comparison harness
//! scores coders against human reference codes.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

use crate::gateway::{labelled_subject, ChatRequest, Gateway, GatewayError, MockHandler};
use crate::model::{plurality, CodeLabel, CodedMessage, Coder, Message, Vote};
use crate::stats::{
    agreement_matrix, cochran_q, cohens_kappa, mcnemar, per_label_kappa, AgreementMatrix,
    CochranQResult, McNemarResult, McNemarVariant, Stat, StatsError,
};

pub const VOTES_PER_MESSAGE: u32 = 5;
pub const ROLE_PREAMBLE: &str = "You are a competent coder for depression stigma.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookExample {
    pub excerpt: String,
    pub label: CodeLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub definition: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub rules: Vec<String>,
    #[serde(default)]
    pub examples: Vec<CodebookExample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCodebook")]
pub struct Codebook {
    pub labels: BTreeMap<CodeLabel, CodebookEntry>,
}

#[derive(Deserialize)]
struct RawCodebook {
    labels: BTreeMap<CodeLabel, CodebookEntry>,
}

impl TryFrom<RawCodebook> for Codebook {
    type Error = String;

    fn try_from(raw: RawCodebook) -> Result<Self, Self::Error> {
        let cb = Codebook { labels: raw.labels };
        cb.check()?;
        Ok(cb)
    }
}

impl Codebook {
    pub fn check(&self) -> Result<(), String> {
        let missing: Vec<_> = CodeLabel::ALL
            .iter()
            .filter(|l| !self.labels.contains_key(l))
            .map(|l| l.name())
            .collect();
        if !missing.is_empty() {
            return Err(format!("codebook is missing labels: {}", missing.join(", ")));
        }
        Ok(())
    }

    /// The codebook shipped with the crate.
    pub fn default_stigma() -> Self {
        serde_json::from_str(include_str!("../assets/codebook.json")).expect("bundled codebook")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub examples_per_label: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            examples_per_label: 3,
        }
    }
}

/// The four prompt sections, kept separate so their order is checkable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingPrompt {
    pub role_preamble: String,
    pub constraints_block: String,
    pub context_block: String,
    pub output_format_spec: String,
}

impl CodingPrompt {
    pub fn build(
        codebook: &Codebook,
        vignette: &str,
        question: &str,
        message_text: &str,
        opts: &PromptOptions,
    ) -> Self {
        let mut constraints = String::from(
            "Constraints:\nSelect the single most appropriate code for the participant message from the lettered options below.\n",
        );
        for label in CodeLabel::ALL {
            let entry = &codebook.labels[&label];
            constraints.push_str(&format!("\n{}. {}\n", label.letter(), label.name()));
            constraints.push_str(&format!("   Definition: {}\n", entry.definition));
            if !entry.keywords.is_empty() {
                constraints.push_str(&format!("   Keywords: {}\n", entry.keywords.join("; ")));
            }
            if !entry.rules.is_empty() {
                constraints.push_str("   Rules:\n");
                for r in &entry.rules {
                    constraints.push_str(&format!("   - {r}\n"));
                }
            }
            let examples: Vec<_> = entry
                .examples
                .iter()
                .take(opts.examples_per_label)
                .collect();
            if !examples.is_empty() {
                constraints.push_str("   Examples:\n");
                for ex in examples {
                    constraints.push_str(&format!("   - \"{}\" -> {}\n", ex.excerpt, ex.label.letter()));
                }
            }
        }
        let context_block = format!(
            "Context:\nVignette: {vignette}\nChatbot question: {question}\nParticipant message: <<<{message_text}>>>\n\nWhat is your prediction for the code of this participant message?\n"
        );
        let output_format_spec = "Output format:\nAnswer: <one letter A-H>\nExplanation: <one sentence>\n".to_string();
        CodingPrompt {
            role_preamble: ROLE_PREAMBLE.to_string(),
            constraints_block: constraints,
            context_block,
            output_format_spec,
        }
    }

    pub fn to_request(&self, n_samples: u32) -> ChatRequest {
        let user = format!(
            "{}\n{}\n{}",
            self.constraints_block, self.output_format_spec, self.context_block
        );
        ChatRequest::new(self.role_preamble.clone(), user)
            .temperature(0.0)
            .max_tokens(200)
            .samples(n_samples)
    }
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*\**answer\**\s*[:\-]?\s*\(?([A-H])\)?(?:[^A-Za-z]|$)").unwrap())
}

fn leading_letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\(?([A-Ha-h])\)?(?:[.):\s]|$)").unwrap())
}

fn explanation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)explanation\s*[:\-]\s*(.*)").unwrap())
}

/// Extracts the chosen label and explanation from one completion.
pub fn parse_vote(sample: &str) -> (Vote, String) {
    let letter = answer_re()
        .captures(sample)
        .or_else(|| leading_letter_re().captures(sample))
        .and_then(|c| c[1].chars().next())
        .and_then(CodeLabel::from_letter);
    let explanation = explanation_re()
        .captures(sample)
        .map(|c| c[1].trim().to_string())
        .unwrap_or_else(|| sample.trim().to_string());
    match letter {
        Some(l) => (Vote::Label(l), explanation),
        None => (Vote::Abstain, explanation),
    }
}

#[derive(Debug, Error)]
pub enum CodingError {
    #[error("all {0} samples for message {1} were unparseable")]
    AllAbstained(usize, String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Samples `n` classifications and returns votes, explanations and the
/// plurality label.
pub fn classify(
    gateway: &Gateway,
    codebook: &Codebook,
    vignette: &str,
    question: &str,
    text: &str,
    n: u32,
) -> Result<(Vec<Vote>, Vec<String>, Option<CodeLabel>), CodingError> {
    let prompt = CodingPrompt::build(codebook, vignette, question, text, &PromptOptions::default());
    let samples = gateway.chat(&prompt.to_request(n))?;
    let (votes, explanations): (Vec<_>, Vec<_>) = samples.iter().map(|s| parse_vote(s)).unzip();
    let label = plurality(&votes);
    Ok((votes, explanations, label))
}

/// Five-vote majority coding of one message.
pub fn code_message(
    gateway: &Gateway,
    msg: &Message,
    codebook: &Codebook,
    vignette: &str,
    question_script: &str,
) -> Result<CodedMessage, CodingError> {
    let (votes, explanations, label) = classify(
        gateway,
        codebook,
        vignette,
        question_script,
        &msg.text,
        VOTES_PER_MESSAGE,
    )?;
    let final_label =
        label.ok_or_else(|| CodingError::AllAbstained(votes.len(), msg.message_id.clone()))?;
    Ok(CodedMessage {
        message_id: msg.message_id.clone(),
        votes,
        explanations,
        final_label,
        coder: Coder::Llm,
    })
}

/// Codes every message in parallel under the gateway limit, in input order.
pub fn code_corpus(
    gateway: &Gateway,
    messages: &[Message],
    codebook: &Codebook,
    vignette: &str,
    question_for: impl Fn(&Message) -> String + Sync,
) -> Vec<Result<CodedMessage, CodingError>> {
    gateway.map_limited(messages, |m| {
        code_message(gateway, m, codebook, vignette, &question_for(m))
    })
}

/// Offline coder used with the mock backend: picks the label whose most
/// specific (longest) codebook keyword occurs in the participant message,
/// defaulting to NonStigmatizing.
pub fn keyword_label(codebook: &Codebook, text: &str) -> CodeLabel {
    let lower = text.to_lowercase();
    let mut best: Option<(usize, CodeLabel)> = None;
    for (label, entry) in &codebook.labels {
        let score = entry
            .keywords
            .iter()
            .filter(|k| lower.contains(&k.to_lowercase()))
            .map(|k| k.len())
            .max();
        if let Some(s) = score {
            if best.map_or(true, |(b, bl)| s > b || (s == b && label.index() < bl.index())) {
                best = Some((s, *label));
            }
        }
    }
    best.map(|(_, l)| l).unwrap_or(CodeLabel::NonStigmatizing)
}

pub fn mock_coding_handler(codebook: Codebook) -> MockHandler {
    Arc::new(move |req, _| {
        if req.system_prompt != ROLE_PREAMBLE {
            return None;
        }
        let text = labelled_subject(&req.user_prompt, "Participant message:")?;
        let label = keyword_label(&codebook, text);
        Some(format!(
            "Answer: {}\nExplanation: keyword match for {}.",
            label.letter(),
            label.name()
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub n: usize,
    pub kappa: Stat,
    pub matrix: AgreementMatrix,
    pub per_label: BTreeMap<CodeLabel, Stat>,
}

fn align<'a>(
    reference: &'a [CodedMessage],
    candidate: &'a [CodedMessage],
) -> Result<(Vec<CodeLabel>, Vec<CodeLabel>), CodingError> {
    let cand: BTreeMap<&str, CodeLabel> = candidate
        .iter()
        .map(|c| (c.message_id.as_str(), c.final_label))
        .collect();
    let missing: Vec<&str> = reference
        .iter()
        .filter(|r| !cand.contains_key(r.message_id.as_str()))
        .map(|r| r.message_id.as_str())
        .collect();
    let ref_ids: BTreeSet<&str> = reference.iter().map(|r| r.message_id.as_str()).collect();
    let extra: Vec<&str> = cand.keys().filter(|k| !ref_ids.contains(*k)).copied().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CodingError::Input(format!(
            "coverage mismatch; missing: [{}]; unexpected: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let mut sorted: Vec<&CodedMessage> = reference.iter().collect();
    sorted.sort_by(|a, b| a.message_id.cmp(&b.message_id));
    let r = sorted.iter().map(|c| c.final_label).collect();
    let c = sorted.iter().map(|c| cand[c.message_id.as_str()]).collect();
    Ok((r, c))
}

/// κ, agreement matrix and per-label κ between two coded sets.
pub fn kappa_report(
    reference: &[CodedMessage],
    candidate: &[CodedMessage],
) -> Result<KappaReport, CodingError> {
    let (r, c) = align(reference, candidate)?;
    let matrix = agreement_matrix(&r, &c)?;
    Ok(KappaReport {
        n: r.len(),
        kappa: cohens_kappa(&r, &c)?,
        per_label: per_label_kappa(&matrix),
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub name: String,
    pub kappa: Stat,
    pub accuracy: f64,
    pub per_label_kappa: BTreeMap<CodeLabel, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub mcnemar: McNemarResult,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_items: usize,
    pub alpha: f64,
    /// α divided by the number of pairwise tests.
    pub bonferroni_threshold: f64,
    pub candidates: Vec<CandidateSummary>,
    pub pairwise: Vec<PairwiseTest>,
    pub cochran_q: Option<CochranQResult>,
}

/// Scores named candidate coders against human codes.
///
/// Correctness of a candidate on an item is agreement with the human code.
/// Pairwise McNemar tests are Bonferroni-corrected; Cochran's Q is reported
/// when at least two candidates are given.
pub fn compare_classifiers(
    human: &[CodedMessage],
    candidates: &[(String, Vec<CodedMessage>)],
    alpha: f64,
    variant: McNemarVariant,
) -> Result<ComparisonReport, CodingError> {
    if candidates.is_empty() {
        return Err(CodingError::Input("no candidate code sets given".into()));
    }
    let mut summaries = Vec::new();
    let mut correctness: Vec<Vec<bool>> = Vec::new();
    let mut n_items = 0;
    for (name, codes) in candidates {
        let (r, c) = align(human, codes)
            .map_err(|e| CodingError::Input(format!("candidate {name}: {e}")))?;
        n_items = r.len();
        let correct: Vec<bool> = r.iter().zip(&c).map(|(a, b)| a == b).collect();
        let matrix = agreement_matrix(&r, &c)?;
        summaries.push(CandidateSummary {
            name: name.clone(),
            kappa: cohens_kappa(&r, &c)?,
            accuracy: correct.iter().filter(|&&x| x).count() as f64 / correct.len() as f64,
            per_label_kappa: per_label_kappa(&matrix),
        });
        correctness.push(correct);
    }
    let n_pairs = candidates.len() * (candidates.len() - 1) / 2;
    let threshold = if n_pairs == 0 { alpha } else { alpha / n_pairs as f64 };
    let mut pairwise = Vec::new();
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            let m = mcnemar(&correctness[i], &correctness[j], variant)?;
            pairwise.push(PairwiseTest {
                a: candidates[i].0.clone(),
                b: candidates[j].0.clone(),
                significant: m.p_value.value().is_some_and(|p| p < threshold),
                mcnemar: m,
            });
        }
    }
    let cochran = if candidates.len() >= 2 {
        Some(cochran_q(&correctness)?)
    } else {
        None
    };
    Ok(ComparisonReport {
        n_items,
        alpha,
        bonferroni_threshold: threshold,
        candidates: summaries,
        pairwise,
        cochran_q: cochran,
    })
}
