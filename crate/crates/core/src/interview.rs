//! Interview session state machine.
//!
//! A session moves through small talk, a vignette delivered in paragraphs,
//! a first block of attribution questions, a short break, the second block
//! and a satisfaction rating. Each answer may receive an active-listening
//! restatement and up to two follow-up questions. All randomness comes from
//! the session seed, and every generated turn is requested with a seed
//! derived from it, so a session replays identically against the mock
//! backend.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{classify, Codebook, CodingError};
use crate::gateway::{fnv1a, labelled_subject, ChatRequest, Gateway, GatewayError, MockHandler};
use crate::model::{word_count, AttributionType, CodeLabel, Message};

pub const FOLLOWUP_SEPARATOR: &str = " ||| ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Consent,
    Demographics,
    SmallTalk1,
    Vignette,
    Questions1,
    SmallTalk2,
    Questions2,
    Satisfaction,
    Debrief,
    Done,
}

impl Phase {
    /// Phases in which a participant message drives [`InterviewEngine::advance`].
    pub fn accepts_messages(self) -> bool {
        matches!(
            self,
            Phase::SmallTalk1 | Phase::Vignette | Phase::Questions1 | Phase::SmallTalk2 | Phase::Questions2
        )
    }

    pub fn is_closed(self) -> bool {
        matches!(self, Phase::Debrief | Phase::Done)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VignetteParagraph {
    pub text: String,
    /// Brief-response prompt shown after the paragraph; the session waits
    /// for a reply when present.
    #[serde(default)]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disclosure {
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowupExamples {
    pub reason: String,
    pub potential_results: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptPack {
    pub greeting: String,
    pub small_talk_prompts: Vec<String>,
    pub break_prompts: Vec<String>,
    pub vignette_paragraphs: Vec<VignetteParagraph>,
    pub question_scripts: BTreeMap<AttributionType, String>,
    pub self_disclosure: BTreeMap<AttributionType, Disclosure>,
    pub followup_examples: BTreeMap<AttributionType, FollowupExamples>,
    pub satisfaction_prompt: String,
    pub debrief_text: String,
}

impl ScriptPack {
    pub fn default_pack() -> Self {
        let pack: ScriptPack =
            serde_json::from_str(include_str!("../assets/scripts.json")).expect("bundled script pack");
        pack.check().expect("bundled script pack is complete");
        pack
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let pack: ScriptPack = serde_json::from_str(text).map_err(|e| e.to_string())?;
        pack.check()?;
        Ok(pack)
    }

    pub fn check(&self) -> Result<(), String> {
        for a in AttributionType::ALL {
            if !self.question_scripts.contains_key(&a) {
                return Err(format!("question_scripts lacks {a}"));
            }
            if !self.self_disclosure.contains_key(&a) {
                return Err(format!("self_disclosure lacks {a}"));
            }
            if !self.followup_examples.contains_key(&a) {
                return Err(format!("followup_examples lacks {a}"));
            }
        }
        if self.small_talk_prompts.is_empty() {
            return Err("small_talk_prompts is empty".into());
        }
        if self.break_prompts.is_empty() {
            return Err("break_prompts is empty".into());
        }
        if self.vignette_paragraphs.is_empty() {
            return Err("vignette_paragraphs is empty".into());
        }
        Ok(())
    }

    pub fn vignette_text(&self) -> String {
        self.vignette_paragraphs
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn intermittent_prompts(&self) -> usize {
        self.vignette_paragraphs.iter().filter(|p| p.prompt.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterviewConfig {
    pub min_length_threshold: usize,
    pub active_listening_min_words: usize,
    pub max_followups: u32,
    pub generation_temperature: f64,
    pub generation_max_tokens: u32,
}

impl Default for InterviewConfig {
    fn default() -> Self {
        InterviewConfig {
            min_length_threshold: 20,
            active_listening_min_words: 3,
            max_followups: 2,
            generation_temperature: 0.2,
            generation_max_tokens: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FollowupPlan {
    AskReason,
    AskPotentialResults,
    None,
}

/// Follow-up policy for one answer.
///
/// Emotion and responsibility questions probe for reasons when the answer
/// has fewer than `threshold` words. Behavioral questions probe for reasons
/// after a non-stigmatizing answer and for anticipated results after an
/// answer coded with the question's own attribution; a missing or unrelated
/// code asks nothing. No plan is issued once `asked` reaches `max`.
pub fn decide_followup(
    attribution: AttributionType,
    answer_words: usize,
    realtime_code: Option<CodeLabel>,
    asked: u32,
    threshold: usize,
    max: u32,
) -> FollowupPlan {
    if asked >= max {
        return FollowupPlan::None;
    }
    if attribution.is_emotion_or_responsibility() {
        return if answer_words < threshold {
            FollowupPlan::AskReason
        } else {
            FollowupPlan::None
        };
    }
    match realtime_code {
        Some(CodeLabel::NonStigmatizing) => FollowupPlan::AskReason,
        Some(code) if code.attribution() == Some(attribution) => FollowupPlan::AskPotentialResults,
        _ => FollowupPlan::None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtteranceKind {
    Greeting,
    SmallTalk,
    Vignette,
    VignettePrompt,
    SelfDisclosure,
    Question,
    ActiveListening,
    FollowUp,
    Satisfaction,
    Debrief,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BotUtterance {
    pub kind: UtteranceKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<AttributionType>,
}

impl BotUtterance {
    fn new(kind: UtteranceKind, text: impl Into<String>) -> Self {
        BotUtterance {
            kind,
            text: text.into(),
            attribution: None,
        }
    }

    fn about(kind: UtteranceKind, text: impl Into<String>, a: AttributionType) -> Self {
        BotUtterance {
            kind,
            text: text.into(),
            attribution: Some(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingAnswer {
    pub attribution: AttributionType,
    pub turn_index: u32,
    pub parts: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Satisfaction {
    pub likert: u8,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub participant_id: String,
    pub phase: Phase,
    pub question_order: Vec<AttributionType>,
    /// Number of questions in the first block.
    pub split_index: usize,
    /// Index into `question_order` of the question being asked or next due.
    pub current_question: usize,
    pub followups_asked: BTreeMap<AttributionType, u32>,
    pub rng_seed: u64,
    /// Position within the current small-talk or vignette sequence.
    pub step: usize,
    /// Participant turns received so far.
    pub turns: u32,
    pub pending: Option<PendingAnswer>,
    pub satisfaction: Option<Satisfaction>,
}

impl SessionState {
    pub fn check(&self) -> Result<(), String> {
        let mut sorted = self.question_order.clone();
        sorted.sort();
        if sorted != AttributionType::ALL.to_vec() {
            return Err("question_order is not a permutation of the attributions".into());
        }
        if !(1..=6).contains(&self.split_index) {
            return Err(format!("split_index {} outside 1..=6", self.split_index));
        }
        if let Some((a, n)) = self.followups_asked.iter().find(|(_, &n)| n > 2) {
            return Err(format!("{n} follow-ups asked for {a}"));
        }
        Ok(())
    }

    pub fn first_block(&self) -> &[AttributionType] {
        &self.question_order[..self.split_index]
    }

    pub fn second_block(&self) -> &[AttributionType] {
        &self.question_order[self.split_index..]
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session is closed")]
    Closed,
    #[error("session {0} already exists")]
    Duplicate(String),
    #[error("operation not valid in phase {0:?}")]
    WrongPhase(Phase),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Coding(#[from] CodingError),
}

/// Output of one transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub utterances: Vec<BotUtterance>,
    /// Primary answers finalized by this transition.
    pub completed: Vec<Message>,
}

/// Seeded question order and block split for a participant.
pub fn shuffle_questions(participant_id: &str, seed: u64) -> (Vec<AttributionType>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, participant_id.as_bytes()));
    let mut order = AttributionType::ALL.to_vec();
    order.shuffle(&mut rng);
    let split = if rng.gen_bool(0.5) { 3 } else { 4 };
    (order, split)
}

const LISTENING_SYSTEM: &str = "You are a friendly interview chatbot. Restate the participant's answer in one or two sentences and show that you understand it, without agreeing, disagreeing or adding opinions.";
const FOLLOWUP_SYSTEM: &str = "You are a friendly interview chatbot. Ask exactly one short, neutral follow-up question.";

pub struct InterviewEngine {
    pub gateway: Arc<Gateway>,
    pub pack: ScriptPack,
    pub codebook: Codebook,
    pub config: InterviewConfig,
}

impl InterviewEngine {
    pub fn new(gateway: Arc<Gateway>, pack: ScriptPack, codebook: Codebook, config: InterviewConfig) -> Self {
        InterviewEngine {
            gateway,
            pack,
            codebook,
            config,
        }
    }

    pub fn start_session(
        &self,
        session_id: &str,
        participant_id: &str,
        seed: u64,
    ) -> (SessionState, Vec<BotUtterance>) {
        let (question_order, split_index) = shuffle_questions(participant_id, seed);
        let state = SessionState {
            session_id: session_id.to_string(),
            participant_id: participant_id.to_string(),
            phase: Phase::SmallTalk1,
            question_order,
            split_index,
            current_question: 0,
            followups_asked: AttributionType::ALL.iter().map(|&a| (a, 0)).collect(),
            rng_seed: seed,
            step: 0,
            turns: 0,
            pending: None,
            satisfaction: None,
        };
        let out = vec![
            BotUtterance::new(UtteranceKind::Greeting, &self.pack.greeting),
            BotUtterance::new(UtteranceKind::SmallTalk, &self.pack.small_talk_prompts[0]),
        ];
        (state, out)
    }

    /// Applies one participant message.
    pub fn advance(
        &self,
        state: &SessionState,
        text: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<(SessionState, Turn), SessionError> {
        if state.phase.is_closed() {
            return Err(SessionError::Closed);
        }
        if !state.phase.accepts_messages() {
            return Err(SessionError::WrongPhase(state.phase));
        }
        if text.trim().is_empty() {
            return Err(SessionError::Input("message text is empty".into()));
        }
        let mut s = state.clone();
        s.turns += 1;
        let mut turn = Turn {
            utterances: Vec::new(),
            completed: Vec::new(),
        };
        match s.phase {
            Phase::SmallTalk1 => {
                s.step += 1;
                if s.step < self.pack.small_talk_prompts.len() {
                    turn.utterances.push(BotUtterance::new(
                        UtteranceKind::SmallTalk,
                        &self.pack.small_talk_prompts[s.step],
                    ));
                } else {
                    s.phase = Phase::Vignette;
                    s.step = 0;
                    self.deliver_vignette(&mut s, &mut turn.utterances);
                }
            }
            Phase::Vignette => {
                s.step += 1;
                self.deliver_vignette(&mut s, &mut turn.utterances);
            }
            Phase::SmallTalk2 => {
                s.step += 1;
                if s.step < self.pack.break_prompts.len() {
                    turn.utterances.push(BotUtterance::new(
                        UtteranceKind::SmallTalk,
                        &self.pack.break_prompts[s.step],
                    ));
                } else {
                    s.phase = Phase::Questions2;
                    s.step = 0;
                    self.ask_question(&s, &mut turn.utterances);
                }
            }
            Phase::Questions1 | Phase::Questions2 => {
                self.answer(&mut s, text, timestamp, &mut turn)?;
            }
            _ => unreachable!("guarded by accepts_messages"),
        }
        Ok((s, turn))
    }

    /// Records the rating and moves to the debrief.
    pub fn submit_satisfaction(
        &self,
        state: &SessionState,
        likert: u8,
        comment: Option<String>,
    ) -> Result<(SessionState, Vec<BotUtterance>), SessionError> {
        if state.phase.is_closed() {
            return Err(SessionError::Closed);
        }
        if state.phase != Phase::Satisfaction {
            return Err(SessionError::WrongPhase(state.phase));
        }
        if !(1..=5).contains(&likert) {
            return Err(SessionError::Input(format!("likert {likert} outside 1..5")));
        }
        let mut s = state.clone();
        s.satisfaction = Some(Satisfaction { likert, comment });
        s.phase = Phase::Debrief;
        Ok((s, vec![BotUtterance::new(UtteranceKind::Debrief, &self.pack.debrief_text)]))
    }

    /// Emits paragraphs from `state.step` until one ends with a prompt; the
    /// end of the vignette starts the first question block.
    fn deliver_vignette(&self, s: &mut SessionState, out: &mut Vec<BotUtterance>) {
        let paras = &self.pack.vignette_paragraphs;
        while s.step < paras.len() {
            let p = &paras[s.step];
            out.push(BotUtterance::new(UtteranceKind::Vignette, &p.text));
            if let Some(prompt) = &p.prompt {
                out.push(BotUtterance::new(UtteranceKind::VignettePrompt, prompt));
                return;
            }
            s.step += 1;
        }
        s.phase = Phase::Questions1;
        s.step = 0;
        self.ask_question(s, out);
    }

    fn ask_question(&self, s: &SessionState, out: &mut Vec<BotUtterance>) {
        let a = s.question_order[s.current_question];
        let d = &self.pack.self_disclosure[&a];
        out.push(BotUtterance::about(UtteranceKind::SelfDisclosure, &d.positive, a));
        out.push(BotUtterance::about(UtteranceKind::SelfDisclosure, &d.negative, a));
        out.push(BotUtterance::about(UtteranceKind::Question, &self.pack.question_scripts[&a], a));
    }

    fn turn_seed(&self, s: &SessionState, salt: u64) -> u64 {
        fnv1a(s.rng_seed ^ salt, format!("{}:{}", s.session_id, s.turns).as_bytes())
    }

    fn answer(
        &self,
        s: &mut SessionState,
        text: &str,
        timestamp: DateTime<Utc>,
        turn: &mut Turn,
    ) -> Result<(), SessionError> {
        let a = s.question_order[s.current_question];
        let question = &self.pack.question_scripts[&a];
        let turns = s.turns;
        let pending = s.pending.get_or_insert_with(|| PendingAnswer {
            attribution: a,
            turn_index: turns,
            parts: Vec::new(),
            timestamp,
        });
        pending.parts.push(text.trim().to_string());
        let combined = pending.parts.join(FOLLOWUP_SEPARATOR);
        let answer_words: usize = pending.parts.iter().map(|p| word_count(p)).sum();

        if word_count(text) >= self.config.active_listening_min_words {
            let req = ChatRequest::new(
                LISTENING_SYSTEM,
                format!("Question: {question}\nParticipant answer: <<<{}>>>", text.trim()),
            )
            .temperature(self.config.generation_temperature)
            .max_tokens(self.config.generation_max_tokens)
            .seed(self.turn_seed(s, 1));
            let reply = self.gateway.chat(&req)?.remove(0);
            turn.utterances
                .push(BotUtterance::about(UtteranceKind::ActiveListening, reply.trim(), a));
        }

        let asked = s.followups_asked[&a];
        let code = if a.is_behavioral() && asked < self.config.max_followups {
            let (_, _, label) = classify(
                &self.gateway,
                &self.codebook,
                &self.pack.vignette_text(),
                question,
                &combined,
                1,
            )?;
            label
        } else {
            None
        };
        let plan = decide_followup(
            a,
            answer_words,
            code,
            asked,
            self.config.min_length_threshold,
            self.config.max_followups,
        );
        if plan != FollowupPlan::None {
            *s.followups_asked.get_mut(&a).unwrap() += 1;
            let examples = &self.pack.followup_examples[&a];
            let (goal, example) = match plan {
                FollowupPlan::AskReason => ("Ask for the reasons behind the answer.", &examples.reason),
                _ => (
                    "Ask what the participant thinks would result from the situation they describe.",
                    &examples.potential_results,
                ),
            };
            let req = ChatRequest::new(
                FOLLOWUP_SYSTEM,
                format!(
                    "Question: {question}\nParticipant answer: <<<{combined}>>>\nGoal: {goal}\nExample question: <<<{example}>>>"
                ),
            )
            .temperature(self.config.generation_temperature)
            .max_tokens(self.config.generation_max_tokens)
            .seed(self.turn_seed(s, 2));
            let q = self.gateway.chat(&req)?.remove(0);
            turn.utterances.push(BotUtterance::about(UtteranceKind::FollowUp, q.trim(), a));
            return Ok(());
        }

        let pending = s.pending.take().expect("pending answer");
        turn.completed.push(Message::new(
            format!("{}:{}", s.session_id, a.name()),
            &s.participant_id,
            &s.session_id,
            a,
            pending.turn_index,
            combined,
            pending.timestamp,
        ));
        s.current_question += 1;
        if s.current_question == AttributionType::ALL.len() {
            s.phase = Phase::Satisfaction;
            turn.utterances
                .push(BotUtterance::new(UtteranceKind::Satisfaction, &self.pack.satisfaction_prompt));
        } else if s.phase == Phase::Questions1 && s.current_question == s.split_index {
            s.phase = Phase::SmallTalk2;
            s.step = 0;
            turn.utterances
                .push(BotUtterance::new(UtteranceKind::SmallTalk, &self.pack.break_prompts[0]));
        } else {
            self.ask_question(s, &mut turn.utterances);
        }
        Ok(())
    }
}

/// Mock responses for interview generation: a templated restatement for
/// active listening and the pack's example question for follow-ups.
pub fn mock_interview_handler() -> MockHandler {
    Arc::new(|req, _| {
        if req.system_prompt == FOLLOWUP_SYSTEM {
            return labelled_subject(&req.user_prompt, "Example question:").map(str::to_string);
        }
        if req.system_prompt == LISTENING_SYSTEM {
            let answer = labelled_subject(&req.user_prompt, "Participant answer:")?;
            let gist: Vec<&str> = answer.split_whitespace().take(12).collect();
            return Some(format!(
                "Thanks for sharing. If I understand you correctly: \"{}\".",
                gist.join(" ")
            ));
        }
        None
    })
}
