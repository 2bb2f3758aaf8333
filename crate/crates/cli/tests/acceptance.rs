//! Acceptance harness: one pass/fail line per primary criterion.
//!
//! Every check compares the library against an oracle written here from
//! first principles (exact fractions, brute-force enumeration, closed forms
//! or numerical integration). Runs without the libtest harness so each
//! criterion reports its own timing; the process exits non-zero if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stigmagraph_core::cluster::{kmeans, pca};
use stigmagraph_core::coding::Codebook;
use stigmagraph_core::conceptual::{build_conceptual_model, retain_mask, DropReason, ModelRules};
use stigmagraph_core::gateway::{cosine, EmbeddingMethodId, Gateway};
use stigmagraph_core::graph::{coherence_metrics, graph_from_assertions};
use stigmagraph_core::interview::{
    decide_followup, FollowupPlan, InterviewConfig, InterviewEngine, Phase, ScriptPack, UtteranceKind,
};
use stigmagraph_core::model::{
    word_count, AttributionType, CausalKnowledgeGraph, CodeLabel, ConstructType, Entity, Message, Relation,
    Triple, TripleOrigin,
};
use stigmagraph_core::pipeline::mock_backend;
use stigmagraph_core::resolver::{
    build_candidates, consolidate, decide_merges, entity_id, MergeCache, Resolution,
};
use stigmagraph_core::stats::{
    chi_square_sf, cochran_q, cohens_kappa, kappa_from_table, mcnemar_counts, McNemarVariant, Stat,
};
use stigmagraph_core::triples::{
    normalize_text, normalize_triple, parse_surface, prespecified_triple, to_surface, triple_accuracy,
    StatusMap,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("{what} took {:.2} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64())
    })
}

fn epoch() -> DateTime<Utc> {
    DateTime::from_timestamp(0, 0).unwrap()
}

fn entity(id: &str, text: &str, construct: ConstructType, frequency: u32) -> Entity {
    Entity {
        entity_id: id.to_string(),
        canonical_text: text.to_string(),
        construct,
        aliases: [text.to_string()].into(),
        support: [format!("m-{id}")].into(),
        frequency,
    }
}

// ---------------------------------------------------------------- kappa

/// Contingency tables with κ worked out by hand as exact fractions.
const KAPPA_TABLES: &[(&[&[u64]], i64, i64)] = &[
    (&[&[4, 1], &[1, 4]], 3, 5),
    (&[&[20, 5], &[10, 15]], 2, 5),
    (&[&[45, 15], &[25, 15]], 3, 23),
    (&[&[25, 10], &[15, 50]], 22, 47),
    (&[&[10, 0], &[0, 10]], 1, 1),
    (&[&[0, 5], &[5, 0]], -1, 1),
    (&[&[50, 0], &[0, 1]], 1, 1),
    (&[&[1, 2], &[3, 4]], -2, 23),
    (&[&[7, 3], &[2, 8]], 1, 2),
    (&[&[30, 20], &[20, 30]], 1, 5),
    (&[&[9, 1], &[1, 9]], 4, 5),
    (&[&[5, 5], &[5, 5]], 0, 1),
    (&[&[10, 2, 1], &[3, 12, 2], &[0, 1, 9]], 29, 44),
    (&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]], 1, 1),
    (&[&[2, 1, 0], &[1, 2, 1], &[0, 1, 2]], 13, 33),
    (&[&[14, 3, 2, 1], &[2, 11, 1, 0], &[1, 2, 9, 3], &[0, 1, 2, 8]], 40, 67),
    (&[&[25, 2], &[3, 0]], -2, 23),
    (
        &[&[6, 1, 0, 0, 0], &[1, 6, 1, 0, 0], &[0, 1, 6, 1, 0], &[0, 0, 1, 6, 1], &[0, 0, 0, 1, 6]],
        425,
        577,
    ),
    (&[&[40, 9], &[6, 45]], 291, 416),
    (&[&[3, 0, 2], &[1, 4, 0], &[2, 1, 5]], 35, 71),
    (&[&[100, 1], &[1, 0]], -1, 101),
    (
        &[
            &[12, 4, 0, 0, 0, 0, 0, 1],
            &[2, 10, 1, 0, 0, 0, 0, 0],
            &[0, 1, 8, 1, 0, 0, 0, 0],
            &[0, 0, 2, 9, 0, 1, 0, 0],
            &[0, 0, 0, 0, 7, 1, 0, 0],
            &[1, 0, 0, 0, 1, 6, 1, 0],
            &[0, 0, 0, 1, 0, 0, 5, 2],
            &[0, 1, 0, 0, 0, 0, 1, 11],
        ],
        5041,
        7021,
    ),
];

/// Expands a table into paired label sequences (row = reference).
fn expand(table: &[&[u64]]) -> (Vec<usize>, Vec<usize>) {
    let mut r = Vec::new();
    let mut c = Vec::new();
    for (i, row) in table.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            for _ in 0..n {
                r.push(i);
                c.push(j);
            }
        }
    }
    (r, c)
}

fn kappa_correctness() -> Outcome {
    let start = Instant::now();
    for (table, num, den) in KAPPA_TABLES {
        let expected = *num as f64 / *den as f64;
        let owned: Vec<Vec<u64>> = table.iter().map(|r| r.to_vec()).collect();
        let from_table = kappa_from_table(&owned).map_err(|e| e.to_string())?;
        let (r, c) = expand(table);
        let from_labels = cohens_kappa(&r, &c).map_err(|e| e.to_string())?;
        for (how, got) in [("table", from_table), ("labels", from_labels)] {
            let v = got.value().ok_or_else(|| format!("{table:?}: κ undefined via {how}"))?;
            ensure((v - expected).abs() <= 1e-9, || {
                format!("{table:?} via {how}: κ = {v}, expected {num}/{den}")
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b61);
    for case in 0..1000 {
        let n = rng.gen_range(1..=60);
        let k = rng.gen_range(1..=8);
        let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let ab = cohens_kappa(&a, &b).map_err(|e| e.to_string())?;
        let ba = cohens_kappa(&b, &a).map_err(|e| e.to_string())?;
        let sym = match (ab, ba) {
            (Stat::Value(x), Stat::Value(y)) => (x - y).abs() <= 1e-12,
            (Stat::Undefined, Stat::Undefined) => true,
            _ => false,
        };
        ensure(sym, || format!("case {case}: κ(a,b) = {ab:?} but κ(b,a) = {ba:?}"))?;
        let aa = cohens_kappa(&a, &a).map_err(|e| e.to_string())?;
        ensure(aa == Stat::Value(1.0), || format!("case {case}: κ(x,x) = {aa:?}"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1), "κ suite")?;
    Ok(format!(
        "{} fixed tables to 1e-9, 1000 symmetric/self pairs, {:.0} ms",
        KAPPA_TABLES.len(),
        elapsed.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- statistics

/// Composite Simpson rule over `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Upper tail of χ² by integrating its density from `x` outward. For one
/// degree of freedom the substitution t = u² removes the singularity at 0.
fn chi_square_tail_oracle(x: f64, df: u32) -> f64 {
    match df {
        1 => {
            let lo = x.sqrt();
            let pdf = |u: f64| 2.0 * (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            simpson(pdf, lo, lo + 40.0, 20_000)
        }
        2 => simpson(|t: f64| 0.5 * (-t / 2.0).exp(), x, x + 400.0, 40_000),
        _ => unreachable!(),
    }
}

fn statistics() -> Outcome {
    let m = mcnemar_counts(10, 2, McNemarVariant::ChiSquare);
    let chi = m.chi_square.value().ok_or("McNemar χ² undefined")?;
    ensure((chi - 16.0 / 3.0).abs() <= 1e-9, || format!("McNemar b=10,c=2: χ² = {chi}"))?;
    let p = m.p_value.value().ok_or("McNemar p undefined")?;
    ensure((p - chi_square_tail_oracle(16.0 / 3.0, 1)).abs() <= 1e-6, || {
        format!("McNemar p = {p} differs from the integrated tail")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5133);
    let mut defined = 0;
    for case in 0..50 {
        let k = rng.gen_range(2..=5);
        let n = rng.gen_range(5..=60);
        let bias: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..0.9)).collect();
        let x: Vec<Vec<bool>> = bias.iter().map(|&b| (0..n).map(|_| rng.gen_bool(b)).collect()).collect();
        // Q = k(k−1) Σ_j (C_j − C̄)² / Σ_i R_i (k − R_i)
        let c: Vec<f64> = x.iter().map(|r| r.iter().filter(|&&v| v).count() as f64).collect();
        let r: Vec<f64> = (0..n).map(|i| x.iter().filter(|row| row[i]).count() as f64).collect();
        let cbar = c.iter().sum::<f64>() / k as f64;
        let kf = k as f64;
        let num = kf * (kf - 1.0) * c.iter().map(|cj| (cj - cbar).powi(2)).sum::<f64>();
        let den: f64 = r.iter().map(|ri| ri * (kf - ri)).sum();
        let got = cochran_q(&x).map_err(|e| e.to_string())?;
        ensure(got.df == (k - 1) as u64, || format!("case {case}: df {}", got.df))?;
        match got.q {
            Stat::Undefined => ensure(den == 0.0, || format!("case {case}: Q undefined, oracle den {den}"))?,
            Stat::Value(q) => {
                defined += 1;
                let expected = num / den;
                ensure((q - expected).abs() <= 1e-9, || format!("case {case}: Q = {q}, oracle {expected}"))?;
            }
        }
    }

    let mut points = 0;
    for df in [1u32, 2] {
        for i in 0..=200 {
            let x = i as f64 * 0.5;
            let got = chi_square_sf(x, df as f64);
            let oracle = if x == 0.0 { 1.0 } else { chi_square_tail_oracle(x, df) };
            ensure((got - oracle).abs() <= 1e-6, || {
                format!("χ² sf(x={x}, df={df}) = {got}, integrated {oracle}")
            })?;
            points += 1;
        }
    }
    Ok(format!(
        "McNemar χ² = {chi:.6}; Cochran's Q matched on 50 matrices ({defined} defined); {points} χ² tail points to 1e-6"
    ))
}

// ---------------------------------------------------------------- interview

const EMOTION: [AttributionType; 4] = [
    AttributionType::Anger,
    AttributionType::Fear,
    AttributionType::Pity,
    AttributionType::Responsibility,
];
const BEHAVIOR: [AttributionType; 3] = [
    AttributionType::Helping,
    AttributionType::SocialDistance,
    AttributionType::CoerciveSegregation,
];

/// The branching policy as a literal table.
fn followup_oracle(
    a: AttributionType,
    words: usize,
    code: Option<CodeLabel>,
    asked: u32,
    threshold: usize,
) -> FollowupPlan {
    if asked >= 2 {
        return FollowupPlan::None;
    }
    if EMOTION.contains(&a) {
        return if words < threshold { FollowupPlan::AskReason } else { FollowupPlan::None };
    }
    match code {
        Some(CodeLabel::NonStigmatizing) => FollowupPlan::AskReason,
        Some(CodeLabel::Helping) if a == AttributionType::Helping => FollowupPlan::AskPotentialResults,
        Some(CodeLabel::SocialDistance) if a == AttributionType::SocialDistance => FollowupPlan::AskPotentialResults,
        Some(CodeLabel::CoerciveSegregation) if a == AttributionType::CoerciveSegregation => {
            FollowupPlan::AskPotentialResults
        }
        _ => FollowupPlan::None,
    }
}

fn decision_table() -> Result<usize, String> {
    let mut rows = 0;
    let codes: Vec<Option<CodeLabel>> = std::iter::once(None).chain(CodeLabel::ALL.map(Some)).collect();
    for a in BEHAVIOR {
        for &code in &codes {
            for asked in 0..=3 {
                for words in [0, 5, 19, 20, 21, 80] {
                    let got = decide_followup(a, words, code, asked, 20, 2);
                    let want = followup_oracle(a, words, code, asked, 20);
                    ensure(got == want, || format!("{a} code {code:?} asked {asked}: {got:?}, want {want:?}"))?;
                    rows += 1;
                }
            }
        }
    }
    for a in EMOTION {
        for threshold in [1usize, 10, 20, 35] {
            for words in [0, threshold.saturating_sub(1), threshold, threshold + 1] {
                for &code in &codes {
                    for asked in 0..=3 {
                        let got = decide_followup(a, words, code, asked, threshold, 2);
                        let want = followup_oracle(a, words, code, asked, threshold);
                        ensure(got == want, || {
                            format!("{a} words {words} threshold {threshold} asked {asked}: {got:?}, want {want:?}")
                        })?;
                        rows += 1;
                    }
                }
            }
        }
    }
    Ok(rows)
}

const ANSWERS: &[&str] = &[
    "I am not sure.",
    "No, not really.",
    "I would feel sorry for Avery and want to help.",
    "Avery is dangerous and should be locked away in a hospital.",
    "I would keep my distance from Avery because I do not trust them at all and would not want them as a neighbour or coworker.",
    "It is not Avery's fault; mental illness can happen to anyone and they deserve kindness, patience and proper support from the people around them.",
    "I think I would be a little scared of what Avery might do next if they stopped taking their medication.",
    "I would gladly help Avery with errands or just talk with them when they feel low, because everyone needs friends.",
    "Honestly I would be angry that they let things get this bad.",
    "They should be forced into treatment so that nobody gets hurt.",
    "Fine thanks.",
    "It depends on the day, I guess, and on how everyone is feeling about it.",
];

struct SessionTally {
    followups: usize,
}

/// Drives one session to the satisfaction prompt and checks the transcript.
fn run_session(engine: &InterviewEngine, n: u64) -> Result<SessionTally, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(n ^ 0xa11ce);
    let pid = format!("P{n:06}");
    let (mut state, first) = engine.start_session(&format!("S{n:06}"), &pid, n);
    let mut log: Vec<(UtteranceKind, Option<AttributionType>)> =
        first.iter().map(|u| (u.kind, u.attribution)).collect();
    let mut summed_words = 0usize;
    let mut asked: BTreeMap<AttributionType, u32> = BTreeMap::new();
    let threshold = engine.config.min_length_threshold;
    for _ in 0..200 {
        if !state.phase.accepts_messages() {
            break;
        }
        let text = ANSWERS.choose(&mut rng).unwrap();
        let answering = matches!(state.phase, Phase::Questions1 | Phase::Questions2)
            .then(|| state.question_order[state.current_question]);
        let (next, turn) = engine.advance(&state, text, epoch()).map_err(|e| format!("{pid}: {e}"))?;
        if let Some(a) = answering {
            summed_words += word_count(text);
            let followed = turn.utterances.iter().any(|u| u.kind == UtteranceKind::FollowUp);
            let prior = *asked.get(&a).unwrap_or(&0);
            if EMOTION.contains(&a) {
                let want = prior < 2 && summed_words < threshold;
                ensure(followed == want, || {
                    format!("{pid} {a}: {summed_words} words after {prior} follow-ups, follow-up asked = {followed}")
                })?;
            }
            if followed {
                *asked.entry(a).or_default() += 1;
            } else {
                summed_words = 0;
            }
        }
        log.extend(turn.utterances.iter().map(|u| (u.kind, u.attribution)));
        state = next;
    }
    ensure(state.phase == Phase::Satisfaction, || format!("{pid}: ended in {:?}", state.phase))?;
    state.check().map_err(|e| format!("{pid}: {e}"))?;

    let questions: Vec<(usize, AttributionType)> = log
        .iter()
        .enumerate()
        .filter(|(_, (k, _))| *k == UtteranceKind::Question)
        .map(|(i, (_, a))| (i, a.expect("questions carry their attribution")))
        .collect();
    let order: Vec<AttributionType> = questions.iter().map(|q| q.1).collect();
    let distinct: BTreeSet<AttributionType> = order.iter().copied().collect();
    ensure(order.len() == 7 && distinct.len() == 7, || format!("{pid}: questions asked {order:?}"))?;
    ensure(order == state.question_order, || format!("{pid}: asked out of the seeded order"))?;

    let split = state.split_index;
    let (last_first, first_second) = (questions[split - 1].0, questions[split].0);
    let between = &log[last_first..first_second];
    ensure(between.iter().any(|(k, _)| *k == UtteranceKind::SmallTalk), || {
        format!("{pid}: no small talk between blocks at split {split}")
    })?;
    for (i, w) in questions.windows(2).enumerate() {
        if i + 1 != split {
            ensure(!log[w[0].0..w[1].0].iter().any(|(k, _)| *k == UtteranceKind::SmallTalk), || {
                format!("{pid}: small talk inside a question block")
            })?;
        }
    }
    let mut followups = 0;
    for a in AttributionType::ALL {
        let c = log
            .iter()
            .filter(|(k, x)| *k == UtteranceKind::FollowUp && *x == Some(a))
            .count();
        ensure(c <= 2, || format!("{pid}: {c} follow-ups for {a}"))?;
        followups += c;
    }
    Ok(SessionTally { followups })
}

fn interview_state_machine() -> Outcome {
    let start = Instant::now();
    let rows = decision_table()?;
    let cb = Codebook::default_stigma();
    let engine = InterviewEngine::new(
        Arc::new(Gateway::mock(mock_backend(&cb, 0.6))),
        ScriptPack::default_pack(),
        cb,
        InterviewConfig::default(),
    );
    const SESSIONS: u64 = 10_000;
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(16) as u64;
    let results: Vec<Result<(usize, usize), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let engine = &engine;
                s.spawn(move || {
                    let mut followups = 0;
                    let mut sessions = 0;
                    for n in (w..SESSIONS).step_by(workers as usize) {
                        followups += run_session(engine, n)?.followups;
                        sessions += 1;
                    }
                    Ok((sessions, followups))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut sessions = 0;
    let mut followups = 0;
    for r in results {
        let (s, f) = r?;
        sessions += s;
        followups += f;
    }
    ensure(sessions == SESSIONS as usize, || format!("{sessions} sessions completed"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(30), "interview suite")?;
    Ok(format!(
        "{sessions} sessions ({followups} follow-ups), {rows} decision rows, {:.1} s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- triples

const WORDS: &[&str] = &[
    "fear", "stigma", "no pity", "danger", "illness", "help", "Avery", "work", "stress", "family", "trust",
    "violence", "support",
];

fn random_phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=3);
    let mut parts: Vec<String> = Vec::new();
    for _ in 0..n {
        let w = WORDS.choose(rng).unwrap();
        parts.push(if rng.gen_bool(0.3) { w.to_uppercase() } else { w.to_string() });
    }
    let gap = " ".repeat(rng.gen_range(1..3));
    let (lead, trail) = (" ".repeat(rng.gen_range(0..3)), " ".repeat(rng.gen_range(0..3)));
    format!("{lead}{}{trail}", parts.join(&gap))
}

fn triple(cause: &str, effect: &str) -> Triple {
    Triple {
        triple_id: String::new(),
        message_id: "m".into(),
        cause_text: cause.into(),
        effect_text: effect.into(),
        relation: Relation::Because,
        origin: TripleOrigin::Extracted,
    }
}

fn triple_handling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7419);
    for _ in 0..500 {
        let t = triple(&random_phrase(&mut rng), &random_phrase(&mut rng));
        let once = normalize_triple(&t);
        ensure(normalize_triple(&once) == once, || format!("normalizing twice changed {once:?}"))?;
        if once.cause_text != once.effect_text {
            let parsed = parse_surface(&to_surface(&once));
            ensure(parsed == Some((once.cause_text.clone(), once.effect_text.clone())), || {
                format!("surface round trip of {once:?} gave {parsed:?}")
            })?;
        }
    }

    for case in 0..200 {
        let pool: Vec<(String, String)> = (0..12)
            .map(|_| (random_phrase(&mut rng), random_phrase(&mut rng)))
            .collect();
        let pick = |rng: &mut ChaCha8Rng| -> Vec<Triple> {
            (0..rng.gen_range(1..=10))
                .map(|_| {
                    let (c, e) = pool.choose(rng).unwrap();
                    triple(c, e)
                })
                .collect()
        };
        let model = pick(&mut rng);
        let reference = pick(&mut rng);
        let key = |t: &Triple| -> (String, String) {
            let fold = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ");
            (fold(&t.cause_text), fold(&t.effect_text))
        };
        let r: BTreeSet<_> = reference.iter().map(key).collect();
        let mut matched = 0;
        for k in &r {
            if model.iter().any(|t| &key(t) == k) {
                matched += 1;
            }
        }
        let got = triple_accuracy(&model, &reference).map_err(|e| e.to_string())?;
        ensure(got.matched == matched && got.reference_total == r.len(), || {
            format!("case {case}: {}/{} vs oracle {matched}/{}", got.matched, got.reference_total, r.len())
        })?;
        ensure(got.value == matched as f64 / r.len() as f64, || format!("case {case}: value {}", got.value))?;
    }

    let map = StatusMap::default_map();
    let fixed: [(AttributionType, &str, &str); 7] = [
        (AttributionType::Responsibility, "responsibility", "no responsibility"),
        (AttributionType::SocialDistance, "social distance", "no social distance"),
        (AttributionType::Anger, "anger", "no anger"),
        (AttributionType::Helping, "no helping", "helping"),
        (AttributionType::Pity, "no pity", "pity"),
        (AttributionType::CoerciveSegregation, "coercive segregation", "no coercive segregation"),
        (AttributionType::Fear, "fear", "no fear"),
    ];
    let mut checked = 0;
    for (a, _, non) in fixed {
        let msg = Message::new(format!("S1:{a}"), "P1", "S1", a, 1, "an answer", epoch());
        for code in CodeLabel::ALL {
            let t = prespecified_triple(&msg, code, &map);
            let (cause, effect) = match code.attribution() {
                Some(ca) => (fixed.iter().find(|f| f.0 == ca).unwrap().1, "stigma"),
                None => (non, "no stigma"),
            };
            ensure(t.cause_text == cause && t.effect_text == effect, || {
                format!("{a} coded {}: {} -> {}", code.name(), t.cause_text, t.effect_text)
            })?;
            ensure(t.origin == TripleOrigin::Prespecified, || "origin".into())?;
            checked += 1;
        }
    }
    let pity = Message::new("S1:Pity", "P1", "S1", AttributionType::Pity, 1, "an answer", epoch());
    let t = prespecified_triple(&pity, CodeLabel::Pity, &map);
    let surface = to_surface(&t);
    ensure(surface == "(stigma, because, no pity)", || format!("Pity surface form {surface}"))?;
    ensure(t.cause_text == "no pity" && t.effect_text == "stigma", || "Pity direction".into())?;
    ensure(normalize_text("  No   PITY ") == "no pity", || "normalize_text".into())?;
    Ok(format!(
        "500 idempotent normalizations, 200 accuracy pairs, {checked} status triples; Pity renders {surface}"
    ))
}

// ---------------------------------------------------------------- resolution

const STEMS: &[&str] = &[
    "help with tasks",
    "help with the tasks",
    "helping with daily tasks",
    "fear of violence",
    "fear of the violence",
    "afraid of violence",
    "lost the job",
    "lost their job",
    "stress at work",
    "work stress",
    "needs treatment",
    "needs medical treatment",
    "family support",
    "support from family",
    "unpredictable behavior",
    "unpredictable behaviour",
];

const CONSTRUCTS: [ConstructType; 3] =
    [ConstructType::Belief, ConstructType::EmotionalResponse, ConstructType::Situation];

fn random_entities(rng: &mut ChaCha8Rng) -> Vec<Entity> {
    let n = rng.gen_range(2..=40);
    let mut by_id = BTreeMap::new();
    for _ in 0..n {
        let construct = *CONSTRUCTS.choose(rng).unwrap();
        let mut text = STEMS.choose(rng).unwrap().to_string();
        if rng.gen_bool(0.4) {
            text = format!("{text} {}", ["again", "a lot", "mostly", "for avery"].choose(rng).unwrap());
        }
        let id = entity_id(&text, construct);
        by_id.insert(id.clone(), entity(&id, &text, construct, rng.gen_range(1..=5)));
    }
    if rng.gen_bool(0.3) {
        let id = entity_id("stigma", ConstructType::StigmaStatus);
        by_id.insert(id.clone(), entity(&id, "stigma", ConstructType::StigmaStatus, 3));
    }
    by_id.into_values().collect()
}

/// Equivalence classes of the reflexive-transitive closure of positive
/// verdicts, by Warshall's algorithm.
fn closure_classes(ids: &[String], positive: &[(String, String)]) -> BTreeSet<BTreeSet<String>> {
    let n = ids.len();
    let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for (a, b) in positive {
        let (i, j) = (pos[a.as_str()], pos[b.as_str()]);
        reach[i][j] = true;
        reach[j][i] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n)
        .map(|i| (0..n).filter(|&j| reach[i][j]).map(|j| ids[j].clone()).collect())
        .collect()
}

fn entity_resolution() -> Outcome {
    let gateway = Gateway::mock(mock_backend(&Codebook::default_stigma(), 0.6));
    let methods: Vec<EmbeddingMethodId> = (0..3).map(EmbeddingMethodId::mock).collect();
    let k = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(0xe27);
    let mut merges = 0;
    for inst in 0..100 {
        let entities = random_entities(&mut rng);
        let sets = build_candidates(&gateway, &entities, &methods, k).map_err(|e| e.to_string())?;

        // Exhaustive oracle: j is a hit of i under a method iff fewer than k
        // other entities outrank it (higher cosine, or equal cosine and a
        // smaller id).
        let active: Vec<&Entity> = entities.iter().filter(|e| !e.construct.is_status()).collect();
        let texts: Vec<String> = active.iter().map(|e| e.canonical_text.clone()).collect();
        let mut expected: BTreeMap<&str, BTreeSet<String>> =
            active.iter().map(|e| (e.entity_id.as_str(), BTreeSet::new())).collect();
        for m in &methods {
            let vecs = gateway.embed(&texts, m).map_err(|e| e.to_string())?;
            for i in 0..active.len() {
                for j in 0..active.len() {
                    if i == j || active[i].construct != active[j].construct {
                        continue;
                    }
                    let cij = cosine(&vecs[i], &vecs[j]);
                    let outranked_by = (0..active.len())
                        .filter(|&l| l != i && l != j)
                        .filter(|&l| {
                            let cil = cosine(&vecs[i], &vecs[l]);
                            cil > cij || (cil == cij && active[l].entity_id < active[j].entity_id)
                        })
                        .count();
                    if outranked_by < k {
                        expected.get_mut(active[i].entity_id.as_str()).unwrap().insert(active[j].entity_id.clone());
                    }
                }
            }
        }
        let got: BTreeMap<&str, BTreeSet<String>> =
            sets.iter().map(|s| (s.entity_id.as_str(), s.candidates.clone())).collect();
        ensure(got == expected, || format!("instance {inst}: candidate sets differ from the cosine oracle"))?;

        let cache = MergeCache::default();
        let decisions = decide_merges(&gateway, &entities, &sets, &cache).map_err(|e| e.to_string())?;
        let res = consolidate(&entities, &decisions).map_err(|e| e.to_string())?;

        let ids: Vec<String> = entities.iter().map(|e| e.entity_id.clone()).collect();
        let positive: Vec<(String, String)> =
            decisions.iter().filter(|d| d.verdict).map(|d| d.pair.clone()).collect();
        merges += positive.len();
        let want = closure_classes(&ids, &positive);
        let have: BTreeSet<BTreeSet<String>> =
            res.classes.iter().map(|c| c.iter().cloned().collect()).collect();
        ensure(have == want, || format!("instance {inst}: classes differ from the closure oracle"))?;

        let construct: BTreeMap<&str, ConstructType> =
            entities.iter().map(|e| (e.entity_id.as_str(), e.construct)).collect();
        for class in &res.classes {
            let cs: BTreeSet<ConstructType> = class.iter().map(|id| construct[id.as_str()]).collect();
            ensure(cs.len() == 1, || format!("instance {inst}: class {class:?} spans {cs:?}"))?;
        }
        let total: u32 = entities.iter().map(|e| e.frequency).sum();
        let merged_total: u32 = res.entities.values().map(|e| e.frequency).sum();
        ensure(total == merged_total, || format!("instance {inst}: frequency {total} -> {merged_total}"))?;

        check_idempotent(&res, &decisions).map_err(|e| format!("instance {inst}: {e}"))?;
    }
    Ok(format!("100 instances, {merges} positive verdicts, oracles equal"))
}

fn check_idempotent(
    res: &Resolution,
    decisions: &[stigmagraph_core::resolver::MergeDecision],
) -> Result<(), String> {
    let merged: Vec<Entity> = res.entities.values().cloned().collect();
    let again = consolidate(&merged, &res.remap_decisions(decisions)).map_err(|e| e.to_string())?;
    ensure(again.entities == res.entities, || "re-resolving changed the entities".into())?;
    ensure(again.old_to_canonical.iter().all(|(a, b)| a == b), || "re-resolving merged again".into())
}

// ---------------------------------------------------------------- graph

struct RandomGraph {
    graph: CausalKnowledgeGraph,
    n: usize,
    adj: Vec<BTreeSet<usize>>,
    messages: Vec<Vec<(usize, usize)>>,
}

fn node_id(i: usize) -> String {
    format!("n{i:02}")
}

fn random_graph(rng: &mut ChaCha8Rng) -> RandomGraph {
    let n = rng.gen_range(1..=50);
    let mut messages = Vec::new();
    for _ in 0..rng.gen_range(0..=10) {
        // Each message orders its nodes and only points forward: a DAG.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut edges = BTreeSet::new();
        if n >= 2 {
            for _ in 0..rng.gen_range(1..=6) {
                let i = rng.gen_range(0..n - 1);
                let j = rng.gen_range(i + 1..n.min(i + 6));
                edges.insert((order[i], order[j]));
            }
        }
        messages.push(edges.into_iter().collect::<Vec<_>>());
    }
    let entities: BTreeMap<String, Entity> = (0..n)
        .map(|i| (node_id(i), entity(&node_id(i), &node_id(i), ConstructType::Belief, 1)))
        .collect();
    let assertions = messages
        .iter()
        .enumerate()
        .flat_map(|(m, es)| es.iter().map(move |&(a, b)| (format!("m{m}"), node_id(a), node_id(b))));
    let (graph, _) = graph_from_assertions(entities, assertions);
    let mut adj = vec![BTreeSet::new(); n];
    for es in &messages {
        for &(a, b) in es {
            adj[a].insert(b);
        }
    }
    RandomGraph { graph, n, adj, messages }
}

/// Elementary cycles counted once each, rooted at their smallest vertex.
fn count_cycles(adj: &[BTreeSet<usize>]) -> usize {
    fn walk(adj: &[BTreeSet<usize>], root: usize, v: usize, on: &mut Vec<bool>, count: &mut usize) {
        for &w in &adj[v] {
            if w == root {
                *count += 1;
            } else if w > root && !on[w] {
                on[w] = true;
                walk(adj, root, w, on, count);
                on[w] = false;
            }
        }
    }
    let mut count = 0;
    for root in 0..adj.len() {
        let mut on = vec![false; adj.len()];
        on[root] = true;
        walk(adj, root, root, &mut on, &mut count);
    }
    count
}

/// Weak component sizes by flood fill, largest first.
fn component_sizes(n: usize, adj: &[BTreeSet<usize>]) -> Vec<usize> {
    let mut und = vec![Vec::new(); n];
    for (a, ws) in adj.iter().enumerate() {
        for &b in ws {
            und[a].push(b);
            und[b].push(a);
        }
    }
    let mut seen = vec![false; n];
    let mut sizes = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![s];
        let mut size = 0;
        while let Some(v) = stack.pop() {
            size += 1;
            for &w in &und[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// Lengths (in edges) of every source-to-sink path of one message.
fn chain_lengths(edges: &[(usize, usize)]) -> Vec<usize> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut has_in = BTreeSet::new();
    for &(a, b) in edges {
        out.entry(a).or_default().push(b);
        has_in.insert(b);
    }
    fn dfs(out: &BTreeMap<usize, Vec<usize>>, v: usize, depth: usize, acc: &mut Vec<usize>) {
        match out.get(&v) {
            None => acc.push(depth),
            Some(ws) => ws.iter().for_each(|&w| dfs(out, w, depth + 1, acc)),
        }
    }
    let mut acc = Vec::new();
    for &s in out.keys().filter(|s| !has_in.contains(s)) {
        dfs(&out, s, 0, &mut acc);
    }
    acc
}

fn graph_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a4);
    let mut cyclic_graphs = 0;
    for case in 0..200 {
        let rg = random_graph(&mut rng);
        let m = coherence_metrics(&rg.graph, usize::MAX);
        let cycles = count_cycles(&rg.adj);
        cyclic_graphs += usize::from(cycles > 0);
        ensure(!m.cycle_overflow && m.cycle_count == cycles, || {
            format!("case {case}: {} cycles, oracle {cycles}", m.cycle_count)
        })?;
        let sizes = component_sizes(rg.n, &rg.adj);
        ensure(m.component_count == sizes.len() && m.component_sizes == sizes, || {
            format!("case {case}: components {:?}, oracle {sizes:?}", m.component_sizes)
        })?;
        let lengths: Vec<usize> = rg.messages.iter().flat_map(|es| chain_lengths(es)).collect();
        let count = lengths.len() as u128;
        ensure(m.chain_count == count, || format!("case {case}: {} chains, oracle {count}", m.chain_count))?;
        ensure(m.max_chain_length == lengths.iter().copied().max().unwrap_or(0), || {
            format!("case {case}: max chain {}", m.max_chain_length)
        })?;
        if !lengths.is_empty() {
            let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
            let var = lengths.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / lengths.len() as f64;
            ensure(m.mean_chain_length.mean == mean, || {
                format!("case {case}: mean chain {}, oracle {mean}", m.mean_chain_length.mean)
            })?;
            ensure((m.mean_chain_length.sd - var.sqrt()).abs() <= 1e-9, || {
                format!("case {case}: chain sd {}, oracle {}", m.mean_chain_length.sd, var.sqrt())
            })?;
        }
        ensure(m.messages_with_cyclic_edges.is_empty(), || format!("case {case}: a message DAG reported cyclic"))?;
    }

    let entities: BTreeMap<String, Entity> = ["a", "b", "c", "d"]
        .iter()
        .map(|x| (x.to_string(), entity(x, x, ConstructType::Belief, 1)))
        .collect();
    let worked = [("a", "b"), ("b", "c"), ("a", "d")].map(|(s, d)| ("m1".to_string(), s.to_string(), d.to_string()));
    let (g, _) = graph_from_assertions(entities, worked);
    let m = coherence_metrics(&g, usize::MAX);
    ensure(m.mean_chain_length.mean == 1.5 && m.chain_count == 2, || {
        format!("worked example: {} chains, mean {}", m.chain_count, m.mean_chain_length.mean)
    })?;
    Ok(format!(
        "200 graphs ({cyclic_graphs} with cycles) match DFS oracles; worked example mean chain 1.5"
    ))
}

// ---------------------------------------------------------------- conceptual

/// A graph whose edges are `(src construct, dst construct, participants)`;
/// each participant contributes one message.
fn construct_graph(edges: &[(ConstructType, ConstructType, usize)]) -> (CausalKnowledgeGraph, Vec<Message>) {
    let mut entities = BTreeMap::new();
    let mut assertions = Vec::new();
    let mut transcript = Vec::new();
    for (ei, &(s, d, w)) in edges.iter().enumerate() {
        for c in [s, d] {
            let id = c.name().to_lowercase();
            entities.insert(id.clone(), entity(&id, &id, c, 1));
        }
        for p in 0..w {
            let mid = format!("m{ei}-{p}");
            transcript.push(Message::new(
                &mid,
                format!("P{p}"),
                format!("S{p}"),
                AttributionType::Fear,
                1,
                "an answer of five words",
                epoch(),
            ));
            assertions.push((mid, s.name().to_lowercase(), d.name().to_lowercase()));
        }
    }
    (graph_from_assertions(entities, assertions).0, transcript)
}

fn retained(model: &stigmagraph_core::conceptual::ConceptualModel) -> BTreeSet<(String, String)> {
    model
        .edges
        .iter()
        .filter(|e| e.retained)
        .map(|e| (e.src_group.clone(), e.dst_group.clone()))
        .collect()
}

fn conceptual_model() -> Outcome {
    use ConstructType::*;
    let rules = ModelRules::default_rules();
    let build = |edges: &[(ConstructType, ConstructType, usize)]| {
        let (g, t) = construct_graph(edges);
        build_conceptual_model(&g, &t, &rules).map_err(|e| e.to_string())
    };
    let pair = |a: &str, b: &str| (a.to_string(), b.to_string());

    let m = build(&[
        (SignalingEvent, Belief, 5),
        (SignalingEvent, EmotionalResponse, 3),
        (SignalingEvent, BehavioralIntention, 1),
    ])?;
    ensure(retained(&m) == [pair("SignalingEvent", "CognitiveMediatorGroup")].into(), || {
        format!("[5,3,1]: retained {:?}", retained(&m))
    })?;
    ensure(m.edges.iter().all(|e| e.threshold == 3.0), || "[5,3,1]: threshold is not 3".into())?;

    let m = build(&[(Situation, EmotionalResponse, 4)])?;
    ensure(retained(&m) == [pair("Situation", "EmotionalResponse")].into(), || {
        "singleton edge not retained".into()
    })?;

    let dropped = |m: &stigmagraph_core::conceptual::ConceptualModel, r: DropReason| {
        m.dropped.iter().filter(|d| d.reason == r).count()
    };
    // Source-only: nothing may point into a stimulus group.
    let m = build(&[(Belief, SignalingEvent, 3), (EmotionalResponse, PastExperience, 2)])?;
    ensure(m.edges.is_empty() && dropped(&m, DropReason::IntoSourceOnly) == 2, || {
        format!("source-only rule: {:?}", m.edges)
    })?;
    // Exclusion: Suggestion never appears.
    let m = build(&[(Suggestion, EmotionalResponse, 3), (Belief, Suggestion, 2), (Belief, EmotionalResponse, 1)])?;
    ensure(
        m.nodes.iter().all(|n| !n.constructs.contains(&Suggestion))
            && dropped(&m, DropReason::Excluded) == 2
            && m.edges.len() == 1,
        || "exclusion rule".into(),
    )?;
    // Sink-only: BehavioralIntention never a source.
    let m = build(&[(BehavioralIntention, EmotionalResponse, 3), (BehavioralIntention, Belief, 1)])?;
    ensure(m.edges.is_empty() && dropped(&m, DropReason::FromSinkOnly) == 2, || "sink-only rule".into())?;
    // Consolidation: three constructs share one node; weights pool participants.
    let m = build(&[
        (PotentialOutcome, EmotionalResponse, 2),
        (CognitiveJudgment, EmotionalResponse, 3),
        (Belief, EmotionalResponse, 1),
        (Motivation, BehavioralIntention, 2),
        (Personality, BehavioralIntention, 1),
        (Personality, Motivation, 4),
    ])?;
    let lifted: BTreeMap<(String, String), u32> =
        m.edges.iter().map(|e| ((e.src_group.clone(), e.dst_group.clone()), e.weight)).collect();
    ensure(
        lifted
            == [
                (pair("CognitiveMediatorGroup", "EmotionalResponse"), 3),
                (pair("DispositionGroup", "BehavioralIntention"), 2),
            ]
            .into(),
        || format!("consolidation: {lifted:?}"),
    )?;
    ensure(dropped(&m, DropReason::SelfLoop) == 1, || "consolidated self-loop kept".into())?;
    // Minimum support: edges need at least the configured participants.
    let mut strict = rules.clone();
    strict.min_support = 2;
    let (g, t) = construct_graph(&[(Situation, EmotionalResponse, 1), (Situation, Belief, 2)]);
    let m = build_conceptual_model(&g, &t, &strict).map_err(|e| e.to_string())?;
    ensure(m.below_min_support == 1 && m.edges.len() == 1, || "min-support rule".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    for case in 0..100 {
        let len = rng.gen_range(1..=8);
        let w: Vec<u32> = (0..len).map(|_| rng.gen_range(1..=40)).collect();
        let c = rng.gen_range(2..=50u32);
        let scaled: Vec<u32> = w.iter().map(|x| x * c).collect();
        let mean = w.iter().sum::<u32>() as f64 / len as f64;
        let oracle: Vec<bool> = w.iter().map(|&x| len == 1 || x as f64 > mean).collect();
        ensure(retain_mask(&w) == oracle, || format!("case {case}: mask of {w:?}"))?;
        ensure(retain_mask(&scaled) == oracle, || format!("case {case}: scaling {w:?} by {c} changed the mask"))?;
    }
    // The same property through the full builder, with participant counts scaled.
    let dsts = [Belief, EmotionalResponse, BehavioralIntention];
    for case in 0..20 {
        let w: Vec<usize> = dsts.iter().map(|_| rng.gen_range(1..=6)).collect();
        let c = rng.gen_range(2..=4);
        let edges = |s: usize| -> Vec<_> { dsts.iter().zip(&w).map(|(&d, &x)| (SignalingEvent, d, x * s)).collect() };
        let (a, b) = (build(&edges(1))?, build(&edges(c))?);
        ensure(retained(&a) == retained(&b), || format!("builder case {case}: {w:?} ×{c}"))?;
    }
    Ok("[5,3,1] keeps 5, singleton kept, 5 rule fixtures, 100 scaled weight sets".into())
}

// ---------------------------------------------------------------- PCA / k-means

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn pca_kmeans() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca);
    let scales = [5.0, 3.0, 2.0, 1.0, 0.5];
    let data: Vec<Vec<f64>> = (0..400)
        .map(|_| scales.iter().map(|s| s * gaussian(&mut rng)).collect())
        .collect();
    let p = pca(&data, 3);
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = p.components[i].iter().zip(&p.components[j]).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("components deviate from orthonormal by {worst}"))?;

    let mut axis_err = 0.0f64;
    for trial in 0..5 {
        let theta = 0.3 + trial as f64 * 0.5;
        let (ct, st) = (theta.cos(), theta.sin());
        let pts: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let (u, v) = (3.0 * gaussian(&mut rng), gaussian(&mut rng));
                vec![ct * u - st * v + 1.0, st * u + ct * v - 2.0]
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let a = pts.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n;
        let c = pts.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / n;
        let b = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n;
        let half = ((a - c) / 2.0).hypot(b);
        let lambdas = [(a + c) / 2.0 + half, (a + c) / 2.0 - half];
        let p = pca(&pts, 2);
        for (k, &l) in lambdas.iter().enumerate() {
            let (vx, vy) = if b.abs() > 1e-12 { (b, l - a) } else if (l - a).abs() < (l - c).abs() { (1.0, 0.0) } else { (0.0, 1.0) };
            let norm = vx.hypot(vy);
            let v = [vx / norm, vy / norm];
            let got = &p.components[k];
            let sign = if got[0] * v[0] + got[1] * v[1] < 0.0 { -1.0 } else { 1.0 };
            let err = (got[0] - sign * v[0]).abs().max((got[1] - sign * v[1]).abs());
            axis_err = axis_err.max(err);
            ensure(err <= 1e-6, || format!("trial {trial} axis {k}: {got:?} vs closed form {v:?}"))?;
            ensure((p.eigenvalues[k] - l).abs() <= 1e-6 * l.max(1.0), || {
                format!("trial {trial} eigenvalue {k}: {} vs {l}", p.eigenvalues[k])
            })?;
        }
    }

    for trial in 0..20u64 {
        let n = rng.gen_range(1..=30);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| gaussian(&mut rng)).collect()).collect();
        let km = kmeans(&pts, n, trial, 100);
        ensure(km.inertia == 0.0, || format!("trial {trial}: k = n = {n} gave inertia {}", km.inertia))?;
    }
    Ok(format!(
        "orthonormality error {worst:.1e}, closed-form axis error {axis_err:.1e}, k = n inertia 0"
    ))
}

// ---------------------------------------------------------------- determinism

fn end_to_end_determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_stigmagraph");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo/demo.toml");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut manifests = Vec::new();
    let mut slowest = Duration::ZERO;
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let start = Instant::now();
        let status = Command::new(exe)
            .args(["pipeline", "--mock", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);
        ensure(status.status.success(), || {
            format!("run {run} failed: {}", String::from_utf8_lossy(&status.stderr))
        })?;
        within(elapsed, Duration::from_secs(60), "pipeline run")?;
        manifests.push(std::fs::read(out.join("manifest.json")).map_err(|e| e.to_string())?);
    }
    ensure(manifests[0] == manifests[1], || "manifests differ between runs".into())?;
    Ok(format!(
        "manifests byte-identical ({} bytes), slowest run {:.2} s",
        manifests[0].len(),
        slowest.as_secs_f64()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("kappa_correctness", kappa_correctness),
        ("statistics", statistics),
        ("interview_state_machine", interview_state_machine),
        ("triple_handling", triple_handling),
        ("entity_resolution", entity_resolution),
        ("graph_metrics", graph_metrics),
        ("conceptual_model", conceptual_model),
        ("pca_kmeans", pca_kmeans),
        ("end_to_end_determinism", end_to_end_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
