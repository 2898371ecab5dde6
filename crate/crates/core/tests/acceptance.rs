//! Acceptance suite. Each test prints one PASS/FAIL line (written straight
//! to stdout so it shows without `--nocapture`) and then asserts.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use vidgraph_core::agent::prompt::PromptTemplate;
use vidgraph_core::agent::{decide_action, Action, Agent, AgentConfig, AgentSession, Termination};
use vidgraph_core::eval::{run_eval, EvalReport};
use vidgraph_core::gateway::{
    ChatMessage, ChatRequest, EmbedInput, Gateway, GatewayConfig, GatewayError, ProviderConfig, ProviderKind, Script,
};
use vidgraph_core::graph::{FrameRecord, GraphConfig, VideoGraph};
use vidgraph_core::parser::{
    parse_caption, CaptionParse, EntityType, ExtractedTriple, Lexicon, Mention, QueryParse, RelationCategory, StateEvent,
};
use vidgraph_core::selector::{combined_score, select_frames, Candidate, SelectorConfig};
use vidgraph_core::store::{self, load_bundle, LoadOptions, QAItem, TranscriptRecord, VideoBundle};

use support::{chain_suite, entry, RecordedRequest, StubResponse, StubServer};

/// Arithmetic of the combined frame score.
const SCORE_TOL: f64 = 1e-12;
/// Coherence against the independent recomputation.
const COHERENCE_TOL: f64 = 1e-9;
/// Wall-clock limit for the frame-budget sessions.
const BUDGET_TIME_LIMIT: Duration = Duration::from_secs(10);

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout(), "criterion {n:>2} [{verdict}] {name}: {detail}");
}

fn mention(lemma: &str) -> Mention {
    Mention {
        surface: lemma.to_string(),
        lemma: lemma.to_string(),
        entity_type: EntityType::Object,
        char_span: (0, lemma.len()),
    }
}

fn letters(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("option {}", char::from(b'a' + i as u8))).collect()
}

// ---------------------------------------------------------------------------
// Random scripted sessions
// ---------------------------------------------------------------------------

const SUBJECTS: [&str; 7] = ["dog", "cat", "person", "boy", "girl", "man", "woman"];
const VERBS: [&str; 6] = ["holds", "takes", "chases", "plays with", "looks at", "throws"];
const OBJECTS: [&str; 6] = ["toy", "ball", "cup", "book", "sword", "box"];
const STATES: [&str; 4] = ["angry", "happy", "tired", "calm"];

fn random_caption(rng: &mut StdRng) -> String {
    let s = SUBJECTS.choose(rng).unwrap();
    match rng.gen_range(0..4) {
        0 => format!("the {s} becomes {}", STATES.choose(rng).unwrap()),
        1 => format!("the {s} sits near the {}", OBJECTS.choose(rng).unwrap()),
        _ => format!("the {s} {} the {}", VERBS.choose(rng).unwrap(), OBJECTS.choose(rng).unwrap()),
    }
}

fn random_bundle(rng: &mut StdRng, id: usize) -> VideoBundle {
    let total = rng.gen_range(20..1500);
    let coverage = if rng.gen_bool(0.5) { 1.0 } else { 0.7 };
    let mut b = VideoBundle::new(format!("rand{id}"), total);
    for f in 0..total {
        if rng.gen_bool(coverage) {
            b.captions.insert(f, random_caption(rng));
        }
    }
    b
}

struct RandomRun {
    session: AgentSession,
    first_confidence: Option<u8>,
    wire_attempts: u64,
}

fn random_session(rng: &mut StdRng, id: usize, cfg: &AgentConfig, lex: &Lexicon, template: &PromptTemplate) -> RandomRun {
    let bundle = random_bundle(rng, id);
    let n_options = rng.gen_range(2..=5);
    let mut entries = Vec::new();
    let mut first_confidence = None;
    for round in 1..=cfg.max_rounds {
        let reply = if rng.gen_bool(0.1) {
            "I am not sure what to say".to_string()
        } else {
            let c = rng.gen_range(1..=3u8);
            if round == 1 {
                first_confidence = Some(c);
            }
            let letter = char::from(b'A' + rng.gen_range(0..n_options) as u8);
            format!("reasoning: ...\nanswer: {letter}\nconfidence: {c}\nmissing: more frames")
        };
        entries.push(entry(Some(round), &[], &reply));
    }
    entries.push(entry(None, &[], "answer: A, confidence: 3"));
    let mut gateway = Gateway::scripted(Script::new(entries).unwrap());
    if rng.gen_bool(0.5) {
        gateway = gateway.with_scripted_embeddings(rng.gen(), Some(16));
    }
    let agent = Agent {
        cfg,
        gateway: &gateway,
        lexicon: lex,
        template,
    };
    let question = format!("what does the {} do with the {}?", SUBJECTS.choose(rng).unwrap(), OBJECTS.choose(rng).unwrap());
    let (session, _) = agent.run(&bundle, &question, &letters(n_options)).expect("scripted session runs");
    RandomRun {
        session,
        first_confidence,
        wire_attempts: gateway.wire_attempts(),
    }
}

#[test]
fn c01_frame_budget() {
    let cfg = AgentConfig::default();
    let lex = Lexicon::default();
    let template = PromptTemplate::default();
    let mut rng = StdRng::seed_from_u64(0xB0D6E7);
    let budget = cfg.frame_budget();
    let start = Instant::now();
    let (mut over, mut confident_first, mut confident_first_exact, mut max_used, mut wire) = (0, 0, 0, 0, 0);
    for id in 0..200 {
        let run = random_session(&mut rng, id, &cfg, &lex, &template);
        let used = run.session.frames_used();
        max_used = max_used.max(used);
        over += usize::from(used > budget);
        if run.first_confidence == Some(3) {
            confident_first += 1;
            confident_first_exact += usize::from(used == cfg.initial_frames);
        }
        wire += run.wire_attempts;
    }
    let elapsed = start.elapsed();
    let pass = budget == 11 && over == 0 && confident_first == confident_first_exact && wire == 0 && elapsed < BUDGET_TIME_LIMIT;
    report(
        1,
        "frame budget",
        pass,
        &format!(
            "200 sessions, max frames {max_used} (limit {budget}), {confident_first_exact}/{confident_first} confident-first sessions used exactly {}, {wire} network requests, {:.2}s",
            cfg.initial_frames,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c02_score_arithmetic() {
    let cfg = SelectorConfig::default();
    let example = combined_score((1.0, 0.5, 0.0), &cfg).unwrap();
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let raw: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let sum: f64 = raw.iter().sum();
        let c = SelectorConfig {
            weight_graph: raw[0] / sum,
            weight_visual: raw[1] / sum,
            weight_temporal: raw[2] / sum,
            ..SelectorConfig::default()
        };
        let ones = combined_score((1.0, 1.0, 1.0), &c).unwrap();
        let zeros = combined_score((0.0, 0.0, 0.0), &c).unwrap();
        worst = worst.max((ones - 1.0).abs()).max(zeros.abs());
    }
    let pass = (example - 0.65).abs() <= SCORE_TOL && worst <= SCORE_TOL;
    report(
        2,
        "combined score arithmetic",
        pass,
        &format!("(1, 0.5, 0) -> {example}, worst deviation over 1000 weight triples {worst:.1e} (tol {SCORE_TOL:.0e})"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Selection oracle
// ---------------------------------------------------------------------------

struct SelectionCase {
    graph: VideoGraph,
    query: QueryParse,
    query_embedding: Option<Vec<f64>>,
    selected: BTreeSet<u32>,
    candidates: Vec<Candidate>,
    total: u32,
    cfg: SelectorConfig,
    expanded: bool,
    /// lemma -> appearance frames, kept outside the graph for the oracle.
    appearances: BTreeMap<String, Vec<u32>>,
}

const POOL: [&str; 5] = ["dog", "cat", "toy", "ball", "person"];

fn selection_case(rng: &mut StdRng) -> SelectionCase {
    let total = rng.gen_range(50..2000u32);
    let mut graph = VideoGraph::default();
    let mut appearances: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for lemma in POOL {
        if rng.gen_bool(0.7) {
            for _ in 0..rng.gen_range(1..6) {
                let f = rng.gen_range(0..total);
                graph.upsert_entity(&mention(lemma), f, None, None).unwrap();
                appearances.entry(lemma.to_string()).or_default().push(f);
            }
        }
    }
    let mut q: Vec<&str> = POOL.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    if rng.gen_bool(0.3) {
        q.push("zebra");
    }
    if let Some(&first) = q.first() {
        if rng.gen_bool(0.3) {
            q.push(first);
        }
    }
    let query = QueryParse {
        entities: q.iter().map(|l| mention(l)).collect(),
        predicates: Vec::new(),
        raw_question: String::new(),
    };
    let dim = 8;
    let vectors: Vec<Vec<f64>> = (0..5)
        .map(|i| if i == 0 { vec![0.0; dim] } else { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() })
        .collect();
    let query_embedding = rng.gen_bool(0.8).then(|| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let selected: BTreeSet<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..total)).collect();
    let mut frames: Vec<u32> = (0..total).filter(|f| !selected.contains(f)).collect();
    frames.shuffle(rng);
    frames.truncate(rng.gen_range(0..=200));
    let candidates = frames
        .into_iter()
        .map(|f| Candidate {
            frame_index: f,
            embedding: rng.gen_bool(0.8).then(|| vectors.choose(rng).unwrap().clone()),
        })
        .collect();
    let w: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let sum: f64 = w.iter().sum();
    let cfg = SelectorConfig {
        weight_graph: w[0] / sum,
        weight_visual: w[1] / sum,
        weight_temporal: w[2] / sum,
        k: rng.gen_range(1..7),
        decay_len: rng.gen_range(1..40),
        ..SelectorConfig::default()
    };
    SelectionCase {
        graph,
        query,
        query_embedding,
        selected,
        candidates,
        total,
        cfg,
        expanded: rng.gen_bool(0.3),
        appearances,
    }
}

/// Exhaustive scoring and a full sort, written without the selector's
/// helpers.
fn selection_oracle(case: &SelectionCase) -> Vec<u32> {
    let decay = f64::from(case.cfg.decay_len) * if case.expanded { case.cfg.expanded_decay_multiplier } else { 1.0 };
    let mut lemmas: Vec<&str> = Vec::new();
    for m in &case.query.entities {
        if !lemmas.contains(&m.lemma.as_str()) {
            lemmas.push(&m.lemma);
        }
    }
    let mut raw: Vec<[f64; 3]> = Vec::new();
    for c in &case.candidates {
        let f = c.frame_index;
        let mut g = 0.0;
        for l in &lemmas {
            if let Some(frames) = case.appearances.get(*l) {
                let d = frames.iter().map(|&a| a.abs_diff(f)).min().unwrap();
                g += (-f64::from(d) / decay).exp();
            }
        }
        let v = match (&c.embedding, &case.query_embedding) {
            (Some(a), Some(b)) => {
                let mut dot = 0.0;
                let (mut na, mut nb) = (0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                let (na, nb) = (f64::sqrt(na), f64::sqrt(nb));
                if na > 0.0 && nb > 0.0 {
                    (1.0 + (dot / (na * nb)).clamp(-1.0, 1.0)) / 2.0
                } else {
                    0.5
                }
            }
            _ => 0.5,
        };
        let left = case.selected.iter().filter(|&&s| s < f).max().map_or(-1.0, |&s| f64::from(s));
        let right = case.selected.iter().filter(|&&s| s > f).min().map_or(f64::from(case.total), |&s| f64::from(s));
        let gap = right - left;
        let t = gap / f64::from(case.total) * (1.0 - (f64::from(f) - (left + right) / 2.0).abs() / (gap / 2.0));
        raw.push([g, v, t]);
    }
    let mut norm = vec![[0.0; 3]; raw.len()];
    for j in 0..3 {
        let lo = raw.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        for (i, r) in raw.iter().enumerate() {
            norm[i][j] = if hi == lo { 0.5 } else { (r[j] - lo) / (hi - lo) };
        }
    }
    let w = &case.cfg;
    let mut scored: Vec<(f64, u32)> = norm
        .iter()
        .zip(&case.candidates)
        .map(|(n, c)| (w.weight_graph * n[0] + w.weight_visual * n[1] + w.weight_temporal * n[2], c.frame_index))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut top: Vec<u32> = scored.into_iter().take(w.k).map(|(_, f)| f).collect();
    top.sort_unstable();
    top
}

#[test]
fn c03_selection_oracle() {
    let mut rng = StdRng::seed_from_u64(3);
    let (mut matches, mut with_ties) = (0, 0);
    for _ in 0..100 {
        let case = selection_case(&mut rng);
        let got = select_frames(
            &case.candidates,
            &case.graph,
            &case.query,
            case.query_embedding.as_deref(),
            &case.selected,
            case.total,
            &case.cfg,
            case.expanded,
        )
        .unwrap();
        let expected = selection_oracle(&case);
        matches += usize::from(got == expected);
        let distinct: BTreeSet<Option<Vec<u64>>> = case
            .candidates
            .iter()
            .map(|c| c.embedding.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect()))
            .collect();
        with_ties += usize::from(distinct.len() < case.candidates.len());
    }
    let pass = matches == 100;
    report(
        3,
        "selection oracle",
        pass,
        &format!("{matches}/100 instances match the brute-force top-k exactly ({with_ties} with repeated embeddings)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Coherence oracle
// ---------------------------------------------------------------------------

#[derive(Default)]
struct History {
    processed: BTreeSet<u32>,
    appearances: BTreeMap<String, BTreeSet<u32>>,
    states: BTreeMap<String, BTreeMap<u32, String>>,
    edges: BTreeMap<(String, String, String), BTreeSet<u32>>,
}

impl History {
    fn state_at(&self, lemma: &str, frame: u32) -> &str {
        self.states
            .get(lemma)
            .and_then(|s| s.range(..=frame).next_back())
            .map_or("neutral", |(_, s)| s.as_str())
    }

    fn s(&self, lemma: &str, frame: u32, window: usize) -> f64 {
        let obs: Vec<u32> = self.appearances[lemma].iter().copied().filter(|&g| g <= frame).collect();
        if obs.len() < 2 {
            return 1.0;
        }
        let recent = &obs[obs.len().saturating_sub(window)..];
        let now = self.state_at(lemma, frame);
        recent.iter().filter(|&&g| self.state_at(lemma, g) == now).count() as f64 / recent.len() as f64
    }

    fn r(&self, lemma: &str, frame: u32, window: usize) -> f64 {
        let prev: Vec<u32> = self.processed.iter().copied().filter(|&g| g < frame).rev().take(window).collect();
        let (mut total, mut kept) = (0, 0);
        for ((src, _, dst), frames) in &self.edges {
            if (src == lemma || dst == lemma) && frames.contains(&frame) {
                total += 1;
                kept += usize::from(prev.iter().any(|g| frames.contains(g)));
            }
        }
        if total == 0 {
            0.0
        } else {
            kept as f64 / total as f64
        }
    }
}

const PREDICATES: [(&str, RelationCategory); 3] = [
    ("chase", RelationCategory::Interaction),
    ("hold", RelationCategory::Action),
    ("near", RelationCategory::Spatial),
];

fn random_history(rng: &mut StdRng) -> (VideoGraph, History) {
    let cfg = GraphConfig {
        window: rng.gen_range(1..7),
        coherence_alpha: rng.gen_range(0.0..=1.0),
        ..GraphConfig::default()
    };
    let mut frames: Vec<u32> = (0..rng.gen_range(3..30)).map(|_| rng.gen_range(0..300)).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut h = History::default();
    let mut parses = Vec::new();
    for &f in &frames {
        let present: Vec<&str> = POOL.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        let mut p = CaptionParse::empty(f);
        for l in &present {
            p.mentions.push(mention(l));
            h.appearances.entry(l.to_string()).or_default().insert(f);
            if rng.gen_bool(0.3) {
                let s = STATES.choose(rng).unwrap();
                p.state_events.push(StateEvent {
                    mention: mention(l),
                    state: s.to_string(),
                });
                h.states.entry(l.to_string()).or_default().insert(f, s.to_string());
            }
        }
        if present.len() >= 2 {
            for _ in 0..rng.gen_range(0..3) {
                let pair: Vec<&&str> = present.choose_multiple(rng, 2).collect();
                let (pred, cat) = PREDICATES.choose(rng).unwrap();
                p.triples.push(ExtractedTriple {
                    subject: mention(pair[0]),
                    predicate: pred.to_string(),
                    category: *cat,
                    object: mention(pair[1]),
                });
                h.edges
                    .entry((pair[0].to_string(), pred.to_string(), pair[1].to_string()))
                    .or_default()
                    .insert(f);
            }
        }
        h.processed.insert(f);
        parses.push(p);
    }
    let mut graph = VideoGraph::new(cfg).unwrap();
    let cut = rng.gen_range(0..=parses.len());
    for chunk in [&parses[..cut], &parses[cut..]] {
        let records: Vec<FrameRecord> = chunk
            .iter()
            .map(|p| FrameRecord {
                frame_index: p.frame_index,
                caption: String::new(),
                embedding: None,
            })
            .collect();
        graph = graph.update_graph(&records, chunk).unwrap();
    }
    (graph, h)
}

#[test]
fn c04_coherence_oracle() {
    let mut rng = StdRng::seed_from_u64(4);
    let (mut checks, mut worst, mut endpoint_worst) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (mut graph, h) = random_history(&mut rng);
        let window = graph.config.window;
        let alpha = graph.config.coherence_alpha;
        for (lemma, seen) in &h.appearances {
            let id = graph.find_by_lemma(lemma).unwrap().id;
            let first = *seen.iter().next().unwrap();
            let mut probes: BTreeSet<u32> = h.processed.range(first..).copied().collect();
            probes.extend((0..3).map(|_| rng.gen_range(first..first + 400)));
            for f in probes {
                let (s, r) = (h.s(lemma, f, window), h.r(lemma, f, window));
                let t = graph.temporal_coherence(id, f).unwrap();
                worst = worst.max((t - (alpha * s + (1.0 - alpha) * r)).abs());
                graph.config.coherence_alpha = 1.0;
                let at_one = graph.temporal_coherence(id, f).unwrap();
                graph.config.coherence_alpha = 0.0;
                let at_zero = graph.temporal_coherence(id, f).unwrap();
                graph.config.coherence_alpha = alpha;
                endpoint_worst = endpoint_worst.max((at_one - s).abs()).max((at_zero - r).abs());
                checks += 1;
            }
        }
    }
    let pass = worst <= COHERENCE_TOL && endpoint_worst <= COHERENCE_TOL && checks > 1000;
    report(
        4,
        "coherence oracle",
        pass,
        &format!("{checks} (entity, frame) probes over 100 histories, max deviation {worst:.1e}, endpoint deviation {endpoint_worst:.1e} (tol {COHERENCE_TOL:.0e})"),
    );
    assert!(pass);
}

#[test]
fn c05_fig1_extraction() {
    let lex = Lexicon::default();
    let captions = ["the dog plays with the toy", "the person takes the toy", "the dog barks at the person"];
    let records: Vec<FrameRecord> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| FrameRecord {
            frame_index: i as u32,
            caption: c.to_string(),
            embedding: None,
        })
        .collect();
    let parses: Vec<_> = records.iter().map(|r| parse_caption(&r.caption, r.frame_index, &lex)).collect();
    let graph = VideoGraph::default().update_graph(&records, &parses).unwrap();
    let nodes: BTreeSet<&str> = graph.nodes.values().map(|n| n.canonical_lemma.as_str()).collect();
    let edges: BTreeSet<(&str, &str, &str)> = graph
        .edges
        .values()
        .map(|e| {
            (
                graph.nodes[&e.src].canonical_lemma.as_str(),
                e.predicate.as_str(),
                graph.nodes[&e.dst].canonical_lemma.as_str(),
            )
        })
        .collect();
    let want_nodes: BTreeSet<&str> = ["dog", "toy", "person"].into();
    let want_edges: BTreeSet<(&str, &str, &str)> =
        [("dog", "play", "toy"), ("person", "take", "toy"), ("dog", "bark", "person")].into();
    let pass = nodes == want_nodes && edges == want_edges;
    report(5, "caption extraction fixture", pass, &format!("nodes {nodes:?}, edges {edges:?}"));
    assert!(pass);
}

fn run_chain_suite(relations: bool) -> Vec<(QAItem, AgentSession)> {
    let (cases, script) = chain_suite();
    let gateway = Gateway::scripted(script);
    let cfg = AgentConfig {
        relations_enabled: relations,
        ..AgentConfig::default()
    };
    let lex = Lexicon::default();
    let template = PromptTemplate::default();
    let agent = Agent {
        cfg: &cfg,
        gateway: &gateway,
        lexicon: &lex,
        template: &template,
    };
    cases
        .into_iter()
        .map(|c| {
            let (s, _) = agent.run(&c.bundle, &c.item.question, &c.item.options).unwrap();
            (c.item, s)
        })
        .collect()
}

#[test]
fn c06_relation_ablation() {
    let score = |runs: &[(QAItem, AgentSession)]| {
        let correct = runs.iter().filter(|(i, s)| s.final_answer == i.answer_index).count();
        let confident = runs.iter().filter(|(_, s)| s.terminated_by == Some(Termination::Confident)).count();
        let forced = runs
            .iter()
            .filter(|(_, s)| s.terminated_by == Some(Termination::RoundLimit) && s.rounds.len() == 3)
            .count();
        (correct, confident, forced)
    };
    let full = score(&run_chain_suite(true));
    let ablated = score(&run_chain_suite(false));
    let again = score(&run_chain_suite(false));
    let pass = full.0 == 10 && full.1 == 10 && ablated.1 == 0 && ablated.2 == 10 && ablated == again;
    report(
        6,
        "relation ablation",
        pass,
        &format!(
            "with relations {}/10 correct, {}/10 confident; without relations {}/10 correct, {}/10 confident, {}/10 forced at the round limit",
            full.0, full.1, ablated.0, ablated.1, ablated.2
        ),
    );
    assert!(pass);
}

#[test]
fn c07_gating_soundness() {
    let lex = Lexicon::default();
    let template = PromptTemplate::default();
    let mut rng = StdRng::seed_from_u64(7);
    let mut sessions: Vec<AgentSession> = Vec::new();
    for (max_rounds, threshold) in [(3, 3), (3, 2), (4, 3), (2, 3), (1, 3)] {
        let cfg = AgentConfig {
            max_rounds,
            confidence_threshold: threshold,
            ..AgentConfig::default()
        };
        for id in 0..40 {
            sessions.push(random_session(&mut rng, id, &cfg, &lex, &template).session);
        }
    }
    sessions.extend(run_chain_suite(true).into_iter().map(|(_, s)| s));
    sessions.extend(run_chain_suite(false).into_iter().map(|(_, s)| s));
    let rounds: usize = sessions.iter().map(|s| s.rounds.len()).sum();
    // confidence 3 meets every threshold used above
    let violations = sessions
        .iter()
        .flat_map(|s| s.rounds.iter())
        .filter(|r| r.confidence >= 3 && (!r.frames_added.is_empty() || r.action != Action::Answer))
        .count();

    let mut table_mismatches = 0;
    let mut table_rows = 0;
    for max_rounds in 1..=5u32 {
        for threshold in 1..=3u8 {
            let cfg = AgentConfig {
                max_rounds,
                confidence_threshold: threshold,
                ..AgentConfig::default()
            };
            for round in 1..=max_rounds {
                for confidence in 1..=3u8 {
                    let expected = if confidence >= threshold || round == max_rounds {
                        Action::Answer
                    } else if round == max_rounds - 1 {
                        Action::RetrieveExpanded
                    } else {
                        Action::Retrieve
                    };
                    table_rows += 1;
                    table_mismatches += usize::from(decide_action(confidence, round, &cfg) != expected);
                }
            }
        }
    }
    let cfg = AgentConfig::default();
    let named = decide_action(3, 1, &cfg) == Action::Answer
        && decide_action(1, 3, &cfg) == Action::Answer
        && decide_action(2, 2, &cfg) == Action::RetrieveExpanded;
    let pass = violations == 0 && table_mismatches == 0 && named;
    report(
        7,
        "gating soundness",
        pass,
        &format!(
            "{} sessions, {rounds} rounds, {violations} retrievals at confidence 3; decision table {}/{table_rows} rows match",
            sessions.len(),
            table_rows - table_mismatches
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Round trips
// ---------------------------------------------------------------------------

const UNICODE_WORDS: [&str; 8] = ["café", "niño", "犬", "Ölfass", "ŝipo", "кошка", "über", "naïve"];

fn random_float(rng: &mut StdRng) -> f64 {
    match rng.gen_range(0..10) {
        0 => 1e-300 * rng.gen_range(-1.0..1.0),
        1 => 5e-324,
        2 => -0.0,
        3 => 1e300 * rng.gen_range(-1.0..1.0),
        _ => rng.gen_range(-1.0..1.0),
    }
}

fn random_vector(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| random_float(rng)).collect();
    v[0] = rng.gen_range(0.5..1.0);
    v
}

fn unicode_caption(rng: &mut StdRng) -> String {
    let mut c = random_caption(rng);
    for _ in 0..rng.gen_range(0..3) {
        c.push(' ');
        c.push_str(UNICODE_WORDS.choose(rng).unwrap());
    }
    if rng.gen_bool(0.2) {
        c.push_str("\twith a tab, a \\ backslash\nand a newline");
    }
    c
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn c08_round_trip() {
    let lex = Lexicon::default();
    let mut rng = StdRng::seed_from_u64(8);
    let dir = tempfile::tempdir().unwrap();
    let (mut graphs_ok, mut bundles_ok, mut vectors) = (0, 0, 0usize);
    for i in 0..50 {
        let total = rng.gen_range(10..200);
        let mut bundle = VideoBundle::new(format!("vidéo-{i}-犬"), total);
        bundle.embedding_dim = Some(512);
        bundle.fps = rng.gen_bool(0.5).then(|| rng.gen_range(1.0..60.0));
        let mut frames: Vec<u32> = (0..total).collect();
        frames.shuffle(&mut rng);
        frames.truncate(rng.gen_range(1..12));
        frames.sort_unstable();
        for &f in &frames {
            bundle.captions.insert(f, unicode_caption(&mut rng));
            bundle.embeddings.insert(f, random_vector(&mut rng, 512));
        }

        let path = dir.path().join(format!("b{i}"));
        store::save_bundle(&bundle, &path).unwrap();
        let back = load_bundle(&path, LoadOptions::default()).unwrap();
        let floats_ok = bundle.embeddings.iter().all(|(f, v)| bits_equal(v, &back.embeddings[f]));
        bundles_ok += usize::from(back == bundle && floats_ok);

        let records: Vec<FrameRecord> = frames
            .iter()
            .map(|&f| FrameRecord {
                frame_index: f,
                caption: bundle.captions[&f].clone(),
                embedding: Some(bundle.embeddings[&f].clone()),
            })
            .collect();
        let parses: Vec<_> = records.iter().map(|r| parse_caption(&r.caption, r.frame_index, &lex)).collect();
        let graph = VideoGraph::default().update_graph(&records, &parses).unwrap();
        let bytes = store::save_graph(&graph);
        let loaded = store::load_graph(&bytes).unwrap();
        let features_ok = graph.nodes.iter().all(|(id, n)| match (&n.feature, &loaded.nodes[id].feature) {
            (Some(a), Some(b)) => {
                vectors += 1;
                bits_equal(a, b)
            }
            (a, b) => a == b,
        });
        graphs_ok += usize::from(loaded == graph && features_ok && store::save_graph(&loaded) == bytes);
    }
    let pass = graphs_ok == 50 && bundles_ok == 50;
    report(
        8,
        "serialization round trip",
        pass,
        &format!("{graphs_ok}/50 graphs and {bundles_ok}/50 bundles identical after save and load ({vectors} 512-dim features compared bit for bit)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Gateway against a local stub
// ---------------------------------------------------------------------------

fn remote(kind: ProviderKind, url: &str, max_retries: u32) -> ProviderConfig {
    ProviderConfig {
        kind,
        endpoint: Some(url.to_string()),
        model_name: Some("stub-model".into()),
        max_retries,
        backoff_ms: 1,
        timeout_secs: 5.0,
        ..ProviderConfig::default()
    }
}

fn remote_gateway(url: &str, max_retries: u32, cache: bool) -> Gateway {
    Gateway::new(&GatewayConfig {
        chat: Some(remote(ProviderKind::RemoteChat, url, max_retries)),
        caption: remote(ProviderKind::RemoteChat, url, max_retries),
        embed: Some(remote(ProviderKind::RemoteEmbed, url, max_retries)),
        cache,
        cache_dir: None,
    })
    .unwrap()
}

fn user(text: &str) -> ChatRequest {
    ChatRequest {
        messages: vec![ChatMessage::user(text)],
        round: None,
    }
}

/// Reply derived only from the request body.
fn echo(req: &RecordedRequest) -> StubResponse {
    let len = req.body.len() as f64;
    if req.path.ends_with("/embeddings") {
        StubResponse::embedding(&[len / 1000.0, 1.0 / len, -0.25])
    } else {
        StubResponse::chat(&format!("answer: B\nconfidence: 2\nmissing: body of {} bytes", req.body.len()))
    }
}

#[test]
fn c09_gateway_robustness() {
    let mut notes = Vec::new();
    let mut ok = true;

    // 500, 500, then 200
    let flaky = StubServer::start(|_, i| if i < 2 { StubResponse::json(500, "{}") } else { StubResponse::chat("answer: A, confidence: 3") });
    let g = remote_gateway(&flaky.url(), 3, false);
    let reply = g.chat(&user("hello"));
    ok &= reply.as_deref() == Ok("answer: A, confidence: 3") && flaky.request_count() == 3;
    notes.push(format!("500,500,200 -> {} attempts", flaky.request_count()));

    // persistent failure: attempts bounded by max_retries + 1
    let mut bound_ok = true;
    for max_retries in [0, 1, 3] {
        let down = StubServer::start(|_, _| StubResponse::json(503, "{\"error\":\"busy\"}"));
        let g = remote_gateway(&down.url(), max_retries, false);
        let err = g.chat(&user("hello")).unwrap_err();
        let attempts = max_retries + 1;
        bound_ok &= down.request_count() == attempts as usize
            && matches!(err, GatewayError::Status { status: 503, attempts: a, .. } if a == attempts);
    }
    ok &= bound_ok;
    notes.push(format!("persistent 503 within max_retries+1: {bound_ok}"));

    // malformed payloads surface as typed errors
    let bad_bodies = ["not json", "{\"choices\": []}", "{\"choices\": [{\"message\": {\"content\": 7}}]}", "{\"data\": [{\"embedding\": [\"x\"]}]}"];
    let mut typed = 0;
    for body in bad_bodies {
        let s = StubServer::start(move |_, _| StubResponse::json(200, body));
        let g = remote_gateway(&s.url(), 0, false);
        let bundle = VideoBundle::new("v", 10);
        let chat = g.chat(&user("x"));
        let emb = g.embed(&EmbedInput::Text("x".into()), &bundle);
        typed += usize::from(matches!(chat, Err(GatewayError::Decode(_))) && matches!(emb, Err(GatewayError::Decode(_))));
    }
    let truncated = StubServer::start(|_, _| StubResponse {
        truncate: true,
        ..StubResponse::chat("answer: A")
    });
    let g = remote_gateway(&truncated.url(), 1, false);
    let cut = g.chat(&user("x"));
    let cut_ok = matches!(cut, Err(GatewayError::Transport { attempts: 2, .. }) | Err(GatewayError::Decode(_)));
    ok &= typed == bad_bodies.len() && cut_ok;
    notes.push(format!("{typed}/{} malformed payloads typed, truncated body typed: {cut_ok}", bad_bodies.len()));

    // cache on and off give the same values
    let calls = |g: &Gateway, b: &VideoBundle| -> Vec<String> {
        let mut out = Vec::new();
        for text in ["why?", "what?", "why?", "why?"] {
            out.push(format!("{:?}", g.chat(&user(text))));
            out.push(format!("{:?}", g.embed(&EmbedInput::Text(text.into()), b)));
        }
        for f in [41, 41, 7, 41] {
            out.push(format!("{:?}", g.caption(f, b)));
            out.push(format!("{:?}", g.embed(&EmbedInput::Frame(f), b)));
        }
        out
    };
    let bundle = VideoBundle::new("v", 100);
    let plain = StubServer::start(|r, _| echo(r));
    let cached = StubServer::start(|r, _| echo(r));
    let off = calls(&remote_gateway(&plain.url(), 0, false), &bundle);
    let on = calls(&remote_gateway(&cached.url(), 0, true), &bundle);
    let transparent = off == on && cached.request_count() < plain.request_count();
    ok &= transparent;
    notes.push(format!(
        "cache on/off outputs equal: {}, requests {} vs {}",
        off == on,
        cached.request_count(),
        plain.request_count()
    ));

    report(9, "gateway robustness", ok, &notes.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// End-to-end determinism
// ---------------------------------------------------------------------------

fn eval_to_disk(root: &std::path::Path, items: &[QAItem], out: &std::path::Path, parallel: usize) -> (Vec<u8>, Vec<u8>, EvalReport) {
    let (_, script) = chain_suite();
    let gateway = Gateway::scripted(script);
    let cfg = AgentConfig::default();
    let lex = Lexicon::default();
    let template = PromptTemplate::default();
    let agent = Agent {
        cfg: &cfg,
        gateway: &gateway,
        lexicon: &lex,
        template: &template,
    };
    let run = run_eval(items, root, &agent, parallel).unwrap();
    std::fs::create_dir_all(out).unwrap();
    let transcripts = out.join("transcripts.jsonl");
    for r in &run.transcripts {
        store::save_transcript(&transcripts, r).unwrap();
    }
    let report = run.report.to_json();
    std::fs::write(out.join("report.json"), &report).unwrap();
    let replayed = EvalReport::from_transcripts(items, &store::load_transcripts(&transcripts).unwrap());
    (report.into_bytes(), std::fs::read(&transcripts).unwrap(), replayed)
}

#[test]
fn c10_eval_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("bundles");
    let (cases, _) = chain_suite();
    let items: Vec<QAItem> = cases.iter().map(|c| c.item.clone()).collect();
    for c in &cases {
        store::save_bundle(&c.bundle, root.join(&c.bundle.video_id)).unwrap();
    }
    let (report_a, transcripts_a, replay_a) = eval_to_disk(&root, &items, &dir.path().join("a"), 1);
    let (report_b, transcripts_b, _) = eval_to_disk(&root, &items, &dir.path().join("b"), 4);
    let records: Vec<TranscriptRecord> = store::load_transcripts(dir.path().join("a/transcripts.jsonl")).unwrap();
    let replay_ok = replay_a.to_json().into_bytes() == report_a;
    let pass = report_a == report_b && transcripts_a == transcripts_b && records.len() == 10 && replay_ok;
    report(
        10,
        "end-to-end determinism",
        pass,
        &format!(
            "reports identical: {}, transcripts identical: {} ({} bytes, {} records), report replays from transcripts: {replay_ok}, accuracy {:.2}",
            report_a == report_b,
            transcripts_a == transcripts_b,
            transcripts_a.len(),
            records.len(),
            replay_a.accuracy
        ),
    );
    assert!(pass);
}
