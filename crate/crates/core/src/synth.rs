//! Synthetic gap-injection fixtures.
//!
//! Builds a corpus where every query owns a disjoint group of APIs that
//! retrieve in a known order, plus a mock scenario and scripted LLM answers
//! that give each API one injected behavior:
//!
//! - parameter mismatch: the planner answer cannot be validated
//! - semantic mismatch: the call succeeds with an empty body
//! - execution failure: the call errors; the simulator rescues some of them
//! - functional success: the call returns a non-empty body
//!
//! Behavior counts follow the configured mix exactly. Failures are biased
//! toward the top of each query's retrieval order, so a retriever that
//! ignores execution ranks broken tools first. The same seed always yields
//! byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{
    queries_to_jsonl, ApiSpec, HttpMethod, ParamKind, ParamLocation, ParamSpec, QueryRecord, ToolKey, ToolSpec,
};
use crate::llm::{ScriptEntry, ScriptFile};
use crate::sandbox::{MockBehavior, MockScenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub tools: usize,
    pub apis_per_tool: usize,
    pub queries: usize,
    /// Fractions for parameter mismatch, semantic mismatch, execution
    /// failure and functional success.
    pub mix: [f64; 4],
    /// Share of execution failures the simulator rescues.
    pub simulated_share: f64,
    /// Spread added to the failure-first ordering; larger values let more
    /// successes reach the top of the retrieval order.
    pub order_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tools: 50,
            apis_per_tool: 4,
            queries: 20,
            mix: [0.42, 0.25, 0.18, 0.15],
            simulated_share: 2.0 / 3.0,
            order_noise: 3.5,
            seed: 3,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("{apis} APIs cannot be split evenly across {queries} queries")]
    UnevenGroups { apis: usize, queries: usize },
    #[error("mix must be four non-negative fractions summing to 1")]
    BadMix,
    #[error("{successes} functional successes cannot cover {queries} queries")]
    TooFewSuccesses { successes: usize, queries: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanFault {
    MissingRequired,
    HallucinatedParam,
    KindMismatch,
    Declined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Injected {
    ParameterMismatch { fault: PlanFault },
    SemanticMismatch,
    ExecutionFailure { simulated: bool },
    FunctionalSuccess,
}

impl Injected {
    fn bucket(self) -> usize {
        match self {
            Injected::ParameterMismatch { .. } => 0,
            Injected::SemanticMismatch => 1,
            Injected::ExecutionFailure { .. } => 2,
            Injected::FunctionalSuccess => 3,
        }
    }

    /// Whether a trial on this API ends in a (real or simulated) success.
    pub fn succeeds(self) -> bool {
        matches!(
            self,
            Injected::FunctionalSuccess | Injected::ExecutionFailure { simulated: true }
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub spec: SynthSpec,
    pub tools: Vec<ToolSpec>,
    pub queries: Vec<QueryRecord>,
    pub scenario: MockScenario,
    pub script: ScriptFile,
    /// Injected behavior per API.
    pub behaviors: BTreeMap<ToolKey, Injected>,
    /// Intended retrieval order per query id.
    pub groups: BTreeMap<String, Vec<ToolKey>>,
}

const VERBS: [&str; 6] = ["search", "lookup", "list", "fetch", "resolve", "scan"];
const NOUNS: [&str; 8] = [
    "ledger",
    "catalog",
    "roster",
    "archive",
    "registry",
    "inventory",
    "bulletin",
    "index",
];
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mir", "zen", "tu", "vex", "dra", "pol", "qui", "sar", "nem", "bo", "ril", "fa", "gor", "yu",
];

/// Exact integer counts for `fractions` over `n` items (largest remainder).
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn anchor_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..3)
            .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn param(name: &str, kind: ParamKind, required: bool, description: &str) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind,
        required,
        location: ParamLocation::Query,
        description: description.into(),
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthFixture, SynthError> {
    const GROUP: usize = 10;
    let apis = spec.tools * spec.apis_per_tool;
    if spec.queries == 0 || apis != spec.queries * GROUP || spec.apis_per_tool > VERBS.len() {
        return Err(SynthError::UnevenGroups {
            apis,
            queries: spec.queries,
        });
    }
    let sum: f64 = spec.mix.iter().sum();
    if spec.mix.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadMix);
    }
    let counts = apportion(apis, &spec.mix);
    if counts[3] < spec.queries {
        return Err(SynthError::TooFewSuccesses {
            successes: counts[3],
            queries: spec.queries,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Behavior pool: one success reserved per query, the rest shuffled.
    let simulated = (counts[2] as f64 * spec.simulated_share).round() as usize;
    let mut pool = Vec::with_capacity(apis);
    let faults = [
        PlanFault::MissingRequired,
        PlanFault::HallucinatedParam,
        PlanFault::KindMismatch,
        PlanFault::Declined,
    ];
    pool.extend((0..counts[0]).map(|i| Injected::ParameterMismatch { fault: faults[i % 4] }));
    pool.extend((0..counts[1]).map(|_| Injected::SemanticMismatch));
    pool.extend((0..counts[2]).map(|i| Injected::ExecutionFailure {
        simulated: i < simulated,
    }));
    pool.extend((0..counts[3] - spec.queries).map(|_| Injected::FunctionalSuccess));
    pool.shuffle(&mut rng);
    let mut per_query: Vec<Vec<Injected>> = (0..spec.queries).map(|_| vec![Injected::FunctionalSuccess]).collect();
    for (i, b) in pool.into_iter().enumerate() {
        per_query[i % spec.queries].push(b);
    }

    // Failures first, with noise so some successes still surface early.
    for group in &mut per_query {
        let mut keyed: Vec<(f64, Injected)> = group
            .iter()
            .map(|b| (b.bucket() as f64 + rng.random::<f64>() * spec.order_noise, *b))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        *group = keyed.into_iter().map(|(_, b)| b).collect();
    }

    let anchors = anchor_words(&mut rng, spec.queries * 2);
    let mut tools = Vec::with_capacity(spec.tools);
    for t in 0..spec.tools {
        tools.push(ToolSpec {
            tool_id: format!("synth{t:03}"),
            name: format!("Synth Service {t:03}"),
            description: format!("Synthetic service number {t} for integration runs"),
            apis: Vec::with_capacity(spec.apis_per_tool),
        });
    }

    let mut behaviors = BTreeMap::new();
    let mut groups = BTreeMap::new();
    let mut queries = Vec::with_capacity(spec.queries);
    let mut scenario = MockScenario::default();
    let mut planner = Vec::new();
    let mut simulator = Vec::new();
    let mut evaluator = Vec::new();

    for (q, group) in per_query.iter().enumerate() {
        let (a1, a2) = (&anchors[2 * q], &anchors[2 * q + 1]);
        let query_id = format!("gq{q:03}");
        let text = format!("I need {a1} {a2} information");
        let mut order = Vec::with_capacity(GROUP);
        for (rank, behavior) in group.iter().enumerate() {
            let slot = q * GROUP + rank;
            let (t, j) = (slot / spec.apis_per_tool, slot % spec.apis_per_tool);
            let tool = &mut tools[t];
            let noun = NOUNS[(t + j) % NOUNS.len()];
            let api_name = format!("{}_{noun}", VERBS[j]);
            let repeated = vec![format!("{a1} {a2}"); GROUP - rank].join(" ");
            let mut api = ApiSpec {
                api_name: api_name.clone(),
                description: format!("{} {noun} records {repeated}", VERBS[j]),
                method: HttpMethod::Get,
                endpoint_template: format!("/{}/{api_name}", tool.tool_id),
                requires_auth: false,
                params: vec![
                    param("q", ParamKind::String, true, "search terms"),
                    param("limit", ParamKind::Integer, false, "maximum number of results"),
                ],
            };
            let key = ToolKey::new(&tool.tool_id, &api_name);
            let mut answer = json!({"q": format!("{a1} {a2}"), "limit": 5});
            let ok_body =
                json!({"results": [{"id": format!("{}-1", key.tool_id), "title": format!("{a1} {a2} {noun}")}]});
            let mut behavior_spec = MockBehavior::respond(200, ok_body.clone());
            match behavior {
                Injected::ParameterMismatch { fault } => match fault {
                    PlanFault::MissingRequired => api.params.push(param(
                        "account_ref",
                        ParamKind::String,
                        true,
                        "caller account reference",
                    )),
                    PlanFault::HallucinatedParam => {
                        answer["session_token"] = json!("tok-0000");
                    }
                    PlanFault::KindMismatch => {
                        answer["limit"] = json!("several");
                    }
                    PlanFault::Declined => {
                        api.params
                            .push(param("region_code", ParamKind::String, true, "region code"));
                        answer = json!({"error": "the query does not give a region_code"});
                    }
                },
                Injected::SemanticMismatch => {
                    let empty = if slot.is_multiple_of(2) { json!([]) } else { json!({}) };
                    behavior_spec = MockBehavior::respond(200, empty);
                }
                Injected::ExecutionFailure { simulated } => {
                    match slot % 3 {
                        0 => behavior_spec = MockBehavior::respond(500, json!({"error": "internal"})),
                        1 => {
                            api.requires_auth = true;
                            behavior_spec.require_auth = true;
                        }
                        _ => behavior_spec = MockBehavior::respond(503, json!({"error": "unavailable"})),
                    }
                    let call_prefix = format!("\"{}.{api_name}(", key.tool_id);
                    let response = if *simulated {
                        json!({"results": [{"id": format!("{}-sim", key.tool_id), "title": format!("{a1} {a2} {noun}")}]})
                    } else {
                        json!("UNSUPPORTED")
                    };
                    simulator.push(ScriptEntry::contains(&["### ROLE: SIMULATOR", &call_prefix], response));
                }
                Injected::FunctionalSuccess => {}
            }
            planner.push(ScriptEntry::contains(
                &["### ROLE: PLANNER", &format!("API: {}.{api_name}\n", key.tool_id)],
                answer,
            ));
            tool.apis.push(api);
            scenario.insert(&key, behavior_spec);
            behaviors.insert(key.clone(), *behavior);
            order.push(key);
        }

        // Labels: every API that works, plus up to two others from the group.
        let mut relevant: BTreeSet<ToolKey> = order.iter().filter(|k| behaviors[*k].succeeds()).cloned().collect();
        let target = relevant.len() + rng.random_range(0..=2);
        while relevant.len() < target {
            relevant.insert(order[rng.random_range(0..order.len())].clone());
        }

        // Evaluator: real successes, then simulated, then empty results, each
        // in retrieval order; failures are left out.
        let rank_of = |b: Injected| match b {
            Injected::FunctionalSuccess => Some(0),
            Injected::ExecutionFailure { simulated: true } => Some(1),
            Injected::SemanticMismatch => Some(2),
            _ => None,
        };
        let mut chosen: Vec<(usize, usize, &ToolKey)> = order
            .iter()
            .enumerate()
            .filter_map(|(i, k)| rank_of(behaviors[k]).map(|r| (r, i, k)))
            .collect();
        chosen.sort();
        let ranking: Vec<Value> = chosen.iter().map(|(_, _, k)| json!([k.tool_id, k.api_name])).collect();
        evaluator.push(ScriptEntry::contains(
            &["### ROLE: EVALUATOR", &format!("Query: \"{text}\"")],
            Value::Array(ranking),
        ));

        queries.push(QueryRecord {
            query_id: query_id.clone(),
            text,
            relevant,
        });
        groups.insert(query_id, order);
    }

    let mut entries = planner;
    entries.extend(simulator);
    entries.extend(evaluator);
    Ok(SynthFixture {
        spec: spec.clone(),
        tools,
        queries,
        scenario,
        script: ScriptFile { entries },
        behaviors,
        groups,
    })
}

pub const RUN_TOML: &str = r#"[paths]
tools = "tools.jsonl"
queries = "queries.jsonl"
scenario = "scenario.json"
output_dir = "out"

[retriever]
top_k = 10

[trial]
max_concurrency = 8

[llm]
mode = "scripted"
script_path = "script.json"

[rerank]
mode = "llm"

[eval]
k_values = [1, 3, 5, 10]
"#;

impl SynthFixture {
    /// File name to contents, in write order.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        let mut tools = String::new();
        for t in &self.tools {
            tools.push_str(&serde_json::to_string(t).expect("tool serializes"));
            tools.push('\n');
        }
        vec![
            ("tools.jsonl", tools),
            ("queries.jsonl", queries_to_jsonl(&self.queries)),
            ("scenario.json", pretty(&self.scenario)),
            ("script.json", pretty(&self.script)),
            ("run.toml", RUN_TOML.to_string()),
        ]
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, contents) in self.files() {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }

    /// Exact injected histogram in the order of the mix.
    pub fn injected_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for b in self.behaviors.values() {
            c[b.bucket()] += 1;
        }
        c
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("fixture serializes");
    s.push('\n');
    s
}
