//! Taxonomy generation: render a constrained prompt for a flat label set,
//! call a chat-completion endpoint (or an offline fixture directory), and
//! validate the returned tree until it passes or the iteration budget runs
//! out.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{HierarchyFile, LabelHierarchy};

pub const ENDPOINT_ENV: &str = "HIERACT_LLM_ENDPOINT";
pub const KEY_ENV: &str = "HIERACT_LLM_KEY";

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("flat label set must be non-empty and unique")]
    BadLabels,
    #[error("target depth must be at least 2, got {0}")]
    BadDepth(usize),
    #[error("max_iterations must be at least 1")]
    BadIterations,
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("endpoint returned HTTP {0}")]
    HttpStatus(u16),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: usize },
    #[error("malformed response body: {0}")]
    MalformedResponseBody(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("no valid taxonomy after {iterations} iterations; last failures: {failures}")]
    ExhaustedIterations { iterations: usize, failures: String },
}

impl TaxonomyError {
    /// True for failures of the external service rather than of the data.
    pub fn is_external(&self) -> bool {
        matches!(
            self,
            TaxonomyError::Timeout(_)
                | TaxonomyError::HttpStatus(_)
                | TaxonomyError::RateLimited { .. }
                | TaxonomyError::MalformedResponseBody(_)
                | TaxonomyError::Transport(_)
        )
    }
}

/// The three clauses the prompt always carries.
pub const CONSTRAINT_CLAUSES: [&str; 3] = [
    "Distinct Hierarchical Separation: ensure clear semantic boundaries between \
     hierarchy levels so that no two groups overlap in meaning and no label is \
     ambiguous about which group it belongs to.",
    "Class Balance Control: keep the number of labels within each level relatively \
     balanced, avoiding groups that are much denser or sparser than their siblings.",
    "Flexible Handling of Ambiguous Labels: semantically ambiguous labels (for \
     example labels containing \"other\") may be categorized independently or as \
     flexible singleton groups rather than forced into an unrelated group.",
];

#[derive(Debug, Clone)]
pub struct TaxonomyPrompt {
    pub flat_labels: Vec<String>,
    pub target_depth: usize,
    pub iteration: usize,
    pub prior_feedback: Option<String>,
}

impl TaxonomyPrompt {
    pub fn new(flat_labels: Vec<String>, target_depth: usize) -> Result<Self, TaxonomyError> {
        if flat_labels.is_empty() {
            return Err(TaxonomyError::BadLabels);
        }
        let mut seen = std::collections::HashSet::new();
        for l in &flat_labels {
            if !seen.insert(l.as_str()) {
                return Err(TaxonomyError::BadLabels);
            }
        }
        if target_depth < 2 {
            return Err(TaxonomyError::BadDepth(target_depth));
        }
        Ok(TaxonomyPrompt {
            flat_labels,
            target_depth,
            iteration: 0,
            prior_feedback: None,
        })
    }
}

/// Deterministic prompt text: the flat labels, the requested depth, the
/// three constraint clauses, and the exact JSON schema the reply must use.
pub fn render_prompt(p: &TaxonomyPrompt) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "You are organizing semantic class labels for 3D indoor point cloud \
         segmentation into a tree with exactly {} levels, ordered coarse to fine.\n\n",
        p.target_depth
    ));
    out.push_str(&format!(
        "The finest level must contain exactly these {} labels, each exactly once:\n",
        p.flat_labels.len()
    ));
    for label in &p.flat_labels {
        out.push_str(&format!("- {label}\n"));
    }
    out.push_str("\nFollow these constraints:\n");
    for (i, clause) in CONSTRAINT_CLAUSES.iter().enumerate() {
        out.push_str(&format!("{}. {clause}\n", i + 1));
    }
    out.push_str(
        "\nEvery group name in the tree must be unique across all levels, and every \
         non-root group must name its parent from the level directly above.\n\
         Reply with a single fenced JSON code block, no other prose, shaped as:\n\
         ```json\n\
         {\"levels\": [[\"coarse_a\", ...], [\"mid_a\", ...], [\"fine_a\", ...]], \
         \"parents\": {\"mid_a\": \"coarse_a\", \"fine_a\": \"mid_a\"}}\n\
         ```\n\
         The levels array is ordered coarse to fine and the parents object maps \
         every non-root name to its parent name.\n",
    );
    if p.iteration > 0 {
        if let Some(feedback) = &p.prior_feedback {
            out.push_str(&format!(
                "\nYour previous attempt (iteration {}) failed validation:\n{feedback}\n\
                 Fix these problems and produce the corrected tree.\n",
                p.iteration
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckKind {
    ParseSucceeded,
    CoversAllLabels,
    NoDuplicates,
    CorrectDepth,
    TreeShape,
    BalanceWithinBounds,
    AmbiguousLabelPlacement,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub kind: CheckKind,
    pub passed: bool,
    pub informational: bool,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TaxonomyCandidate {
    pub raw_response: String,
    pub parsed: Option<LabelHierarchy>,
    pub validation: Vec<CheckResult>,
}

impl TaxonomyCandidate {
    /// True when every non-informational check passed.
    pub fn is_valid(&self) -> bool {
        self.validation
            .iter()
            .all(|c| c.passed || c.informational)
    }

    pub fn failure_summary(&self) -> String {
        self.validation
            .iter()
            .filter(|c| !c.passed && !c.informational)
            .map(|c| c.message.as_str())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Pull the first fenced code block out of a chat reply; fall back to the
/// whole body when there is no fence.
fn extract_block(raw: &str) -> &str {
    if let Some(start) = raw.find("```") {
        let after = &raw[start + 3..];
        // skip a language tag on the fence line
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            return body[..end].trim();
        }
    }
    raw.trim()
}

/// Validate a raw model reply against the flat label set. Total: any byte
/// sequence yields a candidate, never a panic or error.
pub fn parse_and_validate(
    raw: &str,
    flat_labels: &[String],
    target_depth: usize,
    balance_ratio_bound: f64,
) -> TaxonomyCandidate {
    let mut checks = Vec::new();
    let fail_all = |mut checks: Vec<CheckResult>, msg: String| {
        checks.insert(
            0,
            CheckResult {
                kind: CheckKind::ParseSucceeded,
                passed: false,
                informational: false,
                message: msg,
            },
        );
        TaxonomyCandidate {
            raw_response: raw.to_string(),
            parsed: None,
            validation: checks,
        }
    };

    let block = extract_block(raw);
    let file = match HierarchyFile::from_json(block) {
        Ok(f) => f,
        Err(e) => return fail_all(checks, format!("output schema not recognized: {e}")),
    };
    checks.push(CheckResult {
        kind: CheckKind::ParseSucceeded,
        passed: true,
        informational: false,
        message: "parsed fenced JSON block".into(),
    });

    // CoversAllLabels / NoDuplicates over the whole document
    let leaves: Vec<&String> = file.levels.last().map(|l| l.iter().collect()).unwrap_or_default();
    let missing: Vec<&str> = flat_labels
        .iter()
        .filter(|l| !leaves.iter().any(|x| x.as_str() == l.as_str()))
        .map(|l| l.as_str())
        .collect();
    let extra: Vec<&str> = leaves
        .iter()
        .filter(|l| !flat_labels.iter().any(|x| x == l.as_str()))
        .map(|l| l.as_str())
        .collect();
    checks.push(CheckResult {
        kind: CheckKind::CoversAllLabels,
        passed: missing.is_empty() && extra.is_empty(),
        informational: false,
        message: if missing.is_empty() && extra.is_empty() {
            "fine level covers the flat label set exactly".into()
        } else {
            format!("missing labels: [{}]; unexpected leaves: [{}]", missing.join(", "), extra.join(", "))
        },
    });

    let mut seen = std::collections::HashSet::new();
    let mut dupes = Vec::new();
    for name in file.levels.iter().flatten() {
        if !seen.insert(name.as_str()) {
            dupes.push(name.as_str());
        }
    }
    checks.push(CheckResult {
        kind: CheckKind::NoDuplicates,
        passed: dupes.is_empty(),
        informational: false,
        message: if dupes.is_empty() {
            "no duplicated names".into()
        } else {
            format!("duplicated label: {}", dupes.join(", "))
        },
    });

    checks.push(CheckResult {
        kind: CheckKind::CorrectDepth,
        passed: file.levels.len() == target_depth,
        informational: false,
        message: format!(
            "tree has {} levels, expected {target_depth}",
            file.levels.len()
        ),
    });

    let built = file.build();
    checks.push(CheckResult {
        kind: CheckKind::TreeShape,
        passed: built.is_ok(),
        informational: false,
        message: match &built {
            Ok(_) => "valid tree: one parent per node, no dead internal nodes".into(),
            Err(e) => format!("tree shape invalid: {e}"),
        },
    });

    if let Ok(h) = &built {
        let report = h.balance_metrics();
        let mut worst: Option<(usize, usize, usize)> = None;
        for t in &report.transitions {
            let ratio_violated =
                (t.max_children as f64) > balance_ratio_bound * (t.min_children as f64);
            if ratio_violated {
                worst = Some((t.level, t.min_children, t.max_children));
                break;
            }
        }
        checks.push(CheckResult {
            kind: CheckKind::BalanceWithinBounds,
            passed: worst.is_none(),
            informational: false,
            message: match worst {
                None => format!("child counts within a {balance_ratio_bound}x ratio per level"),
                Some((lvl, min, max)) => format!(
                    "level {lvl} branching ranges {min}..{max}, beyond the {balance_ratio_bound}x ratio bound"
                ),
            },
        });

        let singleton_ambiguous: Vec<String> = h
            .nodes()
            .iter()
            .filter(|n| {
                n.name.to_lowercase().contains("other")
                    && n.level + 1 < h.num_levels()
                    && h.sub_labels(n.id).map(|c| c.len() == 1).unwrap_or(false)
            })
            .map(|n| n.name.clone())
            .collect();
        checks.push(CheckResult {
            kind: CheckKind::AmbiguousLabelPlacement,
            passed: true,
            informational: true,
            message: if singleton_ambiguous.is_empty() {
                "no singleton ambiguous groups".into()
            } else {
                format!(
                    "ambiguous labels placed as singleton groups: {}",
                    singleton_ambiguous.join(", ")
                )
            },
        });
    }

    let all_pass = checks.iter().all(|c| c.passed || c.informational);
    TaxonomyCandidate {
        raw_response: raw.to_string(),
        parsed: if all_pass { built.ok() } else { None },
        validation: checks,
    }
}

/// A source of raw taxonomy responses: the live endpoint or a fixture dir.
pub trait TaxonomySource {
    fn request(&mut self, prompt: &str) -> Result<String, TaxonomyError>;
}

/// Chat-completion endpoint configuration. The credential comes from the
/// environment only and is never logged.
#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: usize,
    pub backoff_base: Duration,
}

impl EndpointConfig {
    pub fn from_env() -> Result<Self, TaxonomyError> {
        let url = std::env::var(ENDPOINT_ENV)
            .map_err(|_| TaxonomyError::Transport(format!("{ENDPOINT_ENV} is not set")))?;
        Ok(EndpointConfig {
            url,
            api_key: std::env::var(KEY_ENV).ok(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessageOwned,
}

#[derive(Deserialize)]
struct ChatMessageOwned {
    content: String,
}

/// Live HTTP client with exponential backoff on 429 and 5xx.
pub struct HttpEndpoint {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    /// Requests actually sent, including retries.
    pub attempts: usize,
}

impl HttpEndpoint {
    pub fn new(config: EndpointConfig) -> Result<Self, TaxonomyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| TaxonomyError::Transport(e.to_string()))?;
        Ok(HttpEndpoint {
            config,
            client,
            attempts: 0,
        })
    }
}

impl TaxonomySource for HttpEndpoint {
    fn request(&mut self, prompt: &str) -> Result<String, TaxonomyError> {
        let body = ChatRequest {
            model: &self.config.model,
            temperature: self.config.temperature,
            messages: [ChatMessage { role: "user", content: prompt }],
        };
        let mut last_retryable: Option<TaxonomyError> = None;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff_base * 2u32.pow(attempt as u32 - 1));
            }
            self.attempts += 1;
            log::info!(
                "taxonomy request attempt {} to {} (authorization: {})",
                self.attempts,
                self.config.url,
                if self.config.api_key.is_some() { "Bearer ***" } else { "none" },
            );
            let mut req = self.client.post(&self.config.url).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) if e.is_timeout() => return Err(TaxonomyError::Timeout(self.config.timeout)),
                Err(e) => return Err(TaxonomyError::Transport(redact(&e.to_string()))),
            };
            let status = resp.status();
            if status.as_u16() == 429 || status.is_server_error() {
                log::warn!("taxonomy request got HTTP {status}, will retry");
                last_retryable = Some(if status.as_u16() == 429 {
                    TaxonomyError::RateLimited { attempts: self.attempts }
                } else {
                    TaxonomyError::HttpStatus(status.as_u16())
                });
                continue;
            }
            if !status.is_success() {
                return Err(TaxonomyError::HttpStatus(status.as_u16()));
            }
            let parsed: ChatResponse = resp
                .json()
                .map_err(|e| TaxonomyError::MalformedResponseBody(e.to_string()))?;
            let content = parsed
                .choices
                .first()
                .map(|c| c.message.content.clone())
                .ok_or_else(|| TaxonomyError::MalformedResponseBody("no choices".into()))?;
            log::info!("taxonomy response: {} bytes", content.len());
            return Ok(content);
        }
        Err(last_retryable.unwrap_or(TaxonomyError::RateLimited { attempts: self.attempts }))
    }
}

fn redact(message: &str) -> String {
    // transport errors can echo headers; drop anything that looks like a key
    if let Ok(key) = std::env::var(KEY_ENV) {
        if !key.is_empty() {
            return message.replace(&key, "***");
        }
    }
    message.to_string()
}

/// Offline source: files in a directory, sorted by name, served in order.
/// Mandatory for CI; no network or credential involved.
pub struct FixtureDir {
    responses: Vec<std::path::PathBuf>,
    cursor: usize,
}

impl FixtureDir {
    pub fn new(dir: &std::path::Path) -> Result<Self, TaxonomyError> {
        let mut responses: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| TaxonomyError::Fixture(format!("{}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        responses.sort();
        if responses.is_empty() {
            return Err(TaxonomyError::Fixture(format!(
                "{} holds no fixture files",
                dir.display()
            )));
        }
        Ok(FixtureDir {
            responses,
            cursor: 0,
        })
    }
}

impl TaxonomySource for FixtureDir {
    fn request(&mut self, _prompt: &str) -> Result<String, TaxonomyError> {
        let path = self.responses.get(self.cursor).ok_or_else(|| {
            TaxonomyError::Fixture("fixture directory exhausted".into())
        })?;
        self.cursor += 1;
        std::fs::read_to_string(path)
            .map_err(|e| TaxonomyError::Fixture(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug)]
pub struct RefineOutcome {
    pub hierarchy: LabelHierarchy,
    pub iterations_used: usize,
    pub last_candidate: TaxonomyCandidate,
}

/// Render → request → validate, feeding validator failures back into the
/// prompt, until a candidate passes or the iteration budget is spent. At
/// most `max_iterations` requests are issued.
pub fn refine_loop(
    source: &mut dyn TaxonomySource,
    flat_labels: &[String],
    target_depth: usize,
    max_iterations: usize,
    balance_ratio_bound: f64,
) -> Result<RefineOutcome, TaxonomyError> {
    if max_iterations < 1 {
        return Err(TaxonomyError::BadIterations);
    }
    let mut prompt = TaxonomyPrompt::new(flat_labels.to_vec(), target_depth)?;
    let mut last_failures = String::new();
    for iteration in 0..max_iterations {
        prompt.iteration = iteration;
        let text = render_prompt(&prompt);
        let raw = source.request(&text)?;
        let candidate = parse_and_validate(&raw, flat_labels, target_depth, balance_ratio_bound);
        if candidate.is_valid() {
            let hierarchy = candidate.parsed.clone().expect("valid candidate parses");
            return Ok(RefineOutcome {
                hierarchy,
                iterations_used: iteration + 1,
                last_candidate: candidate,
            });
        }
        last_failures = candidate.failure_summary();
        prompt.prior_feedback = Some(last_failures.clone());
    }
    Err(TaxonomyError::ExhaustedIterations {
        iterations: max_iterations,
        failures: last_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::s3dis_file;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn s3dis_labels() -> Vec<String> {
        s3dis_file().levels[2].clone()
    }

    fn canned_valid_response() -> String {
        format!("Here is the tree.\n```json\n{}\n```\n", s3dis_file().to_json())
    }

    #[test]
    fn prompt_contains_labels_depth_and_constraints() {
        let p = TaxonomyPrompt::new(s3dis_labels(), 3).unwrap();
        let text = render_prompt(&p);
        for label in s3dis_labels() {
            assert!(text.contains(&format!("- {label}")), "missing {label}");
        }
        assert!(text.contains("exactly 3 levels"));
        for clause in CONSTRAINT_CLAUSES {
            assert!(text.contains(clause));
        }
    }

    #[test]
    fn prompt_depth_two_and_feedback_inclusion() {
        let p = TaxonomyPrompt::new(vec!["a".into(), "b".into()], 2).unwrap();
        assert!(render_prompt(&p).contains("exactly 2 levels"));

        let mut p = TaxonomyPrompt::new(vec!["a".into(), "b".into()], 2).unwrap();
        p.iteration = 2;
        p.prior_feedback = Some("duplicated label: chair".into());
        assert!(render_prompt(&p).contains("duplicated label: chair"));
    }

    #[test]
    fn prompt_rejects_bad_inputs() {
        assert!(matches!(
            TaxonomyPrompt::new(vec![], 3),
            Err(TaxonomyError::BadLabels)
        ));
        assert!(matches!(
            TaxonomyPrompt::new(vec!["a".into(), "a".into()], 3),
            Err(TaxonomyError::BadLabels)
        ));
        assert!(matches!(
            TaxonomyPrompt::new(vec!["a".into()], 1),
            Err(TaxonomyError::BadDepth(1))
        ));
    }

    #[test]
    fn valid_canned_response_passes_all_checks() {
        let candidate = parse_and_validate(&canned_valid_response(), &s3dis_labels(), 3, 4.0);
        assert!(candidate.is_valid(), "{}", candidate.failure_summary());
        let h = candidate.parsed.unwrap();
        assert_eq!(h.level_sizes(), vec![3, 6, 13]);
    }

    #[test]
    fn missing_leaf_fails_coverage_with_name() {
        let mut file = s3dis_file();
        file.levels[2].retain(|l| l != "sofa");
        file.parents.remove("sofa");
        let raw = format!("```json\n{}\n```", file.to_json());
        let candidate = parse_and_validate(&raw, &s3dis_labels(), 3, 4.0);
        assert!(!candidate.is_valid());
        let coverage = candidate
            .validation
            .iter()
            .find(|c| c.kind == CheckKind::CoversAllLabels)
            .unwrap();
        assert!(!coverage.passed);
        assert!(coverage.message.contains("sofa"));
        assert!(candidate.parsed.is_none());
    }

    #[test]
    fn duplicated_leaf_fails_no_duplicates() {
        // "chair" listed under two parents: appears twice in the leaf level
        let mut file = s3dis_file();
        file.levels[2].push("chair".into());
        let raw = format!("```json\n{}\n```", file.to_json());
        let candidate = parse_and_validate(&raw, &s3dis_labels(), 3, 4.0);
        let dup = candidate
            .validation
            .iter()
            .find(|c| c.kind == CheckKind::NoDuplicates)
            .unwrap();
        assert!(!dup.passed);
        assert!(dup.message.contains("chair"));
    }

    #[test]
    fn wrong_depth_and_orphans_are_caught() {
        let mut file = s3dis_file();
        file.levels.truncate(2);
        let raw = format!("```json\n{}\n```", file.to_json());
        let candidate = parse_and_validate(&raw, &s3dis_labels(), 3, 4.0);
        assert!(!candidate.is_valid());
        assert!(candidate
            .validation
            .iter()
            .any(|c| c.kind == CheckKind::CorrectDepth && !c.passed));

        let mut file = s3dis_file();
        file.parents.remove("chair");
        let raw = format!("```json\n{}\n```", file.to_json());
        let candidate = parse_and_validate(&raw, &s3dis_labels(), 3, 4.0);
        assert!(candidate
            .validation
            .iter()
            .any(|c| c.kind == CheckKind::TreeShape && !c.passed));
    }

    #[test]
    fn validator_is_total_over_random_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let len = rng.gen_range(0..200);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let raw = String::from_utf8_lossy(&bytes);
            let candidate = parse_and_validate(&raw, &s3dis_labels(), 3, 4.0);
            assert!(!candidate.is_valid() || candidate.parsed.is_some());
        }
    }

    #[test]
    fn unbalanced_tree_fails_ratio_bound() {
        // one mid group holds 10 leaves, its sibling 1
        let file = HierarchyFile {
            levels: vec![
                vec!["root_a".into(), "root_b".into()],
                (0..11).map(|i| format!("leaf{i}")).collect(),
            ],
            parents: (0..11)
                .map(|i| {
                    (
                        format!("leaf{i}"),
                        if i == 0 { "root_b".into() } else { "root_a".into() },
                    )
                })
                .collect(),
        };
        let labels: Vec<String> = (0..11).map(|i| format!("leaf{i}")).collect();
        let raw = format!("```json\n{}\n```", file.to_json());
        let candidate = parse_and_validate(&raw, &labels, 2, 4.0);
        assert!(candidate
            .validation
            .iter()
            .any(|c| c.kind == CheckKind::BalanceWithinBounds && !c.passed));
    }

    struct ScriptedSource {
        responses: Vec<String>,
        cursor: usize,
        pub prompts: Vec<String>,
    }

    impl TaxonomySource for ScriptedSource {
        fn request(&mut self, prompt: &str) -> Result<String, TaxonomyError> {
            self.prompts.push(prompt.to_string());
            let r = self
                .responses
                .get(self.cursor)
                .cloned()
                .ok_or_else(|| TaxonomyError::Fixture("script exhausted".into()))?;
            self.cursor += 1;
            Ok(r)
        }
    }

    #[test]
    fn refine_loop_recovers_on_second_iteration() {
        let mut source = ScriptedSource {
            responses: vec!["this is not a tree".into(), canned_valid_response()],
            cursor: 0,
            prompts: vec![],
        };
        let outcome = refine_loop(&mut source, &s3dis_labels(), 3, 5, 4.0).unwrap();
        assert_eq!(outcome.iterations_used, 2);
        assert_eq!(outcome.hierarchy.level_sizes(), vec![3, 6, 13]);
        // the second prompt must carry the first failure back
        assert!(source.prompts[1].contains("failed validation"));
    }

    #[test]
    fn refine_loop_exhausts_and_reports_failures() {
        let mut source = ScriptedSource {
            responses: vec!["junk".into(); 3],
            cursor: 0,
            prompts: vec![],
        };
        let err = refine_loop(&mut source, &s3dis_labels(), 3, 3, 4.0).unwrap_err();
        match err {
            TaxonomyError::ExhaustedIterations { iterations, .. } => assert_eq!(iterations, 3),
            other => panic!("unexpected error {other}"),
        }
        assert_eq!(source.prompts.len(), 3);
    }

    #[test]
    fn refine_loop_first_try_counts_one_iteration() {
        let mut source = ScriptedSource {
            responses: vec![canned_valid_response()],
            cursor: 0,
            prompts: vec![],
        };
        let outcome = refine_loop(&mut source, &s3dis_labels(), 3, 5, 4.0).unwrap();
        assert_eq!(outcome.iterations_used, 1);
    }

    #[test]
    fn fixture_dir_serves_files_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("01_bad.txt"), "nope").unwrap();
        std::fs::write(dir.path().join("02_good.txt"), canned_valid_response()).unwrap();
        let mut source = FixtureDir::new(dir.path()).unwrap();
        assert_eq!(source.request("p").unwrap(), "nope");
        assert!(source.request("p").unwrap().contains("levels"));
        assert!(source.request("p").is_err());
    }

    fn spawn_server(responses: Vec<(u16, String)>) -> (std::net::SocketAddr, std::thread::JoinHandle<()>) {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                let reason = match status {
                    200 => "OK",
                    429 => "Too Many Requests",
                    _ => "Error",
                };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        (addr, handle)
    }

    fn chat_body(content: &str) -> String {
        serde_json::json!({"choices":[{"message":{"role":"assistant","content":content}}]})
            .to_string()
    }

    #[test]
    fn http_endpoint_retries_through_rate_limits() {
        let (addr, handle) = spawn_server(vec![
            (429, "{}".into()),
            (429, "{}".into()),
            (200, chat_body("the tree")),
        ]);
        let mut endpoint = HttpEndpoint::new(EndpointConfig {
            url: format!("http://{addr}/v1/chat/completions"),
            api_key: Some("test-key".into()),
            model: "fixture".into(),
            temperature: 0.0,
            timeout: Duration::from_secs(5),
            max_retries: 3,
            backoff_base: Duration::from_millis(1),
        })
        .unwrap();
        let reply = endpoint.request("hello").unwrap();
        assert_eq!(reply, "the tree");
        assert_eq!(endpoint.attempts, 3);
        handle.join().unwrap();
    }

    #[test]
    fn http_endpoint_times_out_on_stalled_server() {
        use std::io::Read;
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            // accept and stall without replying
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 1024];
                let _ = stream.read(&mut buf);
                std::thread::sleep(Duration::from_millis(600));
            }
        });
        let mut endpoint = HttpEndpoint::new(EndpointConfig {
            url: format!("http://{addr}/"),
            api_key: None,
            model: "fixture".into(),
            temperature: 0.0,
            timeout: Duration::from_millis(150),
            max_retries: 0,
            backoff_base: Duration::from_millis(1),
        })
        .unwrap();
        let err = endpoint.request("hello").unwrap_err();
        assert!(matches!(err, TaxonomyError::Timeout(_)), "{err}");
        handle.join().unwrap();
    }

    #[test]
    fn http_endpoint_reports_malformed_bodies_and_hard_statuses() {
        let (addr, handle) = spawn_server(vec![(200, "not json".into())]);
        let mut endpoint = HttpEndpoint::new(EndpointConfig {
            url: format!("http://{addr}/"),
            api_key: None,
            model: "fixture".into(),
            temperature: 0.0,
            timeout: Duration::from_secs(5),
            max_retries: 0,
            backoff_base: Duration::from_millis(1),
        })
        .unwrap();
        assert!(matches!(
            endpoint.request("x").unwrap_err(),
            TaxonomyError::MalformedResponseBody(_)
        ));
        handle.join().unwrap();

        let (addr, handle) = spawn_server(vec![(404, "{}".into())]);
        let mut endpoint = HttpEndpoint::new(EndpointConfig {
            url: format!("http://{addr}/"),
            api_key: None,
            model: "fixture".into(),
            temperature: 0.0,
            timeout: Duration::from_secs(5),
            max_retries: 2,
            backoff_base: Duration::from_millis(1),
        })
        .unwrap();
        assert!(matches!(
            endpoint.request("x").unwrap_err(),
            TaxonomyError::HttpStatus(404)
        ));
        assert_eq!(endpoint.attempts, 1, "4xx other than 429 must not retry");
        handle.join().unwrap();
    }
}
