//! Online evaluation over CounterFact-format cases.
//!
//! Each case is seen once, in order: its feedback tunes the shared graph and
//! the harness moves on. Only after the last case are the metrics computed,
//! on the final graph, for every case.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::inference::{marginal_answer_probability, Scorer};
use crate::kg::KnowledgeGraph;
use crate::optimizer::{tune, Termination, TuneRequest, TuningConfig, TuningReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterFactCase {
    pub case_id: u64,
    /// Prompt with a single `{}` slot for the subject.
    pub prompt_template: String,
    pub relation_id: String,
    pub subject: String,
    pub target_new: String,
    pub target_true: String,
    pub generation_prompts: Vec<String>,
}

impl CounterFactCase {
    /// The training query: the template with the subject filled in, verbatim.
    pub fn query(&self) -> String {
        self.prompt_template.replacen("{}", &self.subject, 1)
    }

    /// Human-readable relation name: the parenthetical of `P101(field of work)`,
    /// or the whole id when there is none.
    pub fn relation_label(&self) -> String {
        let id = self.relation_id.trim();
        match (id.find('('), id.rfind(')')) {
            (Some(open), Some(close)) if close > open + 1 => id[open + 1..close].trim().to_owned(),
            _ => id.to_owned(),
        }
    }
}

fn dataset_err(case_id: &str, message: impl Into<String>) -> Error {
    Error::Dataset {
        case_id: case_id.to_owned(),
        message: message.into(),
    }
}

fn text_field(obj: &Value, field: &str, case_id: &str) -> Result<String> {
    let value = obj
        .get(field)
        .ok_or_else(|| dataset_err(case_id, format!("missing field `{field}`")))?;
    // targets come wrapped as {"str": ...}
    let value = value.get("str").unwrap_or(value);
    let text = value
        .as_str()
        .ok_or_else(|| dataset_err(case_id, format!("field `{field}` is not a string")))?;
    if text.trim().is_empty() {
        return Err(dataset_err(case_id, format!("field `{field}` is empty")));
    }
    Ok(text.to_owned())
}

/// Map one dataset record to a case. `index` names records without a `case_id`.
pub fn parse_case(record: &Value, index: usize) -> Result<CounterFactCase> {
    let case_id = match record.get("case_id") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| dataset_err(&format!("#{index}"), "`case_id` is not a non-negative integer"))?,
        None => return Err(dataset_err(&format!("#{index}"), "missing field `case_id`")),
    };
    let id = case_id.to_string();
    let rewrite = record
        .get("requested_rewrite")
        .ok_or_else(|| dataset_err(&id, "missing field `requested_rewrite`"))?;
    let prompt_template = text_field(rewrite, "prompt", &id)?;
    let slots = prompt_template.matches("{}").count();
    if slots != 1 {
        return Err(dataset_err(
            &id,
            format!("prompt template {prompt_template:?} has {slots} `{{}}` slots, expected exactly one"),
        ));
    }
    let generation_prompts = match record.get("generation_prompts") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|p| {
                p.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| dataset_err(&id, "`generation_prompts` holds a non-string entry"))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(dataset_err(&id, "`generation_prompts` is not a list")),
    };
    Ok(CounterFactCase {
        case_id,
        relation_id: text_field(rewrite, "relation_id", &id)?,
        subject: text_field(rewrite, "subject", &id)?,
        target_new: text_field(rewrite, "target_new", &id)?,
        target_true: text_field(rewrite, "target_true", &id)?,
        generation_prompts,
        prompt_template,
    })
}

/// Parse a dataset: a JSON array, a bare comma-separated run of records, or
/// one record per line. Trailing commas are tolerated.
pub fn parse_counterfact(text: &str) -> Result<Vec<CounterFactCase>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<Value> = if trimmed.starts_with('[') {
        json5::from_str(trimmed).map_err(|e| dataset_err("-", format!("malformed dataset: {e}")))?
    } else {
        match json5::from_str::<Vec<Value>>(&format!("[{trimmed}]")) {
            Ok(records) => records,
            Err(_) => trimmed
                .lines()
                .enumerate()
                .filter(|(_, line)| !line.trim().is_empty())
                .map(|(n, line)| {
                    json5::from_str(line)
                        .map_err(|e| dataset_err("-", format!("line {}: malformed record: {e}", n + 1)))
                })
                .collect::<Result<_>>()?,
        }
    };
    records.iter().enumerate().map(|(i, r)| parse_case(r, i)).collect()
}

pub fn load_counterfact(path: &Path) -> Result<Vec<CounterFactCase>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_counterfact(&text)
}

pub fn save_counterfact(cases: &[CounterFactCase], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&cases.iter().map(case_to_record).collect::<Vec<_>>())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Inverse of [`parse_case`].
pub fn case_to_record(case: &CounterFactCase) -> Value {
    serde_json::json!({
        "case_id": case.case_id,
        "requested_rewrite": {
            "prompt": case.prompt_template,
            "relation_id": case.relation_id,
            "target_new": { "str": case.target_new },
            "target_true": { "str": case.target_true },
            "subject": case.subject,
        },
        "generation_prompts": case.generation_prompts,
    })
}

/// How efficacy success is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EfficacyReading {
    /// After tuning, the new target outranks the original target.
    #[default]
    Paired,
    /// After tuning, the new target is more probable than it was before.
    PrePost,
}

impl std::str::FromStr for EfficacyReading {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Self::Paired),
            "pre-post" => Ok(Self::PrePost),
            other => Err(Error::Config(format!("unknown efficacy reading {other:?} (paired | pre-post)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// With tuning off the run measures the no-edit baseline.
    pub tuning_enabled: bool,
    pub efficacy_reading: EfficacyReading,
    /// Shuffle the case order before the online pass.
    pub shuffle_seed: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tuning_enabled: true,
            efficacy_reading: EfficacyReading::Paired,
            shuffle_seed: None,
        }
    }
}

/// Post-tuning answer probabilities for one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetProbabilities {
    pub target_new: f64,
    pub target_true: f64,
}

impl TargetProbabilities {
    pub fn of(graph: &KnowledgeGraph, query: &str, case: &CounterFactCase, scorer: &Scorer<'_>) -> Result<Self> {
        Ok(Self {
            target_new: marginal_answer_probability(graph, query, &case.subject, &case.target_new, scorer)?,
            target_true: marginal_answer_probability(graph, query, &case.subject, &case.target_true, scorer)?,
        })
    }

    /// Strict: a tie is a failure.
    pub fn flipped(&self) -> bool {
        self.target_new > self.target_true
    }
}

/// Paired-reading success of a case on the final graph.
pub fn efficacy_score(case: &CounterFactCase, graph: &KnowledgeGraph, scorer: &Scorer<'_>) -> Result<bool> {
    Ok(TargetProbabilities::of(graph, &case.query(), case, scorer)?.flipped())
}

/// Paraphrase success (every generation prompt flips) and the number of
/// prompts that flip. `None` when the case has no generation prompts.
pub fn paraphrase_score(
    case: &CounterFactCase,
    graph: &KnowledgeGraph,
    scorer: &Scorer<'_>,
) -> Result<Option<(bool, usize)>> {
    if case.generation_prompts.is_empty() {
        return Ok(None);
    }
    let mut passed = 0;
    for prompt in &case.generation_prompts {
        if TargetProbabilities::of(graph, prompt, case, scorer)?.flipped() {
            passed += 1;
        }
    }
    Ok(Some((passed == case.generation_prompts.len(), passed)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub added: usize,
    pub removed: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub scoring_calls: u64,
}

impl From<&TuningReport> for TuningSummary {
    fn from(r: &TuningReport) -> Self {
        Self {
            added: r.added.len(),
            removed: r.removed.len(),
            iterations: r.iterations,
            termination: r.termination,
            initial_loss: r.initial_loss(),
            final_loss: r.final_loss(),
            scoring_calls: r.scoring_calls,
        }
    }
}

/// Why a case left the denominators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFlag {
    pub stage: String,
    pub message: String,
    /// Backend failures are fatal; input problems are not.
    pub fatal: bool,
}

impl CaseFlag {
    fn new(stage: &str, err: &Error) -> Self {
        Self {
            stage: stage.to_owned(),
            message: err.to_string(),
            fatal: err.is_backend(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: u64,
    pub pre: Option<TargetProbabilities>,
    pub post: Option<TargetProbabilities>,
    pub efficacy: Option<bool>,
    pub efficacy_pre_post: Option<bool>,
    pub paraphrase: Option<bool>,
    pub paraphrase_prompts_passed: usize,
    pub paraphrase_prompts: usize,
    pub tuning: Option<TuningSummary>,
    pub flag: Option<CaseFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub efficacy_reading: EfficacyReading,
    pub tuning_enabled: bool,
    /// Headline efficacy under `efficacy_reading`.
    pub efficacy: f64,
    pub efficacy_paired: f64,
    pub efficacy_pre_post: f64,
    /// All-prompts-pass rule.
    pub paraphrase: f64,
    /// Mean over individual generation prompts.
    pub paraphrase_prompt_mean: f64,
    pub cases: usize,
    pub evaluated_cases: usize,
    pub paraphrase_cases: usize,
    pub flagged_cases: usize,
    pub fatal_cases: usize,
    pub tune_calls: u64,
    pub total_scoring_calls: u64,
    pub wall_time_ms: f64,
    /// Case ids in the order they were processed.
    pub order: Vec<u64>,
    pub per_case: Vec<CaseResult>,
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

impl EvalReport {
    fn aggregate(mut self) -> Self {
        let scored: Vec<&CaseResult> = self.per_case.iter().filter(|c| c.flag.is_none()).collect();
        let count = |f: &dyn Fn(&CaseResult) -> bool| scored.iter().filter(|c| f(c)).count();
        self.evaluated_cases = scored.len();
        self.efficacy_paired = fraction(count(&|c| c.efficacy == Some(true)), scored.len());
        self.efficacy_pre_post = fraction(count(&|c| c.efficacy_pre_post == Some(true)), scored.len());
        self.efficacy = match self.efficacy_reading {
            EfficacyReading::Paired => self.efficacy_paired,
            EfficacyReading::PrePost => self.efficacy_pre_post,
        };
        self.paraphrase_cases = count(&|c| c.paraphrase.is_some());
        self.paraphrase = fraction(count(&|c| c.paraphrase == Some(true)), self.paraphrase_cases);
        let passed: usize = scored.iter().map(|c| c.paraphrase_prompts_passed).sum();
        let prompts: usize = scored.iter().map(|c| c.paraphrase_prompts).sum();
        self.paraphrase_prompt_mean = fraction(passed, prompts);
        self.flagged_cases = self.per_case.len() - scored.len();
        self.fatal_cases = self.per_case.iter().filter(|c| c.flag.as_ref().is_some_and(|f| f.fatal)).count();
        self
    }

    pub fn has_fatal(&self) -> bool {
        self.fatal_cases > 0
    }

    /// Fixed-width summary followed by one row per case.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mode = if self.tuning_enabled { "tuned" } else { "no edit" };
        out.push_str(&format!("run            {mode}\n"));
        out.push_str(&format!(
            "efficacy       {:.3}  ({} reading; paired {:.3}, pre-post {:.3})\n",
            self.efficacy,
            match self.efficacy_reading {
                EfficacyReading::Paired => "paired",
                EfficacyReading::PrePost => "pre-post",
            },
            self.efficacy_paired,
            self.efficacy_pre_post
        ));
        out.push_str(&format!(
            "paraphrase     {:.3}  (per-prompt mean {:.3}, {} cases)\n",
            self.paraphrase, self.paraphrase_prompt_mean, self.paraphrase_cases
        ));
        out.push_str(&format!(
            "cases          {} evaluated, {} flagged ({} fatal)\n",
            self.evaluated_cases, self.flagged_cases, self.fatal_cases
        ));
        out.push_str(&format!(
            "scoring calls  {} ({} tuning runs)\n",
            self.total_scoring_calls, self.tune_calls
        ));
        out.push_str(&format!("wall time      {:.1} ms\n\n", self.wall_time_ms));
        out.push_str(&format!(
            "{:>8}  {:>8}  {:>10}  {:>9}  {:>9}  {:>5}  {:>7}  {}\n",
            "case", "efficacy", "paraphrase", "p(new)", "p(true)", "edits", "loss", "note"
        ));
        let mark = |v: Option<bool>| match v {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "-",
        };
        for c in &self.per_case {
            let (pn, pt) = c
                .post
                .map_or(("-".to_owned(), "-".to_owned()), |p| {
                    (format!("{:.4}", p.target_new), format!("{:.4}", p.target_true))
                });
            let (edits, loss) = c.tuning.as_ref().map_or(("-".to_owned(), "-".to_owned()), |t| {
                ((t.added + t.removed).to_string(), format!("{:.4}", t.final_loss))
            });
            let note = c
                .flag
                .as_ref()
                .map(|f| format!("{}{}: {}", if f.fatal { "FATAL " } else { "" }, f.stage, f.message))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:>8}  {:>8}  {:>10}  {:>9}  {:>9}  {:>5}  {:>7}  {}\n",
                c.case_id,
                mark(c.efficacy),
                mark(c.paraphrase),
                pn,
                pt,
                edits,
                loss,
                note
            ));
        }
        out
    }
}

fn post_evaluate(case: &CounterFactCase, graph: &KnowledgeGraph, scorer: &Scorer<'_>, result: &mut CaseResult) {
    let evaluated = TargetProbabilities::of(graph, &case.query(), case, scorer)
        .and_then(|post| paraphrase_score(case, graph, scorer).map(|para| (post, para)));
    match evaluated {
        Ok((post, para)) => {
            result.post = Some(post);
            result.efficacy = Some(post.flipped());
            result.efficacy_pre_post = result.pre.map(|pre| post.target_new > pre.target_new);
            result.paraphrase = para.map(|(ok, _)| ok);
            result.paraphrase_prompts_passed = para.map_or(0, |(_, n)| n);
            result.paraphrase_prompts = case.generation_prompts.len();
        }
        Err(e) => result.flag = Some(CaseFlag::new("evaluate", &e)),
    }
}

/// Run the online protocol: one tuning call per case in order, then score
/// every case on the final graph.
pub fn run_online(
    cases: &[CounterFactCase],
    graph: &mut KnowledgeGraph,
    cfg: &TuningConfig,
    scorer: &Scorer<'_>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Validation("no cases to evaluate".into()));
    }
    cfg.validate()?;
    let started = Instant::now();
    let calls_before = scorer.calls();

    let mut order: Vec<usize> = (0..cases.len()).collect();
    if let Some(seed) = options.shuffle_seed {
        order.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
    }

    let tune_calls = AtomicU64::new(0);
    let mut results = Vec::with_capacity(cases.len());
    for &i in &order {
        let case = &cases[i];
        let query = case.query();
        let mut result = CaseResult {
            case_id: case.case_id,
            pre: None,
            post: None,
            efficacy: None,
            efficacy_pre_post: None,
            paraphrase: None,
            paraphrase_prompts_passed: 0,
            paraphrase_prompts: 0,
            tuning: None,
            flag: None,
        };
        match TargetProbabilities::of(graph, &query, case, scorer) {
            Ok(pre) => result.pre = Some(pre),
            Err(e) => result.flag = Some(CaseFlag::new("pre-tuning", &e)),
        }
        if options.tuning_enabled && result.flag.is_none() {
            let request = TuneRequest {
                query,
                answer: case.target_new.clone(),
                subject: case.subject.clone(),
                object: case.target_new.clone(),
                relations: None,
                interaction: format!("case-{}", case.case_id),
            };
            tune_calls.fetch_add(1, Ordering::Relaxed);
            match tune(graph, &request, cfg, scorer) {
                Ok(report) => result.tuning = Some(TuningSummary::from(&report)),
                Err(e) => {
                    tracing::warn!(case_id = case.case_id, "tuning failed: {e}");
                    result.flag = Some(CaseFlag::new("tune", &e));
                }
            }
        }
        results.push((i, result));
    }

    let graph: &KnowledgeGraph = graph;
    let evaluate = |(i, mut result): (usize, CaseResult)| {
        if result.flag.is_none() {
            post_evaluate(&cases[i], graph, scorer, &mut result);
        }
        result
    };
    #[cfg(feature = "parallel")]
    let per_case: Vec<CaseResult> = {
        use rayon::prelude::*;
        results.into_par_iter().map(evaluate).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_case: Vec<CaseResult> = results.into_iter().map(evaluate).collect();

    Ok(EvalReport {
        efficacy_reading: options.efficacy_reading,
        tuning_enabled: options.tuning_enabled,
        efficacy: 0.0,
        efficacy_paired: 0.0,
        efficacy_pre_post: 0.0,
        paraphrase: 0.0,
        paraphrase_prompt_mean: 0.0,
        cases: cases.len(),
        evaluated_cases: 0,
        paraphrase_cases: 0,
        flagged_cases: 0,
        fatal_cases: 0,
        tune_calls: tune_calls.into_inner(),
        total_scoring_calls: scorer.calls() - calls_before,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        order: order.iter().map(|&i| cases[i].case_id).collect(),
        per_case,
    }
    .aggregate())
}
