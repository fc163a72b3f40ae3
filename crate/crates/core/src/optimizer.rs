//! Knowledge graph tuning from one query/feedback pair.
//!
//! [`tune`] alternates one add and one remove per iteration: personalized
//! triples go in best-first by the probability they give the feedback answer,
//! existing triples rooted at the query entity come out worst-first by the same
//! measure. The loss is re-evaluated after every single edit and the run stops
//! as soon as it reaches the threshold. [`greedy_tune`] is the blunt
//! alternative: clear everything rooted at the query entity and insert the
//! single best personalized triple.
//!
//! Both score every candidate before touching anything, work on a staged copy
//! of the retrieval set, and commit to the graph only once the run is over, so
//! a backend failure leaves the graph as it was.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    extract_personalized_triples, loss_against, retrieval_over, LossMode, PersonalizedTripleSet, Scorer,
    TripleSource, DEFAULT_FLOOR,
};
use crate::kg::{EditOp, KnowledgeGraph, KnowledgeTriple, FEEDBACK_PROVENANCE_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossModeKind {
    #[default]
    Floor,
    Intersect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub k: usize,
    /// Loss threshold in nats.
    pub epsilon: f64,
    pub floor: f64,
    pub loss_mode: LossModeKind,
    pub protect_prior_feedback: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            k: 5,
            epsilon: 1.0,
            floor: DEFAULT_FLOOR,
            loss_mode: LossModeKind::Floor,
            protect_prior_feedback: true,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Validation("K must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Validation(format!("epsilon {} must be non-negative", self.epsilon)));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::Validation(format!("floor {} outside (0, 1)", self.floor)));
        }
        Ok(())
    }

    pub fn loss_mode(&self) -> LossMode {
        match self.loss_mode {
            LossModeKind::Floor => LossMode::Floor(self.floor),
            LossModeKind::Intersect => LossMode::Intersect,
        }
    }
}

/// One interaction's feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRequest {
    pub query: String,
    pub answer: String,
    /// Query entity.
    pub subject: String,
    /// Answer entity.
    pub object: String,
    /// Relations supplied by the user; `None` asks the model to extract them.
    #[serde(default)]
    pub relations: Option<Vec<String>>,
    /// Interaction identifier recorded in the journal provenance.
    pub interaction: String,
}

impl TuneRequest {
    pub fn provenance(&self) -> String {
        format!("{FEEDBACK_PROVENANCE_PREFIX}{}", self.interaction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ThresholdMet,
    CandidatesExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub op: EditOp,
    pub triple: KnowledgeTriple,
    /// False for an add of a triple already in the graph.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossStep {
    /// Number of edits applied so far; 0 is the pre-edit loss.
    pub step: usize,
    pub edit: Option<Edit>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTriple {
    pub triple: KnowledgeTriple,
    /// Probability of the feedback answer given this triple.
    pub reasoning_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub personalized: Vec<KnowledgeTriple>,
    pub source: TripleSource,
    /// Personalized triples in add order.
    pub add_ranking: Vec<RankedTriple>,
    /// Removal candidates in remove order.
    pub remove_ranking: Vec<RankedTriple>,
    /// Triples that entered the graph, in edit order.
    pub added: Vec<KnowledgeTriple>,
    /// Triples that left the graph, in edit order.
    pub removed: Vec<KnowledgeTriple>,
    pub loss_trace: Vec<LossStep>,
    pub termination: Termination,
    pub iterations: usize,
    pub scoring_calls: u64,
}

impl TuningReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().map_or(f64::NAN, |s| s.loss)
    }

    pub fn edit_count(&self) -> usize {
        self.added.len() + self.removed.len()
    }

    /// Plain-text report: edits, then the loss after each step.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let termination = match self.termination {
            Termination::ThresholdMet => "threshold met",
            Termination::CandidatesExhausted => "candidates exhausted",
        };
        out.push_str(&format!(
            "{} edits, {} iterations, {termination}, {} scoring calls\n",
            self.edit_count(),
            self.iterations,
            self.scoring_calls
        ));
        for z in &self.personalized {
            out.push_str(&format!("personalized {z}\n"));
        }
        for z in &self.added {
            out.push_str(&format!("+ {z}\n"));
        }
        for z in &self.removed {
            out.push_str(&format!("- {z}\n"));
        }
        out.push_str("loss trace\n");
        for step in &self.loss_trace {
            let edit = match &step.edit {
                None => "start".to_owned(),
                Some(e) => format!(
                    "{} {}{}",
                    match e.op {
                        EditOp::Add => "add",
                        EditOp::Remove => "remove",
                    },
                    e.triple,
                    if e.changed { "" } else { " (already present)" }
                ),
            };
            out.push_str(&format!("  {:>3}  {:>12.7}  {edit}\n", step.step, step.loss));
        }
        out
    }
}

fn rank(
    candidates: impl IntoIterator<Item = KnowledgeTriple>,
    request: &TuneRequest,
    scorer: &Scorer<'_>,
    descending: bool,
) -> Result<Vec<RankedTriple>> {
    let mut ranked = Vec::new();
    for triple in candidates {
        let lp = scorer.answer_logprob(&request.query, Some(&triple), &request.answer)?;
        ranked.push((triple, lp));
    }
    ranked.sort_by(|(za, a), (zb, b)| {
        let by_score = if descending { b.total_cmp(a) } else { a.total_cmp(b) };
        match by_score {
            Ordering::Equal => za.cmp(zb),
            other => other,
        }
    });
    Ok(ranked
        .into_iter()
        .map(|(triple, lp)| RankedTriple {
            triple,
            reasoning_probability: lp.exp(),
        })
        .collect())
}

/// Candidate sets and scores shared by both tuning strategies.
struct Prepared {
    h: PersonalizedTripleSet,
    staged: BTreeSet<KnowledgeTriple>,
    add_ranking: Vec<RankedTriple>,
}

fn prepare(
    graph: &KnowledgeGraph,
    request: &TuneRequest,
    cfg: &TuningConfig,
    scorer: &Scorer<'_>,
) -> Result<Prepared> {
    cfg.validate()?;
    if request.answer.trim().is_empty() {
        return Err(Error::Validation("feedback answer is empty".into()));
    }
    let h = extract_personalized_triples(
        scorer,
        &request.query,
        &request.answer,
        &request.subject,
        &request.object,
        cfg.k,
        request.relations.as_deref(),
    )?;
    let staged = graph.triples_from_subject(&request.subject);

    // every score the run can need, fetched before any edit is staged
    retrieval_over(staged.iter().chain(h.triples()), &request.query, h.subject(), scorer)?;
    let add_ranking = rank(h.triples().iter().cloned(), request, scorer, true)?;
    Ok(Prepared {
        h,
        staged,
        add_ranking,
    })
}

fn staged_loss(
    staged: &BTreeSet<KnowledgeTriple>,
    request: &TuneRequest,
    h: &PersonalizedTripleSet,
    scorer: &Scorer<'_>,
    mode: LossMode,
) -> Result<f64> {
    let distribution = retrieval_over(staged.iter(), &request.query, h.subject(), scorer)?;
    Ok(loss_against(&distribution, &request.query, &request.answer, h, scorer, mode)?.total)
}

fn commit(graph: &mut KnowledgeGraph, edits: &[Edit], provenance: &str) {
    for edit in edits.iter().filter(|e| e.changed) {
        let outcome = graph.apply(edit.op, edit.triple.clone(), provenance);
        debug_assert!(outcome.changed());
    }
}

/// Run the heuristic add/remove loop for one feedback pair and commit its edits.
pub fn tune(
    graph: &mut KnowledgeGraph,
    request: &TuneRequest,
    cfg: &TuningConfig,
    scorer: &Scorer<'_>,
) -> Result<TuningReport> {
    let calls_before = scorer.calls();
    let Prepared {
        h,
        mut staged,
        add_ranking,
    } = prepare(graph, request, cfg, scorer)?;
    let mode = cfg.loss_mode();

    let removable = staged
        .iter()
        .filter(|z| !h.contains(z))
        .filter(|z| !(cfg.protect_prior_feedback && graph.is_feedback_added(z)))
        .cloned()
        .collect::<Vec<_>>();
    let remove_ranking = rank(removable, request, scorer, false)?;

    let n_add = add_ranking.len();
    let n_remove = remove_ranking.len();
    let mut edits: Vec<Edit> = Vec::new();
    let mut loss_trace = vec![LossStep {
        step: 0,
        edit: None,
        loss: staged_loss(&staged, request, &h, scorer, mode)?,
    }];
    let mut termination = if loss_trace[0].loss <= cfg.epsilon {
        Termination::ThresholdMet
    } else {
        Termination::CandidatesExhausted
    };
    let mut iterations = 0;
    let (mut count_add, mut count_remove) = (0, 0);

    if termination != Termination::ThresholdMet {
        'outer: while count_add < n_add || count_remove < n_remove {
            iterations += 1;
            for op in [EditOp::Add, EditOp::Remove] {
                let triple = match op {
                    EditOp::Add if count_add < n_add => {
                        count_add += 1;
                        add_ranking[count_add - 1].triple.clone()
                    }
                    EditOp::Remove if count_remove < n_remove => {
                        count_remove += 1;
                        remove_ranking[count_remove - 1].triple.clone()
                    }
                    _ => continue,
                };
                let changed = match op {
                    EditOp::Add => staged.insert(triple.clone()),
                    EditOp::Remove => staged.remove(&triple),
                };
                let loss = staged_loss(&staged, request, &h, scorer, mode)?;
                let edit = Edit { op, triple, changed };
                edits.push(edit.clone());
                loss_trace.push(LossStep {
                    step: edits.len(),
                    edit: Some(edit),
                    loss,
                });
                if loss <= cfg.epsilon {
                    termination = Termination::ThresholdMet;
                    break 'outer;
                }
            }
        }
    }

    commit(graph, &edits, &request.provenance());
    Ok(report(h, add_ranking, remove_ranking, &edits, loss_trace, termination, iterations, scorer.calls() - calls_before))
}

/// Clear every triple rooted at the query entity, then add the personalized
/// triple with the highest answer probability.
pub fn greedy_tune(
    graph: &mut KnowledgeGraph,
    request: &TuneRequest,
    cfg: &TuningConfig,
    scorer: &Scorer<'_>,
) -> Result<TuningReport> {
    let calls_before = scorer.calls();
    let Prepared {
        h,
        mut staged,
        add_ranking,
    } = prepare(graph, request, cfg, scorer)?;
    let mode = cfg.loss_mode();
    let remove_ranking = rank(staged.iter().cloned(), request, scorer, false)?;

    let mut loss_trace = vec![LossStep {
        step: 0,
        edit: None,
        loss: staged_loss(&staged, request, &h, scorer, mode)?,
    }];
    let mut edits: Vec<Edit> = staged
        .iter()
        .map(|z| Edit {
            op: EditOp::Remove,
            triple: z.clone(),
            changed: true,
        })
        .collect();
    staged.clear();
    let best = add_ranking[0].triple.clone();
    staged.insert(best.clone());
    edits.push(Edit {
        op: EditOp::Add,
        triple: best,
        changed: true,
    });
    let loss = staged_loss(&staged, request, &h, scorer, mode)?;
    loss_trace.push(LossStep {
        step: edits.len(),
        edit: edits.last().cloned(),
        loss,
    });
    let termination = if loss <= cfg.epsilon {
        Termination::ThresholdMet
    } else {
        Termination::CandidatesExhausted
    };

    commit(graph, &edits, &request.provenance());
    Ok(report(h, add_ranking, remove_ranking, &edits, loss_trace, termination, 1, scorer.calls() - calls_before))
}

#[allow(clippy::too_many_arguments)]
fn report(
    h: PersonalizedTripleSet,
    add_ranking: Vec<RankedTriple>,
    remove_ranking: Vec<RankedTriple>,
    edits: &[Edit],
    loss_trace: Vec<LossStep>,
    termination: Termination,
    iterations: usize,
    scoring_calls: u64,
) -> TuningReport {
    let changed = |op: EditOp| {
        edits
            .iter()
            .filter(|e| e.changed && e.op == op)
            .map(|e| e.triple.clone())
            .collect::<Vec<_>>()
    };
    TuningReport {
        personalized: h.triples().to_vec(),
        source: h.source(),
        add_ranking,
        remove_ranking,
        added: changed(EditOp::Add),
        removed: changed(EditOp::Remove),
        loss_trace,
        termination,
        iterations,
        scoring_calls,
    }
}
