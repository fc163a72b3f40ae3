//! Browser playground for knowledge graph tuning.
//!
//! [`Playground`] holds a graph and a synthetic scoring backend and answers
//! every operation with a JSON string, so the page only renders what it is
//! given. [`Demo`] is the `wasm-bindgen` face of the same type.

use kgtune::inference::{answer_query, marginal_answer_probability};
use kgtune::kg::{render_journal_delta, JournalEntry};
use kgtune::optimizer::{greedy_tune, tune, TuneRequest, TuningConfig, TuningReport};
use kgtune::{KnowledgeGraph, KnowledgeTriple, Result, Scorer, SyntheticBackend, SyntheticFixture};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const MAX_TOKENS: usize = 32;

/// A starting graph plus the score tables standing in for the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub graph: Vec<KnowledgeTriple>,
    pub fixture: SyntheticFixture,
    /// Suggested inputs for the page's forms.
    pub example: Feedback,
}

/// A correction: the answer the user wanted for `query`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Feedback {
    pub query: String,
    pub answer: String,
    pub subject: String,
    pub object: String,
    #[serde(default)]
    pub relations: Option<Vec<String>>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl Feedback {
    fn config(&self) -> Result<TuningConfig> {
        let d = TuningConfig::default();
        let cfg = TuningConfig {
            k: self.k.unwrap_or(d.k),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn request(&self, interaction: String) -> TuneRequest {
        TuneRequest {
            query: self.query.clone(),
            answer: self.answer.clone(),
            subject: self.subject.clone(),
            object: self.object.clone(),
            relations: self.relations.clone(),
            interaction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub triple: KnowledgeTriple,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryView {
    pub answer: String,
    pub retrieved: Option<KnowledgeTriple>,
    /// Retrieval distribution, most probable first.
    pub bars: Vec<Bar>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackView {
    pub report: TuningReport,
    pub journal: Vec<JournalEntry>,
    /// `+`/`-` lines for the journal entries above.
    pub delta: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Outcome {
    pub report: TuningReport,
    /// Triples rooted at the query entity afterwards.
    pub subject_triples: Vec<KnowledgeTriple>,
    /// `P(answer | query)` on the tuned graph.
    pub answer_probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub heuristic: Outcome,
    pub greedy: Outcome,
}

pub struct Playground {
    initial: KnowledgeGraph,
    graph: KnowledgeGraph,
    backend: SyntheticBackend,
    interactions: u64,
}

impl Playground {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let graph = KnowledgeGraph::from_triples(scenario.graph.iter().cloned());
        Ok(Self {
            initial: graph.clone(),
            graph,
            backend: SyntheticBackend::new(&scenario.fixture)?,
            interactions: 0,
        })
    }

    pub fn from_json(scenario: &str) -> Result<Self> {
        Self::new(&serde_json::from_str(scenario)?)
    }

    /// Replaces the graph's clock, which stamps journal entries.
    pub fn set_clock(&mut self, clock: fn() -> u64) {
        self.initial.set_clock(clock);
        self.graph.set_clock(clock);
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn reset(&mut self) {
        self.graph = self.initial.clone();
        self.interactions = 0;
    }

    pub fn query(&self, query: &str, subject: &str) -> Result<QueryView> {
        let answer = answer_query(&self.graph, query, subject, &Scorer::new(&self.backend), MAX_TOKENS)?;
        let mut bars: Vec<Bar> = answer
            .distribution
            .entries()
            .iter()
            .map(|(z, &p)| Bar {
                triple: z.clone(),
                probability: p,
            })
            .collect();
        bars.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.triple.cmp(&b.triple)));
        Ok(QueryView {
            answer: answer.answer,
            retrieved: answer.retrieved,
            bars,
        })
    }

    /// Tunes the live graph.
    pub fn feedback(&mut self, feedback: &Feedback) -> Result<FeedbackView> {
        let cfg = feedback.config()?;
        let since = self.graph.last_seq();
        let request = feedback.request(format!("demo-{}", self.interactions + 1));
        let report = tune(&mut self.graph, &request, &cfg, &Scorer::new(&self.backend))?;
        self.interactions += 1;
        let journal = self.graph.journal_since(since).to_vec();
        Ok(FeedbackView {
            delta: render_journal_delta(&journal),
            report,
            journal,
        })
    }

    /// Runs the heuristic and the greedy tuner on copies of the live graph.
    pub fn compare(&self, feedback: &Feedback) -> Result<Comparison> {
        let cfg = feedback.config()?;
        let request = feedback.request("compare".into());
        let scorer = Scorer::new(&self.backend);
        let run = |tuner: fn(&mut KnowledgeGraph, &TuneRequest, &TuningConfig, &Scorer<'_>) -> Result<TuningReport>| {
            let mut g = self.graph.clone();
            let report = tuner(&mut g, &request, &cfg, &scorer)?;
            Ok::<_, kgtune::Error>(Outcome {
                report,
                subject_triples: g.triples_from_subject(&feedback.subject).into_iter().collect(),
                answer_probability: marginal_answer_probability(
                    &g,
                    &feedback.query,
                    &feedback.subject,
                    &feedback.answer,
                    &scorer,
                )?,
            })
        };
        Ok(Comparison {
            heuristic: run(tune)?,
            greedy: run(greedy_tune)?,
        })
    }
}

fn t(s: &str, r: &str, o: &str) -> KnowledgeTriple {
    KnowledgeTriple::new(s, r, o).expect("non-empty labels")
}

/// A user who wants vegetarian food for their dog, against a graph that
/// says dogs enjoy meat.
pub fn dog_scenario() -> Scenario {
    let q = "What food should I order for my dog?";
    let (veg, beef) = ("vegetarian dog food", "beef dog food");
    let mut f = SyntheticFixture::new(0.01);
    f.relation(q, "Enjoy", 0.45)
        .relation(q, "Likes", 0.35)
        .relation(q, "Is", 0.15)
        .reasoning(q, &t("Dog", "Enjoy", "Meat"), beef, 0.85)
        .reasoning(q, &t("Dog", "Enjoy", "Meat"), veg, 0.03)
        .reasoning(q, &t("Dog", "Likes", "Bones"), beef, 0.6)
        .reasoning(q, &t("Dog", "Likes", "Bones"), veg, 0.02)
        .reasoning(q, &t("Dog", "Is", "Animal"), beef, 0.3)
        .reasoning(q, &t("Dog", "Enjoy", "Vegetable"), veg, 0.9)
        .reasoning(q, &t("Dog", "Likes", "Vegetable"), veg, 0.8)
        .fallback(q, "dog kibble", 0.2)
        .extraction(q, &["Enjoy", "Likes"]);
    Scenario {
        graph: vec![
            t("Dog", "Is", "Animal"),
            t("Dog", "Enjoy", "Meat"),
            t("Dog", "Likes", "Bones"),
            t("Cat", "Is", "Animal"),
            t("Cat", "Enjoy", "Fish"),
        ],
        fixture: f,
        example: Feedback {
            query: q.into(),
            answer: veg.into(),
            subject: "Dog".into(),
            object: "Vegetable".into(),
            relations: None,
            k: Some(2),
            epsilon: Some(1.0),
        },
    }
}

#[cfg(target_arch = "wasm32")]
fn js_clock() -> u64 {
    js_sys::Date::now() as u64
}

#[wasm_bindgen]
pub struct Demo {
    inner: Playground,
}

#[wasm_bindgen]
impl Demo {
    /// Starts from `scenario` (JSON), or the built-in dog scenario.
    #[wasm_bindgen(constructor)]
    pub fn new(scenario: Option<String>) -> std::result::Result<Demo, JsError> {
        #[allow(unused_mut)]
        let mut inner = match scenario {
            Some(s) => Playground::from_json(&s)?,
            None => Playground::new(&dog_scenario())?,
        };
        #[cfg(target_arch = "wasm32")]
        inner.set_clock(js_clock);
        Ok(Demo { inner })
    }

    #[wasm_bindgen(js_name = defaultScenario)]
    pub fn default_scenario() -> String {
        serde_json::to_string(&dog_scenario()).expect("scenario serializes")
    }

    pub fn query(&self, query: &str, subject: &str) -> std::result::Result<String, JsError> {
        Ok(serde_json::to_string(&self.inner.query(query, subject)?)?)
    }

    /// `feedback` is a JSON [`Feedback`]; returns a JSON [`FeedbackView`].
    pub fn feedback(&mut self, feedback: &str) -> std::result::Result<String, JsError> {
        let fb: Feedback = serde_json::from_str(feedback)?;
        Ok(serde_json::to_string(&self.inner.feedback(&fb)?)?)
    }

    /// `feedback` is a JSON [`Feedback`]; returns a JSON [`Comparison`].
    pub fn compare(&self, feedback: &str) -> std::result::Result<String, JsError> {
        let fb: Feedback = serde_json::from_str(feedback)?;
        Ok(serde_json::to_string(&self.inner.compare(&fb)?)?)
    }

    pub fn graph(&self) -> String {
        serde_json::to_string(&self.inner.graph().iter().collect::<Vec<_>>()).expect("triples serialize")
    }

    pub fn reset(&mut self) {
        self.inner.reset();
    }
}
