#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use kgtune::inference::LossMode;
use kgtune::optimizer::{LossModeKind, TuneRequest, TuningConfig};
use kgtune::{KnowledgeGraph, KnowledgeTriple, SyntheticBackend, SyntheticFixture};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const SUBJECT: &str = "eq";
pub const QUERY: &str = "what does eq prefer?";
pub const ANSWER: &str = "a";
pub const OBJECT: &str = "ans";
pub const RELATIONS: &[&str] = &["r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7"];
pub const OBJECTS: &[&str] = &["x0", "x1", "x2", "x3", "x4", "x5", "ans"];

pub fn t(s: &str, r: &str, o: &str) -> KnowledgeTriple {
    KnowledgeTriple::new(s, r, o).unwrap()
}

/// Plain lookup tables mirroring a fixture, for computing expected values
/// without going through the inference module.
#[derive(Debug, Clone)]
pub struct Tables {
    pub default: f64,
    pub relation: HashMap<String, f64>,
    pub reasoning: HashMap<KnowledgeTriple, f64>,
}

impl Tables {
    pub fn rel(&self, r: &str) -> f64 {
        *self.relation.get(r).unwrap_or(&self.default)
    }

    pub fn reason(&self, z: &KnowledgeTriple) -> f64 {
        *self.reasoning.get(z).unwrap_or(&self.default)
    }

    /// Naive normalization: weight over the sum of weights.
    pub fn retrieval(&self, bucket: &BTreeSet<KnowledgeTriple>, z: &KnowledgeTriple) -> f64 {
        if !bucket.contains(z) {
            return 0.0;
        }
        let total: f64 = bucket.iter().map(|y| self.rel(y.relation())).sum();
        self.rel(z.relation()) / total
    }

    pub fn loss(&self, bucket: &BTreeSet<KnowledgeTriple>, h: &[KnowledgeTriple], mode: LossMode) -> f64 {
        let mut sum = 0.0;
        let mut counted = 0;
        for z in h {
            let p = match (bucket.contains(z), mode) {
                (true, _) => self.retrieval(bucket, z),
                (false, LossMode::Floor(f)) => f,
                (false, LossMode::Intersect) => continue,
            };
            counted += 1;
            sum += (self.reason(z) * p).ln();
        }
        if counted == 0 {
            f64::INFINITY
        } else {
            -sum / h.len() as f64
        }
    }

    pub fn marginal(&self, bucket: &BTreeSet<KnowledgeTriple>) -> f64 {
        bucket.iter().map(|z| self.retrieval(bucket, z) * self.reason(z)).sum()
    }
}

pub struct Instance {
    pub graph: KnowledgeGraph,
    pub fixture: SyntheticFixture,
    pub backend: SyntheticBackend,
    pub tables: Tables,
    pub request: TuneRequest,
    pub cfg: TuningConfig,
    /// Personalized triples in extraction order, deduplicated.
    pub h: Vec<KnowledgeTriple>,
}

fn prob(rng: &mut StdRng) -> f64 {
    // keep away from 0 so logs stay moderate
    rng.random_range(0.001..=1.0)
}

/// Random tuning instance around subject `eq`, with up to `max_q` triples
/// rooted there and some triples on other subjects.
pub fn random_instance(rng: &mut StdRng, max_q: usize) -> Instance {
    let mut graph = KnowledgeGraph::new();
    let n_q = rng.random_range(0..=max_q);
    for _ in 0..n_q {
        let r = *RELATIONS.choose(rng).unwrap();
        let o = *OBJECTS.choose(rng).unwrap();
        let z = t(SUBJECT, r, o);
        if rng.random_bool(0.2) {
            graph.add_triple(z, "feedback:old");
        } else {
            graph.add_triple(z, "seed");
        }
    }
    for i in 0..rng.random_range(0..20) {
        let s = format!("other{}", i % 4);
        graph.add_triple(t(&s, RELATIONS.choose(rng).unwrap(), OBJECTS.choose(rng).unwrap()), "seed");
    }

    let k = rng.random_range(1..=5);
    let n_rel = rng.random_range(1..=4);
    let relations: Vec<String> = (0..n_rel).map(|_| RELATIONS.choose(rng).unwrap().to_string()).collect();
    let mut h = Vec::new();
    for r in &relations {
        let z = t(SUBJECT, r, OBJECT);
        if !h.contains(&z) && h.len() < k {
            h.push(z);
        }
    }

    let default = 0.01;
    let mut fixture = SyntheticFixture::new(default);
    let mut tables = Tables {
        default,
        relation: HashMap::new(),
        reasoning: HashMap::new(),
    };
    for r in RELATIONS {
        let p = prob(rng);
        fixture.relation(QUERY, r, p);
        tables.relation.insert(r.to_string(), p);
    }
    for r in RELATIONS {
        for o in OBJECTS {
            let z = t(SUBJECT, r, o);
            let p = prob(rng);
            fixture.reasoning(QUERY, &z, ANSWER, p);
            tables.reasoning.insert(z, p);
        }
    }
    let backend = SyntheticBackend::new(&fixture).unwrap();

    let cfg = TuningConfig {
        k,
        epsilon: rng.random_range(0.0..6.0),
        floor: 1e-9,
        loss_mode: if rng.random_bool(0.5) {
            LossModeKind::Floor
        } else {
            LossModeKind::Intersect
        },
        protect_prior_feedback: rng.random_bool(0.5),
    };
    let request = TuneRequest {
        query: QUERY.into(),
        answer: ANSWER.into(),
        subject: SUBJECT.into(),
        object: OBJECT.into(),
        relations: Some(relations),
        interaction: "i".into(),
    };
    Instance {
        graph,
        fixture,
        backend,
        tables,
        request,
        cfg,
        h,
    }
}

pub fn other_subjects(g: &KnowledgeGraph) -> BTreeSet<KnowledgeTriple> {
    g.iter().filter(|z| z.subject() != SUBJECT).cloned().collect()
}
