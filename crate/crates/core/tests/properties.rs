mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use common::*;
use kgtune::inference::{
    kl_retrieval_loss, marginal_answer_probability, retrieval_distribution, total_loss, LossMode,
    PersonalizedTripleSet, TripleSource,
};
use kgtune::kg::{replay, EditOp};
use kgtune::optimizer::{greedy_tune, tune};
use kgtune::scoring::{RenderedPrompt, ScoringBackend};
use kgtune::{Error, KnowledgeGraph, Scorer, SyntheticBackend};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn h_set(inst: &Instance) -> PersonalizedTripleSet {
    let relations: Vec<&str> = inst.h.iter().map(|z| z.relation()).collect();
    PersonalizedTripleSet::from_relations(SUBJECT, OBJECT, &relations, inst.cfg.k, TripleSource::UserProvided)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn retrieval_distribution_normalizes(seed in any::<u64>()) {
        let inst = random_instance(&mut StdRng::seed_from_u64(seed), 40);
        let scorer = Scorer::new(&inst.backend);
        let d = retrieval_distribution(&inst.graph, QUERY, SUBJECT, &scorer).unwrap();
        let bucket = inst.graph.triples_from_subject(SUBJECT);
        prop_assert_eq!(d.len(), bucket.len());
        if !d.is_empty() {
            prop_assert!((d.total() - 1.0).abs() < 1e-9);
        }
        for (z, &p) in d.entries() {
            prop_assert!(p >= 0.0);
            prop_assert!((p - inst.tables.retrieval(&bucket, z)).abs() < 1e-12);
        }
        // nothing outside the bucket gets mass
        prop_assert_eq!(d.probability(&t("other0", "r0", "x0")), 0.0);
    }

    #[test]
    fn scaling_relation_weights_keeps_distribution(seed in any::<u64>(), c in 0.05f64..1.0) {
        let inst = random_instance(&mut StdRng::seed_from_u64(seed), 20);
        let mut scaled = inst.fixture.clone();
        for e in &mut scaled.relation_scores {
            e.probability *= c;
        }
        scaled.default_score *= c;
        let b2 = SyntheticBackend::new(&scaled).unwrap();
        let d1 = retrieval_distribution(&inst.graph, QUERY, SUBJECT, &Scorer::new(&inst.backend)).unwrap();
        let d2 = retrieval_distribution(&inst.graph, QUERY, SUBJECT, &Scorer::new(&b2)).unwrap();
        for (z, &p) in d1.entries() {
            prop_assert!((p - d2.probability(z)).abs() < 1e-12);
        }
        prop_assert_eq!(d1.argmax(), d2.argmax());
    }

    #[test]
    fn loss_is_additive_and_matches_oracle(seed in any::<u64>()) {
        let inst = random_instance(&mut StdRng::seed_from_u64(seed), 40);
        let scorer = Scorer::new(&inst.backend);
        let h = h_set(&inst);
        let bucket = inst.graph.triples_from_subject(SUBJECT);
        for mode in [LossMode::Floor(1e-9), LossMode::Intersect] {
            let l = total_loss(&inst.graph, QUERY, ANSWER, &h, &scorer, mode).unwrap();
            let expected = inst.tables.loss(&bucket, h.triples(), mode);
            if expected.is_infinite() {
                prop_assert!(l.total.is_infinite());
                continue;
            }
            prop_assert!((l.total - (l.retrieve_loss + l.reasoning_loss)).abs() < 1e-12);
            prop_assert!((l.total - expected).abs() < 1e-9 * expected.abs().max(1.0));
            prop_assert!(l.retrieve_loss >= 0.0 && l.reasoning_loss >= 0.0);
        }
    }

    #[test]
    fn kl_identity(seed in any::<u64>()) {
        let mut inst = random_instance(&mut StdRng::seed_from_u64(seed), 20);
        let h = h_set(&inst);
        for z in h.triples() {
            inst.graph.add_triple(z.clone(), "test");
        }
        let kl = kl_retrieval_loss(&inst.graph, QUERY, &h, &Scorer::new(&inst.backend)).unwrap();
        let k = h.effective_k() as f64;
        prop_assert!((kl.direct_kl - kl.closed_form + k.ln()).abs() < 1e-9);
    }

    #[test]
    fn removing_non_personalized_triples_never_raises_retrieval_loss(seed in any::<u64>()) {
        let mut inst = random_instance(&mut StdRng::seed_from_u64(seed), 20);
        let h = h_set(&inst);
        for z in h.triples() {
            inst.graph.add_triple(z.clone(), "test");
        }
        let scorer = Scorer::new(&inst.backend);
        let mut prev = total_loss(&inst.graph, QUERY, ANSWER, &h, &scorer, LossMode::default()).unwrap().retrieve_loss;
        let removable: Vec<_> = inst.graph.triples_from_subject(SUBJECT).into_iter().filter(|z| !h.contains(z)).collect();
        for z in removable {
            inst.graph.remove_triple(&z, "test");
            let now = total_loss(&inst.graph, QUERY, ANSWER, &h, &scorer, LossMode::default()).unwrap().retrieve_loss;
            prop_assert!(now <= prev + 1e-12);
            prev = now;
        }
    }

    #[test]
    fn marginal_matches_oracle(seed in any::<u64>()) {
        let inst = random_instance(&mut StdRng::seed_from_u64(seed), 20);
        let bucket = inst.graph.triples_from_subject(SUBJECT);
        let p = marginal_answer_probability(&inst.graph, QUERY, SUBJECT, ANSWER, &Scorer::new(&inst.backend)).unwrap();
        if bucket.is_empty() {
            prop_assert!((p - inst.tables.default).abs() < 1e-15);
        } else {
            prop_assert!((p - inst.tables.marginal(&bucket)).abs() < 1e-12);
        }
    }

    #[test]
    fn tuning_is_bounded_local_and_conservative(seed in any::<u64>()) {
        let inst = random_instance(&mut StdRng::seed_from_u64(seed), 20);
        let h = h_set(&inst);
        let bucket = inst.graph.triples_from_subject(SUBJECT);
        let n_g = bucket
            .iter()
            .filter(|z| !h.contains(z))
            .filter(|z| !(inst.cfg.protect_prior_feedback && inst.graph.is_feedback_added(z)))
            .count();

        let mut g = inst.graph.clone();
        let scorer = Scorer::new(&inst.backend);
        let r = tune(&mut g, &inst.request, &inst.cfg, &scorer).unwrap();
        prop_assert!(r.loss_trace.len() - 1 <= h.effective_k() + n_g);
        prop_assert!(r.iterations <= h.effective_k().max(n_g));
        prop_assert_eq!(other_subjects(&g), other_subjects(&inst.graph));
        prop_assert!(r.removed.len() <= bucket.len());
        if r.termination == kgtune::optimizer::Termination::ThresholdMet {
            prop_assert!(r.final_loss() <= inst.cfg.epsilon);
        }
        // loss trace replays against the oracle on every intermediate state
        let mode = inst.cfg.loss_mode();
        let mut state = bucket.clone();
        for step in &r.loss_trace {
            if let Some(e) = &step.edit {
                match e.op {
                    EditOp::Add => { state.insert(e.triple.clone()); }
                    EditOp::Remove => { state.remove(&e.triple); }
                }
            }
            let expected = inst.tables.loss(&state, h.triples(), mode);
            if expected.is_infinite() {
                prop_assert!(step.loss.is_infinite());
            } else {
                prop_assert!((step.loss - expected).abs() < 1e-9 * expected.max(1.0));
            }
        }
        prop_assert_eq!(state, g.triples_from_subject(SUBJECT));

        let mut gg = inst.graph.clone();
        let greedy = greedy_tune(&mut gg, &inst.request, &inst.cfg, &Scorer::new(&inst.backend)).unwrap();
        prop_assert_eq!(greedy.removed.len(), bucket.len());
        prop_assert!(r.removed.len() <= greedy.removed.len());
        let d = retrieval_distribution(&gg, QUERY, SUBJECT, &scorer).unwrap();
        prop_assert_eq!(d.len(), 1);
        prop_assert_eq!(d.probability(&greedy.added[0]), 1.0);
        prop_assert_eq!(other_subjects(&gg), other_subjects(&inst.graph));
    }

    #[test]
    fn backend_failure_mid_run_is_atomic(seed in any::<u64>(), fail_after in 0u64..40) {
        let inst = random_instance(&mut StdRng::seed_from_u64(seed), 20);
        let flaky = Flaky { inner: &inst.backend, left: AtomicU64::new(fail_after) };
        let mut g = inst.graph.clone();
        match tune(&mut g, &inst.request, &inst.cfg, &Scorer::new(&flaky)) {
            Ok(_) => {}
            Err(e) => {
                prop_assert!(e.is_backend());
                prop_assert_eq!(&g, &inst.graph);
                prop_assert_eq!(g.journal().len(), inst.graph.journal().len());
            }
        }
    }

    #[test]
    fn journal_replays_exactly(ops in proptest::collection::vec((any::<bool>(), 0usize..6, 0usize..4, 0usize..5), 0..60)) {
        let mut g = KnowledgeGraph::from_triples([t("s0", "r0", "o0"), t("s1", "r1", "o1")]);
        for (i, (add, s, r, o)) in ops.into_iter().enumerate() {
            let z = t(&format!("s{s}"), &format!("r{r}"), &format!("o{o}"));
            let prov = if i % 3 == 0 { "feedback:x" } else { "manual" };
            if add { g.add_triple(z, prov); } else { g.remove_triple(&z, prov); }
        }
        prop_assert_eq!(replay(g.epoch().iter().cloned(), g.journal()).unwrap(), g.triple_set());
        let mut back = KnowledgeGraph::from_tsv(&g.to_tsv(), "mem").unwrap().graph;
        back.attach_journal(&g.journal_to_jsonl(), "mem").unwrap();
        prop_assert_eq!(back.epoch(), g.epoch());
        prop_assert_eq!(back.journal(), g.journal());
        prop_assert_eq!(back.to_tsv(), g.to_tsv());
    }

    #[test]
    fn argmax_ties_break_lexicographically(n in 2usize..8) {
        let mut f = kgtune::SyntheticFixture::new(0.3);
        f.relation(QUERY, "zz", 0.01);
        let b = SyntheticBackend::new(&f).unwrap();
        let triples: BTreeSet<_> = (0..n).map(|i| t(SUBJECT, &format!("rel{i}"), "o")).collect();
        let g = KnowledgeGraph::from_triples(triples.iter().cloned());
        let d = retrieval_distribution(&g, QUERY, SUBJECT, &Scorer::new(&b)).unwrap();
        prop_assert_eq!(d.argmax(), triples.iter().next());
    }
}

/// Passes through a fixed number of scoring calls, then fails.
struct Flaky<'a> {
    inner: &'a SyntheticBackend,
    left: AtomicU64,
}

impl Flaky<'_> {
    fn take(&self) -> kgtune::Result<()> {
        self.left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .map(|_| ())
            .map_err(|_| Error::BackendUnavailable("injected".into()))
    }
}

impl ScoringBackend for Flaky<'_> {
    fn score_continuation(&self, prompt: &RenderedPrompt, continuation: &str) -> kgtune::Result<f64> {
        self.take()?;
        self.inner.score_continuation(prompt, continuation)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_tokens: usize) -> kgtune::Result<String> {
        self.take()?;
        self.inner.generate(prompt, max_tokens)
    }
}
