use ctxsynth::encoder::{ContextCache, EncoderConfig, EncoderWeights};
use ctxsynth::error::Error;
use ctxsynth::harness::{
    ablate_anchor_count, ablate_context_size, ablate_k, context_corpus, corpus_fingerprint, emit_report, run_condition,
    run_grid, run_parallel, summary_markdown, Condition, ConditionName, Suite, A_VALUES, J_VALUES, K_VALUES,
};
use ctxsynth::provider::ProviderConfig;

fn suite(seed: u64) -> Suite {
    let w = EncoderWeights::init(&EncoderConfig::default(), 0).unwrap();
    Suite::desk(&w, seed, &ProviderConfig::default())
}

#[test]
fn ablation_cardinalities() {
    let s = suite(1);
    let k = ablate_k(&s, &K_VALUES, 32, 4, &[1, 2, 3]).unwrap();
    assert_eq!(k.len(), 12);
    let mut ks: Vec<usize> = k.iter().map(|r| r.k).collect();
    ks.dedup();
    assert_eq!(ks, K_VALUES);

    let j = ablate_context_size(&s, &J_VALUES, 5, &[1, 2]).unwrap();
    assert_eq!(j.len(), 54);
    for r in &j {
        assert!(matches!(r.condition, ConditionName::Zest | ConditionName::Gsc | ConditionName::RealContext));
        assert!(J_VALUES.contains(&r.config.j));
    }

    let a = ablate_anchor_count(&s, &A_VALUES, 5, 64, &[1, 2]).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a.iter().map(|r| r.anchors).collect::<Vec<_>>(), [5, 5, 10, 10, 20, 20, 40, 40]);
}

#[test]
fn anchor_collapse_is_recorded() {
    let s = suite(1);
    let r = run_condition(&Condition::new(ConditionName::Zest).with_j(2), &s, 4).unwrap();
    assert_eq!(r.anchors, 2);
    assert_eq!(r.j_prime, 2);
    assert!(r.adjustment.as_deref().unwrap().contains("20 to 2"));
    let full = run_condition(&Condition::new(ConditionName::Zest).with_j(40), &s, 4).unwrap();
    assert!(full.adjustment.is_none());
    assert_eq!(full.anchors, 20);
}

#[test]
fn runs_are_deterministic() {
    let s = suite(2);
    for name in ConditionName::ALL {
        let c = Condition::new(name).with_j(32);
        let a = run_condition(&c, &s, 7).unwrap();
        let b = run_condition(&c, &s, 7).unwrap();
        assert_eq!(a.per_query, b.per_query, "{name}");
        assert_eq!(a.context_fingerprint, b.context_fingerprint, "{name}");
        assert_eq!(a.rankings, b.rankings, "{name}");
    }
}

#[test]
fn seeds_change_sampled_contexts() {
    let s = suite(2);
    for name in [ConditionName::RandomContext, ConditionName::RealContext, ConditionName::Zest] {
        let c = Condition::new(name).with_j(16);
        let (a, _) = context_corpus(&c, &s, 1).unwrap();
        let (b, _) = context_corpus(&c, &s, 2).unwrap();
        assert_ne!(corpus_fingerprint(&a), corpus_fingerprint(&b), "{name}");
    }
}

#[test]
fn real_context_at_full_size_is_the_target() {
    let s = suite(3);
    let c = Condition::new(ConditionName::RealContext).with_j(s.target.len());
    let (ctx, _) = context_corpus(&c, &s, 9).unwrap();
    assert_eq!(ctx.ids(), s.target.ids());
    let oversized = Condition::new(ConditionName::RealContext).with_j(s.target.len() * 3);
    assert_eq!(context_corpus(&oversized, &s, 9).unwrap().0.len(), s.target.len());
}

#[test]
fn no_context_ignores_everything_else() {
    let s = suite(4);
    let empty = ContextCache::empty(&s.weights).content_fingerprint();
    let base = run_condition(&Condition::new(ConditionName::NoContext), &s, 1).unwrap();
    assert_eq!(base.j_prime, 0);
    assert_eq!(base.context_fingerprint, empty);
    let mut other = s.clone();
    other.off_domain.documents.truncate(3);
    other.exemplar_source.documents.reverse();
    other.provider.mock_seed = 99;
    for seed in [2, 3] {
        let r = run_condition(&Condition::new(ConditionName::NoContext).with_k(1), &other, seed).unwrap();
        assert_eq!(r.per_query, base.per_query);
    }
}

#[test]
fn report_mean_matches_per_query() {
    let s = suite(5);
    let r = run_condition(&Condition::new(ConditionName::Gsc).with_j(16), &s, 1).unwrap();
    let mean = r.per_query.values().sum::<f64>() / r.per_query.len() as f64;
    assert!((r.ndcg_at_10_mean - mean).abs() < 1e-12);
    assert_eq!(r.n_queries, s.queries.len());
    assert!(r.per_query.values().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn csv_layout_and_reemission() {
    let s = suite(6);
    let reports = vec![run_condition(&Condition::new(ConditionName::NoContext), &s, 1).unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(&reports, &dir.path().join("a")).unwrap();
    let text = std::fs::read_to_string(&paths.csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "condition,seed,k,A,J_prime,ndcg_at_10_mean,n_queries,wall_clock_s,context_fingerprint");
    assert!(lines[1].starts_with("no_context,1,0,0,0,"));
    let again = emit_report(&reports, &dir.path().join("b")).unwrap();
    for (x, y) in [(&paths.csv, &again.csv), (&paths.json, &again.json), (&paths.markdown, &again.markdown)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert!(emit_report(&[], dir.path()).is_err());
}

#[test]
fn summary_groups_seeds() {
    let s = suite(7);
    let reports = run_grid(
        &[Condition::new(ConditionName::NoContext), Condition::new(ConditionName::RealContext).with_j(8)],
        &s,
        &[1, 2, 3],
        2,
    )
    .unwrap();
    assert_eq!(reports.len(), 6);
    let md = summary_markdown(&reports);
    let rows: Vec<&str> = md.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("| no_context |") && rows[0].ends_with("| 3 |"));
    assert!(rows[1].starts_with("| real_context |"));
}

#[test]
fn too_many_exemplars_is_capacity_error() {
    let s = suite(8);
    let c = Condition::new(ConditionName::Zest).with_k(s.exemplar_source.len() + 1).with_j(8);
    match run_condition(&c, &s, 1) {
        Err(Error::Condition { condition, source }) => {
            assert_eq!(condition, "zest");
            assert!(matches!(*source, Error::Capacity(_)));
        }
        other => panic!("expected condition error, got {other:?}"),
    }
}

#[test]
fn parallel_results_keep_job_order() {
    let jobs: Vec<u64> = (0..50).collect();
    let out = run_parallel(&jobs, 7, |j| j * j);
    assert_eq!(out, jobs.iter().map(|j| j * j).collect::<Vec<_>>());
    assert!(run_parallel(&Vec::<u64>::new(), 4, |j| *j).is_empty());
}
