use std::collections::BTreeSet;

use super::*;

fn small_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_entities: 200,
        n_relations: 6,
        n_docs: 100,
        hops: vec![1, 2, 3],
        questions_per_hop: 60,
        seed,
        ..SyntheticConfig::default()
    }
}

/// Independent traversal straight over the triple list.
fn brute_force_traverse(triples: &[Triple], head: EntityId, path: &[RelationId]) -> BTreeSet<EntityId> {
    let mut frontier = BTreeSet::from([head]);
    for &r in path {
        let mut next = BTreeSet::new();
        for t in triples {
            if t.relation == r && frontier.contains(&t.subject) {
                next.insert(t.object);
            }
        }
        frontier = next;
    }
    frontier
}

#[test]
fn generator_is_deterministic() {
    let a = generate_synthetic_dataset(&small_config(4)).unwrap();
    let b = generate_synthetic_dataset(&small_config(4)).unwrap();
    assert_eq!(a.corpus, b.corpus);
    assert_eq!(a.kb, b.kb);
    assert_eq!(a.questions, b.questions);
    let c = generate_synthetic_dataset(&small_config(5)).unwrap();
    assert_ne!(a.corpus, c.corpus);
}

#[test]
fn answers_equal_brute_force_traversal() {
    let cfg = small_config(9);
    let data = generate_synthetic_dataset(&cfg).unwrap();
    let mut checked = 0;
    for (hops, qs) in cfg.hops.iter().zip(&data.questions) {
        for q in qs {
            let path = parse_relation_path(&data.kb, &q.text).unwrap();
            assert_eq!(path.len(), *hops);
            let want = brute_force_traverse(data.kb.triples(), q.seed_entities[0], &path);
            let got: BTreeSet<EntityId> = q.answers.iter().copied().collect();
            assert_eq!(got, want, "question {}", q.text);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn linker_recovers_generator_mentions() {
    let data = generate_synthetic_dataset(&small_config(2)).unwrap();
    let relinked = link_mentions(data.corpus.documents(), data.corpus.entities()).unwrap();
    assert_eq!(relinked.as_slice(), data.corpus.mentions());
    // some alias mentions were planted
    let alias_mentions = data
        .corpus
        .mentions()
        .iter()
        .filter(|m| m.start == m.end)
        .count();
    assert!(alias_mentions > 0);
}

#[test]
fn intermediate_in_degree_respects_cap() {
    let mut cfg = small_config(3);
    cfg.in_degree_cap = 3;
    let data = generate_synthetic_dataset(&cfg).unwrap();
    let deg = data.kb.in_degrees(cfg.n_entities);
    for qs in &data.questions {
        for q in qs {
            for set in q.gold_chain.as_ref().unwrap() {
                assert!(set.iter().all(|&e| deg[e as usize] <= 3));
            }
        }
    }
}

#[test]
fn unsatisfiable_config_is_generation_error() {
    let cfg = SyntheticConfig {
        n_entities: 20,
        n_relations: 1,
        n_docs: 20,
        hops: vec![2],
        questions_per_hop: 5,
        n_types: 2,
        ..SyntheticConfig::default()
    };
    // one relation maps type 0 to type 1 and type 1 has none: no 2-hop path.
    assert!(matches!(
        generate_synthetic_dataset(&cfg),
        Err(crate::Error::Generation(_))
    ));
}

#[test]
fn bad_configs_are_rejected() {
    let mut cfg = small_config(1);
    cfg.n_entities = 5;
    assert!(generate_synthetic_dataset(&cfg).is_err());
    let mut cfg = small_config(1);
    cfg.hops = vec![4];
    assert!(generate_synthetic_dataset(&cfg).is_err());
}

#[test]
fn ids_are_dense_permutations() {
    let data = generate_synthetic_dataset(&small_config(8)).unwrap();
    for (i, m) in data.corpus.mentions().iter().enumerate() {
        assert_eq!(m.mention_id as usize, i);
    }
    for (i, e) in data.corpus.entities().iter().enumerate() {
        assert_eq!(e.entity_id as usize, i);
    }
}

#[test]
fn write_then_ingest_round_trips() {
    let cfg = SyntheticConfig {
        n_docs: 100,
        n_entities: 150,
        ..small_config(21)
    };
    let data = generate_synthetic_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (c, l) = (dir.path().join("corpus.jsonl"), dir.path().join("lex.jsonl"));
    write_corpus(&data.corpus, &c, &l).unwrap();
    assert_eq!(ingest_corpus(&c, &l).unwrap(), data.corpus);

    let (kb, rel) = (dir.path().join("kb.tsv"), dir.path().join("rel.tsv"));
    write_kb(&data.kb, &kb, &rel).unwrap();
    assert_eq!(read_kb(&kb, &rel, cfg.n_entities).unwrap(), data.kb);

    let qp = dir.path().join("q.jsonl");
    write_questions(&qp, &data.questions[1]).unwrap();
    assert_eq!(read_questions(&qp).unwrap(), data.questions[1]);
}
