use std::collections::{BTreeMap, HashSet};

use kedit_core::world::*;
use proptest::prelude::*;

fn default_world() -> World {
    gen_world(&WorldParams::default(), &Taxonomy::default_taxonomy()).unwrap()
}

/// Deterministic stand-in for the base-model recall filter.
fn pseudo_recall(t: &Triple) -> bool {
    !(t.subject * 7 + t.relation * 3).is_multiple_of(5)
}

fn fineked(world: &World, seed: u64) -> Vec<FineKedRecord> {
    build_fineked(
        world,
        &plan_subjects(world, seed),
        FineKedOptions::default(),
        pseudo_recall,
    )
    .unwrap()
}

#[test]
fn same_seed_gives_identical_worlds() {
    let p = WorldParams::default();
    let t = Taxonomy::default_taxonomy();
    assert_eq!(gen_world(&p, &t).unwrap(), gen_world(&p, &t).unwrap());
    let other = WorldParams { seed: 99, ..p };
    assert_ne!(gen_world(&other, &t).unwrap().hash(), gen_world(&p, &t).unwrap().hash());
}

#[test]
fn default_world_has_unique_functional_facts() {
    let w = default_world();
    assert_eq!(w.subjects_in(Split::Eval).len(), 64);
    assert_eq!(w.relations.len(), 12);
    let cats: HashSet<usize> = w.relations.iter().map(|r| r.category).collect();
    assert_eq!(cats.len(), 4);
    let mut seen = HashSet::new();
    let mut per_subject: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
    for t in &w.triples {
        assert!(
            seen.insert((t.subject, t.relation)),
            "duplicate ({}, {})",
            t.subject,
            t.relation
        );
        assert!(w.relations[t.relation].objects.contains(&t.object));
        per_subject.entry(t.subject).or_default().insert(t.relation);
    }
    for s in w.subjects_in(Split::Eval) {
        assert!(per_subject[&s].len() >= 10);
    }
    assert!(w.triples_in(Split::Eval).len() >= 64 * 10);
}

#[test]
fn disentangler_subjects_are_disjoint_from_evaluation_subjects() {
    let w = default_world();
    let eval: HashSet<usize> = w.subjects_in(Split::Eval).into_iter().collect();
    let krd: HashSet<usize> = w.subjects_in(Split::Krd).into_iter().collect();
    assert!(!krd.is_empty());
    assert!(eval.is_disjoint(&krd));
    let names: HashSet<&str> = eval.iter().map(|&s| w.subjects[s].name.as_str()).collect();
    assert!(krd.iter().all(|&s| !names.contains(w.subjects[s].name.as_str())));
}

#[test]
fn too_few_relations_or_empty_counts_are_rejected() {
    let t = Taxonomy::default_taxonomy();
    for p in [
        WorldParams {
            n_relations: 9,
            ..Default::default()
        },
        WorldParams {
            n_subjects: 0,
            ..Default::default()
        },
        WorldParams {
            n_objects_per_relation: 1,
            ..Default::default()
        },
    ] {
        assert!(
            matches!(gen_world(&p, &t), Err(kedit_core::CoreError::Config(_))),
            "{p:?}"
        );
    }
}

#[test]
fn every_prompt_round_trips_through_the_tokenizer() {
    let w = default_world();
    for s in 0..w.subjects.len() {
        for r in 0..w.relations.len() {
            for template in 0..w.templates.len() {
                for prefix in std::iter::once(None).chain((0..w.prefixes.len()).map(Some)) {
                    let text = w.render(s, r, template, prefix);
                    let ids = w.vocab.encode(&text).unwrap();
                    assert_eq!(w.vocab.decode(&ids), text);
                    let p = w.prompt(s, r, template, prefix);
                    assert_eq!(p.tokens, ids);
                    assert_eq!(p.tokens[p.subject_pos()], w.subjects[s].token);
                }
            }
        }
    }
}

#[test]
fn fineked_records_respect_their_invariants() {
    let w = default_world();
    for seed in 0..3 {
        let recs = fineked(&w, seed);
        assert!(!recs.is_empty());
        for r in &recs {
            assert_eq!(r.neighbor.subject, r.edit.subject);
            assert_ne!(r.neighbor.relation, r.edit.relation);
            assert!(pseudo_recall(&r.neighbor));
            assert_ne!(r.edit.new_object, r.edit.object);
            assert!(w.relations[r.edit.relation].objects.contains(&r.edit.new_object));
            assert_eq!(r.edit.base(), w.triple(r.edit.subject, r.edit.relation));
            let (score, level) = w.relation_similarity(r.edit.relation, r.neighbor.relation);
            assert_eq!((r.score, r.level), (score, level));
            assert_eq!(level, Level::from_score(score));
        }
        let counts = level_counts(&recs);
        assert_eq!(counts.iter().map(|(_, n)| n).sum::<usize>(), recs.len());
    }
}

#[test]
fn a_pair_scored_nine_is_always_hard() {
    let mut tax = Taxonomy::default_taxonomy();
    for (a, row) in tax.scores.iter_mut() {
        for (b, s) in row.iter_mut() {
            if a == b {
                *s = 10;
            } else if (a == "geography" && b == "politics") || (a == "politics" && b == "geography") {
                *s = 9;
            }
        }
    }
    tax.validate().unwrap();
    let w = gen_world(&WorldParams::default(), &tax).unwrap();
    let cat = |r: usize| tax.categories[w.relations[r].category].name.as_str();
    let mut hits = 0;
    for r in fineked(&w, 0) {
        let pair = [cat(r.edit.relation), cat(r.neighbor.relation)];
        if pair.contains(&"geography") && pair.contains(&"politics") {
            assert_eq!(r.score, 9);
            assert_eq!(r.level, Level::Hard);
            hits += 1;
        }
    }
    assert!(hits > 0);
}

#[test]
fn counterfact_records_have_paraphrases_and_foreign_neighbours() {
    let w = default_world();
    let plans = plan_subjects(&w, 0);
    let recs = build_counterfact_style(&w, &plans, 2).unwrap();
    assert!(!recs.is_empty());
    for c in &recs {
        let e = c.edit;
        assert_eq!(c.edit_prompt, w.render(e.subject, e.relation, 0, None));
        assert_eq!(c.paraphrase_prompts.len(), 2);
        for (&t, p) in c.paraphrase_templates.iter().zip(&c.paraphrase_prompts) {
            assert_ne!(p, &c.edit_prompt);
            assert_eq!(p, &w.render(e.subject, e.relation, t, None));
        }
        assert!(c.neighborhood.len() >= 2);
        let name = &w.subjects[e.subject].name;
        for (t, p) in c.neighborhood.iter().zip(&c.neighborhood_prompts) {
            assert_ne!(t.subject, e.subject);
            assert_eq!((t.relation, t.object), (e.relation, e.object));
            assert!(!p.split_whitespace().any(|tok| tok == name), "{p}");
        }
    }
}

#[test]
fn subject_batches_nest_and_avoid_the_neighbour() {
    let w = default_world();
    let recs = fineked(&w, 1);
    let sets = build_subject_batches(&recs, &[1, 2, 4, 8]).unwrap();
    for (i, (size, batches)) in sets.iter().enumerate() {
        assert_eq!(batches.len(), recs.len());
        for (b, r) in batches.iter().zip(&recs) {
            assert_eq!(b.edits.len(), *size);
            assert_eq!(b.edits[0], r.edit);
            assert!(b.edits.iter().all(|e| e.subject == b.subject));
            let rels: HashSet<usize> = b.edits.iter().map(|e| e.relation).collect();
            assert_eq!(rels.len(), *size);
            assert!(!rels.contains(&b.neighbor.relation));
            if i > 0 {
                let smaller = &sets[i - 1].1.iter().find(|x| x.record_id == b.record_id).unwrap().edits;
                assert_eq!(&b.edits[..smaller.len()], &smaller[..]);
            }
        }
    }
    assert!(build_subject_batches(&recs, &[9]).is_err());
}

#[test]
fn datasets_serialize_with_stable_fields() {
    let w = default_world();
    let recs = fineked(&w, 2);
    let text = serde_json::to_string(&recs[0]).unwrap();
    let back: FineKedRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(back, recs[0]);
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("world.jsonl");
    w.save(&path).unwrap();
    let loaded = World::load(&path, w.taxonomy.clone()).unwrap();
    assert_eq!(loaded, w);
    assert_eq!(loaded.hash(), w.hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn level_is_a_pure_function_of_the_score(score in 0u8..=10) {
        let expected = match score {
            0..=3 => Level::Easy,
            4..=6 => Level::Middle,
            _ => Level::Hard,
        };
        prop_assert_eq!(Level::from_score(score), expected);
    }

    #[test]
    fn small_worlds_keep_their_invariants(seed in 0u64..1_000, n in 12usize..30, objects in 3usize..8) {
        let p = WorldParams { seed, n_subjects: n, n_krd_subjects: 4, n_relations: 12, n_objects_per_relation: objects };
        let w = gen_world(&p, &Taxonomy::default_taxonomy()).unwrap();
        let mut seen = HashSet::new();
        for t in &w.triples {
            prop_assert!(seen.insert((t.subject, t.relation)));
            prop_assert!(w.relations[t.relation].objects.contains(&t.object));
        }
        let recs = build_fineked(&w, &plan_subjects(&w, seed), FineKedOptions::default(), |_| true).unwrap();
        prop_assert_eq!(recs.len(), n);
        for r in &recs {
            prop_assert_eq!(r.neighbor.subject, r.edit.subject);
            prop_assert_ne!(r.neighbor.relation, r.edit.relation);
            prop_assert_eq!(r.level, Level::from_score(r.score));
        }
    }
}
