//! Edit requests and the evaluation sets built from a world.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Level, Triple, World};
use crate::error::{config_err, Result};
use crate::util::{derive_seed, rng_for};

/// Rewrite `(s, r, o) → (s, r, o*)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditRequest {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub new_object: usize,
}

impl EditRequest {
    pub fn base(&self) -> Triple {
        Triple {
            subject: self.subject,
            relation: self.relation,
            object: self.object,
        }
    }
}

/// Model-independent editing plan for one subject under one seed: the edit
/// relation, the remaining relations in a seeded order (neighbour candidates
/// first, then batch fillers), and an `o*` for every relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectPlan {
    pub id: String,
    pub seed: u64,
    pub subject: usize,
    pub edit_relation: usize,
    pub others: Vec<usize>,
    pub new_objects: Vec<usize>,
}

impl SubjectPlan {
    pub fn edit(&self, world: &World, relation: usize) -> EditRequest {
        let t = world.triple(self.subject, relation);
        EditRequest {
            subject: self.subject,
            relation,
            object: t.object,
            new_object: self.new_objects[relation],
        }
    }
}

/// One plan per evaluation subject.
pub fn plan_subjects(world: &World, seed: u64) -> Vec<SubjectPlan> {
    let mut rng = rng_for(derive_seed(world.params.seed, "plans"), &seed.to_string());
    let n_rel = world.n_relations();
    world
        .subjects_in(super::Split::Eval)
        .into_iter()
        .map(|s| {
            let edit_relation = rng.random_range(0..n_rel);
            let mut others: Vec<usize> = (0..n_rel).filter(|&r| r != edit_relation).collect();
            others.shuffle(&mut rng);
            let new_objects = (0..n_rel)
                .map(|r| {
                    let rel = &world.relations[r];
                    let o = world.triple(s, r).object;
                    let choices: Vec<usize> = rel.objects.iter().copied().filter(|&x| x != o).collect();
                    choices[rng.random_range(0..choices.len())]
                })
                .collect();
            SubjectPlan {
                id: format!("s{seed}-{}", world.subjects[s].name),
                seed,
                subject: s,
                edit_relation,
                others,
                new_objects,
            }
        })
        .collect()
}

/// Edit plus one same-subject fact under a different relation, leveled by
/// relation similarity. `batch` holds the subject-consistent edit sequence
/// with `batch[0] == edit`; `constraints` are further same-subject facts
/// outside the batch and the neighbour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineKedRecord {
    pub id: String,
    pub seed: u64,
    pub edit: EditRequest,
    pub neighbor: Triple,
    pub score: u8,
    pub level: Level,
    pub batch: Vec<EditRequest>,
    pub constraints: Vec<Triple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineKedOptions {
    pub max_batch: usize,
    pub n_constraints: usize,
}

impl Default for FineKedOptions {
    fn default() -> Self {
        Self {
            max_batch: 8,
            n_constraints: 3,
        }
    }
}

/// Applies the base-model recall filter: the neighbour is the first
/// candidate the base model answers correctly. Subjects without one are
/// skipped and logged.
pub fn build_fineked(
    world: &World,
    plans: &[SubjectPlan],
    options: FineKedOptions,
    recalled: impl Fn(&Triple) -> bool,
) -> Result<Vec<FineKedRecord>> {
    if options.max_batch == 0 {
        return Err(config_err("max_batch must be at least 1"));
    }
    let mut out = Vec::new();
    for plan in plans {
        let Some(neighbor_rel) = plan
            .others
            .iter()
            .copied()
            .find(|&r| recalled(&world.triple(plan.subject, r)))
        else {
            info!("skipping {}: no recallable neighbour fact", plan.id);
            continue;
        };
        let rest: Vec<usize> = plan.others.iter().copied().filter(|&r| r != neighbor_rel).collect();
        if rest.len() + 1 < options.max_batch {
            return Err(config_err(format!(
                "{} relations cannot fill a batch of {} plus a held-out neighbour",
                world.n_relations(),
                options.max_batch
            )));
        }
        let edit = plan.edit(world, plan.edit_relation);
        let mut batch = vec![edit];
        batch.extend(rest[..options.max_batch - 1].iter().map(|&r| plan.edit(world, r)));
        let constraints = rest[options.max_batch - 1..]
            .iter()
            .take(options.n_constraints)
            .map(|&r| world.triple(plan.subject, r))
            .collect();
        let (score, level) = world.relation_similarity(plan.edit_relation, neighbor_rel);
        out.push(FineKedRecord {
            id: plan.id.clone(),
            seed: plan.seed,
            edit,
            neighbor: world.triple(plan.subject, neighbor_rel),
            score,
            level,
            batch,
            constraints,
        });
    }
    Ok(out)
}

pub fn level_counts(records: &[FineKedRecord]) -> [(Level, usize); 3] {
    Level::ALL.map(|l| (l, records.iter().filter(|r| r.level == l).count()))
}

/// Edit with paraphrase templates and other-subject prompts that share the
/// edited relation and original object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterFactRecord {
    pub id: String,
    pub seed: u64,
    pub edit: EditRequest,
    pub edit_prompt: String,
    pub paraphrase_templates: Vec<usize>,
    pub paraphrase_prompts: Vec<String>,
    pub neighborhood: Vec<Triple>,
    pub neighborhood_prompts: Vec<String>,
}

pub fn build_counterfact_style(
    world: &World,
    plans: &[SubjectPlan],
    n_neighborhood: usize,
) -> Result<Vec<CounterFactRecord>> {
    if world.templates.len() < 3 {
        return Err(config_err(
            "counterfact records need two alternate templates per relation",
        ));
    }
    let mut out = Vec::new();
    for plan in plans {
        let edit = plan.edit(world, plan.edit_relation);
        let mut rng = rng_for(derive_seed(plan.seed, "counterfact"), &plan.id);
        let mut others: Vec<usize> = (0..world.subjects.len())
            .filter(|&s| s != edit.subject && world.triple(s, edit.relation).object == edit.object)
            .collect();
        if others.len() < 2 {
            info!("skipping {}: fewer than 2 subjects share (r, o)", plan.id);
            continue;
        }
        others.shuffle(&mut rng);
        others.truncate(n_neighborhood.max(2));
        others.sort_unstable();
        let neighborhood: Vec<Triple> = others.iter().map(|&s| world.triple(s, edit.relation)).collect();
        let paraphrase_templates = vec![1, 2];
        out.push(CounterFactRecord {
            id: plan.id.clone(),
            seed: plan.seed,
            edit,
            edit_prompt: world.render(edit.subject, edit.relation, 0, None),
            paraphrase_prompts: paraphrase_templates
                .iter()
                .map(|&t| world.render(edit.subject, edit.relation, t, None))
                .collect(),
            paraphrase_templates,
            neighborhood_prompts: neighborhood
                .iter()
                .map(|t| world.render(t.subject, t.relation, 0, None))
                .collect(),
            neighborhood,
        });
    }
    Ok(out)
}

/// Subject-consistent batch: the first `size` edits of a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectBatch {
    pub record_id: String,
    pub subject: usize,
    pub edits: Vec<EditRequest>,
    pub neighbor: Triple,
}

pub fn build_subject_batches(records: &[FineKedRecord], sizes: &[usize]) -> Result<Vec<(usize, Vec<SubjectBatch>)>> {
    sizes
        .iter()
        .map(|&size| {
            let batches = records
                .iter()
                .map(|r| {
                    if size == 0 || size > r.batch.len() {
                        return Err(config_err(format!(
                            "batch size {size} unavailable for {} (has {})",
                            r.id,
                            r.batch.len()
                        )));
                    }
                    Ok(SubjectBatch {
                        record_id: r.id.clone(),
                        subject: r.edit.subject,
                        edits: r.batch[..size].to_vec(),
                        neighbor: r.neighbor,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((size, batches))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_world, Taxonomy, WorldParams};

    fn world() -> World {
        gen_world(&WorldParams::default(), &Taxonomy::default_taxonomy()).unwrap()
    }

    #[test]
    fn records_respect_invariants() {
        let w = world();
        let plans = plan_subjects(&w, 3);
        let recs = build_fineked(&w, &plans, FineKedOptions::default(), |_| true).unwrap();
        assert_eq!(recs.len(), 64);
        for r in &recs {
            assert_eq!(r.neighbor.subject, r.edit.subject);
            assert_ne!(r.neighbor.relation, r.edit.relation);
            assert_ne!(r.edit.new_object, r.edit.object);
            assert!(w.relations[r.edit.relation].objects.contains(&r.edit.new_object));
            assert_eq!(r.batch[0], r.edit);
            assert_eq!(r.level, Level::from_score(r.score));
            assert!(r.batch.iter().all(|e| e.relation != r.neighbor.relation));
        }
        let total: usize = level_counts(&recs).iter().map(|c| c.1).sum();
        assert_eq!(total, recs.len());
    }

    #[test]
    fn unrecallable_subjects_are_skipped() {
        let w = world();
        let plans = plan_subjects(&w, 0);
        let recs = build_fineked(&w, &plans, FineKedOptions::default(), |t| t.subject != 5).unwrap();
        assert_eq!(recs.len(), 63);
    }

    #[test]
    fn counterfact_neighbours_avoid_edited_subject() {
        let w = world();
        let plans = plan_subjects(&w, 1);
        for r in build_counterfact_style(&w, &plans, 4).unwrap() {
            assert!(r.neighborhood.len() >= 2);
            let name = &w.subjects[r.edit.subject].name;
            for (t, p) in r.neighborhood.iter().zip(&r.neighborhood_prompts) {
                assert_ne!(t.subject, r.edit.subject);
                assert_eq!(t.object, r.edit.object);
                assert!(!p.split_whitespace().any(|x| x == name));
            }
            assert_ne!(r.paraphrase_prompts[0], r.edit_prompt);
            assert_ne!(r.paraphrase_prompts[1], r.paraphrase_prompts[0]);
        }
    }
}
