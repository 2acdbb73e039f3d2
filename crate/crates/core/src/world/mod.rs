//! Synthetic knowledge graph: subjects, functional relations grouped into a
//! taxonomy, per-category object pools, prompt templates, and the evaluation
//! datasets derived from them.

mod datasets;
mod taxonomy;
mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use datasets::*;
pub use taxonomy::{Category, Level, Taxonomy};
pub use vocab::Vocab;

use crate::error::{config_err, data_err, IoContext, Result};
use crate::util::{rng_for, sha256_hex};

pub const SCHEMA_VERSION: u32 = 1;

/// Surface templates. The first is canonical and opens on the subject; the
/// others serve as paraphrases. The second ends on the subject token.
pub const TEMPLATES: [&str; 3] = ["{subj} 's {rel} is", "{rel} of {subj}", "{subj} , whose {rel} is"];

/// Neutral prefixes for key averaging; the bare prompt is the fifth option.
pub const PREFIXES: [&str; 4] = ["so", "well ,", "note that", "in fact ,"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub seed: u64,
    /// Subjects used for evaluation and editing.
    pub n_subjects: usize,
    /// Disjoint subjects whose facts train the disentangler.
    pub n_krd_subjects: usize,
    pub n_relations: usize,
    pub n_objects_per_relation: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            seed: 1234,
            n_subjects: 64,
            n_krd_subjects: 32,
            n_relations: 12,
            n_objects_per_relation: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Eval,
    Krd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub token: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub category: usize,
    pub token: usize,
    /// Object pool; relations of one category share it.
    pub objects: Vec<usize>,
}

/// Fact `(s, r, o)`; `subject` and `relation` index the world tables and
/// `object` is a token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// Tokenized prompt with its subject span `[subject_start, subject_end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub subject_start: usize,
    pub subject_end: usize,
}

impl Prompt {
    /// Position of the last subject token.
    pub fn subject_pos(&self) -> usize {
        self.subject_end - 1
    }

    pub fn last_pos(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub params: WorldParams,
    pub taxonomy: Taxonomy,
    pub vocab: Vocab,
    pub relations: Vec<Relation>,
    pub subjects: Vec<Subject>,
    /// Row-major by subject then relation.
    pub triples: Vec<Triple>,
    pub templates: Vec<String>,
    pub prefixes: Vec<String>,
}

pub fn gen_world(params: &WorldParams, taxonomy: &Taxonomy) -> Result<World> {
    taxonomy.validate()?;
    if params.n_subjects == 0 {
        return Err(config_err("n_subjects must be at least 1"));
    }
    if params.n_relations < 10 {
        return Err(config_err(format!(
            "n_relations = {} cannot give every subject 10 facts (batch of 8 + edit + neighbour)",
            params.n_relations
        )));
    }
    if params.n_objects_per_relation < 2 {
        return Err(config_err(
            "each relation needs at least 2 objects so that o* != o is possible",
        ));
    }
    let available = taxonomy.interleaved_relations();
    if params.n_relations > available.len() {
        return Err(config_err(format!(
            "n_relations = {} but the taxonomy defines only {}",
            params.n_relations,
            available.len()
        )));
    }
    let chosen = &available[..params.n_relations];
    let mut used_categories: Vec<usize> = chosen.iter().map(|r| r.1).collect();
    used_categories.sort_unstable();
    used_categories.dedup();
    if used_categories.len() < 3 {
        return Err(config_err("selected relations span fewer than 3 categories"));
    }

    let mut vocab = Vocab::new();
    for t in TEMPLATES.iter().chain(PREFIXES.iter()) {
        for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
            vocab.intern(w);
        }
    }
    let mut pools = vec![Vec::new(); taxonomy.categories.len()];
    for &c in &used_categories {
        let name = &taxonomy.categories[c].name;
        pools[c] = (0..params.n_objects_per_relation)
            .map(|k| vocab.intern(&format!("{name}_{k:02}")))
            .collect();
    }
    let relations: Vec<Relation> = chosen
        .iter()
        .map(|(name, c)| Relation {
            name: name.clone(),
            category: *c,
            token: vocab.intern(name),
            objects: pools[*c].clone(),
        })
        .collect();
    let total = params.n_subjects + params.n_krd_subjects;
    let subjects: Vec<Subject> = (0..total)
        .map(|i| {
            let name = format!("ent_{i:03}");
            Subject {
                token: vocab.intern(&name),
                name,
                split: if i < params.n_subjects { Split::Eval } else { Split::Krd },
            }
        })
        .collect();

    let mut rng = rng_for(params.seed, "world.objects");
    let mut triples = Vec::with_capacity(total * relations.len());
    for s in 0..total {
        for (r, rel) in relations.iter().enumerate() {
            let object = rel.objects[rng.random_range(0..rel.objects.len())];
            triples.push(Triple {
                subject: s,
                relation: r,
                object,
            });
        }
    }
    Ok(World {
        params: params.clone(),
        taxonomy: taxonomy.clone(),
        vocab,
        relations,
        subjects,
        triples,
        templates: TEMPLATES.iter().map(|s| s.to_string()).collect(),
        prefixes: PREFIXES.iter().map(|s| s.to_string()).collect(),
    })
}

impl World {
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triple(&self, subject: usize, relation: usize) -> Triple {
        self.triples[subject * self.relations.len() + relation]
    }

    pub fn subjects_in(&self, split: Split) -> Vec<usize> {
        (0..self.subjects.len())
            .filter(|&i| self.subjects[i].split == split)
            .collect()
    }

    pub fn triples_in(&self, split: Split) -> Vec<Triple> {
        self.triples
            .iter()
            .copied()
            .filter(|t| self.subjects[t.subject].split == split)
            .collect()
    }

    /// Similarity score and level between two relations.
    pub fn relation_similarity(&self, a: usize, b: usize) -> (u8, Level) {
        let s = self
            .taxonomy
            .score(self.relations[a].category, self.relations[b].category);
        (s, Level::from_score(s))
    }

    pub fn render(&self, subject: usize, relation: usize, template: usize, prefix: Option<usize>) -> String {
        let body = self.templates[template]
            .replace("{rel}", &self.relations[relation].name)
            .replace("{subj}", &self.subjects[subject].name);
        match prefix {
            Some(p) => format!("{} {body}", self.prefixes[p]),
            None => body,
        }
    }

    /// Tokenized prompt for `(s, r)` in a template, optionally prefixed.
    pub fn prompt(&self, subject: usize, relation: usize, template: usize, prefix: Option<usize>) -> Prompt {
        let text = self.render(subject, relation, template, prefix);
        let tokens = self
            .vocab
            .encode(&text)
            .expect("generated prompts use vocabulary words");
        let subj = self.subjects[subject].token;
        let pos = tokens
            .iter()
            .position(|&t| t == subj)
            .expect("template has a subject slot");
        Prompt {
            tokens,
            subject_start: pos,
            subject_end: pos + 1,
        }
    }

    pub fn canonical_prompt(&self, subject: usize, relation: usize) -> Prompt {
        self.prompt(subject, relation, 0, None)
    }

    /// Identifier of the world contents, stamped into downstream artifacts.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        sha256_hex(&buf)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = WorldLine::Header(WorldHeader {
            schema: SCHEMA_VERSION,
            params: self.params.clone(),
            templates: self.templates.clone(),
            prefixes: self.prefixes.clone(),
            vocab: self.vocab.clone(),
            relations: self.relations.clone(),
            subjects: self.subjects.clone(),
        });
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(|e| data_err(e.to_string()))?;
        for t in &self.triples {
            let line = WorldLine::Triple(TripleLine {
                schema: SCHEMA_VERSION,
                subject: self.subjects[t.subject].name.clone(),
                relation: self.relations[t.relation].name.clone(),
                object: self.vocab.word(t.object).to_string(),
                prompt: self.render(t.subject, t.relation, 0, None),
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| data_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).at(path)?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().at(path)
    }

    /// Reads `world.jsonl`; the taxonomy comes from its own file.
    pub fn load(path: &Path, taxonomy: Taxonomy) -> Result<World> {
        let f = fs::File::open(path).at(path)?;
        let mut header: Option<WorldHeader> = None;
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<WorldLine>(&line)
                .map_err(|e| data_err(format!("{}:{}: {e}", path.display(), i + 1)))?
            {
                WorldLine::Header(h) => header = Some(h),
                WorldLine::Triple(t) => lines.push(t),
            }
        }
        let h = header.ok_or_else(|| data_err(format!("{}: missing header line", path.display())))?;
        if h.schema != SCHEMA_VERSION {
            return Err(data_err(format!("unsupported world schema {}", h.schema)));
        }
        for r in &h.relations {
            let cat = taxonomy
                .categories
                .get(r.category)
                .ok_or_else(|| data_err(format!("relation {} has unknown category", r.name)))?;
            if !cat.relations.contains(&r.name) {
                return Err(data_err(format!(
                    "relation {} is not in category {} of the taxonomy",
                    r.name, cat.name
                )));
            }
        }
        let n_rel = h.relations.len();
        let mut triples = vec![None; h.subjects.len() * n_rel];
        for t in lines {
            let s = h
                .subjects
                .iter()
                .position(|x| x.name == t.subject)
                .ok_or_else(|| data_err(format!("unknown subject {}", t.subject)))?;
            let r = h
                .relations
                .iter()
                .position(|x| x.name == t.relation)
                .ok_or_else(|| data_err(format!("unknown relation {}", t.relation)))?;
            let o = h
                .vocab
                .id(&t.object)
                .filter(|o| h.relations[r].objects.contains(o))
                .ok_or_else(|| data_err(format!("object {} not in the pool of {}", t.object, t.relation)))?;
            if triples[s * n_rel + r].is_some() {
                return Err(data_err(format!("duplicate fact ({}, {})", t.subject, t.relation)));
            }
            triples[s * n_rel + r] = Some(Triple {
                subject: s,
                relation: r,
                object: o,
            });
        }
        let triples = triples
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or_else(|| data_err(format!("missing fact for subject {} relation {}", i / n_rel, i % n_rel)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(World {
            params: h.params,
            taxonomy,
            vocab: h.vocab,
            relations: h.relations,
            subjects: h.subjects,
            triples,
            templates: h.templates,
            prefixes: h.prefixes,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorldLine {
    Header(WorldHeader),
    Triple(TripleLine),
}

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    schema: u32,
    params: WorldParams,
    templates: Vec<String>,
    prefixes: Vec<String>,
    vocab: Vocab,
    relations: Vec<Relation>,
    subjects: Vec<Subject>,
}

#[derive(Serialize, Deserialize)]
struct TripleLine {
    schema: u32,
    subject: String,
    relation: String,
    object: String,
    prompt: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        gen_world(&WorldParams::default(), &Taxonomy::default_taxonomy()).unwrap()
    }

    #[test]
    fn deterministic() {
        assert_eq!(world(), world());
    }

    #[test]
    fn default_world_shape() {
        let w = world();
        assert_eq!(w.subjects.len(), 96);
        assert_eq!(w.triples.len(), 96 * 12);
        let mut pairs: Vec<(usize, usize)> = w.triples.iter().map(|t| (t.subject, t.relation)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), w.triples.len());
        for t in &w.triples {
            assert!(w.relations[t.relation].objects.contains(&t.object));
        }
    }

    #[test]
    fn too_few_relations_is_config_error() {
        let p = WorldParams {
            n_relations: 9,
            ..Default::default()
        };
        assert!(matches!(
            gen_world(&p, &Taxonomy::default_taxonomy()),
            Err(crate::error::CoreError::Config(_))
        ));
    }

    #[test]
    fn subject_final_template() {
        let w = world();
        let p = w.prompt(0, 0, 1, None);
        assert_eq!(p.subject_pos(), p.last_pos());
        let p = w.prompt(0, 0, 2, Some(1));
        assert_eq!(p.subject_pos(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let w = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.jsonl");
        w.save(&path).unwrap();
        assert_eq!(World::load(&path, w.taxonomy.clone()).unwrap(), w);
    }
}
