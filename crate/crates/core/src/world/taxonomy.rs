//! Relation categories and the 0–10 category-pair similarity table.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    pub relations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub categories: Vec<Category>,
    /// `scores[a][b]` is the similarity of categories `a` and `b`.
    pub scores: BTreeMap<String, BTreeMap<String, u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Easy,
    Middle,
    Hard,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Easy, Level::Middle, Level::Hard];

    /// Bands: 0–3 Easy, 4–6 Middle, 7–10 Hard.
    pub fn from_score(score: u8) -> Level {
        match score {
            0..=3 => Level::Easy,
            4..=6 => Level::Middle,
            _ => Level::Hard,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Easy => "Easy",
            Level::Middle => "Middle",
            Level::Hard => "Hard",
        }
    }
}

impl Taxonomy {
    /// Twelve relations over geography, politics, family and career.
    pub fn default_taxonomy() -> Self {
        let cat = |name: &str, rels: [&str; 3]| Category {
            name: name.into(),
            relations: rels.iter().map(|r| r.to_string()).collect(),
        };
        let categories = vec![
            cat("geography", ["birthplace", "residence", "citizenship"]),
            cat("politics", ["party", "ideology", "office"]),
            cat("family", ["spouse", "sibling", "mother"]),
            cat("career", ["employer", "occupation", "field"]),
        ];
        let table: [(&str, [u8; 4]); 4] = [
            ("geography", [8, 5, 2, 1]),
            ("politics", [5, 9, 3, 5]),
            ("family", [2, 3, 8, 4]),
            ("career", [1, 5, 4, 7]),
        ];
        let names = ["geography", "politics", "family", "career"];
        let scores = table
            .iter()
            .map(|(a, row)| {
                let inner = names.iter().zip(row).map(|(b, &s)| (b.to_string(), s)).collect();
                (a.to_string(), inner)
            })
            .collect();
        Self { categories, scores }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Taxonomy = toml::from_str(text).map_err(|e| config_err(format!("taxonomy: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("taxonomy serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 3 {
            return Err(config_err(format!(
                "taxonomy needs at least 3 categories, has {}",
                self.categories.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.relations.is_empty() {
                return Err(config_err(format!("category {} has no relations", c.name)));
            }
            for r in &c.relations {
                if r.is_empty() || r.contains(char::is_whitespace) {
                    return Err(config_err(format!("relation name {r:?} must be one word")));
                }
                if !seen.insert(r.as_str()) {
                    return Err(config_err(format!("relation {r} listed twice")));
                }
            }
        }
        let names: Vec<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        for key in self.scores.keys() {
            if !names.contains(&key.as_str()) {
                return Err(config_err(format!("score table names unknown category {key}")));
            }
        }
        for a in &names {
            for b in &names {
                let s = self.raw_score(a, b)?;
                if s > 10 {
                    return Err(config_err(format!("score ({a}, {b}) = {s} exceeds 10")));
                }
                let t = self.raw_score(b, a)?;
                if s != t {
                    return Err(config_err(format!("asymmetric scores for pair ({a}, {b}): {s} vs {t}")));
                }
            }
        }
        for a in &names {
            let own = self.raw_score(a, a)?;
            for b in &names {
                if a != b && self.raw_score(a, b)? > own {
                    return Err(config_err(format!(
                        "cross score ({a}, {b}) exceeds self score of {a} ({own})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn raw_score(&self, a: &str, b: &str) -> Result<u8> {
        self.scores
            .get(a)
            .and_then(|row| row.get(b))
            .copied()
            .ok_or_else(|| config_err(format!("missing score for pair ({a}, {b})")))
    }

    /// Similarity of two categories by index. Panics on an unvalidated table.
    pub fn score(&self, a: usize, b: usize) -> u8 {
        self.raw_score(&self.categories[a].name, &self.categories[b].name)
            .expect("validated taxonomy")
    }

    /// Relations interleaved across categories: first relation of every
    /// category, then the second of every category, and so on.
    pub fn interleaved_relations(&self) -> Vec<(String, usize)> {
        let depth = self.categories.iter().map(|c| c.relations.len()).max().unwrap_or(0);
        let mut out = Vec::new();
        for i in 0..depth {
            for (ci, c) in self.categories.iter().enumerate() {
                if let Some(r) = c.relations.get(i) {
                    out.push((r.clone(), ci));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let t = Taxonomy::default_taxonomy();
        t.validate().unwrap();
        assert_eq!(Taxonomy::from_toml(&t.to_toml()).unwrap(), t);
    }

    #[test]
    fn band_edges() {
        assert_eq!(Level::from_score(0), Level::Easy);
        assert_eq!(Level::from_score(3), Level::Easy);
        assert_eq!(Level::from_score(4), Level::Middle);
        assert_eq!(Level::from_score(6), Level::Middle);
        assert_eq!(Level::from_score(7), Level::Hard);
        assert_eq!(Level::from_score(10), Level::Hard);
    }

    #[test]
    fn asymmetry_names_the_pair() {
        let mut t = Taxonomy::default_taxonomy();
        t.scores.get_mut("family").unwrap().insert("career".into(), 2);
        let msg = t.validate().unwrap_err().to_string();
        assert!(msg.contains("family") && msg.contains("career"), "{msg}");
    }

    #[test]
    fn cross_above_self_rejected() {
        let mut t = Taxonomy::default_taxonomy();
        t.scores.get_mut("career").unwrap().insert("politics".into(), 8);
        t.scores.get_mut("politics").unwrap().insert("career".into(), 8);
        assert!(t.validate().is_err());
    }

    #[test]
    fn interleaving_spreads_categories() {
        let t = Taxonomy::default_taxonomy();
        let rels = t.interleaved_relations();
        assert_eq!(rels.len(), 12);
        let cats: Vec<usize> = rels.iter().take(4).map(|r| r.1).collect();
        assert_eq!(cats, vec![0, 1, 2, 3]);
    }
}
