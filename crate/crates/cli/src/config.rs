//! Run configuration: one TOML file, `--set` overrides, validation and the
//! hash stamped into every artifact.

use std::path::{Path, PathBuf};

use kedit_core::dke::{EditConfig, EditorKind};
use kedit_core::krd::KrdConfig;
use kedit_core::lm::{LmArch, LmTrainConfig};
use kedit_core::util::sha256_hex;
use kedit_core::world::WorldParams;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PipelineError, Result};

/// Environment variable that overrides `out_dir`.
pub const OUT_ENV: &str = "KEDIT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    /// Seed for parameter initialization; data order uses `train.seed`.
    pub init_seed: u64,
    pub arch: LmArch,
    pub train: LmTrainConfig,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            init_seed: 1,
            arch: LmArch::default(),
            train: LmTrainConfig::default(),
        }
    }
}

/// Stream layers read by the disentangler; the subject layer is also the
/// edit layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Layers {
    pub subject: usize,
    pub relation: usize,
}

impl Default for Layers {
    fn default() -> Self {
        Self {
            subject: 2,
            relation: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub editors: Vec<EditorKind>,
    /// Nested subject-batch sizes; the largest fixes each record's batch.
    pub batch_sizes: Vec<usize>,
    /// Records per seed; 0 keeps all.
    pub max_records: usize,
    /// Same-subject facts held fixed by the constrained baseline.
    pub n_constraints: usize,
    /// Other-subject prompts per CounterFact-style record.
    pub n_neighborhood: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            editors: EditorKind::ALL.to_vec(),
            batch_sizes: vec![1, 2, 4, 8],
            max_records: 0,
            n_constraints: 3,
            n_neighborhood: 2,
        }
    }
}

impl EvalSection {
    pub fn max_batch(&self) -> usize {
        self.batch_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn record_limit(&self) -> Option<usize> {
        (self.max_records > 0).then_some(self.max_records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Taxonomy TOML; the built-in one when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    pub world: WorldParams,
    pub lm: LmSection,
    pub layers: Layers,
    pub krd: KrdConfig,
    pub edit: EditConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            taxonomy: None,
            world: WorldParams::default(),
            lm: LmSection::default(),
            layers: Layers::default(),
            krd: KrdConfig::default(),
            edit: EditConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses a `--set` value as a TOML scalar or array, falling back to a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// File contents (or defaults), then overrides, then `KEDIT_OUT` and
    /// `out` in increasing precedence. Validated before returning.
    pub fn load(path: Option<&Path>, overrides: &[String], out: Option<&Path>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| PipelineError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("config: {e}")))?;
        if let Ok(dir) = std::env::var(OUT_ENV) {
            if !dir.is_empty() {
                cfg.out_dir = PathBuf::from(dir);
            }
        }
        if let Some(o) = out {
            cfg.out_dir = o.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.arch.validate()?;
        self.lm.train.validate()?;
        self.krd.validate()?;
        self.edit.validate()?;
        let l = self.layers;
        let n = self.lm.arch.n_layers;
        if l.subject == 0 || l.subject > n || l.relation == 0 || l.relation > n {
            return Err(invalid(format!(
                "layers must lie in 1..={n}, got subject {} relation {}",
                l.subject, l.relation
            )));
        }
        let e = &self.eval;
        if e.seeds.is_empty() || e.editors.is_empty() {
            return Err(invalid("eval.seeds and eval.editors must be nonempty"));
        }
        if e.batch_sizes.is_empty() || e.batch_sizes.windows(2).any(|w| w[0] >= w[1]) || e.batch_sizes[0] == 0 {
            return Err(invalid(format!(
                "eval.batch_sizes must be positive and strictly ascending, got {:?}",
                e.batch_sizes
            )));
        }
        if e.max_batch() + 1 > self.world.n_relations {
            return Err(invalid(format!(
                "a batch of {} plus a held-out neighbour needs more than {} relations",
                e.max_batch(),
                self.world.n_relations
            )));
        }
        Ok(())
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the effective configuration without `out_dir`, so runs
    /// that differ only in location share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }
}
