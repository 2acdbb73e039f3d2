//! Metrics and experiment protocols: argmax efficacy and relational
//! locality, probability-comparison scores, subject-consistent batch sweeps,
//! report tables and the disentangled-representation export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dke::{EditConfig, Editor, EditorKind, PreservationSet};
use crate::error::{config_err, data_err, IoContext, Result};
use crate::krd::{cosine_similarity, KrdState};
use crate::lm::TransformerLm;
use crate::world::{
    build_fineked, plan_subjects, CounterFactRecord, EditRequest, FineKedOptions, FineKedRecord, Level, Triple, World,
};

/// Argmax metrics resolve logit ties to the lowest token id.
pub const TIE_RULE: &str = "lowest token id";

/// Hit count over a number of trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: usize,
    pub total: usize,
}

impl Rate {
    pub fn of(bools: impl IntoIterator<Item = bool>) -> Self {
        let mut r = Rate::default();
        for b in bools {
            r.total += 1;
            r.hits += b as usize;
        }
        r
    }

    /// `None` when there were no trials.
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }

    fn merge(self, other: Rate) -> Rate {
        Rate {
            hits: self.hits + other.hits,
            total: self.total + other.total,
        }
    }
}

fn canonical_tokens(world: &World, t: &Triple) -> Vec<usize> {
    world.canonical_prompt(t.subject, t.relation).tokens
}

fn argmax_hits(model: &TransformerLm, world: &World, queries: &[(Triple, usize)]) -> Result<Vec<bool>> {
    let prompts: Vec<Vec<usize>> = queries.iter().map(|(t, _)| canonical_tokens(world, t)).collect();
    let refs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
    let preds = model.predict_many(&refs)?;
    Ok(preds.iter().zip(queries).map(|(p, (_, want))| p == want).collect())
}

/// `1[o* = argmax]` on the canonical prompt of each edit.
pub fn efficacy_hits(model: &TransformerLm, world: &World, edits: &[EditRequest]) -> Result<Vec<bool>> {
    let queries: Vec<(Triple, usize)> = edits.iter().map(|e| (e.base(), e.new_object)).collect();
    argmax_hits(model, world, &queries)
}

pub fn efficacy_argmax(model: &TransformerLm, world: &World, edits: &[EditRequest]) -> Result<f64> {
    Rate::of(efficacy_hits(model, world, edits)?)
        .value()
        .ok_or_else(|| config_err("efficacy needs at least one edit"))
}

/// `1[o' = argmax]` on each record's neighbour prompt.
pub fn locality_hits(model: &TransformerLm, world: &World, neighbors: &[Triple]) -> Result<Vec<bool>> {
    let queries: Vec<(Triple, usize)> = neighbors.iter().map(|t| (*t, t.object)).collect();
    argmax_hits(model, world, &queries)
}

/// Rates per level plus the overall rate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelRates {
    pub overall: Rate,
    pub by_level: [(Level, Rate); 3],
}

impl LevelRates {
    pub fn from_hits(levels: &[Level], hits: &[bool]) -> Self {
        let by_level = Level::ALL.map(|l| {
            let r = Rate::of(levels.iter().zip(hits).filter(|(x, _)| **x == l).map(|(_, h)| *h));
            (l, r)
        });
        Self {
            overall: Rate::of(hits.iter().copied()),
            by_level,
        }
    }

    pub fn level(&self, level: Level) -> Rate {
        self.by_level
            .iter()
            .find(|(l, _)| *l == level)
            .map(|x| x.1)
            .unwrap_or_default()
    }
}

pub fn relational_locality(model: &TransformerLm, world: &World, records: &[FineKedRecord]) -> Result<LevelRates> {
    let neighbors: Vec<Triple> = records.iter().map(|r| r.neighbor).collect();
    let levels: Vec<Level> = records.iter().map(|r| r.level).collect();
    Ok(LevelRates::from_hits(
        &levels,
        &locality_hits(model, world, &neighbors)?,
    ))
}

/// Per-record booleans for one editor, seed and batch size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub level: Level,
    pub efficacy: Vec<bool>,
    pub locality: bool,
}

/// Scores a record on the model edited with `edits` (a prefix of its batch).
pub fn score_record(
    edited: &TransformerLm,
    world: &World,
    record: &FineKedRecord,
    edits: &[EditRequest],
) -> Result<RecordOutcome> {
    let mut queries: Vec<(Triple, usize)> = edits.iter().map(|e| (e.base(), e.new_object)).collect();
    queries.push((record.neighbor, record.neighbor.object));
    let mut hits = argmax_hits(edited, world, &queries)?;
    let locality = hits.pop().unwrap_or(false);
    Ok(RecordOutcome {
        id: record.id.clone(),
        level: record.level,
        efficacy: hits,
        locality,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub editor: String,
    pub seed: u64,
    pub batch_size: usize,
    pub tie_rule: String,
    pub records: Vec<RecordOutcome>,
    /// Over every edit of every record.
    pub efficacy: Rate,
    pub efficacy_by_level: [(Level, Rate); 3],
    pub locality: LevelRates,
}

impl MetricReport {
    pub fn from_outcomes(editor: &str, seed: u64, batch_size: usize, records: Vec<RecordOutcome>) -> Self {
        let efficacy_by_level = Level::ALL.map(|l| {
            let r = records.iter().filter(|r| r.level == l).fold(Rate::default(), |acc, r| {
                acc.merge(Rate::of(r.efficacy.iter().copied()))
            });
            (l, r)
        });
        let efficacy = efficacy_by_level.iter().fold(Rate::default(), |acc, x| acc.merge(x.1));
        let levels: Vec<Level> = records.iter().map(|r| r.level).collect();
        let hits: Vec<bool> = records.iter().map(|r| r.locality).collect();
        Self {
            editor: editor.to_string(),
            seed,
            batch_size,
            tie_rule: TIE_RULE.to_string(),
            locality: LevelRates::from_hits(&levels, &hits),
            records,
            efficacy,
            efficacy_by_level,
        }
    }

    /// True when every aggregate re-derives from the per-record booleans.
    pub fn is_consistent(&self) -> bool {
        let again = Self::from_outcomes(&self.editor, self.seed, self.batch_size, self.records.clone());
        again == *self
    }
}

// ------------------------------------------------- probability comparison

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterFactOutcome {
    pub id: String,
    pub efficacy: bool,
    pub paraphrase: Vec<bool>,
    pub neighborhood: Vec<bool>,
}

/// Softmax is monotone, so `P(a) > P(b)` is decided on logits, which keeps
/// the comparison exact where both probabilities underflow.
pub fn score_counterfact(
    model: &TransformerLm,
    world: &World,
    record: &CounterFactRecord,
) -> Result<CounterFactOutcome> {
    let e = &record.edit;
    let mut prompts = vec![world.canonical_prompt(e.subject, e.relation).tokens];
    prompts.extend(
        record
            .paraphrase_templates
            .iter()
            .map(|&t| world.prompt(e.subject, e.relation, t, None).tokens),
    );
    prompts.extend(record.neighborhood.iter().map(|t| canonical_tokens(world, t)));
    let refs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
    let logits = model.last_logits_many(&refs)?;
    let prefers_new = |l: &Vec<f64>| l[e.new_object] > l[e.object];
    let n_para = record.paraphrase_templates.len();
    Ok(CounterFactOutcome {
        id: record.id.clone(),
        efficacy: prefers_new(&logits[0]),
        paraphrase: logits[1..1 + n_para].iter().map(prefers_new).collect(),
        neighborhood: logits[1 + n_para..]
            .iter()
            .map(|l| l[e.new_object] < l[e.object])
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterFactScores {
    pub efficacy: Rate,
    pub paraphrase: Rate,
    pub neighborhood: Rate,
}

impl CounterFactScores {
    pub fn from_outcomes(outcomes: &[CounterFactOutcome]) -> Self {
        Self {
            efficacy: Rate::of(outcomes.iter().map(|o| o.efficacy)),
            paraphrase: Rate::of(outcomes.iter().flat_map(|o| o.paraphrase.iter().copied())),
            neighborhood: Rate::of(outcomes.iter().flat_map(|o| o.neighborhood.iter().copied())),
        }
    }

    /// Harmonic mean of the three rates; `None` if any is zero or empty.
    pub fn harmonic(&self) -> Option<f64> {
        let xs = [
            self.efficacy.value()?,
            self.paraphrase.value()?,
            self.neighborhood.value()?,
        ];
        harmonic_mean(&xs).ok()
    }
}

/// All records scored on one model.
pub fn prob_comparison_scores(
    model: &TransformerLm,
    world: &World,
    records: &[CounterFactRecord],
) -> Result<CounterFactScores> {
    let outcomes = records
        .iter()
        .map(|r| score_counterfact(model, world, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CounterFactScores::from_outcomes(&outcomes))
}

/// `n / Σ 1/x`.
pub fn harmonic_mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(config_err(format!(
            "harmonic mean needs positive finite scores, got {scores:?}"
        )));
    }
    Ok(scores.len() as f64 / scores.iter().map(|x| 1.0 / x).sum::<f64>())
}

/// Efficacy, paraphrase and neighborhood scores with their harmonic mean,
/// one row per editor.
pub fn counterfact_table(rows: &[(String, CounterFactScores)]) -> String {
    let pct = |r: Rate| {
        r.value()
            .map(|x| format!("{:.1}", 100.0 * x))
            .unwrap_or_else(|| "-".into())
    };
    let mut s = String::from("| Editor | Efficacy | Paraphrase | Neighborhood | Avg |\n|---|---|---|---|---|\n");
    for (name, sc) in rows {
        let avg = sc
            .harmonic()
            .map(|x| format!("{:.1}", 100.0 * x))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | {avg} |",
            pct(sc.efficacy),
            pct(sc.paraphrase),
            pct(sc.neighborhood)
        );
    }
    s
}

// ------------------------------------------------------------ sweeps

/// Fixed inputs shared by every sweep cell.
#[derive(Debug, Clone)]
pub struct EvalContext<'a> {
    pub model: &'a TransformerLm,
    pub world: &'a World,
    pub krd: &'a KrdState,
    pub preservation: &'a PreservationSet,
    pub edit: &'a EditConfig,
    pub fineked: FineKedOptions,
    /// Truncates each seed's record list.
    pub max_records: Option<usize>,
    pub zero_w3: bool,
}

impl EvalContext<'_> {
    /// FINE-KED records for `seed`, filtered by base-model recall.
    pub fn records(&self, seed: u64) -> Result<Vec<FineKedRecord>> {
        let neighbors: Vec<Triple> = self.world.triples_in(crate::world::Split::Eval);
        let hits = locality_hits(self.model, self.world, &neighbors)?;
        let recalled: BTreeMap<(usize, usize), bool> = neighbors
            .iter()
            .zip(hits)
            .map(|(t, h)| ((t.subject, t.relation), h))
            .collect();
        let plans = plan_subjects(self.world, seed);
        let mut recs = build_fineked(self.world, &plans, self.fineked, |t| recalled[&(t.subject, t.relation)])?;
        if let Some(n) = self.max_records {
            recs.truncate(n);
        }
        Ok(recs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub editor: EditorKind,
    pub batch_size: usize,
    pub seed: u64,
    pub n_records: usize,
    pub efficacy: f64,
    pub locality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<MetricReport>,
}

/// Mean with min and max across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Option<Spread> {
        if xs.is_empty() {
            return None;
        }
        Some(Spread {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

impl SweepReport {
    /// Summary rows derived from per-cell reports.
    pub fn from_reports(reports: Vec<MetricReport>) -> Result<Self> {
        let rows = reports
            .iter()
            .map(|rep| {
                Ok(SweepRow {
                    editor: rep.editor.parse()?,
                    batch_size: rep.batch_size,
                    seed: rep.seed,
                    n_records: rep.records.len(),
                    efficacy: rep.efficacy.value().unwrap_or(0.0),
                    locality: rep.locality.overall.value().unwrap_or(0.0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, reports })
    }

    pub fn row(&self, editor: EditorKind, batch_size: usize, seed: u64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.editor == editor && r.batch_size == batch_size && r.seed == seed)
    }

    /// `(efficacy, locality)` across seeds for one cell.
    pub fn spread(&self, editor: EditorKind, batch_size: usize) -> Option<(Spread, Spread)> {
        let cell: Vec<&SweepRow> = self
            .rows
            .iter()
            .filter(|r| r.editor == editor && r.batch_size == batch_size)
            .collect();
        let eff: Vec<f64> = cell.iter().map(|r| r.efficacy).collect();
        let loc: Vec<f64> = cell.iter().map(|r| r.locality).collect();
        Some((Spread::of(&eff)?, Spread::of(&loc)?))
    }

    fn editors(&self) -> Vec<EditorKind> {
        let mut out: Vec<EditorKind> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.editor) {
                out.push(r.editor);
            }
        }
        out
    }

    fn sizes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.rows.iter().map(|r| r.batch_size).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Efficacy and locality per editor and batch size, mean [min, max].
    pub fn batch_table(&self) -> String {
        let mut s = String::from("| Editor | Batch | Efficacy | Relational Locality |\n|---|---|---|---|\n");
        for ed in self.editors() {
            for n in self.sizes() {
                if let Some((e, l)) = self.spread(ed, n) {
                    let _ = writeln!(s, "| {ed} | {n} | {} | {} |", fmt_spread(&e), fmt_spread(&l));
                }
            }
        }
        s
    }

    /// Single-edit table: efficacy, then locality per level and overall,
    /// each averaged over seeds.
    pub fn level_table(&self, batch_size: usize) -> String {
        let mut s = String::from("| Editor | Efficacy | Easy | Middle | Hard | Avg |\n|---|---|---|---|---|---|\n");
        for ed in self.editors() {
            let reps: Vec<&MetricReport> = self
                .reports
                .iter()
                .filter(|r| r.editor == ed.name() && r.batch_size == batch_size)
                .collect();
            if reps.is_empty() {
                continue;
            }
            let avg = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
                let xs: Vec<f64> = reps.iter().filter_map(|r| f(r)).collect();
                Spread::of(&xs)
                    .map(|x| format!("{:.1}", 100.0 * x.mean))
                    .unwrap_or_else(|| "-".into())
            };
            let _ = writeln!(
                s,
                "| {ed} | {} | {} | {} | {} | {} |",
                avg(&|r| r.efficacy.value()),
                avg(&|r| r.locality.level(Level::Easy).value()),
                avg(&|r| r.locality.level(Level::Middle).value()),
                avg(&|r| r.locality.level(Level::Hard).value()),
                avg(&|r| r.locality.overall.value()),
            );
        }
        s
    }
}

fn fmt_spread(x: &Spread) -> String {
    format!("{:.1} [{:.1}, {:.1}]", 100.0 * x.mean, 100.0 * x.min, 100.0 * x.max)
}

/// Runs every editor on every seed's records with nested subject batches.
/// `progress` is called after each (seed, editor) cell.
pub fn run_batch_sweep(
    ctx: &EvalContext<'_>,
    editors: &[EditorKind],
    sizes: &[usize],
    seeds: &[u64],
    mut progress: impl FnMut(u64, EditorKind, &[MetricReport]),
) -> Result<SweepReport> {
    if editors.is_empty() || sizes.is_empty() || seeds.is_empty() {
        return Err(config_err("a sweep needs at least one editor, batch size and seed"));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut reports = Vec::new();
    for &seed in seeds {
        let records = ctx.records(seed)?;
        if records.is_empty() {
            return Err(data_err(format!("seed {seed} produced no records")));
        }
        for &kind in editors {
            let editor = Editor::new(kind, ctx.edit, ctx.krd, ctx.preservation, ctx.zero_w3)?;
            let mut outcomes: Vec<Vec<RecordOutcome>> = vec![Vec::new(); sorted.len()];
            for rec in &records {
                let nested = editor.apply_nested(ctx.model, ctx.world, &rec.batch, &rec.constraints, &sorted)?;
                for (i, (n, edited, _, _)) in nested.iter().enumerate() {
                    outcomes[i].push(score_record(edited, ctx.world, rec, &rec.batch[..*n])?);
                }
            }
            let cell: Vec<MetricReport> = sorted
                .iter()
                .zip(outcomes)
                .map(|(&n, o)| MetricReport::from_outcomes(kind.name(), seed, n, o))
                .collect();
            progress(seed, kind, &cell);
            reports.extend(cell);
        }
    }
    SweepReport::from_reports(reports)
}

// ------------------------------------------------------------ CSV dumps

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub editor: String,
    pub seed: u64,
    pub batch_size: usize,
    pub record: String,
    pub level: Level,
    /// `efficacy` or `locality`.
    pub metric: String,
    pub index: usize,
    pub hit: bool,
}

pub fn outcome_rows(report: &MetricReport) -> Vec<OutcomeRow> {
    let mut out = Vec::new();
    for r in &report.records {
        let row = |metric: &str, index, hit| OutcomeRow {
            editor: report.editor.clone(),
            seed: report.seed,
            batch_size: report.batch_size,
            record: r.id.clone(),
            level: r.level,
            metric: metric.to_string(),
            index,
            hit,
        };
        out.extend(r.efficacy.iter().enumerate().map(|(i, &h)| row("efficacy", i, h)));
        out.push(row("locality", 0, r.locality));
    }
    out
}

pub fn write_outcomes_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for rep in reports {
        for row in outcome_rows(rep) {
            w.serialize(row)?;
        }
    }
    w.flush().at(path)?;
    Ok(())
}

/// Rebuilds metric reports from a per-record CSV dump.
pub fn read_outcomes_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(File::open(path).at(path)?);
    let mut cells: BTreeMap<(String, u64, usize), Vec<RecordOutcome>> = BTreeMap::new();
    let mut order: Vec<(String, u64, usize)> = Vec::new();
    for row in r.deserialize::<OutcomeRow>() {
        let row = row?;
        let key = (row.editor.clone(), row.seed, row.batch_size);
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        let recs = cells.entry(key).or_default();
        if recs.last().is_none_or(|x| x.id != row.record) {
            recs.push(RecordOutcome {
                id: row.record.clone(),
                level: row.level,
                efficacy: Vec::new(),
                locality: false,
            });
        }
        let rec = recs.last_mut().expect("pushed above");
        match row.metric.as_str() {
            "efficacy" => rec.efficacy.push(row.hit),
            "locality" => rec.locality = row.hit,
            other => return Err(data_err(format!("unknown metric {other:?} in {}", path.display()))),
        }
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let recs = cells.remove(&k).unwrap_or_default();
            MetricReport::from_outcomes(&k.0, k.1, k.2, recs)
        })
        .collect())
}

// ------------------------------------------------- representation export

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Related,
    Unrelated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepRow {
    pub record: String,
    pub component: Component,
    pub values: Vec<f64>,
}

/// `(z_r, z_u)` of each record's edit prompt, one CSV row per component.
/// Values are written in shortest round-trip form.
pub fn export_disentangled_reps(
    krd: &KrdState,
    model: &TransformerLm,
    world: &World,
    records: &[FineKedRecord],
    path: &Path,
) -> Result<usize> {
    let file = File::create(path).at(path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let d = krd.width();
    let mut header = vec!["record".to_string(), "component".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for rec in records {
        let p = world.canonical_prompt(rec.edit.subject, rec.edit.relation);
        let (h_s, h_r) = model.extract_reps(&p, krd.subject_layer, krd.relation_layer)?;
        let pair = krd.disentangle(&h_s, &h_r)?;
        for (tag, z) in [("related", &pair.z_r), ("unrelated", &pair.z_u)] {
            let mut row = vec![rec.id.clone(), tag.to_string()];
            row.extend(z.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().at(path)?;
    Ok(2 * records.len())
}

pub fn read_disentangled_reps(path: &Path) -> Result<Vec<RepRow>> {
    let mut text = String::new();
    File::open(path).at(path)?.read_to_string(&mut text).at(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let component = match rec.get(1) {
            Some("related") => Component::Related,
            Some("unrelated") => Component::Unrelated,
            other => return Err(data_err(format!("bad component {other:?} in {}", path.display()))),
        };
        let values = rec
            .iter()
            .skip(2)
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|e| data_err(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(RepRow {
            record: rec.get(0).unwrap_or_default().to_string(),
            component,
            values,
        });
    }
    Ok(out)
}

/// Mean `cos(z_r, z_u)` over consecutive related/unrelated row pairs.
pub fn mean_cosine_from_rows(rows: &[RepRow]) -> Result<f64> {
    if rows.is_empty() || !rows.len().is_multiple_of(2) {
        return Err(data_err("representation rows must come in related/unrelated pairs"));
    }
    let mut total = 0.0;
    for pair in rows.chunks(2) {
        if pair[0].component != Component::Related
            || pair[1].component != Component::Unrelated
            || pair[0].record != pair[1].record
        {
            return Err(data_err(format!("unpaired representation rows for {}", pair[0].record)));
        }
        total += cosine_similarity(&pair[0].values, &pair[1].values);
    }
    Ok(total / (rows.len() / 2) as f64)
}
