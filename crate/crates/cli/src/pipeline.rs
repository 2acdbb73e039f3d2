//! The five pipeline commands. Each reads its inputs from the output
//! directory, checks they belong together, and writes its artifacts plus a
//! manifest carrying the config hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kedit_core::dke::{
    corpus_prompts, estimate_covariance, EditOrder, EditReport, Editor, EditorKind, PreservationSet, RankOneUpdate,
};
use kedit_core::eval::{
    counterfact_table, export_disentangled_reps, mean_cosine_from_rows, read_disentangled_reps, score_counterfact,
    score_record, write_outcomes_csv, CounterFactOutcome, CounterFactScores, EvalContext, MetricReport, Spread,
    SweepReport,
};
use kedit_core::krd::{mean_component_cosine, mean_recon_residual, train_krd_resume, KrdState, KrdTrainState};
use kedit_core::lm::{train_lm_resume, EpochStat, LmArch, LmTrainState, TransformerLm};
use kedit_core::numerics::io::{load_tensors, save_tensors};
use kedit_core::numerics::{AdamW, Tensor};
use kedit_core::util::sha256_hex;
use kedit_core::world::{
    build_counterfact_style, gen_world, plan_subjects, CounterFactRecord, FineKedOptions, FineKedRecord, Level,
    SubjectPlan, Taxonomy, World, SCHEMA_VERSION,
};
use kedit_core::CoreError;
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{invalid, PipelineError, Result};

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn records(&self, seed: u64) -> PathBuf {
        self.root.join("records").join(format!("seed{seed}.jsonl"))
    }

    pub fn edit_dir(&self, kind: EditorKind) -> PathBuf {
        self.root.join("edits").join(kind.name())
    }

    pub fn snapshot(&self, kind: EditorKind, seed: u64) -> PathBuf {
        self.edit_dir(kind).join(format!("seed{seed}.kedt"))
    }

    pub fn edit_reports(&self, kind: EditorKind, seed: u64) -> PathBuf {
        self.edit_dir(kind).join(format!("seed{seed}.jsonl"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub const WORLD: &str = "world.jsonl";
pub const TAXONOMY: &str = "taxonomy.toml";
pub const PLANS: &str = "plans.jsonl";
pub const COUNTERFACT: &str = "counterfact.jsonl";
pub const LM: &str = "lm.kedt";
pub const LM_META: &str = "lm.json";
pub const LM_OPT: &str = "lm_optimizer.kedt";
pub const LM_CURVE: &str = "lm_curve.csv";
pub const KRD: &str = "krd.kedt";
pub const KRD_META: &str = "krd.json";
pub const KRD_OPT: &str = "krd_optimizer.kedt";
pub const KRD_CURVE: &str = "krd_curve.csv";

// ------------------------------------------------------------ file helpers

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing {
            path: path.display().to_string(),
            hint: hint.to_string(),
        })
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    require(path, hint)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())).into())
}

/// One dataset record per line, tagged with the schema version.
#[derive(Serialize, Deserialize)]
struct Line<T> {
    schema: u32,
    #[serde(flatten)]
    record: T,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(
            &mut w,
            &Line {
                schema: SCHEMA_VERSION,
                record: item,
            },
        )
        .map_err(CoreError::from)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<Vec<T>> {
    require(path, hint)?;
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line<T> =
            serde_json::from_str(&line).map_err(|e| CoreError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if l.schema != SCHEMA_VERSION {
            return Err(
                CoreError::Data(format!("{}:{}: schema {} unsupported", path.display(), i + 1, l.schema)).into(),
            );
        }
        out.push(l.record);
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    for r in rows {
        w.serialize(r).map_err(CoreError::from)?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    csv::Reader::from_reader(f)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| CoreError::from(e).into())
}

fn save_named(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    ensure_parent(path)?;
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    save_tensors(path, &refs)?;
    Ok(())
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Artifacts of one command with their SHA-256 and the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub files: BTreeMap<String, String>,
}

fn write_manifest(paths: &Paths, cfg: &RunConfig, command: &str, files: &[PathBuf]) -> Result<()> {
    let mut map = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(&paths.root).unwrap_or(f).display().to_string();
        map.insert(rel, file_hash(f)?);
    }
    let m = Manifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        files: map,
    };
    write_json(&paths.file(&format!("manifest-{command}.json")), &m)?;
    write_bytes(&paths.file("config.toml"), cfg.to_toml().as_bytes())
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(invalid(format!(
            "{} exists; pass --force to overwrite or --resume to continue",
            path.display()
        )));
    }
    Ok(())
}

// ------------------------------------------------------------ loaders

pub fn load_taxonomy(cfg: &RunConfig) -> Result<Taxonomy> {
    match &cfg.taxonomy {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok(Taxonomy::from_toml(&text)?)
        }
        None => Ok(Taxonomy::default_taxonomy()),
    }
}

pub fn load_world(paths: &Paths) -> Result<World> {
    let tax_path = paths.file(TAXONOMY);
    require(&tax_path, "run gen-data first")?;
    let text = fs::read_to_string(&tax_path).map_err(io_err(&tax_path))?;
    let taxonomy = Taxonomy::from_toml(&text)?;
    let world_path = paths.file(WORLD);
    require(&world_path, "run gen-data first")?;
    Ok(World::load(&world_path, taxonomy)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmMeta {
    pub config_hash: String,
    pub world_hash: String,
    pub arch: LmArch,
    pub vocab_size: usize,
    pub param_hash: String,
    pub epochs_done: usize,
    pub steps: u64,
    pub recall: f64,
    pub recall_by_template: Vec<f64>,
}

/// The trained model, checked against the hash in its sidecar.
pub fn load_lm(paths: &Paths) -> Result<(TransformerLm, LmMeta)> {
    let meta_path = paths.file(LM_META);
    if !meta_path.exists() {
        return Err(CoreError::Compatibility(format!(
            "{} is missing, so the language-model checkpoint hash cannot be checked; run train-lm",
            meta_path.display()
        ))
        .into());
    }
    let meta: LmMeta = read_json(&meta_path, "run train-lm")?;
    let lm_path = paths.file(LM);
    require(&lm_path, "run train-lm")?;
    let model = TransformerLm::from_named(meta.arch.clone(), meta.vocab_size, load_tensors(&lm_path)?)?;
    let hash = model.param_hash();
    if hash != meta.param_hash {
        return Err(CoreError::Compatibility(format!(
            "{} hashes to {hash}, sidecar records {}",
            lm_path.display(),
            meta.param_hash
        ))
        .into());
    }
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrdMeta {
    pub config_hash: String,
    pub lm_hash: String,
    pub krd_hash: String,
    pub subject_layer: usize,
    pub relation_layer: usize,
    pub epochs_done: usize,
    pub steps: u64,
    /// Held-out mean `cos(z_r, z_u)` at initialization and after training.
    pub cosine_before: f64,
    pub cosine_after: f64,
    pub residual_before: f64,
    pub residual_after: f64,
}

fn krd_hash(st: &KrdState) -> String {
    let mut bytes = Vec::new();
    for (name, t) in st.tensors() {
        bytes.extend(name.as_bytes());
        for x in t.data() {
            bytes.extend(x.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

pub fn load_krd(paths: &Paths, cfg: &RunConfig, lm_hash: &str) -> Result<(KrdState, KrdMeta)> {
    let meta: KrdMeta = read_json(&paths.file(KRD_META), "run train-krd")?;
    if meta.lm_hash != lm_hash {
        return Err(CoreError::Compatibility(format!(
            "disentangler was trained on model {}, current model is {lm_hash}",
            meta.lm_hash
        ))
        .into());
    }
    let path = paths.file(KRD);
    require(&path, "run train-krd")?;
    let w = KrdState::weights_from_tensors(load_tensors(&path)?)?;
    let st = KrdState::from_weights(w, meta.subject_layer, meta.relation_layer, &cfg.krd);
    if krd_hash(&st) != meta.krd_hash {
        return Err(CoreError::Compatibility(format!("{} does not match its sidecar hash", path.display())).into());
    }
    Ok((st, meta))
}

fn save_optimizer(path: &Path, opt: &AdamW) -> Result<()> {
    let (first, second) = opt.moments();
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (i, t) in first.iter().enumerate() {
        named.push((format!("first.{i}"), t));
    }
    for (i, t) in second.iter().enumerate() {
        named.push((format!("second.{i}"), t));
    }
    save_named(path, &named)
}

fn load_optimizer(path: &Path, config: kedit_core::numerics::AdamWConfig, steps: u64) -> Result<AdamW> {
    require(path, "optimizer state is needed to resume; retrain with --force")?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in load_tensors(path)? {
        if name.starts_with("first.") {
            first.push(t);
        } else {
            second.push(t);
        }
    }
    Ok(AdamW::from_state(config, steps, first, second)?)
}

// ------------------------------------------------------------ gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub config_hash: String,
    pub world_hash: String,
    pub n_subjects: usize,
    pub n_triples: usize,
    pub n_plans: usize,
    pub n_counterfact: usize,
    /// Level of each plan's first neighbour candidate, before the base-model
    /// recall filter that `edit` applies.
    pub candidate_levels: BTreeMap<String, usize>,
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary> {
    let paths = Paths::new(&cfg.out_dir);
    let taxonomy = load_taxonomy(cfg)?;
    let world = gen_world(&cfg.world, &taxonomy)?;
    let mut plans: Vec<SubjectPlan> = Vec::new();
    let mut counterfact: Vec<CounterFactRecord> = Vec::new();
    for &seed in &cfg.eval.seeds {
        let p = plan_subjects(&world, seed);
        counterfact.extend(build_counterfact_style(&world, &p, cfg.eval.n_neighborhood)?);
        plans.extend(p);
    }
    let mut candidate_levels: BTreeMap<String, usize> = Level::ALL.iter().map(|l| (l.name().to_string(), 0)).collect();
    for p in &plans {
        let (_, level) = world.relation_similarity(p.edit_relation, p.others[0]);
        *candidate_levels.entry(level.name().to_string()).or_default() += 1;
    }
    fs::create_dir_all(&paths.root).map_err(io_err(&paths.root))?;
    let files = [
        paths.file(WORLD),
        paths.file(TAXONOMY),
        paths.file(PLANS),
        paths.file(COUNTERFACT),
    ];
    world.save(&files[0])?;
    write_bytes(&files[1], taxonomy.to_toml().as_bytes())?;
    write_jsonl(&files[2], &plans)?;
    write_jsonl(&files[3], &counterfact)?;
    write_manifest(&paths, cfg, "gen-data", &files)?;
    Ok(GenSummary {
        config_hash: cfg.hash(),
        world_hash: world.hash(),
        n_subjects: world.subjects.len(),
        n_triples: world.triples.len(),
        n_plans: plans.len(),
        n_counterfact: counterfact.len(),
        candidate_levels,
    })
}

// ------------------------------------------------------------ train-lm

pub fn train_lm(cfg: &RunConfig, force: bool, resume: bool) -> Result<LmMeta> {
    let paths = Paths::new(&cfg.out_dir);
    let world = load_world(&paths)?;
    let lm_path = paths.file(LM);
    let curve_path = paths.file(LM_CURVE);
    let (mut model, state, mut curve) = if resume && lm_path.exists() {
        let (model, meta) = load_lm(&paths)?;
        if meta.arch != cfg.lm.arch || meta.world_hash != world.hash() {
            return Err(
                CoreError::Compatibility("checkpoint architecture or world differs from the config".into()).into(),
            );
        }
        let opt = load_optimizer(&paths.file(LM_OPT), cfg.lm.train.adamw(), meta.steps)?;
        let curve: Vec<EpochStat> = read_csv(&curve_path)?;
        let state = LmTrainState {
            optimizer: opt,
            epochs_done: meta.epochs_done,
        };
        (model, Some(state), curve)
    } else {
        refuse_overwrite(&lm_path, force)?;
        let model = TransformerLm::new(cfg.lm.arch.clone(), world.vocab.len(), cfg.lm.init_seed)?;
        (model, None, Vec::new())
    };
    let (report, state) = train_lm_resume(&mut model, &world, &cfg.lm.train, state)?;
    curve.extend(report.epochs);
    let meta = LmMeta {
        config_hash: cfg.hash(),
        world_hash: world.hash(),
        arch: model.arch.clone(),
        vocab_size: model.vocab_size,
        param_hash: model.param_hash(),
        epochs_done: state.epochs_done,
        steps: state.optimizer.steps(),
        recall: report.recall,
        recall_by_template: report.recall_by_template,
    };
    save_named(&lm_path, &model.named_params())?;
    save_optimizer(&paths.file(LM_OPT), &state.optimizer)?;
    write_csv(&curve_path, &curve)?;
    write_json(&paths.file(LM_META), &meta)?;
    let files = [lm_path, paths.file(LM_OPT), curve_path, paths.file(LM_META)];
    write_manifest(&paths, cfg, "train-lm", &files)?;
    info!("language model recall {:.4}", meta.recall);
    Ok(meta)
}

// ------------------------------------------------------------ train-krd

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KrdCurveRow {
    epoch: usize,
    step: u64,
    total: f64,
    ctr: f64,
    con: f64,
    recon: f64,
}

/// `(h_s, h_r)` for every evaluation-split fact; no disentangler training
/// subject appears here.
pub fn held_out_reps(
    model: &TransformerLm,
    world: &World,
    layers: (usize, usize),
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    world
        .triples_in(kedit_core::world::Split::Eval)
        .iter()
        .map(|t| {
            let p = world.canonical_prompt(t.subject, t.relation);
            Ok(model.extract_reps(&p, layers.0, layers.1)?)
        })
        .collect()
}

pub fn train_krd(cfg: &RunConfig, force: bool, resume: bool) -> Result<KrdMeta> {
    let paths = Paths::new(&cfg.out_dir);
    let (model, lm_meta) = load_lm(&paths)?;
    let world = load_world(&paths)?;
    if lm_meta.world_hash != world.hash() {
        return Err(CoreError::Compatibility("language model was trained on a different world".into()).into());
    }
    let (ls, lr) = (cfg.layers.subject, cfg.layers.relation);
    let reps = held_out_reps(&model, &world, (ls, lr))?;
    let fresh = KrdState::new(model.arch.d_model, ls, lr, &cfg.krd)?;
    let cosine_before = mean_component_cosine(&fresh, &reps)?;
    let residual_before = mean_recon_residual(&fresh, &reps)?;
    let krd_path = paths.file(KRD);
    let curve_path = paths.file(KRD_CURVE);
    let (mut st, state, mut curve) = if resume && krd_path.exists() {
        let (st, meta) = load_krd(&paths, cfg, &lm_meta.param_hash)?;
        let opt = load_optimizer(&paths.file(KRD_OPT), cfg.krd.adamw(), meta.steps)?;
        let curve: Vec<KrdCurveRow> = read_csv(&curve_path)?;
        (
            st,
            Some(KrdTrainState {
                optimizer: opt,
                epochs_done: meta.epochs_done,
            }),
            curve,
        )
    } else {
        refuse_overwrite(&krd_path, force)?;
        (fresh, None, Vec::new())
    };
    let (report, state) = train_krd_resume(&mut st, &model, &world, &cfg.krd, state)?;
    curve.extend(report.epochs.iter().map(|e| KrdCurveRow {
        epoch: e.epoch,
        step: e.step,
        total: e.losses.total,
        ctr: e.losses.ctr,
        con: e.losses.con,
        recon: e.losses.recon,
    }));
    let meta = KrdMeta {
        config_hash: cfg.hash(),
        lm_hash: lm_meta.param_hash,
        krd_hash: krd_hash(&st),
        subject_layer: ls,
        relation_layer: lr,
        epochs_done: state.epochs_done,
        steps: state.optimizer.steps(),
        cosine_before,
        cosine_after: mean_component_cosine(&st, &reps)?,
        residual_before,
        residual_after: mean_recon_residual(&st, &reps)?,
    };
    save_named(&krd_path, &st.tensors())?;
    save_optimizer(&paths.file(KRD_OPT), &state.optimizer)?;
    write_csv(&curve_path, &curve)?;
    write_json(&paths.file(KRD_META), &meta)?;
    let files = [krd_path, paths.file(KRD_OPT), curve_path, paths.file(KRD_META)];
    write_manifest(&paths, cfg, "train-krd", &files)?;
    info!(
        "held-out cos(z_r, z_u) {:.3} -> {:.3}",
        meta.cosine_before, meta.cosine_after
    );
    Ok(meta)
}

// ------------------------------------------------------------ edit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMeta {
    pub config_hash: String,
    pub editor: EditorKind,
    pub zero_w3: bool,
    pub order: EditOrder,
    pub layer: usize,
    pub lm_hash: String,
    pub krd_hash: String,
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
    /// Forward-order prefixes share one sequence, stored once at the
    /// largest size.
    pub nested: bool,
    pub records_per_seed: Vec<usize>,
    pub n_edits: usize,
    pub warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLine {
    pub record: String,
    pub batch_size: usize,
    pub report: EditReport,
}

fn update_name(record: &str, size: usize, i: usize, part: &str) -> String {
    format!("{record}/{size}/{i}/{part}")
}

/// Everything the edit and eval stages share.
pub struct Loaded {
    pub paths: Paths,
    pub world: World,
    pub model: TransformerLm,
    pub lm_meta: LmMeta,
    pub krd: KrdState,
    pub krd_meta: KrdMeta,
}

pub fn load_stack(cfg: &RunConfig) -> Result<Loaded> {
    let paths = Paths::new(&cfg.out_dir);
    let world = load_world(&paths)?;
    let (model, lm_meta) = load_lm(&paths)?;
    let (krd, krd_meta) = load_krd(&paths, cfg, &lm_meta.param_hash)?;
    Ok(Loaded {
        paths,
        world,
        model,
        lm_meta,
        krd,
        krd_meta,
    })
}

pub fn preservation(cfg: &RunConfig, l: &Loaded) -> Result<PreservationSet> {
    Ok(estimate_covariance(
        &l.model,
        &corpus_prompts(&l.world),
        l.krd.subject_layer,
        cfg.edit.lambda,
        cfg.edit.ridge,
    )?)
}

fn fineked_options(cfg: &RunConfig) -> FineKedOptions {
    FineKedOptions {
        max_batch: cfg.eval.max_batch(),
        n_constraints: cfg.eval.n_constraints,
    }
}

pub fn edit(cfg: &RunConfig, editors: &[EditorKind], zero_w3: bool, force: bool) -> Result<Vec<EditMeta>> {
    let l = load_stack(cfg)?;
    for &kind in editors {
        refuse_overwrite(&l.paths.edit_dir(kind).join("meta.json"), force)?;
    }
    let pres = preservation(cfg, &l)?;
    let ctx = EvalContext {
        model: &l.model,
        world: &l.world,
        krd: &l.krd,
        preservation: &pres,
        edit: &cfg.edit,
        fineked: fineked_options(cfg),
        max_records: cfg.eval.record_limit(),
        zero_w3,
    };
    let mut per_seed = Vec::new();
    let mut files = Vec::new();
    for &seed in &cfg.eval.seeds {
        let recs = ctx.records(seed)?;
        let path = l.paths.records(seed);
        write_jsonl(&path, &recs)?;
        files.push(path);
        per_seed.push(recs);
    }
    let sizes = &cfg.eval.batch_sizes;
    let nested = cfg.edit.order == EditOrder::Forward;
    let mut metas = Vec::new();
    for &kind in editors {
        let editor = Editor::new(kind, &cfg.edit, &l.krd, &pres, zero_w3)?;
        let (mut n_edits, mut warnings) = (0, 0);
        for (&seed, recs) in cfg.eval.seeds.iter().zip(&per_seed) {
            let mut tensors: Vec<(String, Tensor)> = Vec::new();
            let mut lines = Vec::new();
            for rec in recs {
                let runs = editor.apply_nested(&l.model, &l.world, &rec.batch, &rec.constraints, sizes)?;
                for (size, _, updates, reports) in runs {
                    if !nested || size == cfg.eval.max_batch() {
                        for (i, u) in updates.iter().enumerate() {
                            tensors.push((update_name(&rec.id, size, i, "u"), Tensor::row(u.u.clone())));
                            tensors.push((update_name(&rec.id, size, i, "w"), Tensor::row(u.w.clone())));
                        }
                    }
                    for r in reports {
                        n_edits += 1;
                        warnings += r.warning as usize;
                        lines.push(EditLine {
                            record: rec.id.clone(),
                            batch_size: size,
                            report: r,
                        });
                    }
                }
            }
            let snap = l.paths.snapshot(kind, seed);
            let named: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
            save_named(&snap, &named)?;
            let rep_path = l.paths.edit_reports(kind, seed);
            write_jsonl(&rep_path, &lines)?;
            files.push(snap);
            files.push(rep_path);
            info!("{kind} seed {seed}: {} records edited", recs.len());
        }
        let meta = EditMeta {
            config_hash: cfg.hash(),
            editor: kind,
            zero_w3,
            order: cfg.edit.order,
            layer: l.krd.subject_layer,
            lm_hash: l.lm_meta.param_hash.clone(),
            krd_hash: l.krd_meta.krd_hash.clone(),
            seeds: cfg.eval.seeds.clone(),
            batch_sizes: sizes.clone(),
            nested,
            records_per_seed: per_seed.iter().map(Vec::len).collect(),
            n_edits,
            warnings,
        };
        let meta_path = l.paths.edit_dir(kind).join("meta.json");
        write_json(&meta_path, &meta)?;
        files.push(meta_path);
        metas.push(meta);
    }
    write_manifest(&l.paths, cfg, "edit", &files)?;
    Ok(metas)
}

/// Rank-one updates of one record's batch of `size` edits.
pub fn snapshot_updates(
    tensors: &BTreeMap<String, Tensor>,
    meta: &EditMeta,
    record: &str,
    size: usize,
) -> Result<Vec<RankOneUpdate>> {
    let stored = if meta.nested {
        meta.batch_sizes.iter().copied().max().unwrap_or(size)
    } else {
        size
    };
    (0..size)
        .map(|i| {
            let get = |part: &str| {
                let name = update_name(record, stored, i, part);
                tensors
                    .get(&name)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| PipelineError::from(CoreError::Data(format!("snapshot lacks {name}"))))
            };
            Ok(RankOneUpdate {
                layer: meta.layer,
                u: get("u")?,
                w: get("w")?,
            })
        })
        .collect()
}

pub fn load_snapshot(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    Ok(load_tensors(path)?.into_iter().collect())
}

// ------------------------------------------------------------ eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpread {
    pub editor: EditorKind,
    pub batch_size: usize,
    pub efficacy: Spread,
    pub locality: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterFactRow {
    pub editor: String,
    pub scores: CounterFactScores,
    pub harmonic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub rows: Vec<kedit_core::eval::SweepRow>,
    pub spreads: Vec<CellSpread>,
    pub counterfact: Vec<CounterFactRow>,
    pub krd_cosine_before: f64,
    pub krd_cosine_after: f64,
    /// Mean `cos(z_r, z_u)` recomputed from the exported CSV.
    pub exported_cosine: f64,
    pub exported_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CounterFactCsvRow {
    editor: String,
    seed: u64,
    record: String,
    metric: String,
    index: usize,
    hit: bool,
}

fn counterfact_rows(editor: &str, seed: u64, o: &CounterFactOutcome) -> Vec<CounterFactCsvRow> {
    let row = |metric: &str, index: usize, hit: bool| CounterFactCsvRow {
        editor: editor.to_string(),
        seed,
        record: o.id.clone(),
        metric: metric.to_string(),
        index,
        hit,
    };
    let mut out = vec![row("efficacy", 0, o.efficacy)];
    out.extend(o.paraphrase.iter().enumerate().map(|(i, &h)| row("paraphrase", i, h)));
    out.extend(
        o.neighborhood
            .iter()
            .enumerate()
            .map(|(i, &h)| row("neighborhood", i, h)),
    );
    out
}

/// Markdown summary: per-level locality, CounterFact-style scores and the
/// batch sweep.
pub fn render_summary(config_hash: &str, sweep: &SweepReport, counterfact: &[CounterFactRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation summary\n\nconfig hash: `{config_hash}`\n");
    let _ = writeln!(s, "Argmax ties resolve to the {}.\n", kedit_core::eval::TIE_RULE);
    let _ = writeln!(s, "## Efficacy and relational locality by level (single edits, %)\n");
    s.push_str(&sweep.level_table(1));
    let _ = writeln!(s, "\n## CounterFact-style scores (single edits, %)\n");
    let rows: Vec<(String, CounterFactScores)> = counterfact.iter().map(|r| (r.editor.clone(), r.scores)).collect();
    s.push_str(&counterfact_table(&rows));
    let _ = writeln!(s, "\n## Subject-consistent batches (%, mean [min, max] over seeds)\n");
    s.push_str(&sweep.batch_table());
    s
}

pub fn eval(cfg: &RunConfig, editors: &[EditorKind]) -> Result<EvalSummary> {
    let paths = Paths::new(&cfg.out_dir);
    // every input must exist before any computation starts
    for &kind in editors {
        require(&paths.edit_dir(kind).join("meta.json"), "run edit for this editor")?;
        for &seed in &cfg.eval.seeds {
            require(&paths.snapshot(kind, seed), "run edit for this editor")?;
        }
    }
    for &seed in &cfg.eval.seeds {
        require(&paths.records(seed), "run edit first")?;
    }
    require(&paths.file(COUNTERFACT), "run gen-data first")?;
    let l = load_stack(cfg)?;
    let counterfact: Vec<CounterFactRecord> = read_jsonl(&paths.file(COUNTERFACT), "run gen-data first")?;
    let records: Vec<Vec<FineKedRecord>> = cfg
        .eval
        .seeds
        .iter()
        .map(|&s| read_jsonl(&paths.records(s), "run edit first"))
        .collect::<Result<_>>()?;

    let mut reports: Vec<MetricReport> = Vec::new();
    let mut cf_rows: Vec<CounterFactRow> = Vec::new();
    let mut cf_csv: Vec<CounterFactCsvRow> = Vec::new();
    let base_outcomes: Vec<CounterFactOutcome> = counterfact
        .iter()
        .filter(|c| records.iter().flatten().any(|r| r.id == c.id && r.seed == c.seed))
        .map(|c| score_counterfact(&l.model, &l.world, c))
        .collect::<std::result::Result<_, _>>()?;
    for (o, c) in base_outcomes.iter().zip(
        counterfact
            .iter()
            .filter(|c| records.iter().flatten().any(|r| r.id == c.id && r.seed == c.seed)),
    ) {
        cf_csv.extend(counterfact_rows("unedited", c.seed, o));
    }
    let base_scores = CounterFactScores::from_outcomes(&base_outcomes);
    cf_rows.push(CounterFactRow {
        editor: "unedited".into(),
        scores: base_scores,
        harmonic: base_scores.harmonic(),
    });

    for &kind in editors {
        let meta: EditMeta = read_json(&paths.edit_dir(kind).join("meta.json"), "run edit")?;
        if meta.lm_hash != l.lm_meta.param_hash || meta.krd_hash != l.krd_meta.krd_hash {
            return Err(CoreError::Compatibility(format!(
                "{kind} snapshots were made with another model or disentangler"
            ))
            .into());
        }
        if meta.seeds != cfg.eval.seeds || meta.batch_sizes != cfg.eval.batch_sizes {
            return Err(CoreError::Compatibility(format!(
                "{kind} snapshots cover seeds {:?} and sizes {:?}, config asks for {:?} and {:?}",
                meta.seeds, meta.batch_sizes, cfg.eval.seeds, cfg.eval.batch_sizes
            ))
            .into());
        }
        let mut cf_outcomes = Vec::new();
        for (&seed, recs) in cfg.eval.seeds.iter().zip(&records) {
            let snap = load_snapshot(&paths.snapshot(kind, seed))?;
            let mut cells: Vec<Vec<_>> = vec![Vec::new(); cfg.eval.batch_sizes.len()];
            for rec in recs {
                for (i, &n) in cfg.eval.batch_sizes.iter().enumerate() {
                    let ups = snapshot_updates(&snap, &meta, &rec.id, n)?;
                    let edited = kedit_core::dke::apply_updates(&l.model, &ups)?;
                    cells[i].push(score_record(&edited, &l.world, rec, &rec.batch[..n])?);
                    if n == 1 {
                        if let Some(c) = counterfact.iter().find(|c| c.id == rec.id && c.seed == seed) {
                            let o = score_counterfact(&edited, &l.world, c)?;
                            cf_csv.extend(counterfact_rows(kind.name(), seed, &o));
                            cf_outcomes.push(o);
                        }
                    }
                }
            }
            for (&n, outcomes) in cfg.eval.batch_sizes.iter().zip(cells) {
                reports.push(MetricReport::from_outcomes(kind.name(), seed, n, outcomes));
            }
        }
        if cfg.eval.batch_sizes.contains(&1) {
            let scores = CounterFactScores::from_outcomes(&cf_outcomes);
            cf_rows.push(CounterFactRow {
                editor: kind.name().into(),
                scores,
                harmonic: scores.harmonic(),
            });
        }
    }
    let sweep = SweepReport::from_reports(reports)?;
    let mut spreads = Vec::new();
    for &kind in editors {
        for &n in &cfg.eval.batch_sizes {
            if let Some((e, lo)) = sweep.spread(kind, n) {
                spreads.push(CellSpread {
                    editor: kind,
                    batch_size: n,
                    efficacy: e,
                    locality: lo,
                });
            }
        }
    }

    let out = paths.reports();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let outcomes_path = out.join("outcomes.csv");
    write_outcomes_csv(&sweep.reports, &outcomes_path)?;
    let cf_path = out.join("counterfact.csv");
    write_csv(&cf_path, &cf_csv)?;
    let reps_path = out.join("reps.csv");
    let exported_rows = export_disentangled_reps(&l.krd, &l.model, &l.world, &records[0], &reps_path)?;
    let exported_cosine = mean_cosine_from_rows(&read_disentangled_reps(&reps_path)?)?;
    let summary = EvalSummary {
        config_hash: cfg.hash(),
        rows: sweep.rows.clone(),
        spreads,
        counterfact: cf_rows,
        krd_cosine_before: l.krd_meta.cosine_before,
        krd_cosine_after: l.krd_meta.cosine_after,
        exported_cosine,
        exported_rows,
    };
    let sweep_path = out.join("sweep.json");
    write_json(&sweep_path, &summary)?;
    let md_path = out.join("summary.md");
    write_bytes(
        &md_path,
        render_summary(&summary.config_hash, &sweep, &summary.counterfact).as_bytes(),
    )?;
    write_manifest(
        &paths,
        cfg,
        "eval",
        &[outcomes_path, cf_path, reps_path, sweep_path, md_path],
    )?;
    Ok(summary)
}
