use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use kedit_cli::config::RunConfig;
use kedit_cli::error::PipelineError;
use kedit_cli::pipeline::{self, EditMeta, EvalSummary, Manifest, Paths};
use kedit_core::dke::{unrelated_gram, EditorKind};
use kedit_core::eval::{read_outcomes_csv, SweepReport};
use kedit_core::util::sha256_hex;
use kedit_core::CoreError;
use tempfile::TempDir;

const SMALL: &str = r#"
[world]
n_subjects = 24
n_krd_subjects = 12
n_relations = 12
n_objects_per_relation = 6
[lm.train]
epochs = 3
[krd]
samples_per_epoch = 128
epochs = 1
[edit]
max_steps = 10
[eval]
seeds = [0, 1]
editors = ["dike", "memit"]
batch_sizes = [1, 2, 4]
max_records = 3
"#;

fn small(out: &Path, overrides: &[&str]) -> RunConfig {
    let dir = out.parent().unwrap();
    let path = dir.join(format!("{}.toml", out.file_name().unwrap().to_string_lossy()));
    fs::write(&path, SMALL).unwrap();
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(Some(&path), &overrides, Some(out)).unwrap()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

struct Base {
    _dir: TempDir,
    out: PathBuf,
    cfg: RunConfig,
    summary: EvalSummary,
}

/// One full small pipeline shared by the tests that only read it.
fn base() -> &'static Base {
    static BASE: OnceLock<Base> = OnceLock::new();
    BASE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("run");
        let cfg = small(&out, &[]);
        pipeline::gen_data(&cfg).unwrap();
        pipeline::train_lm(&cfg, false, false).unwrap();
        pipeline::train_krd(&cfg, false, false).unwrap();
        pipeline::edit(&cfg, &cfg.eval.editors, false, false).unwrap();
        let summary = pipeline::eval(&cfg, &cfg.eval.editors).unwrap();
        Base {
            _dir: dir,
            out,
            cfg,
            summary,
        }
    })
}

/// A private copy of the base run for tests that modify it.
fn fork(name: &str) -> (TempDir, RunConfig) {
    let b = base();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join(name);
    copy_dir(&b.out, &out);
    let mut cfg = b.cfg.clone();
    cfg.out_dir = out;
    (dir, cfg)
}

fn kedit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_kedit"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("KEDIT_OUT")
        .output()
        .unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let a = small(&dir.path().join("a"), &[]);
    let b = small(&dir.path().join("b"), &[]);
    let sa = pipeline::gen_data(&a).unwrap();
    let sb = pipeline::gen_data(&b).unwrap();
    assert_eq!(sa, sb);
    for f in [
        pipeline::WORLD,
        pipeline::TAXONOMY,
        pipeline::PLANS,
        pipeline::COUNTERFACT,
    ] {
        let x = fs::read(a.out_dir.join(f)).unwrap();
        let y = fs::read(b.out_dir.join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn manifests_hash_every_listed_file() {
    let b = base();
    for cmd in ["gen-data", "train-lm", "train-krd", "edit", "eval"] {
        let text = fs::read_to_string(b.out.join(format!("manifest-{cmd}.json"))).unwrap();
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.command, cmd);
        assert_eq!(m.config_hash, b.cfg.hash());
        assert!(!m.files.is_empty());
        for (rel, hash) in &m.files {
            let bytes = fs::read(b.out.join(rel)).unwrap();
            assert_eq!(&sha256_hex(&bytes), hash, "{rel}");
        }
    }
    let echoed = fs::read_to_string(b.out.join("config.toml")).unwrap();
    assert_eq!(echoed, b.cfg.to_toml());
}

#[test]
fn asymmetric_taxonomy_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut t: toml::Table = kedit_core::world::Taxonomy::default_taxonomy()
        .to_toml()
        .parse()
        .unwrap();
    let scores = t["scores"].as_table_mut().unwrap();
    scores["career"].as_table_mut().unwrap()["family"] = toml::Value::Integer(5);
    let path = dir.path().join("tax.toml");
    fs::write(&path, toml::to_string(&t).unwrap()).unwrap();
    let mut cfg = small(&dir.path().join("run"), &[]);
    cfg.taxonomy = Some(path);
    let err = pipeline::gen_data(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("asymmetric"), "{err}");
    assert!(!cfg.out_dir.join(pipeline::WORLD).exists());
}

#[test]
fn train_lm_refuses_to_overwrite() {
    let (_d, cfg) = fork("overwrite");
    let err = pipeline::train_lm(&cfg, false, false).unwrap_err();
    assert!(matches!(err, PipelineError::Invalid(_)), "{err}");
    assert!(err.to_string().contains("--force"));
    let krd = pipeline::train_krd(&cfg, false, false).unwrap_err();
    assert!(matches!(krd, PipelineError::Invalid(_)));
}

#[test]
fn resume_continues_steps_and_curve() {
    let (_d, cfg) = fork("resume");
    let before: pipeline::LmMeta =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join(pipeline::LM_META)).unwrap()).unwrap();
    let mut more = cfg.clone();
    more.lm.train.epochs = 5;
    let after = pipeline::train_lm(&more, false, true).unwrap();
    assert_eq!(before.epochs_done, 3);
    assert_eq!(after.epochs_done, 5);
    assert!(after.steps > before.steps);
    let curve = fs::read_to_string(cfg.out_dir.join(pipeline::LM_CURVE)).unwrap();
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert_eq!(rows.len(), after.epochs_done);
    let steps: Vec<u64> = rows
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
    assert_eq!(*steps.last().unwrap(), after.steps);

    // the old disentangler no longer matches the retrained model
    let err = pipeline::edit(&more, &[EditorKind::Dike], false, true).unwrap_err();
    assert!(matches!(err, PipelineError::Core(CoreError::Compatibility(_))), "{err}");
}

#[test]
fn krd_resume_appends_epochs() {
    let (_d, cfg) = fork("krd-resume");
    let mut more = cfg.clone();
    more.krd.epochs = 2;
    let meta = pipeline::train_krd(&more, false, true).unwrap();
    assert_eq!(meta.epochs_done, 2);
    let curve = fs::read_to_string(cfg.out_dir.join(pipeline::KRD_CURVE)).unwrap();
    assert_eq!(curve.lines().count() - 1, 2);
}

#[test]
fn krd_needs_a_hashed_language_model() {
    let (_d, cfg) = fork("no-lm");
    fs::remove_file(cfg.out_dir.join(pipeline::LM_META)).unwrap();
    let err = pipeline::train_krd(&cfg, true, false).unwrap_err();
    assert!(matches!(err, PipelineError::Core(CoreError::Compatibility(_))), "{err}");
    assert!(err.to_string().contains("hash"));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let (_d, cfg) = fork("tamper");
    let path = cfg.out_dir.join(pipeline::LM);
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let err = pipeline::train_krd(&cfg, true, false).unwrap_err();
    assert!(matches!(err, PipelineError::Core(CoreError::Compatibility(_))), "{err}");
}

#[test]
fn edit_reports_cover_every_record_and_size() {
    let b = base();
    let paths = Paths::new(&b.out);
    for &kind in &b.cfg.eval.editors {
        let meta: EditMeta =
            serde_json::from_str(&fs::read_to_string(paths.edit_dir(kind).join("meta.json")).unwrap()).unwrap();
        assert!(meta.nested);
        let mut total = 0;
        for (&seed, &n_rec) in b.cfg.eval.seeds.iter().zip(&meta.records_per_seed) {
            assert!(n_rec > 0);
            let text = fs::read_to_string(paths.edit_reports(kind, seed)).unwrap();
            let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
            let per_record: usize = b.cfg.eval.batch_sizes.iter().sum();
            assert_eq!(lines.len(), n_rec * per_record);
            for l in &lines {
                assert_eq!(l["schema"], 1);
                assert_eq!(l["report"]["editor"], kind.name());
                assert!(l["report"]["position"].as_u64().unwrap() < l["batch_size"].as_u64().unwrap());
                assert!(l["report"]["update_norm"].as_f64().unwrap().is_finite());
            }
            total += lines.len();
        }
        assert_eq!(total, meta.n_edits);
    }
}

#[test]
fn zero_w3_drops_the_unrelated_solve() {
    let (_d, cfg) = fork("zero-w3");
    let b = base();
    let plain = pipeline::load_snapshot(&Paths::new(&b.out).snapshot(EditorKind::Dike, 0)).unwrap();
    let metas = pipeline::edit(&cfg, &[EditorKind::Dike], true, true).unwrap();
    assert!(metas[0].zero_w3);
    let paths = Paths::new(&cfg.out_dir);
    let zeroed = pipeline::load_snapshot(&paths.snapshot(EditorKind::Dike, 0)).unwrap();
    let stack = pipeline::load_stack(&cfg).unwrap();
    let gram = unrelated_gram(stack.krd.weight(3)).unwrap();
    let d = gram.shape()[0];
    let mut checked = 0;
    for (name, u_zero) in &zeroed {
        // first edit of each batch: same key, same residual, only the solve differs
        if !name.ends_with("/0/u") {
            continue;
        }
        let u = plain[name].data();
        let w_name = name.replace("/u", "/w");
        assert_eq!(plain[&w_name].data(), zeroed[&w_name].data());
        for i in 0..d {
            let gu: f64 = (0..d).map(|j| gram.data()[i * d + j] * u[j]).sum();
            let r = u_zero.data()[i];
            assert!((gu - r).abs() <= 1e-9 * (1.0 + r.abs()), "{name}[{i}]: {gu} vs {r}");
        }
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn summary_markdown_matches_recomputation_from_csv() {
    let b = base();
    let reports = b.out.join("reports");
    let md = fs::read_to_string(reports.join("summary.md")).unwrap();
    let rebuilt = SweepReport::from_reports(read_outcomes_csv(&reports.join("outcomes.csv")).unwrap()).unwrap();
    let json: EvalSummary = serde_json::from_str(&fs::read_to_string(reports.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(json, b.summary);
    let expected = pipeline::render_summary(&b.cfg.hash(), &rebuilt, &json.counterfact);
    assert_eq!(md, expected);
    assert_eq!(rebuilt.rows, b.summary.rows);
    let cells = b.cfg.eval.editors.len() * b.cfg.eval.batch_sizes.len();
    assert_eq!(b.summary.spreads.len(), cells);
    assert_eq!(b.summary.rows.len(), cells * b.cfg.eval.seeds.len());
    assert_eq!(b.summary.counterfact.len(), 1 + b.cfg.eval.editors.len());
    assert!((b.summary.exported_cosine - b.summary.krd_cosine_after).abs() < 1.0);
    assert!(b.summary.exported_rows > 0);
}

#[test]
fn missing_snapshot_fails_before_any_output() {
    let (_d, cfg) = fork("missing");
    let paths = Paths::new(&cfg.out_dir);
    fs::remove_file(paths.snapshot(EditorKind::Memit, 1)).unwrap();
    fs::remove_dir_all(paths.reports()).unwrap();
    let err = pipeline::eval(&cfg, &cfg.eval.editors).unwrap_err();
    assert!(matches!(err, PipelineError::Missing { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(!paths.reports().exists());
}

#[test]
fn eval_rejects_snapshots_from_other_sizes() {
    let (_d, mut cfg) = fork("sizes");
    cfg.eval.batch_sizes = vec![1, 2];
    let err = pipeline::eval(&cfg, &[EditorKind::Dike]).unwrap_err();
    assert!(matches!(err, PipelineError::Core(CoreError::Compatibility(_))), "{err}");
}

#[test]
fn unknown_editor_lists_valid_names() {
    let out = kedit(&["edit", "--editor", "rome"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for k in EditorKind::ALL {
        assert!(err.contains(k.name()), "{err}");
    }
}

#[test]
fn missing_inputs_exit_with_io_code() {
    let dir = TempDir::new().unwrap();
    let out = kedit(&["train-lm", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[lm.train]\nepochz = 3\n").unwrap();
    let err = RunConfig::load(Some(&path), &[], None).unwrap_err();
    assert!(err.to_string().contains("epochz"), "{err}");
    let out = kedit(&["--config", path.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_values_are_rejected() {
    for set in [
        "eval.batch_sizes=[2, 1]",
        "layers.subject=9",
        "lm.arch.n_heads=5",
        "eval.seeds=[]",
    ] {
        let err = RunConfig::load(None, &[set.to_string()], None).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{set}: {err}");
    }
    assert!(RunConfig::load(None, &["no_equals".into()], None).is_err());
}

#[test]
fn overrides_and_output_precedence() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "out_dir = \"from-file\"\n[lm.train]\nepochs = 3\n").unwrap();
    let cfg = RunConfig::load(
        Some(&path),
        &[
            "lm.train.epochs=9".into(),
            "edit.order=\"reverse\"".into(),
            "out_dir=from-set".into(),
        ],
        None,
    )
    .unwrap();
    assert_eq!(cfg.lm.train.epochs, 9);
    assert_eq!(cfg.edit.order, kedit_core::dke::EditOrder::Reverse);
    assert_eq!(cfg.out_dir, PathBuf::from("from-set"));
    let cfg = RunConfig::load(Some(&path), &[], Some(Path::new("from-flag"))).unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("from-flag"));

    // the environment beats the file, the flag beats the environment
    let env_out = dir.path().join("from-env");
    let run = |extra: &[&str]| {
        let mut args = vec!["--config", path.to_str().unwrap(), "--set", "world.n_subjects=24"];
        args.extend_from_slice(extra);
        args.push("gen-data");
        Command::new(env!("CARGO_BIN_EXE_kedit"))
            .args(&args)
            .current_dir(dir.path())
            .env("RUST_LOG", "error")
            .env("KEDIT_OUT", &env_out)
            .output()
            .unwrap()
    };
    assert!(run(&[]).status.success());
    assert!(env_out.join(pipeline::WORLD).exists());
    let flag_out = dir.path().join("flag");
    assert!(run(&["--out", flag_out.to_str().unwrap()]).status.success());
    assert!(flag_out.join(pipeline::WORLD).exists());
    assert!(!dir.path().join("from-file").exists());
}

#[test]
fn config_hash_ignores_output_directory() {
    let a = RunConfig::load(None, &[], Some(Path::new("x"))).unwrap();
    let b = RunConfig::load(None, &[], Some(Path::new("y"))).unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = RunConfig::load(None, &["edit.lambda=2.0".into()], Some(Path::new("x"))).unwrap();
    assert_ne!(a.hash(), c.hash());
}
