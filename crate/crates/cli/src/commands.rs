//! One function per subcommand. Every command resolves its full
//! configuration up front, echoes it (run.json or the stdout JSON), writes
//! artifacts under the requested output path, and prints a single JSON
//! result line on stdout.

use std::fs;
use std::path::{Path, PathBuf};

use ldn_core::analysis;
use ldn_core::dataio::{
    generate_synthetic, load_dataset, make_folds, read_folds, read_group_map, read_predictions,
    read_soft_labels, write_dataset, write_folds, write_predictions, write_soft_labels, Dataset,
    FoldSplit, NoiseConfig,
};
use ldn_core::distill::{
    budget_check, combine, fit_ensemble_weights, predict_final, read_final_model, write_final_model,
};
use ldn_core::lossmetrics::{gap_at_n, top_n_of_row, GroundTruth, PredictionList};
use ldn_core::models::{
    deserialize_model, featurize, gradient_suite, merge_config_texts, predict_records,
    serialize_model, DimContext, ModelConfig,
};
use ldn_core::rng::derive_seed;
use ldn_core::training::{
    matrix_gap, rebuild_cv, train_cv, EpochStat, Targets, TrainConfig, TrainedCV,
};
use ldn_core::{Error, Result};

use crate::presets;
use crate::{
    AnalyzeArgs, DistillArgs, EnsembleArgs, EvalArgs, FoldsArgs, GradcheckArgs, PredictArgs,
    StackArgs, SynthArgs, TrainArgs,
};

const NOISE_SEED_TAG: u64 = 0x4e4f_4953;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn file_checksum(path: &Path) -> Result<u64> {
    Ok(fnv1a(&fs::read(path)?))
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn truth_of(dataset: &Dataset, clean: bool) -> Result<GroundTruth> {
    let truth = if clean {
        dataset.clean_truth()
    } else {
        dataset.noisy_truth()
    };
    if truth.is_empty() {
        return Err(Error::input(format!(
            "dataset has no {} labels to evaluate against",
            if clean { "clean" } else { "noisy" }
        )));
    }
    Ok(truth)
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut gen = presets::gen_config(&args.preset)?;
    if let Some(v) = args.videos {
        gen.num_videos = v;
    }
    if let Some(v) = args.vocab {
        gen.vocabulary_size = v;
    }
    if let Some(v) = args.dv {
        gen.d_v = v;
    }
    if let Some(v) = args.da {
        gen.d_a = v;
    }
    if let Some(frames) = args.frames {
        if frames && gen.frames.is_none() {
            gen.frames = Some(Default::default());
        }
        if !frames {
            gen.frames = None;
        }
    }
    let noise = NoiseConfig {
        fn_rate: args.fn_rate.unwrap_or(0.5),
        fp_rate: args.fp_rate.unwrap_or(1.0),
        seed: derive_seed(args.seed, &[NOISE_SEED_TAG]),
    };
    let synth = generate_synthetic(&gen, &noise, args.seed)?;
    write_dataset(&args.out, &synth.dataset)?;

    let records = synth.dataset.records.len();
    let clean_total: usize = synth
        .dataset
        .records
        .iter()
        .map(|r| {
            r.clean_labels
                .as_ref()
                .map(std::collections::BTreeSet::len)
                .unwrap_or(0)
        })
        .sum();
    let noisy_total: usize = synth
        .dataset
        .records
        .iter()
        .map(|r| r.noisy_labels.len())
        .sum();
    emit(serde_json::json!({
        "command": "synth",
        "path": args.out,
        "preset": args.preset,
        "seed": args.seed,
        "config": serde_json::to_value(&gen).expect("gen config json"),
        "noise": { "fn_rate": noise.fn_rate, "fp_rate": noise.fp_rate },
        "records": records,
        "mean_clean_labels": clean_total as f64 / records as f64,
        "mean_noisy_labels": noisy_total as f64 / records as f64,
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// folds

pub fn folds(args: FoldsArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let split = make_folds(&dataset, args.k, args.seed)?;
    write_folds(&args.out, &dataset, &split)?;
    emit(serde_json::json!({
        "command": "folds",
        "path": args.out,
        "k": split.k,
        "seed": args.seed,
        "records": dataset.records.len(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// train / distill shared plumbing

#[derive(serde::Serialize, serde::Deserialize)]
struct RunMeta {
    command: String,
    data: PathBuf,
    folds: PathBuf,
    folds_checksum: u64,
    model_config: String,
    train_config: String,
    seed: u64,
    distilled: bool,
}

fn resolve_model_config(
    path: Option<&Path>,
    preset: &str,
    dataset: &Dataset,
) -> Result<ModelConfig> {
    // Preset text supplies defaults; an explicit config file overrides
    // them key by key (or wholesale when it names another architecture).
    let preset_text = presets::model_config_text(preset)?;
    let text = match path {
        Some(p) => merge_config_texts(preset_text, &fs::read_to_string(p)?)?,
        None => preset_text.to_string(),
    };
    let ctx = DimContext {
        vocabulary_size: dataset.vocabulary_size as usize,
        d_v: dataset.d_v,
        d_a: dataset.d_a,
    };
    ModelConfig::from_text(&text, Some(&ctx))
}

fn resolve_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_text(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_run_dir(out: &Path, meta: &RunMeta, dataset: &Dataset, trained: &TrainedCV) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(
        out.join("run.json"),
        serde_json::to_string_pretty(meta).expect("run meta json"),
    )?;
    for (i, model) in trained.fold_models.iter().enumerate() {
        serialize_model(model, &out.join(format!("fold_{i}.model")))?;
    }
    write_soft_labels(&out.join("oof.pred"), dataset, &trained.oof)?;
    let mut history = String::new();
    for stat in &trained.history {
        history.push_str(&serde_json::to_string(stat).expect("stat json"));
        history.push('\n');
    }
    fs::write(out.join("history.jsonl"), history)?;
    Ok(())
}

fn load_run(
    dir: &Path,
    dataset: &Dataset,
    folds: &FoldSplit,
    expect_checksum: u64,
) -> Result<TrainedCV> {
    let meta: RunMeta = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)
        .map_err(|e| Error::format(format!("{}: {e}", dir.join("run.json").display())))?;
    if meta.folds_checksum != expect_checksum {
        return Err(Error::input(format!(
            "run '{}' was trained with a different fold split",
            dir.display()
        )));
    }
    let mut fold_models = Vec::with_capacity(folds.k);
    for i in 0..folds.k {
        fold_models.push(deserialize_model(&dir.join(format!("fold_{i}.model")))?);
    }
    let mut history = Vec::new();
    let history_path = dir.join("history.jsonl");
    if history_path.exists() {
        for line in fs::read_to_string(&history_path)?.lines() {
            let stat: EpochStat = serde_json::from_str(line)
                .map_err(|e| Error::format(format!("{}: {e}", history_path.display())))?;
            history.push(stat);
        }
    }
    rebuild_cv(dataset, folds, fold_models, history, meta.distilled)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let splits = read_folds(&args.folds)?;
    splits.validate(&dataset)?;
    let model_config = resolve_model_config(args.model_config.as_deref(), &args.preset, &dataset)?;
    let train_config = resolve_train_config(args.train_config.as_deref(), args.seed)?;

    let trained = train_cv(
        &dataset,
        &splits,
        &model_config,
        &train_config,
        Targets::HardNoisy,
    )?;
    let meta = RunMeta {
        command: "train".into(),
        data: args.data.clone(),
        folds: args.folds.clone(),
        folds_checksum: file_checksum(&args.folds)?,
        model_config: model_config.to_text(),
        train_config: train_config.to_text(),
        seed: train_config.seed,
        distilled: false,
    };
    write_run_dir(&args.out, &meta, &dataset, &trained)?;

    let truth = truth_of(&dataset, false)?;
    let gap = matrix_gap(&dataset, &trained.oof, &truth, train_config.eval_n)?;
    emit(serde_json::json!({
        "command": "train",
        "out": args.out,
        "model_config": meta.model_config,
        "train_config": meta.train_config,
        "seed": meta.seed,
        "folds": splits.k,
        "oof_gap": gap,
        "epochs_run": trained.history.len(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// predict / eval

pub fn predict(args: PredictArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let magic = {
        let bytes = fs::read(&args.model)?;
        bytes.get(..4).map(<[u8]>::to_vec).unwrap_or_default()
    };
    let probs: Vec<Vec<f64>> = if magic == b"LDNC" {
        let final_model = read_final_model(&args.model)?;
        predict_final(&final_model, &dataset)?
    } else {
        let model = deserialize_model(&args.model)?;
        let features = featurize(&model.config, &dataset)?;
        let indices: Vec<usize> = (0..dataset.records.len()).collect();
        predict_records(&model, &features, &indices)?.probs
    };
    let lists: Vec<PredictionList> = dataset
        .records
        .iter()
        .zip(&probs)
        .map(|(r, row)| PredictionList {
            video_id: r.id.clone(),
            items: top_n_of_row(row, args.n),
        })
        .collect();
    write_predictions(&args.out, &lists)?;
    emit(serde_json::json!({
        "command": "predict",
        "model": args.model,
        "path": args.out,
        "n": args.n,
        "videos": lists.len(),
    }));
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let predictions = read_predictions(&args.pred)?;
    let dataset = load_dataset(&args.truth)?;
    let truth = truth_of(&dataset, args.clean)?;
    let gap = gap_at_n(&predictions, &truth, args.n)?;
    emit(serde_json::json!({
        "gap": gap,
        "n": args.n,
        "videos": predictions.len(),
        "clean": args.clean,
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// ensemble

pub fn ensemble(args: EnsembleArgs) -> Result<()> {
    if args.runs.is_empty() {
        return Err(Error::input("ensemble needs at least one --runs directory"));
    }
    let dataset = load_dataset(&args.data)?;
    let mut matrices = Vec::with_capacity(args.runs.len());
    let mut checksums = Vec::new();
    for dir in &args.runs {
        let meta: RunMeta = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)
            .map_err(|e| Error::format(format!("{}: {e}", dir.join("run.json").display())))?;
        checksums.push(meta.folds_checksum);
        matrices.push(read_soft_labels(&dir.join("oof.pred"), &dataset)?);
    }
    if checksums.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::input("runs were trained on different fold splits"));
    }

    let truth = truth_of(&dataset, false)?;
    let weights = fit_ensemble_weights(&matrices, &dataset, &truth, args.n)?;
    let combined = combine(&matrices, &weights.weights)?;

    fs::create_dir_all(&args.out)?;
    let report = serde_json::json!({
        "models": args.runs,
        "weights": weights.weights,
        "singleton_gaps": weights.singleton_gaps,
        "achieved_gap": weights.achieved_gap,
        "n": args.n,
    });
    fs::write(
        args.out.join("ensemble.json"),
        serde_json::to_string_pretty(&report).expect("ensemble json"),
    )?;
    write_soft_labels(&args.out.join("soft.pred"), &dataset, &combined)?;
    emit(serde_json::json!({
        "command": "ensemble",
        "out": args.out,
        "models": args.runs,
        "weights": weights.weights,
        "singleton_gaps": weights.singleton_gaps,
        "achieved_gap": weights.achieved_gap,
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// distill

pub fn distill(args: DistillArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let splits = read_folds(&args.folds)?;
    splits.validate(&dataset)?;
    let soft = read_soft_labels(&args.soft, &dataset)?;
    let model_config = resolve_model_config(args.model_config.as_deref(), &args.preset, &dataset)?;
    let train_config = resolve_train_config(args.train_config.as_deref(), args.seed)?;

    let trained =
        ldn_core::distill::distill_student(&soft, &dataset, &splits, &model_config, &train_config)?;
    let meta = RunMeta {
        command: "distill".into(),
        data: args.data.clone(),
        folds: args.folds.clone(),
        folds_checksum: file_checksum(&args.folds)?,
        model_config: model_config.to_text(),
        train_config: train_config.to_text(),
        seed: train_config.seed,
        distilled: true,
    };
    write_run_dir(&args.out, &meta, &dataset, &trained)?;

    let truth = truth_of(&dataset, false)?;
    let gap = matrix_gap(&dataset, &trained.oof, &truth, train_config.eval_n)?;
    emit(serde_json::json!({
        "command": "distill",
        "out": args.out,
        "model_config": meta.model_config,
        "train_config": meta.train_config,
        "seed": meta.seed,
        "soft": args.soft,
        "oof_gap": gap,
        "epochs_run": trained.history.len(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// stack

pub fn stack(args: StackArgs) -> Result<()> {
    if args.students.is_empty() {
        return Err(Error::input(
            "stack needs at least one --students directory",
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let splits = read_folds(&args.folds)?;
    splits.validate(&dataset)?;
    let soft = read_soft_labels(&args.soft, &dataset)?;
    let checksum = file_checksum(&args.folds)?;

    let students: Vec<TrainedCV> = args
        .students
        .iter()
        .map(|dir| load_run(dir, &dataset, &splits, checksum))
        .collect::<Result<_>>()?;
    let refs: Vec<&TrainedCV> = students.iter().collect();

    let head_cfg = resolve_train_config(args.train_config.as_deref(), args.seed)?;
    let stacked = ldn_core::distill::stack_penultimate(&refs, &soft, &dataset, &splits, &head_cfg)?;

    fs::create_dir_all(&args.out)?;
    let final_path = args.out.join("final.model");
    let manifest = write_final_model(&final_path, &stacked.final_model)?;
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest json"),
    )?;
    write_soft_labels(&args.out.join("stack_oof.pred"), &dataset, &stacked.oof)?;

    let truth = truth_of(&dataset, false)?;
    let gap = matrix_gap(&dataset, &stacked.oof, &truth, head_cfg.eval_n)?;
    let budget = match args.budget_bytes {
        Some(b) => {
            let report = budget_check(&stacked.final_model, b)?;
            serde_json::to_value(&report).expect("budget json")
        }
        None => serde_json::Value::Null,
    };
    emit(serde_json::json!({
        "command": "stack",
        "out": args.out,
        "students": args.students,
        "train_config": head_cfg.to_text(),
        "seed": head_cfg.seed,
        "size_bytes": manifest.total_bytes,
        "head_input_width": stacked.final_model.head.penultimate_width(),
        "stacked_oof_gap": gap,
        "budget": budget,
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    let predictions = read_predictions(&args.pred)?;
    let mut dataset = load_dataset(&args.data)?;
    if let Some(p) = &args.groups {
        dataset.groups = Some(read_group_map(p)?);
    }
    let truth = truth_of(&dataset, args.clean)?;
    let taxonomy = analysis::error_taxonomy(&predictions, &truth)?;
    let counts = analysis::train_counts(&dataset);
    let reports = analysis::per_label_report(&taxonomy, &counts, dataset.vocabulary_size);

    let groups = dataset.groups.clone().unwrap_or_default();
    let group_reports = analysis::group_accuracy(&reports, &groups);

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("analysis.json"),
        serde_json::to_string_pretty(&reports).expect("reports json"),
    )?;
    let grid = analysis::heatmap_grid(&reports, 10);
    fs::write(args.out.join("heatmap.tsv"), analysis::heatmap_tsv(&grid))?;
    fs::write(
        args.out.join("f1_by_count.tsv"),
        analysis::f1_by_count_tsv(&reports),
    )?;
    fs::write(
        args.out.join("groups.tsv"),
        analysis::groups_tsv(&group_reports),
    )?;

    let active: Vec<&analysis::LabelReport> =
        reports.iter().filter(|r| r.counts.active()).collect();
    let mean_f1 = if active.is_empty() {
        0.0
    } else {
        active.iter().map(|r| r.f1).sum::<f64>() / active.len() as f64
    };
    emit(serde_json::json!({
        "command": "analyze",
        "out": args.out,
        "clean": args.clean,
        "videos": truth.len(),
        "labels_active": active.len(),
        "mean_f1": mean_f1,
        "groups": group_reports.len(),
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let entries = gradient_suite(args.seed)?;
    let max = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    emit(serde_json::json!({
        "command": "gradcheck",
        "seed": args.seed,
        "max_rel_error": max,
        "tolerance": 1e-4,
        "architectures": entries,
    }));
    if max >= 1e-4 {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {max}"
        )));
    }
    Ok(())
}
