use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use ccps_core::feature_file::{read_feature_file, write_feature_csv, FeatureFileWriter};
use ccps_core::features::{extract_all, FeatureMatrix};
use ccps_core::metrics::{classification_accuracy, evaluate as compute_metrics, EvalRecord};
use ccps_core::msp::msp_confidence;
use ccps_core::net::train::{finetune_from, pretrain_only};
use ccps_core::net::{train as train_model, ConfidenceModel, TrainConfig};
use ccps_core::probe_data::{load_dump, write_dump, AnswerFormat};
use ccps_core::toy_lm::{generate, ToyLmConfig};
use ccps_core::PerturbationConfig;

use crate::report::{render_table, reliability_csv, EvaluationReport};
use crate::{EvaluateArgs, ExtractArgs, GenArgs, PredictArgs, PretrainArgs, TrainArgs, TrainingFlags};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ccps_core::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn read_json_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        anyhow!("invalid config {}: key `{}`: {}", path.display(), key, e.inner())
    })
}

fn parse_format(s: &str) -> Result<AnswerFormat> {
    s.parse::<AnswerFormat>().map_err(|_| anyhow!("invalid value for key `format`: {s:?} (expected MC or OE)"))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ccps_core::Error::Io { path: path.to_owned(), source: e }.into())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn gen(args: GenArgs) -> Result<()> {
    let mut config: ToyLmConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => ToyLmConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.n_records {
        config.n_records = v;
    }
    if let Some(v) = &args.format {
        config.format = parse_format(v)?;
    }
    if let Some(v) = args.max_len {
        config.max_len = v;
    }
    if let Some(v) = args.separability {
        config.separability = v;
    }
    if let Some(v) = args.first_record {
        config.first_record = v;
    }
    if let Some(v) = args.d_h {
        config.d_h = v;
    }
    if let Some(v) = args.vocab_size {
        config.vocab_size = v;
    }
    let (manifest, head, records) = generate(&config)?;
    write_dump(&manifest, &head, &records, &args.out)?;
    info!(records = records.len(), out = %args.out.display(), "wrote dump");
    Ok(())
}

pub fn extract(args: ExtractArgs) -> Result<()> {
    let config = PerturbationConfig {
        eps_max: args.eps_max,
        steps: args.steps,
    };
    config.validate()?;
    let (manifest, head, records) = load_dump(&args.dump)?;
    info!(records = records.len(), format = %manifest.format, "loaded dump");
    let matrices = extract_all(&records, &head, &config, args.threads)?;
    for m in &matrices {
        debug!(answer = %m.answer_id, tokens = m.len(), "extracted");
    }

    let mut writer = FeatureFileWriter::create(&args.out, manifest.format)?;
    for (i, m) in matrices.iter().enumerate() {
        writer.write(m)?;
        if (i + 1) % 500 == 0 {
            info!(done = i + 1, total = matrices.len(), "written");
        }
    }
    let n = writer.finish()?;
    if let Some(csv) = &args.csv {
        write_feature_csv(csv, &matrices)?;
    }
    info!(answers = n, out = %args.out.display(), "wrote features");
    Ok(())
}

fn training_config(flags: &TrainingFlags) -> Result<TrainConfig> {
    let mut config: TrainConfig = match &flags.config {
        Some(path) => read_json_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    if let Some(v) = flags.lr {
        config.learning_rate = v;
    }
    if let Some(v) = flags.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = flags.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = flags.pretrain_steps {
        config.pretrain_steps = v;
    }
    if let Some(v) = flags.finetune_steps {
        config.finetune_steps = v;
    }
    if let Some(v) = flags.margin {
        config.margin = v;
    }
    config.validate()?;
    Ok(config)
}

fn load_features(path: &Path, expected: Option<AnswerFormat>) -> Result<(AnswerFormat, Vec<FeatureMatrix>)> {
    let (format, matrices) = read_feature_file(path)?;
    if let Some(want) = expected {
        if want != format {
            bail!("{} holds {format} features but --format is {want}", path.display());
        }
    }
    Ok((format, matrices))
}

fn check_both_classes(path: &Path, matrices: &[FeatureMatrix]) -> Result<()> {
    let positives = matrices.iter().filter(|m| m.label).count();
    if positives == 0 || positives == matrices.len() {
        bail!(
            "{} must contain both correct and incorrect answers ({} of {} are correct)",
            path.display(),
            positives,
            matrices.len()
        );
    }
    Ok(())
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let config = training_config(&args.flags)?;
    let expected = args.format.as_deref().map(parse_format).transpose()?;
    let (format, train) = load_features(&args.train, expected)?;
    check_both_classes(&args.train, &train)?;
    info!(answers = train.len(), %format, steps = config.pretrain_steps, "contrastive pre-training");
    let (model, curve) = pretrain_only(format, &train, &config)?;
    model.save(&args.out)?;
    curve.write_csv(sibling(&args.out, ".pretrain_loss.csv"))?;
    info!(out = %args.out.display(), final_loss = curve.losses.last().copied().unwrap_or(f64::NAN), "wrote pre-trained model");
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config = training_config(&args.flags)?;
    let expected = args.format.as_deref().map(parse_format).transpose()?;
    let (format, train) = load_features(&args.train, expected)?;
    let (_, val) = load_features(&args.val, Some(format))?;
    check_both_classes(&args.train, &train)?;
    if val.is_empty() {
        bail!("{} holds no answers", args.val.display());
    }
    let start = args.init_model.as_deref().map(ConfidenceModel::load).transpose()?;
    if let Some(start) = &start {
        if start.format != format {
            bail!("initial model is {} but the features are {format}", start.format);
        }
    }

    info!(answers = train.len(), %format, seed = config.seed, "training");
    let (model, curves) = match &start {
        Some(start) => {
            let (model, curve) = finetune_from(start, &train, &config)?;
            (model, vec![("finetune", curve)])
        }
        None => {
            let outcome = train_model(format, &train, &config)?;
            (
                outcome.model,
                vec![("pretrain", outcome.pretrain_curve), ("finetune", outcome.finetune_curve)],
            )
        }
    };

    let records = val
        .iter()
        .map(|m| Ok(EvalRecord::new(model.predict(m)?, m.label)))
        .collect::<Result<Vec<_>>>()?;
    let metrics = compute_metrics(&records, args.ece_bins)?;
    let classifier_accuracy = classification_accuracy(&records, 0.5)?;

    model.save(&args.out)?;
    for (stage, curve) in &curves {
        curve.write_csv(sibling(&args.out, &format!(".{stage}_loss.csv")))?;
    }
    let summary = serde_json::json!({
        "val_answers": val.len(),
        "val_classifier_accuracy": classifier_accuracy,
        "val_ece": metrics.ece,
        "val_brier": metrics.brier,
        "val_aucpr": metrics.aucpr,
        "val_auroc": metrics.auroc,
    });
    println!("{summary}");
    info!(out = %args.out.display(), "wrote model");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub answer_id: String,
    pub p: f64,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let model = ConfidenceModel::load(&args.model)?;
    let (format, matrices) = read_feature_file(&args.features)?;
    if format != model.format {
        bail!("model expects {} features but {} holds {format}", model.format, args.features.display());
    }
    let mut out = String::new();
    for m in &matrices {
        let line = Prediction {
            answer_id: m.answer_id.clone(),
            p: model.predict(m)?,
            label: m.label as u8,
            task: None,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_bytes(&args.out, out.as_bytes())?;
    info!(answers = matrices.len(), out = %args.out.display(), "wrote predictions");
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| ccps_core::Error::Io { path: path.to_owned(), source: e })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if p.label > 1 {
            bail!("{} line {}: label must be 0 or 1", path.display(), i + 1);
        }
        out.push(p);
    }
    if out.is_empty() {
        bail!("{} holds no predictions", path.display());
    }
    Ok(out)
}

fn msp_predictions(dump: &Path) -> Result<Vec<Prediction>> {
    let (_, head, records) = load_dump(dump)?;
    if records.is_empty() {
        bail!("{} holds no records", dump.display());
    }
    records
        .iter()
        .map(|r| {
            Ok(Prediction {
                answer_id: r.answer_id.clone(),
                p: msp_confidence(r, &head)?,
                label: r.label as u8,
                task: None,
            })
        })
        .collect()
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let predictions = match args.scorer.as_str() {
        "ccps" => {
            let path = args.predictions.as_deref().ok_or_else(|| anyhow!("--predictions is required for the ccps scorer"))?;
            read_predictions(path)?
        }
        "msp" => {
            let dump = args.dump.as_deref().ok_or_else(|| anyhow!("--dump is required for the msp scorer"))?;
            msp_predictions(dump)?
        }
        other => bail!("unknown scorer {other:?} (expected ccps or msp)"),
    };

    let to_records = |preds: &[&Prediction]| -> Vec<EvalRecord> {
        preds.iter().map(|p| EvalRecord::new(p.p, p.label == 1)).collect()
    };
    let all: Vec<&Prediction> = predictions.iter().collect();
    let aggregate = compute_metrics(&to_records(&all), args.ece_bins)?;
    let mut by_task: BTreeMap<String, Vec<&Prediction>> = BTreeMap::new();
    for p in &predictions {
        if let Some(task) = &p.task {
            by_task.entry(task.clone()).or_default().push(p);
        }
    }
    let mut tasks = BTreeMap::new();
    for (task, preds) in by_task {
        tasks.insert(task, compute_metrics(&to_records(&preds), args.ece_bins)?);
    }
    let report = EvaluationReport {
        scorer: args.scorer.clone(),
        ece_bins: args.ece_bins,
        aggregate,
        tasks,
    };

    let table = render_table(&report);
    let csv = reliability_csv(&report);
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');

    fs::create_dir_all(&args.out_dir).map_err(|e| ccps_core::Error::Io { path: args.out_dir.clone(), source: e })?;
    write_bytes(&args.out_dir.join("report.json"), json.as_bytes())?;
    write_bytes(&args.out_dir.join("report.txt"), table.as_bytes())?;
    write_bytes(&args.out_dir.join("reliability.csv"), csv.as_bytes())?;
    std::io::stdout().write_all(table.as_bytes())?;
    Ok(())
}
