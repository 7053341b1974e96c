use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use hypnos_core::diagnosis::{
    apply_hla_with, ensemble_diagnose_with, evaluate, load_classifier, roc_to_csv, save_classifier, DiagnosisReport,
    NarcolepsyClassifier, RfeConfig,
};
use hypnos_core::encoding::{encode_recording, load_encoded, save_encoded, EncodingMode};
use hypnos_core::features::{self, assemble, FeatureVector};
use hypnos_core::hypnodensity::{
    confusion, consensus_hypnogram, ensemble_hypnodensity, ensemble_to_csv, load_csv, to_hypnogram, weighted_accuracy,
    Confusion, EnsembleHypnodensity, ScorerSet,
};
use hypnos_core::neuralnet::{
    load_ensemble, make_ensemble, member_hypnodensities, save_ensemble, targets_for_windows, train, windows_from_encoded,
    LabeledRecording, Model, NetworkConfig, TrainReport,
};
use hypnos_core::preprocess::{fit_reference, preprocess_recording, ReferenceDistribution};
use hypnos_core::signal_io::{
    load_hypnogram, load_recording, save_hypnogram, save_recording, synth_hypnogram, synth_staged_recording,
};
use hypnos_core::PolySignalSet;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{require, PipelineConfig};
use crate::plot::render_svg;

pub const HYPNOGRAM_SUFFIX: &str = ".hypnogram.txt";
pub const HYPNODENSITY_SUFFIX: &str = ".hypnodensity.csv";
pub const CLASSIFIER_MANIFEST: &str = "classifiers.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_flag(value: &str) -> Option<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "positive" | "pos" => Some(true),
        "0" | "false" | "no" | "negative" | "neg" => Some(false),
        _ => None,
    }
}

/// Reads a `recording_id,<column>` CSV of boolean flags.
pub fn read_flag_table(path: &Path, column: &str) -> anyhow::Result<BTreeMap<String, bool>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| anyhow!(hypnos_core::Error::CorruptHeader(format!("{}: no {name} column", path.display()))))
    };
    let (id_col, flag_col) = (find("recording_id")?, find(column)?);
    let mut out = BTreeMap::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec?;
        let value = rec.get(flag_col).unwrap_or("");
        let flag = parse_flag(value).ok_or_else(|| {
            anyhow!(hypnos_core::Error::CorruptHeader(format!("{} row {}: {column} {value:?}", path.display(), n + 1)))
        })?;
        out.insert(rec.get(id_col).unwrap_or("").trim().to_string(), flag);
    }
    Ok(out)
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub id: String,
    pub minutes: f64,
    pub fs: f64,
    pub seed: u64,
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let epochs = (a.minutes * 2.0).round() as usize;
    let hyp = synth_hypnogram(epochs, 30, a.seed)?;
    let psg = synth_staged_recording(&a.id, &hyp, a.seed, a.fs)?;
    let meta = save_recording(&a.out, &psg)?;
    save_hypnogram(&a.out.join(format!("{}{HYPNOGRAM_SUFFIX}", a.id)), &hyp)?;
    info!(target: "synth", "wrote {} ({} epochs)", meta.display(), epochs);
    println!("{}", meta.display());
    Ok(())
}

pub fn fit_reference_cmd(inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let recordings = inputs.par_iter().map(|p| load_recording(p).map_err(anyhow::Error::from)).collect::<anyhow::Result<Vec<_>>>()?;
    let reference = fit_reference(&recordings)?;
    reference.save(out)?;
    info!(target: "fit-reference", "reference from {} recordings written to {}", recordings.len(), out.display());
    Ok(())
}

fn load_reference(path: Option<&Path>) -> anyhow::Result<Option<ReferenceDistribution>> {
    path.map(ReferenceDistribution::load).transpose().map_err(Into::into)
}

fn preprocess_one(psg: &PolySignalSet, reference: Option<&ReferenceDistribution>) -> anyhow::Result<PolySignalSet> {
    let (out, report) = preprocess_recording(psg, reference)?;
    info!(target: "preprocess", "{}: central EEG {}", report.recording_id, report.central.selected);
    Ok(out)
}

pub fn preprocess_cmd(inputs: &[PathBuf], out: &Path, reference: Option<&Path>) -> anyhow::Result<()> {
    let reference = load_reference(reference)?;
    inputs.par_iter().try_for_each(|input| -> anyhow::Result<()> {
        let psg = load_recording(input)?;
        let (conditioned, report) = preprocess_recording(&psg, reference.as_ref())?;
        let meta = save_recording(out, &conditioned)?;
        write_json(&out.join(format!("{}.selection.json", report.recording_id)), &report)?;
        info!(target: "preprocess", "{} -> {}", input.display(), meta.display());
        Ok(())
    })
}

pub fn encode_cmd(inputs: &[PathBuf], out: &Path, mode: EncodingMode) -> anyhow::Result<()> {
    inputs.par_iter().try_for_each(|input| -> anyhow::Result<()> {
        let psg = load_recording(input)?;
        let enc = encode_recording(&psg, mode)?;
        let path = save_encoded(out, &enc)?;
        info!(target: "encode", "{} -> {} ({mode})", input.display(), path.display());
        Ok(())
    })
}

#[derive(Serialize)]
struct MemberReport<'a> {
    member: usize,
    config: &'a NetworkConfig,
    report: &'a TrainReport,
}

pub fn train_cmd(
    encoded: &[PathBuf],
    hypnograms: &[PathBuf],
    out: &Path,
    template: &NetworkConfig,
    cfg: &PipelineConfig,
) -> anyhow::Result<()> {
    if encoded.len() != hypnograms.len() {
        bail!(hypnos_core::Error::InvalidConfig(format!(
            "{} encoded recordings but {} hypnograms",
            encoded.len(),
            hypnograms.len()
        )));
    }
    template.validate()?;
    let data = encoded
        .par_iter()
        .zip(hypnograms)
        .map(|(e, h)| -> anyhow::Result<LabeledRecording> {
            let enc = load_encoded(e)?;
            let hyp = load_hypnogram(h)?;
            let windows = windows_from_encoded(&enc, template)?;
            let targets = targets_for_windows(&hyp, windows.len(), template.segment_s);
            Ok(LabeledRecording { recording_id: enc.recording_id, windows, targets })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let members = make_ensemble(template, cfg.ensemble_size, cfg.seed);
    let trained = members
        .par_iter()
        .enumerate()
        .map(|(i, net)| -> anyhow::Result<(Model, TrainReport)> {
            let (model, report) = train(&data, net, &cfg.train)?;
            info!(
                target: "train",
                "member {i}: {} batches, best validation accuracy {:.4}",
                report.batches_run, report.best_accuracy
            );
            Ok((model, report))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let models: Vec<Model> = trained.iter().map(|(m, _)| m.clone()).collect();
    let manifest = save_ensemble(out, &models)?;
    let reports: Vec<MemberReport> = trained
        .iter()
        .enumerate()
        .map(|(member, (m, r))| MemberReport { member, config: &m.config, report: r })
        .collect();
    write_json(&out.join("train_report.json"), &reports)?;
    info!(target: "train", "ensemble of {} written to {}", models.len(), manifest.display());
    Ok(())
}

fn score_one(models: &[Model], enc: &hypnos_core::encoding::EncodedRecording, resolution_s: u32) -> anyhow::Result<EnsembleHypnodensity> {
    let members = member_hypnodensities(models, enc, Some(resolution_s))?;
    Ok(ensemble_hypnodensity(&members)?)
}

pub fn score_cmd(inputs: &[PathBuf], ensemble: &Path, out: &Path, resolution_s: u32) -> anyhow::Result<()> {
    let models = load_ensemble(ensemble)?;
    inputs.par_iter().try_for_each(|input| -> anyhow::Result<()> {
        let enc = load_encoded(input)?;
        let ens = score_one(&models, &enc, resolution_s)?;
        let path = out.join(format!("{}{HYPNODENSITY_SUFFIX}", enc.recording_id));
        write(&path, ensemble_to_csv(&ens))?;
        info!(target: "score", "{} -> {} ({} segments)", input.display(), path.display(), ens.mean.len());
        Ok(())
    })
}

fn features_for(hd: &hypnos_core::hypnodensity::Hypnodensity, hla: Option<bool>) -> anyhow::Result<FeatureVector> {
    let hyp = to_hypnogram(hd, 30)?;
    Ok(assemble(hd, &hyp, hla)?)
}

pub fn features_cmd(inputs: &[PathBuf], out: &Path, hla_table: Option<&Path>) -> anyhow::Result<()> {
    let hla = hla_table.map(|p| read_flag_table(p, "hla_positive")).transpose()?.unwrap_or_default();
    let rows = inputs
        .par_iter()
        .map(|input| -> anyhow::Result<FeatureVector> {
            let hd = load_csv(input)?;
            let fv = features_for(&hd, hla.get(&hd.recording_id).copied())?;
            info!(target: "features", "{}: {} features", fv.recording_id, fv.values.len());
            Ok(fv)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write(out, features::to_csv(&rows))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSet {
    pub members: Vec<String>,
}

pub fn load_classifiers(manifest: &Path) -> anyhow::Result<Vec<NarcolepsyClassifier>> {
    let set: ClassifierSet = read_json(manifest)?;
    if set.members.is_empty() {
        bail!(hypnos_core::Error::InvalidConfig(format!("{}: no classifiers listed", manifest.display())));
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    set.members.iter().map(|m| load_classifier(&dir.join(m)).map_err(Into::into)).collect()
}

pub fn diagnose_fit_cmd(tables: &[PathBuf], labels: &Path, out: &Path, rfe: &RfeConfig) -> anyhow::Result<()> {
    let truth = read_flag_table(labels, "narcolepsy")?;
    let fitted = tables
        .par_iter()
        .enumerate()
        .map(|(i, table)| -> anyhow::Result<String> {
            let rows = features::load_csv(table)?;
            let mut x = Vec::with_capacity(rows.len());
            let mut y = Vec::with_capacity(rows.len());
            for r in rows {
                let label = truth.get(&r.recording_id).ok_or_else(|| {
                    anyhow!(hypnos_core::Error::InvalidConfig(format!("no label for recording {}", r.recording_id)))
                })?;
                x.push(r.values);
                y.push(*label);
            }
            let clf = NarcolepsyClassifier::fit(&x, &y, rfe)?;
            let name = format!("gp{i:02}");
            let path = save_classifier(out, &name, &clf)?;
            info!(
                target: "diagnose",
                "{}: {} selected features, log marginal {:.3}",
                table.display(),
                clf.standardizer.columns.len(),
                clf.gp.log_marginal()
            );
            Ok(path.file_name().unwrap_or_default().to_string_lossy().into_owned())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_json(&out.join(CLASSIFIER_MANIFEST), &ClassifierSet { members: fitted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingDiagnosis {
    pub recording_id: String,
    #[serde(flatten)]
    pub report: DiagnosisReport,
    pub model_scores: Vec<f64>,
}

fn diagnose_vectors(
    classifiers: &[NarcolepsyClassifier],
    vectors: &[&FeatureVector],
    use_hla: bool,
    cfg: &PipelineConfig,
) -> anyhow::Result<RecordingDiagnosis> {
    let model_scores = classifiers
        .iter()
        .zip(vectors.iter().cycle())
        .map(|(c, v)| c.predict(&v.values).map(|(s, _)| s))
        .collect::<hypnos_core::Result<Vec<_>>>()?;
    let mut report = ensemble_diagnose_with(&model_scores, &cfg.thresholds)?;
    if let (true, Some(hla)) = (use_hla, vectors[0].hla_positive) {
        report = apply_hla_with(report, hla, &cfg.thresholds);
    }
    Ok(RecordingDiagnosis { recording_id: vectors[0].recording_id.clone(), report, model_scores })
}

pub fn diagnose_predict_cmd(
    manifest: &Path,
    tables: &[PathBuf],
    out: Option<&Path>,
    use_hla: bool,
    cfg: &PipelineConfig,
) -> anyhow::Result<()> {
    let classifiers = load_classifiers(manifest)?;
    if tables.len() != 1 && tables.len() != classifiers.len() {
        bail!(hypnos_core::Error::InvalidConfig(format!(
            "give one feature table or one per classifier ({}), got {}",
            classifiers.len(),
            tables.len()
        )));
    }
    let loaded = tables.iter().map(|t| features::load_csv(t)).collect::<hypnos_core::Result<Vec<_>>>()?;
    let reports = loaded[0]
        .par_iter()
        .map(|first| -> anyhow::Result<RecordingDiagnosis> {
            let vectors = loaded
                .iter()
                .map(|t| {
                    t.iter().find(|v| v.recording_id == first.recording_id).ok_or_else(|| {
                        anyhow!(hypnos_core::Error::InvalidConfig(format!(
                            "recording {} missing from a feature table",
                            first.recording_id
                        )))
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            diagnose_vectors(&classifiers, &vectors, use_hla, cfg)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let text = serde_json::to_string_pretty(&reports)? + "\n";
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn evaluate_diagnosis_cmd(reports: &Path, labels: &Path, out: &Path, thresholds: &[f64]) -> anyhow::Result<()> {
    let reports: Vec<RecordingDiagnosis> = read_json(reports)?;
    let truth = read_flag_table(labels, "narcolepsy")?;
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for r in &reports {
        let t = truth.get(&r.recording_id).ok_or_else(|| {
            anyhow!(hypnos_core::Error::InvalidConfig(format!("no label for recording {}", r.recording_id)))
        })?;
        scores.push(r.report.score);
        flags.push(*t);
    }
    let eval = evaluate(&scores, &flags, thresholds)?;
    write_json(&out.join("evaluation.json"), &eval)?;
    write(&out.join("roc.csv"), roc_to_csv(&eval))?;
    println!("auc={:.4} positives={} negatives={}", eval.auc, eval.n_positive, eval.n_negative);
    for p in &eval.operating {
        println!(
            "threshold={} sensitivity={:.4} [{:.4},{:.4}] specificity={:.4} [{:.4},{:.4}]",
            p.threshold,
            p.sensitivity,
            p.sensitivity_ci.0,
            p.sensitivity_ci.1,
            p.specificity,
            p.specificity_ci.0,
            p.specificity_ci.1
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct StagingEvaluation {
    recording_id: String,
    epoch_s: u32,
    n_scorers: usize,
    scorer_kappas: Vec<f64>,
    weighted_accuracy: Option<f64>,
    confusion: Confusion,
}

pub fn evaluate_staging_cmd(hypnodensity: &Path, scorers: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let hd = load_csv(hypnodensity)?;
    let labels = scorers.iter().map(|p| load_hypnogram(p)).collect::<hypnos_core::Result<Vec<_>>>()?;
    let Some(first) = labels.first() else {
        bail!(hypnos_core::Error::TooFewScorers { found: 0, min: 1 });
    };
    let model = to_hypnogram(&hd, first.epoch_s)?;
    let (reference, kappas, weighted) = if labels.len() >= 2 {
        let set = ScorerSet::new(labels.clone())?;
        let consensus = consensus_hypnogram(&set)?;
        let wa = weighted_accuracy(&model, &set)?;
        (consensus.hypnogram, consensus.kappas, Some(wa))
    } else {
        (first.clone(), vec![], None)
    };
    let result = StagingEvaluation {
        recording_id: hd.recording_id.clone(),
        epoch_s: first.epoch_s,
        n_scorers: labels.len(),
        scorer_kappas: kappas,
        weighted_accuracy: weighted,
        confusion: confusion(&model, &reference)?,
    };
    let text = serde_json::to_string_pretty(&result)? + "\n";
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn plot_cmd(input: &Path, out: &Path) -> anyhow::Result<()> {
    let hd = load_csv(input)?;
    write(out, render_svg(&hd))?;
    info!(target: "plot", "{} -> {}", input.display(), out.display());
    Ok(())
}

/// Paths of the four run-all artifacts.
pub fn bundle_paths(out: &Path, id: &str) -> [PathBuf; 4] {
    [
        out.join(format!("{id}{HYPNODENSITY_SUFFIX}")),
        out.join(format!("{id}.hypnodensity.svg")),
        out.join(format!("{id}.features.csv")),
        out.join(format!("{id}.diagnosis.json")),
    ]
}

pub fn run_all(cfg: &PipelineConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let recording = require(None, &cfg.paths.recording, "recording")?;
    let out = require(None, &cfg.paths.output_dir, "output directory")?;
    let ensemble = require(None, &cfg.paths.ensemble, "ensemble")?;
    let classifiers_path = require(None, &cfg.paths.classifiers, "classifier set")?;

    let psg = load_recording(&recording)?;
    let reference = load_reference(cfg.paths.reference.as_deref())?;
    let models = load_ensemble(&ensemble)?;
    let classifiers = load_classifiers(&classifiers_path)?;

    let conditioned = preprocess_one(&psg, reference.as_ref())?;
    let enc = encode_recording(&conditioned, cfg.encoding)?;
    info!(target: "encode", "{}: {} tensors", enc.recording_id, enc.tensors.len());
    let ens = score_one(&models, &enc, cfg.resolution_s)?;
    info!(target: "score", "{}: {} segments from {} models", enc.recording_id, ens.mean.len(), ens.n_models);
    let fv = features_for(&ens.mean, cfg.hla_positive)?;
    info!(target: "features", "{}: {} features", fv.recording_id, fv.values.len());
    let diagnosis = diagnose_vectors(&classifiers, &[&fv], true, cfg)?;
    info!(
        target: "diagnose",
        "{}: score {:.4} label {} (threshold {}, hla used {})",
        diagnosis.recording_id,
        diagnosis.report.score,
        diagnosis.report.label,
        diagnosis.report.threshold,
        diagnosis.report.hla_used
    );

    let [csv, svg, feats, report] = bundle_paths(&out, &psg.recording_id);
    write(&csv, ensemble_to_csv(&ens))?;
    write(&svg, render_svg(&ens.mean))?;
    write(&feats, features::to_csv(std::slice::from_ref(&fv)))?;
    write_json(&report, &diagnosis)?;
    for p in [&csv, &svg, &feats, &report] {
        println!("{}", p.display());
    }
    Ok(())
}
