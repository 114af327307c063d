//! Metrics for a generation run against its reference clips, and the
//! cross-run comparison table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec_features::LatentFeature;
use crate::embedder::{embed_text, AudioEmbedder, PrototypeTable};
use crate::error::{Error, Result};
use crate::harness::data::{embedder, DataDir};
use crate::harness::generate::read_features;
use crate::harness::train::RunInfo;
use crate::metrics::{clap_score, fad, inception_score, kl_event, EventClassifier, MetricReport};

/// `report.json`: the four metrics plus the row descriptors of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub model: String,
    pub train_retrieval: String,
    pub infer_retrieval: String,
    pub pool: String,
    pub k: usize,
    pub split: String,
}

/// Metrics of `generated` against `references` (same ids), captions from `captions`.
pub fn compute_metrics(
    generated: &[(String, LatentFeature)],
    references: &HashMap<String, LatentFeature>,
    captions: &HashMap<String, String>,
    emb: &dyn AudioEmbedder,
    table: &PrototypeTable,
    temperature: f64,
    config_hash: &str,
) -> Result<MetricReport> {
    if generated.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let classifier = EventClassifier::new(emb, table, temperature)?;
    let mut gen_post = Vec::new();
    let mut ref_post = Vec::new();
    let mut gen_emb = Vec::new();
    let mut ref_emb = Vec::new();
    let mut text_emb = Vec::new();
    for (id, f) in generated {
        let r = references
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("missing reference for {id}")))?;
        let caption = captions
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("missing caption for {id}")))?;
        gen_post.push(classifier.classify_event(f)?);
        ref_post.push(classifier.classify_event(r)?);
        let g = emb.embed_audio(f)?;
        gen_emb.push(g.to_f64());
        ref_emb.push(emb.embed_audio(r)?.to_f64());
        text_emb.push((g, embed_text(caption, table)?));
    }
    let (gens, texts): (Vec<_>, Vec<_>) = text_emb.into_iter().unzip();
    Ok(MetricReport {
        is: inception_score(&gen_post)?,
        clap_pct: clap_score(&gens, &texts)?,
        kl: kl_event(&ref_post, &gen_post)?,
        fad: fad(&ref_emb, &gen_emb)?,
        n_samples: generated.len(),
        config_hash: config_hash.to_string(),
    })
}

/// Evaluates `gen_dir` against `reference_split` and writes `report.json` and
/// `report.txt` into `out` (defaults to `gen_dir`).
pub fn evaluate(gen_dir: &Path, data: &DataDir, reference_split: &str, out: Option<&Path>) -> Result<EvalReport> {
    let feat_path = gen_dir.join("generated.feat");
    if !feat_path.exists() {
        return Err(Error::Invalid(format!("no generated features in {}", gen_dir.display())));
    }
    let generated = read_features(&feat_path)?;
    let info = RunInfo::load(gen_dir)?;
    let cfg = data.config()?;
    let run_cfg = crate::harness::config::ExperimentConfig::load(&gen_dir.join("config.toml"))?;
    let entries = data.manifest(reference_split)?;
    if entries.is_empty() {
        return Err(Error::Invalid(format!("reference split {reference_split} is empty")));
    }
    let extractor = data.extractor(&cfg)?;
    let references = data.features(&extractor, &entries)?;
    let frames = generated.first().map(|g| g.1.n_frames()).unwrap_or(0);
    // Compare equal-length clips: references are cropped to the generated length.
    let references = references
        .into_iter()
        .map(|(id, f)| {
            let n = f.n_frames().min(frames.max(1));
            let d = f.dim();
            let cropped = LatentFeature::new(f.as_slice()[..n * d].to_vec(), n, d, f.frame_rate())?;
            Ok((id, cropped))
        })
        .collect::<Result<HashMap<_, _>>>()?;
    let captions = entries.iter().map(|e| (e.id.clone(), e.caption.clone())).collect();
    let metrics = compute_metrics(
        &generated,
        &references,
        &captions,
        &embedder(&cfg)?,
        &data.prototypes()?,
        run_cfg.eval.temperature,
        &info.config_hash,
    )?;
    let report = EvalReport {
        metrics,
        model: info.model,
        train_retrieval: info.train_retrieval,
        infer_retrieval: info.infer_retrieval,
        pool: info.pool,
        k: info.k,
        split: reference_split.to_string(),
    };
    let out = out.unwrap_or(gen_dir);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(out.join("report.txt"), format_table(&[(gen_dir.display().to_string(), report.clone())]))?;
    Ok(report)
}

/// Metric columns with their preferred direction (`true` = higher is better).
const COLUMNS: [(&str, bool); 4] = [("IS", true), ("CLAP(%)", true), ("KL", false), ("FAD", false)];

fn values(r: &EvalReport) -> [f64; 4] {
    [r.metrics.is, r.metrics.clap_pct, r.metrics.kl, r.metrics.fad]
}

/// Aligned table; the best value per column is marked with `*`.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let mut best = [f64::NAN; 4];
    for (_, r) in rows {
        for (c, v) in values(r).into_iter().enumerate() {
            let better = if COLUMNS[c].1 { v > best[c] } else { v < best[c] };
            if best[c].is_nan() || better {
                best[c] = v;
            }
        }
    }
    let header: Vec<String> = ["Run", "Model", "K", "Train", "Infer", "Pool"]
        .iter()
        .map(|s| s.to_string())
        .chain(COLUMNS.iter().map(|(n, up)| format!("{n} {}", if *up { "↑" } else { "↓" })))
        .collect();
    let mut table: Vec<Vec<String>> = vec![header];
    for (name, r) in rows {
        let mut row = vec![
            name.clone(),
            r.model.clone(),
            r.k.to_string(),
            r.train_retrieval.clone(),
            r.infer_retrieval.clone(),
            r.pool.clone(),
        ];
        for (c, v) in values(r).into_iter().enumerate() {
            let mark = if rows.len() > 1 && v == best[c] { "*" } else { "" };
            row.push(format!("{v:.3}{mark}"));
        }
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Comparison table over run directories holding `report.json`.
pub fn report(run_dirs: &[PathBuf]) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::Invalid("no runs given".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let path = dir.join("report.json");
        let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&path)?)?;
        let keys: Vec<&str> = ["is", "clap_pct", "kl", "fad"]
            .into_iter()
            .filter(|k| value.get(*k).is_none())
            .collect();
        if !keys.is_empty() {
            return Err(Error::Invalid(format!(
                "{} lacks metrics {keys:?}",
                path.display()
            )));
        }
        let r: EvalReport = serde_json::from_value(value)?;
        rows.push((dir.display().to_string(), r));
    }
    let (split, n) = (&rows[0].1.split, rows[0].1.metrics.n_samples);
    if let Some((name, _)) = rows.iter().find(|(_, r)| &r.split != split || r.metrics.n_samples != n) {
        return Err(Error::Invalid(format!(
            "{name} was evaluated on a different reference set"
        )));
    }
    rows.sort_by(|a, b| {
        (a.1.model.as_str(), a.1.train_retrieval.as_str(), a.1.infer_retrieval.as_str(), a.1.k, &a.0).cmp(&(
            b.1.model.as_str(),
            b.1.train_retrieval.as_str(),
            b.1.infer_retrieval.as_str(),
            b.1.k,
            &b.0,
        ))
    });
    Ok(format_table(&rows))
}
