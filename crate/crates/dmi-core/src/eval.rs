//! Ranking metrics, retrieval evaluation over labeled pairs, the
//! per-sub-feature harness, the sub-feature-count sweep, and 2-D
//! projection export.
//!
//! Average precision follows the convention AP@K = sum of precision at
//! each relevant rank r <= K, divided by min(|relevant|, K). "top-inf"
//! means the full gallery ranking. Queries are the videos appearing in
//! labeled similar pairs (both directions), ordered by id; each queries
//! the whole remaining gallery and counts its labeled partners as
//! relevant.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::heads::{encode, HeadParams};
use crate::mat::Mat;
use crate::numerics::pca2;
use crate::retrieval::{build_index, query_topk};
use crate::trainer::TrainConfig;
use crate::{DmiError, Result};

/// Which embedding slice gets ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingVariant {
    /// Concatenated sub-features followed by the auxiliary feature.
    Global,
    /// Concatenated sub-features only.
    V,
    /// Auxiliary feature only.
    Aux,
    /// One sub-feature.
    Sub(usize),
}

impl EmbeddingVariant {
    pub fn name(&self) -> String {
        match self {
            EmbeddingVariant::Global => "global".into(),
            EmbeddingVariant::V => "v".into(),
            EmbeddingVariant::Aux => "z_s".into(),
            EmbeddingVariant::Sub(i) => format!("z_{i}"),
        }
    }
}

impl FromStr for EmbeddingVariant {
    type Err = DmiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(EmbeddingVariant::Global),
            "v" => Ok(EmbeddingVariant::V),
            "z_s" | "aux" => Ok(EmbeddingVariant::Aux),
            other => {
                if let Some(idx) = other.strip_prefix("z_") {
                    if let Ok(i) = idx.parse::<usize>() {
                        return Ok(EmbeddingVariant::Sub(i));
                    }
                }
                Err(DmiError::UnknownVariant(format!(
                    "{other:?}; expected global, v, z_s, or z_<index>"
                )))
            }
        }
    }
}

/// Retrieval quality of one embedding variant on one corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub top100_map: f64,
    pub topinf_map: f64,
    /// AP per query at the requested cutoff, in query (id) order.
    pub per_query_ap: Vec<f64>,
    pub embedding_variant: String,
}

/// AP@K with the min(|relevant|, K) normalization; `k = None` means the
/// full ranking. Returns 0 when no relevant item makes the cutoff.
pub fn average_precision_at_k(
    ranked_ids: &[&str],
    relevant: &BTreeSet<&str>,
    k: Option<usize>,
) -> Result<f64> {
    let mut seen = std::collections::HashSet::with_capacity(ranked_ids.len());
    for id in ranked_ids {
        if !seen.insert(*id) {
            return Err(DmiError::DuplicateRankedId((*id).to_string()));
        }
    }
    if let Some(k) = k {
        if k == 0 {
            return Err(DmiError::ConfigError("K must be >= 1".into()));
        }
    }
    let cutoff = k.unwrap_or(ranked_ids.len()).min(ranked_ids.len());
    let denom = relevant.len().min(k.unwrap_or(usize::MAX));
    if denom == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranked_ids[..cutoff].iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / denom as f64)
}

/// Encodes every video and returns the chosen embedding slice per video,
/// in corpus order.
pub fn embed_corpus(
    params: &HeadParams,
    corpus: &Corpus,
    variant: EmbeddingVariant,
) -> Result<(Vec<String>, Mat)> {
    if let EmbeddingVariant::Sub(i) = variant {
        if i >= params.cfg.k {
            return Err(DmiError::ConfigError(format!(
                "sub-feature index {i} out of range for k = {}",
                params.cfg.k
            )));
        }
    }
    let pooled = corpus.pooled();
    let mut ids = Vec::with_capacity(pooled.len());
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(pooled.len());
    for f in &pooled {
        let es = encode(params, &f.values)?;
        let row = match variant {
            EmbeddingVariant::Global => es.global,
            EmbeddingVariant::V => es.v,
            EmbeddingVariant::Aux => es.aux,
            EmbeddingVariant::Sub(i) => es.sub.into_iter().nth(i).expect("index checked"),
        };
        ids.push(f.video_id.clone());
        rows.push(row);
    }
    Ok((ids, Mat::from_rows(&rows)))
}

/// Ranks each similar-pair video against the rest of the gallery and
/// averages AP. Both pair directions produce queries; queries are ordered
/// by video id; the query itself is excluded from its gallery ranking.
pub fn evaluate_retrieval(
    params: &HeadParams,
    corpus: &Corpus,
    variant: EmbeddingVariant,
    k: Option<usize>,
) -> Result<EvalReport> {
    if let Some(k) = k {
        if k == 0 {
            return Err(DmiError::ConfigError("K must be >= 1".into()));
        }
    }
    // Relevance map: video -> labeled similar partners, both directions.
    let mut relevant: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in &corpus.labeled_pairs {
        if p.label == crate::corpus::PairLabel::Similar {
            relevant.entry(p.a.as_str()).or_default().insert(p.b.as_str());
            relevant.entry(p.b.as_str()).or_default().insert(p.a.as_str());
        }
    }
    if relevant.is_empty() {
        return Err(DmiError::NoQueries(
            "corpus has no labeled similar pairs".into(),
        ));
    }
    let (ids, embeddings) = embed_corpus(params, corpus, variant)?;
    let index = build_index(&ids, &embeddings)?;
    let row_of: std::collections::HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut per_query_ap = Vec::with_capacity(relevant.len());
    let mut sum100 = 0.0;
    let mut suminf = 0.0;
    for (query, partners) in &relevant {
        let row = *row_of.get(query).ok_or_else(|| {
            DmiError::DanglingPairId(format!("query {query} missing from the corpus"))
        })?;
        let ranked = query_topk(&index, embeddings.row(row), ids.len())?;
        let ranked_ids: Vec<&str> = ranked
            .hits
            .iter()
            .map(|h| h.video_id.as_str())
            .filter(|id| id != query)
            .collect();
        let ap100 = average_precision_at_k(&ranked_ids, partners, Some(100))?;
        let apinf = average_precision_at_k(&ranked_ids, partners, None)?;
        sum100 += ap100;
        suminf += apinf;
        per_query_ap.push(match k {
            Some(100) => ap100,
            None => apinf,
            Some(other) => average_precision_at_k(&ranked_ids, partners, Some(other))?,
        });
    }
    let n = per_query_ap.len() as f64;
    Ok(EvalReport {
        top100_map: sum100 / n,
        topinf_map: suminf / n,
        per_query_ap,
        embedding_variant: variant.name(),
    })
}

/// One row of the sub-feature-count sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub top100_map: f64,
    pub topinf_map: f64,
}

/// Trains one model per sub-feature count (shared seed and otherwise
/// identical config) and reports both mAP metrics per row.
pub fn sweep_subfeature_count(
    corpus: &Corpus,
    base_cfg: &TrainConfig,
    counts: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(counts.len());
    for &k in counts {
        let mut cfg = *base_cfg;
        cfg.model.k = k;
        let (params, _) = crate::trainer::train(corpus, &cfg)?;
        let report = evaluate_retrieval(&params, corpus, EmbeddingVariant::Global, Some(100))?;
        rows.push(SweepRow {
            k,
            top100_map: report.top100_map,
            topinf_map: report.topinf_map,
        });
    }
    Ok(rows)
}

/// Writes the sweep table as CSV (columns k,top100_map,topinf_map).
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| DmiError::ConfigError(format!("sweep csv write failed: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one `video_id,x,y` CSV of 2-D principal-component coordinates
/// per sub-feature matrix. Returns the written paths in sub-feature order.
pub fn export_projection(
    ids: &[String],
    sub_embeddings: &[Mat],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(sub_embeddings.len());
    for (i, m) in sub_embeddings.iter().enumerate() {
        if m.rows != ids.len() {
            return Err(DmiError::LengthMismatch(format!(
                "sub-feature {i} has {} rows for {} ids",
                m.rows,
                ids.len()
            )));
        }
        let proj = pca2(m)?;
        let path = dir.join(format!("subfeature_{i}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["video_id", "x", "y"])
            .map_err(|e| DmiError::ConfigError(format!("projection csv failed: {e}")))?;
        for (r, id) in ids.iter().enumerate() {
            w.write_record([
                id.as_str(),
                &format!("{}", proj.coords.get(r, 0)),
                &format!("{}", proj.coords.get(r, 1)),
            ])
            .map_err(|e| DmiError::ConfigError(format!("projection csv failed: {e}")))?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes an EvalReport as JSON.
pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| DmiError::ConfigError(format!("report serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}
