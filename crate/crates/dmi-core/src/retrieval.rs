//! Exact cosine retrieval: a normalized gallery index, top-K queries, and
//! similarity matrices with CSV/PGM export.
//!
//! Galleries at this scale need no approximate structures, so queries do a
//! full scan and an exact partial sort. Ranking ties break by ascending
//! video id, which makes results independent of gallery insertion order.

use std::io::Write;
use std::path::Path;

use crate::mat::{dot, l2_norm, Mat};
use crate::{DmiError, Result};

/// Immutable gallery of unit-normalized embeddings.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    pub ids: Vec<String>,
    /// n x m, every row unit-normalized.
    pub embeddings: Mat,
    pub m: usize,
}

/// One ranked gallery hit.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedHit {
    pub video_id: String,
    /// Cosine similarity in [-1, 1].
    pub score: f64,
}

/// Query result: hits sorted by score descending, ties by ascending id,
/// at most K entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedResult {
    pub hits: Vec<RankedHit>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.video_id.as_str()).collect()
    }
}

const ZERO_NORM: f64 = 1e-12;

/// Builds the immutable index: ids must be distinct and every embedding
/// nonzero; rows are unit-normalized on the way in.
pub fn build_index(ids: &[String], embeddings: &Mat) -> Result<GalleryIndex> {
    if ids.len() != embeddings.rows {
        return Err(DmiError::LengthMismatch(format!(
            "{} ids for {} embedding rows",
            ids.len(),
            embeddings.rows
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(DmiError::DuplicateId(id.clone()));
        }
    }
    let mut rows = embeddings.clone();
    for (r, id) in ids.iter().enumerate() {
        let row = rows.row_mut(r);
        let n = l2_norm(row);
        if n <= ZERO_NORM {
            return Err(DmiError::ZeroVector(format!("embedding of video {id}")));
        }
        for x in row {
            *x /= n;
        }
    }
    Ok(GalleryIndex { ids: ids.to_vec(), m: embeddings.cols, embeddings: rows })
}

/// Exact top-K by cosine similarity. Ties break by ascending video id.
pub fn query_topk(index: &GalleryIndex, q: &[f64], k: usize) -> Result<RankedResult> {
    if q.len() != index.m {
        return Err(DmiError::DimensionMismatch(format!(
            "query has dim {}, index has {}",
            q.len(),
            index.m
        )));
    }
    if k == 0 {
        return Err(DmiError::ConfigError("K must be >= 1".into()));
    }
    let qn = l2_norm(q);
    if qn <= ZERO_NORM {
        return Err(DmiError::ZeroVector("query embedding".into()));
    }
    let unit: Vec<f64> = q.iter().map(|x| x / qn).collect();
    let mut hits: Vec<RankedHit> = index
        .ids
        .iter()
        .enumerate()
        .map(|(r, id)| RankedHit {
            video_id: id.clone(),
            score: dot(index.embeddings.row(r), &unit),
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("cosine scores are finite")
            .then_with(|| a.video_id.cmp(&b.video_id))
    });
    hits.truncate(k);
    Ok(RankedResult { hits })
}

/// Pairwise cosines: entry (i, j) = cosine(a_i, b_j). Zero rows score 0.
pub fn similarity_matrix(set_a: &Mat, set_b: &Mat) -> Result<Mat> {
    if set_a.cols != set_b.cols {
        return Err(DmiError::DimensionMismatch(format!(
            "row sets have dims {} and {}",
            set_a.cols, set_b.cols
        )));
    }
    let na: Vec<f64> = set_a.iter_rows().map(|r| l2_norm(r).max(ZERO_NORM)).collect();
    let nb: Vec<f64> = set_b.iter_rows().map(|r| l2_norm(r).max(ZERO_NORM)).collect();
    let mut out = Mat::zeros(set_a.rows, set_b.rows);
    for i in 0..set_a.rows {
        let ri = set_a.row(i);
        for j in 0..set_b.rows {
            out.set(i, j, dot(ri, set_b.row(j)) / (na[i] * nb[j]));
        }
    }
    Ok(out)
}

/// Writes a similarity matrix as CSV with video-id row/column headers.
pub fn export_similarity_csv(
    sim: &Mat,
    row_ids: &[String],
    col_ids: &[String],
    path: &Path,
) -> Result<()> {
    if row_ids.len() != sim.rows || col_ids.len() != sim.cols {
        return Err(DmiError::LengthMismatch(format!(
            "{}x{} matrix with {} row ids and {} col ids",
            sim.rows,
            sim.cols,
            row_ids.len(),
            col_ids.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(col_ids.iter().cloned());
    w.write_record(&header)
        .map_err(|e| DmiError::ConfigError(format!("csv write failed: {e}")))?;
    for (r, id) in row_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(sim.row(r).iter().map(|s| format!("{s}")));
        w.write_record(&rec)
            .map_err(|e| DmiError::ConfigError(format!("csv write failed: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a similarity matrix as an 8-bit binary PGM image, mapping scores
/// linearly from [-1, 1] to [0, 255].
pub fn export_similarity_pgm(sim: &Mat, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(64 + sim.rows * sim.cols);
    write!(bytes, "P5\n{} {}\n255\n", sim.cols, sim.rows)?;
    for s in &sim.data {
        let v = ((s + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
        bytes.push(v);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:04}")).collect()
    }

    fn random_mat(seed: u64, rows: usize, cols: usize) -> Mat {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn index_rows_are_unit_normalized() {
        let m = random_mat(1, 50, 7);
        let index = build_index(&ids(50), &m).unwrap();
        for row in index.embeddings.iter_rows() {
            assert_relative_eq!(l2_norm(row), 1.0, epsilon = 1e-9);
        }
        assert_eq!(index.ids.len(), 50);
    }

    #[test]
    fn duplicate_ids_are_named() {
        let m = random_mat(2, 3, 4);
        let mut bad = ids(3);
        bad[2] = bad[0].clone();
        match build_index(&bad, &m) {
            Err(DmiError::DuplicateId(id)) => assert_eq!(id, "v0000"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn zero_embeddings_are_rejected() {
        let mut m = random_mat(3, 3, 4);
        m.row_mut(1).fill(0.0);
        match build_index(&ids(3), &m) {
            Err(DmiError::ZeroVector(msg)) => assert!(msg.contains("v0001")),
            other => panic!("expected ZeroVector, got {other:?}"),
        }
    }

    #[test]
    fn exact_copy_ranks_first_with_unit_score() {
        let m = random_mat(4, 20, 6);
        let index = build_index(&ids(20), &m).unwrap();
        let q: Vec<f64> = m.row(7).to_vec();
        let out = query_topk(&index, &q, 5).unwrap();
        assert_eq!(out.hits[0].video_id, "v0007");
        assert_relative_eq!(out.hits[0].score, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn orthogonal_query_scores_zero() {
        // Gallery spans the first two axes; the query sits on the third.
        let m = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]);
        let index = build_index(&ids(2), &m).unwrap();
        let out = query_topk(&index, &[0.0, 0.0, 3.0], 2).unwrap();
        for hit in &out.hits {
            assert_relative_eq!(hit.score, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn ranking_matches_full_sort_oracle() {
        let m = random_mat(5, 500, 9);
        let index = build_index(&ids(500), &m).unwrap();
        let q: Vec<f64> = random_mat(6, 1, 9).data;
        let out = query_topk(&index, &q, 100).unwrap();
        assert_eq!(out.hits.len(), 100);
        // Brute-force oracle: full argsort of all cosines.
        let qn = l2_norm(&q);
        let mut oracle: Vec<(String, f64)> = (0..500)
            .map(|r| {
                let row = index.embeddings.row(r);
                (index.ids[r].clone(), dot(row, &q) / qn)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        for (hit, (oid, oscore)) in out.hits.iter().zip(&oracle) {
            assert_eq!(&hit.video_id, oid);
            assert_relative_eq!(hit.score, *oscore, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_k_query_agrees_with_similarity_matrix_row() {
        let m = random_mat(7, 40, 5);
        let index = build_index(&ids(40), &m).unwrap();
        let q: Vec<f64> = random_mat(8, 1, 5).data;
        let ranked = query_topk(&index, &q, 40).unwrap();
        let qm = Mat { rows: 1, cols: 5, data: q };
        let sims = similarity_matrix(&qm, &m).unwrap();
        // Every ranked score appears in the similarity row, in sorted order.
        let mut row: Vec<f64> = sims.row(0).to_vec();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (hit, expect) in ranked.hits.iter().zip(&row) {
            assert_relative_eq!(hit.score, *expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn scaled_queries_rank_identically() {
        let m = random_mat(9, 30, 6);
        let index = build_index(&ids(30), &m).unwrap();
        let q: Vec<f64> = random_mat(10, 1, 6).data;
        let doubled: Vec<f64> = q.iter().map(|x| 2.0 * x).collect();
        let a = query_topk(&index, &q, 10).unwrap();
        let b = query_topk(&index, &doubled, 10).unwrap();
        assert_eq!(a, b, "cosine is scale-invariant");
    }

    #[test]
    fn results_are_independent_of_insertion_order() {
        let m = random_mat(11, 25, 4);
        let names = ids(25);
        let index = build_index(&names, &m).unwrap();
        // Reverse the gallery order.
        let rev_ids: Vec<String> = names.iter().rev().cloned().collect();
        let rev_rows: Vec<Vec<f64>> = (0..25).rev().map(|r| m.row(r).to_vec()).collect();
        let rev = build_index(&rev_ids, &Mat::from_rows(&rev_rows)).unwrap();
        let q: Vec<f64> = random_mat(12, 1, 4).data;
        assert_eq!(
            query_topk(&index, &q, 25).unwrap(),
            query_topk(&rev, &q, 25).unwrap()
        );
    }

    #[test]
    fn identical_sets_have_unit_diagonal() {
        let m = random_mat(13, 12, 5);
        let sims = similarity_matrix(&m, &m).unwrap();
        for i in 0..12 {
            assert_relative_eq!(sims.get(i, i), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn two_by_two_cosines_match_hand_arithmetic() {
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        let b = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]);
        let s = similarity_matrix(&a, &b).unwrap();
        assert_relative_eq!(s.get(0, 0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.get(0, 1), 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.get(1, 0), 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s.get(1, 1), 1.0 / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn pair_count_scale_export_shape() {
        // The inspection protocol pairs 978 queries against 978 partners.
        let a = random_mat(14, 978, 8);
        let b = random_mat(15, 978, 8);
        let s = similarity_matrix(&a, &b).unwrap();
        assert_eq!((s.rows, s.cols), (978, 978));
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let a = random_mat(16, 3, 4);
        let b = random_mat(17, 3, 5);
        assert!(matches!(
            similarity_matrix(&a, &b),
            Err(DmiError::DimensionMismatch(_))
        ));
        let index = build_index(&ids(3), &a).unwrap();
        assert!(matches!(
            query_topk(&index, &[1.0; 5], 2),
            Err(DmiError::DimensionMismatch(_))
        ));
        assert!(matches!(
            query_topk(&index, &[0.0; 4], 2),
            Err(DmiError::ZeroVector(_))
        ));
    }

    #[test]
    fn exports_write_parseable_files() {
        let m = Mat::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.5]]);
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("sim.csv");
        let pgm_path = dir.path().join("sim.pgm");
        let names = ids(2);
        export_similarity_csv(&m, &names, &names, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with(",v0000,v0001\n"));
        assert!(text.contains("v0000,1,-1"));

        export_similarity_pgm(&m, &pgm_path).unwrap();
        let bytes = std::fs::read(&pgm_path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let pixels = &bytes[bytes.len() - 4..];
        // [-1,1] -> [0,255]: 1 -> 255, -1 -> 0, 0 -> 128, 0.5 -> 191.
        assert_eq!(pixels, &[255, 0, 128, 191]);
    }
}
