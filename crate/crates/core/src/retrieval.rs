//! Cosine ranking and CMC / mAP evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{MstatError, Result};

/// Identity and camera of one query or gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemLabel {
    pub id: u32,
    pub camera: u32,
}

/// Which gallery items count for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Protocol {
    /// Same id on the same camera is discarded (standard re-ID rule).
    #[default]
    CrossCamera,
    /// Every gallery item counts.
    AllCameras,
    /// Gallery equals query; only the query itself is discarded.
    SelfRetrieval,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::CrossCamera => "cross_camera",
            Protocol::AllCameras => "all_cameras",
            Protocol::SelfRetrieval => "self",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Protocol::CrossCamera, Protocol::AllCameras, Protocol::SelfRetrieval]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

/// Ranked gallery for one query, with discarded items already removed.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    /// Gallery indices by descending similarity, ties by ascending index.
    pub order: Vec<usize>,
    /// `matches[r]`: the item at rank `r` has the query's identity.
    pub matches: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub gallery_size: usize,
    pub queries: Vec<QueryRanking>,
}

/// `S[i][j] = <q_i, g_j> / (|q_i| |g_j|)`.
pub fn cosine_similarity_matrix(q: &[Vec<f64>], g: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let unit = |rows: &[Vec<f64>], what: &str| -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n > 0.0 && n.is_finite()) {
                    return Err(MstatError::Degenerate(format!("{what} row {i} has zero norm")));
                }
                Ok(r.iter().map(|v| v / n).collect())
            })
            .collect()
    };
    let qn = unit(q, "query")?;
    let gn = unit(g, "gallery")?;
    if let (Some(a), Some(b)) = (qn.first(), gn.first()) {
        if a.len() != b.len() || qn.iter().chain(&gn).any(|r| r.len() != a.len()) {
            return Err(MstatError::Usage("query and gallery widths differ".into()));
        }
    }
    Ok(qn
        .iter()
        .map(|a| gn.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)).collect())
        .collect())
}

/// Orders every gallery by similarity and applies the protocol's discard rule.
pub fn rank(sim: &[Vec<f64>], queries: &[ItemLabel], gallery: &[ItemLabel], protocol: Protocol) -> Result<RankingResult> {
    if gallery.is_empty() {
        return Err(MstatError::Degenerate("empty gallery".into()));
    }
    if sim.len() != queries.len() || sim.iter().any(|r| r.len() != gallery.len()) {
        return Err(MstatError::Usage("similarity matrix does not match labels".into()));
    }
    if protocol == Protocol::SelfRetrieval && queries.len() != gallery.len() {
        return Err(MstatError::Usage("self retrieval needs gallery = query".into()));
    }
    let queries = sim
        .iter()
        .zip(queries)
        .enumerate()
        .map(|(qi, (row, q))| {
            let mut order: Vec<usize> = (0..gallery.len())
                .filter(|&j| {
                    let g = &gallery[j];
                    match protocol {
                        Protocol::CrossCamera => !(g.id == q.id && g.camera == q.camera),
                        Protocol::AllCameras => true,
                        Protocol::SelfRetrieval => j != qi,
                    }
                })
                .collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            let matches = order.iter().map(|&j| gallery[j].id == q.id).collect();
            QueryRanking { order, matches }
        })
        .collect();
    Ok(RankingResult {
        gallery_size: gallery.len(),
        queries,
    })
}

fn valid(r: &RankingResult) -> Result<Vec<&QueryRanking>> {
    if r.gallery_size == 0 {
        return Err(MstatError::Degenerate("empty gallery".into()));
    }
    let v: Vec<_> = r.queries.iter().filter(|q| q.matches.contains(&true)).collect();
    if v.is_empty() {
        return Err(MstatError::Degenerate("no query has a valid gallery match".into()));
    }
    Ok(v)
}

/// `cmc[k - 1]`: fraction of queries whose first match is within the top
/// `k`, for `k = 1..=gallery_size`. Queries without matches are excluded.
pub fn cmc_curve(r: &RankingResult) -> Result<Vec<f64>> {
    let qs = valid(r)?;
    let mut hits = vec![0usize; r.gallery_size];
    for q in &qs {
        let first = q.matches.iter().position(|&m| m).expect("valid query has a match");
        hits[first] += 1;
    }
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / qs.len() as f64
        })
        .collect())
}

/// Average precision of one ranked match list.
///
/// Accumulated as a reduced fraction and rounded once, so small cases are
/// exact (`{1, 3}` of 4 gives the double nearest 5/6). Falls back to
/// floating-point sums if the fraction outgrows 128 bits.
pub fn average_precision(matches: &[bool]) -> f64 {
    exact_average_precision(matches).unwrap_or_else(|| {
        let mut found = 0usize;
        let mut sum = 0.0;
        for (r, &m) in matches.iter().enumerate() {
            if m {
                found += 1;
                sum += found as f64 / (r + 1) as f64;
            }
        }
        if found == 0 {
            0.0
        } else {
            sum / found as f64
        }
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn exact_average_precision(matches: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    let mut found = 0u128;
    for (r, &m) in matches.iter().enumerate() {
        if m {
            found += 1;
            let rank = r as u128 + 1;
            num = num.checked_mul(rank)?.checked_add(found.checked_mul(den)?)?;
            den = den.checked_mul(rank)?;
            let g = gcd(num, den);
            num /= g;
            den /= g;
        }
    }
    if found == 0 {
        return Some(0.0);
    }
    den = den.checked_mul(found)?;
    let g = gcd(num, den);
    Some((num / g) as f64 / (den / g) as f64)
}

pub fn map_score(r: &RankingResult) -> Result<f64> {
    let qs = valid(r)?;
    Ok(qs.iter().map(|q| average_precision(&q.matches)).sum::<f64>() / qs.len() as f64)
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask: String,
    pub protocol: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub num_query: usize,
    pub num_gallery: usize,
    pub num_valid_query: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cmc: Option<Vec<f64>>,
}

/// Full evaluation from embeddings and labels.
pub fn evaluate(
    q: &[Vec<f64>],
    q_labels: &[ItemLabel],
    g: &[Vec<f64>],
    g_labels: &[ItemLabel],
    protocol: Protocol,
    mask: &str,
    keep_cmc: bool,
) -> Result<EvalReport> {
    let sim = cosine_similarity_matrix(q, g)?;
    let ranking = rank(&sim, q_labels, g_labels, protocol)?;
    let cmc = cmc_curve(&ranking)?;
    let at = |k: usize| cmc[(k - 1).min(cmc.len() - 1)];
    Ok(EvalReport {
        mask: mask.to_string(),
        protocol: protocol.name().to_string(),
        rank1: at(1),
        rank5: at(5),
        rank10: at(10),
        rank20: at(20),
        map: map_score(&ranking)?,
        num_query: q.len(),
        num_gallery: g.len(),
        num_valid_query: ranking.queries.iter().filter(|r| r.matches.contains(&true)).count(),
        cmc: keep_cmc.then_some(cmc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(lists: &[&[bool]]) -> RankingResult {
        RankingResult {
            gallery_size: lists.iter().map(|l| l.len()).max().unwrap(),
            queries: lists
                .iter()
                .map(|m| QueryRanking {
                    order: (0..m.len()).collect(),
                    matches: m.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn unit_rows_have_unit_diagonal() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        let s = cosine_similarity_matrix(&q, &q).unwrap();
        assert_eq!(s, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(cosine_similarity_matrix(&[vec![0.0, 0.0]], &q).is_err());
    }

    #[test]
    fn worked_cmc() {
        let r = ranking(&[&[true, false, false], &[false, true, false], &[false, true, true]]);
        let c = cmc_curve(&r).unwrap();
        assert_eq!(c, vec![1.0 / 3.0, 1.0, 1.0]);
    }

    #[test]
    fn worked_ap() {
        assert_eq!(average_precision(&[true, false, true, false]), 5.0 / 6.0);
        assert_eq!(average_precision(&[false, false]), 0.0);
        assert_eq!(map_score(&ranking(&[&[true]])).unwrap(), 1.0);
    }

    #[test]
    fn ties_resolve_by_gallery_index() {
        let labels: Vec<ItemLabel> = (0..4).map(|i| ItemLabel { id: i, camera: 1 }).collect();
        let q = [ItemLabel { id: 2, camera: 0 }];
        let r = rank(&[vec![0.5, 0.9, 0.5, 0.9]], &q, &labels, Protocol::CrossCamera).unwrap();
        assert_eq!(r.queries[0].order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn cross_camera_discards_same_camera_matches() {
        let q = [ItemLabel { id: 1, camera: 0 }];
        let g = [ItemLabel { id: 1, camera: 0 }, ItemLabel { id: 2, camera: 0 }, ItemLabel { id: 1, camera: 1 }];
        let r = rank(&[vec![1.0, 0.5, 0.2]], &q, &g, Protocol::CrossCamera).unwrap();
        assert_eq!(r.queries[0].order, vec![1, 2]);
        assert_eq!(r.queries[0].matches, vec![false, true]);
        let all = rank(&[vec![1.0, 0.5, 0.2]], &q, &g, Protocol::AllCameras).unwrap();
        assert_eq!(all.queries[0].order.len(), 3);
    }

    #[test]
    fn empty_gallery_is_degenerate() {
        assert!(rank(&[vec![]], &[ItemLabel { id: 0, camera: 0 }], &[], Protocol::CrossCamera).is_err());
        let r = RankingResult { gallery_size: 0, queries: vec![] };
        assert!(cmc_curve(&r).is_err());
    }

    #[test]
    fn report_serializes() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let ql = [ItemLabel { id: 0, camera: 0 }, ItemLabel { id: 1, camera: 0 }];
        let gl = [ItemLabel { id: 0, camera: 1 }, ItemLabel { id: 1, camera: 1 }];
        let rep = evaluate(&q, &ql, &q, &gl, Protocol::CrossCamera, "I+II+III", true).unwrap();
        assert_eq!(rep.rank1, 1.0);
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back, rep);
    }
}
