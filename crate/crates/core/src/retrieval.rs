//! Re-identification matching over grid descriptors, CMC evaluation,
//! attribute-query scoring over heat maps and precision/recall evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{self, Schedule};
use crate::representation::{l1_normalized, GridDescriptor, HeatMapStack};

/// Default vertical search band (in grid rows) of the window matcher.
pub const DEFAULT_ROW_BAND: usize = 1;

/// L1 distance between the L1-normalized forms of two vectors.
pub fn patch_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "patch vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l1_normalized(a), l1_normalized(b));
    Ok(na.iter().zip(&nb).map(|(x, y)| (x - y).abs()).sum())
}

/// For each probe window, the smallest patch distance to any gallery window
/// at most `row_band` grid rows away (any column).
pub fn directional_distances(
    probe: &GridDescriptor,
    gallery: &GridDescriptor,
    row_band: usize,
) -> Result<Vec<f64>> {
    if probe.k() != gallery.k() {
        return Err(Error::Dimension(format!(
            "descriptors with {} and {} factors",
            probe.k(),
            gallery.k()
        )));
    }
    probe
        .windows
        .iter()
        .map(|pw| {
            let mut best = f64::INFINITY;
            for gw in &gallery.windows {
                if gw.row.abs_diff(pw.row) <= row_band {
                    best = best.min(patch_distance(&pw.vector, &gw.vector)?);
                }
            }
            Ok(best)
        })
        .collect()
}

/// Symmetrized banded nearest-window distance between two images.
pub fn image_distance(probe: &GridDescriptor, gallery: &GridDescriptor, row_band: usize) -> Result<f64> {
    let forward: f64 = directional_distances(probe, gallery, row_band)?.iter().sum();
    let backward: f64 = directional_distances(gallery, probe, row_band)?.iter().sum();
    Ok(0.5 * (forward + backward))
}

/// Probe × gallery distance matrix; probe rows are computed under `schedule`.
pub fn distance_matrix(
    probes: &[GridDescriptor],
    gallery: &[GridDescriptor],
    row_band: usize,
    schedule: Schedule,
) -> Result<Vec<Vec<f64>>> {
    parallel::map_indexed(schedule, probes.len(), |p| {
        gallery
            .iter()
            .map(|g| image_distance(&probes[p], g, row_band))
            .collect::<Result<Vec<f64>>>()
    })
    .into_iter()
    .collect()
}

/// 1-based rank of the true match under ascending distance, ties broken by
/// ascending gallery index.
fn rank_of(row: &[f64], truth: usize) -> usize {
    let d = row[truth];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(g, &v)| v < d || (v == d && g < truth))
        .count()
}

/// Cumulative match characteristic: entry `r-1` is the fraction of probes
/// whose true gallery match ranks within the top `r`.
pub fn cmc_curve(distances: &[Vec<f64>], truth: &[usize]) -> Result<Vec<f64>> {
    if distances.len() != truth.len() {
        return Err(Error::Evaluation(format!(
            "{} probes but {} truth entries",
            distances.len(),
            truth.len()
        )));
    }
    if distances.is_empty() {
        return Err(Error::Empty("no probes"));
    }
    let n_gallery = distances[0].len();
    let mut hist = vec![0usize; n_gallery + 1];
    for (p, (row, &t)) in distances.iter().zip(truth).enumerate() {
        if row.len() != n_gallery {
            return Err(Error::Dimension(format!("probe {p}: ragged distance row")));
        }
        if t >= n_gallery {
            return Err(Error::Evaluation(format!(
                "probe {p}: true match {t} is not in the gallery of {n_gallery}"
            )));
        }
        hist[rank_of(row, t)] += 1;
    }
    let n = distances.len() as f64;
    let mut acc = 0usize;
    Ok((1..=n_gallery)
        .map(|r| {
            acc += hist[r];
            acc as f64 / n
        })
        .collect())
}

/// CSV table `rank,accuracy`.
pub fn cmc_csv(cmc: &[f64]) -> String {
    let mut out = String::from("rank,accuracy\n");
    for (i, a) in cmc.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, a);
    }
    out
}

/// One group of factors inside a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub factors: Vec<usize>,
    /// Factors must overlap spatially (max of the product) rather than merely
    /// co-occur (product of the maxima).
    pub colocated: bool,
}

/// Attribute query: a product of independent groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTerm {
    pub groups: Vec<QueryGroup>,
}

impl QueryTerm {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(|g| g.factors.is_empty()) {
            return Err(Error::Query("query and every group must be non-empty".into()));
        }
        if let Some(&f) = self.groups.iter().flat_map(|g| &g.factors).find(|&&f| f >= k) {
            return Err(Error::Index {
                what: "factor",
                index: f,
                limit: k,
            });
        }
        Ok(())
    }

    /// Parses `Term[+Term]...` where a term is a factor name or co-located
    /// names joined by `-`. Names may contain `-` themselves (`free-3`); a term
    /// is split into known names, longest first. `semantics` optionally overrides the
    /// co-location flag per group.
    pub fn parse(text: &str, names: &[String], semantics: Option<&[bool]>) -> Result<Self> {
        let unknown = |name: &str| Error::UnknownFactor {
            name: name.to_string(),
            suggestions: nearest_names(name, names, 3),
        };
        let mut groups = Vec::new();
        for term in text.split('+').map(str::trim) {
            if term.is_empty() {
                return Err(Error::Query(format!("empty term in '{text}'")));
            }
            let tokens: Vec<&str> = term.split('-').map(str::trim).collect();
            let factors = match segment(&tokens, names) {
                Some(f) => f,
                None => {
                    // blame the first token no name can start with, else the term
                    let bad = tokens
                        .iter()
                        .find(|t| !names.iter().any(|n| n == *t || n.starts_with(&format!("{t}-"))))
                        .copied()
                        .unwrap_or(term);
                    return Err(unknown(bad));
                }
            };
            groups.push(QueryGroup {
                colocated: factors.len() > 1,
                factors,
            });
        }
        if let Some(flags) = semantics {
            if flags.len() != groups.len() {
                return Err(Error::Query(format!(
                    "{} semantics flags for {} groups",
                    flags.len(),
                    groups.len()
                )));
            }
            for (g, &c) in groups.iter_mut().zip(flags) {
                g.colocated = c;
            }
        }
        Ok(QueryTerm { groups })
    }
}

/// Splits `-`-separated tokens into factor names, which may themselves
/// contain `-`; longer names are tried first.
fn segment(tokens: &[&str], names: &[String]) -> Option<Vec<usize>> {
    if tokens.is_empty() {
        return Some(Vec::new());
    }
    for len in (1..=tokens.len()).rev() {
        let candidate = tokens[..len].join("-");
        if let Some(i) = names.iter().position(|n| *n == candidate) {
            if let Some(mut rest) = segment(&tokens[len..], names) {
                rest.insert(0, i);
                return Some(rest);
            }
        }
    }
    None
}

/// The `n` names closest to `name` by edit distance.
pub fn nearest_names(name: &str, names: &[String], n: usize) -> Vec<String> {
    let lower = name.to_lowercase();
    let mut scored: Vec<(usize, &String)> = names
        .iter()
        .map(|c| (strsim::levenshtein(&lower, &c.to_lowercase()), c))
        .collect();
    scored.sort_by_key(|&(d, _)| d);
    scored.into_iter().take(n).map(|(_, c)| c.clone()).collect()
}

fn max_value(map: &[f64]) -> f64 {
    map.iter().cloned().fold(0.0, f64::max)
}

/// Score of one image for a query: the product over groups, where a
/// co-located group scores max over pixels of ∏ M_k and an independent one
/// scores ∏ max(M_k).
pub fn score_query(stack: &HeatMapStack, q: &QueryTerm) -> Result<f64> {
    q.validate(stack.k())?;
    let mut score = 1.0;
    for g in &q.groups {
        let group = if g.colocated && g.factors.len() > 1 {
            let first = &stack.maps[g.factors[0]];
            (0..first.len())
                .map(|p| g.factors.iter().map(|&k| stack.maps[k][p]).product::<f64>())
                .fold(0.0, f64::max)
        } else {
            g.factors.iter().map(|&k| max_value(&stack.maps[k])).product()
        };
        score *= group;
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

impl PrCurve {
    /// CSV table `threshold,precision,recall` followed by an `AP,<value>` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        let _ = writeln!(out, "AP,{}", self.average_precision);
        out
    }
}

/// Ranking by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Precision/recall after each position of the descending ranking, and
/// average precision (mean precision at the relevant hits).
pub fn pr_curve(scores: &[f64], relevance: &[bool]) -> Result<PrCurve> {
    if scores.len() != relevance.len() {
        return Err(Error::Evaluation(format!(
            "{} scores but {} relevance labels",
            scores.len(),
            relevance.len()
        )));
    }
    let n_relevant = relevance.iter().filter(|&&r| r).count();
    if n_relevant == 0 {
        return Err(Error::Evaluation("no relevant images".into()));
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    let points = rank_descending(scores)
        .into_iter()
        .enumerate()
        .map(|(pos, i)| {
            if relevance[i] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
            PrPoint {
                threshold: scores[i],
                precision: hits as f64 / (pos + 1) as f64,
                recall: hits as f64 / n_relevant as f64,
            }
        })
        .collect();
    Ok(PrCurve {
        points,
        average_precision: ap / n_relevant as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub image_id: String,
    pub score: f64,
}

/// Immutable collection of heat-map stacks sharing one factor vocabulary.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    pub factor_names: Vec<String>,
    pub stacks: Vec<HeatMapStack>,
}

impl SearchIndex {
    pub fn new(factor_names: Vec<String>, stacks: Vec<HeatMapStack>) -> Result<Self> {
        if let Some(s) = stacks.iter().find(|s| s.k() != factor_names.len()) {
            return Err(Error::Dimension(format!(
                "{}: {} maps for {} factors",
                s.image_id,
                s.k(),
                factor_names.len()
            )));
        }
        Ok(SearchIndex {
            factor_names,
            stacks,
        })
    }

    pub fn parse(&self, text: &str, semantics: Option<&[bool]>) -> Result<QueryTerm> {
        QueryTerm::parse(text, &self.factor_names, semantics)
    }

    pub fn scores(&self, q: &QueryTerm) -> Result<Vec<f64>> {
        self.stacks.iter().map(|s| score_query(s, q)).collect()
    }

    /// Images with score strictly above `min_score`, best first.
    pub fn search(&self, q: &QueryTerm, min_score: f64) -> Result<Vec<SearchHit>> {
        let scores = self.scores(q)?;
        Ok(rank_descending(&scores)
            .into_iter()
            .filter(|&i| scores[i] > min_score)
            .map(|i| SearchHit {
                image_id: self.stacks[i].image_id.clone(),
                score: scores[i],
            })
            .collect())
    }

    pub fn stack(&self, image_id: &str) -> Option<&HeatMapStack> {
        self.stacks.iter().find(|s| s.image_id == image_id)
    }
}
