//! Exact ranking over an embedding index and retrieval metrics for both
//! directions.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hybridspace::{fuse_similarities, HybridEmbedding};
use crate::index::EmbeddingIndex;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedCandidate {
    /// Position of the candidate in the index.
    pub index: usize,
    pub score: f64,
}

/// Every candidate ordered by fused score, descending; ties by candidate id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query_id: String,
    pub ranked: Vec<RankedCandidate>,
}

impl RankingResult {
    /// 1-based rank of the first candidate satisfying `relevant`.
    pub fn first_relevant_rank(&self, relevant: impl Fn(usize) -> bool) -> Option<usize> {
        self.ranked.iter().position(|c| relevant(c.index)).map(|p| p + 1)
    }

    pub fn relevance(&self, relevant: impl Fn(usize) -> bool) -> Vec<bool> {
        self.ranked.iter().map(|c| relevant(c.index)).collect()
    }
}

/// Scores every candidate with the fused similarity (both lists min-max
/// normalized over the candidate set) and sorts them.
pub fn rank_candidates(
    query_id: &str,
    query: &HybridEmbedding,
    index: &EmbeddingIndex,
    alpha: f64,
) -> Result<RankingResult> {
    if index.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let (lat, con) = index.raw_scores(query)?;
    let fused = fuse_similarities(&lat, &con, alpha)?;
    let mut ranked: Vec<RankedCandidate> = fused
        .into_iter()
        .enumerate()
        .map(|(index, score)| RankedCandidate { index, score })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| index.id(a.index).cmp(index.id(b.index)))
    });
    Ok(RankingResult {
        query_id: query_id.to_owned(),
        ranked,
    })
}

/// Percentage of queries whose first relevant item is within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Median rank; the lower middle value for an even count.
pub fn median_rank(ranks: &[usize]) -> Result<usize> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Mean over relevant items of the precision at their rank.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, _) in relevance.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        total += hits as f64 / (i + 1) as f64;
    }
    if hits == 0 {
        return Err(Error::invalid("average precision needs at least one relevant item"));
    }
    Ok(total / hits as f64)
}

/// Mean of [`average_precision`] over queries, each given as relevance
/// flags in ranked order. The values are summed in sorted order, so the
/// result does not depend on the order of the queries.
pub fn mean_ap(lists: &[Vec<bool>]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Empty("query list"));
    }
    let mut aps = lists.iter().map(|l| average_precision(l)).collect::<Result<Vec<f64>>>()?;
    aps.sort_by(f64::total_cmp);
    Ok(aps.iter().sum::<f64>() / lists.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: usize,
    pub mean_ap: f64,
}

impl MetricReport {
    /// From first-relevant ranks and ranked relevance flags per query.
    pub fn from_rankings(first_ranks: &[usize], relevance: &[Vec<bool>]) -> Result<Self> {
        Ok(MetricReport {
            r1: recall_at_k(first_ranks, 1)?,
            r5: recall_at_k(first_ranks, 5)?,
            r10: recall_at_k(first_ranks, 10)?,
            median_rank: median_rank(first_ranks)?,
            mean_ap: mean_ap(relevance)?,
        })
    }

    pub fn recall_sum(&self) -> f64 {
        self.r1 + self.r5 + self.r10
    }
}

/// Text-to-video and video-to-text metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BidirectionalReport {
    pub t2v: MetricReport,
    pub v2t: MetricReport,
}

const FIELDS: [&str; 5] = ["r1", "r5", "r10", "medr", "map"];

impl BidirectionalReport {
    /// Sum of the six recall values.
    pub fn sum_r(&self) -> f64 {
        self.t2v.recall_sum() + self.v2t.recall_sum()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>7} {:>7} {:>7} {:>6} {:>7}", "direction", "R@1", "R@5", "R@10", "Med r", "mAP");
        for (name, m) in [("t2v", &self.t2v), ("v2t", &self.v2t)] {
            let _ = writeln!(
                out,
                "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>7.4}",
                name, m.r1, m.r5, m.r10, m.median_rank, m.mean_ap
            );
        }
        let _ = writeln!(out, "SumR {:.2}", self.sum_r());
        out
    }

    /// `key=value` lines, full precision.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (name, m) in [("t2v", &self.t2v), ("v2t", &self.v2t)] {
            let _ = writeln!(out, "{name}.r1={}", m.r1);
            let _ = writeln!(out, "{name}.r5={}", m.r5);
            let _ = writeln!(out, "{name}.r10={}", m.r10);
            let _ = writeln!(out, "{name}.medr={}", m.median_rank);
            let _ = writeln!(out, "{name}.map={}", m.mean_ap);
        }
        let _ = writeln!(out, "sumr={}", self.sum_r());
        out
    }

    /// Parses the output of [`Self::to_key_values`]; other lines are ignored.
    pub fn parse_key_values(text: &str) -> Result<Self> {
        let map: HashMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |dir: &str, field: &str| -> Result<&str> {
            let key = format!("{dir}.{field}");
            map.get(key.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing metric `{key}`")))
        };
        let float = |dir: &str, field: &str| -> Result<f64> {
            let v = get(dir, field)?;
            v.parse().map_err(|_| Error::invalid(format!("bad value `{v}` for {dir}.{field}")))
        };
        let parse = |dir: &str| -> Result<MetricReport> {
            let medr = get(dir, FIELDS[3])?;
            Ok(MetricReport {
                r1: float(dir, FIELDS[0])?,
                r5: float(dir, FIELDS[1])?,
                r10: float(dir, FIELDS[2])?,
                median_rank: medr
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad value `{medr}` for {dir}.medr")))?,
                mean_ap: float(dir, FIELDS[4])?,
            })
        };
        Ok(BidirectionalReport {
            t2v: parse("t2v")?,
            v2t: parse("v2t")?,
        })
    }
}

/// Evaluates both retrieval directions.
///
/// `sentence_video[i]` names the video described by the sentence stored at
/// position `i` of `sentences`. Text-to-video ranks all videos for every
/// sentence; video-to-text ranks all sentences for every video, using the
/// first relevant sentence for R@K and Med r and all relevant ones for AP.
pub fn evaluate_bidirectional(
    videos: &EmbeddingIndex,
    sentences: &EmbeddingIndex,
    sentence_video: &[String],
    alpha: f64,
) -> Result<BidirectionalReport> {
    if sentence_video.len() != sentences.len() {
        return Err(Error::shape("ground truth", &[sentence_video.len()], &[sentences.len()]));
    }
    if videos.is_empty() || sentences.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let video_pos: HashMap<&str, usize> = videos.ids().iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let unknown: BTreeSet<&str> = sentence_video
        .iter()
        .map(String::as_str)
        .filter(|v| !video_pos.contains_key(v))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownIds {
            what: "caption videos missing from the index",
            ids: unknown.into_iter().map(str::to_owned).collect(),
        });
    }
    let truth: Vec<usize> = sentence_video.iter().map(|v| video_pos[v.as_str()]).collect();
    let mut covered = vec![false; videos.len()];
    truth.iter().for_each(|&v| covered[v] = true);
    let uncovered: Vec<String> = (0..videos.len())
        .filter(|&i| !covered[i])
        .map(|i| videos.id(i).to_owned())
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::UnknownIds {
            what: "videos without any ground-truth caption",
            ids: uncovered,
        });
    }

    let t2v: Vec<(usize, Vec<bool>)> = (0..sentences.len())
        .into_par_iter()
        .map(|i| {
            let q = stored_embedding(sentences, i);
            let r = rank_candidates(sentences.id(i), &q, videos, alpha)?;
            let rel = |c: usize| c == truth[i];
            Ok((r.first_relevant_rank(rel).expect("relevant video present"), r.relevance(rel)))
        })
        .collect::<Result<_>>()?;
    let v2t: Vec<(usize, Vec<bool>)> = (0..videos.len())
        .into_par_iter()
        .map(|v| {
            let q = stored_embedding(videos, v);
            let r = rank_candidates(videos.id(v), &q, sentences, alpha)?;
            let rel = |c: usize| truth[c] == v;
            Ok((r.first_relevant_rank(rel).expect("relevant caption present"), r.relevance(rel)))
        })
        .collect::<Result<_>>()?;

    let report = |rows: Vec<(usize, Vec<bool>)>| {
        let (ranks, rel): (Vec<usize>, Vec<Vec<bool>>) = rows.into_iter().unzip();
        MetricReport::from_rankings(&ranks, &rel)
    };
    Ok(BidirectionalReport {
        t2v: report(t2v)?,
        v2t: report(v2t)?,
    })
}

fn stored_embedding(index: &EmbeddingIndex, i: usize) -> HybridEmbedding {
    HybridEmbedding {
        latent: index.latent(i).iter().map(|&v| v as f64).collect(),
        concept: index.concept(i).iter().map(|&v| v as f64).collect(),
    }
}

/// Sorts `(score, id)` pairs the way [`rank_candidates`] does.
pub fn ranking_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}
