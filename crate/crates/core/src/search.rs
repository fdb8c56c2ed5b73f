//! Posterior-guided sampling and ranking of inherited-weight candidates.

use std::cmp::Ordering;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architecture::{prune_any, Architecture};
use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objective::classification_metrics;
use crate::rng::derive_seed;
use crate::sampler::{logit, sample_hard_logits, MaskSample};
use crate::space::{SearchSpaceSpec, SliceLayout};
use crate::supernet::SuperNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub candidates: usize,
    pub seed: u64,
    /// Resample masks that leave some layer without an active slice.
    pub reject_empty: bool,
    pub max_retries: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            candidates: 200,
            seed: 0,
            reject_empty: true,
            max_retries: 64,
        }
    }
}

impl SearchConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.candidates == 0 {
            v.push("search.candidates must be at least 1".into());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateReport {
    pub index: usize,
    /// Seed of the accepted draw (after any retries).
    pub seed: u64,
    pub architecture: Architecture,
    pub accuracy: f64,
    pub loss: f64,
    pub param_count: usize,
    pub eval_wall_time_s: f64,
}

/// Ranking order: higher accuracy, then lower loss, fewer parameters, lower index.
pub fn rank_order(a: &CandidateReport, b: &CandidateReport) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(a.loss.total_cmp(&b.loss))
        .then(a.param_count.cmp(&b.param_count))
        .then(a.index.cmp(&b.index))
}

pub fn candidate_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "search/candidate", index as u64)
}

/// Draws candidate `index` from per-slice keep logits.
fn draw(layout: &SliceLayout, logits: &[f64], cfg: &SearchConfig, index: usize) -> Result<MaskSample> {
    let base = candidate_seed(cfg.seed, index);
    let mut mask = sample_hard_logits(logits, base);
    if !cfg.reject_empty {
        return Ok(mask);
    }
    let mut attempt = 0;
    while !Architecture::new(layout, mask.bits())?.has_path() {
        if attempt == cfg.max_retries {
            return Err(Error::RetryBudgetExhausted {
                index,
                retries: cfg.max_retries,
            });
        }
        attempt += 1;
        mask = sample_hard_logits(logits, derive_seed(base, "retry", attempt as u64));
    }
    Ok(mask)
}

/// Hard masks from arbitrary per-slice keep logits. Candidate `i` depends only on
/// `(seed, i)`, so shorter lists are prefixes of longer ones.
pub fn sample_from_logits(layout: &SliceLayout, logits: &[f64], cfg: &SearchConfig) -> Result<Vec<MaskSample>> {
    if logits.len() != layout.num_slices() {
        return Err(Error::InvalidArgument(format!(
            "{} keep logits for {} slices",
            logits.len(),
            layout.num_slices()
        )));
    }
    (0..cfg.candidates).map(|i| draw(layout, logits, cfg, i)).collect()
}

pub fn sample_candidates(net: &SuperNet, cfg: &SearchConfig) -> Result<Vec<MaskSample>> {
    sample_from_logits(net.layout(), &net.keep_logits_per_slice(), cfg)
}

/// Logits realizing a fixed keep probability on every slice.
pub fn fixed_logits(layout: &SliceLayout, p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("fixed keep probability {p} outside (0, 1)")));
    }
    Ok(vec![logit(p); layout.num_slices()])
}

/// Validation inputs materialized once for repeated candidate evaluation.
pub struct EvalSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn new(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("validation set is empty".into()));
        }
        let (inputs, labels) = data.all()?;
        Ok(Self { inputs, labels })
    }
}

/// Accuracy and loss of `arch` with inherited weights. Headless architectures are
/// scored too; their logits are the head bias.
pub fn score_architecture(net: &SuperNet, arch: &Architecture, val: &EvalSet) -> Result<(f64, f64)> {
    let logits = prune_any(net, arch)?.forward(&val.inputs)?;
    classification_metrics(&logits, &val.labels)
}

pub fn evaluate_candidate(
    net: &SuperNet,
    index: usize,
    mask: &MaskSample,
    val: &EvalSet,
) -> Result<CandidateReport> {
    let start = Instant::now();
    let architecture = derive_architecture(net.layout(), mask)?;
    let (accuracy, loss) = score_architecture(net, &architecture, val)?;
    Ok(CandidateReport {
        index,
        seed: mask.seed,
        param_count: architecture.param_count(),
        architecture,
        accuracy,
        loss,
        eval_wall_time_s: start.elapsed().as_secs_f64(),
    })
}

pub fn evaluate_masks(net: &SuperNet, masks: &[MaskSample], val: &EvalSet) -> Result<Vec<CandidateReport>> {
    masks
        .par_iter()
        .enumerate()
        .map(|(i, m)| evaluate_candidate(net, i, m, val))
        .collect()
}

/// Best report under [`rank_order`].
pub fn rank_and_select(reports: &[CandidateReport]) -> Result<&CandidateReport> {
    reports
        .iter()
        .min_by(|a, b| rank_order(a, b))
        .ok_or_else(|| Error::InvalidArgument("no candidates to rank".into()))
}

/// Best of the first `c` reports.
pub fn best_of(reports: &[CandidateReport], c: usize) -> Result<&CandidateReport> {
    rank_and_select(&reports[..c.min(reports.len())])
}

pub fn derive_architecture(layout: &SliceLayout, mask: &MaskSample) -> Result<Architecture> {
    Architecture::from_mask(layout, mask)
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub reports: Vec<CandidateReport>,
    /// Position of the winner in `reports`.
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_report(&self) -> &CandidateReport {
        &self.reports[self.best]
    }
}

/// Samples, evaluates and ranks candidates. Fails if the snapshot changes.
pub fn run_search(net: &SuperNet, val: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let before = net.digest();
    let eval = EvalSet::new(val)?;
    let masks = sample_candidates(net, cfg)?;
    let reports = evaluate_masks(net, &masks, &eval)?;
    if net.digest() != before {
        return Err(Error::InvalidArgument("snapshot changed during search".into()));
    }
    let best = rank_and_select(&reports)?.index;
    Ok(SearchOutcome { reports, best })
}

/// One line of the search report. Wall times are left out so reports are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportLine {
    Candidate {
        index: usize,
        seed: u64,
        accuracy: f64,
        loss: f64,
        param_count: usize,
        architecture_digest: String,
        /// One character per slice in layout order.
        active: String,
    },
    Summary {
        spec_digest: String,
        candidates: usize,
        best_index: usize,
        accuracy: f64,
        loss: f64,
        param_count: usize,
        architecture_digest: String,
    },
}

fn bit_string(arch: &Architecture) -> String {
    arch.bits().iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn report_line(r: &CandidateReport) -> ReportLine {
    ReportLine::Candidate {
        index: r.index,
        seed: r.seed,
        accuracy: r.accuracy,
        loss: r.loss,
        param_count: r.param_count,
        architecture_digest: r.architecture.digest(),
        active: bit_string(&r.architecture),
    }
}

pub fn summary_line(reports: &[CandidateReport], best: &CandidateReport) -> ReportLine {
    ReportLine::Summary {
        spec_digest: best.architecture.layout().spec_digest().to_string(),
        candidates: reports.len(),
        best_index: best.index,
        accuracy: best.accuracy,
        loss: best.loss,
        param_count: best.param_count,
        architecture_digest: best.architecture.digest(),
    }
}

pub fn search_report_jsonl(reports: &[CandidateReport], best: &CandidateReport) -> String {
    let mut out = String::new();
    for line in reports.iter().map(report_line).chain([summary_line(reports, best)]) {
        out.push_str(&serde_json::to_string(&line).expect("report line serializes"));
        out.push('\n');
    }
    out
}

pub fn export_search_report(path: &Path, reports: &[CandidateReport], best: &CandidateReport) -> Result<()> {
    write_atomic(path, search_report_jsonl(reports, best).as_bytes())
}

/// Parses a search report back into candidates (wall times zero) and the summary.
pub fn parse_search_report(text: &str, spec: &SearchSpaceSpec) -> Result<(Vec<CandidateReport>, ReportLine)> {
    let layout = SliceLayout::new(spec);
    let mut reports = Vec::new();
    let mut summary = None;
    for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| Error::InvalidArgument(format!("search report line {}: {m}", n + 1));
        if summary.is_some() {
            return Err(bad("content after the summary".into()));
        }
        match serde_json::from_str::<ReportLine>(raw).map_err(|e| bad(e.to_string()))? {
            ReportLine::Candidate {
                index,
                seed,
                accuracy,
                loss,
                param_count,
                architecture_digest,
                active,
            } => {
                let bits: Vec<bool> = active.chars().map(|c| c == '1').collect();
                let architecture = Architecture::new(&layout, bits)?;
                if architecture.digest() != architecture_digest || architecture.param_count() != param_count {
                    return Err(bad("architecture does not match its digest or parameter count".into()));
                }
                reports.push(CandidateReport {
                    index,
                    seed,
                    architecture,
                    accuracy,
                    loss,
                    param_count,
                    eval_wall_time_s: 0.0,
                });
            }
            s @ ReportLine::Summary { .. } => summary = Some(s),
        }
    }
    let summary = summary.ok_or_else(|| Error::InvalidArgument("search report has no summary line".into()))?;
    Ok((reports, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::supernet::tests::small_spec;
    use crate::supernet::InitConfig;

    fn net() -> SuperNet {
        SuperNet::build(&small_spec(), 11, &InitConfig::default()).unwrap()
    }

    fn val(n: usize) -> Dataset {
        let x = crate::supernet::tests::random_inputs(n, 5);
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new([2, 4, 4], 3, x.data().to_vec(), labels, "test").unwrap()
    }

    fn report(index: usize, accuracy: f64, loss: f64) -> CandidateReport {
        let n = net();
        CandidateReport {
            index,
            seed: 0,
            architecture: Architecture::full(n.layout()),
            accuracy,
            loss,
            param_count: 10,
            eval_wall_time_s: 0.0,
        }
    }

    #[test]
    fn near_one_keep_gives_full_architecture() {
        let mut n = net();
        for (_, t) in n.params_mut().into_iter().filter(|(k, _)| k.contains("keep")) {
            t.data_mut().iter_mut().for_each(|v| *v = 40.0);
        }
        let cfg = SearchConfig {
            candidates: 1,
            ..Default::default()
        };
        let masks = sample_candidates(&n, &cfg).unwrap();
        assert_eq!(masks[0].bits(), vec![true; n.layout().num_slices()]);
    }

    #[test]
    fn sampling_is_replayable_and_nested() {
        let n = net();
        let cfg = SearchConfig {
            candidates: 30,
            seed: 4,
            ..Default::default()
        };
        let a = sample_candidates(&n, &cfg).unwrap();
        assert_eq!(a, sample_candidates(&n, &cfg).unwrap());
        let short = sample_candidates(&n, &SearchConfig { candidates: 7, ..cfg.clone() }).unwrap();
        assert_eq!(&a[..7], &short[..]);
    }

    #[test]
    fn empty_masks_are_resampled() {
        let n = net();
        let logits = fixed_logits(n.layout(), 0.05).unwrap();
        let cfg = SearchConfig {
            candidates: 50,
            ..Default::default()
        };
        for m in sample_from_logits(n.layout(), &logits, &cfg).unwrap() {
            assert!(Architecture::from_mask(n.layout(), &m).unwrap().has_path());
        }
        let strict = SearchConfig {
            max_retries: 0,
            ..cfg.clone()
        };
        let tiny = fixed_logits(n.layout(), 1e-6).unwrap();
        assert!(matches!(
            sample_from_logits(n.layout(), &tiny, &strict),
            Err(Error::RetryBudgetExhausted { index: 0, .. })
        ));
        let loose = SearchConfig {
            reject_empty: false,
            ..cfg
        };
        assert!(sample_from_logits(n.layout(), &tiny, &loose).is_ok());
    }

    #[test]
    fn full_mask_scores_like_the_supernet() {
        let n = net();
        let v = val(12);
        let eval = EvalSet::new(&v).unwrap();
        let r = evaluate_candidate(&n, 0, &MaskSample::ones(n.layout().num_slices()), &eval).unwrap();
        let full = classification_metrics(&n.forward(&eval.inputs).unwrap(), &eval.labels).unwrap();
        assert_eq!((r.accuracy, r.loss), full);
        assert_eq!(r.param_count, n.full_param_count());
    }

    #[test]
    fn zero_mask_predicts_from_the_bias() {
        let n = net();
        let v = val(12);
        let eval = EvalSet::new(&v).unwrap();
        let r = evaluate_candidate(&n, 0, &MaskSample::zeros(n.layout().num_slices()), &eval).unwrap();
        // Zero head bias: all logits tie, argmax picks class 0.
        assert_eq!(r.accuracy, 4.0 / 12.0);
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_validation_set_is_an_error() {
        let n = net();
        let empty = Dataset::new([2, 4, 4], 3, vec![], vec![], "e").unwrap();
        assert!(run_search(&n, &empty, &SearchConfig::default()).is_err());
    }

    #[test]
    fn ranking_tiebreaks() {
        assert_eq!(rank_and_select(&[report(3, 0.5, 1.0)]).unwrap().index, 3);
        let rs = [report(0, 0.8, 0.7), report(1, 0.8, 0.6), report(2, 0.7, 0.1)];
        assert_eq!(rank_and_select(&rs).unwrap().index, 1);
        let mut small = report(5, 0.8, 0.6);
        small.param_count = 9;
        assert_eq!(rank_and_select(&[rs[1].clone(), small.clone()]).unwrap().index, 5);
        let mut twin = small.clone();
        twin.index = 2;
        assert_eq!(rank_and_select(&[small, twin]).unwrap().index, 2);
        assert!(rank_and_select(&[]).is_err());
    }

    #[test]
    fn search_matches_prune_then_evaluate_and_leaves_snapshot() {
        let n = net();
        let before = n.clone();
        let v = val(20);
        let cfg = SearchConfig {
            candidates: 25,
            seed: 9,
            ..Default::default()
        };
        let out = run_search(&n, &v, &cfg).unwrap();
        assert_eq!(n, before);
        let eval = EvalSet::new(&v).unwrap();
        for r in &out.reports {
            let logits = crate::architecture::prune(&n, &r.architecture).unwrap().forward(&eval.inputs).unwrap();
            let (acc, loss) = classification_metrics(&logits, &eval.labels).unwrap();
            assert_eq!((acc, loss), (r.accuracy, r.loss));
        }
        let best = out.best_report();
        assert!(out.reports.iter().all(|r| r.accuracy <= best.accuracy));
    }

    #[test]
    fn report_round_trips_and_is_deterministic() {
        let n = net();
        let v = val(20);
        let cfg = SearchConfig {
            candidates: 10,
            ..Default::default()
        };
        let a = run_search(&n, &v, &cfg).unwrap();
        let b = run_search(&n, &v, &cfg).unwrap();
        let text = search_report_jsonl(&a.reports, a.best_report());
        assert_eq!(text, search_report_jsonl(&b.reports, b.best_report()));
        let (back, summary) = parse_search_report(&text, n.spec()).unwrap();
        assert_eq!(back.len(), 10);
        for (x, y) in back.iter().zip(&a.reports) {
            assert_eq!(x.architecture, y.architecture);
            assert_eq!((x.accuracy, x.loss, x.seed), (y.accuracy, y.loss, y.seed));
        }
        match summary {
            ReportLine::Summary { best_index, accuracy, .. } => {
                assert_eq!(best_index, a.best);
                let max = back.iter().map(|r| r.accuracy).fold(0.0, f64::max);
                assert_eq!(accuracy, max);
            }
            _ => panic!("expected summary"),
        }
        assert!(parse_search_report(&text.replace("summary", "sumary"), n.spec()).is_err());
    }

    #[test]
    fn dropped_operations_follow_mask() {
        let n = net();
        let mut bits = vec![true; n.layout().num_slices()];
        let g = n.layout().group(0, 0).clone();
        bits[g.offset..g.offset + g.channels].iter_mut().for_each(|b| *b = false);
        let arch = derive_architecture(n.layout(), &MaskSample::from_bits(&bits)).unwrap();
        assert_eq!(arch.dropped_operations().len(), 1);
        let full = derive_architecture(n.layout(), &MaskSample::ones(bits.len())).unwrap();
        assert!(full.dropped_operations().is_empty());
    }
}
