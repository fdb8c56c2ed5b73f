//! Ground truth for small search spaces: exhaustive enumeration, fixed-p random
//! baselines and a paired sign test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architecture::{prune_any, Architecture};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objective::classification_metrics;
use crate::search::{
    evaluate_masks, fixed_logits, rank_and_select, rank_order, sample_from_logits, CandidateReport, EvalSet,
    SearchConfig, SearchOutcome,
};
use crate::supernet::SuperNet;

/// Enumeration never goes past `2^20` architectures.
pub const MAX_CHOICES: usize = 20;

#[derive(Clone, Debug)]
pub struct EnumerationResult {
    /// Every architecture with a path to the head, best first. `index` is the
    /// enumeration index (bit `i` = slice `i`).
    pub entries: Vec<CandidateReport>,
    pub num_choices: usize,
    /// Architectures skipped for lacking a path.
    pub rejected: usize,
}

impl EnumerationResult {
    pub fn best(&self) -> &CandidateReport {
        &self.entries[0]
    }

    pub fn find(&self, arch: &Architecture) -> Option<&CandidateReport> {
        self.entries.iter().find(|e| e.architecture.bits() == arch.bits())
    }
}

/// Scores all `2^K` architectures with inherited weights. Activations entering
/// the last layer are shared across architectures with the same earlier slices;
/// the arithmetic is the same as a fresh pruned forward, so metrics are bitwise equal.
pub fn enumerate_all(net: &SuperNet, val: &Dataset, max_choices: usize) -> Result<EnumerationResult> {
    let layout = net.layout();
    let k = layout.num_slices();
    let cap = max_choices.min(MAX_CHOICES);
    if k > cap {
        return Err(Error::InvalidArgument(format!(
            "{k} binary choices exceed the enumeration cap of {cap}"
        )));
    }
    let eval = EvalSet::new(val)?;
    let last = layout.num_layers() - 1;
    let prefix_bits = layout.groups().iter().find(|g| g.layer == last).map_or(k, |g| g.offset);
    let suffix_count = 1u64 << (k - prefix_bits);

    let per_prefix: Vec<Vec<CandidateReport>> = (0..1u64 << prefix_bits)
        .into_par_iter()
        .map(|prefix| -> Result<Vec<CandidateReport>> {
            let head = Architecture::from_index(layout, prefix);
            let pruned = prune_any(net, &head)?;
            let mut hidden = eval.inputs.clone();
            for l in 0..last {
                hidden = pruned.forward_layer(l, &hidden)?;
            }
            let mut out = Vec::new();
            for suffix in 0..suffix_count {
                let index = prefix | suffix << prefix_bits;
                let arch = Architecture::from_index(layout, index);
                if !arch.has_path() {
                    continue;
                }
                let logits = prune_any(net, &arch)?.forward_from(last, &hidden)?;
                let (accuracy, loss) = classification_metrics(&logits, &eval.labels)?;
                out.push(CandidateReport {
                    index: index as usize,
                    seed: 0,
                    param_count: arch.param_count(),
                    architecture: arch,
                    accuracy,
                    loss,
                    eval_wall_time_s: 0.0,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut entries: Vec<CandidateReport> = per_prefix.into_iter().flatten().collect();
    entries.sort_by(rank_order);
    let rejected = (1usize << k) - entries.len();
    if entries.is_empty() {
        return Err(Error::InvalidArgument("no architecture reaches the head".into()));
    }
    Ok(EnumerationResult {
        entries,
        num_choices: k,
        rejected,
    })
}

/// Search with every slice kept at `p_fixed`, evaluated and ranked like guided search.
pub fn random_search(net: &SuperNet, c: usize, p_fixed: f64, val: &Dataset, seed: u64) -> Result<SearchOutcome> {
    let cfg = SearchConfig {
        candidates: c,
        seed,
        ..Default::default()
    };
    let logits = fixed_logits(net.layout(), p_fixed)?;
    let masks = sample_from_logits(net.layout(), &logits, &cfg)?;
    let reports = evaluate_masks(net, &masks, &EvalSet::new(val)?)?;
    let best = rank_and_select(&reports)?.index;
    Ok(SearchOutcome { reports, best })
}

pub fn random_baseline(net: &SuperNet, c: usize, p_fixed: f64, val: &Dataset, seed: u64) -> Result<CandidateReport> {
    Ok(random_search(net, c, p_fixed, val, seed)?.best_report().clone())
}

/// Paired guided-vs-random statistics over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename = "comparison")]
pub struct Comparison {
    pub seeds: usize,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Ties count as half a win.
    pub win_rate: f64,
    /// One-sided sign test over non-tied pairs, `P(X >= wins)` under `Binomial(n, 1/2)`.
    pub sign_test_p: f64,
    pub guided_median: f64,
    pub random_median: f64,
}

impl Comparison {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("comparison serializes")
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut coeff = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += coeff;
        }
        coeff = coeff * (n - i) as f64 / (i + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

/// Pairs `guided[i]` with `random[i]` by higher-is-better score.
pub fn compare_scores(guided: &[f64], random: &[f64]) -> Result<Comparison> {
    if guided.len() != random.len() || guided.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unpaired runs: {} guided vs {} random",
            guided.len(),
            random.len()
        )));
    }
    let wins = guided.iter().zip(random).filter(|(g, r)| g > r).count();
    let losses = guided.iter().zip(random).filter(|(g, r)| g < r).count();
    let ties = guided.len() - wins - losses;
    Ok(Comparison {
        seeds: guided.len(),
        wins,
        losses,
        ties,
        win_rate: (wins as f64 + 0.5 * ties as f64) / guided.len() as f64,
        sign_test_p: sign_test_p(wins, wins + losses),
        guided_median: median(guided),
        random_median: median(random),
    })
}

/// Compares best-candidate accuracies, one report per seed on each side.
pub fn compare_runs(guided: &[CandidateReport], random: &[CandidateReport], num_seeds: usize) -> Result<Comparison> {
    if guided.len() != num_seeds || random.len() != num_seeds {
        return Err(Error::InvalidArgument(format!(
            "expected {num_seeds} paired reports, got {} guided and {} random",
            guided.len(),
            random.len()
        )));
    }
    let acc = |rs: &[CandidateReport]| rs.iter().map(|r| r.accuracy).collect::<Vec<_>>();
    compare_scores(&acc(guided), &acc(random))
}
