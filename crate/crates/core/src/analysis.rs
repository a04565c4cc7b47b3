//! Offline privacy analysis: how a user's browsing history spreads across the
//! pool when every domain is hashed to one of K recursors.
//!
//! Profiles are synthetic users: `n` unique domains drawn from a popularity
//! top list with weight 1/rank, each profile with its own salt.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::assignment::{assign_recursor, RegistrableDomain};
use crate::config::Salt;
use crate::suffix::SuffixRules;

/// Popularity model used by [`sample_profiles`].
pub const WEIGHTING: &str = "zipf s=1 (weight 1/rank)";

/// Categories treated as sensitive unless overridden.
pub const DEFAULT_SENSITIVE: [&str; 12] = [
    "pornography",
    "armed forces",
    "gambling",
    "health and wellness",
    "illegal or unethical",
    "malicious websites",
    "medicine",
    "other adult materials",
    "plagiarism",
    "proxy avoidance",
    "spam urls",
    "weapons (sales)",
];

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{file} line {line}: {message}")]
    Input {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("profiles need {requested} domains but the top list has {available}")]
    TooFewDomains { requested: usize, available: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

fn input_error(file: &'static str, line: usize, message: impl Into<String>) -> AnalysisError {
    AnalysisError::Input {
        file,
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopList {
    entries: Vec<(u32, RegistrableDomain)>,
}

impl TopList {
    /// Builds a list ranked in iteration order.
    pub fn from_domains<I, S>(domains: I) -> Result<Self, AnalysisError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let text: String = domains
            .into_iter()
            .enumerate()
            .map(|(i, d)| format!("{},{}\n", i + 1, d.as_ref()))
            .collect();
        parse_toplist(&text)
    }

    pub fn entries(&self) -> &[(u32, RegistrableDomain)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_toplist(path: &Path) -> Result<TopList, AnalysisError> {
    parse_toplist(&std::fs::read_to_string(path)?)
}

/// Parses `rank,domain` lines. Ranks must run 1, 2, 3, ... without gaps and
/// domains (reduced to their registrable form) must be unique. Blank lines
/// are skipped.
pub fn parse_toplist(text: &str) -> Result<TopList, AnalysisError> {
    let rules = SuffixRules::bundled();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let (rank, domain) = raw
            .split_once(',')
            .ok_or_else(|| input_error("toplist", line, "expected rank,domain"))?;
        let rank: u32 = rank
            .trim()
            .parse()
            .map_err(|_| input_error("toplist", line, format!("bad rank {rank:?}")))?;
        let expected = entries.len() + 1;
        if rank as usize != expected {
            return Err(input_error(
                "toplist",
                line,
                format!("rank {rank} out of sequence, expected {expected}"),
            ));
        }
        let domain = RegistrableDomain::from_name(domain.trim(), rules)
            .map_err(|e| input_error("toplist", line, e.to_string()))?;
        if domain.as_str().is_empty() {
            return Err(input_error("toplist", line, "empty domain"));
        }
        if !seen.insert(domain.clone()) {
            return Err(input_error("toplist", line, format!("duplicate domain {domain}")));
        }
        entries.push((rank, domain));
    }
    Ok(TopList { entries })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub profile_id: usize,
    pub domains: Vec<RegistrableDomain>,
    pub salt: Salt,
}

/// Random stream for one profile, independent of how many profiles are drawn
/// and of the order they are computed in.
fn profile_rng(seed: u64, profile_id: usize) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update((profile_id as u64).to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Draws `p_profiles` profiles of `n_domains` unique domains each, weighted
/// 1/rank without replacement. Deterministic in `seed`.
pub fn sample_profiles(
    toplist: &TopList,
    p_profiles: usize,
    n_domains: usize,
    seed: u64,
) -> Result<Vec<UserProfile>, AnalysisError> {
    let available = toplist.len();
    if n_domains > available {
        return Err(AnalysisError::TooFewDomains {
            requested: n_domains,
            available,
        });
    }
    if n_domains == 0 {
        return Err(AnalysisError::InvalidArgument("profiles need at least one domain".into()));
    }
    let weights: Vec<f64> = (1..=available).map(|r| 1.0 / r as f64).collect();
    let index = WeightedIndex::new(&weights).expect("positive finite weights");
    Ok((0..p_profiles)
        .into_par_iter()
        .map(|profile_id| {
            let mut rng = profile_rng(seed, profile_id);
            let mut salt = [0u8; 16];
            rng.fill_bytes(&mut salt);
            let picks = if n_domains * 2 <= available {
                draw_by_rejection(&index, n_domains, &mut rng)
            } else {
                draw_by_keys(&weights, n_domains, &mut rng)
            };
            UserProfile {
                profile_id,
                domains: picks.into_iter().map(|i| toplist.entries[i].1.clone()).collect(),
                salt: Salt(salt),
            }
        })
        .collect())
}

/// Successive weighted draws, discarding repeats.
fn draw_by_rejection(index: &WeightedIndex<f64>, n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut seen = HashSet::with_capacity(n);
    let mut picks = Vec::with_capacity(n);
    while picks.len() < n {
        let i = index.sample(rng);
        if seen.insert(i) {
            picks.push(i);
        }
    }
    picks
}

/// Efraimidis-Spirakis: keep the `n` largest `ln(u) / w`. Same distribution
/// as successive draws, without the rejection cost when `n` nears the list
/// size.
fn draw_by_keys(weights: &[f64], n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let u: f64 = 1.0 - rng.gen::<f64>();
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.truncate(n);
    keyed.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub k: usize,
    pub weighting: &'static str,
    /// `counts[profile][recursor]` domains resolved by that recursor.
    pub counts: Vec<Vec<usize>>,
    /// `histogram[c]` = number of (profile, recursor) cells holding c domains.
    pub histogram: Vec<usize>,
    pub empty_fraction: f64,
    /// Cells holding 3 or 4 domains.
    pub mode_band_fraction: f64,
    /// Cells holding 8 to 14 domains.
    pub heavy_fraction: f64,
}

impl DistributionReport {
    pub fn cells(&self) -> usize {
        self.histogram.iter().sum()
    }

    pub fn fraction_in(&self, lo: usize, hi: usize) -> f64 {
        let cells = self.cells();
        if cells == 0 {
            return 0.0;
        }
        let hits: usize = (lo..=hi.min(self.histogram.len().saturating_sub(1)))
            .map(|c| self.histogram[c])
            .sum();
        hits as f64 / cells as f64
    }
}

pub fn simulate_assignments(profiles: &[UserProfile], k: usize) -> DistributionReport {
    assert!(k >= 1, "k must be at least 1");
    let counts: Vec<Vec<usize>> = profiles
        .par_iter()
        .map(|p| {
            let mut row = vec![0usize; k];
            for d in &p.domains {
                row[assign_recursor(d, &p.salt, k)] += 1;
            }
            row
        })
        .collect();
    let max = counts.iter().flatten().copied().max().unwrap_or(0);
    let mut histogram = vec![0usize; max + 1];
    for &c in counts.iter().flatten() {
        histogram[c] += 1;
    }
    let mut report = DistributionReport {
        k,
        weighting: WEIGHTING,
        counts,
        histogram,
        empty_fraction: 0.0,
        mode_band_fraction: 0.0,
        heavy_fraction: 0.0,
    };
    report.empty_fraction = report.fraction_in(0, 0);
    report.mode_band_fraction = report.fraction_in(3, 4);
    report.heavy_fraction = report.fraction_in(8, 14);
    report
}

/// Exact pmf of Binomial(n, 1/k): the domain count of one recursor when n
/// domains hash uniformly into k buckets. `pmf[c]` = P(X = c), c = 0..=n.
///
/// Terms are built by the ratio product P(c+1)/P(c) = (n-c)/(c+1) · 1/(k-1),
/// anchored at the mode so nothing overflows, then normalized.
pub fn empty_fraction_oracle(n: usize, k: usize) -> Vec<f64> {
    assert!(n >= 1 && k >= 1, "n and k must be at least 1");
    if k == 1 {
        let mut pmf = vec![0.0; n + 1];
        pmf[n] = 1.0;
        return pmf;
    }
    let odds = 1.0 / (k as f64 - 1.0);
    let mode = (n + 1) / k;
    let mut terms = vec![0.0f64; n + 1];
    terms[mode] = 1.0;
    for c in mode..n {
        terms[c + 1] = terms[c] * (n - c) as f64 / (c + 1) as f64 * odds;
    }
    for c in (1..=mode).rev() {
        terms[c - 1] = terms[c] * c as f64 / (n - c + 1) as f64 / odds;
    }
    let total: f64 = terms.iter().sum();
    terms.iter().map(|t| t / total).collect()
}

/// Probability that m domains hashed uniformly into k buckets do not all land
/// in distinct buckets: 1 - k(k-1)...(k-m+1) / k^m.
pub fn colocation_oracle(m: usize, k: usize) -> f64 {
    let distinct: f64 = (0..m).map(|i| (k as f64 - i as f64).max(0.0) / k as f64).product();
    1.0 - distinct
}

/// Kolmogorov-Smirnov distance between an empirical count histogram and a
/// pmf over the same support.
pub fn ks_distance(histogram: &[usize], pmf: &[f64]) -> f64 {
    let total: usize = histogram.iter().sum();
    let len = histogram.len().max(pmf.len());
    let (mut emp, mut orc, mut worst) = (0.0f64, 0.0f64, 0.0f64);
    for c in 0..len {
        emp += histogram.get(c).copied().unwrap_or(0) as f64 / total.max(1) as f64;
        orc += pmf.get(c).copied().unwrap_or(0.0);
        worst = worst.max((emp - orc).abs());
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMap {
    categories: HashMap<String, String>,
    sensitive: BTreeSet<String>,
}

impl Default for CategoryMap {
    fn default() -> Self {
        CategoryMap {
            categories: HashMap::new(),
            sensitive: DEFAULT_SENSITIVE.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CategoryMap {
    pub fn insert(&mut self, domain: &str, category: &str) {
        self.categories
            .insert(domain.trim().to_ascii_lowercase(), category.trim().to_lowercase());
    }

    pub fn with_sensitive<I, S>(mut self, categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.sensitive = categories.into_iter().map(|s| s.as_ref().trim().to_lowercase()).collect();
        self
    }

    pub fn sensitive_set(&self) -> &BTreeSet<String> {
        &self.sensitive
    }

    pub fn category(&self, domain: &str) -> Option<&str> {
        self.categories.get(domain).map(String::as_str)
    }

    /// Uncategorized domains are not sensitive.
    pub fn is_sensitive(&self, domain: &RegistrableDomain) -> bool {
        self.category(domain.as_str())
            .is_some_and(|c| self.sensitive.contains(c))
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Reads `domain,category` lines; a leading `domain,category` header is
/// skipped. Categories may contain commas if quoted.
pub fn load_categories(path: &Path) -> Result<CategoryMap, AnalysisError> {
    parse_categories(&std::fs::read_to_string(path)?)
}

pub fn parse_categories(text: &str) -> Result<CategoryMap, AnalysisError> {
    let rules = SuffixRules::bundled();
    let mut map = CategoryMap::default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| input_error("categories", i + 1, e.to_string()))?;
        let line = row.position().map_or(i + 1, |p| p.line() as usize);
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        if row.len() != 2 {
            return Err(input_error("categories", line, "expected domain,category"));
        }
        if i == 0 && row[0].trim().eq_ignore_ascii_case("domain") {
            continue;
        }
        let domain = RegistrableDomain::from_name(row[0].trim(), rules)
            .map_err(|e| input_error("categories", line, e.to_string()))?;
        map.insert(domain.as_str(), &row[1]);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileSensitivity {
    pub profile_id: usize,
    pub sensitive_count: usize,
    pub distinct_recursors: usize,
    pub colocated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensitivityReport {
    /// Profiles with at least one sensitive domain.
    pub profiles_with_sensitive: usize,
    pub profiles_all_distinct: usize,
    pub profiles_with_colocation: usize,
    pub per_profile: Vec<ProfileSensitivity>,
}

impl SensitivityReport {
    /// Co-located share of the profiles with sensitive domains.
    pub fn colocation_rate(&self) -> f64 {
        if self.profiles_with_sensitive == 0 {
            return 0.0;
        }
        self.profiles_with_colocation as f64 / self.profiles_with_sensitive as f64
    }
}

/// For every profile, checks whether two or more of its sensitive domains are
/// resolved by the same recursor.
pub fn colocation_report(profiles: &[UserProfile], categories: &CategoryMap, k: usize) -> SensitivityReport {
    assert!(k >= 1, "k must be at least 1");
    let per_profile: Vec<ProfileSensitivity> = profiles
        .par_iter()
        .map(|p| {
            let buckets: Vec<usize> = p
                .domains
                .iter()
                .filter(|d| categories.is_sensitive(d))
                .map(|d| assign_recursor(d, &p.salt, k))
                .collect();
            let distinct = buckets.iter().collect::<HashSet<_>>().len();
            ProfileSensitivity {
                profile_id: p.profile_id,
                sensitive_count: buckets.len(),
                distinct_recursors: distinct,
                colocated: distinct < buckets.len(),
            }
        })
        .collect();
    let with_sensitive = per_profile.iter().filter(|p| p.sensitive_count > 0).count();
    let colocated = per_profile.iter().filter(|p| p.colocated).count();
    SensitivityReport {
        profiles_with_sensitive: with_sensitive,
        profiles_all_distinct: with_sensitive - colocated,
        profiles_with_colocation: colocated,
        per_profile,
    }
}

/// `profile_id,recursor_index,domain_count`
pub fn write_distribution_csv(report: &DistributionReport, path: &Path) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "profile_id,recursor_index,domain_count")?;
    for (p, row) in report.counts.iter().enumerate() {
        for (r, c) in row.iter().enumerate() {
            writeln!(out, "{p},{r},{c}")?;
        }
    }
    out.flush()
}

/// `domain_count,cells,fraction,cumulative_fraction,oracle_fraction`
pub fn write_histogram_csv(report: &DistributionReport, oracle: &[f64], path: &Path) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "domain_count,cells,fraction,cumulative_fraction,oracle_fraction")?;
    let cells = report.cells().max(1) as f64;
    let mut cumulative = 0usize;
    for c in 0..report.histogram.len().max(oracle.len()) {
        let n = report.histogram.get(c).copied().unwrap_or(0);
        cumulative += n;
        let o = oracle.get(c).copied().unwrap_or(0.0);
        writeln!(out, "{c},{n},{:?},{:?},{o:?}", n as f64 / cells, cumulative as f64 / cells)?;
    }
    out.flush()
}

/// `profile_id,sensitive_count,distinct_recursors,colocated`
pub fn write_sensitivity_csv(report: &SensitivityReport, path: &Path) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "profile_id,sensitive_count,distinct_recursors,colocated")?;
    for p in &report.per_profile {
        writeln!(
            out,
            "{},{},{},{}",
            p.profile_id, p.sensitive_count, p.distinct_recursors, p.colocated
        )?;
    }
    out.flush()
}
