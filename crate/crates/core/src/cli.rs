//! Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::analysis::{self, CategoryMap};
use crate::assignment::{assign_recursor, RegistrableDomain};
use crate::bench::{self, RecursorLocator, SystemClock, UdpEndpoint};
use crate::config::{self, ProxyConfig, Salt, SaltPolicy};
use crate::suffix::SuffixRules;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(name = "kresolver", version, about = "DNS proxy that spreads a user's queries over K DoH recursors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the proxy (DNS over UDP and TCP, plus the control socket).
    Serve(ServeArgs),
    /// Show which recursor resolves each domain.
    Assign(AssignArgs),
    /// Simulate how sampled browsing profiles spread over the pool.
    Analyze(AnalyzeArgs),
    /// Time page visits against a running resolver.
    Bench(BenchArgs),
    /// List the curated recursor pool in index order.
    Pool(PoolArgs),
    /// Print a new random 128-bit salt as hex.
    Salt(SaltArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Proxy configuration file (TOML).
    #[arg(long, env = "KRESOLVER_CONFIG")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self, policy: SaltPolicy) -> Result<ProxyConfig, BoxError> {
        let path = self
            .config
            .as_deref()
            .ok_or("no configuration: pass --config or set KRESOLVER_CONFIG")?;
        Ok(config::load_config(path, policy)?)
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Generate a salt and write it into the config file if it has none.
    #[arg(long)]
    generate_salt: bool,
}

#[derive(Debug, Args)]
struct AssignArgs {
    /// Domain names to look up.
    #[arg(required = true)]
    domains: Vec<String>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Top list as `rank,domain` lines.
    #[arg(long)]
    toplist: PathBuf,
    /// Number of synthetic user profiles.
    #[arg(long, default_value_t = 200)]
    profiles: usize,
    /// Unique domains per profile.
    #[arg(long, default_value_t = 100)]
    domains: usize,
    /// Number of recursors.
    #[arg(long, default_value_t = 26)]
    k: usize,
    /// Seed for profile sampling and per-profile salts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `domain,category` file for the co-location report.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Categories counted as sensitive (comma separated); defaults to the
    /// built-in list of 12.
    #[arg(long, value_delimiter = ',')]
    sensitive: Option<Vec<String>>,
    /// Directory for the CSV outputs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// One visit per line: `parent,sub1,sub2,...`.
    #[arg(long)]
    visits: PathBuf,
    /// Resolver address (host:port).
    #[arg(long, default_value = config::DEFAULT_LISTEN)]
    endpoint: SocketAddr,
    /// Proxy control address for page tagging and cache flushes; `none`
    /// disables both.
    #[arg(long, default_value = config::DEFAULT_CONTROL)]
    control: String,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Per-query timeout in milliseconds.
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
    /// Send a visit's subresource queries concurrently.
    #[arg(long)]
    parallel: bool,
    /// Proxy config, used only to label queries with recursor indices.
    #[command(flatten)]
    config: ConfigArg,
    /// Directory for the CSV outputs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PoolArgs {
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct SaltArgs {
    /// Derive the salt from this seed instead of OS entropy (for
    /// reproducible experiments only).
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Assign(a) => assign(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Bench(a) => bench_cmd(a, out),
        Command::Pool(a) => pool(a, out),
        Command::Salt(a) => salt(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn serve(args: ServeArgs) -> Result<(), BoxError> {
    let policy = if args.generate_salt {
        SaltPolicy::GenerateIfMissing
    } else {
        SaltPolicy::Require
    };
    let config = args.config.load(policy)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crate::server::serve(config))?;
    Ok(())
}

fn assign(args: AssignArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let config = args.config.load(SaltPolicy::Require)?;
    let rules = SuffixRules::bundled();
    writeln!(out, "qname,registrable_domain,recursor_index,recursor_name")?;
    for name in &args.domains {
        let domain = RegistrableDomain::from_name(name, rules)?;
        let index = assign_recursor(&domain, &config.salt, config.pool.k());
        let recursor = config.pool.get(index).expect("index within pool");
        writeln!(out, "{name},{domain},{index},{}", csv_field(&recursor.name))?;
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    if args.k == 0 {
        return Err("--k must be at least 1".into());
    }
    let toplist = analysis::load_toplist(&args.toplist)?;
    let profiles = analysis::sample_profiles(&toplist, args.profiles, args.domains, args.seed)?;
    let report = analysis::simulate_assignments(&profiles, args.k);
    let oracle = analysis::empty_fraction_oracle(args.domains, args.k);
    std::fs::create_dir_all(&args.out)?;
    analysis::write_distribution_csv(&report, &args.out.join("distribution.csv"))?;
    analysis::write_histogram_csv(&report, &oracle, &args.out.join("histogram.csv"))?;

    let band = |lo: usize, hi: usize| oracle[lo.min(oracle.len())..=hi.min(oracle.len() - 1)].iter().sum::<f64>();
    writeln!(out, "profiles,{}", profiles.len())?;
    writeln!(out, "domains_per_profile,{}", args.domains)?;
    writeln!(out, "k,{}", args.k)?;
    writeln!(out, "seed,{}", args.seed)?;
    writeln!(out, "weighting,{}", report.weighting)?;
    writeln!(out, "metric,observed,oracle")?;
    writeln!(out, "empty_fraction,{:.6},{:.6}", report.empty_fraction, oracle[0])?;
    writeln!(out, "mode_band_fraction_3_4,{:.6},{:.6}", report.mode_band_fraction, band(3, 4))?;
    writeln!(out, "heavy_fraction_8_14,{:.6},{:.6}", report.heavy_fraction, band(8, 14))?;
    writeln!(out, "ks_distance,{:.6},", analysis::ks_distance(&report.histogram, &oracle))?;

    if let Some(path) = &args.categories {
        let mut categories = analysis::load_categories(path)?;
        if let Some(sensitive) = &args.sensitive {
            categories = categories.with_sensitive(sensitive);
        }
        sensitivity_summary(&profiles, &categories, &args, out)?;
    }
    Ok(())
}

fn sensitivity_summary(
    profiles: &[analysis::UserProfile],
    categories: &CategoryMap,
    args: &AnalyzeArgs,
    out: &mut dyn Write,
) -> Result<(), BoxError> {
    let report = analysis::colocation_report(profiles, categories, args.k);
    analysis::write_sensitivity_csv(&report, &args.out.join("sensitivity.csv"))?;
    writeln!(out, "profiles_with_sensitive,{}", report.profiles_with_sensitive)?;
    writeln!(out, "profiles_all_distinct,{}", report.profiles_all_distinct)?;
    writeln!(out, "profiles_with_colocation,{}", report.profiles_with_colocation)?;
    Ok(())
}

fn bench_cmd(args: BenchArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let visits = bench::parse_visits(&std::fs::read_to_string(&args.visits)?)?;
    let mut endpoint = UdpEndpoint::new(args.endpoint).with_timeout(Duration::from_millis(args.timeout_ms));
    if !args.control.eq_ignore_ascii_case("none") {
        let control: SocketAddr = args
            .control
            .parse()
            .map_err(|e| format!("--control {:?}: {e}", args.control))?;
        endpoint = endpoint.with_control(control);
    }
    if args.config.config.is_some() {
        let config = args.config.load(SaltPolicy::Require)?;
        endpoint = endpoint.with_locator(RecursorLocator {
            salt: config.salt,
            k: config.pool.k(),
        });
    }
    let clock = SystemClock::default();
    let mut records = Vec::new();
    for visit in &visits {
        records.extend(bench::run_visit(visit, &endpoint, &clock, args.repetitions, args.parallel)?);
    }
    let summary = bench::summarize(&records)?;
    write_bench_outputs(&records, &summary, &args.out)?;
    writeln!(out, "visits,{}", records.len())?;
    writeln!(out, "partial_visits,{}", records.iter().filter(|r| r.partial).count())?;
    writeln!(out, "queries,{}", summary.query_rtts_ms.len())?;
    writeln!(out, "mean_query_ms,{:.3}", summary.mean_query_ms)?;
    writeln!(out, "median_visit_total_ms,{:.3}", bench::median(&summary.visit_totals_ms))?;
    Ok(())
}

fn write_bench_outputs(
    records: &[bench::PageVisitRecord],
    summary: &bench::StatsSummary,
    dir: &Path,
) -> Result<(), BoxError> {
    std::fs::create_dir_all(dir)?;
    bench::write_visits_csv(records, &dir.join("visits.csv"))?;
    bench::write_summary_csv(summary, &dir.join("summary.csv"))?;
    bench::export_cdf(&summary.visit_totals_ms, &dir.join("cdf_visit_total.csv"))?;
    bench::export_cdf(&summary.query_rtts_ms, &dir.join("cdf_query.csv"))?;
    for (index, stats) in &summary.per_recursor {
        bench::export_cdf(&stats.samples, &dir.join(format!("cdf_recursor_{index}.csv")))?;
    }
    Ok(())
}

fn pool(args: PoolArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let config = args.config.load(SaltPolicy::Require)?;
    writeln!(out, "index,name,url,method,location,anycast,ping_ms,reported_median_ms")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, r) in config.pool.recursors().iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{:?},{},{},{},{}",
            csv_field(&r.name),
            csv_field(&r.url),
            r.method,
            csv_field(&r.location),
            r.anycast,
            opt(r.ping_ms),
            opt(r.reported_median_ms),
        )?;
    }
    Ok(())
}

fn salt(args: SaltArgs, out: &mut dyn Write) -> Result<(), BoxError> {
    let salt: Salt = match args.seed {
        Some(seed) => config::generate_salt(&mut ChaCha20Rng::seed_from_u64(seed))?,
        None => config::generate_os_salt()?,
    };
    writeln!(out, "{salt}")?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("kresolver").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let (code, _, err) = run_args(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn analyze_requires_toplist() {
        let (code, _, err) = run_args(&["analyze", "--profiles", "3"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--toplist"), "{err}");
    }

    #[test]
    fn unknown_flag_is_rejected() {
        let (code, _, _) = run_args(&["salt", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero_on_every_subcommand() {
        for sub in ["serve", "assign", "analyze", "bench", "pool", "salt"] {
            let (code, out, _) = run_args(&[sub, "--help"]);
            assert_eq!(code, EXIT_OK, "{sub}");
            assert!(out.contains("Usage"), "{sub}: {out}");
        }
    }

    #[test]
    fn seeded_salt_is_reproducible() {
        let (code, a, _) = run_args(&["salt", "--seed", "42"]);
        assert_eq!(code, EXIT_OK);
        let (_, b, _) = run_args(&["salt", "--seed", "42"]);
        assert_eq!(a, b);
        assert_eq!(a.trim().len(), 32);
        let (_, c, _) = run_args(&["salt"]);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
