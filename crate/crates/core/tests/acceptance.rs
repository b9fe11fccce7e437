//! Benchmark-level acceptance checks. Each criterion prints one PASS/FAIL
//! line; the process exits nonzero if any fails.
//!
//! The synthetic grid is 24 full-length simulations and the MNIST part three
//! more, so this target takes hours on a single core.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fedproto::config::ExperimentManifest;
use fedproto::experiment::{run_experiment, RunSummary};
use fedproto::metrics::mean_std;
use fedproto::selftest;

const SYNTHETIC: &str = r#"
seeds = [1]

[dataset]
scheme = "synthetic"
phi1 = 1.0
phi2 = 1.0
num_clients = 30
total_samples = 9600
power_law_gamma = 1.9
seed = 1

[model]
hidden_dims = [128, 256]

[sim]
rounds = 200
local_epochs = 20
clients_per_round = 10
lr = 0.01
batch_size = 10

[centralized]
epochs = 20
lr = 0.01
batch_size = 10

[[cells]]
strategy = "fedavg"
deltas = [0.0, 0.5, 0.8]

[[cells]]
strategy = "fedprox"
prox_mu = 0.1
deltas = [0.0, 0.5, 0.8]

[[cells]]
strategy = "fairness"
deltas = [0.0, 0.5, 0.8]

[[cells]]
strategy = "fedproto"
deltas = [0.0, 0.5, 0.8]

[[cells]]
strategy = "fedproto"
tolerate_stragglers = false
deltas = [0.0, 0.5, 0.8]

[[cells]]
strategy = "fedproto"
variant = "lpm_only"
deltas = [0.0, 0.5, 0.8]

[[cells]]
strategy = "fedproto"
variant = "apm_only"
deltas = [0.0, 0.5, 0.8]

[[cells]]
strategy = "fedproto"
variant = "dplus_only"
deltas = [0.0, 0.5, 0.8]
"#;

const MNIST: &str = r#"
seeds = [1]

[dataset]
scheme = "label_shard"
images = "images.idx.gz"
labels = "labels.idx.gz"
num_clients = 1000
shards_per_client = 2
power_law_gamma = 0.8
seed = 1

[model]
hidden_dims = [256]

[sim]
rounds = 200
local_epochs = 20
clients_per_round = 10
lr = 0.01
batch_size = 10

[centralized]
enabled = false

[[cells]]
strategy = "fedavg"
deltas = [0.5]

[[cells]]
strategy = "fedavg"
tolerate_stragglers = true
deltas = [0.5]

[[cells]]
strategy = "fedproto"
deltas = [0.5]
"#;

struct Gate {
    lines: Vec<String>,
    failed: usize,
}

impl Gate {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        let line = format!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
        if !ok {
            self.failed += 1;
        }
    }
}

fn load(text: &str, dir: &Path, out: &Path) -> ExperimentManifest {
    let mut m = ExperimentManifest::from_toml(text, &dir.join("acceptance.toml")).expect("manifest");
    if let fedproto::config::DatasetConfig::LabelShard(d) = &mut m.dataset {
        d.images = dir.join(&d.images);
        d.labels = dir.join(&d.labels);
    }
    m.output_dir = out.to_path_buf();
    m
}

fn run(m: &ExperimentManifest) -> BTreeMap<(String, String), RunSummary> {
    let start = Instant::now();
    let outcome = run_experiment(m, None).expect("experiment");
    for (name, err) in &outcome.failures {
        println!("cell {name} failed: {err}");
    }
    println!(
        "  ran {} cells in {:.0}s",
        outcome.summaries.len(),
        start.elapsed().as_secs_f64()
    );
    outcome
        .summaries
        .into_iter()
        .map(|s| ((s.strategy.clone(), format!("{}", s.delta)), s))
        .collect()
}

/// Accuracy in percent per delta, then mean and sample std across deltas.
fn across_delta(runs: &BTreeMap<(String, String), RunSummary>, strategy: &str) -> Option<(f64, f64)> {
    let accs: Vec<f64> = ["0", "0.5", "0.8"]
        .iter()
        .map(|d| {
            runs.get(&(strategy.to_string(), d.to_string()))
                .map(|s| 100.0 * s.final_accuracy)
        })
        .collect::<Option<_>>()?;
    mean_std(&accs)
}

fn table(runs: &BTreeMap<(String, String), RunSummary>) -> String {
    let mut out = String::new();
    for ((strategy, delta), s) in runs {
        let _ = writeln!(
            out,
            "  {strategy:<20} δ={delta:<4} acc {:>6.2}%  loss {:.3}  AMM {:.3}  MMD {}  tail grad diss {:.2}",
            100.0 * s.final_accuracy,
            s.final_loss,
            s.final_amm,
            s.final_mmd.map_or("-".into(), |v| format!("{v:.4}")),
            s.tail_grad_dissimilarity
        );
    }
    out
}

fn fmt(v: Option<(f64, f64)>) -> String {
    v.map_or("missing".into(), |(m, s)| format!("{m:.2} ± {s:.2}"))
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let work = tempfile::tempdir().expect("tempdir");
    let mut gate = Gate {
        lines: Vec::new(),
        failed: 0,
    };

    // 7: property suites
    let start = Instant::now();
    let suites = selftest::run_all();
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<String> = suites
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("({}) {}", r.id, r.detail))
        .collect();
    gate.check(
        "7 selftest suites (a)-(j) < 60 s",
        failed.is_empty() && elapsed < 60.0,
        format!(
            "{} suites, {} failed {failed:?}, {elapsed:.2}s",
            suites.len(),
            failed.len()
        ),
    );

    // 1-5: synthetic benchmark
    println!("synthetic grid (24 simulations)...");
    let syn = run(&load(SYNTHETIC, &root, &work.path().join("synthetic")));
    print!("{}", table(&syn));
    let fedavg = across_delta(&syn, "fedavg");
    let fedproto = across_delta(&syn, "fedproto");
    for s in [
        "fedprox",
        "fairness",
        "fedproto-notol",
        "fedproto-lpm_only",
        "fedproto-apm_only",
        "fedproto-dplus_only",
    ] {
        println!("  {s:<20} across δ: {}", fmt(across_delta(&syn, s)));
    }
    println!("  {:<20} across δ: {}", "fedavg", fmt(fedavg));
    println!("  {:<20} across δ: {}", "fedproto", fmt(fedproto));

    let (pm, ps) = fedproto.unwrap_or((f64::NAN, f64::NAN));
    let (am, asd) = fedavg.unwrap_or((f64::NAN, f64::NAN));
    gate.check(
        "1a fedproto mean >= fedavg mean + 2",
        pm >= am + 2.0,
        format!("fedproto {pm:.2} vs fedavg {am:.2}"),
    );
    gate.check(
        "1b fedproto std < fedavg std across δ",
        ps < asd,
        format!("fedproto {ps:.2} vs fedavg {asd:.2}"),
    );
    gate.check(
        "1c fedproto mean in [74, 83]",
        (74.0..=83.0).contains(&pm),
        format!("fedproto mean {pm:.2}"),
    );

    let mut worst = String::new();
    let mut ablation_ok = true;
    for s in [
        "fedproto-lpm_only",
        "fedproto-apm_only",
        "fedproto-dplus_only",
        "fedproto-notol",
    ] {
        let m = across_delta(&syn, s).map_or(f64::NAN, |v| v.0);
        if !(pm >= m - 0.5) {
            ablation_ok = false;
            let _ = write!(worst, " {s}={m:.2}");
        }
    }
    gate.check(
        "2a full fedproto >= each ablation - 0.5",
        ablation_ok,
        if ablation_ok {
            format!("fedproto {pm:.2}")
        } else {
            format!("fedproto {pm:.2} below{worst}")
        },
    );
    gate.check(
        "2b fedproto std <= fedavg std",
        ps <= asd,
        format!("fedproto {ps:.2} vs fedavg {asd:.2}"),
    );

    let at = |s: &str, d: &str| syn.get(&(s.to_string(), d.to_string()));
    let (amm_p, amm_a) = (
        at("fedproto", "0").map_or(f64::NAN, |s| s.final_amm),
        at("fedavg", "0").map_or(f64::NAN, |s| s.final_amm),
    );
    gate.check(
        "3 AMM fedproto > fedavg at δ=0",
        amm_p > amm_a,
        format!("fedproto {amm_p:.4} vs fedavg {amm_a:.4}"),
    );

    let ffd = at("fedproto", "0").and_then(|s| s.ffd_vs_fedavg).unwrap_or(f64::NAN);
    let central = at("fedproto", "0")
        .and_then(|s| s.centralized_accuracy)
        .unwrap_or(f64::NAN)
        * 100.0;
    gate.check(
        "4 FFD(fedproto, fedavg) > 0 at δ=0, centralized >= 76%",
        ffd > 0.0 && central >= 76.0,
        format!("FFD {ffd:.2}%, centralized {central:.2}%"),
    );

    let (gd_p, gd_a) = (
        at("fedproto", "0.5").map_or(f64::NAN, |s| s.tail_grad_dissimilarity),
        at("fedavg", "0.5").map_or(f64::NAN, |s| s.tail_grad_dissimilarity),
    );
    gate.check(
        "5 tail grad dissimilarity fedproto <= fedavg at δ=0.5",
        gd_p <= gd_a,
        format!("fedproto {gd_p:.3} vs fedavg {gd_a:.3}"),
    );

    // 6: MNIST ordering
    let mnist_dir = root.join("data/mnist");
    if mnist_dir.join("images.idx.gz").exists() {
        println!("mnist grid (3 simulations)...");
        let mn = run(&load(MNIST, &mnist_dir, &work.path().join("mnist")));
        print!("{}", table(&mn));
        let acc = |s: &str| {
            mn.get(&(s.to_string(), "0.5".to_string()))
                .map_or(f64::NAN, |r| 100.0 * r.final_accuracy)
        };
        let (p, a, at) = (acc("fedproto"), acc("fedavg"), acc("fedavg-tol"));
        gate.check(
            "6 mnist δ=0.5: fedproto > fedavg, fedavg-tol > fedavg",
            p > a && at > a,
            format!("fedproto {p:.2}, fedavg {a:.2}, fedavg-tol {at:.2}"),
        );
    } else {
        gate.check(
            "6 mnist δ=0.5: fedproto > fedavg, fedavg-tol > fedavg",
            false,
            format!("{} missing; run scripts/mnist_from_npm.py", mnist_dir.display()),
        );
    }

    println!("\nsummary:");
    for l in &gate.lines {
        println!("{l}");
    }
    if gate.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", gate.failed);
        ExitCode::FAILURE
    }
}
