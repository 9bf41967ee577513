//! Acceptance table: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 need the Cora citation graph in directory form
//! (`data/cora` at the workspace root, or `LWGCN_CORA_DIR`). Without it
//! they are reported as FAIL. `LWGCN_ACCEPTANCE_PROXY=1` additionally runs the
//! same protocol on a Cora-sized synthetic graph and prints the numbers as notes.
//!
//! The process exits non-zero if any criterion that could be evaluated failed.

use std::path::PathBuf;
use std::time::Instant;

use lwgcn_core::graph::{load_dataset, DatasetFormat, RawDataset, SyntheticSpec};
use lwgcn_core::sampler::Strategy;
use lwgcn_core::selftest::{self, SelftestOptions};
use lwgcn_core::trainer::{train, TrainOutcome, TrainingData};
use lwgcn_core::TrainConfig;
use statrs::distribution::{ContinuousCDF, StudentsT};

const SEEDS: u64 = 20;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Not evaluated because an input is missing; reported as FAIL.
    Missing(String),
}

struct Table {
    evaluated_failures: usize,
}

impl Table {
    fn report(&mut self, id: usize, title: &str, v: Verdict) {
        let (status, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                self.evaluated_failures += 1;
                ("FAIL", d)
            }
            Verdict::Missing(d) => ("FAIL", format!("not evaluated: {d}")),
        };
        println!("criterion {id:>2} {status}  {title}: {detail}");
    }
}

fn cora_dir() -> PathBuf {
    std::env::var_os("LWGCN_CORA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cora"))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

/// One-sided paired t-test of `a > b`; returns `(t, critical value at 0.05)`.
fn paired_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = if sd > 0.0 {
        m / (sd / n.sqrt())
    } else if m > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let crit = StudentsT::new(0.0, 1.0, n - 1.0).unwrap().inverse_cdf(0.95);
    (t, crit)
}

fn test_at_best(o: &TrainOutcome) -> f64 {
    o.history
        .iter()
        .find(|r| r.epoch == o.best_epoch)
        .map_or(f64::NAN, |r| r.test_acc)
}

fn run_seeds(data: &TrainingData, base: &TrainConfig) -> Vec<f64> {
    (1..=SEEDS)
        .map(|seed| {
            let c = TrainConfig { seed, ..base.clone() };
            test_at_best(&train(&c, data, &mut |_| Ok(())).expect("training run"))
        })
        .collect()
}

fn epochs_to(data: &TrainingData, base: &TrainConfig, threshold: f64) -> Vec<f64> {
    (1..=SEEDS)
        .map(|seed| {
            let c = TrainConfig {
                seed,
                early_stop_window: 0,
                ..base.clone()
            };
            let o = train(&c, data, &mut |_| Ok(())).expect("training run");
            o.history
                .iter()
                .find(|r| r.test_acc >= threshold)
                .map_or((c.max_epochs + 1) as f64, |r| r.epoch as f64)
        })
        .collect()
}

struct Protocol {
    full: Vec<f64>,
    full_seconds: f64,
    adapt: Vec<f64>,
    iid: Vec<f64>,
    node_wise: Vec<f64>,
    no_vr: Vec<f64>,
    plain_epochs: Vec<f64>,
    skip_epochs: Vec<f64>,
}

fn run_protocol(raw: &RawDataset) -> Protocol {
    let base = TrainConfig::default();
    let data = TrainingData::prepare(raw, &base).expect("prepare");
    let with = |sampler: Strategy| TrainConfig {
        sampler,
        ..base.clone()
    };
    let start = Instant::now();
    let full = run_seeds(&data, &with(Strategy::Full));
    let full_seconds = start.elapsed().as_secs_f64();
    let adapt = run_seeds(&data, &with(Strategy::Adaptive));
    let iid = run_seeds(&data, &with(Strategy::Iid));
    let node_wise = run_seeds(&data, &with(Strategy::NodeWise));
    let no_vr = run_seeds(
        &data,
        &TrainConfig {
            lambda: Some(0.0),
            ..with(Strategy::Adaptive)
        },
    );
    let plain_epochs = epochs_to(&data, &with(Strategy::Adaptive), 0.85);
    let skip_epochs = epochs_to(
        &data,
        &TrainConfig {
            skip: true,
            ..with(Strategy::Adaptive)
        },
        0.85,
    );
    Protocol {
        full,
        full_seconds,
        adapt,
        iid,
        node_wise,
        no_vr,
        plain_epochs,
        skip_epochs,
    }
}

fn judge(p: &Protocol) -> Vec<(usize, &'static str, bool, String)> {
    let full = mean(&p.full);
    let adapt = mean(&p.adapt);
    let (t_iid, crit) = paired_t(&p.adapt, &p.iid);
    let (t_nw, _) = paired_t(&p.adapt, &p.node_wise);
    let no_vr = mean(&p.no_vr);
    let (plain, skip) = (median(p.plain_epochs.clone()), median(p.skip_epochs.clone()));
    let reduction = 1.0 - skip / plain;
    vec![
        (
            1,
            "full-batch baseline accuracy",
            (0.845..=0.885).contains(&full) && p.full_seconds <= 600.0,
            format!(
                "mean test {full:.4} (want [0.845, 0.885]), {:.0}s for 20 seeds",
                p.full_seconds
            ),
        ),
        (
            2,
            "adaptive accuracy",
            adapt >= 0.855,
            format!("mean test {adapt:.4} (want >= 0.855)"),
        ),
        (
            3,
            "adaptive beats iid and node-wise",
            adapt > mean(&p.iid) && adapt > mean(&p.node_wise) && t_iid > crit && t_nw > crit,
            format!(
                "adapt {adapt:.4}, iid {:.4} (t = {t_iid:.2}), node_wise {:.4} (t = {t_nw:.2}), critical t {crit:.3}",
                mean(&p.iid),
                mean(&p.node_wise)
            ),
        ),
        (
            4,
            "variance penalty helps",
            adapt > no_vr,
            format!("adapt {adapt:.4} vs lambda = 0 {no_vr:.4}"),
        ),
        (
            5,
            "skip connection speeds convergence",
            reduction >= 0.2,
            format!(
                "median epochs to 0.85 test: {plain} without, {skip} with ({:.0}% fewer, want >= 20%)",
                100.0 * reduction
            ),
        ),
    ]
}

const TITLES: [&str; 5] = [
    "full-batch baseline accuracy",
    "adaptive accuracy",
    "adaptive beats iid and node-wise",
    "variance penalty helps",
    "skip connection speeds convergence",
];

fn node_counts(raw: &RawDataset, source: &str) -> Verdict {
    let sizes = |sampler| {
        let c = TrainConfig {
            sampler,
            max_epochs: 1,
            ..Default::default()
        };
        let data = TrainingData::prepare(raw, &c).expect("prepare");
        train(&c, &data, &mut |_| Ok(()))
            .expect("training run")
            .first_batch_sizes
    };
    let adaptive = sizes(Strategy::Adaptive);
    let node_wise = sizes(Strategy::NodeWise);
    let detail = format!("{source}: adaptive {adaptive:?}, node_wise {node_wise:?}");
    if adaptive == [256, 128, 128] && node_wise == [256, 1280, 6400] {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn selftest_verdict(names: &[&str]) -> Verdict {
    let results: Vec<_> = names
        .iter()
        .flat_map(|n| {
            selftest::run(&SelftestOptions {
                filter: Some((*n).into()),
                ..Default::default()
            })
        })
        .collect();
    let detail = results.iter().map(|r| r.detail.clone()).collect::<Vec<_>>().join("; ");
    if results.len() == names.len() && results.iter().all(|r| r.passed) {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    // libtest-style arguments (filters, --nocapture) are accepted and ignored.
    let mut table = Table { evaluated_failures: 0 };
    let dir = cora_dir();
    let cora = dir.is_dir().then(|| load_dataset(&dir, DatasetFormat::Directory));

    match &cora {
        Some(Ok(raw)) => {
            for (id, title, ok, detail) in judge(&run_protocol(raw)) {
                table.report(
                    id,
                    title,
                    if ok {
                        Verdict::Pass(detail)
                    } else {
                        Verdict::Fail(detail)
                    },
                );
            }
        }
        Some(Err(e)) => {
            for (k, title) in TITLES.iter().enumerate() {
                table.report(
                    k + 1,
                    title,
                    Verdict::Fail(format!("Cora at {} failed to load: {e}", dir.display())),
                );
            }
        }
        None => {
            for (k, title) in TITLES.iter().enumerate() {
                table.report(
                    k + 1,
                    title,
                    Verdict::Missing(format!("no Cora dataset at {} (set LWGCN_CORA_DIR)", dir.display())),
                );
            }
        }
    }

    let verdict = match &cora {
        Some(Ok(raw)) => node_counts(raw, "Cora"),
        _ => node_counts(
            &SyntheticSpec::cora_like(0).generate().expect("synthetic graph"),
            "Cora-sized synthetic graph",
        ),
    };
    table.report(6, "per-batch node counts", verdict);

    let start = Instant::now();
    table.report(
        7,
        "expectation invariant to the sampler",
        selftest_verdict(&["expectation_invariant_to_q"]),
    );
    table.report(
        8,
        "optimal sampler minimises the variance",
        selftest_verdict(&["optimal_sampler_grid_search"]),
    );
    table.report(
        9,
        "sample variance converges",
        selftest_verdict(&["empirical_variance_monte_carlo"]),
    );
    table.report(
        10,
        "gradient suite",
        selftest_verdict(&[
            "tape_ops_finite_differences",
            "end_to_end_finite_differences",
            "variance_gradient_closed_form",
        ]),
    );
    table.report(
        11,
        "exhaustive sampling equals full propagation",
        selftest_verdict(&["full_support_equivalence"]),
    );
    table.report(
        12,
        "skip weights equal the squared operator",
        selftest_verdict(&["skip_weight_exactness"]),
    );
    let all = selftest::run(&SelftestOptions::default());
    let seconds = start.elapsed().as_secs_f64();
    println!(
        "selftest: {} checks, {} failed, {seconds:.1}s for criteria 7-12 plus a full pass (budget 120s)",
        all.len(),
        all.iter().filter(|r| !r.passed).count()
    );
    if seconds > 120.0 || all.iter().any(|r| !r.passed) {
        table.evaluated_failures += 1;
    }

    if std::env::var_os("LWGCN_ACCEPTANCE_PROXY").is_some() {
        let raw = SyntheticSpec::cora_like(0).generate().expect("synthetic graph");
        for (id, title, ok, detail) in judge(&run_protocol(&raw)) {
            println!(
                "note: criterion {id} protocol on the synthetic graph ({title}): {} {detail}",
                if ok { "met" } else { "not met" }
            );
        }
    }

    if table.evaluated_failures > 0 {
        eprintln!("{} evaluated criteria failed", table.evaluated_failures);
        std::process::exit(1);
    }
}
