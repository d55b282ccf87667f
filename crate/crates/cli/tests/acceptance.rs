//! Acceptance suite: one test per release criterion, each printing a single
//! `criterion N (...): pass` line. Run with
//! `cargo test -p gfl-cli --test acceptance -- --nocapture`.
//!
//! The experiment-level criteria (3-scheme ordering, noise sweep, step-size
//! sweep, classification) drive the `gfl` binary end to end and read back the
//! metrics CSVs it writes; the algebraic criteria call the library directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use gfl_core::diagnostics::{sensitivity_experiment, substitute_first_shard};
use gfl_core::engine::{run, TrainConfig};
use gfl_core::nalgebra::DVector;
use gfl_core::privacy::{
    client_masks, draw_link_noise, epsilon_of, sigma_for_epsilon, PairwiseSeeds, PrivacyAccount,
};
use gfl_core::tasks::{closed_form_optimum, generate_regression, numeric_optimum};
use gfl_core::{build_metropolis, Loss, PerturbationScheme, Topology};

fn verdict(n: u32, name: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("criterion {n:2} ({name}): pass");
    } else {
        let detail = failures.join("; ");
        println!("criterion {n:2} ({name}): FAIL - {detail}");
        panic!("criterion {n} failed: {detail}");
    }
}

// ---------------------------------------------------------------------------
// CLI plumbing

fn gfl_run(config_text: &str, out_dir: &Path) {
    let cfg_path = out_dir.join("experiment.cfg");
    let text = format!("{config_text}\noutput.dir = {}\n", out_dir.display());
    std::fs::create_dir_all(out_dir).unwrap();
    std::fs::write(&cfg_path, text).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_gfl"))
        .arg("run")
        .arg(&cfg_path)
        .status()
        .expect("failed to launch gfl");
    assert!(status.success(), "gfl run exited with {status}");
}

#[derive(Clone, Copy)]
struct Row {
    msd_centroid: Option<f64>,
    msd_avg: Option<f64>,
    disagreement: f64,
    test_error: Option<f64>,
}

fn read_rows(path: &Path) -> Vec<Row> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,msd_centroid,msd_avg,disagreement,test_error,epsilon",
        "unexpected header in {}",
        path.display()
    );
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let opt = |s: &str| (!s.is_empty()).then(|| s.parse::<f64>().unwrap());
            Row {
                msd_centroid: opt(f[1]),
                msd_avg: opt(f[2]),
                disagreement: f[3].parse().unwrap(),
                test_error: opt(f[4]),
            }
        })
        .collect()
}

struct ManifestEntry {
    file: PathBuf,
    scheme: String,
    overrides: BTreeMap<String, String>,
}

fn read_manifest(out_dir: &Path) -> Vec<ManifestEntry> {
    let text = std::fs::read_to_string(out_dir.join("manifest.tsv")).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let overrides = if f[2] == "-" {
                BTreeMap::new()
            } else {
                f[2].split(';')
                    .map(|kv| {
                        let (k, v) = kv.split_once('=').unwrap();
                        (k.to_string(), v.to_string())
                    })
                    .collect()
            };
            ManifestEntry { file: f[0].into(), scheme: f[1].to_string(), overrides }
        })
        .collect()
}

/// Mean of the last 100 rows' msd_centroid.
fn steady_msd_centroid(rows: &[Row]) -> f64 {
    let tail = &rows[rows.len() - 100..];
    tail.iter().map(|r| r.msd_centroid.unwrap()).sum::<f64>() / tail.len() as f64
}

fn steady(rows: &[Row], get: impl Fn(&Row) -> f64) -> f64 {
    let tail = &rows[rows.len() - 100..];
    tail.iter().map(get).sum::<f64>() / tail.len() as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Shared experiment outputs (each sweep is executed once; every value is
// deterministic, so sharing across tests cannot introduce ordering effects).

const SEEDS: &str = "seeds = 1, 2, 3, 4, 5, 6, 7, 8, 9, 10";

fn regression_base(mu: f64, rho: f64) -> String {
    format!(
        "task.kind = regression
task.p = 10
task.k = 100
task.n = 100
task.m = 2
loss.rho = {rho}
graph.preset = star
train.mu = {mu}
train.rounds = 400
train.l = 11
train.epochs = 1..10
train.batch = 5..10
{SEEDS}"
    )
}

fn scheme_comparison_config() -> String {
    format!(
        "{}\nprivacy.sigma_g_sq = 0.1\nsweep.privacy.scheme = none, independent_laplace, graph_homomorphic",
        regression_base(0.7, 0.1)
    )
}

fn noise_sweep_config() -> String {
    format!(
        "{}\nsweep.privacy.scheme = independent_laplace, graph_homomorphic\nsweep.privacy.sigma_g_sq = 0.001, 0.01, 0.1, 1",
        regression_base(0.2, 0.3)
    )
}

fn step_sweep_config() -> String {
    format!(
        "{}\nprivacy.sigma_g_sq = 0.1\nsweep.privacy.scheme = independent_laplace, graph_homomorphic\nsweep.train.mu = 0.1, 0.5, 1",
        regression_base(0.7, 0.1)
    )
}

fn classification_config() -> String {
    format!(
        "task.kind = classification
task.p = 5
task.k = 10
task.n = 100
task.m = 2
task.shift = 1.0
task.test_size = 256
loss.rho = 0.03
graph.preset = star
train.mu = 0.5
train.rounds = 500
train.l = 5
train.epochs = 1..10
train.batch = 5..10
privacy.sigma_g_sq = 0.6
sweep.privacy.scheme = none, independent_laplace, graph_homomorphic
{SEEDS}"
    )
}

struct Outputs {
    _dir: tempfile::TempDir,
    schemes: PathBuf,
    noise_sweep: PathBuf,
    step_sweep: PathBuf,
    classification: PathBuf,
}

static OUTPUTS: OnceLock<Outputs> = OnceLock::new();

fn outputs() -> &'static Outputs {
    OUTPUTS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let schemes = dir.path().join("schemes");
        let noise_sweep = dir.path().join("noise_sweep");
        let step_sweep = dir.path().join("step_sweep");
        let classification = dir.path().join("classification");
        gfl_run(&scheme_comparison_config(), &schemes);
        gfl_run(&noise_sweep_config(), &noise_sweep);
        gfl_run(&step_sweep_config(), &step_sweep);
        gfl_run(&classification_config(), &classification);
        Outputs { _dir: dir, schemes, noise_sweep, step_sweep, classification }
    })
}

/// Per-scheme mean (over seeds) of a per-run statistic, grouped by an
/// override key when present.
fn grouped_means(
    out_dir: &Path,
    key: Option<&str>,
    stat: impl Fn(&[Row]) -> f64,
) -> BTreeMap<(String, String), f64> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for entry in read_manifest(out_dir) {
        let group = key
            .map(|k| entry.overrides[k].clone())
            .unwrap_or_default();
        let rows = read_rows(&entry.file);
        groups
            .entry((entry.scheme.clone(), group))
            .or_default()
            .push(stat(&rows));
    }
    groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

// ---------------------------------------------------------------------------
// Criteria

#[test]
fn criterion_01_link_noise_zero_sum() {
    let sigma_g = 1.3;
    let scheme = PerturbationScheme::graph_homomorphic(sigma_g);
    let dim = 3;
    let mut failures = Vec::new();
    let mut worst = 0.0_f64;
    for g in 0..100u64 {
        let p = 2 + (g as usize * 11 + 3) % 31;
        let a = build_metropolis(&Topology::erdos_renyi(p, 0.4, g)).unwrap();
        for draw in 0..100u64 {
            let noise = draw_link_noise(&scheme, &a, dim, draw, g * 1000 + draw).unwrap();
            worst = worst.max(noise.weighted_total(&a, dim).amax());
        }
    }
    if worst > 1e-10 * sigma_g {
        failures.push(format!("weighted noise total {worst:e} exceeds 1e-10 sigma_g"));
    }
    verdict(1, "link-noise zero sum", failures);
}

#[test]
fn criterion_02_mask_cancellation() {
    let mut failures = Vec::new();

    // Direct telescoping of the pairwise masks.
    for &l in &[1usize, 2, 3, 11, 64] {
        for &m in &[1usize, 2, 128] {
            let participants: Vec<usize> = (0..l).collect();
            let mut seeds = PairwiseSeeds::new();
            for a in 0..l {
                for b in a + 1..l {
                    seeds.insert(a, b, (a * 1009 + b * 31 + l + m) as u64);
                }
            }
            for round in 0..5 {
                let masks = client_masks(&participants, m, round as u64, &seeds).unwrap();
                let mut total = DVector::zeros(m);
                for mask in &masks {
                    total += mask;
                }
                if total.amax() > 1e-10 {
                    failures.push(format!("L={l} M={m}: mask sum {:e}", total.amax()));
                }
            }
        }
    }

    // Masks on vs. off in a noise-free training run.
    let data = generate_regression(2, 12, 20, 2, 91).unwrap();
    let loss = Loss::quadratic(0.1);
    let a = build_metropolis(&Topology::ring(2)).unwrap();
    let w_o = closed_form_optimum(&data, 0.1).unwrap().w_o;
    let mut cfg = TrainConfig::basic(0.2, 20, 11, 17);
    cfg.epoch_range = (1, 3);
    cfg.batch_range = (2, 5);
    let plain = run(&cfg, &a, &data, &loss, Some(&w_o)).unwrap();
    cfg.secret_sharing_masks = true;
    let masked = run(&cfg, &a, &data, &loss, Some(&w_o)).unwrap();
    for (x, y) in plain.metrics.iter().zip(&masked.metrics) {
        let d = (x.msd_centroid.unwrap() - y.msd_centroid.unwrap())
            .abs()
            .max((x.msd_avg.unwrap() - y.msd_avg.unwrap()).abs())
            .max((x.disagreement - y.disagreement).abs());
        if d > 1e-10 {
            failures.push(format!("iteration {}: masked metrics differ by {d:e}", x.iteration));
            break;
        }
    }
    verdict(2, "client-mask cancellation", failures);
}

#[test]
fn criterion_03_optimum_oracle_consistency() {
    let mut failures = Vec::new();
    let loss = Loss::quadratic(0.1);
    for seed in 200..220u64 {
        let data = generate_regression(5, 10, 50, 2, seed).unwrap();
        let w_cf = closed_form_optimum(&data, loss.rho).unwrap().w_o;
        let w_gd = numeric_optimum(&data, &loss).unwrap();
        let rel = (&w_cf - &w_gd).norm() / w_cf.norm();
        if rel > 1e-6 {
            failures.push(format!("seed {seed}: relative gap {rel:e}"));
        }
    }
    verdict(3, "closed-form vs gradient-descent optimum", failures);
}

#[test]
fn criterion_04_scheme_ordering() {
    let means = grouped_means(&outputs().schemes, None, steady_msd_centroid);
    let get = |s: &str| means[&(s.to_string(), String::new())];
    let none = get("none");
    let ghp = get("graph_homomorphic");
    let laplace = get("independent_laplace");
    let mut failures = Vec::new();
    if ghp > 2.0 * none {
        failures.push(format!("homomorphic {ghp:e} exceeds 2x baseline {none:e}"));
    }
    if laplace < 5.0 * ghp {
        failures.push(format!("laplace {laplace:e} below 5x homomorphic {ghp:e}"));
    }
    verdict(4, "steady-state scheme ordering", failures);
}

#[test]
fn criterion_05_noise_sweep_trends() {
    let dir = &outputs().noise_sweep;
    let sigmas = ["0.001", "0.01", "0.1", "1"];
    let centroid = grouped_means(dir, Some("privacy.sigma_g_sq"), steady_msd_centroid);
    let avg = grouped_means(dir, Some("privacy.sigma_g_sq"), |r| {
        steady(r, |row| row.msd_avg.unwrap())
    });
    let disag = grouped_means(dir, Some("privacy.sigma_g_sq"), |r| {
        steady(r, |row| row.disagreement)
    });
    let series = |table: &BTreeMap<(String, String), f64>, scheme: &str| -> Vec<f64> {
        sigmas
            .iter()
            .map(|s| table[&(scheme.to_string(), s.to_string())])
            .collect()
    };
    let mut failures = Vec::new();

    let lap = series(&centroid, "independent_laplace");
    for w in lap.windows(2) {
        let ratio = w[1] / w[0];
        if !(5.0..=20.0).contains(&ratio) {
            failures.push(format!("laplace step ratio {ratio:.2} outside [5, 20]"));
        }
    }
    let ghp = series(&centroid, "graph_homomorphic");
    let variation = ghp.iter().cloned().fold(0.0_f64, f64::max)
        / ghp.iter().cloned().fold(f64::INFINITY, f64::min);
    if variation >= 2.0 {
        failures.push(format!("homomorphic centroid varies {variation:.2}x across sweep"));
    }
    for scheme in ["independent_laplace", "graph_homomorphic"] {
        for (name, table) in [("msd_avg", &avg), ("disagreement", &disag)] {
            let s = series(table, scheme);
            if !s.windows(2).all(|w| w[1] > w[0]) {
                failures.push(format!("{scheme} {name} not increasing in noise variance"));
            }
        }
    }
    verdict(5, "noise-variance sweep trends", failures);
}

#[test]
fn criterion_06_step_size_sweep() {
    let means = grouped_means(&outputs().step_sweep, Some("train.mu"), steady_msd_centroid);
    let get = |scheme: &str, mu: &str| means[&(scheme.to_string(), mu.to_string())];
    let mut failures = Vec::new();
    let (g01, g05, g10) = (
        get("graph_homomorphic", "0.1"),
        get("graph_homomorphic", "0.5"),
        get("graph_homomorphic", "1"),
    );
    if !(g01 <= g05 && g05 <= g10) {
        failures.push(format!(
            "homomorphic centroid not monotone in step size: {g01:e}, {g05:e}, {g10:e}"
        ));
    }
    let (l01, l05) = (
        get("independent_laplace", "0.1"),
        get("independent_laplace", "0.5"),
    );
    if l01 <= l05 {
        failures.push(format!(
            "laplace centroid at mu=0.1 ({l01:e}) does not exceed mu=0.5 ({l05:e})"
        ));
    }
    verdict(6, "step-size sweep ordering", failures);
}

#[test]
fn criterion_07_sensitivity_bound() {
    let mut failures = Vec::new();
    let loss = Loss::quadratic(0.1);
    let a = build_metropolis(&Topology::ring(3)).unwrap();
    for seed in 300..305u64 {
        let data = generate_regression(3, 4, 20, 2, seed).unwrap();
        let prime = substitute_first_shard(&data, seed ^ 0xABC);
        let mut cfg = TrainConfig::basic(0.3, 60, 3, seed);
        cfg.epoch_range = (1, 4);
        cfg.batch_range = (2, 6);
        let trace = sensitivity_experiment(&cfg, &a, &data, &prime, &loss).unwrap();
        if !trace.within_bound() {
            failures.push(format!("seed {seed}: divergence exceeded the 2*mu*B*i bound"));
        }
    }
    verdict(7, "coupled-run sensitivity bound", failures);
}

#[test]
fn criterion_08_accountant_round_trip() {
    let mut failures = Vec::new();
    for &mu in &[0.05, 0.1, 0.7] {
        for &b in &[0.5, 1.0, 5.0] {
            for &i in &[1u64, 10, 100] {
                for &eps in &[0.1, 1.0, 10.0] {
                    let sigma = sigma_for_epsilon(mu, b, i, eps).unwrap();
                    let account = PrivacyAccount { mu, gradient_bound: b, sigma_g: sigma };
                    let back = epsilon_of(&account, i);
                    if (back - eps).abs() > 1e-12 * eps.max(1.0) {
                        failures.push(format!(
                            "round trip mu={mu} B={b} i={i} eps={eps}: got {back}"
                        ));
                    }
                }
            }
        }
    }
    let account = PrivacyAccount { mu: 0.3, gradient_bound: 2.0, sigma_g: 4.0 };
    let mut last = 0.0;
    for i in 1..200 {
        let eps = epsilon_of(&account, i);
        if eps <= last {
            failures.push(format!("epsilon not strictly increasing at i={i}"));
            break;
        }
        last = eps;
    }
    verdict(8, "accountant round trip", failures);
}

#[test]
fn criterion_09_determinism_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let base = scheme_comparison_config();
    let runs = [
        ("one_thread_a", "train.threads = 1"),
        ("one_thread_b", "train.threads = 1"),
        ("four_threads", "train.threads = 4"),
    ];
    let mut dirs = Vec::new();
    for (name, threads) in runs {
        let out = dir.path().join(name);
        gfl_run(&format!("{base}\n{threads}"), &out);
        dirs.push(out);
    }
    let mut failures = Vec::new();
    let reference: Vec<PathBuf> = {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dirs[0])
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        files
    };
    if reference.len() != 30 {
        failures.push(format!("expected 30 metrics files, found {}", reference.len()));
    }
    for other in &dirs[1..] {
        for file in &reference {
            let twin = other.join(file.file_name().unwrap());
            let a = std::fs::read(file).unwrap();
            let b = std::fs::read(&twin).unwrap();
            if a != b {
                failures.push(format!(
                    "{} differs between executions",
                    file.file_name().unwrap().to_string_lossy()
                ));
            }
        }
    }
    verdict(9, "byte-identical reruns across thread counts", failures);
}

#[test]
fn criterion_10_decomposition_identity() {
    let out = outputs();
    let mut failures = Vec::new();
    let mut rows_checked = 0usize;
    for dir in [&out.schemes, &out.noise_sweep, &out.step_sweep, &out.classification] {
        for entry in read_manifest(dir) {
            for (i, row) in read_rows(&entry.file).iter().enumerate() {
                let (Some(avg), Some(centroid)) = (row.msd_avg, row.msd_centroid) else {
                    continue;
                };
                rows_checked += 1;
                let gap = (avg - (centroid + row.disagreement)).abs();
                if gap > 1e-9 * avg.abs().max(1e-300) {
                    failures.push(format!(
                        "{} row {i}: msd_avg {avg:e} vs centroid+disagreement gap {gap:e}",
                        entry.file.display()
                    ));
                }
            }
        }
    }
    if rows_checked == 0 {
        failures.push("no rows with deviation metrics found".to_string());
    }
    verdict(10, "deviation decomposition identity", failures);
}

#[test]
fn criterion_11_classification_ordering() {
    let final_error = |rows: &[Row]| rows.last().unwrap().test_error.unwrap();
    let means = grouped_means(&outputs().classification, None, |r| final_error(r));
    let get = |s: &str| means[&(s.to_string(), String::new())];
    let none = get("none");
    let ghp = get("graph_homomorphic");
    let laplace = get("independent_laplace");
    let mut failures = Vec::new();
    if (ghp - none).abs() > 0.05 {
        failures.push(format!(
            "homomorphic test error {ghp:.4} not within 0.05 of baseline {none:.4}"
        ));
    }
    if laplace - ghp < 0.05 {
        failures.push(format!(
            "laplace test error {laplace:.4} not at least 0.05 above homomorphic {ghp:.4}"
        ));
    }
    verdict(11, "classification error ordering", failures);
}
