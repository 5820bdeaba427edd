use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tqdp_core::dp::{evaluate_sequence, quantize_ensemble, train as solve, CostModel};
use tqdp_core::dynamics::{attach_encodings, forward_sequence, ParticleState, SequenceSample};
use tqdp_core::experiments::{exact_error, generate_dataset, robustness_study, run_training_sweep, Dataset};
use tqdp_core::lifting::{particle_loss, EnsembleState};
use tqdp_core::quantization::{build_state_grid, quantize_measure, quantizer_error_bound, simplex_distance};
use tqdp_core::transport::{wasserstein2_sq, DiscreteMeasure};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::policy::{dataset_to_json, load_dataset, sha256_hex, DatasetManifest, NetDescription, PolicyFile};

pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "dataset.manifest.json";
pub const POLICY_FILE: &str = "policy.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";
pub const BENCH_FILE: &str = "quantizer_bench.csv";

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    write(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn check_samples(samples: &[SequenceSample], cfg: &RunConfig) -> Result<(), CliError> {
    let sys = cfg.system()?;
    for (k, s) in samples.iter().enumerate() {
        s.check(&sys)
            .map_err(|e| CliError::Validation(format!("sample {k} does not fit the configuration: {e}")))?;
    }
    Ok(())
}

/// Writes the dataset and a manifest holding its seed and hash.
pub fn generate_data(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    let data = generate_dataset(&cfg.dataset_spec())?;
    let json = dataset_to_json(&data);
    let dataset_path = out_dir.join(DATASET_FILE);
    write(&dataset_path, &json)?;
    let manifest = DatasetManifest {
        file: DATASET_FILE.into(),
        sha256: sha256_hex(json.as_bytes()),
        seed: data.seed,
        config: cfg.clone(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write(&manifest_path, &to_json(&manifest))?;
    Ok((dataset_path, manifest_path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub quantized_value: f64,
    /// The extracted weights scored again through the quantized model.
    pub replayed_value: f64,
    pub exact_train_error: f64,
    pub exact_test_error: f64,
    pub state_counts: Vec<usize>,
    pub wall_seconds: f64,
}

/// Expands, solves and extracts; writes the policy and a timing report.
pub fn train(cfg: &RunConfig, dataset: &Path, out_dir: &Path) -> Result<(PathBuf, TrainReport), CliError> {
    let (data, sha) = load_dataset(dataset)?;
    check_samples(&data.train, cfg)?;
    check_samples(&data.test, cfg)?;
    let setup = cfg.training_setup()?;
    let sys = &setup.sys;
    let start = Instant::now();
    let grid = setup.grid_for(&data.train)?;
    let net = cfg.action_net()?;
    let inputs = EnsembleState::from_inputs(&data.train, sys)?;
    let labels = EnsembleState::from_labels(&data.train, sys)?;
    let initial = quantize_ensemble(&inputs, &grid, setup.measure_level)?;
    let targets = quantize_ensemble(&labels, &grid, setup.measure_level)?;
    let nets = vec![net.clone(); sys.horizon];
    let (reach, _, open) = solve(&initial, &targets, &nets, &grid, sys, setup.budget)?;
    let wall_seconds = start.elapsed().as_secs_f64();

    let replayed_value = evaluate_sequence(
        &inputs,
        &labels,
        &open.actions,
        CostModel::TriplyQuantized,
        &grid,
        setup.measure_level,
        sys,
    )?;
    let report = TrainReport {
        quantized_value: open.value,
        replayed_value,
        exact_train_error: exact_error(&data.train, &open.actions, sys)?,
        exact_test_error: exact_error(&data.test, &open.actions, sys)?,
        state_counts: reach.state_counts(),
        wall_seconds,
    };
    let policy = PolicyFile::new(
        cfg.clone(),
        NetDescription {
            mode: net.mode(),
            size: net.len(),
        },
        sha,
        &open,
        reach.state_counts(),
    );
    let policy_path = out_dir.join(POLICY_FILE);
    write(&policy_path, &policy.to_json())?;
    write(&out_dir.join(REPORT_FILE), &to_json(&report))?;
    Ok((policy_path, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: CostModel,
    pub split: Split,
    pub samples: usize,
    /// Mean squared particle error of the exact flow.
    pub particle_mse: f64,
    /// Mean squared lifted distance under the selected model.
    pub lifted_cost: f64,
}

fn samples_of(data: &Dataset, split: Split) -> &[SequenceSample] {
    match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    }
}

pub fn evaluate(
    policy: &Path,
    dataset: &Path,
    model: CostModel,
    split: Split,
    out_dir: Option<&Path>,
) -> Result<Metrics, CliError> {
    let policy = PolicyFile::load(policy)?;
    let (data, _) = load_dataset(dataset)?;
    let cfg = &policy.config;
    let samples = samples_of(&data, split);
    check_samples(samples, cfg)?;
    let setup = cfg.training_setup()?;
    let sys = &setup.sys;
    let seq = policy.sequence();
    let grid = setup.grid_for(&data.train)?;
    let inputs = EnsembleState::from_inputs(samples, sys)?;
    let labels = EnsembleState::from_labels(samples, sys)?;
    let lifted_cost = evaluate_sequence(&inputs, &labels, &seq, model, &grid, setup.measure_level, sys)?;
    let outputs = samples
        .iter()
        .map(|s| forward_sequence(&s.inputs, &seq.actions, sys))
        .collect::<Result<Vec<Vec<ParticleState>>, _>>()?;
    let metrics = Metrics {
        model,
        split,
        samples: samples.len(),
        particle_mse: particle_loss(&outputs, samples)?,
        lifted_cost,
    };
    if let Some(dir) = out_dir {
        write(&dir.join(METRICS_FILE), &to_json(&metrics))?;
    }
    Ok(metrics)
}

fn dataset_or_generated(cfg: &RunConfig, dataset: Option<&Path>) -> Result<Dataset, CliError> {
    let data = match dataset {
        Some(p) => load_dataset(p)?.0,
        None => generate_dataset(&cfg.dataset_spec())?,
    };
    check_samples(&data.train, cfg)?;
    check_samples(&data.test, cfg)?;
    Ok(data)
}

pub fn sweep(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    levels: &[usize],
    out_dir: &Path,
) -> Result<(PathBuf, Vec<tqdp_core::experiments::SweepRow>), CliError> {
    let data = dataset_or_generated(cfg, dataset)?;
    let (rows, _) = run_training_sweep(&cfg.training_setup()?, &data, levels)?;
    let path = out_dir.join(SWEEP_FILE);
    write_csv(&path, &rows)?;
    Ok((path, rows))
}

pub fn robustness(
    cfg: &RunConfig,
    sizes: &[usize],
    out_dir: &Path,
) -> Result<(PathBuf, Vec<tqdp_core::experiments::RobustnessRow>), CliError> {
    let spec = tqdp_core::experiments::RobustnessSpec {
        sizes: sizes.to_vec(),
        ..cfg.robustness_spec()
    };
    let rows = robustness_study(&cfg.training_setup()?, &spec)?;
    let path = out_dir.join(ROBUSTNESS_FILE);
    write_csv(&path, &rows)?;
    Ok((path, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `state_w2`, `simplex_euclidean` or `simplex_w2`.
    pub quantity: String,
    pub level: u64,
    pub trial: usize,
    pub value: f64,
    pub bound: Option<f64>,
}

const BENCH_TRIALS: usize = 20;
const BENCH_DENOMINATOR: u64 = 1_000_000;

/// Empirical quantization errors next to their theoretical bounds.
pub fn quantizer_bench(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, Vec<BenchRow>), CliError> {
    let sys = cfg.system()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dataset.seed);
    let mut rows = Vec::new();

    for n in [5usize, 10, 20, 40] {
        let grid = build_state_grid(&sys.state_box, n, sys.n_particles)?;
        for trial in 0..BENCH_TRIALS {
            let inputs: Vec<Vec<f64>> = (0..sys.n_particles)
                .map(|_| sys.state_box.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
                .collect();
            let mu = DiscreteMeasure::empirical(&attach_encodings(&inputs, &sys)?);
            let (w2, _) = wasserstein2_sq(&mu, &grid.quantize_discrete(&mu), sys.lambda)?;
            rows.push(BenchRow {
                quantity: "state_w2".into(),
                level: n as u64,
                trial,
                value: w2.sqrt(),
                bound: Some(1.0 / n as f64),
            });
        }
    }

    // random rational measures on a coarse grid, quantized at growing levels
    let grid = build_state_grid(&sys.state_box, 2, sys.n_particles)?;
    let size = grid.num_atoms();
    let atoms: Vec<ParticleState> = (0..size).map(|a| grid.atom(a)).collect();
    for trial in 0..BENCH_TRIALS {
        let mut counts = vec![0u64; size];
        let cuts = {
            let mut c: Vec<u64> = (0..size - 1).map(|_| rng.gen_range(0..=BENCH_DENOMINATOR)).collect();
            c.sort_unstable();
            c
        };
        let mut prev = 0;
        for (a, &c) in cuts.iter().chain(std::iter::once(&BENCH_DENOMINATOR)).enumerate() {
            counts[a] = c - prev;
            prev = c;
        }
        let p: Vec<f64> = counts.iter().map(|&c| c as f64 / BENCH_DENOMINATOR as f64).collect();
        let mu = DiscreteMeasure::from_parts(atoms.clone(), counts.clone(), BENCH_DENOMINATOR)?;
        for level in [5u32, 10, 20, 40, 80, 160] {
            let q = quantize_measure(&p, level)?;
            rows.push(BenchRow {
                quantity: "simplex_euclidean".into(),
                level: u64::from(level),
                trial,
                value: simplex_distance(&p, &q),
                bound: Some(quantizer_error_bound(size, level)),
            });
            let (w2, _) = wasserstein2_sq(&mu, &q.to_discrete(&grid), sys.lambda)?;
            rows.push(BenchRow {
                quantity: "simplex_w2".into(),
                level: u64::from(level),
                trial,
                value: w2.sqrt(),
                bound: None,
            });
        }
    }
    let path = out_dir.join(BENCH_FILE);
    write_csv(&path, &rows)?;
    Ok((path, rows))
}
