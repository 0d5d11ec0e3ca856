//! Synthetic symbolic-regression datasets generated from known expressions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tasks::TaskError;
use crate::tasks::expr::Expr;
use crate::tasks::fit::Dataset;

const MAX_RETRIES: usize = 1000;
const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub ground_truth: Expr,
    pub true_params: Vec<f64>,
    pub input_ranges: Vec<(f64, f64)>,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDataset {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinDataset {
    ReactionKinetics,
    LogisticGrowth,
    DrivenOscillator,
    StressStrain,
}

impl BuiltinDataset {
    pub const ALL: [BuiltinDataset; 4] = [
        BuiltinDataset::ReactionKinetics,
        BuiltinDataset::LogisticGrowth,
        BuiltinDataset::DrivenOscillator,
        BuiltinDataset::StressStrain,
    ];

    /// Human-readable variable names, index-aligned with `(var i)`.
    pub fn variables(self) -> &'static [&'static str] {
        match self {
            BuiltinDataset::ReactionKinetics => &["A (concentration)", "T (temperature)"],
            BuiltinDataset::LogisticGrowth => &["P (population)"],
            BuiltinDataset::DrivenOscillator => &["x (position)", "v (velocity)", "t (time)"],
            BuiltinDataset::StressStrain => &["eps (strain)", "T (temperature)"],
        }
    }

    pub fn target(self) -> &'static str {
        match self {
            BuiltinDataset::ReactionKinetics => "dA/dt",
            BuiltinDataset::LogisticGrowth => "dP/dt",
            BuiltinDataset::DrivenOscillator => "dv/dt",
            BuiltinDataset::StressStrain => "stress",
        }
    }

    pub fn spec(self) -> DatasetSpec {
        let (name, truth, params, ranges): (&str, &str, Vec<f64>, Vec<(f64, f64)>) = match self {
            // First-order decay with an Arrhenius-like temperature factor.
            BuiltinDataset::ReactionKinetics => (
                "reaction-kinetics",
                "(* p0 (* (var 0) (exp (/ p1 (var 1)))))",
                vec![-1.5, -0.7],
                vec![(0.1, 2.0), (0.5, 2.0)],
            ),
            BuiltinDataset::LogisticGrowth => (
                "logistic-growth",
                "(* (* p0 (var 0)) (- 1 (/ (var 0) p1)))",
                vec![0.8, 2.0],
                vec![(0.1, 2.0)],
            ),
            // Damped spring with a cosine drive.
            BuiltinDataset::DrivenOscillator => (
                "driven-oscillator",
                "(+ (+ (* p0 (var 0)) (* p1 (var 1))) (* p2 (cos (* p3 (var 2)))))",
                vec![-1.0, -0.3, 0.5, 1.2],
                vec![(-1.0, 1.0), (-1.0, 1.0), (0.0, 5.0)],
            ),
            // Quadratic hardening with linear thermal softening.
            BuiltinDataset::StressStrain => (
                "stress-strain",
                "(* (+ (* p0 (var 0)) (* p1 (* (var 0) (var 0)))) (- 1 (* p2 (var 1))))",
                vec![2.0, -0.5, 0.3],
                vec![(0.0, 1.0), (0.0, 1.0)],
            ),
        };
        DatasetSpec {
            name: name.into(),
            ground_truth: truth.parse().expect("builtin expressions parse"),
            true_params: params,
            input_ranges: ranges,
            n_train: 64,
            n_test: 64,
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Misconfigured(format!("dataset {}: {m}", self.name)));
        if self.input_ranges.is_empty() {
            return bad("needs at least one input range".into());
        }
        for (i, &(lo, hi)) in self.input_ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("input range {i} [{lo}, {hi}] is degenerate"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite non-negative number".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("train and test sizes must be positive".into());
        }
        if self.ground_truth.param_count() > self.true_params.len() {
            return bad("ground truth reads more parameters than given".into());
        }
        if self.ground_truth.max_var().is_some_and(|v| v >= self.input_ranges.len()) {
            return bad("ground truth reads a variable without an input range".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }

    fn sample_split(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<f64>>, Vec<f64>), TaskError> {
        let mut inputs = Vec::with_capacity(n);
        let mut clean = Vec::with_capacity(n);
        for _ in 0..n {
            let mut accepted = None;
            for _ in 0..MAX_RETRIES {
                let x: Vec<f64> = self.input_ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
                let y = self.ground_truth.eval_point(&x, &self.true_params);
                if y.is_finite() {
                    accepted = Some((x, y));
                    break;
                }
            }
            let (x, y) = accepted.ok_or_else(|| TaskError::NonFiniteGroundTruth(self.name.clone()))?;
            inputs.push(x);
            clean.push(y);
        }
        Ok((inputs, clean))
    }

    /// Train and test inputs and the noise come from independent streams of
    /// the seed, so changing the noise level leaves the inputs unchanged.
    pub fn generate(&self) -> Result<GeneratedDataset, TaskError> {
        self.validate()?;
        let (train_x, mut train_y) = self.sample_split(self.n_train, &mut self.rng(TRAIN_STREAM))?;
        let (test_x, mut test_y) = self.sample_split(self.n_test, &mut self.rng(TEST_STREAM))?;
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            let mut rng = self.rng(NOISE_STREAM);
            for y in train_y.iter_mut().chain(test_y.iter_mut()) {
                *y += normal.sample(&mut rng);
            }
        }
        Ok(GeneratedDataset {
            train: Dataset { inputs: train_x, targets: train_y },
            test: Dataset { inputs: test_x, targets: test_y },
        })
    }
}

fn write_csv(path: &Path, data: &Dataset) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..data.n_vars()).map(|i| format!("x{i}")).chain(["y".to_string()]).collect();
    out.write_record(&header)?;
    for (row, y) in data.inputs.iter().zip(&data.targets) {
        out.write_record(row.iter().chain(std::iter::once(y)).map(|v| format!("{v:?}")))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset, TaskError> {
    let fault = |e: String| TaskError::Misconfigured(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| fault(e.to_string()))?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for row in reader.deserialize::<Vec<f64>>() {
        let mut cells = row.map_err(|e| fault(e.to_string()))?;
        let y = cells.pop().ok_or_else(|| fault("empty row".into()))?;
        inputs.push(cells);
        targets.push(y);
    }
    Ok(Dataset { inputs, targets })
}

/// Writes `<name>.train.csv`, `<name>.test.csv` and `<name>.json` into `dir`.
pub fn save(dir: &Path, spec: &DatasetSpec, data: &GeneratedDataset) -> Result<Vec<PathBuf>, csv::Error> {
    fs::create_dir_all(dir)?;
    let train = dir.join(format!("{}.train.csv", spec.name));
    let test = dir.join(format!("{}.test.csv", spec.name));
    let sidecar = dir.join(format!("{}.json", spec.name));
    write_csv(&train, &data.train)?;
    write_csv(&test, &data.test)?;
    fs::write(&sidecar, serde_json::to_string_pretty(spec).map_err(std::io::Error::other)?)?;
    Ok(vec![train, test, sidecar])
}
