//! Desk-scale formulation study: train each variant on each toy dataset,
//! sample under every (EMA, sampler) control, score the samples and rank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrank::{
    rank_records, toy_metrics, Control, LabelledPoints, MetricRecord, RankRow, VariantSpec, SAMPLER_SETTINGS,
};
use crate::par::{self, derive_seed, Exec};
use crate::sample::{sample_model, sample_path_lengths, SamplerConfig};
use crate::train::{ToyDataset, TrainConfig, Trainer};

const REFERENCE_STREAM: u64 = 7 << 40;
const SAMPLE_STREAM: u64 = 8 << 40;

/// Study plan and the training budget applied to every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub variants: Vec<VariantSpec>,
    pub datasets: Vec<ToyDataset>,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_ema_period")]
    pub ema_period: u64,
    /// Reference and generated samples per class.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> u64 {
    2000
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> u64 {
    200
}
fn default_depth() -> usize {
    1
}
fn default_ema_decay() -> f64 {
    0.99
}
fn default_ema_period() -> u64 {
    2
}
fn default_per_class() -> usize {
    64
}

impl StudyConfig {
    pub fn new(variants: Vec<VariantSpec>, datasets: Vec<ToyDataset>) -> Self {
        Self {
            variants,
            datasets,
            steps: default_steps(),
            batch: default_batch(),
            lr: default_lr(),
            warmup: default_warmup(),
            depth: default_depth(),
            ema_decay: default_ema_decay(),
            ema_period: default_ema_period(),
            per_class: default_per_class(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.datasets.is_empty() {
            return Err(Error::contract("study needs at least one variant and one dataset"));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|w| w.label == v.label) {
                return Err(Error::contract(format!("variant `{}` listed twice", v.label)));
            }
        }
        self.train_config(&self.variants[0], self.datasets[0]).validate()
    }

    /// Training config for one (variant, dataset) pair.
    pub fn train_config(&self, variant: &VariantSpec, dataset: ToyDataset) -> TrainConfig {
        let mut c = TrainConfig::new(variant.clone(), dataset, self.steps);
        c.batch = self.batch;
        c.lr = self.lr;
        c.warmup = self.warmup;
        c.depth = self.depth as u64;
        c.ema_decay = self.ema_decay;
        c.ema_period = self.ema_period;
        c.val_every = 0;
        c.seed = self.seed;
        c
    }

    /// Every (variant, control) cell the study would populate.
    pub fn planned_cells(&self) -> Vec<(String, Control)> {
        let mut cells = Vec::new();
        for v in &self.variants {
            for c in controls(&self.datasets) {
                cells.push((v.label.clone(), c));
            }
        }
        cells
    }
}

/// Datasets x EMA flag x sampler settings.
pub fn controls(datasets: &[ToyDataset]) -> Vec<Control> {
    let mut out = Vec::new();
    for d in datasets {
        for ema in [false, true] {
            for sampler in 0..SAMPLER_SETTINGS.len() {
                out.push(Control { dataset: d.name().to_string(), ema, sampler });
            }
        }
    }
    out
}

/// A cell that produced no record, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MissingCell {
    pub variant: String,
    pub control: Control,
    pub reason: String,
}

/// Mean ratio of the 50-step trajectory length to the endpoint distance,
/// raw weights at guidance 1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathStat {
    pub variant: String,
    pub dataset: String,
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StudyOutcome {
    pub records: Vec<MetricRecord>,
    pub missing: Vec<MissingCell>,
    pub paths: Vec<PathStat>,
}

impl StudyOutcome {
    pub fn ranking(&self) -> Result<Vec<RankRow>> {
        if self.records.is_empty() {
            return Err(Error::contract("study produced no records"));
        }
        rank_records(&self.records)
    }

    pub fn record(&self, variant: &str, control: &Control) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.variant == variant && &r.control == control)
    }

    pub fn path_ratio(&self, variant: &str, dataset: ToyDataset) -> Option<f64> {
        self.paths.iter().find(|p| p.variant == variant && p.dataset == dataset.name()).map(|p| p.ratio)
    }
}

/// Balanced reference set for `dataset`, shared by every variant.
pub fn reference_set(dataset: ToyDataset, per_class: usize, seed: u64) -> LabelledPoints {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, REFERENCE_STREAM + dataset as u64));
    let b = dataset.sample_balanced(per_class, &mut rng);
    LabelledPoints { dim: dataset.dim(), points: b.x, classes: b.classes }
}

struct PairOutcome {
    records: Vec<MetricRecord>,
    missing: Vec<MissingCell>,
    path: Option<PathStat>,
}

/// Trains and evaluates every (variant, dataset) pair. Pairs run through
/// `exec`; failures become missing cells instead of aborting the study.
pub fn run_study(config: &StudyConfig, exec: Exec) -> Result<StudyOutcome> {
    config.validate()?;
    let pairs: Vec<(VariantSpec, ToyDataset)> = config
        .variants
        .iter()
        .flat_map(|v| config.datasets.iter().map(move |&d| (v.clone(), d)))
        .collect();
    let results = par::map(exec, pairs, |(v, d)| run_pair(config, &v, d));
    let mut out = StudyOutcome::default();
    for r in results {
        out.records.extend(r.records);
        out.missing.extend(r.missing);
        out.paths.extend(r.path);
    }
    Ok(out)
}

fn run_pair(config: &StudyConfig, variant: &VariantSpec, dataset: ToyDataset) -> PairOutcome {
    let mut out = PairOutcome { records: Vec::new(), missing: Vec::new(), path: None };
    let cells = controls(&[dataset]);
    let trained = Trainer::<f64>::new(config.train_config(variant, dataset)).and_then(|mut t| {
        t.exec = Exec::Sequential;
        while t.state.step < t.config.steps {
            t.step()?;
        }
        Ok(t)
    });
    let trainer = match trained {
        Ok(t) => t,
        Err(e) => {
            out.missing = cells
                .into_iter()
                .map(|control| MissingCell { variant: variant.label.clone(), control, reason: format!("training: {e}") })
                .collect();
            return out;
        }
    };
    let reference = reference_set(dataset, config.per_class, config.seed);
    for control in cells {
        let (steps, guidance) = SAMPLER_SETTINGS[control.sampler];
        let params = if control.ema { &trainer.state.ema } else { &trainer.state.params };
        // Common random numbers: every variant starts from the same noise.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SAMPLE_STREAM + control.sampler as u64));
        let keep = !control.ema && control.sampler == 0;
        let scored = sample_model(
            variant,
            &trainer.model,
            params,
            dataset.latent_shape(),
            &reference.classes,
            &SamplerConfig::new(steps, guidance),
            keep,
            &mut rng,
        )
        .and_then(|s| {
            if keep {
                let lengths = sample_path_lengths(&s.states, dataset.dim())?;
                let ratio = lengths.iter().map(|(l, d)| l / d.max(1e-12)).sum::<f64>() / lengths.len() as f64;
                out.path = Some(PathStat { variant: variant.label.clone(), dataset: dataset.name().into(), ratio });
            }
            let pts = LabelledPoints { dim: dataset.dim(), points: s.x, classes: s.classes };
            toy_metrics(&pts, &reference)
        });
        match scored {
            Ok((a, b)) => out.records.push(MetricRecord {
                variant: variant.label.clone(),
                control,
                objective_a: a,
                objective_b: b,
            }),
            Err(e) => out.missing.push(MissingCell { variant: variant.label.clone(), control, reason: e.to_string() }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalrank::variant_grid;
    use crate::timesamplers::TimestepDensity;

    #[test]
    fn full_grid_plans_61_by_24_cells() {
        let c = StudyConfig::new(variant_grid(), vec![ToyDataset::GaussMix2D, ToyDataset::Checkerboard2D]);
        assert_eq!(controls(&c.datasets).len(), 24);
        assert_eq!(c.planned_cells().len(), 61 * 24);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn empty_or_duplicate_studies_are_rejected() {
        assert!(StudyConfig::new(vec![], vec![ToyDataset::GaussMix2D]).validate().is_err());
        let v = VariantSpec::eps_linear();
        assert!(StudyConfig::new(vec![v.clone(), v], vec![ToyDataset::GaussMix2D]).validate().is_err());
        let json = r#"{"variants":["rf","eps/linear"],"datasets":["gaussmix2d"],"steps":3}"#;
        let c: StudyConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.steps, c.per_class, c.ema_period), (3, 64, 2));
    }

    #[test]
    fn tiny_study_fills_every_cell() {
        let mut c = StudyConfig::new(
            vec![VariantSpec::rf(TimestepDensity::Uniform), VariantSpec::eps_linear()],
            vec![ToyDataset::GaussMix2D],
        );
        c.steps = 3;
        c.batch = 16;
        c.warmup = 1;
        c.per_class = 8;
        let out = run_study(&c, Exec::default()).unwrap();
        assert_eq!(out.records.len() + out.missing.len(), 24);
        assert_eq!(out.paths.len(), 2);
        let rows = out.ranking().unwrap();
        assert_eq!(rows.len(), 2);
        let again = run_study(&c, Exec::Sequential).unwrap();
        assert_eq!(out, again);
    }
}
