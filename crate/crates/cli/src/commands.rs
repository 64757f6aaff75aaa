use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowlab::dataguard::{self, Corpus};
use flowlab::evalrank::{rank_table_csv, rank_table_text, scatter_svg, toy_metrics, LabelledPoints, VariantSpec};
use flowlab::par::{derive_seed, Exec};
use flowlab::sample::{sample_model, sample_path_lengths, shift_time_alpha, shifted_pdf, time_grid, uncertainty_sigma, SamplerConfig, PAPER_SHIFT};
use flowlab::study::{reference_set, run_study, StudyConfig};
use flowlab::tensor::{Checkpoint, Scalar};
use flowlab::timesamplers::TimestepDensity;
use flowlab::train::{MetricsCsv, Precision, TrainConfig, Trainer};
use flowlab::trajectories::Schedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::manifest::Run;

const SEED_ENV: &str = "FLOWLAB_SEED";
const SAMPLE_STREAM: u64 = 9 << 40;

/// Seed from `FLOWLAB_SEED`, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(
            s.trim().parse().map_err(|_| flowlab::Error::parse(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
        )),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(flowlab::Error::parse(format!("{SEED_ENV}: {e}")).into()),
    }
}

fn read_config(path: &Path) -> Result<(Vec<u8>, serde_json::Value)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let value = serde_json::from_slice(&bytes).map_err(flowlab::Error::from).with_context(|| format!("parsing {}", path.display()))?;
    Ok((bytes, value))
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub steps: Option<u64>,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (bytes, value) = read_config(&args.config)?;
    let mut config: TrainConfig = serde_json::from_value(value)
        .map_err(flowlab::Error::from)
        .with_context(|| format!("invalid training config {}", args.config.display()))?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    config.validate()?;
    let mut run = Run::start("train", &args.out, Some(&args.config), &bytes, Some(config.seed))?;
    match config.precision {
        Precision::F32 => train_as::<f32>(config, args, &mut run)?,
        Precision::F64 => train_as::<f64>(config, args, &mut run)?,
    }
    run.finish()
}

fn train_as<T: Scalar>(config: TrainConfig, args: &TrainArgs, run: &mut Run) -> Result<()> {
    let csv_path = run.path("metrics.csv");
    let (mut trainer, file, header) = match &args.resume {
        Some(ck) => {
            let ck = Checkpoint::load(ck).with_context(|| format!("loading checkpoint {}", ck.display()))?;
            let mut t = Trainer::<T>::from_checkpoint(&ck)?;
            t.config.steps = config.steps;
            let file = OpenOptions::new().append(true).create(true).open(&csv_path)?;
            (t, file, false)
        }
        None => {
            let mut file = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
            file.write_all(run.tag_line().as_bytes())?;
            (Trainer::<T>::new(config)?, file, true)
        }
    };
    let mut csv = MetricsCsv::new(BufWriter::new(file), trainer.config.val_levels, header)?;
    let result = trainer.run(&mut csv);
    csv.into_inner().flush()?;
    run.register("metrics.csv")?;
    result?;
    let mut ck = trainer.checkpoint()?;
    ck.metadata.insert("config_hash".into(), run.hash().into());
    ck.save(&run.path("checkpoint.bin"))?;
    run.register("checkpoint.bin")?;
    eprintln!("trained {} for {} steps -> {}", trainer.config.variant.label, trainer.state.step, args.out.display());
    Ok(())
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub steps: usize,
    pub guidance: f64,
    pub shift: f64,
    pub per_class: usize,
    pub ema: bool,
    pub seed: Option<u64>,
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let bytes = fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let config: TrainConfig = serde_json::from_value(
        ck.metadata.get("config").cloned().ok_or_else(|| flowlab::Error::parse("checkpoint has no config"))?,
    )
    .map_err(flowlab::Error::from)?;
    let seed = seed_override()?.or(args.seed).unwrap_or(config.seed);
    let settings = json!({
        "checkpoint_hash": crate::manifest::content_hash(&bytes),
        "steps": args.steps, "guidance": args.guidance, "shift": args.shift,
        "per_class": args.per_class, "ema": args.ema, "seed": seed,
    });
    let mut run = Run::start("sample", &args.out, Some(&args.checkpoint), settings.to_string().as_bytes(), Some(seed))?;
    let sampler = SamplerConfig { steps: args.steps, guidance: args.guidance, shift: args.shift };
    let (csv, summary) = match config.precision {
        Precision::F32 => sample_as::<f32>(&ck, &sampler, args, seed)?,
        Precision::F64 => sample_as::<f64>(&ck, &sampler, args, seed)?,
    };
    run.write("samples.csv", &csv)?;
    run.write("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string(&summary)?);
    run.finish()
}

fn sample_as<T: Scalar>(ck: &Checkpoint, sampler: &SamplerConfig, args: &SampleArgs, seed: u64) -> Result<(String, serde_json::Value)> {
    let trainer = Trainer::<T>::from_checkpoint(ck)?;
    let ds = trainer.config.dataset;
    let variant = &trainer.config.variant;
    let classes: Vec<usize> = (0..ds.num_classes()).flat_map(|k| std::iter::repeat_n(k, args.per_class)).collect();
    let params = if args.ema { &trainer.state.ema } else { &trainer.state.params };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SAMPLE_STREAM));
    let s = sample_model(variant, &trainer.model, params, ds.latent_shape(), &classes, sampler, true, &mut rng)?;
    let dim = ds.dim();
    let lengths = sample_path_lengths(&s.states, dim)?;
    let ratio = lengths.iter().map(|(l, d)| l / d.max(1e-12)).sum::<f64>() / lengths.len() as f64;

    let mut csv = String::from("class");
    (0..dim).for_each(|j| csv += &format!(",x{j}"));
    csv.push('\n');
    for (i, k) in s.classes.iter().enumerate() {
        csv += &k.to_string();
        for v in &s.x[i * dim..(i + 1) * dim] {
            csv += &format!(",{v:?}");
        }
        csv.push('\n');
    }
    let mut summary = json!({
        "variant": variant.label, "dataset": ds.name(), "samples": classes.len(),
        "steps": sampler.steps, "guidance": sampler.guidance, "shift": sampler.shift, "ema": args.ema,
        "mean_path_ratio": ratio,
    });
    let pts = LabelledPoints { dim, points: s.x, classes: s.classes };
    if (64..=512).contains(&pts.len()) {
        let (fidelity, w2) = toy_metrics(&pts, &reference_set(ds, args.per_class, trainer.config.seed))?;
        summary["fidelity"] = fidelity.into();
        summary["w2"] = w2.into();
    }
    Ok((csv, summary))
}

pub struct DensitiesArgs {
    pub out: PathBuf,
    pub labels: Vec<String>,
    pub points: usize,
    pub shift: f64,
}

pub fn densities(args: &DensitiesArgs) -> Result<()> {
    if args.points < 2 {
        return Err(flowlab::Error::parameter("need at least two grid points").into());
    }
    let mut dens: Vec<(String, TimestepDensity)> = Vec::new();
    for l in &args.labels {
        let v: VariantSpec = l.parse()?;
        if !v.is_rectified_flow() {
            bail!(flowlab::Error::parse(format!("`{l}` is not a rectified-flow density label")));
        }
        dens.push((v.label, v.density));
    }
    let settings = json!({ "labels": args.labels, "points": args.points, "shift": args.shift });
    let mut run = Run::start("densities", &args.out, None, settings.to_string().as_bytes(), None)?;
    let mut csv = String::from("t");
    for (l, _) in &dens {
        csv += &format!(",\"{l}\"");
    }
    csv.push('\n');
    let n = args.points - 1;
    let mut mass = vec![0.0; dens.len()];
    for i in 0..=n {
        // Interior points only: several densities vanish or diverge at the ends.
        let t = (i as f64 + 0.5) / (n + 1) as f64;
        csv += &format!("{t:?}");
        for (k, (_, d)) in dens.iter().enumerate() {
            let p = shifted_pdf(d, t, args.shift)?;
            mass[k] += p / (n + 1) as f64;
            csv += &format!(",{p:?}");
        }
        csv.push('\n');
    }
    run.write("densities.csv", &csv)?;
    for ((l, _), m) in dens.iter().zip(&mass) {
        println!("{l:28} midpoint mass {m:.6}");
    }
    run.finish()
}

pub struct ShiftArgs {
    pub out: PathBuf,
    pub resolutions: Vec<f64>,
    pub alphas: Vec<f64>,
    pub points: usize,
    pub steps: usize,
}

pub fn shift_study(args: &ShiftArgs) -> Result<()> {
    if args.points < 2 || args.steps == 0 {
        return Err(flowlab::Error::parameter("need at least two t points and one step").into());
    }
    if let Some(a) = args.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(flowlab::Error::parameter(format!("shift must be positive, got {a}")).into());
    }
    if let Some(r) = args.resolutions.iter().find(|r| !(**r >= 1.0)) {
        return Err(flowlab::Error::parameter(format!("resolution must be at least one pixel, got {r}")).into());
    }
    let mut alphas: Vec<(f64, &str)> = args.alphas.iter().map(|&a| (a, "flag")).collect();
    if let Some(&base) = args.resolutions.first() {
        for &m in &args.resolutions[1..] {
            alphas.push(((m / base).sqrt(), "resolution"));
        }
    }
    if !alphas.iter().any(|(a, _)| *a == PAPER_SHIFT) {
        alphas.push((PAPER_SHIFT, "paper"));
    }
    let settings = json!({ "resolutions": args.resolutions, "alphas": args.alphas, "points": args.points, "steps": args.steps });
    let mut run = Run::start("shift-study", &args.out, None, settings.to_string().as_bytes(), None)?;
    let rf = Schedule::RectifiedFlow;
    let ts: Vec<f64> = (1..args.points).map(|i| i as f64 / args.points as f64).collect();

    let mut sigma = String::from("resolution,t,sigma\n");
    for &n in &args.resolutions {
        for &t in &ts {
            sigma += &format!("{n},{t:?},{:?}\n", uncertainty_sigma(t, n)?);
        }
    }
    let mut shift = String::from("alpha,source,paper_default,t,t_shifted,lambda,lambda_shifted,delta_lambda,minus_two_log_alpha\n");
    let mut grids = String::from("alpha,k,t\n");
    let mut monotone = true;
    for &(alpha, source) in &alphas {
        let mut prev = -1.0;
        for &t in &ts {
            let tm = shift_time_alpha(t, alpha)?;
            monotone &= tm > prev && (shift_time_alpha(tm, 1.0 / alpha)? - t).abs() < 1e-12;
            prev = tm;
            let (l, lm) = (rf.snr(t)?.lambda, rf.snr(tm)?.lambda);
            shift += &format!(
                "{alpha},{source},{},{t:?},{tm:?},{l:?},{lm:?},{:?},{:?}\n",
                alpha == PAPER_SHIFT,
                lm - l,
                -2.0 * alpha.ln()
            );
        }
        for (k, t) in time_grid(&rf, args.steps, alpha)?.iter().enumerate() {
            grids += &format!("{alpha},{k},{t:?}\n");
        }
    }
    if !monotone {
        return Err(flowlab::Error::numerical("shifted grid lost monotonicity or invertibility").into());
    }
    run.write("sigma.csv", &sigma)?;
    run.write("shift.csv", &shift)?;
    run.write("grids.csv", &grids)?;
    println!("{} shifts x {} points; bijection check passed", alphas.len(), ts.len());
    run.finish()
}

pub struct RankArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub dry_run: bool,
    pub sequential: bool,
}

pub fn rank(args: &RankArgs) -> Result<()> {
    let (bytes, value) = read_config(&args.config)?;
    let mut config: StudyConfig = serde_json::from_value(value)
        .map_err(flowlab::Error::from)
        .with_context(|| format!("invalid study config {}", args.config.display()))?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    config.validate()?;
    let mut run = Run::start("rank", &args.out, Some(&args.config), &bytes, Some(config.seed))?;
    if args.dry_run {
        let cells = config.planned_cells();
        let mut plan = String::from("variant,control\n");
        for (v, c) in &cells {
            plan += &format!("\"{v}\",{c}\n");
        }
        run.write("plan.csv", &plan)?;
        println!("{} variants x {} controls = {} planned cells", config.variants.len(), cells.len() / config.variants.len(), cells.len());
        return run.finish();
    }
    let outcome = run_study(&config, exec(args.sequential))?;
    let mut records = String::from("variant,dataset,ema,sampler,objective_a,objective_b\n");
    for r in &outcome.records {
        records += &format!(
            "\"{}\",{},{},{},{:?},{:?}\n",
            r.variant, r.control.dataset, r.control.ema, r.control.sampler, r.objective_a, r.objective_b
        );
    }
    let mut missing = String::from("variant,control,reason\n");
    for m in &outcome.missing {
        missing += &format!("\"{}\",{},\"{}\"\n", m.variant, m.control, m.reason.replace('"', "'"));
    }
    let mut paths = String::from("variant,dataset,path_ratio\n");
    for p in &outcome.paths {
        paths += &format!("\"{}\",{},{:?}\n", p.variant, p.dataset, p.ratio);
    }
    run.write("records.csv", &records)?;
    run.write("missing.csv", &missing)?;
    run.write("paths.csv", &paths)?;
    if !outcome.missing.is_empty() {
        eprintln!("warning: {} cells missing, see missing.csv", outcome.missing.len());
    }
    let rows = outcome.ranking()?;
    run.write("rank.csv", &rank_table_csv(&rows))?;
    run.write("rank.txt", &rank_table_text(&rows))?;
    run.write("scatter.svg", &scatter_svg(&outcome.records)?)?;
    print!("{}", rank_table_text(&rows));
    run.finish()
}

pub struct DedupArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub thresholds: Vec<f64>,
    pub clusters: Option<usize>,
    pub seed: Option<u64>,
    pub sequential: bool,
}

pub fn dedup(args: &DedupArgs) -> Result<()> {
    let bytes = fs::read(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let corpus: Corpus = dataguard::read_corpus_csv(bytes.as_slice()).with_context(|| format!("parsing {}", args.corpus.display()))?;
    let seed = seed_override()?.or(args.seed).unwrap_or(0);
    let clusters = args.clusters.unwrap_or_else(|| default_clusters(corpus.len()));
    let settings = json!({
        "corpus_hash": crate::manifest::content_hash(&bytes), "thresholds": args.thresholds,
        "clusters": clusters, "seed": seed,
    });
    let mut run = Run::start("dedup", &args.out, Some(&args.corpus), settings.to_string().as_bytes(), Some(seed))?;
    let sets = dataguard::deduplicate(&corpus, clusters, &args.thresholds, seed, exec(args.sequential))?;
    let rows: Vec<_> = args
        .thresholds
        .iter()
        .zip(&sets)
        .map(|(&threshold, s)| dataguard::DedupRow {
            threshold,
            total: corpus.len(),
            removed: s.len(),
            fraction: if corpus.is_empty() { 0.0 } else { s.len() as f64 / corpus.len() as f64 },
        })
        .collect();
    let mut ids = String::from("threshold,id\n");
    for (t, s) in args.thresholds.iter().zip(&sets) {
        for id in s {
            ids += &format!("{t},\"{id}\"\n");
        }
    }
    run.write("dedup.csv", &dataguard::dedup_csv(&rows))?;
    run.write("duplicates.csv", &ids)?;
    print!("{}", dataguard::dedup_csv(&rows));
    run.finish()
}

/// About `sqrt(n)` clusters: small enough that duplicates share a cluster,
/// large enough to keep range searches local.
pub fn default_clusters(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).clamp(1, dataguard::PAPER_CLUSTERS)
}

pub struct MemcheckArgs {
    pub generations: PathBuf,
    pub out: PathBuf,
    pub epsilons: Vec<f64>,
    pub clique: usize,
    pub tiles: usize,
    pub sequential: bool,
}

pub fn memcheck(args: &MemcheckArgs) -> Result<()> {
    let bytes = fs::read(&args.generations).with_context(|| format!("reading {}", args.generations.display()))?;
    let prompts = dataguard::read_generations_csv(bytes.as_slice()).with_context(|| format!("parsing {}", args.generations.display()))?;
    let settings = json!({
        "generations_hash": crate::manifest::content_hash(&bytes), "epsilons": args.epsilons,
        "clique": args.clique, "tiles": args.tiles,
    });
    let mut run = Run::start("memcheck", &args.out, Some(&args.generations), settings.to_string().as_bytes(), None)?;
    let mut eps = args.epsilons.clone();
    eps.sort_by(f64::total_cmp);
    let total: usize = prompts.iter().map(|p| p.ids.len()).sum();
    let mut report = String::from("epsilon,clique,generations,marked,fraction\n");
    let mut ids = String::from("epsilon,id\n");
    for &e in &eps {
        let marked = dataguard::detect_memorization(&prompts, e, args.clique, args.tiles, exec(args.sequential))?;
        let frac = if total == 0 { 0.0 } else { marked.len() as f64 / total as f64 };
        report += &format!("{e},{},{total},{},{frac:.6}\n", args.clique, marked.len());
        for id in &marked {
            ids += &format!("{e},\"{id}\"\n");
        }
    }
    run.write("memcheck.csv", &report)?;
    run.write("memorized.csv", &ids)?;
    print!("{report}");
    run.finish()
}
