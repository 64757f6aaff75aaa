//! Formulation benchmarking: the variant grid, two-objective metric records,
//! non-dominated sorting and rank averaging over control settings.
//!
//! Objective `a` is higher-better (conditional fidelity), objective `b` is
//! lower-better (2-Wasserstein distance to a reference set).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::timesamplers::{TimestepDensity, MODE_S_MAX};
use crate::trajectories::{
    matched_edm_schedule, native_loss_factor, Parameterization, Schedule, WeightingSpec,
};

/// One training formulation: forward process, timestep density, network
/// output space and loss weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSpec {
    pub label: String,
    pub schedule: Schedule,
    pub density: TimestepDensity,
    pub parameterization: Parameterization,
    pub weighting: WeightingSpec,
}

impl VariantSpec {
    pub fn rf(density: TimestepDensity) -> Self {
        VariantSpec {
            label: density.to_string(),
            schedule: Schedule::RectifiedFlow,
            density,
            parameterization: Parameterization::Velocity,
            weighting: WeightingSpec::RectifiedFlow,
        }
    }

    pub fn eps_linear() -> Self {
        Self::diffusion("eps/linear", Schedule::ldm_linear(), Parameterization::EpsPrediction, WeightingSpec::EpsMse)
    }

    pub fn v_linear() -> Self {
        Self::diffusion("v/linear", Schedule::ldm_linear(), Parameterization::VPrediction, WeightingSpec::VMse)
    }

    pub fn eps_cos() -> Self {
        Self::diffusion("eps/cos", Schedule::Cosine, Parameterization::EpsPrediction, WeightingSpec::CosineEps)
    }

    pub fn v_cos() -> Self {
        Self::diffusion("v/cos", Schedule::Cosine, Parameterization::VPrediction, WeightingSpec::CosineV)
    }

    pub fn edm(p_mean: f64, p_std: f64) -> Result<Self> {
        let schedule = Schedule::edm(p_mean, p_std)?;
        Ok(Self::diffusion(
            &schedule.to_string(),
            schedule,
            Parameterization::FPrediction,
            WeightingSpec::Edm { p_mean, p_std },
        ))
    }

    /// EDM with a schedule whose log-SNR matches `target`'s.
    pub fn edm_matched(target: Schedule) -> Self {
        let schedule = matched_edm_schedule(&target);
        Self::diffusion(&schedule.to_string(), schedule, Parameterization::FPrediction, WeightingSpec::EdmInduced)
    }

    fn diffusion(label: &str, schedule: Schedule, p: Parameterization, w: WeightingSpec) -> Self {
        VariantSpec {
            label: label.to_string(),
            schedule,
            density: TimestepDensity::Uniform,
            parameterization: p,
            weighting: w,
        }
    }

    /// Multiplier on the squared error in the network's output space at `t`.
    pub fn loss_factor(&self, t: f64) -> Result<f64> {
        native_loss_factor(&self.weighting, self.parameterization, &self.schedule, t)
    }

    pub fn is_rectified_flow(&self) -> bool {
        self.schedule == Schedule::RectifiedFlow
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

fn parse_args<const N: usize>(label: &str, inner: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != N {
        return Err(Error::parse(format!("`{label}`: expected {N} argument(s)")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse::<f64>()
            .map_err(|_| Error::parse(format!("`{label}`: `{p}` is not a number")))?;
    }
    Ok(out)
}

fn with_args<'a>(s: &'a str, head: &str) -> Option<&'a str> {
    s.strip_prefix(head)?.strip_prefix('(')?.strip_suffix(')')
}

/// Closest grid label to `label` by edit distance.
pub fn nearest_label(label: &str) -> String {
    variant_grid()
        .into_iter()
        .map(|v| v.label)
        .min_by_key(|l| strsim::levenshtein(l, label))
        .unwrap_or_default()
}

impl FromStr for VariantSpec {
    type Err = Error;

    /// Accepts canonical labels and the spaced forms used in tables,
    /// e.g. `rf/lognorm(0.00, 1.00)`.
    fn from_str(label: &str) -> Result<Self> {
        let s: String = label.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        let v = match s.as_str() {
            "rf" | "rf/mode" => VariantSpec::rf(TimestepDensity::Uniform),
            "rf/cosmap" => VariantSpec::rf(TimestepDensity::CosMap),
            "eps/linear" => VariantSpec::eps_linear(),
            "v/linear" => VariantSpec::v_linear(),
            "eps/cos" => VariantSpec::eps_cos(),
            "v/cos" => VariantSpec::v_cos(),
            "edm/rf" => VariantSpec::edm_matched(Schedule::RectifiedFlow),
            "edm/cos" => VariantSpec::edm_matched(Schedule::Cosine),
            _ => {
                if let Some(a) = with_args(&s, "rf/mode") {
                    let [x] = parse_args::<1>(label, a)?;
                    VariantSpec::rf(TimestepDensity::mode(x).map_err(|e| {
                        Error::parameter(format!("`{label}`: {e}; mode scale must not exceed {MODE_S_MAX:.4}"))
                    })?)
                } else if let Some(a) = with_args(&s, "rf/lognorm") {
                    let [m, sd] = parse_args::<2>(label, a)?;
                    VariantSpec::rf(TimestepDensity::logit_normal(m, sd)?)
                } else if let Some(a) = with_args(&s, "edm") {
                    let [pm, ps] = parse_args::<2>(label, a)?;
                    VariantSpec::edm(pm, ps)?
                } else {
                    return Err(Error::parse(format!(
                        "unknown variant `{label}`; did you mean `{}`?",
                        nearest_label(&s)
                    )));
                }
            }
        };
        Ok(v)
    }
}

impl Serialize for VariantSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for VariantSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `n` evenly spaced points on `[lo, hi]`, rounded to the two decimals a
/// label carries so that labels parse back to the same values.
fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            format!("{x:.2}").parse::<f64>().expect("formatted float parses")
        })
        .collect()
}

/// The 61 formulations, in a fixed order.
///
/// Grid coordinates: mode scale at 7 points on `[-1, 1.75]` plus 1.0 and 0
/// (`rf`); logit-normal `m` at 5 points on `[-1, 1]` times `s` at 6 points
/// on `[0.2, 2.2]`; EDM `P_m` at 5 points on `[-1.2, 1.2]` times `P_s` at 3
/// points on `[0.6, 1.8]`.
pub fn variant_grid() -> Vec<VariantSpec> {
    let mut out = vec![
        VariantSpec::eps_linear(),
        VariantSpec::v_linear(),
        VariantSpec::eps_cos(),
        VariantSpec::v_cos(),
    ];
    for s in lattice(-1.0, 1.75, 7).into_iter().chain([1.0]) {
        out.push(VariantSpec::rf(TimestepDensity::Mode { s }));
    }
    out.push(VariantSpec::rf(TimestepDensity::Uniform));
    for m in lattice(-1.0, 1.0, 5) {
        for s in lattice(0.2, 2.2, 6) {
            out.push(VariantSpec::rf(TimestepDensity::LogitNormal { m, s }));
        }
    }
    out.push(VariantSpec::rf(TimestepDensity::CosMap));
    for pm in lattice(-1.2, 1.2, 5) {
        for ps in lattice(0.6, 1.8, 3) {
            out.push(VariantSpec::edm(pm, ps).expect("grid parameters are valid"));
        }
    }
    out.push(VariantSpec::edm_matched(Schedule::RectifiedFlow));
    out.push(VariantSpec::edm_matched(Schedule::Cosine));
    out
}

/// Sampler settings `(steps, guidance)` used as evaluation controls.
pub const SAMPLER_SETTINGS: [(usize, f64); 6] =
    [(50, 1.0), (50, 2.5), (50, 5.0), (5, 5.0), (10, 5.0), (25, 5.0)];

/// One evaluation cell: dataset, EMA flag and sampler setting index.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Control {
    pub dataset: String,
    pub ema: bool,
    pub sampler: usize,
}

impl Control {
    pub fn steps(&self) -> Option<usize> {
        SAMPLER_SETTINGS.get(self.sampler).map(|s| s.0)
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (steps, cfg) = SAMPLER_SETTINGS.get(self.sampler).copied().unwrap_or((0, f64::NAN));
        write!(f, "{}/{}/{}x{}", self.dataset, if self.ema { "ema" } else { "raw" }, steps, cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: String,
    pub control: Control,
    /// Higher is better.
    pub objective_a: f64,
    /// Lower is better.
    pub objective_b: f64,
}

/// Objective pair with `a` maximised and `b` minimised.
pub trait Objectives {
    fn objectives(&self) -> (f64, f64);
}

impl Objectives for MetricRecord {
    fn objectives(&self) -> (f64, f64) {
        (self.objective_a, self.objective_b)
    }
}

impl Objectives for (f64, f64) {
    fn objectives(&self) -> (f64, f64) {
        *self
    }
}

/// `p` is at least as good as `q` in both objectives and strictly better in one.
pub fn dominates(p: (f64, f64), q: (f64, f64)) -> bool {
    p.0 >= q.0 && p.1 <= q.1 && (p.0 > q.0 || p.1 < q.1)
}

fn check_finite<R: Objectives>(records: &[R]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let (a, b) = r.objectives();
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::numerical(format!("record {i} has a non-finite objective ({a}, {b})")));
        }
    }
    Ok(())
}

/// Indices of the non-dominated subset of `idx`, in ascending order.
///
/// Sorts by `a` descending; within a block of equal `a` only the smallest `b`
/// survives, and only when no block with larger `a` reached a `b` that small.
fn front_of(points: &[(f64, f64)], idx: &[usize]) -> Vec<usize> {
    let mut order = idx.to_vec();
    order.sort_by(|&i, &j| {
        points[j].0.total_cmp(&points[i].0).then(points[i].1.total_cmp(&points[j].1))
    });
    let mut front = Vec::new();
    let mut best_b = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let a = points[order[k]].0;
        let block_min = points[order[k]].1;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == a {
            end += 1;
        }
        if block_min < best_b {
            front.extend(order[k..end].iter().copied().filter(|&i| points[i].1 == block_min));
            best_b = block_min;
        }
        k = end;
    }
    front.sort_unstable();
    front
}

/// Indices of records no other record dominates. Exact ties stay in.
pub fn pareto_front<R: Objectives>(records: &[R]) -> Result<Vec<usize>> {
    check_finite(records)?;
    let points: Vec<_> = records.iter().map(Objectives::objectives).collect();
    let idx: Vec<usize> = (0..points.len()).collect();
    Ok(front_of(&points, &idx))
}

/// 1-based front index per record, from repeatedly peeling Pareto fronts.
pub fn non_dominated_sort<R: Objectives>(records: &[R]) -> Result<Vec<usize>> {
    check_finite(records)?;
    let points: Vec<_> = records.iter().map(Objectives::objectives).collect();
    let mut ranks = vec![0; points.len()];
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut level = 1;
    while !remaining.is_empty() {
        let front = front_of(&points, &remaining);
        for &i in &front {
            ranks[i] = level;
        }
        remaining.retain(|i| front.binary_search(i).is_err());
        level += 1;
    }
    Ok(ranks)
}

/// One row of the averaged ranking table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankRow {
    pub variant: String,
    pub all: f64,
    /// Mean over 5-step sampler cells; `NaN` when there are none.
    pub five_steps: f64,
    pub fifty_steps: f64,
    /// Populated cells over the number of distinct controls in the study.
    pub completeness: f64,
}

/// Ranks every variant within each control cell, then averages per variant.
///
/// Missing cells are skipped; `completeness` reports how many were present.
pub fn rank_records(records: &[MetricRecord]) -> Result<Vec<RankRow>> {
    check_finite(records)?;
    let mut cells: BTreeMap<&Control, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        cells.entry(&r.control).or_default().push(i);
    }
    let mut ranked = Vec::with_capacity(records.len());
    for (control, idx) in &cells {
        let cell: Vec<&MetricRecord> = idx.iter().map(|&i| &records[i]).collect();
        let pts: Vec<(f64, f64)> = cell.iter().map(|r| r.objectives()).collect();
        for (r, rank) in cell.iter().zip(non_dominated_sort(&pts)?) {
            ranked.push((r.variant.clone(), (*control).clone(), rank));
        }
    }
    average_rank(&ranked, cells.len())
}

/// Mean rank per variant over its cells, with 5-step and 50-step sub-means.
/// Sorted ascending by the overall mean, ties by label.
pub fn average_rank(ranks: &[(String, Control, usize)], total_controls: usize) -> Result<Vec<RankRow>> {
    #[derive(Default)]
    struct Acc {
        sums: [f64; 3],
        counts: [usize; 3],
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for (variant, control, rank) in ranks {
        let e = acc.entry(variant).or_default();
        let r = *rank as f64;
        e.sums[0] += r;
        e.counts[0] += 1;
        match control.steps() {
            Some(5) => {
                e.sums[1] += r;
                e.counts[1] += 1;
            }
            Some(50) => {
                e.sums[2] += r;
                e.counts[2] += 1;
            }
            _ => {}
        }
    }
    let total = total_controls.max(1) as f64;
    let mean = |a: &Acc, k: usize| if a.counts[k] == 0 { f64::NAN } else { a.sums[k] / a.counts[k] as f64 };
    let mut rows: Vec<RankRow> = acc
        .iter()
        .map(|(v, a)| RankRow {
            variant: v.to_string(),
            all: mean(a, 0),
            five_steps: mean(a, 1),
            fifty_steps: mean(a, 2),
            completeness: (a.counts[0] as f64 / total).min(1.0),
        })
        .collect();
    rows.sort_by(|x, y| x.all.total_cmp(&y.all).then_with(|| x.variant.cmp(&y.variant)));
    Ok(rows)
}

fn fmt_cell(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.2}")
    }
}

/// CSV with columns `variant,all,5_steps,50_steps,completeness`.
pub fn rank_table_csv(rows: &[RankRow]) -> String {
    let mut s = String::from("variant,all,5_steps,50_steps,completeness\n");
    for r in rows {
        s.push_str(&format!(
            "\"{}\",{},{},{},{:.3}\n",
            r.variant,
            fmt_cell(r.all),
            fmt_cell(r.five_steps),
            fmt_cell(r.fifty_steps),
            r.completeness
        ));
    }
    s
}

/// Fixed-width table for terminals.
pub fn rank_table_text(rows: &[RankRow]) -> String {
    let w = rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut s = format!("{:<w$}  {:>6}  {:>7}  {:>8}\n", "variant", "all", "5 steps", "50 steps");
    for r in rows {
        s.push_str(&format!(
            "{:<w$}  {:>6}  {:>7}  {:>8}\n",
            r.variant,
            fmt_cell(r.all),
            fmt_cell(r.five_steps),
            fmt_cell(r.fifty_steps)
        ));
    }
    s
}

/// Scatter of `(objective_b, objective_a)` with the first front drawn in red.
pub fn scatter_svg(records: &[MetricRecord]) -> Result<String> {
    let ranks = non_dominated_sort(records)?;
    let (w, h, pad) = (640.0, 480.0, 48.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if records.is_empty() {
        svg.push_str("</svg>\n");
        return Ok(svg);
    }
    let span = |f: fn(&MetricRecord) -> f64| {
        let lo = records.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
    };
    let (bl, bh) = span(|r| r.objective_b);
    let (al, ah) = span(|r| r.objective_a);
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" font-size=\"12\" text-anchor=\"middle\">W2 (lower is better)</text>\n\
         <text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">fidelity (higher is better)</text>\n",
        y = h - pad,
        x = w - pad,
        cx = w / 2.0,
        ty = h - 12.0,
        cy = h / 2.0,
    ));
    for (r, rank) in records.iter().zip(&ranks) {
        let x = pad + (r.objective_b - bl) / (bh - bl) * (w - 2.0 * pad);
        let y = h - pad - (r.objective_a - al) / (ah - al) * (h - 2.0 * pad);
        let color = if *rank == 1 { "#d62728" } else { "#7f7f7f" };
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{color}\"><title>{} {}</title></circle>\n",
            xml_escape(&r.variant),
            xml_escape(&r.control.to_string())
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Largest set size for which the exact assignment is attempted.
pub const MAX_ASSIGNMENT: usize = 512;
pub const MIN_METRIC_SAMPLES: usize = 64;

/// Minimum-cost perfect matching on a dense `n x n` cost matrix
/// (shortest augmenting paths with potentials, `O(n^3)`).
/// Returns `col_for_row`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::contract(format!("cost matrix has {} entries, expected {n}x{n}", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::numerical("assignment cost is not finite"));
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_for_row = vec![0; n];
    for j in 1..=n {
        col_for_row[row_of[j] - 1] = j - 1;
    }
    Ok(col_for_row)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact 2-Wasserstein distance between two equal-size point clouds stored
/// row-major with `dim` coordinates per point.
pub fn wasserstein2(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || a.len() != b.len() {
        return Err(Error::contract("wasserstein2: point sets must have equal size and dimension"));
    }
    let n = a.len() / dim;
    if n > MAX_ASSIGNMENT {
        return Err(Error::contract(format!(
            "exact assignment limited to {MAX_ASSIGNMENT} points, got {n}; subsample the sets first"
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = sq_dist(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
        }
    }
    let assign = min_cost_assignment(&cost, n)?;
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

/// Points with their class labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledPoints {
    pub dim: usize,
    pub points: Vec<f64>,
    pub classes: Vec<usize>,
}

impl LabelledPoints {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.dim == 0 || self.points.len() != self.dim * self.classes.len() {
            return Err(Error::contract(format!("{what}: points and classes are misaligned")));
        }
        Ok(())
    }
}

/// `(fidelity, W2)`: the fraction of samples whose nearest reference point
/// shares the sample's conditioning class, and the exact 2-Wasserstein
/// distance between the two sets.
pub fn toy_metrics(samples: &LabelledPoints, reference: &LabelledPoints) -> Result<(f64, f64)> {
    samples.check("samples")?;
    reference.check("reference")?;
    if samples.dim != reference.dim {
        return Err(Error::contract("samples and reference differ in dimension"));
    }
    if samples.len() < MIN_METRIC_SAMPLES {
        return Err(Error::contract(format!(
            "toy metrics need at least {MIN_METRIC_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let mut hits = 0usize;
    for i in 0..samples.len() {
        let p = samples.point(i);
        let nearest = (0..reference.len())
            .min_by(|&j, &k| sq_dist(p, reference.point(j)).total_cmp(&sq_dist(p, reference.point(k))))
            .ok_or_else(|| Error::contract("empty reference set"))?;
        if reference.classes[nearest] == samples.classes[i] {
            hits += 1;
        }
    }
    let fidelity = hits as f64 / samples.len() as f64;
    let w2 = wasserstein2(&samples.points, &reference.points, samples.dim)?;
    Ok((fidelity, w2))
}
