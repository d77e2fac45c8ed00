//! Post-hoc analysis of rating experiments.
//!
//! Four-parameter logistic fits of paired-comparison proportions, rater
//! screening, MOS and differential DS-MOS scoring, and paired effect sizes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::psychometric::{sigmoid, Choice, FourParamLogistic};
use crate::stats::{mean, sample_sd};

/// Stimulus id marking a hidden-reference presentation in rating data.
pub const HIDDEN_REFERENCE: &str = "hidden-ref";
pub const MIN_RANGE: f64 = 0.25;
pub const SINGLE_RATING_SHARE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionPoint {
    pub level: f64,
    pub n_shown: u32,
    pub n_prefer_reference: u32,
}

impl ProportionPoint {
    pub fn proportion(&self) -> f64 {
        self.n_prefer_reference as f64 / self.n_shown as f64
    }
}

/// Per-level counts, sorted by level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProportionData {
    pub points: Vec<ProportionPoint>,
}

impl ProportionData {
    pub fn new(mut points: Vec<ProportionPoint>) -> Result<Self> {
        for p in &points {
            if p.n_prefer_reference > p.n_shown || !p.level.is_finite() {
                return Err(Error::ParameterDomain(format!(
                    "level {}: {} of {} preferred",
                    p.level, p.n_prefer_reference, p.n_shown
                )));
            }
        }
        points.sort_by(|a, b| a.level.total_cmp(&b.level));
        Ok(Self { points })
    }

    /// Tallies (level, choice) observations.
    pub fn from_observations(obs: impl IntoIterator<Item = (f64, Choice)>) -> Self {
        let mut tally: BTreeMap<u64, ProportionPoint> = BTreeMap::new();
        for (level, choice) in obs {
            let key = level.to_bits() ^ (1 << 63);
            let e = tally.entry(key).or_insert(ProportionPoint {
                level,
                n_shown: 0,
                n_prefer_reference: 0,
            });
            e.n_shown += 1;
            e.n_prefer_reference += choice.prefers_reference() as u32;
        }
        let mut points: Vec<_> = tally.into_values().collect();
        points.sort_by(|a, b| a.level.total_cmp(&b.level));
        Self { points }
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| ProportionPoint { level: p.level + c, ..*p })
                .collect(),
        }
    }

    fn used(&self) -> Vec<ProportionPoint> {
        self.points.iter().copied().filter(|p| p.n_shown > 0).collect()
    }
}

/// Result of the best converged start.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub params: FourParamLogistic,
    pub converged: bool,
    /// Square root of the weighted residual sum of squares.
    pub residual_norm: f64,
    /// Standard errors of (midpoint, slope, lower, upper); absent with no residual degrees of freedom.
    pub std_errors: Option<[f64; 4]>,
    pub iterations: usize,
    /// Objective after every accepted step, starting from the initial point.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlsOptions {
    pub starts: usize,
    pub max_iter: usize,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            max_iter: 500,
        }
    }
}

/// Unconstrained parameters: midpoint, ln slope, and logits for the asymptotes
/// with `lower = s(a)` and `upper = lower + (1 - lower) s(b)`.
#[derive(Debug, Clone, Copy)]
struct Raw([f64; 4]);

impl Raw {
    fn natural(&self) -> FourParamLogistic {
        let [m, ls, a, b] = self.0;
        let lower = sigmoid(a);
        FourParamLogistic {
            midpoint: m,
            slope: ls.exp(),
            lower,
            upper: lower + sigmoid(-a) * sigmoid(b),
        }
    }

    /// Model value and its gradient with respect to the raw parameters.
    fn eval(&self, x: f64) -> (f64, Vector4<f64>) {
        let [m, ls, a, b] = self.0;
        let s = ls.exp();
        let z = (x - m) / s;
        let (sz, sa, sna, sb) = (sigmoid(z), sigmoid(a), sigmoid(-a), sigmoid(b));
        let range = sna * sb;
        let dz = sz * sigmoid(-z);
        let f = sa + range * sz;
        let grad = Vector4::new(
            -range * dz / s,
            -range * dz * z,
            sa * sna * (1.0 - sb * sz),
            sna * sb * sigmoid(-b) * sz,
        );
        (f, grad)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct Problem<'a> {
    points: &'a [ProportionPoint],
}

impl Problem<'_> {
    fn objective(&self, raw: &Raw) -> f64 {
        self.points
            .iter()
            .map(|p| {
                let r = p.proportion() - raw.eval(p.level).0;
                p.n_shown as f64 * r * r
            })
            .sum()
    }

    /// Objective, J'J and J'r for residuals `sqrt(n) (p_hat - f)`.
    fn normal_equations(&self, raw: &Raw) -> (f64, Matrix4<f64>, Vector4<f64>) {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        let mut obj = 0.0;
        for p in self.points {
            let (f, g) = raw.eval(p.level);
            let w = p.n_shown as f64;
            let r = p.proportion() - f;
            obj += w * r * r;
            // Residual gradient is -sqrt(w) g.
            jtj += w * g * g.transpose();
            jtr -= w * r * g;
        }
        (obj, jtj, jtr)
    }

    /// Levenberg-Marquardt from one start.
    fn solve(&self, start: Raw, max_iter: usize) -> (Raw, bool, usize, Vec<f64>) {
        let mut raw = start;
        let (mut obj, mut jtj, mut jtr) = self.normal_equations(&raw);
        let mut trace = vec![obj];
        let mut lambda = 1e-3;
        let scale = 1.0 + self.points.iter().map(|p| p.n_shown as f64).sum::<f64>();
        for iter in 0..max_iter {
            if obj <= 1e-28 * scale || jtr.amax() <= 1e-12 * scale {
                return (raw, true, iter, trace);
            }
            let mut accepted = false;
            while lambda < 1e16 {
                let mut a = jtj;
                for i in 0..4 {
                    a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
                }
                let Some(delta) = a.lu().solve(&(-jtr)) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut cand = Raw([
                    raw.0[0] + delta[0],
                    (raw.0[1] + delta[1]).clamp(-30.0, 30.0),
                    (raw.0[2] + delta[2]).clamp(-40.0, 40.0),
                    (raw.0[3] + delta[3]).clamp(-40.0, 40.0),
                ]);
                if !cand.0[0].is_finite() {
                    lambda *= 10.0;
                    continue;
                }
                let cand_obj = self.objective(&cand);
                if cand_obj.is_finite() && cand_obj < obj {
                    let small_step = delta.amax() <= 1e-10 * (1.0 + raw.0[0].abs());
                    let small_gain = obj - cand_obj <= 1e-15 * obj.max(1e-300);
                    std::mem::swap(&mut raw, &mut cand);
                    (obj, jtj, jtr) = self.normal_equations(&raw);
                    trace.push(obj);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if small_step && small_gain {
                        return (raw, true, iter + 1, trace);
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // No decreasing step at any damping: a stationary point up to rounding.
                let ok = jtr.amax() <= 1e-6 * scale;
                return (raw, ok, iter, trace);
            }
        }
        (raw, false, max_iter, trace)
    }

    fn std_errors(&self, raw: &Raw, obj: f64) -> Option<[f64; 4]> {
        let dof = self.points.len().checked_sub(4).filter(|&d| d > 0)?;
        let (_, jtj, _) = self.normal_equations(raw);
        let cov_raw = jtj.try_inverse()? * (obj / dof as f64);
        // Delta method: Jacobian of (midpoint, slope, lower, upper) in raw space.
        let [_, ls, a, b] = raw.0;
        let (sa, sna, sb, snb) = (sigmoid(a), sigmoid(-a), sigmoid(b), sigmoid(-b));
        let mut d = Matrix4::zeros();
        d[(0, 0)] = 1.0;
        d[(1, 1)] = ls.exp();
        d[(2, 2)] = sa * sna;
        d[(3, 2)] = sa * sna * (1.0 - sb);
        d[(3, 3)] = sna * sb * snb;
        let cov = d * cov_raw * d.transpose();
        let se = [0, 1, 2, 3].map(|i| cov[(i, i)].max(0.0).sqrt());
        se.iter().all(|v| v.is_finite()).then_some(se)
    }
}

pub fn fit_logistic_nls(data: &ProportionData) -> Result<LogisticFit> {
    fit_logistic_nls_with(data, NlsOptions::default())
}

/// Weighted least squares `sum n (p_hat - f(level))^2` with multi-start
/// damped Gauss-Newton. Starts place the midpoint at the centers of the five
/// quintiles of the observed level range.
pub fn fit_logistic_nls_with(data: &ProportionData, opts: NlsOptions) -> Result<LogisticFit> {
    let points = data.used();
    let mut distinct: Vec<f64> = points.iter().map(|p| p.level).collect();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 distinct levels with observations, got {}",
            distinct.len()
        )));
    }
    let problem = Problem { points: &points };
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let span = hi - lo;
    let (a0, b0) = (logit(0.05), logit(0.9 / 0.95));
    let mut best: Option<(Raw, f64, usize, Vec<f64>)> = None;
    for k in 0..opts.starts {
        let m0 = lo + span * (k as f64 + 0.5) / opts.starts as f64;
        let start = Raw([m0, (span / 10.0).ln(), a0, b0]);
        let (raw, converged, iters, trace) = problem.solve(start, opts.max_iter);
        if !converged {
            continue;
        }
        let obj = *trace.last().unwrap();
        if best.as_ref().is_none_or(|(_, o, _, _)| obj < *o) {
            best = Some((raw, obj, iters, trace));
        }
    }
    let (raw, obj, iterations, objective_trace) = best.ok_or_else(|| {
        Error::FitFailure(format!("no start converged in {} iterations", opts.max_iter))
    })?;
    Ok(LogisticFit {
        params: raw.natural(),
        converged: true,
        residual_norm: obj.sqrt(),
        std_errors: problem.std_errors(&raw, obj),
        iterations,
        objective_trace,
    })
}

pub fn pse(fit: &LogisticFit) -> Result<f64> {
    if !fit.converged {
        return Err(Error::NoEstimate("fit did not converge".into()));
    }
    Ok(fit.params.midpoint)
}

/// Whether a PSE lies on the scale `[1, n_levels]`.
pub fn in_scale(pse: f64, n_levels: u32) -> bool {
    (1.0..=n_levels as f64).contains(&pse)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Exclusion {
    SingleRating { rating: u8, share: f64 },
    NotConverged(String),
    NonDiscriminative { range: f64 },
    OutOfScale { midpoint: f64 },
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exclusion::SingleRating { rating, share } => {
                write!(f, "{:.1}% of ratings are {rating}", share * 100.0)
            }
            Exclusion::NotConverged(msg) => write!(f, "fit failed: {msg}"),
            Exclusion::NonDiscriminative { range } => {
                write!(f, "non-discriminative (asymptote range {range:.3})")
            }
            Exclusion::OutOfScale { midpoint } => write!(f, "midpoint {midpoint:.2} out of scale"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Screening {
    Include,
    Exclude(Exclusion),
}

impl Screening {
    pub fn is_included(&self) -> bool {
        matches!(self, Screening::Include)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatingScale {
    #[serde(rename = "MOS")]
    Mos,
    #[serde(rename = "DS-MOS")]
    DsMos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub clip_id: String,
    pub variant_id: String,
    pub rating: u8,
    pub scale: RatingScale,
}

pub fn read_ratings_csv<R: Read>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let records = rdr.deserialize().collect::<std::result::Result<Vec<RatingRecord>, _>>()?;
    for (i, r) in records.iter().enumerate() {
        if !(1..=5).contains(&r.rating) {
            return Err(Error::Ingest {
                row: i + 1,
                message: format!("rating {} outside 1..5", r.rating),
            });
        }
    }
    Ok(records)
}

/// Excludes a rater when one rating value is more than 95% of their responses.
pub fn screen_rater(records: &[RatingRecord]) -> Screening {
    let mut counts = [0usize; 6];
    for r in records {
        counts[r.rating.min(5) as usize] += 1;
    }
    let total = records.len();
    let (rating, &count) = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap();
    // count / total > 0.95, compared exactly in integers.
    if total > 0 && count * 100 > total * 95 {
        Screening::Exclude(Exclusion::SingleRating {
            rating: rating as u8,
            share: count as f64 / total as f64,
        })
    } else {
        Screening::Include
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApcScreenOptions {
    pub min_range: f64,
    pub n_levels: u32,
}

impl Default for ApcScreenOptions {
    fn default() -> Self {
        Self {
            min_range: MIN_RANGE,
            n_levels: 50,
        }
    }
}

pub fn screen_apc_fit(fit: &Result<LogisticFit>, opts: ApcScreenOptions) -> Screening {
    let fit = match fit {
        Ok(f) if f.converged => f,
        Ok(_) => return Screening::Exclude(Exclusion::NotConverged("not converged".into())),
        Err(e) => return Screening::Exclude(Exclusion::NotConverged(e.to_string())),
    };
    let range = fit.params.upper - fit.params.lower;
    if range < opts.min_range {
        return Screening::Exclude(Exclusion::NonDiscriminative { range });
    }
    if !in_scale(fit.params.midpoint, opts.n_levels) {
        return Screening::Exclude(Exclusion::OutOfScale {
            midpoint: fit.params.midpoint,
        });
    }
    Screening::Include
}

/// `5 + (variant - hidden reference)`, clamped to the 1..5 scale.
pub fn dsmos_differential(variant_rating: u8, hidden_ref_rating: u8) -> Result<f64> {
    for r in [variant_rating, hidden_ref_rating] {
        if !(1..=5).contains(&r) {
            return Err(Error::ParameterDomain(format!("rating {r} outside 1..5")));
        }
    }
    Ok((5.0 + variant_rating as f64 - hidden_ref_rating as f64).clamp(1.0, 5.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialScore {
    pub rater_id: String,
    pub clip_id: String,
    pub variant_id: String,
    pub score: f64,
}

/// Pairs every DS-MOS rating with the same rater's hidden-reference rating
/// of the same clip. Repeated hidden-reference ratings are averaged.
pub fn dsmos_scores(records: &[RatingRecord]) -> Result<Vec<DifferentialScore>> {
    let mut refs: BTreeMap<(&str, &str), Vec<u8>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.scale == RatingScale::DsMos) {
        if r.variant_id == HIDDEN_REFERENCE {
            refs.entry((&r.rater_id, &r.clip_id)).or_default().push(r.rating);
        }
    }
    let mut out = Vec::new();
    for r in records
        .iter()
        .filter(|r| r.scale == RatingScale::DsMos && r.variant_id != HIDDEN_REFERENCE)
    {
        let hidden = refs.get(&(r.rater_id.as_str(), r.clip_id.as_str())).ok_or_else(|| {
            Error::Pairing(format!(
                "rater {} has no hidden-reference rating for clip {}",
                r.rater_id, r.clip_id
            ))
        })?;
        let h = hidden.iter().map(|&v| v as f64).sum::<f64>() / hidden.len() as f64;
        if !(1..=5).contains(&r.rating) {
            return Err(Error::ParameterDomain(format!("rating {} outside 1..5", r.rating)));
        }
        out.push(DifferentialScore {
            rater_id: r.rater_id.clone(),
            clip_id: r.clip_id.clone(),
            variant_id: r.variant_id.clone(),
            score: (5.0 + r.rating as f64 - h).clamp(1.0, 5.0),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub n_raters: usize,
}

impl MeanCi {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }
}

fn t_quantile(p: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("degrees of freedom are positive")
        .inverse_cdf(p)
}

/// 95% t interval across raters of per-rater mean scores.
pub fn mean_ci(per_rater: &[f64]) -> Result<MeanCi> {
    let n = per_rater.len();
    if n < 2 {
        return Err(Error::NoCi(format!("need at least 2 raters, got {n}")));
    }
    let sd = sample_sd(per_rater).unwrap();
    Ok(MeanCi {
        mean: mean(per_rater),
        half_width: t_quantile(0.975, (n - 1) as f64) * sd / (n as f64).sqrt(),
        n_raters: n,
    })
}

/// Per-rater means first, then the across-rater mean with its 95% CI.
pub fn mos_aggregate<'a>(ratings: impl IntoIterator<Item = (&'a str, f64)>) -> Result<MeanCi> {
    let mut by_rater: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (rater, score) in ratings {
        let e = by_rater.entry(rater).or_default();
        e.0 += score;
        e.1 += 1;
    }
    let means: Vec<f64> = by_rater.values().map(|(s, c)| s / *c as f64).collect();
    mean_ci(&means)
}

/// MOS summaries per variant from single-stimulus ratings.
pub fn mos_by_variant(records: &[RatingRecord]) -> Result<BTreeMap<String, MeanCi>> {
    let mut groups: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.scale == RatingScale::Mos) {
        groups
            .entry(&r.variant_id)
            .or_default()
            .push((&r.rater_id, r.rating as f64));
    }
    groups
        .into_iter()
        .map(|(v, rs)| Ok((v.to_string(), mos_aggregate(rs)?)))
        .collect()
}

/// DS-MOS summaries per variant from differential scores.
pub fn dsmos_by_variant(records: &[RatingRecord]) -> Result<BTreeMap<String, MeanCi>> {
    let scores = dsmos_scores(records)?;
    let mut groups: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for s in &scores {
        groups
            .entry(&s.variant_id)
            .or_default()
            .push((&s.rater_id, s.score));
    }
    groups
        .into_iter()
        .map(|(v, rs)| Ok((v.to_string(), mos_aggregate(rs)?)))
        .collect()
}

fn differences(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Pairing(format!(
            "unmatched samples: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 matched pairs".into()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a - b).collect())
}

/// Mean of the paired differences over their sample standard deviation.
pub fn repeated_measures_d(x: &[f64], y: &[f64]) -> Result<f64> {
    let diffs = differences(x, y)?;
    let sd = sample_sd(&diffs).unwrap();
    if sd == 0.0 {
        return Err(Error::UndefinedEffect(
            "standard deviation of differences is zero".into(),
        ));
    }
    Ok(mean(&diffs) / sd)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectSizeReport {
    pub label: String,
    pub d: f64,
    pub t: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Two-sided paired t-tests with Bonferroni adjustment over `family_size`.
pub fn paired_t_bonferroni(
    comparisons: &[Comparison],
    family_size: usize,
) -> Result<Vec<EffectSizeReport>> {
    if family_size == 0 {
        return Err(Error::ParameterDomain("family size must be at least 1".into()));
    }
    comparisons
        .iter()
        .map(|c| {
            let d = repeated_measures_d(&c.x, &c.y)?;
            let n = c.x.len();
            let t = d * (n as f64).sqrt();
            let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1");
            let p_raw = (2.0 * dist.cdf(-t.abs())).min(1.0);
            let p_adjusted = (p_raw * family_size as f64).min(1.0);
            Ok(EffectSizeReport {
                label: c.label.clone(),
                d,
                t,
                p_raw,
                p_adjusted,
                significant: p_adjusted < 0.05,
                n_pairs: n,
            })
        })
        .collect()
}

/// One paired-comparison response as exported for analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApcResponse {
    pub rater_id: String,
    pub variant_id: String,
    pub clip_id: String,
    pub level: f64,
    pub choice: Choice,
}

pub fn read_apc_csv<R: Read>(reader: R) -> Result<Vec<ApcResponse>> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<ApcResponse>, _>>()?)
}

/// Proportion data per (rater, variant).
pub fn group_apc(responses: &[ApcResponse]) -> BTreeMap<(String, String), ProportionData> {
    let mut groups: BTreeMap<(String, String), Vec<(f64, Choice)>> = BTreeMap::new();
    for r in responses {
        groups
            .entry((r.rater_id.clone(), r.variant_id.clone()))
            .or_default()
            .push((r.level, r.choice));
    }
    groups
        .into_iter()
        .map(|(k, obs)| (k, ProportionData::from_observations(obs)))
        .collect()
}
