//! Reference-scale construction.
//!
//! The objective stage samples the upper envelope of per-resolution
//! rate-distortion curves at log-spaced bitrates. The perceptual stage fits
//! per-level quality values to pairwise judgments (Bradley-Terry with a
//! logistic link), measures how far they are from a straight line, and
//! resamples the scale so equal level steps are equal perceptual steps.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psychometric::sigmoid;

pub const DEFAULT_L2: f64 = 1e-3;
pub const DEFAULT_GRAD_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// One encode of the rate-distortion table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub resolution: String,
    pub crf: i32,
    #[serde(rename = "bitrate_kbps")]
    pub avg_bitrate: f64,
    #[serde(rename = "psnr_db")]
    pub psnr: f64,
}

pub fn read_rd_csv<R: Read>(reader: R) -> Result<Vec<RdPoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let points = rdr.deserialize().collect::<std::result::Result<Vec<RdPoint>, _>>()?;
    validate_rd(&points)?;
    Ok(points)
}

/// Checks bitrates are positive and, within each resolution, strictly
/// decrease as CRF increases. Rows are reported 1-based, header excluded.
pub fn validate_rd(points: &[RdPoint]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if !(p.avg_bitrate.is_finite() && p.avg_bitrate > 0.0) || !p.psnr.is_finite() {
            return Err(Error::Ingest {
                row: i + 1,
                message: format!("invalid bitrate/psnr ({}, {})", p.avg_bitrate, p.psnr),
            });
        }
    }
    let mut by_res: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        by_res.entry(&p.resolution).or_default().push(i);
    }
    for (res, mut rows) in by_res {
        rows.sort_by_key(|&i| points[i].crf);
        for w in rows.windows(2) {
            let (a, b) = (&points[w[0]], &points[w[1]]);
            if a.crf == b.crf {
                return Err(Error::Ingest {
                    row: w[1] + 1,
                    message: format!("duplicate crf {} for resolution {res} (rows {} and {})", a.crf, w[0] + 1, w[1] + 1),
                });
            }
            if b.avg_bitrate >= a.avg_bitrate {
                return Err(Error::Ingest {
                    row: w[1] + 1,
                    message: format!(
                        "bitrate must decrease with crf for {res}: crf {} -> {} kbps (row {}), crf {} -> {} kbps (row {})",
                        a.crf, a.avg_bitrate, w[0] + 1, b.crf, b.avg_bitrate, w[1] + 1
                    ),
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ResolutionCurve {
    name: String,
    /// Ascending in bitrate: (ln bitrate, psnr, crf).
    points: Vec<(f64, f64, i32)>,
}

impl ResolutionCurve {
    fn covers(&self, ln_b: f64) -> bool {
        ln_b >= self.points[0].0 && ln_b <= self.points[self.points.len() - 1].0
    }

    fn psnr_at(&self, ln_b: f64) -> Option<f64> {
        if !self.covers(ln_b) {
            return None;
        }
        let i = self.points.partition_point(|p| p.0 < ln_b);
        if i == 0 {
            return Some(self.points[0].1);
        }
        let (x0, y0, _) = self.points[i - 1];
        let (x1, y1, _) = self.points[i];
        Some(y0 + (y1 - y0) * (ln_b - x0) / (x1 - x0))
    }

    fn nearest_crf(&self, ln_b: f64) -> i32 {
        self.points
            .iter()
            .min_by(|a, b| (a.0 - ln_b).abs().total_cmp(&(b.0 - ln_b).abs()))
            .map(|p| p.2)
            .unwrap()
    }
}

/// Per-resolution curves with PSNR interpolated linearly in log-bitrate.
#[derive(Debug, Clone)]
pub struct RdHull {
    curves: Vec<ResolutionCurve>,
    min_bitrate: f64,
    max_bitrate: f64,
}

impl RdHull {
    pub fn new(rd: &[RdPoint]) -> Result<Self> {
        validate_rd(rd)?;
        let mut by_res: BTreeMap<&str, Vec<&RdPoint>> = BTreeMap::new();
        for p in rd {
            by_res.entry(&p.resolution).or_default().push(p);
        }
        let mut curves = Vec::new();
        for (name, mut pts) in by_res {
            if pts.len() < 2 {
                return Err(Error::Config(format!(
                    "resolution {name} needs at least 2 RD points"
                )));
            }
            pts.sort_by(|a, b| a.avg_bitrate.total_cmp(&b.avg_bitrate));
            curves.push(ResolutionCurve {
                name: name.to_string(),
                points: pts.iter().map(|p| (p.avg_bitrate.ln(), p.psnr, p.crf)).collect(),
            });
        }
        if curves.is_empty() {
            return Err(Error::Config("empty RD table".into()));
        }
        let min_bitrate = rd.iter().map(|p| p.avg_bitrate).fold(f64::INFINITY, f64::min);
        let max_bitrate = rd.iter().map(|p| p.avg_bitrate).fold(0.0, f64::max);
        Ok(Self {
            curves,
            min_bitrate,
            max_bitrate,
        })
    }

    pub fn bitrate_range(&self) -> (f64, f64) {
        (self.min_bitrate, self.max_bitrate)
    }

    pub fn resolutions(&self) -> impl Iterator<Item = &str> {
        self.curves.iter().map(|c| c.name.as_str())
    }

    /// Interpolated PSNR of `resolution` at `bitrate`, if covered.
    pub fn psnr_at(&self, resolution: &str, bitrate: f64) -> Option<f64> {
        self.curves
            .iter()
            .find(|c| c.name == resolution)?
            .psnr_at(bitrate.ln())
    }

    /// Best resolution at `bitrate` with its interpolated PSNR and the CRF of
    /// its nearest-bitrate encode.
    pub fn select(&self, bitrate: f64) -> Result<(String, i32, f64)> {
        let ln_b = bitrate.ln();
        let mut best: Option<(&ResolutionCurve, f64)> = None;
        for c in &self.curves {
            if let Some(psnr) = c.psnr_at(ln_b) {
                if best.is_none_or(|(_, b)| psnr > b) {
                    best = Some((c, psnr));
                }
            }
        }
        let (curve, psnr) = best.ok_or(Error::Coverage { bitrate_kbps: bitrate })?;
        Ok((curve.name.clone(), curve.nearest_crf(ln_b), psnr))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub level: u32,
    pub resolution: String,
    pub crf: i32,
    pub target_bitrate_kbps: f64,
    pub psnr_db: f64,
    pub perceptual_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScale {
    pub entries: Vec<ScaleEntry>,
}

impl ReferenceScale {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.entries.windows(2).enumerate() {
            if w[1].target_bitrate_kbps <= w[0].target_bitrate_kbps {
                return Err(Error::Ingest {
                    row: i + 2,
                    message: "target bitrate must increase with level".into(),
                });
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<ScaleEntry>, _>>()?;
        let scale = Self { entries };
        scale.validate()?;
        Ok(scale)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n` bitrates log-spaced over `[lo, hi]`, endpoints exact.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| match k {
            0 => lo,
            k if k == n - 1 => hi,
            k => (ln_lo + (ln_hi - ln_lo) * k as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

pub fn build_initial_scale(rd: &[RdPoint], n_levels: usize) -> Result<ReferenceScale> {
    if n_levels < 2 {
        return Err(Error::Config("need at least 2 levels".into()));
    }
    let hull = RdHull::new(rd)?;
    let (lo, hi) = hull.bitrate_range();
    if lo >= hi {
        return Err(Error::Config("RD table spans a single bitrate".into()));
    }
    let entries = log_spaced(lo, hi, n_levels)
        .into_iter()
        .enumerate()
        .map(|(k, b)| {
            let (resolution, crf, psnr) = hull.select(b)?;
            Ok(ScaleEntry {
                level: k as u32 + 1,
                resolution,
                crf,
                target_bitrate_kbps: b,
                psnr_db: psnr,
                perceptual_value: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = ReferenceScale { entries };
    scale.validate()?;
    Ok(scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
}

/// One judgment from the scale-calibration experiment; levels are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairJudgment {
    pub rater_id: String,
    pub level_a: u32,
    pub level_b: u32,
    pub winner: Winner,
}

impl PairJudgment {
    pub fn winner_loser(&self) -> (u32, u32) {
        match self.winner {
            Winner::A => (self.level_a, self.level_b),
            Winner::B => (self.level_b, self.level_a),
        }
    }
}

pub fn read_judgments_csv<R: Read>(reader: R) -> Result<Vec<PairJudgment>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let out = rdr.deserialize().collect::<std::result::Result<Vec<PairJudgment>, _>>()?;
    for (i, j) in out.iter().enumerate() {
        if j.level_a == j.level_b {
            return Err(Error::Ingest {
                row: i + 1,
                message: format!("level_a and level_b are both {}", j.level_a),
            });
        }
    }
    Ok(out)
}

pub fn write_judgments_csv<W: Write>(judgments: &[PairJudgment], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for j in judgments {
        w.serialize(j)?;
    }
    w.flush()?;
    Ok(())
}

/// Relative perceptual quality per level, gauge-fixed so level 1 is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualCurve {
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    level: u32,
    value: f64,
}

impl PerceptualCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ParameterDomain("curve values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = rdr.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?;
        rows.sort_by_key(|r| r.level);
        for (i, r) in rows.iter().enumerate() {
            if r.level as usize != i + 1 {
                return Err(Error::Ingest {
                    row: i + 1,
                    message: format!("expected level {}, found {}", i + 1, r.level),
                });
            }
        }
        Self::new(rows.into_iter().map(|r| r.value).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (i, &value) in self.values.iter().enumerate() {
            w.serialize(CurveRow {
                level: i as u32 + 1,
                value,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseFitOptions {
    pub l2: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for PairwiseFitOptions {
    fn default() -> Self {
        Self {
            l2: DEFAULT_L2,
            grad_tol: DEFAULT_GRAD_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseFit {
    pub curve: PerceptualCurve,
    pub iterations: usize,
    pub converged: bool,
}

pub fn fit_pairwise_values(judgments: &[PairJudgment], n_levels: usize) -> Result<PairwiseFit> {
    fit_pairwise_values_with(judgments, n_levels, PairwiseFitOptions::default())
}

/// Maximizes `sum ln sigmoid(v_winner - v_loser) - l2 * sum v^2` by gradient
/// ascent with a fixed step bounded by the curvature of the objective.
pub fn fit_pairwise_values_with(
    judgments: &[PairJudgment],
    n_levels: usize,
    opts: PairwiseFitOptions,
) -> Result<PairwiseFit> {
    if n_levels < 2 {
        return Err(Error::Config("need at least 2 levels".into()));
    }
    // wins[w * n + l]: times level w beat level l (0-based).
    let n = n_levels;
    let mut wins = vec![0.0f64; n * n];
    for (row, j) in judgments.iter().enumerate() {
        let (w, l) = j.winner_loser();
        if w == l || w == 0 || l == 0 || w as usize > n || l as usize > n {
            return Err(Error::Ingest {
                row: row + 1,
                message: format!("invalid pair ({}, {}) for {n} levels", j.level_a, j.level_b),
            });
        }
        wins[(w as usize - 1) * n + (l as usize - 1)] += 1.0;
    }
    check_connected(&wins, n)?;

    let mut pairs = Vec::new();
    let mut degree = vec![0.0f64; n];
    for i in 0..n {
        for k in (i + 1)..n {
            let (wik, wki) = (wins[i * n + k], wins[k * n + i]);
            if wik + wki > 0.0 {
                pairs.push((i, k, wik, wki));
                degree[i] += wik + wki;
                degree[k] += wik + wki;
            }
        }
    }
    // Hessian of the negated objective is bounded by 0.25 * Laplacian + 2 l2.
    let lipschitz = 0.5 * degree.iter().cloned().fold(0.0, f64::max) + 2.0 * opts.l2;
    let step = 1.0 / lipschitz;

    let mut v = vec![0.0f64; n];
    let mut grad = vec![0.0f64; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        for (g, vi) in grad.iter_mut().zip(&v) {
            *g = -2.0 * opts.l2 * vi;
        }
        for &(i, k, wik, wki) in &pairs {
            let d = v[i] - v[k];
            // d/dv_i of wik ln s(d) + wki ln s(-d)
            let g = wik * sigmoid(-d) - wki * sigmoid(d);
            grad[i] += g;
            grad[k] -= g;
        }
        let max_grad = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if max_grad < opts.grad_tol {
            converged = true;
            break;
        }
        for (vi, g) in v.iter_mut().zip(&grad) {
            *vi += step * g;
        }
        iterations += 1;
    }
    let v0 = v[0];
    Ok(PairwiseFit {
        curve: PerceptualCurve::new(v.into_iter().map(|x| x - v0).collect())?,
        iterations,
        converged,
    })
}

/// Fails unless the levels that appear in any judgment form one component.
fn check_connected(wins: &[f64], n: usize) -> Result<()> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut present = vec![false; n];
    for i in 0..n {
        for k in 0..n {
            if wins[i * n + k] > 0.0 {
                present[i] = true;
                present[k] = true;
                let (a, b) = (find(&mut parent, i), find(&mut parent, k));
                parent[a] = b;
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in (0..n).filter(|&i| present[i]) {
        let root = find(&mut parent, i);
        comps.entry(root).or_default().push(i + 1);
    }
    if comps.len() > 1 {
        return Err(Error::Identifiability {
            components: comps.into_values().collect(),
        });
    }
    Ok(())
}

/// Mean squared difference between the standardized curve and a standardized
/// straight line over the level index; equals `2 (1 - r)` with r the Pearson
/// correlation, so it lies in `[0, 4]`.
pub fn linearity_nmse(curve: &PerceptualCurve) -> Result<f64> {
    let n = curve.len();
    if n < 3 {
        return Err(Error::UndefinedMetric(format!("need at least 3 levels, got {n}")));
    }
    let standardize = |xs: &[f64]| -> Option<Vec<f64>> {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        (var > 0.0).then(|| xs.iter().map(|x| (x - m) / var.sqrt()).collect())
    };
    let z = standardize(&curve.values)
        .ok_or_else(|| Error::UndefinedMetric("curve is constant".into()))?;
    let line: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let zl = standardize(&line).unwrap();
    Ok(z.iter().zip(&zl).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64)
}

/// Pool-adjacent-violators isotonic (nondecreasing) regression, unit weights.
pub fn isotonic_increasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let c = c1 + c2;
            *blocks.last_mut().unwrap() = ((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Piecewise-linear value of `values` (indexed by 1-based level) at fractional `x`.
pub fn interpolate_levels(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    let x = x.clamp(1.0, n as f64);
    let i = (x.floor() as usize).min(n - 1).max(1);
    let t = x - i as f64;
    values[i - 1] + t * (values[i] - values[i - 1])
}

/// Smallest `x` in `[1, n]` with `f(x) >= target` for nondecreasing piecewise-linear `f`.
fn invert_monotone(values: &[f64], target: f64) -> f64 {
    let n = values.len();
    if target <= values[0] {
        return 1.0;
    }
    for i in 1..n {
        let (a, b) = (values[i - 1], values[i]);
        if b >= target {
            if b == a {
                return i as f64;
            }
            return i as f64 + ((target - a) / (b - a)).clamp(0.0, 1.0);
        }
    }
    n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedScale {
    pub scale: ReferenceScale,
    /// Fractional positions on the input scale, one per output level.
    pub positions: Vec<f64>,
    /// Isotonic fit of the input curve.
    pub fitted: Vec<f64>,
}

/// Resamples `scale` so its levels are equally spaced in the monotone fit of
/// `curve`. With an RD table the recipe is re-selected on the hull at the
/// interpolated bitrate; without one, the nearest input level's recipe is kept.
pub fn resample_linear(
    scale: &ReferenceScale,
    curve: &PerceptualCurve,
    rd: Option<&[RdPoint]>,
) -> Result<LinearizedScale> {
    let n = scale.len();
    if curve.len() != n {
        return Err(Error::Config(format!(
            "curve has {} values, scale has {n} levels",
            curve.len()
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateScale("need at least 2 levels".into()));
    }
    scale.validate()?;
    let fitted = isotonic_increasing(&curve.values);
    assert!(fitted.windows(2).all(|w| w[0] <= w[1]), "isotonic fit must be monotone");
    let (lo, hi) = (fitted[0], fitted[n - 1]);
    if hi <= lo {
        return Err(Error::DegenerateScale("monotone fit of the curve is flat".into()));
    }
    let hull = rd.map(RdHull::new).transpose()?;
    let ln_bitrates: Vec<f64> = scale.entries.iter().map(|e| e.target_bitrate_kbps.ln()).collect();
    let psnrs: Vec<f64> = scale.entries.iter().map(|e| e.psnr_db).collect();

    let mut positions = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for k in 0..n {
        let target = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let x = match k {
            0 => 1.0,
            k if k == n - 1 => invert_monotone(&fitted, hi),
            _ => invert_monotone(&fitted, target),
        };
        positions.push(x);
        let bitrate = interpolate_levels(&ln_bitrates, x).exp();
        let (resolution, crf, psnr) = match &hull {
            Some(h) => h.select(bitrate)?,
            None => {
                let nearest = &scale.entries[(x.round() as usize).clamp(1, n) - 1];
                (nearest.resolution.clone(), nearest.crf, interpolate_levels(&psnrs, x))
            }
        };
        entries.push(ScaleEntry {
            level: k as u32 + 1,
            resolution,
            crf,
            target_bitrate_kbps: bitrate,
            psnr_db: psnr,
            perceptual_value: Some(target - lo),
        });
    }
    let out = ReferenceScale { entries };
    out.validate().map_err(|_| {
        Error::DegenerateScale("resampled levels collapse onto equal bitrates".into())
    })?;
    Ok(LinearizedScale {
        scale: out,
        positions,
        fitted,
    })
}

/// Synthetic judgments: uniform random level pairs, `a` wins with
/// probability `sigmoid(v_a - v_b)`.
pub fn simulate_judgments<R: Rng + ?Sized>(
    true_values: &[f64],
    n_judgments: usize,
    rng: &mut R,
) -> Vec<PairJudgment> {
    let n = true_values.len() as u32;
    (0..n_judgments)
        .map(|i| {
            let a = rng.random_range(1..=n);
            let mut b = rng.random_range(1..n);
            if b >= a {
                b += 1;
            }
            let p = sigmoid(true_values[a as usize - 1] - true_values[b as usize - 1]);
            PairJudgment {
                rater_id: format!("r{}", i % 22),
                level_a: a,
                level_b: b,
                winner: if rng.random::<f64>() < p { Winner::A } else { Winner::B },
            }
        })
        .collect()
}
