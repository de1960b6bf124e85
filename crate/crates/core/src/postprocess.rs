//! Posterior summaries of derived quantities.
//!
//! Every functional is evaluated draw by draw and only then summarised.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Direction, Gender};
use crate::inference::PosteriorDraws;
use crate::model::{IntensityField, ObservationTable, PopulationTable, RateConsistencyModel};

/// Posterior median and central 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Type-7 quantile of sorted values.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

impl Summary {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("cannot summarise zero draws".into()));
        }
        if samples.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation("draws contain NaN".into()));
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            median: quantile_sorted(&v, 0.5),
            lower: quantile_sorted(&v, 0.025),
            upper: quantile_sorted(&v, 0.975),
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// How participant genders are combined in conditional intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenderAggregation {
    /// Participant genders weighted by their population share at age `a*`.
    PopulationWeighted,
    Sum,
}

impl FromStr for GenderAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "population-weighted" | "weighted" | "mean" => Ok(Self::PopulationWeighted),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown gender aggregation {other:?}"))),
        }
    }
}

impl fmt::Display for GenderAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PopulationWeighted => "population-weighted",
            Self::Sum => "sum",
        })
    }
}

/// Intensity fields for every retained draw, in chain order.
pub fn intensity_draws(model: &RateConsistencyModel, draws: &PosteriorDraws) -> Result<Vec<IntensityField>> {
    let xs: Vec<&[f64]> = draws.iter_unconstrained().collect();
    xs.par_iter().map(|x| model.intensity(x)).collect()
}

fn check_draws(draws: &[IntensityField]) -> Result<()> {
    let Some(first) = draws.first() else {
        return Err(Error::Validation("no intensity draws".into()));
    };
    if draws.iter().any(|d| d.grid() != first.grid() || d.n_waves() != first.n_waves()) {
        return Err(Error::Shape("intensity draws disagree in grid or wave count".into()));
    }
    Ok(())
}

/// Per-cell summary, laid out like `IntensityField::values`.
pub fn intensity_summary(draws: &[IntensityField]) -> Result<Vec<Summary>> {
    check_draws(draws)?;
    let n = draws[0].values().len();
    (0..n)
        .into_par_iter()
        .map(|k| Summary::from_samples(&draws.iter().map(|d| d.values()[k]).collect::<Vec<_>>()))
        .collect()
}

/// `Σ_b Σ_h m_tab^gh` for one field, laid out `[t][g][a]`.
pub fn marginal_values(field: &IntensityField) -> Vec<f64> {
    let nb = field.grid().len();
    let mut out = vec![0.0; field.n_waves() * 2 * nb];
    for t in 0..field.n_waves() {
        for dir in Direction::ALL {
            let g = dir.participant().index();
            for a in 0..nb {
                let row: f64 = (0..nb).map(|b| field.get(t, dir, a, b)).sum();
                out[(t * 2 + g) * nb + a] += row;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    /// Wave position (0-based).
    pub wave: usize,
    pub gender: Gender,
    pub age: u32,
    #[serde(flatten)]
    pub summary: Summary,
}

fn summarize_twa(draws: &[IntensityField], per_draw: &[Vec<f64>]) -> Result<Vec<MarginalSummary>> {
    let grid = draws[0].grid();
    let nb = grid.len();
    let n = per_draw[0].len();
    (0..n)
        .into_par_iter()
        .map(|k| {
            let s = Summary::from_samples(&per_draw.iter().map(|d| d[k]).collect::<Vec<_>>())?;
            Ok(MarginalSummary {
                wave: k / (2 * nb),
                gender: Gender::from_index((k / nb) % 2),
                age: grid.age_at(k % nb),
                summary: s,
            })
        })
        .collect()
}

/// Marginal intensity per wave, participant gender and age.
pub fn marginal_intensity(draws: &[IntensityField]) -> Result<Vec<MarginalSummary>> {
    check_draws(draws)?;
    let per_draw: Vec<Vec<f64>> = draws.par_iter().map(marginal_values).collect();
    summarize_twa(draws, &per_draw)
}

/// Mean over waves, genders and ages of the marginal intensity, per draw.
pub fn mean_marginal_values(draws: &[IntensityField]) -> Vec<f64> {
    draws
        .iter()
        .map(|d| {
            let m = marginal_values(d);
            m.iter().sum::<f64>() / m.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSummary {
    pub wave: usize,
    pub contact_age: u32,
    #[serde(flatten)]
    pub summary: Summary,
}

/// Contact-age profile of participants aged `age`, aggregated over genders.
pub fn conditional_intensity(
    draws: &[IntensityField],
    age: u32,
    pop: &PopulationTable,
    aggregation: GenderAggregation,
) -> Result<Vec<ConditionalSummary>> {
    check_draws(draws)?;
    let grid = draws[0].grid();
    if pop.grid() != grid {
        return Err(Error::Shape("population grid differs from the intensity grid".into()));
    }
    let a = grid.index_of(age as i64)?;
    let nb = grid.len();
    let weights = match aggregation {
        GenderAggregation::Sum => [1.0, 1.0],
        GenderAggregation::PopulationWeighted => {
            let p = pop.values()[a];
            [p[0] / (p[0] + p[1]), p[1] / (p[0] + p[1])]
        }
    };
    let n_waves = draws[0].n_waves();
    let per_draw: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|d| {
            let mut out = vec![0.0; n_waves * nb];
            for t in 0..n_waves {
                for dir in Direction::ALL {
                    let w = weights[dir.participant().index()];
                    for b in 0..nb {
                        out[t * nb + b] += w * d.get(t, dir, a, b);
                    }
                }
            }
            out
        })
        .collect();
    (0..n_waves * nb)
        .map(|k| {
            Ok(ConditionalSummary {
                wave: k / nb,
                contact_age: grid.age_at(k % nb),
                summary: Summary::from_samples(&per_draw.iter().map(|d| d[k]).collect::<Vec<_>>())?,
            })
        })
        .collect()
}

/// Percent change of marginal intensities against wave position `reference`.
pub fn relative_change(draws: &[IntensityField], reference: usize) -> Result<Vec<MarginalSummary>> {
    check_draws(draws)?;
    let n_waves = draws[0].n_waves();
    if reference >= n_waves {
        return Err(Error::Domain(format!("reference wave {reference} not among {n_waves} waves")));
    }
    let nb = draws[0].grid().len();
    let per_draw: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|d| {
            let m = marginal_values(d);
            (0..m.len())
                .map(|k| {
                    let rest = k % (2 * nb);
                    100.0 * (m[k] / m[reference * 2 * nb + rest] - 1.0)
                })
                .collect()
        })
        .collect();
    summarize_twa(draws, &per_draw)
}

/// Crude bracket-level intensity `Y / (N · S)` with repeats pooled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrudeCell {
    pub wave: u32,
    pub age: u32,
    pub gender: Gender,
    pub bracket: usize,
    pub contact_gender: Gender,
    pub intensity: f64,
}

pub fn crude_estimator(table: &ObservationTable) -> Vec<CrudeCell> {
    let mut counts: BTreeMap<(u32, u32, Gender, usize, Gender), u64> = BTreeMap::new();
    for r in table.rows() {
        let s = r.stratum;
        *counts.entry((s.wave, s.age, s.gender, r.bracket, r.contact_gender)).or_default() += r.count;
    }
    let mut n: BTreeMap<(u32, u32, Gender), u64> = BTreeMap::new();
    for (s, v) in table.participants() {
        *n.entry((s.wave, s.age, s.gender)).or_default() += v;
    }
    counts
        .into_iter()
        .map(|((wave, age, gender, bracket, contact_gender), y)| CrudeCell {
            wave,
            age,
            gender,
            bracket,
            contact_gender,
            intensity: crude_value(y, n[&(wave, age, gender)], table.detail(wave, age, gender)),
        })
        .collect()
}

/// `Y / N / S`.
pub fn crude_value(count: u64, participants: u64, detail: f64) -> f64 {
    count as f64 / participants as f64 / detail
}

/// Largest relative imbalance of crude total contacts between bracket
/// groups, `|T^gh_{c1,c2} − T^hg_{c2,c1}| / mean`, where
/// `T^gh_{c1,c2} = Σ_{a∈c1} m̂^gh_{a,c2} P_a^g`.
///
/// Only bracket pairs where both directions have observed participants
/// contribute. Rate-consistent intensities give 0.
pub fn crude_asymmetry(table: &ObservationTable, pop: &PopulationTable, wave: u32) -> f64 {
    let br = table.bracketing();
    let nc = br.len();
    let mut total = vec![0.0; 4 * nc * nc];
    let mut seen = vec![false; 4 * nc * nc];
    for cell in crude_estimator(table).into_iter().filter(|c| c.wave == wave) {
        let Ok(c1) = br.bracket_of(cell.age as i64) else { continue };
        let Ok(a) = table.grid().index_of(cell.age as i64) else { continue };
        let dir = Direction::new(cell.gender, cell.contact_gender).index();
        let k = (dir * nc + c1) * nc + cell.bracket;
        total[k] += cell.intensity * pop.get(a, cell.gender);
        seen[k] = true;
    }
    let mut worst = 0f64;
    for dir in Direction::ALL {
        for c1 in 0..nc {
            for c2 in 0..nc {
                let k = (dir.index() * nc + c1) * nc + c2;
                let kr = (dir.reverse().index() * nc + c2) * nc + c1;
                if !(seen[k] && seen[kr]) {
                    continue;
                }
                let mean = 0.5 * (total[k] + total[kr]);
                if mean > 0.0 {
                    worst = worst.max((total[k] - total[kr]).abs() / mean);
                }
            }
        }
    }
    worst
}

/// Mean absolute error of point estimates against the truth over all cells.
pub fn mae(estimate: &[f64], truth: &IntensityField) -> Result<f64> {
    let t = truth.values();
    if estimate.len() != t.len() {
        return Err(Error::Shape(format!("{} estimates for {} truth cells", estimate.len(), t.len())));
    }
    Ok(estimate.iter().zip(t).map(|(e, v)| (e - v).abs()).sum::<f64>() / t.len() as f64)
}

/// Posterior-median MAE.
pub fn median_mae(summary: &[Summary], truth: &IntensityField) -> Result<f64> {
    mae(&summary.iter().map(|s| s.median).collect::<Vec<_>>(), truth)
}

/// Total contacts `(Σ_a P_a^g Σ_b m^gh_ab, Σ_b P_b^h Σ_a m^hg_ba)`; equal
/// for rate-consistent intensities.
pub fn contact_balance(field: &IntensityField, pop: &PopulationTable, t: usize, dir: Direction) -> (f64, f64) {
    let nb = field.grid().len();
    let g = dir.participant();
    let h = dir.contact();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for a in 0..nb {
        for b in 0..nb {
            lhs += pop.get(a, g) * field.get(t, dir, a, b);
            rhs += pop.get(b, h) * field.get(t, dir.reverse(), b, a);
        }
    }
    (lhs, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AgeGrid;

    fn constant_field(k: f64, waves: usize) -> IntensityField {
        let grid = AgeGrid::new(0, 4).unwrap();
        IntensityField::new(grid, waves, vec![k; waves * 4 * 25]).unwrap()
    }

    #[test]
    fn summary_ordering() {
        let s = Summary::from_samples(&[3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert!(s.lower <= s.median && s.median <= s.upper);
        assert!(Summary::from_samples(&[]).is_err());
    }

    #[test]
    fn constant_marginal() {
        let draws = vec![constant_field(0.7, 2); 3];
        for m in marginal_intensity(&draws).unwrap() {
            assert!((m.summary.median - 2.0 * 0.7 * 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_change_reference_and_doubling() {
        let mut draws = vec![constant_field(1.0, 2), constant_field(1.5, 2)];
        for d in &mut draws {
            let half = d.values().len() / 2;
            for v in &mut d.values_mut()[half..] {
                *v *= 2.0;
            }
        }
        for r in relative_change(&draws, 0).unwrap() {
            let expect = if r.wave == 0 { 0.0 } else { 100.0 };
            assert!((r.summary.median - expect).abs() < 1e-12);
            assert!((r.summary.upper - r.summary.lower).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_of_constant_field_is_flat() {
        let draws = vec![constant_field(0.3, 1); 2];
        let pop = PopulationTable::uniform(AgeGrid::new(0, 4).unwrap(), 2.0).unwrap();
        let c = conditional_intensity(&draws, 2, &pop, GenderAggregation::PopulationWeighted).unwrap();
        assert!(c.iter().all(|s| (s.summary.median - 0.6).abs() < 1e-12));
        let c = conditional_intensity(&draws, 2, &pop, GenderAggregation::Sum).unwrap();
        assert!(c.iter().all(|s| (s.summary.median - 1.2).abs() < 1e-12));
    }

    #[test]
    fn crude_arithmetic() {
        assert_eq!(crude_value(0, 3, 1.0), 0.0);
        assert!((crude_value(10, 4, 0.8) - 3.125).abs() < 1e-15);
    }

    #[test]
    fn mae_examples() {
        let truth = constant_field(0.2, 1);
        assert_eq!(mae(truth.values(), &truth).unwrap(), 0.0);
        let shifted: Vec<f64> = truth.values().iter().map(|v| v + 0.05).collect();
        assert!((mae(&shifted, &truth).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn drawwise_then_summarise_differs_from_plug_in() {
        // Wave-2 cells move in opposite directions, so the sum is skewed.
        let grid = AgeGrid::new(0, 1).unwrap();
        let draws: Vec<IntensityField> = (0..201)
            .map(|i| {
                let z = (i as f64 - 100.0) / 40.0;
                let mut v = vec![1.0; 2 * 4 * 4];
                for (k, x) in v[16..].iter_mut().enumerate() {
                    *x = if k % 2 == 0 { (1.5 * z).exp() } else { (-1.5 * z).exp() };
                }
                IntensityField::new(grid, 2, v).unwrap()
            })
            .collect();
        let drawwise = relative_change(&draws, 0).unwrap();
        let medians = intensity_summary(&draws).unwrap();
        let plug_in = IntensityField::new(grid, 2, medians.iter().map(|s| s.median).collect()).unwrap();
        let m = marginal_values(&plug_in);
        let plug = 100.0 * (m[4] / m[0] - 1.0);
        let dw = drawwise.iter().find(|r| r.wave == 1).unwrap().summary.median;
        assert!((dw - plug).abs() > 1e-6, "{dw} vs {plug}");
        let means: Vec<f64> = mean_marginal_values(&draws);
        assert_eq!(means.len(), draws.len());
    }
}
