//! Synthetic cross-sectional contact surveys with known truth.
//!
//! A stylised participant-side intensity profile is built from per-band
//! rules on the absolute age difference (AAD), made rate consistent against
//! the population, and sampled as Poisson counts that are then aggregated to
//! coarse contact-age brackets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{AgeGrid, CoarseBracketing, Direction, Gender};
use crate::model::{IntensityField, ObservationRow, ObservationTable, PopulationTable, Stratum};

/// Participant sample sizes of the simulation study.
pub const SAMPLE_SIZES: [u64; 5] = [250, 500, 1000, 2000, 5000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "pre-covid")]
    PreCovid,
    #[serde(rename = "in-covid")]
    InCovid,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::PreCovid, Scenario::InCovid];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::PreCovid => "pre-covid",
            Scenario::InCovid => "in-covid",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "pre" | "pre-covid" | "precovid" => Ok(Scenario::PreCovid),
            "in" | "in-covid" | "incovid" => Ok(Scenario::InCovid),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Intensity profile for contacts with people about 24 years apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParentProfile {
    /// Value at AAD = 24.
    pub peak: f64,
    /// Value at |AAD − 24| = 1.
    pub adjacent: f64,
    /// Value at |AAD − 24| ∈ [2, 3].
    pub near: f64,
    /// Value at |AAD − 24| ∈ [4, 5].
    pub far: f64,
}

impl ParentProfile {
    fn value(&self, offset: u32) -> Option<f64> {
        match offset {
            0 => Some(self.peak),
            1 => Some(self.adjacent),
            2..=3 => Some(self.near),
            4..=5 => Some(self.far),
            _ => None,
        }
    }
}

/// Rules for participants aged `ages.0..=ages.1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandRule {
    pub ages: (u32, u32),
    /// Value at AAD = 0.
    pub peak: f64,
    /// Linear decrease per year of AAD up to `slope_until`.
    pub slope: f64,
    pub slope_until: u32,
    /// Constant values on inclusive AAD ranges.
    pub plateaus: Vec<(u32, u32, f64)>,
    pub parent: ParentProfile,
}

/// Contacts of participants aged 25–29 with their children (`b < a`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChildRule {
    pub ages: (u32, u32),
    /// Value at |AAD − 24| ∈ [2, 3].
    pub near: f64,
    /// Value at |AAD − 24| ∈ [4, 5].
    pub far: f64,
    /// Value at |AAD − 24| = 1, only for participants aged `ages.1`.
    pub adjacent_at_oldest: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub bands: Vec<BandRule>,
    pub child: ChildRule,
}

fn band(
    ages: (u32, u32),
    peak: f64,
    slope: f64,
    until: u32,
    plateaus: &[(u32, u32, f64)],
    parent: [f64; 4],
) -> BandRule {
    BandRule {
        ages,
        peak,
        slope,
        slope_until: until,
        plateaus: plateaus.to_vec(),
        parent: ParentProfile { peak: parent[0], adjacent: parent[1], near: parent[2], far: parent[3] },
    }
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario) -> Self {
        const YOUNG_PARENT: [f64; 4] = [0.8, 0.8 - 0.5, 0.1, 0.01];
        match scenario {
            Scenario::PreCovid => {
                const OLD_PARENT: [f64; 4] = [1.6, 1.6 - 1.0, 0.2, 0.02];
                Self {
                    scenario,
                    bands: vec![
                        band((6, 18), 2.5, 0.2, 8, &[(9, 11, 0.1), (12, 13, 0.03), (14, 15, 0.01)], YOUNG_PARENT),
                        band((19, 29), 2.5, 0.3, 5, &[(6, 9, 0.8), (10, 13, 0.04), (14, 15, 0.01)], YOUNG_PARENT),
                        band((30, 39), 2.0, 0.24, 5, &[(6, 9, 0.64), (10, 13, 0.03), (14, 15, 0.01)], OLD_PARENT),
                        band((40, 49), 1.5, 0.18, 5, &[(6, 9, 0.5), (10, 13, 0.02), (14, 15, 0.007)], OLD_PARENT),
                    ],
                    child: ChildRule { ages: (25, 29), near: 0.2, far: 0.02, adjacent_at_oldest: 0.6 },
                }
            }
            Scenario::InCovid => Self {
                scenario,
                bands: vec![
                    band((6, 10), 0.08, 0.007, 8, &[(9, 11, 0.003), (12, 13, 0.001), (14, 15, 3e-4)], YOUNG_PARENT),
                    band((11, 18), 0.4, 0.035, 8, &[(9, 11, 0.015), (12, 13, 0.005), (14, 15, 15e-4)], YOUNG_PARENT),
                    band((19, 29), 1.5, 0.18, 5, &[(6, 9, 0.48), (10, 13, 0.024), (14, 15, 0.006)], YOUNG_PARENT),
                    band((30, 39), 1.25, 0.15, 5, &[(6, 9, 0.4), (10, 13, 0.01875), (14, 15, 0.00625)], YOUNG_PARENT),
                    band((40, 49), 1.0, 0.12, 5, &[(6, 9, 0.33), (10, 13, 0.01375), (14, 15, 0.00475)], YOUNG_PARENT),
                ],
                child: ChildRule { ages: (25, 29), near: 0.1, far: 0.01, adjacent_at_oldest: 0.6 },
            },
        }
    }

    /// Participant-side intensity from a participant aged `a` to contacts aged `b`.
    pub fn intensity(&self, a: u32, b: u32) -> f64 {
        let aad = a.abs_diff(b);
        let offset = aad.abs_diff(24);
        let c = &self.child;
        if b < a && (c.ages.0..=c.ages.1).contains(&a) {
            let v = match offset {
                1 if a == c.ages.1 => Some(c.adjacent_at_oldest),
                2..=3 => Some(c.near),
                4..=5 => Some(c.far),
                _ => None,
            };
            if let Some(v) = v {
                return v;
            }
        }
        let Some(rule) = self.bands.iter().find(|r| (r.ages.0..=r.ages.1).contains(&a)) else {
            return 0.0;
        };
        if aad <= rule.slope_until {
            return rule.peak - rule.slope * aad as f64;
        }
        if let Some(&(_, _, v)) = rule.plateaus.iter().find(|(lo, hi, _)| (*lo..=*hi).contains(&aad)) {
            return v;
        }
        rule.parent.value(offset).unwrap_or(0.0)
    }
}

/// Raw participant-side intensities on the simulation grid, `[a][b]`.
pub fn build_stylised(scenario: Scenario) -> Array2<f64> {
    let spec = ScenarioSpec::new(scenario);
    let grid = AgeGrid::simulation();
    let lo = grid.min_age();
    Array2::from_shape_fn((grid.len(), grid.len()), |(i, j)| spec.intensity(lo + i as u32, lo + j as u32))
}

/// Rate-consistent ground truth: participant-side rates from both
/// directions are averaged against the gender-averaged population, then
/// scaled back by `P_b^h` for every direction.
pub fn build_truth(scenario: Scenario, pop: &PopulationTable) -> Result<IntensityField> {
    let grid = AgeGrid::simulation();
    if pop.grid() != grid {
        return Err(Error::Config("population must cover the simulation grid 6..=49".into()));
    }
    let m = build_stylised(scenario);
    let nb = grid.len();
    let p_bar: Vec<f64> = pop.values().iter().map(|v| 0.5 * (v[0] + v[1])).collect();
    let rate = Array2::from_shape_fn((nb, nb), |(a, b)| 0.5 * (m[[a, b]] / p_bar[b] + m[[b, a]] / p_bar[a]));
    let mut field = IntensityField::new(grid, 1, vec![0.0; 4 * nb * nb])?;
    for dir in Direction::ALL {
        let h = dir.contact();
        for a in 0..nb {
            for b in 0..nb {
                field.set(0, dir, a, b, rate[[a, b]] * pop.get(b, h));
            }
        }
    }
    Ok(field)
}

/// Splits `n_total` participants across `(age, gender)` in proportion to
/// the population with the largest-remainder method.
pub fn allocate_participants(pop: &PopulationTable, n_total: u64) -> Vec<[u64; 2]> {
    let values = pop.values();
    let total: f64 = values.iter().map(|v| v[0] + v[1]).sum();
    let mut out = vec![[0u64; 2]; values.len()];
    let mut remainders = Vec::with_capacity(2 * values.len());
    let mut assigned = 0;
    for (i, v) in values.iter().enumerate() {
        for g in 0..2 {
            let quota = n_total as f64 * v[g] / total;
            let whole = quota.floor() as u64;
            out[i][g] = whole;
            assigned += whole;
            remainders.push((quota - whole as f64, i, g));
        }
    }
    remainders.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    for &(_, i, g) in remainders.iter().take((n_total - assigned) as usize) {
        out[i][g] += 1;
    }
    out
}

/// Fine counts `Y_ab^gh ~ Poisson(m_ab^gh · N_a^g)`, laid out `[dir][a][b]`.
pub fn sample_counts(truth: &IntensityField, participants: &[[u64; 2]], seed: u64) -> Result<Vec<u64>> {
    let nb = truth.grid().len();
    if participants.len() != nb {
        return Err(Error::Shape(format!("{} participant rows for a grid of {nb} ages", participants.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u64; 4 * nb * nb];
    for dir in Direction::ALL {
        let g = dir.participant().index();
        for a in 0..nb {
            for b in 0..nb {
                let lambda = truth.get(0, dir, a, b) * participants[a][g] as f64;
                if lambda > 0.0 {
                    let d = Poisson::new(lambda).map_err(|e| Error::Domain(e.to_string()))?;
                    out[(dir.index() * nb + a) * nb + b] = d.sample(&mut rng) as u64;
                }
            }
        }
    }
    Ok(out)
}

/// Bracket sums `Y_ac^gh = Σ_{b∈c} Y_ab^gh`, laid out `[dir][a][c]`.
pub fn aggregate_counts(fine: &[u64], bracketing: &CoarseBracketing) -> Result<Vec<u64>> {
    let nb = bracketing.grid().len();
    let nc = bracketing.len();
    if fine.len() != 4 * nb * nb {
        return Err(Error::Shape(format!("expected {} fine counts, got {}", 4 * nb * nb, fine.len())));
    }
    let mut out = vec![0u64; 4 * nb * nc];
    for (row, chunk) in fine.chunks(nb).enumerate() {
        for c in 0..nc {
            out[row * nc + c] = chunk[bracketing.member_indices(c)].iter().sum();
        }
    }
    Ok(out)
}

/// Per-replicate seed derived from the master seed and the experiment cell.
pub fn derive_seed(master: u64, scenario: Scenario, n_total: u64, replicate: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(scenario.label().as_bytes());
    h.update(n_total.to_le_bytes());
    h.update((replicate as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub scenario: Scenario,
    pub n_total: u64,
    pub replicate: usize,
    pub master_seed: u64,
    pub seed: u64,
    pub population: PopulationTable,
    pub truth: IntensityField,
    /// `N_a^g`, indexed `[a][g]`.
    pub participants: Vec<[u64; 2]>,
    /// `[dir][a][b]`
    pub fine_counts: Vec<u64>,
    /// `[dir][a][c]` under the simulation bracketing.
    pub coarse_counts: Vec<u64>,
}

impl SimulatedDataset {
    pub fn generate(scenario: Scenario, n_total: u64, pop: &PopulationTable, seed: u64) -> Result<Self> {
        let truth = build_truth(scenario, pop)?;
        let participants = allocate_participants(pop, n_total);
        let fine_counts = sample_counts(&truth, &participants, seed)?;
        let coarse_counts = aggregate_counts(&fine_counts, &CoarseBracketing::simulation())?;
        Ok(Self {
            scenario,
            n_total,
            replicate: 0,
            master_seed: seed,
            seed,
            population: pop.clone(),
            truth,
            participants,
            fine_counts,
            coarse_counts,
        })
    }

    pub fn bracketing(&self) -> CoarseBracketing {
        CoarseBracketing::simulation()
    }

    /// Cross-sectional observation table: wave 1, no repeats, full detail.
    pub fn observation_table(&self) -> Result<ObservationTable> {
        let br = self.bracketing();
        let grid = br.grid();
        let nb = grid.len();
        let nc = br.len();
        let mut rows = Vec::new();
        let mut parts = BTreeMap::new();
        let mut detail = BTreeMap::new();
        for (a, age) in grid.ages().enumerate() {
            for g in Gender::ALL {
                let n = self.participants[a][g.index()];
                if n == 0 {
                    continue;
                }
                let stratum = Stratum { wave: 1, repeat: 0, age, gender: g };
                parts.insert(stratum, n);
                detail.insert((1, age, g), 1.0);
                for h in Gender::ALL {
                    let dir = Direction::new(g, h);
                    for c in 0..nc {
                        rows.push(ObservationRow {
                            stratum,
                            bracket: c,
                            contact_gender: h,
                            count: self.coarse_counts[(dir.index() * nb + a) * nc + c],
                        });
                    }
                }
            }
        }
        ObservationTable::new(br, rows, parts, detail)
    }
}

/// Independent replicate datasets for one scenario and sample size.
pub fn replicate_suite(
    scenario: Scenario,
    n_total: u64,
    replicates: usize,
    master_seed: u64,
    pop: &PopulationTable,
) -> Result<Vec<SimulatedDataset>> {
    if replicates < 1 {
        return Err(Error::Config("replicates must be >= 1".into()));
    }
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(master_seed, scenario, n_total, r);
            let mut d = SimulatedDataset::generate(scenario, n_total, pop, seed)?;
            d.replicate = r;
            d.master_seed = master_seed;
            Ok(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(s: Scenario, a: u32, b: u32) -> f64 {
        ScenarioSpec::new(s).intensity(a, b)
    }

    #[test]
    fn printed_rule_values() {
        assert_eq!(m(Scenario::PreCovid, 10, 10), 2.5);
        assert!((m(Scenario::PreCovid, 10, 15) - 1.5).abs() < 1e-12);
        assert!((m(Scenario::PreCovid, 10, 18) - 0.9).abs() < 1e-12);
        assert_eq!(m(Scenario::PreCovid, 10, 34), 0.8);
        assert!((m(Scenario::PreCovid, 10, 35) - 0.3).abs() < 1e-12);
        assert_eq!(m(Scenario::PreCovid, 10, 26), 0.0);
        assert_eq!(m(Scenario::InCovid, 8, 8), 0.08);
        // plateau printed at 0.8 right after the decrease reaches 1.0
        assert!((m(Scenario::PreCovid, 22, 27) - 1.0).abs() < 1e-12);
        assert_eq!(m(Scenario::PreCovid, 22, 28), 0.8);
        assert_eq!(m(Scenario::PreCovid, 40, 16), 1.6);
    }

    #[test]
    fn child_rule_for_young_parents() {
        assert_eq!(m(Scenario::PreCovid, 29, 6), 0.6);
        assert_eq!(m(Scenario::PreCovid, 29, 7), 0.2);
        assert_eq!(m(Scenario::PreCovid, 29, 10), 0.02);
        assert_eq!(m(Scenario::PreCovid, 25, 6), 0.02);
        assert_eq!(m(Scenario::InCovid, 29, 8), 0.1);
        // contacts with older people keep the band rule
        assert_eq!(m(Scenario::PreCovid, 25, 49), 0.8);
    }

    #[test]
    fn child_marginal_near_thirty_two() {
        let s = build_stylised(Scenario::PreCovid);
        let total: f64 = s.row(12 - 6).sum();
        assert!((total - 32.0).abs() / 32.0 < 0.15, "{total}");
    }

    #[test]
    fn truth_is_rate_consistent_and_nonnegative() {
        let grid = AgeGrid::simulation();
        let pop =
            PopulationTable::new(grid, grid.ages().map(|a| [1.0 + a as f64 / 50.0, 1.2 - a as f64 / 80.0]).collect())
                .unwrap();
        for s in Scenario::ALL {
            let t = build_truth(s, &pop).unwrap();
            assert!(t.values().iter().all(|v| *v >= 0.0));
            assert!(t.max_rate_asymmetry(&pop) < 1e-15);
        }
    }

    #[test]
    fn allocation_is_exact() {
        let grid = AgeGrid::simulation();
        let pop = PopulationTable::uniform(grid, 1.0).unwrap();
        for n in SAMPLE_SIZES {
            let a = allocate_participants(&pop, n);
            assert_eq!(a.iter().map(|v| v[0] + v[1]).sum::<u64>(), n);
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let a = derive_seed(1, Scenario::PreCovid, 2000, 0);
        assert_ne!(a, derive_seed(1, Scenario::PreCovid, 2000, 1));
        assert_ne!(a, derive_seed(1, Scenario::InCovid, 2000, 0));
        assert_eq!(a, derive_seed(1, Scenario::PreCovid, 2000, 0));
    }
}
