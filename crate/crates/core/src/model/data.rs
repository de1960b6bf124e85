//! Observation, participant, detail-proportion and population tables.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::grid::{AgeGrid, CoarseBracketing, Gender};

/// Census population `P_b^h` on the fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    grid: AgeGrid,
    /// `values[b][h]`
    values: Vec<[f64; 2]>,
}

impl PopulationTable {
    pub fn new(grid: AgeGrid, values: Vec<[f64; 2]>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Validation(format!(
                "population table has {} ages, grid has {}",
                values.len(),
                grid.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            for (h, &p) in v.iter().enumerate() {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::Validation(format!(
                        "population at age {} gender {} must be positive, got {p}",
                        grid.age_at(i),
                        Gender::from_index(h)
                    )));
                }
            }
        }
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: AgeGrid, value: f64) -> Result<Self> {
        Self::new(grid, vec![[value; 2]; grid.len()])
    }

    pub fn grid(&self) -> AgeGrid {
        self.grid
    }

    /// Population at grid index `b` and gender `h`.
    pub fn get(&self, b: usize, h: Gender) -> f64 {
        self.values[b][h.index()]
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }
}

/// Key of a participant stratum: wave `t`, repeat `r`, age `a`, gender `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stratum {
    pub wave: u32,
    pub repeat: u32,
    pub age: u32,
    pub gender: Gender,
}

/// One coarse cell count `Y_trac^gh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationRow {
    pub stratum: Stratum,
    /// Index into the bracketing.
    pub bracket: usize,
    pub contact_gender: Gender,
    pub count: u64,
}

/// Proportion of contacts reported with full age detail.
///
/// Strata with aggregate reports but no detailed reports would give zero;
/// they are floored at `1 / (Y + T + 1)`.
pub fn detail_proportion(detailed: u64, aggregate: u64) -> f64 {
    let total = detailed + aggregate;
    if total == 0 {
        return 1.0;
    }
    if detailed == 0 {
        return 1.0 / (total + 1) as f64;
    }
    detailed as f64 / total as f64
}

/// Dense coarse-cell count table with its offsets.
#[derive(Debug, Clone)]
pub struct ObservationTable {
    bracketing: CoarseBracketing,
    rows: Vec<ObservationRow>,
    participants: BTreeMap<Stratum, u64>,
    /// `S_ta^g` keyed by `(wave, age, gender)`; missing keys mean 1.
    detail: BTreeMap<(u32, u32, Gender), f64>,
}

impl ObservationTable {
    /// Builds and validates a table. Every stratum with participants must
    /// carry exactly one row per (bracket, contact gender).
    pub fn new(
        bracketing: CoarseBracketing,
        mut rows: Vec<ObservationRow>,
        participants: BTreeMap<Stratum, u64>,
        detail: BTreeMap<(u32, u32, Gender), f64>,
    ) -> Result<Self> {
        let grid = bracketing.grid();
        let n_cells = bracketing.len() * 2;
        let mut seen: BTreeMap<Stratum, BTreeSet<(usize, Gender)>> = BTreeMap::new();
        for row in &rows {
            let s = row.stratum;
            grid.index_of(s.age as i64)?;
            if s.wave == 0 {
                return Err(Error::Validation("waves are numbered from 1".into()));
            }
            if row.bracket >= bracketing.len() {
                return Err(Error::Validation(format!("bracket index {} out of range", row.bracket)));
            }
            match participants.get(&s) {
                Some(&n) if n > 0 => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "count row for wave {} repeat {} age {} gender {} has no participants",
                        s.wave, s.repeat, s.age, s.gender
                    )))
                }
            }
            if !seen.entry(s).or_default().insert((row.bracket, row.contact_gender)) {
                return Err(Error::Validation(format!(
                    "duplicate count row for wave {} repeat {} age {} gender {} bracket {} contact {}",
                    s.wave,
                    s.repeat,
                    s.age,
                    s.gender,
                    bracketing.brackets()[row.bracket],
                    row.contact_gender
                )));
            }
        }
        for (s, &n) in &participants {
            if n == 0 {
                continue;
            }
            let got = seen.get(s).map_or(0, |c| c.len());
            if got != n_cells {
                return Err(Error::Validation(format!(
                    "stratum wave {} repeat {} age {} gender {} has {got} of {n_cells} cells; zero-fill first",
                    s.wave, s.repeat, s.age, s.gender
                )));
            }
        }
        for (&(t, a, g), &s) in &detail {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Validation(format!(
                    "detail proportion for wave {t} age {a} gender {g} must lie in (0, 1], got {s}"
                )));
            }
        }
        let participants = participants.into_iter().filter(|(_, n)| *n > 0).collect();
        rows.sort_by_key(|r| (r.stratum, r.bracket, r.contact_gender));
        Ok(Self { bracketing, rows, participants, detail })
    }

    pub fn grid(&self) -> AgeGrid {
        self.bracketing.grid()
    }

    pub fn bracketing(&self) -> &CoarseBracketing {
        &self.bracketing
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn participants(&self) -> &BTreeMap<Stratum, u64> {
        &self.participants
    }

    pub fn n_participants(&self, s: &Stratum) -> u64 {
        self.participants.get(s).copied().unwrap_or(0)
    }

    pub fn detail_map(&self) -> &BTreeMap<(u32, u32, Gender), f64> {
        &self.detail
    }

    pub fn detail(&self, wave: u32, age: u32, gender: Gender) -> f64 {
        self.detail.get(&(wave, age, gender)).copied().unwrap_or(1.0)
    }

    /// Distinct waves, ascending.
    pub fn waves(&self) -> Vec<u32> {
        self.participants.keys().map(|s| s.wave).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn max_repeat(&self) -> u32 {
        self.participants.keys().map(|s| s.repeat).max().unwrap_or(0)
    }

    /// Same table without any count rows or participants.
    pub fn emptied(&self) -> Self {
        Self {
            bracketing: self.bracketing.clone(),
            rows: Vec::new(),
            participants: BTreeMap::new(),
            detail: BTreeMap::new(),
        }
    }
}
