#![allow(dead_code)]

use std::collections::BTreeMap;

use contact_intensity::grid::{AgeGrid, CoarseBracketing, Direction, Gender};
use contact_intensity::model::IntensityField;
use contact_intensity::model::{ObservationRow, ObservationTable, PopulationTable, Stratum};
use contact_intensity::simulate::{aggregate_counts, allocate_participants, build_truth, sample_counts, Scenario};

/// Six ages in two brackets, two waves, repeat participants in wave 2 and
/// detail proportions below one: every model term is active.
pub fn toy_table() -> (ObservationTable, PopulationTable) {
    let grid = AgeGrid::new(0, 5).unwrap();
    let br = CoarseBracketing::parse(grid, &["0-2", "3-5"]).unwrap();
    let mut rows = Vec::new();
    let mut parts = BTreeMap::new();
    let mut detail = BTreeMap::new();
    let mut k = 0u64;
    for wave in 1..=2 {
        for repeat in 0..=1 {
            if wave == 1 && repeat == 1 {
                continue;
            }
            for age in [0u32, 1, 3, 5] {
                for g in Gender::ALL {
                    let s = Stratum { wave, repeat, age, gender: g };
                    parts.insert(s, 1 + (age as u64 + k) % 4);
                    for b in 0..2 {
                        for h in Gender::ALL {
                            k += 1;
                            rows.push(ObservationRow { stratum: s, bracket: b, contact_gender: h, count: (k * 5) % 9 });
                        }
                    }
                    detail.insert((wave, age, g), 0.5 + 0.15 * (age % 3) as f64);
                }
            }
        }
    }
    let pop =
        PopulationTable::new(grid, (0..6).map(|i| [1.0 + 0.25 * i as f64, 1.6 - 0.1 * i as f64]).collect()).unwrap();
    (ObservationTable::new(br, rows, parts, detail).unwrap(), pop)
}

/// Coarse-cell rows for one stratum per `(age, gender)` from counts laid
/// out `[dir][a][c]`.
fn push_rows(
    rows: &mut Vec<ObservationRow>,
    parts: &mut BTreeMap<Stratum, u64>,
    grid: AgeGrid,
    nc: usize,
    participants: &[[u64; 2]],
    coarse: &[u64],
    repeat: u32,
) {
    let nb = grid.len();
    for (a, age) in grid.ages().enumerate() {
        for g in Gender::ALL {
            let n = participants[a][g.index()];
            if n == 0 {
                continue;
            }
            let stratum = Stratum { wave: 1, repeat, age, gender: g };
            parts.insert(stratum, n);
            for h in Gender::ALL {
                let dir = Direction::new(g, h);
                for c in 0..nc {
                    rows.push(ObservationRow {
                        stratum,
                        bracket: c,
                        contact_gender: h,
                        count: coarse[(dir.index() * nb + a) * nc + c],
                    });
                }
            }
        }
    }
}

/// One wave in which every participant reports twice; the second report
/// is thinned by `exp(rho1)`.
pub struct RepeatDataset {
    pub truth: IntensityField,
    pub population: PopulationTable,
    pub table: ObservationTable,
}

pub fn repeat_dataset(scenario: Scenario, n_total: u64, rho1: f64, seed: u64) -> RepeatDataset {
    let grid = AgeGrid::simulation();
    let br = CoarseBracketing::simulation();
    let pop = PopulationTable::uniform(grid, 1.0).unwrap();
    let truth = build_truth(scenario, &pop).unwrap();
    let mut faded = truth.clone();
    for v in faded.values_mut() {
        *v *= rho1.exp();
    }
    let participants = allocate_participants(&pop, n_total);
    let first = aggregate_counts(&sample_counts(&truth, &participants, seed).unwrap(), &br).unwrap();
    let second = aggregate_counts(&sample_counts(&faded, &participants, seed ^ 0x5eed).unwrap(), &br).unwrap();
    let mut rows = Vec::new();
    let mut parts = BTreeMap::new();
    push_rows(&mut rows, &mut parts, grid, br.len(), &participants, &first, 0);
    push_rows(&mut rows, &mut parts, grid, br.len(), &participants, &second, 1);
    let table = ObservationTable::new(br, rows, parts, BTreeMap::new()).unwrap();
    RepeatDataset { truth, population: pop, table }
}

/// `max |a - b| / max(|a|, |b|, 1)`
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0)).fold(0.0, f64::max)
}

/// Central finite-difference gradient.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}
