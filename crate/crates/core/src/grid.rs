//! Age-grid algebra: fine one-year ages, coarse reporting brackets, gender
//! pairs and the difference-in-age rotation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive one-year ages `min_age..=max_age`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgeGrid {
    min_age: u32,
    max_age: u32,
}

impl AgeGrid {
    pub fn new(min_age: u32, max_age: u32) -> Result<Self> {
        if max_age < min_age {
            return Err(Error::Config(format!("age grid must be non-empty, got {min_age}..={max_age}")));
        }
        Ok(Self { min_age, max_age })
    }

    /// The 0..=84 grid used for national survey data.
    pub fn survey() -> Self {
        Self { min_age: 0, max_age: 84 }
    }

    /// The 6..=49 grid of the synthetic experiments.
    pub fn simulation() -> Self {
        Self { min_age: 6, max_age: 49 }
    }

    pub fn min_age(&self) -> u32 {
        self.min_age
    }

    pub fn max_age(&self) -> u32 {
        self.max_age
    }

    /// Number of fine ages `B`.
    pub fn len(&self) -> usize {
        (self.max_age - self.min_age + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ages(&self) -> impl Iterator<Item = u32> + Clone {
        self.min_age..=self.max_age
    }

    pub fn contains(&self, age: i64) -> bool {
        age >= self.min_age as i64 && age <= self.max_age as i64
    }

    /// Zero-based position of `age` in the grid.
    pub fn index_of(&self, age: i64) -> Result<usize> {
        if !self.contains(age) {
            return Err(Error::Domain(format!("age {age} outside grid {}..={}", self.min_age, self.max_age)));
        }
        Ok((age - self.min_age as i64) as usize)
    }

    pub fn age_at(&self, index: usize) -> u32 {
        self.min_age + index as u32
    }

    pub fn diff_grid(&self) -> DiffGrid {
        DiffGrid { n_ages: self.len() }
    }
}

/// Closed integer age interval `low..=high`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bracket {
    pub low: u32,
    pub high: u32,
}

impl Bracket {
    pub fn new(low: u32, high: u32) -> Result<Self> {
        if high < low {
            return Err(Error::Config(format!("bracket {low}-{high} is empty")));
        }
        Ok(Self { low, high })
    }

    pub fn len(&self) -> usize {
        (self.high - self.low + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, age: u32) -> bool {
        age >= self.low && age <= self.high
    }

    pub fn ages(&self) -> impl Iterator<Item = u32> {
        self.low..=self.high
    }
}

impl fmt::Display for Bracket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.low, self.high)
    }
}

impl FromStr for Bracket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed bracket {s:?}, expected \"low-high\""));
        let (lo, hi) = s.trim().split_once('-').ok_or_else(bad)?;
        let low = lo.trim().parse::<u32>().map_err(|_| bad())?;
        let high = hi.trim().parse::<u32>().map_err(|_| bad())?;
        Bracket::new(low, high)
    }
}

/// A partition of an [`AgeGrid`] into ordered, disjoint, covering brackets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseBracketing {
    grid: AgeGrid,
    brackets: Vec<Bracket>,
    member_map: Vec<usize>,
}

impl CoarseBracketing {
    /// Validates that `brackets` partition `grid` exactly.
    pub fn new(grid: AgeGrid, brackets: Vec<Bracket>) -> Result<Self> {
        if brackets.is_empty() {
            return Err(Error::Config("bracket list is empty".into()));
        }
        let mut expected = grid.min_age();
        let mut member_map = Vec::with_capacity(grid.len());
        for (k, br) in brackets.iter().enumerate() {
            if br.low != expected {
                return Err(Error::Config(format!(
                    "brackets do not partition {}..={}: bracket {br} starts at {}, expected {expected}",
                    grid.min_age(),
                    grid.max_age(),
                    br.low
                )));
            }
            member_map.extend(std::iter::repeat_n(k, br.len()));
            expected = br.high + 1;
        }
        if expected != grid.max_age() + 1 {
            return Err(Error::Config(format!(
                "brackets end at {} but the grid ends at {}",
                expected - 1,
                grid.max_age()
            )));
        }
        Ok(Self { grid, brackets, member_map })
    }

    pub fn parse<S: AsRef<str>>(grid: AgeGrid, labels: &[S]) -> Result<Self> {
        let brackets = labels.iter().map(|s| s.as_ref().parse()).collect::<Result<Vec<Bracket>>>()?;
        Self::new(grid, brackets)
    }

    /// Contact-age brackets of the national survey on 0..=84.
    pub fn survey() -> Self {
        Self::parse(
            AgeGrid::survey(),
            &[
                "0-4", "5-9", "10-14", "15-19", "20-24", "25-34", "35-44", "45-54", "55-64", "65-69", "70-74", "75-79",
                "80-84",
            ],
        )
        .expect("static bracketing is a partition")
    }

    /// Contact-age brackets of the synthetic experiments on 6..=49.
    pub fn simulation() -> Self {
        Self::parse(AgeGrid::simulation(), &["6-9", "10-14", "15-19", "20-24", "25-34", "35-44", "45-49"])
            .expect("static bracketing is a partition")
    }

    pub fn grid(&self) -> AgeGrid {
        self.grid
    }

    pub fn brackets(&self) -> &[Bracket] {
        &self.brackets
    }

    pub fn len(&self) -> usize {
        self.brackets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.brackets.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.brackets.iter().map(|b| b.to_string()).collect()
    }

    /// Index of the bracket whose label is `label`.
    pub fn index_of_label(&self, label: &str) -> Result<usize> {
        let br: Bracket = label.parse()?;
        self.brackets
            .iter()
            .position(|b| *b == br)
            .ok_or_else(|| Error::Domain(format!("bracket {label:?} is not part of the bracketing")))
    }

    /// Bracket index containing fine age `age`.
    pub fn bracket_of(&self, age: i64) -> Result<usize> {
        let idx = self.grid.index_of(age)?;
        Ok(self.member_map[idx])
    }

    /// Zero-based grid indices of the fine ages in bracket `k`.
    pub fn member_indices(&self, k: usize) -> std::ops::Range<usize> {
        let br = self.brackets[k];
        let lo = (br.low - self.grid.min_age()) as usize;
        lo..lo + br.len()
    }
}

/// Age differences `-(B-1)..=(B-1)` of an [`AgeGrid`] with `B` ages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffGrid {
    n_ages: usize,
}

impl DiffGrid {
    /// Number of age differences `D = 2B - 1`.
    pub fn len(&self) -> usize {
        2 * self.n_ages - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_abs(&self) -> i64 {
        self.n_ages as i64 - 1
    }

    pub fn diffs(&self) -> impl Iterator<Item = i64> {
        let m = self.max_abs();
        -m..=m
    }

    pub fn index_of(&self, d: i64) -> Result<usize> {
        let m = self.max_abs();
        if d < -m || d > m {
            return Err(Error::Domain(format!("age difference {d} outside -{m}..={m}")));
        }
        Ok((d + m) as usize)
    }
}

/// Rotates `(a, b)` into the age by difference-in-age coordinate `(a, b - a)`.
pub fn rotate_to_diff(grid: &AgeGrid, a: i64, b: i64) -> Result<(i64, i64)> {
    grid.index_of(a)?;
    grid.index_of(b)?;
    Ok((a, b - a))
}

/// Inverse of [`rotate_to_diff`].
pub fn rotate_from_diff(grid: &AgeGrid, a: i64, d: i64) -> Result<(i64, i64)> {
    let b = a + d;
    grid.index_of(a)?;
    grid.index_of(b)?;
    Ok((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn index(self) -> usize {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Gender::Male
        } else {
            Gender::Female
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" | "male" | "Male" => Ok(Gender::Male),
            "F" | "f" | "female" | "Female" => Ok(Gender::Female),
            other => Err(Error::Validation(format!("unknown gender {other:?}"))),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// The three independently modelled random fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenderPair {
    MF,
    MM,
    FF,
}

impl GenderPair {
    pub const ALL: [GenderPair; 3] = [GenderPair::MF, GenderPair::MM, GenderPair::FF];

    pub fn index(self) -> usize {
        match self {
            GenderPair::MF => 0,
            GenderPair::MM => 1,
            GenderPair::FF => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GenderPair::MF => "MF",
            GenderPair::MM => "MM",
            GenderPair::FF => "FF",
        }
    }
}

/// Contact direction: participant gender `g` to contact gender `h`.
///
/// `FM` has no field of its own; its rates are the transposed `MF` rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    MM,
    MF,
    FM,
    FF,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::MM, Direction::MF, Direction::FM, Direction::FF];

    pub fn new(g: Gender, h: Gender) -> Self {
        match (g, h) {
            (Gender::Male, Gender::Male) => Direction::MM,
            (Gender::Male, Gender::Female) => Direction::MF,
            (Gender::Female, Gender::Male) => Direction::FM,
            (Gender::Female, Gender::Female) => Direction::FF,
        }
    }

    /// Position in `[MM, MF, FM, FF]`, i.e. `2g + h`.
    pub fn index(self) -> usize {
        2 * self.participant().index() + self.contact().index()
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn participant(self) -> Gender {
        match self {
            Direction::MM | Direction::MF => Gender::Male,
            Direction::FM | Direction::FF => Gender::Female,
        }
    }

    pub fn contact(self) -> Gender {
        match self {
            Direction::MM | Direction::FM => Gender::Male,
            Direction::MF | Direction::FF => Gender::Female,
        }
    }

    /// The modelled field this direction is built from.
    pub fn pair(self) -> GenderPair {
        match self {
            Direction::MM => GenderPair::MM,
            Direction::FF => GenderPair::FF,
            Direction::MF | Direction::FM => GenderPair::MF,
        }
    }

    /// The direction whose rate surface is this one's transpose.
    pub fn reverse(self) -> Self {
        Direction::new(self.contact(), self.participant())
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::MM => "MM",
            Direction::MF => "MF",
            Direction::FM => "FM",
            Direction::FF => "FF",
        }
    }
}

/// An input axis shifted so that its midpoint sits at zero, optionally
/// divided by a scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledAxis {
    pub midpoint: f64,
    pub half_range: f64,
    pub scale: f64,
}

impl ScaledAxis {
    /// Axis over the integers `lo..=hi`, centred but not rescaled.
    pub fn centered(lo: i64, hi: i64) -> Self {
        Self { midpoint: (lo + hi) as f64 / 2.0, half_range: (hi - lo) as f64 / 2.0, scale: 1.0 }
    }

    pub fn scaled_input(&self, x: f64) -> f64 {
        (x - self.midpoint) / self.scale
    }

    /// Half-range of the scaled inputs.
    pub fn scaled_half_range(&self) -> f64 {
        self.half_range / self.scale
    }

    /// HSGP boundary `L = factor * half-range` on the scaled axis.
    pub fn boundary(&self, factor: f64) -> f64 {
        factor * self.scaled_half_range()
    }

    pub fn scaled_points(&self, lo: i64, hi: i64) -> Vec<f64> {
        (lo..=hi).map(|x| self.scaled_input(x as f64)).collect()
    }
}

/// `x - midpoint` for an axis spanning `lo..=hi`.
pub fn scaled_input(x: f64, lo: i64, hi: i64) -> f64 {
    ScaledAxis::centered(lo, hi).scaled_input(x)
}
