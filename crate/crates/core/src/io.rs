//! Run configuration, survey CSV schemas, and persistence of datasets,
//! draws and run manifests.
//!
//! Floats are written with 17 significant digits so that every value
//! survives a write/read cycle bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{AgeGrid, Bracket, CoarseBracketing, Direction, Gender};
use crate::inference::{ChainDraws, PosteriorDraws, SamplerConfig};
use crate::model::{
    detail_proportion, IntensityField, ModelConfig, ObservationRow, ObservationTable, PopulationTable, Stratum,
};
use crate::simulate::{Scenario, SimulatedDataset};

/// Default cap on a single aggregate contact report.
pub const DEFAULT_TRUNCATION_CAP: u64 = 60;

pub const COUNTS_FILE: &str = "counts.csv";
pub const PARTICIPANTS_FILE: &str = "participants.csv";
pub const POPULATION_FILE: &str = "population.csv";
pub const DETAIL_FILE: &str = "detail.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const FINE_COUNTS_FILE: &str = "fine_counts.csv";
pub const DATASET_META_FILE: &str = "dataset.json";

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the standard file names; explicit paths win.
    pub dir: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub participants: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub detail: Option<PathBuf>,
    pub aggregates: Option<PathBuf>,
    /// Contact-age brackets as `"low-high"` labels; inferred from the
    /// counts when absent.
    pub brackets: Option<Vec<String>>,
    pub truncation_cap: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            counts: None,
            participants: None,
            population: None,
            detail: None,
            aggregates: None,
            brackets: None,
            truncation_cap: DEFAULT_TRUNCATION_CAP,
        }
    }
}

impl DataConfig {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), ..Self::default() }
    }

    fn resolve(&self, explicit: &Option<PathBuf>, name: &str, required: bool) -> Result<Option<PathBuf>> {
        if let Some(p) = explicit {
            return Ok(Some(p.clone()));
        }
        match &self.dir {
            Some(d) => {
                let p = d.join(name);
                if p.exists() || required {
                    Ok(Some(p))
                } else {
                    Ok(None)
                }
            }
            None if required => Err(Error::Config(format!("data block names neither `dir` nor the {name} path"))),
            None => Ok(None),
        }
    }

    /// Makes relative paths relative to `base`.
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.dir,
            &mut self.counts,
            &mut self.participants,
            &mut self.population,
            &mut self.detail,
            &mut self.aggregates,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("out") }
    }
}

/// Everything a `fit` needs, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.rebase(base);
        if cfg.output.directory.is_relative() {
            cfg.output.directory = base.join(&cfg.output.directory);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering, output directory excluded.
    pub fn hash(&self) -> Result<String> {
        let keyed = Self { output: OutputConfig::default(), ..self.clone() };
        Ok(sha256_hex(keyed.to_toml_string()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub wave: u32,
    pub repeat: u32,
    pub part_age: u32,
    pub part_gender: Gender,
    pub cont_bracket: String,
    pub cont_gender: Gender,
    pub count: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub wave: u32,
    pub repeat: u32,
    pub age: u32,
    pub gender: Gender,
    pub n: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct PopulationRecord {
    pub age: u32,
    pub gender: Gender,
    pub pop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct DetailRecord {
    pub wave: u32,
    pub age: u32,
    pub gender: Gender,
    pub s: f64,
}

/// One aggregate (group) contact report of one participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct AggregateRecord {
    pub wave: u32,
    pub age: u32,
    pub gender: Gender,
    pub count: i64,
}

/// One participant whose age may be a bracket such as `"0-4"`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct RawParticipant {
    pub wave: u32,
    pub repeat: u32,
    pub age: String,
    pub gender: Gender,
}

/// Survey records before zero-filling.
#[derive(Debug, Clone, Default)]
pub struct RawSurvey {
    pub counts: Vec<CountRecord>,
    pub participants: Vec<ParticipantRecord>,
    pub detail: Vec<DetailRecord>,
    pub aggregates: Vec<AggregateRecord>,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    rdr.deserialize().map(|r| r.map_err(|e| Error::Validation(format!("{}: {e}", path.display())))).collect()
}

pub fn read_counts(path: &Path) -> Result<Vec<CountRecord>> {
    read_csv(path)
}

pub fn read_participants(path: &Path) -> Result<Vec<ParticipantRecord>> {
    read_csv(path)
}

pub fn read_detail(path: &Path) -> Result<Vec<DetailRecord>> {
    read_csv(path)
}

pub fn read_aggregates(path: &Path) -> Result<Vec<AggregateRecord>> {
    read_csv(path)
}

pub fn read_raw_participants(path: &Path) -> Result<Vec<RawParticipant>> {
    read_csv(path)
}

/// Reads `population.csv`; the grid is the span of listed ages.
pub fn read_population(path: &Path) -> Result<PopulationTable> {
    let recs: Vec<PopulationRecord> = read_csv(path)?;
    let lo = recs.iter().map(|r| r.age).min();
    let hi = recs.iter().map(|r| r.age).max();
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::Validation(format!("{}: no rows", path.display())));
    };
    let grid = AgeGrid::new(lo, hi)?;
    let mut vals = vec![[f64::NAN; 2]; grid.len()];
    for r in &recs {
        let slot = &mut vals[grid.index_of(r.age as i64)?][r.gender.index()];
        if !slot.is_nan() {
            return Err(Error::Validation(format!("{}: duplicate age {} gender {}", path.display(), r.age, r.gender)));
        }
        *slot = r.pop;
    }
    if let Some(a) = vals.iter().position(|v| v[0].is_nan() || v[1].is_nan()) {
        return Err(Error::Validation(format!(
            "{}: age {} lacks a row for one gender",
            path.display(),
            grid.age_at(a)
        )));
    }
    PopulationTable::new(grid, vals)
}

fn open_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_counts(path: &Path, recs: &[CountRecord]) -> Result<()> {
    let mut w = open_writer(path)?;
    for r in recs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_participants(path: &Path, recs: &[ParticipantRecord]) -> Result<()> {
    let mut w = open_writer(path)?;
    for r in recs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_population(path: &Path, pop: &PopulationTable) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["age", "gender", "pop"])?;
    for (a, age) in pop.grid().ages().enumerate() {
        for g in Gender::ALL {
            w.write_record([age.to_string(), g.to_string(), fmt_f64(pop.get(a, g))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses an age that is either an integer or a `low-high` bracket.
fn parse_age(s: &str) -> Result<Bracket> {
    let s = s.trim();
    if let Ok(a) = s.parse::<u32>() {
        return Bracket::new(a, a);
    }
    s.parse::<Bracket>()
}

/// Replaces bracketed (child) ages by a uniform draw within the bracket;
/// exact ages pass through. Returns one record per participant.
pub fn impute_child_ages(records: &[RawParticipant], seed: u64) -> Result<Vec<ParticipantRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records.len());
    let mut bad = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match parse_age(&r.age) {
            Ok(b) => {
                let age = if b.low == b.high { b.low } else { rng.random_range(b.low..=b.high) };
                out.push(ParticipantRecord { wave: r.wave, repeat: r.repeat, age, gender: r.gender, n: 1 });
            }
            Err(e) => bad.push(format!("row {}: {e}", i + 1)),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad.join("; ")));
    }
    Ok(out)
}

/// Sums participant records per stratum.
pub fn tally_participants(records: &[ParticipantRecord]) -> Vec<ParticipantRecord> {
    let mut m: BTreeMap<Stratum, u64> = BTreeMap::new();
    for r in records {
        *m.entry(Stratum { wave: r.wave, repeat: r.repeat, age: r.age, gender: r.gender }).or_default() += r.n;
    }
    m.into_iter()
        .map(|(s, n)| ParticipantRecord { wave: s.wave, repeat: s.repeat, age: s.age, gender: s.gender, n })
        .collect()
}

/// Bracketing implied by the distinct bracket labels of the count rows.
pub fn infer_bracketing(counts: &[CountRecord], grid: Option<AgeGrid>) -> Result<CoarseBracketing> {
    let mut brackets: Vec<Bracket> = counts
        .iter()
        .map(|c| c.cont_bracket.parse::<Bracket>())
        .collect::<Result<BTreeSet<_>>>()?
        .into_iter()
        .collect();
    brackets.sort_by_key(|b| b.low);
    let (Some(first), Some(last)) = (brackets.first(), brackets.last()) else {
        return Err(Error::Validation("no count rows".into()));
    };
    let grid = match grid {
        Some(g) => g,
        None => AgeGrid::new(first.low, last.high)?,
    };
    CoarseBracketing::new(grid, brackets)
}

fn configured_bracketing(labels: &[String], grid: Option<AgeGrid>) -> Result<CoarseBracketing> {
    let brackets = labels.iter().map(|l| l.parse::<Bracket>()).collect::<Result<Vec<_>>>()?;
    let grid = match (grid, brackets.first(), brackets.last()) {
        (Some(g), _, _) => g,
        (None, Some(first), Some(last)) => AgeGrid::new(first.low, last.high)?,
        _ => return Err(Error::Config("`brackets` is empty".into())),
    };
    CoarseBracketing::new(grid, brackets)
}

/// Builds the dense observation table.
///
/// Strata with participants get a row for every (bracket, contact gender),
/// zero where nothing was reported; strata without participants are
/// dropped. Aggregate reports are capped at `cap` each and turn into
/// detail proportions; an explicit detail table wins over aggregates.
pub fn zero_fill_and_truncate(raw: &RawSurvey, bracketing: &CoarseBracketing, cap: u64) -> Result<ObservationTable> {
    let grid = bracketing.grid();
    let mut parts: BTreeMap<Stratum, u64> = BTreeMap::new();
    for p in &raw.participants {
        grid.index_of(p.age as i64)?;
        *parts.entry(Stratum { wave: p.wave, repeat: p.repeat, age: p.age, gender: p.gender }).or_default() += p.n;
    }
    let mut cells: BTreeMap<(Stratum, usize, Gender), u64> = BTreeMap::new();
    for (i, c) in raw.counts.iter().enumerate() {
        if c.count < 0 {
            return Err(Error::Validation(format!("count row {}: negative count {}", i + 1, c.count)));
        }
        let s = Stratum { wave: c.wave, repeat: c.repeat, age: c.part_age, gender: c.part_gender };
        if !parts.contains_key(&s) {
            return Err(Error::Validation(format!(
                "count row {}: wave {} repeat {} age {} gender {} is not in the participants table",
                i + 1,
                s.wave,
                s.repeat,
                s.age,
                s.gender
            )));
        }
        let k = bracketing.index_of_label(&c.cont_bracket)?;
        *cells.entry((s, k, c.cont_gender)).or_default() += c.count as u64;
    }
    let mut rows = Vec::new();
    for (&s, &n) in &parts {
        if n == 0 {
            continue;
        }
        for k in 0..bracketing.len() {
            for h in Gender::ALL {
                let count = cells.get(&(s, k, h)).copied().unwrap_or(0);
                rows.push(ObservationRow { stratum: s, bracket: k, contact_gender: h, count });
            }
        }
    }

    let mut detail = BTreeMap::new();
    if !raw.detail.is_empty() {
        for d in &raw.detail {
            detail.insert((d.wave, d.age, d.gender), d.s);
        }
    } else if !raw.aggregates.is_empty() {
        let mut agg: BTreeMap<(u32, u32, Gender), u64> = BTreeMap::new();
        for (i, a) in raw.aggregates.iter().enumerate() {
            if a.count < 0 {
                return Err(Error::Validation(format!("aggregate row {}: negative count {}", i + 1, a.count)));
            }
            *agg.entry((a.wave, a.age, a.gender)).or_default() += (a.count as u64).min(cap);
        }
        let mut detailed: BTreeMap<(u32, u32, Gender), u64> = BTreeMap::new();
        for r in &rows {
            *detailed.entry((r.stratum.wave, r.stratum.age, r.stratum.gender)).or_default() += r.count;
        }
        for (key, &y) in &detailed {
            let t = agg.get(key).copied().unwrap_or(0);
            detail.insert(*key, detail_proportion(y, t));
        }
    }
    ObservationTable::new(bracketing.clone(), rows, parts, detail)
}

/// Loads the survey files named by a data block.
pub fn load_survey(data: &DataConfig) -> Result<(ObservationTable, PopulationTable)> {
    let counts_path = data.resolve(&data.counts, COUNTS_FILE, true)?.expect("required");
    let parts_path = data.resolve(&data.participants, PARTICIPANTS_FILE, true)?.expect("required");
    let raw = RawSurvey {
        counts: read_counts(&counts_path)?,
        participants: read_participants(&parts_path)?,
        detail: match data.resolve(&data.detail, DETAIL_FILE, false)? {
            Some(p) => read_detail(&p)?,
            None => Vec::new(),
        },
        aggregates: match data.resolve(&data.aggregates, AGGREGATES_FILE, false)? {
            Some(p) => read_aggregates(&p)?,
            None => Vec::new(),
        },
    };
    if raw.counts.is_empty() || raw.participants.is_empty() {
        return Err(Error::Validation(format!(
            "empty survey: {} count rows, {} participant rows",
            raw.counts.len(),
            raw.participants.len()
        )));
    }
    let pop = match data.resolve(&data.population, POPULATION_FILE, false)? {
        Some(p) => Some(read_population(&p)?),
        None => None,
    };
    let bracketing = match &data.brackets {
        Some(labels) => configured_bracketing(labels, pop.as_ref().map(|p| p.grid()))?,
        None => infer_bracketing(&raw.counts, pop.as_ref().map(|p| p.grid()))?,
    };
    let pop = match pop {
        Some(p) => p,
        None => PopulationTable::uniform(bracketing.grid(), 1.0)?,
    };
    let table = zero_fill_and_truncate(&raw, &bracketing, data.truncation_cap)?;
    Ok((table, pop))
}

/// Count records of an observation table, in table order.
pub fn table_count_records(table: &ObservationTable) -> Vec<CountRecord> {
    let labels = table.bracketing().labels();
    table
        .rows()
        .iter()
        .map(|r| CountRecord {
            wave: r.stratum.wave,
            repeat: r.stratum.repeat,
            part_age: r.stratum.age,
            part_gender: r.stratum.gender,
            cont_bracket: labels[r.bracket].clone(),
            cont_gender: r.contact_gender,
            count: r.count as i64,
        })
        .collect()
}

pub fn table_participant_records(table: &ObservationTable) -> Vec<ParticipantRecord> {
    table
        .participants()
        .iter()
        .map(|(s, &n)| ParticipantRecord { wave: s.wave, repeat: s.repeat, age: s.age, gender: s.gender, n })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scenario: Scenario,
    pub n_total: u64,
    pub replicate: usize,
    pub master_seed: u64,
    pub seed: u64,
}

/// Writes an intensity field as `wave, part_age, part_gender, cont_age, cont_gender, intensity`.
pub fn write_intensity(path: &Path, field: &IntensityField, waves: &[u32]) -> Result<()> {
    let grid = field.grid();
    let mut w = open_writer(path)?;
    w.write_record(["wave", "part_age", "part_gender", "cont_age", "cont_gender", "intensity"])?;
    for t in 0..field.n_waves() {
        let wave = waves.get(t).copied().unwrap_or(t as u32 + 1);
        for dir in Direction::ALL {
            for (a, age) in grid.ages().enumerate() {
                for (b, cage) in grid.ages().enumerate() {
                    w.write_record([
                        wave.to_string(),
                        age.to_string(),
                        dir.participant().to_string(),
                        cage.to_string(),
                        dir.contact().to_string(),
                        fmt_f64(field.get(t, dir, a, b)),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct IntensityRecord {
    wave: u32,
    part_age: u32,
    part_gender: Gender,
    cont_age: u32,
    cont_gender: Gender,
    intensity: f64,
}

/// Reads a field written by [`write_intensity`] on `grid`.
pub fn read_intensity(path: &Path, grid: AgeGrid) -> Result<IntensityField> {
    let recs: Vec<IntensityRecord> = read_csv(path)?;
    let waves: BTreeSet<u32> = recs.iter().map(|r| r.wave).collect();
    let waves: Vec<u32> = waves.into_iter().collect();
    let nb = grid.len();
    let mut field = IntensityField::new(grid, waves.len().max(1), vec![f64::NAN; waves.len().max(1) * 4 * nb * nb])?;
    for r in &recs {
        let t = waves.binary_search(&r.wave).expect("listed");
        let dir = Direction::new(r.part_gender, r.cont_gender);
        field.set(t, dir, grid.index_of(r.part_age as i64)?, grid.index_of(r.cont_age as i64)?, r.intensity);
    }
    if field.values().iter().any(|v| v.is_nan()) {
        return Err(Error::Validation(format!("{}: incomplete intensity grid", path.display())));
    }
    Ok(field)
}

/// Writes a simulated dataset in the survey schema plus its truth.
pub fn write_dataset(dir: &Path, ds: &SimulatedDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let table = ds.observation_table()?;
    write_counts(&dir.join(COUNTS_FILE), &table_count_records(&table))?;
    write_participants(&dir.join(PARTICIPANTS_FILE), &table_participant_records(&table))?;
    write_population(&dir.join(POPULATION_FILE), &ds.population)?;
    write_intensity(&dir.join(TRUTH_FILE), &ds.truth, &[1])?;

    let grid = ds.population.grid();
    let nb = grid.len();
    let mut w = open_writer(&dir.join(FINE_COUNTS_FILE))?;
    w.write_record(["part_age", "part_gender", "cont_age", "cont_gender", "count"])?;
    for dir_ in Direction::ALL {
        for (a, age) in grid.ages().enumerate() {
            for (b, cage) in grid.ages().enumerate() {
                w.write_record([
                    age.to_string(),
                    dir_.participant().to_string(),
                    cage.to_string(),
                    dir_.contact().to_string(),
                    ds.fine_counts[(dir_.index() * nb + a) * nb + b].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    let meta = DatasetMeta {
        scenario: ds.scenario,
        n_total: ds.n_total,
        replicate: ds.replicate,
        master_seed: ds.master_seed,
        seed: ds.seed,
    };
    fs::write(dir.join(DATASET_META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// A dataset directory read back: the survey, and the truth when present.
pub struct LoadedDataset {
    pub table: ObservationTable,
    pub population: PopulationTable,
    pub truth: Option<IntensityField>,
    pub meta: Option<DatasetMeta>,
}

pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    let (table, population) = load_survey(&DataConfig::from_dir(dir))?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() { Some(read_intensity(&truth_path, population.grid())?) } else { None };
    let meta_path = dir.join(DATASET_META_FILE);
    let meta = if meta_path.exists() { Some(serde_json::from_str(&fs::read_to_string(meta_path)?)?) } else { None };
    Ok(LoadedDataset { table, population, truth, meta })
}

pub const DRAWS_FILE: &str = "draws.csv";
pub const UNCONSTRAINED_FILE: &str = "unconstrained.csv";
pub const STATS_FILE: &str = "sampler_stats.csv";
pub const CHAINS_FILE: &str = "chains.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainAdaptation {
    step_size: f64,
    inv_metric: Vec<f64>,
    warmup_divergences: usize,
}

fn write_matrix(path: &Path, names: &[String], chains: &[&Vec<Vec<f64>>]) -> Result<()> {
    let mut w = open_writer(path)?;
    let mut header = vec!["chain".to_string(), "iteration".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (c, rows) in chains.iter().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            let mut rec = vec![c.to_string(), i.to_string()];
            rec.extend(row.iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<Vec<f64>>>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().skip(2).map(str::to_string).collect();
    let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad =
            |what: &str| Error::Validation(format!("{}: bad {what} in line {:?}", path.display(), rec.position()));
        let c: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("chain"))?;
        let vals =
            rec.iter().skip(2).map(|v| v.parse::<f64>().map_err(|_| bad("value"))).collect::<Result<Vec<_>>>()?;
        if vals.len() != names.len() {
            return Err(bad("width"));
        }
        if c >= chains.len() {
            chains.resize(c + 1, Vec::new());
        }
        chains[c].push(vals);
    }
    Ok((names, chains))
}

/// Persists draws: constrained and unconstrained matrices, per-transition
/// statistics, and the adapted step size and metric of every chain.
pub fn write_draws(dir: &Path, draws: &PosteriorDraws) -> Result<()> {
    fs::create_dir_all(dir)?;
    let con: Vec<_> = draws.chains.iter().map(|c| &c.constrained).collect();
    let unc: Vec<_> = draws.chains.iter().map(|c| &c.unconstrained).collect();
    write_matrix(&dir.join(DRAWS_FILE), &draws.names, &con)?;
    write_matrix(&dir.join(UNCONSTRAINED_FILE), &draws.names, &unc)?;
    let mut w = open_writer(&dir.join(STATS_FILE))?;
    w.write_record(["chain", "iteration", "log_density", "accept_stat", "divergent", "tree_depth", "n_leapfrog"])?;
    for (c, ch) in draws.chains.iter().enumerate() {
        for i in 0..ch.log_density.len() {
            w.write_record([
                c.to_string(),
                i.to_string(),
                fmt_f64(ch.log_density[i]),
                fmt_f64(ch.accept_stat[i]),
                u8::from(ch.divergent[i]).to_string(),
                ch.tree_depth[i].to_string(),
                ch.n_leapfrog[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    let adapt: Vec<ChainAdaptation> = draws
        .chains
        .iter()
        .map(|c| ChainAdaptation {
            step_size: c.step_size,
            inv_metric: c.inv_metric.clone(),
            warmup_divergences: c.warmup_divergences,
        })
        .collect();
    fs::write(dir.join(CHAINS_FILE), serde_json::to_string(&adapt)? + "\n")?;
    Ok(())
}

#[derive(Deserialize)]
struct StatsRecord {
    chain: usize,
    #[allow(dead_code)]
    iteration: usize,
    log_density: f64,
    accept_stat: f64,
    divergent: u8,
    tree_depth: usize,
    n_leapfrog: usize,
}

pub fn read_draws(dir: &Path) -> Result<PosteriorDraws> {
    let (names, con) = read_matrix(&dir.join(DRAWS_FILE))?;
    let (unames, unc) = read_matrix(&dir.join(UNCONSTRAINED_FILE))?;
    if names != unames || con.len() != unc.len() {
        return Err(Error::Validation("draws.csv and unconstrained.csv disagree".into()));
    }
    let adapt: Vec<ChainAdaptation> = serde_json::from_str(&fs::read_to_string(dir.join(CHAINS_FILE))?)?;
    if adapt.len() != con.len() {
        return Err(Error::Validation("chains.json does not match the draws".into()));
    }
    let stats: Vec<StatsRecord> = read_csv(&dir.join(STATS_FILE))?;
    let mut chains: Vec<ChainDraws> = con
        .into_iter()
        .zip(unc)
        .zip(adapt)
        .map(|((constrained, unconstrained), a)| ChainDraws {
            unconstrained,
            constrained,
            log_density: Vec::new(),
            accept_stat: Vec::new(),
            divergent: Vec::new(),
            tree_depth: Vec::new(),
            n_leapfrog: Vec::new(),
            step_size: a.step_size,
            inv_metric: a.inv_metric,
            warmup_divergences: a.warmup_divergences,
        })
        .collect();
    for s in stats {
        let ch = chains
            .get_mut(s.chain)
            .ok_or_else(|| Error::Validation(format!("sampler_stats.csv names unknown chain {}", s.chain)))?;
        ch.log_density.push(s.log_density);
        ch.accept_stat.push(s.accept_stat);
        ch.divergent.push(s.divergent != 0);
        ch.tree_depth.push(s.tree_depth);
        ch.n_leapfrog.push(s.n_leapfrog);
    }
    if chains.iter().any(|c| c.log_density.len() != c.unconstrained.len()) {
        return Err(Error::Validation("sampler_stats.csv does not match the draws".into()));
    }
    Ok(PosteriorDraws { names, chains })
}

/// Record of one CLI run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64, mut files: Vec<String>) -> Self {
        files.sort();
        Self { command: command.into(), version: env!("CARGO_PKG_VERSION").into(), config_hash, seed, files }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes `rows` of serializable records as CSV.
pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = open_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(age: u32, g: Gender, br: &str, h: Gender, count: i64) -> CountRecord {
        CountRecord {
            wave: 1,
            repeat: 0,
            part_age: age,
            part_gender: g,
            cont_bracket: br.into(),
            cont_gender: h,
            count,
        }
    }

    fn part(age: u32, g: Gender, n: u64) -> ParticipantRecord {
        ParticipantRecord { wave: 1, repeat: 0, age, gender: g, n }
    }

    fn bracketing() -> CoarseBracketing {
        CoarseBracketing::parse(AgeGrid::new(0, 5).unwrap(), &["0-2", "3-5"]).unwrap()
    }

    #[test]
    fn zero_fill_creates_full_rows() {
        let raw = RawSurvey {
            counts: vec![rec(1, Gender::Male, "0-2", Gender::Female, 4)],
            participants: vec![part(1, Gender::Male, 3), part(4, Gender::Female, 2)],
            ..RawSurvey::default()
        };
        let t = zero_fill_and_truncate(&raw, &bracketing(), 60).unwrap();
        assert_eq!(t.rows().len(), 8);
        let s4 = Stratum { wave: 1, repeat: 0, age: 4, gender: Gender::Female };
        assert!(t.rows().iter().filter(|r| r.stratum == s4).all(|r| r.count == 0));
        assert_eq!(t.rows().iter().map(|r| r.count).sum::<u64>(), 4);
    }

    #[test]
    fn empty_strata_are_dropped() {
        let raw = RawSurvey {
            counts: vec![],
            participants: vec![part(1, Gender::Male, 0), part(2, Gender::Male, 1)],
            ..RawSurvey::default()
        };
        let t = zero_fill_and_truncate(&raw, &bracketing(), 60).unwrap();
        assert_eq!(t.participants().len(), 1);
        assert_eq!(t.rows().len(), 4);
    }

    #[test]
    fn aggregate_reports_are_capped() {
        let raw = RawSurvey {
            counts: vec![rec(1, Gender::Male, "0-2", Gender::Female, 20)],
            participants: vec![part(1, Gender::Male, 1)],
            aggregates: vec![AggregateRecord { wave: 1, age: 1, gender: Gender::Male, count: 200 }],
            ..RawSurvey::default()
        };
        let t = zero_fill_and_truncate(&raw, &bracketing(), DEFAULT_TRUNCATION_CAP).unwrap();
        assert!((t.detail(1, 1, Gender::Male) - 20.0 / 80.0).abs() < 1e-15);
    }

    #[test]
    fn negative_and_orphan_counts_fail() {
        let mut raw = RawSurvey {
            counts: vec![rec(1, Gender::Male, "0-2", Gender::Female, -1)],
            participants: vec![part(1, Gender::Male, 1)],
            ..RawSurvey::default()
        };
        assert!(matches!(zero_fill_and_truncate(&raw, &bracketing(), 60), Err(Error::Validation(_))));
        raw.counts[0].count = 1;
        raw.counts[0].part_age = 2;
        assert!(matches!(zero_fill_and_truncate(&raw, &bracketing(), 60), Err(Error::Validation(_))));
    }

    #[test]
    fn imputation() {
        let raw = |age: &str| RawParticipant { wave: 1, repeat: 0, age: age.into(), gender: Gender::Female };
        let out = impute_child_ages(&[raw("7-7"), raw("33")], 1).unwrap();
        assert_eq!(out[0].age, 7);
        assert_eq!(out[1].age, 33);
        let err = impute_child_ages(&[raw("3"), raw("x-4"), raw("9-2")], 1).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("row 3"), "{err}");
        let many: Vec<_> = (0..10_000).map(|_| raw("0-4")).collect();
        let a = impute_child_ages(&many, 5).unwrap();
        assert_eq!(a, impute_child_ages(&many, 5).unwrap());
        let mut freq = [0.0; 5];
        for p in &a {
            freq[p.age as usize] += 1.0;
        }
        let chi2: f64 = freq.iter().map(|&o| (o - 2000.0f64).powi(2) / 2000.0).sum();
        // 99th percentile of χ² with 4 degrees of freedom
        assert!(chi2 < 13.28, "chi2 = {chi2}");
    }

    #[test]
    fn config_rejects_unknown_keys_and_values() {
        assert!(RunConfig::from_toml_str("[model]\nparameterization = \"diff-in-age\"\n").is_ok());
        assert!(RunConfig::from_toml_str("[model]\nparameterisation = \"diff-in-age\"\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nparameterization = \"diagonal\"\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nkernel = \"matern72\"\n").is_err());
        assert!(RunConfig::from_toml_str("[sampler]\nchains = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[extra]\n").is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig { data: DataConfig::from_dir("d"), ..RunConfig::default() };
        let s = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let other = RunConfig { sampler: SamplerConfig { seed: 2, ..cfg.sampler }, ..cfg.clone() };
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 2.5e-300, -7.0, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
