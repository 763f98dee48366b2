//! Stratified death and population counts on an area × year × age × sex grid.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::confounding::Axis;
use crate::error::{Error, Result};

pub const DEATHS_FILE: &str = "deaths.csv";
pub const POPULATION_FILE: &str = "population.csv";
pub const COVARIATE_DIR: &str = "covariates";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    /// `None` when the count is treated as missing.
    pub deaths: Option<u64>,
    pub population: f64,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        self.deaths.is_none()
    }
}

/// A national series, optionally with sex-specific versions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemporalCovariate {
    pub shared: Option<Vec<f64>>,
    pub by_sex: BTreeMap<String, Vec<f64>>,
}

impl TemporalCovariate {
    /// Sex-specific series when present, otherwise the shared one.
    pub fn for_sex(&self, sex: &str) -> Option<&[f64]> {
        self.by_sex
            .get(sex)
            .or(self.shared.as_ref())
            .map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    areas: Vec<String>,
    years: Vec<i32>,
    age_groups: Vec<String>,
    sexes: Vec<String>,
    cells: Vec<Cell>,
    spatial: BTreeMap<String, Vec<f64>>,
    temporal: BTreeMap<String, TemporalCovariate>,
}

#[derive(Debug, Deserialize)]
struct DeathsRow {
    area: String,
    year: i32,
    age_group: String,
    sex: String,
    deaths: Option<String>,
}

#[derive(Debug, Deserialize)]
struct PopulationRow {
    area: String,
    year: i32,
    age_group: String,
    sex: String,
    population: f64,
}

/// Lower bound of an age-group label such as `10-19` or `80+`.
pub fn age_lower_bound(label: &str) -> Option<u32> {
    let digits: String = label.trim().chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn push_unique<T: PartialEq + Clone>(v: &mut Vec<T>, x: &T) {
    if !v.contains(x) {
        v.push(x.clone());
    }
}

impl Dataset {
    /// Builds a dataset from a full grid of cells ordered with the age index
    /// fastest, then year, area and sex.
    pub fn new(
        areas: Vec<String>,
        years: Vec<i32>,
        age_groups: Vec<String>,
        sexes: Vec<String>,
        cells: Vec<Cell>,
    ) -> Result<Self> {
        let expected = areas.len() * years.len() * age_groups.len() * sexes.len();
        if expected == 0 {
            return Err(Error::Data("dataset axes must be non-empty".into()));
        }
        if cells.len() != expected {
            return Err(Error::Data(format!(
                "expected {expected} cells for the full grid, got {}",
                cells.len()
            )));
        }
        let ds = Self {
            areas,
            years,
            age_groups,
            sexes,
            cells,
            spatial: BTreeMap::new(),
            temporal: BTreeMap::new(),
        };
        for (i, c) in ds.cells.iter().enumerate() {
            ds.check_cell(i, c)?;
        }
        Ok(ds)
    }

    fn check_cell(&self, index: usize, c: &Cell) -> Result<()> {
        if !(c.population > 0.0 && c.population.is_finite()) {
            return Err(Error::Data(format!(
                "{}: population must be positive, got {}",
                self.describe(index),
                c.population
            )));
        }
        if let Some(d) = c.deaths {
            if d as f64 > c.population {
                return Err(Error::Data(format!(
                    "{}: deaths {d} exceed population {}",
                    self.describe(index),
                    c.population
                )));
            }
        }
        Ok(())
    }

    fn describe(&self, index: usize) -> String {
        let (s, a, y, g) = self.unflatten(index);
        format!(
            "{},{},{},{}",
            self.areas[a], self.years[y], self.age_groups[g], self.sexes[s]
        )
    }

    fn unflatten(&self, index: usize) -> (usize, usize, usize, usize) {
        let na = self.age_groups.len();
        let ny = self.years.len();
        let ns = self.areas.len();
        let g = index % na;
        let y = (index / na) % ny;
        let a = (index / (na * ny)) % ns;
        let s = index / (na * ny * ns);
        (s, a, y, g)
    }

    pub fn index(&self, sex: usize, area: usize, year: usize, age: usize) -> usize {
        ((sex * self.areas.len() + area) * self.years.len() + year) * self.age_groups.len() + age
    }

    pub fn cell(&self, sex: usize, area: usize, year: usize, age: usize) -> &Cell {
        &self.cells[self.index(sex, area, year, age)]
    }

    pub fn cell_mut(&mut self, sex: usize, area: usize, year: usize, age: usize) -> &mut Cell {
        let i = self.index(sex, area, year, age);
        &mut self.cells[i]
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn age_groups(&self) -> &[String] {
        &self.age_groups
    }

    pub fn sexes(&self) -> &[String] {
        &self.sexes
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn sex_index(&self, sex: &str) -> Result<usize> {
        self.sexes
            .iter()
            .position(|s| s == sex)
            .ok_or_else(|| Error::Data(format!("sex {sex:?} not present in dataset (have {:?})", self.sexes)))
    }

    pub fn spatial_covariates(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.spatial
    }

    pub fn temporal_covariates(&self) -> &BTreeMap<String, TemporalCovariate> {
        &self.temporal
    }

    pub fn covariate_axis(&self, name: &str) -> Option<Axis> {
        if self.spatial.contains_key(name) {
            Some(Axis::Spatial)
        } else if self.temporal.contains_key(name) {
            Some(Axis::Temporal)
        } else {
            None
        }
    }

    pub fn set_spatial_covariate(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.areas.len() {
            return Err(Error::Data(format!(
                "spatial covariate {name} has {} values for {} areas",
                values.len(),
                self.areas.len()
            )));
        }
        self.spatial.insert(name.to_string(), values);
        Ok(())
    }

    pub fn set_temporal_covariate(&mut self, name: &str, sex: Option<&str>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.years.len() {
            return Err(Error::Data(format!(
                "temporal covariate {name} has {} values for {} years",
                values.len(),
                self.years.len()
            )));
        }
        let entry = self.temporal.entry(name.to_string()).or_default();
        match sex {
            Some(s) => {
                entry.by_sex.insert(s.to_string(), values);
            }
            None => entry.shared = Some(values),
        }
        Ok(())
    }

    /// Parses the deaths and population tables. An empty deaths field marks
    /// the cell as missing. Age groups starting at 0 are dropped.
    pub fn from_csv(deaths_csv: &str, population_csv: &str) -> Result<Self> {
        let deaths = read_rows::<DeathsRow>(deaths_csv)?;
        let populations = read_rows::<PopulationRow>(population_csv)?;

        let mut areas = Vec::new();
        let mut years = Vec::new();
        let mut ages = Vec::new();
        let mut sexes = Vec::new();
        for (_, r) in &deaths {
            push_unique(&mut areas, &r.area);
            push_unique(&mut years, &r.year);
            push_unique(&mut sexes, &r.sex);
            if age_lower_bound(&r.age_group) != Some(0) {
                push_unique(&mut ages, &r.age_group);
            }
        }
        years.sort_unstable();

        let area_ix: HashMap<&str, usize> = areas.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let year_ix: HashMap<i32, usize> = years.iter().enumerate().map(|(i, &y)| (y, i)).collect();
        let age_ix: HashMap<&str, usize> = ages.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let sex_ix: HashMap<&str, usize> = sexes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let n = areas.len() * years.len() * ages.len() * sexes.len();
        let key = |area: &str, year: i32, age: &str, sex: &str, line: usize| -> Result<Option<usize>> {
            if age_lower_bound(age) == Some(0) {
                return Ok(None);
            }
            let unknown = |what: &str, v: &str| Error::Parse {
                line,
                message: format!("unknown {what} label {v:?}"),
            };
            let a = *area_ix.get(area).ok_or_else(|| unknown("area", area))?;
            let y = *year_ix.get(&year).ok_or_else(|| unknown("year", &year.to_string()))?;
            let g = *age_ix.get(age).ok_or_else(|| unknown("age group", age))?;
            let s = *sex_ix.get(sex).ok_or_else(|| unknown("sex", sex))?;
            Ok(Some(((s * areas.len() + a) * years.len() + y) * ages.len() + g))
        };

        let mut death_vals: Vec<Option<Option<u64>>> = vec![None; n];
        for (line, r) in &deaths {
            let Some(i) = key(&r.area, r.year, &r.age_group, &r.sex, *line)? else {
                continue;
            };
            let value = match r.deaths.as_deref().map(str::trim) {
                None | Some("") | Some("NA") => None,
                Some(text) => {
                    let v: i64 = text.parse().map_err(|_| Error::Parse {
                        line: *line,
                        message: format!("bad death count {text:?}"),
                    })?;
                    if v < 0 {
                        return Err(Error::Parse {
                            line: *line,
                            message: format!("negative death count {v}"),
                        });
                    }
                    Some(v as u64)
                }
            };
            if death_vals[i].replace(value).is_some() {
                return Err(Error::Parse {
                    line: *line,
                    message: "duplicate deaths row".into(),
                });
            }
        }
        let mut pop_vals: Vec<Option<f64>> = vec![None; n];
        for (line, r) in &populations {
            let Some(i) = key(&r.area, r.year, &r.age_group, &r.sex, *line)? else {
                continue;
            };
            if !(r.population > 0.0) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("population must be positive, got {}", r.population),
                });
            }
            if pop_vals[i].replace(r.population).is_some() {
                return Err(Error::Parse {
                    line: *line,
                    message: "duplicate population row".into(),
                });
            }
        }

        let mut cells = Vec::with_capacity(n);
        let mut scratch = Self {
            areas,
            years,
            age_groups: ages,
            sexes,
            cells: Vec::new(),
            spatial: BTreeMap::new(),
            temporal: BTreeMap::new(),
        };
        for i in 0..n {
            match (death_vals[i], pop_vals[i]) {
                (Some(deaths), Some(population)) => cells.push(Cell { deaths, population }),
                (d, _) => {
                    let which = if d.is_none() { "deaths" } else { "population" };
                    return Err(Error::Data(format!(
                        "grid gap: no {which} row for {}",
                        scratch.describe(i)
                    )));
                }
            }
        }
        for (i, c) in cells.iter().enumerate() {
            scratch.check_cell(i, c)?;
        }
        scratch.cells = cells;
        Ok(scratch)
    }

    /// Reads a `label,value` (or `label,sex,value`) covariate table. The axis
    /// is inferred from whether labels are areas or years.
    pub fn add_covariate_csv(&mut self, name: &str, text: &str) -> Result<Axis> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let has_sex = headers.iter().any(|h| h == "sex");
        let mut rows: Vec<(usize, String, Option<String>, f64)> = Vec::new();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let get = |col: &str| -> Result<&str> {
                headers
                    .iter()
                    .position(|h| h == col)
                    .and_then(|p| rec.get(p))
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("missing column {col}"),
                    })
            };
            let label = get("label")?.to_string();
            let sex = if has_sex { Some(get("sex")?.to_string()).filter(|s| !s.is_empty()) } else { None };
            let value: f64 = get("value")?.parse().map_err(|_| Error::Parse {
                line,
                message: "bad covariate value".into(),
            })?;
            rows.push((line, label, sex, value));
        }
        let all_areas = rows.iter().all(|r| self.areas.contains(&r.1));
        let axis = if all_areas {
            Axis::Spatial
        } else if rows.iter().all(|r| r.1.parse::<i32>().is_ok_and(|y| self.years.contains(&y))) {
            Axis::Temporal
        } else {
            let bad = rows
                .iter()
                .find(|r| !self.areas.contains(&r.1) && !r.1.parse::<i32>().is_ok_and(|y| self.years.contains(&y)))
                .map(|r| (r.0, r.1.clone()))
                .unwrap_or((1, String::new()));
            return Err(Error::Parse {
                line: bad.0,
                message: format!("covariate {name}: unknown label {:?}", bad.1),
            });
        };
        match axis {
            Axis::Spatial => {
                let mut values = vec![f64::NAN; self.areas.len()];
                for (line, label, _, v) in &rows {
                    let i = self.areas.iter().position(|a| a == label).expect("checked above");
                    if !values[i].is_nan() {
                        return Err(Error::Parse {
                            line: *line,
                            message: format!("duplicate value for {label}"),
                        });
                    }
                    values[i] = *v;
                }
                if let Some(i) = values.iter().position(|v| v.is_nan()) {
                    return Err(Error::Data(format!("covariate {name}: no value for area {}", self.areas[i])));
                }
                self.set_spatial_covariate(name, values)?;
            }
            Axis::Temporal => {
                let mut series: BTreeMap<Option<String>, Vec<f64>> = BTreeMap::new();
                for (line, label, sex, v) in &rows {
                    let y: i32 = label.parse().expect("checked above");
                    let i = self.years.iter().position(|&yy| yy == y).expect("checked above");
                    let s = series.entry(sex.clone()).or_insert_with(|| vec![f64::NAN; self.years.len()]);
                    if !s[i].is_nan() {
                        return Err(Error::Parse {
                            line: *line,
                            message: format!("duplicate value for {label}"),
                        });
                    }
                    s[i] = *v;
                }
                for (sex, values) in series {
                    if let Some(i) = values.iter().position(|v| v.is_nan()) {
                        return Err(Error::Data(format!("covariate {name}: no value for year {}", self.years[i])));
                    }
                    self.set_temporal_covariate(name, sex.as_deref(), values)?;
                }
            }
        }
        Ok(axis)
    }

    /// Loads `deaths.csv`, `population.csv` and every `covariates/<name>.csv`
    /// from a data directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |p: PathBuf| fs::read_to_string(&p).map_err(|e| Error::io(p, e));
        let mut ds = Self::from_csv(&read(dir.join(DEATHS_FILE))?, &read(dir.join(POPULATION_FILE))?)?;
        let cov_dir = dir.join(COVARIATE_DIR);
        if cov_dir.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&cov_dir)
                .map_err(|e| Error::io(&cov_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            entries.sort();
            for p in entries {
                let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                ds.add_covariate_csv(&name, &read(p.clone())?)?;
            }
        }
        Ok(ds)
    }

    pub fn deaths_csv(&self) -> String {
        let mut out = String::from("area,year,age_group,sex,deaths\n");
        self.for_each_row(|area, year, age, sex, c| {
            let d = c.deaths.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!("{area},{year},{age},{sex},{d}\n"));
        });
        out
    }

    pub fn population_csv(&self) -> String {
        let mut out = String::from("area,year,age_group,sex,population\n");
        self.for_each_row(|area, year, age, sex, c| {
            out.push_str(&format!("{area},{year},{age},{sex},{}\n", c.population));
        });
        out
    }

    fn for_each_row(&self, mut f: impl FnMut(&str, i32, &str, &str, &Cell)) {
        for (s, sex) in self.sexes.iter().enumerate() {
            for (a, area) in self.areas.iter().enumerate() {
                for (y, &year) in self.years.iter().enumerate() {
                    for (g, age) in self.age_groups.iter().enumerate() {
                        f(area, year, age, sex, self.cell(s, a, y, g));
                    }
                }
            }
        }
    }

    /// Writes the directory layout read by [`Dataset::load_dir`].
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let write = |p: PathBuf, text: String| fs::write(&p, text).map_err(|e| Error::io(p, e));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(dir.join(DEATHS_FILE), self.deaths_csv())?;
        write(dir.join(POPULATION_FILE), self.population_csv())?;
        if self.spatial.is_empty() && self.temporal.is_empty() {
            return Ok(());
        }
        let cov_dir = dir.join(COVARIATE_DIR);
        fs::create_dir_all(&cov_dir).map_err(|e| Error::io(&cov_dir, e))?;
        for (name, values) in &self.spatial {
            let mut out = String::from("label,value\n");
            for (area, v) in self.areas.iter().zip(values) {
                out.push_str(&format!("{area},{v}\n"));
            }
            write(cov_dir.join(format!("{name}.csv")), out)?;
        }
        for (name, series) in &self.temporal {
            let mut out = String::from("label,sex,value\n");
            if let Some(values) = &series.shared {
                for (year, v) in self.years.iter().zip(values) {
                    out.push_str(&format!("{year},,{v}\n"));
                }
            }
            for (sex, values) in &series.by_sex {
                for (year, v) in self.years.iter().zip(values) {
                    out.push_str(&format!("{year},{sex},{v}\n"));
                }
            }
            write(cov_dir.join(format!("{name}.csv")), out)?;
        }
        Ok(())
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (k, rec) in reader.deserialize::<T>().enumerate() {
        let line = k + 2;
        let row = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push((line, row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_text(missing: &[(&str, i32)]) -> (String, String) {
        let mut d = String::from("area,year,age_group,sex,deaths\n");
        let mut p = String::from("area,year,age_group,sex,population\n");
        for area in ["Madrid", "Toledo"] {
            for year in [2010, 2011] {
                for age in ["0-9", "10-19", "20-29"] {
                    let deaths = if missing.contains(&(area, year)) { String::new() } else { "3".into() };
                    d.push_str(&format!("{area},{year},{age},M,{deaths}\n"));
                    p.push_str(&format!("{area},{year},{age},M,1000\n"));
                }
            }
        }
        (d, p)
    }

    #[test]
    fn empty_deaths_field_is_missing() {
        let (d, p) = grid_text(&[("Madrid", 2011)]);
        let ds = Dataset::from_csv(&d, &p).unwrap();
        assert_eq!(ds.age_groups(), &["10-19", "20-29"]);
        assert!(ds.cell(0, 0, 1, 1).is_missing());
        assert!(!ds.cell(0, 0, 0, 1).is_missing());
        assert_eq!(ds.cells().len(), 2 * 2 * 2);
    }

    #[test]
    fn deaths_above_population_rejected() {
        let d = "area,year,age_group,sex,deaths\nA,2010,10-19,M,5\n";
        let p = "area,year,age_group,sex,population\nA,2010,10-19,M,4\n";
        assert!(matches!(Dataset::from_csv(d, p), Err(Error::Data(_))));
    }

    #[test]
    fn negative_deaths_rejected() {
        let d = "area,year,age_group,sex,deaths\nA,2010,10-19,M,-1\n";
        let p = "area,year,age_group,sex,population\nA,2010,10-19,M,4\n";
        assert!(matches!(Dataset::from_csv(d, p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn grid_gap_rejected() {
        let (d, p) = grid_text(&[]);
        let truncated: String = p.lines().take(p.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        let err = Dataset::from_csv(&d, &truncated).unwrap_err();
        assert!(err.to_string().contains("grid gap"), "{err}");
    }

    #[test]
    fn unknown_population_label_rejected() {
        let d = "area,year,age_group,sex,deaths\nA,2010,10-19,M,1\n";
        let p = "area,year,age_group,sex,population\nA,2010,10-19,M,4\nB,2010,10-19,M,4\n";
        assert!(matches!(Dataset::from_csv(d, p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn covariate_axis_inference() {
        let (d, p) = grid_text(&[]);
        let mut ds = Dataset::from_csv(&d, &p).unwrap();
        assert_eq!(ds.add_covariate_csv("rural", "label,value\nToledo,45\nMadrid,5\n").unwrap(), Axis::Spatial);
        assert_eq!(ds.spatial_covariates()["rural"], vec![5.0, 45.0]);
        let axis = ds
            .add_covariate_csv("unemp", "label,sex,value\n2010,M,10\n2011,M,11\n2010,F,12\n2011,F,13\n")
            .unwrap();
        assert_eq!(axis, Axis::Temporal);
        assert_eq!(ds.temporal_covariates()["unemp"].for_sex("F").unwrap(), &[12.0, 13.0]);
        assert!(ds.add_covariate_csv("bad", "label,value\nNowhere,1\n").is_err());
        assert!(ds.add_covariate_csv("short", "label,value\nToledo,1\n").is_err());
    }

    #[test]
    fn age_bounds() {
        assert_eq!(age_lower_bound("80+"), Some(80));
        assert_eq!(age_lower_bound("0-9"), Some(0));
        assert_eq!(age_lower_bound("10-19"), Some(10));
        assert_eq!(age_lower_bound("total"), None);
    }
}
