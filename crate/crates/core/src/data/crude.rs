//! Crude rates with normal-approximation intervals over arbitrary strata.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{age_lower_bound, Dataset};
use crate::error::{Error, Result};

/// Spatial covariate holding the percentage of rural population.
pub const RURALITY_COVARIATE: &str = "rurality";

const Z_975: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Sex,
    AgeGroup,
    AgeBand,
    Year,
    Area,
    Rurality,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Sex => "sex",
            GroupKey::AgeGroup => "age_group",
            GroupKey::AgeBand => "age_band",
            GroupKey::Year => "year",
            GroupKey::Area => "area",
            GroupKey::Rurality => "rurality",
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "sex" => GroupKey::Sex,
            "age" | "age_group" | "age-group" => GroupKey::AgeGroup,
            "age_band" | "age-band" | "band" => GroupKey::AgeBand,
            "year" => GroupKey::Year,
            "area" | "province" => GroupKey::Area,
            "rurality" => GroupKey::Rurality,
            other => return Err(Error::InvalidSpec(format!("unknown grouping key {other:?}"))),
        })
    }
}

/// Parses a comma-separated list of grouping keys; empty means one overall
/// stratum.
pub fn parse_grouping(text: &str) -> Result<Vec<GroupKey>> {
    let keys: Vec<GroupKey> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    for (i, k) in keys.iter().enumerate() {
        if keys[..i].contains(k) {
            return Err(Error::InvalidSpec(format!("grouping key {k} repeated")));
        }
    }
    Ok(keys)
}

pub const RURALITY_BANDS: [&str; 3] = ["low", "medium", "high"];
pub const AGE_BANDS: [&str; 3] = ["<40", "40-69", "70+"];

/// Band index for a rural-population percentage: below 20, 20 to 40, above 40.
pub fn rurality_band(percent: f64) -> usize {
    if percent < 20.0 {
        0
    } else if percent <= 40.0 {
        1
    } else {
        2
    }
}

/// Band index for an age-group label by its lower bound.
pub fn age_band(label: &str) -> Result<usize> {
    let lower = age_lower_bound(label).ok_or_else(|| Error::Data(format!("cannot read age group {label:?}")))?;
    Ok(if lower < 40 {
        0
    } else if lower < 70 {
        1
    } else {
        2
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrudeRateRow {
    /// One label per grouping key, in grouping order.
    pub strata: Vec<String>,
    pub deaths: u64,
    pub population: f64,
    /// Per 100,000.
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Rate per 100,000 with a 95% normal-approximation interval.
pub fn crude_rate(deaths: u64, population: f64, clamp: bool) -> Result<(f64, f64, f64)> {
    if !(population > 0.0) {
        return Err(Error::Data("empty stratum: no population at risk".into()));
    }
    let rate = 1e5 * deaths as f64 / population;
    let half = Z_975 * 1e5 * (deaths as f64).sqrt() / population;
    let low = rate - half;
    Ok((rate, if clamp { low.max(0.0) } else { low }, rate + half))
}

/// Pooled crude rates per stratum. Missing cells are dropped from both the
/// count and the population.
pub fn crude_rates(dataset: &Dataset, grouping: &[GroupKey], clamp: bool) -> Result<Vec<CrudeRateRow>> {
    let rurality = if grouping.contains(&GroupKey::Rurality) {
        Some(
            dataset
                .spatial_covariates()
                .get(RURALITY_COVARIATE)
                .ok_or_else(|| Error::Data(format!("grouping by rurality needs a {RURALITY_COVARIATE} covariate")))?,
        )
    } else {
        None
    };
    let bands: Vec<usize> = dataset.age_groups().iter().map(|g| age_band(g)).collect::<Result<_>>()?;

    // Stratum key as (sort index, label) per grouping key.
    let mut strata: BTreeMap<Vec<(usize, String)>, (u64, f64)> = BTreeMap::new();
    let na = dataset.age_groups().len();
    let ny = dataset.years().len();
    let nar = dataset.areas().len();
    for s in 0..dataset.sexes().len() {
        for a in 0..nar {
            for y in 0..ny {
                for g in 0..na {
                    let key: Vec<(usize, String)> = grouping
                        .iter()
                        .map(|k| match k {
                            GroupKey::Sex => (s, dataset.sexes()[s].clone()),
                            GroupKey::AgeGroup => (g, dataset.age_groups()[g].clone()),
                            GroupKey::AgeBand => (bands[g], AGE_BANDS[bands[g]].to_string()),
                            GroupKey::Year => (y, dataset.years()[y].to_string()),
                            GroupKey::Area => (a, dataset.areas()[a].clone()),
                            GroupKey::Rurality => {
                                let b = rurality_band(rurality.expect("checked above")[a]);
                                (b, RURALITY_BANDS[b].to_string())
                            }
                        })
                        .collect();
                    let entry = strata.entry(key).or_insert((0, 0.0));
                    let c = dataset.cell(s, a, y, g);
                    if let Some(d) = c.deaths {
                        entry.0 += d;
                        entry.1 += c.population;
                    }
                }
            }
        }
    }
    strata
        .into_iter()
        .map(|(key, (deaths, population))| {
            let labels: Vec<String> = key.into_iter().map(|(_, l)| l).collect();
            let (rate, ci_low, ci_high) = crude_rate(deaths, population, clamp)
                .map_err(|_| Error::Data(format!("empty stratum {labels:?}: every cell is missing")))?;
            Ok(CrudeRateRow {
                strata: labels,
                deaths,
                population,
                rate,
                ci_low,
                ci_high,
            })
        })
        .collect()
}

/// CSV with one column per grouping key followed by the rate columns.
pub fn crude_rates_csv(grouping: &[GroupKey], rows: &[CrudeRateRow]) -> String {
    let mut out: String = grouping.iter().map(|k| format!("{k},")).collect();
    out.push_str("deaths,population,rate,ci_low,ci_high\n");
    for r in rows {
        for l in &r.strata {
            out.push_str(l);
            out.push(',');
        }
        out.push_str(&format!("{},{},{},{},{}\n", r.deaths, r.population, r.rate, r.ci_low, r.ci_high));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cell;

    #[test]
    fn analytic_interval() {
        let (r, lo, hi) = crude_rate(100, 1e6, true).unwrap();
        assert!((r - 10.0).abs() < 1e-12);
        assert!((lo - 8.04).abs() < 1e-12);
        assert!((hi - 11.96).abs() < 1e-12);
    }

    #[test]
    fn zero_deaths_clamped() {
        assert_eq!(crude_rate(0, 5e4, true).unwrap(), (0.0, 0.0, 0.0));
        let (_, lo, _) = crude_rate(1, 1e6, false).unwrap();
        assert!(lo < 0.0);
        assert_eq!(crude_rate(1, 1e6, true).unwrap().1, 0.0);
        assert!(crude_rate(0, 0.0, true).is_err());
    }

    #[test]
    fn bands() {
        assert_eq!(rurality_band(19.9), 0);
        assert_eq!(rurality_band(20.0), 1);
        assert_eq!(rurality_band(40.0), 1);
        assert_eq!(rurality_band(40.1), 2);
        assert_eq!(age_band("30-39").unwrap(), 0);
        assert_eq!(age_band("40-49").unwrap(), 1);
        assert_eq!(age_band("80+").unwrap(), 2);
    }

    #[test]
    fn grouping_parse() {
        assert_eq!(parse_grouping("sex, rurality").unwrap(), vec![GroupKey::Sex, GroupKey::Rurality]);
        assert!(parse_grouping("sex,sex").is_err());
        assert!(parse_grouping("colour").is_err());
        assert!(parse_grouping("").unwrap().is_empty());
    }

    #[test]
    fn merged_stratum_pools_counts() {
        // Two areas with very different populations: the pooled rate is
        // 1e5 * 11 / 1.1e6 = 1.0, whereas averaging the rates gives 5.5.
        let cells = vec![
            Cell {
                deaths: Some(10),
                population: 1e6,
            },
            Cell {
                deaths: Some(1),
                population: 1e5,
            },
        ];
        let ds = Dataset::new(
            vec!["a".into(), "b".into()],
            vec![2010],
            vec!["50-59".into()],
            vec!["M".into()],
            cells,
        )
        .unwrap();
        let all = crude_rates(&ds, &[], true).unwrap();
        assert_eq!(all.len(), 1);
        assert!((all[0].rate - 1.0).abs() < 1e-12);
        let by_area = crude_rates(&ds, &[GroupKey::Area], true).unwrap();
        assert_eq!(by_area[0].strata, vec!["a"]);
        assert!((by_area[1].rate - 1.0).abs() < 1e-12);
    }
}
