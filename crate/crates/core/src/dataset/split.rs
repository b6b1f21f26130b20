//! Sentence-wise and city-wise train/val/test partitions.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Fnv1a, QaPair};

/// Train / val / test ratios matching the published 310k / 78k / 61k split.
pub const DEFAULT_RATIOS: [f64; 3] = [0.69, 0.17, 0.14];

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("ratios must be positive and sum to 1 (got {0:?})")]
    Ratios([f64; 3]),
    #[error("city {0:?} is not assigned to any split")]
    UnassignedCity(String),
    #[error("city {0:?} is assigned to more than one split")]
    DuplicateCity(String),
    #[error("split manifest: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    SentenceWise,
    CityWise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Default for CityLists {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            train: v(&["Longhua", "Wuhu", "Qingdao", "Yingrenshi"]),
            val: v(&["Lihu"]),
            test: v(&["Yuehai"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitParams {
    Ratios { ratios: [f64; 3], seed: u64 },
    Cities(CityLists),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub mode: SplitMode,
    pub params: SplitParams,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    /// Pairs belonging to the named split ("train", "val" or "test").
    pub fn select<'a>(&self, which: &str, pairs: &'a [QaPair]) -> Option<Vec<&'a QaPair>> {
        let ids: BTreeSet<&str> = match which {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            _ => return None,
        }
        .iter()
        .map(String::as_str)
        .collect();
        Some(pairs.iter().filter(|p| ids.contains(p.qid.as_str())).collect())
    }
}

fn check_ratios(r: [f64; 3]) -> Result<(), SplitError> {
    if r.iter().any(|x| !(*x > 0.0) || !x.is_finite()) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::Ratios(r));
    }
    Ok(())
}

/// Seeded random partition with every city represented in each split.
///
/// Global sizes are `val = floor(n·r_val)`, `test = floor(n·r_test)`, the rest
/// going to train. Each city is shuffled on its own and cut contiguously
/// (train, val, test); per-city val/test quotas are apportioned by largest
/// remainder so that they add up to the global sizes.
pub fn split_sentence_wise(pairs: &[QaPair], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment, SplitError> {
    check_ratios(ratios)?;
    let mut by_city: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for p in pairs {
        by_city.entry(p.city.as_str()).or_default().push(p.qid.as_str());
    }
    let n = pairs.len();
    let target_val = (n as f64 * ratios[1]).floor() as usize;
    let target_test = (n as f64 * ratios[2]).floor() as usize;

    let cities: Vec<&str> = by_city.keys().copied().collect();
    let sizes: Vec<usize> = cities.iter().map(|c| by_city[c].len()).collect();
    let val = apportion(&sizes, ratios[1], target_val, &vec![0; sizes.len()]);
    let test = apportion(&sizes, ratios[2], target_test, &val);

    let mut out = SplitAssignment {
        mode: SplitMode::SentenceWise,
        params: SplitParams::Ratios { ratios, seed },
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (k, city) in cities.iter().enumerate() {
        let mut ids = by_city[city].clone();
        ids.sort_unstable();
        let mut h = Fnv1a::new();
        h.write(&seed.to_le_bytes());
        h.write(city.as_bytes());
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(h.finish()));
        let n_train = ids.len() - val[k] - test[k];
        out.train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        out.val.extend(ids[n_train..n_train + val[k]].iter().map(|s| s.to_string()));
        out.test.extend(ids[n_train + val[k]..].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

/// Largest-remainder apportionment of `target` units across groups of `sizes`
/// at rate `ratio`. Each group first gets one unit when it has room to spare
/// (so every city shows up in every split), and at least one item per group is
/// left for train whenever that is possible.
fn apportion(sizes: &[usize], ratio: f64, target: usize, taken: &[usize]) -> Vec<usize> {
    let cap: Vec<usize> = (0..sizes.len()).map(|k| sizes[k].saturating_sub(taken[k] + 1)).collect();
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * ratio).collect();
    let mut quota: Vec<usize> = (0..sizes.len()).map(|k| (exact[k].floor() as usize).min(cap[k])).collect();
    for k in 0..sizes.len() {
        if quota[k] == 0 && cap[k] > 0 {
            quota[k] = 1;
        }
    }
    let mut assigned: usize = quota.iter().sum();
    // Over target: trim from the groups furthest above their exact share, keeping the minimum of one
    // unless the target is smaller than the number of groups.
    while assigned > target {
        let floor = if quota.iter().any(|&q| q > 1) { 1 } else { 0 };
        let Some(k) = (0..sizes.len())
            .filter(|&k| quota[k] > floor)
            .max_by(|&a, &b| (quota[a] as f64 - exact[a]).total_cmp(&(quota[b] as f64 - exact[b])).then(b.cmp(&a)))
        else {
            break;
        };
        quota[k] -= 1;
        assigned -= 1;
    }
    // Under target: hand out by largest remainder, then anywhere with room.
    while assigned < target {
        let Some(k) = (0..sizes.len())
            .filter(|&k| quota[k] < cap[k])
            .max_by(|&a, &b| (exact[a] - quota[a] as f64).total_cmp(&(exact[b] - quota[b] as f64)).then(b.cmp(&a)))
        else {
            break;
        };
        quota[k] += 1;
        assigned += 1;
    }
    // Tiny inputs may need the train reserve too.
    while assigned < target {
        let Some(k) = (0..sizes.len()).find(|&k| quota[k] + taken[k] < sizes[k]) else {
            break;
        };
        quota[k] += 1;
        assigned += 1;
    }
    quota
}

/// Partition by city membership.
pub fn split_city_wise(pairs: &[QaPair], lists: &CityLists) -> Result<SplitAssignment, SplitError> {
    let mut which: BTreeMap<&str, usize> = BTreeMap::new();
    for (k, list) in [&lists.train, &lists.val, &lists.test].into_iter().enumerate() {
        for c in list {
            if which.insert(c.as_str(), k).is_some() {
                return Err(SplitError::DuplicateCity(c.clone()));
            }
        }
    }
    let mut out = SplitAssignment {
        mode: SplitMode::CityWise,
        params: SplitParams::Cities(lists.clone()),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for p in pairs {
        let dst = match which.get(p.city.as_str()) {
            Some(0) => &mut out.train,
            Some(1) => &mut out.val,
            Some(_) => &mut out.test,
            None => return Err(SplitError::UnassignedCity(p.city.clone())),
        };
        dst.push(p.qid.clone());
    }
    Ok(out)
}

pub fn write_split_manifest<W: Write>(s: &SplitAssignment, mut sink: W) -> Result<(), SplitError> {
    serde_json::to_writer_pretty(&mut sink, s).map_err(std::io::Error::from)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn read_split_manifest<R: Read>(source: R) -> Result<SplitAssignment, SplitError> {
    serde_json::from_reader(source).map_err(|e| SplitError::Format(e.to_string()))
}
