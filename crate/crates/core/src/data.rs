//! Synthetic group-structured data, CSV ingestion, and group bookkeeping.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A `(label, attribute)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub y: usize,
    pub a: usize,
}

impl Group {
    pub fn new(y: usize, a: usize) -> Self {
        Group { y, a }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(y={}, a={})", self.y, self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupFraction {
    pub y: usize,
    pub a: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub classes: usize,
    pub attributes: usize,
    /// Unlisted groups get fraction 0.
    pub group_fractions: Vec<GroupFraction>,
    pub total_count: usize,
}

impl GroupSpec {
    /// Equal mass on every group.
    pub fn balanced(classes: usize, attributes: usize, total_count: usize) -> Self {
        let f = 1.0 / (classes * attributes) as f64;
        GroupSpec {
            classes,
            attributes,
            group_fractions: all_groups(classes, attributes)
                .map(|g| GroupFraction {
                    y: g.y,
                    a: g.a,
                    fraction: f,
                })
                .collect(),
            total_count,
        }
    }

    /// The 2x2 CelebA group proportions.
    pub fn celeba_like(total_count: usize) -> Self {
        let gf = |y, a, fraction| GroupFraction { y, a, fraction };
        GroupSpec {
            classes: 2,
            attributes: 2,
            group_fractions: vec![
                gf(0, 0, 0.440),
                gf(0, 1, 0.409),
                gf(1, 0, 0.142),
                gf(1, 1, 0.009),
            ],
            total_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.attributes == 0 {
            return Err(Error::Config("classes and attributes must be >= 1".into()));
        }
        let mut seen = BTreeMap::new();
        for gf in &self.group_fractions {
            if gf.y >= self.classes || gf.a >= self.attributes {
                return Err(Error::Config(format!(
                    "group (y={}, a={}) outside {}x{} grid",
                    gf.y, gf.a, self.classes, self.attributes
                )));
            }
            if !(gf.fraction >= 0.0 && gf.fraction.is_finite()) {
                return Err(Error::Config(format!(
                    "fraction for (y={}, a={}) must be >= 0",
                    gf.y, gf.a
                )));
            }
            if seen.insert(Group::new(gf.y, gf.a), ()).is_some() {
                return Err(Error::Config(format!(
                    "group (y={}, a={}) listed twice",
                    gf.y, gf.a
                )));
            }
        }
        let total: f64 = self.group_fractions.iter().map(|g| g.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "group fractions sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    fn fraction(&self, g: Group) -> f64 {
        self.group_fractions
            .iter()
            .find(|f| f.y == g.y && f.a == g.a)
            .map_or(0.0, |f| f.fraction)
    }

    /// Exact per-group counts by largest-remainder apportionment.
    pub fn counts(&self) -> Result<BTreeMap<Group, usize>> {
        self.validate()?;
        let groups: Vec<Group> = all_groups(self.classes, self.attributes).collect();
        let n = self.total_count as f64;
        let quotas: Vec<f64> = groups.iter().map(|&g| self.fraction(g) * n).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..groups.len()).collect();
        // stable sort keeps canonical group order among equal remainders
        order.sort_by(|&i, &j| {
            let ri = quotas[i] - quotas[i].floor();
            let rj = quotas[j] - quotas[j].floor();
            rj.total_cmp(&ri)
        });
        for &i in order.iter().take(self.total_count.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        Ok(groups.into_iter().zip(counts).collect())
    }
}

fn all_groups(classes: usize, attributes: usize) -> impl Iterator<Item = Group> {
    (0..classes).flat_map(move |y| (0..attributes).map(move |a| Group::new(y, a)))
}

/// Gaussian block design: a class-driven core block, an attribute-driven
/// spurious block, and a pure noise block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Train split proportions and size.
    pub group_spec: GroupSpec,
    pub core_dim: usize,
    pub spurious_dim: usize,
    pub noise_dim: usize,
    pub core_separation: f64,
    pub spurious_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Group-balanced validation size.
    pub val_count: usize,
    /// Group-balanced test size.
    pub test_count: usize,
}

impl SyntheticSpec {
    pub fn feature_dim(&self) -> usize {
        self.core_dim + self.spurious_dim + self.noise_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.group_spec.validate()?;
        if self.feature_dim() == 0 {
            return Err(Error::Config("feature vector would be empty".into()));
        }
        if !(self.core_separation >= 0.0 && self.spurious_separation >= 0.0) {
            return Err(Error::Config("separations must be >= 0".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be > 0".into()));
        }
        Ok(())
    }

    fn split_spec(&self, split: Split) -> GroupSpec {
        let gs = &self.group_spec;
        match split {
            Split::Train => gs.clone(),
            Split::Val => GroupSpec::balanced(gs.classes, gs.attributes, self.val_count),
            Split::Test => GroupSpec::balanced(gs.classes, gs.attributes, self.test_count),
        }
    }

    /// Mean of feature `d` for an example of group `g`.
    fn mean(&self, d: usize, g: Group) -> f64 {
        let signed = |sep: f64, idx: usize, value: usize, n: usize| {
            if idx % n == value {
                sep
            } else {
                -sep
            }
        };
        if d < self.core_dim {
            signed(self.core_separation, d, g.y, self.group_spec.classes)
        } else if d < self.core_dim + self.spurious_dim {
            signed(
                self.spurious_separation,
                d - self.core_dim,
                g.a,
                self.group_spec.attributes,
            )
        } else {
            0.0
        }
    }

    fn generate_split(&self, split: Split) -> Result<GroupedDataset> {
        let spec = self.split_spec(split);
        let counts = spec.counts()?;
        if let Some((g, _)) = counts.iter().find(|(_, &c)| c == 0) {
            return Err(Error::Config(format!(
                "{} split leaves group {g} empty; raise its count or fraction",
                split.as_str()
            )));
        }
        let mut rng = seed::rng(seed::subseed(self.seed, split.as_str()));
        let mut labels: Vec<Group> = counts
            .iter()
            .flat_map(|(&g, &c)| std::iter::repeat_n(g, c))
            .collect();
        labels.shuffle(&mut rng);
        let dim = self.feature_dim();
        let examples = labels
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let features = (0..dim)
                    .map(|d| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.mean(d, g) + self.noise_std * z
                    })
                    .collect();
                GroupedExample {
                    id: id as u64,
                    y: g.y,
                    a: g.a,
                    features,
                }
            })
            .collect();
        GroupedDataset::new(split, spec.classes, spec.attributes, examples)
    }

    /// Train split with the configured proportions; val and test group-balanced.
    pub fn generate(&self) -> Result<(GroupedDataset, GroupedDataset, GroupedDataset)> {
        self.validate()?;
        Ok((
            self.generate_split(Split::Train)?,
            self.generate_split(Split::Val)?,
            self.generate_split(Split::Test)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedExample {
    /// Position in the canonical ordering of its split.
    pub id: u64,
    pub y: usize,
    pub a: usize,
    pub features: Vec<f64>,
}

impl GroupedExample {
    pub fn group(&self) -> Group {
        Group::new(self.y, self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    split: Split,
    classes: usize,
    attributes: usize,
    feature_dim: usize,
    examples: Vec<GroupedExample>,
    group_index: BTreeMap<Group, Vec<usize>>,
}

impl GroupedDataset {
    /// Examples must carry ids `0..N` in order.
    pub fn new(
        split: Split,
        classes: usize,
        attributes: usize,
        examples: Vec<GroupedExample>,
    ) -> Result<Self> {
        let feature_dim = examples.first().map_or(0, |e| e.features.len());
        let mut group_index: BTreeMap<Group, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            if e.id != i as u64 {
                return Err(Error::Config(format!(
                    "example at position {i} has id {}; ids must be 0..N in order",
                    e.id
                )));
            }
            if e.y >= classes || e.a >= attributes {
                return Err(Error::Config(format!(
                    "example {} has group {} outside {classes}x{attributes}",
                    e.id,
                    e.group()
                )));
            }
            if e.features.len() != feature_dim {
                return Err(Error::Dimension {
                    context: "example features",
                    expected: feature_dim,
                    actual: e.features.len(),
                });
            }
            group_index.entry(e.group()).or_default().push(i);
        }
        Ok(GroupedDataset {
            split,
            classes,
            attributes,
            feature_dim,
            examples,
            group_index,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn examples(&self) -> &[GroupedExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&GroupedExample> {
        self.examples.get(id as usize)
    }

    /// Positions of each nonempty group's examples.
    pub fn group_index(&self) -> &BTreeMap<Group, Vec<usize>> {
        &self.group_index
    }

    /// Every group of the `classes x attributes` grid, empty or not.
    pub fn all_groups(&self) -> impl Iterator<Item = Group> {
        all_groups(self.classes, self.attributes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for e in &self.examples {
            counts[e.y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group_y: usize,
    pub group_a: usize,
    pub count: usize,
    pub fraction: f64,
}

/// Count and fraction of every nonempty group.
pub fn group_stats(ds: &GroupedDataset) -> Vec<GroupStat> {
    let n = ds.len() as f64;
    ds.group_index()
        .iter()
        .map(|(g, idx)| GroupStat {
            group_y: g.y,
            group_a: g.a,
            count: idx.len(),
            fraction: idx.len() as f64 / n,
        })
        .collect()
}

pub fn write_group_stats(stats: &[GroupStat], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &GroupedDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "y".into(), "a".into()];
    header.extend((0..ds.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for e in ds.examples() {
        let mut row = vec![e.id.to_string(), e.y.to_string(), e.a.to_string()];
        row.extend(e.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset written as `id,y,a,f0..f{d-1}`. Rows may come in any
/// order but ids must cover `0..N` exactly once. Class and attribute
/// counts are taken as one past the largest value seen.
pub fn load_csv(path: &Path, split: Split) -> Result<GroupedDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    for (i, want) in ["id", "y", "a"].iter().enumerate() {
        if header.get(i).map(str::trim) != Some(want) {
            return Err(parse_err(
                1,
                format!("missing column '{want}' at position {i}"),
            ));
        }
    }
    let dim = header.len() - 3;
    for i in 0..dim {
        let want = format!("f{i}");
        if header.get(i + 3).map(str::trim) != Some(want.as_str()) {
            return Err(parse_err(1, format!("missing column '{want}'")));
        }
    }

    let mut rows: BTreeMap<u64, GroupedExample> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let int = |i: usize, name: &str| -> Result<u64> {
            rec[i]
                .trim()
                .parse::<u64>()
                .map_err(|_| parse_err(line, format!("{name} '{}' is not an integer", &rec[i])))
        };
        let id = int(0, "id")?;
        let y = int(1, "y")? as usize;
        let a = int(2, "a")? as usize;
        let features = (0..dim)
            .map(|i| {
                let v = rec[i + 3].trim().parse::<f64>().map_err(|_| {
                    parse_err(line, format!("f{i} '{}' is not numeric", &rec[i + 3]))
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("f{i} is not finite")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if rows
            .insert(id, GroupedExample { id, y, a, features })
            .is_some()
        {
            return Err(parse_err(line, format!("duplicate id {id}")));
        }
    }
    if let Some((pos, (&id, _))) = rows
        .iter()
        .enumerate()
        .find(|(i, (&id, _))| id != *i as u64)
    {
        return Err(parse_err(
            0,
            format!("ids are not dense: expected {pos}, found {id}"),
        ));
    }
    let examples: Vec<GroupedExample> = rows.into_values().collect();
    let classes = examples.iter().map(|e| e.y + 1).max().unwrap_or(0);
    let attributes = examples.iter().map(|e| e.a + 1).max().unwrap_or(0);
    GroupedDataset::new(split, classes, attributes, examples)
}
