//! Table arithmetic over measured design points: mAP aggregation, Pareto
//! fronts over (mAP, GMAdd), speedup ratios and Amdahl projections.
//!
//! All arithmetic is exact; values are rounded only when displayed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{self, serde_exact, serde_exact_opt, Exact};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("{point}: no AP entry for {class} {difficulty}")]
    MissingEntry { point: String, class: Class, difficulty: Difficulty },
    #[error("{point}: no {metric} value")]
    MissingMetric { point: String, metric: Metric },
    #[error("unknown design point '{0}'")]
    UnknownPoint(String),
    #[error("unknown stage '{0}'")]
    UnknownStage(String),
    #[error("{0}")]
    DomainError(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Class {
    Car,
    Pedestrian,
    Cyclist,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Car, Class::Pedestrian, Class::Cyclist];
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    #[serde(alias = "Mod")]
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Which AP entries an mAP value averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    AllClasses,
    OneClass(Class),
}

impl Scope {
    pub const ALL: [Scope; 4] = [
        Scope::AllClasses,
        Scope::OneClass(Class::Car),
        Scope::OneClass(Class::Pedestrian),
        Scope::OneClass(Class::Cyclist),
    ];

    pub const fn label(self) -> &'static str {
        match self {
            Scope::AllClasses => "overall",
            Scope::OneClass(Class::Car) => "car",
            Scope::OneClass(Class::Pedestrian) => "pedestrian",
            Scope::OneClass(Class::Cyclist) => "cyclist",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Scope::AllClasses);
        }
        Scope::ALL
            .into_iter()
            .find(|sc| sc.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scope '{s}' (expected overall, car, pedestrian or cyclist)"))
    }
}

/// AP percentages of one class at the three difficulty levels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApRow {
    #[serde(rename = "Easy", default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub easy: Option<Exact>,
    #[serde(
        rename = "Mod",
        alias = "Moderate",
        default,
        with = "serde_exact_opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub moderate: Option<Exact>,
    #[serde(rename = "Hard", default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub hard: Option<Exact>,
}

impl ApRow {
    pub fn get(&self, d: Difficulty) -> Option<&Exact> {
        match d {
            Difficulty::Easy => self.easy.as_ref(),
            Difficulty::Moderate => self.moderate.as_ref(),
            Difficulty::Hard => self.hard.as_ref(),
        }
    }
}

/// Values as printed in the source tables, kept for cross-checking.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Printed {
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub overall: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub car: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub pedestrian: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub cyclist: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub madd_su: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub fps_backbone_su: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub fps_su: Option<Exact>,
}

impl Printed {
    pub fn map(&self, scope: Scope) -> Option<&Exact> {
        match scope {
            Scope::AllClasses => self.overall.as_ref(),
            Scope::OneClass(Class::Car) => self.car.as_ref(),
            Scope::OneClass(Class::Pedestrian) => self.pedestrian.as_ref(),
            Scope::OneClass(Class::Cyclist) => self.cyclist.as_ref(),
        }
    }

    pub fn ratio(&self, metric: Metric) -> Option<&Exact> {
        match metric {
            Metric::Gmadds => self.madd_su.as_ref(),
            Metric::FpsBackbone => self.fps_backbone_su.as_ref(),
            Metric::FpsTotal => self.fps_su.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignPoint {
    pub name: String,
    #[serde(with = "serde_exact")]
    pub gmadds: Exact,
    #[serde(default)]
    pub ap: BTreeMap<Class, ApRow>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub fps_backbone: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub fps_total: Option<Exact>,
    #[serde(default, with = "serde_exact_opt", skip_serializing_if = "Option::is_none")]
    pub params_m: Option<Exact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub printed: Option<Printed>,
}

impl DesignPoint {
    /// A point with every AP entry set to `ap`.
    pub fn uniform(name: impl Into<String>, gmadds: Exact, ap: Exact) -> Self {
        let row = ApRow { easy: Some(ap.clone()), moderate: Some(ap.clone()), hard: Some(ap) };
        DesignPoint {
            name: name.into(),
            gmadds,
            ap: Class::ALL.into_iter().map(|c| (c, row.clone())).collect(),
            fps_backbone: None,
            fps_total: None,
            params_m: None,
            printed: None,
        }
    }

    pub fn ap(&self, class: Class, difficulty: Difficulty) -> Result<&Exact, AnalysisError> {
        self.ap.get(&class).and_then(|r| r.get(difficulty)).ok_or_else(|| AnalysisError::MissingEntry {
            point: self.name.clone(),
            class,
            difficulty,
        })
    }

    pub fn metric(&self, metric: Metric) -> Result<&Exact, AnalysisError> {
        let v = match metric {
            Metric::Gmadds => Some(&self.gmadds),
            Metric::FpsBackbone => self.fps_backbone.as_ref(),
            Metric::FpsTotal => self.fps_total.as_ref(),
        };
        v.ok_or_else(|| AnalysisError::MissingMetric { point: self.name.clone(), metric })
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::InvalidData(format!("{}: {m}", self.name)));
        if self.name.trim().is_empty() {
            return Err(AnalysisError::InvalidData("design point with empty name".into()));
        }
        if !exact::is_positive(&self.gmadds) {
            return bad("gmadds must be positive".into());
        }
        let hundred = exact::int(100);
        for (class, row) in &self.ap {
            for d in Difficulty::ALL {
                if let Some(v) = row.get(d) {
                    if *v < exact::zero() || *v > hundred {
                        return bad(format!("{class} {d} AP {} outside [0, 100]", exact::to_text(v)));
                    }
                }
            }
        }
        for (what, v) in [("fps_backbone", &self.fps_backbone), ("fps_total", &self.fps_total)] {
            if v.as_ref().is_some_and(|v| !exact::is_positive(v)) {
                return bad(format!("{what} must be positive"));
            }
        }
        Ok(())
    }
}

/// A set of design points with a designated reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    #[serde(default = "default_base")]
    pub base: String,
    pub points: Vec<DesignPoint>,
}

fn default_base() -> String {
    "base".to_string()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DatasetDoc {
    Full(Dataset),
    Bare(Vec<DesignPoint>),
}

impl Dataset {
    /// Reads either a full document or a bare array of points.
    pub fn from_json(text: &str) -> Result<Self, AnalysisError> {
        let doc: DatasetDoc = serde_json::from_str(text).map_err(|e| {
            // untagged enums hide the inner message; retry for a useful one
            let inner = serde_json::from_str::<Dataset>(text).err().unwrap_or(e);
            AnalysisError::InvalidData(inner.to_string())
        })?;
        let ds = match doc {
            DatasetDoc::Full(d) => d,
            DatasetDoc::Bare(points) => Dataset { provenance: None, base: default_base(), points },
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("datasets always serialize")
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.points.is_empty() {
            return Err(AnalysisError::InvalidData("no design points".into()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.points {
            p.validate()?;
            if !seen.insert(p.name.as_str()) {
                return Err(AnalysisError::InvalidData(format!("duplicate design point '{}'", p.name)));
            }
        }
        Ok(())
    }

    pub fn point(&self, name: &str) -> Result<&DesignPoint, AnalysisError> {
        self.points.iter().find(|p| p.name == name).ok_or_else(|| AnalysisError::UnknownPoint(name.to_string()))
    }
}

/// The KITTI validation results shipped in `data/kitti_val.json`.
pub fn bundled_dataset() -> Dataset {
    Dataset::from_json(include_str!("../../../data/kitti_val.json")).expect("bundled dataset is valid")
}

/// Mean AP over the difficulties of one class, or over all nine entries.
pub fn map_of(point: &DesignPoint, scope: Scope) -> Result<Exact, AnalysisError> {
    let classes: &[Class] = match scope {
        Scope::AllClasses => &Class::ALL,
        Scope::OneClass(c) => match c {
            Class::Car => &[Class::Car],
            Class::Pedestrian => &[Class::Pedestrian],
            Class::Cyclist => &[Class::Cyclist],
        },
    };
    let mut sum = exact::zero();
    for &c in classes {
        for d in Difficulty::ALL {
            sum += point.ap(c, d)?;
        }
    }
    Ok(sum / exact::from_u64(3 * classes.len() as u64))
}

/// `a` weakly dominates `b`: no worse on both axes, strictly better on one.
fn dominates(a: (&Exact, &Exact), b: (&Exact, &Exact)) -> bool {
    let (ga, ma) = a;
    let (gb, mb) = b;
    ga <= gb && ma >= mb && (ga < gb || ma > mb)
}

/// Names of the non-dominated points under (minimize GMAdd, maximize mAP),
/// ordered by ascending GMAdd, then name.
pub fn pareto_front(points: &[DesignPoint], scope: Scope) -> Result<Vec<String>, AnalysisError> {
    let maps = points.iter().map(|p| map_of(p, scope)).collect::<Result<Vec<_>, _>>()?;
    let mut front: Vec<(&Exact, &str)> = points
        .iter()
        .zip(&maps)
        .filter(|&(p, m)| !points.iter().zip(&maps).any(|(q, mq)| dominates((&q.gmadds, mq), (&p.gmadds, m))))
        .map(|(p, _)| (&p.gmadds, p.name.as_str()))
        .collect();
    front.sort();
    front.dedup();
    Ok(front.into_iter().map(|(_, n)| n.to_string()).collect())
}

/// Speedup applied to one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Speedup {
    Finite(Exact),
    Infinite,
}

impl FromStr for Speedup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if ["inf", "infinity", "∞"].iter().any(|w| t.eq_ignore_ascii_case(w)) {
            return Ok(Speedup::Infinite);
        }
        match exact::parse_decimal(t) {
            Some(v) if exact::is_positive(&v) => Ok(Speedup::Finite(v)),
            _ => Err(format!("speedup '{s}' must be a positive number or 'inf'")),
        }
    }
}

fn check_fraction(p: &Exact) -> Result<(), AnalysisError> {
    if *p <= exact::zero() || *p >= exact::one() {
        return Err(AnalysisError::DomainError(format!("fraction {} outside (0, 1)", exact::to_text(p))));
    }
    Ok(())
}

/// Whole-pipeline speedup when a stage taking fraction `p` of the time
/// vanishes: `1 / (1 - p)`.
pub fn amdahl_max(p: &Exact) -> Result<Exact, AnalysisError> {
    check_fraction(p)?;
    Ok((exact::one() - p).recip())
}

/// Whole-pipeline speedup when a stage taking fraction `p` runs `s` times
/// faster: `1 / ((1 - p) + p / s)`.
pub fn amdahl(p: &Exact, s: &Speedup) -> Result<Exact, AnalysisError> {
    check_fraction(p)?;
    match s {
        Speedup::Infinite => amdahl_max(p),
        Speedup::Finite(s) => {
            if !exact::is_positive(s) {
                return Err(AnalysisError::DomainError("speedup must be positive".into()));
            }
            Ok((exact::one() - p + p / s).recip())
        }
    }
}

/// Measured share of processing time per pipeline stage. Fractions need not
/// sum to one; the remainder is treated as unprofiled and never accelerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(deserialize_with = "de_fraction_map", serialize_with = "ser_fraction_map")]
    pub stage_fractions: BTreeMap<String, Exact>,
    #[serde(with = "serde_exact")]
    pub base_latency_ms: Exact,
}

fn de_fraction_map<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Exact>, D::Error> {
    #[derive(Deserialize)]
    struct Wrapped(#[serde(with = "serde_exact")] Exact);
    let raw: BTreeMap<String, Wrapped> = BTreeMap::deserialize(d)?;
    Ok(raw.into_iter().map(|(k, Wrapped(v))| (k, v)).collect())
}

fn ser_fraction_map<S: serde::Serializer>(m: &BTreeMap<String, Exact>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &exact::to_text(v))?;
    }
    map.end()
}

impl TimingProfile {
    pub fn new(stage_fractions: BTreeMap<String, Exact>, base_latency_ms: Exact) -> Result<Self, AnalysisError> {
        let p = TimingProfile { description: None, stage_fractions, base_latency_ms };
        p.validate()?;
        Ok(p)
    }

    pub fn from_json(text: &str) -> Result<Self, AnalysisError> {
        let p: TimingProfile = serde_json::from_str(text).map_err(|e| AnalysisError::InvalidData(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !exact::is_positive(&self.base_latency_ms) {
            return Err(AnalysisError::InvalidData("base_latency_ms must be positive".into()));
        }
        let mut sum = exact::zero();
        for (stage, f) in &self.stage_fractions {
            if !exact::is_positive(f) || *f > exact::one() {
                return Err(AnalysisError::InvalidData(format!("stage '{stage}' fraction outside (0, 1]")));
            }
            sum += f;
        }
        if sum > exact::one() {
            return Err(AnalysisError::InvalidData(format!("stage fractions sum to {} > 1", exact::to_text(&sum))));
        }
        Ok(())
    }

    pub fn base_fps(&self) -> Exact {
        exact::int(1000) / &self.base_latency_ms
    }

    /// Relative frame time after applying `speedups`; 1 when nothing changes.
    pub fn scaled_time(&self, speedups: &BTreeMap<String, Speedup>) -> Result<Exact, AnalysisError> {
        if let Some(stage) = speedups.keys().find(|s| !self.stage_fractions.contains_key(*s)) {
            return Err(AnalysisError::UnknownStage(stage.clone()));
        }
        let profiled: Exact = self.stage_fractions.values().sum();
        let mut total = exact::one() - profiled;
        for (stage, f) in &self.stage_fractions {
            match speedups.get(stage) {
                None => total += f,
                Some(Speedup::Infinite) => {}
                Some(Speedup::Finite(s)) => {
                    if !exact::is_positive(s) {
                        return Err(AnalysisError::DomainError(format!("speedup for '{stage}' must be positive")));
                    }
                    total += f / s;
                }
            }
        }
        Ok(total)
    }

    pub fn pipeline_speedup(&self, speedups: &BTreeMap<String, Speedup>) -> Result<Exact, AnalysisError> {
        let t = self.scaled_time(speedups)?;
        if t.is_zero() {
            return Err(AnalysisError::DomainError("every stage removed: unbounded speedup".into()));
        }
        Ok(t.recip())
    }
}

/// Frames per second after applying per-stage speedups to `profile`.
pub fn project_fps(profile: &TimingProfile, speedups: &BTreeMap<String, Speedup>) -> Result<Exact, AnalysisError> {
    Ok(profile.base_fps() * profile.pipeline_speedup(speedups)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Gmadds,
    FpsBackbone,
    FpsTotal,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Gmadds, Metric::FpsBackbone, Metric::FpsTotal];

    pub const fn label(self) -> &'static str {
        match self {
            Metric::Gmadds => "gmadds",
            Metric::FpsBackbone => "fps_backbone",
            Metric::FpsTotal => "fps_total",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gmadds" | "madd" | "madds" => Ok(Metric::Gmadds),
            "fps_backbone" | "fps_b" => Ok(Metric::FpsBackbone),
            "fps_total" | "fps" => Ok(Metric::FpsTotal),
            _ => Err(format!("unknown metric '{s}' (expected gmadds, fps_backbone or fps_total)")),
        }
    }
}

/// Speedup of every point relative to `base_name`, in input order: base/x
/// for GMAdd, x/base for the fps metrics.
pub fn ratio_table(
    points: &[DesignPoint],
    metric: Metric,
    base_name: &str,
) -> Result<Vec<(String, Exact)>, AnalysisError> {
    let base = points
        .iter()
        .find(|p| p.name == base_name)
        .ok_or_else(|| AnalysisError::UnknownPoint(base_name.to_string()))?
        .metric(metric)?;
    points
        .iter()
        .map(|p| {
            let x = p.metric(metric)?;
            let r = match metric {
                Metric::Gmadds => base / x,
                Metric::FpsBackbone | Metric::FpsTotal => x / base,
            };
            Ok((p.name.clone(), r))
        })
        .collect()
}

/// Convenience for building speedup maps.
pub fn speedups<'a>(items: impl IntoIterator<Item = (&'a str, Speedup)>) -> BTreeMap<String, Speedup> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
