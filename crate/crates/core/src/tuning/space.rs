use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TuningError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    System,
    Stage,
}

/// How a continuous parameter maps onto the optimiser's unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    /// Geometric spacing; for ranges spanning orders of magnitude.
    Log,
}

impl Scale {
    fn is_linear(&self) -> bool {
        *self == Scale::Linear
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    Integer { min: i64, max: i64 },
    Continuous { min: f64, max: f64 },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Cat(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Int(v) => Some(*v as f64),
            Self::Float(v) => Some(*v),
            Self::Cat(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Self::Int(v) => Some(*v),
            Self::Float(v) if v.fract() == 0.0 => Some(*v as i64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Self::Cat(s) => Some(s),
            _ => None,
        }
    }
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Int(v) => write!(f, "{v}"),
            Self::Float(v) => write!(f, "{v}"),
            Self::Cat(s) => f.write_str(s),
        }
    }
}

/// One tunable knob. On disk:
/// `{"name", "type": integer|continuous|categorical, "range": [lo, hi] or
/// "choices": [...], "level": system|stage, "stage", "default"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor", into = "RawDescriptor")]
pub struct ParamDescriptor {
    pub name: String,
    pub kind: ParamKind,
    pub level: Level,
    pub stage: Option<String>,
    pub default: ParamValue,
    pub scale: Scale,
}

#[derive(Serialize, Deserialize)]
struct RawDescriptor {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage: Option<String>,
    default: ParamValue,
    #[serde(default, skip_serializing_if = "Scale::is_linear")]
    scale: Scale,
}

impl TryFrom<RawDescriptor> for ParamDescriptor {
    type Error = String;

    fn try_from(r: RawDescriptor) -> Result<Self, String> {
        let range = || r.range.ok_or_else(|| format!("{}: numeric parameter needs a range", r.name));
        let kind = match r.kind.as_str() {
            "integer" => {
                let [lo, hi] = range()?;
                if lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(format!("{}: integer range must be whole numbers", r.name));
                }
                ParamKind::Integer {
                    min: lo as i64,
                    max: hi as i64,
                }
            }
            "continuous" => {
                let [min, max] = range()?;
                ParamKind::Continuous { min, max }
            }
            "categorical" | "boolean" => ParamKind::Categorical {
                choices: r.choices.ok_or_else(|| format!("{}: categorical parameter needs choices", r.name))?,
            },
            other => return Err(format!("{}: unknown parameter type {other:?}", r.name)),
        };
        let default = match (&kind, r.default) {
            (ParamKind::Continuous { .. }, ParamValue::Int(v)) => ParamValue::Float(v as f64),
            (ParamKind::Integer { .. }, ParamValue::Float(v)) if v.fract() == 0.0 => ParamValue::Int(v as i64),
            (_, d) => d,
        };
        Ok(Self {
            name: r.name,
            kind,
            level: r.level,
            stage: r.stage,
            default,
            scale: r.scale,
        })
    }
}

impl From<ParamDescriptor> for RawDescriptor {
    fn from(p: ParamDescriptor) -> Self {
        let (kind, range, choices) = match p.kind {
            ParamKind::Integer { min, max } => ("integer", Some([min as f64, max as f64]), None),
            ParamKind::Continuous { min, max } => ("continuous", Some([min, max]), None),
            ParamKind::Categorical { choices } => ("categorical", None, Some(choices)),
        };
        Self {
            name: p.name,
            kind: kind.into(),
            range,
            choices,
            level: p.level,
            stage: p.stage,
            default: p.default,
            scale: p.scale,
        }
    }
}

impl ParamDescriptor {
    pub fn integer(name: &str, min: i64, max: i64, default: i64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Integer { min, max },
            level: Level::System,
            stage: None,
            default: ParamValue::Int(default),
            scale: Scale::Linear,
        }
    }

    pub fn continuous(name: &str, min: f64, max: f64, default: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Continuous { min, max },
            level: Level::System,
            stage: None,
            default: ParamValue::Float(default),
            scale: Scale::Linear,
        }
    }

    pub fn categorical(name: &str, choices: &[&str], default: &str) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Categorical {
                choices: choices.iter().map(|c| c.to_string()).collect(),
            },
            level: Level::System,
            stage: None,
            default: ParamValue::Cat(default.into()),
            scale: Scale::Linear,
        }
    }

    pub fn log_scale(mut self) -> Self {
        self.scale = Scale::Log;
        self
    }

    pub fn at_stage(mut self, stage: &str) -> Self {
        self.level = Level::Stage;
        self.stage = Some(stage.into());
        self
    }

    fn check(&self, v: &ParamValue) -> Result<(), String> {
        match (&self.kind, v) {
            (ParamKind::Integer { min, max }, v) => match v.as_i64() {
                Some(x) if (*min..=*max).contains(&x) => Ok(()),
                Some(x) => Err(format!("{x} outside [{min}, {max}]")),
                None => Err(format!("expected an integer, got {v}")),
            },
            (ParamKind::Continuous { min, max }, v) => match v.as_f64() {
                Some(x) if x >= *min && x <= *max => Ok(()),
                Some(x) => Err(format!("{x} outside [{min}, {max}]")),
                None => Err(format!("expected a number, got {v}")),
            },
            (ParamKind::Categorical { choices }, ParamValue::Cat(s)) if choices.contains(s) => Ok(()),
            (ParamKind::Categorical { choices }, v) => Err(format!("{v} not one of {choices:?}")),
        }
    }

    fn to_unit(&self, v: &ParamValue) -> f64 {
        match &self.kind {
            ParamKind::Integer { min, max } => (v.as_i64().unwrap() - min) as f64 / (max - min) as f64,
            ParamKind::Continuous { min, max } => {
                let x = v.as_f64().unwrap();
                match self.scale {
                    Scale::Linear => (x - min) / (max - min),
                    Scale::Log => (x / min).ln() / (max / min).ln(),
                }
            }
            ParamKind::Categorical { choices } => {
                let i = choices.iter().position(|c| Some(c.as_str()) == v.as_str()).unwrap();
                if choices.len() > 1 {
                    i as f64 / (choices.len() - 1) as f64
                } else {
                    0.0
                }
            }
        }
    }

    fn from_unit(&self, u: f64) -> ParamValue {
        let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
        match &self.kind {
            ParamKind::Integer { min, max } => ParamValue::Int(min + (u * (max - min) as f64).round() as i64),
            ParamKind::Continuous { min, max } => ParamValue::Float(match self.scale {
                Scale::Linear => min + u * (max - min),
                Scale::Log => (min * (max / min).powf(u)).clamp(*min, *max),
            }),
            ParamKind::Categorical { choices } => {
                let i = (u * (choices.len() - 1) as f64).round() as usize;
                ParamValue::Cat(choices[i].clone())
            }
        }
    }

    fn to_raw(&self, v: &ParamValue) -> f64 {
        match &self.kind {
            ParamKind::Categorical { choices } => choices.iter().position(|c| Some(c.as_str()) == v.as_str()).unwrap() as f64,
            _ => v.as_f64().unwrap(),
        }
    }

    fn from_raw(&self, x: f64) -> ParamValue {
        let x = if x.is_nan() { 0.0 } else { x };
        match &self.kind {
            ParamKind::Integer { min, max } => ParamValue::Int((x.round() as i64).clamp(*min, *max)),
            ParamKind::Continuous { min, max } => ParamValue::Float(x.clamp(*min, *max)),
            ParamKind::Categorical { choices } => {
                let i = (x.round().max(0.0) as usize).min(choices.len() - 1);
                ParamValue::Cat(choices[i].clone())
            }
        }
    }
}

/// Full assignment of parameter values, keyed by name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TuningPoint(pub BTreeMap<String, ParamValue>);

impl TuningPoint {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.0.get(name)
    }

    pub fn set(&mut self, name: &str, value: ParamValue) {
        self.0.insert(name.to_string(), value);
    }

    pub fn f64(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(ParamValue::as_f64)
    }

    pub fn i64(&self, name: &str) -> Option<i64> {
        self.get(name).and_then(ParamValue::as_i64)
    }

    pub fn str(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(ParamValue::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct ParameterSpace {
    pub parameters: Vec<ParamDescriptor>,
}

#[derive(Deserialize)]
struct RawSpace {
    parameters: Vec<ParamDescriptor>,
}

impl TryFrom<RawSpace> for ParameterSpace {
    type Error = String;

    fn try_from(r: RawSpace) -> Result<Self, String> {
        ParameterSpace::new(r.parameters).map_err(|e| e.to_string())
    }
}

impl ParameterSpace {
    pub fn new(parameters: Vec<ParamDescriptor>) -> Result<Self, TuningError> {
        let bad = |m: String| Err(TuningError::InvalidSpace(m));
        if parameters.is_empty() {
            return bad("no parameters".into());
        }
        let mut names = BTreeSet::new();
        for p in &parameters {
            if !names.insert(p.name.as_str()) {
                return bad(format!("duplicate parameter {:?}", p.name));
            }
            match &p.kind {
                ParamKind::Integer { min, max } if max <= min => {
                    return bad(format!("{}: integer range needs at least two values", p.name))
                }
                ParamKind::Continuous { min, max } if !(max > min) || !min.is_finite() || !max.is_finite() => {
                    return bad(format!("{}: empty continuous range", p.name))
                }
                ParamKind::Categorical { choices } if choices.is_empty() => {
                    return bad(format!("{}: no categories", p.name))
                }
                _ => {}
            }
            if p.scale == Scale::Log && !matches!(p.kind, ParamKind::Continuous { min, .. } if min > 0.0) {
                return bad(format!("{}: log scale needs a positive continuous range", p.name));
            }
            if p.level == Level::Stage && p.stage.is_none() {
                return bad(format!("{}: stage-level parameter without a stage", p.name));
            }
            if let Err(m) = p.check(&p.default) {
                return bad(format!("{}: default {m}", p.name));
            }
        }
        Ok(Self { parameters })
    }

    /// The search space used against the reference serving pipeline.
    pub fn reference() -> Self {
        Self::new(vec![
            ParamDescriptor::integer("user_batch", 10, 45, 30).at_stage("user"),
            ParamDescriptor::integer("item_extractor_batch", 2, 45, 4).at_stage("item_extract"),
            ParamDescriptor::integer("item_processor_batch", 2, 45, 6).at_stage("item_process"),
            ParamDescriptor::integer("cube_batch", 1, 20, 10).at_stage("cube"),
            ParamDescriptor::integer("dnn_batch", 10, 45, 15).at_stage("dnn"),
            ParamDescriptor::continuous("cube_cache_ratio_pct", 0.1, 5.0, 1.0).log_scale(),
            ParamDescriptor::continuous("query_cache_window_s", 60.0, 600.0, 120.0).log_scale(),
            ParamDescriptor::integer("arenas", 350, 700, 500),
            ParamDescriptor::integer("max_active_extent", 5, 40, 6),
            ParamDescriptor::categorical("huge_page", &["Default", "Always"], "Default"),
        ])
        .expect("reference space is valid")
    }

    pub fn load(path: &Path) -> Result<Self, TuningError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            parameters: &'a [ParamDescriptor],
        }
        serde_json::to_string_pretty(&Out {
            parameters: &self.parameters,
        })
        .expect("space serialises")
    }

    pub fn dim(&self) -> usize {
        self.parameters.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.parameters.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn descriptor(&self, name: &str) -> Option<&ParamDescriptor> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn defaults(&self) -> TuningPoint {
        TuningPoint(
            self.parameters
                .iter()
                .map(|p| (p.name.clone(), p.default.clone()))
                .collect(),
        )
    }

    /// Checks that `point` assigns every parameter an in-range value and
    /// names nothing else.
    pub fn validate(&self, point: &TuningPoint) -> Result<(), TuningError> {
        for p in &self.parameters {
            let v = point.get(&p.name).ok_or_else(|| TuningError::OutOfRange {
                name: p.name.clone(),
                message: "missing".into(),
            })?;
            p.check(v).map_err(|message| TuningError::OutOfRange {
                name: p.name.clone(),
                message,
            })?;
        }
        if let Some(extra) = point.0.keys().find(|k| self.descriptor(k).is_none()) {
            return Err(TuningError::OutOfRange {
                name: extra.clone(),
                message: "not in the parameter space".into(),
            });
        }
        Ok(())
    }

    /// Raw numeric vector: integers and reals as-is, categoricals by index.
    pub fn encode(&self, point: &TuningPoint) -> Result<Vec<f64>, TuningError> {
        self.validate(point)?;
        Ok(self.parameters.iter().map(|p| p.to_raw(&point.0[&p.name])).collect())
    }

    /// Inverse of [`encode`](Self::encode): integers round, categoricals take
    /// the nearest index, everything is clamped into range.
    pub fn decode(&self, x: &[f64]) -> TuningPoint {
        TuningPoint(
            self.parameters
                .iter()
                .zip(x)
                .map(|(p, &v)| (p.name.clone(), p.from_raw(v)))
                .collect(),
        )
    }

    /// Encoding into the unit box used by the optimiser.
    pub fn encode_unit(&self, point: &TuningPoint) -> Result<Vec<f64>, TuningError> {
        self.validate(point)?;
        Ok(self.parameters.iter().map(|p| p.to_unit(&point.0[&p.name])).collect())
    }

    pub fn decode_unit(&self, u: &[f64]) -> TuningPoint {
        TuningPoint(
            self.parameters
                .iter()
                .zip(u)
                .map(|(p, &v)| (p.name.clone(), p.from_unit(v)))
                .collect(),
        )
    }

    /// Parameters owned by `stage` plus every system-level parameter.
    pub fn relevant_to(&self, stage: &str) -> Vec<&ParamDescriptor> {
        self.parameters
            .iter()
            .filter(|p| p.level == Level::System || p.stage.as_deref() == Some(stage))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_defaults_valid_and_file_round_trips() {
        let s = ParameterSpace::reference();
        s.validate(&s.defaults()).unwrap();
        let back: ParameterSpace = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(ParameterSpace::new(vec![ParamDescriptor::integer("a", 3, 3, 3)]).is_err());
        assert!(ParameterSpace::new(vec![ParamDescriptor::integer("a", 1, 3, 9)]).is_err());
        let mut p = ParamDescriptor::integer("a", 1, 3, 2);
        p.level = Level::Stage;
        assert!(ParameterSpace::new(vec![p]).is_err());
    }

    #[test]
    fn out_of_range_point_rejected() {
        let s = ParameterSpace::reference();
        let mut p = s.defaults();
        p.set("cube_batch", ParamValue::Int(21));
        assert!(matches!(s.validate(&p), Err(TuningError::OutOfRange { .. })));
    }
}
