//! Declarative environment descriptions, as stored in run configs or passed
//! on the command line.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Example, Vocabulary};

use super::classifier::{TinyClassifierConfig, TinyClassifierEnv};
use super::remote::{RemoteConfig, RemoteEnv, RemoteTask};
use super::stub::StubBackend;
use super::synthetic::SyntheticOracleEnv;
use super::tst::{TstSimConfig, TstSimEnv};
use super::Environment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Synthetic(SyntheticSpec),
    TinyClassifier(TinyClassifierSpec),
    TstSim(TstSimSpec),
    Remote(RemoteSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub prompt_length: usize,
    /// One input per multiplier.
    pub difficulty: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            prompt_length: 5,
            difficulty: vec![0.5, 1.0, 2.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyClassifierSpec {
    pub name: Option<String>,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub classifier: TinyClassifierConfig,
    /// Training examples per class.
    pub train_counts: Vec<usize>,
    pub validation_counts: Vec<usize>,
    /// Content words per input.
    pub words: usize,
    pub data_seed: u64,
}

impl Default for TinyClassifierSpec {
    fn default() -> Self {
        Self {
            name: None,
            vocab_size: 20,
            num_classes: 2,
            classifier: TinyClassifierConfig::default(),
            train_counts: vec![16, 16],
            validation_counts: vec![16, 16],
            words: 6,
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TstSimSpec {
    pub vocab_size: usize,
    pub simulator: TstSimConfig,
    pub train: usize,
    pub validation: usize,
    pub style_target: usize,
    pub data_seed: u64,
}

impl Default for TstSimSpec {
    fn default() -> Self {
        Self {
            vocab_size: 30,
            simulator: TstSimConfig::default(),
            train: 16,
            validation: 16,
            style_target: 1,
            data_seed: 0,
        }
    }
}

/// A remote endpoint. Without explicit vocabulary and data the values of
/// the built-in stub server (`StubBackend::desk(0)`) are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSpec {
    pub config: RemoteConfig,
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    #[serde(default)]
    pub train: Option<Vec<Example>>,
    #[serde(default)]
    pub validation: Option<Vec<Example>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

pub struct BuiltEnv {
    pub env: Box<dyn Environment>,
    pub data: TaskData,
}

impl std::fmt::Debug for BuiltEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BuiltEnv")
            .field("env", &self.env.name())
            .field("data", &self.data)
            .finish()
    }
}

fn stub_defaults() -> Result<(Vocabulary, TaskData)> {
    let backend = StubBackend::desk(0)?;
    let c = backend.classifier();
    Ok((
        c.vocab().clone(),
        TaskData {
            train: c.dataset(&[16, 16], 6, 0)?,
            validation: c.dataset(&[16, 16], 6, 1)?,
        },
    ))
}

impl EnvSpec {
    pub fn build(&self) -> Result<BuiltEnv> {
        match self {
            EnvSpec::Synthetic(s) => {
                let (env, examples) = SyntheticOracleEnv::generate(s.vocab_size, s.prompt_length, &s.difficulty, s.seed)?;
                Ok(BuiltEnv {
                    env: Box::new(env),
                    data: TaskData {
                        train: examples.clone(),
                        validation: examples,
                    },
                })
            }
            EnvSpec::TinyClassifier(s) => {
                let mut env = TinyClassifierEnv::generate(s.vocab_size, s.num_classes, s.classifier.clone())?;
                if let Some(name) = &s.name {
                    env = env.with_name(name.clone());
                }
                let data = TaskData {
                    train: env.dataset(&s.train_counts, s.words, s.data_seed)?,
                    validation: env.dataset(&s.validation_counts, s.words, s.data_seed.wrapping_add(1))?,
                };
                Ok(BuiltEnv { env: Box::new(env), data })
            }
            EnvSpec::TstSim(s) => {
                let env = TstSimEnv::generate(s.vocab_size, s.simulator.clone())?;
                if s.style_target >= env.num_styles() {
                    return Err(Error::InvalidConfig(format!("style_target {} out of range", s.style_target)));
                }
                let data = TaskData {
                    train: env.dataset(s.train, s.style_target, s.data_seed),
                    validation: env.dataset(s.validation, s.style_target, s.data_seed.wrapping_add(1)),
                };
                Ok(BuiltEnv { env: Box::new(env), data })
            }
            EnvSpec::Remote(s) => {
                let needs_defaults = s.vocab.is_none() || s.train.is_none() || s.validation.is_none();
                let defaults = if needs_defaults { Some(stub_defaults()?) } else { None };
                let vocab = match &s.vocab {
                    Some(v) => Vocabulary::new(v.iter().cloned())?,
                    None => defaults.as_ref().expect("computed").0.clone(),
                };
                let pick = |own: &Option<Vec<Example>>, f: fn(&TaskData) -> &Vec<Example>| match own {
                    Some(v) => v.clone(),
                    None => f(&defaults.as_ref().expect("computed").1).clone(),
                };
                let data = TaskData {
                    train: pick(&s.train, |d| &d.train),
                    validation: pick(&s.validation, |d| &d.validation),
                };
                let env = RemoteEnv::connect(s.config.clone(), vocab)?;
                Ok(BuiltEnv { env: Box::new(env), data })
            }
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key}={value}")))
}

/// Parses `kind:key=value,...`, `remote:URL`, or a JSON object.
///
/// Keys: `synthetic` takes `vocab`, `length`, `seed`, `difficulty` (values
/// separated by `/`); `classifier` takes `vocab`, `classes`, `seed`,
/// `data-seed`, `name`; `tst` takes `vocab`, `seed`, `candidates`, `style`,
/// `data-seed`.
impl FromStr for EnvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return Ok(serde_json::from_str(s)?);
        }
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        if kind == "remote" {
            if rest.is_empty() {
                return Err(Error::InvalidConfig("remote env needs a URL".into()));
            }
            return Ok(EnvSpec::Remote(RemoteSpec {
                config: RemoteConfig::new(rest, "{input} {prompt} {mask}", RemoteTask::Classification),
                vocab: None,
                train: None,
                validation: None,
            }));
        }
        let pairs: Vec<(&str, &str)> = rest
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| p.split_once('=').ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {p:?}"))))
            .collect::<Result<_>>()?;
        let unknown = |k: &str| Error::InvalidConfig(format!("unknown key {k:?} for {kind} env"));
        match kind {
            "synthetic" => {
                let mut spec = SyntheticSpec::default();
                for (k, v) in pairs {
                    match k {
                        "vocab" => spec.vocab_size = parse_value(k, v)?,
                        "length" => spec.prompt_length = parse_value(k, v)?,
                        "seed" => spec.seed = parse_value(k, v)?,
                        "difficulty" => spec.difficulty = v.split('/').map(|d| parse_value(k, d)).collect::<Result<_>>()?,
                        _ => return Err(unknown(k)),
                    }
                }
                Ok(EnvSpec::Synthetic(spec))
            }
            "classifier" | "tiny-classifier" => {
                let mut spec = TinyClassifierSpec::default();
                for (k, v) in pairs {
                    match k {
                        "vocab" => spec.vocab_size = parse_value(k, v)?,
                        "classes" => spec.num_classes = parse_value(k, v)?,
                        "seed" => spec.classifier.seed = parse_value(k, v)?,
                        "data-seed" => spec.data_seed = parse_value(k, v)?,
                        "name" => spec.name = Some(v.to_string()),
                        _ => return Err(unknown(k)),
                    }
                }
                if spec.train_counts.len() != spec.num_classes {
                    spec.train_counts = vec![16; spec.num_classes];
                    spec.validation_counts = vec![16; spec.num_classes];
                }
                Ok(EnvSpec::TinyClassifier(spec))
            }
            "tst" | "tst-sim" => {
                let mut spec = TstSimSpec::default();
                for (k, v) in pairs {
                    match k {
                        "vocab" => spec.vocab_size = parse_value(k, v)?,
                        "seed" => spec.simulator.seed = parse_value(k, v)?,
                        "candidates" => spec.simulator.num_candidates = parse_value(k, v)?,
                        "style" => spec.style_target = parse_value(k, v)?,
                        "data-seed" => spec.data_seed = parse_value(k, v)?,
                        _ => return Err(unknown(k)),
                    }
                }
                Ok(EnvSpec::TstSim(spec))
            }
            other => Err(Error::InvalidConfig(format!("unknown env kind {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_short_forms() {
        let s: EnvSpec = "synthetic:vocab=10,length=3,difficulty=1/2".parse().unwrap();
        match s {
            EnvSpec::Synthetic(sp) => {
                assert_eq!((sp.vocab_size, sp.prompt_length), (10, 3));
                assert_eq!(sp.difficulty, vec![1.0, 2.0]);
            }
            other => panic!("{other:?}"),
        }
        let c: EnvSpec = "classifier:classes=3,seed=4".parse().unwrap();
        let built = c.build().unwrap();
        assert_eq!(built.data.train.len(), 48);
        assert!(matches!("remote:http://x".parse::<EnvSpec>().unwrap(), EnvSpec::Remote(_)));
        assert!("bogus:x=1".parse::<EnvSpec>().is_err());
        assert!("synthetic:vocab".parse::<EnvSpec>().is_err());
        assert!("synthetic:colour=3".parse::<EnvSpec>().is_err());
    }

    #[test]
    fn json_round_trip() {
        let spec = EnvSpec::TstSim(TstSimSpec::default());
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json.parse::<EnvSpec>().unwrap(), spec);
        let minimal: EnvSpec = r#"{"kind":"tiny_classifier","vocab_size":12}"#.parse().unwrap();
        match minimal {
            EnvSpec::TinyClassifier(s) => assert_eq!((s.vocab_size, s.num_classes), (12, 2)),
            other => panic!("{other:?}"),
        }
    }
}
