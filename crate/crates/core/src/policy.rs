//! Per-round confidence-threshold schedules for pseudo-label selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence cutoffs for mining rounds `1..=R`, stored as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub name: String,
    pub thresholds: Vec<f64>,
}

impl ThresholdPolicy {
    pub fn new(name: impl Into<String>, thresholds: Vec<f64>) -> Result<Self> {
        let p = ThresholdPolicy {
            name: name.into(),
            thresholds,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a schedule from percentages, e.g. `[90, 85, 80, 75]`.
    pub fn from_percents(name: impl Into<String>, percents: &[f64]) -> Result<Self> {
        ThresholdPolicy::new(name, percents.iter().map(|p| p / 100.0).collect())
    }

    pub fn static_policy() -> Self {
        ThresholdPolicy {
            name: "static".into(),
            thresholds: vec![0.90, 0.90, 0.90, 0.90],
        }
    }

    pub fn semi_variable() -> Self {
        ThresholdPolicy {
            name: "semi_variable".into(),
            thresholds: vec![0.90, 0.90, 0.85, 0.85],
        }
    }

    pub fn variable() -> Self {
        ThresholdPolicy {
            name: "variable".into(),
            thresholds: vec![0.90, 0.85, 0.80, 0.75],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        builtin_policies().into_iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config(format!("policy {:?} has no rounds", self.name)));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!(
                "policy {:?}: threshold {t} outside (0, 1]",
                self.name
            )));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.thresholds.len()
    }

    /// Threshold for mining round `round` (1-based).
    pub fn threshold_for_round(&self, round: u32) -> Result<f64> {
        if round == 0 || round as usize > self.thresholds.len() {
            return Err(Error::Config(format!(
                "round {round} outside policy {:?} (1..={})",
                self.name,
                self.thresholds.len()
            )));
        }
        Ok(self.thresholds[round as usize - 1])
    }

    pub fn is_non_increasing(&self) -> bool {
        self.thresholds.windows(2).all(|w| w[1] <= w[0])
    }
}

pub fn threshold_for_round(p: &ThresholdPolicy, round: u32) -> Result<f64> {
    p.threshold_for_round(round)
}

pub fn builtin_policies() -> Vec<ThresholdPolicy> {
    vec![
        ThresholdPolicy::static_policy(),
        ThresholdPolicy::semi_variable(),
        ThresholdPolicy::variable(),
    ]
}

/// Configuration form: a built-in name or a list of percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Named(String),
    Percents(Vec<f64>),
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Named("variable".into())
    }
}

impl PolicySpec {
    pub fn resolve(&self) -> Result<ThresholdPolicy> {
        match self {
            PolicySpec::Named(n) => ThresholdPolicy::builtin(n).ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy {n:?}; expected static, semi_variable, variable or a list of percents"
                ))
            }),
            PolicySpec::Percents(p) => ThresholdPolicy::from_percents("custom", p),
        }
    }

    /// Parses a command-line value: a name or comma-separated percents.
    pub fn parse_arg(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('[').trim_end_matches(']');
        if t.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            let v = t
                .split(',')
                .map(|x| {
                    x.trim()
                        .trim_end_matches('%')
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad percent {x:?} in policy")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PolicySpec::Percents(v))
        } else {
            Ok(PolicySpec::Named(t.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_schedules() {
        let p = builtin_policies();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].thresholds, vec![0.90; 4]);
        assert_eq!(p[1].thresholds, vec![0.90, 0.90, 0.85, 0.85]);
        assert_eq!(p[2].thresholds, vec![0.90, 0.85, 0.80, 0.75]);
        assert!(p.iter().all(|p| p.is_non_increasing()));
    }

    #[test]
    fn per_round_lookup() {
        let v = ThresholdPolicy::variable();
        assert_eq!(v.threshold_for_round(1).unwrap(), 0.90);
        assert_eq!(v.threshold_for_round(4).unwrap(), 0.75);
        for r in 1..=4 {
            assert_eq!(ThresholdPolicy::static_policy().threshold_for_round(r).unwrap(), 0.90);
        }
        assert_eq!(ThresholdPolicy::semi_variable().threshold_for_round(3).unwrap(), 0.85);
        assert!(v.threshold_for_round(0).is_err());
        assert!(v.threshold_for_round(5).is_err());
    }

    #[test]
    fn percents_and_validation() {
        let p = PolicySpec::parse_arg("90,85%, 70").unwrap().resolve().unwrap();
        assert_eq!(p.thresholds.len(), 3);
        assert!((p.thresholds[2] - 0.70).abs() < 1e-12);
        assert!(ThresholdPolicy::from_percents("x", &[]).is_err());
        assert!(ThresholdPolicy::from_percents("x", &[0.0]).is_err());
        assert!(ThresholdPolicy::from_percents("x", &[101.0]).is_err());
        assert!(PolicySpec::parse_arg("bogus").unwrap().resolve().is_err());
        assert_eq!(
            PolicySpec::parse_arg("semi_variable").unwrap().resolve().unwrap(),
            ThresholdPolicy::semi_variable()
        );
    }

    #[test]
    fn config_forms() {
        #[derive(Deserialize)]
        struct C {
            policy: PolicySpec,
        }
        let c: C = toml::from_str("policy = \"static\"").unwrap();
        assert_eq!(c.policy.resolve().unwrap(), ThresholdPolicy::static_policy());
        let c: C = toml::from_str("policy = [90, 85, 80, 75]").unwrap();
        assert_eq!(c.policy.resolve().unwrap().thresholds, ThresholdPolicy::variable().thresholds);
    }
}
