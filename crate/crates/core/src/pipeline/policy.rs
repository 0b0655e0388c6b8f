use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::detect::{Category, NerMode};
use crate::dp::Sensitivities;

pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Pseudonymize,
    EmbedLdp,
    Noise,
    Redact,
    Passthrough,
}

impl Action {
    pub fn default_for(category: Category) -> Self {
        if category.is_contextual() {
            Action::Pseudonymize
        } else {
            Action::Noise
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    /// Redact the field and flag the report.
    #[default]
    Redact,
    /// Reject the whole prompt.
    Reject,
}

/// Policy fields a request may override in gateway mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyField {
    Actions,
    Epsilon,
    GenderDebias,
    NerMode,
    EmbeddingEnabled,
    OnExhaustion,
    EpsilonLimit,
    Sensitivities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformPolicy {
    /// Per-category actions; categories not listed use [`Action::default_for`].
    pub actions: BTreeMap<Category, Action>,
    /// ε spent by each randomized transformation.
    pub epsilon: f64,
    pub gender_debias: bool,
    pub ner_mode: NerMode,
    pub embedding_enabled: bool,
    pub on_exhaustion: ExhaustionPolicy,
    /// Budget bound for the session (device mode) or user (gateway mode).
    pub epsilon_limit: Option<f64>,
    pub sensitivities: Sensitivities,
    pub overridable: Vec<PolicyField>,
    /// Process sentences on worker threads.
    pub parallel: bool,
}

impl Default for TransformPolicy {
    fn default() -> Self {
        Self {
            actions: BTreeMap::new(),
            epsilon: DEFAULT_EPSILON,
            gender_debias: false,
            ner_mode: NerMode::Fallback,
            embedding_enabled: false,
            on_exhaustion: ExhaustionPolicy::Redact,
            epsilon_limit: None,
            sensitivities: Sensitivities::default(),
            overridable: Vec::new(),
            parallel: true,
        }
    }
}

impl TransformPolicy {
    pub fn action(&self, category: Category) -> Action {
        self.actions.get(&category).copied().unwrap_or_else(|| Action::default_for(category))
    }

    pub fn with_action(mut self, category: Category, action: Action) -> Self {
        self.actions.insert(category, action);
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| Err(PipelineError::InvalidPolicy(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return invalid(format!("epsilon must be positive and finite, got {}", self.epsilon));
        }
        if let Some(l) = self.epsilon_limit {
            if !(l >= 0.0 && l.is_finite()) {
                return invalid(format!("epsilon_limit must be nonnegative and finite, got {l}"));
            }
        }
        let s = &self.sensitivities;
        for (field, v) in [
            ("phone_last4", s.phone_last4),
            ("card_last4", s.card_last4),
            ("ssn_last4", s.ssn_last4),
            ("zip", s.zip),
            ("date_days", s.date_days),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("sensitivity {field} must be positive, got {v}"));
            }
        }
        for (&cat, &action) in &self.actions {
            match action {
                Action::EmbedLdp if cat != Category::Name => {
                    return invalid(format!("embed_ldp applies to names only, not {cat}"));
                }
                Action::EmbedLdp if !self.embedding_enabled => {
                    return invalid("embed_ldp requires embedding_enabled".into());
                }
                Action::Noise if cat.is_contextual() => {
                    return invalid(format!("noise applies to structured fields only, not {cat}"));
                }
                Action::Pseudonymize if !cat.is_contextual() => {
                    return invalid(format!("pseudonymize applies to names, places and organizations, not {cat}"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Copies the fields set in `o` that `allowed` admits.
    fn apply(&mut self, o: &PolicyOverrides, allowed: impl Fn(PolicyField) -> bool) {
        if let Some(a) = &o.actions {
            if allowed(PolicyField::Actions) {
                self.actions.extend(a.iter().map(|(k, v)| (*k, *v)));
            }
        }
        macro_rules! take {
            ($field:ident, $tag:ident) => {
                if let Some(v) = &o.$field {
                    if allowed(PolicyField::$tag) {
                        self.$field = v.clone();
                    }
                }
            };
        }
        take!(epsilon, Epsilon);
        take!(gender_debias, GenderDebias);
        take!(ner_mode, NerMode);
        take!(embedding_enabled, EmbeddingEnabled);
        take!(on_exhaustion, OnExhaustion);
        take!(sensitivities, Sensitivities);
        if let Some(l) = o.epsilon_limit {
            if allowed(PolicyField::EpsilonLimit) {
                self.epsilon_limit = Some(l);
            }
        }
    }
}

/// Per-request policy settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyOverrides {
    pub actions: Option<BTreeMap<Category, Action>>,
    pub epsilon: Option<f64>,
    pub gender_debias: Option<bool>,
    pub ner_mode: Option<NerMode>,
    pub embedding_enabled: Option<bool>,
    pub on_exhaustion: Option<ExhaustionPolicy>,
    pub epsilon_limit: Option<f64>,
    pub sensitivities: Option<Sensitivities>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentMode {
    /// The user controls the policy.
    Device,
    /// An operator controls the policy per workflow.
    Gateway,
}

/// Central policies: a default plus named workflow policies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySet {
    pub default: TransformPolicy,
    pub workflows: BTreeMap<String, TransformPolicy>,
    /// Unknown workflows are an error instead of falling back to the default.
    pub strict: bool,
}

impl PolicySet {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.default.validate()?;
        for (name, p) in &self.workflows {
            p.validate().map_err(|e| PipelineError::InvalidPolicy(format!("workflow {name:?}: {e}")))?;
        }
        Ok(())
    }
}

/// Picks the effective policy for one request.
///
/// Device mode: the request's settings win entirely over the default.
/// Gateway mode: the workflow's policy (or the default, unless strict), with
/// request settings applied only to fields the policy marks overridable.
pub fn resolve_policy(
    mode: DeploymentMode,
    workflow: Option<&str>,
    central: &PolicySet,
    overrides: Option<&PolicyOverrides>,
) -> Result<TransformPolicy, PipelineError> {
    let mut policy = match mode {
        DeploymentMode::Device => central.default.clone(),
        DeploymentMode::Gateway => match workflow.map(|w| (w, central.workflows.get(w))) {
            None => central.default.clone(),
            Some((_, Some(p))) => p.clone(),
            Some((w, None)) if central.strict => {
                return Err(PipelineError::PolicyNotFound(w.to_string()));
            }
            Some((_, None)) => central.default.clone(),
        },
    };
    if let Some(o) = overrides {
        match mode {
            DeploymentMode::Device => policy.apply(o, |_| true),
            DeploymentMode::Gateway => {
                let allowed = policy.overridable.clone();
                policy.apply(o, |f| allowed.contains(&f));
            }
        }
    }
    policy.validate()?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central() -> PolicySet {
        let recruiting = TransformPolicy { gender_debias: true, epsilon: 2.0, ..Default::default() };
        let tunable = TransformPolicy { overridable: vec![PolicyField::Epsilon], ..Default::default() };
        PolicySet {
            default: TransformPolicy::default(),
            workflows: [("recruiting".to_string(), recruiting), ("tunable".to_string(), tunable)].into(),
            strict: false,
        }
    }

    fn eps(e: f64) -> PolicyOverrides {
        PolicyOverrides { epsilon: Some(e), gender_debias: Some(false), ..Default::default() }
    }

    #[test]
    fn resolution_table() {
        let c = central();
        let g = DeploymentMode::Gateway;
        let d = DeploymentMode::Device;
        // (mode, workflow, override epsilon) -> (epsilon, debias)
        let cases: &[(DeploymentMode, Option<&str>, Option<f64>, f64, bool)] = &[
            (g, Some("recruiting"), None, 2.0, true),
            (g, Some("recruiting"), Some(5.0), 2.0, true),
            (g, Some("tunable"), Some(5.0), 5.0, false),
            (g, Some("unknown"), Some(5.0), 1.0, false),
            (g, None, None, 1.0, false),
            (d, None, Some(3.0), 3.0, false),
            (d, Some("recruiting"), None, 1.0, false),
        ];
        for &(mode, wf, e, want_eps, want_debias) in cases {
            let o = e.map(eps);
            let p = resolve_policy(mode, wf, &c, o.as_ref()).unwrap();
            assert_eq!((p.epsilon, p.gender_debias), (want_eps, want_debias), "{mode:?} {wf:?} {e:?}");
        }
    }

    #[test]
    fn strict_unknown_workflow() {
        let mut c = central();
        c.strict = true;
        let err = resolve_policy(DeploymentMode::Gateway, Some("nope"), &c, None).unwrap_err();
        assert!(matches!(err, PipelineError::PolicyNotFound(w) if w == "nope"));
    }

    #[test]
    fn validation() {
        let p = TransformPolicy::default().with_action(Category::Name, Action::EmbedLdp);
        assert!(p.validate().is_err());
        let p = TransformPolicy { embedding_enabled: true, ..p };
        assert!(p.validate().is_ok());
        let p = TransformPolicy { embedding_enabled: true, ..Default::default() }
            .with_action(Category::City, Action::EmbedLdp);
        assert!(p.validate().is_err());
        assert!(TransformPolicy::default().with_action(Category::Phone, Action::Pseudonymize).validate().is_err());
        assert!(TransformPolicy::default().with_action(Category::Name, Action::Noise).validate().is_err());
        assert!(TransformPolicy { epsilon: 0.0, ..Default::default() }.validate().is_err());
        // Device-mode overrides are validated after merging.
        let o = PolicyOverrides { epsilon: Some(-1.0), ..Default::default() };
        assert!(resolve_policy(DeploymentMode::Device, None, &central(), Some(&o)).is_err());
    }

    #[test]
    fn policy_documents() {
        let json = r#"{"epsilon": 0.5, "gender_debias": true, "actions": {"name": "embed_ldp", "email": "redact"}, "embedding_enabled": true}"#;
        let p: TransformPolicy = serde_json::from_str(json).unwrap();
        assert_eq!(p.action(Category::Name), Action::EmbedLdp);
        assert_eq!(p.action(Category::Email), Action::Redact);
        assert_eq!(p.action(Category::Phone), Action::Noise);
        assert_eq!(p.action(Category::City), Action::Pseudonymize);
        p.validate().unwrap();
        assert!(serde_json::from_str::<TransformPolicy>(r#"{"epsilonn": 1}"#).is_err());
    }
}
