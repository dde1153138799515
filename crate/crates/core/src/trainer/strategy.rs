use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_head_param, is_prompt_param, PromptConfig, VapFormer};
use crate::params::ParameterStore;
use crate::visual::GlobalTransformKind;

/// How task-B adaptation is done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningStrategy {
    /// Full fine-tuning without prompts.
    Ft,
    /// Visual and tabular prompts with the global prompt (the full method).
    Pt,
    /// Visual prompts only.
    Vis,
    /// Tabular prompts only.
    Tab,
    /// Visual and tabular prompts without the global prompt.
    VisTab,
}

impl TuningStrategy {
    pub const ALL: [TuningStrategy; 5] = [Self::Ft, Self::Pt, Self::Vis, Self::Tab, Self::VisTab];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ft => "ft",
            Self::Pt => "pt",
            Self::Vis => "vis",
            Self::Tab => "tab",
            Self::VisTab => "vistab",
        }
    }

    fn families(self) -> (bool, bool, bool) {
        match self {
            Self::Ft => (false, false, false),
            Self::Pt => (true, true, true),
            Self::Vis => (true, false, false),
            Self::Tab => (false, true, false),
            Self::VisTab => (true, true, false),
        }
    }

    /// Prompt families this strategy instantiates.
    pub fn prompt_config(self, counts: PromptCounts) -> PromptConfig {
        let (vis, tab, global) = self.families();
        PromptConfig {
            visual: if vis { counts.visual } else { 0 },
            tabular: if tab { counts.tabular } else { 0 },
            global,
            transform: counts.transform,
        }
    }
}

impl fmt::Display for TuningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s || (s == "vap" && *t == Self::Pt))
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected ft, pt, vis, tab or vistab)")))
    }
}

/// Prompt counts used when a strategy enables a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptCounts {
    pub visual: usize,
    pub tabular: usize,
    pub transform: GlobalTransformKind,
}

impl Default for PromptCounts {
    fn default() -> Self {
        Self {
            visual: 10,
            tabular: 5,
            transform: GlobalTransformKind::default(),
        }
    }
}

/// Names that stay fixed during adaptation. Full fine-tuning freezes
/// nothing; every prompt strategy trains only prompts, global transforms and
/// the classifier head.
pub fn build_freeze_mask(strategy: TuningStrategy, model: &VapFormer, store: &ParameterStore) -> Result<BTreeSet<String>> {
    if strategy == TuningStrategy::Ft {
        return Ok(BTreeSet::new());
    }
    let (vis, tab, global) = strategy.families();
    let have_vis = model.visual.prompt_sets().next().is_some();
    let have_tab = model.tabular.prompt_count() > 0;
    let have_global = model.visual.global_transforms().next().is_some();
    let mut missing = Vec::new();
    if vis && !have_vis {
        missing.push("visual prompts");
    }
    if tab && !have_tab {
        missing.push("tabular prompts");
    }
    if global && !have_global {
        missing.push("global prompt transform");
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "strategy `{strategy}` needs {} but the model has none",
            missing.join(" and ")
        )));
    }
    Ok(store
        .names()
        .filter(|n| !is_prompt_param(n) && !is_head_param(n))
        .map(str::to_string)
        .collect())
}
