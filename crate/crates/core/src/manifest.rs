//! Stimulus manifest: maps (clip, stimulus key) to an opaque media URL.
//!
//! Stimulus keys are `variant:<variant_id>` for the standards under test and
//! `level:<n>` for the reference scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{PresentationOrder, SessionConfig, TrialPlan};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StimulusManifest {
    pub clips: BTreeMap<String, BTreeMap<String, String>>,
}

pub fn variant_key(variant: &str) -> String {
    format!("variant:{variant}")
}

pub fn level_key(level: u32) -> String {
    format!("level:{level}")
}

impl StimulusManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn url(&self, clip: &str, key: &str) -> Option<&str> {
        self.clips.get(clip)?.get(key).map(String::as_str)
    }

    /// Every unresolvable stimulus the config would need, as (field, message).
    pub fn problems_for(&self, config: &SessionConfig) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for clip in &config.clips {
            let Some(entries) = self.clips.get(clip) else {
                out.push(("clips".to_string(), format!("clip {clip:?} is not in the manifest")));
                continue;
            };
            for variant in &config.variants {
                if !entries.contains_key(&variant_key(variant)) {
                    out.push((
                        "variants".to_string(),
                        format!("clip {clip:?} has no media for variant {variant:?}"),
                    ));
                }
            }
            let missing: Vec<u32> = (1..=config.scale_levels)
                .filter(|l| !entries.contains_key(&level_key(*l)))
                .collect();
            if !missing.is_empty() {
                out.push((
                    "scale_levels".to_string(),
                    format!("clip {clip:?} is missing reference levels {missing:?}"),
                ));
            }
        }
        out
    }

    /// Media URLs for the two intervals of a trial, honoring presentation order.
    pub fn resolve(&self, plan: &TrialPlan) -> Result<(String, String)> {
        let lookup = |key: String| {
            self.url(&plan.clip, &key)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("manifest lacks {key} for clip {:?}", plan.clip)))
        };
        let standard = lookup(variant_key(&plan.variant))?;
        let reference = lookup(level_key(plan.reference_level))?;
        Ok(match plan.order {
            PresentationOrder::ReferenceFirst => (reference, standard),
            PresentationOrder::StandardFirst => (standard, reference),
        })
    }

    /// Manifest with URLs `{base}/{token}.mp4`, the token being a hash of
    /// clip and key so the URL does not reveal level or variant.
    pub fn synthetic(base: &str, clips: &[String], variants: &[String], levels: u32) -> Self {
        let mut out = BTreeMap::new();
        for clip in clips {
            let mut entries = BTreeMap::new();
            let keys = variants
                .iter()
                .map(|v| variant_key(v))
                .chain((1..=levels).map(level_key));
            for key in keys {
                let token = opaque_token(&format!("{clip}/{key}"));
                entries.insert(key, format!("{base}/{token}.mp4"));
            }
            out.insert(clip.clone(), entries);
        }
        Self { clips: out }
    }
}

/// FNV-1a, hex encoded. Only used to produce opaque demo file names.
fn opaque_token(s: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn synthetic_manifest_covers_config() {
        let cfg = SessionConfig::new(ids("v", 2), ids("c", 3), PolicyKind::Bald, 0);
        let m = StimulusManifest::synthetic("https://cdn.example", &cfg.clips, &cfg.variants, 50);
        assert!(m.problems_for(&cfg).is_empty());
        let url = m.url("c1", "level:7").unwrap();
        assert!(!url.contains("level") && !url.contains("v0"));
    }

    #[test]
    fn missing_clip_is_named() {
        let cfg = SessionConfig::new(ids("v", 2), ids("c", 3), PolicyKind::Bald, 0);
        let mut m = StimulusManifest::synthetic("x", &cfg.clips, &cfg.variants, 50);
        m.clips.remove("c2");
        let problems = m.problems_for(&cfg);
        assert_eq!(problems.len(), 1);
        assert!(problems[0].1.contains("c2"));
    }

    #[test]
    fn resolve_honors_order() {
        let clips = ids("c", 1);
        let m = StimulusManifest::synthetic("x", &clips, &ids("v", 1), 50);
        let mut plan = TrialPlan {
            trial_index: 0,
            variant: "v0".into(),
            clip: "c0".into(),
            reference_level: 50,
            order: PresentationOrder::ReferenceFirst,
        };
        let (first, second) = m.resolve(&plan).unwrap();
        assert_eq!(first, m.url("c0", "level:50").unwrap());
        assert_eq!(second, m.url("c0", "variant:v0").unwrap());
        plan.order = PresentationOrder::StandardFirst;
        assert_eq!(m.resolve(&plan).unwrap(), (second, first));
    }

    #[test]
    fn json_shape() {
        let text = r#"{"clips":{"c0":{"variant:v0":"a.mp4","level:1":"b.mp4"}}}"#;
        let m = StimulusManifest::from_json(text).unwrap();
        assert_eq!(m.url("c0", "level:1"), Some("b.mp4"));
    }
}
