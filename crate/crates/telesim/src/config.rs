//! Run configuration files.
//!
//! ```toml
//! seed = 7
//! duration_cap_s = 300.0
//! stop_on_completion = true
//! cue_style = "simulated_force"      # or "vibration"
//! scene = "standard.toml"            # omit for the built-in layout
//! output = "logs/anchoring-750-s7"   # relative to this file
//!
//! [condition]
//! kind = "anchoring"
//! visual_delay_ms = 750
//! onset_delay_ms = 0
//!
//! [operator]
//! mode = "scripted"                  # or "live" with speed_limit
//! kind = "wait_for_confirmation"
//! confirmation_channel = "haptic"
//!
//! [pupil]
//! synthesize = true
//!
//! [questionnaire]
//! perceived_visual_ms = 100
//! ```
//!
//! A relative `scene` path is looked up next to the config file first and
//! then in the directory named by `TELESIM_SCENE_DIR`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use telesim_core::delay::{make_condition, ConditionKind};
use telesim_core::haptics::{CueStyle, HapticParams};
use telesim_core::kinematics::{ArmModel, IkSettings};
use telesim_core::session::{OperatorSpec, Questionnaire, TrialConfig};
use telesim_core::world::Scene;

use crate::pupil::PupilModel;

pub const SCENE_DIR_ENV: &str = "TELESIM_SCENE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Syntax { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
    #[error("scene `{name}` not found; looked in {}", tried.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    SceneNotFound { name: String, tried: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSection {
    pub kind: ConditionKind,
    #[serde(default)]
    pub visual_delay_ms: u64,
    #[serde(default)]
    pub onset_delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PupilSection {
    pub synthesize: bool,
    pub model: PupilModel,
}

impl Default for PupilSection {
    fn default() -> Self {
        Self { synthesize: true, model: PupilModel::default() }
    }
}

/// The file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default)]
    pub seed: u64,
    pub duration_cap_s: Option<f64>,
    pub stop_on_completion: Option<bool>,
    pub cue_style: Option<CueStyle>,
    pub scene: Option<String>,
    pub output: Option<PathBuf>,
    pub acceleration_filter_ms: Option<f64>,
    pub condition: ConditionSection,
    pub operator: toml::Table,
    #[serde(default)]
    pub pupil: PupilSection,
    #[serde(default)]
    pub questionnaire: Questionnaire,
    pub haptics: Option<HapticParams>,
    pub ik: Option<IkSettings>,
    pub arm: Option<ArmModel>,
}

/// A resolved, validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub trial: TrialConfig,
    pub pupil: PupilSection,
    /// Self-reports attached to the log of a scripted run.
    pub questionnaire: Questionnaire,
    pub output: PathBuf,
}

/// Default log directory name for a trial.
pub fn default_output_name(trial: &TrialConfig) -> String {
    let c = &trial.condition;
    format!("{}-{}-s{}", c.kind, c.visual_delay_ms, trial.seed)
}

/// Candidate locations for a relative scene path, in lookup order.
pub fn scene_candidates(name: &str, config_dir: &Path, scene_dir: Option<&Path>) -> Vec<PathBuf> {
    let p = Path::new(name);
    if p.is_absolute() {
        return vec![p.to_path_buf()];
    }
    let mut v = vec![config_dir.join(p)];
    if let Some(d) = scene_dir {
        v.push(d.join(p));
    }
    v
}

pub fn load_scene(path: &Path) -> Result<Scene, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let scene: Scene = toml::from_str(&text).map_err(|e| ConfigError::Syntax { path: path.into(), message: e.to_string() })?;
    scene.validate().map_err(|e| ConfigError::Invalid { path: path.into(), message: e.to_string() })?;
    Ok(scene)
}

pub fn scene_to_toml(scene: &Scene) -> String {
    toml::to_string(scene).expect("scenes serialize")
}

impl RunFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax { path: path.into(), message: e.to_string() })
    }

    /// Resolves scene and output paths against `config_dir` and the scene
    /// directory, then validates the trial.
    pub fn resolve(self, path: &Path, config_dir: &Path, scene_dir: Option<&Path>) -> Result<RunConfig, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid { path: path.into(), message };
        let condition = make_condition(self.condition.kind, self.condition.visual_delay_ms)
            .map_err(|e| invalid(e.to_string()))?
            .with_onset_delay(self.condition.onset_delay_ms);

        let mut op = self.operator;
        let scripted = op.get("mode").and_then(|m| m.as_str()) == Some("scripted");
        if scripted && !op.contains_key("seed") {
            let seed = i64::try_from(self.seed).map_err(|_| invalid("seed must be below 2^63".into()))?;
            op.insert("seed".into(), toml::Value::Integer(seed));
        }
        let operator: OperatorSpec = toml::Value::Table(op).try_into().map_err(|e: toml::de::Error| invalid(format!("[operator]: {e}")))?;

        let mut trial = TrialConfig::new(condition, operator, self.seed);
        if let Some(v) = self.duration_cap_s {
            trial.duration_cap_s = v;
        }
        if let Some(v) = self.stop_on_completion {
            trial.stop_on_completion = v;
        }
        if let Some(v) = self.cue_style {
            trial.cue_style = v;
        }
        if let Some(v) = self.acceleration_filter_ms {
            trial.acceleration_filter_ms = v;
        }
        if let Some(v) = self.haptics {
            trial.haptics = v;
        }
        if let Some(v) = self.ik {
            trial.ik = v;
        }
        if let Some(v) = self.arm {
            trial.arm = v;
        }
        if let Some(name) = &self.scene {
            let tried = scene_candidates(name, config_dir, scene_dir);
            let found = tried.iter().find(|p| p.is_file()).cloned();
            let Some(scene_path) = found else {
                return Err(ConfigError::SceneNotFound { name: name.clone(), tried });
            };
            trial.scene = load_scene(&scene_path)?;
        }
        trial.validate().map_err(|e| invalid(e.to_string()))?;
        if i64::try_from(trial.seed).is_err() {
            return Err(invalid("seed must be below 2^63".into()));
        }
        let output = config_dir.join(self.output.unwrap_or_else(|| PathBuf::from("logs").join(default_output_name(&trial))));
        Ok(RunConfig { trial, pupil: self.pupil, questionnaire: self.questionnaire, output })
    }
}

/// Reads and resolves a run config, taking the scene directory from
/// `TELESIM_SCENE_DIR`.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let scene_dir = std::env::var_os(SCENE_DIR_ENV).map(PathBuf::from);
    RunFile::parse(&text, path)?.resolve(path, dir, scene_dir.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use telesim_core::operator::PolicyKind;

    fn resolve(text: &str, dir: &Path, scene_dir: Option<&Path>) -> Result<RunConfig, ConfigError> {
        let p = dir.join("run.toml");
        RunFile::parse(text, &p)?.resolve(&p, dir, scene_dir)
    }

    const MINIMAL: &str = "seed = 3\n[condition]\nkind = \"synchronous\"\nvisual_delay_ms = 500\n[operator]\nmode = \"scripted\"\n";

    #[test]
    fn minimal_file_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let rc = resolve(MINIMAL, dir.path(), None).unwrap();
        assert_eq!(rc.trial.condition.haptic_delay_ms, 500);
        assert_eq!(rc.trial.scene, Scene::standard());
        let OperatorSpec::Scripted(p) = &rc.trial.operator else { panic!() };
        assert_eq!((p.kind, p.seed), (PolicyKind::WaitForConfirmation, 3));
        assert!(rc.pupil.synthesize);
        assert_eq!(rc.output, dir.path().join("logs/synchronous-500-s3"));
    }

    #[test]
    fn bad_condition_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace("synchronous", "asynchronous").replace("500", "250");
        let err = resolve(&text, dir.path(), None).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }), "{err}");
        let text = MINIMAL.replace("kind = \"synchronous\"", "kind = \"sideways\"");
        assert!(matches!(resolve(&text, dir.path(), None), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn live_operator() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace("mode = \"scripted\"", "mode = \"live\"\nspeed_limit = 0.3");
        let rc = resolve(&text, dir.path(), None).unwrap();
        assert_eq!(rc.trial.operator, OperatorSpec::Live { speed_limit: 0.3 });
    }

    #[test]
    fn scene_lookup_order() {
        let cfg = tempfile::tempdir().unwrap();
        let scenes = tempfile::tempdir().unwrap();
        let mut custom = Scene::standard();
        custom.name = "custom".into();
        fs::write(scenes.path().join("custom.toml"), scene_to_toml(&custom)).unwrap();
        let text = format!("scene = \"custom.toml\"\n{MINIMAL}");
        let rc = resolve(&text, cfg.path(), Some(scenes.path())).unwrap();
        assert_eq!(rc.trial.scene.name, "custom");
        let mut local = Scene::standard();
        local.name = "local".into();
        fs::write(cfg.path().join("custom.toml"), scene_to_toml(&local)).unwrap();
        assert_eq!(resolve(&text, cfg.path(), Some(scenes.path())).unwrap().trial.scene.name, "local");
        let missing = text.replace("custom.toml", "nope.toml");
        let err = resolve(&missing, cfg.path(), Some(scenes.path())).unwrap_err();
        assert!(matches!(&err, ConfigError::SceneNotFound { tried, .. } if tried.len() == 2), "{err}");
    }

    #[test]
    fn shipped_scene_is_the_standard_layout() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes/standard.toml");
        assert_eq!(load_scene(&path).unwrap(), Scene::standard());
    }
}
