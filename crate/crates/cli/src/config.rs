//! Pipeline configuration: one TOML file with units in key names.
//!
//! Every section has defaults, so an empty file describes the desk-scale toy
//! pipeline. [`validate_config`] runs the constraint checks of every module
//! and reports each violation with the offending key and its line.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use fwl_core::baselines::GlassPlane;
use fwl_core::scenes::{toy_preprocess, toy_sensor, RoomSpec};
use fwl_core::signal::{PreprocessPlan, PreprocessSpec};
use fwl_core::{Dims, FwlError, SensorConfig};
use fwl_nn::model::MaeConfig;
use fwl_nn::train::TrainConfig;
use fwl_nn::NnError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Pretrain,
    Finetune,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Synth, Stage::Pretrain, Stage::Finetune, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFamily {
    /// Procedural rooms; the scene id is the room seed.
    GlassRoom,
    /// Scene files listed in `scenes.files`; the scene id is the list index.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub family: SceneFamily,
    pub files: Vec<PathBuf>,
    /// Sensor poses rendered per scene.
    pub views_per_scene: usize,
    pub room: RoomSpec,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            family: SceneFamily::GlassRoom,
            files: Vec::new(),
            views_per_scene: 4,
            room: RoomSpec::default(),
        }
    }
}

/// Scene ids, written either as a list or as a half-open `"a..b"` range.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "IdSpec", into = "IdSpec")]
pub struct SceneIds(pub Vec<u64>);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum IdSpec {
    List(Vec<u64>),
    Range(String),
}

impl TryFrom<IdSpec> for SceneIds {
    type Error = String;

    fn try_from(s: IdSpec) -> std::result::Result<Self, String> {
        match s {
            IdSpec::List(v) => Ok(SceneIds(v)),
            IdSpec::Range(r) => {
                let bad = || format!("`{r}` is not a range like \"0..50\"");
                let (a, b) = r.split_once("..").ok_or_else(bad)?;
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                Ok(SceneIds((a..b).collect()))
            }
        }
    }
}

impl From<SceneIds> for IdSpec {
    fn from(s: SceneIds) -> Self {
        IdSpec::List(s.0)
    }
}

impl SceneIds {
    pub fn range(a: u64, b: u64) -> Self {
        SceneIds((a..b).collect())
    }
}

/// Train / validation / test split by scene id. Test scenes must not occur in
/// the other two splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: SceneIds,
    pub val: SceneIds,
    pub test: SceneIds,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: SceneIds::range(0, 50),
            val: SceneIds::range(500, 505),
            test: SceneIds::range(1000, 1010),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    /// The fine-tuned model.
    Model,
    /// Ground-truth labels fed through the evaluation unchanged.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub predictor: Predictor,
    /// Peak detection threshold on raw histogram counts.
    pub peak_threshold_counts: f64,
    pub class_threshold: f64,
    pub removal_radius_m: f64,
    pub heuristic_glass_amp_ratio: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predictor: Predictor::Model,
            peak_threshold_counts: 3.0,
            class_threshold: fwl_nn::infer::DEFAULT_CLASS_THRESHOLD,
            removal_radius_m: 0.001,
            heuristic_glass_amp_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model initialization and scene noise.
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub sensor: SensorConfig,
    pub preprocess: PreprocessSpec,
    pub scenes: ScenesConfig,
    pub split: SplitConfig,
    pub model: MaeConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    /// The desk-scale pipeline: 32 x 32 x 128 frames of procedural glass rooms.
    fn default() -> Self {
        let input_scale = 0.02;
        let eval = EvalConfig::default();
        Self {
            seed: 1,
            stages: Stage::ALL.to_vec(),
            sensor: toy_sensor(),
            preprocess: toy_preprocess(),
            scenes: ScenesConfig::default(),
            split: SplitConfig::default(),
            model: MaeConfig {
                input_scale,
                peak_threshold: eval.peak_threshold_counts * input_scale,
                ..MaeConfig::default()
            },
            pretrain: TrainConfig {
                epochs: 10,
                seed: 1,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 20,
                seed: 2,
                ..TrainConfig::default()
            },
            eval,
        }
    }
}

impl PipelineConfig {
    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    /// Canonical TOML; the content hash of a config is taken over this text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// Scene files are resolved against this directory.
    pub fn resolve(&mut self, base: &Path) {
        for f in &mut self.scenes.files {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
    }
}

/// One violated constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub file: Option<PathBuf>,
    /// 1-based.
    pub line: Option<usize>,
    /// Dotted key, e.g. `model.mask_ratio`.
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            file: None,
            line: None,
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.file {
            write!(f, "{}:", p.display())?;
        }
        if let Some(l) = self.line {
            write!(f, "{l}:")?;
        }
        if self.file.is_some() || self.line.is_some() {
            f.write_str(" ")?;
        }
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Parses and checks a config file.
pub fn validate_config(path: &Path) -> std::result::Result<PipelineConfig, Vec<Diagnostic>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![Diagnostic {
            file: Some(path.to_path_buf()),
            ..Diagnostic::new("<file>", e.to_string())
        }]
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate_text(&text, base).map_err(|mut ds| {
        for d in &mut ds {
            d.file = Some(path.to_path_buf());
        }
        ds
    })
}

/// Parses and checks config text; relative scene paths resolve against `base`.
pub fn validate_text(text: &str, base: &Path) -> std::result::Result<PipelineConfig, Vec<Diagnostic>> {
    let mut cfg = parse_config(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        let field = e.span().map_or_else(|| "<file>".to_string(), |s| key_at(text, s.start));
        vec![Diagnostic {
            line,
            ..Diagnostic::new(field, e.message().trim().to_string())
        }]
    })?;
    cfg.resolve(base);
    let mut ds = check_config(&cfg);
    for d in &mut ds {
        d.line = locate(text, &d.field);
    }
    if ds.is_empty() {
        Ok(cfg)
    } else {
        Err(ds)
    }
}

/// Parses config text; keys absent from a table keep the values of
/// [`PipelineConfig::default`], not the defaults of the section's own type.
pub fn parse_config(text: &str) -> std::result::Result<PipelineConfig, toml::de::Error> {
    // The direct parse reports syntax errors and unknown keys with a location.
    toml::from_str::<PipelineConfig>(text)?;
    let user: toml::Table = toml::from_str(text)?;
    let mut merged = toml::Table::try_from(PipelineConfig::default()).expect("default config serializes");
    merge(&mut merged, user);
    toml::Value::Table(merged).try_into()
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Every constraint of every module, plus the cross-module ones.
pub fn check_config(cfg: &PipelineConfig) -> Vec<Diagnostic> {
    let mut ds = Vec::new();

    let sensor_ok = match cfg.sensor.validate() {
        Ok(()) => true,
        Err(e) => {
            ds.push(from_core("sensor", e));
            false
        }
    };
    if sensor_ok {
        let dims = Dims::new(cfg.sensor.rows, cfg.sensor.cols, cfg.sensor.bins);
        if let Err(e) = PreprocessPlan::new(dims, &cfg.preprocess) {
            ds.push(from_core("preprocess", e));
        }
    }

    let model_ok = match cfg.model.validate() {
        Ok(()) => true,
        Err(e) => {
            ds.push(from_nn("model", e, &keys_of(&MaeConfig::default())));
            false
        }
    };
    if model_ok {
        let [h, w, t] = cfg.model.input;
        if h != w || cfg.preprocess.tile_hw != h {
            ds.push(Diagnostic::new(
                "preprocess.tile_hw",
                format!("tiles of {0}x{0} pixels do not fit model.input {h}x{w}", cfg.preprocess.tile_hw),
            ));
        }
        if cfg.preprocess.target_t != t {
            ds.push(Diagnostic::new(
                "preprocess.target_t",
                format!("{} bins per waveform do not fit model.input depth {t}", cfg.preprocess.target_t),
            ));
        }
    }
    for (name, tc) in [("pretrain", &cfg.pretrain), ("finetune", &cfg.finetune)] {
        if let Err(e) = tc.validate() {
            let mut keys = keys_of(&TrainConfig::default());
            keys.extend(keys_of(&TrainConfig::default().optimizer).into_iter().map(|k| format!("optimizer.{k}")));
            ds.push(from_nn(name, e, &keys));
        }
    }

    check_scenes(cfg, &mut ds);
    check_split(cfg, &mut ds);
    check_stages(cfg, &mut ds);
    check_eval(&cfg.eval, &mut ds);
    ds
}

fn check_scenes(cfg: &PipelineConfig, ds: &mut Vec<Diagnostic>) {
    let s = &cfg.scenes;
    if s.views_per_scene == 0 {
        ds.push(Diagnostic::new("scenes.views_per_scene", "must be >= 1"));
    }
    let r = &s.room;
    if !(r.pane_distance_m[0] > 0.5 && r.pane_distance_m[0] < r.pane_distance_m[1]) {
        ds.push(Diagnostic::new(
            "scenes.room.pane_distance_m",
            "needs 0.5 < nearest < farthest",
        ));
    }
    if !(r.amplitude_scale > 0.0) {
        ds.push(Diagnostic::new("scenes.room.amplitude_scale", "must be > 0"));
    }
    if !(r.ambient_rate_per_bin >= 0.0) {
        ds.push(Diagnostic::new("scenes.room.ambient_rate_per_bin", "must be >= 0"));
    }
    if !(0.0..80.0).contains(&r.max_pane_yaw_deg) {
        ds.push(Diagnostic::new("scenes.room.max_pane_yaw_deg", "must lie in [0, 80)"));
    }
    if s.family == SceneFamily::Files {
        if s.files.is_empty() {
            ds.push(Diagnostic::new("scenes.files", "family = \"files\" needs at least one scene file"));
        }
        for f in s.files.iter().filter(|f| !f.is_file()) {
            ds.push(Diagnostic::new("scenes.files", format!("{} does not exist", f.display())));
        }
        let n = s.files.len() as u64;
        for (name, ids) in split_sets(cfg) {
            if let Some(id) = ids.0.iter().find(|&&id| id >= n) {
                ds.push(Diagnostic::new(
                    format!("split.{name}"),
                    format!("scene id {id} has no entry in scenes.files ({n} files)"),
                ));
            }
        }
    }
}

fn split_sets(cfg: &PipelineConfig) -> [(&'static str, &SceneIds); 3] {
    [("train", &cfg.split.train), ("val", &cfg.split.val), ("test", &cfg.split.test)]
}

fn check_split(cfg: &PipelineConfig, ds: &mut Vec<Diagnostic>) {
    let test: BTreeSet<u64> = cfg.split.test.0.iter().copied().collect();
    for (name, ids) in [("train", &cfg.split.train), ("val", &cfg.split.val)] {
        let shared: Vec<u64> = ids.0.iter().copied().filter(|id| test.contains(id)).collect::<BTreeSet<_>>().into_iter().collect();
        if !shared.is_empty() {
            ds.push(Diagnostic::new(
                "split.test",
                format!(
                    "scene ids {shared:?} also appear in split.{name}; test scenes must be unseen scenes, disjoint from training and validation"
                ),
            ));
        }
    }
    for (name, ids) in split_sets(cfg) {
        let unique: BTreeSet<&u64> = ids.0.iter().collect();
        if unique.len() != ids.0.len() {
            ds.push(Diagnostic::new(format!("split.{name}"), "lists a scene id twice"));
        }
    }
    if (cfg.has(Stage::Pretrain) || cfg.has(Stage::Finetune)) && cfg.split.train.0.is_empty() {
        ds.push(Diagnostic::new("split.train", "training stages need at least one training scene"));
    }
    if cfg.has(Stage::Eval) && cfg.split.test.0.is_empty() {
        ds.push(Diagnostic::new("split.test", "the eval stage needs at least one test scene"));
    }
}

fn check_stages(cfg: &PipelineConfig, ds: &mut Vec<Diagnostic>) {
    if cfg.stages.is_empty() {
        ds.push(Diagnostic::new("stages", "no stage to run"));
        return;
    }
    if cfg.stages.windows(2).any(|w| w[0] >= w[1]) {
        ds.push(Diagnostic::new(
            "stages",
            "stages must be listed once each, in the order synth, pretrain, finetune, eval",
        ));
    }
    if !cfg.has(Stage::Synth) {
        ds.push(Diagnostic::new("stages", "every pipeline starts with synth"));
    }
    if cfg.has(Stage::Finetune) && !cfg.has(Stage::Pretrain) {
        ds.push(Diagnostic::new("stages", "finetune needs the pretrain stage"));
    }
    if cfg.has(Stage::Eval) && cfg.eval.predictor == Predictor::Model && !cfg.has(Stage::Finetune) {
        ds.push(Diagnostic::new(
            "eval.predictor",
            "predictor = \"model\" needs the finetune stage; use \"oracle\" to evaluate ground truth",
        ));
    }
}

fn check_eval(e: &EvalConfig, ds: &mut Vec<Diagnostic>) {
    if !(e.peak_threshold_counts > 0.0) {
        ds.push(Diagnostic::new("eval.peak_threshold_counts", "must be > 0"));
    }
    if !(e.class_threshold > 0.0 && e.class_threshold <= 1.0) {
        ds.push(Diagnostic::new("eval.class_threshold", "must lie in (0, 1]"));
    }
    if !(e.removal_radius_m > 0.0) {
        ds.push(Diagnostic::new("eval.removal_radius_m", "must be > 0"));
    }
    if !(e.heuristic_glass_amp_ratio > 0.0) {
        ds.push(Diagnostic::new("eval.heuristic_glass_amp_ratio", "must be > 0"));
    }
}

/// Planes for the mirror baseline, one `px py pz nx ny nz` line each.
pub fn parse_planes(text: &str, path: &Path) -> fwl_core::Result<Vec<GlassPlane>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |r: String| FwlError::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {r}", i + 1),
        };
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| err(format!("bad number `{s}`"))))
            .collect::<fwl_core::Result<_>>()?;
        if v.len() != 6 {
            return Err(err(format!("expected 6 numbers, found {}", v.len())));
        }
        let p = nalgebra::Vector3::new(v[0], v[1], v[2]);
        let n = nalgebra::Vector3::new(v[3], v[4], v[5]);
        out.push(GlassPlane::new(p, n).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

fn from_core(section: &str, e: FwlError) -> Diagnostic {
    match e {
        FwlError::Config { field, reason } => Diagnostic::new(format!("{section}.{field}"), reason),
        e => Diagnostic::new(section, e.to_string()),
    }
}

/// Model errors carry a message only; the field is the first key named in it.
fn from_nn(section: &str, e: NnError, keys: &[String]) -> Diagnostic {
    let msg = match e {
        NnError::Config(m) => m,
        e => e.to_string(),
    };
    let mut named: Vec<&String> = keys.iter().filter(|k| mentions(&msg, k.rsplit('.').next().unwrap_or(k))).collect();
    // Prefer the earliest mention.
    named.sort_by_key(|k| msg.find(k.rsplit('.').next().unwrap_or(k)));
    let field = named.first().map_or_else(|| section.to_string(), |k| format!("{section}.{k}"));
    Diagnostic::new(field, msg)
}

fn mentions(msg: &str, word: &str) -> bool {
    let is_word = |c: char| c.is_ascii_alphanumeric() || c == '_';
    msg.match_indices(word).any(|(i, _)| {
        let before = msg[..i].chars().next_back().is_none_or(|c| !is_word(c));
        let after = msg[i + word.len()..].chars().next().is_none_or(|c| !is_word(c));
        before && after
    })
}

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match toml::Table::try_from(v) {
        Ok(t) => t.keys().cloned().collect(),
        Err(_) => Vec::new(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Dotted key whose line contains `offset`, for parse errors.
fn key_at(text: &str, offset: usize) -> String {
    let target = line_of(text, offset);
    let mut table = String::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if let Some(h) = header(l) {
            table = h;
        }
        if i + 1 == target {
            let key = l.split('=').next().unwrap_or("").trim();
            if l.contains('=') && !key.is_empty() {
                return join(&table, key);
            }
            return if table.is_empty() { "<file>".into() } else { table };
        }
    }
    if table.is_empty() {
        "<file>".into()
    } else {
        table
    }
}

fn header(l: &str) -> Option<String> {
    let h = l.strip_prefix('[')?.split(']').next()?.trim();
    Some(h.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

fn join(table: &str, key: &str) -> String {
    if table.is_empty() {
        key.to_string()
    } else {
        format!("{table}.{key}")
    }
}

/// Line of a dotted key; falls back to its table header when the key is
/// absent (a default value is at fault).
fn locate(text: &str, field: &str) -> Option<usize> {
    let mut table = String::new();
    let mut header_line = None;
    let parent = field.rsplit_once('.').map_or("", |(p, _)| p);
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if let Some(h) = header(l) {
            table = h;
            if table == parent || table == field {
                header_line.get_or_insert(i + 1);
            }
            continue;
        }
        if let Some((k, _)) = l.split_once('=') {
            if join(&table, k.trim()) == field {
                return Some(i + 1);
            }
        }
    }
    header_line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        assert!(check_config(&cfg).is_empty(), "{:?}", check_config(&cfg));
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn ranges_expand() {
        let cfg = validate_text("[split]\ntrain = \"0..3\"\nval = [7]\ntest = \"10..12\"\n", Path::new(".")).unwrap();
        assert_eq!(cfg.split.train.0, vec![0, 1, 2]);
        assert_eq!(cfg.split.test.0, vec![10, 11]);
        let e = validate_text("[split]\ntrain = \"0-3\"\n", Path::new(".")).unwrap_err();
        assert_eq!(e[0].line, Some(2));
    }

    #[test]
    fn partial_tables_keep_pipeline_defaults() {
        let cfg = parse_config("[model]\nmask_ratio = 0.6\n[pretrain]\nepochs = 2\n").unwrap();
        let d = PipelineConfig::default();
        assert_eq!(cfg.model.mask_ratio, 0.6);
        assert_eq!(cfg.model.input_scale, d.model.input_scale);
        assert_eq!((cfg.pretrain.epochs, cfg.pretrain.seed), (2, d.pretrain.seed));
        assert_eq!(parse_config("").unwrap(), d);
    }

    #[test]
    fn word_matching() {
        assert!(mentions("mask_ratio must lie in (0, 1)", "mask_ratio"));
        assert!(!mentions("mask_ratio must lie in (0, 1)", "ratio"));
        assert!(mentions("d_enc and d_dec must be divisible by heads", "heads"));
    }

    #[test]
    fn unknown_key_is_located() {
        let e = validate_text("seed = 3\n\n[model]\nmask_ratoi = 0.5\n", Path::new(".")).unwrap_err();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].line, Some(4));
        assert!(e[0].message.contains("mask_ratoi"), "{}", e[0]);
    }
}
