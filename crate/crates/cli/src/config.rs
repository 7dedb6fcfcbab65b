//! Run configuration: flat `key = value` files overlaid by command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sanet_core::decoder::Variant;
use sanet_core::losses::LossKind;
use sanet_core::model::ModelConfig;

use crate::CliError;

/// Network size. `Miniature` is the 32-point network used for quick runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Default,
    Miniature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Variant,
    pub loss: LossKind,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub input_points: usize,
    pub split: String,
    pub shapes: usize,
    pub points: usize,
    pub keep: usize,
    pub checkpoint_every: usize,
    pub scale: Scale,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Variant::Full,
            loss: LossKind::Both,
            lr: 1e-4,
            steps: 3000,
            batch: 4,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            input_points: 2048,
            split: "train".into(),
            shapes: 16,
            points: sanet_core::data::SHAPE_POINTS,
            keep: sanet_core::data::DEFAULT_KEEP,
            checkpoint_every: 500,
            scale: Scale::Default,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::Usage(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "mode" => self.mode = parse(key, value)?,
            "loss" => self.loss = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "input_points" => self.input_points = parse(key, value)?,
            "split" => self.split = value.to_string(),
            "shapes" => self.shapes = parse(key, value)?,
            "points" => self.points = parse(key, value)?,
            "keep" => self.keep = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "scale" => {
                self.scale = match value {
                    "default" => Scale::Default,
                    "miniature" => Scale::Miniature,
                    _ => return Err(CliError::Usage(format!("`scale`: expected default or miniature, got `{value}`"))),
                }
            }
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("{origin}:{}: expected `key = value`", i + 1)));
            };
            self.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(CliError::Usage(msg.into())) };
        check(self.steps >= 1, "steps must be at least 1")?;
        check(self.batch >= 1, "batch must be at least 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive")?;
        check(self.input_points >= 1, "input_points must be at least 1")?;
        check(self.checkpoint_every >= 1, "checkpoint_every must be at least 1")
    }

    pub fn model(&self) -> ModelConfig {
        match self.scale {
            Scale::Default => ModelConfig::new(self.mode),
            Scale::Miniature => ModelConfig::miniature(self.mode),
        }
    }

    /// The configuration in the file format, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let scale = match self.scale {
            Scale::Default => "default",
            Scale::Miniature => "miniature",
        };
        let mut s = String::new();
        let pairs: [(&str, String); 15] = [
            ("mode", self.mode.to_string()),
            ("loss", self.loss.to_string()),
            ("lr", self.lr.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("input_points", self.input_points.to_string()),
            ("split", self.split.clone()),
            ("shapes", self.shapes.to_string()),
            ("points", self.points.to_string()),
            ("keep", self.keep.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("scale", scale.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig { mode: Variant::FoldCosine, loss: LossKind::CdOnly, lr: 3e-4, scale: Scale::Miniature, ..RunConfig::default() };
        c.out_dir = "somewhere/else".into();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "t").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# note\n\n steps = 7 # trailing\nmode=no_skip\n", "t").unwrap();
        assert_eq!((c.steps, c.mode), (7, Variant::NoSkip));
        assert!(matches!(c.apply_text("steps 7", "t"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_text("colour = red", "t"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_text("mode = sideways", "t"), Err(CliError::Usage(_))));
        c.steps = 0;
        assert!(c.validate().is_err());
    }
}
