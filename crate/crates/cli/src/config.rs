//! Flat `key = value` run configuration, layered as fidelity defaults, then
//! a config file, then command-line flags.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use runet_core::eval::{EnsembleMode, PostprocessConfig};
use runet_core::model::{odd_levels, NetworkSpec};
use runet_core::recurrent::PeepholeMode;
use runet_core::train::{LossReduction, TrainConfig, ValidationSchedule};
use runet_core::volume::{Direction, GeneratorConfig, Orientation};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fidelity {
    Desk,
    Paper,
}

impl FromStr for Fidelity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Fidelity::Desk),
            "paper" => Ok(Fidelity::Paper),
            _ => Err(format!("unknown fidelity `{s}` (desk|paper)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Runet,
    /// Plain U-net widened to match the RU-net's parameter count.
    Unet,
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "runet" => Ok(Arch::Runet),
            "unet" => Ok(Arch::Unet),
            _ => Err(format!("unknown architecture `{s}` (runet|unet)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub fidelity: Fidelity,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub volumes: usize,
    pub split: (f64, f64, f64),
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub orientation: Orientation,
    pub direction: Direction,
    pub arch: Arch,
    pub threshold: f64,
    pub ensemble: EnsembleMode,
    pub post: PostprocessConfig,
}

impl RunConfig {
    pub fn defaults(fidelity: Fidelity) -> Self {
        let (generator, volumes, network, train) = match fidelity {
            Fidelity::Desk => {
                let g = GeneratorConfig::default();
                let n = NetworkSpec::desk((g.size[0], g.size[1]));
                (g, 20, n, TrainConfig::desk())
            }
            Fidelity::Paper => {
                let g = GeneratorConfig::paper_scale();
                let n = NetworkSpec {
                    input_size: (g.size[0], g.size[1]),
                    ..NetworkSpec::default()
                };
                (g, 100, n, TrainConfig::default())
            }
        };
        RunConfig {
            fidelity,
            seed: 0,
            generator,
            volumes,
            split: (0.85, 0.05, 0.10),
            network,
            train,
            orientation: Orientation::Axial,
            direction: Direction::Forward,
            arch: Arch::Runet,
            threshold: 0.5,
            ensemble: EnsembleMode::Mean,
            post: PostprocessConfig::default(),
        }
    }

    /// Fidelity defaults, then `file` entries, then `overrides`, in order.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self, String> {
        let fidelity = overrides
            .iter()
            .chain(file)
            .find(|(k, _)| k == "fidelity")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Fidelity::Desk);
        let mut cfg = Self::defaults(fidelity);
        for (k, v) in file.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        let levels = file.iter().chain(overrides).rfind(|(k, _)| k == "clstm_levels");
        if levels.is_none_or(|(_, v)| v == "odd") {
            cfg.network.clstm_levels = odd_levels(cfg.network.depth);
        }
        cfg.train.seed = cfg.seed;
        cfg.network.input_size = (cfg.generator.size[0], cfg.generator.size[1]);
        cfg.network.validate().map_err(|e| e.to_string())?;
        cfg.generator.validate().map_err(|e| e.to_string())?;
        cfg.train.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        let g = &mut self.generator;
        let n = &mut self.network;
        let t = &mut self.train;
        match key {
            "fidelity" => self.fidelity = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "volumes" => self.volumes = num(key, value)?,
            "size_x" => g.size[0] = num(key, value)?,
            "size_y" => g.size[1] = num(key, value)?,
            "size_z" => g.size[2] = num(key, value)?,
            "tube_diameter_min" => g.tube_diameter.0 = num(key, value)?,
            "tube_diameter_max" => g.tube_diameter.1 = num(key, value)?,
            "apex_offset" => g.apex_offset = num(key, value)?,
            "speckle" => g.speckle = num(key, value)?,
            "blur_sigma" => g.blur_sigma = num(key, value)?,
            "label_fraction_min" => g.label_band.0 = num(key, value)?,
            "label_fraction_max" => g.label_band.1 = num(key, value)?,
            "ambiguity_fraction" => g.ambiguity_fraction = num(key, value)?,
            "crop_depth" => {
                g.crop_depth = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "split_train" => self.split.0 = num(key, value)?,
            "split_val" => self.split.1 = num(key, value)?,
            "split_test" => self.split.2 = num(key, value)?,
            "depth" => n.depth = num(key, value)?,
            "base_filters" => n.base_filters = num(key, value)?,
            "clstm_levels" => {
                n.clstm_levels = match value {
                    "odd" => odd_levels(n.depth),
                    "none" => BTreeSet::new(),
                    v => v
                        .split(',')
                        .map(|l| num::<usize>(key, l.trim()))
                        .collect::<Result<_, _>>()?,
                }
            }
            "dropout" => n.dropout_rate = num(key, value)?,
            "peephole" => {
                n.peephole = match value {
                    "full" => PeepholeMode::Full,
                    "per-channel" => PeepholeMode::PerChannel,
                    _ => return Err(format!("`peephole`: expected full|per-channel, got `{value}`")),
                }
            }
            "learning_rate" => t.learning_rate = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "epsilon" => t.epsilon = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "slice_batch_axial" => t.slice_batch_axial = num(key, value)?,
            "slice_batch_other" => t.slice_batch_other = num(key, value)?,
            "oversample_until_val_dsi" => t.oversample_until_val_dsi = num(key, value)?,
            "validate_every" => {
                t.validation = match value {
                    "step" => ValidationSchedule::EveryStep,
                    "epoch" => ValidationSchedule::EveryEpochs(1),
                    v => ValidationSchedule::EveryEpochs(num(key, v)?),
                }
            }
            "loss_reduction" => {
                t.loss_reduction = match value {
                    "batch" => LossReduction::Batch,
                    "mean-over-slices" => LossReduction::MeanOverSlices,
                    _ => return Err(format!("`loss_reduction`: expected batch|mean-over-slices, got `{value}`")),
                }
            }
            "orientation" => self.orientation = value.parse().map_err(|e| format!("{e}"))?,
            "direction" => self.direction = value.parse().map_err(|e| format!("{e}"))?,
            "arch" => self.arch = value.parse()?,
            "threshold" => self.threshold = num(key, value)?,
            "ensemble" => {
                self.ensemble = match value {
                    "mean" => EnsembleMode::Mean,
                    "sum" => EnsembleMode::Sum,
                    _ => return Err(format!("`ensemble`: expected mean|sum, got `{value}`")),
                }
            }
            "closing" => self.post.closing = num(key, value)?,
            "min_component_fraction" => self.post.min_fraction = num(key, value)?,
            "min_component_voxels" => self.post.min_voxels = num(key, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its resolved value; parsing this text yields the same config.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let n = &self.network;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "fidelity",
            match self.fidelity {
                Fidelity::Desk => "desk",
                Fidelity::Paper => "paper",
            }
            .into(),
        );
        kv("seed", self.seed.to_string());
        kv("volumes", self.volumes.to_string());
        kv("size_x", g.size[0].to_string());
        kv("size_y", g.size[1].to_string());
        kv("size_z", g.size[2].to_string());
        kv("tube_diameter_min", g.tube_diameter.0.to_string());
        kv("tube_diameter_max", g.tube_diameter.1.to_string());
        kv("apex_offset", g.apex_offset.to_string());
        kv("speckle", g.speckle.to_string());
        kv("blur_sigma", g.blur_sigma.to_string());
        kv("label_fraction_min", g.label_band.0.to_string());
        kv("label_fraction_max", g.label_band.1.to_string());
        kv("ambiguity_fraction", g.ambiguity_fraction.to_string());
        kv("crop_depth", g.crop_depth.map_or("none".into(), |d| d.to_string()));
        kv("split_train", self.split.0.to_string());
        kv("split_val", self.split.1.to_string());
        kv("split_test", self.split.2.to_string());
        kv("depth", n.depth.to_string());
        kv("base_filters", n.base_filters.to_string());
        let levels: Vec<String> = n.clstm_levels.iter().map(|l| l.to_string()).collect();
        kv("clstm_levels", if levels.is_empty() { "none".into() } else { levels.join(",") });
        kv("dropout", n.dropout_rate.to_string());
        kv(
            "peephole",
            match n.peephole {
                PeepholeMode::Full => "full",
                PeepholeMode::PerChannel => "per-channel",
            }
            .into(),
        );
        kv("learning_rate", t.learning_rate.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("epsilon", t.epsilon.to_string());
        kv("epochs", t.epochs.to_string());
        kv("slice_batch_axial", t.slice_batch_axial.to_string());
        kv("slice_batch_other", t.slice_batch_other.to_string());
        kv("oversample_until_val_dsi", t.oversample_until_val_dsi.to_string());
        kv(
            "validate_every",
            match t.validation {
                ValidationSchedule::EveryStep => "step".into(),
                ValidationSchedule::EveryEpochs(1) => "epoch".into(),
                ValidationSchedule::EveryEpochs(k) => k.to_string(),
            },
        );
        kv(
            "loss_reduction",
            match t.loss_reduction {
                LossReduction::Batch => "batch",
                LossReduction::MeanOverSlices => "mean-over-slices",
            }
            .into(),
        );
        kv("orientation", self.orientation.to_string());
        kv("direction", self.direction.name().into());
        kv(
            "arch",
            match self.arch {
                Arch::Runet => "runet",
                Arch::Unet => "unet",
            }
            .into(),
        );
        kv("threshold", self.threshold.to_string());
        kv(
            "ensemble",
            match self.ensemble {
                EnsembleMode::Mean => "mean",
                EnsembleMode::Sum => "sum",
            }
            .into(),
        );
        kv("closing", self.post.closing.to_string());
        kv("min_component_fraction", self.post.min_fraction.to_string());
        kv("min_component_voxels", self.post.min_voxels.to_string());
        s
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", no + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
