//! Flat `key = value` run configuration: one key per line, `#` comments.
//! Unknown keys are errors (listed by name), so typos fail fast.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::data::{sample_synthetic, synthetic_digits, DataSet, Synthetic2D};
use crate::error::{Error, Result};
use crate::landscape::LandscapeConfig;
use crate::loss::LossWeights;
use crate::models::{Architecture, ModelConfig, NoiseMode, DEFAULT_INIT_STD, DEFAULT_OBS_SIGMA};
use crate::optim::AdamHyper;
use crate::rng::SeedTree;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    /// Two-component Gaussian mixture at (+-sep, 0).
    Mixture2 { sep: f64, std: f64, n: usize },
    Ring { radius: f64, std: f64, n: usize },
    /// Procedural two-class digit images.
    Digits { n: usize, size: usize },
    Idx { images: PathBuf, labels: Option<PathBuf>, limit: Option<usize>, downsample: bool },
}

impl DataSpec {
    pub fn load(&self, seeds: &SeedTree) -> Result<DataSet> {
        match self {
            DataSpec::Mixture2 { sep, std, n } => {
                let spec = Synthetic2D::GaussianMixture {
                    means: vec![[-sep, 0.0], [*sep, 0.0]],
                    weights: vec![0.5, 0.5],
                    std: *std,
                };
                sample_synthetic(&spec, *n, &mut seeds.stream("dataset", &[]))
            }
            DataSpec::Ring { radius, std, n } => {
                let spec = Synthetic2D::Ring { radius: *radius, std: *std };
                sample_synthetic(&spec, *n, &mut seeds.stream("dataset", &[]))
            }
            DataSpec::Digits { n, size } => {
                synthetic_digits(*n, *size, &mut seeds.stream("dataset", &[]))
            }
            DataSpec::Idx { images, labels, limit, downsample } => {
                crate::data::load_idx(images, labels.as_deref(), *limit, *downsample)
            }
        }
    }

    /// The mode centers of the source distribution, when it has any.
    pub fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            DataSpec::Mixture2 { sep, .. } => {
                Some(vec![vec![-sep, 0.0], vec![*sep, 0.0]])
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartsKind {
    Data,
    Samples,
    Both,
}

/// Everything a run needs: trainer, model, data, landscape, evaluation.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub landscape: LandscapeConfig,
    pub starts: StartsKind,
    pub max_starts: Option<usize>,
    pub mask_tag: Option<String>,
    /// Fill-update cadence for occluded training, in epochs.
    pub recovery_interval_epochs: u64,
    pub checkpoint_in: Option<PathBuf>,
    pub probe_lo: f64,
    pub probe_hi: f64,
    pub probe_count: usize,
    pub mode_radius: f64,
    pub sample_count: usize,
    pub holdout: usize,
}

struct Reader {
    map: BTreeMap<String, String>,
    taken: BTreeSet<String>,
}

impl Reader {
    fn parse(text: &str) -> Result<Reader> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
        }
        Ok(Reader { map, taken: BTreeSet::new() })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.taken.insert(key.to_string());
        }
        v
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a number"))),
            None => Ok(default),
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not an integer"))),
            None => Ok(default),
        }
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not an integer"))),
            None => Ok(default),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            Some(s) => match s.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                other => Err(Error::Config(format!("key `{key}`: `{other}` is not a bool"))),
            },
            None => Ok(default),
        }
    }

    fn finish(self) -> Result<()> {
        let unused: Vec<String> =
            self.map.keys().filter(|k| !self.taken.contains(*k)).cloned().collect();
        if !unused.is_empty() {
            return Err(Error::Config(format!("unknown config key(s): {}", unused.join(", "))));
        }
        Ok(())
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut r = Reader::parse(text)?;

    // Trainer.
    let train = TrainConfig {
        iterations: r.u64_or("iterations", 1000)?,
        batch_data: r.usize_or("batch_data", 64)?,
        batch_gen: r.usize_or("batch_gen", 64)?,
        lr_alpha: r.f64_or("lr_alpha", 1e-4)?,
        lr_phi: r.f64_or("lr_phi", 3e-4)?,
        lr_theta: r.f64_or("lr_theta", 3e-4)?,
        theta_steps: r.usize_or("theta_steps", 1)?,
        weight_decay: r.f64_or("weight_decay", 5e-4)?,
        adam: AdamHyper {
            beta1: r.f64_or("adam_beta1", 0.9)?,
            beta2: r.f64_or("adam_beta2", 0.999)?,
            eps: r.f64_or("adam_eps", 1e-8)?,
        },
        seed: r.u64_or("seed", 0)?,
        weights: LossWeights {
            w_recon: r.f64_or("w_recon", 1.0)?,
            w_klprior: r.f64_or("w_klprior", 1.0)?,
            w_sleep: r.f64_or("w_sleep", 1.0)?,
            w_energy: r.f64_or("w_energy", 1.0)?,
        },
        gen_noise: match r.raw("gen_noise").as_deref() {
            None | Some("gaussian") => NoiseMode::Gaussian,
            Some("none") => NoiseMode::None,
            Some(other) => {
                return Err(Error::Config(format!(
                    "key `gen_noise`: `{other}` is not one of none|gaussian"
                )))
            }
        },
        sleep_detach_theta: r.bool_or("sleep_detach_theta", false)?,
        grad_clip: match r.raw("grad_clip").as_deref() {
            None | Some("none") => None,
            Some(s) => Some(s.parse().map_err(|_| {
                Error::Config(format!("key `grad_clip`: `{s}` is not a number or `none`"))
            })?),
        },
        log_interval: r.u64_or("log_interval", 50)?,
        checkpoint_interval: r.u64_or("checkpoint_interval", 1000)?,
    };

    // Model.
    let arch_name = r.raw("architecture").unwrap_or_else(|| "mlp".to_string());
    let latent_dim = r.usize_or("latent_dim", if arch_name == "mlp" { 2 } else { 32 })?;
    let base_width = r.usize_or("base_width", 8)?;
    let model = match arch_name.as_str() {
        "mlp" => {
            let hidden_str = r.raw("hidden").unwrap_or_else(|| "64,64".to_string());
            let hidden: Vec<usize> = hidden_str
                .split(',')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("key `hidden`: `{s}` is not an integer"))
                    })
                })
                .collect::<Result<_>>()?;
            let signal_dim = r.usize_or("signal_dim", 2)?;
            let mut m = ModelConfig::mlp(hidden, latent_dim, signal_dim);
            m.gen_final_tanh = r.bool_or("gen_final_tanh", false)?;
            m
        }
        "conv28" => {
            let mut m = ModelConfig::conv28(base_width, latent_dim);
            m.gen_final_tanh = r.bool_or("gen_final_tanh", true)?;
            m
        }
        "conv14" => {
            let mut m = ModelConfig::conv14(base_width, latent_dim);
            m.gen_final_tanh = r.bool_or("gen_final_tanh", true)?;
            m
        }
        other => {
            return Err(Error::Config(format!(
                "key `architecture`: `{other}` is not one of mlp|conv28|conv14"
            )))
        }
    };
    let mut model = model;
    model.init_std = r.f64_or("init_std", DEFAULT_INIT_STD)?;
    model.obs_sigma = r.f64_or("obs_sigma", DEFAULT_OBS_SIGMA)?;
    model.validate()?;

    // Data.
    let data_name = r.raw("data").unwrap_or_else(|| "mixture2".to_string());
    let data_n = r.usize_or("data_n", 4096)?;
    let data = match data_name.as_str() {
        "mixture2" => DataSpec::Mixture2 {
            sep: r.f64_or("mixture_sep", 2.0)?,
            std: r.f64_or("mixture_std", 0.3)?,
            n: data_n,
        },
        "ring" => DataSpec::Ring {
            radius: r.f64_or("ring_radius", 1.5)?,
            std: r.f64_or("ring_std", 0.1)?,
            n: data_n,
        },
        "digits" => DataSpec::Digits { n: data_n, size: r.usize_or("image_size", 14)? },
        other => {
            if let Some(path) = other.strip_prefix("idx:") {
                let labels = r.raw("labels").map(PathBuf::from);
                let limit = r.raw("data_limit").map(|s| {
                    s.parse::<usize>().map_err(|_| {
                        Error::Config(format!("key `data_limit`: `{s}` is not an integer"))
                    })
                });
                DataSpec::Idx {
                    images: PathBuf::from(path),
                    labels,
                    limit: limit.transpose()?,
                    downsample: r.bool_or("downsample", false)?,
                }
            } else {
                return Err(Error::Config(format!(
                    "key `data`: `{other}` is not one of mixture2|ring|digits|idx:PATH"
                )));
            }
        }
    };

    // Landscape.
    let landscape = LandscapeConfig {
        step: r.f64_or("ls_step", 1e-2)?,
        max_steps: r.usize_or("ls_max_steps", 2000)?,
        grad_tol: r.f64_or("ls_grad_tol", 1e-4)?,
        merge_dist: r.f64_or("ls_merge_dist", 0.5)?,
        merge_energy: r.f64_or("ls_merge_energy", 0.1)?,
        interp_points: r.usize_or("ls_interp_points", 64)?,
        min_basin_size: r.usize_or("ls_min_basin_size", 4)?,
    };
    let starts = match r.raw("ls_starts").as_deref() {
        None | Some("data") => StartsKind::Data,
        Some("samples") => StartsKind::Samples,
        Some("both") => StartsKind::Both,
        Some(other) => {
            return Err(Error::Config(format!(
                "key `ls_starts`: `{other}` is not one of data|samples|both"
            )))
        }
    };
    let max_starts = match r.raw("ls_max_starts") {
        Some(s) => Some(s.parse::<usize>().map_err(|_| {
            Error::Config(format!("key `ls_max_starts`: `{s}` is not an integer"))
        })?),
        None => None,
    };

    let cfg = RunConfig {
        train,
        model,
        data,
        landscape,
        starts,
        max_starts,
        mask_tag: r.raw("mask"),
        recovery_interval_epochs: r.u64_or("recovery_interval", 1)?,
        checkpoint_in: r.raw("checkpoint").map(PathBuf::from),
        probe_lo: r.f64_or("probe_lo", -1.0)?,
        probe_hi: r.f64_or("probe_hi", 1.0)?,
        probe_count: r.usize_or("probe_count", 1024)?,
        mode_radius: r.f64_or("mode_radius", 0.9)?,
        sample_count: r.usize_or("sample_count", 64)?,
        holdout: r.usize_or("holdout", 0)?,
    };
    r.finish()?;
    cfg.train.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Canonical dump; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        let t = &self.train;
        kv("seed", t.seed.to_string());
        kv("iterations", t.iterations.to_string());
        kv("batch_data", t.batch_data.to_string());
        kv("batch_gen", t.batch_gen.to_string());
        kv("lr_alpha", t.lr_alpha.to_string());
        kv("lr_phi", t.lr_phi.to_string());
        kv("lr_theta", t.lr_theta.to_string());
        kv("theta_steps", t.theta_steps.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("adam_beta1", t.adam.beta1.to_string());
        kv("adam_beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("w_recon", t.weights.w_recon.to_string());
        kv("w_klprior", t.weights.w_klprior.to_string());
        kv("w_sleep", t.weights.w_sleep.to_string());
        kv("w_energy", t.weights.w_energy.to_string());
        kv(
            "gen_noise",
            match t.gen_noise {
                NoiseMode::Gaussian => "gaussian".into(),
                NoiseMode::None => "none".into(),
            },
        );
        kv("sleep_detach_theta", t.sleep_detach_theta.to_string());
        kv("grad_clip", t.grad_clip.map_or("none".into(), |v| v.to_string()));
        kv("log_interval", t.log_interval.to_string());
        kv("checkpoint_interval", t.checkpoint_interval.to_string());

        match &self.model.architecture {
            Architecture::Mlp { hidden } => {
                kv("architecture", "mlp".into());
                kv(
                    "hidden",
                    hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
                );
                kv("signal_dim", self.model.signal_shape[0].to_string());
            }
            Architecture::Conv28 { base_width } => {
                kv("architecture", "conv28".into());
                kv("base_width", base_width.to_string());
            }
            Architecture::Conv14 { base_width } => {
                kv("architecture", "conv14".into());
                kv("base_width", base_width.to_string());
            }
        }
        kv("latent_dim", self.model.latent_dim.to_string());
        kv("init_std", self.model.init_std.to_string());
        kv("obs_sigma", self.model.obs_sigma.to_string());
        kv("gen_final_tanh", self.model.gen_final_tanh.to_string());

        match &self.data {
            DataSpec::Mixture2 { sep, std, n } => {
                kv("data", "mixture2".into());
                kv("mixture_sep", sep.to_string());
                kv("mixture_std", std.to_string());
                kv("data_n", n.to_string());
            }
            DataSpec::Ring { radius, std, n } => {
                kv("data", "ring".into());
                kv("ring_radius", radius.to_string());
                kv("ring_std", std.to_string());
                kv("data_n", n.to_string());
            }
            DataSpec::Digits { n, size } => {
                kv("data", "digits".into());
                kv("data_n", n.to_string());
                kv("image_size", size.to_string());
            }
            DataSpec::Idx { images, labels, limit, downsample } => {
                kv("data", format!("idx:{}", images.display()));
                if let Some(l) = labels {
                    kv("labels", l.display().to_string());
                }
                if let Some(l) = limit {
                    kv("data_limit", l.to_string());
                }
                kv("downsample", downsample.to_string());
            }
        }

        let l = &self.landscape;
        kv("ls_step", l.step.to_string());
        kv("ls_max_steps", l.max_steps.to_string());
        kv("ls_grad_tol", l.grad_tol.to_string());
        kv("ls_merge_dist", l.merge_dist.to_string());
        kv("ls_merge_energy", l.merge_energy.to_string());
        kv("ls_interp_points", l.interp_points.to_string());
        kv("ls_min_basin_size", l.min_basin_size.to_string());
        kv(
            "ls_starts",
            match self.starts {
                StartsKind::Data => "data".into(),
                StartsKind::Samples => "samples".into(),
                StartsKind::Both => "both".into(),
            },
        );
        if let Some(m) = self.max_starts {
            kv("ls_max_starts", m.to_string());
        }
        if let Some(mask) = &self.mask_tag {
            kv("mask", mask.clone());
        }
        kv("recovery_interval", self.recovery_interval_epochs.to_string());
        if let Some(c) = &self.checkpoint_in {
            kv("checkpoint", c.display().to_string());
        }
        kv("probe_lo", self.probe_lo.to_string());
        kv("probe_hi", self.probe_hi.to_string());
        kv("probe_count", self.probe_count.to_string());
        kv("mode_radius", self.mode_radius.to_string());
        kv("sample_count", self.sample_count.to_string());
        kv("holdout", self.holdout.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_render_round_trips() {
        let cfg = parse_run_config("").unwrap();
        assert_eq!(cfg.train.lr_alpha, 1e-4);
        assert_eq!(cfg.train.weight_decay, 5e-4);
        assert_eq!(cfg.train.theta_steps, 1);
        let rendered = cfg.render();
        let reparsed = parse_run_config(&rendered).unwrap();
        assert_eq!(reparsed.render(), rendered);
    }

    #[test]
    fn unknown_key_is_listed() {
        let err = parse_run_config("lr_alpho = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lr_alpho"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_run_config("# full line comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn duplicate_key_is_error() {
        assert!(parse_run_config("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn conv_architecture_parses() {
        let cfg =
            parse_run_config("architecture = conv14\nbase_width = 4\nlatent_dim = 8\ndata = digits\n")
                .unwrap();
        assert_eq!(cfg.model.architecture, Architecture::Conv14 { base_width: 4 });
        assert_eq!(cfg.model.signal_shape, vec![1, 14, 14]);
        assert!(cfg.model.gen_final_tanh);
    }

    #[test]
    fn bad_values_are_reported_with_key() {
        let err = parse_run_config("lr_alpha = fast\n").unwrap_err();
        assert!(err.to_string().contains("lr_alpha"));
        let err = parse_run_config("architecture = resnet\n").unwrap_err();
        assert!(err.to_string().contains("resnet"));
    }
}
