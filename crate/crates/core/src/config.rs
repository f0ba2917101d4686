//! TOML run configuration shared by every command.
//!
//! Every key is optional; an empty file gives the defaults below. Unknown
//! keys are rejected.
//!
//! ```toml
//! seed = 0                 # master seed, see RunConfig::component_seed
//! skeleton = "canonical"
//! samples = 200            # corpus size for `synth`
//!
//! [synth.sampler]          # canvas, bone lengths, angle ranges, margin
//! height = 64
//! width = 64
//! [synth.groundtruth]      # mode = "gaussian" | "disk", gauss_sigma, radius_factor
//! [synth.noise]            # jitter_sigma, amplitude_noise, false_peak_prob, false_peak_gain
//!
//! [normalize]              # eps_pos, theta_tol_deg, blur_sigma, normalize_body, ...
//! [net]                    # widths = [16, 16], kernels = [9, 7, 7]
//! [train]                  # steps, lr, fine_tune_steps, fine_tune_lr, loss_norm, seed
//! [eval]                   # alpha, ref_mode = "torso" | "head", auc_max, auc_step
//! [ablation]               # n_eval
//! [multiscale]             # width, phase_steps, lr, ...
//! [paths]                  # corpus, out
//! ```

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::AblationConfig;
use crate::metrics::EvalConfig;
use crate::normalize::NormalizeConfig;
use crate::refine::{MultiScaleConfig, RefineNetSpec, TrainConfig};
use crate::skeleton::{canonical_skeleton, Skeleton};
use crate::synthdata::SynthConfig;

/// Widths and kernels of the refinement networks; joint counts come from
/// the skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub widths: [usize; 2],
    pub kernels: [usize; 3],
}

impl Default for NetShape {
    fn default() -> Self {
        let c = RefineNetSpec::compact(1, 1);
        NetShape {
            widths: c.widths,
            kernels: c.kernels,
        }
    }
}

impl NetShape {
    pub fn spec(&self, k: usize, j: usize) -> RefineNetSpec {
        RefineNetSpec {
            k,
            j,
            widths: self.widths,
            kernels: self.kernels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub n_eval: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { n_eval: 300 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Randomness consumers derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// Held-out evaluation samples of the ablation.
    HeldOut,
    /// Network initialization.
    Init,
    /// Example order of the multi-scale study.
    MultiScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub skeleton: String,
    pub samples: usize,
    pub synth: SynthConfig,
    pub normalize: NormalizeConfig,
    pub net: NetShape,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSection,
    pub multiscale: MultiScaleConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            skeleton: "canonical".into(),
            samples: 200,
            synth: SynthConfig::default(),
            normalize: NormalizeConfig::default(),
            net: NetShape::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationSection::default(),
            multiscale: MultiScaleConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let checks = || -> Result<()> {
            self.skeleton()?;
            self.synth.validate()?;
            self.train.validate()?;
            self.eval.validate()?;
            self.net.spec(1, 1).build()?;
            Ok(())
        };
        checks().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        match self.skeleton.as_str() {
            "canonical" => Ok(canonical_skeleton()),
            other => Err(Error::Config(format!("unknown skeleton {other:?} (only \"canonical\")"))),
        }
    }

    /// Seed of one consumer: the first draw of stream `component` of a
    /// generator seeded with the master seed. Corpus samples use the master
    /// seed itself.
    pub fn component_seed(&self, component: Component) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(component as u64 + 1);
        rng.next_u64()
    }

    /// Training configuration with the initialization seed filled in; the
    /// configured `train.seed` offsets it.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.component_seed(Component::Init).wrapping_add(self.train.seed),
            ..self.train
        }
    }

    pub fn ablation(&self) -> Result<AblationConfig> {
        let k = self.skeleton()?.num_joints();
        let train = self.train_config();
        Ok(AblationConfig {
            synth: self.synth,
            train_seed: self.seed,
            eval_seed: self.component_seed(Component::HeldOut),
            n_eval: self.ablation.n_eval,
            net: self.net.spec(k, k),
            global: train,
            limb: train,
            normalize: self.normalize,
            eval: self.eval,
        })
    }

    pub fn multiscale_config(&self) -> MultiScaleConfig {
        MultiScaleConfig {
            seed: self.component_seed(Component::MultiScale),
            ..self.multiscale.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.train.steps = 5;
        cfg.paths.out = Some("runs/a".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn nested_keys_parse() {
        let cfg = RunConfig::from_toml(
            "seed = 3\n[synth.noise]\nfalse_peak_prob = 0.5\n[eval]\nref_mode = \"head\"\n[train]\nloss_norm = \"sum\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.synth.noise.false_peak_prob, 0.5);
        assert_eq!(cfg.eval.ref_mode, crate::metrics::RefMode::Head);
        assert_eq!(cfg.train.loss_norm, crate::nnet::LossNorm::Sum);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[train]\nrate = 0.1", "[synth.noise]\njitter = 2.0", "[bogus]"] {
            match RunConfig::from_toml(text) {
                Err(Error::Config(_)) => {}
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["skeleton = \"mpii\"", "[train]\nlr = -1.0", "[synth.noise]\nfalse_peak_prob = 2.0", "[net]\nkernels = [9, 8, 7]"] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn component_seeds_differ_and_follow_the_master_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        let comps = [Component::HeldOut, Component::Init, Component::MultiScale];
        let seeds: Vec<u64> = comps.iter().map(|&c| a.component_seed(c)).collect();
        assert!(seeds.iter().all(|&s| s != a.seed));
        assert_ne!(seeds[0], seeds[1]);
        assert_ne!(seeds[1], seeds[2]);
        assert_ne!(a.component_seed(Component::Init), b.component_seed(Component::Init));
        let abl = a.ablation().unwrap();
        assert_ne!(abl.train_seed, abl.eval_seed);
    }
}
