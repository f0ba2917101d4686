//! Corpus directories: `index.json` plus, per image, `<id>.json`
//! (annotation) and `<id>.smap` (simulated detector maps). With
//! `write_groundtruth` set, `<id>.gt.smap` holds the clean groundtruth too;
//! otherwise it is re-rendered from the annotation and the recorded spec.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_pose, simulate_detector, Annotation, NoiseSpec, PoseSamplerConfig};
use crate::error::{Error, Result};
use crate::scoremap::{make_groundtruth, read_smap, write_smap, GroundtruthSpec, ScoreMap};
use crate::skeleton::Skeleton;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sampler: PoseSamplerConfig,
    pub groundtruth: GroundtruthSpec,
    pub noise: NoiseSpec,
    pub write_groundtruth: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.groundtruth.validate()?;
        self.noise.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub annotation: Annotation,
    /// Clean groundtruth stack the detector maps were derived from.
    pub groundtruth: ScoreMap,
    pub detector: ScoreMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusIndex {
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub groundtruth: GroundtruthSpec,
    pub noise: NoiseSpec,
    pub ids: Vec<String>,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Sample `index` of the corpus identified by `seed`. Each index owns its
/// own random stream, so samples can be produced in any order.
pub fn generate_sample(cfg: &SynthConfig, sk: &Skeleton, seed: u64, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let kp = sample_pose(&cfg.sampler, &mut rng)?;
    let (h, w) = (cfg.sampler.height, cfg.sampler.width);
    let groundtruth = make_groundtruth(&kp, sk, &cfg.groundtruth, h, w)?;
    let detector = simulate_detector(&groundtruth, &cfg.noise, &mut rng);
    Ok(Sample {
        annotation: Annotation {
            id: sample_id(index),
            width: w,
            height: h,
            keypoints: kp,
        },
        groundtruth,
        detector,
    })
}

/// Samples `start..start + n` of the corpus identified by `seed`.
pub fn generate_corpus(cfg: &SynthConfig, sk: &Skeleton, seed: u64, start: usize, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (start..start + n)
        .into_par_iter()
        .map(|i| generate_sample(cfg, sk, seed, i))
        .collect()
}

/// Generate and write `n` samples to `dir`, creating it if needed.
pub fn write_corpus(dir: impl AsRef<Path>, cfg: &SynthConfig, sk: &Skeleton, seed: u64, n: usize) -> Result<CorpusIndex> {
    let dir = dir.as_ref();
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n).into_par_iter().try_for_each(|i| -> Result<()> {
        let s = generate_sample(cfg, sk, seed, i)?;
        let id = &s.annotation.id;
        super::write_annotation(dir.join(format!("{id}.json")), &s.annotation)?;
        write_smap(dir.join(format!("{id}.smap")), &s.detector)?;
        if cfg.write_groundtruth {
            write_smap(dir.join(format!("{id}.gt.smap")), &s.groundtruth)?;
        }
        Ok(())
    })?;
    let index = CorpusIndex {
        version: 1,
        seed,
        height: cfg.sampler.height,
        width: cfg.sampler.width,
        groundtruth: cfg.groundtruth,
        noise: cfg.noise,
        ids: (0..n).map(sample_id).collect(),
    };
    let path = dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<CorpusIndex> {
    let path = dir.as_ref().join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CorpusIndex = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    if index.version != 1 {
        return Err(Error::SchemaMismatch(format!("unsupported corpus version {}", index.version)));
    }
    Ok(index)
}

/// Load one sample. Groundtruth comes from `<id>.gt.smap` when present and
/// is re-rendered otherwise.
pub fn read_sample(dir: impl AsRef<Path>, index: &CorpusIndex, id: &str, sk: &Skeleton) -> Result<Sample> {
    let dir = dir.as_ref();
    let annotation = super::read_annotation(dir.join(format!("{id}.json")))?;
    let detector = read_smap(dir.join(format!("{id}.smap")))?;
    if detector.shape() != (sk.num_joints() + 1, index.height, index.width) {
        return Err(Error::SchemaMismatch(format!(
            "{id}.smap has shape {:?}, expected ({}, {}, {})",
            detector.shape(),
            sk.num_joints() + 1,
            index.height,
            index.width
        )));
    }
    let gt_path = dir.join(format!("{id}.gt.smap"));
    let groundtruth = if gt_path.exists() {
        read_smap(gt_path)?
    } else {
        make_groundtruth(&annotation.keypoints, sk, &index.groundtruth, index.height, index.width)?
    };
    Ok(Sample {
        annotation,
        groundtruth,
        detector,
    })
}

pub fn read_corpus(dir: impl AsRef<Path>, sk: &Skeleton) -> Result<(CorpusIndex, Vec<Sample>)> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    let samples = index
        .ids
        .par_iter()
        .map(|id| read_sample(dir, &index, id, sk))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}
