//! The default desk-scale benchmark: synthetic scenes, a toy text bank and an
//! encoder planted so that prototype colours land on their class embeddings.

use crate::clip_adapt::{plant_encoder, BackboneShape, DenseClip, Encoder, PlantConfig, DEFAULT_TAU};
use crate::dataio::{decode_ppm, encode_ppm, render_scene, BackgroundPolicy, Sample, SceneSpec};
use crate::error::Result;
use crate::seed;
use crate::textbank::{build_bank, ClassifierBank, PromptTemplateSet, ToyTextEncoder};

pub const DEFAULT_TEXT_DIM: usize = 32;

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub scene: SceneSpec,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub text_dim: usize,
    pub tau: f64,
    pub backbone: BackboneShape,
    pub plant: PlantConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::benchmark(),
            train_count: 48,
            eval_count: 24,
            seed: 0,
            text_dim: DEFAULT_TEXT_DIM,
            tau: DEFAULT_TAU,
            backbone: BackboneShape::default(),
            plant: PlantConfig::default(),
        }
    }
}

/// Build the text bank for a scene's class names.
pub fn scene_bank(scene: &SceneSpec, text_dim: usize, seed: u64) -> Result<ClassifierBank> {
    let enc = ToyTextEncoder::new(text_dim, seed::derive(seed, "text"))?;
    let with_bg = scene.background == BackgroundPolicy::Labeled;
    build_bank(&scene.names(), &PromptTemplateSet::default(), &enc, with_bg, seed)
}

/// Plant an encoder for the bank's text rows and the scene's prototypes.
pub fn scene_encoder(
    scene: &SceneSpec,
    bank: &ClassifierBank,
    shape: &BackboneShape,
    plant: &PlantConfig,
) -> Result<Encoder> {
    let (backbone, head) = plant_encoder(&scene.prototypes(), bank.text_rows(), shape, plant)?;
    Ok(Encoder { backbone, head })
}

/// Render scene `index` and pass it through 8-bit quantisation, exactly as a
/// write/read of the image file would.
pub fn quantized_scene(scene: &SceneSpec, seed: u64, index: u64) -> Result<Sample> {
    let s = render_scene(scene, seed, index)?;
    let image = decode_ppm(&encode_ppm(&s.image)?, "memory")?;
    Ok(Sample {
        image,
        labels: s.labels,
    })
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub bank: ClassifierBank,
    pub encoder: Encoder,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Benchmark {
    pub fn build(config: BenchmarkConfig) -> Result<Self> {
        config.scene.validate()?;
        let bank = scene_bank(&config.scene, config.text_dim, config.seed)?;
        let plant = PlantConfig {
            seed: seed::derive(config.seed, "plant"),
            ..config.plant.clone()
        };
        let encoder = scene_encoder(&config.scene, &bank, &config.backbone, &plant)?;
        let train_seed = seed::derive(config.seed, "train");
        let eval_seed = seed::derive(config.seed, "eval");
        let train = (0..config.train_count as u64)
            .map(|i| quantized_scene(&config.scene, train_seed, i))
            .collect::<Result<_>>()?;
        let eval = (0..config.eval_count as u64)
            .map(|i| quantized_scene(&config.scene, eval_seed, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            bank,
            encoder,
            train,
            eval,
        })
    }

    pub fn dense_clip(&self) -> Result<DenseClip> {
        DenseClip::new(&self.encoder, self.bank.clone(), self.config.tau)
    }
}
