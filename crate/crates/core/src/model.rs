//! The U-shaped network: ResNet encoder, MSAA skips, CSMamba decoder and
//! per-stage segmentation heads.

use cmunet_tensor::{no_grad, Conv2dSpec, Element, ParamStore, PoolKind, ResizeMode, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{CsMambaBlock, CsMambaConfig, Msaa, MsaaConfig};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Init, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub decoder_csmamba_per_stage: usize,
    pub num_classes: usize,
    pub msaa: MsaaConfig,
    pub csmamba: CsMambaConfig,
    pub aux_weight: f64,
    /// Classes averaged into mF1 / mIoU; empty means all.
    pub included_classes: Vec<usize>,
    /// Replace MSAA skips by a plain 1x1 projection of the encoder feature.
    pub use_msaa: bool,
    /// Attach auxiliary heads to every decoder stage.
    pub multi_output: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            encoder_channels: vec![16, 32, 64, 128],
            blocks_per_stage: vec![2, 2, 2, 2],
            decoder_csmamba_per_stage: 1,
            num_classes: 4,
            msaa: MsaaConfig::default(),
            csmamba: CsMambaConfig::default(),
            aux_weight: 0.4,
            included_classes: Vec::new(),
            use_msaa: true,
            multi_output: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// ResNet-18 widths and depths, `N = 16`, six classes.
    pub fn paper_scale() -> Self {
        Self {
            encoder_channels: vec![64, 128, 256, 512],
            num_classes: 6,
            csmamba: CsMambaConfig { state_size: 16, ..CsMambaConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.len() != 4 || self.blocks_per_stage.len() != 4 {
            return bad("encoder_channels and blocks_per_stage need four entries".into());
        }
        if self.encoder_channels.contains(&0) || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if let Some(&c) = self.included_classes.iter().find(|&&c| c >= self.num_classes) {
            return bad(format!("included class {c} out of range"));
        }
        if self.aux_weight.is_nan() || self.aux_weight < 0.0 {
            return bad("aux_weight must be non-negative".into());
        }
        for &c in &self.encoder_channels[..3] {
            self.msaa.widths(c)?;
            self.csmamba.inner(self.skip_channels(c))?;
        }
        if self.csmamba.state_size == 0 {
            return bad("state_size must be positive".into());
        }
        Ok(())
    }

    fn skip_channels(&self, c: usize) -> usize {
        3 * c / self.msaa.reduction.max(1)
    }

    /// Classes used for metric means.
    pub fn metric_classes(&self) -> Vec<usize> {
        if self.included_classes.is_empty() {
            (0..self.num_classes).collect()
        } else {
            self.included_classes.clone()
        }
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Element> {
    pub levels: [Tensor<T>; 4],
}

#[derive(Clone, Debug)]
pub struct ModelOutputs<T: Element> {
    pub final_logits: Tensor<T>,
    /// One map per decoder stage, coarsest first; empty without multi-output.
    pub aux_logits: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct BasicBlock<T: Element> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Element> BasicBlock<T> {
    fn new(store: &mut ParamStore<T>, name: &str, cin: usize, c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, tag: &str, ci: usize, k: usize, s: usize| {
            Conv2d::new(store, &format!("{name}.{tag}"), ci, c, k, Conv2dSpec::new(s, k / 2, 1), false, Init::He, rng)
        };
        let conv1 = conv(store, rng, "conv1", cin, 3, stride)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c)?;
        let conv2 = conv(store, rng, "conv2", c, 3, 1)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c)?;
        let shortcut = if cin != c || stride != 1 {
            Some((conv(store, rng, "down", cin, 1, stride)?, BatchNorm::new(store, &format!("{name}.down_bn"), c)?))
        } else {
            None
        };
        Ok(Self { conv1, bn1, conv2, bn2, shortcut })
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.relu())
    }
}

/// ResNet trunk without the classifier.
#[derive(Clone, Debug)]
pub struct Encoder<T: Element> {
    stem: Conv2d<T>,
    stem_bn: BatchNorm<T>,
    stages: Vec<Vec<BasicBlock<T>>>,
}

impl<T: Element> Encoder<T> {
    fn new(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c0 = cfg.encoder_channels[0];
        let stem = Conv2d::new(store, "encoder.stem", cfg.in_channels, c0, 7, Conv2dSpec::new(2, 3, 1), false, Init::He, rng)?;
        let stem_bn = BatchNorm::new(store, "encoder.stem_bn", c0)?;
        let mut stages = Vec::new();
        let mut cin = c0;
        for (s, (&c, &n)) in cfg.encoder_channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("encoder.layer{}.{b}", s + 1), cin, c, stride, rng)?);
                cin = c;
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stem_bn, stages })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        if x.ndim() != 4 || !x.shape()[2].is_multiple_of(32) || !x.shape()[3].is_multiple_of(32) || x.shape()[2] == 0 || x.shape()[3] == 0 {
            return Err(TensorError::Dimension {
                op: "encoder",
                msg: format!("input spatial size must be a positive multiple of 32, got {:?}", x.shape()),
            }
            .into());
        }
        let y = self.stem_bn.forward(&self.stem.forward(x)?, mode)?.relu();
        let mut y = y.pool2d(PoolKind::Max, 3, 2, 1)?;
        let mut levels = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                y = b.forward(&y, mode)?;
            }
            levels.push(y.clone());
        }
        let levels: [Tensor<T>; 4] = levels.try_into().expect("four stages");
        Ok(FeaturePyramid { levels })
    }
}

#[derive(Clone, Debug)]
enum Skip<T: Element> {
    Msaa(Box<Msaa<T>>),
    Projection(Conv2d<T>),
}

#[derive(Clone, Debug)]
pub struct DecoderStage<T: Element> {
    /// Pyramid level whose resolution this stage works at.
    pub level: usize,
    skip: Skip<T>,
    pub deep_proj: Conv2d<T>,
    pub blocks: Vec<CsMambaBlock<T>>,
    pub aux_head: Option<Conv2d<T>>,
}

impl<T: Element> DecoderStage<T> {
    /// Skip feature for this stage from the pyramid.
    pub fn skip(&self, f: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        let i = self.level;
        match &self.skip {
            Skip::Msaa(m) => {
                let prev = (i > 0).then(|| &f.levels[i - 1]);
                m.forward(prev, &f.levels[i], Some(&f.levels[i + 1]))
            }
            Skip::Projection(p) => p.forward(&f.levels[i]),
        }
    }

    /// Upsample `deep` 2x, project to the skip width, add the skip, then run
    /// the CSMamba blocks.
    pub fn forward(&self, deep: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (skip.shape()[2], skip.shape()[3]);
        if deep.shape()[2] * 2 != h || deep.shape()[3] * 2 != w {
            return Err(TensorError::Dimension {
                op: "decoder_stage",
                msg: format!("deep {:?} is not half of skip {:?}", deep.shape(), skip.shape()),
            }
            .into());
        }
        let up = self.deep_proj.forward(&deep.resize(h, w, ResizeMode::Bilinear)?)?;
        let mut y = up.add(skip)?;
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }
}

pub struct CmUnet<T: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder<T>,
    /// Coarsest stage first.
    pub decoder: Vec<DecoderStage<T>>,
    pub head: Conv2d<T>,
}

impl<T: Element> CmUnet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let ch = &config.encoder_channels;
        let k = config.num_classes;
        let mut decoder = Vec::new();
        let mut deep = ch[3];
        for level in (0..3).rev() {
            let name = format!("decoder.stage{}", 3 - level);
            let (_, c2) = config.msaa.widths(ch[level])?;
            let skip = if config.use_msaa {
                let prev = (level > 0).then(|| ch[level - 1]);
                Skip::Msaa(Box::new(Msaa::new(&mut store, &format!("msaa{}", level + 1), prev, ch[level], Some(ch[level + 1]), &config.msaa, &mut rng)?))
            } else {
                Skip::Projection(Conv2d::pointwise(&mut store, &format!("skip{}", level + 1), ch[level], c2, &mut rng)?)
            };
            let deep_proj = Conv2d::pointwise(&mut store, &format!("{name}.deep_proj"), deep, c2, &mut rng)?;
            let blocks = (0..config.decoder_csmamba_per_stage)
                .map(|b| CsMambaBlock::new(&mut store, &format!("{name}.block{b}"), c2, &config.csmamba, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let aux_head = if config.multi_output {
                Some(Conv2d::pointwise(&mut store, &format!("{name}.aux_head"), c2, k, &mut rng)?)
            } else {
                None
            };
            decoder.push(DecoderStage { level, skip, deep_proj, blocks, aux_head });
            deep = c2;
        }
        let head = Conv2d::pointwise(&mut store, "head", deep, k, &mut rng)?;
        Ok(Self { config, store, encoder, decoder, head })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    /// Parameter count per top-level module (`encoder`, `msaa1`, `decoder`, ...).
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.store.params() {
            let top = p.name().split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(n, _)| *n == top) {
                Some((_, c)) => *c += p.numel(),
                None => out.push((top, p.numel())),
            }
        }
        out
    }

    pub fn encoder_parameter_count(&self) -> usize {
        self.store.params().iter().filter(|p| p.name().starts_with("encoder.")).map(|p| p.numel()).sum()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ModelOutputs<T>> {
        let feats = self.encoder.forward(x, mode)?;
        let mut deep = feats.levels[3].clone();
        let mut aux_logits = Vec::new();
        for stage in &self.decoder {
            let skip = stage.skip(&feats)?;
            deep = stage.forward(&deep, &skip)?;
            if let Some(h) = &stage.aux_head {
                aux_logits.push(h.forward(&deep)?);
            }
        }
        // 1x1 head and bilinear upsampling commute; run the head at low resolution.
        let logits = self.head.forward(&deep)?;
        let final_logits = logits.resize(x.shape()[2], x.shape()[3], ResizeMode::Bilinear)?;
        Ok(ModelOutputs { final_logits, aux_logits })
    }

    /// Eval-mode logits without recording a graph.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        no_grad(|| Ok(self.forward(x, Mode::Eval)?.final_logits))
    }
}
