//! Shared encoder, task heads, generator and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::nn::{self, LayerSpec, Param, Sequential, Tensor, Trace};
use crate::par::Exec;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 14] = b"SELFPATH-CKPT\n";

/// Name of the main-task classifier head.
pub const MAIN_HEAD: &str = "main";
/// Name of the domain-prediction head.
pub const DOMAIN_HEAD: &str = "domain";
/// Name of the real-vs-fake head.
pub const DISCRIMINATOR_HEAD: &str = "discriminator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Four stride-2 conv + ReLU blocks.
    SmallConv,
    /// Stem conv, then four stride-2 stages each followed by a residual block.
    DeepResidual,
}

/// Total downsampling factor of both presets.
pub const ENCODER_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub input_size: usize,
    /// Channels of the shared representation.
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { architecture: Architecture::SmallConv, input_size: 128, width: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % ENCODER_STRIDE != 0 {
            return Err(Error::config(format!("input size {} must be a positive multiple of 16", self.input_size)));
        }
        if self.width < 4 {
            return Err(Error::config("encoder width must be at least 4"));
        }
        Ok(())
    }

    /// Side of the shared feature map.
    pub fn feature_side(&self) -> usize {
        self.input_size / ENCODER_STRIDE
    }

    fn stage_widths(&self) -> [usize; 4] {
        let w = self.width;
        [(w / 4).max(1), (w / 2).max(1), w, w]
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let widths = self.stage_widths();
        let mut specs = Vec::new();
        let mut prev = 3;
        if self.architecture == Architecture::DeepResidual {
            specs.push(LayerSpec::Conv { in_ch: 3, out_ch: widths[0], kernel: 3, stride: 1, pad: 1 });
            specs.push(LayerSpec::Relu);
            prev = widths[0];
        }
        for &c in &widths {
            specs.push(LayerSpec::Conv { in_ch: prev, out_ch: c, kernel: 3, stride: 2, pad: 1 });
            specs.push(LayerSpec::Relu);
            if self.architecture == Architecture::DeepResidual {
                specs.push(LayerSpec::Residual { channels: c });
            }
            prev = c;
        }
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Classifier,
    Decoder,
    Discriminator,
    Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Classes (classifier/domain) or output channels (decoder).
    pub outputs: usize,
    /// Adaptive average-pool output side for classifier heads.
    pub pool_side: usize,
    /// Hidden width of the discriminator and domain heads.
    pub hidden: usize,
    /// Gradient-reversal coefficient (domain head only).
    pub grl_lambda: f64,
}

impl HeadConfig {
    pub fn classifier(classes: usize) -> Self {
        HeadConfig { kind: HeadKind::Classifier, outputs: classes, pool_side: 1, hidden: 0, grl_lambda: 0.0 }
    }

    /// Classifier that keeps a `side x side` spatial grid before the linear
    /// layer, so positional structure (the jigmag arrangement) survives
    /// pooling.
    pub fn grid_classifier(classes: usize, side: usize) -> Self {
        HeadConfig { pool_side: side, ..Self::classifier(classes) }
    }

    pub fn decoder(channels: usize) -> Self {
        HeadConfig { kind: HeadKind::Decoder, outputs: channels, pool_side: 1, hidden: 0, grl_lambda: 0.0 }
    }

    pub fn discriminator(hidden: usize) -> Self {
        HeadConfig { kind: HeadKind::Discriminator, outputs: 1, pool_side: 1, hidden, grl_lambda: 0.0 }
    }

    pub fn domain(hidden: usize, grl_lambda: f64) -> Self {
        HeadConfig { kind: HeadKind::Domain, outputs: 2, pool_side: 1, hidden, grl_lambda }
    }

    pub fn layer_specs(&self, enc: &EncoderConfig) -> Result<Vec<LayerSpec>> {
        let c = enc.width;
        let side = enc.feature_side();
        let specs = match self.kind {
            HeadKind::Classifier => {
                if self.outputs < 2 {
                    return Err(Error::config("classifier head needs at least 2 outputs"));
                }
                if self.pool_side == 0 || side % self.pool_side != 0 {
                    return Err(Error::config(format!("cannot pool a {side}x{side} map to {}", self.pool_side)));
                }
                vec![
                    LayerSpec::AdaptiveAvgPool { side: self.pool_side },
                    LayerSpec::Flatten,
                    LayerSpec::Linear { inputs: c * self.pool_side * self.pool_side, outputs: self.outputs },
                ]
            }
            HeadKind::Domain => {
                if self.grl_lambda < 0.0 {
                    return Err(Error::config("grl_lambda must be nonnegative"));
                }
                vec![
                    LayerSpec::GradReverse { lambda: self.grl_lambda },
                    LayerSpec::AdaptiveAvgPool { side: 1 },
                    LayerSpec::Flatten,
                    LayerSpec::Linear { inputs: c, outputs: self.hidden.max(1) },
                    LayerSpec::Relu,
                    LayerSpec::Linear { inputs: self.hidden.max(1), outputs: 2 },
                ]
            }
            HeadKind::Discriminator => vec![
                LayerSpec::AdaptiveAvgPool { side: 1 },
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: c, outputs: self.hidden.max(1) },
                LayerSpec::LeakyRelu { slope: 0.2 },
                LayerSpec::Linear { inputs: self.hidden.max(1), outputs: 1 },
            ],
            HeadKind::Decoder => {
                if self.outputs == 0 {
                    return Err(Error::config("decoder needs at least one output channel"));
                }
                let mut specs = Vec::new();
                let mut prev = c;
                for k in 0..4 {
                    let next = (c >> (k + 1)).max(4);
                    specs.push(LayerSpec::Upsample2x);
                    specs.push(LayerSpec::Conv { in_ch: prev, out_ch: next, kernel: 3, stride: 1, pad: 1 });
                    specs.push(LayerSpec::Relu);
                    prev = next;
                }
                specs.push(LayerSpec::Conv { in_ch: prev, out_ch: self.outputs, kernel: 3, stride: 1, pad: 1 });
                specs.push(LayerSpec::Sigmoid);
                specs
            }
        };
        Ok(specs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub output_size: usize,
    pub width: usize,
}

impl GeneratorConfig {
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        if self.output_size == 0 || self.output_size % ENCODER_STRIDE != 0 || self.noise_dim == 0 || self.width < 4 {
            return Err(Error::config("generator needs noise_dim > 0, width >= 4 and output size a multiple of 16"));
        }
        let s0 = self.output_size / ENCODER_STRIDE;
        let c = self.width;
        let mut specs = vec![
            LayerSpec::Linear { inputs: self.noise_dim, outputs: c * s0 * s0 },
            LayerSpec::Reshape { channels: c, height: s0, width: s0 },
            LayerSpec::Relu,
        ];
        let mut prev = c;
        for k in 0..4 {
            let next = (c >> (k + 1)).max(4);
            specs.push(LayerSpec::Upsample2x);
            specs.push(LayerSpec::Conv { in_ch: prev, out_ch: next, kernel: 3, stride: 1, pad: 1 });
            specs.push(LayerSpec::Relu);
            prev = next;
        }
        specs.push(LayerSpec::Conv { in_ch: prev, out_ch: 3, kernel: 3, stride: 1, pad: 1 });
        specs.push(LayerSpec::Sigmoid);
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub net: Sequential,
}

/// Shared encoder plus named heads and an optional generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub encoder_config: EncoderConfig,
    pub encoder: Sequential,
    pub heads: BTreeMap<String, Head>,
    pub generator_config: Option<GeneratorConfig>,
    pub generator: Option<Sequential>,
}

/// Architecture description stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub heads: Vec<(String, HeadConfig)>,
    pub generator: Option<GeneratorConfig>,
}

impl ModelGraph {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Sequential::new(&spec.encoder.layer_specs(), &mut rng);
        let mut heads = BTreeMap::new();
        for (name, cfg) in &spec.heads {
            let net = Sequential::new(&cfg.layer_specs(&spec.encoder)?, &mut rng);
            if heads.insert(name.clone(), Head { config: *cfg, net }).is_some() {
                return Err(Error::config(format!("duplicate head {name}")));
            }
        }
        let generator = match &spec.generator {
            Some(g) => {
                if g.output_size != spec.encoder.input_size {
                    return Err(Error::config(format!(
                        "generator output {} does not match encoder input {}",
                        g.output_size, spec.encoder.input_size
                    )));
                }
                Some(Sequential::new(&g.layer_specs()?, &mut rng))
            }
            None => None,
        };
        Ok(ModelGraph { encoder_config: spec.encoder, encoder, heads, generator_config: spec.generator, generator })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder_config,
            heads: self.heads.iter().map(|(n, h)| (n.clone(), h.config)).collect(),
            generator: self.generator_config,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.encoder_config.input_size;
        let (_, c, h, w) = x.dim();
        if c != 3 || h != s || w != s {
            return Err(Error::param(format!("encoder expects (n, 3, {s}, {s}) input, got (_, {c}, {h}, {w})")));
        }
        Ok(())
    }

    /// Shared features `(n, width, side, side)`.
    pub fn forward_shared(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        self.check_input(x)?;
        self.encoder.infer(x, exec)
    }

    pub fn encode(&self, x: &Tensor, exec: Exec) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        self.encoder.forward(x, exec)
    }

    pub fn encoder_backward(&mut self, trace: &Trace, grad: &Tensor, exec: Exec) -> Tensor {
        self.encoder.backward(trace, grad, exec)
    }

    pub fn head(&self, name: &str) -> Result<&Head> {
        self.heads.get(name).ok_or_else(|| Error::config(format!("model has no head {name:?}")))
    }

    pub fn head_mut(&mut self, name: &str) -> Result<&mut Head> {
        self.heads.get_mut(name).ok_or_else(|| Error::config(format!("model has no head {name:?}")))
    }

    pub fn head_forward(&self, name: &str, features: &Tensor, exec: Exec) -> Result<(Tensor, Trace)> {
        self.head(name)?.net.forward(features, exec)
    }

    pub fn head_backward(&mut self, name: &str, trace: &Trace, grad: &Tensor, exec: Exec) -> Result<Tensor> {
        Ok(self.head_mut(name)?.net.backward(trace, grad, exec))
    }

    /// Softmax probabilities of a classifier head, `(n, classes)`.
    pub fn predict_proba(&self, head: &str, x: &Tensor, exec: Exec) -> Result<Array2<f64>> {
        let feats = self.forward_shared(x, exec)?;
        let logits = self.head(head)?.net.infer(&feats, exec)?;
        Ok(nn::loss::softmax(&logits))
    }

    /// Probability that each feature row comes from a generated image.
    pub fn discriminate(&self, features: &Tensor, exec: Exec) -> Result<Vec<f64>> {
        let logits = self.head(DISCRIMINATOR_HEAD)?.net.infer(features, exec)?;
        Ok(logits.iter().map(|&a| nn::sigmoid(a)).collect())
    }

    /// Generator output `(n, 3, size, size)` for noise rows `z`.
    pub fn generate(&self, z: &Array2<f64>, exec: Exec) -> Result<Tensor> {
        let g = self.generator.as_ref().ok_or_else(|| Error::config("model has no generator"))?;
        let cfg = self.generator_config.unwrap();
        if z.ncols() != cfg.noise_dim {
            return Err(Error::param(format!("noise dimension {} != configured {}", z.ncols(), cfg.noise_dim)));
        }
        let x = z.to_owned().into_shape_with_order((z.nrows(), cfg.noise_dim, 1, 1)).unwrap();
        g.infer(&x, exec)
    }

    /// Sets the gradient-reversal coefficient of every domain head.
    pub fn set_grl_lambda(&mut self, lambda: f64) {
        for h in self.heads.values_mut().filter(|h| h.config.kind == HeadKind::Domain) {
            for layer in &mut h.net.layers {
                if let LayerSpec::GradReverse { lambda: l } = &mut layer.spec {
                    *l = lambda;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        for h in self.heads.values_mut() {
            h.net.zero_grad();
        }
        if let Some(g) = &mut self.generator {
            g.zero_grad();
        }
    }

    /// Every parameter except the generator's, with stable names.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = self.encoder.named_params("encoder");
        for (name, h) in &self.heads {
            out.extend(h.net.named_params(&format!("head.{name}")));
        }
        if let Some(g) = &self.generator {
            out.extend(g.named_params("generator"));
        }
        out
    }

    /// Encoder and head parameters (the discriminative side).
    pub fn discriminative_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.encoder.params_mut().collect();
        for h in self.heads.values_mut() {
            out.extend(h.net.params_mut());
        }
        out
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        self.generator.as_mut().map(|g| g.params_mut().collect()).unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|source| Error::Path { path: path.to_path_buf(), source })?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }

    /// Container layout: magic line, JSON header length (u64 LE), JSON
    /// header (version, architecture, parameter names and shapes), then
    /// every parameter as little-endian f64 in header order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let params = self.named_params();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: self.spec(),
            params: params.iter().map(|(n, p)| (n.clone(), p.shape.clone())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, p) in params {
            for v in &p.value {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 14];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::data("not a selfpath checkpoint"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {}", header.version)));
        }
        let mut model = ModelGraph::new(&header.model, 0)?;
        let names: Vec<(String, Vec<usize>)> =
            model.named_params().into_iter().map(|(n, p)| (n, p.shape.clone())).collect();
        if names != header.params {
            return Err(Error::data("checkpoint parameter layout does not match its architecture"));
        }
        let mut buf = [0u8; 8];
        for p in model.all_params_mut() {
            for v in p.value.iter_mut() {
                input.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            p.zero_grad();
            p.reset_moments();
        }
        Ok(model)
    }

    fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.encoder.params_mut().collect();
        for h in self.heads.values_mut() {
            out.extend(h.net.params_mut());
        }
        if let Some(g) = &mut self.generator {
            out.extend(g.params_mut());
        }
        out
    }

    /// Copies parameter values (not optimiser state) from `other`.
    pub fn copy_values_from(&mut self, other: &ModelGraph) {
        let src: Vec<Vec<f64>> = other.named_params().into_iter().map(|(_, p)| p.value.clone()).collect();
        for (p, v) in self.all_params_mut().into_iter().zip(src) {
            p.value = v;
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelSpec,
    params: Vec<(String, Vec<usize>)>,
}

/// Stacks `(h, w, 3)` images into an `(n, 3, h, w)` batch.
pub fn to_batch(images: &[Image]) -> Tensor {
    let (h, w, c) = images.first().map(|i| i.dim()).unwrap_or((0, 0, 3));
    let mut out = Tensor::zeros((images.len(), c, h, w));
    for (b, img) in images.iter().enumerate() {
        let v = img.view().permuted_axes([2, 0, 1]);
        out.index_axis_mut(Axis(0), b).assign(&v);
    }
    out
}

/// Inverse of [`to_batch`].
pub fn from_batch(batch: &Tensor) -> Vec<Image> {
    batch
        .outer_iter()
        .map(|chw| chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
        .collect()
}

/// Single-channel maps `(h, w)` as an `(n, 1, h, w)` batch.
pub fn maps_to_batch(maps: &[Array2<f64>]) -> Tensor {
    let (h, w) = maps.first().map(|m| m.dim()).unwrap_or((0, 0));
    let mut out = Tensor::zeros((maps.len(), 1, h, w));
    for (b, m) in maps.iter().enumerate() {
        out.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), 0).assign(m);
    }
    out
}

/// Uniform noise in `[-1, 1)`.
pub fn sample_noise<R: rand::Rng>(n: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |_| rng.random::<f64>() * 2.0 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn small(size: usize, width: usize) -> EncoderConfig {
        EncoderConfig { architecture: Architecture::SmallConv, input_size: size, width }
    }

    fn spec(arch: Architecture) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig { architecture: arch, input_size: 32, width: 8 },
            heads: vec![
                (MAIN_HEAD.into(), HeadConfig::classifier(2)),
                ("jigmag".into(), HeadConfig::grid_classifier(12, 2)),
                ("hematoxylin".into(), HeadConfig::decoder(1)),
                (DOMAIN_HEAD.into(), HeadConfig::domain(8, 1.0)),
                (DISCRIMINATOR_HEAD.into(), HeadConfig::discriminator(8)),
            ],
            generator: Some(GeneratorConfig { noise_dim: 6, output_size: 32, width: 8 }),
        }
    }

    fn random_batch(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn((n, 3, size, size), |_| rng.random::<f64>())
    }

    #[test]
    fn feature_shape_and_determinism() {
        for arch in [Architecture::SmallConv, Architecture::DeepResidual] {
            let m = ModelGraph::new(&spec(arch), 1).unwrap();
            let x = random_batch(1, 32, 2);
            let two = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
            let f = m.forward_shared(&two, Exec::Sequential).unwrap();
            assert_eq!(f.dim(), (2, 8, 2, 2));
            assert_eq!(f.index_axis(Axis(0), 0), f.index_axis(Axis(0), 1));
        }
    }

    #[test]
    fn batch_independence() {
        let m = ModelGraph::new(&spec(Architecture::SmallConv), 3).unwrap();
        let big = random_batch(64, 32, 4);
        let fb = m.forward_shared(&big, Exec::Parallel).unwrap();
        let one = big.slice(ndarray::s![17..18, .., .., ..]).to_owned();
        let f1 = m.forward_shared(&one, Exec::Sequential).unwrap();
        let diff = (&fb.slice(ndarray::s![17..18, .., .., ..]) - &f1).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-5);
    }

    #[test]
    fn wrong_input_shape_is_parameter_error() {
        let m = ModelGraph::new(&spec(Architecture::SmallConv), 3).unwrap();
        assert!(matches!(m.forward_shared(&random_batch(1, 16, 0), Exec::Sequential), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_heads_are_distributions() {
        let m = ModelGraph::new(&spec(Architecture::DeepResidual), 5).unwrap();
        let p = m.predict_proba("jigmag", &random_batch(5, 32, 6), Exec::Sequential).unwrap();
        for row in p.rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_matches_input_size() {
        let m = ModelGraph::new(&spec(Architecture::SmallConv), 5).unwrap();
        let f = m.forward_shared(&random_batch(2, 32, 1), Exec::Sequential).unwrap();
        let (y, _) = m.head_forward("hematoxylin", &f, Exec::Sequential).unwrap();
        assert_eq!(y.dim(), (2, 1, 32, 32));
    }

    #[test]
    fn discriminator_output_in_open_unit_interval() {
        let m = ModelGraph::new(&spec(Architecture::SmallConv), 7).unwrap();
        let f = m.forward_shared(&random_batch(6, 32, 8), Exec::Sequential).unwrap();
        let d = m.discriminate(&f, Exec::Sequential).unwrap();
        assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn generator_shape_range_and_diversity() {
        let m = ModelGraph::new(&spec(Architecture::SmallConv), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_noise(32, 6, &mut rng);
        let out = m.generate(&z, Exec::Sequential).unwrap();
        assert_eq!(out.dim(), (32, 3, 32, 32));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let imgs = from_batch(&out);
        for k in 0..16 {
            assert_ne!(imgs[2 * k], imgs[2 * k + 1], "pair {k}");
        }
        assert_eq!(m.generate(&z, Exec::Sequential).unwrap(), out);
        assert!(m.generate(&sample_noise(2, 5, &mut rng), Exec::Sequential).is_err());
    }

    #[test]
    fn generator_size_must_match_encoder() {
        let mut s = spec(Architecture::SmallConv);
        s.generator = Some(GeneratorConfig { noise_dim: 4, output_size: 64, width: 8 });
        assert!(matches!(ModelGraph::new(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_reload_is_bit_stable() {
        let m = ModelGraph::new(&spec(Architecture::DeepResidual), 11).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = ModelGraph::read_checkpoint(&buf[..]).unwrap();
        let x = random_batch(3, 32, 12);
        assert_eq!(
            m.predict_proba(MAIN_HEAD, &x, Exec::Sequential).unwrap(),
            back.predict_proba(MAIN_HEAD, &x, Exec::Sequential).unwrap()
        );
        assert_eq!(back.spec(), m.spec());
        assert!(ModelGraph::read_checkpoint(&b"garbage-garbage-garbage"[..]).is_err());
    }

    #[test]
    fn head_sets_do_not_change_encoder_shapes() {
        let a = ModelGraph::new(&spec(Architecture::SmallConv), 1).unwrap();
        let b = ModelGraph::new(
            &ModelSpec { encoder: small(32, 8), heads: vec![(MAIN_HEAD.into(), HeadConfig::classifier(3))], generator: None },
            1,
        )
        .unwrap();
        let sa: Vec<_> = a.encoder.params().map(|p| p.shape.clone()).collect();
        let sb: Vec<_> = b.encoder.params().map(|p| p.shape.clone()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn batch_layout_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs: Vec<Image> = (0..3).map(|_| Array3::from_shape_fn((4, 5, 3), |_| rng.random())).collect();
        let b = to_batch(&imgs);
        assert_eq!(b.dim(), (3, 3, 4, 5));
        assert_eq!(b[[1, 2, 3, 4]], imgs[1][[3, 4, 2]]);
        assert_eq!(from_batch(&b), imgs);
    }
}
