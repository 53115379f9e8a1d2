//! Pyramid-pooling segmentation networks, a tiny desk-scale variant, and
//! parameter / FLOP accounting.

use std::path::PathBuf;

use drd_nn::layers::{Conv2d, ConvBn};
use drd_nn::{checkpoint, ConvGeom, Graph, Init, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];
const TINY_BASE_WIDTH: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet101,
    Resnet18,
    Resnet18Half,
    TinyCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Ppm,
    None,
}

fn default_multiplier() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: Backbone,
    #[serde(default)]
    pub head: Head,
    pub num_classes: usize,
    #[serde(default = "default_multiplier")]
    pub width_multiplier: f64,
    #[serde(default)]
    pub pretrained_path: Option<PathBuf>,
}

impl ModelSpec {
    pub fn new(backbone: Backbone, num_classes: usize) -> Self {
        Self {
            backbone,
            head: Head::Ppm,
            num_classes,
            width_multiplier: 1.0,
            pretrained_path: None,
        }
    }

    pub fn with_width(mut self, width_multiplier: f64) -> Self {
        self.width_multiplier = width_multiplier;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "width_multiplier must be in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be in [2, 255], got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Multiplier actually applied to channel counts.
    pub fn effective_multiplier(&self) -> f64 {
        match self.backbone {
            Backbone::Resnet18Half => 0.5 * self.width_multiplier,
            _ => self.width_multiplier,
        }
    }

    /// Parses the short names used on the command line.
    pub fn from_name(name: &str, num_classes: usize) -> Result<Self> {
        let backbone = match name {
            "resnet101" => Backbone::Resnet101,
            "resnet18" => Backbone::Resnet18,
            "resnet18_half" => Backbone::Resnet18Half,
            "tiny_cnn" => Backbone::TinyCnn,
            "tiny_student" => return Ok(Self::new(Backbone::TinyCnn, num_classes).with_width(1.0 / 3.0)),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model {other}; expected resnet101, resnet18, resnet18_half, tiny_cnn or tiny_student"
                )))
            }
        };
        Ok(Self::new(backbone, num_classes))
    }
}

fn scaled(base: usize, m: f64) -> usize {
    ((base as f64 * m).round() as usize).max(1)
}

#[derive(Clone, Debug)]
enum Block {
    Basic {
        c1: ConvBn,
        c2: ConvBn,
        down: Option<ConvBn>,
    },
    Bottleneck {
        c1: ConvBn,
        c2: ConvBn,
        c3: ConvBn,
        down: Option<ConvBn>,
    },
}

impl Block {
    fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, train: bool) -> Result<Var> {
        let (y, down) = match self {
            Block::Basic { c1, c2, down } => {
                let y = c1.forward(g, store, x, train)?;
                (c2.forward(g, store, y, train)?, down)
            }
            Block::Bottleneck { c1, c2, c3, down } => {
                let y = c1.forward(g, store, x, train)?;
                let y = c2.forward(g, store, y, train)?;
                (c3.forward(g, store, y, train)?, down)
            }
        };
        let skip = match down {
            Some(d) => d.forward(g, store, x, train)?,
            None => x,
        };
        let s = g.add(y, skip)?;
        Ok(g.relu(s))
    }
}

#[derive(Clone, Debug)]
struct ResNet {
    stem: Vec<ConvBn>,
    stages: Vec<Vec<Block>>,
    out_channels: usize,
    stage3_channels: usize,
}

impl ResNet {
    fn new(store: &mut ParamStore, bottleneck: bool, depths: [usize; 4], m: f64, rng: &mut ChaCha8Rng) -> Self {
        let c64 = scaled(64, m);
        let c128 = scaled(128, m);
        let stem = vec![
            ConvBn::new(store, "stem.0", 3, c64, 3, ConvGeom::new(2, 1, 1), true, rng),
            ConvBn::new(store, "stem.1", c64, c64, 3, ConvGeom::new(1, 1, 1), true, rng),
            ConvBn::new(store, "stem.2", c64, c128, 3, ConvGeom::new(1, 1, 1), true, rng),
        ];
        let expansion = if bottleneck { 4 } else { 1 };
        // output stride 8: the last two stages keep resolution and dilate instead
        let plan = [(64, 1, 1), (128, 2, 1), (256, 1, 2), (512, 1, 4)];
        let mut inplanes = c128;
        let mut stages = Vec::new();
        let mut stage_out = Vec::new();
        for (si, (&(base, stride, dilation), &depth)) in plan.iter().zip(depths.iter()).enumerate() {
            let planes = scaled(base, m);
            let out = planes * expansion;
            let mut blocks = Vec::with_capacity(depth);
            for bi in 0..depth {
                let name = format!("layer{}.{bi}", si + 1);
                let s = if bi == 0 { stride } else { 1 };
                let down = (bi == 0 && (s != 1 || inplanes != out)).then(|| {
                    ConvBn::new(store, &format!("{name}.downsample"), inplanes, out, 1, ConvGeom::new(s, 0, 1), false, rng)
                });
                let mid = ConvGeom::new(s, dilation, dilation);
                let block = if bottleneck {
                    Block::Bottleneck {
                        c1: ConvBn::new(store, &format!("{name}.conv1"), inplanes, planes, 1, ConvGeom::default(), true, rng),
                        c2: ConvBn::new(store, &format!("{name}.conv2"), planes, planes, 3, mid, true, rng),
                        c3: ConvBn::new(store, &format!("{name}.conv3"), planes, out, 1, ConvGeom::default(), false, rng),
                        down,
                    }
                } else {
                    Block::Basic {
                        c1: ConvBn::new(store, &format!("{name}.conv1"), inplanes, planes, 3, mid, true, rng),
                        c2: ConvBn::new(
                            store,
                            &format!("{name}.conv2"),
                            planes,
                            planes,
                            3,
                            ConvGeom::new(1, dilation, dilation),
                            false,
                            rng,
                        ),
                        down,
                    }
                };
                blocks.push(block);
                inplanes = out;
            }
            stages.push(blocks);
            stage_out.push(out);
        }
        Self {
            stem,
            stages,
            out_channels: stage_out[3],
            stage3_channels: stage_out[2],
        }
    }

    /// Returns the final features and the third-stage features.
    fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, train: bool) -> Result<(Var, Var)> {
        let mut y = x;
        for c in &self.stem {
            y = c.forward(g, store, y, train)?;
        }
        y = g.max_pool_3x3s2(y)?;
        let mut stage3 = y;
        for (i, stage) in self.stages.iter().enumerate() {
            for b in stage {
                y = b.forward(g, store, y, train)?;
            }
            if i == 2 {
                stage3 = y;
            }
        }
        Ok((y, stage3))
    }
}

#[derive(Clone, Debug)]
struct TinyBackbone {
    convs: Vec<ConvBn>,
    out_channels: usize,
}

impl TinyBackbone {
    fn new(store: &mut ParamStore, m: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = ((TINY_BASE_WIDTH * m).round() as usize).max(1);
        // output stride 4; 64 px tiles leave a 16 x 16 tap
        let layers = [
            (3, w, ConvGeom::new(2, 1, 1)),
            (w, w, ConvGeom::new(1, 1, 1)),
            (w, 2 * w, ConvGeom::new(2, 1, 1)),
            (2 * w, 4 * w, ConvGeom::new(1, 2, 2)),
            (4 * w, 4 * w, ConvGeom::new(1, 4, 4)),
        ];
        let convs = layers
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, geom))| ConvBn::new(store, &format!("features.{i}"), cin, cout, 3, geom, true, rng))
            .collect();
        Self {
            convs,
            out_channels: 4 * w,
        }
    }

    fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, train: bool) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(g, store, y, train)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct Ppm {
    branches: Vec<(usize, ConvBn)>,
    bottleneck: ConvBn,
}

impl Ppm {
    fn new(store: &mut ParamStore, cin: usize, branch: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let branches = PPM_BINS
            .iter()
            .map(|&b| {
                (
                    b,
                    ConvBn::new(store, &format!("ppm.{b}"), cin, branch, 1, ConvGeom::default(), true, rng),
                )
            })
            .collect();
        let bottleneck = ConvBn::new(
            store,
            "ppm.bottleneck",
            cin + PPM_BINS.len() * branch,
            out,
            3,
            ConvGeom::new(1, 1, 1),
            true,
            rng,
        );
        Self { branches, bottleneck }
    }

    fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, train: bool) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let mut parts = vec![x];
        for (bin, conv) in &self.branches {
            let p = g.adaptive_avg_pool(x, *bin, *bin)?;
            let p = conv.forward(g, store, p, train)?;
            parts.push(g.resize_bilinear(p, h, w)?);
        }
        let cat = g.concat(&parts)?;
        Ok(self.bottleneck.forward(g, store, cat, train)?)
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    ResNet(ResNet),
    Tiny(TinyBackbone),
}

#[derive(Clone, Debug)]
struct AuxHead {
    conv: ConvBn,
    classifier: Conv2d,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `N x classes x H x W`, upsampled to the input resolution.
    pub logits: Var,
    /// Feature tap used by the relation losses.
    pub tap: Var,
    /// Deep-supervision logits (training mode only, ResNet backbones).
    pub aux: Option<Var>,
}

/// A segmentation network together with its parameters.
#[derive(Clone, Debug)]
pub struct SegModel {
    spec: ModelSpec,
    store: ParamStore,
    encoder: Encoder,
    ppm: Option<Ppm>,
    classifier: Conv2d,
    aux: Option<AuxHead>,
    tap_channels: usize,
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<SegModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = spec.effective_multiplier();
    let (encoder, feat, stage3) = match spec.backbone {
        Backbone::TinyCnn => {
            let t = TinyBackbone::new(&mut store, m, &mut rng);
            let c = t.out_channels;
            (Encoder::Tiny(t), c, None)
        }
        Backbone::Resnet18 | Backbone::Resnet18Half => {
            let r = ResNet::new(&mut store, false, [2, 2, 2, 2], m, &mut rng);
            let (c, s3) = (r.out_channels, r.stage3_channels);
            (Encoder::ResNet(r), c, Some(s3))
        }
        Backbone::Resnet101 => {
            let r = ResNet::new(&mut store, true, [3, 4, 23, 3], m, &mut rng);
            let (c, s3) = (r.out_channels, r.stage3_channels);
            (Encoder::ResNet(r), c, Some(s3))
        }
    };
    let (ppm, tap_channels) = match spec.head {
        Head::Ppm => {
            let (branch, out) = match spec.backbone {
                Backbone::TinyCnn => (feat / 4, feat / 2),
                _ => (feat / 4, feat / 4),
            };
            (Some(Ppm::new(&mut store, feat, branch.max(1), out.max(1), &mut rng)), out.max(1))
        }
        Head::None => (None, feat),
    };
    let classifier = Conv2d::new(
        &mut store,
        "classifier",
        tap_channels,
        spec.num_classes,
        1,
        ConvGeom::default(),
        true,
        &mut rng,
    );
    let aux = match (spec.head, stage3) {
        (Head::Ppm, Some(s3)) => Some(AuxHead {
            conv: ConvBn::new(&mut store, "aux.conv", s3, (feat / 4).max(1), 3, ConvGeom::new(1, 1, 1), true, &mut rng),
            classifier: Conv2d::new(
                &mut store,
                "aux.classifier",
                (feat / 4).max(1),
                spec.num_classes,
                1,
                ConvGeom::default(),
                true,
                &mut rng,
            ),
        }),
        _ => None,
    };
    let mut model = SegModel {
        spec: spec.clone(),
        store,
        encoder,
        ppm,
        classifier,
        aux,
        tap_channels,
    };
    if let Some(path) = &spec.pretrained_path {
        if !path.exists() {
            return Err(Error::File {
                path: path.clone(),
                message: "pretrained checkpoint does not exist".into(),
            });
        }
        checkpoint::load_into(&mut model.store, path)?;
    }
    Ok(model)
}

impl SegModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tap_channels(&self) -> usize {
        self.tap_channels
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, train: bool) -> Result<ModelOutput> {
        self.forward_branches(g, x, train, train)
    }

    fn forward_branches(&mut self, g: &mut Graph, x: Var, train: bool, with_aux: bool) -> Result<ModelOutput> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let store = &mut self.store;
        let (feat, stage3) = match &self.encoder {
            Encoder::ResNet(r) => {
                let (f, s3) = r.forward(g, store, x, train)?;
                (f, Some(s3))
            }
            Encoder::Tiny(t) => (t.forward(g, store, x, train)?, None),
        };
        let tap = match &self.ppm {
            Some(p) => p.forward(g, store, feat, train)?,
            None => feat,
        };
        let low = self.classifier.forward(g, store, tap)?;
        let logits = g.resize_bilinear(low, h, w)?;
        let aux = match (&self.aux, stage3, with_aux) {
            (Some(a), Some(s3), true) => {
                let y = a.conv.forward(g, store, s3, train)?;
                let y = a.classifier.forward(g, store, y)?;
                Some(g.resize_bilinear(y, h, w)?)
            }
            _ => None,
        };
        Ok(ModelOutput { logits, tap, aux })
    }

    /// Inference helper: logits and tap features as plain tensors.
    pub fn predict(&mut self, images: Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::no_grad();
        let x = g.input(images);
        let out = self.forward(&mut g, x, false)?;
        Ok((g.value(out.logits).clone(), g.value(out.tap).clone()))
    }
}

/// Trainable scalars, in millions.
pub fn count_params(model: &SegModel) -> f64 {
    model.store.num_scalars() as f64 / 1e6
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate counts as one operation.
    #[default]
    Macs,
    /// One multiply-accumulate counts as two operations.
    TwiceMacs,
}

impl FlopConvention {
    /// Giga-operations for a multiply-accumulate count.
    pub fn giga(self, macs: u64) -> f64 {
        let ops = match self {
            FlopConvention::Macs => macs as f64,
            FlopConvention::TwiceMacs => 2.0 * macs as f64,
        };
        ops / 1e9
    }
}

/// Convolution operations of one pass over every branch (the deep-supervision
/// head included) at `h x w`, in giga-operations.
pub fn count_flops(model: &mut SegModel, h: usize, w: usize, convention: FlopConvention) -> Result<f64> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("input resolution must be positive".into()));
    }
    let mut g = Graph::tracing();
    let x = g.input(Tensor::meta(&[1, 3, h, w]));
    model.forward_branches(&mut g, x, false, true)?;
    Ok(convention.giga(g.conv_macs()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub spec: ModelSpec,
    pub params_millions: f64,
    pub flops_giga: f64,
    pub flop_convention: FlopConvention,
    pub input_hw: (usize, usize),
    /// `(C, H, W)` of the feature tap at the stated input resolution.
    pub tap_shape: (usize, usize, usize),
}

pub fn model_report(model: &mut SegModel, h: usize, w: usize, convention: FlopConvention) -> Result<ModelReport> {
    let mut g = Graph::tracing();
    let x = g.input(Tensor::meta(&[1, 3, h, w]));
    let out = model.forward(&mut g, x, false)?;
    let (_, c, th, tw) = g.value(out.tap).dims4()?;
    Ok(ModelReport {
        spec: model.spec.clone(),
        params_millions: count_params(model),
        flops_giga: count_flops(model, h, w, convention)?,
        flop_convention: convention,
        input_hw: (h, w),
        tap_shape: (c, th, tw),
    })
}

/// Learned 1x1 map from student tap channels to teacher tap channels.
#[derive(Clone, Debug)]
pub struct FeatureProjection {
    store: ParamStore,
    conv: Conv2d,
}

impl FeatureProjection {
    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(
            &mut store,
            "projection",
            in_channels,
            out_channels,
            1,
            ConvGeom::default(),
            false,
            &mut rng,
        );
        conv.reinit(
            &mut store,
            Init::Normal {
                std: (1.0 / in_channels as f32).sqrt(),
            },
            &mut rng,
        );
        Self { store, conv }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.conv.forward(g, &self.store, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_shape_contract_and_budget() {
        let mut m = build_model(&ModelSpec::new(Backbone::TinyCnn, 6), 0).unwrap();
        assert!(m.store().num_scalars() <= 100_000);
        let (logits, tap) = m.predict(Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(logits.shape(), &[1, 6, 64, 64]);
        assert_eq!(tap.shape(), &[1, m.tap_channels(), 16, 16]);
        let (logits, _) = m.predict(Tensor::zeros(&[2, 3, 32, 96])).unwrap();
        assert_eq!(logits.shape(), &[2, 6, 32, 96]);
    }

    #[test]
    fn single_conv_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        Conv2d::new(&mut store, "c", 3, 8, 3, ConvGeom::default(), true, &mut rng);
        assert_eq!(store.num_scalars() as f64 / 1e6, 0.000224);
    }

    #[test]
    fn spec_validation() {
        assert!(build_model(&ModelSpec::new(Backbone::TinyCnn, 6).with_width(1.5), 0).is_err());
        assert!(build_model(&ModelSpec::new(Backbone::TinyCnn, 6).with_width(0.0), 0).is_err());
        assert!(build_model(&ModelSpec::new(Backbone::TinyCnn, 1), 0).is_err());
        assert!(ModelSpec::from_name("vgg", 6).is_err());
    }
}
