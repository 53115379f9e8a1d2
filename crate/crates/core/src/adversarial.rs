//! Image-conditioned critic over segmentation probability maps and the
//! alternating critic / student update.

use drd_nn::layers::Conv2d;
use drd_nn::optim::{Adam, AdamConfig, Sgd};
use drd_nn::{ConvGeom, Graph, Init, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::distill::{batched_cross_entropy, batched_pixel_kl, total_loss, LossBreakdown, LossToggles, LossWeights};
use crate::error::{Error, Result};
use crate::models::{FeatureProjection, SegModel};
use crate::relation::{batched_relation_loss, RelationKind};

pub const GP_WEIGHT: f64 = 10.0;
/// Step of the central difference that stands in for double backpropagation.
pub const GP_FD_STEP: f32 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub conv_widths: Vec<usize>,
    pub downsample_stride: usize,
    pub leaky_slope: f32,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            conv_widths: vec![64, 128, 256, 512],
            downsample_stride: 2,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    /// Narrow variant for CPU-only desk runs.
    pub fn desk() -> Self {
        Self {
            conv_widths: vec![16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.len() < 2 || self.conv_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "discriminator needs at least 2 non-empty conv stages, got {:?}",
                self.conv_widths
            )));
        }
        if self.downsample_stride == 0 {
            return Err(Error::InvalidArgument("discriminator stride must be positive".into()));
        }
        Ok(())
    }
}

/// Conv stages with leaky ReLU, global average pooling and a 1x1 scalar head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    in_channels: usize,
    store: ParamStore,
    stages: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    /// `in_channels` is image bands plus class count.
    pub fn new(spec: &DiscriminatorSpec, in_channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let geom = ConvGeom::new(spec.downsample_stride, 1, 1);
        let mut cin = in_channels;
        let mut stages = Vec::new();
        for (i, &w) in spec.conv_widths.iter().enumerate() {
            let c = Conv2d::new(&mut store, &format!("disc.{i}"), cin, w, 4, geom, true, &mut rng);
            c.reinit(
                &mut store,
                Init::Normal {
                    std: (2.0 / (cin * 16) as f32).sqrt(),
                },
                &mut rng,
            );
            stages.push(c);
            cin = w;
        }
        let head = Conv2d::new(&mut store, "disc.head", cin, 1, 1, ConvGeom::default(), true, &mut rng);
        head.reinit(&mut store, Init::Zeros, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            in_channels,
            store,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Scores of shape `N x 1 x 1 x 1`.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(input).dims4()?;
        if c != self.in_channels {
            return Err(Error::InvalidArgument(format!(
                "discriminator expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        Ok(self.forward_gated(g, input, None)?.0)
    }

    /// Forward pass that either records the activation gains (1 or the leaky
    /// slope) of every stage or applies previously recorded ones.
    fn forward_gated(&self, g: &mut Graph, input: Var, fixed: Option<&[Tensor]>) -> Result<(Var, Vec<Tensor>)> {
        let slope = self.spec.leaky_slope;
        let mut y = input;
        let mut gains = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            y = s.forward(g, &self.store, y)?;
            match fixed {
                Some(f) => y = g.gate(y, f[i].clone())?,
                None => {
                    gains.push(g.value(y).map(|v| if v > 0.0 { 1.0 } else { slope }));
                    y = g.leaky_relu(y, slope);
                }
            }
        }
        let p = g.adaptive_avg_pool(y, 1, 1)?;
        Ok((self.head.forward(g, &self.store, p)?, gains))
    }
}

/// Raw image and its probability map, fused channel-wise.
#[derive(Clone, Debug)]
pub struct DiscriminatorInput(Tensor);

impl DiscriminatorInput {
    pub fn new(image: &Tensor, probabilities: &Tensor) -> Result<Self> {
        let (n, bi, h, w) = image.dims4()?;
        let (pn, pc, ph, pw) = probabilities.dims4()?;
        if (n, h, w) != (pn, ph, pw) {
            return Err(Error::ShapeMismatch {
                what: "discriminator input (image vs score map)",
                left: image.shape().to_vec(),
                right: probabilities.shape().to_vec(),
            });
        }
        let (ia, pa) = (bi * h * w, pc * h * w);
        let mut data = Vec::with_capacity(n * (ia + pa));
        for b in 0..n {
            data.extend_from_slice(&image.data()[b * ia..(b + 1) * ia]);
            data.extend_from_slice(&probabilities.data()[b * pa..(b + 1) * pa]);
        }
        Ok(Self(Tensor::from_vec(&[n, bi + pc, h, w], data)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-sample scores.
pub fn discriminator_forward(d: &Discriminator, x: &DiscriminatorInput) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let v = g.input(x.0.clone());
    let s = d.forward(&mut g, v)?;
    let scores: Vec<f64> = g.value(s).data().iter().map(|&v| v as f64).collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator score".into()));
    }
    Ok(scores)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// `mean D(student) - mean D(teacher)`; the critic minimises this.
pub fn discriminator_loss(score_student: &[f64], score_teacher: &[f64]) -> f64 {
    mean(score_student) - mean(score_teacher)
}

/// Mean critic score on student maps.
pub fn adversarial_term(score_student: &[f64]) -> f64 {
    mean(score_student)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PenaltyOutcome {
    pub value: f64,
    /// Mean `||grad_x D||` at the interpolated inputs.
    pub mean_grad_norm: f64,
}

/// Gradient penalty `weight * mean_b (||grad_x D(x_b)|| - 1)^2` on random
/// interpolates of `real` and `fake`; adds its parameter gradient to the
/// critic's `.grad`.
///
/// The parameter gradient of `||grad_x D||` is the derivative of the critic's
/// input gradient along `u = grad_x D / ||grad_x D||`, taken here as a central
/// difference of parameter gradients at `x +- h u`. Both points are evaluated
/// with the activation pattern of `x`, where the critic is linear in its
/// input, so the difference is exact.
pub fn gradient_penalty(
    d: &mut Discriminator,
    real: &DiscriminatorInput,
    fake: &DiscriminatorInput,
    weight: f64,
    rng: &mut impl Rng,
) -> Result<PenaltyOutcome> {
    let shape = real.0.shape().to_vec();
    if fake.0.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            what: "gradient penalty (real vs fake)",
            left: shape,
            right: fake.0.shape().to_vec(),
        });
    }
    let n = shape[0];
    let per = real.0.numel() / n;
    let mut xhat = real.0.clone();
    for b in 0..n {
        let e: f32 = rng.gen();
        let range = b * per..(b + 1) * per;
        for (o, &f) in xhat.data_mut()[range.clone()].iter_mut().zip(&fake.0.data()[range]) {
            *o = e * *o + (1.0 - e) * f;
        }
    }

    let was_frozen = d.store.is_frozen();
    d.store.set_frozen(true);
    let mut g = Graph::new();
    let x = g.input_with_grad(xhat.clone());
    let s = d.forward_gated(&mut g, x, None);
    d.store.set_frozen(was_frozen);
    let (s, gains) = s?;
    let grads = g.backward(s);
    let gx = grads.get(x).expect("input requires grad").clone();

    let mut norms = vec![0.0f64; n];
    let mut dir = gx.clone();
    for b in 0..n {
        let chunk = &mut dir.data_mut()[b * per..(b + 1) * per];
        let norm = chunk.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        norms[b] = norm;
        let inv = if norm > 0.0 { (1.0 / norm) as f32 } else { 0.0 };
        chunk.iter_mut().for_each(|v| *v *= inv);
    }
    let value = weight * norms.iter().map(|nb| (nb - 1.0).powi(2)).sum::<f64>() / n as f64;

    let h = GP_FD_STEP;
    let coeff: Vec<f32> = norms
        .iter()
        .map(|nb| (2.0 * weight / n as f64 * (nb - 1.0) / (2.0 * h as f64)) as f32)
        .collect();
    for sign in [1.0f32, -1.0] {
        let mut xs = xhat.clone();
        for (o, &u) in xs.data_mut().iter_mut().zip(dir.data()) {
            *o += sign * h * u;
        }
        let mut g = Graph::new();
        let xv = g.input(xs);
        let (s, _) = d.forward_gated(&mut g, xv, Some(&gains))?;
        let seed = Tensor::from_vec(&[n, 1, 1, 1], coeff.iter().map(|c| sign * c).collect())?;
        let grads = g.backward_with(s, seed);
        d.store.accumulate(&g, &grads);
    }
    Ok(PenaltyOutcome {
        value,
        mean_grad_norm: mean(&norms),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub gp_weight: f64,
    /// Feature taps larger than this many positions per side are average-pooled
    /// before the relation losses.
    pub relation_max_side: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            toggles: LossToggles::ALL,
            gp_weight: GP_WEIGHT,
            relation_max_side: 64,
        }
    }
}

/// Normalised images and their label masks.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<LabelMask>,
}

/// Everything the student side of training owns.
pub struct StudentSide<'a> {
    pub model: &'a mut SegModel,
    pub optimizer: &'a mut Sgd,
    /// Maps the student tap to the teacher's channel count, if they differ.
    pub projection: Option<(&'a mut FeatureProjection, &'a mut Sgd)>,
    pub lr: f64,
}

pub struct CriticSide<'a> {
    pub discriminator: &'a mut Discriminator,
    pub optimizer: &'a mut Adam,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Critic loss before the update; 0 when the adversarial term is off.
    pub l_d: f64,
    pub gradient_penalty: f64,
    /// Mean `||grad_x D||` at the penalty's interpolates.
    pub critic_grad_norm: f64,
}

pub fn critic_optimizer(d: &Discriminator) -> Adam {
    Adam::new(AdamConfig::default(), d.store())
}

fn pooled(g: &mut Graph, x: Var, max_side: usize) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4()?;
    if h <= max_side && w <= max_side {
        return Ok(x);
    }
    Ok(g.adaptive_avg_pool(x, h.min(max_side), w.min(max_side))?)
}

fn softmax_tensor(logits: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    let mut out = vec![0.0; logits.numel()];
    drd_nn::softmax_channels_into(logits.data(), (n, c, h * w), &mut out);
    Ok(Tensor::from_vec(logits.shape(), out)?)
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            message: format!("{name} is {v}"),
        })
    }
}

/// One critic update on the batch (when the adversarial term is enabled),
/// followed by one student update on the weighted objective. The teacher is
/// run in evaluation mode and must come out bit-identical. With every toggle
/// off this is a plain cross-entropy step and no teacher is needed.
pub fn alternating_step(
    step: usize,
    batch: &Batch,
    mut teacher: Option<&mut SegModel>,
    student: StudentSide<'_>,
    critic: Option<CriticSide<'_>>,
    cfg: &StepConfig,
) -> Result<StepOutcome> {
    cfg.weights.validate()?;
    let t = cfg.toggles;
    if t.use_adv && critic.is_none() {
        return Err(Error::InvalidArgument("adversarial term enabled without a discriminator".into()));
    }
    let need_teacher = t.use_lp || t.use_ls || t.use_lc || t.use_adv;
    if need_teacher && teacher.is_none() {
        return Err(Error::InvalidArgument("distillation terms enabled without a teacher".into()));
    }
    let before = teacher.as_ref().map(|m| m.store().checksum());
    let (t_logits, t_tap) = match (need_teacher, teacher.as_mut()) {
        (true, Some(m)) => {
            let (l, f) = m.predict(batch.images.clone())?;
            (Some(l), Some(f))
        }
        _ => (None, None),
    };

    let StudentSide {
        model,
        optimizer,
        mut projection,
        lr,
    } = student;
    let mut g = Graph::new();
    let x = g.input(batch.images.clone());
    let out = model.forward(&mut g, x, true)?;

    let (l_ce, ce_grad) = batched_cross_entropy(g.value(out.logits), &batch.labels)?;
    check_finite(step, "l_ce", l_ce)?;
    let mut terms = vec![(g.external_loss(out.logits, l_ce as f32, ce_grad)?, 1.0f32)];

    let mut l_p = 0.0;
    if t.use_lp {
        let (v, grad) = batched_pixel_kl(t_logits.as_ref().expect("teacher ran"), g.value(out.logits))?;
        check_finite(step, "l_p", v)?;
        l_p = v;
        terms.push((g.external_loss(out.logits, v as f32, grad)?, cfg.weights.lambda1 as f32));
    }

    let (mut l_s, mut l_c) = (0.0, 0.0);
    if t.any_relation() {
        let tap = match projection.as_mut() {
            Some((p, _)) => p.forward(&mut g, out.tap)?,
            None => out.tap,
        };
        let s_feat = pooled(&mut g, tap, cfg.relation_max_side)?;
        let t_feat = {
            let mut tg = Graph::no_grad();
            let v = tg.input(t_tap.clone().expect("teacher ran"));
            let p = pooled(&mut tg, v, cfg.relation_max_side)?;
            tg.value(p).clone()
        };
        if t.use_ls {
            let (v, grad) = batched_relation_loss(RelationKind::Spatial, &t_feat, g.value(s_feat))?;
            check_finite(step, "l_s", v)?;
            l_s = v;
            terms.push((g.external_loss(s_feat, v as f32, grad)?, cfg.weights.lambda3 as f32));
        }
        if t.use_lc {
            let (v, grad) = batched_relation_loss(RelationKind::Channel, &t_feat, g.value(s_feat))?;
            check_finite(step, "l_c", v)?;
            l_c = v;
            terms.push((g.external_loss(s_feat, v as f32, grad)?, cfg.weights.lambda3 as f32));
        }
    }

    let (mut l_adv, mut l_d, mut gp, mut gnorm) = (0.0, 0.0, 0.0, 0.0);
    if let (true, Some(c)) = (t.use_adv, critic) {
        let s_probs = softmax_tensor(g.value(out.logits))?;
        let t_probs = softmax_tensor(t_logits.as_ref().expect("teacher ran"))?;
        let fake = DiscriminatorInput::new(&batch.images, &s_probs)?;
        let real = DiscriminatorInput::new(&batch.images, &t_probs)?;

        let d = c.discriminator;
        d.store.zero_grad();
        let mut dg = Graph::new();
        let fv = dg.input(fake.0.clone());
        let rv = dg.input(real.0.clone());
        let sf = d.forward(&mut dg, fv)?;
        let sr = d.forward(&mut dg, rv)?;
        let mf = dg.mean(sf);
        let mr = dg.mean(sr);
        let ld = dg.weighted_sum(&[(mf, 1.0), (mr, -1.0)])?;
        l_d = dg.value(mf).data()[0] as f64 - dg.value(mr).data()[0] as f64;
        check_finite(step, "l_d", l_d)?;
        let grads = dg.backward(ld);
        d.store.accumulate(&dg, &grads);
        let pen = gradient_penalty(d, &real, &fake, cfg.gp_weight, c.rng)?;
        check_finite(step, "gradient penalty", pen.value)?;
        gp = pen.value;
        gnorm = pen.mean_grad_norm;
        c.optimizer.step(&mut d.store);

        // student side: the critic is a frozen function of the student's probabilities
        d.store.set_frozen(true);
        let probs = g.softmax_channels(out.logits)?;
        let img = g.input(batch.images.clone());
        let fused = g.concat(&[img, probs])?;
        let score = d.forward(&mut g, fused);
        d.store.set_frozen(false);
        let m = g.mean(score?);
        l_adv = g.value(m).data()[0] as f64;
        check_finite(step, "l_adv", l_adv)?;
        terms.push((m, -(cfg.weights.lambda2 as f32)));
    }

    let losses = total_loss(l_ce, l_p, l_adv, l_s, l_c, &cfg.weights)?;
    check_finite(step, "total", losses.total)?;
    let total = g.weighted_sum(&terms)?;
    let grads = g.backward(total);
    model.store_mut().zero_grad();
    model.store_mut().accumulate(&g, &grads);
    let gn = model.store().grad_norm();
    check_finite(step, "student gradient norm", gn)?;
    optimizer.step(model.store_mut(), lr);
    if let Some((p, opt)) = projection {
        p.store_mut().zero_grad();
        p.store_mut().accumulate(&g, &grads);
        opt.step(p.store_mut(), lr);
    }

    if teacher.map(|m| m.store().checksum()) != before {
        return Err(Error::InvalidArgument("teacher parameters changed during a step".into()));
    }
    Ok(StepOutcome {
        losses,
        l_d,
        gradient_penalty: gp,
        critic_grad_norm: gnorm,
    })
}
