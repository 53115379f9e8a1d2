//! Pixel-wise probability distillation and the combined training objective.

use drd_nn::Tensor;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};

/// Lower clamp on student probabilities inside the KL logarithm.
pub const KL_CLAMP: f64 = 1e-8;

const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

/// Per-pixel class scores, shape `c x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    data: Array3<f64>,
    kind: ScoreKind,
}

impl ScoreMap {
    pub fn new(data: Array3<f64>, kind: ScoreKind) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c < 2 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "score map needs at least 2 classes and a non-empty raster, got {c}x{h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(match kind {
                ScoreKind::Logits => "logits".into(),
                ScoreKind::Probabilities => "probabilities".into(),
            }));
        }
        if kind == ScoreKind::Probabilities {
            for y in 0..h {
                for x in 0..w {
                    let col = data.slice(ndarray::s![.., y, x]);
                    let s = col.sum();
                    if (s - 1.0).abs() > PROB_SUM_TOL || col.iter().any(|&v| v < 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "pixel ({y}, {x}) is not a probability vector (sum {s})"
                        )));
                    }
                }
            }
        }
        Ok(Self { data, kind })
    }

    /// Sample `index` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, index: usize, kind: ScoreKind) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let item = t.batch_item(index)?;
        let data = item.data().iter().map(|&v| v as f64).collect();
        Self::new(Array3::from_shape_vec((c, h, w), data).expect("length matches dims"), kind)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Index of the highest score at every pixel.
    pub fn argmax(&self) -> ndarray::Array2<u8> {
        let (c, h, w) = self.data.dim();
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for k in 1..c {
                if self.data[[k, y, x]] > self.data[[best, y, x]] {
                    best = k;
                }
            }
            best as u8
        })
    }
}

fn softmax_array(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let m = (0..c).map(|k| logits[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (logits[[k, y, x]] - m).exp();
                out[[k, y, x]] = e;
                s += e;
            }
            for k in 0..c {
                out[[k, y, x]] /= s;
            }
        }
    }
    out
}

pub fn softmax_scores(logits: &ScoreMap) -> Result<ScoreMap> {
    if logits.kind != ScoreKind::Logits {
        return Err(Error::InvalidArgument("softmax_scores expects logits".into()));
    }
    Ok(ScoreMap {
        data: softmax_array(&logits.data),
        kind: ScoreKind::Probabilities,
    })
}

fn check_same_shape(what: &'static str, a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            what,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_probabilities(m: &ScoreMap, who: &str) -> Result<()> {
    if m.kind != ScoreKind::Probabilities {
        return Err(Error::InvalidArgument(format!("{who} scores must be probabilities")));
    }
    Ok(())
}

/// `(1/N) sum_i KL(q_t_i || q_s_i)` with the teacher as the first argument.
pub fn pixel_kl_loss(teacher: &ScoreMap, student: &ScoreMap) -> Result<f64> {
    require_probabilities(teacher, "teacher")?;
    require_probabilities(student, "student")?;
    check_same_shape("pixel KL (teacher vs student)", &teacher.data, &student.data)?;
    Ok(kl_sum(&teacher.data, &student.data) / (teacher.height() * teacher.width()) as f64)
}

fn kl_sum(qt: &Array3<f64>, qs: &Array3<f64>) -> f64 {
    qt.iter()
        .zip(qs.iter())
        .map(|(&t, &s)| if t > 0.0 { t * (t.ln() - s.max(KL_CLAMP).ln()) } else { 0.0 })
        .sum()
}

/// Pixel KL and its gradient w.r.t. the student's logits.
pub fn pixel_kl_loss_and_grad(teacher: &ScoreMap, student_logits: &ScoreMap) -> Result<(f64, Array3<f64>)> {
    require_probabilities(teacher, "teacher")?;
    let qs = softmax_scores(student_logits)?;
    check_same_shape("pixel KL (teacher vs student)", &teacher.data, &qs.data)?;
    let (c, h, w) = qs.data.dim();
    let n = (h * w) as f64;
    let loss = kl_sum(&teacher.data, &qs.data) / n;
    let mut grad = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            // d/dq_s of -t log(max(q_s, eps)), then through the softmax Jacobian.
            let hk: Vec<f64> = (0..c)
                .map(|k| {
                    let s = qs.data[[k, y, x]];
                    if s > KL_CLAMP {
                        -teacher.data[[k, y, x]] / s
                    } else {
                        0.0
                    }
                })
                .collect();
            let dot: f64 = (0..c).map(|k| hk[k] * qs.data[[k, y, x]]).sum();
            for k in 0..c {
                grad[[k, y, x]] = qs.data[[k, y, x]] * (hk[k] - dot) / n;
            }
        }
    }
    Ok((loss, grad))
}

/// Per-pixel KL summed over classes; the map the loss averages.
pub fn pixel_kl_map(teacher: &ScoreMap, student: &ScoreMap) -> Result<ndarray::Array2<f64>> {
    require_probabilities(teacher, "teacher")?;
    require_probabilities(student, "student")?;
    check_same_shape("pixel KL (teacher vs student)", &teacher.data, &student.data)?;
    let (c, h, w) = teacher.data.dim();
    Ok(ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c)
            .map(|k| {
                let t = teacher.data[[k, y, x]];
                if t > 0.0 {
                    t * (t.ln() - student.data[[k, y, x]].max(KL_CLAMP).ln())
                } else {
                    0.0
                }
            })
            .sum()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 0.1,
            lambda3: 25.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which distillation terms take part in training; CE is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub use_lp: bool,
    pub use_adv: bool,
    pub use_ls: bool,
    pub use_lc: bool,
}

impl LossToggles {
    pub const ALL: Self = Self {
        use_lp: true,
        use_adv: true,
        use_ls: true,
        use_lc: true,
    };
    pub const NONE: Self = Self {
        use_lp: false,
        use_adv: false,
        use_ls: false,
        use_lc: false,
    };

    pub fn any_relation(&self) -> bool {
        self.use_ls || self.use_lc
    }
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_p: f64,
    pub l_adv: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: [&'static str; 7] = ["step", "l_ce", "l_p", "l_adv", "l_s", "l_c", "total"];

    pub fn csv_row(&self, step: usize) -> Vec<String> {
        let mut row = vec![step.to_string()];
        row.extend([self.l_ce, self.l_p, self.l_adv, self.l_s, self.l_c, self.total].map(|v| format!("{v:.8e}")));
        row
    }
}

/// `l_ce + lambda1 l_p - lambda2 l_adv + lambda3 (l_s + l_c)`.
pub fn total_loss(l_ce: f64, l_p: f64, l_adv: f64, l_s: f64, l_c: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_ce", l_ce), ("l_p", l_p), ("l_adv", l_adv), ("l_s", l_s), ("l_c", l_c)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    w.validate()?;
    Ok(LossBreakdown {
        l_ce,
        l_p,
        l_adv,
        l_s,
        l_c,
        total: l_ce + w.lambda1 * l_p - w.lambda2 * l_adv + w.lambda3 * (l_s + l_c),
    })
}

fn check_label_shape(logits: &ScoreMap, labels: &LabelMask) -> Result<()> {
    if (logits.height(), logits.width()) != (labels.height(), labels.width()) {
        return Err(Error::ShapeMismatch {
            what: "cross entropy (logits vs labels)",
            left: logits.data.shape().to_vec(),
            right: labels.data().shape().to_vec(),
        });
    }
    if labels.num_classes() != logits.classes() {
        return Err(Error::InvalidArgument(format!(
            "labels declare {} classes, logits have {}",
            labels.num_classes(),
            logits.classes()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood over non-ignored pixels.
pub fn masked_cross_entropy(logits: &ScoreMap, labels: &LabelMask) -> Result<f64> {
    Ok(masked_cross_entropy_and_grad(logits, labels)?.0)
}

/// Cross entropy and its gradient w.r.t. the logits; ignored pixels get zero gradient.
pub fn masked_cross_entropy_and_grad(logits: &ScoreMap, labels: &LabelMask) -> Result<(f64, Array3<f64>)> {
    if logits.kind != ScoreKind::Logits {
        return Err(Error::InvalidArgument("cross entropy expects logits".into()));
    }
    check_label_shape(logits, labels)?;
    let q = softmax_array(&logits.data);
    let (c, h, w) = q.dim();
    let kept = h * w - labels.ignored_count();
    if kept == 0 {
        return Err(Error::AllIgnored);
    }
    let m = kept as f64;
    let mut loss = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            if labels.is_ignored(y, x) {
                continue;
            }
            let t = labels.data()[[y, x]] as usize;
            // log-softmax directly from logits for accuracy
            let mx = (0..c).map(|k| logits.data[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).map(|k| (logits.data[[k, y, x]] - mx).exp()).sum::<f64>().ln();
            loss += lse - logits.data[[t, y, x]];
            for k in 0..c {
                grad[[k, y, x]] = (q[[k, y, x]] - if k == t { 1.0 } else { 0.0 }) / m;
            }
        }
    }
    Ok((loss / m, grad))
}

fn batch_size(what: &'static str, a: &Tensor, b_shape: &[usize]) -> Result<usize> {
    let (n, _, _, _) = a.dims4()?;
    if a.shape() != b_shape {
        return Err(Error::ShapeMismatch {
            what,
            left: a.shape().to_vec(),
            right: b_shape.to_vec(),
        });
    }
    Ok(n)
}

/// Batch-mean pixel KL between NCHW logits; gradient w.r.t. the student logits.
pub fn batched_pixel_kl(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<(f64, Tensor)> {
    let n = batch_size("pixel KL batch", teacher_logits, student_logits.shape())?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(student_logits.numel());
    for b in 0..n {
        let t = softmax_scores(&ScoreMap::from_tensor(teacher_logits, b, ScoreKind::Logits)?)?;
        let s = ScoreMap::from_tensor(student_logits, b, ScoreKind::Logits)?;
        let (l, g) = pixel_kl_loss_and_grad(&t, &s)?;
        total += l;
        grad.extend(g.iter().map(|&v| (v / n as f64) as f32));
    }
    Ok((total / n as f64, Tensor::from_vec(student_logits.shape(), grad)?))
}

/// Batch-mean masked cross entropy; each sample is averaged over its own kept pixels.
pub fn batched_cross_entropy(logits: &Tensor, labels: &[LabelMask]) -> Result<(f64, Tensor)> {
    let (n, _, _, _) = logits.dims4()?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} label masks for a batch of {n}", labels.len())));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.numel());
    for (b, mask) in labels.iter().enumerate() {
        let s = ScoreMap::from_tensor(logits, b, ScoreKind::Logits)?;
        let (l, g) = masked_cross_entropy_and_grad(&s, mask)?;
        total += l;
        grad.extend(g.iter().map(|&v| (v / n as f64) as f32));
    }
    Ok((total / n as f64, Tensor::from_vec(logits.shape(), grad)?))
}
