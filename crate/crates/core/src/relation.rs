//! Spatial and channel relation maps and their alignment losses.
//!
//! A feature map of shape `C x H x W` is viewed as a matrix `F` of shape
//! `C x N` with `N = H * W`. The spatial relation map is the row-wise softmax
//! of the `N x N` Gram matrix `F^T F`; the channel relation map is the
//! row-wise softmax of the `C x C` Gram matrix `F F^T`. Teacher and student
//! maps are compared with the mean squared difference over all entries.
//!
//! Everything here works in `f64` and is a pure function of its inputs.

use drd_nn::kernels::adaptive_bin;
use drd_nn::Tensor;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest relation map materialised without pooling: 4096 positions squared.
pub const DEFAULT_ELEMENT_BUDGET: usize = 4096 * 4096;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Teacher,
    Student,
}

/// Dense `C x H x W` activations taken from a network's feature tap.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
    source: Source,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, source: Source) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dimensions must be positive, got {c}x{h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { data, source })
    }

    /// Sample `index` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, index: usize, source: Source) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let item = t.batch_item(index)?;
        let data = item.data().iter().map(|&v| v as f64).collect();
        let arr = Array3::from_shape_vec((c, h, w), data).expect("length matches dims");
        Self::new(arr, source)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    /// The `C x N` flattening; column `i` is the feature vector of pixel `i`.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let (c, h, w) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((c, h * w))
            .expect("standard layout")
    }
}

macro_rules! relation_map {
    ($name:ident, $what:literal) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Array2<f64>);

        impl $name {
            /// Wraps a square, finite, row-stochastic matrix with entries in `[0, 1]`.
            pub fn from_matrix(m: Array2<f64>) -> Result<Self> {
                validate_stochastic(&m, $what)?;
                Ok(Self(m))
            }

            pub fn matrix(&self) -> &Array2<f64> {
                &self.0
            }

            pub fn size(&self) -> usize {
                self.0.nrows()
            }
        }
    };
}

relation_map!(SpatialRelationMap, "spatial relation map");
relation_map!(ChannelRelationMap, "channel relation map");

fn validate_stochastic(m: &Array2<f64>, what: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} must be square and non-empty, got {:?}",
            m.shape()
        )));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    for (i, row) in m.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| !(-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "{what} row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax with per-row max subtraction.
fn row_softmax(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    a
}

fn check_budget(what: &'static str, side: usize, budget: usize) -> Result<()> {
    let needed = side.saturating_mul(side);
    if needed > budget {
        return Err(Error::Budget {
            what,
            needed,
            budget,
        });
    }
    Ok(())
}

pub fn spatial_relation(f: &FeatureMap) -> Result<SpatialRelationMap> {
    spatial_relation_with_budget(f, DEFAULT_ELEMENT_BUDGET)
}

/// `s_ij = exp(F_j . F_i) / sum_j exp(F_j . F_i)` over pixel feature vectors.
pub fn spatial_relation_with_budget(f: &FeatureMap, budget: usize) -> Result<SpatialRelationMap> {
    check_budget("spatial relation map", f.positions(), budget)?;
    let m = f.as_matrix();
    let gram = m.t().dot(&m);
    Ok(SpatialRelationMap(row_softmax(gram)))
}

pub fn channel_relation(f: &FeatureMap) -> Result<ChannelRelationMap> {
    channel_relation_with_budget(f, DEFAULT_ELEMENT_BUDGET)
}

/// `c_ij = exp(F^_j . F^_i) / sum_j exp(F^_j . F^_i)` over per-channel rows.
pub fn channel_relation_with_budget(f: &FeatureMap, budget: usize) -> Result<ChannelRelationMap> {
    check_budget("channel relation map", f.channels(), budget)?;
    let m = f.as_matrix();
    let gram = m.dot(&m.t());
    Ok(ChannelRelationMap(row_softmax(gram)))
}

fn mean_sq_diff(what: &'static str, teacher: &Array2<f64>, student: &Array2<f64>) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch {
            what,
            left: teacher.shape().to_vec(),
            right: student.shape().to_vec(),
        });
    }
    let n = teacher.len() as f64;
    let ss: f64 = teacher
        .iter()
        .zip(student.iter())
        .map(|(t, s)| (s - t) * (s - t))
        .sum();
    Ok(ss / n)
}

/// Mean of the squared differences over all `N * N` entries.
pub fn spatial_relation_loss(teacher: &SpatialRelationMap, student: &SpatialRelationMap) -> Result<f64> {
    mean_sq_diff("spatial relation loss (teacher vs student)", &teacher.0, &student.0)
}

/// Mean of the squared differences over all `C * C` entries.
pub fn channel_relation_loss(teacher: &ChannelRelationMap, student: &ChannelRelationMap) -> Result<f64> {
    mean_sq_diff("channel relation loss (teacher vs student)", &teacher.0, &student.0)
}

/// Average-pools every channel to `target_h x target_w` with adaptive bins.
pub fn adapt_resolution(f: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    let (c, h, w) = f.data.dim();
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument("pooling target must be non-zero".into()));
    }
    if target_h > h || target_w > w {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {h}x{w} up to {target_h}x{target_w}"
        )));
    }
    let mut out = Array3::zeros((c, target_h, target_w));
    for ch in 0..c {
        for oy in 0..target_h {
            let (y0, y1) = adaptive_bin(oy, h, target_h);
            for ox in 0..target_w {
                let (x0, x1) = adaptive_bin(ox, w, target_w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += f.data[[ch, y, x]];
                    }
                }
                out[[ch, oy, ox]] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    FeatureMap::new(out, f.source)
}

/// Which Gram matrix a relation loss is built on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Spatial,
    Channel,
}

/// Backpropagates `dL/dR` through `R = rowsoftmax(gram)` into `dL/dgram`.
fn softmax_rows_backward(r: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(r.dim());
    for ((r_row, g_row), mut d_row) in r
        .rows()
        .into_iter()
        .zip(upstream.rows())
        .zip(d.rows_mut())
    {
        let dot: f64 = r_row.iter().zip(g_row.iter()).map(|(a, b)| a * b).sum();
        for ((dv, &rv), &gv) in d_row.iter_mut().zip(r_row.iter()).zip(g_row.iter()) {
            *dv = rv * (gv - dot);
        }
    }
    d
}

/// Loss between the teacher's relation map and the student's, together with
/// its gradient w.r.t. the student's feature map (shape `C x H x W`).
pub fn relation_loss_and_grad(
    kind: RelationKind,
    teacher: &FeatureMap,
    student: &FeatureMap,
) -> Result<(f64, Array3<f64>)> {
    let (t_map, s_map) = match kind {
        RelationKind::Spatial => (
            spatial_relation(teacher)?.0,
            spatial_relation(student)?.0,
        ),
        RelationKind::Channel => (
            channel_relation(teacher)?.0,
            channel_relation(student)?.0,
        ),
    };
    let what = match kind {
        RelationKind::Spatial => "spatial relation loss (teacher vs student)",
        RelationKind::Channel => "channel relation loss (teacher vs student)",
    };
    let loss = mean_sq_diff(what, &t_map, &s_map)?;
    let scale = 2.0 / s_map.len() as f64;
    let upstream = (&s_map - &t_map) * scale;
    let d_gram = softmax_rows_backward(&s_map, &upstream);
    let sym = &d_gram + &d_gram.t();
    let m = student.as_matrix();
    let d_f = match kind {
        // gram = F^T F
        RelationKind::Spatial => m.dot(&sym),
        // gram = F F^T
        RelationKind::Channel => sym.dot(&m),
    };
    let (c, h, w) = student.data.dim();
    let grad = d_f
        .into_shape_with_order((c, h, w))
        .expect("gradient has the feature map's size");
    Ok((loss, grad))
}

/// Batch-mean relation loss between two NCHW feature tensors and its gradient
/// w.r.t. the student tensor.
pub fn batched_relation_loss(kind: RelationKind, teacher: &Tensor, student: &Tensor) -> Result<(f64, Tensor)> {
    let (n, _, _, _) = student.dims4()?;
    let (tn, _, _, _) = teacher.dims4()?;
    if tn != n {
        return Err(Error::ShapeMismatch {
            what: "relation loss batch",
            left: teacher.shape().to_vec(),
            right: student.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(student.numel());
    for b in 0..n {
        let t = FeatureMap::from_tensor(teacher, b, Source::Teacher)?;
        let s = FeatureMap::from_tensor(student, b, Source::Student)?;
        let (l, g) = relation_loss_and_grad(kind, &t, &s)?;
        total += l;
        grad.extend(g.iter().map(|&v| (v / n as f64) as f32));
    }
    Ok((total / n as f64, Tensor::from_vec(student.shape(), grad)?))
}

/// Sum over each row; used by invariant checks.
pub fn row_sums(m: &Array2<f64>) -> Vec<f64> {
    m.sum_axis(Axis(1)).to_vec()
}
