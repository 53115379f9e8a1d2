use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{init_tensor, BufferId, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_out = out_channels * kernel * kernel;
        let weight = store.add_param(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::KaimingNormal { fan_out },
            rng,
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), &[out_channels], Init::Zeros, rng));
        Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Re-initialises the weight (and bias) with a custom scheme.
    pub fn reinit(&self, store: &mut ParamStore, init: Init, rng: &mut impl Rng) {
        let shape = store.param(self.weight).value.shape().to_vec();
        store.param_mut(self.weight).value = init_tensor(&shape, init, rng);
        if let Some(b) = self.bias {
            store.param_mut(b).value.data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.weight"), &[channels], Init::Ones, rng),
            beta: store.add_param(format!("{name}.bias"), &[channels], Init::Zeros, rng),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    /// In training mode normalises with batch statistics and updates the running averages.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, train: bool) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if train {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            if !g.is_meta() {
                let rm = store.buffer_mut(self.running_mean);
                for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = store.buffer_mut(self.running_var);
                for (r, v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
            Ok(y)
        } else {
            let mean = store.buffer(self.running_mean).data().to_vec();
            let var = store.buffer(self.running_var).data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

/// Convolution without bias, batch norm and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, geom, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, rng),
            relu,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, train: bool) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, train)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}
