//! Per-position linear maps on `[C, H, W]` feature maps (1×1 projections).

use rand::Rng;

use crate::attention::feature_map_dims;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore, Session, INIT_STD};
use crate::tensor::Tensor;

/// `weight` is `[out, in]`, `bias` is `[out, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear<T = ParamId> {
    pub weight: T,
    pub bias: T,
}

impl Linear<ParamId> {
    pub fn init(store: &mut ParamStore, prefix: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.insert(format!("{prefix}.weight"), trunc_normal(&[outputs, inputs], INIT_STD, rng))?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[outputs, 1]))?,
        })
    }

    pub fn from_tensors(store: &mut ParamStore, prefix: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[outputs, _] = weight.shape() else {
            return Err(Error::shape("linear weight", &[0, 0], weight.shape()));
        };
        if bias.shape() != [outputs, 1] {
            return Err(Error::shape("linear bias", &[outputs, 1], bias.shape()));
        }
        Ok(Linear {
            weight: store.insert(format!("{prefix}.weight"), weight)?,
            bias: store.insert(format!("{prefix}.bias"), bias)?,
        })
    }

    pub fn bind(&self, s: &mut Session) -> Linear<Var> {
        Linear {
            weight: s.param(self.weight),
            bias: s.param(self.bias),
        }
    }
}

/// Applies `W·x + b` at every position of a `[C, H, W]` map.
pub fn linear_1x1(g: &mut Graph, x: Var, l: &Linear<Var>) -> Result<Var> {
    let (c, h, w) = feature_map_dims(g, x, "linear_1x1")?;
    let flat = g.reshape(x, &[c, h * w])?;
    let y = g.matmul(l.weight, flat)?;
    let y = g.add(y, l.bias)?;
    let out = g.shape(y)[0];
    g.reshape(y, &[out, h, w])
}

/// `[C, H, W]` → `[C·k², H/k, W/k]`; each output position stacks its `k × k`
/// input block (channel-major, then row, then column).
pub fn space_to_depth(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    let (c, h, w) = feature_map_dims(g, x, "space_to_depth")?;
    if h % k != 0 || w % k != 0 {
        return Err(Error::PadRequired {
            op: "space_to_depth",
            extent: if h % k != 0 { h } else { w },
            divisor: k,
        });
    }
    let r = g.reshape(x, &[c, h / k, k, w / k, k])?;
    let p = g.permute(r, &[0, 2, 4, 1, 3])?;
    g.reshape(p, &[c * k * k, h / k, w / k])
}
