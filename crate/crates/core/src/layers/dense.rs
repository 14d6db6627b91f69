use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::layers::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer `act(x·W + b)` acting on the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Option<Activation>,
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Option<Activation>,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::config(format!("dense layer {name} has a zero width")));
        }
        let w = Tensor::glorot(&[inputs, outputs], inputs, outputs, rng);
        Ok(Dense {
            inputs,
            outputs,
            activation,
            weight: store.add(format!("{name}.weight"), w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true)?,
        })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.last() != Some(&self.inputs) {
            return Err(Error::dim(format!(
                "dense layer expects last extent {}, got {:?}",
                self.inputs, s
            )));
        }
        let y = g.matmul(x, p.var(self.weight))?;
        let y = g.add_along(y, p.var(self.bias), s.len() - 1)?;
        Ok(match self.activation {
            Some(a) => g.activation(y, a),
            None => y,
        })
    }
}
