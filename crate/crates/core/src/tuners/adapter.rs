//! Parallel bottleneck adapter, `up(gelu(down(x)))` with `up` zero-initialized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{kaiming_uniform, uniform};
use crate::nn::{LinearLayer, ParamInfo, Parameter};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_BOTTLENECK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub dim: usize,
    pub bottleneck: usize,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.dim == 0 {
            return Err(Error::Config("adapter bottleneck must be ≥ 1".into()));
        }
        Ok(())
    }

    pub(crate) fn layout(&self, prefix: &str) -> Vec<ParamInfo> {
        vec![
            ParamInfo::new(format!("{prefix}.down.weight"), [self.dim, self.bottleneck]),
            ParamInfo::new(format!("{prefix}.down.bias"), [self.bottleneck]),
            ParamInfo::new(format!("{prefix}.up.weight"), [self.bottleneck, self.dim]),
            ParamInfo::new(format!("{prefix}.up.bias"), [self.dim]),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub down: LinearLayer,
    pub up: LinearLayer,
}

impl Adapter {
    pub fn init<R: Rng>(cfg: AdapterConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, m) = (cfg.dim, cfg.bottleneck);
        let down = LinearLayer::new(
            Parameter::new(
                format!("{prefix}.down.weight"),
                kaiming_uniform(&[d, m], 5f64.sqrt(), rng),
                true,
            ),
            Some(Parameter::new(
                format!("{prefix}.down.bias"),
                uniform(&[m], (d as f64).powf(-0.5), rng),
                true,
            )),
        )?;
        let up = LinearLayer::new(
            Parameter::new(format!("{prefix}.up.weight"), Tensor::zeros([m, d]), true),
            Some(Parameter::new(format!("{prefix}.up.bias"), Tensor::zeros([d]), true)),
        )?;
        Ok(Adapter { cfg, down, up })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.cfg.dim) {
            return Err(Error::shape("adapter_forward", tape.shape(x), &[self.cfg.dim]));
        }
        let h = self.down.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.up.forward(tape, h)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.down.params();
        p.extend(self.up.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.down.params_mut();
        p.extend(self.up.params_mut());
        p
    }
}
