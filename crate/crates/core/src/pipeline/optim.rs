use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::gtformer::{OptimizerState, ParamStore};
use crate::Result;

use super::OptimizerConfig;

/// AdamW with decoupled weight decay on matrix weights only (biases, norms,
/// tokens and positional embeddings are not decayed). The moment estimates
/// are exposed so they can be checkpointed.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    state: OptimizerState,
}

pub fn decays(name: &str, rank: usize) -> bool {
    rank == 2 && name.ends_with(".weight")
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    pub fn with_state(config: OptimizerConfig, state: OptimizerState) -> Self {
        Self { config, state }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step_count(&self) -> usize {
        self.state.step
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let c = &self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.state.first_moment.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.state.second_moment.get(name) {
                Some(v) => ((v * c.beta2)? + (&g2 * (1.0 - c.beta2))?)?,
                None => (&g2 * (1.0 - c.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let mut p: Tensor = var.as_tensor().detach();
            if decays(name, p.rank()) {
                p = (p * (1.0 - lr * c.weight_decay))?;
            }
            p = (p - (update * lr)?)?;
            var.set(&p)?;
            self.state.first_moment.insert(name.clone(), m);
            self.state.second_moment.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn first_step_matches_closed_form() {
        // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g|+eps).
        let dev = Device::Cpu;
        let mut store = ParamStore::default();
        store
            .insert("x.weight".into(), Tensor::new(&[[1.0f64, -2.0]], &dev).unwrap())
            .unwrap();
        let w: Var = store.var("x.weight").unwrap().clone();
        let loss = (w.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&store, &grads, 0.01).unwrap();
        let got = w.as_tensor().to_vec2::<f64>().unwrap();
        let upd = 0.01 * 3.0 / (3.0 + 1e-8);
        let decay = 1.0 - 0.01 * 0.1;
        assert!((got[0][0] - (1.0 * decay - upd)).abs() < 1e-12);
        assert!((got[0][1] - (-2.0 * decay - upd)).abs() < 1e-12);
        assert_eq!(opt.step_count(), 1);
        assert_eq!(w.as_tensor().dtype(), DType::F64);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        assert!(decays("blocks.0.attn.qkv.weight", 2));
        assert!(!decays("blocks.0.norm1.weight", 1));
        assert!(!decays("pos_embed", 2));
        assert!(!decays("head.bias", 1));
    }
}
