//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segcore::data::{batch, prepare, synth_dataset, SynthSpec};
use segcore::losses::{composite_loss, LevelSetMap, LossSchedule, LossTerms};
use segcore::model::{ModelConfig, Network};
use segcore::{ForwardCtx, ParamStore, Result, Tape, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A network, its parameters and one prepared batch of synthetic images.
pub struct TrainFixture {
    pub net: Network,
    pub store: ParamStore,
    pub x: Tensor,
    pub g: Tensor,
    pub lv: LevelSetMap,
}

impl TrainFixture {
    pub fn new(cfg: &ModelConfig, batch_size: usize) -> Result<Self> {
        let spec = SynthSpec {
            height: cfg.input_height,
            width: cfg.input_width,
            channels: cfg.input_channels,
            count: batch_size,
            ..SynthSpec::default()
        };
        let prepared = synth_dataset(&spec, 0)?
            .iter()
            .map(|s| prepare(s, cfg.num_classes))
            .collect::<Result<Vec<_>>>()?;
        let (x, g, lv) = batch(&prepared)?;
        let net = Network::new(cfg)?;
        let store = net.build(0)?;
        Ok(Self {
            net,
            store,
            x,
            g,
            lv,
        })
    }

    /// Forward pass, composite loss and backward pass; returns the loss.
    pub fn step(&self) -> Result<f64> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, true);
        let s = self.net.forward(
            &p,
            &tape.constant(self.x.clone()),
            &mut ForwardCtx::training(0.1),
        )?;
        let (loss, parts) = composite_loss(
            &s,
            &self.g,
            &self.lv,
            &LossSchedule::default(),
            0,
            LossTerms::ALL,
        )?;
        tape.backward(&loss)?;
        Ok(parts.total)
    }
}
