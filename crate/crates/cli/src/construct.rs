//! A deep target whose attention blocks add nothing, paired with a one-layer
//! draft built from the same embedding and heads. Both define the same
//! next-event law (up to the optional draft-head noise) while the target
//! costs many times more per forward pass.

use tppsd_core::autodiff::Tensor;
use tppsd_core::model::{ModelCheckpoint, ModelConfig};
use tppsd_core::{Result, RngStream};

const DRAFT_HEAD_BIASES: [&str; 4] = ["head.w_bias", "head.mu_bias", "head.sigma_bias", "mark.out_bias"];

fn zero_values(ckpt: &mut ModelCheckpoint) -> Result<()> {
    for l in 0..ckpt.config.num_layers {
        let name = format!("layer{l}.wv");
        let shape = ckpt.tensor(&name).expect("layer exists").shape().to_vec();
        ckpt.set_tensor(&name, Tensor::zeros(shape))?;
    }
    Ok(())
}

/// Returns `(target, draft)`. With `noise = 0` the two produce bit-identical
/// distributions at every position.
pub fn layered_pair(
    embed_dim: usize,
    components: usize,
    marks: usize,
    target_layers: usize,
    noise: f64,
    seed: u64,
) -> Result<(ModelCheckpoint, ModelCheckpoint)> {
    let root = RngStream::new(seed, 0);
    let mut draft = ModelCheckpoint::init(
        ModelConfig::new(embed_dim, components, marks, 1, 1),
        &mut root.substream(1),
    )?;
    zero_values(&mut draft)?;
    let mut target = ModelCheckpoint::init(
        ModelConfig::new(embed_dim, components, marks, 1, target_layers),
        &mut root.substream(2),
    )?;
    for (name, t) in draft.tensors() {
        if !name.starts_with("layer") {
            target.set_tensor(name, (**t).clone())?;
        }
    }
    zero_values(&mut target)?;
    if noise > 0.0 {
        let mut rng = root.substream(3);
        for name in DRAFT_HEAD_BIASES {
            let t = draft.tensor(name).expect("head bias exists");
            let data = t.data().iter().map(|v| v + noise * rng.standard_normal()).collect();
            draft.set_tensor(name, Tensor::new(t.shape().to_vec(), data)?)?;
        }
    }
    Ok((target, draft))
}
