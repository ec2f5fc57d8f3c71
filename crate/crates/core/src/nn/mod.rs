//! Minimal CPU neural-network engine: 3D convolutions, group norm, attention,
//! residual U-Nets and an autoencoder, each with an explicit backward pass.
//! Single-threaded and deterministic: equal seeds give bit-identical weights.

pub mod autoencoder;
pub mod blocks;
pub mod checkpoint;
mod direct;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod unet;

pub use autoencoder::{Autoencoder, AutoencoderSpec, DOWNSAMPLE_FACTOR, LATENT_CHANNELS};
pub use checkpoint::Checkpoint;
pub use layers::Activation;
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use param::{Module, Param, ParamVisitor};
pub use tensor::Tensor;
pub use unet::{UNet, UNetSpec};

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    assert_eq!(pred.len(), target.len(), "mse operands");
    let n = pred.len() as f64;
    let mut loss = 0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod gradcheck;
