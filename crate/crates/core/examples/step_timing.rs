//! Times forward, loss, backward and optimizer phases of one training step.
//!
//! Usage: `step_timing [batch] [channels] [layers] [size] [mask_stride]`
//! (defaults 4 64 9 128 4).

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use textseg_core::loss::{total_loss, LossWeights, Target};
use textseg_core::model::{Model, ModelConfig};
use textseg_core::skeleton::zhang_suen_thin;
use textseg_core::BinaryMask;

fn main() {
    let mut args = [4, 64, 9, 128, 4];
    for (slot, a) in args.iter_mut().zip(std::env::args().skip(1)) {
        *slot = a.parse().expect("numeric argument");
    }
    let [b, c, layers, size, stride] = args;
    let mut cfg = ModelConfig::default();
    cfg.decoder.channel_dim = c;
    cfg.decoder.num_layers = layers;
    cfg.mask_stride = stride;
    let model = Model::new(&cfg, 0, DType::F32).unwrap();
    println!("parameters {}", model.params.num_scalars());
    let mut opt = AdamW::new(model.params.vars(), ParamsAdamW::default()).unwrap();
    let x = Tensor::rand(0f32, 1f32, (b, size, size, 3), &Device::Cpu).unwrap();
    let targets: Vec<Target> = (0..b)
        .map(|i| {
            let m = BinaryMask::from_fn(size, size, |r, cc| (r / 7 + cc / 5 + i) % 3 == 0);
            Target {
                skeletons: vec![zhang_suen_thin(&m)],
                masks: vec![m],
            }
        })
        .collect();
    for it in 0..3 {
        let t0 = Instant::now();
        let out = model.forward(&x).unwrap();
        let t1 = Instant::now();
        let loss = total_loss(&out.predictions, &targets, &LossWeights::default()).unwrap();
        let t2 = Instant::now();
        let grads = loss.total.backward().unwrap();
        let t3 = Instant::now();
        opt.step(&grads).unwrap();
        let t4 = Instant::now();
        println!(
            "step {it}: loss {:.4} forward {:?} loss {:?} backward {:?} update {:?}",
            loss.total_value().unwrap(),
            t1 - t0,
            t2 - t1,
            t3 - t2,
            t4 - t3
        );
    }
}
