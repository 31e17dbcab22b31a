//! Cycle-consistent GAN training on two image pools sampled independently
//! (the pairing of the fixture data is deliberately ignored).
//!
//! Per batch: both discriminators take one step on real vs detached fake
//! images of their own domain, then both generators take one joint step on
//! adversarial + cycle + identity terms against the updated, frozen
//! discriminators.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::data::batch::epoch_batches;
use crate::data::PairedData;
use crate::error::{Result, TensorError};
use crate::nn::bundle::{CycleGanModel, ModelArch, ModelBundle, ModelKind};
use crate::nn::layers::{Fwd, Module};
use crate::optim::Adam;
use crate::rng::{Rng, STREAM_SHUFFLE};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::train::pix2pix::{ones_like, zeros_like};
use crate::train::{Clock, TrainAbort, TrainConfig, TrainError, TrainHistory, TrainOutput};

struct StepLosses {
    d_loss: f64,
    g_adv: f64,
    cycle: f64,
    identity: f64,
}

fn half_bce_real_fake<E: Scalar>(
    tape: &mut Tape<E>,
    real_logits: NodeId,
    fake_logits: NodeId,
) -> Result<NodeId> {
    let ones = ones_like(tape, real_logits)?;
    let zeros = zeros_like(tape, fake_logits)?;
    let lr = tape.bce_with_logits(real_logits, ones)?;
    let lf = tape.bce_with_logits(fake_logits, zeros)?;
    let sum = tape.add(lr, lf)?;
    tape.scale(sum, 0.5)
}

fn cyclegan_step<E: Scalar>(
    model: &mut CycleGanModel<E>,
    cfg: &TrainConfig,
    src: &Tensor<E>,
    tgt: &Tensor<E>,
    adam_g: &mut Adam<E>,
    adam_d: &mut Adam<E>,
) -> Result<StepLosses> {
    model.g_ab.zero_grads();
    model.g_ba.zero_grads();
    model.d_a.zero_grads();
    model.d_b.zero_grads();

    // Both translations, once, on the generator tape.
    let mut tg = Tape::new();
    let x = tg.input(src)?;
    let y = tg.input(tgt)?;
    let fake_b = model.g_ab.forward(&mut tg, x, Fwd::train())?;
    let fake_a = model.g_ba.forward(&mut tg, y, Fwd::train())?;
    let fake_b_value = tg.to_tensor(fake_b);
    let fake_a_value = tg.to_tensor(fake_a);

    // Discriminator steps on detached fakes, one Adam over both nets
    // (their parameter sets are disjoint).
    let mut td = Tape::new();
    let xd = td.input(src)?;
    let yd = td.input(tgt)?;
    let fbd = td.input(&fake_b_value)?;
    let fad = td.input(&fake_a_value)?;
    let db_real = model.d_b.forward(&mut td, yd, Fwd::train())?;
    let db_fake = model.d_b.forward(&mut td, fbd, Fwd::train())?;
    let da_real = model.d_a.forward(&mut td, xd, Fwd::train())?;
    let da_fake = model.d_a.forward(&mut td, fad, Fwd::train())?;
    let l_db = half_bce_real_fake(&mut td, db_real, db_fake)?;
    let l_da = half_bce_real_fake(&mut td, da_real, da_fake)?;
    let d_total = td.add(l_da, l_db)?;
    td.backward(d_total)?;
    model.d_a.collect_grads(&td);
    model.d_b.collect_grads(&td);
    adam_d.step(&mut [("d_a", &mut model.d_a), ("d_b", &mut model.d_b)])?;

    // Joint generator objective against the updated, frozen critics.
    let db_on_fake = model.d_b.forward(&mut tg, fake_b, Fwd::frozen())?;
    let da_on_fake = model.d_a.forward(&mut tg, fake_a, Fwd::frozen())?;
    let ones_b = ones_like(&mut tg, db_on_fake)?;
    let ones_a = ones_like(&mut tg, da_on_fake)?;
    let adv_b = tg.bce_with_logits(db_on_fake, ones_b)?;
    let adv_a = tg.bce_with_logits(da_on_fake, ones_a)?;
    let g_adv = tg.add(adv_a, adv_b)?;
    let mut total = g_adv;

    let mut cycle_raw = 0.0f64;
    if cfg.lambda_cyc > 0.0 {
        let cyc_a = model.g_ba.forward(&mut tg, fake_b, Fwd::train())?;
        let cyc_b = model.g_ab.forward(&mut tg, fake_a, Fwd::train())?;
        let l_cyc_a = tg.l1_loss(cyc_a, x)?;
        let l_cyc_b = tg.l1_loss(cyc_b, y)?;
        let cyc = tg.add(l_cyc_a, l_cyc_b)?;
        cycle_raw = tg.scalar(cyc).as_f64();
        let weighted = tg.scale(cyc, cfg.lambda_cyc)?;
        total = tg.add(total, weighted)?;
    }

    let mut identity_raw = 0.0f64;
    if cfg.lambda_id > 0.0 {
        let id_b = model.g_ab.forward(&mut tg, y, Fwd::train())?;
        let id_a = model.g_ba.forward(&mut tg, x, Fwd::train())?;
        let l_id_b = tg.l1_loss(id_b, y)?;
        let l_id_a = tg.l1_loss(id_a, x)?;
        let ident = tg.add(l_id_a, l_id_b)?;
        identity_raw = tg.scalar(ident).as_f64();
        let weighted = tg.scale(ident, cfg.lambda_id)?;
        total = tg.add(total, weighted)?;
    }

    tg.backward(total)?;
    model.g_ab.collect_grads(&tg);
    model.g_ba.collect_grads(&tg);
    adam_g.step(&mut [("g_ab", &mut model.g_ab), ("g_ba", &mut model.g_ba)])?;

    Ok(StepLosses {
        d_loss: td.scalar(d_total).as_f64(),
        g_adv: tg.scalar(g_adv).as_f64(),
        cycle: cycle_raw,
        identity: identity_raw,
    })
}

/// The paired fixture layout supplies the two pools; sampling permutes
/// each domain independently so no aligned pair ever co-occurs by
/// construction.
pub fn train_cyclegan<E: Scalar>(
    data: &PairedData<E>,
    cfg: &TrainConfig,
    rng: Rng,
    clock: &dyn Clock,
) -> core::result::Result<TrainOutput<E>, TrainError<E>> {
    if cfg.kind != ModelKind::CycleGan {
        return Err(TrainError::Invalid(TensorError::InvalidConfig {
            what: alloc::format!("expected model cyclegan, got {}", cfg.kind),
        }));
    }
    cfg.validate().map_err(TrainError::Invalid)?;
    if data.is_empty() {
        return Err(TrainError::Invalid(TensorError::EmptyDataset));
    }
    let mut bundle = ModelBundle::build(cfg).map_err(TrainError::Invalid)?;
    let mut adam_g = Adam::from_config(cfg);
    let mut adam_d = Adam::from_config(cfg);
    let shuffle_a = rng.substream(STREAM_SHUFFLE);
    let shuffle_b = rng.substream(STREAM_SHUFFLE ^ 0xB);
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng_a = shuffle_a.substream(epoch as u64);
        let mut rng_b = shuffle_b.substream(epoch as u64);
        let batches_a = epoch_batches(data.len(), cfg.batch_size, &mut rng_a, false);
        let batches_b = epoch_batches(data.len(), cfg.batch_size, &mut rng_b, false);
        for (batch_a, batch_b) in batches_a.into_iter().zip(batches_b) {
            let src = data.gather_domain(&batch_a, false);
            let tgt = data.gather_domain(&batch_b, true);
            let result = {
                let ModelArch::CycleGan(model) = &mut bundle.arch else {
                    unreachable!("kind checked above")
                };
                cyclegan_step(model, cfg, &src, &tgt, &mut adam_g, &mut adam_d)
            };
            match result {
                Ok(losses) => {
                    let wall = if cfg.deterministic {
                        0.0
                    } else {
                        clock.elapsed_secs()
                    };
                    history.push(epoch, step, "d_loss", losses.d_loss, wall);
                    history.push(epoch, step, "g_adv", losses.g_adv, wall);
                    history.push(epoch, step, "cycle", losses.cycle, wall);
                    history.push(epoch, step, "identity", losses.identity, wall);
                }
                Err(error) => {
                    let batch: Vec<usize> = batch_a;
                    return Err(TrainError::Numeric(Box::new(TrainAbort {
                        error,
                        epoch,
                        step,
                        batch,
                        last_good: bundle,
                        history,
                    })));
                }
            }
            step += 1;
        }
    }

    Ok(TrainOutput { bundle, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_dataset, PhantomSpec};
    use crate::train::NullClock;

    /// λ_cyc = λ_id = 0 degenerates to two unconditional GANs; the cycle
    /// and identity components are recorded as exactly zero.
    #[test]
    fn zero_weights_disable_cycle_and_identity_terms() {
        let cfg = TrainConfig {
            kind: ModelKind::CycleGan,
            image_size: 32,
            in_channels: 1,
            base_width: 4,
            batch_size: 2,
            epochs: 1,
            lambda_cyc: 0.0,
            lambda_id: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let data = generate_dataset::<f32>(&PhantomSpec::new(4, 32, 3), 1).unwrap();
        let out = train_cyclegan(&data, &cfg, Rng::new(cfg.seed), &NullClock).unwrap();
        assert!(out.history.component("cycle").iter().all(|&v| v == 0.0));
        assert!(out.history.component("identity").iter().all(|&v| v == 0.0));
        assert!(out.history.all_finite());
    }

    /// An identity-map generator contributes zero identity loss.
    #[test]
    fn identity_term_vanishes_for_a_pixel_identity_map() {
        let mut tape = Tape::<f64>::new();
        let y = tape
            .input(&Tensor::from_vec(&[1, 1, 2, 2], alloc::vec![0.1, -0.4, 0.7, 0.0]).unwrap())
            .unwrap();
        // G := identity on the tape.
        let l = tape.l1_loss(y, y).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }
}
