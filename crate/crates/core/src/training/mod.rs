//! Joint training of the denoiser and the regularizer gradient network. The
//! denoiser learns to remove Gaussian noise; the gradient network learns to
//! reproduce the denoising residual scaled by the noise variance, which ties
//! it to the gradient of the implicit regularizer. Iterations alternate
//! between matched noise levels (both losses active) and independently drawn
//! ones (residual loss only). One `(sigma0, sigma)` pair is drawn per
//! optimization step and shared by the whole batch.

pub mod data;

pub use data::{synthetic_images, PatchDataset};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::add_awgn_with;
use crate::error::{Error, Result};
use crate::priors::net::{DenoiserNet, RegGradNet};
use crate::priors::{residual_identity_error, Prior};
use crate::tensor::adam::{AdamParams, AdamState};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// One noise-level draw: the true noise std `sigma0` applied to the batch,
/// the loss parameter `sigma`, and whether they were drawn equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaDraw {
    pub sigma0: f64,
    pub sigma: f64,
    pub delta: bool,
}

impl SigmaDraw {
    pub fn delta_weight(&self) -> f64 {
        if self.delta {
            1.0
        } else {
            0.0
        }
    }
}

/// Training configuration with desk-scale defaults.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Weight of the residual loss in the global loss.
    pub lambda: f64,
    pub sigma_max: f64,
    /// Share of iterations drawn with `sigma = sigma0`.
    pub alternation: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub steps: usize,
    pub lr0: f64,
    /// The learning rate halves every this many steps.
    pub lr_half_period: usize,
    pub lr_floor: f64,
    pub seed: u64,
    /// Keep the denoiser parameters fixed during joint training.
    pub freeze_denoiser: bool,
    /// Let residual-loss gradients flow into the denoiser parameters.
    pub lg_updates_denoiser: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: 32x32 patches, batch 8, 20k steps, learning rate
    /// 1e-4 halving every 5k steps down to 1e-5.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lambda: 0.004,
            sigma_max: 50.0 / 255.0,
            alternation: 0.5,
            batch_size: 8,
            patch_size: 32,
            steps: 20000,
            lr0: 1e-4,
            lr_half_period: 5000,
            lr_floor: 1e-5,
            seed,
            freeze_denoiser: false,
            lg_updates_denoiser: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::arg(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alternation) {
            return Err(Error::arg(format!(
                "alternation fraction must lie in [0,1], got {}",
                self.alternation
            )));
        }
        if self.sigma_max <= 0.0 {
            return Err(Error::arg(format!(
                "sigma range must be positive, got {}",
                self.sigma_max
            )));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::arg("batch and patch sizes must be positive"));
        }
        if self.lr0 <= 0.0 || self.lr_floor < 0.0 {
            return Err(Error::arg("learning rates must be positive"));
        }
        if self.lr_half_period == 0 {
            return Err(Error::arg("halving period must be at least 1"));
        }
        Ok(())
    }
}

/// Stepped learning rate: `max(lr0 * 2^-floor(step/period), floor)`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let halvings = (step / cfg.lr_half_period).min(i32::MAX as usize) as i32;
    (cfg.lr0 * 0.5f64.powi(halvings)).max(cfg.lr_floor)
}

/// Draw the per-step noise levels: with probability `cfg.alternation` the two
/// coincide, otherwise they are drawn independently. The flag is decided by
/// the sampling branch, not by comparing floats (though an accidental exact
/// collision also counts as matched).
pub fn sample_sigmas(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> SigmaDraw {
    let sigma0 = rng.gen_range(0.0..cfg.sigma_max);
    if rng.gen_bool(cfg.alternation) {
        SigmaDraw { sigma0, sigma: sigma0, delta: true }
    } else {
        let sigma = rng.gen_range(0.0..cfg.sigma_max);
        SigmaDraw { sigma0, sigma, delta: sigma == sigma0 }
    }
}

/// Denoising loss: per-pixel mean absolute error of `D` applied to `z` at
/// noise level `sigma0` against the clean `x0`.
pub fn loss_ld<T: Scalar>(
    d: &dyn Prior<T>,
    z: &Tensor<T>,
    x0: &Tensor<T>,
    sigma0: f64,
) -> Result<f64> {
    let den = d.prox(z, sigma0)?;
    Ok(den.sub(x0)?.abs().mean())
}

/// Residual loss: per-pixel mean of the squared gap between
/// `sigma^2 G(D_sigma(z))` and the denoising residual `z - D_sigma(z)`.
pub fn loss_lg<T: Scalar>(
    g: &dyn Prior<T>,
    d: &dyn Prior<T>,
    z: &Tensor<T>,
    sigma: f64,
) -> Result<f64> {
    let den = d.prox(z, sigma)?;
    let resid = z.sub(&den)?;
    let lhs = g.grad(&den)?.scale(sigma * sigma);
    lhs.mse(&resid)
}

/// Global loss `delta * LD + lambda * LG`.
pub fn loss_total(ld: f64, lg: f64, delta: bool, lambda: f64) -> f64 {
    (if delta { ld } else { 0.0 }) + lambda * lg
}

/// Denoising loss on the tape.
pub fn loss_ld_traced<T: Scalar>(
    tape: &mut Tape<T>,
    d: &DenoiserNet<T>,
    d_params: &[NodeId],
    z: NodeId,
    x0: NodeId,
    sigma0: f64,
) -> Result<NodeId> {
    let den = d.denoise_traced(tape, d_params, z, sigma0)?;
    tape.mean_abs_diff(den, x0)
}

/// Residual loss on the tape; gradients flow into both parameter sets.
pub fn loss_lg_traced<T: Scalar>(
    tape: &mut Tape<T>,
    g: &RegGradNet<T>,
    g_params: &[NodeId],
    d: &DenoiserNet<T>,
    d_params: &[NodeId],
    z: NodeId,
    sigma: f64,
) -> Result<NodeId> {
    let den = d.denoise_traced(tape, d_params, z, sigma)?;
    let resid = tape.sub(z, den)?;
    let gout = g.grad_traced(tape, g_params, den)?;
    let lhs = tape.scale(gout, sigma * sigma);
    tape.mean_sq_diff(lhs, resid)
}

/// One log row per optimization step.
#[derive(Debug, Clone)]
pub struct TrainRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss: f64,
    pub lr: f64,
    pub delta: bool,
}

/// Training log, exportable as CSV with a running matched-draw rate.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_d,loss_g,loss,lr,delta_rate\n");
        let mut matched = 0usize;
        for (i, row) in self.rows.iter().enumerate() {
            if row.delta {
                matched += 1;
            }
            let rate = matched as f64 / (i + 1) as f64;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.step, row.loss_d, row.loss_g, row.loss, row.lr, rate
            ));
        }
        out
    }

    pub fn delta_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.delta).count() as f64 / self.rows.len() as f64
    }
}

fn collect_grads<T: Scalar>(
    tape: &Tape<T>,
    leaves: &[NodeId],
    params: &[Tensor<T>],
) -> Vec<Tensor<T>> {
    leaves
        .iter()
        .zip(params)
        .map(|(&l, p)| tape.grad(l).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Train the denoiser alone on the denoising loss with `sigma0` drawn
/// uniformly per step. Aborts on a non-finite loss before the parameters are
/// touched, so the caller still holds the last good state.
pub fn pretrain_denoiser_into<T: Scalar>(
    d: &mut DenoiserNet<T>,
    dataset: &PatchDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.channels() != d.image_channels() {
        return Err(Error::dim(format!(
            "denoiser expects {} channels, dataset has {}",
            d.image_channels(),
            dataset.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(d.unet().params(), AdamParams::default());
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let lr = lr_at(cfg, step);
        let sigma0 = rng.gen_range(0.0..cfg.sigma_max);
        let x0 = dataset.sample_batch(cfg.batch_size, &mut rng)?;
        let z = add_awgn_with(&x0, sigma0, &mut rng);

        let mut tape = Tape::new();
        let leaves = d.unet().insert_leaves(&mut tape);
        let zn = tape.constant(z);
        let x0n = tape.constant(x0);
        let loss = loss_ld_traced(&mut tape, d, &leaves, zn, x0n, sigma0)?;
        let lv = tape.value(loss).data()[0].to_f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "denoiser pretraining loss became non-finite at step {step}"
            )));
        }
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &leaves, d.unet().params());
        adam.step(d.unet_mut().params_mut(), &grads, lr)?;
        log.rows.push(TrainRow { step, loss_d: lv, loss_g: 0.0, loss: lv, lr, delta: true });
    }
    Ok(log)
}

/// Pretrain a fresh desk-scale denoiser for the dataset's channel count.
pub fn pretrain_denoiser<T: Scalar>(
    dataset: &PatchDataset<T>,
    cfg: &TrainConfig,
) -> Result<(DenoiserNet<T>, TrainLog)> {
    let mut d = DenoiserNet::desk_default(dataset.channels(), cfg.seed)?;
    let log = pretrain_denoiser_into(&mut d, dataset, cfg)?;
    Ok((d, log))
}

/// Jointly train the denoiser and the gradient network. Per step: draw the
/// noise levels, a patch batch and its noisy version, build the global loss
/// on the tape and take Adam steps on the gradient network and (unless
/// frozen) the denoiser. On matched draws both losses are active and share
/// one denoiser forward pass; on independent draws only the residual loss
/// drives the update and the denoising loss is logged from a pure pass.
pub fn joint_train<T: Scalar>(
    d: &mut DenoiserNet<T>,
    g: &mut RegGradNet<T>,
    dataset: &PatchDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.channels() != d.image_channels() || dataset.channels() != g.image_channels() {
        return Err(Error::dim(format!(
            "channel mismatch: dataset {}, denoiser {}, gradient net {}",
            dataset.channels(),
            d.image_channels(),
            g.image_channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g_adam = AdamState::new(g.unet().params(), AdamParams::default());
    let mut d_adam = if cfg.freeze_denoiser {
        None
    } else {
        Some(AdamState::new(d.unet().params(), AdamParams::default()))
    };
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let lr = lr_at(cfg, step);
        let draw = sample_sigmas(cfg, &mut rng);
        let x0 = dataset.sample_batch(cfg.batch_size, &mut rng)?;
        let z = add_awgn_with(&x0, draw.sigma0, &mut rng);

        let d_trainable = !cfg.freeze_denoiser;
        let d_in_lg = d_trainable && cfg.lg_updates_denoiser;
        let d_in_graph = d_in_lg || (d_trainable && draw.delta);

        let mut tape = Tape::new();
        let g_leaves = g.unet().insert_leaves(&mut tape);
        let d_leaves = if d_in_graph { d.unet().insert_leaves(&mut tape) } else { Vec::new() };
        let zn = tape.constant(z.clone());
        let x0n = tape.constant(x0.clone());

        let (objective, ld_val, lg_val);
        if draw.delta {
            let d_consts;
            let lg_params: &[NodeId] = if d_in_lg {
                &d_leaves
            } else {
                d_consts = d.unet().insert_constants(&mut tape);
                &d_consts
            };
            let (ld, lg) = if d_trainable && !cfg.lg_updates_denoiser {
                // The denoiser trains through LD only, so LD gets its own
                // tracked pass while LG sees frozen copies.
                let ld = loss_ld_traced(&mut tape, d, &d_leaves, zn, x0n, draw.sigma0)?;
                let lg =
                    loss_lg_traced(&mut tape, g, &g_leaves, d, lg_params, zn, draw.sigma)?;
                (ld, lg)
            } else {
                // Matched levels share one denoiser pass for both losses.
                let den = d.denoise_traced(&mut tape, lg_params, zn, draw.sigma)?;
                let ld = tape.mean_abs_diff(den, x0n)?;
                let resid = tape.sub(zn, den)?;
                let gout = g.grad_traced(&mut tape, &g_leaves, den)?;
                let lhs = tape.scale(gout, draw.sigma * draw.sigma);
                let lg = tape.mean_sq_diff(lhs, resid)?;
                (ld, lg)
            };
            ld_val = tape.value(ld).data()[0].to_f64();
            lg_val = tape.value(lg).data()[0].to_f64();
            let lgs = tape.scale(lg, cfg.lambda);
            objective = if d_trainable { tape.add(ld, lgs)? } else { lgs };
        } else {
            let d_consts;
            let lg_params: &[NodeId] = if d_in_lg {
                &d_leaves
            } else {
                d_consts = d.unet().insert_constants(&mut tape);
                &d_consts
            };
            let lg = loss_lg_traced(&mut tape, g, &g_leaves, d, lg_params, zn, draw.sigma)?;
            lg_val = tape.value(lg).data()[0].to_f64();
            ld_val = loss_ld(d, &z, &x0, draw.sigma0)?;
            objective = tape.scale(lg, cfg.lambda);
        }

        let total = loss_total(ld_val, lg_val, draw.delta, cfg.lambda);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "joint training loss became non-finite at step {step}"
            )));
        }
        tape.backward(objective)?;

        let g_grads = collect_grads(&tape, &g_leaves, g.unet().params());
        g_adam.step(g.unet_mut().params_mut(), &g_grads, lr)?;
        if let Some(da) = d_adam.as_mut() {
            // Skip the denoiser update entirely on steps where no loss term
            // reaches it, rather than decaying its Adam moments.
            if d_in_lg || draw.delta {
                let d_grads = collect_grads(&tape, &d_leaves, d.unet().params());
                da.step(d.unet_mut().params_mut(), &d_grads, lr)?;
            }
        }
        log.rows.push(TrainRow {
            step,
            loss_d: ld_val,
            loss_g: lg_val,
            loss: total,
            lr,
            delta: draw.delta,
        });
    }
    Ok(log)
}

/// Mean denoising loss over random held-out probes.
pub fn eval_denoiser_ld<T: Scalar>(
    d: &DenoiserNet<T>,
    dataset: &PatchDataset<T>,
    probes: usize,
    sigma_max: f64,
    seed: u64,
) -> Result<f64> {
    if probes == 0 || sigma_max <= 0.0 {
        return Err(Error::arg("need at least one probe and a positive sigma range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..probes {
        let sigma0 = rng.gen_range(0.0..sigma_max);
        let x0 = dataset.sample_batch(1, &mut rng)?;
        let z = add_awgn_with(&x0, sigma0, &mut rng);
        acc += loss_ld(d, &z, &x0, sigma0)?;
    }
    Ok(acc / probes as f64)
}

/// Mean residual-identity error of the trained pair over random held-out
/// probes with noise levels drawn away from zero.
pub fn heldout_residual_error<T: Scalar>(
    g: &RegGradNet<T>,
    d: &DenoiserNet<T>,
    dataset: &PatchDataset<T>,
    probes: usize,
    sigma_max: f64,
    seed: u64,
) -> Result<f64> {
    if probes == 0 || sigma_max <= 0.0 {
        return Err(Error::arg("need at least one probe and a positive sigma range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..probes {
        let sigma = rng.gen_range(0.02 * sigma_max..sigma_max);
        let x = dataset.sample_batch(1, &mut rng)?;
        let z = add_awgn_with(&x, sigma, &mut rng);
        acc += residual_identity_error(g, d, &z, sigma)?;
    }
    Ok(acc / probes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::grad_check;
    use crate::priors::TikhonovPrior;

    struct IdentityDenoiser;
    impl Prior<f64> for IdentityDenoiser {
        fn has_prox(&self) -> bool {
            true
        }
        fn prox(&self, z: &Tensor<f64>, _sigma: f64) -> Result<Tensor<f64>> {
            Ok(z.clone())
        }
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            patch_size: 12,
            steps: 50,
            lr0: 1e-3,
            lr_half_period: 10000,
            lr_floor: 1e-6,
            ..TrainConfig::desk(seed)
        }
    }

    fn small_nets(seed: u64) -> (DenoiserNet<f64>, RegGradNet<f64>) {
        (
            DenoiserNet::new(1, 1, 4, 1, seed).unwrap(),
            RegGradNet::new(1, 1, 4, 1, seed + 100).unwrap(),
        )
    }

    #[test]
    fn sigma_draws_follow_the_alternation_fraction() {
        let cfg = TrainConfig::desk(0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut matched = 0usize;
        for _ in 0..n {
            let draw = sample_sigmas(&cfg, &mut rng);
            assert!((0.0..=cfg.sigma_max).contains(&draw.sigma0));
            assert!((0.0..=cfg.sigma_max).contains(&draw.sigma));
            if draw.delta {
                assert_eq!(draw.sigma, draw.sigma0);
                matched += 1;
            }
        }
        let rate = matched as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.01, "matched rate {rate}");

        let always = TrainConfig { alternation: 1.0, ..cfg.clone() };
        for _ in 0..100 {
            assert!(sample_sigmas(&always, &mut rng).delta);
        }
        let never = TrainConfig { alternation: 0.0, ..cfg };
        let draws: Vec<SigmaDraw> = (0..100).map(|_| sample_sigmas(&never, &mut rng)).collect();
        assert!(draws.iter().filter(|d| d.delta).count() == 0);
    }

    #[test]
    fn denoising_loss_matches_the_gaussian_mean_absolute_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Tensor::<f64>::full(&[1, 1, 320, 320], 0.4);
        let sigma0 = 0.1;
        let z = add_awgn_with(&x0, sigma0, &mut rng);
        let loss = loss_ld(&IdentityDenoiser, &z, &x0, sigma0).unwrap();
        let expect = sigma0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((loss - expect).abs() / expect < 0.02, "loss {loss} vs {expect}");
        // Zero noise and an identity denoiser reproduce the clean image.
        let exact = loss_ld(&IdentityDenoiser, &x0, &x0, 0.0).unwrap();
        assert_eq!(exact, 0.0);
    }

    #[test]
    fn residual_loss_vanishes_for_the_matched_analytic_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 12, 12], 0.0, 1.0, &mut rng);
        let loss = loss_lg(&TikhonovPrior, &TikhonovPrior, &z, 0.3).unwrap();
        assert!(loss < 1e-28, "loss {loss}");
    }

    #[test]
    fn residual_loss_at_sigma_zero_ignores_the_gradient_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 10, 10], 0.0, 1.0, &mut rng);
        let (d, g1) = small_nets(1);
        let (_, g2) = small_nets(2);
        let a = loss_lg(&g1, &d, &z, 0.0).unwrap();
        let b = loss_lg(&g2, &d, &z, 0.0).unwrap();
        assert_eq!(a, b);
        let den = d.denoise(&z, 0.0).unwrap();
        assert!((a - z.mse(&den).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn global_loss_arithmetic() {
        assert_eq!(loss_total(3.0, 2.0, false, 0.004), 0.008);
        let v = loss_total(1.0, 2.0, true, 0.004);
        assert!((v - 1.008).abs() < 1e-15, "{v}");
    }

    #[test]
    fn traced_losses_match_finite_differences() {
        let (d, g) = small_nets(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let sigma = 0.15;
        let z = add_awgn_with(&x0, sigma, &mut rng);
        let nd = d.unet().params().len();

        let mut inputs: Vec<Tensor<f64>> = d.unet().params().to_vec();
        inputs.extend_from_slice(g.unet().params());
        let report = grad_check(&inputs, &|tape, leaves| {
            let (d_leaves, g_leaves) = leaves.split_at(nd);
            let zn = tape.constant(z.clone());
            let x0n = tape.constant(x0.clone());
            let ld = loss_ld_traced(tape, &d, d_leaves, zn, x0n, sigma)?;
            let lg = loss_lg_traced(tape, &g, g_leaves, &d, d_leaves, zn, sigma)?;
            let lgs = tape.scale(lg, 0.004);
            tape.add(ld, lgs)
        })
        .unwrap();
        assert!(report.max_err <= 1e-5, "fd mismatch {:?}", report);
    }

    #[test]
    fn learning_rate_schedule_is_exact() {
        let cfg = TrainConfig::desk(0);
        assert_eq!(lr_at(&cfg, 0), 1e-4);
        assert_eq!(lr_at(&cfg, 4999), 1e-4);
        assert_eq!(lr_at(&cfg, 5000), 5e-5);
        assert_eq!(lr_at(&cfg, 9999), 5e-5);
        assert_eq!(lr_at(&cfg, 10000), 2.5e-5);
        assert_eq!(lr_at(&cfg, 15000), 1.25e-5);
        // Next halving would cross the floor.
        assert_eq!(lr_at(&cfg, 20000), 1e-5);
        assert_eq!(lr_at(&cfg, 1_000_000), 1e-5);
    }

    #[test]
    fn pretraining_halves_the_heldout_loss_and_improves_the_identity() {
        let train: PatchDataset<f64> = PatchDataset::synthetic(10, 1, 20, 12, true, 50).unwrap();
        let held: PatchDataset<f64> = PatchDataset::synthetic(6, 1, 20, 12, false, 51).unwrap();
        let mut d = DenoiserNet::new(1, 1, 4, 1, 30).unwrap();
        let cfg = TrainConfig { steps: 400, ..small_cfg(31) };

        let before = eval_denoiser_ld(&d, &held, 32, cfg.sigma_max, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        let clean = held.sample_batch(8, &mut rng).unwrap();
        let id_before = d.denoise(&clean, 0.0).unwrap().mse(&clean).unwrap();

        pretrain_denoiser_into(&mut d, &train, &cfg).unwrap();

        let after = eval_denoiser_ld(&d, &held, 32, cfg.sigma_max, 99).unwrap();
        assert!(after < 0.5 * before, "held-out loss {before} -> {after}");
        let id_after = d.denoise(&clean, 0.0).unwrap().mse(&clean).unwrap();
        assert!(id_after < id_before, "zero-noise mse {id_before} -> {id_after}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let ds: PatchDataset<f64> = PatchDataset::synthetic(4, 1, 16, 10, false, 60).unwrap();
        let cfg = TrainConfig { steps: 25, ..small_cfg(61) };
        let mut d1 = DenoiserNet::new(1, 1, 4, 1, 62).unwrap();
        let mut d2 = DenoiserNet::new(1, 1, 4, 1, 62).unwrap();
        let l1 = pretrain_denoiser_into(&mut d1, &ds, &cfg).unwrap();
        let l2 = pretrain_denoiser_into(&mut d2, &ds, &cfg).unwrap();
        assert_eq!(l1.rows.last().unwrap().loss, l2.rows.last().unwrap().loss);
        for (a, b) in d1.unet().params().iter().zip(d2.unet().params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(l1.to_csv(), l2.to_csv());
    }

    #[test]
    fn joint_training_descends_and_the_frozen_variant_keeps_d_fixed() {
        let ds: PatchDataset<f64> = PatchDataset::synthetic(8, 1, 20, 12, true, 70).unwrap();
        let (mut d, mut g) = small_nets(71);
        let pre_cfg = TrainConfig { steps: 150, ..small_cfg(72) };
        pretrain_denoiser_into(&mut d, &ds, &pre_cfg).unwrap();

        let cfg = TrainConfig { steps: 250, ..small_cfg(73) };
        let d0 = d.clone();
        let g0 = g.clone();
        let log = joint_train(&mut d, &mut g, &ds, &cfg).unwrap();
        assert_eq!(log.rows.len(), 250);
        let first: f64 = log.rows[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let last: f64 = log.rows[230..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(last < first, "global loss {first} -> {last}");
        let rate = log.delta_rate();
        assert!((0.35..=0.65).contains(&rate), "delta rate {rate}");

        // Frozen variant leaves the denoiser bit-identical.
        let mut df = d0.clone();
        let mut gf = g0.clone();
        let frozen = TrainConfig { freeze_denoiser: true, steps: 60, ..cfg.clone() };
        joint_train(&mut df, &mut gf, &ds, &frozen).unwrap();
        for (a, b) in df.unet().params().iter().zip(d0.unet().params()) {
            assert_eq!(a.data(), b.data());
        }

        // The no-LG-into-D variant runs too.
        let mut dn = d0.clone();
        let mut gn = g0.clone();
        let nolg = TrainConfig { lg_updates_denoiser: false, steps: 60, ..cfg.clone() };
        joint_train(&mut dn, &mut gn, &ds, &nolg).unwrap();

        // Determinism of the full joint loop.
        let mut d2 = d0.clone();
        let mut g2 = g0.clone();
        let cfg2 = TrainConfig { steps: 60, ..cfg };
        let mut d3 = d0.clone();
        let mut g3 = g0.clone();
        let la = joint_train(&mut d2, &mut g2, &ds, &cfg2).unwrap();
        let lb = joint_train(&mut d3, &mut g3, &ds, &cfg2).unwrap();
        assert_eq!(la.to_csv(), lb.to_csv());
        for (a, b) in g2.unet().params().iter().zip(g3.unet().params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn g_gradient_is_independent_of_the_denoising_loss() {
        let (d, g) = small_nets(80);
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let x0: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let sigma = 0.12;
        let z = add_awgn_with(&x0, sigma, &mut rng);

        let g_grads_of = |with_ld: bool| -> Vec<Tensor<f64>> {
            let mut tape = Tape::new();
            let g_leaves = g.unet().insert_leaves(&mut tape);
            let d_leaves = d.unet().insert_leaves(&mut tape);
            let zn = tape.constant(z.clone());
            let x0n = tape.constant(x0.clone());
            let lg =
                loss_lg_traced(&mut tape, &g, &g_leaves, &d, &d_leaves, zn, sigma).unwrap();
            let lgs = tape.scale(lg, 0.004);
            let loss = if with_ld {
                let ld = loss_ld_traced(&mut tape, &d, &d_leaves, zn, x0n, sigma).unwrap();
                tape.add(ld, lgs).unwrap()
            } else {
                lgs
            };
            tape.backward(loss).unwrap();
            collect_grads(&tape, &g_leaves, g.unet().params())
        };
        let with_ld = g_grads_of(true);
        let without = g_grads_of(false);
        for (a, b) in with_ld.iter().zip(&without) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = TrainConfig::desk(0);
        assert!(good.validate().is_ok());
        assert!(TrainConfig { lambda: 0.0, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { alternation: 1.5, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { sigma_max: 0.0, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { lr_half_period: 0, ..good.clone() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..good }.validate().is_err());
    }
}
