//! Unrolled gradient descent: a fixed number of solver steps recorded on the
//! tape, trained end to end so the regularizer gradient network minimizes the
//! reconstruction error of the final iterate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::{add_awgn_with, initial_estimate, LinearOperator};
use crate::error::{Error, Result};
use crate::priors::net::RegGradNet;
use crate::tensor::adam::{AdamParams, AdamState};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Unrolled training configuration.
#[derive(Debug, Clone)]
pub struct UnrolledConfig {
    /// Number of solver steps on the tape.
    pub steps: usize,
    /// Step size inside the unrolled chain.
    pub mu: f64,
    /// Regularization weight inside the unrolled chain.
    pub sigma: f64,
    /// Noise added to the synthesized observations.
    pub noise_sigma: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Adam learning rate for the network parameters.
    pub lr: f64,
    pub seed: u64,
}

impl UnrolledConfig {
    fn validate(&self) -> Result<()> {
        if self.mu <= 0.0 {
            return Err(Error::arg(format!("step size must be positive, got {}", self.mu)));
        }
        if self.sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::arg("noise levels must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::arg(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Training log: one reconstruction loss per training step.
#[derive(Debug, Clone, Default)]
pub struct UnrolledLog {
    pub losses: Vec<f64>,
}

/// Record `steps` plain gradient-descent iterations on the tape, starting at
/// `x_init`, and return the mean squared error of the final iterate against
/// `x_gt`. With zero steps the loss is just the initialization error and no
/// gradient reaches the network.
pub fn unrolled_loss_traced<T: Scalar>(
    tape: &mut Tape<T>,
    a: &LinearOperator<T>,
    g: &RegGradNet<T>,
    g_params: &[NodeId],
    y: NodeId,
    x_init: NodeId,
    x_gt: NodeId,
    steps: usize,
    mu: f64,
    sigma: f64,
) -> Result<NodeId> {
    if mu <= 0.0 {
        return Err(Error::arg(format!("step size must be positive, got {mu}")));
    }
    let s2 = sigma * sigma;
    let mut x = x_init;
    for _ in 0..steps {
        let ax = a.apply_traced(tape, x)?;
        let r = tape.sub(ax, y)?;
        let mut dir = a.adjoint_traced(tape, r)?;
        if s2 > 0.0 {
            let gx = g.grad_traced(tape, g_params, x)?;
            let gx = tape.scale(gx, s2);
            dir = tape.add(dir, gx)?;
        }
        let step = tape.scale(dir, mu);
        x = tape.sub(x, step)?;
    }
    tape.mean_sq_diff(x, x_gt)
}

fn stack_batch<T: Scalar>(patches: &[Tensor<T>], picks: &[usize]) -> Result<Tensor<T>> {
    let (_, c, h, w) = patches[picks[0]].dims4()?;
    let plane = c * h * w;
    let mut out = Tensor::<T>::zeros(&[picks.len(), c, h, w]);
    for (b, &i) in picks.iter().enumerate() {
        let p = &patches[i];
        if p.dims4()? != (1, c, h, w) {
            return Err(Error::dim("all patches must share one [1,c,h,w] shape"));
        }
        out.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(p.data());
    }
    Ok(out)
}

/// Train the regularizer gradient network through the unrolled chain. Each
/// step samples a patch batch, synthesizes observations through the operator
/// plus noise, builds the initialization by the task rule, unrolls the solver
/// and takes an Adam step on the network parameters. A non-finite loss aborts
/// before the parameters are touched.
pub fn unrolled_gd_train<T: Scalar>(
    patches: &[Tensor<T>],
    a: &LinearOperator<T>,
    g: &mut RegGradNet<T>,
    cfg: &UnrolledConfig,
) -> Result<UnrolledLog> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::arg("need at least one training patch"));
    }
    let (_, c, h, w) = patches[0].dims4()?;
    if (c, h, w) != a.in_chw() {
        return Err(Error::dim(format!(
            "patch shape {:?} does not match operator input {:?}",
            patches[0].shape(),
            a.in_chw()
        )));
    }
    if c != g.image_channels() {
        return Err(Error::dim(format!(
            "network expects {} channels, patches have {c}",
            g.image_channels()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(g.unet().params(), AdamParams::default());
    let mut log = UnrolledLog::default();

    for step in 0..cfg.train_steps {
        let picks: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..patches.len())).collect();
        let x_gt = stack_batch(patches, &picks)?;
        let y = add_awgn_with(&a.apply(&x_gt)?, cfg.noise_sigma, &mut rng);
        let x0 = initial_estimate(a, &y)?;

        let mut tape = Tape::new();
        let params = g.unet().insert_leaves(&mut tape);
        let y_node = tape.constant(y);
        let x0_node = tape.constant(x0);
        let gt_node = tape.constant(x_gt);
        let loss = unrolled_loss_traced(
            &mut tape, a, g, &params, y_node, x0_node, gt_node, cfg.steps, cfg.mu, cfg.sigma,
        )?;
        let loss_val = tape.value(loss).data()[0].to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "unrolled training loss became non-finite at step {step}"
            )));
        }
        // The network only enters the graph with at least one step and a
        // positive weight; otherwise the gradient is identically zero.
        if cfg.steps > 0 && cfg.sigma > 0.0 {
            tape.backward(loss)?;
        }
        let grads: Vec<Tensor<T>> = params
            .iter()
            .zip(g.unet().params())
            .map(|(&p, t)| tape.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        adam.step(g.unet_mut().params_mut(), &grads, cfg.lr)?;
        log.losses.push(loss_val);
    }
    Ok(log)
}
