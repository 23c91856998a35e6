//! RMSProp (non-centered, non-momentum form) plus finite-difference
//! gradient checking. The optimizer's per-coordinate step magnitude is
//! bounded by the learning rate once the accumulator tracks the gradient
//! scale, which also means it cannot settle closer to an optimum than an
//! lr-scale oscillation floor; tests assert the recurrence's actual
//! behavior, measured by running the recurrence itself as the oracle.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RmspropConfig {
    pub learning_rate: f64,
    /// Accumulator decay rho in (0,1).
    pub decay: f64,
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        RmspropConfig {
            learning_rate: 0.01,
            decay: 0.9,
            epsilon: 1e-8,
            steps: 100,
        }
    }
}

impl RmspropConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.decay > 0.0
            && self.decay < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                detail: format!(
                    "rmsprop needs lr > 0, decay in (0,1), epsilon > 0; got {} / {} / {}",
                    self.learning_rate, self.decay, self.epsilon
                ),
            })
        }
    }
}

/// Loss before each step plus the final loss (length steps + 1).
#[derive(Debug, Clone)]
pub struct GradOptTrace {
    pub losses: Vec<f64>,
    pub final_params: Vec<f64>,
}

/// One RMSProp update:
/// acc' = rho acc + (1 - rho) g^2, p' = p - lr g / (sqrt(acc') + eps).
pub fn rmsprop_step(
    params: &[f64],
    grads: &[f64],
    accumulator: &[f64],
    config: &RmspropConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    if params.len() != grads.len() || params.len() != accumulator.len() {
        return Err(Error::LengthMismatch {
            context: format!(
                "params {} / grads {} / accumulator {}",
                params.len(),
                grads.len(),
                accumulator.len()
            ),
        });
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            context: format!("gradient value {g}"),
        });
    }
    let mut new_acc = Vec::with_capacity(params.len());
    let mut new_params = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let a = config.decay * accumulator[i] + (1.0 - config.decay) * grads[i] * grads[i];
        new_acc.push(a);
        new_params.push(params[i] - config.learning_rate * grads[i] / (a.sqrt() + config.epsilon));
    }
    Ok((new_params, new_acc))
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config {
            detail: format!("finite difference step must be positive, got {h}"),
        });
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        let g = (fp - fm) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite difference at coordinate {i}: f+ {fp}, f- {fm}"),
            });
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Run exactly `config.steps` RMSProp iterations, recording the loss before
/// each step and once more at the end.
pub fn minimize_grad<F>(loss_and_grad: F, x0: &[f64], config: &RmspropConfig) -> Result<GradOptTrace>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let mut params = x0.to_vec();
    let mut acc = vec![0.0; x0.len()];
    let mut losses = Vec::with_capacity(config.steps + 1);
    for _ in 0..config.steps {
        let (loss, grad) = loss_and_grad(&params)?;
        losses.push(loss);
        let (p, a) = rmsprop_step(&params, &grad, &acc, config)?;
        params = p;
        acc = a;
    }
    let (final_loss, _) = loss_and_grad(&params)?;
    losses.push(final_loss);
    Ok(GradOptTrace {
        losses,
        final_params: params,
    })
}
