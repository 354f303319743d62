//! Adam with bias correction, plus global-norm gradient clipping. Parameters
//! travel as ordered slices (the registry owns naming); moment buffers line up
//! with them index-for-index, which is also the layout checkpoints persist.

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<S> {
    cfg: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &[Tensor<S>]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Adam { cfg, m, v, step: 0 }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update over all parameters. A `None` gradient (parameter untouched
    /// by this loss) still advances its moment decay, keeping two runs that
    /// differ only in *which* step a branch was inactive bit-comparable.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Option<&Tensor<S>>]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "adam: gradient count mismatch");
        self.step += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let corr1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let corr2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let one = S::one();

        for (i, p) in params.iter_mut().enumerate() {
            let zero_grad;
            let grad = match grads[i] {
                Some(gt) => {
                    assert_eq!(gt.len(), p.len(), "adam: gradient {i} shape mismatch");
                    gt.as_slice()
                }
                None => {
                    zero_grad = vec![S::zero(); p.len()];
                    &zero_grad[..]
                }
            };
            let ms = self.m[i].as_mut_slice();
            let vs = self.v[i].as_mut_slice();
            let ps = p.as_mut_slice();
            for j in 0..ps.len() {
                let gj = grad[j];
                ms[j] = b1 * ms[j] + (one - b1) * gj;
                vs[j] = b2 * vs[j] + (one - b2) * gj * gj;
                let mhat = ms[j] / corr1;
                let vhat = vs[j] / corr2;
                ps[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    // Checkpoint plumbing.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    pub fn restore(cfg: AdamConfig, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>, step: u64) -> Self {
        assert_eq!(m.len(), v.len(), "adam restore: moment count mismatch");
        Adam { cfg, m, v, step }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Tensor<S>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for gt in grads.iter().flatten() {
        for &v in gt.iter() {
            let x = v.into_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::from_f64(max_norm / norm);
        for gt in grads.iter_mut().flatten() {
            for v in gt.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One hand-computed Adam step: g=1 everywhere on the first update gives
    /// Δ = −lr·g/(|g|+eps) ≈ −lr regardless of magnitude after bias correction.
    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut params = vec![Tensor::from_vec(1, 2, vec![1.0f64, -3.0])];
        let grad = Tensor::from_vec(1, 2, vec![4.0f64, -0.5]);
        let mut opt = Adam::new(cfg, &params);
        opt.step(&mut params, &[Some(&grad)]);
        // mhat = g, vhat = g² exactly on step 1 → update = lr·sign(g) (up to eps).
        assert!((params[0].at(0, 0) - (1.0 - 0.1)).abs() < 1e-6);
        assert!((params[0].at(0, 1) - (-3.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut params = vec![Tensor::from_vec(1, 2, vec![1.0f64, 2.0])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        opt.step(&mut params, &[None]);
        assert_eq!(params[0].as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![Some(Tensor::from_vec(1, 2, vec![3.0f64, 4.0]))];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let g = grads[0].as_ref().unwrap();
        let post = (g.at(0, 0).powi(2) + g.at(0, 1).powi(2)).sqrt();
        assert!((post - 1.0).abs() < 1e-12);
        // Under the cap: untouched.
        let mut small = vec![Some(Tensor::from_vec(1, 1, vec![0.5f64]))];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].as_ref().unwrap().scalar(), 0.5);
    }
}
