use super::{AutodiffError, Gradients, ParamId, ParamStore};

/// Adam with bias correction and coupled L2 weight decay (the decay term is
/// added to the gradient before the moment updates).
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.second[id.index()]
    }

    /// Applies one update from per-parameter gradients (missing entries are
    /// treated as zero). Non-finite gradients abort the step before any
    /// parameter is touched.
    pub fn step_with<'g>(
        &mut self,
        params: &mut ParamStore,
        grad_of: impl Fn(ParamId) -> Option<&'g [f64]>,
    ) -> Result<(), AutodiffError> {
        for id in params.ids() {
            if let Some(g) = grad_of(id) {
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(AutodiffError::NonFinite(format!(
                        "gradient of {} at index {pos}",
                        params.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let grad = grad_of(id);
            let theta = params.get_mut(id).data_mut();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for i in 0..theta.len() {
                let g = grad.map_or(0.0, |g| g[i]) + self.weight_decay * theta[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), AutodiffError> {
        self.step_with(params, |id| grads.param(id))
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has gone
/// `patience` consecutive epochs without a relative improvement larger than
/// `threshold` over the best value seen so far.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Result<Self, AutodiffError> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(AutodiffError::InvalidArgument(format!(
                "plateau factor {factor} outside (0, 1)"
            )));
        }
        Ok(PlateauScheduler {
            factor,
            patience,
            threshold: 1e-4,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// True when `loss` beats the current best by more than the relative
    /// threshold.
    pub fn is_improvement(&self, loss: f64) -> bool {
        match self.best {
            None => true,
            Some(best) => loss < best * (1.0 - self.threshold),
        }
    }

    /// Records one epoch's loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if self.is_improvement(loss) {
            self.best = Some(loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::vector(vec![value]));
        (store, id)
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let (mut store, id) = single(0.5);
        let mut adam = Adam::new(&store, 0.1, 0.0);
        let g = [1.0];
        adam.step_with(&mut store, |_| Some(&g[..])).unwrap();
        // m_hat = 1, v_hat = 1
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert_eq!(store.get(id).data()[0], expected);
        assert!((adam.first_moment(id)[0] - 0.1).abs() < 1e-15);
        assert!((adam.second_moment(id)[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_moves_only_through_weight_decay() {
        let (mut store, id) = single(2.0);
        let mut adam = Adam::new(&store, 0.01, 0.0);
        adam.step_with(&mut store, |_| None).unwrap();
        assert_eq!(store.get(id).data()[0], 2.0);

        let (mut store, id) = single(2.0);
        let mut adam = Adam::new(&store, 0.01, 0.5);
        adam.step_with(&mut store, |_| None).unwrap();
        // g = 0.5 * 2 = 1 -> same bias-corrected step as a unit gradient
        let expected = 2.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let (mut store, id) = single(1.0);
        let mut adam = Adam::new(&store, 0.1, 0.0);
        let g = [f64::NAN];
        assert!(adam.step_with(&mut store, |_| Some(&g[..])).is_err());
        assert_eq!(store.get(id).data()[0], 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn decreasing_losses_keep_lr() {
        let mut s = PlateauScheduler::new(1.0, 0.1, 3).unwrap();
        for i in 0..20 {
            assert_eq!(s.observe(10.0 - i as f64 * 0.1), 1.0);
        }
    }

    #[test]
    fn flat_run_of_patience_plus_one_reduces_once() {
        let patience = 4;
        let mut s = PlateauScheduler::new(1.0, 0.1, patience).unwrap();
        let lrs: Vec<f64> = (0..=patience).map(|_| s.observe(1.0)).collect();
        assert_eq!(lrs[..patience], vec![1.0; patience][..]);
        assert!((lrs[patience] - 0.1).abs() < 1e-15);
    }

    /// Replays the rule by hand on a trace with two plateaus.
    #[test]
    fn two_plateaus_two_reductions() {
        let trace = [5.0, 4.0, 3.0, 3.0, 3.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.5];
        let mut s = PlateauScheduler::new(1.0, 0.1, 3).unwrap();
        let lrs: Vec<f64> = trace.iter().map(|&l| s.observe(l)).collect();
        // best=3 at idx 2; bad at 3,4,5 -> reduce at 5. best=1 at idx 7; bad 8,9,10 -> reduce at 10.
        let mut expected = vec![1.0; 5];
        expected.extend([0.1; 5]);
        expected.extend([0.01; 2]);
        for (a, b) in lrs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{lrs:?}");
        }
    }

    #[test]
    fn factor_must_lie_in_unit_interval() {
        assert!(PlateauScheduler::new(1.0, 1.0, 3).is_err());
        assert!(PlateauScheduler::new(1.0, 0.0, 3).is_err());
    }
}
