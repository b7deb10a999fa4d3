//! First/second-moment adaptive optimizer with bias-corrected estimates,
//! keyed by parameter name, and milestone learning-rate schedules.

use std::collections::BTreeMap;

use vidsgg_core::autodiff::Tensor;
use vidsgg_core::nn::ParamStore;

/// Adaptive-moment optimizer. Moment state is keyed by parameter name, so
/// one instance can drive any store whose names stay stable across steps.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: usize,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update: moving first/second moments of each gradient, divided by
    /// their bias corrections, scale the per-element step. Parameters absent
    /// from `grads` (and non-trainable buffers) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let theta = store.get_mut(name);
            assert_eq!(theta.shape(), g.shape(), "gradient shape mismatch for {name}");
            for ((t, gi), (mi, vi)) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *t -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Base learning rate plus (epoch, rate) milestones: from each milestone
/// epoch onward its rate applies, the latest milestone winning.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule { base, milestones: Vec::new() }
    }

    pub fn with_milestones(base: f64, milestones: Vec<(usize, f64)>) -> Self {
        LrSchedule { base, milestones }
    }

    /// Learning rate in force at a (0-based) epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .max_by_key(|(e, _)| *e)
            .map(|(_, lr)| *lr)
            .unwrap_or(self.base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_matches_reference_trajectory() {
        // Four steps of minimizing (θ − 3)² elementwise from θ = [0, 5] at
        // lr = 0.1, against an independently computed reference sequence.
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::new(vec![1, 2], vec![0.0, 5.0]));
        let mut adam = Adam::new();
        let expected = [
            [0.099999999833, 4.900000000250],
            [0.199897292585, 4.800166486116],
            [0.299618476549, 4.700623392046],
            [0.399086468944, 4.601504895289],
        ];
        for step in &expected {
            let theta = store.get("theta");
            let grad = theta.map(|x| 2.0 * (x - 3.0));
            let grads = BTreeMap::from([("theta".to_string(), grad)]);
            adam.step(&mut store, &grads, 0.1);
            let theta = store.get("theta");
            assert_abs_diff_eq!(theta.data()[0], step[0], epsilon = 1e-9);
            assert_abs_diff_eq!(theta.data()[1], step[1], epsilon = 1e-9);
        }
        assert_eq!(adam.steps(), 4);
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        // Bias correction makes the very first update lr·g/(|g|+ε), i.e. a
        // signed step of (almost exactly) the learning rate.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut adam = Adam::new();
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1e-3))]);
        adam.step(&mut store, &grads, 0.01);
        assert_abs_diff_eq!(store.get("w").item(), 1.0 - 0.01, epsilon = 1e-6);
    }

    #[test]
    fn buffers_and_missing_grads_stay_put() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        store.insert_buffer("prior", Tensor::scalar(7.0));
        let mut adam = Adam::new();
        adam.step(&mut store, &BTreeMap::new(), 0.1);
        assert_eq!(store.get("w").item(), 2.0);
        assert_eq!(store.get("prior").item(), 7.0);
    }

    #[test]
    fn schedule_applies_latest_milestone_at_or_before_the_epoch() {
        let s = LrSchedule::with_milestones(5e-5, vec![(40, 1e-5), (60, 2e-6)]);
        assert_eq!(s.lr_at(0), 5e-5);
        assert_eq!(s.lr_at(39), 5e-5);
        assert_eq!(s.lr_at(40), 1e-5);
        assert_eq!(s.lr_at(59), 1e-5);
        assert_eq!(s.lr_at(60), 2e-6);
        assert_eq!(s.lr_at(999), 2e-6);
        assert_eq!(LrSchedule::constant(1e-4).lr_at(123), 1e-4);
    }

    #[test]
    fn milestone_order_does_not_matter() {
        let a = LrSchedule::with_milestones(1.0, vec![(60, 0.04), (40, 0.2)]);
        let b = LrSchedule::with_milestones(1.0, vec![(40, 0.2), (60, 0.04)]);
        for e in [0, 40, 50, 60, 70] {
            assert_eq!(a.lr_at(e), b.lr_at(e));
        }
    }
}
