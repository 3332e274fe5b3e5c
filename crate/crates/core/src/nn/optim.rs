use super::tensor::{lit, Param, Real};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to `params` from their accumulated gradients. The
    /// parameter list must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(
            self.first.len(),
            params.len(),
            "parameter list changed between steps"
        );
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let c1 = lit::<T>(1.0 - self.beta1.powi(t));
        let c2 = lit::<T>(1.0 - self.beta2.powi(t));
        let lr = lit::<T>(self.lr);
        let eps = lit::<T>(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value[i] = p.value[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Halve-on-regression learning-rate schedule with a floor.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub floor: f64,
    pub previous_dev_loss: Option<f64>,
}

impl LrSchedule {
    pub fn new(initial: f64, floor: f64) -> Self {
        LrSchedule {
            lr: initial,
            floor,
            previous_dev_loss: None,
        }
    }

    /// Records the epoch's dev loss and returns the learning rate for the next epoch.
    pub fn update(&mut self, dev_loss: f64) -> f64 {
        if let Some(prev) = self.previous_dev_loss {
            if dev_loss > prev {
                self.lr = (self.lr / 2.0).max(self.floor);
            }
        }
        self.previous_dev_loss = Some(dev_loss);
        self.lr
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::new(1e-3, 1e-4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Param::<f64>::new(&[3], vec![1.0, -2.0, 0.5]);
        let mut adam = Adam::new(1e-3);
        for _ in 0..5 {
            adam.step(&mut [&mut p]);
        }
        assert_eq!(p.value, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m1 = (1-b1) g, v1 = (1-b2) g^2 -> mhat / sqrt(vhat) = sign(g)
        let mut p = Param::<f64>::new(&[2], vec![0.0, 0.0]);
        p.grad = vec![0.37, -12.0];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p]);
        assert!((p.value[0] + 1e-3).abs() < 1e-9);
        assert!((p.value[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn schedule_trace() {
        let mut s = LrSchedule::default();
        let trace: Vec<f64> = [2.0, 1.9, 1.95].iter().map(|&l| s.update(l)).collect();
        assert_eq!(trace, vec![1e-3, 1e-3, 5e-4]);

        let mut s = LrSchedule::default();
        assert!((0..10)
            .map(|i| s.update(3.0 - 0.1 * f64::from(i)))
            .all(|lr| lr == 1e-3));

        let mut s = LrSchedule::default();
        let last = (0..11).map(|i| s.update(f64::from(i))).last().unwrap();
        assert_eq!(last, 1e-4);
    }
}
