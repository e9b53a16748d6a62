use gradcore::{Real, Tensor};

/// Adam with bias correction. A step whose gradients contain a non-finite
/// value is skipped entirely and counted.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    steps: u64,
    skipped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl<F: Real> AdamState<F> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor<F>> = shapes
            .into_iter()
            .map(|s| Tensor::zeros(s.to_vec()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            second: first.clone(),
            first,
            steps: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<F> {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<F> {
        &self.second[i]
    }

    /// Update `params[i]` with `grads[i]`. Panics if the counts or shapes
    /// differ from those the state was created with.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[&Tensor<F>],
        lr: f64,
    ) -> StepOutcome {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(
            grads.len(),
            self.first.len(),
            "gradient count differs from parameter count"
        );
        if grads.iter().any(|g| !g.all_finite()) {
            self.skipped += 1;
            log::warn!(
                "adam: skipping step {} with non-finite gradients",
                self.steps + 1
            );
            return StepOutcome::SkippedNonFinite;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let f = F::from_f64_lossy;
        let (b1f, b2f) = (f(b1), f(b2));
        let (one_b1, one_b2) = (f(1.0 - b1), f(1.0 - b2));
        let step_size = f(lr / c1);
        let inv_c2 = f(1.0 / c2);
        let eps = f(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(
                p.shape(),
                g.shape(),
                "gradient shape differs from parameter {i}"
            );
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1f * *m + one_b1 * g;
                *v = b2f * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}
