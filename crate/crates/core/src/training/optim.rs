use crate::backbone::AdapterSet;

/// Adam with bias correction over every tensor of an [`AdapterSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: AdapterSet,
    second: AdapterSet,
    steps: i32,
}

impl Adam {
    pub fn new(params: &AdapterSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut AdapterSet, grads: &AdapterSet) {
        self.steps += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let grads: Vec<_> = grads.tensors().into_iter().map(|(_, g)| g).collect();
        let p = params.tensors_mut();
        let m = self.first.tensors_mut();
        let v = self.second.tensors_mut();
        for (((p, m), v), g) in p.into_iter().zip(m).zip(v).zip(grads) {
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}
