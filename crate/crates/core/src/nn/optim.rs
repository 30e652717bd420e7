use num_traits::Float;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<T>,
}

impl<T: Float> Sgd<T> {
    pub fn new(len: usize, momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![T::zero(); len],
        }
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    /// Restores saved momentum buffers.
    pub fn set_velocity(&mut self, velocity: Vec<T>) {
        assert_eq!(velocity.len(), self.velocity.len(), "optimizer size");
        self.velocity = velocity;
    }

    pub fn step(&mut self, lr: T, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.velocity.len(), "optimizer size");
        assert_eq!(grads.len(), self.velocity.len(), "gradient size");
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p = *p - lr * *v;
        }
    }
}
