use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moment estimates, one moment buffer per
/// parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    beta1: F,
    beta2: F,
    epsilon: F,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: F::of(BETA1),
            beta2: F::of(BETA2),
            epsilon: F::of(EPSILON),
            t: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every tensor. `groups[i]` pairs tensor `i` with its gradient.
    pub fn step<'p, I>(&mut self, step_size: F, groups: I)
    where
        I: IntoIterator<Item = (&'p mut [F], &'p [F])>,
    {
        self.t += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for (i, (params, grads)) in groups.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(params.len(), m.len(), "tensor {i} changed size");
            for (((p, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (one - self.beta1) * g;
                *vi = self.beta2 * *vi + (one - self.beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= step_size * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
