use crate::models::Module;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter of `module`; `grads` follow the
    /// module's visiting order. Missing gradients count as zero.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &[Option<Tensor>]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let eps = self.eps;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            if ms.len() <= i {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            if let Some(g) = grads.get(i).and_then(|g| g.as_ref()) {
                let (m, v) = (&mut ms[i], &mut vs[i]);
                for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
            i += 1;
        });
    }
}
