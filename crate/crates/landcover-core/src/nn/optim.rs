//! Adaptive-moment gradient descent with bias correction.

use ndarray::ArrayD;

use super::graph::Graph;

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter with an accumulated
    /// gradient, then clears all gradients.
    pub fn step(&mut self, graph: &mut Graph) {
        if self.m.len() != graph.params.len() {
            self.m = vec![None; graph.params.len()];
            self.v = vec![None; graph.params.len()];
        }
        self.step += 1;
        let (beta1, beta2) = (self.beta1, self.beta2);
        let (lr, eps) = (self.lr, self.eps);
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, param) in graph.params.iter_mut().enumerate() {
            let Some(grad) = param.grad.take() else { continue };
            if !param.trainable {
                continue;
            }
            let m = self
                .m[i]
                .get_or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
            let v = self
                .v[i]
                .get_or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
            azip(m, &grad, |m, g| *m = beta1 * *m + (1.0 - beta1) * g);
            azip(v, &grad, |v, g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let value = param.value.as_slice_mut().expect("contiguous param");
            let m_s = m.as_slice().expect("contiguous m");
            let v_s = v.as_slice().expect("contiguous v");
            for ((w, &m_i), &v_i) in value.iter_mut().zip(m_s).zip(v_s) {
                let m_hat = m_i / bc1;
                let v_hat = v_i / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn azip(dst: &mut ArrayD<f32>, src: &ArrayD<f32>, f: impl Fn(&mut f32, f32)) {
    let dst_s = dst.as_slice_mut().expect("contiguous");
    let src_s = src.as_slice().expect("contiguous");
    for (d, &s) in dst_s.iter_mut().zip(src_s) {
        f(d, s);
    }
}
