//! Adam with decoupled weight decay over the operator's tensor set.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::spectral::SnoParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second-moment accumulators, shaped like the parameters.
pub struct AdamState<T> {
    m: SnoParams<T>,
    v: SnoParams<T>,
    t: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &SnoParams<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One update step: `theta -= lr * mhat / (sqrt(vhat) + eps) + lr * wd * theta`.
    pub fn step(&mut self, params: &mut SnoParams<T>, grads: &SnoParams<T>, lr: T, weight_decay: T) {
        self.t += 1;
        let b1 = T::lit(BETA1);
        let b2 = T::lit(BETA2);
        let eps = T::lit(EPS);
        let one = T::one();
        let bc1 = one / (one - b1.powi(self.t as i32));
        let bc2 = one / (one - b2.powi(self.t as i32));

        let mut p_t = params.tensors_mut();
        let g_t = grads.tensors();
        let mut m_t = self.m.tensors_mut();
        let mut v_t = self.v.tensors_mut();
        for i in 0..p_t.len() {
            let g = g_t[i].1;
            let (p, m, v) = (&mut *p_t[i], &mut *m_t[i], &mut *v_t[i]);
            p.par_chunks_mut(8192)
                .zip(m.par_chunks_mut(8192))
                .zip(v.par_chunks_mut(8192))
                .zip(g.par_chunks(8192))
                .for_each(|(((pc, mc), vc), gc)| {
                    for k in 0..pc.len() {
                        let gk = gc[k];
                        mc[k] = b1 * mc[k] + (one - b1) * gk;
                        vc[k] = b2 * vc[k] + (one - b2) * gk * gk;
                        let mhat = mc[k] * bc1;
                        let vhat = vc[k] * bc2;
                        pc[k] = pc[k] - lr * (mhat / (vhat.sqrt() + eps) + weight_decay * pc[k]);
                    }
                });
        }
    }
}
