//! Adam with sparse (lazy) moment updates.
//!
//! A coordinate whose accumulated gradient is exactly zero is skipped
//! entirely: its moments do not decay and its value does not move. This
//! keeps untouched embedding rows bit-identical across steps, which the
//! component-masked replay updates rely on. The bias-correction step
//! counter is global, shared by all coordinates.

use crate::num::Real;
use crate::tape::ParamStore;

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    /// Moment buffers are allocated to match `store`; defaults are
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        let moments = store
            .ids()
            .map(|id| {
                let n = store.values(id).len();
                Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] }
            })
            .collect();
        Adam {
            lr,
            beta1: T::from_f64_c(0.9),
            beta2: T::from_f64_c(0.999),
            eps: T::from_f64_c(1e-8),
            step: 0,
            moments,
        }
    }

    /// Applies one update from the gradients accumulated in `store`,
    /// then clears them. Zero-gradient coordinates are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step as i32);
        let bc2 = one - self.beta2.powi(self.step as i32);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let mom = &mut self.moments[idx];
            // split borrow: values and grad live in the same store
            let n = store.values(id).len();
            for i in 0..n {
                let g = store.grad(id)[i];
                if g == T::zero() {
                    continue;
                }
                mom.m[i] = self.beta1 * mom.m[i] + (one - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (one - self.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                store.values_mut(id)[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            store.grad_mut(id).fill(T::zero());
        }
    }

    /// Clears moments and the step counter (fresh-optimizer semantics).
    pub fn reset(&mut self) {
        self.step = 0;
        for mom in &mut self.moments {
            mom.m.fill(T::zero());
            mom.v.fill(T::zero());
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore<f64>, crate::tape::ParamId) {
        let mut store = ParamStore::new();
        let n = values.len();
        let id = store.add("w", values, 1, n);
        (store, id)
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let (mut store, id) = store_with(vec![1.0]);
        let mut opt = Adam::new(&store, 0.001);
        store.grad_mut(id)[0] = 1.0;
        opt.step(&mut store);
        // bias-corrected first step is lr * g / (|g| + eps)
        let expect = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8));
        assert!((store.values(id)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // oracle computed from the published recurrence with g = 0.5 twice
        let g: f64 = 0.5;
        let lr = 0.01;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x: f64 = 2.0;
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }

        let (mut store, id) = store_with(vec![2.0]);
        let mut opt = Adam::new(&store, lr);
        for _ in 0..2 {
            store.grad_mut(id)[0] = g;
            opt.step(&mut store);
        }
        assert_eq!(store.values(id)[0].to_bits(), x.to_bits());
    }

    #[test]
    fn zero_gradient_leaves_value_and_moments_untouched() {
        let (mut store, id) = store_with(vec![1.0, -3.0]);
        let mut opt = Adam::new(&store, 0.1);
        // warm up coordinate 0 so it has live moments
        store.grad_mut(id)[0] = 1.0;
        opt.step(&mut store);
        let frozen = store.values(id)[1];
        let m_before = opt.moments[0].m[1];
        // several steps that only touch coordinate 0
        for _ in 0..5 {
            store.grad_mut(id)[0] = -0.5;
            opt.step(&mut store);
        }
        assert_eq!(store.values(id)[1].to_bits(), frozen.to_bits());
        assert_eq!(opt.moments[0].m[1], m_before);
    }

    #[test]
    fn skipped_steps_still_advance_bias_correction() {
        // coordinate 1 first sees a gradient at t=3; its m/v start fresh
        // but the bias correction uses the global step
        let (mut store, id) = store_with(vec![0.0, 0.0]);
        let mut opt = Adam::new(&store, 0.01);
        for _ in 0..2 {
            store.grad_mut(id)[0] = 1.0;
            opt.step(&mut store);
        }
        store.grad_mut(id)[1] = 1.0;
        opt.step(&mut store);
        let t = 3;
        let mh = (1.0 - 0.9) * 1.0 / (1.0 - 0.9f64.powi(t));
        let vh = (1.0 - 0.999) * 1.0 / (1.0 - 0.999f64.powi(t));
        let expect = -0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((store.values(id)[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn reset_restores_fresh_dynamics() {
        let (mut store, id) = store_with(vec![1.0]);
        let mut opt = Adam::new(&store, 0.001);
        store.grad_mut(id)[0] = 7.0;
        opt.step(&mut store);
        opt.reset();
        store.values_mut(id)[0] = 1.0;
        store.grad_mut(id)[0] = 7.0;
        opt.step(&mut store);
        // same as a genuinely fresh optimizer's first step
        let expect = 1.0 - 0.001 * (7.0 / (7.0 + 1e-8));
        assert!((store.values(id)[0] - expect).abs() < 1e-12);
    }
}
