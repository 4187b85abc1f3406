//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Applies one update to every parameter with a gradient.
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor<f32>>, grads: &BTreeMap<String, Tensor<f32>>, lr: f32) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f32) -> f32 {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap())]);
        let g = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![0.5f32, -3.0]).unwrap())]);
        let mut opt = Adam::default();
        opt.update(&mut p, &g, 0.1);
        let d = p["w"].data();
        assert!((d[0] - 0.9).abs() < 1e-5);
        assert!((d[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap())]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let d = g["a"].data();
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
    }
}
