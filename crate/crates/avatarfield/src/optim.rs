//! Adam optimizer over the flat parameter vector.

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(x) = sum (x - c)^2 converges to c.
        let c = [3.0, -1.5, 0.7];
        let mut x = vec![0.0; 3];
        let mut opt = Adam::new(0.05, 3);
        for _ in 0..2000 {
            let grad: Vec<f64> = x.iter().zip(c.iter()).map(|(xi, ci)| 2.0 * (xi - ci)).collect();
            opt.step(&mut x, &grad);
        }
        for (xi, ci) in x.iter().zip(c.iter()) {
            assert!((xi - ci).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut x = vec![1.0, 2.0];
            let mut opt = Adam::new(5e-4, 2);
            for i in 0..50 {
                let g = vec![(i as f64 * 0.1).sin(), (i as f64 * 0.2).cos()];
                opt.step(&mut x, &g);
            }
            x
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }
}
