/// Adam with a separate step size per coordinate. A zero rate freezes the
/// coordinate.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    rates: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(rates: Vec<f64>, betas: (f64, f64)) -> Self {
        let n = rates.len();
        Self {
            rates,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..x.len() {
            let rate = self.rates[k];
            if rate == 0.0 {
                continue;
            }
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            x[k] -= rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_rate() {
        let mut opt = Adam::new(vec![0.1, 0.0, 0.5], (0.9, 0.999));
        let mut x = [1.0, 1.0, -2.0];
        opt.step(&mut x, &[3.0, 7.0, -0.01]);
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert_eq!(x[1], 1.0);
        assert!((x[2] + 1.5).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(vec![0.05; 2], (0.9, 0.999));
        let mut x = [4.0, -3.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0), 8.0 * (x[1] + 0.5)];
            opt.step(&mut x, &g);
        }
        assert!((x[0] - 1.0).abs() < 1e-2);
        assert!((x[1] + 0.5).abs() < 1e-2);
    }
}
