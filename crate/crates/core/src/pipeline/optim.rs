use super::config::Optimizer;

/// First-order optimizer state with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub(crate) struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, weight_decay: f64, n: usize) -> Self {
        let moments = if kind == Optimizer::Adam { n } else { 0 };
        Self {
            kind,
            lr,
            weight_decay,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    /// Updates `params` in place from the loss gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * (g + self.weight_decay * *p);
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    let g = g + self.weight_decay * *p;
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_optimizers_descend_a_quadratic() {
        for kind in [Optimizer::Sgd, Optimizer::Adam] {
            let mut opt = OptimizerState::new(kind, 0.05, 0.0, 2);
            let mut x = vec![1.0, -2.0];
            for _ in 0..500 {
                let g = vec![2.0 * x[0], 8.0 * x[1]];
                opt.step(&mut x, &g);
            }
            assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{kind}: {x:?}");
        }
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut opt = OptimizerState::new(Optimizer::Sgd, 0.1, 0.5, 1);
        let mut x = vec![2.0];
        opt.step(&mut x, &[1.0]);
        // 2 - 0.1 (1 + 0.5 * 2)
        assert!((x[0] - 1.8).abs() < 1e-15);
    }
}
