use super::Array;

/// Adam optimizer state: one pair of moment arrays per parameter tensor,
/// plus a shared step counter. Applies the standard bias-corrected update.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[&Array], lr: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| Array::zeros(p.dims())).collect(),
            v: params.iter().map(|p| Array::zeros(p.dims())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step: `params[i] -= lr * m_hat / (sqrt(v_hat) + eps)`.
    /// Gradients are of the quantity being minimized.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.dims(), g.dims(), "shape error: param vs grad dims");
            let pv = p.values_mut();
            let gv = g.values();
            let mv = m.values_mut();
            let vv = v.values_mut();
            for i in 0..pv.len() {
                mv[i] = self.beta1 * mv[i] + (1.0 - self.beta1) * gv[i];
                vv[i] = self.beta2 * vv[i] + (1.0 - self.beta2) * gv[i] * gv[i];
                let m_hat = mv[i] / bc1;
                let v_hat = vv[i] / bc2;
                pv[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_param_by_about_lr() {
        let mut p = Array::full(&[3], 10.0);
        let g = Array::full(&[3], 1.0);
        let mut adam = AdamState::new(&[&p], 0.001);
        adam.step(&mut [&mut p], &[g]);
        for &x in p.values() {
            assert!((x - (10.0 - 0.001)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params_unchanged() {
        let mut p = Array::from_vec(vec![1.0, -2.0], &[2]);
        let g = Array::zeros(&[2]);
        let mut adam = AdamState::new(&[&p], 0.01);
        adam.step(&mut [&mut p], &[g]);
        assert_eq!(p.values(), &[1.0, -2.0]);
    }

    #[test]
    fn identical_calls_from_identical_state_are_identical() {
        let run = || {
            let mut p = Array::from_vec(vec![0.5, 1.5, -0.5], &[3]);
            let mut adam = AdamState::new(&[&p], 0.002);
            for k in 0..5 {
                let g = Array::from_vec(vec![0.1 * k as f64, -0.2, 0.3], &[3]);
                adam.step(&mut [&mut p], &[g]);
            }
            p.values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    #[should_panic(expected = "shape error")]
    fn shape_mismatch_panics() {
        let mut p = Array::zeros(&[2]);
        let g = Array::zeros(&[3]);
        let mut adam = AdamState::new(&[&p], 0.001);
        adam.step(&mut [&mut p], &[g]);
    }
}
