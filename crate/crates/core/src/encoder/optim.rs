use super::network::Network;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    first: Network,
    second: Network,
    steps: i32,
}

impl Adam {
    pub fn new(params: &Network, learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut Network, grad: &Network) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let lr_t =
            self.learning_rate * (1.0 - b2.powi(self.steps)).sqrt() / (1.0 - b1.powi(self.steps));
        let eps = self.epsilon;
        let grads = grad.trainable();
        for (((p, g), m), v) in params
            .trainable_mut()
            .into_iter()
            .zip(grads)
            .zip(self.first.trainable_mut())
            .zip(self.second.trainable_mut())
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr_t * m[k] / (v[k].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn first_step_moves_each_parameter_by_learning_rate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Network::new(2, [3, 3], &mut rng);
        let before = params.clone();
        let mut grad = params.zeros_like();
        grad.lstm1.bias.fill(0.5);
        grad.bn1.gamma.fill(-2.0);
        let mut adam = Adam::new(&params, 0.01);
        adam.step(&mut params, &grad);
        for (a, b) in params.lstm1.bias.iter().zip(&before.lstm1.bias) {
            assert!((b - a - 0.01).abs() < 1e-5);
        }
        for (a, b) in params.bn1.gamma.iter().zip(&before.bn1.gamma) {
            assert!((a - b - 0.01).abs() < 1e-5);
        }
        assert_eq!(params.lstm2, before.lstm2);
    }
}
