//! Plain ReLU MLP over a flat parameter buffer, with manual backprop.
//! Per layer the buffer holds weights `[out, in]` row-major, then biases.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// [input, hidden..., output] widths.
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations retained by `forward_cached` for backprop.
pub struct MlpCache {
    /// Layer inputs: input vector, then each post-activation.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pub pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for l in 0..layer {
            off += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        let inp = self.dims[layer];
        let out = self.dims[layer + 1];
        (off, off + inp * out, inp, out)
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// He-scaled normal init for every layer.
    pub fn init_random<R: Rng>(dims: Vec<usize>, rng: &mut R) -> Self {
        let mut mlp = Self {
            params: vec![0.0; Self::param_count(&dims)],
            dims,
        };
        for l in 0..mlp.n_layers() {
            let (w_off, b_off, inp, out) = mlp.offsets(l);
            let std = (2.0 / inp as f64).sqrt();
            for i in w_off..w_off + inp * out {
                let n: f64 = rng.sample(StandardNormal);
                mlp.params[i] = std * n;
            }
            for i in b_off..b_off + out {
                mlp.params[i] = 0.0;
            }
        }
        mlp
    }

    /// Random hidden layers, zero output layer: the net's contribution to
    /// any forward pass is exactly zero at initialization.
    pub fn init_zero_output<R: Rng>(dims: Vec<usize>, rng: &mut R) -> Self {
        let mut mlp = Self::init_random(dims, rng);
        let last = mlp.n_layers() - 1;
        let (w_off, b_off, inp, out) = mlp.offsets(last);
        mlp.params[w_off..w_off + inp * out].fill(0.0);
        mlp.params[b_off..b_off + out].fill(0.0);
        mlp
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.run(x, None)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.n_layers()),
            pre: Vec::with_capacity(self.n_layers()),
        };
        let out = self.run(x, Some(&mut cache))?;
        Ok((out, cache))
    }

    fn run(&self, x: &[f64], mut cache: Option<&mut MlpCache>) -> Result<Vec<f64>> {
        if x.len() != self.dims[0] {
            return Err(Error::Shape(format!(
                "mlp input width {} != {}",
                x.len(),
                self.dims[0]
            )));
        }
        let n_layers = self.n_layers();
        let mut act = x.to_vec();
        for l in 0..n_layers {
            let (w_off, b_off, inp, out) = self.offsets(l);
            let mut z = vec![0.0; out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &self.params[w_off + o * inp..w_off + (o + 1) * inp];
                *zo = self.params[b_off + o]
                    + row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in mlp layer {l}")));
            }
            let next = if l + 1 == n_layers {
                z.clone()
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(act);
                c.pre.push(z);
            }
            act = next;
        }
        Ok(act)
    }

    /// Backprop `dout` through the cached forward pass, accumulating
    /// parameter gradients into `grads` (same layout as `params`).
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let n_layers = self.n_layers();
        let mut dz = dout.to_vec();
        for l in (0..n_layers).rev() {
            let (w_off, b_off, inp, _out) = self.offsets(l);
            let input = &cache.inputs[l];
            for (o, &g) in dz.iter().enumerate() {
                grads[b_off + o] += g;
                let row = &mut grads[w_off + o * inp..w_off + (o + 1) * inp];
                for (r, xi) in row.iter_mut().zip(input) {
                    *r += g * xi;
                }
            }
            if l == 0 {
                break;
            }
            let mut dx = vec![0.0; inp];
            for (o, &g) in dz.iter().enumerate() {
                let row = &self.params[w_off + o * inp..w_off + (o + 1) * inp];
                for (d, wi) in dx.iter_mut().zip(row) {
                    *d += g * wi;
                }
            }
            // through the previous layer's ReLU
            dz = dx
                .iter()
                .zip(&cache.pre[l - 1])
                .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
                .collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_enumerates_shapes() {
        // (35*32+32)+(32*32+32)+(32*48+48) = 3792
        assert_eq!(Mlp::param_count(&[35, 32, 32, 48]), 3792);
    }

    #[test]
    fn zero_output_init_maps_everything_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init_zero_output(vec![5, 8, 4], &mut rng);
        let out = mlp.forward(&[0.3, -1.0, 0.5, 2.0, -0.2]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::init_random(vec![4, 6, 3], &mut rng);
        let x = [0.2, -0.7, 1.1, 0.4];
        let dout = [0.5, -1.0, 0.25];
        let (_, cache) = mlp.forward_cached(&x).unwrap();
        let mut grads = vec![0.0; mlp.params.len()];
        mlp.backward(&cache, &dout, &mut grads);

        let h = 1e-6;
        let f = |m: &Mlp| -> f64 {
            m.forward(&x)
                .unwrap()
                .iter()
                .zip(&dout)
                .map(|(a, d)| a * d)
                .sum()
        };
        for i in 0..mlp.params.len() {
            let mut mp = mlp.clone();
            mp.params[i] += h;
            let mut mm = mlp.clone();
            mm.params[i] -= h;
            let fd = (f(&mp) - f(&mm)) / (2.0 * h);
            assert!(
                (grads[i] - fd).abs() < 1e-5,
                "param {i}: {} vs {}",
                grads[i],
                fd
            );
        }
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init_random(vec![2, 3, 2], &mut rng);
        let err = mlp.forward(&[f64::INFINITY, 0.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }
}
