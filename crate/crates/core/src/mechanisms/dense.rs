use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Fully-connected network: tanh on hidden layers, identity on the output.
///
/// Parameters live in one flat vector, layer by layer, each layer stored as
/// a row-major `out x in` weight block followed by its `out` biases. With
/// `skip` set, a final row-major `out x in` block adds a linear map of the
/// input straight to the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    #[serde(default)]
    skip: bool,
    #[serde(with = "crate::mechanisms::b64")]
    params: Vec<f64>,
}

/// Activations retained by a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl DenseNet {
    /// Glorot-uniform hidden layers; the output layer is scaled by
    /// `output_scale` (0 gives a network that starts at its output bias).
    pub fn new(sizes: &[usize], output_scale: f64, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        let mut params = Vec::with_capacity(Self::count(sizes, false));
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
            let scale = if l + 2 == sizes.len() { output_scale } else { 1.0 };
            params.extend((0..n_in * n_out).map(|_| scale * dist.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        DenseNet {
            sizes: sizes.to_vec(),
            skip: false,
            params,
        }
    }

    /// Same as [`DenseNet::new`] plus a zero-initialized linear shortcut.
    pub fn with_skip(sizes: &[usize], output_scale: f64, rng: &mut impl Rng) -> Self {
        let mut net = Self::new(sizes, output_scale, rng);
        net.skip = true;
        net.params.extend(std::iter::repeat_n(0.0, sizes[0] * sizes[sizes.len() - 1]));
        net
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::count(&sizes, false)).then_some(DenseNet {
            sizes,
            skip: false,
            params,
        })
    }

    fn count(sizes: &[usize], skip: bool) -> usize {
        let extra = if skip { sizes[0] * sizes[sizes.len() - 1] } else { 0 };
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + extra
    }

    /// Whether the parameter vector length agrees with the architecture.
    pub fn is_consistent(&self) -> bool {
        self.sizes.len() >= 2 && self.sizes.iter().all(|&s| s > 0) && self.params.len() == Self::count(&self.sizes, self.skip)
    }

    /// Mutable linear-shortcut weights of output unit `k`, if present.
    pub fn skip_row_mut(&mut self, k: usize) -> Option<&mut [f64]> {
        if !self.skip {
            return None;
        }
        let n_in = self.sizes[0];
        let off = self.skip_offset() + k * n_in;
        Some(&mut self.params[off..off + n_in])
    }

    fn skip_offset(&self) -> usize {
        self.params.len() - self.sizes[0] * self.n_outputs()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mutable access to the bias of output unit `k`.
    pub fn output_bias_mut(&mut self, k: usize) -> &mut f64 {
        let n = Self::count(&self.sizes, false);
        let n_out = self.n_outputs();
        &mut self.params[n - n_out + k]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward_taped(x, &mut tape);
        tape.acts.pop().unwrap()
    }

    /// Forward pass recording activations; returns the output slice.
    pub fn forward_taped<'t>(&self, x: &[f64], tape: &'t mut Tape) -> &'t [f64] {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let layers = self.sizes.len() - 1;
        tape.acts.resize_with(layers + 1, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let (prev, rest) = tape.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                out.push(if l + 1 < layers { z.tanh() } else { z });
            }
        }
        if self.skip {
            let n_in = self.sizes[0];
            let w = &self.params[self.skip_offset()..];
            let (first, rest) = tape.acts.split_at_mut(1);
            let out = &mut rest[layers - 1];
            for (o, y) in out.iter_mut().enumerate() {
                *y += w[o * n_in..(o + 1) * n_in].iter().zip(&first[0]).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        &tape.acts[layers]
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut delta: Vec<f64> = d_out.to_vec();
        let mut off_end = Self::count(&self.sizes, false);
        if self.skip {
            let n_in = self.sizes[0];
            let off = self.skip_offset();
            for (o, d) in d_out.iter().enumerate() {
                for (g, x) in grad[off + o * n_in..off + (o + 1) * n_in].iter_mut().zip(&tape.acts[0]) {
                    *g += d * x;
                }
            }
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = off_end - (n_in * n_out + n_out);
            let input = &tape.acts[l];
            for o in 0..n_out {
                let d = delta[o];
                grad[off + n_in * n_out + o] += d;
                let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    for (ni, wi) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *ni += d * wi;
                    }
                }
                // input of layer l is tanh output of layer l-1
                for (ni, a) in next.iter_mut().zip(input) {
                    *ni *= 1.0 - a * a;
                }
                delta = next;
            }
            off_end = off;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plain = DenseNet::new(&[3, 5, 4, 2], 1.0, &mut rng);
        let mut skip = DenseNet::with_skip(&[3, 5, 4, 2], 1.0, &mut rng);
        for p in skip.params_mut() {
            *p += 0.1;
        }
        assert!(skip.is_consistent());
        for net in [plain, skip] {
            check_backward(&net);
        }
    }

    fn check_backward(net: &DenseNet) {
        let x = [0.3, -1.2, 0.7];
        // loss = 0.5 * |out|^2 + out[1]
        let net = net.clone();
        let loss = |n: &DenseNet| {
            let o = n.forward(&x);
            0.5 * (o[0] * o[0] + o[1] * o[1]) + o[1]
        };
        let mut tape = Tape::default();
        let o = net.forward_taped(&x, &mut tape).to_vec();
        let mut grad = vec![0.0; net.params().len()];
        net.backward(&tape, &[o[0], o[1] + 1.0], &mut grad);
        for i in 0..grad.len() {
            let h = 1e-6;
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_output_scale_starts_at_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenseNet::new(&[2, 8, 2], 0.0, &mut rng);
        *net.output_bias_mut(1) = 0.25;
        assert_eq!(net.forward(&[5.0, -3.0]), vec![0.0, 0.25]);
        assert!(DenseNet::from_params(vec![2, 8, 2], net.params().to_vec()).is_some());
        assert!(DenseNet::from_params(vec![2, 8, 2], vec![0.0; 3]).is_none());
    }
}
