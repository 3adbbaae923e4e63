//! Convolutional variational autoencoder.
//!
//! Encoder: `N × (conv k3 s2 p1 → [batchnorm] → leaky relu)`, flatten, two
//! dense layers producing `[μ | logvar]`. Decoder: two dense layers, reshape,
//! `N × (transposed conv k4 s2 p1 → [batchnorm] → leaky relu)`, conv k3 s1 p1,
//! tanh. Each down block halves the side, each up block doubles it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::layers::{linear, uniform_init};
use crate::tensor::{BatchNormMode, Param, ParamSet, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Feature channels per down block; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub hidden: usize,
    pub batchnorm: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            channels: vec![32, 64, 128],
            latent_dim: 16,
            hidden: 256,
            batchnorm: false,
        }
    }
}

impl VaeConfig {
    /// Side length of the innermost feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.channels.contains(&0) {
            return Err(Error::Config("model needs at least one nonzero channel block".into()));
        }
        if !self.image_size.is_power_of_two() {
            return Err(Error::NotPowerOfTwo {
                dim: "image_size",
                size: self.image_size,
            });
        }
        if self.image_size >> n == 0 || !self.image_size.is_multiple_of(1 << n) {
            return Err(Error::Config(format!(
                "{} down blocks do not fit a {}px image",
                n, self.image_size
            )));
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "latent, hidden and channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Posterior sample with `z = μ + exp(logvar/2)·eps`.
#[derive(Clone, Copy, Debug)]
pub struct LatentSample {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub params: ParamSet,
    config: VaeConfig,
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".bn.mean") || name.ends_with(".bn.var")
}

impl Vae {
    pub fn new<R: Rng>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let bn = config.batchnorm;
        let push_bn = |p: &mut ParamSet, prefix: &str, c: usize| {
            p.push(format!("{prefix}.bn.gamma"), Tensor::filled(&[c], 1.0), true);
            p.push(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]), true);
            p.push(format!("{prefix}.bn.mean"), Tensor::zeros(&[c]), false);
            p.push(format!("{prefix}.bn.var"), Tensor::filled(&[c], 1.0), false);
        };
        let mut cin = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let fan = cin * 9;
            p.push(format!("enc.{i}.conv.w"), uniform_init(rng, &[c, cin, 3, 3], fan), true);
            if bn {
                push_bn(&mut p, &format!("enc.{i}"), c);
            } else {
                p.push(format!("enc.{i}.conv.b"), uniform_init(rng, &[c], fan), true);
            }
            cin = c;
        }
        let f = config.feature_size();
        let flat = cin * f * f;
        let (h, l) = (config.hidden, config.latent_dim);
        p.push("enc.fc1.w", uniform_init(rng, &[flat, h], flat), true);
        p.push("enc.fc1.b", uniform_init(rng, &[h], flat), true);
        let mut w2 = uniform_init(rng, &[h, 2 * l], h);
        let mut b2 = uniform_init(rng, &[2 * l], h);
        // logvar half starts at zero: unit posterior variance
        for r in 0..h {
            w2.data_mut()[r * 2 * l + l..(r + 1) * 2 * l].fill(0.0);
        }
        b2.data_mut()[l..].fill(0.0);
        p.push("enc.fc2.w", w2, true);
        p.push("enc.fc2.b", b2, true);

        p.push("dec.fc1.w", uniform_init(rng, &[l, h], l), true);
        p.push("dec.fc1.b", uniform_init(rng, &[h], l), true);
        p.push("dec.fc2.w", uniform_init(rng, &[h, flat], h), true);
        p.push("dec.fc2.b", uniform_init(rng, &[flat], h), true);
        let n = config.channels.len();
        for i in 0..n {
            let from = config.channels[n - 1 - i];
            let to = if i + 1 < n {
                config.channels[n - 2 - i]
            } else {
                config.channels[0]
            };
            let fan = to * 16;
            p.push(
                format!("dec.{i}.convt.w"),
                uniform_init(rng, &[from, to, 4, 4], fan),
                true,
            );
            if bn {
                push_bn(&mut p, &format!("dec.{i}"), to);
            } else {
                p.push(format!("dec.{i}.convt.b"), uniform_init(rng, &[to], fan), true);
            }
        }
        let c0 = config.channels[0];
        let fan = c0 * 9;
        p.push(
            "dec.out.w",
            uniform_init(rng, &[config.in_channels, c0, 3, 3], fan),
            true,
        );
        p.push("dec.out.b", uniform_init(rng, &[config.in_channels], fan), true);
        Ok(Self { params: p, config })
    }

    /// Rebuilds a model from named tensors, inferring the architecture.
    pub fn from_params(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")))
        };
        let mut channels = Vec::new();
        while let Ok(w) = find(&format!("enc.{}.conv.w", channels.len())) {
            channels.push(w.shape()[0]);
        }
        if channels.is_empty() {
            return Err(Error::invalid("checkpoint has no encoder blocks"));
        }
        let in_channels = find("enc.0.conv.w")?.shape()[1];
        let fc1 = find("enc.fc1.w")?.shape().to_vec();
        let latent_dim = find("dec.fc1.w")?.shape()[0];
        let c_last = *channels.last().expect("nonempty");
        let f2 = fc1[0] / c_last;
        let f = (f2 as f64).sqrt().round() as usize;
        if f * f * c_last != fc1[0] {
            return Err(Error::invalid("encoder dense input is not a square feature map"));
        }
        let config = VaeConfig {
            image_size: f << channels.len(),
            in_channels,
            channels,
            latent_dim,
            hidden: fc1[1],
            batchnorm: find("enc.0.bn.gamma").is_ok(),
        };
        config.validate()?;
        // values are overwritten below; the seed only fixes construction order
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        for p in model.params.iter_mut() {
            let t = find(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(t.shape(), p.value.shape()));
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    fn idx(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a constructed model"))
    }

    /// Conv output plus bias or batchnorm, then leaky relu.
    fn block_tail(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        y: Var,
        prefix: &str,
        bias: &str,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let y = if self.config.batchnorm {
            let (g, b) = (
                self.idx(&format!("{prefix}.bn.gamma")),
                self.idx(&format!("{prefix}.bn.beta")),
            );
            let (mi, vi) = (
                self.idx(&format!("{prefix}.bn.mean")),
                self.idx(&format!("{prefix}.bn.var")),
            );
            let mut mean = self.params.get(mi).value.data().to_vec();
            let mut var = self.params.get(vi).value.data().to_vec();
            let out = tape.batchnorm2d(y, vars[g], vars[b], &mut mean, &mut var, mode)?;
            self.params.get_mut(mi).value.data_mut().copy_from_slice(&mean);
            self.params.get_mut(vi).value.data_mut().copy_from_slice(&var);
            out
        } else {
            let bi = self.idx(&format!("{prefix}.{bias}.b"));
            tape.add_bias(y, vars[bi])?
        };
        tape.leaky_relu(y, LEAKY_SLOPE)
    }

    /// `(μ, logvar)` for `x: [B, C, H, W]`.
    pub fn encode_moments(&mut self, tape: &mut Tape, vars: &[Var], x: Var, mode: BatchNormMode) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(&s, &[0, c.in_channels, c.image_size, c.image_size]));
        }
        let mut h = x;
        for i in 0..self.config.channels.len() {
            let w = vars[self.idx(&format!("enc.{i}.conv.w"))];
            let y = tape.conv2d(h, w, 2, 1)?;
            h = self.block_tail(tape, vars, y, &format!("enc.{i}"), "conv", mode)?;
        }
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[s[0], flat])?;
        let h = linear(tape, h, vars[self.idx("enc.fc1.w")], vars[self.idx("enc.fc1.b")])?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let out = linear(tape, h, vars[self.idx("enc.fc2.w")], vars[self.idx("enc.fc2.b")])?;
        let l = self.config.latent_dim;
        let mu = tape.slice_cols(out, 0, l)?;
        let logvar = tape.slice_cols(out, l, 2 * l)?;
        if !tape.value(out).is_finite() {
            return Err(Error::Divergence("encoder produced non-finite moments".into()));
        }
        Ok((mu, logvar))
    }

    /// `z = μ + exp(logvar/2)·eps` with externally supplied noise.
    pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
        if eps.shape() != tape.shape(mu) {
            return Err(Error::shape(eps.shape(), tape.shape(mu)));
        }
        let half = tape.mul_scalar(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let e = tape.constant(eps.clone());
        let noise = tape.mul(std, e)?;
        tape.add(mu, noise)
    }

    /// Standard normal noise shaped like a batch of latents.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R, batch: usize) -> Tensor {
        let n = batch * self.config.latent_dim;
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![batch, self.config.latent_dim], data).expect("numel matches shape")
    }

    pub fn encode<R: Rng>(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: BatchNormMode,
        rng: &mut R,
    ) -> Result<LatentSample> {
        let (mu, logvar) = self.encode_moments(tape, vars, x, mode)?;
        let eps = self.sample_noise(rng, tape.shape(mu)[0]);
        let z = Self::reparameterize(tape, mu, logvar, &eps)?;
        Ok(LatentSample { mu, logvar, z })
    }

    /// `x̂` in `(−1, 1)` for `z: [B, latent]`.
    pub fn decode(&mut self, tape: &mut Tape, vars: &[Var], z: Var, mode: BatchNormMode) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::shape(&s, &[0, self.config.latent_dim]));
        }
        let b = s[0];
        let h = linear(tape, z, vars[self.idx("dec.fc1.w")], vars[self.idx("dec.fc1.b")])?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = linear(tape, h, vars[self.idx("dec.fc2.w")], vars[self.idx("dec.fc2.b")])?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let f = self.config.feature_size();
        let c_last = *self.config.channels.last().expect("validated");
        let mut h = tape.reshape(h, &[b, c_last, f, f])?;
        for i in 0..self.config.channels.len() {
            let w = vars[self.idx(&format!("dec.{i}.convt.w"))];
            let y = tape.conv_transpose2d(h, w, 2, 1)?;
            h = self.block_tail(tape, vars, y, &format!("dec.{i}"), "convt", mode)?;
        }
        let y = tape.conv2d(h, vars[self.idx("dec.out.w")], 1, 1)?;
        let y = tape.add_bias(y, vars[self.idx("dec.out.b")])?;
        let out = tape.tanh(y)?;
        if !tape.value(out).is_finite() {
            return Err(Error::Divergence("decoder produced non-finite output".into()));
        }
        Ok(out)
    }

    /// Posterior-mean reconstructions without gradients.
    pub fn reconstruct(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (mu, _) = self.encode_moments(&mut tape, &vars, xv, BatchNormMode::Eval)?;
        let out = self.decode(&mut tape, &vars, mu, BatchNormMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Posterior means `[B, latent]` without gradients.
    pub fn posterior_mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (mu, _) = self.encode_moments(&mut tape, &vars, xv, BatchNormMode::Eval)?;
        Ok(tape.value(mu).clone())
    }

    /// Decodes `n` prior samples drawn from `rng`.
    pub fn generate<R: Rng>(&mut self, n: usize, rng: &mut R) -> Result<Tensor> {
        let c = &self.config;
        if n == 0 {
            return Ok(Tensor::zeros(&[0, c.in_channels, c.image_size, c.image_size]));
        }
        let z = self.sample_noise(rng, n);
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let zv = tape.constant(z);
        let out = self.decode(&mut tape, &vars, zv, BatchNormMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Trainable entries only (running statistics excluded).
    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.trainable && !is_running_stat(&p.name))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p: &Param| (p.name.as_str(), &p.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VaeConfig {
        VaeConfig {
            image_size: 8,
            in_channels: 1,
            channels: vec![4, 6],
            latent_dim: 3,
            hidden: 10,
            batchnorm: false,
        }
    }

    #[test]
    fn shapes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vae = Vae::new(VaeConfig::default(), &mut rng).unwrap();
        let x = Tensor::new(
            vec![2, 1, 32, 32],
            (0..2048).map(|i| ((i % 7) as f64 - 3.0) / 4.0).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let vars = vae.params.register(&mut tape);
        let xv = tape.constant(x);
        let s = vae
            .encode(&mut tape, &vars, xv, BatchNormMode::Train, &mut rng)
            .unwrap();
        assert_eq!(tape.shape(s.mu), &[2, 16]);
        let out = vae.decode(&mut tape, &vars, s.z, BatchNormMode::Train).unwrap();
        assert_eq!(tape.shape(out), &[2, 1, 32, 32]);
        assert!(tape.value(out).data().iter().all(|v| v.abs() < 1.0));
        // zero-initialized logvar head
        assert!(tape.value(s.logvar).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoding_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut vae = Vae::new(small(), &mut rng).unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| (i as f64 / 32.0) - 1.0).collect()).unwrap();
        let run = |vae: &mut Vae| {
            let mut tape = Tape::new();
            let vars = vae.params.register(&mut tape);
            let xv = tape.constant(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let s = vae.encode(&mut tape, &vars, xv, BatchNormMode::Eval, &mut r).unwrap();
            tape.value(s.z).clone()
        };
        assert_eq!(run(&mut vae), run(&mut vae));
    }

    #[test]
    fn generate_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vae = Vae::new(small(), &mut rng).unwrap();
        assert_eq!(vae.generate(0, &mut rng).unwrap().shape(), &[0, 1, 8, 8]);
        let a = vae.generate(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = vae.generate(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn architecture_inferred_from_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for bn in [false, true] {
            let cfg = VaeConfig {
                batchnorm: bn,
                ..small()
            };
            let vae = Vae::new(cfg.clone(), &mut rng).unwrap();
            let entries = vae.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
            let back = Vae::from_params(entries).unwrap();
            assert_eq!(back.config(), &cfg);
            assert_eq!(back.params.fingerprint(), vae.params.fingerprint());
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(Vae::new(
            VaeConfig {
                image_size: 24,
                ..small()
            },
            &mut rng
        )
        .is_err());
        assert!(Vae::new(
            VaeConfig {
                channels: vec![2, 2, 2, 2],
                ..small()
            },
            &mut rng
        )
        .is_err());
    }
}
