//! Low-rank adapters. Each adapted weight W (in×out) gains a trainable
//! update (α/r)·down·up with down (in×r) and up (r×out). `up` starts at zero
//! so an initialized adapter is an exact identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::autodiff::{mm_nn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Which weight matrices receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSelector {
    /// Feed-forward up/down projections only (default).
    Mlp,
    /// Q, K, V and the attention output projection.
    Attention,
    /// Both of the above.
    Full,
}

/// A single adaptable weight site within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetSite {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
}

impl TargetSite {
    pub fn name(&self) -> &'static str {
        match self {
            TargetSite::AttnQ => "attn_q",
            TargetSite::AttnK => "attn_k",
            TargetSite::AttnV => "attn_v",
            TargetSite::AttnO => "attn_o",
            TargetSite::MlpUp => "mlp_up",
            TargetSite::MlpDown => "mlp_down",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "attn_q" => TargetSite::AttnQ,
            "attn_k" => TargetSite::AttnK,
            "attn_v" => TargetSite::AttnV,
            "attn_o" => TargetSite::AttnO,
            "mlp_up" => TargetSite::MlpUp,
            "mlp_down" => TargetSite::MlpDown,
            _ => return None,
        })
    }
}

impl TargetSelector {
    pub fn sites(&self) -> &'static [TargetSite] {
        match self {
            TargetSelector::Mlp => &[TargetSite::MlpUp, TargetSite::MlpDown],
            TargetSelector::Attention => &[
                TargetSite::AttnQ,
                TargetSite::AttnK,
                TargetSite::AttnV,
                TargetSite::AttnO,
            ],
            TargetSelector::Full => &[
                TargetSite::AttnQ,
                TargetSite::AttnK,
                TargetSite::AttnV,
                TargetSite::AttnO,
                TargetSite::MlpUp,
                TargetSite::MlpDown,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub selector: TargetSelector,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            selector: TargetSelector::Mlp,
            rank: 4,
            alpha: 32.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lora dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One low-rank factor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair<E> {
    /// (in × r), Gaussian init.
    pub down: Tensor<E>,
    /// (r × out), zero init.
    pub up: Tensor<E>,
}

/// LoRA factors for every adapted site of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<E> {
    pub config: LoraConfig,
    /// layers[i] holds (site, pair) in site order.
    layers: Vec<Vec<(TargetSite, FactorPair<E>)>>,
}

impl<E: Scalar> LoraAdapter<E> {
    /// Fresh adapter for a model shape. With `up` at zero the adapted model
    /// equals the base model exactly.
    pub fn init(model: &ModelConfig, config: LoraConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = model.d_model;
        let m = model.mlp_dim();
        let r = config.rank;
        let mut layers = Vec::with_capacity(model.n_layers);
        for _ in 0..model.n_layers {
            let mut sites = Vec::new();
            for &site in config.selector.sites() {
                let (inp, out) = match site {
                    TargetSite::AttnQ | TargetSite::AttnK | TargetSite::AttnV | TargetSite::AttnO => (d, d),
                    TargetSite::MlpUp => (d, m),
                    TargetSite::MlpDown => (m, d),
                };
                sites.push((
                    site,
                    FactorPair {
                        down: Tensor::randn(vec![inp, r], 0.02, &mut rng),
                        up: Tensor::zeros(vec![r, out]),
                    },
                ));
            }
            layers.push(sites);
        }
        Ok(LoraAdapter { config, layers })
    }

    /// α / r.
    pub fn scaling(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn pair(&self, layer: usize, site: TargetSite) -> Option<&FactorPair<E>> {
        self.layers
            .get(layer)?
            .iter()
            .find(|(s, _)| *s == site)
            .map(|(_, p)| p)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Named factor tensors in fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        for (i, sites) in self.layers.iter().enumerate() {
            for (site, pair) in sites {
                out.push((format!("layer{i}.{}.down", site.name()), &pair.down));
                out.push((format!("layer{i}.{}.up", site.name()), &pair.up));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for (i, sites) in self.layers.iter_mut().enumerate() {
            for (site, pair) in sites {
                out.push((format!("layer{i}.{}.down", site.name()), &mut pair.down));
                out.push((format!("layer{i}.{}.up", site.name()), &mut pair.up));
            }
        }
        out
    }

    /// Look up a factor tensor by the name produced by `tensors()`.
    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let layer: usize = rest[..dot].parse().ok()?;
        let tail = &rest[dot + 1..];
        let (site_name, which) = tail.rsplit_once('.')?;
        let site = TargetSite::from_name(site_name)?;
        let sites = self.layers.get_mut(layer)?;
        let pair = sites.iter_mut().find(|(s, _)| *s == site).map(|(_, p)| p)?;
        match which {
            "down" => Some(&mut pair.down),
            "up" => Some(&mut pair.up),
            _ => None,
        }
    }

    /// Effective weight for a site: W + (α/r)·down·up (W itself when the
    /// site is not adapted). Used by locality and identity checks.
    pub fn effective_weight(&self, params: &Parameters<E>, layer: usize, site: TargetSite) -> Tensor<E> {
        let base = match site {
            TargetSite::AttnQ => &params.layers[layer].attn_q,
            TargetSite::AttnK => &params.layers[layer].attn_k,
            TargetSite::AttnV => &params.layers[layer].attn_v,
            TargetSite::AttnO => &params.layers[layer].attn_o,
            TargetSite::MlpUp => &params.layers[layer].mlp_up,
            TargetSite::MlpDown => &params.layers[layer].mlp_down,
        };
        let Some(pair) = self.pair(layer, site) else {
            return base.clone();
        };
        let (inp, r) = (pair.down.rows(), pair.down.cols());
        let out = pair.up.cols();
        let mut delta = vec![E::zero(); inp * out];
        mm_nn(pair.down.data(), pair.up.data(), &mut delta, inp, r, out);
        let scale = E::from_f64_lossy(self.scaling());
        let data = base
            .data()
            .iter()
            .zip(&delta)
            .map(|(&w, &d)| w + scale * d)
            .collect();
        Tensor::new(base.shape().to_vec(), data).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model};
    use crate::tokenizer;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            context_length: 32,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_up_factor_is_identity() {
        let mc = cfg();
        let params = init_model::<f32>(&mc).unwrap();
        let adapter = LoraAdapter::init(&mc, LoraConfig::default()).unwrap();
        let toks = tokenizer::encode("identity check");
        let base = forward(&params, None, &toks).unwrap();
        let adapted = forward(&params, Some(&adapter), &toks).unwrap();
        assert_eq!(base, adapted, "fresh adapter must not change logits");
    }

    #[test]
    fn zero_alpha_is_identity_even_with_nonzero_factors() {
        let mc = cfg();
        let params = init_model::<f32>(&mc).unwrap();
        let mut adapter = LoraAdapter::init(
            &mc,
            LoraConfig {
                alpha: 0.0,
                ..LoraConfig::default()
            },
        )
        .unwrap();
        for (_, t) in adapter.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.3;
            }
        }
        let toks = tokenizer::encode("alpha zero");
        let base = forward(&params, None, &toks).unwrap();
        let adapted = forward(&params, Some(&adapter), &toks).unwrap();
        assert_eq!(base, adapted);
    }

    #[test]
    fn mlp_selector_leaves_attention_untouched() {
        let mc = cfg();
        let params = init_model::<f32>(&mc).unwrap();
        let mut adapter = LoraAdapter::init(&mc, LoraConfig::default()).unwrap();
        for (_, t) in adapter.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.1;
            }
        }
        for layer in 0..mc.n_layers {
            let attn_bases = [
                (TargetSite::AttnQ, &params.layers[layer].attn_q),
                (TargetSite::AttnK, &params.layers[layer].attn_k),
                (TargetSite::AttnV, &params.layers[layer].attn_v),
                (TargetSite::AttnO, &params.layers[layer].attn_o),
            ];
            for (site, base) in attn_bases {
                assert!(adapter.pair(layer, site).is_none());
                let eff = adapter.effective_weight(&params, layer, site);
                assert_eq!(&eff, base, "attention site changed under mlp selector");
            }
            for site in [TargetSite::MlpUp, TargetSite::MlpDown] {
                let eff = adapter.effective_weight(&params, layer, site);
                let base = match site {
                    TargetSite::MlpUp => &params.layers[layer].mlp_up,
                    _ => &params.layers[layer].mlp_down,
                };
                assert_ne!(&eff, base, "mlp site should be adapted");
            }
        }
    }

    #[test]
    fn attention_selector_leaves_mlp_untouched() {
        let mc = cfg();
        let params = init_model::<f32>(&mc).unwrap();
        let mut adapter = LoraAdapter::init(
            &mc,
            LoraConfig {
                selector: TargetSelector::Attention,
                ..LoraConfig::default()
            },
        )
        .unwrap();
        for (_, t) in adapter.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.1;
            }
        }
        for layer in 0..mc.n_layers {
            assert!(adapter.pair(layer, TargetSite::MlpUp).is_none());
            assert!(adapter.pair(layer, TargetSite::AttnQ).is_some());
        }
    }

    #[test]
    fn effective_update_is_scaled_product() {
        let mc = cfg();
        let params = init_model::<f32>(&mc).unwrap();
        let mut adapter = LoraAdapter::init(&mc, LoraConfig::default()).unwrap();
        // Set up = 0.5 so the delta is nonzero and easy to verify.
        for (name, t) in adapter.tensors_mut() {
            if name.ends_with(".up") {
                for v in t.data_mut() {
                    *v = 0.5;
                }
            }
        }
        let eff = adapter.effective_weight(&params, 0, TargetSite::MlpUp);
        let pair = adapter.pair(0, TargetSite::MlpUp).unwrap();
        let scale = adapter.scaling() as f32;
        // Check one entry by hand: eff[0,0] = W[0,0] + s·Σ_r down[0,r]·up[r,0]
        let r = adapter.config.rank;
        let dot: f32 = (0..r).map(|j| pair.down.data()[j] * pair.up.data()[j * pair.up.cols()]).sum();
        let expect = params.layers[0].mlp_up.data()[0] + scale * dot;
        assert!((eff.data()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn tensor_name_lookup_roundtrips() {
        let mc = cfg();
        let mut adapter = LoraAdapter::<f32>::init(&mc, LoraConfig::default()).unwrap();
        let names: Vec<String> = adapter.tensors().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            assert!(adapter.tensor_by_name_mut(&name).is_some(), "{name}");
        }
    }
}
