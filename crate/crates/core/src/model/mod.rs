//! The latent-code model: an LSTM prediction network with output projection
//! `U`, a codebook `V` shared by the confirmation network and the generator,
//! and the optional output projections used by the VQ-APC and APC baselines.

mod distributions;
pub mod lstm;

pub use distributions::{
    confirmation_distribution, confirmation_distribution_scaled, gaussian_log_norm,
    generation_log_density, generator_mean, marginal_log_likelihood, nearest_codeword,
    posterior_distribution, predictor_distribution, CodeDistribution,
};
pub use lstm::{lstm_backward, lstm_forward, LstmTrace};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kmeans::kmeanspp_init;
use crate::numerics::{ParamSet, Real, Rng, Tensor2};

pub const PROJ_U: &str = "proj_u";
pub const CODEBOOK: &str = "codebook";
pub const OUT_W: &str = "out_w";
pub const APC_HEAD: &str = "apc_head";

/// Training objective, which also fixes the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    CotrainExact,
    CotrainGumbel,
    HubertLike,
    VqApc,
    Apc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::CotrainExact,
        Variant::CotrainGumbel,
        Variant::HubertLike,
        Variant::VqApc,
        Variant::Apc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CotrainExact => "cotrain-exact",
            Variant::CotrainGumbel => "cotrain-gumbel",
            Variant::HubertLike => "hubert-like",
            Variant::VqApc => "vq-apc",
            Variant::Apc => "apc",
        }
    }

    pub fn is_cotrain(self) -> bool {
        matches!(self, Variant::CotrainExact | Variant::CotrainGumbel)
    }

    pub fn uses_gumbel(self) -> bool {
        matches!(self, Variant::CotrainGumbel | Variant::VqApc)
    }

    pub fn has_codebook(self) -> bool {
        !matches!(self, Variant::Apc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Sizes of the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentConfig {
    /// Codebook size `N`.
    pub codebook_size: usize,
    /// Time shift `k` between the last observed frame and the predicted one.
    pub shift: usize,
    /// Frame dimension `d`.
    pub frame_dim: usize,
    /// LSTM width `H`.
    pub hidden: usize,
    pub layers: usize,
    /// Codeword width; equals `frame_dim` for the co-training and
    /// HuBERT-like variants.
    pub codeword_dim: usize,
}

/// Codeword width used by VQ-APC by default.
pub const VQ_APC_CODEWORD_DIM: usize = 512;

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            shift: 5,
            frame_dim: 40,
            hidden: 512,
            layers: 3,
            codeword_dim: 40,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.codebook_size == 0 {
            return bad("codebook size must be at least 1");
        }
        if self.shift == 0 {
            return bad("time shift must be at least 1");
        }
        if self.layers == 0 || self.hidden == 0 || self.frame_dim == 0 {
            return bad("layers, hidden size and frame dimension must be positive");
        }
        if matches!(
            variant,
            Variant::CotrainExact | Variant::CotrainGumbel | Variant::HubertLike
        ) && self.codeword_dim != self.frame_dim
        {
            return bad("codewords must have the frame dimension for this variant");
        }
        Ok(())
    }
}

/// Model parameters plus the variant that decides which blocks exist and
/// which are trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: LatentConfig,
    pub variant: Variant,
    pub params: ParamSet<F>,
}

/// Where the initial codebook comes from.
pub enum CodebookInit<'a, F> {
    /// k-means++ seeding over these frames: codewords are training frames.
    SampleFrames(&'a Tensor2<F>),
    /// Fixed codewords (k-means centroids for HuBERT-like training).
    Fixed(Tensor2<F>),
    /// Uniform in `±1/sqrt(codeword_dim)`.
    Random,
}

fn uniform_block<F: Real>(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor2<F> {
    let data = (0..rows * cols)
        .map(|_| F::of(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("shape")
}

impl<F: Real> Model<F> {
    /// Fresh parameters. LSTM kernels and `U` are uniform in `±1/sqrt(H)`,
    /// forget-gate biases are 1 and other biases 0.
    pub fn init(
        config: LatentConfig,
        variant: Variant,
        codebook: CodebookInit<'_, F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate(variant)?;
        let h = config.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut params = ParamSet::new();
        for l in 0..config.layers {
            let input = if l == 0 { config.frame_dim } else { h };
            params.push(lstm::w_ih_name(l), uniform_block(4 * h, input, bound, rng));
            params.push(lstm::w_hh_name(l), uniform_block(4 * h, h, bound, rng));
            let mut bias = Tensor2::zeros(1, 4 * h);
            for j in h..2 * h {
                bias[(0, j)] = F::one();
            }
            params.push(lstm::bias_name(l), bias);
        }
        if variant.has_codebook() {
            params.push(PROJ_U, uniform_block(h, config.codebook_size, bound, rng));
            let n = config.codebook_size;
            let dc = config.codeword_dim;
            let v = match codebook {
                CodebookInit::SampleFrames(frames) => {
                    if frames.cols() != dc {
                        return Err(Error::Shape(format!(
                            "sample frames have dimension {}, codewords {dc}",
                            frames.cols()
                        )));
                    }
                    kmeanspp_init(frames, n, rng)?
                }
                CodebookInit::Fixed(v) => {
                    if v.shape() != (n, dc) {
                        return Err(Error::Shape(format!(
                            "codebook must be {n}x{dc}, got {:?}",
                            v.shape()
                        )));
                    }
                    v
                }
                CodebookInit::Random => uniform_block(n, dc, 1.0 / (dc as f64).sqrt(), rng),
            };
            params.push(CODEBOOK, v);
        }
        match variant {
            Variant::VqApc => {
                let b = 1.0 / (config.codeword_dim as f64).sqrt();
                params.push(
                    OUT_W,
                    uniform_block(config.frame_dim, config.codeword_dim, b, rng),
                );
            }
            Variant::Apc => {
                params.push(APC_HEAD, uniform_block(config.frame_dim, h, bound, rng));
            }
            _ => {}
        }
        Ok(Self {
            config,
            variant,
            params,
        })
    }

    /// Names of the blocks the optimizer updates.
    pub fn trainable(&self) -> Vec<String> {
        self.params
            .names()
            .into_iter()
            .filter(|n| match *n {
                CODEBOOK => matches!(
                    self.variant,
                    Variant::CotrainExact | Variant::CotrainGumbel | Variant::VqApc
                ),
                _ => true,
            })
            .map(str::to_string)
            .collect()
    }

    pub fn codebook(&self) -> Option<&Tensor2<F>> {
        self.params.try_get(CODEBOOK)
    }

    pub fn proj_u(&self) -> Option<&Tensor2<F>> {
        self.params.try_get(PROJ_U)
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            variant: self.variant,
            params: self.params.cast(),
        }
    }

    /// Hidden states of every layer for one utterance (`T × d` frames).
    pub fn hidden_states(&self, frames: &Tensor2<F>) -> Vec<Tensor2<F>> {
        let trace = lstm_forward(&self.params, self.config.layers, frames, 1);
        trace.layers.into_iter().map(|c| c.hidden).collect()
    }

    /// Check that the parameter blocks match the configuration and variant.
    pub fn validate(&self) -> Result<()> {
        self.config.validate(self.variant)?;
        let reference = Model::<F>::init(
            self.config.clone(),
            self.variant,
            CodebookInit::Random,
            &mut Rng::new(0),
        )?;
        self.params.check_same_layout(&reference.params)?;
        if let Some(name) = self.params.first_non_finite() {
            return Err(Error::NonFinite(format!("parameter block {name}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LatentConfig {
        LatentConfig {
            codebook_size: 5,
            shift: 2,
            frame_dim: 4,
            hidden: 8,
            layers: 2,
            codeword_dim: 4,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bert".parse::<Variant>().is_err());
    }

    #[test]
    fn layouts_per_variant() {
        let mut rng = Rng::new(1);
        let m = Model::<f32>::init(
            tiny(),
            Variant::CotrainExact,
            CodebookInit::Random,
            &mut rng,
        )
        .unwrap();
        assert!(m.trainable().contains(&CODEBOOK.to_string()));
        assert_eq!(m.params.get(PROJ_U).shape(), (8, 5));
        assert_eq!(m.params.get("lstm.1.w_ih").shape(), (32, 8));
        assert_eq!(m.params.get("lstm.0.bias")[(0, 8)], 1.0);

        let h = Model::<f32>::init(tiny(), Variant::HubertLike, CodebookInit::Random, &mut rng)
            .unwrap();
        assert!(!h.trainable().contains(&CODEBOOK.to_string()));

        let cfg = LatentConfig {
            codeword_dim: 6,
            ..tiny()
        };
        let vq = Model::<f32>::init(cfg, Variant::VqApc, CodebookInit::Random, &mut rng).unwrap();
        assert_eq!(vq.params.get(OUT_W).shape(), (4, 6));

        let apc = Model::<f32>::init(tiny(), Variant::Apc, CodebookInit::Random, &mut rng).unwrap();
        assert!(apc.codebook().is_none());
        assert_eq!(apc.params.get(APC_HEAD).shape(), (4, 8));
        apc.validate().unwrap();
    }

    #[test]
    fn mismatched_codeword_dim_rejected() {
        let cfg = LatentConfig {
            codeword_dim: 7,
            ..tiny()
        };
        assert!(Model::<f32>::init(
            cfg,
            Variant::CotrainExact,
            CodebookInit::Random,
            &mut Rng::new(0)
        )
        .is_err());
    }

    #[test]
    fn hidden_states_are_causal() {
        let mut rng = Rng::new(3);
        let m = Model::<f64>::init(
            tiny(),
            Variant::CotrainExact,
            CodebookInit::Random,
            &mut rng,
        )
        .unwrap();
        let frames = Tensor2::from_vec(10, 4, (0..40).map(|_| rng.normal()).collect()).unwrap();
        let base = m.hidden_states(&frames);
        for cut in 0..9 {
            let mut perturbed = frames.clone();
            for j in 0..4 {
                perturbed[(cut + 1, j)] += 0.75;
            }
            let after = m.hidden_states(&perturbed);
            for l in 0..2 {
                for t in 0..=cut {
                    assert_eq!(base[l].row(t), after[l].row(t));
                }
                assert_ne!(base[l].row(cut + 1), after[l].row(cut + 1));
            }
        }
    }
}
