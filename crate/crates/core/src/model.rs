//! A paired generative model and inference network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::generative::{GenDims, GenerativeParams};
use crate::inference::{InfDims, InferenceParams};
use crate::numerics::ParamStore;

/// Every size needed to build a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// `K`
    pub states: usize,
    /// `M`
    pub max_dur: usize,
    /// `m`
    pub obs_dim: usize,
    /// Generative recurrence size `h`.
    pub hidden: usize,
    /// Encoder size per direction `e`.
    pub encoder: usize,
    /// Summary size `q`.
    pub summary: usize,
}

impl ModelDims {
    pub fn generative(&self) -> GenDims {
        GenDims {
            states: self.states,
            max_dur: self.max_dur,
            obs_dim: self.obs_dim,
            hidden: self.hidden,
        }
    }

    pub fn inference(&self) -> InfDims {
        InfDims {
            states: self.states,
            max_dur: self.max_dur,
            obs_dim: self.obs_dim,
            encoder: self.encoder,
            summary: self.summary,
        }
    }
}

/// θ and φ together.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gen: GenerativeParams,
    pub inf: InferenceParams,
}

impl Model {
    pub fn new(gen: GenerativeParams, inf: InferenceParams) -> Result<Self> {
        if !inf.dims().matches(&gen.dims()) {
            return Err(SsnnError::Dimension(format!(
                "inference dims {:?} do not pair with generative dims {:?}",
                inf.dims(),
                gen.dims()
            )));
        }
        Ok(Model { gen, inf })
    }

    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let gen = GenerativeParams::random(dims.generative(), rng)?;
        let inf = InferenceParams::random(dims.inference(), rng)?;
        Model::new(gen, inf)
    }

    pub fn dims(&self) -> ModelDims {
        let (g, i) = (self.gen.dims(), self.inf.dims());
        ModelDims {
            states: g.states,
            max_dur: g.max_dur,
            obs_dim: g.obs_dim,
            hidden: g.hidden,
            encoder: i.encoder,
            summary: i.summary,
        }
    }

    /// Both stores merged into one (names are prefixed, so they never clash).
    pub fn to_store(&self) -> ParamStore {
        let mut store = self.gen.store().clone();
        store
            .merge(self.inf.store().clone())
            .expect("prefixes keep names disjoint");
        store
    }

    pub fn from_store(dims: ModelDims, store: &ParamStore, no_self_transition: bool) -> Result<Self> {
        let mut gen = GenerativeParams::from_store(dims.generative(), store)?;
        gen.set_no_self_transition(no_self_transition)?;
        let inf = InferenceParams::from_store(dims.inference(), store)?;
        Model::new(gen, inf)
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 2] {
        [self.gen.store_mut(), self.inf.store_mut()]
    }
}
