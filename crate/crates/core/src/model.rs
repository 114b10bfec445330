//! The full two-branch fusion network.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AuxDecoderFeatures, Branch, Level, Widths};
use crate::error::{Error, Result};
use crate::fusion::{AdaptedPair, GateState, GfmLevel};
use crate::graph::{Graph, Var};
use crate::nn::{Mode, Pass};
use crate::params::{read_checkpoint, Checkpoint, ParamStore};
use crate::refiner::{LevelPredictions, PredictionSet, Predictor, RefineLevel};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
pub const TRAJ_CHANNELS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: Widths,
    /// Seed of the random initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: Widths::REDUCED,
            init_seed: 0,
        }
    }
}

/// Everything a forward pass exposes, as graph handles.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub image_features: AuxDecoderFeatures,
    pub traj_features: AuxDecoderFeatures,
    pub adapted: Vec<AdaptedPair>,
    pub gates: Vec<GateState>,
    pub fused: Vec<Var>,
    /// `A_r^(1..5)`; level 1 aliases the fused map.
    pub refined: Vec<Var>,
    pub predictions: PredictionSet,
}

impl ForwardOutput {
    pub fn gates_at(&self, level: Level) -> &GateState {
        &self.gates[level.index()]
    }

    /// `A_r^(5)`.
    pub fn output_features(&self) -> Var {
        self.refined[Level::FINEST.index()]
    }

    /// `P_r^(5)`, the model output.
    pub fn output(&self) -> Var {
        self.predictions.at(Level::FINEST).refined
    }
}

#[derive(Debug, Clone)]
pub struct DualMapper<T: Scalar> {
    pub config: ModelConfig,
    pub image: Branch,
    pub traj: Branch,
    pub gfm: Vec<GfmLevel>,
    /// Levels 2..5.
    pub refine: Vec<RefineLevel>,
    pub predictors: Vec<Predictor>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> DualMapper<T> {
    pub fn new(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let w = config.widths;
        let image = Branch::new(&mut store, &mut rng, "image", IMAGE_CHANNELS, w);
        let traj = Branch::new(&mut store, &mut rng, "traj", TRAJ_CHANNELS, w);
        let gfm = Level::ALL.iter().map(|&l| GfmLevel::new(&mut store, &mut rng, l, w)).collect();
        let refine = Level::ALL[1..]
            .iter()
            .map(|&l| RefineLevel::new(&mut store, &mut rng, l, w).expect("level > 1"))
            .collect();
        let predictors = Level::ALL.iter().map(|&l| Predictor::new(&mut store, &mut rng, l, w)).collect();
        DualMapper {
            config,
            image,
            traj,
            gfm,
            refine,
            predictors,
            store,
        }
    }

    pub fn widths(&self) -> Widths {
        self.config.widths
    }

    pub fn gfm_at(&self, level: Level) -> &GfmLevel {
        &self.gfm[level.index()]
    }

    pub fn refine_at(&self, level: Level) -> Option<&RefineLevel> {
        level.coarser().map(|_| &self.refine[level.index() - 1])
    }

    pub fn predictor_at(&self, level: Level) -> &Predictor {
        &self.predictors[level.index()]
    }

    /// Zero the last block of every refinement residual so `A_r == A_f`.
    pub fn zero_residuals(&mut self) {
        for r in &self.refine {
            r.zero_residual(&mut self.store);
        }
    }

    /// Run both branches, fusion at all five levels, refinement at levels
    /// 2..5 and the shared predictors on all four streams.
    ///
    /// `image` is `[n, 3, h, w]`, `traj` is `[n, 1, h, w]`.
    pub fn forward_full(&mut self, g: &mut Graph<T>, image: &Tensor<T>, traj: &Tensor<T>, mode: Mode) -> Result<ForwardOutput> {
        let (is, ts) = (image.shape(), traj.shape());
        if is.n != ts.n || is.h != ts.h || is.w != ts.w {
            return Err(Error::shape("forward_full", format!("trajectory raster matching {is}"), ts));
        }
        let xi = g.input(image.clone());
        let xt = g.input(traj.clone());
        self.forward_vars(g, xi, xt, mode)
    }

    /// As [`forward_full`](Self::forward_full) on inputs already on the graph.
    pub fn forward_vars(&mut self, g: &mut Graph<T>, xi: Var, xt: Var, mode: Mode) -> Result<ForwardOutput> {
        let Self {
            image,
            traj,
            gfm,
            refine,
            predictors,
            store,
            ..
        } = self;
        let mut p = Pass::new(g, store, mode);
        let (_, fi) = image.forward(&mut p, xi)?;
        let (_, ft) = traj.forward(&mut p, xt)?;

        let mut adapted = Vec::with_capacity(5);
        let mut gates: Vec<GateState> = Vec::with_capacity(5);
        let mut fused = Vec::with_capacity(5);
        let mut refined: Vec<Var> = Vec::with_capacity(5);
        let mut levels = Vec::with_capacity(5);
        for level in Level::ALL {
            let prev = gates.last().map(|s| s.logits);
            let (pair, state, af) = gfm[level.index()].forward(&mut p, fi.at(level), ft.at(level), prev)?;
            let ar = match refined.last() {
                None => af,
                Some(&prev_r) => refine[level.index() - 1].refine(&mut p, af, prev_r)?,
            };
            let pred = &predictors[level.index()];
            levels.push(LevelPredictions {
                image: pred.predict(&mut p, pair.image)?,
                traj: pred.predict(&mut p, pair.traj)?,
                fused: pred.predict(&mut p, af)?,
                refined: pred.predict(&mut p, ar)?,
            });
            adapted.push(pair);
            gates.push(state);
            fused.push(af);
            refined.push(ar);
        }
        Ok(ForwardOutput {
            image_features: fi,
            traj_features: ft,
            adapted,
            gates,
            fused,
            refined,
            predictions: PredictionSet { levels },
        })
    }

    /// Eval-mode road probability `P_r^(5)` as `[n, 1, h, w]`.
    pub fn predict(&mut self, image: &Tensor<T>, traj: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.forward_full(&mut g, image, traj, Mode::Eval)?;
        Ok(g.value(out.output()).clone())
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into(&mut self.store)
    }
}

impl DualMapper<f32> {
    /// Rebuild a model from a checkpoint written by the trainer.
    pub fn from_checkpoint(stem: &Path) -> Result<(Self, Checkpoint)> {
        let ck = read_checkpoint(stem)?;
        let config: ModelConfig = serde_json::from_value(ck.manifest.meta["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = DualMapper::new(config);
        model.load_checkpoint(&ck)?;
        Ok((model, ck))
    }
}
