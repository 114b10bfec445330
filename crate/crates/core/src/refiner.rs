//! Residual refinement decoder, shared per-level predictors and the soft
//! label pyramid used for dense supervision.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_input_dims, Level, LevelSpec, Widths};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv1x1, ConvBnRelu, Deconv2x2, Pass};
use crate::params::ParamStore;
use crate::tensor::{s, Scalar, Shape, Tensor};

/// Refinement block of level `i >= 2`:
/// `A_r = A_f + CBR(CBR(D2(A_r_prev) ++ A_f))`.
#[derive(Debug, Clone)]
pub struct RefineLevel {
    pub level: Level,
    pub deconv: Deconv2x2,
    pub convs: [ConvBnRelu; 2],
}

impl RefineLevel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, level: Level, widths: Widths) -> Result<Self> {
        let coarser = level
            .coarser()
            .ok_or_else(|| Error::Invalid("level 1 has no refinement block".into()))?;
        let c = widths.channels(level);
        let name = format!("refiner.l{level}");
        Ok(RefineLevel {
            level,
            deconv: Deconv2x2::new(store, rng, &format!("{name}.deconv"), widths.channels(coarser), c),
            convs: [
                ConvBnRelu::new(store, rng, &format!("{name}.conv1"), 2 * c, c),
                ConvBnRelu::new(store, rng, &format!("{name}.conv2"), c, c),
            ],
        })
    }

    /// The residual branch alone.
    pub fn residual<T: Scalar>(&self, p: &mut Pass<'_, T>, fused: Var, refined_prev: Var) -> Result<Var> {
        let (fs, rs) = (p.g.shape(fused), p.g.shape(refined_prev));
        if rs.h * 2 != fs.h || rs.w * 2 != fs.w || rs.c != self.deconv.cin || fs.c != self.deconv.cout {
            return Err(Error::shape("refine", format!("coarser map at half of {fs}"), rs));
        }
        let up = self.deconv.forward(p, refined_prev)?;
        let cat = p.g.concat(up, fused)?;
        let h = self.convs[0].forward(p, cat)?;
        self.convs[1].forward(p, h)
    }

    pub fn refine<T: Scalar>(&self, p: &mut Pass<'_, T>, fused: Var, refined_prev: Var) -> Result<Var> {
        let r = self.residual(p, fused, refined_prev)?;
        p.g.add(fused, r)
    }

    /// Force the residual branch to output exactly zero.
    pub fn zero_residual<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.convs[1].zero(store);
    }
}

/// Road index in the two-class softmax output.
pub const ROAD_CLASS: usize = 1;

/// 1x1 convolution to two classes followed by softmax; one instance per
/// level, shared by all four streams of that level.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub level: Level,
    pub conv: Conv1x1,
}

impl Predictor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, level: Level, widths: Widths) -> Self {
        Predictor {
            level,
            conv: Conv1x1::new(store, rng, &format!("predictor.l{level}"), widths.channels(level), 2),
        }
    }

    /// Road probability map `[n, 1, h, w]`.
    pub fn predict<T: Scalar>(&self, p: &mut Pass<'_, T>, features: Var) -> Result<Var> {
        let logits = self.conv.forward(p, features)?;
        let probs = p.g.softmax_channels(logits);
        p.g.channel(probs, ROAD_CLASS)
    }
}

/// The four supervised feature streams of a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Image,
    Traj,
    Fused,
    Refined,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Image, Stream::Traj, Stream::Fused, Stream::Refined];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Image => "image",
            Stream::Traj => "traj",
            Stream::Fused => "fused",
            Stream::Refined => "refined",
        }
    }
}

/// Probability maps of the four streams at one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelPredictions {
    pub image: Var,
    pub traj: Var,
    pub fused: Var,
    pub refined: Var,
}

impl LevelPredictions {
    pub fn get(&self, stream: Stream) -> Var {
        match stream {
            Stream::Image => self.image,
            Stream::Traj => self.traj,
            Stream::Fused => self.fused,
            Stream::Refined => self.refined,
        }
    }
}

/// Predictions for every level, coarsest first.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub levels: Vec<LevelPredictions>,
}

impl PredictionSet {
    pub fn at(&self, level: Level) -> &LevelPredictions {
        &self.levels[level.index()]
    }
}

/// Soft targets per level; level 5 is the binary label, each coarser level
/// is the 2x2 block mean of the finer one.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPyramid<T> {
    levels: Vec<Tensor<T>>,
}

impl<T: Scalar> LabelPyramid<T> {
    pub fn at(&self, level: Level) -> &Tensor<T> {
        &self.levels[level.index()]
    }
}

/// Build the label pyramid from a `[n, 1, h, w]` binary label.
pub fn build_label_pyramid<T: Scalar>(label: &Tensor<T>) -> Result<LabelPyramid<T>> {
    let ls = label.shape();
    if ls.c != 1 {
        return Err(Error::shape("build_label_pyramid", "one channel", ls));
    }
    check_input_dims(ls.h, ls.w)?;
    let mut levels = vec![label.clone()];
    let quarter: T = s(0.25);
    for _ in 0..4 {
        let fine = levels.last().expect("non-empty");
        let fs = fine.shape();
        let cs = Shape::new(fs.n, 1, fs.h / 2, fs.w / 2);
        let coarse = Tensor::from_fn(cs, |n, _, y, x| {
            let v = |dy: usize, dx: usize| fine.at(n, 0, 2 * y + dy, 2 * x + dx);
            ((v(0, 0) + v(0, 1)) + (v(1, 0) + v(1, 1))) * quarter
        });
        levels.push(coarse);
    }
    levels.reverse();
    Ok(LabelPyramid { levels })
}

/// Shape the refined output should have for a given input.
pub fn output_spec(h: usize, w: usize, widths: Widths) -> LevelSpec {
    LevelSpec::for_input(h, w, Level::FINEST, widths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn label_pyramid_of_ones_and_checkerboard() {
        let ones = Tensor::<f32>::full(Shape::new(1, 1, 32, 32), 1.0);
        let pyr = build_label_pyramid(&ones).unwrap();
        for l in Level::ALL {
            assert!(pyr.at(l).data().iter().all(|&v| v == 1.0));
        }
        assert_eq!(pyr.at(Level::new(1).unwrap()).shape(), Shape::new(1, 1, 2, 2));

        let checker = Tensor::<f32>::from_fn(Shape::new(1, 1, 16, 16), |_, _, y, x| ((y + x) % 2) as f32);
        let pyr = build_label_pyramid(&checker).unwrap();
        assert!(pyr.at(Level::new(4).unwrap()).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn label_pyramid_rejects_bad_dims() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 24, 32));
        assert!(build_label_pyramid(&t).is_err());
        let t = Tensor::<f32>::zeros(Shape::new(1, 2, 32, 32));
        assert!(build_label_pyramid(&t).is_err());
    }

    #[test]
    fn zero_predictor_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = Predictor::new(&mut store, &mut rng, Level::new(3).unwrap(), Widths::QUARTER);
        pred.conv.zero(&mut store);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(Shape::new(2, 16, 8, 8), |_, c, y, x| (c + y * x) as f64));
        let mut p = Pass::new(&mut g, &mut store, Mode::Eval);
        let out = pred.predict(&mut p, x).unwrap();
        assert_eq!(g.shape(out), Shape::new(2, 1, 8, 8));
        assert!(g.value(out).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_residual_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let level = Level::new(4).unwrap();
        let block = RefineLevel::new(&mut store, &mut rng, level, Widths::QUARTER).unwrap();
        block.zero_residual(&mut store);
        let mut g = Graph::new();
        let af = Tensor::from_fn(Shape::new(2, 8, 16, 16), |n, c, y, x| ((n * 7 + c * 3 + y * 5 + x) % 11) as f32 - 5.0);
        let f = g.input(af.clone());
        let prev = g.input(Tensor::full(Shape::new(2, 16, 8, 8), 0.3));
        for mode in [Mode::Train, Mode::Eval] {
            let mut p = Pass::new(&mut g, &mut store, mode);
            let r = block.refine(&mut p, f, prev).unwrap();
            assert_eq!(g.value(r), &af);
        }
    }

    #[test]
    fn level_one_has_no_refiner() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RefineLevel::new(&mut store, &mut rng, Level::new(1).unwrap(), Widths::QUARTER).is_err());
    }
}
