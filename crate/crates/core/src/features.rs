//! Frozen random-weight 3-stage CNN used as the perceptual-loss feature
//! space and as the feature extractor behind the Fréchet-distance
//! metric. Random but fixed features give a valid discrepancy measure;
//! nothing here is ever trained.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Conv2d, Conv2dVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LRELU_SLOPE: f32 = 0.2;

/// Output feature channels (also the Fréchet feature dimension).
pub const FEATURE_DIM: usize = 32;

#[derive(Clone)]
pub struct FeatureExtractor {
    convs: Vec<Conv2d>, // 3 -> 8 -> 16 -> 32, each stride 2
}

impl FeatureExtractor {
    pub fn init(seed: u64) -> FeatureExtractor {
        let mut rng = Rng::new(seed).stream("features");
        FeatureExtractor {
            convs: vec![
                Conv2d::init(3, 8, 4, 2, 1, &mut rng),
                Conv2d::init(8, 16, 4, 2, 1, &mut rng),
                Conv2d::init(16, FEATURE_DIM, 4, 2, 1, &mut rng),
            ],
        }
    }

    /// Differentiable path; the weights enter the graph as constants, so
    /// gradients flow to `x` but the extractor itself stays frozen.
    pub fn features_var(&self, g: &Graph, x: &Var) -> Result<Var> {
        let mut y = x.clone();
        for c in &self.convs {
            let cv = Conv2dVars {
                w: g.leaf(c.w.clone()),
                b: g.leaf(c.b.clone()),
                stride: c.stride,
                pad: c.pad,
            };
            y = cv.apply(&y)?.leaky_relu(LRELU_SLOPE);
        }
        Ok(y)
    }

    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.features_var(&g, &g.leaf(x.clone()))?.value())
    }

    /// Spatially pooled feature vector, length `FEATURE_DIM`.
    pub fn feature_vec(&self, x: &Tensor) -> Result<Vec<f32>> {
        let m = self.feature_map(x)?;
        let s = m.shape().to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = m.data();
        Ok((0..c)
            .map(|ch| d[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() as f32 / hw as f32)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_dependent() {
        let f1 = FeatureExtractor::init(7);
        let f2 = FeatureExtractor::init(7);
        let f3 = FeatureExtractor::init(8);
        let mut r = Rng::new(1).stream("x");
        let x = Tensor::randn(&[3, 16, 16], &mut r);
        let a = f1.feature_map(&x).unwrap();
        let b = f2.feature_map(&x).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = f3.feature_map(&x).unwrap();
        assert!(a.sub(&c).unwrap().max_abs() > 0.0);
        assert_eq!(f1.feature_vec(&x).unwrap().len(), FEATURE_DIM);
    }

    #[test]
    fn shapes_shrink_by_eight() {
        let f = FeatureExtractor::init(7);
        let mut r = Rng::new(2).stream("x");
        let x = Tensor::randn(&[3, 64, 64], &mut r);
        assert_eq!(f.feature_map(&x).unwrap().shape(), vec![32, 8, 8]);
    }
}
