//! Gradient-based CAM weight schemes.
//!
//! Every scheme turns a feature tensor `A` (`F x S`) and the gradient of one
//! class logit with respect to it into weighted features `W^f = w^f * A^f`.
//! Signs are kept: negative contributions survive to the analysis stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::SampleRecord;
use crate::error::{IfaError, Result};

/// Below this absolute spatial sum an X-Grad CAM feature gets weight 0.
pub const XGRAD_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "grad-cam")]
    GradCam,
    #[serde(rename = "grad-cam++")]
    GradCamPlusPlus,
    #[serde(rename = "xgrad-cam")]
    XGradCam,
    #[serde(rename = "pixelwise-grad")]
    PixelwiseGrad,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::GradCam,
        Scheme::GradCamPlusPlus,
        Scheme::XGradCam,
        Scheme::PixelwiseGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::GradCam => "grad-cam",
            Scheme::GradCamPlusPlus => "grad-cam++",
            Scheme::XGradCam => "xgrad-cam",
            Scheme::PixelwiseGrad => "pixelwise-grad",
        }
    }

    /// Whether a global gradient rescale by `k > 0` rescales `W` by exactly `k`.
    pub fn is_homogeneous(self) -> bool {
        !matches!(self, Scheme::GradCamPlusPlus)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = IfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad-cam" | "grad_cam" => Ok(Scheme::GradCam),
            "grad-cam++" | "grad_cam_pp" => Ok(Scheme::GradCamPlusPlus),
            "xgrad-cam" | "xgrad_cam" => Ok(Scheme::XGradCam),
            "pixelwise-grad" | "pixelwise_grad" => Ok(Scheme::PixelwiseGrad),
            _ => Err(IfaError::InvalidArgument(format!(
                "unknown scheme {s:?} (expected grad-cam, grad-cam++, xgrad-cam or pixelwise-grad)"
            ))),
        }
    }
}

/// Which class's gradients drive the weighting for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSelection {
    /// A fixed class for every sample.
    Class(i32),
    /// Each labeled sample uses its own true class; unlabeled samples are skipped.
    TrueClass,
}

impl ClassSelection {
    /// The class to use for a sample with label `true_class`, if any.
    pub fn resolve(self, true_class: i32) -> Option<i32> {
        match self {
            ClassSelection::Class(c) => Some(c),
            ClassSelection::TrueClass if true_class >= 0 => Some(true_class),
            ClassSelection::TrueClass => None,
        }
    }
}

impl fmt::Display for ClassSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassSelection::Class(c) => write!(f, "{c}"),
            ClassSelection::TrueClass => f.write_str("true"),
        }
    }
}

impl FromStr for ClassSelection {
    type Err = IfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" | "gt" | "per-true-class" => Ok(ClassSelection::TrueClass),
            _ => s
                .parse::<i32>()
                .ok()
                .filter(|&c| c >= 0)
                .map(ClassSelection::Class)
                .ok_or_else(|| IfaError::InvalidArgument(format!("bad class selection {s:?}"))),
        }
    }
}

/// Weighted features of one sample for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFeatureStack {
    pub sample_id: u64,
    pub class_id: i32,
    pub scheme: Scheme,
    pub num_features: usize,
    pub dims: Vec<usize>,
    /// `F x S`, feature-major.
    pub maps: Vec<f64>,
    /// Features whose weight was forced to 0 by the X-Grad CAM zero-sum rule.
    pub degenerate_features: Vec<usize>,
}

impl WeightedFeatureStack {
    pub fn spatial_size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn map(&self, f: usize) -> &[f64] {
        let s = self.spatial_size();
        &self.maps[f * s..(f + 1) * s]
    }
}

/// Computes `W = w ⊙ A` for `num_features` planes laid out feature-major.
///
/// Returns the maps and the indices of features that hit the X-Grad CAM
/// zero-denominator rule.
pub fn weighted_features(
    scheme: Scheme,
    features: &[f32],
    grads: &[f32],
    num_features: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if num_features == 0 || !features.len().is_multiple_of(num_features) || features.len() != grads.len() {
        return Err(IfaError::Incompatible(format!(
            "features ({}) and gradients ({}) do not form {num_features} equal planes",
            features.len(),
            grads.len()
        )));
    }
    let s = features.len() / num_features;
    let mut maps = vec![0.0f64; features.len()];
    let mut degenerate = Vec::new();
    for f in 0..num_features {
        let a = &features[f * s..(f + 1) * s];
        let g = &grads[f * s..(f + 1) * s];
        let out = &mut maps[f * s..(f + 1) * s];
        match scheme {
            Scheme::PixelwiseGrad => {
                for ((o, &ai), &gi) in out.iter_mut().zip(a).zip(g) {
                    *o = gi as f64 * ai as f64;
                }
            }
            _ => {
                let w = match scheme {
                    Scheme::GradCam => g.iter().map(|&x| x as f64).sum::<f64>() / s as f64,
                    Scheme::GradCamPlusPlus => grad_cam_pp_weight(a, g),
                    Scheme::XGradCam => {
                        let sum_a: f64 = a.iter().map(|&x| x as f64).sum();
                        if sum_a.abs() < XGRAD_EPSILON {
                            degenerate.push(f);
                            0.0
                        } else {
                            a.iter().zip(g).map(|(&ai, &gi)| ai as f64 * gi as f64).sum::<f64>() / sum_a
                        }
                    }
                    Scheme::PixelwiseGrad => unreachable!(),
                };
                for (o, &ai) in out.iter_mut().zip(a) {
                    *o = w * ai as f64;
                }
            }
        }
    }
    Ok((maps, degenerate))
}

// alpha_ij = g_ij^2 / (2 g_ij^2 + sum_ab(A_ab) * g_ij^3), zero denominator -> 0
fn grad_cam_pp_weight(a: &[f32], g: &[f32]) -> f64 {
    let sum_a: f64 = a.iter().map(|&x| x as f64).sum();
    g.iter()
        .map(|&gi| {
            let gi = gi as f64;
            let g2 = gi * gi;
            let denom = 2.0 * g2 + sum_a * g2 * gi;
            let alpha = if denom == 0.0 { 0.0 } else { g2 / denom };
            alpha * gi.max(0.0)
        })
        .sum()
}

/// Weighted stack for `class_id` using the gradients stored in `rec`.
pub fn weighted_stack(rec: &SampleRecord, scheme: Scheme, class_id: i32) -> Result<WeightedFeatureStack> {
    let grads = rec.grads_for(class_id).ok_or_else(|| IfaError::MissingGradients {
        class_id,
        sample_ids: vec![rec.sample_id],
    })?;
    let (maps, degenerate_features) = weighted_features(scheme, &rec.features, grads, rec.num_features)?;
    Ok(WeightedFeatureStack {
        sample_id: rec.sample_id,
        class_id,
        scheme,
        num_features: rec.num_features,
        dims: rec.dims.clone(),
        maps,
        degenerate_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(scheme: Scheme, a: &[f32], g: &[f32]) -> Vec<f64> {
        weighted_features(scheme, a, g, 1).unwrap().0
    }

    #[test]
    fn grad_cam_uses_mean_gradient() {
        let a = [1.0, -2.0, 0.5, 4.0];
        let out = w(Scheme::GradCam, &a, &[1.0, 2.0, 3.0, 4.0]);
        let expected: Vec<f64> = a.iter().map(|&x| 2.5 * x as f64).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn pixelwise_is_elementwise() {
        let out = w(Scheme::PixelwiseGrad, &[2.0, 3.0, 4.0, 5.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(out, vec![2.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn xgrad_uniform_gradient_is_identity() {
        let out = w(Scheme::XGradCam, &[1.0, 3.0, 2.0, 2.0], &[1.0; 4]);
        assert_eq!(out, vec![1.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn xgrad_dead_channel_gets_zero_weight() {
        let (maps, degenerate) = weighted_features(Scheme::XGradCam, &[0.0; 8], &[1.0; 8], 2).unwrap();
        assert_eq!(maps, vec![0.0; 8]);
        assert_eq!(degenerate, vec![0, 1]);
    }

    #[test]
    fn grad_cam_pp_single_pixel() {
        // alpha = 9 / (18 + 2 * 27) = 0.125; w = 0.125 * 3; W = w * 2
        let out = w(Scheme::GradCamPlusPlus, &[2.0], &[3.0]);
        assert!((out[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn grad_cam_pp_zero_gradient_is_zero() {
        let out = w(Scheme::GradCamPlusPlus, &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(weighted_features(Scheme::GradCam, &[1.0; 4], &[1.0; 3], 1).is_err());
        assert!(weighted_features(Scheme::GradCam, &[1.0; 5], &[1.0; 5], 2).is_err());
    }

    #[test]
    fn parses_cli_names() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("score-cam".parse::<Scheme>().is_err());
    }

    fn planes() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
        (1usize..4, 1usize..10).prop_flat_map(|(f, s)| {
            (
                Just(f),
                Just(s),
                prop::collection::vec(-4.0f32..4.0, f * s),
                prop::collection::vec(-2.0f32..2.0, f * s),
            )
        })
    }

    proptest! {
        #[test]
        fn homogeneous_in_gradient_scale((f, _s, a, g) in planes(), k in 0.1f32..8.0) {
            let scaled: Vec<f32> = g.iter().map(|x| x * k).collect();
            for scheme in [Scheme::GradCam, Scheme::XGradCam, Scheme::PixelwiseGrad] {
                let base = weighted_features(scheme, &a, &g, f).unwrap().0;
                let up = weighted_features(scheme, &a, &scaled, f).unwrap().0;
                for (b, u) in base.iter().zip(&up) {
                    prop_assert!((u - k as f64 * b).abs() <= 1e-5 * (1.0 + b.abs() * k as f64));
                }
            }
        }

        #[test]
        fn uniform_gradient_collapses_schemes(
            (f, s, a, _g) in planes(),
            per_feature in prop::collection::vec(-2.0f32..2.0, 4),
        ) {
            // keep feature sums away from zero so X-Grad CAM is well defined
            let a: Vec<f32> = a.iter().map(|x| x.abs() + 0.1).collect();
            let g: Vec<f32> = (0..f * s).map(|i| per_feature[i / s]).collect();
            let gc = weighted_features(Scheme::GradCam, &a, &g, f).unwrap().0;
            let xg = weighted_features(Scheme::XGradCam, &a, &g, f).unwrap().0;
            let pw = weighted_features(Scheme::PixelwiseGrad, &a, &g, f).unwrap().0;
            for i in 0..gc.len() {
                prop_assert!((gc[i] - xg[i]).abs() <= 1e-6);
                prop_assert!((gc[i] - pw[i]).abs() <= 1e-6);
            }
        }

        #[test]
        fn grad_cam_pp_nonnegative_on_relu_features((f, _s, a, g) in planes()) {
            let a: Vec<f32> = a.iter().map(|x| x.max(0.0)).collect();
            let maps = weighted_features(Scheme::GradCamPlusPlus, &a, &g, f).unwrap().0;
            prop_assert!(maps.iter().all(|&v| v >= 0.0));
        }
    }
}
