//! Run configuration: a flat key/value table shared by every command.

use serde::{Deserialize, Serialize};

use crate::decode::{SoftNmsMethod, SoftNmsParams};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::losses::LossWeights;
use crate::net::HeadKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub preset: String,
    /// `"24-48"` or `"16-32"`.
    pub base_range: String,
    pub head: HeadKind,
    pub num_classes: usize,
    pub seed: u64,

    // Model.
    pub width: usize,
    pub head_width: usize,

    // Training.
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub lr_drop_iter: usize,
    pub lr_drop_factor: f64,
    pub jitter_lo: f64,
    pub jitter_hi: f64,
    pub crop: usize,
    pub image_size: usize,
    pub n_obj_min: usize,
    pub n_obj_max: usize,
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub reg_weight: f64,
    pub off_weight: f64,

    // Inference.
    pub max_side: usize,
    pub k_centers: usize,
    pub k_corners: usize,
    pub match_tol: f64,
    pub flip: bool,
    pub soft_nms_sigma: f64,
    pub score_floor: f64,
    pub top_n: usize,

    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(HeadKind::Corners)
    }
}

impl RunConfig {
    /// Constants from the original training and inference recipe.
    pub fn paper(head: HeadKind) -> Self {
        Self {
            profile: "paper".into(),
            preset: "xnet19".into(),
            base_range: "24-48".into(),
            head,
            num_classes: 2,
            seed: 0,
            width: 32,
            head_width: 32,
            batch: 23,
            iters: 350_000,
            lr: 5e-5,
            lr_drop_iter: 250_000,
            lr_drop_factor: 0.1,
            jitter_lo: 0.6,
            jitter_hi: 1.5,
            crop: match head {
                HeadKind::Centers => 640,
                HeadKind::Corners => 512,
            },
            image_size: 640,
            n_obj_min: 1,
            n_obj_max: 3,
            aspect_lo: 1.0,
            aspect_hi: 4.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            reg_weight: 1.0,
            off_weight: 1.0,
            max_side: 900,
            k_centers: 100,
            k_corners: 50,
            match_tol: 0.3,
            flip: true,
            soft_nms_sigma: 0.5,
            score_floor: 0.001,
            top_n: 100,
            threads: 4,
        }
    }

    /// Small images and short schedules that fit a laptop CPU.
    pub fn desk(head: HeadKind) -> Self {
        Self {
            profile: "desk".into(),
            batch: 4,
            iters: 2000,
            lr: 1e-3,
            lr_drop_iter: 1600,
            jitter_lo: 0.9,
            jitter_hi: 1.1,
            crop: 128,
            image_size: 128,
            max_side: 128,
            ..Self::paper(head)
        }
    }

    pub fn profile(name: &str, head: HeadKind) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(head)),
            "paper" => Ok(Self::paper(head)),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }

    pub fn lattice_spec(&self) -> Result<LatticeSpec> {
        LatticeSpec::preset(&self.preset)?.with_base_range_preset(&self.base_range)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.focal_alpha,
            beta: self.focal_beta,
            reg: self.reg_weight,
            off: self.off_weight,
            smooth_l1_delta: 1.0,
        }
    }

    pub fn soft_nms(&self) -> SoftNmsParams {
        SoftNmsParams {
            sigma: self.soft_nms_sigma,
            score_floor: self.score_floor,
            method: SoftNmsMethod::Gaussian,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.lattice_spec()?.validate()?;
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.batch == 0 || self.width == 0 || self.head_width == 0 {
            return bad("batch and widths must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.jitter_lo > 0.0 && self.jitter_lo <= self.jitter_hi) {
            return bad(format!("jitter [{}, {}] is invalid", self.jitter_lo, self.jitter_hi));
        }
        if self.crop == 0 || self.image_size == 0 || self.max_side == 0 {
            return bad("crop, image_size and max_side must be positive".into());
        }
        if self.n_obj_min > self.n_obj_max {
            return bad("n_obj_min exceeds n_obj_max".into());
        }
        if !(1.0..=8.0).contains(&self.aspect_lo) || !(self.aspect_lo..=8.0).contains(&self.aspect_hi) {
            return bad(format!("aspect range [{}, {}] must lie in [1, 8]", self.aspect_lo, self.aspect_hi));
        }
        if !(self.match_tol > 0.0) || !(self.soft_nms_sigma > 0.0) || self.score_floor < 0.0 {
            return bad("match_tol and soft_nms_sigma must be positive, score_floor non-negative".into());
        }
        if self.top_n == 0 || self.k_centers == 0 || self.k_corners == 0 {
            return bad("top_n and k must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for head in [HeadKind::Centers, HeadKind::Corners] {
            RunConfig::desk(head).validate().unwrap();
            RunConfig::paper(head).validate().unwrap();
        }
        assert_eq!(RunConfig::paper(HeadKind::Centers).crop, 640);
        assert_eq!(RunConfig::paper(HeadKind::Corners).crop, 512);
        assert!(RunConfig::profile("huge", HeadKind::Centers).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig { preset: "xnet7".into(), ..Default::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { jitter_lo: 2.0, jitter_hi: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
