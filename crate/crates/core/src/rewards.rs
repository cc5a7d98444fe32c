//! Verifiable reward: log-smoothed ADE/FDE planning term plus a binary format
//! term.

use serde::{Deserialize, Serialize};

use crate::error::RewardError;
use crate::geometry::{Resolution, Trajectory};
use crate::parsing::{self, format_reward, FormatFailure, FormatVerdict};

/// Planning reward assigned to unparseable responses: the worst value a
/// parseable prediction can reach inside the unit square,
/// `-2 ln(1 + sqrt 2)`.
pub fn floor_penalty() -> f64 {
    -2.0 * (1.0 + std::f64::consts::SQRT_2).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateSpace {
    /// x / width, y / height before scoring.
    #[default]
    Normalized,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub space: CoordinateSpace,
    /// Treat an empty think block as a format failure.
    pub require_reasoning: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            space: CoordinateSpace::Normalized,
            require_reasoning: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_planning: f64,
    pub r_format: f64,
    pub r_total: f64,
    /// `None` when the response could not be parsed.
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub failure: Option<FormatFailure>,
}

fn check(pred: &Trajectory, gt: &Trajectory) -> Result<(), RewardError> {
    if pred.len() != gt.len() {
        return Err(RewardError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(RewardError::Empty);
    }
    Ok(())
}

/// Mean Euclidean waypoint error.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64, RewardError> {
    check(pred, gt)?;
    let total: f64 = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| p.distance(g))
        .sum();
    Ok(total / gt.len() as f64)
}

/// Euclidean error at the last waypoint.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64, RewardError> {
    check(pred, gt)?;
    let n = gt.len() - 1;
    Ok(pred.points()[n].distance(&gt.points()[n]))
}

/// `-ln(1 + ADE) - ln(1 + FDE)`.
pub fn planning_reward(pred: &Trajectory, gt: &Trajectory) -> Result<f64, RewardError> {
    Ok(planning_reward_from(ade(pred, gt)?, fde(pred, gt)?))
}

pub fn planning_reward_from(ade: f64, fde: f64) -> f64 {
    -ade.ln_1p() - fde.ln_1p()
}

/// Score a response against a pixel-space ground truth. Total: every input
/// text gets a finite reward.
pub fn total_reward(
    response: &str,
    gt: &Trajectory,
    resolution: Resolution,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let n = gt.len();
    let parsed = if cfg.require_reasoning {
        parsing::parse_response_requiring_reasoning(response, n)
    } else {
        parsing::parse_response(response, n)
    };
    let verdict = FormatVerdict::of(&parsed);
    let failed = |failure| RewardBreakdown {
        r_planning: floor_penalty(),
        r_format: 0.0,
        r_total: floor_penalty(),
        ade: None,
        fde: None,
        failure: Some(failure),
    };
    let parsed = match parsed {
        Ok(p) => p,
        Err(f) => return failed(f),
    };
    let (pred, gt) = match cfg.space {
        CoordinateSpace::Normalized => (
            parsed.trajectory.normalized(resolution.width, resolution.height),
            gt.normalized(resolution.width, resolution.height),
        ),
        CoordinateSpace::Pixel => (parsed.trajectory, gt.clone()),
    };
    // lengths agree: the parser enforced gt.len() points
    let (a, f) = match (ade(&pred, &gt), fde(&pred, &gt)) {
        (Ok(a), Ok(f)) => (a, f),
        _ => return failed(FormatFailure::WrongPointCount),
    };
    let r_format = format_reward(&verdict);
    let r_planning = planning_reward_from(a, f);
    RewardBreakdown {
        r_planning,
        r_format,
        r_total: r_format + r_planning,
        ade: Some(a),
        fde: Some(f),
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::parsing::serialize_response;

    fn line(n: usize) -> Trajectory {
        Trajectory::new((0..n).map(|i| Point2::new(0.2 + 0.01 * i as f64, 0.9 - 0.03 * i as f64)).collect())
    }

    fn offset(t: &Trajectory, dx: f64, dy: f64) -> Trajectory {
        Trajectory::new(t.points().iter().map(|p| p.translate(dx, dy)).collect())
    }

    #[test]
    fn identity_is_zero() {
        let t = line(20);
        assert_eq!(ade(&t, &t).unwrap(), 0.0);
        assert_eq!(fde(&t, &t).unwrap(), 0.0);
        assert_eq!(planning_reward(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset() {
        let t = line(20);
        let p = offset(&t, 0.1, 0.0);
        assert!((ade(&p, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!((planning_reward(&p, &t).unwrap() + 2.0 * 1.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn final_point_offset() {
        let t = line(20);
        let mut pts = t.points().to_vec();
        pts[19] = pts[19].translate(0.3, 0.4);
        let p = Trajectory::new(pts);
        assert!((fde(&p, &t).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unit_errors() {
        assert!((planning_reward_from(1.0, 1.0) + 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            ade(&line(3), &line(4)),
            Err(RewardError::LengthMismatch { pred: 3, gt: 4 })
        );
        assert!(fde(&line(0), &line(0)).is_err());
    }

    #[test]
    fn total_reward_cases() {
        let res = Resolution::new(640.0, 480.0);
        let gt = Trajectory::from_xy(&[(100.0, 400.0), (110.0, 380.0), (130.0, 350.0)]);
        let cfg = RewardConfig::default();

        let perfect = serialize_response("cones right", &gt).unwrap();
        let r = total_reward(&perfect, &gt, res, &cfg);
        assert_eq!(r.r_total, 1.0);

        let r = total_reward("no tags at all", &gt, res, &cfg);
        assert_eq!(r.r_format, 0.0);
        assert!((r.r_total - floor_penalty()).abs() < 1e-15);
        assert!((floor_penalty() + 1.762747174039086).abs() < 1e-12);

        // 0.1 of the width, in pixels
        let shifted = offset(&gt, 64.0, 0.0);
        let text = serialize_response("cones right", &shifted).unwrap();
        let r = total_reward(&text, &gt, res, &cfg);
        assert!((r.r_total - (1.0 - 2.0 * 1.1f64.ln())).abs() < 1e-9);
        assert!((r.r_total - 0.80938).abs() < 1e-5);
    }

    #[test]
    fn wrong_count_gets_floor() {
        let res = Resolution::new(640.0, 480.0);
        let gt = Trajectory::from_xy(&[(100.0, 400.0), (110.0, 380.0)]);
        let text = serialize_response("r", &Trajectory::from_xy(&[(1.0, 1.0)])).unwrap();
        let r = total_reward(&text, &gt, res, &RewardConfig::default());
        assert_eq!(r.failure, Some(FormatFailure::WrongPointCount));
        assert_eq!(r.r_planning, floor_penalty());
    }

    #[test]
    fn reasoning_requirement_toggle() {
        let res = Resolution::new(640.0, 480.0);
        let gt = Trajectory::from_xy(&[(100.0, 400.0), (110.0, 380.0)]);
        let text = serialize_response("", &gt).unwrap();
        let strict = total_reward(&text, &gt, res, &RewardConfig::default());
        assert_eq!(strict.failure, Some(FormatFailure::EmptyThink));
        let lax = RewardConfig {
            require_reasoning: false,
            ..RewardConfig::default()
        };
        assert_eq!(total_reward(&text, &gt, res, &lax).r_total, 1.0);
    }

    #[test]
    fn pixel_space() {
        let res = Resolution::new(640.0, 480.0);
        let gt = Trajectory::from_xy(&[(100.0, 400.0), (110.0, 380.0)]);
        let text = serialize_response("r", &offset(&gt, 3.0, 4.0)).unwrap();
        let cfg = RewardConfig {
            space: CoordinateSpace::Pixel,
            require_reasoning: true,
        };
        let r = total_reward(&text, &gt, res, &cfg);
        assert!((r.ade.unwrap() - 5.0).abs() < 1e-9);
        assert!((r.r_planning + 2.0 * 6f64.ln()).abs() < 1e-9);
    }
}
