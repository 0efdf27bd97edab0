//! Conversion of teacher predictions into pseudo labels.

use ndarray::Array2;

use crate::error::Result;
use crate::proposal::{joint_score_and_select, AnchorSet, ProposalGrid, ProposalTargets};
use crate::regression::RegressionPrediction;
use crate::temporal::TemporalSegment;

/// Teacher segment with the attention target it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPseudo {
    pub segment: TemporalSegment,
    pub attention_mask: Vec<bool>,
    /// Teacher attention mass inside the segment, used by the optional score filter.
    pub score: f64,
}

impl RegressionPseudo {
    /// Attention mask regenerated for a sequence of `len` steps.
    pub fn mask_for_len(&self, len: usize) -> Vec<bool> {
        self.segment.grid_mask(len)
    }
}

/// The teacher's segment kept verbatim; `a*_t = 1` on the grid steps inside it.
pub fn regression_pseudo(teacher: &RegressionPrediction, len: usize) -> RegressionPseudo {
    let attention_mask = teacher.segment.grid_mask(len);
    let score = if teacher.attention.len() == len {
        teacher
            .attention
            .iter()
            .zip(&attention_mask)
            .filter(|(_, &m)| m)
            .map(|(a, _)| a)
            .sum()
    } else {
        0.0
    };
    RegressionPseudo {
        segment: teacher.segment,
        attention_mask,
        score,
    }
}

/// Top teacher proposal with its anchor and boundary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalPseudo {
    pub segment: TemporalSegment,
    pub anchor_mask: Array2<bool>,
    pub boundary_mask: Vec<bool>,
    /// Joint score of the selected proposal.
    pub score: f64,
}

impl ProposalPseudo {
    /// Targets regenerated for a sequence of `len` steps.
    pub fn targets_for_len(&self, anchors: &AnchorSet, len: usize) -> ProposalTargets {
        ProposalTargets::pseudo(&self.segment, anchors, len)
    }

    pub fn targets(&self) -> ProposalTargets {
        ProposalTargets {
            anchors: self.anchor_mask.clone(),
            boundaries: self.boundary_mask.clone(),
        }
    }
}

/// Top-1 of joint scoring plus NMS; `c*` uses `iou >= 0.5` against it and
/// `b*` marks its grid-projected endpoints.
pub fn proposal_pseudo(grid: &ProposalGrid, anchors: &AnchorSet, nms_threshold: f64) -> Result<ProposalPseudo> {
    let top = joint_score_and_select(grid, anchors, nms_threshold, 1)?[0];
    let targets = ProposalTargets::pseudo(&top.segment, anchors, grid.len());
    Ok(ProposalPseudo {
        segment: top.segment,
        anchor_mask: targets.anchors,
        boundary_mask: targets.boundaries,
        score: top.score,
    })
}
