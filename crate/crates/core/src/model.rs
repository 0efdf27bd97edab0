//! Full grounding models: encoders, cross-modal interaction, task head and
//! contrastive projection heads over one parameter store.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::FeatureSequence;
use crate::encoders::{
    CoAttention, EncodedSequence, FuseSelfAttend, PaddedBatch, ProjectionHead, RecurrentKind,
    SentenceEncoder, SentenceEncoderKind, VideoEncoder,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::proposal::{
    joint_score_and_select, AnchorSet, ProposalGrid, ProposalHead, ProposalOutput,
};
use crate::regression::{RegressionHead, RegressionOutput, RegressionPrediction};
use crate::temporal::ScoredSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelType {
    Regression,
    Proposal,
}

impl ModelType {
    pub fn name(self) -> &'static str {
        match self {
            ModelType::Regression => "regression",
            ModelType::Proposal => "proposal",
        }
    }
}

impl fmt::Display for ModelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(ModelType::Regression),
            "proposal" => Ok(ModelType::Proposal),
            other => Err(Error::Config(format!(
                "unknown model type {other:?}, expected \"regression\" or \"proposal\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub model_type: ModelType,
    pub video_dim: usize,
    pub word_dim: usize,
    pub hidden: usize,
    pub projection_dim: usize,
    pub recurrent: RecurrentKind,
    pub sentence_encoder: SentenceEncoderKind,
    pub coattention_rounds: usize,
    pub anchors: AnchorSet,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("video_dim", self.video_dim),
            ("word_dim", self.word_dim),
            ("hidden", self.hidden),
            ("projection_dim", self.projection_dim),
            ("coattention_rounds", self.coattention_rounds),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden size {} must be even for the bidirectional layers",
                self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum TaskHead {
    Regression {
        coattention: CoAttention,
        head: RegressionHead,
    },
    Proposal {
        fusion: FuseSelfAttend,
        head: ProposalHead,
    },
}

#[derive(Debug, Clone, Copy)]
pub enum TaskOutput {
    Regression(RegressionOutput),
    Proposal(ProposalOutput),
}

/// Inference output of one query.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Regression(RegressionPrediction),
    Proposal(ProposalGrid),
}

impl TaskOutput {
    pub fn prediction(&self, g: &Graph) -> Prediction {
        match self {
            TaskOutput::Regression(o) => Prediction::Regression(o.prediction(g)),
            TaskOutput::Proposal(o) => Prediction::Proposal(o.grid(g)),
        }
    }
}

/// Architecture of a grounding model. Parameters live in a separate
/// [`ParamStore`], so teacher and student share one `GroundingModel`.
#[derive(Debug, Clone)]
pub struct GroundingModel {
    pub config: ModelConfig,
    video: VideoEncoder,
    sentence: SentenceEncoder,
    task: TaskHead,
    video_projection: ProjectionHead,
    sentence_projection: ProjectionHead,
}

/// Sequences per encoder call during inference.
const INFERENCE_BATCH: usize = 64;

impl GroundingModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let video = VideoEncoder::new(&mut store, config.video_dim, h, config.recurrent, &mut rng);
        let sentence = SentenceEncoder::new(
            &mut store,
            config.word_dim,
            h,
            config.sentence_encoder,
            config.recurrent,
            &mut rng,
        );
        let task = match config.model_type {
            ModelType::Regression => TaskHead::Regression {
                coattention: CoAttention::new(&mut store, h, config.coattention_rounds, &mut rng),
                head: RegressionHead::new(&mut store, h, &mut rng),
            },
            ModelType::Proposal => TaskHead::Proposal {
                fusion: FuseSelfAttend::new(&mut store, h, &mut rng),
                head: ProposalHead::new(&mut store, h, &config.anchors, &mut rng),
            },
        };
        let video_projection = ProjectionHead::new(&mut store, "contrast.video", h, config.projection_dim, &mut rng);
        let sentence_projection =
            ProjectionHead::new(&mut store, "contrast.sentence", h, config.projection_dim, &mut rng);
        Ok((
            Self {
                config,
                video,
                sentence,
                task,
                video_projection,
                sentence_projection,
            },
            store,
        ))
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.config.anchors
    }

    /// Encodes every sequence, batching sequences of equal length together.
    fn encode_grouped(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[&FeatureSequence],
        video: bool,
        inputs: Option<&mut Vec<Var>>,
    ) -> Result<Vec<EncodedSequence>> {
        let mut inputs = inputs;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            groups.entry(s.len()).or_default().push(i);
        }
        let mut out: Vec<Option<EncodedSequence>> = vec![None; seqs.len()];
        for indices in groups.values() {
            for chunk in indices.chunks(INFERENCE_BATCH) {
                let members: Vec<&FeatureSequence> = chunk.iter().map(|&i| seqs[i]).collect();
                let batch = PaddedBatch::new(&members)?;
                let encoded = if let Some(inputs) = inputs.as_deref_mut() {
                    let (x, encoded) = self.video.encode_tracked(g, store, &batch)?;
                    inputs.push(x);
                    encoded
                } else if video {
                    self.video.encode(g, store, &batch)?
                } else {
                    self.sentence.encode(g, store, &batch)?
                };
                for (b, &i) in chunk.iter().enumerate() {
                    out[i] = Some(encoded.sequence(g, b));
                }
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every sequence encoded")).collect())
    }

    pub fn encode_videos(&self, g: &mut Graph, store: &ParamStore, videos: &[&FeatureSequence]) -> Result<Vec<EncodedSequence>> {
        self.encode_grouped(g, store, videos, true, None)
    }

    /// Encodes videos with their features entered as differentiable inputs,
    /// returning one input handle per padded batch.
    pub fn encode_videos_tracked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&FeatureSequence],
    ) -> Result<(Vec<EncodedSequence>, Vec<Var>)> {
        let mut inputs = Vec::new();
        let encoded = self.encode_grouped(g, store, videos, true, Some(&mut inputs))?;
        Ok((encoded, inputs))
    }

    pub fn encode_sentences(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sentences: &[&FeatureSequence],
    ) -> Result<Vec<EncodedSequence>> {
        self.encode_grouped(g, store, sentences, false, None)
    }

    /// Cross-modal interaction followed by the task head.
    pub fn task_output(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: &EncodedSequence,
        sentence: &EncodedSequence,
    ) -> Result<TaskOutput> {
        Ok(match &self.task {
            TaskHead::Regression { coattention, head } => {
                let attended = coattention.attend(g, store, video, sentence)?;
                TaskOutput::Regression(head.predict(g, store, &attended))
            }
            TaskHead::Proposal { fusion, head } => {
                let fused = fusion.fuse(g, store, video, sentence)?;
                TaskOutput::Proposal(head.predict(g, store, &fused))
            }
        })
    }

    /// Unit-norm contrastive embedding of an encoded video, `1 x projection_dim`.
    pub fn video_embedding(&self, g: &mut Graph, store: &ParamStore, video: &EncodedSequence) -> Result<Var> {
        self.video_projection.pool_sequence(g, store, video)
    }

    /// Unit-norm contrastive embedding of an encoded sentence.
    pub fn sentence_embedding(&self, g: &mut Graph, store: &ParamStore, sentence: &EncodedSequence) -> Result<Var> {
        self.sentence_projection.pool_sequence(g, store, sentence)
    }

    /// Inference on video/sentence pairs.
    pub fn predict(
        &self,
        store: &ParamStore,
        pairs: &[(&FeatureSequence, &FeatureSequence)],
    ) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(INFERENCE_BATCH) {
            let mut g = Graph::new();
            let videos: Vec<&FeatureSequence> = chunk.iter().map(|p| p.0).collect();
            let sentences: Vec<&FeatureSequence> = chunk.iter().map(|p| p.1).collect();
            let v = self.encode_videos(&mut g, store, &videos)?;
            let s = self.encode_sentences(&mut g, store, &sentences)?;
            for (ve, se) in v.iter().zip(&s) {
                let task = self.task_output(&mut g, store, ve, se)?;
                out.push(task.prediction(&g));
            }
        }
        Ok(out)
    }

    /// Ranked segments for evaluation: the single regressed segment, or the
    /// NMS-filtered top proposals.
    pub fn rank(&self, prediction: &Prediction, nms_threshold: f64, top_n: usize) -> Result<Vec<ScoredSegment>> {
        match prediction {
            Prediction::Regression(p) => Ok(vec![ScoredSegment {
                segment: p.segment,
                score: 1.0,
            }]),
            Prediction::Proposal(grid) => joint_score_and_select(grid, self.anchors(), nms_threshold, top_n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};

    pub(crate) fn tiny_config(model_type: ModelType) -> ModelConfig {
        ModelConfig {
            model_type,
            video_dim: 8,
            word_dim: 6,
            hidden: 8,
            projection_dim: 8,
            recurrent: RecurrentKind::Bilstm,
            sentence_encoder: SentenceEncoderKind::Bilstm,
            coattention_rounds: 2,
            anchors: AnchorSet::standard(),
        }
    }

    #[test]
    fn model_type_parsing() {
        assert_eq!("proposal".parse::<ModelType>().unwrap(), ModelType::Proposal);
        assert!("ranking".parse::<ModelType>().is_err());
        assert_eq!(ModelType::Regression.to_string(), "regression");
    }

    #[test]
    fn odd_hidden_rejected() {
        let cfg = ModelConfig {
            hidden: 7,
            ..tiny_config(ModelType::Regression)
        };
        assert!(GroundingModel::new(cfg, 0).is_err());
    }

    #[test]
    fn batched_prediction_equals_single() {
        let ds = generate_synthetic(&SyntheticConfig::small()).unwrap();
        for mt in [ModelType::Regression, ModelType::Proposal] {
            let (model, store) = GroundingModel::new(tiny_config(mt), 3).unwrap();
            let mut pairs: Vec<(&FeatureSequence, &FeatureSequence)> =
                ds.samples.iter().map(|s| (&s.video, &s.sentence)).collect();
            let short = ds.samples[0].video.select_rows(&[0, 1, 2, 3, 4]);
            pairs.push((&short, &ds.samples[0].sentence));
            let all = model.predict(&store, &pairs).unwrap();
            for (i, p) in pairs.iter().enumerate() {
                let one = model.predict(&store, &[*p]).unwrap();
                match (&all[i], &one[0]) {
                    (Prediction::Regression(a), Prediction::Regression(b)) => {
                        assert!((a.segment.start() - b.segment.start()).abs() < 1e-12);
                        assert!((a.segment.end() - b.segment.end()).abs() < 1e-12);
                    }
                    (Prediction::Proposal(a), Prediction::Proposal(b)) => {
                        assert!((&a.c - &b.c).iter().all(|d| d.abs() < 1e-12));
                    }
                    _ => panic!("model type changed"),
                }
            }
            let ranked = model.rank(&all[0], 0.5, 5).unwrap();
            match mt {
                ModelType::Regression => assert_eq!(ranked.len(), 1),
                ModelType::Proposal => assert!(!ranked.is_empty() && ranked.len() <= 5),
            }
        }
    }
}
