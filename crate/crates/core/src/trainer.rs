//! Two-phase training: supervised pretraining of one model on labeled data,
//! then semi-supervised epochs in which a frozen teacher pseudo-labels the
//! unlabeled samples for a student that also optimizes contrastive losses.
//! The teacher is refreshed from the student at the end of every epoch.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::contrastive::paired_loss_graph;
use crate::dataset::{make_batches_with_ratio, Batch, Dataset, FeatureSequence, GroundingSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, MetricTable};
use crate::model::{GroundingModel, Prediction, TaskOutput};
use crate::params::{Adam, ParamStore};
use crate::perturb::{random_augment_pair, random_perturbation, PerturbConfig};
use crate::proposal::{compute_class_weights, proposal_task_graph, ProposalTargets};
use crate::pseudo::{proposal_pseudo, regression_pseudo, ProposalPseudo, RegressionPseudo};
use crate::regression::regression_task_graph;
use crate::temporal::TemporalSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Semi,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Semi => "semi",
        }
    }
}

/// Teacher and student parameters of one architecture.
#[derive(Debug, Clone)]
pub struct TeacherStudent {
    pub model: GroundingModel,
    pub teacher: ParamStore,
    pub student: ParamStore,
    pub optimizer: Adam,
}

impl TeacherStudent {
    pub fn new(config: &TrainConfig, video_dim: usize, word_dim: usize) -> Result<Self> {
        config.validate()?;
        let (model, store) = GroundingModel::new(config.model_config(video_dim, word_dim), config.seed)?;
        let optimizer = Adam::new(&store, config.learning_rate);
        Ok(Self {
            model,
            teacher: store.clone(),
            student: store,
            optimizer,
        })
    }
}

/// Training target of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    GroundTruth(TemporalSegment),
    Regression(RegressionPseudo),
    Proposal(ProposalPseudo),
}

impl Target {
    fn is_pseudo(&self) -> bool {
        !matches!(self, Target::GroundTruth(_))
    }
}

/// One sample as seen by the student. `video` is perturbed for unlabeled
/// samples when perturbations are enabled.
#[derive(Debug, Clone)]
pub struct StepItem {
    pub video: FeatureSequence,
    pub sentence: FeatureSequence,
    pub target: Option<Target>,
    pub labeled: bool,
}

/// Everything one optimizer step consumes.
#[derive(Debug, Clone, Default)]
pub struct StepPlan {
    pub items: Vec<StepItem>,
    /// Two augmented views of every video in the batch.
    pub intra_views: Vec<(FeatureSequence, FeatureSequence)>,
}

/// Which loss terms are active in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepToggles {
    pub use_pseudo: bool,
    pub use_perturb: bool,
    pub use_intra_cl: bool,
    pub use_inter_cl: bool,
}

impl StepToggles {
    pub const SUPERVISED: StepToggles = StepToggles {
        use_pseudo: false,
        use_perturb: false,
        use_intra_cl: false,
        use_inter_cl: false,
    };

    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            use_pseudo: config.use_pseudo,
            use_perturb: config.use_perturb,
            use_intra_cl: config.use_intra_cl,
            use_inter_cl: config.use_inter_cl,
        }
    }

    fn uses_unlabeled(self) -> bool {
        self.use_pseudo || self.use_intra_cl || self.use_inter_cl
    }
}

fn perturbed(video: &FeatureSequence, pc: &PerturbConfig, max_len: usize, rng: &mut ChaCha8Rng) -> Result<FeatureSequence> {
    let p = random_perturbation(video.len(), pc, rng);
    Ok(p.apply(video, pc.interpolate)?.limit_len(max_len))
}

/// Pseudo label of one teacher prediction, or `None` when it scores below
/// `min_score`.
pub fn pseudo_target(model: &GroundingModel, prediction: &Prediction, len: usize, config: &TrainConfig) -> Result<Option<Target>> {
    let (target, score) = match prediction {
        Prediction::Regression(p) => {
            let pseudo = regression_pseudo(p, len);
            let score = pseudo.score;
            (Target::Regression(pseudo), score)
        }
        Prediction::Proposal(grid) => {
            let pseudo = proposal_pseudo(grid, model.anchors(), config.nms_threshold)?;
            let score = pseudo.score;
            (Target::Proposal(pseudo), score)
        }
    };
    Ok((score >= config.pseudo_min_score).then_some(target))
}

/// Builds the inputs of one step. The teacher sees unperturbed unlabeled
/// videos; the student sees perturbed ones when enabled, and perturbed
/// labeled videos too under `perturb_labeled`.
pub fn plan_step(
    model: &GroundingModel,
    teacher: &ParamStore,
    batch: &Batch<'_>,
    config: &TrainConfig,
    toggles: StepToggles,
    rng: &mut ChaCha8Rng,
) -> Result<StepPlan> {
    let pc = config.perturb_config();
    let perturb_labeled = toggles.use_perturb && config.perturb_labeled;
    let mut items = Vec::with_capacity(batch.labeled.len() + batch.unlabeled.len());
    for s in &batch.labeled {
        let video = if perturb_labeled {
            perturbed(&s.video, &pc, config.max_len, rng)?
        } else {
            s.video.clone()
        };
        items.push(StepItem {
            video,
            sentence: s.sentence.clone(),
            target: Some(Target::GroundTruth(s.label.expect("labeled sample"))),
            labeled: true,
        });
    }
    let mut sources: Vec<&GroundingSample> = batch.labeled.clone();
    if toggles.uses_unlabeled() && !batch.unlabeled.is_empty() {
        let predictions = if toggles.use_pseudo {
            let pairs: Vec<(&FeatureSequence, &FeatureSequence)> =
                batch.unlabeled.iter().map(|s| (&s.video, &s.sentence)).collect();
            Some(model.predict(teacher, &pairs)?)
        } else {
            None
        };
        for (i, s) in batch.unlabeled.iter().enumerate() {
            let video = if toggles.use_perturb {
                perturbed(&s.video, &pc, config.max_len, rng)?
            } else {
                s.video.clone()
            };
            let target = match &predictions {
                Some(p) => pseudo_target(model, &p[i], s.video.len(), config)?,
                None => None,
            };
            items.push(StepItem {
                video,
                sentence: s.sentence.clone(),
                target,
                labeled: false,
            });
            sources.push(s);
        }
    }
    let mut intra_views = Vec::new();
    if toggles.use_intra_cl {
        for s in &sources {
            let (a, b) = random_augment_pair(&s.video, &pc, rng)?;
            intra_views.push((a.limit_len(config.max_len), b.limit_len(config.max_len)));
        }
    }
    Ok(StepPlan { items, intra_views })
}

/// Loss graph of one step.
#[derive(Debug)]
pub struct StepGraph {
    pub graph: Graph,
    pub task: Var,
    pub self_supervised: Var,
    pub all: Var,
    /// Differentiable inputs holding the unlabeled videos.
    pub unlabeled_inputs: Vec<Var>,
}

impl StepGraph {
    pub fn values(&self) -> (f64, f64, f64) {
        (
            self.graph.scalar(self.task),
            self.graph.scalar(self.self_supervised),
            self.graph.scalar(self.all),
        )
    }
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Var {
    match terms.split_first() {
        None => g.constant(ndarray::Array2::zeros((1, 1))),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| g.add(acc, t)),
    }
}

fn embeddings(
    model: &GroundingModel,
    g: &mut Graph,
    store: &ParamStore,
    encoded: &[crate::encoders::EncodedSequence],
    video: bool,
) -> Result<Var> {
    let rows = encoded
        .iter()
        .map(|e| {
            if video {
                model.video_embedding(g, store, e)
            } else {
                model.sentence_embedding(g, store, e)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat_rows(&rows))
}

/// `L_task = sum(labeled) + pseudo_weight * sum(pseudo)`,
/// `L_self = L_inter + L_intra`, `L_all = L_task + beta * L_self`.
pub fn build_step_graph(
    model: &GroundingModel,
    store: &ParamStore,
    plan: &StepPlan,
    config: &TrainConfig,
    toggles: StepToggles,
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let (labeled_idx, unlabeled_idx): (Vec<usize>, Vec<usize>) =
        (0..plan.items.len()).partition(|&i| plan.items[i].labeled);
    let mut videos = vec![None; plan.items.len()];
    let labeled_videos: Vec<&FeatureSequence> = labeled_idx.iter().map(|&i| &plan.items[i].video).collect();
    for (e, &i) in model.encode_videos(&mut g, store, &labeled_videos)?.into_iter().zip(&labeled_idx) {
        videos[i] = Some(e);
    }
    let unlabeled_videos: Vec<&FeatureSequence> = unlabeled_idx.iter().map(|&i| &plan.items[i].video).collect();
    let (encoded, unlabeled_inputs) = model.encode_videos_tracked(&mut g, store, &unlabeled_videos)?;
    for (e, &i) in encoded.into_iter().zip(&unlabeled_idx) {
        videos[i] = Some(e);
    }
    let videos: Vec<_> = videos.into_iter().map(|v| v.expect("every video encoded")).collect();
    let sentences: Vec<&FeatureSequence> = plan.items.iter().map(|it| &it.sentence).collect();
    let sentences = model.encode_sentences(&mut g, store, &sentences)?;

    let anchors = model.anchors();
    let mut proposal_targets: Vec<Option<ProposalTargets>> = plan
        .items
        .iter()
        .map(|it| {
            let len = it.video.len();
            match &it.target {
                Some(Target::GroundTruth(seg)) if config.model_type == crate::model::ModelType::Proposal => {
                    Some(ProposalTargets::ground_truth(seg, anchors, len))
                }
                Some(Target::Proposal(p)) => Some(p.targets_for_len(anchors, len)),
                _ => None,
            }
        })
        .collect();
    let weights = {
        let refs: Vec<&ProposalTargets> = proposal_targets.iter().flatten().collect();
        compute_class_weights(&refs, config.global_class_weights)
    };

    let mut labeled_terms = Vec::new();
    let mut pseudo_terms = Vec::new();
    for (i, item) in plan.items.iter().enumerate() {
        let Some(target) = &item.target else { continue };
        let len = item.video.len();
        let output = model.task_output(&mut g, store, &videos[i], &sentences[i])?;
        let loss = match (output, target) {
            (TaskOutput::Regression(out), Target::GroundTruth(seg)) => {
                regression_task_graph(&mut g, &out, seg, &seg.grid_mask(len), config.alpha_r)?
            }
            (TaskOutput::Regression(out), Target::Regression(p)) => {
                regression_task_graph(&mut g, &out, &p.segment, &p.mask_for_len(len), config.alpha_r)?
            }
            (TaskOutput::Proposal(out), Target::GroundTruth(_) | Target::Proposal(_)) => {
                let targets = proposal_targets[i].take().expect("proposal targets");
                proposal_task_graph(&mut g, &out, &targets, &weights, config.alpha_p)?
            }
            _ => return Err(Error::Precondition("target does not match the model type".into())),
        };
        if target.is_pseudo() {
            pseudo_terms.push(loss);
        } else {
            labeled_terms.push(loss);
        }
    }
    let labeled = sum_terms(&mut g, &labeled_terms);
    let pseudo = sum_terms(&mut g, &pseudo_terms);
    let task = if pseudo_terms.is_empty() {
        labeled
    } else {
        let pseudo = g.scale(pseudo, config.pseudo_weight);
        g.add(labeled, pseudo)
    };

    let mut self_terms = Vec::new();
    if toggles.use_inter_cl && plan.items.len() >= 2 {
        let v = embeddings(model, &mut g, store, &videos, true)?;
        let s = embeddings(model, &mut g, store, &sentences, false)?;
        self_terms.push(paired_loss_graph(&mut g, v, s, config.margin)?);
    }
    if toggles.use_intra_cl && plan.intra_views.len() >= 2 {
        let first: Vec<&FeatureSequence> = plan.intra_views.iter().map(|p| &p.0).collect();
        let second: Vec<&FeatureSequence> = plan.intra_views.iter().map(|p| &p.1).collect();
        let first = model.encode_videos(&mut g, store, &first)?;
        let second = model.encode_videos(&mut g, store, &second)?;
        let a = embeddings(model, &mut g, store, &first, true)?;
        let b = embeddings(model, &mut g, store, &second, true)?;
        self_terms.push(paired_loss_graph(&mut g, a, b, config.margin)?);
    }
    let self_supervised = sum_terms(&mut g, &self_terms);
    let all = if self_terms.is_empty() || config.beta == 0.0 {
        task
    } else {
        let weighted = g.scale(self_supervised, config.beta);
        g.add(task, weighted)
    };
    Ok(StepGraph {
        graph: g,
        task,
        self_supervised,
        all,
        unlabeled_inputs,
    })
}

/// Per-epoch record; losses are batch means.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub task: f64,
    pub self_supervised: f64,
    pub all: f64,
    pub validation: Option<MetricTable>,
}

/// Parameters of the best validation epoch.
#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub metrics: Option<MetricTable>,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TeacherStudent,
    pub history: Vec<EpochRecord>,
    pub best: BestCheckpoint,
}

fn mix(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one epoch of optimizer steps on the student. `epoch` is the global
/// 0-based epoch index and seeds batching and perturbations.
fn run_epoch(
    state: &mut TeacherStudent,
    data: &Dataset,
    fraction: f64,
    config: &TrainConfig,
    toggles: StepToggles,
    phase: Phase,
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let seed = mix(config.seed, epoch);
    let batches = make_batches_with_ratio(data, config.batch_size, fraction, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut sums = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for (b, batch) in batches.enumerate() {
        let plan = plan_step(&state.model, &state.teacher, &batch, config, toggles, &mut rng)?;
        let step = build_step_graph(&state.model, &state.student, &plan, config, toggles)?;
        let (task, self_supervised, all) = step.values();
        if !(task.is_finite() && self_supervised.is_finite() && all.is_finite()) {
            return Err(Error::Diverged(format!(
                "{} epoch {} batch {}: L_task = {task}, L_self = {self_supervised}, L_all = {all}",
                phase.name(),
                epoch + 1,
                b + 1
            )));
        }
        let grads = step.graph.backward(step.all).for_params(&step.graph, state.student.len());
        state.optimizer.step(&mut state.student, &grads);
        sums = (sums.0 + task, sums.1 + self_supervised, sums.2 + all);
        count += 1;
    }
    let n = count.max(1) as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// Drives both phases and keeps the best validation parameters.
struct Run<'a> {
    config: &'a TrainConfig,
    validation: Option<&'a Dataset>,
    history: Vec<EpochRecord>,
    best: Option<(f64, BestCheckpoint)>,
}

impl<'a> Run<'a> {
    fn new(config: &'a TrainConfig, validation: Option<&'a Dataset>) -> Self {
        Self {
            config,
            validation: validation.filter(|v| !v.is_empty()),
            history: Vec::new(),
            best: None,
        }
    }

    fn resume(config: &'a TrainConfig, validation: Option<&'a Dataset>, outcome: &TrainOutcome) -> Self {
        let best = (!outcome.history.is_empty()).then(|| {
            let score = outcome.best.metrics.as_ref().map_or(f64::NEG_INFINITY, MetricTable::primary);
            (score, outcome.best.clone())
        });
        Self {
            history: outcome.history.clone(),
            best,
            ..Self::new(config, validation)
        }
    }

    fn record(&mut self, state: &TeacherStudent, phase: Phase, losses: (f64, f64, f64)) -> Result<()> {
        let epoch = self.history.len() + 1;
        let validation = match self.validation {
            Some(v) => Some(evaluate_model(&state.model, &state.student, v, self.config.nms_threshold)?),
            None => None,
        };
        log::info!(
            "epoch {epoch} ({}): L_task {:.5} L_self {:.5} L_all {:.5}{}",
            phase.name(),
            losses.0,
            losses.1,
            losses.2,
            validation
                .as_ref()
                .map(|m| format!(" val R@1,IoU=0.5 {:.2}", m.primary()))
                .unwrap_or_default()
        );
        let score = validation.as_ref().map_or(f64::NEG_INFINITY, MetricTable::primary);
        let improves = match &self.best {
            None => true,
            Some((best, _)) => self.validation.is_none() || score > *best,
        };
        if improves {
            self.best = Some((
                score,
                BestCheckpoint {
                    epoch,
                    metrics: validation.clone(),
                    params: state.student.clone(),
                },
            ));
        }
        self.history.push(EpochRecord {
            epoch,
            phase,
            task: losses.0,
            self_supervised: losses.1,
            all: losses.2,
            validation,
        });
        Ok(())
    }

    fn pretrain(&mut self, state: &mut TeacherStudent, data: &Dataset) -> Result<()> {
        let labeled = data.labeled_subset();
        if labeled.is_empty() {
            return Err(Error::Precondition(
                "no labeled samples: supervised pretraining is impossible".into(),
            ));
        }
        for _ in 0..self.config.pretrain_epochs {
            let epoch = self.history.len();
            let losses = run_epoch(state, &labeled, 1.0, self.config, StepToggles::SUPERVISED, Phase::Pretrain, epoch)?;
            self.record(state, Phase::Pretrain, losses)?;
        }
        state.teacher.clone_from(&state.student);
        Ok(())
    }

    fn semi_epoch(&mut self, state: &mut TeacherStudent, data: &Dataset) -> Result<()> {
        let epoch = self.history.len();
        let toggles = StepToggles::from_config(self.config);
        let losses = run_epoch(state, data, self.config.labeled_fraction, self.config, toggles, Phase::Semi, epoch)?;
        state.teacher.blend_from(&state.student, self.config.teacher_ema_decay)?;
        self.record(state, Phase::Semi, losses)
    }

    fn finish(self, state: TeacherStudent) -> TrainOutcome {
        let best = match self.best {
            Some((_, best)) => best,
            None => BestCheckpoint {
                epoch: 0,
                metrics: None,
                params: state.student.clone(),
            },
        };
        TrainOutcome {
            state,
            history: self.history,
            best,
        }
    }
}

fn dims(data: &Dataset) -> Result<(usize, usize)> {
    let first = data
        .samples
        .first()
        .ok_or_else(|| Error::Precondition("empty training set".into()))?;
    Ok((first.video.dim(), first.sentence.dim()))
}

/// Supervised pretraining on the labeled part of `data`; afterwards teacher
/// and student hold the same parameters.
pub fn pretrain(config: &TrainConfig, data: &Dataset, validation: Option<&Dataset>) -> Result<TrainOutcome> {
    let (vd, wd) = dims(data)?;
    let mut state = TeacherStudent::new(config, vd, wd)?;
    let mut run = Run::new(config, validation);
    run.pretrain(&mut state, data)?;
    Ok(run.finish(state))
}

/// One semi-supervised epoch on `data` followed by the teacher update.
/// `epoch` is the global 0-based epoch index.
pub fn semi_supervised_epoch(state: &mut TeacherStudent, config: &TrainConfig, data: &Dataset, epoch: usize) -> Result<(f64, f64, f64)> {
    let toggles = StepToggles::from_config(config);
    let losses = run_epoch(state, data, config.labeled_fraction, config, toggles, Phase::Semi, epoch)?;
    state.teacher.blend_from(&state.student, config.teacher_ema_decay)?;
    Ok(losses)
}

/// Pretraining followed by `semi_epochs` semi-supervised epochs, with
/// validation after every epoch.
pub fn train(config: &TrainConfig, data: &Dataset, validation: Option<&Dataset>) -> Result<TrainOutcome> {
    let fraction = data.labeled_fraction();
    if (fraction - config.labeled_fraction).abs() > 0.05 {
        log::warn!(
            "training data is {:.1}% labeled but labeled_fraction is {}",
            100.0 * fraction,
            config.labeled_fraction
        );
    }
    let pretrained = pretrain(config, data, validation)?;
    continue_training(&pretrained, config, data, validation)
}

/// Runs the `semi_epochs` semi-supervised epochs on top of a [`pretrain`]
/// outcome. Pretraining ignores every semi-phase setting, so one outcome can
/// seed several runs that differ only in those settings; the result equals
/// [`train`] with `config`.
pub fn continue_training(
    pretrained: &TrainOutcome,
    config: &TrainConfig,
    data: &Dataset,
    validation: Option<&Dataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = pretrained.state.clone();
    let mut run = Run::resume(config, validation, pretrained);
    for _ in 0..config.semi_epochs {
        run.semi_epoch(&mut state, data)?;
    }
    Ok(run.finish(state))
}

pub const LOSS_CSV_HEADER: &str = "epoch,phase,task,self,all";

/// `epoch,phase,task,self,all`, one line per epoch.
pub fn losses_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.phase.name(), r.task, r.self_supervised, r.all);
    }
    s
}

/// `epoch,phase` followed by one `rN_iouM` column per grid cell; empty
/// cells when no validation set was given.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let names: Vec<String> = MetricTable { values: [[0.0; 4]; 2] }
        .entries()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut s = format!("epoch,phase,{}\n", names.join(","));
    for r in history {
        let cells: Vec<String> = match &r.validation {
            Some(m) => m.entries().into_iter().map(|(_, v)| format!("{v:.4}")).collect(),
            None => vec![String::new(); names.len()],
        };
        let _ = writeln!(s, "{},{},{}", r.epoch, r.phase.name(), cells.join(","));
    }
    s
}
