//! Collection-plan search: the episodic MDP over collection states and the
//! deep Q-learning agent that explores it.
//!
//! An episode grows a set of visited states. Adding a new state earns the
//! change in dataset reward; choosing an already visited state ends the
//! episode. Each episode starts with an empty set, positioned at the last
//! state of the previous episode, and the last episode's set is the plan.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{downsample, DspError};
use crate::envsim::{
    build_dataset, CollectionState, Distance, EnvError, Location, Modality, PreprocessedDataset, Provenance,
};
use crate::similarity::{cross_condition_matrices, reward_from_matrices, RewardBreakdown, SimilarityError, SimilarityMatrix};
use crate::tensor::{Graph, LayerSpec, Mode, Network, NamedTensor, Optimizer, OptimizerKind, Tensor, TensorError};

pub const LOCATIONS: usize = 8;

#[derive(Debug, Error)]
pub enum DqnError {
    #[error("episode already terminated")]
    TerminalEpisode,
    #[error("action ({location}, {modality}) outside {locations} x {modalities}")]
    InvalidAction {
        location: usize,
        modality: usize,
        locations: usize,
        modalities: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset does not cover the collection space: {0}")]
    Coverage(String),
    #[error("malformed plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DqnError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub episodes: usize,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_episodes: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync_episodes: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub updates_per_step: usize,
    pub obs_height: usize,
    pub obs_width: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            discount: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 60,
            replay_capacity: 500,
            batch_size: 16,
            target_sync_episodes: 10,
            max_steps: 16,
            learning_rate: 1e-3,
            updates_per_step: 12,
            obs_height: 120,
            obs_width: 160,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DqnError::Config(m.to_string()));
        if self.episodes == 0 {
            return bad("episodes must be positive");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("replay capacity must hold at least one batch");
        }
        if self.max_steps == 0 || self.target_sync_episodes == 0 {
            return bad("max_steps and target_sync_episodes must be positive");
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.obs_height < 8 || self.obs_width < 8 {
            return bad("observation must be at least 8x8");
        }
        Ok(())
    }

    /// Exploration rate for a 0-based episode. Decays linearly to
    /// `epsilon_end`; the final episode is played greedily.
    pub fn epsilon(&self, episode: usize) -> f64 {
        if episode + 1 >= self.episodes {
            return 0.0;
        }
        if self.epsilon_decay_episodes == 0 {
            return self.epsilon_end;
        }
        let t = (episode as f64 / self.epsilon_decay_episodes as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

/// `(location head index, modality head index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action {
    pub location: usize,
    pub modality: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationMode {
    /// Per-pixel mean over operating conditions.
    ConditionAverage,
    /// The sample of one operating condition.
    Condition(usize),
}

/// The collection space with cached observations and similarity matrices.
#[derive(Clone, Debug)]
pub struct CollectionEnv {
    modalities: Vec<Modality>,
    states: Vec<CollectionState>,
    data: PreprocessedDataset,
    averages: Vec<Tensor>,
    inputs: Vec<Tensor>,
    matrices: Vec<SimilarityMatrix>,
}

impl CollectionEnv {
    /// Builds the environment from a preprocessed dataset covering all eight
    /// locations for each modality it contains. Network inputs are the
    /// condition averages downsampled to `obs_height x obs_width`.
    pub fn from_dataset(data: PreprocessedDataset, obs_height: usize, obs_width: usize) -> Result<Self> {
        let mut modalities: Vec<Modality> = data.states.iter().map(|s| s.modality).collect();
        modalities.sort();
        modalities.dedup();
        let mut states = Vec::new();
        for loc in Location::all() {
            for &m in &modalities {
                states.push(loc.with(m));
            }
        }
        let order: Vec<usize> = states
            .iter()
            .map(|s| {
                data.states
                    .iter()
                    .position(|d| d == s)
                    .ok_or_else(|| DqnError::Coverage(format!("missing {}", s.id())))
            })
            .collect::<Result<_>>()?;
        if data.states.len() != states.len() {
            return Err(DqnError::Coverage("duplicate states".into()));
        }
        let all = cross_condition_matrices(&data)?;
        let matrices = order.iter().map(|&z| all[z].clone()).collect();
        let mut averages = Vec::with_capacity(states.len());
        let mut inputs = Vec::with_capacity(states.len());
        for &z in &order {
            let avg = condition_average(&data, z);
            inputs.push(downsample(&avg, obs_height, obs_width)?);
            averages.push(avg);
        }
        let data = PreprocessedDataset {
            states: order.iter().map(|&z| data.states[z]).collect(),
            shots: data.shots,
            tensors: order
                .iter()
                .flat_map(|&z| (0..data.conditions()).flat_map(move |c| (0..data.shots).map(move |s| (z, c, s))))
                .map(|(z, c, s)| data.get(z, c, s).clone())
                .collect(),
        };
        Ok(Self {
            modalities,
            states,
            data,
            averages,
            inputs,
            matrices,
        })
    }

    /// Virtual data for every state of the given modalities.
    pub fn generate(modalities: &[Modality], seed: u64, obs_height: usize, obs_width: usize) -> Result<Self> {
        if modalities.is_empty() {
            return Err(DqnError::Config("at least one modality".into()));
        }
        let states: Vec<CollectionState> = Location::all()
            .into_iter()
            .flat_map(|l| modalities.iter().map(move |&m| l.with(m)))
            .collect();
        let data = build_dataset(&states, Provenance::Virtual, 1, seed)?.preprocess()?;
        Self::from_dataset(data, obs_height, obs_width)
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn states(&self) -> &[CollectionState] {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn matrix(&self, state: usize) -> &SimilarityMatrix {
        &self.matrices[state]
    }

    pub fn state_index(&self, action: Action) -> Result<usize> {
        let m = self.modalities.len();
        if action.location >= LOCATIONS || action.modality >= m {
            return Err(DqnError::InvalidAction {
                location: action.location,
                modality: action.modality,
                locations: LOCATIONS,
                modalities: m,
            });
        }
        Ok(action.location * m + action.modality)
    }

    pub fn action_of(&self, state: usize) -> Action {
        let m = self.modalities.len();
        Action {
            location: state / m,
            modality: state % m,
        }
    }

    /// Full-resolution view of a state.
    pub fn observe(&self, state: usize, mode: ObservationMode) -> Tensor {
        match mode {
            ObservationMode::ConditionAverage => self.averages[state].clone(),
            ObservationMode::Condition(c) => self.data.get(state, c, 0).clone(),
        }
    }

    /// Reward of the dataset formed by `visited`; zero for the empty set.
    pub fn reward(&self, visited: &[usize]) -> Result<Option<RewardBreakdown>> {
        if visited.is_empty() {
            return Ok(None);
        }
        let mats: Vec<&SimilarityMatrix> = visited.iter().map(|&z| &self.matrices[z]).collect();
        Ok(Some(reward_from_matrices(&mats)?))
    }

    /// Applies `action` to `trace`.
    pub fn step(&self, trace: &mut EpisodeTrace, action: Action) -> Result<StepOutcome> {
        if trace.terminal {
            return Err(DqnError::TerminalEpisode);
        }
        let state = self.state_index(action)?;
        if trace.visited.contains(&state) {
            trace.terminal = true;
            return Ok(StepOutcome {
                delta: 0.0,
                terminal: true,
                revisit: true,
            });
        }
        let before = trace.total();
        trace.visited.push(state);
        let r = self.reward(&trace.visited)?.expect("non-empty");
        trace.rewards.push(r);
        Ok(StepOutcome {
            delta: r.total - before,
            terminal: false,
            revisit: false,
        })
    }

    /// Network input: the downsampled view of the most recently collected
    /// state (blank while the trace is empty) plus the trace context, one
    /// indicator per visited state and a final flag set while the trace is
    /// empty.
    pub fn observation(&self, position: usize, trace: &EpisodeTrace) -> Observation {
        let mut context = vec![0.0; self.num_states() + 1];
        for &z in &trace.visited {
            context[z] = 1.0;
        }
        let image = if trace.visited.is_empty() {
            context[self.num_states()] = 1.0;
            Tensor::zeros(self.inputs[position].shape().to_vec())
        } else {
            self.inputs[position].clone()
        };
        Observation { image, context }
    }
}

fn condition_average(data: &PreprocessedDataset, z: usize) -> Tensor {
    let first = data.get(z, 0, 0);
    let mut acc = vec![0.0f64; first.numel()];
    let count = (data.conditions() * data.shots) as f64;
    for c in 0..data.conditions() {
        for s in 0..data.shots {
            acc.iter_mut().zip(data.get(z, c, s).data()).for_each(|(a, &v)| *a += v as f64);
        }
    }
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| (v / count) as f32).collect())
        .expect("same shape")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    pub visited: Vec<usize>,
    pub rewards: Vec<RewardBreakdown>,
    pub terminal: bool,
}

impl EpisodeTrace {
    /// Total reward of the visited set so far.
    pub fn total(&self) -> f64 {
        self.rewards.last().map_or(0.0, |r| r.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub delta: f64,
    pub terminal: bool,
    pub revisit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Tensor,
    pub context: Vec<f32>,
}

/// Convolutional trunk over the view, then one linear layer over the
/// trunk features joined with the trace context. Outputs are the
/// eight location scores followed by one score per modality.
#[derive(Clone, Debug)]
pub struct QNetwork {
    trunk: Network,
    head: Network,
    modalities: usize,
    states: usize,
}

const TRUNK_CHANNELS: [usize; 6] = [3, 8, 16, 16, 16, 16];

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(modalities: usize, obs_height: usize, obs_width: usize, rng: &mut R) -> Result<Self> {
        let mut specs = Vec::new();
        for pair in TRUNK_CHANNELS.windows(2) {
            specs.push(LayerSpec::Conv2d {
                in_channels: pair[0],
                out_channels: pair[1],
                kernel: 3,
                stride: 2,
                padding: 1,
            });
            specs.push(LayerSpec::batch_norm(pair[1]));
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Flatten);
        let trunk = Network::new(specs, rng)?;
        let features = trunk.output_shape(&[1, 3, obs_height, obs_width])?[1];
        let states = LOCATIONS * modalities;
        let outputs = if modalities > 1 { LOCATIONS + modalities } else { LOCATIONS };
        let head = Network::new(
            vec![LayerSpec::Linear {
                in_features: features + states + 1,
                out_features: outputs,
            }],
            rng,
        )?;
        Ok(Self {
            trunk,
            head,
            modalities,
            states,
        })
    }

    pub fn outputs(&self) -> usize {
        if self.modalities > 1 {
            LOCATIONS + self.modalities
        } else {
            LOCATIONS
        }
    }

    fn batch(&self, obs: &[&Observation]) -> Result<(Tensor, Tensor)> {
        let images = Tensor::stack(&obs.iter().map(|o| o.image.clone()).collect::<Vec<_>>())?;
        let context: Vec<f32> = obs.iter().flat_map(|o| o.context.iter().copied()).collect();
        Ok((images, Tensor::new(vec![obs.len(), self.states + 1], context)?))
    }

    fn forward(&mut self, g: &mut Graph, obs: &[&Observation], mode: Mode) -> Result<(crate::tensor::Var, [crate::tensor::Binding; 2])> {
        let (images, context) = self.batch(obs)?;
        let x = g.constant(images);
        let v = g.constant(context);
        let (f, tb) = match mode {
            Mode::Train => self.trunk.forward(g, x, mode)?,
            Mode::Eval => self.trunk.forward_eval(g, x)?,
        };
        let joined = g.concat_cols(f, v)?;
        let (q, hb) = self.head.forward_eval(g, joined)?;
        Ok((q, [tb, hb]))
    }

    /// Raw scores `[N, outputs]` with batch-norm running statistics.
    pub fn q_values(&self, obs: &[&Observation]) -> Result<Tensor> {
        let (images, context) = self.batch(obs)?;
        let mut g = Graph::inference();
        let x = g.constant(images);
        let v = g.constant(context);
        let (f, _) = self.trunk.forward_eval(&mut g, x)?;
        let joined = g.concat_cols(f, v)?;
        let (q, _) = self.head.forward_eval(&mut g, joined)?;
        Ok(g.take_value(q))
    }

    /// Independent argmax of the softmax-activated location and modality
    /// heads.
    pub fn greedy(&self, obs: &Observation) -> Result<Action> {
        let q = self.q_values(&[obs])?;
        Ok(self.greedy_from_scores(q.data()))
    }

    fn greedy_from_scores(&self, row: &[f32]) -> Action {
        let location = argmax(&softmax(&row[..LOCATIONS]));
        let modality = if self.modalities > 1 {
            argmax(&softmax(&row[LOCATIONS..LOCATIONS + self.modalities]))
        } else {
            0
        };
        Action { location, modality }
    }

    /// State value: both heads estimate the greedy return, so their maxima
    /// are averaged.
    fn best_value(&self, row: &[f32]) -> f64 {
        let fold = |s: &[f32]| s.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let loc = fold(&row[..LOCATIONS]);
        if self.modalities > 1 {
            0.5 * (loc + fold(&row[LOCATIONS..LOCATIONS + self.modalities]))
        } else {
            loc
        }
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (prefix, net) in [("trunk", &self.trunk), ("head", &self.head)] {
            for mut t in net.named_tensors() {
                t.name = format!("{prefix}.{}", t.name);
                out.push(t);
            }
        }
        out
    }
}

pub fn softmax(row: &[f32]) -> Vec<f32> {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: f32 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice: a uniform random action with probability
/// `epsilon`, otherwise the greedy action.
pub fn select_action<R: Rng + ?Sized>(qnet: &QNetwork, obs: &Observation, epsilon: f64, rng: &mut R) -> Result<Action> {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(Action {
            location: rng.random_range(0..LOCATIONS),
            modality: rng.random_range(0..qnet.modalities),
        });
    }
    qnet.greedy(obs)
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub observation: Observation,
    pub action: Action,
    pub delta: f64,
    pub next: Observation,
    pub terminal: bool,
}

/// Bounded FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `batch` distinct transitions drawn uniformly, or `None` when too few
    /// are stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if self.items.len() < batch {
            return None;
        }
        Some(sample_indices(rng, self.items.len(), batch).into_iter().map(|i| &self.items[i]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub distance: Distance,
    pub angle: u16,
    pub modality: Modality,
}

impl PlanEntry {
    pub fn state(&self) -> CollectionState {
        CollectionState {
            distance: self.distance,
            angle: self.angle,
            modality: self.modality,
        }
    }
}

impl From<CollectionState> for PlanEntry {
    fn from(s: CollectionState) -> Self {
        Self {
            distance: s.distance,
            angle: s.angle,
            modality: s.modality,
        }
    }
}

/// The ordered states to collect, with the seed and reward that produced
/// them. Downstream training records the fingerprint of the weights it
/// produced from this plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionPlan {
    pub plan: Vec<PlanEntry>,
    pub seed: u64,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_fingerprint: Option<String>,
}

impl CollectionPlan {
    pub fn states(&self) -> Vec<CollectionState> {
        self.plan.iter().map(PlanEntry::state).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.plan.is_empty() {
            return Err(DqnError::Plan("empty plan".into()));
        }
        let states = self.states();
        for (i, s) in states.iter().enumerate() {
            if !crate::envsim::ANGLES.contains(&s.angle) {
                return Err(DqnError::Plan(format!("angle {} is not one of {:?}", s.angle, crate::envsim::ANGLES)));
            }
            if states[..i].contains(s) {
                return Err(DqnError::Plan(format!("{} listed twice", s.id())));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: Self =
            serde_json::from_str(&text).map_err(|e| DqnError::Plan(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DqnError::Plan(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

pub fn write_reward_csv(path: &Path, rewards: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "episode,total_reward")?;
    for (i, r) in rewards.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub plan: CollectionPlan,
    /// Total reward at the end of each episode.
    pub rewards: Vec<f64>,
    /// Mean temporal-difference loss of each episode's updates.
    pub losses: Vec<f64>,
    pub final_trace: EpisodeTrace,
    pub qnet: QNetwork,
}

/// Runs the episode loop and returns the last episode's trace as the plan.
pub fn train_dqn(env: &CollectionEnv, config: &DqnConfig, seed: u64) -> Result<TrainingOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modalities = env.modalities().len();
    let mut online = QNetwork::new(modalities, config.obs_height, config.obs_width, &mut rng)?;
    let expected = env.inputs[0].shape();
    if expected[1..] != [config.obs_height, config.obs_width] {
        return Err(DqnError::Config(format!(
            "environment observations are {:?}, config asks for {}x{}",
            &expected[1..],
            config.obs_height,
            config.obs_width
        )));
    }
    let mut target = online.clone();
    let mut optimizer = Optimizer::new(OptimizerKind::rmsprop(), config.learning_rate);
    let mut replay = ReplayBuffer::new(config.replay_capacity);
    let mut rewards = Vec::with_capacity(config.episodes);
    let mut losses = Vec::with_capacity(config.episodes);
    let mut position = rng.random_range(0..env.num_states());
    let mut trace = EpisodeTrace::default();
    for episode in 0..config.episodes {
        let epsilon = config.epsilon(episode);
        trace = EpisodeTrace::default();
        let mut obs = env.observation(position, &trace);
        let (mut loss_sum, mut updates) = (0.0, 0usize);
        loop {
            let action = select_action(&online, &obs, epsilon, &mut rng)?;
            let outcome = env.step(&mut trace, action)?;
            if trace.visited.len() >= config.max_steps {
                trace.terminal = true;
            }
            position = env.state_index(action)?;
            let next = env.observation(position, &trace);
            replay.push(Transition {
                observation: obs,
                action,
                delta: outcome.delta,
                next: next.clone(),
                terminal: trace.terminal,
            });
            for _ in 0..config.updates_per_step {
                if let Some(batch) = replay.sample(config.batch_size, &mut rng) {
                    loss_sum += td_update(&mut online, &target, &mut optimizer, &batch, config.discount)? as f64;
                    updates += 1;
                }
            }
            obs = next;
            if trace.terminal {
                break;
            }
        }
        rewards.push(trace.total());
        losses.push(if updates > 0 { loss_sum / updates as f64 } else { 0.0 });
        if (episode + 1) % config.target_sync_episodes == 0 {
            target = online.clone();
        }
    }
    let plan = CollectionPlan {
        plan: trace.visited.iter().map(|&z| env.states()[z].into()).collect(),
        seed,
        reward: trace.total(),
        weights_fingerprint: None,
    };
    Ok(TrainingOutcome {
        plan,
        rewards,
        losses,
        final_trace: trace,
        qnet: online,
    })
}

/// One replay step. Each head regresses the TD target on the samples whose
/// other component matches that head's partner greedy choice, so a head's
/// scores estimate the value of its action with the other head acting
/// greedily.
fn td_update(
    online: &mut QNetwork,
    target: &QNetwork,
    optimizer: &mut Optimizer,
    batch: &[&Transition],
    discount: f64,
) -> Result<f32> {
    let nexts: Vec<&Observation> = batch.iter().map(|t| &t.next).collect();
    let next_q = target.q_values(&nexts)?;
    let obs: Vec<&Observation> = batch.iter().map(|t| &t.observation).collect();
    let now_q = online.q_values(&obs)?;
    let outputs = online.outputs();
    let split = online.modalities > 1;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut goals = Vec::new();
    for (i, t) in batch.iter().enumerate() {
        let future = if t.terminal {
            0.0
        } else {
            online.best_value(&next_q.data()[i * outputs..(i + 1) * outputs])
        };
        let goal = (t.delta + discount * future) as f32;
        let greedy = online.greedy_from_scores(&now_q.data()[i * outputs..(i + 1) * outputs]);
        if t.action.modality == greedy.modality {
            rows.push(i);
            cols.push(vec![t.action.location]);
            goals.push(goal);
        }
        if split && t.action.location == greedy.location {
            rows.push(i);
            cols.push(vec![LOCATIONS + t.action.modality]);
            goals.push(goal);
        }
    }
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let (q, [tb, hb]) = online.forward(&mut g, &obs, Mode::Train)?;
    let chosen = g.select_rows(q, &rows)?;
    let picked = g.gather_sum(chosen, &cols)?;
    let loss = g.mse_loss(picked, &goals)?;
    g.backward(loss)?;
    online.trunk.absorb_grads(&g, &tb);
    online.head.absorb_grads(&g, &hb);
    let mut params = online.trunk.parameters_mut();
    params.extend(online.head.parameters_mut());
    optimizer.step(&mut params)?;
    online.trunk.zero_grad();
    online.head.zero_grad();
    Ok(g.value(loss).data()[0])
}
