//! Input-reconstruction attack against published context vectors.
//!
//! Threat model: an honest-but-curious party sees a context vector `c` that
//! some worker produced, and — because averaged encoder weights circulate
//! every batch loop — also holds that worker's encoder. It searches for an
//! input window `x̂` whose encoding matches: minimize
//! `d(x̂) = ‖E(x̂) − c‖²` by gradient descent on `x̂` itself.
//!
//! The defense story this module quantifies: encoders compress many input
//! values into few context dimensions, so the match `d ≈ 0` is reachable
//! from many starting points that decode to *different* windows. Success at
//! matching the context therefore does not mean recovering the input, and
//! the similarity score stays far from 100 unless the estimate lands on the
//! true window exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Encoder;
use crate::optim::AdamState;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;
use crate::topology::{NetId, WorkerId};

use rand::Rng;

/// Attack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Seed for the uniform `[0, 1)` initial estimate.
    pub seed: u64,
    /// Hard cap on gradient steps.
    pub max_iters: usize,
    /// Adam step size on the input estimate.
    pub learning_rate: f64,
    /// Stop once the best distance has not improved for this many steps.
    pub plateau_iters: usize,
    /// Improvement below this margin does not reset the plateau counter.
    pub min_improvement: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            seed: 0,
            max_iters: 20_000,
            learning_rate: 3e-4,
            plateau_iters: 1_000,
            min_improvement: 1e-12,
        }
    }
}

/// Outcome of one reconstruction attempt.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Best input estimate found (lowest context distance).
    pub estimate: Tensor,
    /// `‖E(x̂) − c‖²` at the best estimate.
    pub context_distance: f64,
    /// Gradient steps actually taken.
    pub iterations: usize,
    /// `true` when the plateau rule fired before the iteration cap.
    pub converged: bool,
    /// Downsampled `(iteration, best distance so far)` curve; always covers
    /// the first and last step taken. Non-increasing in the distance.
    pub trajectory: Vec<(u64, f64)>,
}

/// Points kept on the downsampled objective trajectory.
const TRAJECTORY_POINTS: usize = 64;

/// Euclidean distance between the true window and the estimate, the
/// attacker-side error `u = ‖x − x̂‖₂`.
pub fn input_distance(truth: &Tensor, estimate: &Tensor) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::ShapeMismatch {
            context: "privacy::input_distance",
            expected: truth.shape().to_vec(),
            got: estimate.shape().to_vec(),
        });
    }
    Ok(truth.sub(estimate)?.squared_norm().sqrt())
}

/// Similarity score `S = 100 / (1 + u)`: 100 means exact recovery, and the
/// score decays toward zero as the estimate drifts from the true window.
pub fn similarity_score(input_distance: f64) -> f64 {
    100.0 / (1.0 + input_distance)
}

/// Distance plus its similarity score for one feature column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub input_distance: f64,
    pub similarity: f64,
}

/// Column-wise attack scores: for each feature `j` of a `[rows, features]`
/// window, the Euclidean distance over that column alone and its similarity.
/// The whole-window distance decomposes as `u² = Σ_j u_j²`.
pub fn per_feature_scores(truth: &Tensor, estimate: &Tensor) -> Result<Vec<FeatureScore>> {
    if truth.shape() != estimate.shape() || truth.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "privacy::per_feature_scores",
            expected: truth.shape().to_vec(),
            got: estimate.shape().to_vec(),
        });
    }
    let (rows, cols) = (truth.shape()[0], truth.shape()[1]);
    let mut out = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut sq = 0.0;
        for r in 0..rows {
            let d = truth.get(r, j) - estimate.get(r, j);
            sq += d * d;
        }
        let u = sq.sqrt();
        out.push(FeatureScore {
            input_distance: u,
            similarity: similarity_score(u),
        });
    }
    Ok(out)
}

/// Search for a window whose encoding matches `observed_context`, starting
/// from a uniform `[0, 1)` estimate of shape `window_shape`.
///
/// The returned estimate is best-so-far monotone: more iterations can only
/// lower (never raise) the reported context distance.
pub fn reconstruct_input(
    encoder: &mut Encoder,
    observed_context: &Tensor,
    window_shape: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.max_iters == 0 {
        return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
    }
    if observed_context.len() != encoder.context_dim() {
        return Err(Error::ShapeMismatch {
            context: "privacy::reconstruct_input",
            expected: vec![encoder.context_dim()],
            got: observed_context.shape().to_vec(),
        });
    }
    let mut rng = seeded_rng(cfg.seed, "attack/init");
    let len: usize = window_shape.iter().product();
    let mut estimate = Tensor::from_vec(
        window_shape,
        (0..len).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let mut adam = AdamState::new(cfg.learning_rate);

    let mut best_distance = f64::INFINITY;
    let mut best_estimate = estimate.clone();
    let mut since_improvement = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;
    let stride = (cfg.max_iters / TRAJECTORY_POINTS).max(1);
    let mut trajectory: Vec<(u64, f64)> = Vec::new();

    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let encoded = encoder.encode(&estimate, NetId(0), WorkerId(0), it as u64)?;
        let diff = encoded.context.values.sub(observed_context)?;
        let distance = diff.squared_norm();
        if distance < best_distance - cfg.min_improvement {
            best_distance = distance;
            best_estimate = estimate.clone();
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.plateau_iters {
                converged = true;
                encoder.clear_cache();
                break;
            }
        }
        if it % stride == 0 {
            trajectory.push((iterations as u64, best_distance));
        }
        let d_input = encoder.backward_context(&diff.scale(2.0))?;
        // The attack optimizes the input only; drop the parameter gradients
        // the backward pass accumulated along the way.
        let _ = encoder.take_grads(0.0);
        adam.begin_step();
        adam.update("attack/input", &mut estimate, &d_input)?;
    }
    if trajectory.last().map(|&(i, _)| i) != Some(iterations as u64) {
        trajectory.push((iterations as u64, best_distance));
    }

    Ok(AttackResult {
        estimate: best_estimate,
        context_distance: best_distance,
        iterations,
        converged,
        trajectory,
    })
}

/// One attacked window: the reconstruction outcome plus input-space scores.
#[derive(Debug, Clone)]
pub struct WindowAttack {
    pub result: AttackResult,
    pub input_distance: f64,
    pub similarity: f64,
    /// Column-wise scores, one per feature of the window.
    pub per_feature: Vec<FeatureScore>,
}

/// Attack each `(window, context)` pair with a per-window seed and score the
/// estimates against the true windows.
pub fn attack_windows(
    encoder: &mut Encoder,
    pairs: &[(&Tensor, &Tensor)],
    cfg: &AttackConfig,
) -> Result<Vec<WindowAttack>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (window, context))| {
            let per_window = AttackConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let result = reconstruct_input(encoder, context, window.shape(), &per_window)?;
            let u = input_distance(window, &result.estimate)?;
            Ok(WindowAttack {
                input_distance: u,
                similarity: similarity_score(u),
                per_feature: per_feature_scores(window, &result.estimate)?,
                result,
            })
        })
        .collect()
}

/// Aggregated attack scores for one entity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityPrivacy {
    pub attacks: usize,
    pub mean_context_distance: f64,
    pub mean_input_distance: f64,
    pub mean_similarity: f64,
    pub max_similarity: f64,
    /// Mean per-column similarity across the attacked windows.
    pub mean_feature_similarity: Vec<f64>,
}

impl EntityPrivacy {
    pub fn from_attacks(attacks: &[WindowAttack]) -> Result<Self> {
        if attacks.is_empty() {
            return Err(Error::InvalidConfig(
                "cannot summarize zero attacks".into(),
            ));
        }
        let n = attacks.len() as f64;
        let cols = attacks[0].per_feature.len();
        let mut feature_sums = vec![0.0; cols];
        for attack in attacks {
            if attack.per_feature.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: "EntityPrivacy::from_attacks",
                    expected: vec![cols],
                    got: vec![attack.per_feature.len()],
                });
            }
            for (sum, score) in feature_sums.iter_mut().zip(&attack.per_feature) {
                *sum += score.similarity;
            }
        }
        Ok(EntityPrivacy {
            attacks: attacks.len(),
            mean_context_distance: attacks.iter().map(|a| a.result.context_distance).sum::<f64>()
                / n,
            mean_input_distance: attacks.iter().map(|a| a.input_distance).sum::<f64>() / n,
            mean_similarity: attacks.iter().map(|a| a.similarity).sum::<f64>() / n,
            max_similarity: attacks
                .iter()
                .map(|a| a.similarity)
                .fold(f64::NEG_INFINITY, f64::max),
            mean_feature_similarity: feature_sums.into_iter().map(|s| s / n).collect(),
        })
    }
}

/// Attack scores per entity, the shape the `attack` command reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub per_entity: BTreeMap<String, EntityPrivacy>,
}
