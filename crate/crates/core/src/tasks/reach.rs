//! Goal reaching on the unit square around a circular obstacle. The expert
//! passes the obstacle above or below with equal probability, so the
//! demonstrations contain two homotopy classes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{CondBatch, ModelConfig, Variant};
use crate::tensor::Tensor;

/// Which side of the obstacle a path passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Above,
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachTask {
    pub obstacle_center: [f64; 2],
    /// 0 removes the obstacle and the expert drives straight to the goal.
    pub obstacle_radius: f64,
    /// Start region as `[x_lo, x_hi, y_lo, y_hi]`.
    pub start_region: [f64; 4],
    pub goal_region: [f64; 4],
    /// Vertical distance of the expert's waypoints from the obstacle centre.
    pub waypoint_offset: f64,
    /// Expert step length.
    pub speed: f64,
    pub success_radius: f64,
    pub max_steps: usize,
    /// Action horizon `H`.
    pub horizon: usize,
    /// Observation history `K`.
    pub history: usize,
}

impl Default for ReachTask {
    fn default() -> Self {
        Self {
            obstacle_center: [0.5, 0.5],
            obstacle_radius: 0.12,
            start_region: [0.05, 0.2, 0.3, 0.7],
            goal_region: [0.8, 0.95, 0.3, 0.7],
            waypoint_offset: 0.3,
            speed: 0.05,
            success_radius: 0.05,
            max_steps: 64,
            horizon: 4,
            history: 2,
        }
    }
}

/// One episode: start, goal and the side the expert takes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Episode {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub side: Side,
}

/// What a policy sees: the last `K` positions (oldest first) and the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachObservation {
    pub history: Vec<[f64; 2]>,
    pub goal: [f64; 2],
}

impl ReachObservation {
    pub fn position(&self) -> [f64; 2] {
        *self.history.last().expect("history is never empty")
    }
}

/// Outcome of one closed-loop episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub success: bool,
    pub collided: bool,
    pub path: Vec<[f64; 2]>,
}

/// Produces an action chunk (a list of displacements) for each active episode.
pub trait ChunkPolicy {
    /// `episodes[i]` indexes the batch passed to [`ReachTask::rollout_batch`].
    fn act(&mut self, episodes: &[usize], obs: &[ReachObservation]) -> Result<Vec<Vec<[f64; 2]>>>;
}

/// Expert policy for a fixed list of episodes.
pub struct ExpertPolicy<'a> {
    pub task: &'a ReachTask,
    pub episodes: &'a [Episode],
}

impl ChunkPolicy for ExpertPolicy<'_> {
    fn act(&mut self, idx: &[usize], obs: &[ReachObservation]) -> Result<Vec<Vec<[f64; 2]>>> {
        Ok(idx
            .iter()
            .zip(obs)
            .map(|(&i, o)| {
                let ep = self.episodes[i];
                let mut p = o.position();
                (0..self.task.horizon)
                    .map(|_| {
                        let d = self.task.expert_displacement(p, ep.goal, ep.side);
                        p = add(p, d);
                        d
                    })
                    .collect()
            })
            .collect())
    }
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from `c` to the segment `a`–`b`.
pub fn segment_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 { (((c[0] - a[0]) * ab[0] + (c[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist([a[0] + s * ab[0], a[1] + s * ab[1]], c)
}

impl ReachTask {
    pub fn validate(&self) -> Result<()> {
        let [cx, _] = self.obstacle_center;
        let r = self.obstacle_radius;
        if !(r >= 0.0) || !(self.speed > 0.0) || !(self.success_radius > 0.0) {
            return Err(invalid("obstacle radius must be ≥ 0, speed and success radius > 0"));
        }
        if self.max_steps == 0 || self.horizon == 0 || self.history == 0 {
            return Err(invalid("max_steps, horizon and history must be ≥ 1"));
        }
        for (name, reg) in [("start", self.start_region), ("goal", self.goal_region)] {
            let [x0, x1, y0, y1] = reg;
            if !(0.0 <= x0 && x0 <= x1 && x1 <= 1.0 && 0.0 <= y0 && y0 <= y1 && y1 <= 1.0) {
                return Err(invalid(format!("{name} region {reg:?} is not a box inside the unit square")));
            }
        }
        if r > 0.0 {
            if self.waypoint_offset <= r {
                return Err(invalid("waypoints must lie outside the obstacle"));
            }
            if self.start_region[1] >= cx - r || self.goal_region[0] <= cx + r {
                return Err(invalid("start region must lie left and goal region right of the obstacle"));
            }
            for side in [Side::Above, Side::Below] {
                let w = self.waypoint(side);
                for reg in [self.start_region, self.goal_region] {
                    for i in 0..=4 {
                        for j in 0..=4 {
                            let p = [
                                reg[0] + (reg[1] - reg[0]) * i as f64 / 4.0,
                                reg[2] + (reg[3] - reg[2]) * j as f64 / 4.0,
                            ];
                            if segment_distance(p, w, self.obstacle_center) <= r {
                                return Err(Error::Geometry(format!(
                                    "expert path through {w:?} from {p:?} hits the obstacle"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn waypoint(&self, side: Side) -> [f64; 2] {
        let [cx, cy] = self.obstacle_center;
        match side {
            Side::Above => [cx, cy + self.waypoint_offset],
            Side::Below => [cx, cy - self.waypoint_offset],
        }
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let mut draw = |reg: [f64; 4]| {
            [reg[0] + (reg[1] - reg[0]) * rng.random::<f64>(), reg[2] + (reg[3] - reg[2]) * rng.random::<f64>()]
        };
        let start = draw(self.start_region);
        let goal = draw(self.goal_region);
        let side = if rng.random::<bool>() { Side::Above } else { Side::Below };
        Episode { start, goal, side }
    }

    /// Next expert step from `pos`: toward the waypoint while left of it,
    /// then toward the goal, never overshooting either.
    pub fn expert_displacement(&self, pos: [f64; 2], goal: [f64; 2], side: Side) -> [f64; 2] {
        let w = self.waypoint(side);
        let target = if self.obstacle_radius > 0.0 && pos[0] < w[0] - 1e-9 { w } else { goal };
        let d = dist(pos, target);
        if d <= self.speed {
            return [target[0] - pos[0], target[1] - pos[1]];
        }
        let s = self.speed / d;
        [(target[0] - pos[0]) * s, (target[1] - pos[1]) * s]
    }

    /// Expert positions from the start up to and including the goal.
    pub fn expert_path(&self, ep: &Episode) -> Vec<[f64; 2]> {
        let mut path = vec![ep.start];
        let mut p = ep.start;
        while dist(p, ep.goal) > 1e-9 && path.len() < 4 * self.max_steps {
            p = add(p, self.expert_displacement(p, ep.goal, ep.side));
            path.push(p);
        }
        path
    }

    /// Observation at step `i` of `path` (earlier steps padded with the start).
    pub fn observe(&self, path: &[[f64; 2]], i: usize, goal: [f64; 2]) -> ReachObservation {
        let history = (0..self.history).map(|k| path[(i + k + 1).saturating_sub(self.history)]).collect();
        ReachObservation { history, goal }
    }

    /// Condition rows: obstacle-relative history, goal and absolute position.
    pub fn cond_batch(&self, obs: &[ReachObservation]) -> Result<CondBatch> {
        let n = obs.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let [cx, cy] = self.obstacle_center;
        let hist =
            obs.iter().flat_map(|o| o.history.iter().flat_map(|p| [(p[0] - cx) as f32, (p[1] - cy) as f32])).collect();
        let goal = obs.iter().flat_map(|o| o.goal.map(|x| x as f32)).collect();
        let pos = obs.iter().flat_map(|o| o.position().map(|x| x as f32)).collect();
        Ok(CondBatch {
            obs: Some(Tensor::new([n, 2 * self.history], hist)?),
            goal: Some(Tensor::new([n, 2], goal)?),
            proprio: Some(Tensor::new([n, 2], pos)?),
        })
    }

    /// Chunk of the next `H` expert displacements after step `i`, zero
    /// padded past the goal, flattened to `[H · 2]`.
    pub fn expert_chunk(&self, path: &[[f64; 2]], i: usize) -> Vec<f32> {
        (i..i + self.horizon)
            .flat_map(|k| {
                if k + 1 < path.len() {
                    [(path[k + 1][0] - path[k][0]) as f32, (path[k + 1][1] - path[k][1]) as f32]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect()
    }

    /// DiT-X configuration matching this task's observation layout.
    pub fn model_config(&self, token_dim: usize, depth: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::DitX,
            token_dim,
            depth,
            heads,
            action_horizon: self.horizon,
            action_dim: 2,
            obs_history: self.history,
            obs_dim: 2,
            goal_dim: 2,
            proprio_dim: 2,
            ..ModelConfig::default()
        }
    }

    /// Side of the obstacle on which `path` first crosses its vertical
    /// centre line.
    pub fn homotopy_class(&self, path: &[[f64; 2]]) -> Option<Side> {
        let [cx, cy] = self.obstacle_center;
        path.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            if (a[0] < cx) == (b[0] < cx) {
                return None;
            }
            let s = (cx - a[0]) / (b[0] - a[0]);
            let y = a[1] + s * (b[1] - a[1]);
            Some(if y >= cy { Side::Above } else { Side::Below })
        })
    }

    /// Runs all `episodes` in lockstep, re-planning every chunk.
    pub fn rollout_batch<P: ChunkPolicy + ?Sized>(&self, episodes: &[Episode], policy: &mut P) -> Result<Vec<Rollout>> {
        let mut out: Vec<Rollout> = episodes
            .iter()
            .map(|e| Rollout {
                success: dist(e.start, e.goal) <= self.success_radius,
                collided: false,
                path: vec![e.start],
            })
            .collect();
        let mut active: Vec<usize> = (0..episodes.len()).filter(|&i| !out[i].success).collect();
        let mut steps = 0;
        while !active.is_empty() && steps < self.max_steps {
            let obs: Vec<ReachObservation> =
                active.iter().map(|&i| self.observe(&out[i].path, out[i].path.len() - 1, episodes[i].goal)).collect();
            let chunks = policy.act(&active, &obs)?;
            if chunks.len() != active.len() {
                return Err(invalid("policy returned the wrong number of chunks"));
            }
            let budget = (self.max_steps - steps).min(self.horizon);
            let mut still = Vec::with_capacity(active.len());
            for (&i, chunk) in active.iter().zip(&chunks) {
                let r = &mut out[i];
                let mut done = false;
                for d in chunk.iter().take(budget) {
                    if !(d[0].is_finite() && d[1].is_finite()) {
                        return Err(Error::NonFinite(format!("action in episode {i}")));
                    }
                    let p = *r.path.last().expect("non-empty path");
                    let q = add(p, *d);
                    r.path.push(q);
                    if self.obstacle_radius > 0.0 && segment_distance(p, q, self.obstacle_center) < self.obstacle_radius
                    {
                        r.collided = true;
                        done = true;
                        break;
                    }
                    if dist(q, episodes[i].goal) <= self.success_radius {
                        r.success = true;
                        done = true;
                        break;
                    }
                }
                if !done {
                    still.push(i);
                }
            }
            steps += budget;
            active = still;
        }
        Ok(out)
    }
}
