use crate::env::EnvSpec;
use crate::Tensor;

/// One complete episode as collected from an environment.
///
/// `obs` and `state` hold `len + 1` entries (the last is the terminal
/// observation); per-step records hold `len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub len: usize,
    /// `[len + 1][n_agents * obs_dim]`
    pub obs: Vec<Vec<f64>>,
    /// `[len + 1][state_dim]`
    pub state: Vec<Vec<f64>>,
    /// `[len][n_agents]`
    pub actions: Vec<Vec<usize>>,
    pub reward: Vec<f64>,
    pub terminated: Vec<bool>,
    pub won: bool,
    /// Message noise used at each step (actor-critic rollouts only).
    pub noise: Vec<Vec<f64>>,
    /// Behaviour log-probability of each agent's action (actor-critic only).
    pub logp: Vec<Vec<f64>>,
}

impl Episode {
    pub fn episode_return(&self) -> f64 {
        self.reward.iter().sum()
    }
}

/// Episodes padded to a common length, row-major `[batch, time, agent, feature]`.
///
/// `mask[b, t]` is 1 for `t < len_b` and 0 afterwards; padded entries are
/// zero-filled when built from episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub batch: usize,
    /// Padded number of steps `T`; `obs`/`state` carry `T + 1` slots.
    pub steps: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub obs: Vec<f64>,
    pub state: Vec<f64>,
    pub actions: Vec<usize>,
    pub reward: Vec<f64>,
    pub terminated: Vec<f64>,
    pub mask: Vec<f64>,
    pub lengths: Vec<usize>,
    /// Width of the per-step noise record (0 when absent).
    pub noise_dim: usize,
    pub noise: Vec<f64>,
    pub logp: Vec<f64>,
}

impl EpisodeBatch {
    pub fn from_episodes(spec: &EnvSpec, episodes: &[&Episode]) -> Self {
        let b = episodes.len();
        let steps = episodes.iter().map(|e| e.len).max().unwrap_or(0);
        let (n, od, sd) = (spec.n_agents, spec.obs_dim, spec.state_dim);
        let noise_dim = episodes.iter().find_map(|e| e.noise.first().map(Vec::len)).unwrap_or(0);
        let mut out = EpisodeBatch {
            batch: b,
            steps,
            n_agents: n,
            n_actions: spec.n_actions,
            obs_dim: od,
            state_dim: sd,
            obs: vec![0.0; b * (steps + 1) * n * od],
            state: vec![0.0; b * (steps + 1) * sd],
            actions: vec![0; b * steps * n],
            reward: vec![0.0; b * steps],
            terminated: vec![0.0; b * steps],
            mask: vec![0.0; b * steps],
            lengths: episodes.iter().map(|e| e.len).collect(),
            noise_dim,
            noise: vec![0.0; b * steps * noise_dim],
            logp: vec![0.0; b * steps * n],
        };
        for (e, ep) in episodes.iter().enumerate() {
            for t in 0..=ep.len {
                let o = (e * (steps + 1) + t) * n * od;
                out.obs[o..o + n * od].copy_from_slice(&ep.obs[t]);
                let s = (e * (steps + 1) + t) * sd;
                out.state[s..s + sd].copy_from_slice(&ep.state[t]);
            }
            for t in 0..ep.len {
                let bt = e * steps + t;
                out.actions[bt * n..(bt + 1) * n].copy_from_slice(&ep.actions[t]);
                out.reward[bt] = ep.reward[t];
                out.terminated[bt] = if ep.terminated[t] { 1.0 } else { 0.0 };
                out.mask[bt] = 1.0;
                if noise_dim > 0 {
                    out.noise[bt * noise_dim..(bt + 1) * noise_dim].copy_from_slice(&ep.noise[t]);
                }
                if !ep.logp.is_empty() {
                    out.logp[bt * n..(bt + 1) * n].copy_from_slice(&ep.logp[t]);
                }
            }
        }
        out
    }

    pub fn local_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    /// Local-information rows `[batch * n_agents, local_dim]` at step `t`
    /// (`t <= steps`), agent-major within each episode.
    pub fn local_rows(&self, t: usize) -> Tensor {
        let (n, od, na) = (self.n_agents, self.obs_dim, self.n_actions);
        let ld = self.local_dim();
        let mut v = vec![0.0; self.batch * n * ld];
        for e in 0..self.batch {
            let o = (e * (self.steps + 1) + t) * n * od;
            for i in 0..n {
                let row = &mut v[(e * n + i) * ld..(e * n + i + 1) * ld];
                row[..od].copy_from_slice(&self.obs[o + i * od..o + (i + 1) * od]);
                if t > 0 {
                    let a = self.actions[(e * self.steps + t - 1) * n + i];
                    row[od + a] = 1.0;
                }
                row[od + na + i] = 1.0;
            }
        }
        Tensor::new(&[self.batch * n, ld], v).expect("shape")
    }

    /// Global states `[batch, state_dim]` at step `t` (`t <= steps`).
    pub fn state_rows(&self, t: usize) -> Tensor {
        let sd = self.state_dim;
        let mut v = Vec::with_capacity(self.batch * sd);
        for e in 0..self.batch {
            let s = (e * (self.steps + 1) + t) * sd;
            v.extend_from_slice(&self.state[s..s + sd]);
        }
        Tensor::new(&[self.batch, sd], v).expect("shape")
    }

    /// Actions at step `t < steps`, one per `[batch * n_agents]` row.
    pub fn action_rows(&self, t: usize) -> Vec<usize> {
        let n = self.n_agents;
        (0..self.batch).flat_map(|e| self.actions[(e * self.steps + t) * n..(e * self.steps + t + 1) * n].to_vec()).collect()
    }

    /// Per-episode values of a `[batch, steps]` field at step `t`.
    pub fn column(&self, field: &[f64], t: usize) -> Vec<f64> {
        (0..self.batch).map(|e| field[e * self.steps + t]).collect()
    }

    pub fn noise_rows(&self, t: usize) -> Vec<f64> {
        let d = self.noise_dim;
        (0..self.batch).flat_map(|e| self.noise[(e * self.steps + t) * d..(e * self.steps + t + 1) * d].to_vec()).collect()
    }

    pub fn logp_rows(&self, t: usize) -> Vec<f64> {
        let n = self.n_agents;
        (0..self.batch).flat_map(|e| self.logp[(e * self.steps + t) * n..(e * self.steps + t + 1) * n].to_vec()).collect()
    }

    pub fn valid_steps(&self) -> f64 {
        self.mask.iter().sum()
    }
}
