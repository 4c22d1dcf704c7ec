//! Hybrid discrete/continuous PPO.
//!
//! A tanh trunk feeds two policy heads: per-beam categorical logits over the
//! satellite's coverage set, and per-beam Gaussian power means (with a
//! state-independent, bounded log-std vector). The critic either owns its own
//! MLP or sits on the trunk features. Power samples `x` live on `[-1, 1]`
//! nominally and map affinely onto `[P_min, P_max]`; the environment clamps.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::PpoConfig;
use crate::env::{decode_action, raw_state, Env, HybridAction, Scheduler, StateEncoder};
use crate::neuralnet::{
    clip_grad_norm, decode_le_hex, encode_le_hex, log_softmax, softmax_in_place, Activation,
    AdamRecord, AdamState, DenseNet, ForwardCache, NetRecord, CHECKPOINT_VERSION,
};
use crate::scenario::Scenario;
use crate::{Error, Result, Scalar};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoHyper {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub episodes: usize,
    pub buffer_capacity: usize,
    pub entropy_coeff: f64,
    pub max_grad_norm: Option<f64>,
    pub value_coeff: f64,
}

impl PpoHyper {
    pub fn from_config(c: &PpoConfig) -> Result<Self> {
        let h = Self {
            gamma: c.gamma,
            gae_lambda: c.gae_lambda,
            clip_eps: c.clip_eps,
            lr_policy: c.lr_policy,
            lr_critic: c.lr_critic,
            minibatch: c.minibatch,
            epochs: c.epochs,
            episodes: c.episodes,
            buffer_capacity: c.buffer_capacity,
            entropy_coeff: c.entropy_coeff,
            max_grad_norm: c.max_grad_norm,
            value_coeff: c.value_coeff,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Schema(format!("ppo: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.minibatch == 0 || self.minibatch > self.buffer_capacity {
            return bad("minibatch must be in 1..=buffer_capacity");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr_policy > 0.0 && self.lr_critic > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// Head outputs for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput<T> {
    /// Concatenated logits, one group of |V_i| per (satellite i, beam k).
    pub discrete_logits: Vec<T>,
    pub group_sizes: Vec<usize>,
    pub power_mean: Vec<T>,
    pub power_logstd: Vec<T>,
    pub value: T,
}

impl<T: Scalar> PolicyOutput<T> {
    fn group_offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.group_sizes.iter().scan(0, |off, &n| {
            let start = *off;
            *off += n;
            Some((start, n))
        })
    }

    /// Softmax probabilities, group by group.
    pub fn probs(&self) -> Vec<T> {
        let mut p = self.discrete_logits.clone();
        for (s, n) in self.group_offsets().collect::<Vec<_>>() {
            softmax_in_place(&mut p[s..s + n]);
        }
        p
    }

    /// Joint log-probability of `picks` (one in-group index per group) and
    /// of the Gaussian sample `x`.
    pub fn log_prob(&self, picks: &[usize], x: &[T]) -> (T, T) {
        let mut lp_d = T::zero();
        for ((s, n), &k) in self.group_offsets().zip(picks) {
            lp_d += log_softmax(&self.discrete_logits[s..s + n])[k];
        }
        let lp_c = x
            .iter()
            .zip(&self.power_mean)
            .zip(&self.power_logstd)
            .map(|((&x, &m), &ls)| gaussian_log_density(x, m, ls))
            .sum();
        (lp_d, lp_c)
    }

    /// S_d summed over groups, S_c summed over power entries.
    pub fn entropy(&self) -> (T, T) {
        let p = self.probs();
        let s_d = self
            .group_offsets()
            .map(|(s, n)| categorical_entropy(&p[s..s + n]))
            .sum();
        let s_c = self.power_logstd.iter().map(|&ls| gaussian_entropy(ls)).sum();
        (s_d, s_c)
    }
}

pub fn gaussian_log_density<T: Scalar>(x: T, mean: T, log_std: T) -> T {
    let z = (x - mean) / log_std.exp();
    -T::lit(0.5) * z * z - log_std - T::lit(HALF_LN_2PI)
}

/// Differential entropy of N(mu, sigma^2): 1/2 + 1/2 ln(2 pi sigma^2).
pub fn gaussian_entropy<T: Scalar>(log_std: T) -> T {
    T::lit(0.5 + HALF_LN_2PI) + log_std
}

pub fn categorical_entropy<T: Scalar>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| v * v.ln())
        .sum::<T>()
}

/// One drawn hybrid action in the agent's own coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction<T> {
    /// In-group index per (satellite, beam) group.
    pub picks: Vec<usize>,
    /// Pre-clamp Gaussian power samples.
    pub x: Vec<T>,
    pub logp_d: T,
    pub logp_c: T,
}

/// One categorical draw per group and one Gaussian draw per power entry.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(po: &PolicyOutput<T>, rng: &mut R) -> SampledAction<T> {
    let p = po.probs();
    let mut picks = Vec::with_capacity(po.group_sizes.len());
    for (s, n) in po.group_offsets() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = n - 1;
        for k in 0..n {
            acc += p[s + k].as_f64();
            if u < acc {
                pick = k;
                break;
            }
        }
        picks.push(pick);
    }
    let x: Vec<T> = po
        .power_mean
        .iter()
        .zip(&po.power_logstd)
        .map(|(&m, &ls)| m + ls.exp() * T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let (logp_d, logp_c) = po.log_prob(&picks, &x);
    SampledAction { picks, x, logp_d, logp_c }
}

/// Mode of every group and the Gaussian means.
pub fn greedy_action<T: Scalar>(po: &PolicyOutput<T>) -> SampledAction<T> {
    let picks = po
        .group_offsets()
        .map(|(s, n)| {
            let g = &po.discrete_logits[s..s + n];
            (0..n).fold(0, |best, k| if g[k] > g[best] { k } else { best })
        })
        .collect::<Vec<_>>();
    let x = po.power_mean.clone();
    let (logp_d, logp_c) = po.log_prob(&picks, &x);
    SampledAction { picks, x, logp_d, logp_c }
}

/// Generalised advantage estimation by backward recursion. `values` carries
/// one trailing bootstrap entry; a `done` at t cuts both the bootstrap and
/// the recursion.
pub fn gae<T: Scalar>(rewards: &[T], values: &[T], dones: &[bool], gamma: T, lambda: T) -> Result<Vec<T>> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::Length(format!(
            "gae: {n} rewards need {} values and {n} dones, got {} and {}",
            n + 1,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![T::zero(); n];
    let mut next = T::zero();
    for t in (0..n).rev() {
        let live = if dones[t] { T::zero() } else { T::one() };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    Ok(adv)
}

/// Shift to zero mean and scale to unit (population) variance in place.
pub fn normalize_advantages<T: Scalar>(adv: &mut [T]) {
    if adv.is_empty() {
        return;
    }
    let n = T::lit(adv.len() as f64);
    let mean = adv.iter().copied().sum::<T>() / n;
    adv.iter_mut().for_each(|a| *a -= mean);
    let var = adv.iter().map(|&a| a * a).sum::<T>() / n;
    if var > T::zero() {
        let sd = var.sqrt();
        adv.iter_mut().for_each(|a| *a /= sd);
    }
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate<T: Scalar>(ratio: T, adv: T, eps: T) -> T {
    let clipped = ratio.max(T::one() - eps).min(T::one() + eps);
    (ratio * adv).min(clipped * adv)
}

/// d/d(log pi) of [`clipped_surrogate`]: `r A` where the unclipped branch is
/// active, zero where the clip has taken over.
fn surrogate_logp_grad<T: Scalar>(ratio: T, adv: T, eps: T) -> T {
    let clipped = ratio.max(T::one() - eps).min(T::one() + eps);
    if ratio * adv <= clipped * adv {
        ratio * adv
    } else {
        T::zero()
    }
}

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredStep<T> {
    pub obs: Vec<T>,
    pub picks: Vec<usize>,
    pub x: Vec<T>,
    pub reward: T,
    pub next_obs: Vec<T>,
    pub logp_d: T,
    pub logp_c: T,
    pub value: T,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer<T> {
    capacity: usize,
    steps: Vec<StoredStep<T>>,
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { capacity, steps: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.steps.len() == self.capacity
    }

    pub fn steps(&self) -> &[StoredStep<T>] {
        &self.steps
    }

    pub fn push(&mut self, step: StoredStep<T>) -> Result<()> {
        if self.is_full() {
            return Err(Error::Length(format!("rollout buffer full at {}", self.capacity)));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }
}

/// A minibatch element ready for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub obs: Vec<T>,
    pub picks: Vec<usize>,
    pub x: Vec<T>,
    pub logp_d_old: T,
    pub logp_c_old: T,
    pub advantage: T,
    pub ret: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport<T> {
    /// Clipped discrete surrogate (to be maximised), batch mean.
    pub l_d: T,
    /// Clipped continuous surrogate, batch mean.
    pub l_c: T,
    /// S_d + S_c, batch mean.
    pub entropy: T,
    /// Mean squared error of V against the return target.
    pub critic_loss: T,
    /// L_d + L_c + entropy_coeff * S.
    pub objective: T,
    /// `-objective + value_coeff * critic_loss`, the scalar [`Grads`] differentiate.
    pub total_loss: T,
}

/// Gradients of [`LossReport::total_loss`] in each network's flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub trunk: Vec<T>,
    pub discrete: Vec<T>,
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
    pub critic: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Statistics of one update round.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub l_d: f64,
    pub l_c: f64,
    pub entropy: f64,
    pub critic_loss: f64,
    /// Times each stored transition entered a minibatch.
    pub consumed: Vec<usize>,
}

/// One training-log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f64,
    pub throughput_bits: f64,
    pub ltcad_slots: f64,
    /// Loss columns carry the most recent update round; empty before the first.
    pub l_d: Option<f64>,
    pub l_c: Option<f64>,
    pub entropy: Option<f64>,
    pub critic_loss: Option<f64>,
}

struct Forward<T> {
    out: PolicyOutput<T>,
    trunk: ForwardCache<T>,
    discrete: ForwardCache<T>,
    mean: ForwardCache<T>,
    critic: ForwardCache<T>,
    features: Vec<T>,
}

pub struct Agent<T> {
    pub n_satellites: usize,
    pub beams_per_satellite: usize,
    pub coverage_sizes: Vec<usize>,
    pub obs_dim: usize,
    pub p_min_w: f64,
    pub p_max_w: f64,
    pub trunk: DenseNet<T>,
    pub discrete_head: DenseNet<T>,
    pub mean_head: DenseNet<T>,
    pub log_std: Vec<T>,
    /// Separate MLP on the observation, or a linear head on trunk features.
    pub critic: DenseNet<T>,
    pub shared_critic: bool,
    pub log_std_bounds: [f64; 2],
    pub hyper: PpoHyper,
    pub opt_trunk: AdamState<T>,
    pub opt_discrete: AdamState<T>,
    pub opt_mean: AdamState<T>,
    pub opt_log_std: AdamState<T>,
    pub opt_critic: AdamState<T>,
    pub encoder: StateEncoder,
    pub mode: ActionMode,
    pub scenario_digest: String,
    pub updates: u64,
    pub episodes_trained: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Agent<T> {
    pub fn new(scn: &Scenario, cfg: &PpoConfig, seed: u64) -> Result<Self> {
        let hyper = PpoHyper::from_config(cfg)?;
        let [lo, hi] = cfg.log_std_bounds;
        if !(lo <= cfg.log_std_init && cfg.log_std_init <= hi) {
            return Err(Error::Schema("ppo: log_std_init outside log_std_bounds".into()));
        }
        if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
            return Err(Error::Schema("ppo: hidden needs at least one non-zero width".into()));
        }
        let k = scn.beams_per_satellite;
        let coverage_sizes: Vec<usize> = scn.coverage_sets.iter().map(Vec::len).collect();
        let groups: Vec<usize> = coverage_sizes.iter().flat_map(|&n| std::iter::repeat_n(n, k)).collect();
        let obs_dim = scn.observation_len();
        let feat = *cfg.hidden.last().expect("non-empty");
        let n_power = scn.n_satellites * k;

        let mut widths = vec![obs_dim];
        widths.extend_from_slice(&cfg.hidden);
        let mut trunk = DenseNet::mlp(&widths, Activation::Tanh, Activation::Tanh)?;
        let mut discrete_head = DenseNet::mlp(&[feat, groups.iter().sum()], Activation::Tanh, Activation::Identity)?;
        let mut mean_head = DenseNet::mlp(&[feat, n_power], Activation::Tanh, Activation::Tanh)?;
        let mut critic = if cfg.shared_critic {
            DenseNet::mlp(&[feat, 1], Activation::Tanh, Activation::Identity)?
        } else {
            let mut w = widths.clone();
            w.push(1);
            DenseNet::mlp(&w, Activation::Tanh, Activation::Identity)?
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root2 = T::lit(std::f64::consts::SQRT_2);
        trunk.init_orthogonal(&vec![root2; trunk.num_layers()], &mut rng);
        discrete_head.init_orthogonal(&[T::lit(0.01)], &mut rng);
        mean_head.init_orthogonal(&[T::lit(0.01)], &mut rng);
        let mut cg = vec![root2; critic.num_layers()];
        *cg.last_mut().expect("non-empty") = T::one();
        critic.init_orthogonal(&cg, &mut rng);

        let lr_p = T::lit(hyper.lr_policy);
        let lr_c = T::lit(hyper.lr_critic);
        Ok(Self {
            n_satellites: scn.n_satellites,
            beams_per_satellite: k,
            coverage_sizes,
            obs_dim,
            p_min_w: scn.p_min_w,
            p_max_w: scn.p_max_w,
            opt_trunk: AdamState::new(trunk.param_count(), lr_p),
            opt_discrete: AdamState::new(discrete_head.param_count(), lr_p),
            opt_mean: AdamState::new(mean_head.param_count(), lr_p),
            opt_log_std: AdamState::new(n_power, lr_p),
            opt_critic: AdamState::new(critic.param_count(), lr_c),
            trunk,
            discrete_head,
            mean_head,
            log_std: vec![T::lit(cfg.log_std_init); n_power],
            critic,
            shared_critic: cfg.shared_critic,
            log_std_bounds: cfg.log_std_bounds,
            hyper,
            encoder: StateEncoder::new(obs_dim, scn.normalize_state),
            mode: ActionMode::Sample,
            scenario_digest: scn.digest(),
            updates: 0,
            episodes_trained: 0,
            rng,
        })
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let k = self.beams_per_satellite;
        self.coverage_sizes.iter().flat_map(|&n| std::iter::repeat_n(n, k)).collect()
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn bounded_log_std(&self) -> Vec<T> {
        let [lo, hi] = self.log_std_bounds;
        self.log_std.iter().map(|&v| v.max(T::lit(lo)).min(T::lit(hi))).collect()
    }

    fn forward_full(&self, obs: &[T]) -> Result<Forward<T>> {
        if obs.len() != self.obs_dim {
            return Err(Error::Dimension(format!(
                "observation width {} but agent expects {}",
                obs.len(),
                self.obs_dim
            )));
        }
        let (features, trunk) = self.trunk.forward(obs)?;
        let (logits, discrete) = self.discrete_head.forward(&features)?;
        let (mean, mean_cache) = self.mean_head.forward(&features)?;
        let critic_in: &[T] = if self.shared_critic { &features } else { obs };
        let (v, critic) = self.critic.forward(critic_in)?;
        Ok(Forward {
            out: PolicyOutput {
                discrete_logits: logits,
                group_sizes: self.group_sizes(),
                power_mean: mean,
                power_logstd: self.bounded_log_std(),
                value: v[0],
            },
            trunk,
            discrete,
            mean: mean_cache,
            critic,
            features,
        })
    }

    pub fn policy_forward(&self, obs: &[T]) -> Result<PolicyOutput<T>> {
        self.forward_full(obs).map(|f| f.out)
    }

    pub fn value(&self, obs: &[T]) -> Result<T> {
        let v = if self.shared_critic {
            let f = self.trunk.predict(obs)?;
            self.critic.predict(&f)?
        } else {
            self.critic.predict(obs)?
        };
        Ok(v[0])
    }

    /// Normalise a raw observation (updating the running statistics unless
    /// the encoder is frozen) and convert it to the agent's scalar.
    pub fn encode(&mut self, raw: &[f64]) -> Vec<T> {
        self.encoder.encode_raw(raw).into_iter().map(T::lit).collect()
    }

    /// Map a Gaussian sample onto watts (before the environment's clamp).
    pub fn watts(&self, x: T) -> f64 {
        self.p_min_w + (self.p_max_w - self.p_min_w) * (x.as_f64() + 1.0) / 2.0
    }

    pub fn to_hybrid(&self, scn: &Scenario, s: &SampledAction<T>) -> Result<HybridAction> {
        let k = self.beams_per_satellite;
        if s.picks.len() != self.n_satellites * k || s.x.len() != self.n_satellites * k {
            return Err(Error::Dimension("sampled action width".into()));
        }
        let picks: Vec<Vec<usize>> = s.picks.chunks(k).map(<[usize]>::to_vec).collect();
        let powers: Vec<Vec<f64>> = s.x.chunks(k).map(|c| c.iter().map(|&x| self.watts(x)).collect()).collect();
        let mut a = decode_action(scn, &picks, &powers)?;
        a.discrete_logprob = s.logp_d.as_f64();
        a.continuous_logprob = s.logp_c.as_f64();
        Ok(a)
    }

    pub fn choose(&mut self, po: &PolicyOutput<T>) -> SampledAction<T> {
        match self.mode {
            ActionMode::Sample => sample_action(po, &mut self.rng),
            ActionMode::Greedy => greedy_action(po),
        }
    }

    /// Losses of a minibatch and the gradient of their total w.r.t. every
    /// parameter.
    pub fn ppo_losses(&self, batch: &[Sample<T>]) -> Result<(LossReport<T>, Grads<T>)> {
        let h = &self.hyper;
        let eps = T::lit(h.clip_eps);
        let c_ent = T::lit(h.entropy_coeff);
        let c_v = T::lit(h.value_coeff);
        let inv_n = T::one() / T::lit(batch.len().max(1) as f64);
        let [lo, hi] = self.log_std_bounds;

        let mut g = Grads {
            trunk: vec![T::zero(); self.trunk.param_count()],
            discrete: vec![T::zero(); self.discrete_head.param_count()],
            mean: vec![T::zero(); self.mean_head.param_count()],
            log_std: vec![T::zero(); self.log_std.len()],
            critic: vec![T::zero(); self.critic.param_count()],
        };
        let mut rep = LossReport::default();

        for s in batch {
            let f = self.forward_full(&s.obs)?;
            let po = &f.out;
            let (lp_d, lp_c) = po.log_prob(&s.picks, &s.x);
            let r_d = (lp_d - s.logp_d_old).exp();
            let r_c = (lp_c - s.logp_c_old).exp();
            let a = s.advantage;
            rep.l_d += clipped_surrogate(r_d, a, eps) * inv_n;
            rep.l_c += clipped_surrogate(r_c, a, eps) * inv_n;
            let gd = surrogate_logp_grad(r_d, a, eps);
            let gc = surrogate_logp_grad(r_c, a, eps);

            // Discrete head: d(-J)/dz.
            let mut dz = vec![T::zero(); po.discrete_logits.len()];
            let mut off = 0;
            for (&n, &pick) in po.group_sizes.iter().zip(&s.picks) {
                let mut p = po.discrete_logits[off..off + n].to_vec();
                softmax_in_place(&mut p);
                let h_g = categorical_entropy(&p);
                rep.entropy += h_g * inv_n;
                for j in 0..n {
                    let onehot = if j == pick { T::one() } else { T::zero() };
                    let dlogp = onehot - p[j];
                    let dent = if p[j] > T::zero() { -p[j] * (p[j].ln() + h_g) } else { T::zero() };
                    dz[off + j] = -(gd * dlogp + c_ent * dent) * inv_n;
                }
                off += n;
            }

            // Continuous head: d(-J)/dmu and d(-J)/dlog_std.
            let mut dmu = vec![T::zero(); po.power_mean.len()];
            for e in 0..po.power_mean.len() {
                let ls = po.power_logstd[e];
                let var = (ls + ls).exp();
                let d = s.x[e] - po.power_mean[e];
                rep.entropy += gaussian_entropy(ls) * inv_n;
                dmu[e] = -gc * d / var * inv_n;
                let raw = self.log_std[e].as_f64();
                if raw >= lo && raw <= hi {
                    g.log_std[e] += -(gc * (d * d / var - T::one()) + c_ent) * inv_n;
                }
            }

            // Critic.
            let err = po.value - s.ret;
            rep.critic_loss += err * err * inv_n;
            let dv = [c_v * T::lit(2.0) * err * inv_n];
            let dcrit_in = self.critic.backward_into(&f.critic, &dv, &mut g.critic)?;

            let mut dfeat = self.discrete_head.backward_into(&f.discrete, &dz, &mut g.discrete)?;
            let dm = self.mean_head.backward_into(&f.mean, &dmu, &mut g.mean)?;
            for (a, b) in dfeat.iter_mut().zip(&dm) {
                *a += *b;
            }
            if self.shared_critic {
                for (a, b) in dfeat.iter_mut().zip(&dcrit_in) {
                    *a += *b;
                }
            }
            debug_assert_eq!(dfeat.len(), f.features.len());
            self.trunk.backward_into(&f.trunk, &dfeat, &mut g.trunk)?;
        }
        rep.objective = rep.l_d + rep.l_c + c_ent * rep.entropy;
        rep.total_loss = -rep.objective + c_v * rep.critic_loss;
        Ok((rep, g))
    }

    fn apply_grads(&mut self, mut g: Grads<T>) -> Result<()> {
        if let Some(max) = self.hyper.max_grad_norm {
            let max = T::lit(max);
            if self.shared_critic {
                clip_grad_norm(
                    &mut [&mut g.trunk[..], &mut g.discrete[..], &mut g.mean[..], &mut g.log_std[..], &mut g.critic[..]],
                    max,
                );
            } else {
                clip_grad_norm(&mut [&mut g.trunk[..], &mut g.discrete[..], &mut g.mean[..], &mut g.log_std[..]], max);
                clip_grad_norm(&mut [&mut g.critic[..]], max);
            }
        }
        self.opt_trunk.adam_step(self.trunk.params_mut(), &g.trunk)?;
        self.opt_discrete.adam_step(self.discrete_head.params_mut(), &g.discrete)?;
        self.opt_mean.adam_step(self.mean_head.params_mut(), &g.mean)?;
        self.opt_log_std.adam_step(&mut self.log_std, &g.log_std)?;
        self.opt_critic.adam_step(self.critic.params_mut(), &g.critic)?;
        let [lo, hi] = self.log_std_bounds;
        self.log_std.iter_mut().for_each(|v| *v = v.max(T::lit(lo)).min(T::lit(hi)));
        Ok(())
    }

    /// One update round over a filled buffer: GAE, advantage normalisation,
    /// then `epochs` passes of shuffled minibatches.
    pub fn update(&mut self, buffer: &RolloutBuffer<T>, bootstrap_value: T) -> Result<UpdateStats> {
        let steps = buffer.steps();
        let n = steps.len();
        if n == 0 {
            return Err(Error::Length("update on an empty buffer".into()));
        }
        let rewards: Vec<T> = steps.iter().map(|s| s.reward).collect();
        let mut values: Vec<T> = steps.iter().map(|s| s.value).collect();
        values.push(bootstrap_value);
        let dones: Vec<bool> = steps.iter().map(|s| s.done).collect();
        let mut adv = gae(&rewards, &values, &dones, T::lit(self.hyper.gamma), T::lit(self.hyper.gae_lambda))?;
        let returns: Vec<T> = adv.iter().zip(&values).map(|(&a, &v)| a + v).collect();
        normalize_advantages(&mut adv);

        let mut consumed = vec![0usize; n];
        let mut order: Vec<usize> = (0..n).collect();
        let (mut l_d, mut l_c, mut ent, mut crit) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for _ in 0..self.hyper.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.hyper.minibatch) {
                let batch: Vec<Sample<T>> = chunk
                    .iter()
                    .map(|&i| {
                        consumed[i] += 1;
                        let s = &steps[i];
                        Sample {
                            obs: s.obs.clone(),
                            picks: s.picks.clone(),
                            x: s.x.clone(),
                            logp_d_old: s.logp_d,
                            logp_c_old: s.logp_c,
                            advantage: adv[i],
                            ret: returns[i],
                        }
                    })
                    .collect();
                let (rep, g) = self.ppo_losses(&batch)?;
                if !rep.total_loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss after {} updates: L_d={} L_c={} S={} critic={}",
                        self.updates, rep.l_d, rep.l_c, rep.entropy, rep.critic_loss
                    )));
                }
                self.apply_grads(g)?;
                l_d += rep.l_d.as_f64();
                l_c += rep.l_c.as_f64();
                ent += rep.entropy.as_f64();
                crit += rep.critic_loss.as_f64();
                batches += 1;
            }
        }
        self.updates += 1;
        let b = batches as f64;
        Ok(UpdateStats {
            l_d: l_d / b,
            l_c: l_c / b,
            entropy: ent / b,
            critic_loss: crit / b,
            consumed,
        })
    }

    /// Train for `hyper.episodes` episodes on `env`.
    pub fn train(&mut self, env: &mut Env, seed: u64) -> Result<Vec<EpisodeLog>> {
        self.train_with(env, seed, |_, _, _| Ok(()))
    }

    /// As [`train`](Self::train), calling `hook` after every episode with the
    /// finished episode's environment.
    pub fn train_with<F>(&mut self, env: &mut Env, seed: u64, mut hook: F) -> Result<Vec<EpisodeLog>>
    where
        F: FnMut(&EpisodeLog, &Self, &Env) -> Result<()>,
    {
        let scn = env.scenario_arc();
        if scn.observation_len() != self.obs_dim || scn.n_satellites != self.n_satellites {
            return Err(Error::Dimension("agent was built for a different scenario".into()));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut buffer = RolloutBuffer::new(self.hyper.buffer_capacity);
        let mut last: Option<UpdateStats> = None;
        let mut log = Vec::with_capacity(self.hyper.episodes);
        self.encoder.frozen = false;
        let saved_mode = self.mode;
        self.mode = ActionMode::Sample;

        for episode in 0..self.hyper.episodes {
            let raw = env.reset(seeds.random());
            let mut obs = self.encode(&raw);
            let mut ep_reward = 0.0;
            loop {
                let po = self.policy_forward(&obs)?;
                let s = self.choose(&po);
                let action = self.to_hybrid(&scn, &s)?;
                let tr = env.step(&action)?;
                ep_reward += tr.reward;
                let next = self.encode(&tr.observation);
                buffer.push(StoredStep {
                    obs,
                    picks: s.picks,
                    x: s.x,
                    reward: T::lit(tr.reward),
                    next_obs: next.clone(),
                    logp_d: s.logp_d,
                    logp_c: s.logp_c,
                    value: po.value,
                    done: tr.done,
                })?;
                if buffer.is_full() {
                    let boot = if tr.done { T::zero() } else { self.value(&next)? };
                    last = Some(self.update(&buffer, boot)?);
                    buffer.clear();
                }
                obs = next;
                if tr.done {
                    break;
                }
            }
            let m = env.episode_metrics();
            let row = EpisodeLog {
                episode,
                reward: ep_reward,
                throughput_bits: m.throughput_bits,
                ltcad_slots: m.ltcad_slots,
                l_d: last.as_ref().map(|u| u.l_d),
                l_c: last.as_ref().map(|u| u.l_c),
                entropy: last.as_ref().map(|u| u.entropy),
                critic_loss: last.as_ref().map(|u| u.critic_loss),
            };
            self.episodes_trained += 1;
            hook(&row, self, env)?;
            log.push(row);
        }
        self.mode = saved_mode;
        Ok(log)
    }
}

impl<T: Scalar> Scheduler for Agent<T> {
    fn id(&self) -> String {
        "ppo".into()
    }

    fn act(&mut self, env: &Env) -> Result<HybridAction> {
        let obs = self.encode(&raw_state(env.state()));
        let po = self.policy_forward(&obs)?;
        let s = self.choose(&po);
        self.to_hybrid(env.scenario(), &s)
    }

    fn on_reset(&mut self, episode_seed: u64) {
        self.reseed(episode_seed ^ 0x5eed_0fac_7105);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "beamhop-agent";

/// On-disk agent: JSON with every parameter array stored as the hex of its
/// little-endian IEEE-754 bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub scenario_digest: String,
    pub n_satellites: usize,
    pub beams_per_satellite: usize,
    pub coverage_sizes: Vec<usize>,
    pub obs_dim: usize,
    pub p_min_w: f64,
    pub p_max_w: f64,
    pub shared_critic: bool,
    pub log_std_bounds: [f64; 2],
    pub hyper: PpoHyper,
    pub nets: Vec<NetRecord>,
    pub log_std: String,
    pub optimizers: Vec<AdamRecord>,
    pub encoder: StateEncoder,
    pub mode: ActionMode,
    pub updates: u64,
    pub episodes_trained: u64,
}

impl<T: Scalar> Agent<T> {
    pub fn to_checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.into(),
            byte_order: "little-endian".into(),
            scenario_digest: self.scenario_digest.clone(),
            n_satellites: self.n_satellites,
            beams_per_satellite: self.beams_per_satellite,
            coverage_sizes: self.coverage_sizes.clone(),
            obs_dim: self.obs_dim,
            p_min_w: self.p_min_w,
            p_max_w: self.p_max_w,
            shared_critic: self.shared_critic,
            log_std_bounds: self.log_std_bounds,
            hyper: self.hyper.clone(),
            nets: vec![
                self.trunk.to_record("trunk"),
                self.discrete_head.to_record("discrete_head"),
                self.mean_head.to_record("mean_head"),
                self.critic.to_record("critic"),
            ],
            log_std: encode_le_hex(&self.log_std),
            optimizers: vec![
                self.opt_trunk.to_record("trunk"),
                self.opt_discrete.to_record("discrete_head"),
                self.opt_mean.to_record("mean_head"),
                self.opt_log_std.to_record("log_std"),
                self.opt_critic.to_record("critic"),
            ],
            encoder: self.encoder.clone(),
            mode: self.mode,
            updates: self.updates,
            episodes_trained: self.episodes_trained,
        }
    }

    /// Rebuild an agent. The sampling stream is not part of the checkpoint
    /// and restarts from `seed`.
    pub fn from_checkpoint(ck: &AgentCheckpoint, seed: u64) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not an agent checkpoint: {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} (this build reads {})",
                ck.version, CHECKPOINT_VERSION
            )));
        }
        if ck.dtype != T::DTYPE || ck.byte_order != "little-endian" {
            return Err(Error::Checkpoint(format!("stored {} {}, wanted {} little-endian", ck.dtype, ck.byte_order, T::DTYPE)));
        }
        let net = |name: &str| -> Result<DenseNet<T>> {
            let rec = ck
                .nets
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing net {name}")))?;
            DenseNet::from_record(rec)
        };
        let opt = |name: &str, len: usize| -> Result<AdamState<T>> {
            let rec = ck
                .optimizers
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {name}")))?;
            let st = AdamState::from_record(rec)?;
            if st.m.len() != len {
                return Err(Error::Checkpoint(format!("optimizer {name} has {} slots, net has {len}", st.m.len())));
            }
            Ok(st)
        };
        let trunk = net("trunk")?;
        let discrete_head = net("discrete_head")?;
        let mean_head = net("mean_head")?;
        let critic = net("critic")?;
        let log_std: Vec<T> = decode_le_hex(&ck.log_std)?;
        let k = ck.beams_per_satellite;
        let groups: usize = ck.coverage_sizes.iter().map(|n| n * k).sum();
        if trunk.input_dim() != ck.obs_dim
            || discrete_head.output_dim() != groups
            || mean_head.output_dim() != ck.n_satellites * k
            || log_std.len() != ck.n_satellites * k
        {
            return Err(Error::Checkpoint("network shapes disagree with the stored scenario sizes".into()));
        }
        Ok(Self {
            n_satellites: ck.n_satellites,
            beams_per_satellite: k,
            coverage_sizes: ck.coverage_sizes.clone(),
            obs_dim: ck.obs_dim,
            p_min_w: ck.p_min_w,
            p_max_w: ck.p_max_w,
            opt_trunk: opt("trunk", trunk.param_count())?,
            opt_discrete: opt("discrete_head", discrete_head.param_count())?,
            opt_mean: opt("mean_head", mean_head.param_count())?,
            opt_log_std: opt("log_std", log_std.len())?,
            opt_critic: opt("critic", critic.param_count())?,
            trunk,
            discrete_head,
            mean_head,
            log_std,
            critic,
            shared_critic: ck.shared_critic,
            log_std_bounds: ck.log_std_bounds,
            hyper: ck.hyper.clone(),
            encoder: ck.encoder.clone(),
            mode: ck.mode,
            scenario_digest: ck.scenario_digest.clone(),
            updates: ck.updates,
            episodes_trained: ck.episodes_trained,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: AgentCheckpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ck, seed)
    }

    /// Dimension report when this agent cannot drive `scn`.
    pub fn check_compatible(&self, scn: &Scenario) -> Result<()> {
        let sizes: Vec<usize> = scn.coverage_sets.iter().map(Vec::len).collect();
        if self.obs_dim != scn.observation_len()
            || self.n_satellites != scn.n_satellites
            || self.beams_per_satellite != scn.beams_per_satellite
            || self.coverage_sizes != sizes
        {
            return Err(Error::Dimension(format!(
                "checkpoint expects obs {} / {} satellites x {} beams / coverage {:?}; scenario has obs {} / {} x {} / {:?}",
                self.obs_dim,
                self.n_satellites,
                self.beams_per_satellite,
                self.coverage_sizes,
                scn.observation_len(),
                scn.n_satellites,
                scn.beams_per_satellite,
                sizes
            )));
        }
        Ok(())
    }

    /// Parameter-exact comparison (bit level).
    pub fn same_parameters(&self, other: &Self) -> bool {
        let bits = |v: &[T]| encode_le_hex(v);
        bits(self.trunk.params()) == bits(other.trunk.params())
            && bits(self.discrete_head.params()) == bits(other.discrete_head.params())
            && bits(self.mean_head.params()) == bits(other.mean_head.params())
            && bits(&self.log_std) == bits(&other.log_std)
            && bits(self.critic.params()) == bits(other.critic.params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, DESK_TOML};
    use std::sync::Arc;

    fn desk() -> (Config, Scenario) {
        let cfg = Config::from_toml_str(DESK_TOML).unwrap();
        let scn = Scenario::build(&cfg).unwrap();
        (cfg, scn)
    }

    fn small_agent(shared: bool) -> Agent<f64> {
        let (mut cfg, scn) = desk();
        cfg.ppo.hidden = vec![7, 5];
        cfg.ppo.shared_critic = shared;
        cfg.ppo.log_std_init = -0.3;
        let mut a = Agent::new(&scn, &cfg.ppo, 3).unwrap();
        // Non-trivial heads so the check is not dominated by tiny weights.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        a.discrete_head.init_orthogonal(&[1.0], &mut rng);
        a.mean_head.init_orthogonal(&[0.8], &mut rng);
        for (i, b) in a.discrete_head.bias_mut(0).iter_mut().enumerate() {
            *b = 0.05 * i as f64;
        }
        a
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn make_batch(agent: &mut Agent<f64>, n: usize, seed: u64, perturb_old: bool) -> Vec<Sample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let obs = random_obs(&mut rng, agent.obs_dim);
                let po = agent.policy_forward(&obs).unwrap();
                let s = sample_action(&po, &mut rng);
                let (dd, dc) = if perturb_old {
                    (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))
                } else {
                    (0.0, 0.0)
                };
                Sample {
                    obs,
                    picks: s.picks,
                    x: s.x,
                    logp_d_old: s.logp_d + dd,
                    logp_c_old: s.logp_c + dc,
                    advantage: rng.random_range(-1.5..1.5),
                    ret: rng.random_range(-1.0..1.0),
                }
            })
            .collect()
    }

    fn check_gradients(shared: bool) {
        let mut agent = small_agent(shared);
        let batch = make_batch(&mut agent, 6, 17, true);
        let (_, g) = agent.ppo_losses(&batch).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        let loss = |a: &Agent<f64>| a.ppo_losses(&batch).unwrap().0.total_loss;
        macro_rules! probe {
            ($field:expr, $grad:expr) => {
                for i in 0..$grad.len() {
                    let orig = $field[i];
                    $field[i] = orig + h;
                    let up = loss(&agent);
                    $field[i] = orig - h;
                    let down = loss(&agent);
                    $field[i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = $grad[i];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                    worst = worst.max(rel);
                }
            };
        }
        probe!(agent.trunk.params_mut(), g.trunk);
        probe!(agent.discrete_head.params_mut(), g.discrete);
        probe!(agent.mean_head.params_mut(), g.mean);
        probe!(agent.log_std, g.log_std);
        probe!(agent.critic.params_mut(), g.critic);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradient_check_separate_critic() {
        check_gradients(false);
    }

    #[test]
    fn gradient_check_shared_critic() {
        check_gradients(true);
    }

    #[test]
    fn head_widths_on_desk() {
        let (cfg, scn) = desk();
        let a = Agent::<f64>::new(&scn, &cfg.ppo, 0).unwrap();
        let po = a.policy_forward(&vec![0.0; 24]).unwrap();
        assert_eq!(po.discrete_logits.len(), 24);
        assert_eq!(po.power_mean.len() + po.power_logstd.len(), 8);
        assert!(matches!(a.policy_forward(&[0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_trunk_gives_uniform_groups() {
        let mut a = small_agent(false);
        a.trunk.params_mut().iter_mut().for_each(|v| *v = 0.0);
        a.discrete_head.bias_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let po = a.policy_forward(&vec![0.7; 24]).unwrap();
        for p in po.probs() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        let (s_d, _) = po.entropy();
        assert!((s_d - 4.0 * 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_pure() {
        let a = small_agent(true);
        let obs = vec![0.3; 24];
        assert_eq!(a.policy_forward(&obs).unwrap(), a.policy_forward(&obs).unwrap());
    }

    fn one_group(logits: Vec<f64>, mean: f64, log_std: f64) -> PolicyOutput<f64> {
        PolicyOutput {
            group_sizes: vec![logits.len()],
            discrete_logits: logits,
            power_mean: vec![mean],
            power_logstd: vec![log_std],
            value: 0.0,
        }
    }

    #[test]
    fn dominant_logit_frequency() {
        let po = one_group(vec![0.0, 50.0, 0.0], 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000).filter(|_| sample_action(&po, &mut rng).picks[0] == 1).count();
        assert!(hits as f64 / 1e4 > 0.999);
    }

    #[test]
    fn tiny_std_samples_the_mean() {
        let po = one_group(vec![0.0], 0.37, -30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert!((sample_action(&po, &mut rng).x[0] - 0.37).abs() < 1e-9);
        }
    }

    #[test]
    fn recorded_logprob_matches_recompute() {
        let mut a = small_agent(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let obs = random_obs(&mut rng, 24);
            let po = a.policy_forward(&obs).unwrap();
            let s = a.choose(&po);
            let (d, c) = a.policy_forward(&obs).unwrap().log_prob(&s.picks, &s.x);
            assert!((d - s.logp_d).abs() < 1e-12);
            assert!((c - s.logp_c).abs() < 1e-12);
        }
    }

    fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + if d[t] { 0.0 } else { g * v[t + 1] } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                for k in 0..(n - t) {
                    sum += (g * l).powi(k as i32) * delta[t + k];
                    if d[t + k] {
                        break;
                    }
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = 20;
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
            let a = gae(&r, &v, &d, 0.99, 0.95).unwrap();
            let o = gae_oracle(&r, &v, &d, 0.99, 0.95);
            for (x, y) in a.iter().zip(&o) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gae_degenerate_cases() {
        let a = gae::<f64>(&[2.0], &[0.5, 1.5], &[false], 0.9, 0.95).unwrap();
        assert!((a[0] - (2.0 + 0.9 * 1.5 - 0.5)).abs() < 1e-15);
        let r = [1.0f64, -1.0, 0.5];
        let v = [0.1, 0.2, 0.3, 0.4];
        let a = gae(&r, &v, &[false; 3], 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert!((a[t] - (r[t] + 0.9 * v[t + 1] - v[t])).abs() < 1e-15);
        }
        assert!(matches!(gae(&r, &v[..3], &[false; 3], 0.9, 0.9), Err(Error::Length(_))));
    }

    #[test]
    fn advantage_normalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..7.0)).collect();
        normalize_advantages(&mut a);
        let mean = a.iter().sum::<f64>() / 1000.0;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 1e-8);
        assert!((var - 1.0).abs() < 1e-8);
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_surrogate(1.5f64, 2.0, 0.2) - 1.2 * 2.0).abs() < 1e-15);
        assert!((clipped_surrogate(0.5f64, -2.0, 0.2) - 0.8 * -2.0).abs() < 1e-15);
        assert_eq!(surrogate_logp_grad(1.5, 2.0, 0.2), 0.0);
    }

    #[test]
    fn ratio_one_batch_is_unclipped() {
        let mut a = small_agent(false);
        let batch = make_batch(&mut a, 16, 8, false);
        let (rep, _) = a.ppo_losses(&batch).unwrap();
        let mean_adv = batch.iter().map(|s| s.advantage).sum::<f64>() / 16.0;
        assert!((rep.l_d + rep.l_c - 2.0 * mean_adv).abs() < 1e-12);
    }

    #[test]
    fn gaussian_entropy_against_quadrature() {
        // -int p ln p over [-12, 12] with Simpson's rule.
        let n = 20_000;
        let (a, b) = (-12.0f64, 12.0f64);
        let h = (b - a) / n as f64;
        let f = |x: f64| {
            let lp = gaussian_log_density(x, 0.0, 0.0);
            -lp.exp() * lp
        };
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let numeric = s * h / 3.0;
        assert!((numeric - 1.41894).abs() < 1e-4);
        assert!((gaussian_entropy(0.0f64) - numeric).abs() < 1e-9);
    }

    #[test]
    fn ppo_step_matches_vanilla_pg() {
        let mut a = small_agent(false);
        a.hyper.clip_eps = 1e9;
        a.hyper.entropy_coeff = 0.0;
        let batch = make_batch(&mut a, 24, 21, false);
        let (_, g) = a.ppo_losses(&batch).unwrap();
        // Vanilla estimate: -mean(A * grad log pi), grad log pi by central differences.
        let h = 1e-6;
        let logp = |ag: &Agent<f64>, s: &Sample<f64>| {
            let (d, c) = ag.policy_forward(&s.obs).unwrap().log_prob(&s.picks, &s.x);
            d + c
        };
        let pg = |ag: &mut Agent<f64>, which: usize| -> Vec<f64> {
            let len = match which {
                0 => ag.trunk.param_count(),
                1 => ag.discrete_head.param_count(),
                2 => ag.mean_head.param_count(),
                _ => ag.log_std.len(),
            };
            (0..len)
                .map(|i| {
                    let mut acc = 0.0;
                    for s in &batch {
                        let slot: &mut f64 = match which {
                            0 => &mut ag.trunk.params_mut()[i],
                            1 => &mut ag.discrete_head.params_mut()[i],
                            2 => &mut ag.mean_head.params_mut()[i],
                            _ => &mut ag.log_std[i],
                        };
                        let o = *slot;
                        *slot = o + h;
                        let up = logp(ag, s);
                        let slot: &mut f64 = match which {
                            0 => &mut ag.trunk.params_mut()[i],
                            1 => &mut ag.discrete_head.params_mut()[i],
                            2 => &mut ag.mean_head.params_mut()[i],
                            _ => &mut ag.log_std[i],
                        };
                        *slot = o - h;
                        let down = logp(ag, s);
                        let slot: &mut f64 = match which {
                            0 => &mut ag.trunk.params_mut()[i],
                            1 => &mut ag.discrete_head.params_mut()[i],
                            2 => &mut ag.mean_head.params_mut()[i],
                            _ => &mut ag.log_std[i],
                        };
                        *slot = o;
                        acc += s.advantage * (up - down) / (2.0 * h);
                    }
                    -acc / batch.len() as f64
                })
                .collect()
        };
        let mut vanilla = Vec::new();
        for w in 0..4 {
            vanilla.extend(pg(&mut a, w));
        }
        let ours: Vec<f64> = [&g.trunk[..], &g.discrete[..], &g.mean[..], &g.log_std[..]].concat();
        let dot: f64 = ours.iter().zip(&vanilla).map(|(x, y)| x * y).sum();
        let n1 = ours.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n2 = vanilla.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (n1 * n2) > 0.999, "{}", dot / (n1 * n2));
    }

    #[test]
    fn buffer_is_consumed_epochs_times() {
        let mut a = small_agent(false);
        a.hyper.minibatch = 7;
        a.hyper.epochs = 4;
        let mut buf = RolloutBuffer::new(30);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in 0..30 {
            let obs = random_obs(&mut rng, 24);
            let po = a.policy_forward(&obs).unwrap();
            let s = sample_action(&po, &mut rng);
            buf.push(StoredStep {
                next_obs: obs.clone(),
                obs,
                picks: s.picks,
                x: s.x,
                reward: rng.random_range(-1.0..1.0),
                logp_d: s.logp_d,
                logp_c: s.logp_c,
                value: po.value,
                done: t % 10 == 9,
            })
            .unwrap();
        }
        assert!(buf.is_full());
        assert!(buf.push(buf.steps()[0].clone()).is_err());
        let stats = a.update(&buf, 0.0).unwrap();
        assert!(stats.consumed.iter().all(|&c| c == 4));
        assert!(a.log_std.iter().all(|&v| (-5.0..=1.0).contains(&v)));
    }

    #[test]
    fn hyper_validation() {
        let mut c = PpoConfig::default();
        c.minibatch = c.buffer_capacity + 1;
        assert!(PpoHyper::from_config(&c).is_err());
        let mut c = PpoConfig::default();
        c.gamma = 1.2;
        assert!(PpoHyper::from_config(&c).is_err());
        let mut c = PpoConfig::default();
        c.clip_eps = 0.0;
        assert!(PpoHyper::from_config(&c).is_err());
    }

    #[test]
    fn zero_episodes_leaves_agent_untouched() {
        let (mut cfg, scn) = desk();
        cfg.ppo.episodes = 0;
        let mut a = Agent::<f64>::new(&scn, &cfg.ppo, 1).unwrap();
        let before = Agent::<f64>::new(&scn, &cfg.ppo, 1).unwrap();
        let mut env = Env::new(Arc::new(scn));
        let log = a.train(&mut env, 4).unwrap();
        assert!(log.is_empty());
        assert!(a.same_parameters(&before));
    }

    fn two_cell_config() -> Config {
        let mut cfg = Config::from_toml_str(DESK_TOML).unwrap();
        let c = &mut cfg.constellation;
        c.n_satellites = 1;
        c.n_cells = 2;
        c.beams_per_satellite = 1;
        c.cell_offsets_m = Some(vec![[-12124.4, 0.0], [12124.4, 0.0]]);
        c.satellite_offsets_m = vec![[0.0, 0.0]];
        c.coverage_sets = Some(vec![vec![0, 1]]);
        // Serve-or-idle: anything not served in its arrival slot expires.
        cfg.traffic.arrival_rates = Some(vec![vec![20.0, 0.0]]);
        cfg.traffic.ttl_slots = 1;
        cfg.episode.episode_slots = 20;
        cfg.ppo.hidden = vec![16];
        cfg.ppo.buffer_capacity = 200;
        cfg.ppo.episodes = 150;
        cfg.ppo.lr_policy = 3e-3;
        cfg.ppo.lr_critic = 3e-3;
        cfg
    }

    #[test]
    fn learns_to_serve_the_loaded_cell() {
        let cfg = two_cell_config();
        let scn = Arc::new(Scenario::build(&cfg).unwrap());
        let mut a = Agent::<f64>::new(&scn, &cfg.ppo, 9).unwrap();
        let mut env = Env::new(Arc::clone(&scn));
        a.train(&mut env, 9).unwrap();
        a.encoder.frozen = true;
        // Probability of illuminating cell 0 across a fresh episode's states.
        env.reset(1234);
        let mut worst: f64 = 1.0;
        let mut sched_rng = ChaCha8Rng::seed_from_u64(0);
        while !env.is_done() {
            let obs = a.encode(&raw_state(env.state()));
            let po = a.policy_forward(&obs).unwrap();
            worst = worst.min(po.probs()[0]);
            let s = sample_action(&po, &mut sched_rng);
            let act = a.to_hybrid(&scn, &s).unwrap();
            env.step(&act).unwrap();
        }
        assert!(worst > 0.95, "{worst}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = two_cell_config();
        cfg.ppo.episodes = 15;
        let scn = Arc::new(Scenario::build(&cfg).unwrap());
        let run = || {
            let mut a = Agent::<f64>::new(&scn, &cfg.ppo, 5).unwrap();
            let mut env = Env::new(Arc::clone(&scn));
            let log = a.train(&mut env, 77).unwrap();
            let bits: Vec<u64> = log.iter().flat_map(|r| [r.reward.to_bits(), r.l_d.unwrap_or(0.0).to_bits()]).collect();
            (bits, encode_le_hex(a.trunk.params()), a.updates)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = two_cell_config();
        let scn = Arc::new(Scenario::build(&cfg).unwrap());
        let mut a = Agent::<f64>::new(&scn, &cfg.ppo, 5).unwrap();
        a.hyper.episodes = 12;
        let mut env = Env::new(Arc::clone(&scn));
        a.train(&mut env, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("agent.json");
        a.save(&p).unwrap();
        let b = Agent::<f64>::load(&p, 0).unwrap();
        assert!(a.same_parameters(&b));
        assert_eq!(a.opt_trunk, b.opt_trunk);
        assert_eq!(a.opt_critic, b.opt_critic);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
        // A different scenario shape is refused with a dimension report.
        let (_, desk_scn) = desk();
        assert!(matches!(b.check_compatible(&desk_scn), Err(Error::Dimension(_))));
        b.check_compatible(&scn).unwrap();
    }
}
