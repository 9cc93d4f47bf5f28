"""PPO with GAE on small MLP policy/value networks, plain numpy throughout.

The trainer runs one rollout worker per grasp label, synchronizes at an epoch
barrier, then performs the configured minibatch update passes. Workers are
fully isolated (each owns its environment) and executed in a fixed order, so a
fixed seed reproduces training bit for bit; checkpoints are byte-identical
across runs.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, asdict

import numpy as np


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.996
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 5e-4
    updates_per_epoch: int = 16
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    epochs: int = 500
    episode_len_grasp: int = 195
    episode_len_full: int = 300
    hidden_units: int = 128
    hidden_layers: int = 2
    log_std_init: float = -0.5

    def __post_init__(self):
        if self.updates_per_epoch % self.minibatches != 0:
            raise ValueError("updates_per_epoch must be a multiple of minibatches")
        if self.epochs < 1 or self.minibatches < 1:
            raise ValueError("epochs and minibatches must be positive")


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((n_in, n_out))
    q, r = np.linalg.qr(a if n_in >= n_out else a.T)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    # C-contiguous so checkpoint round-trips reproduce matmuls bit-exactly
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


class MLP:
    """Fully connected tanh network with a linear output layer."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, final_gain: float = 0.01):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            gain = final_gain if last else np.sqrt(2.0)
            self.weights.append(_orthogonal(rng, sizes[i], sizes[i + 1], gain))
            self.biases.append(np.zeros(sizes[i + 1]))

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(x)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        out = h @ self.weights[-1] + self.biases[-1]
        return out if np.ndim(x) > 1 else out[0]

    def forward_cached(self, x: np.ndarray):
        acts = [np.atleast_2d(x)]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            acts.append(np.tanh(acts[-1] @ w + b))
        out = acts[-1] @ self.weights[-1] + self.biases[-1]
        return out, acts

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output); returns
        per-parameter gradients aligned with parameters()."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grads_w, grads_b

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


class PolicyNet:
    """Gaussian policy: MLP mean plus a state-independent log-std vector."""

    def __init__(self, obs_dim: int, act_dim: int, config: PpoConfig,
                 rng: np.random.Generator):
        sizes = [obs_dim] + [config.hidden_units] * config.hidden_layers + [act_dim]
        self.mlp = MLP(sizes, rng, final_gain=0.01)
        self.log_std = np.full(act_dim, config.log_std_init)
        self.act_dim = act_dim

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mlp.forward(obs)

    def log_prob(self, mean: np.ndarray, actions: np.ndarray) -> np.ndarray:
        std = np.exp(self.log_std)
        z = (actions - mean) / std
        return (-0.5 * z * z - self.log_std - 0.5 * np.log(2.0 * np.pi)).sum(axis=-1)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * np.log(2.0 * np.pi * np.e)))

    def parameters(self) -> list[np.ndarray]:
        return self.mlp.parameters() + [self.log_std]


class ValueNet:
    def __init__(self, obs_dim: int, config: PpoConfig, rng: np.random.Generator):
        sizes = [obs_dim] + [config.hidden_units] * config.hidden_layers + [1]
        self.mlp = MLP(sizes, rng, final_gain=1.0)

    def value(self, obs: np.ndarray) -> np.ndarray:
        out = self.mlp.forward(obs)
        return out[..., 0] if np.ndim(out) else float(out[0])

    def parameters(self) -> list[np.ndarray]:
        return self.mlp.parameters()


def act(policy: PolicyNet, obs: np.ndarray, stochastic: bool = True,
        rng: np.random.Generator | None = None) -> tuple[np.ndarray, float]:
    """Sample (or take the mean) action, clamped to [-1, 1]; returns the
    action and its Gaussian log-probability."""
    obs = np.asarray(obs, dtype=float)
    mean = policy.mean(obs)
    if mean.shape[-1] != policy.act_dim:
        raise ValueError("observation produced wrong action width")
    if stochastic:
        if rng is None:
            raise ValueError("stochastic sampling needs an rng")
        a = mean + np.exp(policy.log_std) * rng.standard_normal(policy.act_dim)
    else:
        a = mean
    a = np.clip(a, -1.0, 1.0)
    return a, float(policy.log_prob(mean, a))


def _sample_raw(policy: PolicyNet, obs: np.ndarray,
                rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Unclamped Gaussian sample with its exact log-probability.

    The raw sample goes into the rollout buffer so importance ratios stay
    consistent; environments clamp on their side. Computing log-probs of
    clamped actions instead lets the mean run far past the bounds and kills
    exploration."""
    mean = policy.mean(np.asarray(obs, dtype=float))
    a = mean + np.exp(policy.log_std) * rng.standard_normal(policy.act_dim)
    return a, float(policy.log_prob(mean, a))


class RunningNorm:
    """Per-feature running mean/std; frozen at evaluation time."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        batch = np.atleast_2d(batch)
        n = batch.shape[0]
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        delta = b_mean - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * n / tot
        m_a = self.var * self.count
        m_b = b_var * n
        self.var = (m_a + m_b + delta * delta * self.count * n / tot) / tot
        self.count = tot

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return np.clip((obs - self.mean) / np.sqrt(self.var + 1e-8),
                       -self.clip, self.clip)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.b1 ** self.t
        b2c = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def gae_advantages(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation over a flat, episode-bounded buffer.

    delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t
    A_t = delta_t + gamma lam (1 - done_t) A_{t+1};  returns = A + V.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must align")
    n = len(rewards)
    adv = np.zeros(n)
    next_adv = 0.0
    next_value = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


class RolloutBuffer:
    """Per-epoch storage across all workers; episode boundaries via dones."""

    def __init__(self):
        self.obs, self.actions, self.log_probs = [], [], []
        self.rewards, self.values, self.dones = [], [], []

    def add(self, obs, action, log_prob, reward, value, done):
        self.obs.append(np.asarray(obs, dtype=float))
        self.actions.append(np.asarray(action, dtype=float))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))

    def __len__(self):
        return len(self.obs)

    def arrays(self):
        return (np.stack(self.obs), np.stack(self.actions),
                np.asarray(self.log_probs), np.asarray(self.rewards),
                np.asarray(self.values), np.asarray(self.dones, dtype=float))


class ScalarNorm:
    """Running mean/std for value targets; the critic fits normalized returns."""

    def __init__(self):
        self.mean = 0.0
        self.var = 1.0
        self.count = 1e-4

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=float).ravel()
        n = len(batch)
        delta = batch.mean() - self.mean
        tot = self.count + n
        m_a = self.var * self.count
        m_b = batch.var() * n
        self.mean += delta * n / tot
        self.var = (m_a + m_b + delta * delta * self.count * n / tot) / tot
        self.count = tot

    def encode(self, x):
        return (x - self.mean) / np.sqrt(self.var + 1e-8)

    def decode(self, x):
        return x * np.sqrt(self.var + 1e-8) + self.mean


@dataclass
class AgentNets:
    policy: PolicyNet
    value: ValueNet
    obs_norm: RunningNorm
    ret_norm: ScalarNorm


def ppo_update(buffer: RolloutBuffer, nets: AgentNets, optimizer: Adam,
               config: PpoConfig, rng: np.random.Generator) -> dict:
    """Run the configured minibatch passes of the clipped surrogate update."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    obs, actions, logp_old, rewards, values_enc, dones = buffer.arrays()
    values = nets.ret_norm.decode(values_enc)
    adv, returns = gae_advantages(rewards, values, dones,
                                  config.gamma, config.gae_lambda)
    nets.ret_norm.update(returns)
    returns_enc = nets.ret_norm.encode(returns)
    adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)

    n = len(buffer)
    passes = config.updates_per_epoch // config.minibatches
    stats = {"pi_loss": 0.0, "v_loss": 0.0, "entropy": nets.policy.entropy(),
             "clip_frac": 0.0, "grad_norm": 0.0, "approx_kl": 0.0}
    count = 0
    for _ in range(passes):
        order = rng.permutation(n)
        for chunk in np.array_split(order, config.minibatches):
            mb_obs = obs[chunk]
            mb_act = actions[chunk]
            mb_adv = adv_n[chunk]
            mb_ret = returns_enc[chunk]
            mb_logp_old = logp_old[chunk]
            m = len(chunk)

            mean, p_acts = nets.policy.mlp.forward_cached(mb_obs)
            std = np.exp(nets.policy.log_std)
            z = (mb_act - mean) / std
            logp = (-0.5 * z * z - nets.policy.log_std
                    - 0.5 * np.log(2.0 * np.pi)).sum(axis=1)
            ratio = np.exp(logp - mb_logp_old)
            surr1 = ratio * mb_adv
            surr2 = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * mb_adv
            pi_loss = -np.minimum(surr1, surr2).mean()

            # gradient flows through the unclipped branch only
            use_unclipped = surr1 <= surr2
            coeff = np.where(use_unclipped, ratio * mb_adv, 0.0) / m
            # d(-logp)/dmean = -z/std per dim, scaled by the surrogate coefficient
            grad_mean = -(coeff[:, None] * (z / std))
            grad_logstd = -(coeff[:, None] * (z * z - 1.0)).sum(axis=0)
            gw_p, gb_p = nets.policy.mlp.backward(p_acts, grad_mean)

            v_out, v_acts = nets.value.mlp.forward_cached(mb_obs)
            v_pred = v_out[:, 0]
            v_err = v_pred - mb_ret
            v_loss = float((v_err ** 2).mean())
            grad_v = (config.value_coef * 2.0 * v_err / m)[:, None]
            gw_v, gb_v = nets.value.mlp.backward(v_acts, grad_v)

            if config.entropy_coef != 0.0:
                grad_logstd -= config.entropy_coef * np.ones_like(grad_logstd)

            grads = []
            for w, b in zip(gw_p, gb_p):
                grads.extend([w, b])
            grads.append(grad_logstd)
            for w, b in zip(gw_v, gb_v):
                grads.extend([w, b])
            if not all(np.isfinite(g).all() for g in grads):
                raise FloatingPointError("non-finite gradients in ppo_update")
            norm = clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads)

            stats["pi_loss"] += float(pi_loss)
            stats["v_loss"] += v_loss
            stats["clip_frac"] += float(np.mean(np.abs(ratio - 1.0) > config.clip))
            stats["grad_norm"] += norm
            stats["approx_kl"] += float(np.mean(mb_logp_old - logp))
            count += 1
    for k in ("pi_loss", "v_loss", "clip_frac", "grad_norm", "approx_kl"):
        stats[k] /= count
    stats["adv_mean"] = float(adv.mean())
    stats["return_mean"] = float(returns.mean())
    return stats


def make_nets(obs_dim: int, act_dim: int, config: PpoConfig,
              seed: int) -> tuple[AgentNets, Adam]:
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    policy = PolicyNet(obs_dim, act_dim, config, rng)
    value = ValueNet(obs_dim, config, rng)
    nets = AgentNets(policy, value, RunningNorm(obs_dim), ScalarNorm())
    params = policy.parameters() + value.parameters()
    return nets, Adam(params, config.lr)


def collect_rollouts(envs: list, nets: AgentNets, steps: int,
                     rng: np.random.Generator) -> tuple[RolloutBuffer, dict]:
    """One fixed-length episode per worker, stochastic actions."""
    buffer = RolloutBuffer()
    ep_rewards = []
    proxies = []
    for env in envs:
        obs = env.reset()
        total = 0.0
        for t in range(steps):
            nets.obs_norm.update(obs)
            nobs = nets.obs_norm.normalize(obs)
            a, logp = _sample_raw(nets.policy, nobs, rng)
            v = nets.value.value(nobs)
            obs, reward, done, info = env.step(np.clip(a, -1.0, 1.0))
            done = done or t == steps - 1
            buffer.add(nobs, a, logp, reward, float(v), done)
            total += reward
            if done:
                break
        ep_rewards.append(total)
        proxies.append(float(getattr(env, "success_proxy", lambda: 0.0)()))
    info = {"reward_mean": float(np.mean(ep_rewards)),
            "reward_std": float(np.std(ep_rewards)),
            "success_proxy": float(np.mean(proxies))}
    return buffer, info


def train(env_factory, labels: list, config: PpoConfig, mode: str = "all-object",
          seed: int = 0, episode_len: int | None = None, callback=None) -> dict:
    """Train one policy per the selected mode with a worker per label.

    env_factory(label, worker_index) must build an isolated environment.
    Returns {group_key: {"nets": AgentNets, "log": [row, ...]}}. The optional
    callback(epoch, nets, stats) may return True to stop a group early.
    """
    if not labels:
        raise ValueError("need at least one grasp label")
    if mode not in ("all-object", "per-object"):
        raise ValueError(f"unknown training mode {mode!r}")
    steps = episode_len if episode_len is not None else config.episode_len_grasp

    groups: dict[str, list] = {}
    if mode == "per-object":
        for lab in labels:
            groups.setdefault(lab.object_id, []).append(lab)
    else:
        groups["all"] = list(labels)

    results = {}
    for gi, (key, group) in enumerate(sorted(groups.items())):
        envs = [env_factory(lab, i) for i, lab in enumerate(group)]
        obs_dim, act_dim = envs[0].obs_dim, envs[0].act_dim
        nets, optimizer = make_nets(obs_dim, act_dim, config, seed + 1000 * gi)
        rng = np.random.default_rng(np.random.SeedSequence((seed, gi)).spawn(1)[0])
        log = []
        for epoch in range(config.epochs):
            buffer, roll_info = collect_rollouts(envs, nets, steps, rng)
            stats = ppo_update(buffer, nets, optimizer, config, rng)
            row = {"epoch": epoch, **roll_info, **stats}
            log.append(row)
            if callback is not None and callback(epoch, nets, row):
                break
        results[key] = {"nets": nets, "log": log}
    return results


# --- checkpoint I/O ---------------------------------------------------------

CHECKPOINT_VERSION = 1


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    buf = base64.b64decode(d["data"])
    return np.frombuffer(buf, dtype=np.float64).reshape(d["shape"]).copy()


def save_checkpoint(path: str, nets: AgentNets, config: PpoConfig,
                    extra: dict | None = None) -> None:
    """Versioned JSON weight dump with the config echoed in."""
    arrays = {}
    for i, w in enumerate(nets.policy.mlp.weights):
        arrays[f"policy.w{i}"] = _encode(w)
        arrays[f"policy.b{i}"] = _encode(nets.policy.mlp.biases[i])
    arrays["policy.log_std"] = _encode(nets.policy.log_std)
    for i, w in enumerate(nets.value.mlp.weights):
        arrays[f"value.w{i}"] = _encode(w)
        arrays[f"value.b{i}"] = _encode(nets.value.mlp.biases[i])
    arrays["norm.mean"] = _encode(nets.obs_norm.mean)
    arrays["norm.var"] = _encode(nets.obs_norm.var)
    arrays["norm.count"] = _encode(np.array([nets.obs_norm.count]))
    doc = {
        "format": "graspsim-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "extra": extra or {},
        "arrays": arrays,
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path: str) -> tuple[AgentNets, PpoConfig, dict]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "graspsim-checkpoint":
        raise ValueError(f"{path} is not a graspsim checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    config = PpoConfig(**doc["config"])
    arrays = doc["arrays"]
    n_layers = config.hidden_layers + 1
    obs_dim = np.asarray(arrays["policy.w0"]["shape"])[0]
    act_dim = np.asarray(arrays[f"policy.w{n_layers - 1}"]["shape"])[1]
    nets, _ = make_nets(int(obs_dim), int(act_dim), config, seed=0)
    for i in range(n_layers):
        nets.policy.mlp.weights[i] = _decode(arrays[f"policy.w{i}"])
        nets.policy.mlp.biases[i] = _decode(arrays[f"policy.b{i}"])
        nets.value.mlp.weights[i] = _decode(arrays[f"value.w{i}"])
        nets.value.mlp.biases[i] = _decode(arrays[f"value.b{i}"])
    nets.policy.log_std = _decode(arrays["policy.log_std"])
    nets.obs_norm.mean = _decode(arrays["norm.mean"])
    nets.obs_norm.var = _decode(arrays["norm.var"])
    nets.obs_norm.count = float(_decode(arrays["norm.count"])[0])
    nets.obs_norm.frozen = True
    return nets, config, doc.get("extra", {})
