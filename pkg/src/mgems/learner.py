"""Per-agent DDQN/DQN learners on a small stacked-LSTM function approximator.

The network is a linear input layer, ``num_layers`` LSTM layers of
``hidden_size`` memory cells, and a linear head sized by the joint-action
alphabet.  Forward and backward passes are written out by hand (plain SGD,
full backprop through time over an episode); gradients are validated
against finite differences in the test suite.  Episodes are replayed
whole so hidden state always starts from the episode boundary.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class DivergenceError(Exception):
    """Training produced a non-finite loss (learning rate likely too high)."""


@dataclass
class Hyperparams:
    learning_rate: float = 0.005
    discount: float = 0.6
    batch_size: int = 120
    train_every: int = 40          # episodes between training sessions
    steps_per_train: int = 30      # gradient steps per training session
    target_sync_every: int = 5     # training sessions between target syncs
    buffer_capacity: int = 1200    # transitions
    hidden_size: int = 35
    num_layers: int = 2
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_frac: float = 0.6
    lr_decay: float = 0.95
    lr_decay_every: int = 500      # episodes
    init_scale: float = 0.08

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must be in [0, 1)")


def epsilon_value(h: Hyperparams, episode: int, total_episodes: int) -> float:
    """Linear decay over the first decay fraction of the run, then flat."""
    horizon = max(1, int(h.epsilon_decay_frac * total_episodes))
    frac = min(1.0, episode / horizon)
    return h.epsilon_start + frac * (h.epsilon_end - h.epsilon_start)


def learning_rate_value(h: Hyperparams, episode: int) -> float:
    return h.learning_rate * h.lr_decay ** (episode // h.lr_decay_every)


@dataclass
class LstmParams:
    """All weights of one network; every array is float64."""

    w_in: np.ndarray   # (H, d_in)
    b_in: np.ndarray   # (H,)
    W: np.ndarray      # (L, 4H, H) input-to-gate
    U: np.ndarray      # (L, 4H, H) hidden-to-gate
    b: np.ndarray      # (L, 4H)
    w_out: np.ndarray  # (n_out, H)
    b_out: np.ndarray  # (n_out,)

    @classmethod
    def init(cls, d_in: int, n_out: int, hidden: int, layers: int,
             scale: float, rng: np.random.Generator) -> "LstmParams":
        def u(*shape):
            return rng.uniform(-scale, scale, size=shape)

        return cls(w_in=u(hidden, d_in), b_in=u(hidden),
                   W=u(layers, 4 * hidden, hidden), U=u(layers, 4 * hidden, hidden),
                   b=u(layers, 4 * hidden), w_out=u(n_out, hidden), b_out=u(n_out))

    @property
    def hidden_size(self) -> int:
        return self.w_in.shape[0]

    @property
    def num_layers(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.w_out.shape[0]

    def copy(self) -> "LstmParams":
        return LstmParams(**{f.name: getattr(self, f.name).copy()
                             for f in dataclasses.fields(self)})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward_batch(params: LstmParams, xs: np.ndarray):
    """Run padded sequences through the network.

    xs: (B, T, d_in).  Returns (qs of shape (B, T, n_out), cache for
    backward_batch).  Hidden state starts at zero, as at an episode start.
    """
    B, T, _ = xs.shape
    H = params.hidden_size
    L = params.num_layers
    z = xs @ params.w_in.T + params.b_in
    cache_layers = []
    for l in range(L):
        W, U, bg = params.W[l], params.U[l], params.b[l]
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        gi = np.empty((B, T, H)); gf = np.empty((B, T, H))
        gg = np.empty((B, T, H)); go = np.empty((B, T, H))
        cs = np.empty((B, T, H)); tc = np.empty((B, T, H))
        hs = np.empty((B, T, H))
        for t in range(T):
            gates = z[:, t] @ W.T + h @ U.T + bg
            i = _sigmoid(gates[:, :H])
            f = _sigmoid(gates[:, H:2 * H])
            g = np.tanh(gates[:, 2 * H:3 * H])
            o = _sigmoid(gates[:, 3 * H:])
            c = f * c + i * g
            tch = np.tanh(c)
            h = o * tch
            gi[:, t] = i; gf[:, t] = f; gg[:, t] = g; go[:, t] = o
            cs[:, t] = c; tc[:, t] = tch; hs[:, t] = h
        cache_layers.append((z, gi, gf, gg, go, cs, tc, hs))
        z = hs
    qs = z @ params.w_out.T + params.b_out
    return qs, (xs, cache_layers)


def backward_batch(params: LstmParams, cache, dqs: np.ndarray) -> LstmParams:
    """Gradients of a loss whose dL/dq is dqs; returns them in params layout."""
    xs, cache_layers = cache
    B, T, H = cache_layers[-1][7].shape
    g = LstmParams(**{k: np.zeros_like(v) for k, v in params.arrays().items()})

    top_h = cache_layers[-1][7]
    g.w_out = np.einsum("btn,bth->nh", dqs, top_h)
    g.b_out = dqs.sum(axis=(0, 1))
    dz = dqs @ params.w_out

    for l in range(params.num_layers - 1, -1, -1):
        z, gi, gf, gg, go, cs, tc, hs = cache_layers[l]
        W, U = params.W[l], params.U[l]
        dW = np.zeros_like(W); dU = np.zeros_like(U); db = np.zeros(4 * H)
        dz_below = np.empty((B, T, H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            i = gi[:, t]; f = gf[:, t]; gb = gg[:, t]; o = go[:, t]
            dh = dz[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc[:, t] ** 2)
            c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
            dgates = np.concatenate([
                dc * gb * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - gb ** 2),
                dh * tc[:, t] * o * (1.0 - o),
            ], axis=1)
            dW += dgates.T @ z[:, t]
            dU += dgates.T @ h_prev
            db += dgates.sum(axis=0)
            dz_below[:, t] = dgates @ W
            dh_next = dgates @ U
            dc_next = dc * f
        g.W[l] = dW; g.U[l] = dU; g.b[l] = db
        dz = dz_below

    g.w_in = np.einsum("bth,btd->hd", dz, xs)
    g.b_in = dz.sum(axis=(0, 1))
    return g


class LstmNetwork:
    """Streaming wrapper: carries hidden state across the slots of an episode."""

    def __init__(self, params: LstmParams):
        self.params = params
        self.reset()

    def reset(self) -> None:
        self.h = np.zeros((self.params.num_layers, self.params.hidden_size))
        self.c = np.zeros_like(self.h)

    def step(self, x: np.ndarray) -> np.ndarray:
        """Advance one slot, returning the Q vector over the joint alphabet."""
        p = self.params
        x = np.asarray(x, dtype=float)
        if x.shape != (p.w_in.shape[1],):
            raise ValueError(f"state dimension {x.shape} != {(p.w_in.shape[1],)}")
        return _kernels.lstm_step(p.w_in, p.b_in, p.W, p.U, p.b,
                                  p.w_out, p.b_out, x, self.h, self.c)

    def forward(self, xs: np.ndarray) -> np.ndarray:
        """Consume a state sequence, returning the final-step Q vector."""
        xs = np.asarray(xs, dtype=float)
        q = None
        for t in range(xs.shape[0]):
            q = self.step(xs[t])
        return q


def sync_target(net: LstmNetwork, target_net: LstmNetwork) -> None:
    """Copy the main network's weights into the target network."""
    for name, arr in net.params.arrays().items():
        dst = getattr(target_net.params, name)
        if dst.shape != arr.shape:
            raise ValueError(f"architecture mismatch on {name}: "
                             f"{dst.shape} vs {arr.shape}")
    target_net.params = net.params.copy()


@dataclass
class Experience:
    state: np.ndarray
    action: int               # joint-action index
    reward: float
    next_state: np.ndarray
    done: bool
    next_feasible: np.ndarray  # feasible joint indices at the next slot

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float)
        self.next_state = np.asarray(self.next_state, dtype=float)
        self.next_feasible = np.asarray(self.next_feasible, dtype=np.int64)


@dataclass
class EpisodeData:
    """One episode flattened to arrays (states extended by the final next_state)."""

    xs_ext: np.ndarray    # (T+1, d_in)
    actions: np.ndarray   # (T,) int
    rewards: np.ndarray   # (T,)
    dones: np.ndarray     # (T,) bool
    mask: np.ndarray      # (T, n_out) bool, feasibility at the next slot

    @classmethod
    def from_experiences(cls, episode: list[Experience], n_out: int) -> "EpisodeData":
        T = len(episode)
        d = episode[0].state.shape[0]
        xs = np.empty((T + 1, d))
        actions = np.empty(T, dtype=np.int64)
        rewards = np.empty(T)
        dones = np.empty(T, dtype=bool)
        mask = np.zeros((T, n_out), dtype=bool)
        for t, e in enumerate(episode):
            xs[t] = e.state
            actions[t] = e.action
            rewards[t] = e.reward
            dones[t] = e.done
            if e.next_feasible.size:
                mask[t, e.next_feasible] = True
            elif not e.done:
                raise ValueError("non-terminal experience needs a feasible set")
        xs[T] = episode[-1].next_state
        return cls(xs, actions, rewards, dones, mask)

    def __len__(self) -> int:
        return self.actions.shape[0]


class ReplayBuffer:
    """Ring buffer of whole episodes, capacity counted in transitions."""

    def __init__(self, capacity: int, n_out: int):
        self.capacity = capacity
        self.n_out = n_out
        self._episodes: list[EpisodeData] = []
        self._transitions = 0

    def push_episode(self, episode) -> None:
        data = episode if isinstance(episode, EpisodeData) else \
            EpisodeData.from_experiences(episode, self.n_out)
        self._episodes.append(data)
        self._transitions += len(data)
        while self._transitions > self.capacity and len(self._episodes) > 1:
            self._transitions -= len(self._episodes.pop(0))

    def __len__(self) -> int:
        return self._transitions

    @property
    def n_episodes(self) -> int:
        return len(self._episodes)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[EpisodeData]:
        """Distinct episodes, in random order, totalling >= batch_size transitions
        (or the whole buffer if smaller)."""
        if not self._episodes:
            raise ValueError("cannot sample from an empty buffer")
        order = rng.permutation(len(self._episodes))
        batch, total = [], 0
        for idx in order:
            batch.append(self._episodes[idx])
            total += len(self._episodes[idx])
            if total >= batch_size:
                break
        return batch


def _as_episode_batch(batch, n_out: int) -> list[EpisodeData]:
    out = []
    for ep in batch:
        out.append(ep if isinstance(ep, EpisodeData)
                   else EpisodeData.from_experiences(list(ep), n_out))
    return out


def _train_step(net: LstmNetwork, target_net: LstmNetwork, batch, h: Hyperparams,
                double: bool) -> float:
    episodes = _as_episode_batch(batch, net.params.n_out)
    if not episodes:
        raise ValueError("batch must be non-empty")
    B = len(episodes)
    T = max(len(ep) for ep in episodes)
    d = episodes[0].xs_ext.shape[1]
    n_out = net.params.n_out

    xs = np.zeros((B, T + 1, d))
    actions = np.zeros((B, T), dtype=np.int64)
    rewards = np.zeros((B, T))
    dones = np.ones((B, T), dtype=bool)
    mask = np.zeros((B, T, n_out), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    for bi, ep in enumerate(episodes):
        L = len(ep)
        xs[bi, :L + 1] = ep.xs_ext
        actions[bi, :L] = ep.actions
        rewards[bi, :L] = ep.rewards
        dones[bi, :L] = ep.dones
        mask[bi, :L] = ep.mask
        valid[bi, :L] = True

    qs_main, cache = forward_batch(net.params, xs)
    qs_tgt, _ = forward_batch(target_net.params, xs)
    q_next_main = qs_main[:, 1:]
    q_next_tgt = qs_tgt[:, 1:]

    neg = np.full_like(q_next_main, -np.inf)
    bootstrap_src = q_next_main if double else q_next_tgt
    masked = np.where(mask, bootstrap_src, neg)
    has_feasible = mask.any(axis=2)
    safe_masked = np.where(has_feasible[:, :, None], masked, 0.0)
    if double:
        a_star = np.argmax(safe_masked, axis=2)
        boot = np.take_along_axis(q_next_tgt, a_star[:, :, None], axis=2)[:, :, 0]
    else:
        boot = safe_masked.max(axis=2)
    boot = np.where(dones | ~has_feasible, 0.0, boot)
    y = rewards + h.discount * boot

    q_pred = np.take_along_axis(qs_main[:, :T], actions[:, :, None], axis=2)[:, :, 0]
    err = np.where(valid, q_pred - y, 0.0)
    n_valid = valid.sum()
    loss = float((err ** 2).sum() / n_valid)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}; lower the learning rate")

    dqs = np.zeros((B, T + 1, n_out))
    scatter = np.zeros((B, T, n_out))
    np.put_along_axis(scatter, actions[:, :, None], (2.0 * err / n_valid)[:, :, None], axis=2)
    dqs[:, :T] = scatter
    grads = backward_batch(net.params, cache, dqs)

    lr = h.learning_rate
    for name, arr in net.params.arrays().items():
        arr -= lr * getattr(grads, name)
    return loss


def train_step_ddqn(net, target_net, batch, h: Hyperparams) -> float:
    """One SGD step on the double-DQN loss: the main net picks the next
    action, the target net evaluates it."""
    return _train_step(net, target_net, batch, h, double=True)


def train_step_dqn(net, target_net, batch, h: Hyperparams) -> float:
    """One SGD step on the plain DQN loss (target-net max bootstrap)."""
    return _train_step(net, target_net, batch, h, double=False)


def epsilon_greedy(q_values: np.ndarray, feasible: np.ndarray, epsilon: float,
                   rng: np.random.Generator) -> int:
    """Uniform feasible action with probability epsilon, else masked argmax
    (ties go to the lowest joint index)."""
    feasible = np.asarray(feasible, dtype=np.int64)
    if feasible.size == 0:
        raise ValueError("feasible action set is empty")
    if rng.random() < epsilon:
        return int(feasible[rng.integers(feasible.size)])
    return int(feasible[int(np.argmax(q_values[feasible]))])


def tabular_q_update(table: np.ndarray, s: int, a: int, r: float, s_next: int,
                     h: Hyperparams) -> np.ndarray:
    """Classic one-step Q-learning update on a dense table."""
    td = r + h.discount * table[s_next].max() - table[s, a]
    table[s, a] += h.learning_rate * td
    return table


class AgentLearner:
    """Main/target networks plus replay for one agent."""

    def __init__(self, agent_id: str, d_in: int, n_out: int, h: Hyperparams,
                 rng: np.random.Generator, double: bool = True):
        self.agent_id = agent_id
        self.h = h
        self.double = double
        params = LstmParams.init(d_in, n_out, h.hidden_size, h.num_layers,
                                 h.init_scale, rng)
        self.net = LstmNetwork(params)
        self.target_net = LstmNetwork(params.copy())
        self.buffer = ReplayBuffer(h.buffer_capacity, n_out)
        self.train_sessions = 0
        self.last_loss = float("nan")

    def begin_episode(self) -> None:
        self.net.reset()

    def step_q(self, state: np.ndarray) -> np.ndarray:
        return self.net.step(state)

    def record_episode(self, episode: list[Experience]) -> None:
        self.buffer.push_episode(episode)

    def train_session(self, episode: int, rng: np.random.Generator) -> float:
        """Run one training session (several SGD steps on fresh minibatches)."""
        h = dataclasses.replace(self.h,
                                learning_rate=learning_rate_value(self.h, episode))
        step = train_step_ddqn if self.double else train_step_dqn
        losses = []
        for _ in range(h.steps_per_train):
            batch = self.buffer.sample(h.batch_size, rng)
            losses.append(step(self.net, self.target_net, batch, h))
        self.train_sessions += 1
        if self.train_sessions % h.target_sync_every == 0:
            sync_target(self.net, self.target_net)
        self.last_loss = float(np.mean(losses))
        return self.last_loss
