"""Displacement policy: cloud assembly, forward network, geometric losses
with analytic gradients chained through forward kinematics, and the
Adam training loop."""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import robot as rb
from .errors import NonFiniteLoss
from .robot import GRIPPER_PROXY_SPHERES
from .scene import per_primitive_sdf, per_primitive_sdf_grad, sample_surface_cloud

DEFAULT_BUDGETS = (512, 256, 512)     # obstacle / robot / target point counts
WORKSPACE_CENTER = np.array([0.0, 0.0, 0.5])
WORKSPACE_RADIUS = 1.1                # m, observation crop around the arm
OUTPUT_SCALE = 0.01                   # expert steps are ~0.02 normalized, so the
                                      # decoder learns O(1) outputs
CLASS_OBSTACLE, CLASS_ROBOT, CLASS_TARGET = 0, 1, 2
NOISE_SIGMA = 0.005                   # rad, input-side label noise
LAMBDA_COLLISION = 1.0
_TARGET_CLOUD_SEED = 20240118

# paper-scale hidden widths; the desk profile divides the hidden layers by 4
# while keeping the 7-in / 64-out interface of the configuration encoder
_CONFIG_HIDDEN = {"desk": (8, 16, 32, 32), "paper-shapes": (32, 64, 128, 128)}
_CONFIG_OUT = 64
_DECODER_HIDDEN = {"desk": (128, 64, 32), "paper-shapes": (512, 256, 128)}


def _gripper_target_cloud(n=128):
    """Fixed point set on the gripper proxy spheres, in the gripper frame."""
    rng = np.random.default_rng(_TARGET_CLOUD_SEED)
    offs = np.array([o for o, _ in GRIPPER_PROXY_SPHERES])
    radii = np.array([r for _, r in GRIPPER_PROXY_SPHERES])
    areas = radii ** 2
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[0] += n - counts.sum()
    pts = []
    for c, (off, rad) in zip(counts, zip(offs, radii)):
        v = rng.normal(size=(c, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts.append(off + rad * v)
    return np.vstack(pts)


_TARGET_LOCAL = _gripper_target_cloud()


def _mlp(widths, rng):
    layers = []
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1], rng))
        if i < len(widths) - 2:
            layers.extend([nn.GroupNorm(widths[i + 1]), nn.LeakyReLU()])
    return layers


@dataclass
class PolicyParams:
    """Encoder, configuration encoder, and displacement decoder."""

    encoder: nn.EncoderParams
    config_encoder: list
    decoder: list
    profile: str = "desk"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        dec_in = self.decoder[0].W.shape[1]
        assert dec_in == self.encoder.embedding_dim + _CONFIG_OUT
        assert self.decoder[-1].W.shape[0] == 7

    def named_tensors(self):
        out = [("encoder." + n, t, g) for n, t, g in self.encoder.named_tensors()]
        for prefix, layers in (("config", self.config_encoder), ("decoder", self.decoder)):
            for li, layer in enumerate(layers):
                for name, t, g in layer.tensors():
                    out.append((f"{prefix}.layer{li}.{name}", t, g))
        return out

    def zero_grad(self):
        self.encoder.zero_grad()
        for layer in self.config_encoder + self.decoder:
            layer.zero_grad()


def build_policy(profile="desk", rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    encoder = nn.build_encoder(profile, c_in=6, rng=rng)
    config_encoder = _mlp((7,) + _CONFIG_HIDDEN[profile] + (_CONFIG_OUT,), rng)
    decoder = _mlp((encoder.embedding_dim + _CONFIG_OUT,)
                   + _DECODER_HIDDEN[profile] + (7,), rng)
    return PolicyParams(encoder, config_encoder, decoder, profile)


@dataclass
class TrainingExample:
    """One expert transition: act like the expert did at q_t."""

    scene_ref: object
    q_t: np.ndarray
    q_next: np.ndarray
    target: object            # Pose, post-revision for hybrid data
    example_id: str = ""

    def __post_init__(self):
        self.q_t = np.asarray(self.q_t, dtype=float)
        self.q_next = np.asarray(self.q_next, dtype=float)


@dataclass
class LossBreakdown:
    bc: float
    collision: float
    lam: float = LAMBDA_COLLISION

    def __post_init__(self):
        assert self.bc >= 0.0 and self.collision >= 0.0

    @property
    def total(self):
        return self.bc + self.lam * self.collision


def _workspace_cloud(scene, n, rng):
    """Surface cloud rejection-cropped to the ball the arm can reach.

    Without the crop a room-sized floor slab soaks up most of the point
    budget and the downsampling stages never visit the task region.
    """
    chunks, got = [], 0
    for _ in range(32):
        cand = sample_surface_cloud(scene, max(2 * (n - got), 64), rng)
        keep = cand[np.linalg.norm(cand - WORKSPACE_CENTER, axis=1) <= WORKSPACE_RADIUS]
        if len(keep):
            chunks.append(keep)
            got += len(keep)
        if got >= n:
            break
    if got == 0:
        return sample_surface_cloud(scene, n, rng)
    pts = np.vstack(chunks)
    if len(pts) < n:
        pts = pts[np.arange(n) % len(pts)]
    return pts[:n]


def assemble_input(example, robot, rng, cloud_budget=DEFAULT_BUDGETS,
                   noise_sigma=NOISE_SIGMA, obstacle_points=None):
    """Segmented cloud + normalized noisy configuration for one example.

    Noise perturbs only the input side (the robot points and the returned
    configuration); the expert label q_next is never touched.  Passing
    obstacle_points (for example from a partial depth view) replaces the
    full-scene surface sampling.
    """
    n_obs, n_rob, n_tgt = cloud_budget
    assert min(n_obs, n_rob, n_tgt) >= 1
    q_noisy = example.q_t + rng.normal(0.0, noise_sigma, size=7)
    q_noisy = robot.clamp(q_noisy)

    if obstacle_points is not None:
        obs_pts = np.atleast_2d(np.asarray(obstacle_points, dtype=float))
        sel = (np.arange(n_obs) % len(obs_pts) if len(obs_pts) < n_obs
               else rng.choice(len(obs_pts), size=n_obs, replace=False))
        obs_pts = obs_pts[sel]
    else:
        obs_pts = _workspace_cloud(example.scene_ref, n_obs, rng)
    anchors = rb.surface_points(robot, q_noisy)
    if n_rob <= len(anchors):
        sel = rng.choice(len(anchors), size=n_rob, replace=False)
    else:
        sel = rng.choice(len(anchors), size=n_rob, replace=True)
    rob_pts = anchors[sel]
    tgt_local = _TARGET_LOCAL if n_tgt == len(_TARGET_LOCAL) else _gripper_target_cloud(n_tgt)
    tgt_pts = example.target.apply(tgt_local)

    points = np.vstack([obs_pts, rob_pts, tgt_pts])
    labels = np.concatenate([np.full(n_obs, CLASS_OBSTACLE),
                             np.full(n_rob, CLASS_ROBOT),
                             np.full(n_tgt, CLASS_TARGET)])
    return nn.cloud_from_labels(points, labels), rb.normalize_config(robot, q_noisy)


def policy_forward(params, cloud, qn, rng):
    """Normalized-space displacement for one (cloud, configuration) pair."""
    emb = nn.encode_cloud(cloud, params.encoder, rng)
    x = np.atleast_2d(np.asarray(qn, dtype=float))
    for layer in params.config_encoder:
        x = layer.forward(x)
    joint = np.concatenate([emb, x[0]])[None, :]
    y = joint
    for layer in params.decoder:
        y = layer.forward(y)
    params._cache = {"emb_dim": len(emb)}
    return OUTPUT_SCALE * y[0]


def policy_backward(params, g_dqn):
    """Accumulate parameter gradients from a displacement gradient."""
    g = OUTPUT_SCALE * np.atleast_2d(np.asarray(g_dqn, dtype=float))
    for layer in reversed(params.decoder):
        g = layer.backward(g)
    d = params._cache["emb_dim"]
    nn.encode_backward(params.encoder, g[0, :d])
    gc = g[:, d:]
    for layer in reversed(params.config_encoder):
        gc = layer.backward(gc)


def policy_step(robot, q_t, dqn):
    """Add the displacement in normalized space, clamp to [-1, 1], unnormalize."""
    qn = rb.normalize_config(robot, q_t)
    return rb.unnormalize_config(robot, qn + np.asarray(dqn, dtype=float))


def _step_chain(robot, q_t, dqn):
    """q_hat plus d(q_hat)/d(dqn) as a diagonal (clamp mask times scale)."""
    qn = rb.normalize_config(robot, q_t) + np.asarray(dqn, dtype=float)
    mask = (qn > -1.0) & (qn < 1.0)
    lo, hi = robot.limits[:, 0], robot.limits[:, 1]
    q_hat = rb.unnormalize_config(robot, qn)
    return q_hat, mask * (hi - lo) / 2.0


def loss_bc(robot, q_t, dqn, q_next):
    """Sum of L2 and L1 distances between predicted and expert surface points.

    Returns (loss, gradient w.r.t. the normalized displacement); the gradient
    chains through the clamp mask and the per-point link Jacobians.
    """
    q_hat, diag = _step_chain(robot, q_t, dqn)
    x_hat, J = rb.surface_point_jacobians(robot, q_hat)
    x_ref = rb.surface_points(robot, np.asarray(q_next, dtype=float))
    r = x_hat - x_ref
    norms = np.linalg.norm(r, axis=1)
    loss = float(np.sum(norms) + np.sum(np.abs(r)))
    safe = np.where(norms > 1e-12, norms, 1.0)
    g_pts = r / safe[:, None] * (norms > 1e-12)[:, None] + np.sign(r)
    g_q = np.einsum("ni,nij->j", g_pts, J)
    return loss, g_q * diag


def loss_collision(robot, q_t, dqn, scene):
    """Hinge penalty on predicted surface points penetrating any primitive.

    Per point and per primitive: max(-sdf, 0), with zero subgradient exactly
    on the boundary.  Returns (loss, gradient w.r.t. the displacement).
    """
    q_hat, diag = _step_chain(robot, q_t, dqn)
    x_hat, J = rb.surface_point_jacobians(robot, q_hat)
    D = per_primitive_sdf(scene, x_hat)          # (P, N)
    inside = D < 0.0
    loss = float(np.sum(-D[inside]))
    if not np.any(inside):
        return loss, np.zeros(7)
    G = per_primitive_sdf_grad(scene, x_hat)     # (P, N, 3)
    g_pts = -np.einsum("pn,pni->ni", inside.astype(float), G)
    g_q = np.einsum("ni,nij->j", g_pts, J)
    return loss, g_q * diag


def example_loss(params, example, robot, rng, lam=LAMBDA_COLLISION,
                 cloud_budget=DEFAULT_BUDGETS, noise_sigma=NOISE_SIGMA,
                 accumulate=True):
    """Forward + losses for one example; optionally backprop into params."""
    cloud, qn = assemble_input(example, robot, rng, cloud_budget, noise_sigma)
    q_in = rb.unnormalize_config(robot, qn)
    dqn = policy_forward(params, cloud, qn, rng)
    bc, g_bc = loss_bc(robot, q_in, dqn, example.q_next)
    col, g_col = loss_collision(robot, q_in, dqn, example.scene_ref)
    breakdown = LossBreakdown(bc, col, lam)
    if not np.isfinite(breakdown.total):
        raise NonFiniteLoss(example.example_id)
    if accumulate:
        policy_backward(params, g_bc + lam * g_col)
    return breakdown


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lam: float = LAMBDA_COLLISION
    noise_sigma: float = NOISE_SIGMA
    cloud_budget: tuple = DEFAULT_BUDGETS
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    profile: str = "desk"

    def to_dict(self):
        return {"lr": self.lr, "lam": self.lam, "noise_sigma": self.noise_sigma,
                "cloud_budget": list(self.cloud_budget), "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed,
                "profile": self.profile}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "cloud_budget" in d:
            d["cloud_budget"] = tuple(d["cloud_budget"])
        return cls(**d)


class Adam:
    """Standard Adam on a list of (name, tensor, grad) triples."""

    def __init__(self, named_tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = named_tensors
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t) for _, t, _ in named_tensors]
        self.v = [np.zeros_like(t) for _, t, _ in named_tensors]
        self.t = 0

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for (_, p, g), m, v in zip(self.named, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def train(params, dataset, config, robot=None, log=None):
    """Minibatch Adam over expert transitions with per-example frozen clouds.

    Each example's observation cloud and input noise are drawn once up
    front from counter-derived rngs, so the objective is a fixed empirical
    risk; resampling clouds every epoch makes the per-example gradient so
    noisy that the encoder pathway never trains.  Deterministic given
    config.seed regardless of worker scheduling.  Returns the per-epoch
    list of mean LossBreakdown values.
    """
    assert len(dataset) > 0
    robot = rb.default_robot() if robot is None else robot
    opt = Adam(params.named_tensors(), config.lr)
    n_obs, n_rob, n_tgt = config.cloud_budget
    labels = np.concatenate([np.full(n_obs, CLASS_OBSTACLE),
                             np.full(n_rob, CLASS_ROBOT),
                             np.full(n_tgt, CLASS_TARGET)])
    frozen = []
    for j, ex in enumerate(dataset):
        r = np.random.default_rng([config.seed, 0, 1, j])
        cloud, qn = assemble_input(ex, robot, r, config.cloud_budget,
                                   config.noise_sigma)
        frozen.append((cloud.points.astype(np.float32), qn))
    batches_per_epoch = int(np.ceil(len(dataset) / config.batch_size))
    total_steps = max(1, config.epochs * batches_per_epoch)
    step = 0
    curve = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch, 0]).permutation(len(dataset))
        bc_sum = col_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            # cosine decay to zero; the imitation loss is L1-like, so a
            # constant step size oscillates instead of converging
            opt.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            batch = order[lo:lo + config.batch_size]
            params.zero_grad()
            for j in batch:
                ex = dataset[j]
                pts, qn = frozen[j]
                cloud = nn.cloud_from_labels(pts.astype(float), labels)
                q_in = rb.unnormalize_config(robot, qn)
                enc_rng = np.random.default_rng([config.seed, 2, int(j)])
                dqn = policy_forward(params, cloud, qn, enc_rng)
                bc, g_bc = loss_bc(robot, q_in, dqn, ex.q_next)
                col, g_col = loss_collision(robot, q_in, dqn, ex.scene_ref)
                if not np.isfinite(bc + config.lam * col):
                    raise NonFiniteLoss(ex.example_id)
                policy_backward(params, g_bc + config.lam * g_col)
                bc_sum += bc
                col_sum += col
            for _, _, g in opt.named:
                g /= len(batch)
            if config.lr > 0.0:
                opt.step()
        mean = LossBreakdown(bc_sum / len(order), col_sum / len(order), config.lam)
        curve.append(mean)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} "
                f"bc {mean.bc:.4f} collision {mean.collision:.4f} total {mean.total:.4f}")
    return curve


def save_policy(path, params, config=None):
    extra = {"config": config.to_dict()} if config is not None else None
    nn.save_checkpoint(path, params.named_tensors(), params.profile, extra=extra)


def load_policy(path):
    header, tensors = nn.load_checkpoint(path)
    params = build_policy(header["profile"], rng=np.random.default_rng(0))
    nn.restore_tensors(params.named_tensors(), tensors)
    return params, header
