"""Datasets (including HER inversion), training, deployment and tracking metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .models import FcModel, FinDwhModel, FinModel, model_inputs, sequence_forward
from .signal import SavGolSpec, savgol_smooth, spline_acceleration
from .trajectory import ExecutionRecord, Trajectory

log = logging.getLogger(__name__)

POLE_LIMIT = 1.2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    window: int = 64
    epochs: int = 500
    patience: int = 20
    l2: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    lead_in: int = 20
    burn_in: int = 0
    min_epochs: int = 0
    curriculum: bool = False


DEFAULT_TRAIN = {
    "fin": TrainConfig(lr=1e-4, batch_size=32, window=1),
    "fc": TrainConfig(lr=2e-4, batch_size=24, window=1),
    "rnn": TrainConfig(lr=1.5e-4, batch_size=48),
    "dwh": TrainConfig(lr=1e-4, batch_size=32),
    "fin-dwh": TrainConfig(lr=1e-4, batch_size=32),
}


@dataclass
class SampleWindow:
    inputs: np.ndarray
    targets: np.ndarray
    record_id: int
    start: int


@dataclass
class TrainResult:
    model: nn.Module
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    initial_loss: float = float("nan")


def record_pairs(record: ExecutionRecord, lead_in: int = 0):
    """Eq.-1 inputs from ``record.desired`` and next-state targets from ``record.actual``.

    ``lead_in`` resting samples are prepended to both sides first.
    """
    des = record.desired.extended(lead_in, 0)
    act = record.actual.extended(lead_in, 0)
    x = model_inputs(des)
    y = np.hstack([act.positions[1:], act.velocities[1:]])
    return x, y


def build_fin_dataset(records, lead_in: int = 0):
    """Stack pointwise ``(inputs, targets)`` over records; records shorter than 2 are skipped."""
    xs, ys = [], []
    for k, rec in enumerate(records):
        if len(rec) < 2:
            log.warning("record %d has fewer than 2 samples; skipped", k)
            continue
        if rec.desired.accelerations is None or rec.actual.accelerations is None:
            raise ValueError(f"record {k} lacks accelerations")
        x, y = record_pairs(rec, lead_in)
        xs.append(x)
        ys.append(y)
    if not xs:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return np.vstack(xs), np.vstack(ys)


def her_invert(records):
    """Swap desired and actual: what was achieved becomes the goal, the command the label."""
    out = []
    for rec in records:
        if rec.actual.accelerations is None:
            raise ValueError("actual accelerations must be populated before inversion")
        out.append(replace(rec, desired=rec.actual, actual=rec.desired, inverted=not rec.inverted))
    return out


def build_windows(records, window: int, lead_in: int = 0, stride: int | None = None):
    """Contiguous windows of ``window`` samples from each record (record-major order)."""
    stride = stride or window
    out = []
    for k, rec in enumerate(records):
        if len(rec) < 2:
            continue
        x, y = record_pairs(rec, lead_in)
        n = x.shape[0]
        if n < window:
            continue
        starts = list(range(0, n - window + 1, stride))
        if starts[-1] != n - window:
            starts.append(n - window)
        for s in starts:
            out.append(SampleWindow(x[s:s + window], y[s:s + window], k, s))
    return out


def split_records(records, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_val = int(round(val_fraction * len(records)))
    if len(records) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(records) - 1)
    val = [records[i] for i in sorted(order[:n_val])]
    train = [records[i] for i in sorted(order[n_val:])]
    return train, val


class _SequenceData:
    """Padded per-record sequences with random window sampling."""

    def __init__(self, records, lead_in):
        pairs = [record_pairs(r, lead_in) for r in records if len(r) >= 2]
        self.x = [p[0] for p in pairs]
        self.y = [p[1] for p in pairs]
        self.lengths = np.array([len(v) for v in self.x])
        self.total = int(self.lengths.sum())

    def sample(self, rng, batch, window):
        weights = np.maximum(self.lengths - window + 1, 0).astype(float)
        if weights.sum() == 0:
            raise ValueError(f"no record is long enough for window {window}")
        rec = rng.choice(len(self.x), size=batch, p=weights / weights.sum())
        starts = [int(rng.integers(0, self.lengths[r] - window + 1)) for r in rec]
        xb = np.stack([self.x[r][s:s + window] for r, s in zip(rec, starts)])
        yb = np.stack([self.y[r][s:s + window] for r, s in zip(rec, starts)])
        return xb, yb

    def full_loss(self, model):
        """MSE over every full sequence, each starting from zero state."""
        se, count = 0.0, 0
        for x, y in zip(self.x, self.y):
            pred = _predict(model, x[None])[0]
            se += float(np.sum((pred - y) ** 2))
            count += y.size
        return se / max(count, 1)


def _predict(model, x):
    if isinstance(model, FinDwhModel):
        return model.dwh.forward(model.augment(x))
    if isinstance(model, (FinModel, FcModel)):
        return model.apply(x)
    return model.forward(x)


def _check_poles(model):
    layers = getattr(model, "lti_layers", lambda: [])()
    worst = max((float(layer.pole_moduli().max()) for layer in layers), default=0.0)
    if worst > POLE_LIMIT:
        raise TrainingError(f"E-TRAIN filter pole modulus {worst:.3f} exceeds {POLE_LIMIT}")
    return worst


def _curriculum_stages(records, cfg):
    """Training pools of growing difficulty: records up to each speed tier.

    The full pool is reached halfway through the epoch budget.
    """
    tiers = sorted({r.max_speed for r in records})
    return [_SequenceData([r for r in records if r.max_speed <= s], cfg.lead_in) for s in tiers]


def train_model(model: nn.Module, train_records, val_records, cfg: TrainConfig,
                sequence: bool = True, progress=None) -> TrainResult:
    """Minibatch Adam on MSE + L2 with early stopping on validation MSE.

    ``sequence=False`` trains pointwise (windows of one sample), as for FIN/FC.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.lr, l2=cfg.l2)
    train = _SequenceData(train_records, cfg.lead_in)
    val = _SequenceData(val_records, cfg.lead_in) if val_records else None
    if train.total == 0:
        raise TrainingError("E-TRAIN empty training set")
    stages = _curriculum_stages(train_records, cfg) if cfg.curriculum and sequence else None
    window = cfg.window if sequence else 1
    burn_in = cfg.burn_in if sequence else 0
    if burn_in >= window:
        raise ValueError("burn_in must be shorter than the window")
    if not sequence:
        flat_x = np.vstack(train.x)
        flat_y = np.vstack(train.y)
        steps = math.ceil(len(flat_x) / cfg.batch_size)
    else:
        steps = math.ceil(train.total / (window * cfg.batch_size))
    result = TrainResult(model)
    result.initial_loss = val.full_loss(model) if val else train.full_loss(model)
    best = (math.inf, [p.value.copy() for p in params])
    stale = 0
    for epoch in range(cfg.epochs):
        running = 0.0
        if not sequence:
            order = rng.permutation(len(flat_x))
        for step in range(steps):
            if stages:
                pool = stages[min(len(stages) - 1, epoch * len(stages) // max(1, cfg.epochs // 2))]
                xb, yb = pool.sample(rng, cfg.batch_size, window)
            elif sequence:
                xb, yb = train.sample(rng, cfg.batch_size, window)
            else:
                idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                xb, yb = flat_x[idx], flat_y[idx]
            pred = model.forward(xb)
            if burn_in:
                # zero-state transient at the window start is excluded from the loss
                loss, g = nn.mse_l2_loss(pred[:, burn_in:], yb[:, burn_in:], params, cfg.l2)
                grad = np.zeros_like(pred)
                grad[:, burn_in:] = g
            else:
                loss, grad = nn.mse_l2_loss(pred, yb, params, cfg.l2)
            if not math.isfinite(loss):
                raise TrainingError(f"E-TRAIN loss diverged at epoch {epoch} step {step}")
            model.backward(grad)
            opt.step()
            running += loss
        result.train_loss.append(running / steps)
        _check_poles(model)
        score = val.full_loss(model) if val else result.train_loss[-1]
        result.val_loss.append(score)
        if progress:
            progress(epoch, result.train_loss[-1], score)
        if score < best[0]:
            best = (score, [p.value.copy() for p in params])
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience and epoch + 1 >= cfg.min_epochs:
                break
    for p, v in zip(params, best[1]):
        p.value[...] = v
    return result


def train_fin(records, cfg: TrainConfig | None = None, n_joints: int | None = None, progress=None):
    cfg = cfg or DEFAULT_TRAIN["fin"]
    n_joints = n_joints or records[0].desired.n_joints
    train, val = split_records(records, cfg.val_fraction, cfg.seed)
    model = FinModel(n_joints, cfg.seed)
    return train_model(model, train, val, cfg, sequence=False, progress=progress)


def train_fin_dwh(inverted_records, fin: FinModel, cfg: TrainConfig | None = None, progress=None):
    cfg = cfg or DEFAULT_TRAIN["fin-dwh"]
    train, val = split_records(inverted_records, cfg.val_fraction, cfg.seed)
    model = FinDwhModel(fin.n_joints, fin, cfg.seed)
    return train_model(model, train, val, cfg, sequence=True, progress=progress)


def cumulative_error(desired, actual) -> float:
    """Average over time of the per-step sum of absolute joint errors."""
    d = np.asarray(desired, dtype=float)
    a = np.asarray(actual, dtype=float)
    if d.shape != a.shape:
        raise ValueError(f"length mismatch: {d.shape} vs {a.shape}")
    if d.ndim == 1:
        d, a = d[:, None], a[:, None]
    if d.shape[0] < 1:
        raise ValueError("need at least one sample")
    return float(np.mean(np.sum(np.abs(d - a), axis=1)))


def eef_error(cfg_arm, desired_q, actual_q) -> float:
    from .sim import forward_kinematics
    d = forward_kinematics(cfg_arm, desired_q)
    a = forward_kinematics(cfg_arm, actual_q)
    if d.shape != a.shape:
        raise ValueError("length mismatch")
    return float(np.mean(np.linalg.norm(d - a, axis=-1)))


def extra_time(record: ExecutionRecord, pos_tol: float = 0.01, vel_tol: float = 0.05,
               cap: float = 3.0):
    """Seconds past the nominal end until the arm first settles at the final point.

    Returns ``(seconds, capped)``.
    """
    dt = record.actual.dt
    goal = record.desired.positions[record.n_nominal - 1]
    q = record.actual.positions
    qd = record.actual.velocities
    ok = np.all(np.abs(q - goal) < pos_tol, axis=1) & np.all(np.abs(qd) < vel_tol, axis=1)
    idx = np.flatnonzero(ok[record.n_nominal - 1:])
    if idx.size == 0:
        return cap, True
    t = idx[0] * dt
    if t >= cap:
        return cap, True
    return max(t, 0.0), False


def confidence_interval_95(values):
    """Mean and normal-approximation half width ``1.96 s / sqrt(n)``."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least 2 values")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


# ---------------------------------------------------------------------------
# data generation, deployment and evaluation

DEFAULT_TIERS = (0.6, 0.8, 1.0)

REFERENCE = {
    "table1_e_pos_rad": {"Baseline": (0.069, 0.0062), "FIN-DWH": (0.036, 0.0033)},
    "table2_e_eef_cm": {"Baseline": 2.981, "FIN-DWH": 1.015},
    "table2_extra_time_s": {"Baseline": 0.75, "FIN-DWH": 0.06},
}


@dataclass(frozen=True)
class DatasetConfig:
    minutes: float = 45.0
    tiers: tuple = DEFAULT_TIERS
    waypoint_prob: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.minutes <= 0:
            raise ValueError("minutes must be positive")
        if not self.tiers or any(v <= 0 for v in self.tiers):
            raise ValueError("velocity tiers must be positive")


def generate_dataset(arm, cfg: DatasetConfig, progress=None):
    """Execute random functional trajectories until each tier holds ``minutes / len(tiers)``.

    Each tier overshoots its share by at most one trajectory.
    """
    from .sim import execute_trajectory
    from .trajectory import generate_functional_trajectory
    records = []
    share = cfg.minutes * 60.0 / len(cfg.tiers)
    for tier_index, speed in enumerate(cfg.tiers):
        rng = np.random.default_rng([cfg.seed, tier_index])
        total = 0.0
        while total < share:
            traj = generate_functional_trajectory(rng, arm.n_joints, speed, arm.joint_limits,
                                                  cfg.waypoint_prob, dt=arm.command_dt)
            seed = len(records)
            records.append(execute_trajectory(arm, traj, max_speed=speed, seed=seed))
            total += traj.duration
            if progress:
                progress(len(records), speed, total)
    return records


def tier_minutes(records):
    out = {}
    for r in records:
        out[r.max_speed] = out.get(r.max_speed, 0.0) + r.desired.slice(0, r.n_nominal).duration / 60.0
    return out


def held_out_trajectories(arm, n: int, max_speed: float, seed: int, waypoint_prob: float = 0.6):
    """Held-out trajectories from a seed stream disjoint from the training data."""
    from .trajectory import generate_functional_trajectory
    rng = np.random.default_rng([seed, 7919])
    return [generate_functional_trajectory(rng, arm.n_joints, max_speed, arm.joint_limits,
                                           waypoint_prob, dt=arm.command_dt) for _ in range(n)]


@dataclass(frozen=True)
class DeployConfig:
    """Context padding around the desired trajectory when generating commands."""

    lead_in: int = 20
    tail: int = 60
    smoothing: SavGolSpec = SavGolSpec()


def feedforward_commands(model, desired: Trajectory, cfg: DeployConfig = DeployConfig()) -> Trajectory:
    """Learned command sequence for ``desired``: model output, smoothed, with spline accelerations.

    The first command equals the first desired state; the model supplies
    sample t+1 from the desired transition t -> t+1. ``tail`` resting samples
    let the filters settle so the held final command is a steady-state one.
    """
    n = desired.n_joints
    ext = desired.extended(cfg.lead_in, cfg.tail)
    if ext.accelerations is None:
        raise ValueError("desired trajectory needs accelerations")
    out = sequence_forward(model, ext)
    pos = np.vstack([ext.positions[:1], out[:, :n]])[cfg.lead_in:]
    vel = np.vstack([np.zeros((1, n)), out[:, n:]])[cfg.lead_in:]
    if len(pos) >= cfg.smoothing.window:
        pos = savgol_smooth(pos, cfg.smoothing)
        vel = savgol_smooth(vel, cfg.smoothing)
    return Trajectory(pos, vel, spline_acceleration(vel, desired.dt), desired.dt)


def trajectory_metrics(arm, record: ExecutionRecord) -> dict:
    nom = record.nominal()
    d, a = nom.desired, nom.actual
    extra, capped = extra_time(record, arm.pos_tol, arm.vel_tol)
    return {
        "e_pos": cumulative_error(d.positions, a.positions),
        "e_vel": cumulative_error(d.velocities, a.velocities),
        "e_eef": eef_error(arm, d.positions, a.positions),
        "extra_time": extra,
        "capped": capped,
    }


def _run_one(args):
    import time as _time
    from .sim import execute_trajectory
    arm, model, desired, payload, deploy = args
    t0 = _time.perf_counter()
    commands = desired if model is None else feedforward_commands(model, desired, deploy)
    infer = _time.perf_counter() - t0
    record = execute_trajectory(arm, commands, payload=payload, desired=desired)
    m = trajectory_metrics(arm, record)
    m["inference_s"] = infer
    return m


def evaluate_model(arm, model, trajectories, payload: float = 0.0,
                   deploy: DeployConfig = DeployConfig(), jobs: int = 1):
    """Per-trajectory metrics; ``model=None`` runs the bare controller."""
    tasks = [(arm, model, t, payload, deploy) for t in trajectories]
    if jobs <= 1 or len(tasks) < 2:
        return [_run_one(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


METRICS = ("e_pos", "e_vel", "e_eef", "extra_time")


@dataclass
class MetricsReport:
    """Aggregates per model (and per condition, e.g. speed or payload)."""

    experiment: str
    rows: list = field(default_factory=list)
    per_trajectory: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)

    def row(self, model, condition=None) -> dict:
        for r in self.rows:
            if r["model"] == model and r.get("condition") == condition:
                return r
        raise KeyError(f"no row for {model!r} at {condition!r}")

    def models(self):
        out = []
        for r in self.rows:
            if r["model"] not in out:
                out.append(r["model"])
        return out


def summarize(per_traj, baseline=None) -> dict:
    row = {}
    for key in METRICS:
        vals = [m[key] for m in per_traj]
        mean, hw = confidence_interval_95(vals) if len(vals) > 1 else (float(vals[0]), 0.0)
        row[key] = mean
        row[key + "_ci"] = hw
        if baseline is not None and baseline[key] > 0:
            row[key + "_improvement_pct"] = 100.0 * (1.0 - mean / baseline[key])
    row["n_capped"] = int(sum(m["capped"] for m in per_traj))
    row["inference_s"] = float(np.mean([m["inference_s"] for m in per_traj]))
    return row


@dataclass(frozen=True)
class ExperimentConfig:
    n_tests: int = 100
    max_speed: float = 1.0
    speeds: tuple = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2)
    speed_tests: int = 20
    payloads: tuple = (0.25, 0.5, 1.1)
    payload_tests: int = 20
    seed: int = 0
    deploy: DeployConfig = DeployConfig()


ABLATION_ORDER = ("Baseline", "FC", "RNN", "DWH", "FIN-DWH")
EXPERIMENTS = ("ablation_table", "speed_sweep", "payload_study")


def run_experiment(kind: str, arm, cfg: ExperimentConfig, models: dict, jobs: int = 1,
                   progress=None) -> MetricsReport:
    """``models`` maps display names to trained models (``Baseline`` needs none).

    Rows follow ``ABLATION_ORDER`` restricted to the supplied names.
    """
    if kind not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {kind!r}; valid: {', '.join(EXPERIMENTS)}")
    names = [n for n in ABLATION_ORDER if n == "Baseline" or n in models]
    unknown = set(models) - set(ABLATION_ORDER)
    if unknown:
        raise ValueError(f"unknown model names {sorted(unknown)}")
    report = MetricsReport(kind)
    if kind == "ablation_table":
        tests = held_out_trajectories(arm, cfg.n_tests, cfg.max_speed, cfg.seed)
        report.reference = {k: REFERENCE[k] for k in REFERENCE}
        _fill(report, arm, names, models, tests, 0.0, None, cfg, jobs, progress)
    elif kind == "speed_sweep":
        for speed in cfg.speeds:
            tests = held_out_trajectories(arm, cfg.speed_tests, speed, cfg.seed)
            _fill(report, arm, ["Baseline"], models, tests, 0.0, speed, cfg, jobs, progress)
    else:
        missing = [] if "FIN-DWH" in models else ["FIN-DWH"]
        if missing:
            raise ValueError("E-EVAL payload study needs weights for FIN-DWH")
        tests = held_out_trajectories(arm, cfg.payload_tests, cfg.max_speed, cfg.seed)
        for payload in cfg.payloads:
            _fill(report, arm, ["Baseline", "FIN-DWH"], models, tests, payload, payload, cfg, jobs, progress)
    return report


def _fill(report, arm, names, models, tests, payload, condition, cfg, jobs, progress):
    base = None
    for name in names:
        per = evaluate_model(arm, models.get(name), tests, payload, cfg.deploy, jobs)
        row = summarize(per, base if name != "Baseline" else None)
        row = {"model": name, "condition": condition, **row}
        if name == "Baseline":
            base = row
        report.rows.append(row)
        report.per_trajectory[(name, condition)] = per
        if progress:
            progress(name, condition, row)


# ---------------------------------------------------------------------------
# end-to-end benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    n_joints: int = 3
    dataset: DatasetConfig = DatasetConfig()
    seeds: tuple = (0, 1, 2)
    n_tests: int = 100
    max_speed: float = 1.0
    min_epochs: int = 150
    max_epochs: int = 500
    fin_max_epochs: int = 200


def _bench_cfg(name, seed, bench: BenchmarkConfig):
    base = DEFAULT_TRAIN[name]
    if name == "fin":
        return replace(base, seed=seed, epochs=bench.fin_max_epochs)
    return replace(base, seed=seed, epochs=bench.max_epochs, min_epochs=bench.min_epochs)


def run_benchmark(bench: BenchmarkConfig = BenchmarkConfig(), arm=None, log_fn=None) -> dict:
    """Baseline vs DWH vs FIN-DWH on one seeded dataset, medians over training seeds.

    One FIN (first seed) is shared by every FIN-DWH run.
    """
    import time as _time
    from .models import build_dwh
    from .sim import ArmConfig
    say = log_fn or (lambda msg: log.info(msg))
    arm = arm or ArmConfig(n_joints=bench.n_joints)
    t0 = _time.perf_counter()
    records = generate_dataset(arm, bench.dataset)
    say(f"dataset: {len(records)} records, {sum(tier_minutes(records).values()):.1f} min "
        f"({_time.perf_counter() - t0:.0f} s)")
    fin = train_fin(records, _bench_cfg("fin", bench.seeds[0], bench)).model
    fin_digest = nn.parameter_digest(fin.parameters())
    say(f"fin trained ({_time.perf_counter() - t0:.0f} s)")
    inverted = her_invert(records)
    tests = held_out_trajectories(arm, bench.n_tests, bench.max_speed, bench.dataset.seed)
    base = summarize(evaluate_model(arm, None, tests))
    out = {"baseline": base, "dwh": [], "fin-dwh": [], "models": {"dwh": [], "fin-dwh": []},
           "fin": fin, "fin_digest_before": fin_digest, "arm": arm,
           "her_involution_bitwise": _involution_bitwise(records, inverted)}
    for seed in bench.seeds:
        for name in ("dwh", "fin-dwh"):
            cfg = _bench_cfg(name, seed, bench)
            train, val = split_records(inverted, cfg.val_fraction, seed)
            model = build_dwh(bench.n_joints, seed=seed) if name == "dwh" else FinDwhModel(bench.n_joints, fin, seed)
            res = train_model(model, train, val, cfg)
            row = summarize(evaluate_model(arm, res.model, tests), base)
            row.update(seed=seed, epochs=len(res.val_loss), best_val=min(res.val_loss))
            out[name].append(row)
            out["models"][name].append(res.model)
            say(f"{name} seed {seed}: e_pos {row['e_pos']:.4f} extra {row['extra_time']:.3f} "
                f"epochs {row['epochs']} ({_time.perf_counter() - t0:.0f} s)")
    for name in ("dwh", "fin-dwh"):
        out[name + "_median"] = {k: float(np.median([r[k] for r in out[name]])) for k in METRICS}
    out["fin_digest_after"] = nn.parameter_digest(fin.parameters())
    out["runtime_s"] = _time.perf_counter() - t0
    return out


def _involution_bitwise(records, inverted) -> bool:
    back = her_invert(inverted)
    return all(a.desired.states().tobytes() == b.desired.states().tobytes()
               and a.actual.states().tobytes() == b.actual.states().tobytes()
               for a, b in zip(records, back))
