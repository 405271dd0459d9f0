"""Fixed-step RK4 evolution of the reduced ODE system with thermally
sampled initial ensembles.

Thermal excitation enters only through the initial condition: every
excited coefficient is an independent zero-mean Gaussian with variance
epsilon^2 (the thermal energy per mode), and no noise is injected during
a run. All evolution is bitwise deterministic given (seed, config); a
checkpoint restores the exact coefficient vector, so a resumed run
reproduces the uninterrupted one bit for bit.
"""
from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSet, expand_poiseuille, mode_flow_rate, poiseuille
from .operators import CouplingTensor, LinearOperator, rhs


class TrajectoryAbort(RuntimeError):
    """Numeric failure (NaN/overflow) during time stepping."""

    def __init__(self, message: str, state: "TrajectoryState"):
        super().__init__(message)
        self.state = state


class PartialEnsembleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InitialSpec:
    """Thermal initial-state specification.

    excited is a tuple of basis indices; None selects the default family
    of all 2D antisymmetric modes (x and y branches) present in the basis.
    """

    epsilon_sq: float = 0.04
    seed: int = 0
    excited: tuple[int, ...] | None = None

    def __post_init__(self):
        if not (math.isfinite(self.epsilon_sq) and self.epsilon_sq > 0):
            raise ValueError("epsilon_sq must be finite and positive")


def default_excited_indices(basis: BasisSet) -> np.ndarray:
    """All 2D antisymmetric modes (both lateral branches) of the basis."""
    idx = [i for i, m in enumerate(basis)
           if m.key.d == 1 and m.key.s == 0 and (m.key.i_m == 0 or m.key.i_k == 0)]
    return np.asarray(idx, dtype=np.intp)


def sample_initial(spec: InitialSpec, basis: BasisSet,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw one initial coefficient vector; unexcited entries are exactly 0."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.excited is None:
        excited = default_excited_indices(basis)
    else:
        excited = np.asarray(spec.excited, dtype=np.intp)
        if len(excited) and (excited.min() < 0 or excited.max() >= len(basis)):
            raise IndexError("excited indices outside the basis")
    c = np.zeros(len(basis))
    c[excited] = rng.normal(0.0, math.sqrt(spec.epsilon_sq), size=len(excited))
    return c


@dataclass(frozen=True)
class TrajectoryState:
    """Coefficient vector at t = step_count * dt, plus provenance."""

    t: float
    c: np.ndarray
    dt: float
    step_count: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def _rk4(c: np.ndarray, dt: float, f) -> np.ndarray:
    k1 = f(c)
    k2 = f(c + (0.5 * dt) * k1)
    k3 = f(c + (0.5 * dt) * k2)
    k4 = f(c + dt * k3)
    return c + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def rk4_step(state: TrajectoryState, linop: LinearOperator,
             tensor: CouplingTensor | None) -> TrajectoryState:
    """One classical RK4 step of dc/dt = L c - N[c]."""
    c = _rk4(state.c, state.dt, lambda v: rhs(v, linop, tensor))
    if not np.all(np.isfinite(c)):
        raise TrajectoryAbort(
            f"non-finite coefficients after step {state.step_count + 1} "
            f"(t = {state.t + state.dt:.6g}); dt too large or runaway instability",
            state)
    return TrajectoryState(t=(state.step_count + 1) * state.dt, c=c,
                           dt=state.dt, step_count=state.step_count + 1,
                           seed=state.seed)


def default_time_step(linop: LinearOperator, max_growth: float = 0.0) -> float:
    """dt = min(0.01, 0.1/max|Real sigma|, 0.5/lambda_max): stability bound
    from the stiffest retained mode, validated by step-halving studies."""
    lam_max = 0.0
    for lat, idx in linop.block_index.items():
        lam_max = max(lam_max, float(np.max(-np.diag(linop.blocks[lat]))))
    dt = min(0.01, 0.5 / lam_max if lam_max > 0 else 0.01)
    if max_growth > 0:
        dt = min(dt, 0.1 / max_growth)
    return dt


@dataclass(frozen=True)
class Checkpoint:
    """Bit-faithful restart record."""

    step: int
    t: float
    dt: float
    c: np.ndarray
    seed: int | None
    config_hash: str = ""

    def to_json_dict(self) -> dict:
        return {"format": "channelmodes.checkpoint/1",
                "step": self.step, "t": self.t, "dt": self.dt,
                "n": len(self.c),
                "c_base64": base64.b64encode(np.ascontiguousarray(self.c).tobytes()).decode(),
                "dtype": str(self.c.dtype),
                "seed": self.seed, "config_hash": self.config_hash}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Checkpoint":
        c = np.frombuffer(base64.b64decode(doc["c_base64"]),
                          dtype=np.dtype(doc["dtype"])).copy()
        if len(c) != doc["n"]:
            raise ValueError("checkpoint length mismatch")
        return cls(step=doc["step"], t=doc["t"], dt=doc["dt"], c=c,
                   seed=doc["seed"], config_hash=doc.get("config_hash", ""))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class EvolutionResult:
    """Sampled trajectory: times and the coefficient matrix (rows = samples)."""

    times: np.ndarray
    coefficients: np.ndarray
    state: TrajectoryState
    checkpoints: list[Checkpoint] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    @property
    def n_samples(self) -> int:
        return len(self.times)


def evolve(c0: np.ndarray, linop: LinearOperator, tensor: CouplingTensor | None,
           dt: float, t_end: float, cadence: int = 1,
           checkpoint_every: int | None = None, config_hash: str = "",
           seed: int | None = None, t0: float = 0.0,
           step0: int = 0) -> EvolutionResult:
    """March dc/dt = L c - N[c] from t0 to t_end, sampling every `cadence`
    steps; on numeric failure the last good state is checkpointed and the
    partial series returned with aborted=True."""
    if dt <= 0 or cadence < 1:
        raise ValueError("dt must be positive and cadence >= 1")
    n_steps = int(round((t_end - t0) / dt))
    state = TrajectoryState(t=t0, c=np.array(c0, dtype=float, copy=True),
                            dt=dt, step_count=step0, seed=seed)
    times = [state.t]
    samples = [state.c.copy()]
    checkpoints: list[Checkpoint] = []
    f = lambda v: rhs(v, linop, tensor)  # noqa: E731

    def push_checkpoint(st: TrajectoryState):
        checkpoints.append(Checkpoint(step=st.step_count, t=st.t, dt=dt,
                                      c=st.c.copy(), seed=seed,
                                      config_hash=config_hash))

    aborted, reason = False, ""
    for i in range(n_steps):
        c = _rk4(state.c, dt, f)
        if not np.all(np.isfinite(c)):
            push_checkpoint(state)
            aborted = True
            reason = (f"non-finite coefficients after step {state.step_count + 1} "
                      f"(t = {(state.step_count + 1) * dt:.6g})")
            break
        state = TrajectoryState(t=(state.step_count + 1) * dt, c=c, dt=dt,
                                step_count=state.step_count + 1, seed=seed)
        done = state.step_count - step0
        if done % cadence == 0 or done == n_steps:
            times.append(state.t)
            samples.append(state.c.copy())
        if checkpoint_every and done % checkpoint_every == 0:
            push_checkpoint(state)
    return EvolutionResult(times=np.asarray(times),
                           coefficients=np.asarray(samples),
                           state=state, checkpoints=checkpoints,
                           aborted=aborted, abort_reason=reason)


def evolve_from_checkpoint(cp: Checkpoint, linop: LinearOperator,
                           tensor: CouplingTensor | None, t_end: float,
                           cadence: int = 1, checkpoint_every: int | None = None,
                           config_hash: str = "") -> EvolutionResult:
    """Continue a run bit-faithfully from a checkpoint."""
    if config_hash and cp.config_hash and config_hash != cp.config_hash:
        raise ValueError("checkpoint belongs to a different configuration")
    return evolve(cp.c, linop, tensor, cp.dt, t_end, cadence=cadence,
                  checkpoint_every=checkpoint_every,
                  config_hash=cp.config_hash or config_hash,
                  seed=cp.seed, t0=cp.t, step0=cp.step)


@dataclass
class EnsembleResult:
    """K thermally sampled trajectories plus per-sample averages."""

    times: np.ndarray
    trajectories: list[EvolutionResult]
    mean: dict
    seeds: list[int]
    requested: int

    @property
    def completed(self) -> int:
        return sum(not tr.aborted for tr in self.trajectories)

    @property
    def partial(self) -> bool:
        return self.completed < self.requested


def _trajectory_worker(payload):
    """Module-level worker so ensembles can run in process pools."""
    (child, spec, basis, linop, tensor, dt, t_end, cadence,
     checkpoint_every, config_hash) = payload
    rng = np.random.default_rng(child)
    c0 = sample_initial(spec, basis, rng=rng)
    return evolve(c0, linop, tensor, dt, t_end, cadence=cadence,
                  checkpoint_every=checkpoint_every,
                  config_hash=config_hash, seed=spec.seed)


def ensemble_run(k_trajectories: int, spec: InitialSpec, basis: BasisSet,
                 linop: LinearOperator, tensor: CouplingTensor | None,
                 dt: float, t_end: float, cadence: int = 1,
                 checkpoint_every: int | None = None,
                 config_hash: str = "",
                 base_amplitude: float = 1.0,
                 jobs: int = 1) -> EnsembleResult:
    """K independent trajectories with per-sample averaged observables.

    Trajectory i draws its initial state from the i-th child of
    SeedSequence(spec.seed), so the full ensemble is reproducible from the
    single root seed regardless of jobs. Averages (net flow rate, kinetic
    energy, coefficient norm) run over completed trajectories only; a
    PartialEnsembleWarning is raised when any trajectory aborted.
    """
    if k_trajectories < 1:
        raise ValueError("need at least one trajectory")
    children = np.random.SeedSequence(spec.seed).spawn(k_trajectories)
    pois = poiseuille(basis.cfg, amplitude=base_amplitude)
    q = np.asarray([mode_flow_rate(m, basis.cell) for m in basis])
    b, _ = expand_poiseuille(pois, basis)
    lam = basis.lambdas()

    payloads = [(children[i], spec, basis, linop, tensor, dt, t_end, cadence,
                 checkpoint_every, config_hash) for i in range(k_trajectories)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trajectories = list(pool.map(_trajectory_worker, payloads))
    else:
        trajectories = [_trajectory_worker(p) for p in payloads]
    seeds = [int(ch.generate_state(1)[0]) for ch in children]
    for i, tr in enumerate(trajectories):
        if tr.aborted:
            warnings.warn(f"trajectory {i} aborted: {tr.abort_reason}",
                          PartialEnsembleWarning, stacklevel=2)

    complete = [tr for tr in trajectories if not tr.aborted]
    if not complete:
        raise TrajectoryAbort("every ensemble trajectory aborted",
                              trajectories[0].state)
    times = complete[0].times
    Qs, Es, norms = [], [], []
    for tr in complete:
        C = tr.coefficients
        Qs.append(pois.flow_rate + C @ q)
        Wmat = C + b[None, :]
        Es.append(0.5 * np.einsum("ij,ij->i", Wmat, Wmat))
        norms.append(np.linalg.norm(C, axis=1))
    mean = {"flow_rate": np.mean(Qs, axis=0),
            "kinetic_energy": np.mean(Es, axis=0),
            "coefficient_norm": np.mean(norms, axis=0),
            "dissipation": np.mean([( (tr.coefficients + b[None, :]) ** 2 @ lam)
                                    for tr in complete], axis=0)}
    return EnsembleResult(times=times, trajectories=trajectories, mean=mean,
                          seeds=seeds, requested=k_trajectories)
