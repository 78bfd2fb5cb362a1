"""Coverage-guided differential fuzzing loop.

Each test input seeds a FIFO queue. Every popped seed is predicted, m target
neurons are selected, and a joint objective (top-k other-class confidence
minus original-class confidence, plus weighted target-neuron outputs) is
differentiated with respect to the input. The processed gradient is applied
cumulatively iter_times times; each mutant's trace is folded into the shared
coverage tracker. A mutant survives as a new seed only while it looks like
the original (label unchanged, relative L2 distance within distance_max) and
still buys enough new coverage; a label flip is recorded as adversarial and
ends that seed's mutation run.

Adversarial detection needs no ground-truth labels: the model's prediction on
the original input is the reference, so any flip is a behavioral
inconsistency by construction.
"""

from __future__ import annotations

import json
import time
from collections import Counter, deque
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import coverage as cov
from . import nn
from .errors import ContractViolation
from .tensor import Tensor, clip, elementwise_add, l2_norm

GRAD_MODES = ("sign", "scaled_raw")
MUTATION_MODES = ("guided", "random")

# per-mode step defaults; sign steps are per-pixel, scaled_raw steps are an
# absolute L2 budget per iteration (see FuzzConfig docstring)
_STEP_DEFAULTS = {"sign": 0.01, "scaled_raw": 1.2}


@dataclass(frozen=True)
class FuzzConfig:
    """Campaign hyperparameters. Defaults hold for every knob.

    use_logits moves the class terms of the objective from post-softmax
    confidences to pre-softmax logits; confidences are the default.

    step_size left as None picks the per-mode default: sign flips each pixel
    by a fixed 0.01, so its step is that pixel amount; scaled_raw normalizes
    the gradient to unit L2 first, so its step is an absolute L2 budget per
    iteration and needs to be on the scale of the input norm to matter.
    """

    k: int = 4
    m: int = 10
    strategies: tuple[int, ...] = (1,)
    lam: float = 1.0
    iter_times: int = 3
    activation_threshold: float = 0.25
    distance_max: float = 0.02
    coverage_gain_initial: float = 0.01
    coverage_gain_decay: float = 0.9
    coverage_gain_floor: float = 0.001
    grad_mode: str = "scaled_raw"
    step_size: float | None = None
    max_seeds_per_input: int = 64
    pixel_range: tuple[float, float] = (0.0, 1.0)
    recompute_grad_each_iter: bool = False
    use_logits: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "pixel_range", tuple(self.pixel_range))
        if self.step_size is None:
            object.__setattr__(
                self, "step_size", _STEP_DEFAULTS.get(self.grad_mode, 0.01)
            )
        if self.k < 1 or self.m < 1 or self.iter_times < 1:
            raise ContractViolation("k, m and iter_times must all be >= 1")
        if not 0 < self.coverage_gain_decay <= 1:
            raise ContractViolation("coverage_gain_decay must be in (0, 1]")
        if self.distance_max <= 0:
            raise ContractViolation("distance_max must be positive")
        if not 0 < self.activation_threshold < 1:
            raise ContractViolation("activation_threshold must be in (0, 1)")
        if self.grad_mode not in GRAD_MODES:
            raise ContractViolation(f"grad_mode must be one of {GRAD_MODES}")
        if self.step_size <= 0:
            raise ContractViolation("step_size must be positive")
        if self.max_seeds_per_input < 1:
            raise ContractViolation("max_seeds_per_input must be >= 1")
        lo, hi = self.pixel_range
        if not lo < hi:
            raise ContractViolation("pixel_range must satisfy lo < hi")

    def gain_requirement(self, seeds_processed: int) -> float:
        """Coverage-gain ratio a mutant must reach to stay in the queue;
        decays geometrically with the number of seeds already processed."""
        return max(
            self.coverage_gain_initial * self.coverage_gain_decay**seeds_processed,
            self.coverage_gain_floor,
        )

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FuzzConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class _Seed:
    x: Tensor
    generation: int
    trace: nn.ActivationTrace


class SeedQueue:
    """FIFO of seeds for one origin input, capped in length; pushes beyond
    the cap are dropped."""

    def __init__(self, max_len: int):
        self._q: deque[_Seed] = deque()
        self._max_len = max_len

    def __len__(self) -> int:
        return len(self._q)

    def push(self, seed: _Seed):
        if len(self._q) < self._max_len:
            self._q.append(seed)

    def pop(self) -> _Seed:
        return self._q.popleft()


@dataclass(frozen=True)
class AdversarialRecord:
    """One label flip: the mutated image plus where and when it was found.

    distance is relative L2 to the origin input (the seed-keeping metric);
    distance_abs is the plain L2 norm of the perturbation. iteration is
    1-based within the seed's mutation run.
    """

    input_index: int
    original_label: int
    adversarial_label: int
    mutated: Tensor
    distance: float
    distance_abs: float
    seed_generation: int
    iteration: int

    def __post_init__(self):
        if self.adversarial_label == self.original_label:
            raise ContractViolation("adversarial label equals original label")
        if self.distance < 0 or self.distance_abs < 0:
            raise ContractViolation("distances must be non-negative")


@dataclass(frozen=True)
class CoveragePoint:
    input_index: int
    seeds_processed: int  # cumulative over the campaign
    coverage_rate: float


@dataclass(frozen=True)
class CampaignReport:
    records: tuple[AdversarialRecord, ...]
    coverage_curve: tuple[CoveragePoint, ...]
    final_coverage: float
    input_wall_s: tuple[float, ...]
    config: FuzzConfig
    mutation: str = "guided"

    @property
    def total_wall_s(self) -> float:
        return float(sum(self.input_wall_s))

    @property
    def seconds_per_adversarial(self) -> float | None:
        if not self.records:
            return None
        return self.total_wall_s / len(self.records)


def process_gradient(grads: Tensor, mode: str, step_size: float) -> Tensor:
    """Turn a raw input gradient into a perturbation of bounded size."""
    g = grads.array
    if mode == "sign":
        return Tensor.wrap(np.sign(g) * g.dtype.type(step_size))
    if mode == "scaled_raw":
        scale = step_size / max(l2_norm(grads), 1e-12)
        return Tensor.wrap(g * g.dtype.type(scale))
    raise ContractViolation(f"grad_mode must be one of {GRAD_MODES}")


def relative_distance(x_prime: Tensor, x: Tensor) -> float:
    """L2 norm of the perturbation over the L2 norm of the original."""
    if x_prime.shape != x.shape:
        raise ContractViolation(f"shape mismatch {x_prime.shape} vs {x.shape}")
    ref = l2_norm(x)
    if ref == 0.0:
        raise ContractViolation("relative distance undefined for all-zero input")
    diff = x_prime.array.astype(np.float64) - x.array.astype(np.float64)
    return float(np.sqrt(np.dot(diff.ravel(), diff.ravel()))) / ref


def _check_pixels(x: Tensor, cfg: FuzzConfig):
    lo, hi = cfg.pixel_range
    arr = x.array
    if arr.min() < lo or arr.max() > hi:
        raise ContractViolation(f"input pixels outside pixel_range [{lo}, {hi}]")


def fuzz_one_input(
    model: nn.Model,
    tracker: cov.CoverageTracker,
    x: Tensor,
    cfg: FuzzConfig,
    input_index: int = 0,
    rng: np.random.Generator | None = None,
) -> tuple[list[AdversarialRecord], float]:
    """Run the full mutation loop for one input against a shared tracker.

    Returns the adversarial records found and the coverage-rate delta this
    input contributed. An empty record list is a normal outcome.
    """
    records, delta, _ = _fuzz_one(model, tracker, x, cfg, input_index, rng, "guided")
    return records, delta


def _fuzz_one(
    model: nn.Model,
    tracker: cov.CoverageTracker,
    x: Tensor,
    cfg: FuzzConfig,
    input_index: int,
    rng: np.random.Generator | None,
    mutation: str,
    update_lock=None,
) -> tuple[list[AdversarialRecord], float, int]:
    if mutation not in MUTATION_MODES:
        raise ContractViolation(f"mutation must be one of {MUTATION_MODES}")
    if mutation == "random" and rng is None:
        raise ContractViolation("random mutation needs an rng")
    _check_pixels(x, cfg)
    lo, hi = cfg.pixel_range
    covered_before = tracker.covered_count()

    trace0 = nn.predict(model, x)
    c_orig = trace0.predicted_label
    queue = SeedQueue(cfg.max_seeds_per_input)
    queue.push(_Seed(x, 0, trace0))

    records: list[AdversarialRecord] = []
    processed = 0
    while len(queue) > 0 and processed < cfg.max_seeds_per_input:
        seed = queue.pop()
        requirement = cfg.gain_requirement(processed)
        processed += 1

        grad = None
        spec = None
        if mutation == "guided":
            topk = nn.top_k_other_labels(seed.trace, cfg.k)
            neurons = cov.select_neurons(
                tracker, model, cfg.strategies, cfg.m, seed.trace, rng
            )
            spec = nn.ObjectiveSpec(
                original_label=seed.trace.predicted_label,
                topk_labels=tuple(topk),
                target_neurons=tuple(neurons),
                lam=cfg.lam,
                use_logits=cfg.use_logits,
            )
            grad = nn.input_gradient(model, seed.x, spec)

        cur = seed.x
        for iteration in range(1, cfg.iter_times + 1):
            if mutation == "guided":
                if cfg.recompute_grad_each_iter and iteration > 1:
                    grad = nn.input_gradient(model, cur, spec)
                pert = process_gradient(grad, cfg.grad_mode, cfg.step_size)
            else:
                noise = rng.standard_normal(x.shape).astype(x.array.dtype)
                pert = process_gradient(Tensor.wrap(noise), cfg.grad_mode, cfg.step_size)
            cur = clip(elementwise_add(cur, pert), lo, hi)

            trace_m = nn.predict(model, cur)
            if update_lock is None:
                newly = cov.update(tracker, model, trace_m)
            else:
                with update_lock:
                    newly = cov.update(tracker, model, trace_m)
            gain_ratio = newly / tracker.total_neurons
            dist = relative_distance(cur, x)
            c_m = trace_m.predicted_label

            if c_m != c_orig:
                diff = Tensor.wrap(cur.array - x.array)
                records.append(
                    AdversarialRecord(
                        input_index=input_index,
                        original_label=c_orig,
                        adversarial_label=c_m,
                        mutated=cur,
                        distance=dist,
                        distance_abs=l2_norm(diff),
                        seed_generation=seed.generation,
                        iteration=iteration,
                    )
                )
                break
            if gain_ratio >= requirement and dist <= cfg.distance_max:
                queue.push(_Seed(cur, seed.generation + 1, trace_m))

    delta = (tracker.covered_count() - covered_before) / tracker.total_neurons
    return records, delta, processed


def fuzz_corpus(
    model: nn.Model,
    inputs: list[Tensor],
    cfg: FuzzConfig,
    mutation: str = "guided",
    parallel: int = 1,
) -> CampaignReport:
    """Fuzz inputs in order against one shared tracker.

    mutation="random" replaces the gradient with seeded Gaussian noise pushed
    through the same processing, keeping the mutation budget identical; it is
    the paired baseline for judging guidance. With a fixed rng_seed and
    parallel=1 the campaign is reproducible bit-for-bit in either mode.

    parallel > 1 fuzzes distinct inputs on worker threads sharing one tracker
    (updates serialized by a lock). That reorders tracker updates between
    inputs, so parallel campaigns are NOT reproducible; coverage-curve points
    are snapshots taken as each input finishes, listed in completion order.
    """
    if parallel < 1:
        raise ContractViolation("parallel must be >= 1")
    tracker = cov.CoverageTracker(model, cfg.activation_threshold)
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(max(len(inputs), 1))
    records: list[AdversarialRecord] = []
    curve: list[CoveragePoint] = []
    walls: list[float] = []
    cumulative_seeds = 0
    if parallel == 1:
        for i, x in enumerate(inputs):
            start = time.perf_counter()
            recs, _, processed = _fuzz_one(
                model, tracker, x, cfg, i, np.random.default_rng(seeds[i]), mutation
            )
            walls.append(time.perf_counter() - start)
            records.extend(recs)
            cumulative_seeds += processed
            curve.append(CoveragePoint(i, cumulative_seeds, cov.coverage_rate(tracker)))
    else:
        import threading
        from concurrent.futures import ThreadPoolExecutor, as_completed

        lock = threading.Lock()

        def work(i: int, x: Tensor):
            start = time.perf_counter()
            recs, _, processed = _fuzz_one(
                model, tracker, x, cfg, i, np.random.default_rng(seeds[i]), mutation, lock
            )
            return i, recs, processed, time.perf_counter() - start

        wall_by_input = [0.0] * len(inputs)
        recs_by_input: list[list[AdversarialRecord]] = [[] for _ in inputs]
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(work, i, x) for i, x in enumerate(inputs)]
            for fut in as_completed(futures):
                i, recs, processed, wall = fut.result()
                recs_by_input[i] = recs
                wall_by_input[i] = wall
                cumulative_seeds += processed
                with lock:
                    rate = cov.coverage_rate(tracker)
                curve.append(CoveragePoint(i, cumulative_seeds, rate))
        for recs in recs_by_input:
            records.extend(recs)
        walls = wall_by_input
    final = cov.coverage_rate(tracker) if inputs else 0.0
    return CampaignReport(
        records=tuple(records),
        coverage_curve=tuple(curve),
        final_coverage=final,
        input_wall_s=tuple(walls),
        config=cfg,
        mutation=mutation,
    )


# ---------------------------------------------------------------------------
# campaign artifacts


def record_filename(record: AdversarialRecord, seq: int) -> str:
    """PGM name carrying origin index, per-input sequence and both labels."""
    return _adv_name(record.input_index, seq, record.original_label, record.adversarial_label)


def _adv_name(input_index: int, seq: int, original: int, adversarial: int) -> str:
    return f"adv_{input_index}_{seq}_{original}to{adversarial}.pgm"


def write_campaign_report(report: CampaignReport, out_dir: str | Path) -> Path:
    """Materialize a campaign: adversarial/ PGM images, manifest.csv,
    coverage.csv, timing.csv and config.json.

    manifest.csv and coverage.csv depend only on the campaign's deterministic
    outputs, so a fixed rng_seed reproduces them byte for byte; wall-clock
    measurements live in timing.csv only.
    """
    from .model_io import export_image_pgm

    out = Path(out_dir)
    (out / "adversarial").mkdir(parents=True, exist_ok=True)

    seq: Counter[int] = Counter()
    manifest = ["input_index,original_label,adversarial_label,distance,distance_abs,seed_generation,iteration"]
    for rec in report.records:
        name = record_filename(rec, seq[rec.input_index])
        seq[rec.input_index] += 1
        export_image_pgm(rec.mutated, out / "adversarial" / name)
        manifest.append(
            f"{rec.input_index},{rec.original_label},{rec.adversarial_label},"
            f"{rec.distance!r},{rec.distance_abs!r},{rec.seed_generation},{rec.iteration}"
        )
    (out / "manifest.csv").write_text("\n".join(manifest) + "\n", encoding="ascii")

    curve = ["input_index,seeds_processed,coverage_rate"]
    curve += [
        f"{p.input_index},{p.seeds_processed},{p.coverage_rate!r}"
        for p in report.coverage_curve
    ]
    (out / "coverage.csv").write_text("\n".join(curve) + "\n", encoding="ascii")

    timing = ["input_index,wall_ms"]
    timing += [f"{i},{w * 1000.0:.3f}" for i, w in enumerate(report.input_wall_s)]
    (out / "timing.csv").write_text("\n".join(timing) + "\n", encoding="ascii")

    (out / "config.json").write_text(
        json.dumps(report.config.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="ascii",
    )
    return out


def read_campaign_records(campaign_dir: str | Path) -> list[AdversarialRecord]:
    """Rebuild adversarial records from a written campaign directory by
    joining manifest.csv rows with their PGM files."""
    from .model_io import import_image_pgm

    campaign = Path(campaign_dir)
    manifest = campaign / "manifest.csv"
    if not manifest.exists():
        raise ContractViolation(f"{campaign} has no manifest.csv")
    lines = manifest.read_text(encoding="ascii").splitlines()
    records = []
    seq: Counter[int] = Counter()
    for line in lines[1:]:
        idx, orig, adv, dist, dist_abs, gen, it = line.split(",")
        name = _adv_name(int(idx), seq[int(idx)], int(orig), int(adv))
        seq[int(idx)] += 1
        records.append(
            AdversarialRecord(
                input_index=int(idx),
                original_label=int(orig),
                adversarial_label=int(adv),
                mutated=import_image_pgm(campaign / "adversarial" / name),
                distance=float(dist),
                distance_abs=float(dist_abs),
                seed_generation=int(gen),
                iteration=int(it),
            )
        )
    return records
