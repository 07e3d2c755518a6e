"""Alternating R-Net / S-Net training with group-wise incremental loading."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import SCHEDULED_MODES, RunConfig
from .data import (ContaminationSpec, GroupPartition, LabelKind, Sample, contaminate,
                   quantize_map, resize_map)
from .exceptions import ConfigError, PipelineStateError
from .losses import LossWeights
from .metrics import mae
from .rnet import RefinementNetwork, RNetConfig
from .snet import ReferenceSNet, SNetConfig
from .training import EpochStats, epoch_loop, make_batches

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class IterationPlan:
    index: int
    rnet_train_groups: tuple[int, ...]
    rnet_predict_group: int | None
    snet_train_groups: tuple[int, ...]
    snet_predict_group: int | None
    real_count: int
    contaminated_count: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {
            "rnet_train_groups": list(self.rnet_train_groups),
            "snet_train_groups": list(self.snet_train_groups)}


@dataclass(frozen=True)
class Schedule:
    plans: tuple[IterationPlan, ...]

    def __len__(self):
        return len(self.plans)

    def __iter__(self):
        return iter(self.plans)

    def __getitem__(self, i):
        return self.plans[i]

    def to_dict(self) -> list[dict]:
        return [p.to_dict() for p in self.plans]

    def describe(self) -> str:
        lines = [f"{len(self.plans)} iterations"]
        for p in self.plans:
            def g(x):
                return "-" if x is None else str(x)
            lines.append(
                f"  it {p.index}: R trains {set(p.rnet_train_groups)} -> predicts {g(p.rnet_predict_group)}; "
                f"S trains {set(p.snet_train_groups)} -> predicts {g(p.snet_predict_group)}; "
                f"group 1 real/contaminated {p.real_count}/{p.contaminated_count}")
        return "\n".join(lines)


def real_count_at(iteration: int, group1_size: int, contaminate: bool = True) -> int:
    """Real-labeled share of GROUP 1: half at first, +10% of the group per iteration."""
    if not contaminate:
        return group1_size
    start = -(-group1_size // 2)
    step = (group1_size + 5) // 10
    return min(group1_size, start + (iteration - 1) * step)


def build_schedule(num_groups: int, group1_size: int, mode: str = "full") -> Schedule:
    """Plan every iteration of the alternating scheme.

    R-Net predicts the next unconsumed group from GROUP 1 plus the group the
    S-Net labeled last; S-Net trains on GROUP 1 plus every R-labeled group
    and labels the next one. Stops once every group has been labeled and
    used for training.
    """
    if num_groups < 2:
        raise ConfigError(f"need at least 2 groups, got {num_groups}")
    if mode not in SCHEDULED_MODES:
        raise ConfigError(f"mode {mode!r} has no alternating schedule")
    plans = []
    next_group = 2
    r_predicted: list[int] = []
    last_s: int | None = None
    t = 1
    while True:
        r_train = (1,) if last_s is None else (1, last_s)
        r_pred = next_group if next_group <= num_groups else None
        if r_pred is not None:
            next_group += 1
            r_predicted.append(r_pred)
        s_train = tuple(sorted({1, *r_predicted}))
        s_pred = next_group if next_group <= num_groups else None
        if s_pred is not None:
            next_group += 1
        real = real_count_at(t, group1_size, contaminate=(mode != "No4"))
        plans.append(IterationPlan(t, r_train, r_pred, s_train, s_pred, real, group1_size - real))
        last_s = s_pred
        if next_group > num_groups and last_s is None:
            break
        t += 1
    if mode == "No3":
        last = plans[-1]
        plans[-1] = dataclasses.replace(last, snet_train_groups=tuple(range(1, num_groups + 1)))
    return Schedule(tuple(plans))


# ---------------------------------------------------------------- credibility gate

@dataclass
class BestRecord:
    mae: float | None = None
    params: dict | None = None
    iteration: int | None = None


@dataclass
class CredibilityState:
    best: dict[str, BestRecord] = field(
        default_factory=lambda: {"rnet": BestRecord(), "snet": BestRecord()})
    log: list[dict] = field(default_factory=list)

    def best_mae_history(self, network: str) -> list[float]:
        return [e["best_mae"] for e in self.log if e["network"] == network]

    def to_dict(self) -> dict:
        return {"best": {k: {"mae": v.mae, "iteration": v.iteration} for k, v in self.best.items()},
                "log": self.log}

    @classmethod
    def from_dict(cls, d: dict) -> "CredibilityState":
        best = {k: BestRecord(v["mae"], None, v["iteration"]) for k, v in d["best"].items()}
        return cls(best, list(d["log"]))


def credibility_gate(candidate_params, network: str, val_set: Sequence, state: CredibilityState,
                     iteration: int, score: Callable[[object, Sequence], float]):
    """Keep the candidate only if it strictly beats the best validation MAE so far.

    Iteration 1 always accepts. Returns ``(chosen_params, state, entry)``.
    """
    if not val_set:
        raise ConfigError("credibility gate needs a non-empty validation set")
    value = float(score(candidate_params, val_set))
    rec = state.best[network]
    before = rec.mae
    if iteration <= 1 or rec.mae is None:
        decision = "init"
    elif value < rec.mae:
        decision = "accept"
    else:
        decision = "reject"
    if decision != "reject":
        rec.mae, rec.params, rec.iteration = value, candidate_params, iteration
    entry = {"iteration": iteration, "network": network, "candidate_mae": value,
             "best_mae_before": before, "best_mae": rec.mae, "decision": decision,
             "model_iteration": rec.iteration}
    state.log.append(entry)
    return rec.params, state, entry


# ---------------------------------------------------------------- event log

class EventLog:
    """Append-only JSON-lines log; ``time`` is a logical sequence number."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None and self.path.exists():
            self.records = [json.loads(l) for l in self.path.read_text().splitlines() if l]

    def emit(self, action: str, *, iteration: int | None = None, phase: str = "run",
             network: str | None = None, group=None, metric: dict | None = None) -> dict:
        rec = {"time": len(self.records), "iteration": iteration, "phase": phase,
               "network": network, "group": group, "action": action}
        if metric is not None:
            rec["metric"] = metric
        self.records.append(rec)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def truncate(self, keep: int) -> None:
        """Drop every record after the first ``keep`` (the tail of an interrupted iteration)."""
        self.records = self.records[:keep]
        if self.path is not None:
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))
            tmp.replace(self.path)

    def select(self, **match) -> list[dict]:
        return [r for r in self.records if all(r.get(k) == v for k, v in match.items())]


# ---------------------------------------------------------------- pipeline

@dataclass
class RunResult:
    final_val_mae: float | None
    completed_iterations: int
    credibility: CredibilityState
    events: list[dict]


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


_NET_ID = {"rnet": 1, "snet": 2}


class Pipeline:
    """Drives the alternating R-Net / S-Net protocol over one partition.

    ``rnet`` / ``snet`` may be any objects honoring the trainer interfaces;
    by default they are built from ``config``.
    """

    def __init__(self, config: RunConfig, samples: Sequence[Sample], partition: GroupPartition,
                 val_samples: Sequence[Sample], rnet=None, snet=None, store=None,
                 events: EventLog | None = None):
        self.config = config
        self.samples = {s.id: s for s in samples}
        self.partition = partition
        self.val_samples = list(val_samples)
        self.store = store
        self.events = events or EventLog(store.events if store is not None else None)
        self.rnet = rnet if rnet is not None else RefinementNetwork(
            RNetConfig(config.rnet_channels, config.rnet_size, backbone=config.rnet_backbone),
            seed=_seed(config.seed, 11), loss_weights=LossWeights(config.loss_weights))
        self.snet = snet if snet is not None else self._fresh_snet(0)
        self.pseudo: dict[str, np.ndarray] = {}
        self.credibility = CredibilityState()
        self.completed = 0
        self.gate_enabled = config.mode != "No2"
        self._cache: dict = {}
        missing = set(partition.group_of()) - set(self.samples)
        if missing:
            raise PipelineStateError(f"partition names unknown samples: {sorted(missing)[:5]}")
        order = np.random.default_rng(_seed(config.seed, 7)).permutation(len(partition.group(1)))
        self.group1 = [partition.group(1)[i] for i in order]

    def _fresh_snet(self, generation: int):
        return ReferenceSNet(SNetConfig(self.config.snet_channels, self.config.snet_size),
                             seed=_seed(self.config.seed, 13, generation))

    # -- data plumbing

    def _size(self, net: str) -> int:
        obj = self.rnet if net == "rnet" else self.snet
        cfg = getattr(obj, "config", None)
        size = getattr(cfg, "input_size", None) or getattr(obj, "input_size", None)
        return size or (self.config.rnet_size if net == "rnet" else self.config.snet_size)

    def _resized(self, sample: Sample, what: str, size: int) -> np.ndarray:
        key = (sample.id, what, size)
        if key not in self._cache:
            src = {"image": sample.image, "coarse": sample.coarse_map(), "real": sample.label}[what]
            if src is None:
                raise PipelineStateError(f"{sample.id}: no {what} map")
            out = resize_map(src, (size, size))
            self._cache[key] = out if what == "image" else np.clip(out, 0, 1)
        return self._cache[key]

    def _item(self, net: str, sample: Sample, label: np.ndarray) -> tuple:
        size = self._size(net)
        lab = np.clip(resize_map(label, (size, size)), 0, 1)
        if net == "rnet":
            return (self._resized(sample, "image", size), self._resized(sample, "coarse", size), lab)
        return (self._resized(sample, "image", size), lab)

    def _real_item(self, net, sample):
        size = self._size(net)
        if net == "rnet":
            return (self._resized(sample, "image", size), self._resized(sample, "coarse", size),
                    self._resized(sample, "real", size))
        return (self._resized(sample, "image", size), self._resized(sample, "real", size))

    def group1_split(self, iteration: int, real_count: int):
        """(real ids, contaminated samples) for GROUP 1 in this iteration."""
        real_ids = self.group1[:real_count]
        contaminated = []
        for idx, sid in enumerate(self.group1[real_count:], start=real_count):
            spec = dataclasses.replace(self.config.contamination,
                                       seed=_seed(self.config.seed, 3, iteration, idx))
            contaminated.append(contaminate(self.samples[sid], spec))
        return real_ids, contaminated

    def _pseudo_items(self, net: str, groups: Iterable[int]) -> list[tuple]:
        items = []
        for g in groups:
            if g == 1:
                continue
            for sid in self.partition.group(g):
                if sid not in self.pseudo:
                    raise PipelineStateError(f"group {g}: no pseudo label for {sid}")
                items.append(self._item(net, self.samples[sid], self.pseudo[sid]))
        return items

    # -- training / prediction primitives

    def _train(self, net_name: str, iteration: int, pseudo_pool, real_pool, *,
               phase: str = "train", groups=None, counts: dict | None = None,
               epoch_offset: int = 0, seed_tag: int = 0):
        net = self.rnet if net_name == "rnet" else self.snet
        policy = self.config.optimizer
        net.reset_optimizer(policy.weight_decay, policy.momentum)
        self.events.emit("start", iteration=iteration, phase=phase, network=net_name,
                         group=groups, metric=counts)
        step = 0
        for epoch in range(policy.epochs):
            rng = np.random.default_rng(
                _seed(self.config.seed, 5, iteration, _NET_ID[net_name], seed_tag, epoch))
            pb = make_batches(pseudo_pool, policy.batch_size, rng, self.config.augment)
            rb = make_batches(real_pool, policy.batch_size, rng, self.config.augment)
            stats = epoch_loop(net, pb, rb, policy, epoch, iteration=iteration, step=step)
            step = stats.step_end
            self.events.emit("epoch", iteration=iteration, phase=phase, network=net_name,
                             group=groups, metric=stats.to_metric())

    def _predict_maps(self, net_name: str, samples: Sequence[Sample]) -> list[np.ndarray]:
        if not samples:
            return []
        size = self._size(net_name)
        bs = self.config.predict_batch_size
        images = np.stack([self._resized(s, "image", size) for s in samples])
        if net_name == "rnet":
            coarse = np.stack([self._resized(s, "coarse", size) for s in samples])
            maps = self.rnet.predict(images, coarse, bs)
        else:
            maps = self.snet.predict(images, bs)
        return [np.clip(resize_map(m, s.shape), 0, 1) for s, m in zip(samples, maps)]

    def validation_mae(self, net_name: str) -> float:
        maps = self._predict_maps(net_name, self.val_samples)
        return float(np.mean([mae(m, s.label) for m, s in zip(maps, self.val_samples)]))

    def _gate(self, net_name: str, iteration: int):
        net = self.rnet if net_name == "rnet" else self.snet
        if not self.gate_enabled:
            return
        chosen, _, entry = credibility_gate(
            net.get_state(), net_name, self.val_samples, self.credibility, iteration,
            lambda params, val: self.validation_mae(net_name))
        action = entry["decision"]
        self.events.emit(action, iteration=iteration, phase="gate", network=net_name,
                         metric={k: entry[k] for k in ("candidate_mae", "best_mae_before",
                                                       "best_mae", "model_iteration")})
        if action == "reject":
            net.set_state(chosen)

    def _predict_group(self, net_name: str, iteration: int, group: int | None):
        if group is None:
            return
        ids = self.partition.group(group)
        maps = self._predict_maps(net_name, [self.samples[s] for s in ids])
        for sid, m in zip(ids, maps):
            self.pseudo[sid] = quantize_map(m)
            if self.store is not None:
                from .store import write_gray
                write_gray(self.store.pseudo_label_path(sid), self.pseudo[sid])
        rec = self.credibility.best[net_name]
        source = rec.iteration if self.gate_enabled and rec.iteration is not None else iteration
        self.events.emit("predict", iteration=iteration, phase="predict", network=net_name,
                         group=group, metric={"n": len(ids), "model_iteration": source})

    # -- protocol

    def run_iteration(self, plan: IterationPlan) -> None:
        it = plan.index
        real_ids, contaminated = self.group1_split(it, plan.real_count)
        for net_name, groups, pred_group in (
                ("rnet", plan.rnet_train_groups, plan.rnet_predict_group),
                ("snet", plan.snet_train_groups, plan.snet_predict_group)):
            for g in groups:
                if g != 1 and any(s not in self.pseudo for s in self.partition.group(g)):
                    raise PipelineStateError(
                        f"iteration {it}: {net_name} needs group {g}, which has no pseudo labels")
            pseudo_pool = [self._item(net_name, s, s.label) for s in contaminated]
            pseudo_pool += self._pseudo_items(net_name, groups)
            real_pool = [self._real_item(net_name, self.samples[s]) for s in real_ids]
            counts = {"real": len(real_pool), "contaminated": len(contaminated),
                      "pseudo": len(pseudo_pool) - len(contaminated)}
            self._train(net_name, it, pseudo_pool, real_pool, groups=list(groups), counts=counts)
            self._gate(net_name, it)
            self._predict_group(net_name, it, pred_group)
        self.completed = it
        self.events.emit("iteration_done", iteration=it)
        self.checkpoint()

    def schedule(self) -> Schedule:
        return build_schedule(len(self.partition), len(self.partition.group(1)), self.config.mode)

    def run(self, stop_after: int | None = None) -> RunResult:
        mode = self.config.mode
        if mode in SCHEDULED_MODES:
            for plan in self.schedule():
                if plan.index <= self.completed:
                    continue
                if stop_after is not None and plan.index > stop_after:
                    return self._result(None)
                self.run_iteration(plan)
        elif self.completed == 0:
            getattr(self, f"_run_{mode.lower()}")()
            self.completed = 1
            self.events.emit("iteration_done", iteration=1)
            self.checkpoint()
        final = self.validation_mae("snet") if self.val_samples else None
        self.events.emit("final", network="snet", metric={"val_mae": final})
        if self.store is not None:
            self.snet.save(self.store.checkpoint("snet_final"))
            self.checkpoint(final=final)
        return self._result(final)

    def _result(self, final):
        return RunResult(final, self.completed, self.credibility, list(self.events.records))

    # -- ablation modes (single pass, no gate)

    def _all_real(self, net):
        return [self._real_item(net, self.samples[s]) for s in self.group1]

    def _coarse_groups(self):
        return list(range(2, len(self.partition) + 1))

    def _run_m1(self):
        coarse = [self._item("snet", self.samples[s], self.samples[s].coarse_map())
                  for g in self._coarse_groups() for s in self.partition.group(g)]
        self._train("snet", 1, coarse, [], phase="train", groups=self._coarse_groups(),
                    counts={"coarse": len(coarse)}, seed_tag=1)
        self._train("snet", 1, [], self._all_real("snet"), phase="finetune", groups=[1],
                    counts={"real": len(self.group1)}, seed_tag=2)

    def _run_m2(self):
        self._train("snet", 1, [], self._all_real("snet"), groups=[1],
                    counts={"real": len(self.group1)})

    def _run_m3(self):
        self._train("snet", 1, [], self._all_real("snet"), groups=[1],
                    counts={"real": len(self.group1)}, seed_tag=1)
        for g in self._coarse_groups():
            self._predict_group("snet", 1, g)
        self.snet = self._fresh_snet(1)
        self._train("snet", 1, self._pseudo_items("snet", self._coarse_groups()),
                    self._all_real("snet"), phase="retrain", groups=[1, *self._coarse_groups()],
                    counts={"real": len(self.group1), "pseudo": sum(
                        len(self.partition.group(g)) for g in self._coarse_groups())}, seed_tag=2)

    def _run_no1(self):
        self._train("rnet", 1, [], self._all_real("rnet"), groups=[1],
                    counts={"real": len(self.group1)})
        for g in self._coarse_groups():
            self._predict_group("rnet", 1, g)
        self._train("snet", 1, self._pseudo_items("snet", self._coarse_groups()),
                    self._all_real("snet"), groups=[1, *self._coarse_groups()],
                    counts={"real": len(self.group1), "pseudo": sum(
                        len(self.partition.group(g)) for g in self._coarse_groups())})

    # -- persistence

    def checkpoint(self, final: float | None = None) -> None:
        if self.store is None:
            return
        paths = {}
        for name, net in (("rnet", self.rnet), ("snet", self.snet)):
            paths[name] = str(net.save(self.store.checkpoint(name)).relative_to(self.store.root))
        body = self.store.read_run() or {}
        body.update({
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "mode": self.config.mode,
            "schedule": self.schedule().to_dict() if self.config.mode in SCHEDULED_MODES else None,
            "completed_iterations": self.completed,
            "credibility": self.credibility.to_dict(),
            "checkpoints": paths,
            "pseudo_ids": sorted(self.pseudo),
        })
        if final is not None:
            body["final_val_mae"] = final
            body["checkpoints"]["snet_final"] = "checkpoints/snet_final.ckpt"
        self.store.write_run(body)

    def restore(self) -> bool:
        """Reload progress from the store; returns False when there is nothing to resume."""
        if self.store is None:
            return False
        body = self.store.read_run()
        if not body or not body.get("completed_iterations"):
            self.events.truncate(0)  # nothing finished: restart the log too
            return False
        from .store import read_gray

        self.rnet.load(self.store.root / body["checkpoints"]["rnet"])
        self.snet.load(self.store.root / body["checkpoints"]["snet"])
        self.credibility = CredibilityState.from_dict(body["credibility"])
        for name, net in (("rnet", self.rnet), ("snet", self.snet)):
            if self.credibility.best[name].mae is not None:
                self.credibility.best[name].params = net.get_state()
        self.pseudo = {sid: read_gray(self.store.pseudo_label_path(sid))
                       for sid in body["pseudo_ids"]}
        self.completed = body["completed_iterations"]
        done = [i for i, r in enumerate(self.events.records)
                if r["action"] == "iteration_done" and r["iteration"] == self.completed]
        if done:
            self.events.truncate(done[-1] + 1)
        return True
