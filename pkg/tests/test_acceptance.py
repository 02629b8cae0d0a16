"""Acceptance gate: ten checks, one printed verdict line each.

Checks 1-4, 9, and 10 are exact, structural, or bit-reproducibility gates and
fail hard. Checks 5-8 reproduce trend-level orderings on the synthetic corpus
across three seeds; check 6 compares two stochastic training regimes and is
defined to flag for hyperparameter review instead of hard-failing when the
ordering is missed, with per-seed matrices always printed.
"""

import functools
import json
import math
import time
import warnings

import numpy as np
import pytest
import torch

from crlbench.augment import default_augment_config
from crlbench.cli import cmd_run
from crlbench.config import parse_config
from crlbench.continual import DistillSpec, TrainingRegime, fresh_state, init_from_previous, run_sequence, run_task
from crlbench.dataspec import Dataset, TaskDataset, generate_synthetic, materialize_task, split_tasks
from crlbench.errors import ConfigurationError
from crlbench.evaluation import (
    AccuracyMatrix,
    ProbeConfig,
    ProtocolSpec,
    avg_accuracy,
    forgetting,
    probe_accuracy,
    train_probe,
)
from crlbench.nncore import Encoder, module_checksum
from crlbench.objectives import (
    JointLossWeights,
    NegativeQueue,
    SSLConfig,
    barlow_twins,
    cross_entropy,
    distill_kld,
    distill_mse,
    distill_sim,
    moco_loss,
    nt_xent,
)

SEEDS = (11, 12, 13)
PROBE = ProbeConfig(epochs=30, lr=1e-2, batch_size=64, segment_len=32)
LEP_PLAN = [ProtocolSpec(kind="lep", probe=PROBE)]


def _verdict(num: int, name: str, ok: bool, detail: str = "", flag_only: bool = False) -> bool:
    status = "PASS" if ok else ("FLAG" if flag_only else "FAIL")
    line = f"ACCEPTANCE {num:02d} {name}: {status}"
    if detail:
        line += f" | {detail}"
    print(line)
    return ok


@functools.lru_cache(maxsize=None)
def desk_dataset() -> Dataset:
    return generate_synthetic(
        num_classes=10,
        clips_per_class_train=36,
        clips_per_class_test=12,
        freq_bins=32,
        time_frames=64,
        noise_sigma=2.0,
        seed=1,
    )


@functools.lru_cache(maxsize=None)
def desk_tasks(num_tasks: int):
    return split_tasks(desk_dataset(), num_tasks, seed=3)


def desk_regime(kind: str, replay: str = "none", beta: float | None = None, epochs: int = 60) -> TrainingRegime:
    ssl = SSLConfig(method="simclr", temperature=0.2) if kind in ("cssl", "joint") else None
    joint = JointLossWeights(alpha=1.0, beta=beta) if kind == "joint" else None
    return TrainingRegime(
        kind=kind,
        ssl=ssl,
        epochs_per_task=epochs,
        batch_size=64,
        lr=1e-3,
        weight_decay=1e-4,
        replay=replay,
        joint=joint,
    )


_SEQ_CACHE: dict = {}


def desk_run(kind: str, seed: int, replay: str = "none", beta: float | None = None,
             epochs: int = 60, num_tasks: int = 5):
    key = (kind, replay, beta, seed, epochs, num_tasks)
    if key not in _SEQ_CACHE:
        regime = desk_regime(kind, replay=replay, beta=beta, epochs=epochs)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            _SEQ_CACHE[key] = run_sequence(
                desk_dataset(), desk_tasks(num_tasks), regime, LEP_PLAN,
                augment_cfg=default_augment_config(32, 32), seed=seed,
            )
    return _SEQ_CACHE[key]


def _forgetting_oracle(rows: list[list[float]]) -> float:
    T = len(rows)
    if T < 2:
        return 0.0
    total = 0.0
    for j in range(1, T):
        column = [rows[tau - 1][j - 1] for tau in range(j, T + 1)]
        total += max(column) - rows[T - 1][j - 1]
    return total / (T - 1)


def test_criterion_01_metric_exactness() -> None:
    started = time.monotonic()
    m = AccuracyMatrix.from_lists([[0.9], [0.8, 0.85], [0.7, 0.8, 0.9]])
    hand_ok = abs(forgetting(m) - 0.125) <= 1e-12 and abs(avg_accuracy(m, 3) - 0.8) <= 1e-12

    rng = np.random.default_rng(1)
    oracle_ok = True
    for _ in range(1000):
        T = int(rng.integers(1, 7))
        rows = [[float(v) for v in rng.uniform(0, 1, size=t)] for t in range(1, T + 1)]
        mm = AccuracyMatrix.from_lists(rows)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            got = forgetting(mm)
        oracle_ok &= abs(got - _forgetting_oracle(rows)) <= 1e-12
        t_pick = int(rng.integers(1, T + 1))
        oracle_ok &= abs(avg_accuracy(mm, t_pick) - sum(rows[t_pick - 1]) / t_pick) <= 1e-12
    elapsed = time.monotonic() - started

    ok = hand_ok and oracle_ok and elapsed < 1.0
    assert _verdict(
        1, "metric-exactness", ok,
        f"hand case {hand_ok}, 1000-trial oracle {oracle_ok}, {elapsed:.2f}s",
    )


def test_criterion_02_loss_oracles() -> None:
    started = time.monotonic()
    e = math.e
    t64 = lambda rows: torch.tensor(rows, dtype=torch.float64)

    checks: dict[str, bool] = {}
    z = t64([[1.0, 0.0], [0.0, 1.0]])
    checks["nt_xent"] = abs(float(nt_xent(z, z.clone(), 1.0)) + math.log(e / (e + 2.0))) <= 1e-6

    queue = NegativeQueue(capacity=4)
    queue.enqueue(t64([[0.0, 1.0]]))
    q = t64([[1.0, 0.0]])
    checks["moco"] = abs(float(moco_loss(q, q.clone(), queue, 1.0)) + math.log(e / (e + 1.0))) <= 1e-6

    a = t64([[1.0], [1.0], [-1.0], [-1.0]])
    b = t64([[1.0], [-1.0], [1.0], [-1.0]])
    z_b = 0.95 * a + math.sqrt(1.0 - 0.95**2) * b
    checks["barlow"] = abs(float(barlow_twins(a, z_b, 5e-3)) - 0.0025) <= 1e-9

    logits = torch.zeros(3, 4, dtype=torch.float64)
    checks["cross_entropy"] = abs(float(cross_entropy(logits, torch.tensor([0, 1, 3]))) - math.log(4.0)) <= 1e-9

    x = t64(np.random.default_rng(0).standard_normal((5, 6)).tolist())
    ident = torch.cat([a, b], dim=1)
    checks["zero_cases"] = (
        float(distill_mse(x, x.clone())) <= 1e-9
        and float(distill_kld(x, x.clone(), 2.0)) <= 1e-9
        and float(barlow_twins(ident, ident.clone(), 5e-3)) <= 1e-9
    )
    elapsed = time.monotonic() - started

    ok = all(checks.values()) and elapsed < 10.0
    failing = [k for k, v in checks.items() if not v]
    assert _verdict(2, "loss-oracles", ok, f"failing={failing or 'none'}, {elapsed:.2f}s")


def _fd_gradient(value_fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros(array.size, dtype=np.float64)
    flat = array.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = value_fn()
        flat[i] = orig - h
        f_minus = value_fn()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(array.shape)


def _max_grad_error(make_case, rng: np.random.Generator, instances: int = 20) -> float:
    worst = 0.0
    for _ in range(instances):
        fn, arrays, wrt = make_case(rng)
        tensors = [torch.tensor(a, dtype=torch.float64) for a in arrays]
        for i in wrt:
            tensors[i].requires_grad_(True)
        fn(*tensors).backward()
        for i in wrt:
            analytic = tensors[i].grad.detach().numpy().copy()

            def value() -> float:
                fresh = [torch.tensor(a, dtype=torch.float64) for a in arrays]
                return float(fn(*fresh).detach())

            fd = _fd_gradient(value, arrays[i])
            denom = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-12)
            worst = max(worst, float(np.linalg.norm(analytic - fd) / denom))
    return worst


def test_criterion_03_gradient_checks() -> None:
    started = time.monotonic()

    def case_nt_xent(rng):
        b, d = int(rng.integers(2, 5)), int(rng.integers(3, 7))
        tau = float(rng.choice([0.2, 0.5]))
        return (
            lambda za, zb: nt_xent(za, zb, tau),
            [rng.standard_normal((b, d)), rng.standard_normal((b, d))],
            (0, 1),
        )

    def case_moco(rng):
        b, d, k = int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(1, 7))
        tau = float(rng.choice([0.07, 0.2]))
        queue = NegativeQueue(capacity=k)
        queue.enqueue(torch.tensor(rng.standard_normal((k, d)), dtype=torch.float64))
        return (
            lambda q, kk: moco_loss(q, kk, queue, tau),
            [rng.standard_normal((b, d)), rng.standard_normal((b, d))],
            (0,),
        )

    def case_barlow(rng):
        b, d = int(rng.integers(3, 7)), int(rng.integers(2, 5))
        lam = float(rng.choice([5e-3, 0.2]))
        return (
            lambda za, zb: barlow_twins(za, zb, lam),
            [rng.standard_normal((b, d)), rng.standard_normal((b, d))],
            (0, 1),
        )

    def case_cross_entropy(rng):
        b, k = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        labels = torch.tensor(rng.integers(0, k, size=b))
        return (
            lambda lg: cross_entropy(lg, labels),
            [rng.standard_normal((b, k))],
            (0,),
        )

    def case_mse(rng):
        b, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        return (
            lambda s, t: distill_mse(s, t),
            [rng.standard_normal((b, d)), rng.standard_normal((b, d))],
            (0,),
        )

    def case_sim(rng):
        b, d = int(rng.integers(2, 5)), int(rng.integers(3, 7))
        tau = float(rng.choice([0.2, 0.5]))
        return (
            lambda s, t: distill_sim(s, t, tau),
            [rng.standard_normal((b, d)), rng.standard_normal((b, d))],
            (0,),
        )

    def case_kld(rng):
        b, k = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        tau = float(rng.choice([1.0, 2.0, 4.0]))
        return (
            lambda s, t: distill_kld(s, t, tau),
            [rng.standard_normal((b, k)), rng.standard_normal((b, k))],
            (0,),
        )

    cases = {
        "nt_xent": case_nt_xent,
        "moco": case_moco,
        "barlow": case_barlow,
        "cross_entropy": case_cross_entropy,
        "distill_mse": case_mse,
        "distill_sim": case_sim,
        "distill_kld": case_kld,
    }
    errors = {
        name: _max_grad_error(make, np.random.default_rng(100 + i))
        for i, (name, make) in enumerate(cases.items())
    }
    elapsed = time.monotonic() - started
    for name, err in errors.items():
        print(f"  {name}: max relative gradient error {err:.3e}")
    ok = all(err <= 1e-4 for err in errors.values()) and elapsed < 60.0
    assert _verdict(
        3, "gradient-checks", ok,
        f"worst={max(errors.values()):.3e} over 20 instances/loss, {elapsed:.1f}s",
    )


class _CountingClip:
    def __init__(self, clip):
        self._clip = clip
        self.feature_reads = 0
        self.label_reads = 0

    @property
    def features(self):
        self.feature_reads += 1
        return self._clip.features

    @property
    def label(self):
        self.label_reads += 1
        return self._clip.label

    @property
    def clip_id(self):
        return self._clip.clip_id

    @property
    def split(self):
        return self._clip.split


def test_criterion_04_structural_invariants() -> None:
    started = time.monotonic()

    rng = np.random.default_rng(7)
    split_ok = True
    for _ in range(100):
        C = int(rng.integers(2, 13))
        T = int(rng.integers(1, C + 1))
        stub = Dataset.__new__(Dataset)
        stub.num_classes = C
        stub.name = "stub"
        seq = split_tasks(stub, T, int(rng.integers(0, 2**31)))
        flat = [c for task in seq.tasks for c in task]
        split_ok &= sorted(flat) == list(range(C))
        split_ok &= all(len(task) >= 1 for task in seq.tasks)

    toy = generate_synthetic(4, 4, 2, 16, 32, 0.5, seed=5)
    toy_seq = split_tasks(toy, 2, seed=1)
    aug = default_augment_config(16, 16)
    ssl_regime = TrainingRegime(
        kind="cssl", ssl=SSLConfig(method="simclr"), epochs_per_task=1, batch_size=8, lr=1e-3
    )

    def counted(t: int):
        td = materialize_task(toy, toy_seq, t)
        wrapped = [_CountingClip(c) for c in td.train]
        return TaskDataset(task_index=t, train=wrapped, test=td.test), wrapped

    task1, wrapped1 = counted(1)
    task2, _ = counted(2)
    state = fresh_state((4,), 8, toy, ssl_regime, aug, seed=0)
    run_task(state, task1, ssl_regime)
    label_free = sum(c.label_reads for c in wrapped1) == 0
    for c in wrapped1:
        c.feature_reads = 0
    state.encoder = init_from_previous(state)
    run_task(state, task2, ssl_regime)
    replay_local = sum(c.feature_reads for c in wrapped1) == 0

    distill_regime = TrainingRegime(
        kind="cssl", ssl=SSLConfig(method="simclr"), epochs_per_task=1, batch_size=8,
        lr=1e-3, distill=DistillSpec(kind="mse", weight=0.5),
    )
    dstate = fresh_state((4,), 8, toy, distill_regime, aug, seed=0)
    run_task(dstate, materialize_task(toy, toy_seq, 1), distill_regime)
    snap1 = dstate.last_snapshot
    frozen = snap1.values.copy()
    dstate.encoder = init_from_previous(dstate)
    run_task(dstate, materialize_task(toy, toy_seq, 2), distill_regime)
    teacher_stable = bool(np.array_equal(snap1.values, frozen))

    torch.manual_seed(0)
    enc = Encoder(channels=(4,))
    checksum = module_checksum(enc)
    cfg = ProbeConfig(epochs=2, segment_len=16)
    head, label_map = train_probe(enc, toy.split_clips("train"), [0, 1, 2, 3], cfg, seed=0)
    acc = probe_accuracy(enc, head, toy.split_clips("test"), label_map, 16)
    probe_clean = module_checksum(enc) == checksum and 0.0 <= acc <= 1.0

    elapsed = time.monotonic() - started
    ok = split_ok and label_free and replay_local and teacher_stable and probe_clean and elapsed < 30.0
    assert _verdict(
        4, "structural-invariants", ok,
        f"splits={split_ok} label-free-ssl={label_free} replay-local={replay_local} "
        f"teacher-stable={teacher_stable} probe-clean={probe_clean}, {elapsed:.1f}s",
    )


def test_criterion_05_offline_sanity() -> None:
    started = time.monotonic()
    means = {}
    for kind in ("csup", "cssl"):
        vals = [
            desk_run(kind, seed=s, epochs=20, num_tasks=1).reports["lep"].final_avg_accuracy
            for s in SEEDS
        ]
        means[kind] = float(np.mean(vals))
        print(f"  offline {kind}: per-seed {[f'{v:.3f}' for v in vals]} mean {means[kind]:.4f}")
    elapsed = time.monotonic() - started
    ok = (
        means["csup"] >= 0.70
        and means["cssl"] >= 0.70
        and means["csup"] >= means["cssl"] - 0.05
        and elapsed <= 600.0
    )
    assert _verdict(
        5, "offline-sanity", ok,
        f"CSUP={means['csup']:.3f} SimCLR={means['cssl']:.3f} (chance 0.10), {elapsed:.0f}s",
    )


def test_criterion_06_continual_trend() -> None:
    started = time.monotonic()
    finals: dict[str, list[float]] = {}
    forgets: dict[str, list[float]] = {}
    for kind in ("csup", "cssl"):
        results = [desk_run(kind, seed=s) for s in SEEDS]
        finals[kind] = [r.reports["lep"].final_avg_accuracy for r in results]
        forgets[kind] = [r.reports["lep"].forgetting for r in results]
        for s, r in zip(SEEDS, results):
            assert r.matrices["lep"].is_complete
            print(f"  {kind} seed {s} accuracy matrix:")
            for row in r.matrices["lep"].to_lists():
                print("    " + " ".join(f"{v:.3f}" for v in row))
    a_cssl, a_csup = float(np.mean(finals["cssl"])), float(np.mean(finals["csup"]))
    f_cssl, f_csup = float(np.mean(forgets["cssl"])), float(np.mean(forgets["csup"]))
    elapsed = time.monotonic() - started
    ok = a_cssl > a_csup and f_cssl < f_csup and elapsed <= 1800.0
    _verdict(
        6, "continual-trend", ok,
        f"final-avg simclr={a_cssl:.3f} vs csup={a_csup:.3f}; "
        f"forgetting simclr={f_cssl:.3f} vs csup={f_csup:.3f}, {elapsed:.0f}s",
        flag_only=True,
    )
    if not ok:
        warnings.warn(
            "continual trend ordering missed; flagged for template/hyperparameter review",
            RuntimeWarning,
        )


def test_criterion_07_replay_ordering() -> None:
    started = time.monotonic()
    finals = {}
    for kind in ("csup", "cssl"):
        for replay in ("none", "full"):
            vals = [
                desk_run(kind, seed=s, replay=replay).reports["lep"].final_avg_accuracy
                for s in SEEDS
            ]
            finals[(kind, replay)] = vals
            print(f"  {kind} replay={replay}: {[f'{v:.3f}' for v in vals]} mean {np.mean(vals):.4f}")
    fr_ge_nr = all(
        float(np.mean(finals[(kind, 'full')])) >= float(np.mean(finals[(kind, 'none')]))
        for kind in ("csup", "cssl")
    )
    csup_gaps = [f - n for f, n in zip(finals[("csup", "full")], finals[("csup", "none")])]
    cssl_gaps = [f - n for f, n in zip(finals[("cssl", "full")], finals[("cssl", "none")])]
    wins = sum(cg >= sg for cg, sg in zip(csup_gaps, cssl_gaps))
    elapsed = time.monotonic() - started
    ok = fr_ge_nr and wins >= 2 and elapsed <= 1800.0
    assert _verdict(
        7, "replay-ordering", ok,
        f"FR>=NR both regimes={fr_ge_nr}, csup gap wins {wins}/3 "
        f"(csup {np.mean(csup_gaps):+.3f} vs simclr {np.mean(cssl_gaps):+.3f}), {elapsed:.0f}s",
    )


def test_criterion_08_joint_ablation() -> None:
    started = time.monotonic()
    finals = {}
    for beta in (0.0, 0.2, 1.0):
        vals = [desk_run("joint", seed=s, beta=beta).reports["lep"].final_avg_accuracy for s in SEEDS]
        finals[beta] = vals
        print(f"  joint alpha=1 beta={beta}: {[f'{v:.3f}' for v in vals]} mean {np.mean(vals):.4f}")
    wins = sum(b2 >= b0 for b2, b0 in zip(finals[0.2], finals[0.0]))
    elapsed = time.monotonic() - started
    ok = wins >= 2 and elapsed <= 1800.0
    assert _verdict(
        8, "joint-ablation", ok,
        f"beta=0.2 beats beta=0 in {wins}/3 seeds "
        f"({np.mean(finals[0.2]):.3f} vs {np.mean(finals[0.0]):.3f}), {elapsed:.0f}s",
    )


def test_criterion_09_protocol_equivalences() -> None:
    started = time.monotonic()
    toy = generate_synthetic(4, 6, 3, 16, 32, 0.5, seed=5)
    seq = split_tasks(toy, 2, seed=1)
    regime = TrainingRegime(
        kind="cssl", ssl=SSLConfig(method="simclr"), epochs_per_task=2, batch_size=8, lr=1e-3
    )
    probe = ProbeConfig(epochs=3, lr=1e-2, batch_size=16, segment_len=16)
    plan = [
        ProtocolSpec(kind="lep", probe=probe),
        ProtocolSpec(kind="slep", probe=probe, slep_budget=10_000),
    ]
    result = run_sequence(
        toy, seq, regime, plan,
        encoder_channels=(4,), projection_dim=8,
        augment_cfg=default_augment_config(16, 16), seed=2,
    )
    slep_equiv = result.matrices["slep"].to_lists() == result.matrices["lep"].to_lists()

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        value = forgetting(AccuracyMatrix.from_lists([[0.9]]))
    single_task = value == 0.0 and any(issubclass(w.category, RuntimeWarning) for w in caught)

    flep_plan = [ProtocolSpec(kind="flep", probe=probe, downstream=generate_synthetic(4, 6, 3, 16, 32, 0.5, seed=5))]
    try:
        run_sequence(
            toy, split_tasks(toy, 1, seed=1), regime, flep_plan,
            encoder_channels=(4,), projection_dim=8,
            augment_cfg=default_augment_config(16, 16), seed=2,
        )
        flep_rejects = False
    except ConfigurationError:
        flep_rejects = True

    elapsed = time.monotonic() - started
    ok = slep_equiv and single_task and flep_rejects and elapsed < 300.0
    assert _verdict(
        9, "protocol-equivalences", ok,
        f"slep(budget>=size)==lep bit-exact={slep_equiv}, T=1 forgetting warn={single_task}, "
        f"flep same-dataset rejected={flep_rejects}, {elapsed:.1f}s",
    )


def _strip_wall_clock(obj):
    if isinstance(obj, dict):
        return {k: _strip_wall_clock(v) for k, v in obj.items() if k != "wall_clock_sec"}
    if isinstance(obj, list):
        return [_strip_wall_clock(v) for v in obj]
    return obj


def test_criterion_10_determinism(tmp_path) -> None:
    started = time.monotonic()

    def config_text(output_dir: str) -> str:
        return f"""
[dataset]
num_classes = 10
clips_per_class_train = 36
clips_per_class_test = 12
freq_bins = 32
time_frames = 64
noise_sigma = 2.0
seed = 1

[tasks]
num_tasks = 3
seed = 3

[augment]
segment_len = 32

[training]
regime = "cssl"
epochs_per_task = 10
batch_size = 64
lr = 1e-3
weight_decay = 1e-4

[objective]
method = "simclr"
temperature = 0.2

[probe]
epochs = 30
lr = 1e-2
batch_size = 64
segment_len = 32

[protocols]
lep = true
slep = true
slep_budget = 8
flep = true

[downstream]
num_classes = 6
clips_per_class_train = 12
clips_per_class_test = 6
freq_bins = 32
time_frames = 64
noise_sigma = 2.0
seed = 2

[run]
seeds = [11]
output_dir = "{output_dir}"
"""

    payloads = []
    for sub in ("first", "second"):
        out = tmp_path / sub
        cmd_run(parse_config(config_text(str(out))), quiet=True)
        payloads.append(json.loads((out / "results.json").read_text()))
    clock_fields_present = all("wall_clock_sec" in p for p in payloads)
    identical = _strip_wall_clock(payloads[0]) == _strip_wall_clock(payloads[1])
    elapsed = time.monotonic() - started
    ok = identical and clock_fields_present and elapsed <= 3600.0
    assert _verdict(
        10, "determinism", ok,
        f"results.json identical sans wall-clock={identical}, {elapsed:.0f}s",
    )
