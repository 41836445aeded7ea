"""Acceptance checks shared by ``spotkit selftest`` and the test suite.

Each ``criterion_N`` returns a :class:`CheckResult`. Checks 1-5 are oracle and
invariant checks that finish in seconds; 6-10 train models and take minutes.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import tensor as T
from .autodiff.gradcheck import grad_check
from .autodiff.tensor import Tensor
from .decoder import ARDecoder, DecoderConfig, MLPDecoder, build_permutations, ensemble_dec_masks
from .distill import attn_distill_loss, hungarian_match, match_teacher_masks, reconstruction_loss, total_loss
from .encoder import EncoderConfig, SlotConfig
from .metrics import fg_ari, mbo, miou_hungarian, nblock_baseline
from .model import ModelConfig, SlotAutoEncoder
from .scenes import SceneSpec, generate_dataset


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(number: int, name: str, budget_s: float | None = None):
    """Wrap a check returning (passed, detail, values); enforce a CPU budget if given."""
    def wrap(fn):
        def run(*args, **kwargs) -> CheckResult:
            start, cpu0 = time.perf_counter(), time.process_time()
            passed, detail, values = fn(*args, **kwargs)
            cpu = time.process_time() - cpu0
            if budget_s is not None and cpu >= budget_s:
                passed = False
                detail += f"; over budget {cpu:.0f}s >= {budget_s:.0f}s cpu"
            return CheckResult(number, name, bool(passed), detail, time.perf_counter() - start, values)
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


# ---------------------------------------------------------------------------
# 1. gradients


def micro_model(init_mode: str = "gaussian", decoder: str = "ar", seed: int = 0) -> SlotAutoEncoder:
    """n=4 patches (2x2 grid), k=2 slots, width 8, float64."""
    cfg = ModelConfig(
        EncoderConfig(patch_dim=12, n_patches=4, d_enc=8, depth=1, heads=2, trainable_blocks=1),
        SlotConfig(k=2, d_u=8, iterations=2, mlp_hidden=8, d_p=8, init_mode=init_mode),
        DecoderConfig(kind=decoder, d_y=12, d_u=8, n_patches=4, grid_h=2, grid_w=2, d_dec=12,
                      blocks=4, heads=6, mlp_hidden=8),
    )
    return SlotAutoEncoder(cfg, seed=seed, dtype=np.float64)


def micro_loss_check(init_mode: str, decoder: str, seed: int, max_coords: int = 6) -> float:
    """Worst finite-difference error of L_REC + lambda * L_ATT on a micro model.

    Learnable queries start the recurrent state through a stop-gradient, so the
    finite differences there run on the same function with that state held at
    its unperturbed value; the model's own gradients must agree with it.
    """
    rng = np.random.default_rng([seed, 11])
    model = micro_model(init_mode, decoder, seed)
    enc = model.encoder
    patches = Tensor(rng.standard_normal((2, 4, 12)))
    targets = Tensor(rng.standard_normal((2, 4, 12)))
    noise = model.slot_noise(rng, 2)
    noise = None if noise is None else noise.astype(np.float64)
    perm = int(rng.integers(1, 10)) if decoder == "ar" else 1
    teacher = rng.dirichlet(np.ones(2), size=(2, 4))
    with T.no_grad():
        init0 = enc.slot_init(2, noise).data.copy()
        student = model(patches.data, targets.data, perm, noise).slot_attn.data
    matched = match_teacher_masks(teacher, student)
    state = Tensor(init0) if init_mode == "learnable" else None

    def objective(slots, attn):
        rec = reconstruction_loss(targets, model.decoder(targets, slots, perm).recon)
        return total_loss(rec, attn_distill_loss(matched, attn), 0.5).total

    def loss():
        out = enc.slot_attention(enc.backbone(patches), enc.slot_init(2, noise), state=state)
        return objective(out.slots, out.attn)

    params = model.parameters()
    model.zero_grad()
    out = model(patches.data, targets.data, perm, noise)
    objective(out.slots, out.slot_attn).backward()
    own = [p.grad.copy() for p in params]
    model.zero_grad()
    loss().backward()
    drift = max(float(np.max(np.abs(a - p.grad))) for a, p in zip(own, params))
    return max(drift, grad_check(loss, params, max_coords=max_coords, seed=seed))


def primitive_checks(trials: int = 3) -> dict[str, float]:
    """Worst finite-difference error per differentiable primitive over random inputs."""
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng([trial, 12])
        s = lambda *shape: rng.standard_normal(shape)
        pos = lambda *shape: rng.uniform(0.5, 2.0, shape)
        idx = rng.integers(0, 4, size=5)
        target = T.softmax(Tensor(s(3, 4)), -1).data
        mask = rng.random((3, 3)) < 0.3
        cases = {
            "add": (T.add, [s(3, 4), s(4)]),
            "sub": (T.sub, [s(2, 3), s(2, 3)]),
            "mul": (T.mul, [s(3, 4), s(3, 1)]),
            "div": (T.div, [s(3, 4), pos(3, 4)]),
            "neg": (T.neg, [s(3)]),
            "scale": (lambda a: T.scale(a, -1.7), [s(3, 2)]),
            "matmul": (T.matmul, [s(2, 3, 4), s(2, 4, 5)]),
            "matmul_shared": (T.matmul, [s(2, 3, 4), s(4, 5)]),
            "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [s(2, 3, 4)]),
            "swapaxes": (lambda a: T.swapaxes(a, -1, -2), [s(2, 3, 4)]),
            "reshape": (lambda a: T.reshape(a, (6, 2)), [s(3, 4)]),
            "concat": (lambda a, b: T.concat([a, b], axis=1), [s(2, 3), s(2, 2)]),
            "getitem": (lambda a: a[:, 1:3], [s(3, 4)]),
            "take": (lambda a: T.take(a, [2, 0, 1], axis=1), [s(2, 3, 2)]),
            "take_repeat": (lambda a: T.take(a, [1, 1, 0], axis=0), [s(3, 2)]),
            "embedding": (lambda w: T.embedding(w, idx), [s(4, 3)]),
            "masked_fill": (lambda a: T.masked_fill(a, mask, -3.0), [s(3, 3)]),
            "sum": (lambda a: T.tsum(a, axis=0), [s(3, 4)]),
            "mean": (lambda a: T.mean(a, axis=-1, keepdims=True), [s(3, 4)]),
            "exp": (T.exp, [s(3, 3)]),
            "log": (T.log, [pos(3, 3)]),
            "clamp_min": (lambda a: T.clamp_min(a, 0.1), [pos(3, 3)]),
            "relu": (T.relu, [s(4, 4)]),
            "sigmoid": (T.sigmoid, [s(4, 4)]),
            "tanh": (T.tanh, [s(4, 4)]),
            "gelu": (T.gelu, [s(4, 4)]),
            "softmax": (lambda a: T.softmax(a, axis=0), [s(3, 4)]),
            "layer_norm": (T.layer_norm, [s(3, 5), s(5), s(5)]),
            "mse": (T.mse, [s(3, 4), s(3, 4)]),
            "cross_entropy": (lambda a: T.cross_entropy(a, target), [s(3, 4)]),
        }
        for name, (fn, inputs) in cases.items():
            params = [Tensor(x, requires_grad=True) for x in inputs]
            with T.no_grad():
                shape = fn(*[Tensor(x) for x in inputs]).shape
            w = Tensor(rng.standard_normal(shape))
            err = grad_check(lambda: T.tsum(fn(*params) * w), params, max_coords=None)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


@_timed(1, "gradient correctness", budget_s=60)
def criterion_1(tol: float = 1e-4):
    prims = primitive_checks()
    models = {}
    for init_mode, decoder in (("gaussian", "ar"), ("learnable", "ar"), ("gaussian", "mlp")):
        models[f"{init_mode}/{decoder}"] = micro_loss_check(init_mode, decoder, seed=0)
    worst_prim = max(prims, key=prims.get)
    worst_model = max(models, key=models.get)
    ok = prims[worst_prim] < tol and models[worst_model] < tol
    detail = (f"worst primitive {worst_prim}={prims[worst_prim]:.2e}, "
              f"worst micro model {worst_model}={models[worst_model]:.2e} (tol {tol:g})")
    return ok, detail, {"primitives": prims, "models": models}


# ---------------------------------------------------------------------------
# 2. permutations


def _small_ar(grid: int, seed: int) -> ARDecoder:
    cfg = DecoderConfig(d_y=6, d_u=8, n_patches=grid * grid, grid_h=grid, grid_w=grid, d_dec=12,
                        blocks=4, heads=6, mlp_hidden=16)
    return ARDecoder(cfg, np.random.default_rng(seed), dtype=np.float64)


def causality_violations(grid: int, positions: int = 10, seed: int = 0) -> int:
    """Perturb every target from step m on; count earlier outputs that change any bit."""
    rng = np.random.default_rng([seed, 13])
    dec = _small_ar(grid, seed)
    n = grid * grid
    y = rng.standard_normal((1, n, 6))
    slots = Tensor(rng.standard_normal((1, 3, 8)))
    bad = 0
    with T.no_grad():
        for spec in dec.permutations:
            base = dec(Tensor(y), slots, spec).recon.data
            for m in rng.choice(n, size=min(positions, n), replace=False):
                y2 = y.copy()
                y2[0, spec.order[m:]] += rng.standard_normal((n - m, 6))
                out = dec(Tensor(y2), slots, spec).recon.data
                kept = spec.order[: m + 1]      # outputs whose inputs precede step m
                if out[0, kept].tobytes() != base[0, kept].tobytes():
                    bad += 1
    return bad


@_timed(2, "permutation suite", budget_s=60)
def criterion_2():
    problems = []
    for g in (4, 7):
        n = g * g
        for spec in build_permutations(g, g):
            if sorted(spec.order.tolist()) != list(range(n)):
                problems.append(f"{g}x{g} {spec.name} not a bijection")
            if not np.array_equal(spec.order[spec.inverse], np.arange(n)) or \
                    not np.array_equal(spec.inverse[spec.order], np.arange(n)):
                problems.append(f"{g}x{g} {spec.name} inverse mismatch")
        bad = causality_violations(g)
        if bad:
            problems.append(f"{g}x{g}: {bad} causality violations")
    return not problems, "; ".join(problems) or "18 bijections, 180 causality probes bit-exact", {}


# ---------------------------------------------------------------------------
# 3. row-stochastic masks


@_timed(3, "mask normalization")
def criterion_3(passes: int = 100, tol: float = 1e-6):
    rng = np.random.default_rng(14)
    model = SlotAutoEncoder(ModelConfig(
        EncoderConfig(patch_dim=12, n_patches=16, d_enc=16, depth=1, heads=2),
        SlotConfig(k=4, d_u=16, mlp_hidden=32, d_p=16),
        DecoderConfig(d_y=12, d_u=16, n_patches=16, grid_h=4, grid_w=4, d_dec=12, mlp_hidden=16),
    ), seed=3)
    mlp = MLPDecoder(DecoderConfig(kind="mlp", d_y=12, d_u=16, n_patches=16, grid_h=4, grid_w=4,
                                   mlp_hidden=16), rng)
    worst = {"A_SLOT": 0.0, "A_DEC": 0.0, "ensemble": 0.0, "alpha": 0.0}
    with T.no_grad():
        for _ in range(passes):
            scale = float(rng.uniform(0.1, 10.0))
            patches = (scale * rng.standard_normal((2, 16, 12))).astype(np.float32)
            targets = (scale * rng.standard_normal((2, 16, 12))).astype(np.float32)
            noise = model.slot_noise(rng, 2)
            out = model(patches, targets, int(rng.integers(1, 10)), noise)
            ens = ensemble_dec_masks(Tensor(targets), out.slots, model.decoder)
            alpha = mlp(None, out.slots).attn.data
            for key, a in (("A_SLOT", out.slot_attn.data), ("A_DEC", out.dec_attn.data),
                           ("ensemble", ens), ("alpha", alpha)):
                dev = float(np.max(np.abs(a.astype(np.float64).sum(-1) - 1.0)))
                if np.any(a < 0):
                    dev = np.inf
                worst[key] = max(worst[key], dev)
    ok = all(v < tol for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return ok, f"max |row sum - 1|: {detail}", worst


# ---------------------------------------------------------------------------
# 4. assignment oracle


def brute_force_match(iou: np.ndarray, tol: float = 1e-12) -> tuple[tuple[int, ...], float]:
    """Lexicographically first permutation whose row-order total is within tol of the best."""
    k = iou.shape[0]
    totals = {p: sum(float(iou[i, p[i]]) for i in range(k)) for p in itertools.permutations(range(k))}
    best = max(totals.values())
    for p in itertools.permutations(range(k)):
        if totals[p] >= best - tol * max(1, k):
            return p, totals[p]
    raise AssertionError("unreachable")


def random_iou_matrix(rng: np.random.Generator, k: int) -> np.ndarray:
    """IoU of two random hard masks over a small patch set (ties and zeros are common)."""
    n = int(rng.integers(k, 4 * k + 1))
    a = np.eye(k)[rng.integers(0, k, n)]
    b = np.eye(k)[rng.integers(0, k, n)]
    inter = a.T @ b
    union = a.sum(0)[:, None] + b.sum(0)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@_timed(4, "assignment oracle")
def criterion_4(trials: int = 100):
    rng = np.random.default_rng(15)
    mismatches = 0
    for t in range(trials):
        k = int(rng.integers(1, 7))
        iou = random_iou_matrix(rng, k) if t % 2 == 0 else rng.random((k, k))
        got = hungarian_match(iou)
        perm, total = brute_force_match(iou)
        if tuple(got.perm.tolist()) != perm or got.total_iou != total:
            mismatches += 1
    return mismatches == 0, f"{trials - mismatches}/{trials} matrices identical to brute force", {}


# ---------------------------------------------------------------------------
# 5. metric oracles


def oracle_iou(pred, gt, g, p) -> float:
    a = {(i, j) for i, j in np.ndindex(gt.shape) if gt[i, j] == g}
    b = {(i, j) for i, j in np.ndindex(pred.shape) if pred[i, j] == p}
    return len(a & b) / len(a | b)


def oracle_mbo(pred, gt) -> float | None:
    segs = sorted(set(gt.ravel().tolist()) - {0})
    if not segs:
        return None
    labels = sorted(set(pred.ravel().tolist()))
    return sum(max(oracle_iou(pred, gt, g, p) for p in labels) for g in segs) / len(segs)


def oracle_miou(pred, gt) -> float | None:
    """Best one-to-one matching by enumeration; unmatched GT segments score 0."""
    segs = sorted(set(gt.ravel().tolist()) - {0})
    if not segs:
        return None
    labels = sorted(set(pred.ravel().tolist()))
    options = labels + [None] * len(segs)
    best = 0.0
    for choice in itertools.permutations(options, len(segs)):
        if any(c is not None and choice.count(c) > 1 for c in choice):
            continue
        best = max(best, sum(oracle_iou(pred, gt, g, c) for g, c in zip(segs, choice) if c is not None))
    return best / len(segs)


def oracle_fg_ari(pred, gt) -> float | None:
    """Pair counting over foreground pixels."""
    pts = [(int(gt[i, j]), int(pred[i, j])) for i, j in np.ndindex(gt.shape) if gt[i, j] != 0]
    if not pts:
        return None
    n11 = n10 = n01 = n00 = 0
    for (g1, p1), (g2, p2) in itertools.combinations(pts, 2):
        same_g, same_p = g1 == g2, p1 == p2
        if same_g and same_p:
            n11 += 1
        elif same_g:
            n10 += 1
        elif same_p:
            n01 += 1
        else:
            n00 += 1
    denom = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11)
    if denom == 0:
        return 1.0
    return 2.0 * (n00 * n11 - n01 * n10) / denom


def random_label_pair(rng: np.random.Generator):
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    gt = rng.integers(0, int(rng.integers(1, 5)) + 1, (h, w))
    pred = rng.integers(0, int(rng.integers(1, 5)) + 1, (h, w))
    return pred, gt


def _close(a, b, tol=1e-12) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= tol


@_timed(5, "metric oracles", budget_s=60)
def criterion_5(trials: int = 50, scenes: int = 40):
    rng = np.random.default_rng(16)
    problems = []
    for t in range(trials):
        pred, gt = random_label_pair(rng)
        for name, ours, ref in (("mbo", mbo, oracle_mbo), ("miou", miou_hungarian, oracle_miou),
                                ("fg_ari", fg_ari, oracle_fg_ari)):
            if not _close(ours(pred, gt), ref(pred, gt)):
                problems.append(f"{name} trial {t}")
        if (gt != 0).any() and fg_ari(gt, gt) != 1.0:
            problems.append(f"fg_ari(gt, gt) trial {t}")
    single = generate_dataset(SceneSpec(objects_min=1, objects_max=1), scenes, seed=17)
    block = nblock_baseline(1, 1, single.spec.image_size, single.spec.image_size)
    aris = [fg_ari(block, s.instance_labels) for s in single.samples]
    mbos = [mbo(block, s.instance_labels) for s in single.samples]
    if any(a != 1.0 for a in aris):
        problems.append("1-block FG-ARI below 1 on a single-object scene")
    if max(mbos) >= 0.6:
        problems.append(f"1-block mBO_i reached {max(mbos):.3f}")
    detail = "; ".join(problems[:5]) or (f"{trials} label maps match oracles; 1-block baseline: "
                                         f"FG-ARI 1.0 on {scenes} scenes, max mBO_i {max(mbos):.3f}")
    return not problems, detail, {"block_mbo_max": max(mbos)}


FAST_CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5)


# ---------------------------------------------------------------------------
# 6-10. training runs

# desk-scale schedules; one epoch of 2000 scenes at batch 32 is 62 steps
STAGE1_RUN = dict(epochs=15, warmup_steps=100, peak_lr=1e-3)
STAGE2_RUN = dict(epochs=8, warmup_steps=50, peak_lr=1e-3)
DEFAULT_ONLY_RUN = dict(epochs=12, warmup_steps=100, peak_lr=1e-3, perm_mode="default_only")
TRAIN_SEEDS = (0, 1, 2)
TRAIN_DATA_SEED, HELDOUT_SEED = 2000, 9000


class TrainingRuns:
    """Trains on first use and caches the models shared by criteria 6-9.

    Times are process CPU seconds so a busy machine does not fail a budget.
    """

    def __init__(self, train_count: int = 2000, heldout_count: int = 200, seeds=TRAIN_SEEDS,
                 stage1: dict | None = None, stage2: dict | None = None, default_only: dict | None = None,
                 grad_samples: int = 64):
        from .training import TrainConfig

        self.TrainConfig = TrainConfig
        self.seeds = tuple(seeds)
        self.stage1 = stage1 or STAGE1_RUN
        self.stage2 = stage2 or STAGE2_RUN
        self.default_only_cfg = default_only or DEFAULT_ONLY_RUN
        self.grad_samples = grad_samples
        self.train = generate_dataset(SceneSpec(), train_count, TRAIN_DATA_SEED)
        self.heldout = generate_dataset(SceneSpec(), heldout_count, HELDOUT_SEED)
        self._teachers: dict = {}
        self._students: dict = {}
        self._default_only = None

    def teacher(self, seed: int):
        """(checkpoint, cpu seconds) of a permutation-trained stage-1 run."""
        from .training import train_stage1

        if seed not in self._teachers:
            start = time.process_time()
            ckpt = train_stage1(self.TrainConfig(seed=seed, **self.stage1), self.train)
            self._teachers[seed] = (ckpt, time.process_time() - start)
        return self._teachers[seed]

    def student(self, seed: int, perm_mode: str = "random"):
        from .training import train_stage2

        key = (seed, perm_mode)
        if key not in self._students:
            teacher = self.teacher(seed)[0].build_model()
            teacher.set_trainable(False)
            cfg = self.TrainConfig(stage=2, teacher="<memory>", seed=seed, perm_mode=perm_mode, **self.stage2)
            start = time.process_time()
            ckpt = train_stage2(cfg, self.train, teacher)
            self._students[key] = (ckpt, time.process_time() - start)
        return self._students[key]

    def default_only(self):
        from .training import train_stage1

        if self._default_only is None:
            start = time.process_time()
            ckpt = train_stage1(self.TrainConfig(seed=self.seeds[0], **self.default_only_cfg), self.train)
            self._default_only = (ckpt, time.process_time() - start)
        return self._default_only

    def mbo_i(self, ckpt, source: str) -> float:
        from .metrics import evaluate_model

        return evaluate_model(ckpt.build_model(), self.heldout, source).mbo_i


@_timed(6, "stage-1 learning")
def criterion_6(runs: TrainingRuns, ratio: float = 0.5, budget_s: float = 300.0):
    from .training import epoch_means

    parts, ok, values = [], True, {}
    for seed in runs.seeds:
        ckpt, cpu = runs.teacher(seed)
        means = epoch_means(ckpt.history, "L_REC")
        r = means[-1] / means[0]
        good = r <= ratio and cpu < budget_s
        ok &= good
        values[f"seed{seed}"] = {"first": means[0], "last": means[-1], "ratio": r, "cpu_s": cpu}
        parts.append(f"seed {seed} {means[0]:.4f}->{means[-1]:.4f} (x{r:.2f}, {cpu:.0f}s cpu)")
    return ok, "; ".join(parts), values


@_timed(7, "self-training trend")
def criterion_7(runs: TrainingRuns, budget_s: float = 900.0):
    teacher_slot = [runs.mbo_i(runs.teacher(s)[0], "slot") for s in runs.seeds]
    student_slot, perm_dec, fixed_dec = [], [], []
    cpu = {"random": 0.0, "default_only": 0.0}
    for s in runs.seeds:
        ckpt, secs = runs.student(s, "random")
        cpu["random"] += secs
        student_slot.append(runs.mbo_i(ckpt, "slot"))
        perm_dec.append(runs.mbo_i(ckpt, "decoder"))
        ckpt, secs = runs.student(s, "default_only")
        cpu["default_only"] += secs
        fixed_dec.append(runs.mbo_i(ckpt, "decoder"))
    med = {k: float(np.median(v)) for k, v in (("teacher_slot", teacher_slot), ("student_slot", student_slot),
                                               ("perm_decoder", perm_dec), ("fixed_decoder", fixed_dec))}
    teacher_cpu = sum(runs.teacher(s)[1] for s in runs.seeds)
    in_budget = max(cpu["random"], cpu["default_only"], teacher_cpu) < budget_s
    slot_ok = med["student_slot"] >= med["teacher_slot"]
    dec_ok = med["perm_decoder"] >= med["fixed_decoder"]
    detail = (f"slot mBO_i student {med['student_slot']:.4f} vs teacher {med['teacher_slot']:.4f} "
              f"[{'ok' if slot_ok else 'below'}]; decoder mBO_i perm {med['perm_decoder']:.4f} vs "
              f"no-perm {med['fixed_decoder']:.4f} [{'ok' if dec_ok else 'below'}]; cpu per config "
              f"{teacher_cpu:.0f}/{cpu['random']:.0f}/{cpu['default_only']:.0f}s")
    values = dict(med, teacher_slot_all=teacher_slot, student_slot_all=student_slot, perm_decoder_all=perm_dec,
                  fixed_decoder_all=fixed_dec, cpu=dict(cpu, teacher=teacher_cpu))
    return slot_ok and dec_ok and in_budget, detail, values


@_timed(8, "gradient uniformity")
def criterion_8(runs: TrainingRuns, budget_s: float = 300.0):
    from .diagnostics import grad_norm_map

    data = runs.heldout.subset(0, runs.grad_samples)
    # the permutation-trained model is a criterion-6 teacher; its training is budgeted there
    perm_model = runs.teacher(runs.seeds[0])[0].build_model()
    fixed_ckpt, train_cpu = runs.default_only()
    start = time.process_time()
    cv_default = grad_norm_map(perm_model, data, "default").cv()
    cv_random = grad_norm_map(perm_model, data, "random").cv()
    edge, rest = grad_norm_map(fixed_ckpt.build_model(), data, "default").edge_ratio()
    cpu = time.process_time() - start + train_cpu
    ok = cv_random < cv_default and edge > rest and cpu < budget_s
    detail = (f"cv random {cv_random:.4f} vs default {cv_default:.4f}; default-only edge {edge:.3g} vs "
              f"rest {rest:.3g}; {cpu:.0f}s cpu")
    return ok, detail, {"cv_random": cv_random, "cv_default": cv_default, "edge": edge, "rest": rest,
                        "cpu_s": cpu}


def _cli(*argv) -> tuple[int, str]:
    import contextlib
    import io

    from .cli import main

    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main([str(a) for a in argv])
    return code, out.getvalue()


@_timed(9, "ensembling sanity")
def criterion_9(runs: TrainingRuns, workdir):
    from pathlib import Path

    from .scenes import write_dataset
    from .training import save_checkpoint

    work = Path(workdir)
    ckpt = save_checkpoint(runs.student(runs.seeds[0], "random")[0], work / "student")
    data = write_dataset(runs.heldout, work / "heldout")
    reports = {}
    for source in ("decoder", "ens"):
        code, _ = _cli("eval", "--ckpt", ckpt, "--data", data, "--source", source, "--json", work / f"{source}.json")
        if code != 0:
            return False, f"eval --source {source} exited {code}", {}
        reports[source] = (work / f"{source}.json").read_text()
    model = runs.student(runs.seeds[0], "random")[0].build_model()
    ens = model.masks(runs.heldout.patches[:16], runs.heldout.targets[:16], "ensemble")
    err = float(np.max(np.abs(ens.sum(-1) - 1)))
    differ = reports["ens"] != reports["decoder"]
    detail = f"reports {'differ' if differ else 'identical'}; ensembled rows sum to 1 within {err:.1e}"
    return differ and err < 1e-6, detail, {"decoder": reports["decoder"], "ens": reports["ens"]}


# small geometry so two full pipelines finish in about a minute
PIPELINE_SCENES = "image_size = 16\npatch_size = 4\nobjects_max = 3\nsize_min = 4\nsize_max = 8\nmin_visible = 6\n"
PIPELINE_TRAIN = ("epochs = 2\nbatch_size = 16\nwarmup_steps = 4\nd_enc = 16\nenc_heads = 2\nd_u = 16\n"
                  "slot_mlp_hidden = 32\nd_dec = 12\nmlp_dec_hidden = 32\nk = 3\nseed = 11\n")


def run_pipeline(workdir) -> bytes:
    """gen-data -> stage 1 -> stage 2 -> eval through the CLI; returns the report bytes."""
    from pathlib import Path

    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    (work / "scenes.cfg").write_text(PIPELINE_SCENES)
    steps = [("gen-data", "--spec", work / "scenes.cfg", "--out", work / "train", "--count", 64, "--seed", 5),
             ("gen-data", "--spec", work / "scenes.cfg", "--out", work / "test", "--count", 24, "--seed", 6)]
    (work / "stage1.cfg").write_text(PIPELINE_TRAIN + f"data = {work / 'train'}\n")
    (work / "stage2.cfg").write_text(PIPELINE_TRAIN + f"data = {work / 'train'}\nstage = 2\n"
                                     f"teacher = {work / 'teacher'}\n")
    steps += [("train", "--config", work / "stage1.cfg", "--out", work / "teacher"),
              ("train", "--config", work / "stage2.cfg", "--out", work / "student"),
              ("eval", "--ckpt", work / "student", "--data", work / "test", "--source", "max",
               "--json", work / "report.json")]
    for argv in steps:
        code, _ = _cli(*argv)
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited {code}")
    return (work / "report.json").read_bytes()


@_timed(10, "determinism")
def criterion_10(workdir):
    from pathlib import Path

    a = run_pipeline(Path(workdir) / "run_a")
    b = run_pipeline(Path(workdir) / "run_b")
    same = a == b
    return same, f"reports {'identical' if same else 'differ'} ({len(a)} bytes)", {"report": a.decode()}


def training_criteria(runs: TrainingRuns, workdir):
    """Yield criteria 6-10 in order; they share the trained models in ``runs``."""
    from pathlib import Path

    work = Path(workdir)
    yield criterion_6(runs)
    yield criterion_7(runs)
    yield criterion_8(runs)
    yield criterion_9(runs, work / "c9")
    yield criterion_10(work / "c10")
