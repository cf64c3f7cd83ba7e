"""Experiment presets: the verification suite, ablations, and cost sweeps.

Every preset writes versioned CSVs that are byte-identical across repeated
runs with the same spec and seed (the training metric log's wall-clock
seconds column is the single documented exception).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, desk_config, paper_config, with_overrides
from .costs import COST_CSV_HEADER, CostInputs, cost_report_row, reconcile
from .model import ModelParams, generate, run_inference, save_checkpoint
from .pool import grad_through_retrieval_is_zero
from .tasks import gen_planted_recall, local_lm_stream, planted_recall_stream
from .training import (
    CSV_VERSION,
    adjoint_oracle_gradient,
    audit_chain,
    build_training_chain,
    eval_fullcontext,
    eval_segmented,
    reference_chain,
    tbptt_gradient,
    train,
    train_misaligned,
    write_metrics_csv,
)


@dataclass
class ExperimentSpec:
    preset: str
    overrides: dict = field(default_factory=dict)
    task: str = "local-lm"
    steps: int = 300
    seed: int = 0
    n_seeds: int = 3
    out_dir: str = "out"
    k: int | None = None
    sample_len: int = 64
    eval_samples: int = 16
    base: str = "desk"
    config_path: str | None = None

    def config(self) -> ModelConfig:
        if self.config_path:
            with open(self.config_path, "r", encoding="utf-8") as f:
                cfg = ModelConfig.from_text(f.read())
            return with_overrides(cfg, self.overrides)
        base = {"desk": desk_config, "paper": paper_config}[self.base]
        return base(**self.overrides)


def _outpath(spec: ExperimentSpec, name: str) -> Path:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _write_csv(path: Path, header: str, rows: list[str]):
    with open(path, "w", encoding="utf-8") as f:
        f.write(CSV_VERSION + "\n")
        f.write(header + "\n")
        for row in rows:
            f.write(row + "\n")


def _eval_stream(spec: ExperimentSpec, cfg: ModelConfig, offset: int = 100_000):
    return [
        next(local_lm_stream(spec.seed + offset + i, spec.sample_len, cfg.vocab))
        for i in range(spec.eval_samples)
    ]


def max_rel_err(a: dict, b: dict, atol: float = 1e-14) -> float:
    """Worst elementwise relative error between two gradient dicts; entries
    within ``atol`` absolutely count as agreeing."""
    worst = 0.0
    for name in a:
        x, y = a[name], b[name]
        diff = np.abs(x - y)
        denom = np.maximum(np.abs(x), np.abs(y))
        rel = np.where(diff <= atol, 0.0, diff / np.maximum(denom, 1e-300))
        worst = max(worst, float(rel.max()))
    return worst


# ---------------------------------------------------------------------------
# verify preset
# ---------------------------------------------------------------------------


def run_verify(spec: ExperimentSpec) -> int:
    """Machine checks of the engine's central claims; prints one line per
    check and returns 0 only if all pass."""
    cfg = spec.config()
    rng = np.random.default_rng(spec.seed)
    tokens = rng.integers(1, cfg.vocab, size=4 * cfg.segment_len)
    params = ModelParams.init(cfg, seed=spec.seed)
    failures = 0

    def report(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
        if not ok:
            failures += 1

    # truncated-gradient exactness against the adjoint oracle
    ref = reference_chain(params, cfg, tokens)
    jacobians: dict = {}
    for k in (0, 1, 2):
        g_seq = tbptt_gradient(params, cfg, tokens, k)
        g_adj = adjoint_oracle_gradient(params, cfg, tokens, k, ref=ref, jacobians=jacobians)
        err = max_rel_err(g_seq, g_adj)
        report(f"tbptt gradient == adjoint oracle (K={k})", err < 1e-10, f"max rel err {err:.2e}")

    # forward identity between training and inference mode
    from .model import forward_segment
    from .carry import init_empty
    from .tensor import Tape

    carry = init_empty(cfg.partition, cfg.d_head, cfg.carry_len)
    seg = tokens[: cfg.segment_len]
    inf = forward_segment(params, cfg, seg, carry, mode="inference")
    trn = forward_segment(params.bind(Tape()), cfg, seg, carry, mode="training")
    report(
        "training and inference logits bit-identical",
        np.array_equal(inf.logits.data, trn.logits.data),
    )

    # retrieval contributes forward, never backward
    report("retrieval prefix is forward-only", grad_through_retrieval_is_zero(params, cfg, tokens))

    # carry is the sole cross-segment gradient bridge
    chain = build_training_chain(params, cfg, tokens)
    report("carried state is the only cross-segment edge", not audit_chain(chain))

    # counters equal the closed-form cost model
    res = run_inference(params, cfg, tokens)
    rec = reconcile(cfg, res)
    report(
        "counters match cost model exactly",
        rec.ok,
        f"macs {rec.detail['flops_measured']} vs {rec.detail['flops_model']}, "
        f"pool {rec.detail['pool_measured']} vs {rec.detail['pool_model']}",
    )
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# training presets
# ---------------------------------------------------------------------------


def run_train(spec: ExperimentSpec) -> int:
    cfg = spec.config()
    params = ModelParams.init(cfg, seed=spec.seed)
    k = cfg.tbptt_depth if spec.k is None else spec.k
    if spec.task == "local-lm":
        stream = local_lm_stream(spec.seed, spec.sample_len, cfg.vocab)
    elif spec.task == "planted-recall":
        gap, length = _recall_geometry(cfg)
        stream = planted_recall_stream(
            spec.seed, length, cfg.vocab, gap, cfg.segment_len, cfg.carry_len
        )
    else:
        raise ValueError(f"unknown task: {spec.task}")
    state, rows = train(params, cfg, stream, spec.steps, k=k)
    write_metrics_csv(_outpath(spec, "metrics.csv"), rows)
    save_checkpoint(_outpath(spec, "checkpoint.bin"), state.params, cfg)
    evals = _eval_stream(spec, cfg)
    seg_loss = eval_segmented(state.params, cfg, evals)
    _write_csv(
        _outpath(spec, "eval.csv"),
        "task,k,steps,seed,eval_segmented",
        [f"{spec.task},{k},{spec.steps},{spec.seed},{seg_loss!r}"],
    )
    print(f"final segmented eval loss: {seg_loss:.4f}")
    return 0


def run_eval(spec: ExperimentSpec, checkpoint: str) -> int:
    from .model import load_checkpoint

    params, cfg = load_checkpoint(checkpoint)
    evals = _eval_stream(spec, cfg)
    seg = eval_segmented(params, cfg, evals)
    full = eval_fullcontext(params, cfg, evals)
    _write_csv(
        _outpath(spec, "eval.csv"),
        "seed,eval_segmented,eval_fullcontext",
        [f"{spec.seed},{seg!r},{full!r}"],
    )
    print(f"segmented {seg:.4f}  full-context {full:.4f}")
    return 0


def _recall_geometry(cfg: ModelConfig) -> tuple[int, int]:
    """Sample length and gap for the recall task: key early in the first
    segment, query on the second segment's last position."""
    length = 3 * cfg.segment_len
    gap = cfg.segment_len + cfg.carry_len  # the cross-horizon boundary case
    return gap, length


def recall_accuracy(params: ModelParams, cfg: ModelConfig, samples) -> float:
    hits = 0
    for sample in samples:
        prompt = sample.tokens[: sample.meta["query_pos"] + 1]
        pred = generate(params, cfg, prompt, 1)[0]
        hits += int(pred == sample.meta["answer_token"])
    return hits / len(samples)


def ablate_alignment(spec: ExperimentSpec) -> dict:
    """Aligned TBPTT (K=1, K=2) versus full-context training, all evaluated
    under segmented execution."""
    cfg = spec.config()
    rows = []
    results: dict[str, list[float]] = {"aligned-k1": [], "misaligned": [], "aligned-k2": []}
    for s in range(spec.n_seeds):
        seed = spec.seed + s
        evals = [
            next(local_lm_stream(seed + 100_000 + i, spec.sample_len, cfg.vocab))
            for i in range(spec.eval_samples)
        ]
        for variant, trainer, k in (
            ("aligned-k1", train, 1),
            ("misaligned", train_misaligned, None),
            ("aligned-k2", train, 2),
        ):
            params = ModelParams.init(cfg, seed=seed)
            stream = local_lm_stream(seed, spec.sample_len, cfg.vocab)
            if k is None:
                state, log = trainer(params, cfg, stream, spec.steps)
            else:
                state, log = trainer(params, cfg, stream, spec.steps, k=k)
            seg = eval_segmented(state.params, cfg, evals)
            full = eval_fullcontext(state.params, cfg, evals)
            results[variant].append(seg)
            rows.append(f"{variant},{seed},{log[-1][1]!r},{seg!r},{full!r}")
    _write_csv(
        _outpath(spec, "ablate_alignment.csv"),
        "variant,seed,final_train_loss,eval_segmented,eval_fullcontext",
        rows,
    )
    means = {k: float(np.mean(v)) for k, v in results.items()}
    print({k: round(v, 4) for k, v in means.items()})
    return means


def ablate_capacity(spec: ExperimentSpec) -> dict:
    """Carried-state size sweep: no carry, the preset's M, and twice that."""
    base = spec.config()
    sizes = [0, base.carry_len, 2 * base.carry_len]
    rows = []
    means = {}
    for m in sizes:
        cfg = with_overrides(base, {"carry_len": m})
        losses = []
        for s in range(spec.n_seeds):
            seed = spec.seed + s
            params = ModelParams.init(cfg, seed=seed)
            stream = local_lm_stream(seed, spec.sample_len, cfg.vocab)
            state, _ = train(params, cfg, stream, spec.steps, k=1)
            evals = [
                next(local_lm_stream(seed + 100_000 + i, spec.sample_len, cfg.vocab))
                for i in range(spec.eval_samples)
            ]
            seg = eval_segmented(state.params, cfg, evals)
            losses.append(seg)
            rows.append(f"{m},{seed},{seg!r}")
        means[m] = float(np.mean(losses))
    _write_csv(_outpath(spec, "ablate_capacity.csv"), "carry_len,seed,eval_segmented", rows)
    print({k: round(v, 4) for k, v in means.items()})
    return means


def ablate_longrange(spec: ExperimentSpec) -> dict:
    """Long-range layer count sweep on the planted-recall task: retrieval
    disabled, one enabled layer, the preset's two."""
    base = spec.config()
    variants = [frozenset(), frozenset({1}), base.partition.long_layers]
    rows = []
    means = {}
    for layers in variants:
        cfg = with_overrides(base, {"long_layers": layers})
        gap, length = _recall_geometry(cfg)
        accs = []
        for s in range(spec.n_seeds):
            seed = spec.seed + s
            params = ModelParams.init(cfg, seed=seed)
            stream = planted_recall_stream(
                seed, length, cfg.vocab, gap, cfg.segment_len, cfg.carry_len
            )
            state, _ = train(params, cfg, stream, spec.steps, k=1)
            tests = [
                gen_planted_recall(
                    seed + 200_000 + i, length, cfg.vocab, gap, cfg.segment_len, cfg.carry_len
                )
                for i in range(spec.eval_samples)
            ]
            acc = recall_accuracy(state.params, cfg, tests)
            accs.append(acc)
            rows.append(f"{len(layers)},{seed},{acc!r}")
        means[len(layers)] = float(np.mean(accs))
    _write_csv(_outpath(spec, "ablate_longrange.csv"), "n_long_layers,seed,recall_accuracy", rows)
    print({k: round(v, 4) for k, v in means.items()})
    return means


def run_cost_sweep(spec: ExperimentSpec) -> int:
    """Measured desk-scale cost rows plus closed-form rows at full scale."""
    cfg = spec.config()
    rows = []
    rng = np.random.default_rng(spec.seed)
    for n_segments in (1, 2, 4, 8):
        t = n_segments * cfg.segment_len
        tokens = rng.integers(1, cfg.vocab, size=t)
        params = ModelParams.init(cfg, seed=spec.seed)
        res = run_inference(params, cfg, tokens)
        rec = reconcile(cfg, res)
        if not rec.ok:
            print(f"counter reconciliation failed at T={t}: {rec.detail}")
            return 1
        rows.append(cost_report_row(cfg, t, res))
    full = paper_config()
    for t in (4096, 32768, 131072):
        rows.append(cost_report_row(full, t))
    _write_csv(_outpath(spec, "cost.csv"), COST_CSV_HEADER, rows)
    print(f"wrote {_outpath(spec, 'cost.csv')}")
    return 0


PRESET_RUNNERS = {
    "verify": run_verify,
    "ablate-alignment": lambda spec: 0 if ablate_alignment(spec) else 1,
    "ablate-capacity": lambda spec: 0 if ablate_capacity(spec) else 1,
    "ablate-longrange": lambda spec: 0 if ablate_longrange(spec) else 1,
    "cost-sweep": run_cost_sweep,
}


def run_experiment(spec: ExperimentSpec) -> int:
    if spec.preset not in PRESET_RUNNERS:
        raise ValueError(
            f"unknown preset: {spec.preset!r} (have {sorted(PRESET_RUNNERS)})"
        )
    return PRESET_RUNNERS[spec.preset](spec)
