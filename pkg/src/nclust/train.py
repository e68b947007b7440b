"""Training loop: warmup schedule, Adam, checkpoints, curriculum stages.

The learning rate follows the inverse-square-root warmup schedule; the
optimiser is Adam with bias correction, written out explicitly so a
step can be replayed and checked.  Checkpoints are a single JSON file
with base64 tensor payloads so that save -> load -> save is
byte-identical (no timestamps, sorted keys).

A curriculum is a list of stages of increasing sequence length.  Each
stage draws augmented sub-sequences from the training corpus, evaluates
loss and diarisation error on a held-out corpus at a fixed interval,
and stops early when the dev loss stops improving.  Later stages warm
start from the previous stage's weights.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from nclust.augment import AugmentConfig, EmbeddingPool, build_training_set, split_for_eval
from nclust.core import MeetingRecord
from nclust.model import ClusteringTransformer, ModelConfig, decode_greedy
from nclust.score import batch_score

CHECKPOINT_FORMAT = "nclust-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged or produced a non-finite gradient."""


class CheckpointError(ValueError):
    """Checkpoint file is missing fields or has the wrong format."""


@dataclass(frozen=True)
class LrSchedule:
    """Inverse-square-root decay with linear warmup.

    lr(step) = peak_factor / sqrt(dim_model) * min(step^-1/2,
    step * warmup^-3/2); the apex peak_factor / sqrt(dim_model * warmup)
    is reached exactly at step == warmup_steps.  Steps are 1-based.
    """

    dim_model: int
    warmup_steps: int
    peak_factor: float = 1.0

    def __post_init__(self) -> None:
        if self.dim_model < 1 or self.warmup_steps < 1:
            raise ValueError("dim_model and warmup_steps must be positive")
        if self.peak_factor <= 0:
            raise ValueError("peak_factor must be positive")

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ValueError("schedule steps are 1-based")
        scale = self.peak_factor / math.sqrt(self.dim_model)
        return scale * min(step ** -0.5, step * self.warmup_steps ** -1.5)


def adam_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    m: torch.Tensor,
    v: torch.Tensor,
    step: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-9,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One bias-corrected Adam update, returned as new tensors.

    ``step`` is the 1-based count of updates including this one.
    """
    beta1, beta2 = betas
    m_new = beta1 * m + (1.0 - beta1) * grad
    v_new = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m_new / (1.0 - beta1 ** step)
    v_hat = v_new / (1.0 - beta2 ** step)
    return param - lr * m_hat / (torch.sqrt(v_hat) + eps), m_new, v_new


class Adam:
    """Adam over a named parameter dict, state exposed for checkpoints."""

    def __init__(
        self,
        params: dict[str, torch.Tensor],
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-9,
    ):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: torch.zeros_like(p) for name, p in params.items()}
        self.v = {name: torch.zeros_like(p) for name, p in params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor], lr: float) -> None:
        for name, grad in grads.items():
            if not bool(torch.isfinite(grad).all()):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        for name, param in self.params.items():
            new_param, self.m[name], self.v[name] = adam_step(
                param,
                grads[name],
                self.m[name],
                self.v[name],
                self.step_count,
                lr,
                self.betas,
                self.eps,
            )
            param.copy_(new_param)


def _encode_tensor(tensor: torch.Tensor) -> dict:
    arr = tensor.detach().cpu().numpy()
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": str(arr.dtype),
        "shape": list(arr.shape),
        "data": base64.b64encode(little.tobytes()).decode("ascii"),
    }


def _decode_tensor(entry: dict) -> torch.Tensor:
    raw = base64.b64decode(entry["data"])
    dtype = np.dtype(entry["dtype"]).newbyteorder("<")
    arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
    return torch.from_numpy(arr.astype(entry["dtype"])).clone()


def checkpoint_payload(
    model: ClusteringTransformer, optimizer: Adam, progress: dict
) -> dict:
    """JSON-ready snapshot of model, optimizer, RNG and progress."""
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "parameters": {
            name: _encode_tensor(p) for name, p in model.named_parameters()
        },
        "optimizer": {
            "step": optimizer.step_count,
            "betas": list(optimizer.betas),
            "eps": optimizer.eps,
            "m": {name: _encode_tensor(t) for name, t in optimizer.m.items()},
            "v": {name: _encode_tensor(t) for name, t in optimizer.v.items()},
        },
        "rng": {
            "torch": base64.b64encode(
                torch.get_rng_state().numpy().tobytes()
            ).decode("ascii")
        },
        "progress": progress,
    }


def save_checkpoint(path: str | Path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a checkpoint file: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("unrecognised checkpoint format")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    for key in ("model_config", "parameters", "optimizer", "progress"):
        if key not in payload:
            raise CheckpointError(f"checkpoint missing field {key!r}")
    return payload


def restore_checkpoint(payload: dict) -> tuple[ClusteringTransformer, Adam, dict]:
    """Rebuild model and optimizer, restore torch RNG state."""
    config = ModelConfig(**payload["model_config"])
    model = ClusteringTransformer(config)
    named = dict(model.named_parameters())
    stored = payload["parameters"]
    if set(named) != set(stored):
        raise CheckpointError("parameter names do not match the model config")
    with torch.no_grad():
        for name, param in named.items():
            tensor = _decode_tensor(stored[name]).to(param.dtype)
            if tuple(tensor.shape) != tuple(param.shape):
                raise CheckpointError(f"shape mismatch for parameter {name!r}")
            param.copy_(tensor)
    opt_state = payload["optimizer"]
    optimizer = Adam(named, betas=tuple(opt_state["betas"]), eps=opt_state["eps"])
    optimizer.step_count = int(opt_state["step"])
    for name in named:
        optimizer.m[name] = _decode_tensor(opt_state["m"][name]).to(named[name].dtype)
        optimizer.v[name] = _decode_tensor(opt_state["v"][name]).to(named[name].dtype)
    rng = payload.get("rng", {})
    if "torch" in rng:
        state = np.frombuffer(base64.b64decode(rng["torch"]), dtype=np.uint8)
        torch.set_rng_state(torch.from_numpy(state.copy()))
    return model, optimizer, dict(payload["progress"])


@dataclass(frozen=True)
class StageConfig:
    """One curriculum stage.

    ``max_len`` of None means whole meetings.  ``min_len_fraction``
    below 1 lets sampled sub-sequences vary between that fraction of
    ``max_len`` and ``max_len`` itself.  ``mode``/``rotate`` choose the
    augmentation applied on top of sub-sequence sampling.  ``lr_scale``
    multiplies the shared schedule, which fine-tuning sets below 1.

    ``patience`` counts evaluations: the stage stops once the number of
    evaluations since the best dev loss reaches it (so patience 0 stops
    right after the first post-training evaluation).  None disables
    early stopping.
    """

    name: str
    max_len: int | None
    steps: int
    min_len_fraction: float = 1.0
    mode: str = "none"
    rotate: bool = False
    examples_per_meeting: int = 50
    batch_size: int = 8
    eval_interval: int = 50
    patience: int | None = 5
    lr_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("a stage needs at least one step")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be positive")
        if self.patience is not None and self.patience < 0:
            raise ValueError("patience must be non-negative")
        if self.lr_scale <= 0:
            raise ValueError("lr_scale must be positive")


@dataclass
class StageResult:
    name: str
    steps_run: int
    best_dev_loss: float
    final_dev_loss: float
    final_dev_ser: float
    stopped_early: bool
    log_lines: list[dict] = field(default_factory=list)


def _stage_examples(
    corpus: list[MeetingRecord],
    stage: StageConfig,
    pool: EmbeddingPool | None,
    seed: int,
    stage_index: int,
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    config = AugmentConfig(
        examples_per_meeting=stage.examples_per_meeting,
        max_len=stage.max_len,
        min_len_fraction=stage.min_len_fraction,
        mode=stage.mode,
        rotate=stage.rotate,
        seed=seed + 7919 * stage_index,
    )
    examples = []
    for sequence, labels in build_training_set(corpus, config, pool=pool):
        x = torch.from_numpy(np.ascontiguousarray(sequence.data))
        y = torch.tensor(labels, dtype=torch.long)
        examples.append((x, y))
    return examples


def _length_batches(
    examples: list[tuple[torch.Tensor, torch.Tensor]],
    batch_size: int,
    rng: np.random.Generator,
):
    """Yield equal-length batches forever, reshuffling each epoch."""
    buckets: dict[int, list[int]] = {}
    for idx, (x, _) in enumerate(examples):
        buckets.setdefault(x.shape[0], []).append(idx)
    while True:
        batches = []
        for indices in buckets.values():
            order = rng.permutation(len(indices))
            for lo in range(0, len(indices), batch_size):
                batches.append([indices[i] for i in order[lo : lo + batch_size]])
        for batch in rng.permutation(len(batches)):
            chosen = batches[batch]
            xs = torch.stack([examples[i][0] for i in chosen]).to(torch.float32)
            ys = torch.stack([examples[i][1] for i in chosen])
            yield xs, ys


def dev_loss(
    model: ClusteringTransformer,
    examples: list[tuple[torch.Tensor, torch.Tensor]],
) -> float:
    """Mean per-token NLL over a fixed example list, dropout disabled."""
    was_training = model.training
    model.eval()
    total = 0.0
    tokens = 0
    with torch.no_grad():
        for x, y in examples:
            loss = model.nll_loss(x.to(model.config.torch_dtype), y)
            total += float(loss) * y.numel()
            tokens += y.numel()
    model.train(was_training)
    return total / max(tokens, 1)


def evaluate_ser(
    model: ClusteringTransformer,
    corpus: list[MeetingRecord],
    max_len: int | None = None,
    collar_s: float = 0.25,
    beam_width: int = 1,
) -> float:
    """Decode every meeting (in chunks of at most max_len) and score SER.

    Each chunk is decoded and scored as its own unit with its own label
    mapping, mirroring how a length-limited dev split is evaluated;
    with ``max_len=None`` whole meetings are decoded in one pass.
    """
    from nclust.model import decode_beam

    chunks: list[MeetingRecord] = []
    hyps: dict[str, tuple[int, ...]] = {}
    for meeting in corpus:
        pieces = [meeting] if max_len is None else split_for_eval(meeting, max_len)
        for piece in pieces:
            scaled = piece.embeddings.data * math.sqrt(piece.embeddings.dim)
            x = torch.from_numpy(scaled).to(model.config.torch_dtype)
            if beam_width > 1:
                labels = decode_beam(model, x, beam_width)
            else:
                labels = decode_greedy(model, x)
            chunks.append(piece)
            hyps[piece.meeting_id] = tuple(labels)
    report = batch_score(chunks, hyps, collar_s=collar_s)
    return report.ser_percent


def run_stage(
    model: ClusteringTransformer,
    optimizer: Adam,
    schedule: LrSchedule,
    train_corpus: list[MeetingRecord],
    dev_corpus: list[MeetingRecord],
    stage: StageConfig,
    stage_index: int = 0,
    seed: int = 0,
    pool: EmbeddingPool | None = None,
    log_path: str | Path | None = None,
    dev_examples_per_meeting: int = 4,
    eval_ser: bool = True,
) -> StageResult:
    """Train one curriculum stage with early stopping on dev loss.

    Writes one JSON line per evaluation to ``log_path`` with the stage
    name, global step, learning rate, mean train loss since the last
    evaluation, dev loss and dev SER.  Raises TrainingError if the
    training loss stops being finite.
    """
    if stage.mode in ("global", "meeting") and pool is None:
        pool = EmbeddingPool.from_corpus(train_corpus)
    examples = _stage_examples(train_corpus, stage, pool, seed, stage_index)
    dev_stage = StageConfig(
        name=stage.name,
        max_len=stage.max_len,
        steps=stage.steps,
        min_len_fraction=stage.min_len_fraction,
        examples_per_meeting=dev_examples_per_meeting,
        batch_size=stage.batch_size,
        eval_interval=stage.eval_interval,
    )
    dev_examples = _stage_examples(dev_corpus, dev_stage, None, seed + 1, stage_index)

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage_index, 1)))
    batches = _length_batches(examples, stage.batch_size, rng)
    log_file = open(log_path, "a") if log_path is not None else None

    def snapshot() -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in model.named_parameters()}

    def evaluate(train_loss: float | None, lr: float | None) -> dict:
        line = {
            "stage": stage.name,
            "step": optimizer.step_count,
            "lr": lr,
            "train_loss": train_loss,
            "dev_loss": dev_loss(model, dev_examples),
            "dev_ser": (
                evaluate_ser(model, dev_corpus, max_len=stage.max_len)
                if eval_ser
                else None
            ),
        }
        result_lines.append(line)
        if log_file is not None:
            log_file.write(json.dumps(line, sort_keys=True) + "\n")
            log_file.flush()
        return line

    stopped_early = False
    running: list[float] = []
    steps_run = 0
    result_lines: list[dict] = []

    try:
        # Baseline evaluation before any update: seeds the best state so
        # a stage that only hurts cannot degrade a warm-started model.
        # It does not count toward patience.
        baseline = evaluate(train_loss=None, lr=None)
        best_loss = baseline["dev_loss"]
        best_state = snapshot()
        evals_since_best = 0
        last_dev = best_loss
        last_ser = math.nan if baseline["dev_ser"] is None else baseline["dev_ser"]

        for local_step in range(1, stage.steps + 1):
            xs, ys = next(batches)
            model.train()
            loss = model.nll_loss(xs.to(model.config.torch_dtype), ys)
            if not bool(torch.isfinite(loss)):
                raise TrainingError(
                    f"training loss diverged at stage {stage.name!r} step {local_step}"
                )
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {
                name: (torch.zeros_like(p) if p.grad is None else p.grad)
                for name, p in model.named_parameters()
            }
            lr = schedule(optimizer.step_count + 1) * stage.lr_scale
            optimizer.step(grads, lr)
            running.append(float(loss.detach()))
            steps_run = local_step

            if local_step % stage.eval_interval == 0 or local_step == stage.steps:
                line = evaluate(train_loss=sum(running) / len(running), lr=lr)
                running = []
                last_dev = line["dev_loss"]
                if line["dev_ser"] is not None:
                    last_ser = line["dev_ser"]
                if last_dev < best_loss - 1e-12:
                    best_loss = last_dev
                    evals_since_best = 0
                    best_state = snapshot()
                else:
                    evals_since_best += 1
                if stage.patience is not None and evals_since_best >= stage.patience:
                    stopped_early = True
                    break
    finally:
        if log_file is not None:
            log_file.close()

    if best_state is not None:
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(best_state[name])
    return StageResult(
        name=stage.name,
        steps_run=steps_run,
        best_dev_loss=best_loss,
        final_dev_loss=last_dev,
        final_dev_ser=last_ser,
        stopped_early=stopped_early,
        log_lines=result_lines,
    )


def run_curriculum(
    model: ClusteringTransformer,
    optimizer: Adam,
    schedule: LrSchedule,
    train_corpus: list[MeetingRecord],
    dev_corpus: list[MeetingRecord],
    stages: list[StageConfig],
    seed: int = 0,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    eval_ser: bool = True,
) -> list[StageResult]:
    """Run stages in order on the same model (warm starts are implicit).

    A checkpoint is written after each stage when ``checkpoint_dir`` is
    given, tagged with the stage name and global step.
    """
    pool = None
    if any(stage.mode in ("global", "meeting") for stage in stages):
        pool = EmbeddingPool.from_corpus(train_corpus)
    results = []
    for index, stage in enumerate(stages):
        result = run_stage(
            model,
            optimizer,
            schedule,
            train_corpus,
            dev_corpus,
            stage,
            stage_index=index,
            seed=seed,
            pool=pool,
            log_path=log_path,
            eval_ser=eval_ser,
        )
        results.append(result)
        if checkpoint_dir is not None:
            progress = {
                "stage": stage.name,
                "stage_index": index,
                "global_step": optimizer.step_count,
                "dev_loss": result.final_dev_loss,
            }
            path = Path(checkpoint_dir) / f"stage-{index:02d}-{stage.name}.json"
            save_checkpoint(path, checkpoint_payload(model, optimizer, progress))
    return results


def default_curriculum(
    steps_per_stage: tuple[int, int, int, int] = (600, 400, 300, 200),
    mode: str = "meeting",
    rotate: bool = True,
    fine_tune_steps: int = 0,
    **common,
) -> list[StageConfig]:
    """Length curriculum 50 / 200 / 500 / full, plus optional fine-tune.

    Stage lengths are capped per meeting, so on short corpora the later
    stages simply train at full length.  The first stage uses slices of
    exactly its target length; later stages vary between 50% and 100%.
    The fine-tune stage keeps only sub-sequence sampling and runs at a
    quarter of the schedule's rate.
    """
    stages = []
    for target, steps in zip((50, 200, 500), steps_per_stage[:3]):
        stages.append(
            StageConfig(
                name=f"len{target}",
                max_len=target,
                steps=steps,
                min_len_fraction=1.0 if target == 50 else 0.5,
                mode=mode,
                rotate=rotate,
                **common,
            )
        )
    stages.append(
        StageConfig(
            name="full",
            max_len=None,
            steps=steps_per_stage[3],
            min_len_fraction=0.5,
            mode=mode,
            rotate=rotate,
            **common,
        )
    )
    if fine_tune_steps > 0:
        stages.append(
            StageConfig(
                name="finetune",
                max_len=None,
                steps=fine_tune_steps,
                min_len_fraction=0.5,
                mode="none",
                rotate=False,
                lr_scale=0.25,
                **common,
            )
        )
    return stages
