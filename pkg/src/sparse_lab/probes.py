"""Output-perturbation diagnostics for pruned networks.

The excess output of a mask is measured operationally as the exact
difference between the full forward pass and the masked forward pass:
the total logit contribution of the weights the mask removes.  (A
per-weight decomposition is ill-defined once weights interact through
nonlinearities, so the full-minus-masked difference is the quantity this
module reports.)  Alongside it we score how small the removed-weight input
products are, and whether any downstream layer can amplify an injected
unit-L1 activation perturbation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ParamSet, _effective_weights, _forward_trace, forward
from .pruning import Mask
from .sketch import _load_round_state, _round_dir, read_config

PROBE_BATCH_SIZE = 256


@dataclass(frozen=True)
class ProbeResult:
    """Excess-output measurements for one (params, mask) pair.

    y_exc_l1: mean over the probe batch of the L1 gap between full and
        masked logits.
    per_layer_amplification: worst-case L1 gain from each hidden layer's
        activation to the output, averaged over the batch (<= 1 means the
        downstream path cannot amplify a perturbation there).
    weight_l1_masked_out: total |w| mass sitting on masked-out positions.
    condition1_score: mean |w * x| over (masked weight, sample) pairs.
    condition2_score: max of per_layer_amplification (0 with no hidden layers).
    """

    y_exc_l1: float
    per_layer_amplification: tuple[float, ...]
    weight_l1_masked_out: float
    condition1_score: float
    condition2_score: float

    def to_dict(self) -> dict:
        return {
            "y_exc_l1": self.y_exc_l1,
            "per_layer_amplification": list(self.per_layer_amplification),
            "weight_l1_masked_out": self.weight_l1_masked_out,
            "condition1_score": self.condition1_score,
            "condition2_score": self.condition2_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeResult":
        return cls(
            y_exc_l1=d["y_exc_l1"],
            per_layer_amplification=tuple(d["per_layer_amplification"]),
            weight_l1_masked_out=d["weight_l1_masked_out"],
            condition1_score=d["condition1_score"],
            condition2_score=d["condition2_score"],
        )


def excess_logits(params: ParamSet, mask: Mask, batch: np.ndarray) -> np.ndarray:
    """Per-sample, per-class excess output: forward(full) - forward(masked)."""
    return forward(params, None, batch) - forward(params, mask, batch)


def amplification_check(params: ParamSet, batch: np.ndarray) -> list[float]:
    """Worst-case L1 amplification from each hidden activation to the output.

    For every hidden layer the exact Jacobian of the output w.r.t. that
    layer's activation is assembled at each sample's ReLU pattern; its
    induced L1 norm (max column abs sum) is the largest possible
    ||output change||_1 / ||activation change||_1 over unit-L1 injected
    perturbations.  Returns the batch mean per hidden layer.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    _, pre, _ = _forward_trace(params, None, batch)
    layers = _effective_weights(params, None)
    num_layers = len(layers)
    ratios: list[float] = []
    for hidden in range(num_layers - 1):
        # Jacobian of the tail starting after ReLU `hidden` (0-based hidden index)
        total = 0.0
        for s in range(batch.shape[0]):
            jac = layers[hidden + 1][0]
            for m in range(hidden + 2, num_layers):
                gate = (pre[m - 1][s] > 0.0).astype(np.float64)
                jac = layers[m][0] @ (gate[:, None] * jac)
            total += float(np.abs(jac).sum(axis=0).max())
        ratios.append(total / batch.shape[0])
    return ratios


def excess_output(params: ParamSet, mask: Mask, batch: np.ndarray) -> ProbeResult:
    """Measure the output perturbation attached to a mask's removed weights."""
    batch = np.asarray(batch, dtype=np.float64)
    diff = excess_logits(params, mask, batch)
    y_exc_l1 = float(np.abs(diff).sum(axis=1).mean())

    weight_l1 = 0.0
    prod_sum = 0.0
    prod_count = 0
    _, _, acts = _forward_trace(params, None, batch)
    for layer_idx, name in enumerate(mask.names()):
        w = params[name]
        removed = mask[name] == 0.0
        n_removed = int(removed.sum())
        if n_removed == 0:
            continue
        weight_l1 += float(np.abs(w[removed]).sum())
        # |w_ij * a_j| for each masked (i, j) and each sample
        a = np.abs(acts[layer_idx])  # [B, fan_in]
        w_abs = np.abs(w) * removed
        prod_sum += float((a @ w_abs.T).sum())
        prod_count += n_removed * batch.shape[0]

    amp = amplification_check(params, batch)
    return ProbeResult(
        y_exc_l1=y_exc_l1,
        per_layer_amplification=tuple(amp),
        weight_l1_masked_out=weight_l1,
        condition1_score=prod_sum / prod_count if prod_count else 0.0,
        condition2_score=max(amp) if amp else 0.0,
    )


def probe_along_run(run_dir: str | Path, probe_batch: np.ndarray) -> list[ProbeResult]:
    """Probe every pruned round of a checkpointed run.

    Entry k pairs round k's trained (pre-rewind) parameters with round k+1's
    mask, so the measured excess is exactly the contribution of the weights
    the next pruning step removes.  A run with R pruned rounds yields R
    results.
    """
    run_dir = Path(run_dir)
    read_config(run_dir)  # validates presence + hash
    results: list[ProbeResult] = []
    k = 0
    while _round_dir(run_dir, k + 1).is_dir():
        if not _round_dir(run_dir, k).is_dir():
            raise FileNotFoundError(f"missing checkpoint for round {k} in {run_dir}")
        params, _ = _load_round_state(run_dir, k)
        _, next_mask = _load_round_state(run_dir, k + 1)
        results.append(excess_output(params, next_mask, probe_batch))
        k += 1
    if k == 0 and not _round_dir(run_dir, 0).is_dir():
        raise FileNotFoundError(f"no round checkpoints in {run_dir}")
    return results


def save_probes(run_dir: str | Path, probes: list[ProbeResult]) -> None:
    path = Path(run_dir) / "probes.json"
    path.write_text(json.dumps([p.to_dict() for p in probes], indent=2) + "\n")


def load_probes(run_dir: str | Path) -> list[ProbeResult] | None:
    path = Path(run_dir) / "probes.json"
    if not path.exists():
        return None
    return [ProbeResult.from_dict(d) for d in json.loads(path.read_text())]
