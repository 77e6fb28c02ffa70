"""JSON Schemas (draft 2020-12) for every file the CLI writes.

Kept as plain dicts so the library does not depend on a validator; the test
suite checks real outputs against them with ``jsonschema``.
"""

from __future__ import annotations

_NONNEG = {"type": "number", "minimum": 0}
_INT = {"type": "integer", "minimum": 0}
_COMPONENTS = {"type": "object", "additionalProperties": _NONNEG}


def _obj(props: dict, required=None, extra=False) -> dict:
    return {"type": "object", "properties": props,
            "required": list(props) if required is None else required,
            "additionalProperties": extra}


COST_REPORT = _obj({
    "scheme": {"enum": ["sl", "sfl", "proposed"]},
    "round_time": _NONNEG,
    "rounds": {"type": "integer", "minimum": 1},
    "total_time": _NONNEG,
    "server_memory": _INT,
    "client_memory": {"type": "array", "items": _INT, "minItems": 1},
    "breakdown": _obj({
        "round_time": _COMPONENTS,
        "total_time": _COMPONENTS,
        "server_memory": _COMPONENTS,
        "client_memory": {"type": "array", "items": _COMPONENTS},
    }),
})

REPORT = _obj({
    "preset": {"type": "string"},
    "reports": {"type": "object", "additionalProperties": COST_REPORT, "minProperties": 1},
    "ratios": {"type": "object", "additionalProperties": _NONNEG},
    "assumptions": {"type": "array", "items": {"type": "string"}},
})

SCHEDULE = _obj({
    "policy": {"enum": ["greedy", "fifo", "brute_force"]},
    "order": {"type": "array", "items": _INT},
    "jobs": {"type": "array", "items": _obj({"client": _INT, "start": _NONNEG,
                                             "end": _NONNEG, "tail_end": _NONNEG})},
    "makespan": _NONNEG,
})

SCHEDULES = {"type": "array", "items": SCHEDULE, "minItems": 2, "maxItems": 3}

SCHEDULE_RANDOM = _obj({
    "instances": {"type": "integer", "minimum": 1},
    "tasks": {"type": "integer", "minimum": 1, "maximum": 8},
    "seed": {"type": "integer"},
    "zero_release": {"type": "boolean"},
    "greedy_le_fifo": {"type": "number", "minimum": 0, "maximum": 1},
    "greedy_eq_optimal": {"type": "number", "minimum": 0, "maximum": 1},
    "ratio_mean": {"type": "number", "minimum": 1},
    "ratio_p95": {"type": "number", "minimum": 1},
    "ratio_max": {"type": "number", "minimum": 1},
})

TRACE_EVENT = _obj({
    "event": {"enum": ["client_forward", "uplink", "server_process", "downlink", "client_backward",
                       "aggregate"]},
    "actor": {"type": "string"},
    "t_start": _NONNEG,
    "t_end": _NONNEG,
    "bytes": _INT,
    "round": {"type": "integer", "minimum": 1},
})

ADAPTER_MANIFEST = _obj({
    "cut": {"type": ["integer", "null"], "minimum": 0},
    "tensors": {"type": "array", "items": _obj({
        "name": {"type": "string", "pattern": r"^(blocks\.\d+\.[qv]\.[AB]|head\.(weight|bias))$"},
        "block": {"type": ["integer", "null"]},
        "target": {"enum": ["q", "v", "head"]},
        "owner": {"enum": ["client", "server", "global"]},
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}},
    })},
})

SHARD_MANIFEST = {"type": "array", "items": _obj({
    "client_id": _INT, "indices": {"type": "array", "items": _INT}})}

_MODEL = _obj({k: {"type": "integer", "minimum": 1} for k in (
    "num_blocks", "hidden", "num_heads", "ffn_mult", "vocab", "seq_len", "num_classes",
    "lora_rank")} | {"lora_alpha": {"type": "number", "exclusiveMinimum": 0}})

CONFIG = _obj({
    "model": _MODEL,
    "cost_model": _MODEL,
    "hyper": {"type": "object"},
    "preset": {"type": ["string", "object"]},
    "schemes": {"type": "array", "items": {"enum": ["sl", "sfl", "proposed"]}, "minItems": 1},
    "rounds": {"type": "integer", "minimum": 1},
    "agg_every": {"type": "integer", "minimum": 1},
    "alpha": {"type": "number", "exclusiveMinimum": 0},
    "seed": {"type": "integer"},
    "output_dir": {"type": "string"},
    "lr": _NONNEG,
    "batch_size": {"type": "integer", "minimum": 1},
    "n_train": {"type": "integer", "minimum": 1},
    "n_eval": {"type": "integer", "minimum": 1},
    "cuts": {"type": "array", "items": _INT, "minItems": 1},
    "policy": {"enum": ["greedy", "fifo"]},
    "uniform_weights": {"type": "boolean"},
    "eval_every": {"type": "integer", "minimum": 1},
})

METRICS_COLUMNS = ("round", "train_loss", "eval_loss", "eval_accuracy", "aggregated", "makespan")
REPORT_CSV_COLUMNS = ("scheme", "metric", "component", "value", "unit")

BY_FILE = {
    "config.json": CONFIG,
    "report.json": REPORT,
    "schedules.json": SCHEDULES,
    "schedule_random.json": SCHEDULE_RANDOM,
    "global_adapters.slra.manifest.json": ADAPTER_MANIFEST,
}
