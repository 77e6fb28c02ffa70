"""Analytical compute/communication/memory model for SL, vanilla SFL and the proposed scheme.

Conventions
-----------
* Only transformer-block FLOPs are counted; embeddings, pooling, the head and
  the LoRA side paths are negligible at the shapes of interest.
* Backward costs twice the forward FLOPs.
* Wire messages carry float64 activations/gradients (8 bytes per value);
  resident weights use ``TrainHyper.bytes_per_param``.
* Schemes are compared over the same number of rounds unless per-scheme
  round counts are given.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import ValidationError
from .model import ModelConfig, TARGETS
from .scheduler import TaskProfile, greedy_order, processor_sharing

SCHEMES = ("sl", "sfl", "proposed")
SCHEME_LABELS = {"sl": "SL", "sfl": "vanilla SFL", "proposed": "proposed"}
MSG_HEADER_BYTES = 16
WIRE_BYTES = 8
BERT_MAX_POSITIONS = 512
BERT_TYPE_VOCAB = 2


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    tflops: float
    client_layers: int = 0
    utilization: float = 1.0

    def __post_init__(self):
        if not self.tflops > 0:
            raise ValidationError(f"{self.name}: tflops must be positive")
        if not 0 < self.utilization <= 1:
            raise ValidationError(f"{self.name}: utilization must lie in (0, 1]")
        if self.client_layers < 0:
            raise ValidationError(f"{self.name}: client_layers must be >= 0")


@dataclass(frozen=True)
class LinkProfile:
    rate: float = 1e8  # bits/s
    per_message_overhead: float = 0.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValidationError("link rate must be positive")
        if self.per_message_overhead < 0:
            raise ValidationError("per_message_overhead must be >= 0")


@dataclass(frozen=True)
class TrainHyper:
    batch: int = 16
    seq: int = 128
    lora_rank: int = 16
    lr: float = 1e-5
    target_accuracy: float = 0.89
    bytes_per_param: int = 4
    optimizer_state_multiplier: float = 0.0
    act_factor: float = 12.0
    adapter_load_latency: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("optimizer_state_multiplier", "adapter_load_latency"):
                if v < 0:
                    raise ValidationError(f"TrainHyper.{f.name} must be >= 0")
            elif not v > 0:
                raise ValidationError(f"TrainHyper.{f.name} must be positive")


@dataclass(frozen=True)
class Preset:
    name: str
    server: DeviceProfile
    clients: tuple[DeviceProfile, ...]
    link: LinkProfile = LinkProfile()

    @property
    def cuts(self) -> list[int]:
        return [c.client_layers for c in self.clients]

    @classmethod
    def from_dict(cls, doc: dict) -> "Preset":
        try:
            return cls(
                name=doc.get("name", "custom"),
                server=DeviceProfile(**doc["server"]),
                clients=tuple(DeviceProfile(**c) for c in doc["clients"]),
                link=LinkProfile(**doc.get("link", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed preset: {exc}") from exc

    def to_dict(self) -> dict:
        return {"name": self.name, "server": asdict(self.server),
                "clients": [asdict(c) for c in self.clients], "link": asdict(self.link)}

    def scaled(self, c: float) -> "Preset":
        """Every device and the link ``c`` times faster."""
        dev = lambda d: DeviceProfile(d.name, d.tflops * c, d.client_layers, d.utilization)
        return Preset(self.name, dev(self.server), tuple(dev(d) for d in self.clients),
                      LinkProfile(self.link.rate * c, self.link.per_message_overhead / c))

    def subset(self, k: int) -> "Preset":
        return Preset(self.name, self.server, self.clients[:k], self.link)


def load_preset(name_or_path: str) -> Preset:
    """Built-in preset by name (``paper-sec6``) or a JSON file path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return Preset.from_dict(json.loads(p.read_text()))
    try:
        text = resources.files("splitlora").joinpath(f"presets/{name_or_path}.json").read_text()
    except FileNotFoundError:
        raise ValidationError(f"unknown preset {name_or_path!r}") from None
    return Preset.from_dict(json.loads(text))


def paper_preset() -> Preset:
    return load_preset("paper-sec6")


# --------------------------------------------------------------------------
# FLOPs, time, bytes
# --------------------------------------------------------------------------


def flops_forward_block(H: int, ffn_mult: int, B: int, S: int) -> float:
    """Forward FLOPs of one block: projections and FFN at 2 FLOPs per MAC,
    plus the two S x S attention products."""
    if min(H, ffn_mult, B, S) <= 0:
        raise ValidationError("flops_forward_block: arguments must be positive")
    return B * S * (2 * (4 * H * H + 2 * ffn_mult * H * H)) + 4 * B * S * S * H


def time_compute(flops: float, device: DeviceProfile) -> float:
    if flops < 0:
        raise ValidationError("flops must be >= 0")
    return flops / (device.tflops * 1e12 * device.utilization)


def time_comm(nbytes: float, link: LinkProfile) -> float:
    if nbytes < 0:
        raise ValidationError("bytes must be >= 0")
    return 8 * nbytes / link.rate + link.per_message_overhead


def activation_msg_bytes(B: int, S: int, H: int) -> int:
    return B * S * H * WIRE_BYTES + B * 8 + MSG_HEADER_BYTES


def gradient_msg_bytes(B: int, S: int, H: int) -> int:
    return B * S * H * WIRE_BYTES + MSG_HEADER_BYTES


@dataclass(frozen=True)
class ParamCounts:
    """BERT-style parameter counts (biases, position/type embeddings, pooler)."""

    embeddings: int
    per_block: int
    pooler: int
    lora_per_block: int
    classifier: int

    def base(self, num_blocks: int) -> int:
        return self.embeddings + num_blocks * self.per_block + self.pooler


def param_counts(config: ModelConfig, hyper: TrainHyper) -> ParamCounts:
    H, F = config.hidden, config.ffn_mult * config.hidden
    emb = (config.vocab + BERT_MAX_POSITIONS + BERT_TYPE_VOCAB) * H + 2 * H
    block = 4 * (H * H + H) + (H * F + F) + (F * H + H) + 2 * 2 * H
    return ParamCounts(
        embeddings=emb,
        per_block=block,
        pooler=H * H + H,
        lora_per_block=len(TARGETS) * 2 * hyper.lora_rank * H,
        classifier=H * config.num_classes + config.num_classes,
    )


@dataclass(frozen=True)
class ClientTiming:
    client_id: int
    forward: float
    uplink: float
    server: float
    downlink: float
    backward: float

    @property
    def release(self) -> float:
        return self.forward + self.uplink

    @property
    def tail(self) -> float:
        return self.downlink + self.backward

    def task(self) -> TaskProfile:
        return TaskProfile(self.client_id, self.release, self.server, self.tail)


def client_timings(preset: Preset, config: ModelConfig, hyper: TrainHyper) -> list[ClientTiming]:
    """Per-client phase durations for one batch of ``hyper.batch x hyper.seq`` tokens."""
    L = config.num_blocks
    fb = flops_forward_block(config.hidden, config.ffn_mult, hyper.batch, hyper.seq)
    up = time_comm(activation_msg_bytes(hyper.batch, hyper.seq, config.hidden), preset.link)
    down = time_comm(gradient_msg_bytes(hyper.batch, hyper.seq, config.hidden), preset.link)
    out = []
    for i, dev in enumerate(preset.clients):
        c = dev.client_layers
        if c > L:
            raise ValidationError(f"{dev.name}: client_layers {c} exceeds {L} blocks")
        out.append(ClientTiming(
            client_id=i,
            forward=time_compute(c * fb, dev),
            uplink=up,
            server=time_compute(3 * (L - c) * fb, preset.server) + hyper.adapter_load_latency,
            downlink=down,
            backward=time_compute(2 * c * fb, dev),
        ))
    return out


# --------------------------------------------------------------------------
# Round time per scheme
# --------------------------------------------------------------------------

TIME_COMPONENTS = ("client_forward", "uplink", "server_queue", "server_compute",
                   "downlink", "client_backward", "handoff")


@dataclass
class RoundTime:
    scheme: str
    seconds: float
    components: dict[str, float]
    tasks: list[TaskProfile] = field(default_factory=list)
    makespan: float = 0.0  # as simulated, before summing components


def _critical_path(t: ClientTiming, queue: float) -> dict[str, float]:
    return {"client_forward": t.forward, "uplink": t.uplink, "server_queue": queue,
            "server_compute": t.server, "downlink": t.downlink,
            "client_backward": t.backward, "handoff": 0.0}


def scheme_round_time(scheme: str, preset: Preset, config: ModelConfig, hyper: TrainHyper) -> RoundTime:
    """Wall time of one round (every client processes one batch).

    ``sl``       clients are served strictly one after another, with the
                 trained client-side adapters handed over between clients.
    ``sfl``      all server-side models run concurrently and share the
                 server (processor sharing).
    ``proposed`` one server model serves clients sequentially in greedy
                 longest-tail-first order.

    ``seconds`` is the sum of the critical-path components.
    """
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not preset.clients:
        raise ValidationError("preset has no clients")
    timings = client_timings(preset, config, hyper)
    tasks = [t.task() for t in timings]

    if scheme == "sl":
        comp = dict.fromkeys(TIME_COMPONENTS, 0.0)
        for t in timings:
            comp["client_forward"] += t.forward
            comp["uplink"] += t.uplink
            comp["server_compute"] += t.server
            comp["downlink"] += t.downlink
            comp["client_backward"] += t.backward
        pc = param_counts(config, hyper)
        for a, b in zip(preset.clients, preset.clients[1:]):
            comp["handoff"] += time_comm(a.client_layers * pc.lora_per_block * hyper.bytes_per_param,
                                         preset.link)
            comp["handoff"] += time_comm(b.client_layers * pc.lora_per_block * hyper.bytes_per_param,
                                         preset.link)
        span = math.fsum(comp.values())
    elif scheme == "sfl":
        done, span = processor_sharing(tasks)
        crit = max(timings, key=lambda t: (done[t.client_id] + t.tail, -t.client_id))
        queue = done[crit.client_id] - crit.release - crit.server
        comp = _critical_path(crit, max(queue, 0.0))
    else:
        sched = greedy_order(tasks)
        span = sched.makespan
        job = next(j for j in sched.jobs if j.tail_end == max(x.tail_end for x in sched.jobs))
        crit = timings[job.client_id]
        comp = _critical_path(crit, job.start - crit.release)
    return RoundTime(scheme, math.fsum(comp.values()), comp, tasks, span)


# --------------------------------------------------------------------------
# Memory
# --------------------------------------------------------------------------

MEMORY_COMPONENTS = ("base_weights", "adapters", "adapter_grads", "optimizer_state",
                     "activations", "message_buffers")


@dataclass
class MemoryReport:
    role: str
    components: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.components.values())


def memory_footprint(scheme: str, role: str | int, config: ModelConfig, hyper: TrainHyper,
                     cuts: Sequence[int]) -> MemoryReport:
    """Peak resident bytes for the server (``role="server"``) or client ``role=i``.

    The server-side base is the blocks from the shallowest cut onward plus
    the pooler; the proposed scheme and SL keep one copy of it, vanilla SFL
    keeps one per client.  Activation memory is ``act_factor`` stored values
    per token per resident block.
    """
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    cuts = list(cuts)
    L = config.num_blocks
    if not cuts or any(not 0 <= c <= L for c in cuts):
        raise ValidationError(f"cuts {cuts} must be non-empty and lie in [0, {L}]")
    K = len(cuts)
    pc = param_counts(config, hyper)
    bpp = hyper.bytes_per_param
    act_block = int(hyper.act_factor * hyper.batch * hyper.seq * config.hidden * bpp)
    msg = activation_msg_bytes(hyper.batch, hyper.seq, config.hidden)

    def trainable(n_params):
        return {"adapters": n_params * bpp, "adapter_grads": n_params * bpp,
                "optimizer_state": int(n_params * bpp * hyper.optimizer_state_multiplier)}

    if role == "server":
        server_lora = [(L - c) * pc.lora_per_block + pc.classifier for c in cuts]
        deepest = (L - min(cuts)) * pc.per_block + pc.pooler
        if scheme == "proposed":
            base = deepest
            n_train = sum(server_lora)
            acts = max(L - c for c in cuts) * act_block
            buffers = K * msg
        elif scheme == "sfl":
            base = sum((L - c) * pc.per_block + pc.pooler for c in cuts)
            n_train = sum(server_lora)
            acts = sum(L - c for c in cuts) * act_block
            buffers = 0
        else:
            base = deepest
            n_train = max(server_lora)
            acts = max(L - c for c in cuts) * act_block
            buffers = 0
        comp = {"base_weights": base * bpp, **trainable(n_train), "activations": acts,
                "message_buffers": buffers}
        return MemoryReport("server", comp)

    i = int(role)
    if not 0 <= i < K:
        raise ValidationError(f"client index {i} out of range for {K} clients")
    c = cuts[i]
    comp = {"base_weights": (pc.embeddings + c * pc.per_block) * bpp,
            **trainable(c * pc.lora_per_block), "activations": c * act_block,
            "message_buffers": msg}
    return MemoryReport(f"client{i}", comp)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class CostReport:
    scheme: str
    round_time: float
    rounds: int
    total_time: float
    server_memory: int
    client_memory: list[int]
    breakdown: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Comparison:
    preset: str
    reports: dict[str, CostReport]
    ratios: dict[str, float]
    assumptions: list[str]

    def to_dict(self) -> dict:
        return {"preset": self.preset,
                "reports": {k: v.to_dict() for k, v in self.reports.items()},
                "ratios": dict(self.ratios), "assumptions": list(self.assumptions)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Comparison":
        return cls(doc["preset"], {k: CostReport(**v) for k, v in doc["reports"].items()},
                   doc["ratios"], doc["assumptions"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "metric", "component", "value", "unit"])
        for s, r in self.reports.items():
            for metric, unit in (("round_time", "s"), ("total_time", "s"), ("server_memory", "B")):
                for comp, v in r.breakdown[metric].items():
                    w.writerow([s, metric, comp, repr(v), unit])
                w.writerow([s, metric, "total", repr(getattr(r, metric)), unit])
            for i, cm in enumerate(r.breakdown["client_memory"]):
                for comp, v in cm.items():
                    w.writerow([s, f"client_memory[{i}]", comp, repr(v), "B"])
                w.writerow([s, f"client_memory[{i}]", "total", repr(r.client_memory[i]), "B"])
        for k, v in self.ratios.items():
            w.writerow(["ratio", k, "", repr(v), "1"])
        return buf.getvalue()

    def to_table(self) -> str:
        head = ["scheme", "round time (s)", "rounds", "total time (s)", "server mem (GB)",
                "max client mem (GB)"]
        rows = [[SCHEME_LABELS[s], f"{r.round_time:.4f}", str(r.rounds), f"{r.total_time:.2f}",
                 f"{r.server_memory / 1e9:.3f}", f"{max(r.client_memory) / 1e9:.3f}"]
                for s, r in self.reports.items()]
        widths = [max(len(x) for x in col) for col in zip(head, *rows)]
        fmt = lambda row: "  ".join(x.rjust(w) if j else x.ljust(w) for j, (x, w) in enumerate(zip(row, widths)))
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
        if self.ratios:
            lines.append("")
            lines += [f"{k}: {v:.4f}" for k, v in self.ratios.items()]
        return "\n".join(lines) + "\n"


def cost_report(scheme: str, preset: Preset, config: ModelConfig, hyper: TrainHyper,
                rounds: int) -> CostReport:
    rt = scheme_round_time(scheme, preset, config, hyper)
    total_comp = {k: v * rounds for k, v in rt.components.items()}
    server = memory_footprint(scheme, "server", config, hyper, preset.cuts)
    clients = [memory_footprint(scheme, i, config, hyper, preset.cuts) for i in range(len(preset.cuts))]
    return CostReport(
        scheme=scheme,
        round_time=rt.seconds,
        rounds=rounds,
        total_time=math.fsum(total_comp.values()),
        server_memory=server.total,
        client_memory=[c.total for c in clients],
        breakdown={"round_time": rt.components, "total_time": total_comp,
                   "server_memory": server.components,
                   "client_memory": [c.components for c in clients]},
    )


def compare_report(preset: Preset, config: ModelConfig, hyper: TrainHyper, rounds: int,
                   schemes: Sequence[str] = SCHEMES,
                   rounds_per_scheme: dict[str, int] | None = None) -> Comparison:
    """Cost reports for each scheme plus proposed/baseline time and memory ratios."""
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")
    rounds_per_scheme = rounds_per_scheme or {}
    reports = {s: cost_report(s, preset, config, hyper, rounds_per_scheme.get(s, rounds))
               for s in schemes}
    ratios = {}
    if "proposed" in reports:
        p = reports["proposed"]
        for base in ("sl", "sfl"):
            if base in reports:
                ratios[f"time_proposed_over_{base}"] = p.total_time / reports[base].total_time
                ratios[f"server_memory_proposed_over_{base}"] = p.server_memory / reports[base].server_memory
    assumptions = [
        "equal rounds across schemes" if not rounds_per_scheme else "per-scheme round counts supplied",
        "backward FLOPs = 2 x forward FLOPs; block FLOPs only",
        f"activation memory = {hyper.act_factor:g} values per token per resident block",
        "vanilla SFL server shares its device across concurrent clients",
    ]
    return Comparison(preset.name, reports, ratios, assumptions)
