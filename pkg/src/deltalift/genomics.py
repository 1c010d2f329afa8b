"""Synthetic DNA motif benchmark for attribution quality.

Positive sequences carry both the GATA and CAGATG patterns; negatives
carry one or two instances of exactly one pattern.  Everything outside
the planted motifs is uniform random background, so spurious matches do
arise and cap achievable accuracy.  A small CNN is trained to separate
the classes; attribution quality is then scored as the fraction of
positive attribution mass falling inside the known motif spans.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ContributionReport, compute_reference, deeplift, zeros_reference
from .baselines import gradient_times_input
from .graph import ConstraintGroup, Graph, GraphBuilder, Tensor, forward
from .normalize import normalize_constrained_weights

BASES = "ACGT"
BASE_INDEX = {base: i for i, base in enumerate(BASES)}
MOTIFS = {"GATA": "GATA", "CAGATG": "CAGATG"}


@dataclass(frozen=True)
class MotifSpan:
    start: int
    end: int  # exclusive
    name: str


@dataclass
class SequenceExample:
    """One labeled sequence with ground-truth motif placements."""

    sid: str
    sequence: str
    label: int
    motif_spans: tuple[MotifSpan, ...] = ()


@dataclass
class DatasetSpec:
    """Generation parameters; counts must be even for exact class balance.

    A nonzero ``substitution_rate`` degrades planted motifs per base.
    The default plants consensus strings: spurious background matches
    already cap the achievable auROC near 0.92, and measurable extra
    noise pushes the task below what any classifier can recover.
    """

    n_train: int = 4000
    n_val: int = 500
    n_test: int = 500
    length: int = 200
    seed: int = 0
    substitution_rate: float = 0.0


@dataclass
class Dataset:
    train: list[SequenceExample] = field(default_factory=list)
    val: list[SequenceExample] = field(default_factory=list)
    test: list[SequenceExample] = field(default_factory=list)


def _place_spans(rng: np.random.Generator, length: int, motif_names) -> list[MotifSpan]:
    """Uniform non-overlapping placements, rejection sampled."""
    for _ in range(10000):
        spans: list[MotifSpan] = []
        taken: list[tuple[int, int]] = []
        ok = True
        for name in motif_names:
            width = len(MOTIFS[name])
            if length < width:
                raise ValueError(f"sequence length {length} cannot hold {name}")
            start = int(rng.integers(0, length - width + 1))
            if any(start < e and start + width > s for s, e in taken):
                ok = False
                break
            taken.append((start, start + width))
            spans.append(MotifSpan(start, start + width, name))
        if ok:
            return sorted(spans, key=lambda s: s.start)
    raise ValueError("could not place motifs without overlap")


def _make_example(rng: np.random.Generator, sid: str, length: int, label: int,
                  substitution_rate: float) -> SequenceExample:
    # positives carry two spans of each pattern so that the classifier's
    # receptive field (valid conv + pool drops the sequence tail) almost
    # always sees both; negatives follow the once-or-twice single-pattern
    # construction
    seq = rng.integers(0, 4, size=length)
    if label == 1:
        names = ["GATA", "GATA", "CAGATG", "CAGATG"]
    else:
        kind = rng.choice(["GATA", "CAGATG"])
        names = [str(kind)] * int(rng.integers(1, 3))
    # shuffle placement order so neither motif systematically claims space first
    names = [names[i] for i in rng.permutation(len(names))]
    spans = _place_spans(rng, length, names)
    for span in spans:
        motif = MOTIFS[span.name]
        for offset, base in enumerate(motif):
            code = BASE_INDEX[base]
            if rng.random() < substitution_rate:
                code = (code + 1 + int(rng.integers(0, 3))) % 4  # a different base
            seq[span.start + offset] = code
    sequence = "".join(BASES[c] for c in seq)
    return SequenceExample(sid, sequence, label, tuple(spans))


def _make_split(rng: np.random.Generator, prefix: str, n: int, length: int,
                substitution_rate: float) -> list[SequenceExample]:
    if n % 2 != 0:
        raise ValueError(f"split size {n} is odd; class balance must be exact")
    examples = []
    for i in range(n):
        label = 1 if i % 2 == 0 else 0
        examples.append(
            _make_example(rng, f"{prefix}-{i:05d}", length, label, substitution_rate)
        )
    return examples


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Seed-deterministic train/val/test splits with disjoint generators."""
    splits = {}
    for k, (name, n) in enumerate(
        [("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)]
    ):
        rng = np.random.default_rng([spec.seed, k])
        splits[name] = _make_split(rng, name, n, spec.length, spec.substitution_rate)
    return Dataset(**splits)


# ---------------------------------------------------------------------------
# Encoding


def one_hot_encode(sequence: str) -> Tensor:
    """(length, 4) one-hot matrix, column order A, C, G, T."""
    arr = np.zeros((len(sequence), 4))
    for i, base in enumerate(sequence):
        if base not in BASE_INDEX:
            raise ValueError(f"invalid base {base!r} at position {i}")
        arr[i, BASE_INDEX[base]] = 1.0
    return arr


def decode_one_hot(arr: Tensor) -> str:
    return "".join(BASES[i] for i in np.asarray(arr).argmax(axis=1))


def onehot_constraint_groups(input_id: str, length: int) -> list[ConstraintGroup]:
    """Per-position groups declaring that each one-hot row sums to 1."""
    return [
        ConstraintGroup(input_id, tuple(range(p * 4, (p + 1) * 4)), 1.0)
        for p in range(length)
    ]


# ---------------------------------------------------------------------------
# Model


def build_genomics_cnn(length: int = 200, n_filters: int = 20,
                       filter_width: int = 15, pool_width: int = 50,
                       pool_stride: int = 50, dense_units: int = 200,
                       seed: int = 0) -> Graph:
    """Conv -> PReLU -> maxpool -> two dense PReLU blocks -> sigmoid unit.

    Weights use uniform fan-in scaling from the seed; PReLU slopes start
    at 0.25.  One-hot row constraint groups are attached to the input so
    the constrained-weight normalization pass applies to the conv layer.
    """
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    b = GraphBuilder()
    x = b.input("seq", (length, 4))
    conv = b.conv1d(
        "conv",
        x,
        uniform((n_filters, filter_width, 4), filter_width * 4),
        np.zeros(n_filters),
        stride=1,
    )
    act0 = b.prelu("conv_act", conv, np.full(n_filters, 0.25))
    pool = b.maxpool1d("pool", act0, pool_width, pool_stride)
    flat_dim = int(np.prod(b.shape_of(pool)))
    fc1 = b.affine("fc1", pool, uniform((dense_units, flat_dim), flat_dim),
                   np.zeros(dense_units))
    act1 = b.prelu("fc1_act", fc1, np.full(dense_units, 0.25))
    fc2 = b.affine("fc2", act1, uniform((dense_units, dense_units), dense_units),
                   np.zeros(dense_units))
    act2 = b.prelu("fc2_act", fc2, np.full(dense_units, 0.25))
    logit = b.affine("logit", act2, uniform((1, dense_units), dense_units),
                     np.zeros(1))
    prob = b.sigmoid("prob", logit)
    return b.build(outputs=[prob],
                   constraint_groups=onehot_constraint_groups(x, length))


def encode_dataset(examples) -> list[tuple[Tensor, int]]:
    return [(one_hot_encode(ex.sequence), ex.label) for ex in examples]


# ---------------------------------------------------------------------------
# Metrics


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks within tie groups
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_position_scores(report: ContributionReport, example: SequenceExample,
                        input_id: str = "seq") -> Tensor:
    """Score of each position: the contribution of the base actually present."""
    contrib = report.contributions[input_id]
    idx = np.fromiter((BASE_INDEX[b] for b in example.sequence), dtype=int)
    return contrib[np.arange(len(example.sequence)), idx]


def motif_recovery_score(report: ContributionReport, example: SequenceExample,
                         motif_name: str | None = None,
                         input_id: str = "seq") -> float:
    """Fraction of positive per-position score mass inside motif spans.

    Restricting to ``motif_name`` counts only that motif's spans in the
    numerator (the denominator stays the total positive mass).  Returns
    0 when no positive scores exist anywhere.
    """
    scores = per_position_scores(report, example, input_id)
    positive = np.clip(scores, 0.0, None)
    total = positive.sum()
    if total <= 0.0:
        return 0.0
    inside = 0.0
    for span in example.motif_spans:
        if motif_name is not None and span.name != motif_name:
            continue
        inside += positive[span.start:span.end].sum()
    return float(inside / total)


# ---------------------------------------------------------------------------
# Method comparison


@dataclass
class ComparisonRow:
    sid: str
    prediction: float
    deeplift_recovery: float
    grad_input_recovery: float
    deeplift_gata: float
    grad_input_gata: float
    deeplift_cagatg: float
    grad_input_cagatg: float


@dataclass
class MethodComparison:
    rows: list[ComparisonRow]
    mean_deeplift: float
    mean_grad_input: float
    win_rate: float
    gata_gap: float
    cagatg_gap: float
    n_correct_positives: int


def compare_methods(graph: Graph, test_set, eps_stable: float = 1e-7,
                    threads: int = 1) -> MethodComparison:
    """Motif recovery of reference-based scores versus gradient*input.

    The model is weight-normalized over the one-hot constraint groups
    first (outputs unchanged); both methods then run on that same model,
    the reference-based scores against the all-zeros reference.  Only
    correctly classified positives are scored.
    """
    normalized = normalize_constrained_weights(graph)
    reference = compute_reference(normalized, zeros_reference(normalized))

    selected = []
    for ex in test_set:
        if ex.label != 1:
            continue
        x = one_hot_encode(ex.sequence)
        prob = float(forward(normalized, {"seq": x})["prob"][0])
        if prob > 0.5:
            selected.append((ex, x, prob))

    def score_one(item):
        ex, x, prob = item
        dl = deeplift(normalized, {"seq": x}, reference=reference,
                      eps_stable=eps_stable)
        gi = gradient_times_input(normalized, {"seq": x})
        return ComparisonRow(
            sid=ex.sid,
            prediction=prob,
            deeplift_recovery=motif_recovery_score(dl, ex),
            grad_input_recovery=motif_recovery_score(gi, ex),
            deeplift_gata=motif_recovery_score(dl, ex, "GATA"),
            grad_input_gata=motif_recovery_score(gi, ex, "GATA"),
            deeplift_cagatg=motif_recovery_score(dl, ex, "CAGATG"),
            grad_input_cagatg=motif_recovery_score(gi, ex, "CAGATG"),
        )

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(score_one, selected))
    else:
        rows = [score_one(item) for item in selected]

    if rows:
        dl = np.array([r.deeplift_recovery for r in rows])
        gi = np.array([r.grad_input_recovery for r in rows])
        gata_gap = float(
            np.mean([r.deeplift_gata - r.grad_input_gata for r in rows])
        )
        cagatg_gap = float(
            np.mean([r.deeplift_cagatg - r.grad_input_cagatg for r in rows])
        )
        summary = MethodComparison(
            rows=rows,
            mean_deeplift=float(dl.mean()),
            mean_grad_input=float(gi.mean()),
            win_rate=float(np.mean(dl >= gi)),
            gata_gap=gata_gap,
            cagatg_gap=cagatg_gap,
            n_correct_positives=len(rows),
        )
    else:
        summary = MethodComparison(rows, 0.0, 0.0, 0.0, 0.0, 0.0, 0)
    return summary


# ---------------------------------------------------------------------------
# File formats


def _format_spans(spans) -> str:
    return ",".join(f"{s.start}-{s.end}:{s.name}" for s in spans)


def _parse_spans(text: str):
    spans = []
    for part in text.split(","):
        if not part:
            continue
        rng, name = part.split(":")
        start, end = rng.split("-")
        spans.append(MotifSpan(int(start), int(end), name))
    return tuple(spans)


def write_fasta(path, examples) -> None:
    """FASTA-like text: '>id label=L spans=a-b:NAME,...' then the sequence."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            header = f">{ex.sid} label={ex.label}"
            if ex.motif_spans:
                header += f" spans={_format_spans(ex.motif_spans)}"
            fh.write(header + "\n")
            fh.write(ex.sequence + "\n")


def read_fasta(path) -> list[SequenceExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        sid = None
        label = 0
        spans: tuple[MotifSpan, ...] = ()
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(">"):
                fields = line[1:].split()
                if not fields:
                    raise ValueError(f"{path}:{line_no}: empty header")
                sid = fields[0]
                label = 0
                spans = ()
                for token in fields[1:]:
                    key, _, value = token.partition("=")
                    if key == "label":
                        label = int(value)
                    elif key == "spans":
                        spans = _parse_spans(value)
            else:
                if sid is None:
                    raise ValueError(f"{path}:{line_no}: sequence before header")
                examples.append(SequenceExample(sid, line, label, spans))
                sid = None
    return examples


def write_score_tracks(path, entries) -> None:
    """Plottable per-position scores.

    ``entries`` holds (example, deeplift_scores, grad_input_scores)
    triples with per-position score arrays.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id\tposition\tbase\tdeeplift\tgrad_input\n")
        for ex, dl, gi in entries:
            for pos, base in enumerate(ex.sequence):
                fh.write(
                    f"{ex.sid}\t{pos}\t{base}\t{dl[pos]:.10g}\t{gi[pos]:.10g}\n"
                )


def write_comparison_tsv(path, comparison: MethodComparison) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            "# n_correct_positives=%d mean_deeplift=%.6g mean_grad_input=%.6g "
            "win_rate=%.6g gata_gap=%.6g cagatg_gap=%.6g\n"
            % (
                comparison.n_correct_positives,
                comparison.mean_deeplift,
                comparison.mean_grad_input,
                comparison.win_rate,
                comparison.gata_gap,
                comparison.cagatg_gap,
            )
        )
        fh.write(
            "sample_id\tprediction\tdeeplift_recovery\tgrad_input_recovery\t"
            "deeplift_gata\tgrad_input_gata\tdeeplift_cagatg\tgrad_input_cagatg\n"
        )
        for r in comparison.rows:
            fh.write(
                f"{r.sid}\t{r.prediction:.6g}\t{r.deeplift_recovery:.6g}\t"
                f"{r.grad_input_recovery:.6g}\t{r.deeplift_gata:.6g}\t"
                f"{r.grad_input_gata:.6g}\t{r.deeplift_cagatg:.6g}\t"
                f"{r.grad_input_cagatg:.6g}\n"
            )
