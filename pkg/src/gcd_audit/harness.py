"""Benchmark harness: load data, render prompts, run constrained generations.

Benchmark kinds and their on-disk layouts (labels always normalized to
[0, 1] with the source range kept on the item):

* ``stsb`` -- tab-separated ``text_a<TAB>text_b<TAB>score`` with scores
  on 0..5
* ``men`` -- same TSV layout with scores on 0..50
* ``qqp`` -- CSV with a header containing ``question1``, ``question2``,
  ``is_duplicate`` (0/1)
* ``toxicchat`` -- JSON lines with ``user_input``, ``model_output``,
  ``toxicity`` (0/1)
* ``multiple-choice`` -- JSON lines with ``question``, ``choices``
  (list of strings), ``gold`` (index)

Runs write one JSON record per line. A run is resumable: completed
(item, format, repeat) cells found in the output file are skipped, and
records are always written in canonical cell order so reruns of a mock
configuration are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence, Union

import requests

from .formats import (ChoiceFormat, FormatSpec, Treatments, build_choice_format,
                      build_format, UnmappedSurfaceError, FAMILIES, VARIANTS,
                      CHOICE_STYLES)

SCHEMA_VERSION = 1
ENDPOINT_ENV = "GCD_AUDIT_ENDPOINT"
TOKEN_ENV = "GCD_AUDIT_TOKEN"

BENCHMARK_KINDS = ("stsb", "men", "qqp", "toxicchat", "multiple-choice")

_STATEMENTS = {
    "stsb": "These strings are similar.",
    "men": "These strings are similar.",
    "qqp": "These strings are duplicates.",
    "toxicchat": "These strings contain toxic language.",
}

_PROMPT_TEMPLATE = ("<string 1>{a}</string 1>\n\n"
                    "<string 2>{b}</string 2>\n\n"
                    "Rate your agreement with the following statement: {statement}\n\n"
                    "{instruction}")

_LIKERT_LEGEND = ("Respond only with a number between 1 and 5, where\n"
                  "1 = Strongly disagree,\n"
                  "2 = Disagree,\n"
                  "3 = Neither agree nor disagree,\n"
                  "4 = Agree,\n"
                  "5 = Strongly agree")


class BenchmarkError(ValueError):
    pass


class BackendError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class RunIntegrityError(RuntimeError):
    pass


def default_jobs() -> int:
    """Worker-pool width: logical CPU count, capped for backend politeness."""
    return min(os.cpu_count() or 1, 16)


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    kind: str
    text_a: str
    text_b: str
    human_label: float  # normalized to [0, 1]
    source_range: tuple[float, float]
    choices: tuple[str, ...] = ()
    gold: Optional[int] = None


# ---------------------------------------------------------------------------
# Loading and sampling


def _check_item(item: BenchmarkItem, where: str) -> BenchmarkItem:
    if not item.text_a or not item.text_b:
        raise BenchmarkError(f"{where}: empty text field")
    if not 0.0 <= item.human_label <= 1.0:
        raise BenchmarkError(f"{where}: label {item.human_label} outside [0, 1]")
    return item


def load_benchmark(path, kind: str, skip_bad: bool = False) -> list[BenchmarkItem]:
    """Parse one benchmark file into normalized items.

    Malformed rows abort with the offending line number unless
    ``skip_bad`` is set, in which case they are dropped.
    """
    if kind not in BENCHMARK_KINDS:
        raise BenchmarkError(f"unknown benchmark kind {kind!r}")
    items: list[BenchmarkItem] = []
    bad: list[str] = []

    def attempt(lineno: int, parse: Callable[[], BenchmarkItem]) -> None:
        where = f"{path}:{lineno}"
        try:
            items.append(_check_item(parse(), where))
        except (BenchmarkError, ValueError, KeyError, IndexError, TypeError) as exc:
            if skip_bad:
                bad.append(where)
            else:
                raise BenchmarkError(f"{where}: malformed row ({exc})") from exc

    with open(path, "r", encoding="utf-8") as fh:
        if kind in ("stsb", "men"):
            top = 5.0 if kind == "stsb" else 50.0
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue

                def parse(line=line, lineno=lineno) -> BenchmarkItem:
                    a, b, score = line.rstrip("\n").split("\t")
                    value = float(score)
                    if not 0.0 <= value <= top:
                        raise ValueError(f"score {value} outside [0, {top}]")
                    return BenchmarkItem(id=f"{kind}-{lineno}", kind=kind,
                                         text_a=a, text_b=b,
                                         human_label=value / top,
                                         source_range=(0.0, top))
                attempt(lineno, parse)
        elif kind == "qqp":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {
                    "question1", "question2", "is_duplicate"} <= set(reader.fieldnames):
                raise BenchmarkError(
                    f"{path}: qqp CSV needs question1, question2, is_duplicate columns")
            for lineno, row in enumerate(reader, 2):  # header is line 1

                def parse(row=row, lineno=lineno) -> BenchmarkItem:
                    flag = int(row["is_duplicate"])
                    if flag not in (0, 1):
                        raise ValueError(f"is_duplicate must be 0/1, got {flag}")
                    return BenchmarkItem(id=f"qqp-{lineno}", kind=kind,
                                         text_a=row["question1"],
                                         text_b=row["question2"],
                                         human_label=float(flag),
                                         source_range=(0.0, 1.0))
                attempt(lineno, parse)
        elif kind == "toxicchat":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue

                def parse(line=line, lineno=lineno) -> BenchmarkItem:
                    row = json.loads(line)
                    flag = int(row["toxicity"])
                    if flag not in (0, 1):
                        raise ValueError(f"toxicity must be 0/1, got {flag}")
                    return BenchmarkItem(id=f"toxicchat-{lineno}", kind=kind,
                                         text_a=row["user_input"],
                                         text_b=row["model_output"],
                                         human_label=float(flag),
                                         source_range=(0.0, 1.0))
                attempt(lineno, parse)
        else:  # multiple-choice
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue

                def parse(line=line, lineno=lineno) -> BenchmarkItem:
                    row = json.loads(line)
                    choices = tuple(str(c) for c in row["choices"])
                    gold = int(row["gold"])
                    if len(choices) < 2:
                        raise ValueError("need at least two choices")
                    if not 0 <= gold < len(choices):
                        raise ValueError(f"gold index {gold} out of range")
                    rendered = "\n".join(choices)
                    return BenchmarkItem(id=f"mc-{lineno}", kind=kind,
                                         text_a=str(row["question"]),
                                         text_b=rendered,
                                         human_label=gold / (len(choices) - 1),
                                         source_range=(0.0, float(len(choices) - 1)),
                                         choices=choices, gold=gold)
                attempt(lineno, parse)
    if bad:
        items_skipped = len(bad)
        print(f"warning: skipped {items_skipped} malformed rows in {path}",
              flush=True)
    if not items:
        raise BenchmarkError(f"{path}: no items loaded")
    return items


def sample_items(items: Sequence[BenchmarkItem], n: int, seed: int) -> list[BenchmarkItem]:
    """Uniform sample without replacement, reproducible, in dataset order."""
    if n > len(items):
        raise BenchmarkError(f"sample size {n} exceeds dataset size {len(items)}")
    import random
    rng = random.Random(seed)
    idx = list(range(len(items)))
    for i in range(len(idx) - 1, 0, -1):  # Fisher-Yates, pinned for stability
        j = rng.randrange(i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    chosen = sorted(idx[:n])
    return [items[i] for i in chosen]


# ---------------------------------------------------------------------------
# Prompt rendering


def _format_instruction(kind: str, spec: FormatSpec) -> str:
    family, variant = spec.family, spec.variant
    if family == "likert":
        if variant == "word":
            options = ", ".join(f"'{s}'" for s in spec.surfaces())
            return f"Respond only with one of: {options}."
        if kind == "toxicchat":
            return "Respond only with a number between 1 and 5."
        return _LIKERT_LEGEND
    if family == "binary":
        a, b = spec.surfaces()[-1], spec.surfaces()[0]
        return f"Respond only with '{a}' or '{b}'."
    if family == "real":
        if variant == "word":
            return "Respond only with a number between 0 and 1, written in words."
        return "Respond only with a number between 0 and 1."
    if family == "percent":
        if variant == "word":
            return "Respond only with a percentage between 0 and 100, written in words."
        return "Respond only with a percentage between 0% and 100%."
    # integer
    lo, hi = spec.value_range
    lo_s, hi_s = spec.surfaces()[0], spec.surfaces()[-1]
    if variant == "word":
        return (f"Respond only with a number between {int(lo)} and {int(hi)}, "
                f"written in words ('{lo_s}' to '{hi_s}').")
    return f"Respond only with a number between {int(lo)} and {int(hi)}."


_CHOICE_INSTRUCTIONS = {
    "stock": "Respond only with the letter of your answer.",
    "as_integer": "Respond only with the number of your answer.",
    "as_real": "Respond only with the decimal value of your answer.",
    "as_word": "Respond only with the label of your answer (for example 'Choice 1').",
}


def render_prompt(item: BenchmarkItem,
                  spec: Union[FormatSpec, ChoiceFormat]) -> str:
    """Instantiate the task template for one item under one format."""
    if isinstance(spec, ChoiceFormat):
        if item.kind != "multiple-choice":
            raise BenchmarkError(
                f"choice format incompatible with benchmark kind {item.kind!r}")
        if len(item.choices) != spec.n:
            raise BenchmarkError(
                f"item {item.id} has {len(item.choices)} choices, format expects {spec.n}")
        lines = [f"{label}. {choice}"
                 for label, choice in zip(spec.surfaces, item.choices)]
        return (f"{item.text_a}\n\n" + "\n".join(lines)
                + f"\n\n{_CHOICE_INSTRUCTIONS[spec.style]}")
    if item.kind == "multiple-choice":
        raise BenchmarkError("multiple-choice items require a choice format")
    return _PROMPT_TEMPLATE.format(a=item.text_a, b=item.text_b,
                                   statement=_STATEMENTS[item.kind],
                                   instruction=_format_instruction(item.kind, spec))


# ---------------------------------------------------------------------------
# Backends


@dataclass
class DecodingParams:
    temperature: float = 0.8
    top_p: float = 0.95
    n_predict: int = 32
    context_length: int = 512


class HttpBackend:
    """Client for a grammar-constrained completion endpoint.

    Sends ``{prompt, grammar, temperature, top_p, n_predict}`` as JSON and
    returns the response's ``content`` field verbatim. Connection errors
    and 5xx responses are retried three times with exponential backoff.
    """

    retries = 3
    backoff = 0.5

    def __init__(self, endpoint: str, params: DecodingParams,
                 auth_token: Optional[str] = None, session=None):
        self.endpoint = endpoint
        self.params = params
        self.auth_token = auth_token if auth_token is not None else os.environ.get(TOKEN_ENV)
        self.session = session or requests.Session()

    @property
    def deterministic(self) -> bool:
        return False

    def complete(self, item: BenchmarkItem, spec, prompt: str) -> str:
        payload = {
            "prompt": prompt,
            "grammar": spec.gbnf_text,
            "temperature": self.params.temperature,
            "top_p": self.params.top_p,
            "n_predict": self.params.n_predict,
        }
        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        last_err: Optional[str] = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = self.session.post(self.endpoint, json=payload,
                                         headers=headers, timeout=120)
            except requests.RequestException as exc:
                last_err = f"transport error: {exc}"
                continue
            if 500 <= resp.status_code < 600:
                last_err = f"server error HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise BackendError(
                    f"{self.endpoint} returned HTTP {resp.status_code} "
                    f"for item {item.id}")
            body = resp.json()
            if "content" not in body:
                raise BackendError(
                    f"{self.endpoint} response lacks 'content' field for item {item.id}")
            return str(body["content"])
        raise BackendError(
            f"{self.endpoint} failed after {self.retries} attempts "
            f"for item {item.id}: {last_err}")


class MockBackend:
    """Deterministic offline stand-in for an inference server.

    Output is a pure function of (item id, format id, seed). The latent
    score blends the item's label with seeded uniform noise,
    ``z = rho * label + (1 - rho) * u``, then snaps to the nearest mapped
    surface, so ``target_rho=1`` reproduces the label ranking exactly and
    ``target_rho=0`` is label-independent. For choice formats the gold
    label is emitted with probability ``target_rho``.
    """

    def __init__(self, target_rho: float = 1.0, seed: int = 0):
        if not 0.0 <= target_rho <= 1.0:
            raise ConfigError(f"target_rho {target_rho} outside [0, 1]")
        self.target_rho = target_rho
        self.seed = seed

    @property
    def deterministic(self) -> bool:
        return True

    def _unit_noise(self, item_id: str, spec_id: str, salt: str = "") -> float:
        digest = hashlib.sha256(
            f"{item_id}|{spec_id}|{self.seed}|{salt}".encode()).digest()
        return int.from_bytes(digest[:8], "big") / 2 ** 64

    def complete(self, item: BenchmarkItem, spec, prompt: str) -> str:
        del prompt
        if isinstance(spec, ChoiceFormat):
            u = self._unit_noise(item.id, spec.spec_id)
            if u < self.target_rho or spec.n == 1:
                index = item.gold
            else:
                wrong = self._unit_noise(item.id, spec.spec_id, salt="alt")
                index = int(wrong * (spec.n - 1))
                if index >= item.gold:
                    index += 1
            return spec.treatments.prefix + spec.surfaces[index]
        u = self._unit_noise(item.id, spec.spec_id)
        z = self.target_rho * item.human_label + (1.0 - self.target_rho) * u
        return spec.treatments.prefix + spec.nearest_surface(z)


def mock_complete(item: BenchmarkItem, spec, target_rho: float = 1.0,
                  seed: int = 0) -> str:
    return MockBackend(target_rho=target_rho, seed=seed).complete(item, spec, "")


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class RunConfig:
    run_id: str
    benchmarks: list[tuple[str, str]]  # (kind, path)
    sample_size: int
    seed: int = 0
    families: tuple[str, ...] = FAMILIES
    variants: tuple[str, ...] = VARIANTS
    treatment_combos: tuple[Treatments, ...] = Treatments.all_combinations()
    choice_styles: tuple[str, ...] = CHOICE_STYLES
    integer_range: tuple[int, int] = (1, 10)
    backend: str = "mock"
    target_rho: float = 1.0
    params: DecodingParams = field(default_factory=DecodingParams)
    jobs: int = field(default_factory=lambda: default_jobs())
    repeats: int = 1
    output: str = "run.jsonl"
    model: str = "mock"
    model_family: str = "mock"
    size_tag: str = "small"
    prompt_prefix: str = ""
    prompt_suffix: str = ""
    skip_bad: bool = False

    def format_grid(self) -> list[FormatSpec]:
        return [build_format(f, v, t, integer_range=self.integer_range)
                for f in self.families for v in self.variants
                for t in self.treatment_combos]

    def choice_grid(self, n: int) -> list[ChoiceFormat]:
        grid = [build_choice_format("stock", Treatments(), n)]
        if "stock" in self.choice_styles:
            grid.append(build_choice_format("stock", Treatments(with_newline=True), n))
            grid.append(build_choice_format("stock", Treatments(with_space=True), n))
        for style in self.choice_styles:
            if style != "stock":
                grid.append(build_choice_format(style, Treatments(), n))
        return grid


def _parse_treatments(token: str) -> Treatments:
    token = token.strip()
    if token in ("none", ""):
        return Treatments()
    parts = set(token.split("+"))
    unknown = parts - {"space", "newline"}
    if unknown:
        raise ConfigError(f"unknown treatment(s) {sorted(unknown)} in {token!r}")
    return Treatments(with_space="space" in parts, with_newline="newline" in parts)


def _split_list(value: str) -> list[str]:
    return [t.strip() for t in value.split(",") if t.strip()]


def load_run_config(path) -> RunConfig:
    """Parse the documented ``key = value`` run-configuration file."""
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            raw[key.strip()] = value.strip()

    def req(key: str) -> str:
        if key not in raw:
            raise ConfigError(f"{path}: missing required key {key!r}")
        return raw[key]

    benchmarks = []
    for entry in _split_list(req("benchmarks")):
        kind, _, bench_path = entry.partition(":")
        if not bench_path:
            raise ConfigError(f"{path}: benchmark entry {entry!r} needs kind:path")
        if kind not in BENCHMARK_KINDS:
            raise ConfigError(f"{path}: unknown benchmark kind {kind!r}")
        benchmarks.append((kind, bench_path))
    if not benchmarks:
        raise ConfigError(f"{path}: no benchmarks configured")

    base_dir = os.path.dirname(os.path.abspath(path))
    benchmarks = [(k, p if os.path.isabs(p) else os.path.join(base_dir, p))
                  for k, p in benchmarks]

    def opt(key: str, default: str) -> str:
        return raw.get(key, default)

    families = tuple(_split_list(opt("families", ",".join(FAMILIES))))
    for f in families:
        if f not in FAMILIES:
            raise ConfigError(f"{path}: unknown family {f!r}")
    variants = tuple(_split_list(opt("variants", ",".join(VARIANTS))))
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"{path}: unknown variant {v!r}")
    combos = tuple(_parse_treatments(t)
                   for t in _split_list(opt("treatments", "none,space,newline,space+newline")))
    styles = tuple(_split_list(opt("choice_styles", ",".join(CHOICE_STYLES))))
    for s in styles:
        if s not in CHOICE_STYLES:
            raise ConfigError(f"{path}: unknown choice style {s!r}")

    lo_hi = _split_list(opt("integer_range", "1,10"))
    if len(lo_hi) != 2:
        raise ConfigError(f"{path}: integer_range needs two values")

    jobs_raw = opt("jobs", "auto")
    try:
        jobs = default_jobs() if jobs_raw == "auto" else int(jobs_raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: bad jobs value {jobs_raw!r}") from exc

    try:
        config = RunConfig(
            run_id=req("run_id"),
            benchmarks=benchmarks,
            sample_size=int(req("sample_size")),
            seed=int(opt("seed", "0")),
            families=families,
            variants=variants,
            treatment_combos=combos,
            choice_styles=styles,
            integer_range=(int(lo_hi[0]), int(lo_hi[1])),
            backend=opt("backend", "mock"),
            target_rho=float(opt("target_rho", "1.0")),
            params=DecodingParams(
                temperature=float(opt("temperature", "0.8")),
                top_p=float(opt("top_p", "0.95")),
                n_predict=int(opt("n_predict", "32")),
                context_length=int(opt("context_length", "512"))),
            jobs=jobs,
            repeats=int(opt("repeats", "1")),
            output=opt("output", "run.jsonl"),
            model=opt("model", "mock"),
            model_family=opt("model_family", "mock"),
            size_tag=opt("size_tag", "small"),
            prompt_prefix=opt("prompt_prefix", ""),
            prompt_suffix=opt("prompt_suffix", ""),
            skip_bad=opt("skip_bad", "false").lower() == "true",
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not os.path.isabs(config.output):
        config.output = os.path.join(base_dir, config.output)
    return config


def validate_config(config: RunConfig) -> None:
    if config.sample_size < 1:
        raise ConfigError("sample_size must be positive")
    if config.jobs < 1:
        raise ConfigError("jobs must be positive")
    if config.repeats < 1:
        raise ConfigError("repeats must be positive")
    for spec in config.format_grid():
        budget = spec.max_tokens + (1 if spec.treatments.with_newline else 0)
        if config.params.n_predict < budget:
            raise ConfigError(
                f"n_predict {config.params.n_predict} below worst-case budget "
                f"{budget} of {spec.spec_id}")


# ---------------------------------------------------------------------------
# Records and execution


@dataclass
class RunRecord:
    schema_version: int
    run_id: str
    model: str
    model_family: str
    size_tag: str
    benchmark: str
    item_id: str
    format_id: str
    format_family: str
    variant: str
    with_space: bool
    with_newline: bool
    repeat: int
    prompt_sha256: str
    raw_output: str
    grammar_valid: bool
    parsed_value: Optional[float]
    parsed_norm: Optional[float]
    parse_failure: Optional[str]
    human_label: float
    gold_index: Optional[int]
    n_choices: Optional[int]
    latency_ms: float
    timestamp: float

    def cell_key(self) -> str:
        return f"{self.item_id}|{self.format_id}|{self.repeat}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


def read_records(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise RunIntegrityError(f"{path}:{lineno}: bad record ({exc})") from exc
    return records


def _scan_resumable(path, run_id: str) -> tuple[set[str], int]:
    """Completed cell keys plus the byte offset of the last intact record.

    A trailing line without a newline is a record cut short by a kill
    mid-write; it is dropped (the caller truncates to the returned
    offset) so the cell reruns. Corruption anywhere else is an error.
    """
    done: set[str] = set()
    offset = 0
    with open(path, "rb") as fh:
        data = fh.read()
    for line in data.splitlines(keepends=True):
        if not line.endswith(b"\n"):
            break
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RunIntegrityError(
                f"{path}: corrupt record at byte {offset} ({exc})") from exc
        offset += len(line)
        if record.get("run_id") == run_id:
            done.add(f"{record['item_id']}|{record['format_id']}|{record['repeat']}")
    return done, offset


def _classify(spec, item: BenchmarkItem, raw: str):
    """Validate raw output against the grammar and parse its value."""
    valid = spec.compiled.validate(raw)
    if not valid:
        return False, None, None, "grammar_rejected"
    try:
        if isinstance(spec, ChoiceFormat):
            index = spec.index_of(raw)
            norm = index / (spec.n - 1) if spec.n > 1 else 0.0
            return True, float(index), norm, None
        value = spec.value_of(raw)
        return True, value, spec.normalized_value(raw), None
    except UnmappedSurfaceError:
        return True, None, None, "unmapped_surface"


def _run_cell(config: RunConfig, backend, item: BenchmarkItem, spec,
              repeat: int) -> RunRecord:
    prompt = config.prompt_prefix + render_prompt(item, spec) + config.prompt_suffix
    start = time.monotonic()
    raw = backend.complete(item, spec, prompt)
    elapsed_ms = (time.monotonic() - start) * 1000.0
    valid, value, norm, failure = _classify(spec, item, raw)
    deterministic = getattr(backend, "deterministic", False)
    if isinstance(spec, ChoiceFormat):
        family, variant = "choice", spec.style
    else:
        family, variant = spec.family, spec.variant
    return RunRecord(
        schema_version=SCHEMA_VERSION,
        run_id=config.run_id,
        model=config.model,
        model_family=config.model_family,
        size_tag=config.size_tag,
        benchmark=item.kind,
        item_id=item.id,
        format_id=spec.spec_id,
        format_family=family,
        variant=variant,
        with_space=spec.treatments.with_space,
        with_newline=spec.treatments.with_newline,
        repeat=repeat,
        prompt_sha256=hashlib.sha256(prompt.encode()).hexdigest(),
        raw_output=raw,
        grammar_valid=valid,
        parsed_value=value,
        parsed_norm=norm,
        parse_failure=failure,
        human_label=item.human_label,
        gold_index=item.gold,
        n_choices=len(item.choices) or None,
        latency_ms=0.0 if deterministic else round(elapsed_ms, 3),
        timestamp=0.0 if deterministic else time.time(),
    )


def _build_backend(config: RunConfig):
    endpoint = os.environ.get(ENDPOINT_ENV) or config.backend
    if endpoint == "mock":
        return MockBackend(target_rho=config.target_rho, seed=config.seed)
    return HttpBackend(endpoint, config.params)


def plan_cells(config: RunConfig) -> list[tuple[BenchmarkItem, object, int]]:
    """The canonical cell list: benchmark order, item order, grid order."""
    cells: list[tuple[BenchmarkItem, object, int]] = []
    format_grid = config.format_grid()
    for kind, path in config.benchmarks:
        items = load_benchmark(path, kind, skip_bad=config.skip_bad)
        if config.sample_size > len(items):
            raise ConfigError(
                f"sample_size {config.sample_size} exceeds {path} size {len(items)}")
        sampled = sample_items(items, config.sample_size, config.seed)
        for item in sampled:
            if kind == "multiple-choice":
                grid = config.choice_grid(len(item.choices))
            else:
                grid = format_grid
            for spec in grid:
                for repeat in range(config.repeats):
                    cells.append((item, spec, repeat))
    return cells


def execute_run(config: RunConfig, backend=None) -> list[RunRecord]:
    """Run every (item x format x repeat) cell and append JSONL records.

    Already-completed cells of the same run id are skipped, making
    interrupted runs resumable without duplicate keys. Records are
    written in canonical cell order regardless of worker scheduling.
    """
    validate_config(config)
    backend = backend if backend is not None else _build_backend(config)
    cells = plan_cells(config)

    out_dir = os.path.dirname(os.path.abspath(config.output))
    os.makedirs(out_dir, exist_ok=True)

    done: set[str] = set()
    if os.path.exists(config.output):
        done, intact = _scan_resumable(config.output, config.run_id)
        with open(config.output, "r+b") as fh:
            fh.truncate(intact)

    pending: list[tuple[int, BenchmarkItem, object, int]] = []
    for idx, (item, spec, repeat) in enumerate(cells):
        key = f"{item.id}|{spec.spec_id}|{repeat}"
        if key not in done:
            pending.append((idx, item, spec, repeat))

    written: list[RunRecord] = []
    with open(config.output, "a", encoding="utf-8") as sink:
        if config.jobs == 1 or len(pending) <= 1:
            for _, item, spec, repeat in pending:
                record = _run_cell(config, backend, item, spec, repeat)
                sink.write(record.to_json() + "\n")
                sink.flush()
                written.append(record)
        else:
            results: dict[int, RunRecord] = {}
            emit_order = [idx for idx, *_ in pending]
            next_pos = 0
            with ThreadPoolExecutor(max_workers=config.jobs) as pool:
                futures = {
                    pool.submit(_run_cell, config, backend, item, spec, repeat): idx
                    for idx, item, spec, repeat in pending}
                for future in as_completed(futures):
                    results[futures[future]] = future.result()
                    while (next_pos < len(emit_order)
                           and emit_order[next_pos] in results):
                        record = results.pop(emit_order[next_pos])
                        sink.write(record.to_json() + "\n")
                        sink.flush()
                        written.append(record)
                        next_pos += 1
    audit_run(config, cells)
    return written


def audit_run(config: RunConfig, cells=None) -> None:
    """Verify records form a bijection with the planned cell grid."""
    if cells is None:
        cells = plan_cells(config)
    expected = {f"{item.id}|{spec.spec_id}|{repeat}" for item, spec, repeat in cells}
    seen: set[str] = set()
    for record in read_records(config.output):
        if record.get("run_id") != config.run_id:
            continue
        key = f"{record['item_id']}|{record['format_id']}|{record['repeat']}"
        if key in seen:
            raise RunIntegrityError(f"duplicate cell key {key}")
        seen.add(key)
    if seen != expected:
        missing = sorted(expected - seen)[:5]
        extra = sorted(seen - expected)[:5]
        raise RunIntegrityError(
            f"cell audit failed: {len(expected - seen)} missing "
            f"(e.g. {missing}), {len(seen - expected)} unexpected (e.g. {extra})")
