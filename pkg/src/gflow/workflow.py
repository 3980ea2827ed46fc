"""Pipeline definition language and per-sample task compilation.

A workflow file is line-oriented, Snakemake-flavored text:

    image : "gcr.io/proj/pipeline:1"
    referencefile : "store://refs/hg38"
    testsamplesize : 3

    rule align:
        input: ["{reference}/hg38.fa", "{workdir}/{sampleID}.fastq"]
        output: ["{workdir}/{sampleID}.bam"]
        params: tag = "{sampleID}"
        resources: machine = "n2-standard-4", disk_gb = 200, disk_class = "balanced"
        shell: "bwa mem {input} > {output}"

Top-level directives are unindented `key : value` lines; rule fields are
indented under a `rule <name>:` header. Strings are double-quoted, lists are
comma-separated inside square brackets, and `params`/`resources` take
comma-separated `key = value` assignments. `#` starts a comment outside
quotes.

Templates interpolate `{sampleID}`, `{workdir}`, `{reference}`,
`{config.<key>}`, `{params.<key>}` and, in commands only, `{input}` /
`{output}` (space-joined). Literal braces are written `{{` and `}}`.

Compilation instantiates one step per rule for a given sample, infers the
step DAG by exact matching of resolved output paths against resolved input
paths, and orders steps topologically (source order breaks ties).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import (
    BothCommands,
    CompileError,
    CycleError,
    DuplicateRule,
    MissingCommand,
    UnknownKeyword,
    UnresolvedInput,
    WorkflowSyntaxError,
)

TOP_LEVEL_KEYS = ("workdir", "configfile", "config", "image", "referencefile", "testsamplesize")
RULE_KEYS = ("input", "output", "params", "resources", "shell", "script", "metawrapper")
RESOURCE_KEYS = ("machine", "disk_gb", "disk_class")
DISK_CLASSES = ("standard", "balanced", "ssd")

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_RULE_HEADER_RE = re.compile(r"^rule\s+([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(#.*)?$")
_KEY_LINE_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*)$")
_URI_RE = re.compile(r"^[a-z][a-z0-9+.-]*://")


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ResourceRequest:
    """Requested compute shape for a step; unset fields inherit defaults."""

    machine: str | None = None
    disk_gb: int | None = None
    disk_class: str | None = None

    def merged_over(self, defaults: "ResourceRequest") -> "ResourceRequest":
        """Field-wise overlay: explicit fields win, unset fields fall back."""
        return ResourceRequest(
            machine=self.machine if self.machine is not None else defaults.machine,
            disk_gb=self.disk_gb if self.disk_gb is not None else defaults.disk_gb,
            disk_class=self.disk_class if self.disk_class is not None else defaults.disk_class,
        )


@dataclass(frozen=True)
class Rule:
    name: str
    input: tuple[str, ...] = ()
    output: tuple[str, ...] = ()
    params: tuple[tuple[str, str], ...] = ()
    resources: ResourceRequest | None = None
    shell: str | None = None
    script: str | None = None
    metawrapper: str | None = None
    line: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Workflow:
    name: str
    rules: tuple[Rule, ...]
    workdir: str | None = None
    configfile: str | None = None
    config: str | None = None
    image: str | None = None
    referencefile: str | None = None
    testsamplesize: int | None = None
    source_dir: str | None = field(default=None, compare=False)

    def rule(self, name: str) -> Rule:
        for r in self.rules:
            if r.name == name:
                return r
        raise KeyError(name)

    def config_mapping(self, *, strict: bool = True) -> dict[str, str]:
        """Key-value pairs visible to templates as {config.<key>}.

        `configfile` is read relative to the workflow's source directory and
        inline `config` entries override it. With strict=False an unreadable
        or unlocatable configfile yields whatever could be loaded.
        """
        out: dict[str, str] = {}
        if self.configfile:
            if self.source_dir is None:
                if strict:
                    raise CompileError(
                        f"configfile {self.configfile!r} cannot be located: workflow has no source directory"
                    )
            else:
                path = Path(self.source_dir) / self.configfile
                try:
                    out.update(parse_config_text(path.read_text(encoding="utf-8")))
                except OSError as exc:
                    if strict:
                        raise CompileError(f"cannot read configfile {path}: {exc}") from exc
        if self.config:
            out.update(parse_config_text(self.config))
        return out


@dataclass(frozen=True)
class StepSpec:
    """One rule instantiated for one sample: the unit of placement."""

    rule_name: str
    resolved_command: str
    resolved_inputs: tuple[str, ...]
    resolved_outputs: tuple[str, ...]
    resources: ResourceRequest
    image: str | None = None


@dataclass(frozen=True)
class TaskPlan:
    """Per-sample DAG of steps, already in a valid topological order."""

    sample_id: str
    steps: tuple[StepSpec, ...]
    edges: tuple[tuple[str, str], ...]

    def step(self, rule_name: str) -> StepSpec:
        for s in self.steps:
            if s.rule_name == rule_name:
                return s
        raise KeyError(rule_name)


@dataclass(frozen=True)
class Diagnostic:
    message: str
    rule: str | None = None
    line: int | None = None

    def render(self, filename: str | None = None) -> str:
        where = filename or ""
        if self.line is not None:
            where += f":{self.line}"
        prefix = f"{where}: " if where else ""
        scope = f"[rule {self.rule}] " if self.rule else ""
        return f"{prefix}{scope}{self.message}"


# ---------------------------------------------------------------------------
# template interpolation

_TEMPLATE_RE = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)?)\}|[{}]")

BASE_TOKENS = ("sampleID", "workdir", "reference")
COMMAND_TOKENS = ("input", "output")


def template_tokens(template: str) -> list[str]:
    """Placeholder tokens referenced by a template, in order of appearance.

    Raises WorkflowSyntaxError on stray or unbalanced braces ({{ escapes a
    literal brace).
    """
    tokens = []
    for m in _TEMPLATE_RE.finditer(template):
        piece = m.group(0)
        if piece in ("{{", "}}"):
            continue
        if piece in ("{", "}"):
            raise WorkflowSyntaxError(f"stray {piece!r} in template {template!r}; use doubled braces for a literal")
        tokens.append(m.group(1))
    return tokens


def substitute(template: str, values: dict[str, str], *, context: str = "template") -> str:
    def repl(m: re.Match) -> str:
        piece = m.group(0)
        if piece == "{{":
            return "{"
        if piece == "}}":
            return "}"
        if piece in ("{", "}"):
            raise CompileError(f"stray {piece!r} in {context}: {template!r}")
        token = m.group(1)
        if token not in values:
            raise CompileError(f"unknown placeholder {{{token}}} in {context}")
        return values[token]

    return _TEMPLATE_RE.sub(repl, template)


def _scope_ok(token: str, *, params: bool, command: bool, rule: Rule, config_keys: set[str] | None) -> str | None:
    """Return an error message if `token` is not declared in this scope."""
    if token in BASE_TOKENS:
        return None
    if token in COMMAND_TOKENS:
        return None if command else f"{{{token}}} is only available in shell/script templates"
    if token.startswith("config."):
        key = token.split(".", 1)[1]
        if config_keys is not None and key not in config_keys:
            return f"{{{token}}} refers to an undefined config key"
        return None
    if token.startswith("params."):
        if params:
            return f"{{{token}}} cannot be used inside params values"
        key = token.split(".", 1)[1]
        if key not in {k for k, _ in rule.params}:
            return f"{{{token}}} refers to an undeclared param"
        return None
    return f"undeclared placeholder {{{token}}}"


# ---------------------------------------------------------------------------
# value parsing


class _ValueParser:
    """Cursor over the value part of a `key: value` line."""

    def __init__(self, text: str, line_no: int, col_offset: int):
        self.text = text
        self.pos = 0
        self.line_no = line_no
        self.col_offset = col_offset

    def error(self, message: str) -> WorkflowSyntaxError:
        return WorkflowSyntaxError(message, self.line_no, self.col_offset + self.pos + 1)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def expect_end(self):
        if not self.at_end():
            raise self.error(f"unexpected trailing text {self.text[self.pos:]!r}")

    def parse_string(self) -> str:
        if self.peek() != '"':
            raise self.error("expected a double-quoted string")
        self.pos += 1
        out: list[str] = []
        while True:
            if self.pos >= len(self.text):
                raise self.error("unterminated string literal")
            ch = self.text[self.pos]
            if ch == '"':
                self.pos += 1
                return "".join(out)
            if ch == "\\":
                self.pos += 1
                if self.pos >= len(self.text):
                    raise self.error("dangling escape at end of string")
                esc = self.text[self.pos]
                mapped = {"\\": "\\", '"': '"', "n": "\n", "t": "\t"}.get(esc)
                if mapped is None:
                    raise self.error(f"unsupported escape \\{esc}")
                out.append(mapped)
            else:
                out.append(ch)
            self.pos += 1

    def parse_int(self) -> int:
        self.skip_ws()
        m = re.match(r"-?\d+", self.text[self.pos:])
        if not m:
            raise self.error("expected an integer")
        self.pos += len(m.group(0))
        return int(m.group(0))

    def parse_scalar(self) -> str | int:
        return self.parse_string() if self.peek() == '"' else self.parse_int()

    def parse_string_list(self) -> list[str]:
        """Either `["a", "b"]` or a bare string as a one-element list."""
        if self.peek() == '"':
            return [self.parse_string()]
        self.expect("[")
        items: list[str] = []
        if self.peek() == "]":
            self.pos += 1
            return items
        while True:
            items.append(self.parse_string())
            ch = self.peek()
            if ch == ",":
                self.pos += 1
                continue
            if ch == "]":
                self.pos += 1
                return items
            raise self.error("expected ',' or ']' in list")

    def parse_kv_list(self) -> list[tuple[str, str | int]]:
        pairs: list[tuple[str, str | int]] = []
        seen: set[str] = set()
        while True:
            self.skip_ws()
            m = re.match(r"[A-Za-z_][A-Za-z0-9_]*", self.text[self.pos:])
            if not m:
                raise self.error("expected a parameter name")
            key = m.group(0)
            if key in seen:
                raise self.error(f"duplicate parameter {key!r}")
            seen.add(key)
            self.pos += len(key)
            self.expect("=")
            pairs.append((key, self.parse_scalar()))
            if self.peek() != ",":
                self.expect_end()
                return pairs
            self.pos += 1


def _strip_comment(line: str) -> str:
    """Drop a trailing `#` comment, respecting double-quoted strings."""
    out = []
    in_str = False
    i = 0
    while i < len(line):
        ch = line[i]
        if in_str:
            if ch == "\\" and i + 1 < len(line):
                out.append(line[i:i + 2])
                i += 2
                continue
            if ch == '"':
                in_str = False
        else:
            if ch == '"':
                in_str = True
            elif ch == "#":
                break
        out.append(ch)
        i += 1
    return "".join(out)


def _parse_resources(parser: _ValueParser) -> ResourceRequest:
    machine = disk_class = None
    disk_gb = None
    for key, value in parser.parse_kv_list():
        if key == "machine":
            if not isinstance(value, str):
                raise parser.error("machine must be a string")
            machine = value
        elif key == "disk_gb":
            if not isinstance(value, int):
                raise parser.error("disk_gb must be an integer")
            if value < 10:
                raise parser.error("disk_gb must be at least 10")
            disk_gb = value
        elif key == "disk_class":
            if value not in DISK_CLASSES:
                raise parser.error(f"disk_class must be one of {', '.join(DISK_CLASSES)}")
            disk_class = value
        else:
            raise UnknownKeyword(f"unknown resource field {key!r}", parser.line_no)
    return ResourceRequest(machine=machine, disk_gb=disk_gb, disk_class=disk_class)


# ---------------------------------------------------------------------------
# parsing


def parse_workflow(text: str, name: str = "workflow") -> Workflow:
    """Parse workflow source into a Workflow.

    Enforces the structural invariants: unique rule names, each directive at
    most once, exactly one of shell/script per rule, testsamplesize >= 1.
    Unknown keywords are rejected rather than ignored.
    """
    directives: dict[str, object] = {}
    rules: list[Rule] = []
    rule_names: set[str] = set()
    current: dict[str, object] | None = None
    current_line = 0

    def finish_rule():
        nonlocal current
        if current is None:
            return
        if current.get("shell") is None and current.get("script") is None:
            raise MissingCommand(f"rule {current['name']!r} needs a shell or script command", current["line"])
        if current.get("shell") is not None and current.get("script") is not None:
            raise BothCommands(f"rule {current['name']!r} declares both shell and script", current["line"])
        rules.append(
            Rule(
                name=current["name"],
                input=tuple(current.get("input", ())),
                output=tuple(current.get("output", ())),
                params=tuple(current.get("params", ())),
                resources=current.get("resources"),
                shell=current.get("shell"),
                script=current.get("script"),
                metawrapper=current.get("metawrapper"),
                line=current["line"],
            )
        )
        current = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        indented = line[0] in " \t"
        stripped = line.strip()

        header = _RULE_HEADER_RE.match(stripped)
        if header and not indented:
            finish_rule()
            rname = header.group(1)
            if rname in rule_names:
                raise DuplicateRule(f"rule {rname!r} defined twice", line_no)
            rule_names.add(rname)
            current = {"name": rname, "line": line_no}
            continue

        key_match = _KEY_LINE_RE.match(stripped)
        if not key_match:
            raise WorkflowSyntaxError(f"cannot parse line {stripped!r}", line_no)
        key, value_text = key_match.groups()
        parser = _ValueParser(value_text, line_no, len(line) - len(value_text))

        if indented:
            if current is None:
                raise WorkflowSyntaxError("indented line outside a rule block", line_no)
            if key not in RULE_KEYS:
                raise UnknownKeyword(f"unknown rule keyword {key!r}", line_no)
            if key in current:
                raise WorkflowSyntaxError(f"rule field {key!r} given twice", line_no)
            if key in ("input", "output"):
                current[key] = parser.parse_string_list()
                parser.expect_end()
            elif key == "params":
                pairs = parser.parse_kv_list()
                current[key] = [(k, str(v)) for k, v in pairs]
            elif key == "resources":
                current[key] = _parse_resources(parser)
            else:  # shell, script, metawrapper
                current[key] = parser.parse_string()
                parser.expect_end()
        else:
            finish_rule()
            if key == "rule":
                raise WorkflowSyntaxError("malformed rule header (expected `rule <name>:`)", line_no)
            if key not in TOP_LEVEL_KEYS:
                raise UnknownKeyword(f"unknown keyword {key!r}", line_no)
            if key in directives:
                raise WorkflowSyntaxError(f"directive {key!r} given twice", line_no)
            if key == "testsamplesize":
                size = parser.parse_int()
                parser.expect_end()
                if size < 1:
                    raise WorkflowSyntaxError("testsamplesize must be >= 1", line_no)
                directives[key] = size
            else:
                directives[key] = parser.parse_string()
                parser.expect_end()

    finish_rule()
    if not rules:
        raise WorkflowSyntaxError("no rules defined")
    return Workflow(name=name, rules=tuple(rules), **directives)


def _quote(s: str) -> str:
    escaped = s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
    return f'"{escaped}"'


def serialize_workflow(w: Workflow) -> str:
    """Render a Workflow back to canonical source text (parse round-trips)."""
    lines: list[str] = []
    for key in TOP_LEVEL_KEYS:
        value = getattr(w, key)
        if value is None:
            continue
        lines.append(f"{key} : {value if key == 'testsamplesize' else _quote(value)}")
    for rule in w.rules:
        if lines:
            lines.append("")
        lines.append(f"rule {rule.name}:")
        if rule.input:
            lines.append("    input: [" + ", ".join(_quote(p) for p in rule.input) + "]")
        if rule.output:
            lines.append("    output: [" + ", ".join(_quote(p) for p in rule.output) + "]")
        if rule.params:
            lines.append("    params: " + ", ".join(f"{k} = {_quote(v)}" for k, v in rule.params))
        if rule.resources is not None:
            parts = []
            if rule.resources.machine is not None:
                parts.append(f"machine = {_quote(rule.resources.machine)}")
            if rule.resources.disk_gb is not None:
                parts.append(f"disk_gb = {rule.resources.disk_gb}")
            if rule.resources.disk_class is not None:
                parts.append(f"disk_class = {_quote(rule.resources.disk_class)}")
            lines.append("    resources: " + ", ".join(parts))
        if rule.shell is not None:
            lines.append(f"    shell: {_quote(rule.shell)}")
        if rule.script is not None:
            lines.append(f"    script: {_quote(rule.script)}")
        if rule.metawrapper is not None:
            lines.append(f"    metawrapper: {_quote(rule.metawrapper)}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` pairs separated by newlines or commas.

    Values may be double-quoted (to protect commas); `#` comments and blank
    entries are ignored. Later duplicates win.
    """
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = _strip_comment(line)
        if not line.strip():
            continue
        parser = _ValueParser(line.strip(), 0, 0)
        while not parser.at_end():
            m = re.match(r"[A-Za-z_][A-Za-z0-9_.]*", parser.text[parser.pos:])
            if not m:
                raise WorkflowSyntaxError(f"cannot parse config entry {line.strip()!r}")
            key = m.group(0)
            parser.pos += len(key)
            parser.expect("=")
            if parser.peek() == '"':
                value = parser.parse_string()
            else:
                end = parser.text.find(",", parser.pos)
                end = len(parser.text) if end < 0 else end
                value = parser.text[parser.pos:end].strip()
                parser.pos = end
            out[key] = value
            if parser.peek() == ",":
                parser.pos += 1
    return out


# ---------------------------------------------------------------------------
# validation


_PROBE_SAMPLE = "sample-0"
_PROBE_REFERENCE = "ref://staging"


def validate_workflow(w: Workflow, catalog=None) -> list[Diagnostic]:
    """Semantic checks; returns diagnostics instead of raising.

    Empty result means: machine names in resources parse (and resolve in
    `catalog` when one is given), every placeholder is declared for its
    scope, all inputs are resolvable, and the inter-rule dependency graph is
    acyclic; in other words, compile_task will succeed for any sample ID.
    """
    from .catalog import parse_machine_name  # local import to avoid cycles
    from .errors import CatalogError

    diags: list[Diagnostic] = []
    try:
        config_keys: set[str] | None = set(w.config_mapping(strict=True))
    except CompileError as exc:
        config_keys = None
        if w.source_dir is not None:
            diags.append(Diagnostic(str(exc)))

    for rule in w.rules:
        if rule.resources and rule.resources.machine:
            try:
                parse_machine_name(rule.resources.machine)
            except CatalogError as exc:
                diags.append(Diagnostic(str(exc), rule=rule.name, line=rule.line))
            else:
                if catalog is not None and not catalog.has_machine(rule.resources.machine):
                    diags.append(
                        Diagnostic(f"machine {rule.resources.machine!r} not in catalog", rule=rule.name, line=rule.line)
                    )

        def check(template: str, *, params: bool = False, command: bool = False, rule=rule):
            try:
                tokens = template_tokens(template)
            except WorkflowSyntaxError as exc:
                diags.append(Diagnostic(str(exc), rule=rule.name, line=rule.line))
                return
            for token in tokens:
                msg = _scope_ok(token, params=params, command=command, rule=rule, config_keys=config_keys)
                if msg:
                    diags.append(Diagnostic(msg, rule=rule.name, line=rule.line))
                elif token == "workdir" and w.workdir is None:
                    diags.append(Diagnostic("{workdir} used but no workdir directive set", rule=rule.name, line=rule.line))

        for _, v in rule.params:
            check(v, params=True)
        for p in rule.input + rule.output:
            check(p)
        if rule.shell is not None:
            check(rule.shell, command=True)
        if rule.script is not None:
            check(rule.script, command=True)

    outputs_seen: dict[str, str] = {}
    for rule in w.rules:
        for pattern in rule.output:
            if pattern in outputs_seen and outputs_seen[pattern] != rule.name:
                diags.append(
                    Diagnostic(
                        f"output {pattern!r} also produced by rule {outputs_seen[pattern]!r} (ambiguous producer)",
                        rule=rule.name,
                        line=rule.line,
                    )
                )
            outputs_seen.setdefault(pattern, rule.name)

    if not diags:
        # Structure is sound; probe-compile to surface dependency problems.
        try:
            compile_task(w, _PROBE_SAMPLE, ResourceRequest(), _PROBE_REFERENCE)
        except (UnresolvedInput, CycleError) as exc:
            diags.append(Diagnostic(str(exc)))
        except CompileError as exc:
            diags.append(Diagnostic(str(exc)))
    return diags


# ---------------------------------------------------------------------------
# compilation


def _resolve_rule(rule: Rule, ctx: dict[str, str]) -> tuple[dict[str, str], list[str], list[str]]:
    params: dict[str, str] = {}
    for key, template in rule.params:
        params[key] = substitute(template, ctx, context=f"params of rule {rule.name!r}")
    path_ctx = dict(ctx)
    path_ctx.update({f"params.{k}": v for k, v in params.items()})
    inputs = [substitute(p, path_ctx, context=f"input of rule {rule.name!r}") for p in rule.input]
    outputs = [substitute(p, path_ctx, context=f"output of rule {rule.name!r}") for p in rule.output]
    return path_ctx, inputs, outputs


def infer_edges(resolved: list[tuple[str, list[str], list[str]]]) -> list[tuple[str, str]]:
    """Dependency edges from exact (output, input) path matches.

    `resolved` is a list of (rule_name, inputs, outputs). A duplicate
    producer for the same path is a CompileError because the match would be
    ambiguous.
    """
    producer: dict[str, str] = {}
    for name, _, outputs in resolved:
        for path in outputs:
            if path in producer and producer[path] != name:
                raise CompileError(f"output {path!r} produced by both {producer[path]!r} and {name!r}")
            producer[path] = name
    edges: list[tuple[str, str]] = []
    for name, inputs, _ in resolved:
        for path in inputs:
            src = producer.get(path)
            if src is not None and (src, name) not in edges:
                edges.append((src, name))
    return edges


def _toposort(names: list[str], edges: list[tuple[str, str]]) -> list[str]:
    """Kahn's algorithm; among ready nodes the earliest source index wins."""
    index = {n: i for i, n in enumerate(names)}
    indeg = {n: 0 for n in names}
    succ: dict[str, list[str]] = {n: [] for n in names}
    for a, b in edges:
        indeg[b] += 1
        succ[a].append(b)
    ready = sorted((n for n in names if indeg[n] == 0), key=index.__getitem__)
    order: list[str] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        changed = False
        for nxt in succ[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
                changed = True
        if changed:
            ready.sort(key=index.__getitem__)
    if len(order) != len(names):
        stuck = sorted(n for n in names if indeg[n] > 0)
        raise CycleError(f"cycle involving {', '.join(stuck)}")
    return order


def compile_task(
    w: Workflow,
    sample_id: str,
    defaults: ResourceRequest,
    reference_root: str | Path,
) -> TaskPlan:
    """Instantiate the workflow for one sample.

    Pure: identical inputs yield an identical plan. Every step gets effective
    resources (rule request overlaid on `defaults`) and a fully substituted
    command. Inputs that no rule produces must be external URIs or live under
    `reference_root`, otherwise UnresolvedInput is raised.
    """
    reference_root = str(reference_root)
    ctx: dict[str, str] = {
        "sampleID": sample_id,
        "workdir": w.workdir or "",
        "reference": reference_root,
    }
    try:
        config = w.config_mapping(strict=True)
    except CompileError:
        # Missing configfile only matters if a template actually reads from it;
        # substitution will fail with "unknown placeholder" in that case.
        config = w.config_mapping(strict=False)
    ctx.update({f"config.{k}": v for k, v in config.items()})

    resolved: list[tuple[str, list[str], list[str]]] = []
    commands: dict[str, str] = {}
    for rule in w.rules:
        path_ctx, inputs, outputs = _resolve_rule(rule, ctx)
        cmd_ctx = dict(path_ctx)
        cmd_ctx["input"] = " ".join(inputs)
        cmd_ctx["output"] = " ".join(outputs)
        if rule.shell is not None:
            command = substitute(rule.shell, cmd_ctx, context=f"shell of rule {rule.name!r}")
        else:
            script_path = substitute(rule.script, cmd_ctx, context=f"script of rule {rule.name!r}")
            command = f"bash {script_path}"
        commands[rule.name] = command
        resolved.append((rule.name, inputs, outputs))

    edges = infer_edges(resolved)
    produced = {path for _, _, outputs in resolved for path in outputs}
    for name, inputs, _ in resolved:
        for path in inputs:
            if path in produced:
                continue
            if _URI_RE.match(path) or path.startswith(reference_root):
                continue
            raise UnresolvedInput(
                f"input {path!r} of rule {name!r} matches no rule output and is neither "
                "an external URI nor under the reference staging area"
            )

    order = _toposort([name for name, _, _ in resolved], edges)
    by_name = {name: (inputs, outputs) for name, inputs, outputs in resolved}
    rules_by_name = {r.name: r for r in w.rules}
    steps = []
    for name in order:
        rule = rules_by_name[name]
        inputs, outputs = by_name[name]
        effective = (rule.resources or ResourceRequest()).merged_over(defaults)
        steps.append(
            StepSpec(
                rule_name=name,
                resolved_command=commands[name],
                resolved_inputs=tuple(inputs),
                resolved_outputs=tuple(outputs),
                resources=effective,
                image=w.image,
            )
        )
    return TaskPlan(sample_id=sample_id, steps=tuple(steps), edges=tuple(edges))


def apply_resources(plan: TaskPlan, per_rule: dict[str, ResourceRequest]) -> TaskPlan:
    """Replace step resources with a per-rule mapping (e.g. an optimized set).

    Rules absent from the mapping keep their current effective resources.
    """
    steps = tuple(
        replace(s, resources=per_rule[s.rule_name]) if s.rule_name in per_rule else s
        for s in plan.steps
    )
    return replace(plan, steps=steps)


def plan_to_dict(plan: TaskPlan) -> dict:
    """JSON-ready form of a plan (the `plan` CLI subcommand output)."""
    return {
        "sample_id": plan.sample_id,
        "steps": [
            {
                "rule": s.rule_name,
                "command": s.resolved_command,
                "inputs": list(s.resolved_inputs),
                "outputs": list(s.resolved_outputs),
                "resources": {
                    "machine": s.resources.machine,
                    "disk_gb": s.resources.disk_gb,
                    "disk_class": s.resources.disk_class,
                },
                "image": s.image,
            }
            for s in plan.steps
        ],
        "edges": [list(e) for e in plan.edges],
    }
