"""SynO benchmark generation and LLM curation prompts for real-image subsets."""
import hashlib
import json
import re
import subprocess
import warnings
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

from flexedit.constraints import ADD, KINDS, REMOVE, REPLACE

SOURCE_TEMPLATE = "A photo of {a} {c}."
TARGET_TEMPLATES = {
    REPLACE: "A photo of {b} {c}.",
    ADD: "A photo of {a} and {b} {c}.",
    REMOVE: "A photo of {c}.",
}
INSTRUCTION_TEMPLATES = {
    REPLACE: "Turn {a} into {b}.",
    ADD: "Add {b} next to {a}",
    REMOVE: "Remove {a}.",
}

CURATION_ROLE = "You are a friendly chatbot who always responds in the style of programmer"
CURATION_TEMPLATES = {
    REPLACE: ("Given the Instruction: {instruction} for object replacement in image editing task. "
              "Return in the following string format without any further explanation: "
              "A-B where A is the source object and B is the target object."),
    REMOVE: ("Given the Instruction: `{instruction}' for object removal in image editing task. "
             "Return in the following string format without any further explanation: "
             "A-B where A is the source object to be removed and B is None."),
    ADD: ("Given the Instruction: {instruction} for object adding in image editing task. "
          "Return in the following string format without any further explanation: "
          "A-B where A is the new object being added, and B is the specified position of where to add object, "
          "if there is no position being mentioned, B is None."),
}
RESPONSE_GRAMMAR = "A-B"


class CurationParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}: {raw!r}")
        self.raw = raw


@dataclass
class ObjectGroup:
    name: str
    list_objects: List[str]
    background: List[str]


@dataclass
class BenchSample:
    id: str
    task: str
    source_prompt: str
    target_prompt: str
    instruction: str
    source_object: str
    target_object: Optional[str]
    background: str
    group: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class CurationPrompt:
    kind: str
    prompt: str
    role: str = CURATION_ROLE
    grammar: str = RESPONSE_GRAMMAR


def load_groups(path=None) -> List[ObjectGroup]:
    """Read a groups config (``{"group1": {"name", "list_objects", "background"}, ...}``)."""
    if path is None:
        text = resources.files("flexedit").joinpath("data/syno_groups.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    return [ObjectGroup(g["name"], list(g["list_objects"]), list(g["background"])) for g in raw.values()]


def _sample_id(task: str, source_prompt: str, target_prompt: str, instruction: str) -> str:
    content = "\x1f".join([task, source_prompt, target_prompt, instruction])
    return hashlib.sha1(content.encode("utf-8")).hexdigest()[:12]


def render(task: str, a: str, b: Optional[str], c: str, group: str = "") -> BenchSample:
    if task not in KINDS:
        raise ValueError(f"unknown task kind {task!r}")
    src = SOURCE_TEMPLATE.format(a=a, c=c)
    tgt = TARGET_TEMPLATES[task].format(a=a, b=b, c=c)
    instr = INSTRUCTION_TEMPLATES[task].format(a=a, b=b)
    return BenchSample(_sample_id(task, src, tgt, instr), task, src, tgt, instr, a,
                       None if task == REMOVE else b, c, group)


def gen_syno(groups: Sequence[ObjectGroup]) -> List[BenchSample]:
    """Fill the SynO templates from object groups.

    Replacement and addition use every ordered pair of distinct objects within
    a group; removal uses every object. Each is crossed with the group's
    backgrounds, ordered by task, then (group, A, B, background).
    """
    out = {REPLACE: [], ADD: [], REMOVE: []}
    for group in groups:
        if not group.background:
            raise ValueError(f"group {group.name!r} has no backgrounds")
        if len(group.list_objects) < 2:
            warnings.warn(f"group {group.name!r} has fewer than 2 objects; no pair samples generated")
        for a in group.list_objects:
            for b in group.list_objects:
                if a == b:
                    continue
                for c in group.background:
                    out[REPLACE].append(render(REPLACE, a, b, c, group.name))
                    out[ADD].append(render(ADD, a, b, c, group.name))
            for c in group.background:
                out[REMOVE].append(render(REMOVE, a, None, c, group.name))
    return out[REPLACE] + out[ADD] + out[REMOVE]


_INSTRUCTION_PATTERNS = {
    REPLACE: re.compile(r"^Turn (?P<a>.+) into (?P<b>.+)\.$"),
    ADD: re.compile(r"^Add (?P<b>.+) next to (?P<a>.+)$"),
    REMOVE: re.compile(r"^Remove (?P<a>.+)\.$"),
}


def recognize(task: str, source_prompt: str, target_prompt: str, instruction: str) -> Tuple[str, Optional[str], str]:
    """Recover ``(A, B, C)`` from a sample's text; raises ``ValueError`` if it does not fit the templates."""
    m = _INSTRUCTION_PATTERNS[task].match(instruction)
    if m is None:
        raise ValueError(f"instruction does not match the {task} template: {instruction!r}")
    a = m.group("a")
    b = m.groupdict().get("b")
    prefix = f"A photo of {a} "
    if not (source_prompt.startswith(prefix) and source_prompt.endswith(".")):
        raise ValueError(f"source prompt does not match the template: {source_prompt!r}")
    c = source_prompt[len(prefix):-1]
    if render(task, a, b, c).target_prompt != target_prompt:
        raise ValueError(f"target prompt does not match the {task} template: {target_prompt!r}")
    return a, b, c


def write_manifest(samples: Sequence[BenchSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def build_curation_prompt(kind: str, instruction: str) -> CurationPrompt:
    if kind not in CURATION_TEMPLATES:
        raise ValueError(f"unknown task kind {kind!r}")
    return CurationPrompt(kind, CURATION_TEMPLATES[kind].format(instruction=instruction))


def parse_curation_response(text: str) -> Tuple[str, Optional[str]]:
    """Split an ``A-B`` answer on its last hyphen; ``None`` becomes ``None``."""
    raw = text
    text = text.strip().strip("\"'`").strip()
    if "-" not in text:
        raise CurationParseError("no 'A-B' separator in response", raw)
    a, b = text.rsplit("-", 1)
    a, b = a.strip(), b.strip()
    if not a or not b:
        raise CurationParseError("empty field in response", raw)
    return a, None if b.lower() == "none" else b


class ReplayClient:
    """Answers prompts from a recorded transcript (JSON-lines of ``{prompt, response, parsed}``)."""

    def __init__(self, transcript_path):
        self.responses: Dict[str, str] = {}
        with open(transcript_path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self.responses[rec["prompt"]] = rec["response"]

    def complete(self, prompt: CurationPrompt) -> str:
        try:
            return self.responses[prompt.prompt]
        except KeyError:
            raise KeyError(f"prompt not in transcript: {prompt.prompt[:60]!r}...") from None


class CommandClient:
    """Runs an external command per prompt: prompt text on stdin, answer on stdout."""

    def __init__(self, command: Sequence[str], timeout: float = 120.0):
        self.command = list(command)
        self.timeout = timeout

    def complete(self, prompt: CurationPrompt) -> str:
        proc = subprocess.run(self.command, input=f"{prompt.role}\n\n{prompt.prompt}", capture_output=True,
                              text=True, timeout=self.timeout, check=True)
        return proc.stdout


def curate(kind: str, instructions: Sequence[str], client) -> List[dict]:
    """Prompt the client for each instruction; returns transcript records."""
    records = []
    for instruction in instructions:
        prompt = build_curation_prompt(kind, instruction)
        response = client.complete(prompt)
        rec = {"kind": kind, "instruction": instruction, "prompt": prompt.prompt, "response": response}
        try:
            a, b = parse_curation_response(response)
            rec["parsed"] = {"A": a, "B": b}
        except CurationParseError as exc:
            rec["parsed"] = None
            rec["error"] = str(exc)
        records.append(rec)
    return records


def write_transcript(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
